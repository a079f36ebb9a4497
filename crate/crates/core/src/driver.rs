//! Chain orchestration: initialization, burn-in, storage, thinning,
//! checkpoints and independent parallel chains.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::Problem;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_table, write_table};
use crate::linalg;
use crate::samplers::{sweep, McmcTuning, SweepTallies, Tally};
use crate::types::{alpha_index, n_alpha, LatentState, Parameters, Variant};

/// Name of the checkpoint file inside a chain directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_MAGIC: &[u8; 8] = b"FMRSVCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_burn: usize,
    pub n_keep: usize,
    /// Keep every `thin`-th retained latent path; 0 keeps none.
    pub thin: usize,
    pub seed: u64,
    pub n_chains: usize,
    /// Sweeps between checkpoints; 0 disables checkpointing.
    pub checkpoint_every: usize,
    pub tuning: McmcTuning,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_burn: 2000,
            n_keep: 10000,
            thin: 10,
            seed: 1,
            n_chains: 1,
            checkpoint_every: 1000,
            tuning: McmcTuning::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::validation("at least one chain is required"));
        }
        self.tuning.validate()
    }
}

/// Random stream of chain `chain` under `seed`; independent of how many
/// chains run or in which order.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Parameter groups in storage order with their entry names.
pub fn param_groups(p: usize, q: usize) -> Vec<(&'static str, Vec<String>)> {
    let vec_names = |name: &str, n: usize| (1..=n).map(|i| format!("{name}.{i}")).collect::<Vec<_>>();
    let mut alpha = Vec::with_capacity(n_alpha(q));
    for j in 1..q {
        for k in 0..j {
            alpha.push(format!("alpha.{}.{}", j + 1, k + 1));
        }
    }
    let mut beta = Vec::with_capacity(p * q);
    for i in 0..p {
        for k in 0..q {
            beta.push(format!("beta.{}.{}", i + 1, k + 1));
        }
    }
    vec![
        ("alpha", alpha),
        ("beta", beta),
        ("mu", vec_names("mu", p + q)),
        ("gamma", vec_names("gamma", q)),
        ("phi", vec_names("phi", p + q)),
        ("psi", vec_names("psi", q)),
        ("rho", vec_names("rho", q)),
        ("sigma_eta", vec_names("sigma_eta", p + q)),
        ("sigma_nu", vec_names("sigma_nu", q)),
        ("delta", vec!["delta".to_string()]),
    ]
}

pub fn param_names(p: usize, q: usize) -> Vec<String> {
    param_groups(p, q).into_iter().flat_map(|(_, n)| n).collect()
}

/// Parameters as one vector in [`param_names`] order.
pub fn flatten(params: &Parameters) -> Vec<f64> {
    let (p, q) = (params.p(), params.q());
    let mut out = Vec::with_capacity(param_names(p, q).len());
    for j in 1..q {
        for k in 0..j {
            out.push(params.alpha[alpha_index(j, k)]);
        }
    }
    for i in 0..p {
        out.extend(params.beta.row(i).iter());
    }
    for v in [&params.mu, &params.gamma, &params.phi, &params.psi, &params.rho, &params.sigma_eta, &params.sigma_nu] {
        out.extend(v.iter());
    }
    out.push(params.delta);
    out
}

pub fn unflatten(p: usize, q: usize, v: &[f64]) -> Result<Parameters> {
    let want = param_names(p, q).len();
    if v.len() != want {
        return Err(Error::validation(format!("expected {want} parameter values, got {}", v.len())));
    }
    let mut it = v.iter().copied();
    let mut next = |n: usize| DVector::from_iterator(n, it.by_ref().take(n));
    let mut params = Parameters::zeros(p, q);
    params.alpha = next(n_alpha(q)).iter().copied().collect();
    let beta = next(p * q);
    params.beta = DMatrix::from_row_slice(p, q, beta.as_slice());
    params.mu = next(p + q);
    params.gamma = next(q);
    params.phi = next(p + q);
    params.psi = next(q);
    params.rho = next(q);
    params.sigma_eta = next(p + q);
    params.sigma_nu = next(q);
    params.delta = next(1)[0];
    Ok(params)
}

fn sample_sd(col: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = col.clone().count() as f64;
    let mean = col.clone().sum::<f64>() / n;
    (col.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Starting values: log realized (or sample) variances for the idiosyncratic
/// log-volatilities, principal-component scores for the factors, prior means
/// for location parameters and fixed values elsewhere.
pub fn initialize_state(problem: &Problem) -> Result<(Parameters, LatentState)> {
    let (n, p, q) = (problem.t(), problem.p(), problem.q());
    let data = &problem.data;
    let priors = &problem.priors;

    let means = DVector::from_fn(p, |i, _| data.y.column(i).mean());
    let mut centered = data.y.clone();
    for i in 0..p {
        centered.column_mut(i).add_scalar_mut(-means[i]);
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = linalg::sym_eigen(&cov)?;
    let mut f = DMatrix::zeros(n, q);
    // relative to the raw second moment so rounding noise in a constant
    // panel counts as degenerate
    let scale = data.y.norm_squared() / n as f64;
    for k in 0..q {
        if !(eig.values[k] > 1e-12 * scale) {
            log::warn!("returns have fewer than {q} non-degenerate principal components; factor {} starts at 0", k + 1);
            continue;
        }
        let mut v = eig.vectors.column(k).clone_owned();
        if v[0] < 0.0 {
            v = -v;
        }
        f.column_mut(k).copy_from(&(&centered * v));
    }

    let mut h = DMatrix::zeros(n, p + q);
    for i in 0..p {
        match &data.w {
            Some(w) if problem.config.variant.uses_rcov() => {
                for t in 0..n {
                    h[(t, i)] = w[t][(i, i)].ln();
                }
            }
            _ => {
                let var = sample_sd(data.y.column(i).iter().copied()).powi(2).max(1e-12);
                h.column_mut(i).fill(var.ln());
            }
        }
    }
    for k in 0..q {
        let var = sample_sd(f.column(k).iter().copied()).powi(2).max(1e-12);
        h.column_mut(p + k).fill(var.ln());
    }

    let mut params = Parameters::zeros(p, q);
    for j in 1..q {
        for k in 0..j {
            params.alpha[alpha_index(j, k)] = priors.m_alpha[j - 1][k];
        }
    }
    // least squares on the initial scores: the loading update is an
    // independence sampler, and a start far out in the tail of its
    // conditional (the prior mean 0) is never left
    let ftf = f.transpose() * &f;
    match linalg::cholesky(&ftf) {
        Ok(c) => params.beta = c.solve(&(f.transpose() * &data.y)).transpose(),
        Err(_) => {
            for i in 0..p {
                params.beta.row_mut(i).copy_from(&priors.m_beta[i].transpose());
            }
        }
    }
    params.mu = DVector::from_fn(p + q, |j, _| h.column(j).mean());
    params.gamma = priors.m_gamma.clone();
    params.phi.fill(0.9);
    params.psi.fill(0.1);
    params.rho.fill(0.0);
    params.sigma_eta.fill(0.2);
    for k in 0..q {
        params.sigma_nu[k] = (0.5 * sample_sd(data.x.column(k).iter().copied())).max(1e-3);
    }
    params.delta = 10.0;
    let state = LatentState { h, f };
    params.validate(&problem.config)?;
    state.validate(&problem.config)?;
    Ok((params, state))
}

/// One retained latent path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDraw {
    /// 0-based index among the retained draws.
    pub draw: usize,
    pub h: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

/// Output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStore {
    pub variant: Variant,
    pub p: usize,
    pub q: usize,
    pub t: usize,
    pub chain: usize,
    pub config: ChainConfig,
    pub names: Vec<String>,
    /// Retained parameter draws, one row each.
    pub draws: DMatrix<f64>,
    /// Terminal-period `(h_T, f_T)` of every retained draw.
    pub terminal: DMatrix<f64>,
    /// Posterior means of the latent paths.
    pub h_mean: DMatrix<f64>,
    pub f_mean: DMatrix<f64>,
    pub paths: Vec<PathDraw>,
    /// Acceptance counts over all sweeps, burn-in included.
    pub tallies: SweepTallies,
    /// Sampler state after the last sweep (for warm starts).
    pub last_params: Parameters,
    pub last_state: LatentState,
}

impl ChainStore {
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.draws.column(j).iter().copied().collect())
    }

    /// Retained draw `i` as `Parameters`.
    pub fn params_at(&self, i: usize) -> Result<Parameters> {
        let row: Vec<f64> = self.draws.row(i).iter().copied().collect();
        unflatten(self.p, self.q, &row)
    }
}

/// Running state of one chain, resumable from a checkpoint.
pub struct Chain<'a> {
    problem: &'a Problem,
    config: ChainConfig,
    chain: usize,
    done: usize,
    params: Parameters,
    state: LatentState,
    rng: ChaCha8Rng,
    draws: Vec<f64>,
    terminal: Vec<f64>,
    h_sum: DMatrix<f64>,
    f_sum: DMatrix<f64>,
    paths: Vec<PathDraw>,
    tallies: SweepTallies,
}

impl<'a> Chain<'a> {
    /// Fresh chain from [`initialize_state`].
    pub fn new(problem: &'a Problem, config: &ChainConfig, chain: usize) -> Result<Self> {
        let (params, state) = initialize_state(problem)?;
        Self::warm(problem, config, chain, params, state)
    }

    /// Chain started from given values (warm start).
    pub fn warm(
        problem: &'a Problem,
        config: &ChainConfig,
        chain: usize,
        params: Parameters,
        state: LatentState,
    ) -> Result<Self> {
        config.validate()?;
        params.validate(&problem.config)?;
        state.validate(&problem.config)?;
        let (n, p, q) = (problem.t(), problem.p(), problem.q());
        Ok(Chain {
            problem,
            config: config.clone(),
            chain,
            done: 0,
            params,
            state,
            rng: chain_rng(config.seed, chain),
            draws: Vec::new(),
            terminal: Vec::new(),
            h_sum: DMatrix::zeros(n, p + q),
            f_sum: DMatrix::zeros(n, q),
            paths: Vec::new(),
            tallies: SweepTallies::default(),
        })
    }

    pub fn total_sweeps(&self) -> usize {
        self.config.n_burn + self.config.n_keep
    }

    pub fn sweeps_done(&self) -> usize {
        self.done
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    /// Runs one sweep and records it if past burn-in.
    pub fn step(&mut self) -> Result<()> {
        let t = sweep(self.problem, &mut self.params, &mut self.state, &self.config.tuning, &mut self.rng, self.done)?;
        self.tallies.add(&t);
        if self.done >= self.config.n_burn {
            let kept = self.done - self.config.n_burn;
            self.draws.extend(flatten(&self.params));
            let last = self.problem.t() - 1;
            self.terminal.extend(self.state.h.row(last).iter());
            self.terminal.extend(self.state.f.row(last).iter());
            self.h_sum += &self.state.h;
            self.f_sum += &self.state.f;
            if self.config.thin > 0 && kept % self.config.thin == 0 {
                self.paths.push(PathDraw { draw: kept, h: self.state.h.clone(), f: self.state.f.clone() });
            }
        }
        self.done += 1;
        Ok(())
    }

    /// Runs until `until` sweeps are done (capped at the configured total),
    /// writing a checkpoint into `dir` at every multiple of
    /// `checkpoint_every`.
    pub fn run_until(&mut self, until: usize, dir: Option<&Path>) -> Result<()> {
        let until = until.min(self.total_sweeps());
        while self.done < until {
            self.step()?;
            let every = self.config.checkpoint_every;
            if let Some(dir) = dir {
                if every > 0 && self.done % every == 0 && self.done < self.total_sweeps() {
                    self.write_checkpoint(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> ChainStore {
        let (p, q, n) = (self.problem.p(), self.problem.q(), self.problem.t());
        let names = param_names(p, q);
        let kept = self.draws.len() / names.len();
        let denom = kept.max(1) as f64;
        ChainStore {
            variant: self.problem.config.variant,
            p,
            q,
            t: n,
            chain: self.chain,
            config: self.config,
            draws: DMatrix::from_row_slice(kept, names.len(), &self.draws),
            terminal: DMatrix::from_row_slice(kept, p + 2 * q, &self.terminal),
            h_mean: self.h_sum / denom,
            f_mean: self.f_sum / denom,
            names,
            paths: self.paths,
            tallies: self.tallies,
            last_params: self.params,
            last_state: self.state,
        }
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u64(self.chain as u64);
        w.u64(self.done as u64);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.bytes(&self.rng.get_word_pos().to_le_bytes());
        w.f64s(&flatten(&self.params));
        w.matrix(&self.state.h);
        w.matrix(&self.state.f);
        for (_, t) in self.tallies.entries() {
            w.u64(t.proposed);
            w.u64(t.accepted);
            w.u64(t.fallbacks);
        }
        w.f64s(&self.draws);
        w.f64s(&self.terminal);
        w.matrix(&self.h_sum);
        w.matrix(&self.f_sum);
        w.u64(self.paths.len() as u64);
        for path in &self.paths {
            w.u64(path.draw as u64);
            w.matrix(&path.h);
            w.matrix(&path.f);
        }
        w.0
    }

    pub fn write_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        fs::write(&tmp, self.checkpoint_bytes())?;
        fs::rename(tmp, dir.join(CHECKPOINT_FILE))?;
        Ok(())
    }

    /// Restores a chain from [`Chain::checkpoint_bytes`] output. The problem
    /// and config must be the ones the checkpoint was written with.
    pub fn resume(problem: &'a Problem, config: &ChainConfig, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a chain checkpoint".into()));
        }
        let chain = r.u64()? as usize;
        let done = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let params = unflatten(problem.p(), problem.q(), &r.f64s()?)?;
        let h = r.matrix()?;
        let f = r.matrix()?;
        let mut tallies = SweepTallies::default();
        let mut counts = Vec::new();
        for _ in 0..tallies.entries().len() {
            counts.push(Tally { proposed: r.u64()?, accepted: r.u64()?, fallbacks: r.u64()? });
        }
        tallies.set_all(&counts);
        let draws = r.f64s()?;
        let terminal = r.f64s()?;
        let h_sum = r.matrix()?;
        let f_sum = r.matrix()?;
        let n_paths = r.u64()? as usize;
        let mut paths = Vec::with_capacity(n_paths);
        for _ in 0..n_paths {
            let draw = r.u64()? as usize;
            paths.push(PathDraw { draw, h: r.matrix()?, f: r.matrix()? });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes in checkpoint".into()));
        }
        let state = LatentState { h, f };
        state.validate(&problem.config)?;
        if done > config.n_burn + config.n_keep {
            return Err(Error::validation("checkpoint is past the configured chain length"));
        }
        Ok(Chain {
            problem,
            config: config.clone(),
            chain,
            done,
            params,
            state,
            rng,
            draws,
            terminal,
            h_sum,
            f_sum,
            paths,
            tallies,
        })
    }
}

#[derive(Default)]
struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    /// Dimensions then column-major entries.
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.u64(m.nrows() as u64);
        self.f64s(m.as_slice());
    }
}

struct ByteReader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> ByteReader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Parse("bad checkpoint length".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.u64()? as usize;
        let data = self.f64s()?;
        if rows == 0 && !data.is_empty() || rows > 0 && data.len() % rows != 0 {
            return Err(Error::Parse("bad matrix in checkpoint".into()));
        }
        let cols = if rows == 0 { 0 } else { data.len() / rows };
        Ok(DMatrix::from_vec(rows, cols, data))
    }
}

/// Runs one chain to completion. With `dir`, checkpoints are written there
/// and an existing checkpoint is resumed from.
pub fn run_chain(problem: &Problem, config: &ChainConfig, chain: usize, dir: Option<&Path>) -> Result<ChainStore> {
    let mut runner = match dir.map(|d| d.join(CHECKPOINT_FILE)).filter(|p| p.exists()) {
        Some(path) => Chain::resume(problem, config, &fs::read(path)?)?,
        None => Chain::new(problem, config, chain)?,
    };
    let total = runner.total_sweeps();
    runner.run_until(total, dir)?;
    Ok(runner.finish())
}

/// Runs `config.n_chains` independent chains on up to `jobs` threads.
/// Chain `k` writes its checkpoints to `dirs[k]` when given.
pub fn run_chains(problem: &Problem, config: &ChainConfig, jobs: usize, dirs: Option<&[&Path]>) -> Result<Vec<ChainStore>> {
    config.validate()?;
    let n = config.n_chains;
    let jobs = jobs.clamp(1, n);
    let mut results: Vec<Option<Result<ChainStore>>> = (0..n).map(|_| None).collect();
    for start in (0..n).step_by(jobs) {
        let batch: Vec<usize> = (start..(start + jobs).min(n)).collect();
        let out: Vec<(usize, Result<ChainStore>)> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|&k| {
                    let dir = dirs.map(|d| d[k]);
                    (k, s.spawn(move || run_chain(problem, config, k, dir)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(k, h)| (k, h.join().unwrap_or_else(|_| Err(Error::numeric("chain thread panicked")))))
                .collect()
        });
        for (k, r) in out {
            results[k] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every chain ran")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRate {
    pub proposed: u64,
    pub accepted: u64,
    pub fallbacks: u64,
    pub rate: Option<f64>,
}

/// JSON manifest of a chain directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: Variant,
    pub p: usize,
    pub q: usize,
    pub t: usize,
    pub chain: usize,
    pub config: ChainConfig,
    pub n_draws: usize,
    pub names: Vec<String>,
    pub acceptance: BTreeMap<String, StepRate>,
    /// Free-form provenance (command-line settings and defaults).
    pub settings: BTreeMap<String, String>,
}

fn write_csv_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(header)?;
    for row in rows {
        wtr.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    wtr.flush()?;
    Ok(())
}

const STATE_H_FILE: &str = "state_h.csv";
const STATE_F_FILE: &str = "state_f.csv";

impl ChainStore {
    /// Writes the store: one CSV per parameter group, terminal latent draws,
    /// posterior-mean paths, thinned paths, the final sampler state and the
    /// manifest.
    pub fn write(&self, dir: &Path, settings: &BTreeMap<String, String>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (p, q) = (self.p, self.q);
        let mut col = 0;
        for (group, names) in param_groups(p, q) {
            let width = names.len();
            if width > 0 {
                let rows = (0..self.n_draws()).map(|i| self.draws.row(i).columns(col, width).iter().copied().collect());
                write_csv_rows(&dir.join(format!("{group}.csv")), &names, rows)?;
            }
            col += width;
        }
        let mut term_names: Vec<String> = (1..=p + q).map(|j| format!("h.{j}")).collect();
        term_names.extend((1..=q).map(|k| format!("f.{k}")));
        write_table(&dir.join("terminal.csv"), &term_names, None, &self.terminal)?;
        let h_names: Vec<String> = (1..=p + q).map(|j| format!("h.{j}")).collect();
        let f_names: Vec<String> = (1..=q).map(|k| format!("f.{k}")).collect();
        write_table(&dir.join("h_mean.csv"), &h_names, None, &self.h_mean)?;
        write_table(&dir.join("f_mean.csv"), &f_names, None, &self.f_mean)?;
        write_table(&dir.join(STATE_H_FILE), &h_names, None, &self.last_state.h)?;
        write_table(&dir.join(STATE_F_FILE), &f_names, None, &self.last_state.f)?;
        fs::write(dir.join("state_params.cfg"), crate::io::params_to_kv(&self.last_params))?;
        if !self.paths.is_empty() {
            let mut header = vec!["draw".to_string(), "t".to_string()];
            header.extend(h_names.iter().cloned());
            header.extend(f_names.iter().cloned());
            let rows = self.paths.iter().flat_map(|path| {
                (0..self.t).map(move |t| {
                    let mut row = vec![path.draw as f64, (t + 1) as f64];
                    row.extend(path.h.row(t).iter());
                    row.extend(path.f.row(t).iter());
                    row
                })
            });
            write_csv_rows(&dir.join("paths.csv"), &header, rows)?;
        }
        let acceptance = self
            .tallies
            .entries()
            .into_iter()
            .map(|(name, t)| {
                let rate = (t.proposed > 0).then(|| t.rate());
                (name.to_string(), StepRate { proposed: t.proposed, accepted: t.accepted, fallbacks: t.fallbacks, rate })
            })
            .collect();
        let manifest = Manifest {
            variant: self.variant,
            p,
            q,
            t: self.t,
            chain: self.chain,
            config: self.config.clone(),
            n_draws: self.n_draws(),
            names: self.names.clone(),
            acceptance,
            settings: settings.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    /// Reads a store written by [`ChainStore::write`]. Thinned paths are not
    /// read back.
    pub fn read(dir: &Path) -> Result<ChainStore> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let (p, q) = (manifest.p, manifest.q);
        let names = param_names(p, q);
        if names != manifest.names {
            return Err(Error::Parse("manifest parameter names do not match the dimensions".into()));
        }
        let n = manifest.n_draws;
        let mut draws = DMatrix::zeros(n, names.len());
        let mut col = 0;
        for (group, gnames) in param_groups(p, q) {
            let width = gnames.len();
            if width > 0 {
                let table = read_table(&dir.join(format!("{group}.csv")))?;
                if table.header != gnames || table.values.nrows() != n {
                    return Err(Error::Parse(format!("{group}.csv does not match the manifest")));
                }
                draws.columns_mut(col, width).copy_from(&table.values);
            }
            col += width;
        }
        let terminal = read_table(&dir.join("terminal.csv"))?.values;
        let h_mean = read_table(&dir.join("h_mean.csv"))?.values;
        let f_mean = read_table(&dir.join("f_mean.csv"))?.values;
        let state = LatentState { h: read_table(&dir.join(STATE_H_FILE))?.values, f: read_table(&dir.join(STATE_F_FILE))?.values };
        let mut last_params = Parameters::zeros(p, q);
        crate::io::apply_params_kv(&mut last_params, &crate::io::read_kv(&dir.join("state_params.cfg"))?)?;
        let mut tallies = SweepTallies::default();
        let counts: Vec<Tally> = tallies
            .entries()
            .iter()
            .map(|(name, _)| {
                manifest.acceptance.get(*name).map_or(Tally::default(), |s| Tally {
                    proposed: s.proposed,
                    accepted: s.accepted,
                    fallbacks: s.fallbacks,
                })
            })
            .collect();
        tallies.set_all(&counts);
        Ok(ChainStore {
            variant: manifest.variant,
            p,
            q,
            t: manifest.t,
            chain: manifest.chain,
            config: manifest.config,
            names,
            draws,
            terminal,
            h_mean,
            f_mean,
            paths: Vec::new(),
            tallies,
            last_params,
            last_state: state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::generate;
    use crate::types::{ModelConfig, PriorSpec};

    fn problem(variant: Variant, n: usize) -> Problem {
        let cfg = ModelConfig::new(3, 2, n, variant).unwrap();
        let params = Parameters::simulation_truth(3, 2);
        let (data, _) = generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        Problem::new(cfg, PriorSpec::vague(3, 2), data).unwrap()
    }

    fn small_config() -> ChainConfig {
        ChainConfig {
            n_burn: 5,
            n_keep: 12,
            thin: 4,
            seed: 3,
            n_chains: 1,
            checkpoint_every: 7,
            tuning: McmcTuning { n_blocks: Some(4), ..Default::default() },
        }
    }

    #[test]
    fn flatten_roundtrip_and_names() {
        let mut params = Parameters::simulation_truth(4, 3);
        params.alpha = vec![0.1, 0.2, 0.3];
        params.beta[(2, 1)] = -7.0;
        let v = flatten(&params);
        assert_eq!(v.len(), param_names(4, 3).len());
        assert_eq!(unflatten(4, 3, &v).unwrap(), params);
        let names = param_names(9, 2);
        assert_eq!(names.len(), 61);
        assert_eq!(names[0], "alpha.2.1");
        assert_eq!(names[1], "beta.1.1");
        assert_eq!(names[60], "delta");
    }

    #[test]
    fn initial_state_follows_the_rules() {
        let prob = problem(Variant::Fmrsv, 40);
        let (params, state) = initialize_state(&prob).unwrap();
        let w = prob.data.w.as_ref().unwrap();
        for t in [0, 17, 39] {
            assert_eq!(state.h[(t, 1)], w[t][(1, 1)].ln());
        }
        assert_eq!(params.phi[0], 0.9);
        assert_eq!(params.psi[1], 0.1);
        assert_eq!(params.delta, 10.0);
        assert!(state.validate(&prob.config).is_ok());
    }

    #[test]
    fn constant_returns_give_zero_factors() {
        let mut prob = problem(Variant::Fmsv, 20);
        prob.data.y.fill(0.01);
        let (_, state) = initialize_state(&prob).unwrap();
        assert_eq!(state.f.amax(), 0.0);
        assert!(state.validate(&prob.config).is_ok());
    }

    #[test]
    fn same_seed_same_store() {
        let prob = problem(Variant::Fmrsv, 30);
        let cfg = small_config();
        let a = run_chain(&prob, &cfg, 0, None).unwrap();
        let b = run_chain(&prob, &cfg, 0, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_draws(), 12);
        assert_eq!(a.paths.len(), 3);
        let c = run_chain(&prob, &cfg, 1, None).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn empty_keep_is_fine() {
        let prob = problem(Variant::Fmsv, 20);
        let cfg = ChainConfig { n_keep: 0, ..small_config() };
        let store = run_chain(&prob, &cfg, 0, None).unwrap();
        assert_eq!(store.n_draws(), 0);
    }

    #[test]
    fn resume_from_checkpoint_is_exact() {
        let prob = problem(Variant::Fmrsv, 30);
        let cfg = small_config();
        let straight = run_chain(&prob, &cfg, 0, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut chain = Chain::new(&prob, &cfg, 0).unwrap();
        // stop after the second checkpoint, as if the process died
        chain.run_until(15, Some(dir.path())).unwrap();
        drop(chain);
        let resumed = run_chain(&prob, &cfg, 0, Some(dir.path())).unwrap();
        assert_eq!(straight, resumed);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let prob = problem(Variant::Fmrsv, 30);
        let cfg = small_config();
        let mut chain = Chain::new(&prob, &cfg, 0).unwrap();
        chain.run_until(8, None).unwrap();
        let bytes = chain.checkpoint_bytes();
        assert!(Chain::resume(&prob, &cfg, &bytes[..bytes.len() - 3]).is_err());
        assert!(Chain::resume(&prob, &cfg, &bytes).is_ok());
    }

    #[test]
    fn parallel_chains_match_sequential() {
        let prob = problem(Variant::Fmrsv, 25);
        let cfg = ChainConfig { n_chains: 3, ..small_config() };
        let par = run_chains(&prob, &cfg, 3, None).unwrap();
        let seq = run_chains(&prob, &cfg, 1, None).unwrap();
        assert_eq!(par, seq);
        assert_eq!(par[2], run_chain(&prob, &cfg, 2, None).unwrap());
    }

    #[test]
    fn store_roundtrip_on_disk() {
        let prob = problem(Variant::Fmrsv, 25);
        let store = run_chain(&prob, &small_config(), 0, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.write(dir.path(), &BTreeMap::new()).unwrap();
        let back = ChainStore::read(dir.path()).unwrap();
        assert_eq!(back.draws, store.draws);
        assert_eq!(back.terminal, store.terminal);
        assert_eq!(back.tallies, store.tallies);
        assert_eq!(back.last_state, store.last_state);
        assert_eq!(back.last_params, store.last_params);
        assert_eq!(back.config, store.config);
    }
}
