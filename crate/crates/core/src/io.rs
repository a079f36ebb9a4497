//! Text formats: the flat `name.index = value` config, the dataset CSVs and
//! full-precision number formatting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::types::{alpha_index, Dataset, Parameters, PriorSpec};

/// Formats a float with 17 significant digits (exact round trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key or value", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Parse(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_kv(&fs::read_to_string(path)?)
}

pub fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("`{key}`: `{value}` is not a number")))
}

/// Splits `name.i.j` into the name and its 1-based indices.
fn split_key(key: &str) -> Result<(&str, Vec<usize>)> {
    let mut parts = key.split('.');
    let name = parts.next().unwrap_or("");
    let idx = parts
        .map(|s| {
            s.parse::<usize>()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| Error::Parse(format!("`{key}`: bad index `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((name, idx))
}

fn bad_key(key: &str) -> Error {
    Error::Parse(format!("unknown or out-of-range key `{key}`"))
}

fn set_vec(v: &mut DVector<f64>, key: &str, idx: &[usize], value: f64) -> Result<()> {
    match idx {
        [i] if *i <= v.len() => {
            v[i - 1] = value;
            Ok(())
        }
        _ => Err(bad_key(key)),
    }
}

fn set_mat(m: &mut DMatrix<f64>, key: &str, idx: &[usize], value: f64) -> Result<()> {
    match idx {
        [i, j] if *i <= m.nrows() && *j <= m.ncols() => {
            m[(i - 1, j - 1)] = value;
            Ok(())
        }
        _ => Err(bad_key(key)),
    }
}

/// Serializes parameters, one `name.index = value` line each (1-based).
pub fn params_to_kv(params: &Parameters) -> String {
    let mut s = String::new();
    let (p, q) = (params.p(), params.q());
    for j in 1..q {
        for k in 0..j {
            s += &format!("alpha.{}.{} = {}\n", j + 1, k + 1, params.alpha[alpha_index(j, k)]);
        }
    }
    for i in 0..p {
        for k in 0..q {
            s += &format!("beta.{}.{} = {}\n", i + 1, k + 1, params.beta[(i, k)]);
        }
    }
    let vecs: [(&str, &DVector<f64>); 7] = [
        ("mu", &params.mu),
        ("gamma", &params.gamma),
        ("phi", &params.phi),
        ("psi", &params.psi),
        ("rho", &params.rho),
        ("sigma_eta", &params.sigma_eta),
        ("sigma_nu", &params.sigma_nu),
    ];
    for (name, v) in vecs {
        for (i, x) in v.iter().enumerate() {
            s += &format!("{name}.{} = {x}\n", i + 1);
        }
    }
    s += &format!("delta = {}\n", params.delta);
    s
}

/// Overrides entries of `params` from a parsed config.
pub fn apply_params_kv(params: &mut Parameters, kv: &BTreeMap<String, String>) -> Result<()> {
    for (key, raw) in kv {
        let value = parse_f64(key, raw)?;
        let (name, idx) = split_key(key)?;
        match name {
            "alpha" => match idx[..] {
                [j, k] if k < j && j <= params.q() => params.alpha[alpha_index(j - 1, k - 1)] = value,
                _ => return Err(bad_key(key)),
            },
            "beta" => set_mat(&mut params.beta, key, &idx, value)?,
            "mu" => set_vec(&mut params.mu, key, &idx, value)?,
            "gamma" => set_vec(&mut params.gamma, key, &idx, value)?,
            "phi" => set_vec(&mut params.phi, key, &idx, value)?,
            "psi" => set_vec(&mut params.psi, key, &idx, value)?,
            "rho" => set_vec(&mut params.rho, key, &idx, value)?,
            "sigma_eta" => set_vec(&mut params.sigma_eta, key, &idx, value)?,
            "sigma_nu" => set_vec(&mut params.sigma_nu, key, &idx, value)?,
            "delta" if idx.is_empty() => params.delta = value,
            _ => return Err(bad_key(key)),
        }
    }
    Ok(())
}

/// Serializes priors in the same flat format.
pub fn priors_to_kv(priors: &PriorSpec) -> String {
    let mut s = String::new();
    let vec_line = |s: &mut String, name: &str, v: &DVector<f64>| {
        for (i, x) in v.iter().enumerate() {
            *s += &format!("{name}.{} = {x}\n", i + 1);
        }
    };
    let mat_line = |s: &mut String, name: &str, m: &DMatrix<f64>| {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                *s += &format!("{name}.{}.{} = {}\n", i + 1, j + 1, m[(i, j)]);
            }
        }
    };
    vec_line(&mut s, "m_mu", &priors.m_mu);
    mat_line(&mut s, "s_mu", &priors.s_mu);
    vec_line(&mut s, "m_gamma", &priors.m_gamma);
    mat_line(&mut s, "s_gamma", &priors.s_gamma);
    for (i, (m, c)) in priors.m_beta.iter().zip(&priors.s_beta).enumerate() {
        vec_line(&mut s, &format!("m_beta.{}", i + 1), m);
        mat_line(&mut s, &format!("s_beta.{}", i + 1), c);
    }
    for (j, (m, c)) in priors.m_alpha.iter().zip(&priors.s_alpha).enumerate() {
        vec_line(&mut s, &format!("m_alpha.{}", j + 2), m);
        mat_line(&mut s, &format!("s_alpha.{}", j + 2), c);
    }
    let scalars = [
        ("a_phi", priors.a_phi),
        ("b_phi", priors.b_phi),
        ("a_psi", priors.a_psi),
        ("b_psi", priors.b_psi),
        ("a_rho", priors.a_rho),
        ("b_rho", priors.b_rho),
        ("n_eta", priors.n_eta),
        ("d_eta", priors.d_eta),
        ("n_nu", priors.n_nu),
        ("d_nu", priors.d_nu),
    ];
    for (name, v) in scalars {
        s += &format!("{name} = {v}\n");
    }
    s
}

/// Overrides entries of `priors` from a parsed config.
pub fn apply_priors_kv(priors: &mut PriorSpec, kv: &BTreeMap<String, String>) -> Result<()> {
    for (key, raw) in kv {
        let value = parse_f64(key, raw)?;
        let (name, idx) = split_key(key)?;
        match (name, idx.as_slice()) {
            ("m_mu", _) => set_vec(&mut priors.m_mu, key, &idx, value)?,
            ("s_mu", _) => set_mat(&mut priors.s_mu, key, &idx, value)?,
            ("m_gamma", _) => set_vec(&mut priors.m_gamma, key, &idx, value)?,
            ("s_gamma", _) => set_mat(&mut priors.s_gamma, key, &idx, value)?,
            ("m_beta", [i, rest @ ..]) if *i <= priors.m_beta.len() => {
                set_vec(&mut priors.m_beta[i - 1], key, rest, value)?
            }
            ("s_beta", [i, rest @ ..]) if *i <= priors.s_beta.len() => {
                set_mat(&mut priors.s_beta[i - 1], key, rest, value)?
            }
            ("m_alpha", [j, rest @ ..]) if *j >= 2 && *j - 1 <= priors.m_alpha.len() => {
                set_vec(&mut priors.m_alpha[j - 2], key, rest, value)?
            }
            ("s_alpha", [j, rest @ ..]) if *j >= 2 && *j - 1 <= priors.s_alpha.len() => {
                set_mat(&mut priors.s_alpha[j - 2], key, rest, value)?
            }
            (scalar, []) => {
                let slot = match scalar {
                    "a_phi" => &mut priors.a_phi,
                    "b_phi" => &mut priors.b_phi,
                    "a_psi" => &mut priors.a_psi,
                    "b_psi" => &mut priors.b_psi,
                    "a_rho" => &mut priors.a_rho,
                    "b_rho" => &mut priors.b_rho,
                    "n_eta" => &mut priors.n_eta,
                    "d_eta" => &mut priors.d_eta,
                    "n_nu" => &mut priors.n_nu,
                    "d_nu" => &mut priors.d_nu,
                    _ => return Err(bad_key(key)),
                };
                *slot = value;
            }
            _ => return Err(bad_key(key)),
        }
    }
    Ok(())
}

/// A wide numeric table with an optional leading `date` column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub dates: Option<Vec<String>>,
    pub values: DMatrix<f64>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let has_dates = header.first().is_some_and(|h| h.eq_ignore_ascii_case("date"));
    if has_dates {
        header.remove(0);
    }
    let mut dates = Vec::new();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let mut fields = rec.iter();
        if has_dates {
            dates.push(fields.next().unwrap_or("").to_string());
        }
        let before = data.len();
        for (c, f) in fields.enumerate() {
            let key = format!("{}[{}, {}]", path.display(), rows + 1, c + 1);
            data.push(parse_f64(&key, f)?);
        }
        if data.len() - before != header.len() {
            return Err(Error::Parse(format!("{}: row {} has the wrong width", path.display(), rows + 1)));
        }
        rows += 1;
    }
    Ok(Table {
        values: DMatrix::from_row_slice(rows, header.len(), &data),
        header,
        dates: has_dates.then_some(dates),
    })
}

pub fn write_table(path: &Path, header: &[String], dates: Option<&[String]>, values: &DMatrix<f64>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let mut head: Vec<String> = Vec::new();
    if dates.is_some() {
        head.push("date".into());
    }
    head.extend(header.iter().cloned());
    wtr.write_record(&head)?;
    for r in 0..values.nrows() {
        let mut rec: Vec<String> = Vec::with_capacity(head.len());
        if let Some(d) = dates {
            rec.push(d[r].clone());
        }
        rec.extend(values.row(r).iter().map(|&v| fmt_f64(v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads long-format covariances `date,i,j,value` (1-based `i <= j`).
/// Periods follow the order in which dates first appear.
pub fn read_rcov(path: &Path, p: usize) -> Result<(Vec<String>, Vec<DMatrix<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut dates: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut mats: Vec<DMatrix<f64>> = Vec::new();
    let mut seen: Vec<DMatrix<u8>> = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Parse(format!("{}: line {} needs date,i,j,value", path.display(), n + 2)));
        }
        let date = rec[0].to_string();
        let parse_idx = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .ok()
                .filter(|&v| (1..=p).contains(&v))
                .ok_or_else(|| Error::Parse(format!("{}: line {}: bad index `{s}`", path.display(), n + 2)))
        };
        let (i, j) = (parse_idx(&rec[1])?, parse_idx(&rec[2])?);
        let (i, j) = (i.min(j) - 1, i.max(j) - 1);
        let value = parse_f64("covariance", &rec[3])?;
        let t = *index.entry(date.clone()).or_insert_with(|| {
            dates.push(date);
            mats.push(DMatrix::zeros(p, p));
            seen.push(DMatrix::zeros(p, p));
            mats.len() - 1
        });
        mats[t][(i, j)] = value;
        mats[t][(j, i)] = value;
        seen[t][(i, j)] = 1;
    }
    for (t, s) in seen.iter().enumerate() {
        for i in 0..p {
            for j in i..p {
                if s[(i, j)] == 0 {
                    return Err(Error::Parse(format!(
                        "{}: date {} is missing entry ({}, {})",
                        path.display(),
                        dates[t],
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
    }
    Ok((dates, mats))
}

pub fn write_rcov(path: &Path, dates: &[String], w: &[DMatrix<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["date", "i", "j", "value"])?;
    for (d, wt) in dates.iter().zip(w) {
        for i in 0..wt.nrows() {
            for j in i..wt.ncols() {
                wtr.write_record([d.clone(), (i + 1).to_string(), (j + 1).to_string(), fmt_f64(wt[(i, j)])])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Standard file names inside a dataset directory.
pub const RETURNS_FILE: &str = "returns.csv";
pub const FACTORS_FILE: &str = "factors.csv";
pub const RCOV_FILE: &str = "rcov.csv";

/// Loads returns, realized factors and (optionally) realized covariances.
pub fn load_dataset(returns: &Path, factors: &Path, rcov: Option<&Path>) -> Result<Dataset> {
    let y = read_table(returns)?;
    let x = read_table(factors)?;
    if y.values.nrows() != x.values.nrows() {
        return Err(Error::validation(format!(
            "returns have {} rows but realized factors have {}",
            y.values.nrows(),
            x.values.nrows()
        )));
    }
    let t = y.values.nrows();
    let dates = y.dates.clone().unwrap_or_else(|| (1..=t).map(|v| v.to_string()).collect());
    let w = match rcov {
        None => None,
        Some(path) => {
            let (wd, w) = read_rcov(path, y.values.ncols())?;
            if w.len() != t {
                return Err(Error::validation(format!("{} covariance dates for {t} return rows", w.len())));
            }
            if y.dates.is_some() && wd != dates {
                return Err(Error::validation("covariance dates do not match the return dates"));
            }
            Some(w)
        }
    };
    Ok(Dataset { y: y.values, x: x.values, w, tickers: y.header, factor_names: x.header, dates })
}

/// Writes the dataset CSVs into `dir` using the standard names.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_table(&dir.join(RETURNS_FILE), &data.tickers, Some(&data.dates), &data.y)?;
    write_table(&dir.join(FACTORS_FILE), &data.factor_names, Some(&data.dates), &data.x)?;
    if let Some(w) = &data.w {
        write_rcov(&dir.join(RCOV_FILE), &data.dates, w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_roundtrip() {
        let truth = Parameters::simulation_truth(4, 3);
        let text = params_to_kv(&truth);
        let mut back = Parameters::zeros(4, 3);
        apply_params_kv(&mut back, &parse_kv(&text).unwrap()).unwrap();
        assert_eq!(back, truth);
    }

    #[test]
    fn priors_roundtrip() {
        let mut pr = PriorSpec::vague(3, 2);
        pr.m_beta[1][0] = 0.25;
        pr.a_phi = 20.0;
        let mut back = PriorSpec::vague(3, 2);
        apply_priors_kv(&mut back, &parse_kv(&priors_to_kv(&pr)).unwrap()).unwrap();
        assert_eq!(back, pr);
    }

    #[test]
    fn kv_rejects_unknown_and_out_of_range() {
        let mut params = Parameters::zeros(2, 1);
        for bad in ["phi.4 = 0.1", "beta.1.2 = 1", "alpha.1.1 = 0.5", "foo = 1", "delta.1 = 2", "mu.0 = 1"] {
            let kv = parse_kv(bad).unwrap();
            assert!(apply_params_kv(&mut params, &kv).is_err(), "{bad}");
        }
        assert!(parse_kv("delta = 1\ndelta = 2").is_err());
        assert!(parse_kv("just text").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let kv = parse_kv("# header\n\ndelta = 7.5 # trailing\n").unwrap();
        assert_eq!(kv["delta"], "7.5");
    }

    #[test]
    fn csv_float_format_roundtrips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let y = DMatrix::from_row_slice(3, 2, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let x = DMatrix::from_row_slice(3, 1, &[0.01, 0.02, 0.03]);
        let w = (0..3)
            .map(|t| DMatrix::from_row_slice(2, 2, &[1.0 + t as f64, 0.3, 0.3, 2.0]))
            .collect();
        let data = Dataset::new(y, x, Some(w));
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(
            &dir.path().join(RETURNS_FILE),
            &dir.path().join(FACTORS_FILE),
            Some(&dir.path().join(RCOV_FILE)),
        )
        .unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn rcov_missing_entry_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        fs::write(&path, "date,i,j,value\nd1,1,1,1.0\nd1,2,2,1.0\n").unwrap();
        let err = read_rcov(&path, 2).unwrap_err().to_string();
        assert!(err.contains("missing entry (1, 2)"), "{err}");
    }
}
