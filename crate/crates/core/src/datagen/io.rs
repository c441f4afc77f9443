use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{ColumnRole, Dataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::gradcore::Matrix;

/// Sidecar describing column roles and the outcome type of a CSV dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesFile {
    pub outcome: Option<OutcomeKind>,
    #[serde(default)]
    pub roles: BTreeMap<String, ColumnRole>,
}

pub fn parse_roles(text: &str) -> Result<RolesFile> {
    toml::from_str(text).map_err(|e| Error::load("roles", e.to_string()))
}

pub fn roles_for(ds: &Dataset) -> RolesFile {
    RolesFile {
        outcome: Some(ds.kind),
        roles: ds
            .names
            .iter()
            .cloned()
            .zip(ds.roles.iter().copied())
            .collect(),
    }
}

pub fn render_roles(ds: &Dataset) -> String {
    toml::to_string(&roles_for(ds)).expect("roles serialize")
}

/// Parses a dataset from CSV bytes.
///
/// The header must name covariates `x1..xm` in order followed by `t` and
/// `yf`, with optional `ycf`, `y0`, `y1` in any order after them.
pub fn parse_csv(bytes: &[u8], roles: Option<&RolesFile>, origin: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header = rdr
        .headers()
        .map_err(|e| Error::load(origin, format!("unreadable header: {e}")))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header.get(0) == Some("")) {
        return Err(Error::load(origin, "empty file"));
    }
    let cols: Vec<&str> = header.iter().collect();
    let m = cols.iter().take_while(|c| c.starts_with('x')).count();
    for (j, c) in cols[..m].iter().enumerate() {
        if *c != format!("x{}", j + 1) {
            return Err(Error::load(
                origin,
                format!("column {} is `{c}`, expected `x{}`", j + 1, j + 1),
            ));
        }
    }
    if m == 0 {
        return Err(Error::load(origin, "no covariate columns `x1..xm`"));
    }
    let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
    for (j, c) in cols.iter().enumerate().skip(m) {
        match *c {
            "t" | "yf" | "ycf" | "y0" | "y1" => {
                if slot.insert(c, j).is_some() {
                    return Err(Error::load(origin, format!("duplicate column `{c}`")));
                }
            }
            other => {
                return Err(Error::load(
                    origin,
                    format!("unexpected column `{other}` at position {}; allowed after covariates: t, yf, ycf, y0, y1", j + 1),
                ))
            }
        }
    }
    for need in ["t", "yf"] {
        if !slot.contains_key(need) {
            return Err(Error::load(
                origin,
                format!("missing required column `{need}`"),
            ));
        }
    }

    let mut x = Vec::new();
    let mut extra: BTreeMap<&str, Vec<f64>> = slot.keys().map(|k| (*k, Vec::new())).collect();
    let mut n = 0usize;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::load(origin, format!("row {}: {e}", r + 2)))?;
        if rec.len() != cols.len() {
            return Err(Error::load(
                origin,
                format!(
                    "row {} has {} fields, header has {}",
                    r + 2,
                    rec.len(),
                    cols.len()
                ),
            ));
        }
        let parse = |j: usize| -> Result<f64> {
            let s = rec.get(j).unwrap_or("").trim();
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::load(
                    origin,
                    format!("row {} column `{}`: bad number `{s}`", r + 2, cols[j]),
                )),
            }
        };
        for j in 0..m {
            x.push(parse(j)?);
        }
        for (name, &j) in &slot {
            extra.get_mut(name).expect("slot").push(parse(j)?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::load(origin, "no data rows"));
    }
    let t = extra.remove("t").expect("required");
    if let Some(i) = t.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::load(
            origin,
            format!("row {}: treatment must be 0 or 1", i + 2),
        ));
    }
    let yf = extra.remove("yf").expect("required");
    let names: Vec<String> = (1..=m).map(|j| format!("x{j}")).collect();
    let binary_like = yf.iter().all(|&v| v == 0.0 || v == 1.0);
    let kind = match roles.and_then(|r| r.outcome) {
        Some(k) => k,
        None if binary_like => OutcomeKind::Binary,
        None => OutcomeKind::Continuous,
    };
    if kind == OutcomeKind::Binary && !binary_like {
        return Err(Error::load(
            origin,
            "outcome declared binary but yf has other values",
        ));
    }
    let mut role_vec = vec![ColumnRole::Raw; m];
    if let Some(rf) = roles {
        for (name, role) in &rf.roles {
            match names.iter().position(|c| c == name) {
                Some(j) => role_vec[j] = *role,
                None => {
                    return Err(Error::load(
                        origin,
                        format!("roles name unknown column `{name}`"),
                    ))
                }
            }
        }
    }
    let ds = Dataset {
        x: Matrix::new(n, m, x)?,
        t,
        yf,
        ycf: extra.remove("ycf"),
        y0: extra.remove("y0"),
        y1: extra.remove("y1"),
        kind,
        roles: role_vec,
        names,
    };
    ds.validate()
        .map_err(|e| Error::load(origin, e.to_string()))?;
    Ok(ds)
}

pub fn read_roles(path: &Path) -> Result<RolesFile> {
    parse_roles(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Reads a CSV dataset and, when present, its roles sidecar.
pub fn read_csv(path: &Path, roles_path: Option<&Path>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let roles = roles_path.map(read_roles).transpose()?;
    parse_csv(&bytes, roles.as_ref(), &path.display().to_string())
}

/// Renders the dataset in the CSV schema accepted by [`parse_csv`].
pub fn render_csv(ds: &Dataset) -> String {
    let m = ds.dim();
    let mut header: Vec<String> = (1..=m).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    header.push("yf".into());
    let optional: Vec<(&str, &Vec<f64>)> = [("ycf", &ds.ycf), ("y0", &ds.y0), ("y1", &ds.y1)]
        .into_iter()
        .filter_map(|(n, v)| v.as_ref().map(|v| (n, v)))
        .collect();
    header.extend(optional.iter().map(|(n, _)| n.to_string()));
    let mut out = header.join(",");
    out.push('\n');
    let mut line = String::new();
    for i in 0..ds.len() {
        line.clear();
        for v in ds.x.row_slice(i) {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&format!("{},{}", ds.t[i], ds.yf[i]));
        for (_, v) in &optional {
            line.push_str(&format!(",{}", v[i]));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, render_csv(ds)).map_err(|e| Error::io(path, e))
}

pub fn write_roles(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, render_roles(ds)).map_err(|e| Error::io(path, e))
}
