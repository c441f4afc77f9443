use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::io::{parse_csv, RolesFile};
use crate::datagen::{
    log_selection_probs, split_train_val, ColumnRole, Dataset, EnvSpec, OutcomeKind,
};
use crate::error::{Error, Result};
use crate::gradcore::{sigmoid, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schema {
    Twins,
    Ihdp,
}

impl Schema {
    pub fn raw_covariates(self) -> usize {
        match self {
            Schema::Twins => 28,
            Schema::Ihdp => 25,
        }
    }

    pub fn test_fraction(self) -> f64 {
        match self {
            Schema::Twins => 0.2,
            Schema::Ihdp => 0.1,
        }
    }

    /// Bias rate of the held-out split when none is configured.
    pub fn default_rho(self) -> f64 {
        match self {
            Schema::Twins => -2.5,
            Schema::Ihdp => 2.5,
        }
    }
}

pub const TWINS_INSTRUMENTS: usize = 10;
pub const TWINS_UNSTABLE: usize = 5;
pub const IHDP_CONTINUOUS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SemiSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Draws `k` indices without replacement with probability proportional to
/// `exp(logp)`, using exponential race keys in log space.
pub fn weighted_quota(logp: &[f64], k: usize, rng: &mut RngState) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = logp
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            ((-u.ln()).ln() - lp, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = keyed.into_iter().take(k).map(|(_, i)| i).collect();
    out.sort_unstable();
    out
}

fn continuous_columns(ds: &Dataset, among: &[usize]) -> Vec<usize> {
    among
        .iter()
        .copied()
        .filter(|&c| {
            let col = ds.x.col_vec(c);
            let first = col[0];
            let mut other = None;
            for &v in &col {
                if v != first {
                    match other {
                        None => other = Some(v),
                        Some(o) if o != v => return true,
                        _ => {}
                    }
                }
            }
            false
        })
        .collect()
}

/// Z-scores `cols` of every split with the training split's mean and
/// standard deviation.
fn zscore_with_train(split: &mut SemiSplit, cols: &[usize]) {
    let n = split.train.len() as f64;
    for &c in cols {
        let col = split.train.x.col_vec(c);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        for ds in [&mut split.train, &mut split.val, &mut split.test] {
            for r in 0..ds.len() {
                let v = ds.x.get(r, c);
                ds.x.set(r, c, (v - mean) / sd);
            }
        }
    }
}

fn potential_outcomes(ds: &mut Dataset, origin: &str) -> Result<()> {
    if ds.y0.is_some() && ds.y1.is_some() {
        return Ok(());
    }
    let Some(ycf) = &ds.ycf else {
        return Err(Error::load(
            origin,
            "need `y0` and `y1`, or `ycf`, for ground-truth effects",
        ));
    };
    let (mut y0, mut y1) = (Vec::with_capacity(ds.len()), Vec::with_capacity(ds.len()));
    for ((&t, &yf), &cf) in ds.t.iter().zip(&ds.yf).zip(ycf.iter()) {
        let (a, b) = if t == 1.0 { (cf, yf) } else { (yf, cf) };
        y0.push(a);
        y1.push(b);
    }
    ds.y0 = Some(y0);
    ds.y1 = Some(y1);
    Ok(())
}

fn check_width(ds: &Dataset, schema: Schema, origin: &str) -> Result<()> {
    let want = schema.raw_covariates();
    if ds.dim() != want {
        return Err(Error::load(
            origin,
            format!(
                "{schema:?} schema needs covariates x1..x{want}, file has x1..x{} ({} columns)",
                ds.dim(),
                ds.dim()
            ),
        ));
    }
    Ok(())
}

/// Adds generated instrument and unstable columns and simulates treatment.
fn augment_twins(raw: &Dataset, rng: &mut RngState) -> Result<Dataset> {
    let n = raw.len();
    let m0 = raw.dim();
    let extra = TWINS_INSTRUMENTS + TWINS_UNSTABLE;
    let m = m0 + extra;
    let y0 = raw.y0.clone().expect("checked");
    let y1 = raw.y1.clone().expect("checked");
    if y0.iter().chain(&y1).any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::load(
            "twins",
            "mortality outcomes y0/y1 must be 0 or 1",
        ));
    }
    let mut x = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m0 {
            x.set(i, j, raw.x.get(i, j));
        }
        for j in m0..m {
            x.set(i, j, StandardNormal.sample(rng));
        }
    }
    // Standardized copy of the raw block, used only for treatment assignment.
    let mut sim = x.clone();
    for j in 0..m0 {
        let col = sim.col_vec(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        for (i, v) in col.iter().enumerate() {
            sim.set(i, j, (v - mean) / sd);
        }
    }
    let ic = m0 + TWINS_INSTRUMENTS;
    let coef: Vec<f64> = (0..ic).map(|_| rng.random_range(-0.1..0.1)).collect();
    let eta = Normal::new(0.0, 0.1).expect("positive std");
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let z: f64 = sim.row_slice(i)[..ic]
            .iter()
            .zip(&coef)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + eta.sample(rng);
        let u: f64 = rng.random();
        t.push(if u < sigmoid(z) { 1.0 } else { 0.0 });
    }
    let yf = (0..n)
        .map(|i| if t[i] == 1.0 { y1[i] } else { y0[i] })
        .collect();
    let ycf = (0..n)
        .map(|i| if t[i] == 1.0 { y0[i] } else { y1[i] })
        .collect();
    let mut roles = vec![ColumnRole::Confounder; m0];
    roles.extend(std::iter::repeat_n(
        ColumnRole::Instrument,
        TWINS_INSTRUMENTS,
    ));
    roles.extend(std::iter::repeat_n(ColumnRole::Unstable, TWINS_UNSTABLE));
    Ok(Dataset {
        x,
        t,
        yf,
        ycf: Some(ycf),
        y0: Some(y0),
        y1: Some(y1),
        kind: OutcomeKind::Binary,
        roles,
        names: (1..=m).map(|j| format!("x{j}")).collect(),
    })
}

/// Prepares one replication of a Twins- or IHDP-shaped benchmark from CSV
/// bytes: biased held-out split at `env.rho`, random 70/30 split of the
/// remainder, and z-scoring of continuous raw columns.
pub fn prepare_semi_synthetic(
    bytes: &[u8],
    roles: Option<&RolesFile>,
    schema: Schema,
    env: &EnvSpec,
    rng: &mut RngState,
    origin: &str,
) -> Result<SemiSplit> {
    env.validate()?;
    let mut ds = parse_csv(bytes, roles, origin)?;
    check_width(&ds, schema, origin)?;
    potential_outcomes(&mut ds, origin)?;
    let (full, shift_cols, zcols) = match schema {
        Schema::Twins => {
            let full = augment_twins(&ds, rng)?;
            let raw: Vec<usize> = (0..schema.raw_covariates()).collect();
            let z = continuous_columns(&full, &raw);
            let shift = full.columns_with(ColumnRole::Unstable);
            (full, shift, z)
        }
        Schema::Ihdp => {
            ds.kind = OutcomeKind::Continuous;
            let tagged = ds.columns_with(ColumnRole::Unstable);
            let shift: Vec<usize> = if tagged.is_empty() {
                (0..IHDP_CONTINUOUS).collect()
            } else {
                tagged
            };
            for &c in &shift {
                ds.roles[c] = ColumnRole::Unstable;
            }
            let z = continuous_columns(&ds, &shift);
            (ds, shift, z)
        }
    };
    let logp = log_selection_probs(&full, env.rho, &shift_cols)?;
    let k = ((full.len() as f64) * schema.test_fraction()).round() as usize;
    let test_idx = weighted_quota(&logp, k, rng);
    let mut is_test = vec![false; full.len()];
    test_idx.iter().for_each(|&i| is_test[i] = true);
    let rest_idx: Vec<usize> = (0..full.len()).filter(|&i| !is_test[i]).collect();
    let rest = full.subset(&rest_idx)?;
    let (train, val) = split_train_val(&rest, 0.3, rng)?;
    let mut split = SemiSplit {
        train,
        val,
        test: full.subset(&test_idx)?,
    };
    zscore_with_train(&mut split, &zcols);
    Ok(split)
}

pub fn load_semi_synthetic(
    path: &Path,
    roles_path: Option<&Path>,
    schema: Schema,
    env: &EnvSpec,
    rng: &mut RngState,
) -> Result<SemiSplit> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let roles = roles_path.map(crate::datagen::io::read_roles).transpose()?;
    prepare_semi_synthetic(
        &bytes,
        roles.as_ref(),
        schema,
        env,
        rng,
        &path.display().to_string(),
    )
}
