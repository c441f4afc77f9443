//! Effect-estimation accuracy, classification, stability, and decorrelation
//! summaries.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::gradcore::{Matrix, RngState};
use crate::losses::{pairwise_hsic, LayerBank};

fn same_len(op: &'static str, a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::Dimension {
            op,
            left: (a, 1),
            right: (b, c),
        });
    }
    if a == 0 {
        return Err(Error::Contract(format!("{op} over zero units")));
    }
    Ok(())
}

/// Root-mean-square error of estimated effects against `y1 - y0`.
pub fn pehe(ite_hat: &[f64], y1: &[f64], y0: &[f64]) -> Result<f64> {
    same_len("pehe", ite_hat.len(), y1.len(), y0.len())?;
    let n = ite_hat.len() as f64;
    let s: f64 = ite_hat
        .iter()
        .zip(y1.iter().zip(y0))
        .map(|(e, (a, b))| {
            let d = e - (a - b);
            d * d
        })
        .sum();
    Ok((s / n).sqrt())
}

/// Absolute difference between true and estimated average effects.
pub fn eps_ate(ite_hat: &[f64], y1: &[f64], y0: &[f64]) -> Result<f64> {
    same_len("eps_ate", ite_hat.len(), y1.len(), y0.len())?;
    let n = ite_hat.len() as f64;
    let truth: f64 = y1.iter().zip(y0).map(|(a, b)| a - b).sum::<f64>() / n;
    let est: f64 = ite_hat.iter().sum::<f64>() / n;
    Ok((truth - est).abs())
}

/// F1 of `prob >= threshold` against binary labels; 0 when there are no true
/// positives.
pub fn f1_score(prob: &[f64], truth: &[f64], threshold: f64) -> Result<f64> {
    if prob.len() != truth.len() {
        return Err(Error::Dimension {
            op: "f1",
            left: (prob.len(), 1),
            right: (truth.len(), 1),
        });
    }
    if truth.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract("F1 needs binary ground truth".into()));
    }
    let (mut tp, mut fp, mut fna) = (0usize, 0usize, 0usize);
    for (&p, &y) in prob.iter().zip(truth) {
        match (p >= threshold, y == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fna += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fna) as f64)
}

/// Mean across environments and the mean squared deviation from it.
///
/// The second value is reported as the "std" of the stability tables but is
/// not square-rooted.
pub fn stability_aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Contract("aggregate over zero environments".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let spread = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, spread))
}

/// Pairwise HSIC_RFF among sampled representation dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub dims: Vec<usize>,
    pub values: Matrix,
    pub mean_off_diagonal: f64,
}

/// Samples up to `dims` columns of `z_r` and computes their unweighted
/// pairwise HSIC_RFF with `features` random features per column.
pub fn decorrelation_heatmap(
    z_r: &Matrix,
    dims: usize,
    features: usize,
    rng: &mut RngState,
) -> Result<Heatmap> {
    let m = z_r.cols();
    let k = dims.min(m);
    if k == 0 {
        return Err(Error::Contract("heatmap needs at least one column".into()));
    }
    let mut chosen: Vec<usize> = if k == m {
        (0..m).collect()
    } else {
        sample(rng, m, k).into_vec()
    };
    chosen.sort_unstable();
    let bank = LayerBank::draw(k, features, rng)?;
    let sub = z_r.select_cols(&chosen)?;
    let values = pairwise_hsic(&sub, &bank)?;
    let mut s = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                s += values.get(a, b);
            }
        }
    }
    let pairs = (k * (k - 1)) as f64;
    let mean_off_diagonal = if k > 1 { s / pairs } else { 0.0 };
    Ok(Heatmap {
        dims: chosen,
        values,
        mean_off_diagonal,
    })
}

/// Metrics for one evaluation environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMetrics {
    pub env: String,
    pub rho: Option<f64>,
    pub pehe: f64,
    pub eps_ate: f64,
    pub f1_factual: Option<f64>,
    pub f1_counterfactual: Option<f64>,
}

/// Scores estimated potential outcomes against a dataset with ground truth.
/// F1 values are reported for binary outcomes only.
pub fn evaluate_env(
    name: &str,
    rho: Option<f64>,
    ds: &Dataset,
    y0_hat: &[f64],
    y1_hat: &[f64],
) -> Result<EnvMetrics> {
    let (Some(y0), Some(y1)) = (&ds.y0, &ds.y1) else {
        return Err(Error::Protocol(format!(
            "environment `{name}` has no ground-truth potential outcomes"
        )));
    };
    let ite: Vec<f64> = y1_hat.iter().zip(y0_hat).map(|(a, b)| a - b).collect();
    let (f1_factual, f1_counterfactual) = match ds.kind {
        crate::datagen::OutcomeKind::Binary => {
            let pick = |factual: bool| -> Vec<f64> {
                (0..ds.len())
                    .map(|i| {
                        if (ds.t[i] == 1.0) == factual {
                            y1_hat[i]
                        } else {
                            y0_hat[i]
                        }
                    })
                    .collect()
            };
            let cf_truth: Vec<f64> = (0..ds.len())
                .map(|i| if ds.t[i] == 1.0 { y0[i] } else { y1[i] })
                .collect();
            (
                Some(f1_score(&pick(true), &ds.yf, 0.5)?),
                Some(f1_score(&pick(false), &cf_truth, 0.5)?),
            )
        }
        crate::datagen::OutcomeKind::Continuous => (None, None),
    };
    Ok(EnvMetrics {
        env: name.to_string(),
        rho,
        pehe: pehe(&ite, y1, y0)?,
        eps_ate: eps_ate(&ite, y1, y0)?,
        f1_factual,
        f1_counterfactual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

/// Per-environment metrics plus their across-environment aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub envs: Vec<EnvMetrics>,
    pub pehe: Aggregate,
    pub eps_ate: Aggregate,
    pub f1_factual: Option<Aggregate>,
    pub f1_counterfactual: Option<Aggregate>,
    pub decorrelation: Option<f64>,
}

impl MetricsReport {
    pub fn from_envs(envs: Vec<EnvMetrics>, decorrelation: Option<f64>) -> Result<Self> {
        let agg = |f: &dyn Fn(&EnvMetrics) -> f64| -> Result<Aggregate> {
            let v: Vec<f64> = envs.iter().map(f).collect();
            let (mean, std) = stability_aggregate(&v)?;
            Ok(Aggregate { mean, std })
        };
        let opt = |f: &dyn Fn(&EnvMetrics) -> Option<f64>| -> Result<Option<Aggregate>> {
            let v: Option<Vec<f64>> = envs.iter().map(f).collect();
            match v {
                Some(v) if !v.is_empty() => {
                    let (mean, std) = stability_aggregate(&v)?;
                    Ok(Some(Aggregate { mean, std }))
                }
                _ => Ok(None),
            }
        };
        Ok(Self {
            pehe: agg(&|e| e.pehe)?,
            eps_ate: agg(&|e| e.eps_ate)?,
            f1_factual: opt(&|e| e.f1_factual)?,
            f1_counterfactual: opt(&|e| e.f1_counterfactual)?,
            decorrelation,
            envs,
        })
    }
}
