use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{softplus, Graph, Matrix, Var};
use crate::losses::balance::{mmd2_weighted_graph, Bandwidth};
use crate::losses::independence::decorrelation_loss_graph;
use crate::losses::{LayerBank, LossWeights};
use crate::nets::NetworkTaps;

type RowPick = Box<dyn Fn(&Matrix) -> Result<Matrix>>;

/// `softplus^{-1}(1)`, the free parameter that yields a unit weight.
pub const THETA_AT_ONE: f64 = 0.541_324_854_612_918_1;

/// Nonnegative per-unit weights stored through `w = softplus(theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    theta: Vec<f64>,
}

impl SampleWeights {
    pub fn ones(n: usize) -> Self {
        Self {
            theta: vec![THETA_AT_ONE; n],
        }
    }

    pub fn from_theta(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_matrix(&self) -> Matrix {
        Matrix::column(self.theta.clone())
    }

    pub fn set_theta(&mut self, theta: &Matrix) -> Result<()> {
        if theta.shape() != (self.theta.len(), 1) {
            return Err(Error::Dimension {
                op: "set_theta",
                left: (self.theta.len(), 1),
                right: theta.shape(),
            });
        }
        self.theta.copy_from_slice(theta.data());
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.theta.iter().map(|&t| softplus(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// `(1/n) sum (w_i - 1)^2`.
pub fn weight_penalty(w: &[f64]) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    w.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / w.len() as f64
}

fn weight_penalty_graph(g: &mut Graph, w: Var) -> Var {
    let d = g.offset(w, -1.0);
    let sq = g.square(d);
    let m = g.mean_rows(sq);
    g.sum(m)
}

/// Frozen feature banks for the three tap groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HapBanks {
    pub p: LayerBank,
    pub r: LayerBank,
    pub o: Vec<LayerBank>,
}

/// Individual terms of the weight objective, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct WeightLoss {
    pub total: Var,
    pub balance: Option<Var>,
    pub independence: Option<Var>,
    pub rep_decorrelation: Option<Var>,
    pub other_decorrelation: Option<Var>,
    pub penalty: Var,
}

/// Builds `alpha L_B + g1 L_D(Z_p) + g2 L_D(Z_r) + g3 sum_i L_D(Z_o_i) + R_w`
/// with gradients flowing only to `theta` (n x 1).
///
/// Terms with a zero coefficient are not built. When `rows` is given the
/// balance and decorrelation terms use only those units; the penalty always
/// covers all of them.
#[allow(clippy::too_many_arguments)]
pub fn weight_loss(
    g: &mut Graph,
    theta: Var,
    taps: &NetworkTaps,
    t: &[f64],
    rows: Option<&[usize]>,
    lw: &LossWeights,
    banks: &HapBanks,
    bandwidth: Bandwidth,
) -> Result<WeightLoss> {
    let n = g.value(theta).rows();
    if t.len() != n || taps.z_r.rows() != n {
        return Err(Error::Dimension {
            op: "weight_loss",
            left: (n, 1),
            right: (t.len(), taps.z_r.rows()),
        });
    }
    let w = g.softplus(theta);
    let (wsub, pick): (Var, RowPick) = match rows {
        Some(r) => {
            let owned = r.to_vec();
            (
                g.select_rows(w, r)?,
                Box::new(move |m: &Matrix| m.select_rows(&owned)),
            )
        }
        None => (w, Box::new(|m: &Matrix| Ok(m.clone()))),
    };
    let t_sub: Vec<f64> = match rows {
        Some(r) => r.iter().map(|&i| t[i]).collect(),
        None => t.to_vec(),
    };

    let mut parts: Vec<Var> = Vec::new();
    let mut scaled = |g: &mut Graph, v: Var, c: f64| {
        let s = g.scale(v, c);
        parts.push(s);
    };

    let balance = if lw.alpha > 0.0 {
        let treated: Vec<usize> = (0..t_sub.len()).filter(|&i| t_sub[i] == 1.0).collect();
        let control: Vec<usize> = (0..t_sub.len()).filter(|&i| t_sub[i] == 0.0).collect();
        let rep = g.constant(pick(&taps.z_r)?);
        let b = mmd2_weighted_graph(g, rep, &treated, &control, wsub, bandwidth)?;
        scaled(g, b, lw.alpha);
        Some(b)
    } else {
        None
    };
    let independence = if lw.gamma1 > 0.0 {
        let v = decorrelation_loss_graph(g, &pick(&taps.z_p)?, wsub, &banks.p)?;
        scaled(g, v, lw.gamma1);
        Some(v)
    } else {
        None
    };
    let rep_decorrelation = if lw.gamma2 > 0.0 {
        let v = decorrelation_loss_graph(g, &pick(&taps.z_r)?, wsub, &banks.r)?;
        scaled(g, v, lw.gamma2);
        Some(v)
    } else {
        None
    };
    let other_decorrelation = if lw.gamma3 > 0.0 && !taps.z_o.is_empty() {
        if taps.z_o.len() != banks.o.len() {
            return Err(Error::Contract(format!(
                "{} hidden taps but {} banks",
                taps.z_o.len(),
                banks.o.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (z, bank) in taps.z_o.iter().zip(&banks.o) {
            let v = decorrelation_loss_graph(g, &pick(z)?, wsub, bank)?;
            acc = Some(match acc {
                None => v,
                Some(a) => g.add(a, v)?,
            });
        }
        let v = acc.expect("non-empty");
        scaled(g, v, lw.gamma3);
        Some(v)
    } else {
        None
    };
    let penalty = weight_penalty_graph(g, w);
    let mut total = penalty;
    for p in parts {
        total = g.add(total, p)?;
    }
    Ok(WeightLoss {
        total,
        balance,
        independence,
        rep_decorrelation,
        other_decorrelation,
        penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_at_one_is_inverse_softplus() {
        assert!((softplus(THETA_AT_ONE) - 1.0).abs() < 1e-15);
        assert!((THETA_AT_ONE - (std::f64::consts::E - 1.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(weight_penalty(&[1.0; 5]), 0.0);
        assert_eq!(weight_penalty(&[2.0, 0.0]), 1.0);
        assert_eq!(weight_penalty(&[1.5, 0.5]), 0.25);
    }
}
