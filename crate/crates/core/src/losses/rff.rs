use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Matrix, Var};

/// Frequencies and phases of the random Fourier features for one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffSide {
    pub freqs: Vec<f64>,
    pub phases: Vec<f64>,
}

impl RffSide {
    /// `k` frequencies from N(0,1) and phases from U(0, 2pi).
    pub fn draw<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config(
                "random feature count must be at least 1".into(),
            ));
        }
        let freqs = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let phases = (0..k).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        Ok(Self { freqs, phases })
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

/// Feature banks for one (a, b) variable pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffBank {
    pub a: RffSide,
    pub b: RffSide,
}

impl RffBank {
    pub fn draw<R: Rng + ?Sized>(n_a: usize, n_b: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            a: RffSide::draw(n_a, rng)?,
            b: RffSide::draw(n_b, rng)?,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }
}

/// One frozen [`RffSide`] per column of an activation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBank {
    pub columns: Vec<RffSide>,
}

impl LayerBank {
    pub fn draw<R: Rng + ?Sized>(width: usize, k: usize, rng: &mut R) -> Result<Self> {
        let columns = (0..width)
            .map(|_| RffSide::draw(k, rng))
            .collect::<Result<_>>()?;
        Ok(Self { columns })
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Total number of features across all columns.
    pub fn features(&self) -> usize {
        self.columns.iter().map(RffSide::len).sum()
    }

    /// Bank restricted to the given columns.
    pub fn select(&self, cols: &[usize]) -> Self {
        Self {
            columns: cols.iter().map(|&c| self.columns[c].clone()).collect(),
        }
    }

    pub(crate) fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.columns.len() + 1);
        let mut acc = 0;
        out.push(0);
        for c in &self.columns {
            acc += c.len();
            out.push(acc);
        }
        out
    }
}

/// `sqrt(2) * cos(w_j * col_i + phi_j)` for every row `i` and feature `j`.
pub fn rff_features(col: &[f64], side: &RffSide) -> Matrix {
    Matrix::from_fn(col.len(), side.len(), |i, j| {
        SQRT_2 * (side.freqs[j] * col[i] + side.phases[j]).cos()
    })
}

/// Centers and scales each column by its unweighted mean and standard
/// deviation. Constant columns become exactly zero.
pub fn standardize_cols(z: &Matrix) -> Matrix {
    let n = z.rows();
    let mut out = z.clone();
    if n == 0 {
        return out;
    }
    for c in 0..z.cols() {
        let col = z.col_vec(c);
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            for r in 0..n {
                out.set(r, c, 0.0);
            }
            continue;
        }
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        for (r, v) in col.iter().enumerate() {
            out.set(r, c, (v - mean) / sd);
        }
    }
    out
}

/// Stacked features `[u(z_1) | u(z_2) | ...]` of every column of `z`.
pub(crate) fn layer_features(g: &mut Graph, z: Var, bank: &LayerBank) -> Result<Var> {
    let m = g.value(z).cols();
    if m != bank.width() {
        return Err(Error::Dimension {
            op: "layer_features",
            left: g.value(z).shape(),
            right: (bank.width(), bank.features()),
        });
    }
    let offs = bank.offsets();
    let k = bank.features();
    let mut spread = Matrix::zeros(m, k);
    let mut phases = Vec::with_capacity(k);
    for (c, side) in bank.columns.iter().enumerate() {
        for j in 0..side.len() {
            spread.set(c, offs[c] + j, side.freqs[j]);
            phases.push(side.phases[j]);
        }
    }
    let spread = g.constant(spread);
    let phases = g.constant(Matrix::row(phases));
    let proj = g.matmul(z, spread)?;
    let shifted = g.add_row(proj, phases)?;
    let c = g.cos(shifted);
    Ok(g.scale(c, SQRT_2))
}

/// Normalizes `w` (n x 1) to sum to one.
pub(crate) fn normalize_weights(g: &mut Graph, w: Var) -> Result<Var> {
    let s = g.sum(w);
    let total = g.scalar(s);
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::DegenerateWeights(format!("weight sum is {total}")));
    }
    let inv = g.powf(s, -1.0)?;
    g.mul_scalar(w, inv)
}

/// Weighted covariance `sum_i p_i (f_i - mu)(f_i - mu)^T` of the rows of `f`
/// for normalized weights `p`.
///
/// Features are first shifted by their first row; covariance is unchanged by
/// the shift and constant columns then contribute exact zeros.
pub(crate) fn weighted_cov(g: &mut Graph, f: Var, p: Var) -> Result<Var> {
    let first = g.select_rows(f, &[0])?;
    let neg = g.scale(first, -1.0);
    let fs = g.add_row(f, neg)?;
    let pt = g.transpose(p);
    let mu = g.matmul(pt, fs)?;
    let fst = g.transpose(fs);
    let weighted = g.mul_col(fs, p)?;
    let second = g.matmul(fst, weighted)?;
    let mut_ = g.transpose(mu);
    let outer = g.matmul(mut_, mu)?;
    g.sub(second, outer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::RngState;

    #[test]
    fn zero_column_zero_phase_gives_sqrt2() {
        let side = RffSide {
            freqs: vec![0.3, -1.2, 2.0],
            phases: vec![0.0; 3],
        };
        let f = rff_features(&[0.0; 4], &side);
        assert!(f.data().iter().all(|&v| v == SQRT_2));
    }

    #[test]
    fn features_bounded() {
        let mut rng = RngState::new(3);
        let side = RffSide::draw(5, &mut rng).unwrap();
        let col: Vec<f64> = (0..200).map(|i| (i as f64 - 100.0) * 0.37).collect();
        let f = rff_features(&col, &side);
        assert!(f.data().iter().all(|v| v.abs() <= SQRT_2));
    }

    #[test]
    fn graph_features_match_direct() {
        let mut rng = RngState::new(11);
        let bank = LayerBank::draw(3, 4, &mut rng).unwrap();
        let z = Matrix::from_fn(7, 3, |r, c| ((r * 3 + c) as f64).sin());
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let f = layer_features(&mut g, zv, &bank).unwrap();
        for c in 0..3 {
            let direct = rff_features(&z.col_vec(c), &bank.columns[c]);
            for r in 0..7 {
                for j in 0..4 {
                    let got = g.value(f).get(r, c * 4 + j);
                    assert!((got - direct.get(r, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn standardize_constant_column_is_zero() {
        let z = Matrix::from_fn(5, 2, |r, c| if c == 0 { 3.3 } else { r as f64 });
        let s = standardize_cols(&z);
        assert!(s.col_vec(0).iter().all(|&v| v == 0.0));
        let col = s.col_vec(1);
        let mean: f64 = col.iter().sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn draw_rejects_zero_features() {
        let mut rng = RngState::new(0);
        assert!(RffSide::draw(0, &mut rng).is_err());
    }
}
