use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Matrix, Var};
use crate::losses::rff::normalize_weights;

/// RBF bandwidth choice for the discrepancy kernel `exp(-d^2 / (2 s^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Median pairwise Euclidean distance of the pooled sample.
    #[default]
    Median,
    Fixed(f64),
}

/// Median of the pairwise Euclidean distances between rows; 1 when the
/// median is zero or there are fewer than two rows.
pub fn median_bandwidth(rep: &Matrix) -> f64 {
    let n = rep.rows();
    if n < 2 {
        return 1.0;
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let ri = rep.row_slice(i);
        for j in (i + 1)..n {
            let rj = rep.row_slice(j);
            let s: f64 = ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(s);
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let med = m.sqrt();
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

/// `sum_ij qa_i qb_j k(a_i, b_j)` for normalized weight columns.
fn kernel_mean(g: &mut Graph, a: Var, b: Var, qa: Var, qb: Var, inv_two_s2: f64) -> Result<Var> {
    let (na, d) = g.value(a).shape();
    let nb = g.value(b).rows();
    let sa = {
        let sq = g.square(a);
        let m = g.mean_cols(sq);
        g.scale(m, d as f64)
    };
    let sb = {
        let sq = g.square(b);
        let m = g.mean_cols(sq);
        g.scale(m, d as f64)
    };
    let ones_b = g.constant(Matrix::ones(1, nb));
    let ones_a = g.constant(Matrix::ones(na, 1));
    let left = g.matmul(sa, ones_b)?;
    let sbt = g.transpose(sb);
    let right = g.matmul(ones_a, sbt)?;
    let bt = g.transpose(b);
    let cross = g.matmul(a, bt)?;
    let cross2 = g.scale(cross, -2.0);
    let lr = g.add(left, right)?;
    let dist = g.add(lr, cross2)?;
    let arg = g.scale(dist, -inv_two_s2);
    let k = g.exp(arg)?;
    let kq = g.matmul(k, qb)?;
    let prod = g.mul(kq, qa)?;
    Ok(g.sum(prod))
}

/// Squared RBF-MMD (V-statistic) between the weighted treated and control
/// rows of `rep`. `w` is an `n x 1` node and may carry gradients; so may `rep`.
pub fn mmd2_weighted_graph(
    g: &mut Graph,
    rep: Var,
    treated: &[usize],
    control: &[usize],
    w: Var,
    bandwidth: Bandwidth,
) -> Result<Var> {
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Overlap(format!(
            "balance term needs both arms, got {} treated and {} control",
            treated.len(),
            control.len()
        )));
    }
    let n = g.value(rep).rows();
    if g.value(w).shape() != (n, 1) {
        return Err(Error::Dimension {
            op: "mmd2_weighted",
            left: g.value(rep).shape(),
            right: g.value(w).shape(),
        });
    }
    let s = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => {
            return Err(Error::Config(format!(
                "bandwidth must be positive, got {s}"
            )))
        }
        Bandwidth::Median => {
            let pooled: Vec<usize> = treated.iter().chain(control).copied().collect();
            median_bandwidth(&g.value(rep).select_rows(&pooled)?)
        }
    };
    let inv = 1.0 / (2.0 * s * s);
    let rt = g.select_rows(rep, treated)?;
    let rc = g.select_rows(rep, control)?;
    let wt = g.select_rows(w, treated)?;
    let wc = g.select_rows(w, control)?;
    let qt = normalize_weights(g, wt)?;
    let qc = normalize_weights(g, wc)?;
    let ktt = kernel_mean(g, rt, rt, qt, qt, inv)?;
    let kcc = kernel_mean(g, rc, rc, qc, qc, inv)?;
    let ktc = kernel_mean(g, rt, rc, qt, qc, inv)?;
    let within = g.add(ktt, kcc)?;
    let cross = g.scale(ktc, -2.0);
    g.add(within, cross)
}

pub fn mmd2_weighted(
    rep_t: &Matrix,
    rep_c: &Matrix,
    w_t: &[f64],
    w_c: &[f64],
    bandwidth: Bandwidth,
) -> Result<f64> {
    if w_t.len() != rep_t.rows() || w_c.len() != rep_c.rows() {
        return Err(Error::Dimension {
            op: "mmd2_weighted",
            left: (rep_t.rows(), rep_c.rows()),
            right: (w_t.len(), w_c.len()),
        });
    }
    if rep_t.rows() == 0 || rep_c.rows() == 0 {
        return Err(Error::Overlap("balance term needs both arms".into()));
    }
    let pooled = Matrix::concat_rows(&[rep_t, rep_c])?;
    let nt = rep_t.rows();
    let treated: Vec<usize> = (0..nt).collect();
    let control: Vec<usize> = (nt..pooled.rows()).collect();
    let w: Vec<f64> = w_t.iter().chain(w_c).copied().collect();
    let mut g = Graph::new();
    let r = g.constant(pooled);
    let wv = g.constant(Matrix::column(w));
    let out = mmd2_weighted_graph(&mut g, r, &treated, &control, wv, bandwidth)?;
    Ok(g.scalar(out))
}
