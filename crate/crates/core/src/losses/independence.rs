use crate::error::{Error, Result};
use crate::gradcore::{Graph, Matrix, Var};
use crate::losses::rff::{layer_features, normalize_weights, standardize_cols, weighted_cov};
use crate::losses::{LayerBank, RffBank};

fn check_len(op: &'static str, n: usize, w: &[f64]) -> Result<()> {
    if w.len() != n {
        return Err(Error::Dimension {
            op,
            left: (n, 1),
            right: (w.len(), 1),
        });
    }
    Ok(())
}

/// Sum of squared weighted cross-covariances between the random Fourier
/// features of `a` and those of `b`.
///
/// Both inputs are standardized first, which makes the value invariant to
/// shifting either variable.
pub fn hsic_rff_weighted(a: &[f64], b: &[f64], w: &[f64], bank: &RffBank) -> Result<f64> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::Dimension {
            op: "hsic_rff",
            left: (n, 1),
            right: (b.len(), 1),
        });
    }
    check_len("hsic_rff", n, w)?;
    if n == 0 {
        return Err(Error::Contract("hsic_rff needs at least one row".into()));
    }
    let z = Matrix::from_fn(n, 2, |r, c| if c == 0 { a[r] } else { b[r] });
    let layer = LayerBank {
        columns: vec![bank.a.clone(), bank.b.clone()],
    };
    let na = bank.a.len();
    let k = layer.features();
    let mask = Matrix::from_fn(k, k, |i, j| if i < na && j >= na { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let wv = g.constant(Matrix::column(w.to_vec()));
    let out = masked_cov_energy(&mut g, &standardize_cols(&z), wv, &layer, mask)?;
    Ok(g.scalar(out))
}

/// Block mask so that `sum(mask .* C.^2)` equals the sum over pairs a <= b.
fn pair_mask(bank: &LayerBank) -> Matrix {
    let offs = bank.offsets();
    let k = bank.features();
    let mut owner = vec![0usize; k];
    for c in 0..bank.width() {
        owner[offs[c]..offs[c + 1]].iter_mut().for_each(|o| *o = c);
    }
    Matrix::from_fn(k, k, |i, j| if owner[i] == owner[j] { 1.0 } else { 0.5 })
}

fn masked_cov_energy(
    g: &mut Graph,
    z_std: &Matrix,
    w: Var,
    bank: &LayerBank,
    mask: Matrix,
) -> Result<Var> {
    let z = g.constant(z_std.clone());
    let f = layer_features(g, z, bank)?;
    let p = normalize_weights(g, w)?;
    let c = weighted_cov(g, f, p)?;
    let sq = g.square(c);
    let mask = g.constant(mask);
    let masked = g.mul(sq, mask)?;
    Ok(g.sum(masked))
}

/// `sum_{a <= b} HSIC^w_RFF(z_a, z_b)` as a graph node; `z` is treated as a
/// constant and `w` (n x 1) may carry gradients.
pub fn decorrelation_loss_graph(
    g: &mut Graph,
    z: &Matrix,
    w: Var,
    bank: &LayerBank,
) -> Result<Var> {
    if z.cols() == 0 {
        return Err(Error::Contract(
            "decorrelation loss needs at least one column".into(),
        ));
    }
    if g.value(w).shape() != (z.rows(), 1) {
        return Err(Error::Dimension {
            op: "decorrelation_loss",
            left: z.shape(),
            right: g.value(w).shape(),
        });
    }
    masked_cov_energy(g, &standardize_cols(z), w, bank, pair_mask(bank))
}

pub fn decorrelation_loss(z: &Matrix, w: &[f64], bank: &LayerBank) -> Result<f64> {
    check_len("decorrelation_loss", z.rows(), w)?;
    let mut g = Graph::new();
    let wv = g.constant(Matrix::column(w.to_vec()));
    let out = decorrelation_loss_graph(&mut g, z, wv, bank)?;
    Ok(g.scalar(out))
}

/// Unweighted pairwise HSIC_RFF between all columns of `z`, returned as a
/// symmetric `m x m` matrix (diagonal holds the self terms).
pub fn pairwise_hsic(z: &Matrix, bank: &LayerBank) -> Result<Matrix> {
    let n = z.rows();
    let m = z.cols();
    if m != bank.width() {
        return Err(Error::Dimension {
            op: "pairwise_hsic",
            left: z.shape(),
            right: (bank.width(), bank.features()),
        });
    }
    let mut g = Graph::new();
    let zs = g.constant(standardize_cols(z));
    let f = layer_features(&mut g, zs, bank)?;
    let w = g.constant(Matrix::filled(n, 1, 1.0));
    let p = normalize_weights(&mut g, w)?;
    let c = weighted_cov(&mut g, f, p)?;
    let cov = g.value(c);
    let offs = bank.offsets();
    let mut out = Matrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let mut s = 0.0;
            for i in offs[a]..offs[a + 1] {
                for j in offs[b]..offs[b + 1] {
                    let v = cov.get(i, j);
                    s += v * v;
                }
            }
            out.set(a, b, s);
            out.set(b, a, s);
        }
    }
    Ok(out)
}
