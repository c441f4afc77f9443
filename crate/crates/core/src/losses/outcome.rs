use crate::datagen::OutcomeKind;
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Matrix, Var};

fn check(out_rows: usize, yf: &[f64], w: &[f64], kind: OutcomeKind) -> Result<()> {
    if yf.len() != out_rows || w.len() != out_rows {
        return Err(Error::Dimension {
            op: "outcome_loss",
            left: (out_rows, 1),
            right: (yf.len(), w.len()),
        });
    }
    if kind == OutcomeKind::Binary && yf.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract(
            "binary outcome loss given non-binary labels".into(),
        ));
    }
    Ok(())
}

/// `(1/n) sum_i w_i l(out_i, y_i)` where `out` (n x 1) holds the factual head's
/// pre-activation output: a logit for binary outcomes (cross-entropy) or the
/// prediction itself for continuous ones (squared error).
pub fn factual_loss_graph(
    g: &mut Graph,
    out: Var,
    yf: &[f64],
    w: &[f64],
    kind: OutcomeKind,
) -> Result<Var> {
    let (n, c) = g.value(out).shape();
    if c != 1 {
        return Err(Error::Dimension {
            op: "outcome_loss",
            left: (n, c),
            right: (n, 1),
        });
    }
    check(n, yf, w, kind)?;
    if n == 0 {
        return Err(Error::Contract("outcome loss over zero units".into()));
    }
    let y = g.constant(Matrix::column(yf.to_vec()));
    let per_unit = match kind {
        OutcomeKind::Binary => {
            let sp = g.softplus(out);
            let yl = g.mul(y, out)?;
            g.sub(sp, yl)?
        }
        OutcomeKind::Continuous => {
            let d = g.sub(out, y)?;
            g.square(d)
        }
    };
    let wv = g.constant(Matrix::column(w.to_vec()));
    let weighted = g.mul(per_unit, wv)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Sum of squared entries over the given matrices.
pub fn l2_penalty(g: &mut Graph, mats: &[Var]) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &m in mats {
        let sq = g.square(m);
        let s = g.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s).expect("scalars add"),
        });
    }
    acc
}

/// Weighted factual loss plus `lambda` times the squared l2 norm of `penalized`.
pub fn outcome_loss_graph(
    g: &mut Graph,
    out: Var,
    yf: &[f64],
    w: &[f64],
    lambda: f64,
    penalized: &[Var],
    kind: OutcomeKind,
) -> Result<Var> {
    let fit = factual_loss_graph(g, out, yf, w, kind)?;
    if lambda == 0.0 {
        return Ok(fit);
    }
    match l2_penalty(g, penalized) {
        Some(r) => {
            let r = g.scale(r, lambda);
            g.add(fit, r)
        }
        None => Ok(fit),
    }
}

/// Plain-value form of [`factual_loss_graph`].
pub fn outcome_loss(out: &[f64], yf: &[f64], w: &[f64], kind: OutcomeKind) -> Result<f64> {
    let mut g = Graph::new();
    let o = g.constant(Matrix::column(out.to_vec()));
    let l = factual_loss_graph(&mut g, o, yf, w, kind)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::check::max_relative_error;

    #[test]
    fn perfect_continuous_predictions_give_zero() {
        let y = [0.5, -1.0, 2.0];
        assert_eq!(
            outcome_loss(&y, &y, &[1.0; 3], OutcomeKind::Continuous).unwrap(),
            0.0
        );
    }

    #[test]
    fn confident_binary_predictions_near_zero() {
        let y = [1.0, 0.0, 1.0];
        let logits = [40.0, -40.0, 40.0];
        let l = outcome_loss(&logits, &y, &[1.0; 3], OutcomeKind::Binary).unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn unit_weights_give_plain_mean() {
        let out = [0.2, 1.0, -0.5, 3.0];
        let y = [0.0, 1.5, -0.5, 1.0];
        let l = outcome_loss(&out, &y, &[1.0; 4], OutcomeKind::Continuous).unwrap();
        let plain = out
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 4.0;
        assert!((l - plain).abs() < 1e-15);
    }

    #[test]
    fn linear_in_one_weight() {
        let out = [0.3, -0.7, 1.1];
        let y = [1.0, 0.0, 1.0];
        let base = outcome_loss(&out, &y, &[1.0; 3], OutcomeKind::Binary).unwrap();
        let bumped = outcome_loss(&out, &y, &[1.0, 2.0, 1.0], OutcomeKind::Binary).unwrap();
        let unit = outcome_loss(&[out[1]], &[y[1]], &[1.0], OutcomeKind::Binary).unwrap();
        assert!((bumped - base - unit / 3.0).abs() < 1e-15);
    }

    #[test]
    fn binary_rejects_continuous_labels() {
        let err = outcome_loss(&[0.0], &[0.4], &[1.0], OutcomeKind::Binary).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let out = Matrix::column(vec![0.3, -1.2, 1.9, 0.1, -0.4]);
        let w1 = Matrix::from_fn(2, 3, |r, c| 0.3 * r as f64 - 0.2 * c as f64 + 0.1);
        let y = [1.0, 0.0, 1.0, 1.0, 0.0];
        let w = [1.0, 0.5, 2.0, 1.5, 0.7];
        for kind in [OutcomeKind::Binary, OutcomeKind::Continuous] {
            let err = max_relative_error(&[out.clone(), w1.clone()], 1e-5, |g, v| {
                outcome_loss_graph(g, v[0], &y, &w, 0.3, &[v[1]], kind)
            })
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }
}
