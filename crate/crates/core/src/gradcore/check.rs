use crate::error::Result;
use crate::gradcore::{Graph, Matrix, Var};

/// Smallest gradient norm used as the denominator in [`max_relative_error`].
pub const SCALE_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients with central differences.
///
/// `build` receives a fresh graph and one leaf per entry of `leaves` and
/// must return a `1 x 1` node. The result is the largest norm-wise relative
/// error `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-6)` over all leaves. The
/// floor keeps leaves with an identically zero gradient (for example a bias
/// feeding batch-norm) from turning difference noise into a large ratio.
pub fn max_relative_error<F>(leaves: &[Matrix], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|m| g.param(m.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(leaves)
        .map(|(v, m)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();

    let eval = |vals: &[Matrix]| -> Result<f64> {
        let mut h = Graph::new();
        let vs: Vec<Var> = vals.iter().map(|m| h.constant(m.clone())).collect();
        let o = build(&mut h, &vs)?;
        Ok(h.scalar(o))
    };

    let mut worst = 0.0f64;
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for k in 0..leaf.data().len() {
            let x = leaf.data()[k];
            work[li].data_mut()[k] = x + eps;
            let up = eval(&work)?;
            work[li].data_mut()[k] = x - eps;
            let down = eval(&work)?;
            work[li].data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[li].data()[k];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt()).max(SCALE_FLOOR);
        worst = worst.max(diff2.sqrt() / scale);
    }
    Ok(worst)
}
