use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Matrix;

/// Adam hyper-parameters plus a staircase exponential learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied every `decay_steps` steps.
    pub decay: f64,
    pub decay_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 1.0,
            decay_steps: 100,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.decay_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Learning rate that the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> f64 {
        let k = self.t / self.cfg.decay_steps as u64;
        self.cfg.lr * self.cfg.decay.powi(k.min(i32::MAX as u64) as i32)
    }

    /// One bias-corrected update. Nothing is modified if any gradient is
    /// non-finite; the error names the first offending parameter.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [Matrix],
        grads: &[Matrix],
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != params.len()
            || names.len() != params.len()
        {
            return Err(Error::Contract(format!(
                "optimizer built for {} tensors, got {} params / {} grads / {} names",
                self.m.len(),
                params.len(),
                grads.len(),
                names.len()
            )));
        }
        for ((name, p), g) in names.iter().zip(params.iter()).zip(grads) {
            p.same_shape(g, "adam")?;
            if !g.is_finite() {
                return Err(Error::Optimizer {
                    param: name.clone(),
                });
            }
        }
        let lr = self.current_lr();
        self.t += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for i in 0..params.len() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params[i].data_mut();
            for (k, &g) in grads[i].data().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Adam::new(AdamConfig::default(), &[(2, 2)]);
        let mut p = vec![Matrix::from_fn(2, 2, |r, c| (r * 2 + c) as f64)];
        let before = p[0].clone();
        opt.step(&names(1), &mut p, &[Matrix::zeros(2, 2)]).unwrap();
        assert_eq!(p[0], before);
    }

    #[test]
    fn first_step_descends_on_square() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &[(1, 1)]);
        let mut p = vec![Matrix::scalar(1.0)];
        let g = Matrix::scalar(2.0);
        opt.step(&names(1), &mut p, &[g]).unwrap();
        assert!(p[0].data()[0] < 1.0);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut opt = Adam::new(AdamConfig::default(), &[(1, 1), (1, 2)]);
        let mut p = vec![Matrix::scalar(0.0), Matrix::zeros(1, 2)];
        let g = vec![Matrix::scalar(0.0), Matrix::row(vec![1.0, f64::NAN])];
        let err = opt.step(&names(2), &mut p, &g).unwrap_err();
        assert!(matches!(err, Error::Optimizer { ref param } if param == "p1"));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn staircase_decay() {
        let cfg = AdamConfig {
            lr: 1.0,
            decay: 0.5,
            decay_steps: 2,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &[(1, 1)]);
        let mut p = vec![Matrix::scalar(0.0)];
        let mut seen = vec![];
        for _ in 0..5 {
            seen.push(opt.current_lr());
            opt.step(&names(1), &mut p, &[Matrix::scalar(0.0)]).unwrap();
        }
        assert_eq!(seen, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = sum_i a_i (x_i - c_i)^2
        let a = [1.0, 3.0, 0.5];
        let c = [2.0, -1.0, 0.25];
        let cfg = AdamConfig {
            lr: 0.05,
            decay: 0.96,
            decay_steps: 50,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &[(1, 3)]);
        let mut p = vec![Matrix::zeros(1, 3)];
        let grad = |x: &Matrix| Matrix::from_fn(1, 3, |_, j| 2.0 * a[j] * (x.get(0, j) - c[j]));
        for _ in 0..2000 {
            let g = grad(&p[0]);
            opt.step(&names(1), &mut p, &[g]).unwrap();
        }
        let norm = grad(&p[0]).sum_squares().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }
}
