//! Two-head representation networks with activation taps.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::gradcore::{sigmoid, Graph, Matrix, Var};
use crate::losses::{mmd2_weighted_graph, outcome_loss_graph, Bandwidth, LossWeights};

const BN_EPS: f64 = 1e-3;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Tarnet,
    Cfr,
    DerCfr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_r: usize,
    pub d_y: usize,
    pub h_r: usize,
    pub h_y: usize,
    pub batch_norm: bool,
    pub rep_norm: bool,
    pub kind: BackboneKind,
    pub outcome: OutcomeKind,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_r == 0 || self.d_y == 0 || self.h_r == 0 || self.h_y == 0 {
            return Err(Error::Config(
                "layer counts and widths must be at least 1".into(),
            ));
        }
        if self.kind == BackboneKind::DerCfr {
            return Err(Error::NotSupported(
                "the DeR-CFR backbone is not implemented".into(),
            ));
        }
        Ok(())
    }

    /// `(rows, cols)` of every parameter tensor for `input_dim` covariates.
    pub fn shapes(&self, input_dim: usize) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let mut fan_in = input_dim;
        for l in 0..self.d_r {
            out.push((format!("rep.{l}.w"), (fan_in, self.h_r)));
            out.push((format!("rep.{l}.b"), (1, self.h_r)));
            fan_in = self.h_r;
        }
        for h in 0..2 {
            let mut fan_in = self.h_r;
            for l in 0..self.d_y {
                out.push((format!("head{h}.{l}.w"), (fan_in, self.h_y)));
                out.push((format!("head{h}.{l}.b"), (1, self.h_y)));
                fan_in = self.h_y;
            }
            out.push((format!("head{h}.out.w"), (self.h_y, 1)));
            out.push((format!("head{h}.out.b"), (1, 1)));
        }
        out
    }

    fn rep_index(&self, l: usize) -> usize {
        2 * l
    }

    fn head_index(&self, h: usize, l: usize) -> usize {
        2 * self.d_r + h * (2 * self.d_y + 2) + 2 * l
    }
}

/// Named parameter tensors in the order given by [`BackboneConfig::shapes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub names: Vec<String>,
    pub values: Vec<Matrix>,
}

impl Params {
    /// Order-dependent digest of every value, for change detection in tests.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in &self.values {
            for v in m.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn input_dim(&self) -> usize {
        self.values.first().map(Matrix::rows).unwrap_or(0)
    }
}

/// Fan-in scaled normal weights (variance `1 / fan_in`) and zero biases.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &BackboneConfig,
    input_dim: usize,
    rng: &mut R,
) -> Result<Params> {
    cfg.validate()?;
    if input_dim == 0 {
        return Err(Error::Config(
            "network needs at least one input column".into(),
        ));
    }
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (name, (r, c)) in cfg.shapes(input_dim) {
        let m = if name.ends_with(".w") {
            let dist = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("positive std");
            Matrix::from_fn(r, c, |_, _| dist.sample(rng))
        } else {
            Matrix::zeros(r, c)
        };
        names.push(name);
        values.push(m);
    }
    Ok(Params { names, values })
}

/// Per-layer batch-norm mean and variance (each `1 x h_r`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<Matrix>,
    pub var: Vec<Matrix>,
}

/// Activation groups used by the decorrelation terms.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTaps {
    /// Last hidden layer of each unit's factual head.
    pub z_p: Matrix,
    /// Representation fed to the heads.
    pub z_r: Matrix,
    /// Remaining hidden layers: representation layers below the output, then
    /// factual-head layers below the last.
    pub z_o: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    /// Raw (pre-sigmoid) outputs of head 0 and head 1, each `n x 1`.
    pub out: [Var; 2],
    pub rep: Var,
    pub z_p: Var,
    pub z_o: Vec<Var>,
    /// Statistics used by each batch-normalized layer.
    pub bn: Option<BnStats>,
    /// Head weight matrices, the target of the l2 penalty.
    pub head_weights: Vec<Var>,
}

fn factual_mix(g: &mut Graph, a0: Var, a1: Var, t: &Matrix) -> Result<Var> {
    let tc = g.constant(t.clone());
    let cc = g.constant(t.map(|v| 1.0 - v));
    let p1 = g.mul_col(a1, tc)?;
    let p0 = g.mul_col(a0, cc)?;
    g.add(p0, p1)
}

/// Builds the forward pass. `params` are nodes in `g` laid out as
/// [`BackboneConfig::shapes`]. Batch-norm uses the statistics of `x` itself
/// unless `fixed_bn` is given.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &BackboneConfig,
    params: &[Var],
    x: Var,
    t: &[f64],
    fixed_bn: Option<&BnStats>,
) -> Result<ForwardGraph> {
    cfg.validate()?;
    let (n, m) = g.value(x).shape();
    let expected = cfg.shapes(m);
    if params.len() != expected.len() {
        return Err(Error::Contract(format!(
            "expected {} parameter tensors, got {}",
            expected.len(),
            params.len()
        )));
    }
    for (v, (name, shape)) in params.iter().zip(&expected) {
        if g.value(*v).shape() != *shape {
            return Err(Error::Dimension {
                op: "forward",
                left: *shape,
                right: g.value(*v).shape(),
            });
        }
        let _ = name;
    }
    if t.len() != n {
        return Err(Error::Dimension {
            op: "forward",
            left: (n, m),
            right: (t.len(), 1),
        });
    }

    let mut bn_mean = Vec::new();
    let mut bn_var = Vec::new();
    let mut rep_hidden = Vec::new();
    let mut h = x;
    for l in 0..cfg.d_r {
        let i = cfg.rep_index(l);
        let z = g.matmul(h, params[i])?;
        let mut z = g.add_row(z, params[i + 1])?;
        if cfg.batch_norm {
            let (mean, var) = match fixed_bn {
                Some(s) => {
                    let mean = g.constant(s.mean[l].clone());
                    let var = g.constant(s.var[l].clone());
                    (mean, var)
                }
                None => {
                    let mean = g.mean_rows(z);
                    let neg = g.scale(mean, -1.0);
                    let centered = g.add_row(z, neg)?;
                    let sq = g.square(centered);
                    let var = g.mean_rows(sq);
                    (mean, var)
                }
            };
            bn_mean.push(g.value(mean).clone());
            bn_var.push(g.value(var).clone());
            let neg = g.scale(mean, -1.0);
            let centered = g.add_row(z, neg)?;
            let shifted = g.offset(var, BN_EPS);
            let inv = g.powf(shifted, -0.5)?;
            z = g.mul_row(centered, inv)?;
        }
        h = g.elu(z);
        if l + 1 < cfg.d_r {
            rep_hidden.push(h);
        }
    }
    let rep = if cfg.rep_norm {
        let sq = g.square(h);
        let ms = g.mean_cols(sq);
        let s = g.scale(ms, cfg.h_r as f64);
        let s = g.offset(s, NORM_EPS);
        let inv = g.powf(s, -0.5)?;
        g.mul_col(h, inv)?
    } else {
        h
    };

    let mut head_hidden: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    let mut out = [rep; 2];
    let mut head_weights = Vec::new();
    for hd in 0..2 {
        let mut a = rep;
        for l in 0..cfg.d_y {
            let i = cfg.head_index(hd, l);
            head_weights.push(params[i]);
            let z = g.matmul(a, params[i])?;
            let z = g.add_row(z, params[i + 1])?;
            a = g.elu(z);
            head_hidden[hd].push(a);
        }
        let i = cfg.head_index(hd, cfg.d_y);
        head_weights.push(params[i]);
        let z = g.matmul(a, params[i])?;
        out[hd] = g.add_row(z, params[i + 1])?;
    }

    let tcol = Matrix::column(t.to_vec());
    let mut z_o = rep_hidden;
    for (&a, &b) in head_hidden[0].iter().zip(&head_hidden[1]).take(cfg.d_y - 1) {
        z_o.push(factual_mix(g, a, b, &tcol)?);
    }
    let last = cfg.d_y - 1;
    let z_p = factual_mix(g, head_hidden[0][last], head_hidden[1][last], &tcol)?;
    let bn = cfg.batch_norm.then_some(BnStats {
        mean: bn_mean,
        var: bn_var,
    });
    Ok(ForwardGraph {
        out,
        rep,
        z_p,
        z_o,
        bn,
        head_weights,
    })
}

impl ForwardGraph {
    pub fn taps(&self, g: &Graph) -> NetworkTaps {
        NetworkTaps {
            z_p: g.value(self.z_p).clone(),
            z_r: g.value(self.rep).clone(),
            z_o: self.z_o.iter().map(|v| g.value(*v).clone()).collect(),
        }
    }

    /// Factual raw output `t * out1 + (1 - t) * out0`.
    pub fn factual(&self, g: &mut Graph, t: &[f64]) -> Result<Var> {
        factual_mix(g, self.out[0], self.out[1], &Matrix::column(t.to_vec()))
    }

    pub fn predictions(&self, g: &Graph, kind: OutcomeKind) -> Predictions {
        let read = |v: Var| -> Vec<f64> {
            let d = g.value(v).data();
            match kind {
                OutcomeKind::Binary => d.iter().map(|&z| sigmoid(z)).collect(),
                OutcomeKind::Continuous => d.to_vec(),
            }
        };
        Predictions {
            y0: read(self.out[0]),
            y1: read(self.out[1]),
        }
    }
}

/// Evaluates the network without gradients.
pub fn forward(
    cfg: &BackboneConfig,
    params: &Params,
    x: &Matrix,
    t: &[f64],
    fixed_bn: Option<&BnStats>,
) -> Result<(Predictions, NetworkTaps, Option<BnStats>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .values
        .iter()
        .map(|m| g.constant(m.clone()))
        .collect();
    let xv = g.constant(x.clone());
    let f = forward_graph(&mut g, cfg, &vars, xv, t, fixed_bn)?;
    Ok((f.predictions(&g, cfg.outcome), f.taps(&g), f.bn.clone()))
}

/// Terms of the network objective as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct NetworkLoss {
    pub total: Var,
    pub outcome: Var,
    pub ipm: Option<Var>,
}

/// Weighted factual loss with the head l2 penalty, plus `alpha` times the
/// weighted treated/control discrepancy of the representation for CFR.
///
/// `ipm_rows` restricts the discrepancy to a subset of units.
#[allow(clippy::too_many_arguments)]
pub fn network_loss(
    g: &mut Graph,
    cfg: &BackboneConfig,
    fwd: &ForwardGraph,
    ds: &Dataset,
    w: &[f64],
    lw: &LossWeights,
    ipm_rows: Option<&[usize]>,
    bandwidth: Bandwidth,
) -> Result<NetworkLoss> {
    if ds.kind != cfg.outcome {
        return Err(Error::Contract(format!(
            "model built for {:?} outcomes, data has {:?}",
            cfg.outcome, ds.kind
        )));
    }
    let f = fwd.factual(g, &ds.t)?;
    let outcome = outcome_loss_graph(g, f, &ds.yf, w, lw.lambda, &fwd.head_weights, cfg.outcome)?;
    let ipm = if cfg.kind == BackboneKind::Cfr && lw.alpha > 0.0 {
        let all: Vec<usize>;
        let rows = match ipm_rows {
            Some(r) => r,
            None => {
                all = (0..ds.len()).collect();
                &all
            }
        };
        let rep = g.select_rows(fwd.rep, rows)?;
        let treated: Vec<usize> = (0..rows.len()).filter(|&k| ds.t[rows[k]] == 1.0).collect();
        let control: Vec<usize> = (0..rows.len()).filter(|&k| ds.t[rows[k]] == 0.0).collect();
        let wv = g.constant(Matrix::column(rows.iter().map(|&i| w[i]).collect()));
        Some(mmd2_weighted_graph(
            g, rep, &treated, &control, wv, bandwidth,
        )?)
    } else {
        None
    };
    let total = match ipm {
        Some(d) => {
            let s = g.scale(d, lw.alpha);
            g.add(outcome, s)?
        }
        None => outcome,
    };
    Ok(NetworkLoss {
        total,
        outcome,
        ipm,
    })
}
