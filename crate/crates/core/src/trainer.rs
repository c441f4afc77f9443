//! Alternating optimization of network parameters and sample weights.

use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::gradcore::{Adam, AdamConfig, Graph, Matrix, RngState, Var};
use crate::losses::{
    factual_loss_graph, weight_loss, Bandwidth, HapBanks, LayerBank, LossWeights, SampleWeights,
};
use crate::nets::{
    forward, forward_graph, init_params, network_loss, BackboneConfig, BnStats, NetworkTaps, Params,
};

/// Rows above which the regularizers fall back to a fresh random subset.
pub const LARGE_N: usize = 4096;
pub const LARGE_N_BATCH: usize = 1024;

const STREAM_INIT: u64 = 100;
const STREAM_BANKS: u64 = 101;
const STREAM_ROWS: u64 = 102;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vanilla,
    Sbrl,
    #[default]
    SbrlHap,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Sbrl => "sbrl",
            Variant::SbrlHap => "sbrl-hap",
        }
    }
}

/// Switches for the three groups of the weight objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub balance: bool,
    pub independence: bool,
    pub hap: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            balance: true,
            independence: true,
            hap: true,
        }
    }
}

impl Ablation {
    pub fn label(&self) -> String {
        let b = |on: bool| if on { "on" } else { "off" };
        format!(
            "br-{}_ir-{}_hap-{}",
            b(self.balance),
            b(self.independence),
            b(self.hap)
        )
    }
}

/// Coefficients used by the weight step, or `None` when there is no weight
/// step at all.
pub fn weight_objective(
    variant: Variant,
    ablation: Ablation,
    lw: &LossWeights,
) -> Option<LossWeights> {
    let mut w = *lw;
    match variant {
        Variant::Vanilla => return None,
        Variant::Sbrl => {
            w.gamma2 = 0.0;
            w.gamma3 = 0.0;
        }
        Variant::SbrlHap => {}
    }
    if !ablation.balance {
        w.alpha = 0.0;
    }
    if !ablation.independence {
        w.gamma1 = 0.0;
    }
    if !ablation.hap {
        w.gamma2 = 0.0;
        w.gamma3 = 0.0;
    }
    Some(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_steps: usize,
    pub patience: usize,
    /// Validation loss is evaluated every this many iterations and on the
    /// last one.
    pub eval_every: usize,
    pub k_net: usize,
    pub k_w: usize,
    #[serde(skip)]
    pub seed: u64,
    /// Rows used by the kernel and decorrelation terms per step. `None`
    /// means all rows up to [`LARGE_N`] and [`LARGE_N_BATCH`] beyond.
    pub reg_batch: Option<usize>,
    pub rff_features: usize,
    #[serde(skip)]
    pub variant: Variant,
    #[serde(skip)]
    pub ablation: Ablation,
    #[serde(skip)]
    pub trace: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 3000,
            lr: 1e-3,
            lr_decay: 0.97,
            lr_decay_steps: 100,
            patience: 300,
            eval_every: 10,
            k_net: 1,
            k_w: 1,
            seed: 0,
            reg_batch: None,
            rff_features: 5,
            variant: Variant::SbrlHap,
            ablation: Ablation::default(),
            trace: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.eval_every == 0 || self.k_net == 0 || self.k_w == 0 {
            return bad("eval_every, k_net and k_w must be >= 1");
        }
        if self.rff_features == 0 {
            return bad("rff_features must be >= 1");
        }
        if self.reg_batch == Some(0) || self.reg_batch == Some(1) {
            return bad("reg_batch must be >= 2");
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            decay: self.lr_decay,
            decay_steps: self.lr_decay_steps,
            ..AdamConfig::default()
        }
    }
}

/// Losses recorded for one iteration. Terms that were not computed are
/// empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub network_total: f64,
    pub outcome: f64,
    pub ipm: Option<f64>,
    pub weight_total: Option<f64>,
    pub balance: Option<f64>,
    pub independence: Option<f64>,
    pub rep_decorrelation: Option<f64>,
    pub other_decorrelation: Option<f64>,
    pub weight_penalty: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub trace: Vec<TraceRow>,
}

impl TrainState {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.trace {
            w.serialize(row)
                .map_err(|e| Error::Protocol(format!("trace serialization: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("trace.csv", e))
    }
}

/// A trained network with everything needed to predict on new units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub backbone: BackboneConfig,
    pub params: Params,
    pub bn: Option<BnStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Effects {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub ite: Vec<f64>,
}

impl TrainedModel {
    /// Potential outcomes and effects; binary heads give probabilities.
    pub fn predict_effects(&self, x: &Matrix) -> Result<Effects> {
        let input = self.params.input_dim();
        if x.cols() != input {
            return Err(Error::Dimension {
                op: "predict_effects",
                left: (x.rows(), input),
                right: x.shape(),
            });
        }
        let t = vec![0.0; x.rows()];
        let (p, _, _) = forward(&self.backbone, &self.params, x, &t, self.bn.as_ref())?;
        let ite = p.y1.iter().zip(&p.y0).map(|(a, b)| a - b).collect();
        Ok(Effects {
            y0: p.y0,
            y1: p.y1,
            ite,
        })
    }

    /// Hidden activations for `x` with the stored normalization.
    pub fn taps(&self, x: &Matrix, t: &[f64]) -> Result<NetworkTaps> {
        Ok(forward(&self.backbone, &self.params, x, t, self.bn.as_ref())?.1)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub weights: SampleWeights,
    pub state: TrainState,
}

/// Terms of one network step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkStep {
    pub total: f64,
    pub outcome: f64,
    pub ipm: Option<f64>,
}

/// Terms of one weight step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightStep {
    pub total: f64,
    pub balance: Option<f64>,
    pub independence: Option<f64>,
    pub rep_decorrelation: Option<f64>,
    pub other_decorrelation: Option<f64>,
    pub penalty: f64,
}

fn finite(term: &str, v: f64, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            term: term.to_string(),
            iteration,
        })
    }
}

fn finite_opt(term: &str, v: Option<f64>, iteration: usize) -> Result<Option<f64>> {
    v.map(|x| finite(term, x, iteration)).transpose()
}

/// Unweighted mean factual loss of raw outputs.
fn factual_loss(kind: OutcomeKind, raw_factual: &[f64], yf: &[f64]) -> f64 {
    let n = yf.len() as f64;
    raw_factual
        .iter()
        .zip(yf)
        .map(|(&l, &y)| match kind {
            OutcomeKind::Binary => l.max(0.0) + (-l.abs()).exp().ln_1p() - y * l,
            OutcomeKind::Continuous => (l - y) * (l - y),
        })
        .sum::<f64>()
        / n
}

/// Owns one training run. Steps can be driven individually; [`Trainer::run`]
/// drives the full loop.
pub struct Trainer<'a> {
    backbone: BackboneConfig,
    tc: TrainConfig,
    lw: LossWeights,
    wlw: Option<LossWeights>,
    train: &'a Dataset,
    val: &'a Dataset,
    params: Params,
    weights: SampleWeights,
    net_opt: Adam,
    w_opt: Adam,
    banks: HapBanks,
    rows_rng: RngState,
    bandwidth: Bandwidth,
    iteration: usize,
    /// Taps and batch statistics of the current parameters on training data.
    fresh: Option<(NetworkTaps, Option<BnStats>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        backbone: BackboneConfig,
        train: &'a Dataset,
        val: &'a Dataset,
        lw: LossWeights,
        tc: TrainConfig,
    ) -> Result<Self> {
        backbone.validate()?;
        tc.validate()?;
        lw.validate()?;
        train.validate()?;
        val.validate()?;
        if train.dim() != val.dim() {
            return Err(Error::Dimension {
                op: "train",
                left: (train.len(), train.dim()),
                right: (val.len(), val.dim()),
            });
        }
        if val.is_empty() {
            return Err(Error::Contract("validation set is empty".into()));
        }
        if train.kind != backbone.outcome || val.kind != backbone.outcome {
            return Err(Error::Config(format!(
                "model configured for {:?} outcomes but data is {:?}",
                backbone.outcome, train.kind
            )));
        }
        let nt = train.treated().len();
        if nt == 0 || nt == train.len() {
            return Err(Error::Overlap(format!(
                "training data has {nt} treated of {} units; both arms are required",
                train.len()
            )));
        }
        let params = init_params(
            &backbone,
            train.dim(),
            &mut RngState::with_stream(tc.seed, STREAM_INIT),
        )?;
        let mut bank_rng = RngState::with_stream(tc.seed, STREAM_BANKS);
        let k = tc.rff_features;
        let banks = HapBanks {
            p: LayerBank::draw(backbone.h_y, k, &mut bank_rng)?,
            r: LayerBank::draw(backbone.h_r, k, &mut bank_rng)?,
            o: (0..backbone.d_r - 1)
                .map(|_| backbone.h_r)
                .chain((0..backbone.d_y - 1).map(|_| backbone.h_y))
                .map(|w| LayerBank::draw(w, k, &mut bank_rng))
                .collect::<Result<_>>()?,
        };
        let shapes: Vec<(usize, usize)> = params.values.iter().map(|m| m.shape()).collect();
        let n = train.len();
        Ok(Self {
            wlw: weight_objective(tc.variant, tc.ablation, &lw),
            net_opt: Adam::new(tc.adam(), &shapes),
            w_opt: Adam::new(tc.adam(), &[(n, 1)]),
            rows_rng: RngState::with_stream(tc.seed, STREAM_ROWS),
            bandwidth: Bandwidth::Median,
            weights: SampleWeights::ones(n),
            iteration: 0,
            fresh: None,
            backbone,
            tc,
            lw,
            train,
            val,
            params,
            banks,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn weights(&self) -> &SampleWeights {
        &self.weights
    }

    pub fn banks(&self) -> &HapBanks {
        &self.banks
    }

    /// Coefficients of the weight objective, `None` for the vanilla variant.
    pub fn weight_coefficients(&self) -> Option<&LossWeights> {
        self.wlw.as_ref()
    }

    fn reg_rows(&mut self) -> Option<Vec<usize>> {
        let n = self.train.len();
        let k = self
            .tc
            .reg_batch
            .or((n > LARGE_N).then_some(LARGE_N_BATCH))?;
        if k >= n {
            return None;
        }
        let mut rows = sample(&mut self.rows_rng, n, k).into_vec();
        rows.sort_unstable();
        Some(rows)
    }

    /// One Adam step on the network objective with the weights held fixed.
    pub fn network_step(&mut self) -> Result<NetworkStep> {
        let it = self.iteration;
        let w = self.weights.weights();
        let rows = self.reg_rows();
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .values
            .iter()
            .map(|m| g.param(m.clone()))
            .collect();
        let x = g.constant(self.train.x.clone());
        let fwd = forward_graph(&mut g, &self.backbone, &vars, x, &self.train.t, None)?;
        let loss = network_loss(
            &mut g,
            &self.backbone,
            &fwd,
            self.train,
            &w,
            &self.lw,
            rows.as_deref(),
            self.bandwidth,
        )?;
        let step = NetworkStep {
            total: finite("network_total", g.scalar(loss.total), it)?,
            outcome: finite("outcome", g.scalar(loss.outcome), it)?,
            ipm: finite_opt("ipm", loss.ipm.map(|v| g.scalar(v)), it)?,
        };
        g.backward(loss.total)?;
        let grads: Vec<Matrix> = vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(g.value(v).rows(), g.value(v).cols()))
            })
            .collect();
        self.net_opt
            .step(&self.params.names, &mut self.params.values, &grads)?;
        self.fresh = None;
        Ok(step)
    }

    fn refresh(&mut self) -> Result<()> {
        if self.fresh.is_none() {
            let (_, taps, bn) = forward(
                &self.backbone,
                &self.params,
                &self.train.x,
                &self.train.t,
                None,
            )?;
            self.fresh = Some((taps, bn));
        }
        Ok(())
    }

    /// One Adam step on the weight objective with the network held fixed.
    /// Returns `None` when the variant has no weight step.
    pub fn weight_step(&mut self) -> Result<Option<WeightStep>> {
        let Some(wlw) = self.wlw else {
            return Ok(None);
        };
        let it = self.iteration;
        self.refresh()?;
        let rows = self.reg_rows();
        let (taps, _) = self.fresh.as_ref().expect("refreshed");
        let mut g = Graph::new();
        let theta = g.param(self.weights.theta_matrix());
        let wl = weight_loss(
            &mut g,
            theta,
            taps,
            &self.train.t,
            rows.as_deref(),
            &wlw,
            &self.banks,
            self.bandwidth,
        )?;
        let read = |v: Option<Var>| v.map(|v| g.scalar(v));
        let step = WeightStep {
            total: finite("weight_total", g.scalar(wl.total), it)?,
            balance: finite_opt("balance", read(wl.balance), it)?,
            independence: finite_opt("independence", read(wl.independence), it)?,
            rep_decorrelation: finite_opt("rep_decorrelation", read(wl.rep_decorrelation), it)?,
            other_decorrelation: finite_opt(
                "other_decorrelation",
                read(wl.other_decorrelation),
                it,
            )?,
            penalty: finite("weight_penalty", g.scalar(wl.penalty), it)?,
        };
        g.backward(wl.total)?;
        let grad = g
            .grad(theta)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(self.weights.len(), 1));
        let mut theta_m = vec![self.weights.theta_matrix()];
        self.w_opt
            .step(&["theta_w".to_string()], &mut theta_m, &[grad])?;
        self.weights.set_theta(&theta_m[0])?;
        let wsum: f64 = self.weights.weights().iter().sum();
        if wsum <= 0.0 || !wsum.is_finite() {
            return Err(Error::DegenerateWeights(format!(
                "weight sum {wsum} after iteration {it}"
            )));
        }
        Ok(Some(step))
    }

    /// The current network with batch-norm statistics frozen from the
    /// training data.
    pub fn snapshot(&mut self) -> Result<TrainedModel> {
        let bn = if self.backbone.batch_norm {
            self.refresh()?;
            self.fresh.as_ref().and_then(|(_, bn)| bn.clone())
        } else {
            None
        };
        Ok(TrainedModel {
            backbone: self.backbone.clone(),
            params: self.params.clone(),
            bn,
        })
    }

    /// Unweighted factual loss on the validation set.
    pub fn validation_loss(&mut self) -> Result<f64> {
        let model = self.snapshot()?;
        let mut g = Graph::new();
        let vars: Vec<Var> = model
            .params
            .values
            .iter()
            .map(|m| g.constant(m.clone()))
            .collect();
        let x = g.constant(self.val.x.clone());
        let fwd = forward_graph(
            &mut g,
            &self.backbone,
            &vars,
            x,
            &self.val.t,
            model.bn.as_ref(),
        )?;
        let f = fwd.factual(&mut g, &self.val.t)?;
        let loss = factual_loss(self.backbone.outcome, g.value(f).data(), &self.val.yf);
        finite("validation", loss, self.iteration)
    }

    /// Mean unweighted factual loss on the training set.
    pub fn training_loss(&mut self) -> Result<f64> {
        let ones = vec![1.0; self.train.len()];
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .values
            .iter()
            .map(|m| g.constant(m.clone()))
            .collect();
        let x = g.constant(self.train.x.clone());
        let fwd = forward_graph(&mut g, &self.backbone, &vars, x, &self.train.t, None)?;
        let f = fwd.factual(&mut g, &self.train.t)?;
        let l = factual_loss_graph(&mut g, f, &self.train.yf, &ones, self.backbone.outcome)?;
        Ok(g.scalar(l))
    }

    /// Runs the alternating loop with early stopping and returns the best
    /// evaluated iterate together with the weights at that point.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut best: Option<(f64, usize, TrainedModel, SampleWeights)> = None;
        let mut trace = Vec::new();
        let mut stopped_early = false;
        let mut last = 0;
        for it in 0..self.tc.max_iters {
            self.iteration = it;
            last = it;
            let lr = self.net_opt.current_lr();
            let mut net = None;
            for _ in 0..self.tc.k_net {
                net = Some(self.network_step()?);
            }
            let mut ws = None;
            if self.wlw.is_some() {
                for _ in 0..self.tc.k_w {
                    ws = self.weight_step()?;
                }
            }
            let evaluate = it % self.tc.eval_every == 0 || it + 1 == self.tc.max_iters;
            let val_loss = if evaluate {
                Some(self.validation_loss()?)
            } else {
                None
            };
            if self.tc.trace {
                let net = net.expect("k_net >= 1");
                trace.push(TraceRow {
                    iteration: it,
                    lr,
                    network_total: net.total,
                    outcome: net.outcome,
                    ipm: net.ipm,
                    weight_total: ws.map(|s| s.total),
                    balance: ws.and_then(|s| s.balance),
                    independence: ws.and_then(|s| s.independence),
                    rep_decorrelation: ws.and_then(|s| s.rep_decorrelation),
                    other_decorrelation: ws.and_then(|s| s.other_decorrelation),
                    weight_penalty: ws.map(|s| s.penalty),
                    val_loss,
                });
            }
            if let Some(v) = val_loss {
                let improved = best.as_ref().is_none_or(|b| v < b.0);
                if improved {
                    best = Some((v, it, self.snapshot()?, self.weights.clone()));
                } else if it - best.as_ref().map_or(0, |b| b.1) >= self.tc.patience {
                    log::debug!("early stop at iteration {it}");
                    stopped_early = true;
                    break;
                }
            }
        }
        let (best_val_loss, best_iteration, model, weights) =
            best.expect("last iteration is always evaluated");
        Ok(TrainOutcome {
            model,
            weights,
            state: TrainState {
                iteration: last + 1,
                best_iteration,
                best_val_loss,
                stopped_early,
                trace,
            },
        })
    }
}

/// Convenience wrapper around [`Trainer::run`].
pub fn train(
    backbone: BackboneConfig,
    train: &Dataset,
    val: &Dataset,
    lw: LossWeights,
    tc: TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(backbone, train, val, lw, tc)?.run()
}
