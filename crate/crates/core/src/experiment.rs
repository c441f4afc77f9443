//! Declarative experiments: data generation, training, evaluation, sweeps.
//!
//! Every run is a pure function of the configuration and its seed, so the
//! files written here can be regenerated bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::io::{read_roles, render_csv, render_roles};
use crate::datagen::{
    env_suite, generate_population, prepare_semi_synthetic, Dataset, EnvSpec, Schema, SuiteOptions,
    SynConfig, DEFAULT_RHO_GRID,
};
use crate::error::{Error, Result};
use crate::gradcore::RngState;
use crate::losses::LossWeights;
use crate::metrics::{decorrelation_heatmap, evaluate_env, Heatmap, MetricsReport};
use crate::nets::{BackboneConfig, BackboneKind};
use crate::trainer::{train, Ablation, TrainConfig, TrainState, TrainedModel, Variant};

const STREAM_SEMI: u64 = 7;
const STREAM_HEATMAP: u64 = 200;

fn default_rhos() -> Vec<f64> {
    DEFAULT_RHO_GRID.to_vec()
}

fn default_replications() -> usize {
    1
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub m_i: usize,
    pub m_c: usize,
    pub m_a: usize,
    pub m_v: usize,
    /// Size of the parent population.
    pub n: usize,
    #[serde(default = "default_rhos")]
    pub rhos: Vec<f64>,
    #[serde(default)]
    pub suite: SuiteOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiData {
    pub path: PathBuf,
    #[serde(default)]
    pub roles: Option<PathBuf>,
    pub schema: Schema,
    /// Bias rate of the held-out split; the schema default when absent.
    #[serde(default)]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Semi(SemiData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub heatmap_dims: usize,
    pub heatmap_features: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heatmap_dims: 25,
            heatmap_features: 5,
        }
    }
}

/// Grid of settings expanded as a Cartesian product. Empty lists keep the
/// base configuration's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub backbones: Vec<BackboneKind>,
    pub variants: Vec<Variant>,
    pub alpha: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub gamma3: Vec<f64>,
    /// Replace the ablation setting with the four on/off rows of the
    /// ablation table.
    pub ablation_preset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub ablation: Ablation,
    pub data: DataConfig,
    pub model: BackboneConfig,
    #[serde(default)]
    pub losses: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Parses and validates a TOML experiment configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Upper bound on the number of points a sweep may expand to.
pub const MAX_GRID_POINTS: usize = 100_000;

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        self.model.validate().map_err(as_config)?;
        self.losses.validate()?;
        self.train.validate()?;
        if self.evaluation.heatmap_dims == 0 || self.evaluation.heatmap_features == 0 {
            return Err(Error::Config(
                "heatmap dims and features must be >= 1".into(),
            ));
        }
        match &self.data {
            DataConfig::Synthetic(s) => {
                self.syn_config().validate()?;
                if s.rhos.is_empty() {
                    return Err(Error::Config("bias-rate grid is empty".into()));
                }
                for &rho in s.rhos.iter().chain([s.suite.train_rho].iter()) {
                    EnvSpec::new(rho).validate().map_err(as_config)?;
                }
                if s.suite.env_size < 4 || s.suite.pool_size == 0 {
                    return Err(Error::Config(
                        "env_size must be >= 4 and pool_size >= 1".into(),
                    ));
                }
                if !(0.0..1.0).contains(&s.suite.val_fraction) {
                    return Err(Error::Config("val_fraction must be in [0, 1)".into()));
                }
            }
            DataConfig::Semi(s) => {
                let rho = s.rho.unwrap_or(s.schema.default_rho());
                EnvSpec::new(rho).validate().map_err(as_config)?;
            }
        }
        if let Some(sw) = &self.sweep {
            let size = [
                sw.backbones.len(),
                sw.variants.len(),
                sw.alpha.len(),
                sw.gamma1.len(),
                sw.gamma2.len(),
                sw.gamma3.len(),
                if sw.ablation_preset {
                    ablation_rows().len()
                } else {
                    0
                },
            ]
            .iter()
            .fold(1usize, |acc, &k| acc.saturating_mul(k.max(1)));
            if size > MAX_GRID_POINTS {
                return Err(Error::Config(format!(
                    "sweep expands to {size} points, limit is {MAX_GRID_POINTS}"
                )));
            }
        }
        for p in self.grid() {
            p.losses.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// The benchmark family is fixed by the experiment seed; replications
    /// only re-draw environments.
    fn syn_config(&self) -> SynConfig {
        match &self.data {
            DataConfig::Synthetic(s) => SynConfig {
                m_i: s.m_i,
                m_c: s.m_c,
                m_a: s.m_a,
                m_v: s.m_v,
                n: s.n,
                seed: self.seed,
            },
            DataConfig::Semi(_) => unreachable!("synthetic only"),
        }
    }

    /// Settings of every run of a sweep; a single point without one.
    pub fn grid(&self) -> Vec<GridPoint> {
        let base = GridPoint {
            backbone: self.model.kind,
            variant: self.variant,
            ablation: self.ablation,
            losses: self.losses,
        };
        let Some(sw) = &self.sweep else {
            return vec![base];
        };
        let mut points = vec![base];
        let expand = |points: Vec<GridPoint>,
                      n: usize,
                      set: &dyn Fn(&mut GridPoint, usize)|
         -> Vec<GridPoint> {
            if n == 0 {
                return points;
            }
            points
                .into_iter()
                .flat_map(|p| {
                    (0..n).map(move |i| {
                        let mut q = p;
                        set(&mut q, i);
                        q
                    })
                })
                .collect()
        };
        points = expand(points, sw.backbones.len(), &|p, i| {
            p.backbone = sw.backbones[i]
        });
        points = expand(points, sw.variants.len(), &|p, i| {
            p.variant = sw.variants[i]
        });
        points = expand(points, sw.alpha.len(), &|p, i| p.losses.alpha = sw.alpha[i]);
        points = expand(points, sw.gamma1.len(), &|p, i| {
            p.losses.gamma1 = sw.gamma1[i]
        });
        points = expand(points, sw.gamma2.len(), &|p, i| {
            p.losses.gamma2 = sw.gamma2[i]
        });
        points = expand(points, sw.gamma3.len(), &|p, i| {
            p.losses.gamma3 = sw.gamma3[i]
        });
        if sw.ablation_preset {
            let rows = ablation_rows();
            points = expand(points, rows.len(), &|p, i| p.ablation = rows[i]);
        }
        points
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// The four rows of the ablation table: each group switched off in turn,
/// then the full model.
pub fn ablation_rows() -> [Ablation; 4] {
    let row = |balance, independence, hap| Ablation {
        balance,
        independence,
        hap,
    };
    [
        row(false, true, true),
        row(true, false, true),
        row(true, true, false),
        row(true, true, true),
    ]
}

/// One configuration of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub backbone: BackboneKind,
    pub variant: Variant,
    pub ablation: Ablation,
    pub losses: LossWeights,
}

impl GridPoint {
    pub fn backbone_name(&self) -> &'static str {
        match self.backbone {
            BackboneKind::Tarnet => "tarnet",
            BackboneKind::Cfr => "cfr",
            BackboneKind::DerCfr => "dercfr",
        }
    }

    pub fn label(&self) -> String {
        let l = &self.losses;
        format!(
            "{}/{}/{}/a={}_g1={}_g2={}_g3={}",
            self.backbone_name(),
            self.variant.name(),
            self.ablation.label(),
            l.alpha,
            l.gamma1,
            l.gamma2,
            l.gamma3
        )
    }
}

/// A test environment: name, bias rate when known, data.
#[derive(Debug, Clone, PartialEq)]
pub struct TestEnv {
    pub name: String,
    pub rho: Option<f64>,
    pub data: Dataset,
}

/// Data of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub envs: Vec<TestEnv>,
    /// The parent population for synthetic data.
    pub population: Option<Dataset>,
    /// Digest of the generating coefficients for synthetic data.
    pub gen_digest: Option<String>,
}

fn rho_name(rho: f64) -> String {
    format!("rho_{rho}")
}

/// Builds the data of one replication. Synthetic replications share the
/// parent population and coefficients and draw their environments with seed
/// `seed + replication`; semi-synthetic ones re-draw the split.
pub fn prepare_data(cfg: &ExperimentConfig, replication: usize) -> Result<Prepared> {
    let seed = cfg.seed.wrapping_add(replication as u64);
    match &cfg.data {
        DataConfig::Synthetic(s) => {
            let (parent, params) = generate_population(&cfg.syn_config())?;
            let suite = env_suite(&params, &parent, &s.rhos, &s.suite, seed)?;
            let gen_json = serde_json::to_string(&params).expect("params serialize");
            Ok(Prepared {
                train: suite.train,
                val: suite.val,
                envs: suite
                    .envs
                    .into_iter()
                    .map(|e| TestEnv {
                        name: rho_name(e.spec.rho),
                        rho: Some(e.spec.rho),
                        data: e.data,
                    })
                    .collect(),
                population: Some(parent),
                gen_digest: Some(hex::encode(Sha256::digest(gen_json.as_bytes()))),
            })
        }
        DataConfig::Semi(s) => {
            let bytes = fs::read(&s.path).map_err(|e| Error::io(&s.path, e))?;
            let roles = s.roles.as_deref().map(read_roles).transpose()?;
            let rho = s.rho.unwrap_or(s.schema.default_rho());
            let mut rng = RngState::with_stream(seed, STREAM_SEMI);
            let split = prepare_semi_synthetic(
                &bytes,
                roles.as_ref(),
                s.schema,
                &EnvSpec::new(rho),
                &mut rng,
                &s.path.display().to_string(),
            )?;
            Ok(Prepared {
                train: split.train,
                val: split.val,
                envs: vec![TestEnv {
                    name: "test".into(),
                    rho: Some(rho),
                    data: split.test,
                }],
                population: None,
                gen_digest: None,
            })
        }
    }
}

/// Outputs of one (grid point, replication) run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub point_index: usize,
    pub point: GridPoint,
    pub replication: usize,
    pub seed: u64,
    pub model: TrainedModel,
    pub weights: Vec<f64>,
    pub state: TrainState,
    pub report: MetricsReport,
    pub heatmap: Heatmap,
}

impl RunResult {
    pub fn run_id(&self) -> String {
        format!("p{}-r{}", self.point_index, self.replication)
    }
}

fn run_config(
    cfg: &ExperimentConfig,
    point: &GridPoint,
    seed: u64,
    trace: bool,
) -> (BackboneConfig, TrainConfig) {
    let backbone = BackboneConfig {
        kind: point.backbone,
        ..cfg.model.clone()
    };
    let tc = TrainConfig {
        seed,
        variant: point.variant,
        ablation: point.ablation,
        trace,
        ..cfg.train.clone()
    };
    (backbone, tc)
}

/// Scores a trained model on every test environment.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &TrainedModel,
    data: &Prepared,
    seed: u64,
) -> Result<(MetricsReport, Heatmap)> {
    let mut envs = Vec::with_capacity(data.envs.len());
    for e in &data.envs {
        let eff = model.predict_effects(&e.data.x)?;
        envs.push(evaluate_env(&e.name, e.rho, &e.data, &eff.y0, &eff.y1)?);
    }
    let taps = model.taps(&data.train.x, &data.train.t)?;
    let mut rng = RngState::with_stream(seed, STREAM_HEATMAP);
    let heatmap = decorrelation_heatmap(
        &taps.z_r,
        cfg.evaluation.heatmap_dims,
        cfg.evaluation.heatmap_features,
        &mut rng,
    )?;
    let report = MetricsReport::from_envs(envs, Some(heatmap.mean_off_diagonal))?;
    Ok((report, heatmap))
}

/// Trains and evaluates one grid point on one replication's data.
pub fn run_point(
    cfg: &ExperimentConfig,
    point_index: usize,
    point: &GridPoint,
    data: &Prepared,
    replication: usize,
    trace: bool,
) -> Result<RunResult> {
    let seed = cfg.seed.wrapping_add(replication as u64);
    let (backbone, tc) = run_config(cfg, point, seed, trace);
    let out = train(backbone, &data.train, &data.val, point.losses, tc)?;
    let (report, heatmap) = evaluate_model(cfg, &out.model, data, seed)?;
    Ok(RunResult {
        point_index,
        point: *point,
        replication,
        seed,
        model: out.model,
        weights: out.weights.weights(),
        state: out.state,
        report,
        heatmap,
    })
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// All runs of an experiment, ordered by (grid point, replication).
#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub digest: String,
    pub seed: u64,
    pub runs: Vec<RunResult>,
}

/// Runs every grid point on every replication using `jobs` workers.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    jobs: usize,
    trace: bool,
) -> Result<ExperimentResults> {
    cfg.validate()?;
    let grid = cfg.grid();
    let reps: Vec<usize> = (0..cfg.replications).collect();
    let runs = with_pool(jobs, || -> Result<Vec<RunResult>> {
        let data: Vec<Prepared> = reps
            .par_iter()
            .map(|&r| prepare_data(cfg, r))
            .collect::<Result<_>>()?;
        let tasks: Vec<(usize, usize)> = (0..grid.len())
            .flat_map(|p| reps.iter().map(move |&r| (p, r)))
            .collect();
        tasks
            .par_iter()
            .map(|&(p, r)| run_point(cfg, p, &grid[p], &data[r], r, trace))
            .collect()
    })??;
    Ok(ExperimentResults {
        digest: cfg.digest(),
        seed: cfg.seed,
        runs,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentResults {
    /// One row per (run, environment, metric) plus one decorrelation row per
    /// run. Aggregates can be recomputed from it.
    pub fn results_csv(&self) -> String {
        let mut s = String::from(
            "digest,seed,run_id,point,backbone,variant,ablation,alpha,gamma1,gamma2,gamma3,lambda,replication,env,rho,metric,value\n",
        );
        for run in &self.runs {
            let p = &run.point;
            let prefix = format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.digest,
                run.seed,
                run.run_id(),
                run.point_index,
                p.backbone_name(),
                p.variant.name(),
                p.ablation.label(),
                p.losses.alpha,
                p.losses.gamma1,
                p.losses.gamma2,
                p.losses.gamma3,
                p.losses.lambda,
                run.replication
            );
            for e in &run.report.envs {
                let mut metric = |name: &str, v: Option<f64>| {
                    if let Some(v) = v {
                        let _ = writeln!(s, "{prefix},{},{},{name},{v}", e.env, opt(e.rho));
                    }
                };
                metric("pehe", Some(e.pehe));
                metric("eps_ate", Some(e.eps_ate));
                metric("f1_factual", e.f1_factual);
                metric("f1_counterfactual", e.f1_counterfactual);
            }
            if let Some(d) = run.report.decorrelation {
                let _ = writeln!(s, "{prefix},train,,decorrelation,{d}");
            }
        }
        s
    }

    /// Per-run reports and across-replication means keyed by grid point.
    pub fn metrics_json(&self) -> String {
        #[derive(Serialize)]
        struct RunEntry<'a> {
            run_id: String,
            point: &'a GridPoint,
            replication: usize,
            seed: u64,
            best_iteration: usize,
            iterations: usize,
            report: &'a MetricsReport,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            digest: &'a str,
            seed: u64,
            runs: Vec<RunEntry<'a>>,
            summary: BTreeMap<usize, BTreeMap<&'static str, f64>>,
        }
        let mut summary: BTreeMap<usize, BTreeMap<&'static str, f64>> = BTreeMap::new();
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for run in &self.runs {
            let e = summary.entry(run.point_index).or_default();
            *counts.entry(run.point_index).or_default() += 1.0;
            let r = &run.report;
            *e.entry("pehe_mean").or_default() += r.pehe.mean;
            *e.entry("pehe_std").or_default() += r.pehe.std;
            *e.entry("eps_ate_mean").or_default() += r.eps_ate.mean;
            *e.entry("eps_ate_std").or_default() += r.eps_ate.std;
            if let Some(f) = r.f1_factual {
                *e.entry("f1_factual_mean").or_default() += f.mean;
                *e.entry("f1_factual_std").or_default() += f.std;
            }
            if let Some(d) = r.decorrelation {
                *e.entry("decorrelation").or_default() += d;
            }
        }
        for (k, m) in summary.iter_mut() {
            let c = counts[k];
            m.values_mut().for_each(|v| *v /= c);
        }
        let doc = Doc {
            digest: &self.digest,
            seed: self.seed,
            runs: self
                .runs
                .iter()
                .map(|r| RunEntry {
                    run_id: r.run_id(),
                    point: &r.point,
                    replication: r.replication,
                    seed: r.seed,
                    best_iteration: r.state.best_iteration,
                    iterations: r.state.iteration,
                    report: &r.report,
                })
                .collect(),
            summary,
        };
        serde_json::to_string_pretty(&doc).expect("metrics serialize")
    }

    /// Long-form heatmap values: one row per (run, dim pair).
    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("digest,seed,run_id,variant,dim_a,dim_b,hsic\n");
        for run in &self.runs {
            let h = &run.heatmap;
            for (a, &da) in h.dims.iter().enumerate() {
                for (b, &db) in h.dims.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{da},{db},{}",
                        self.digest,
                        run.seed,
                        run.run_id(),
                        run.point.variant.name(),
                        h.values.get(a, b)
                    );
                }
            }
        }
        s
    }

    /// Per-iteration traces of every run, when tracing was enabled.
    pub fn trace_csv(&self) -> Result<String> {
        let mut out = String::new();
        for (i, run) in self.runs.iter().enumerate() {
            let mut buf = Vec::new();
            run.state.write_trace_csv(&mut buf)?;
            let text = String::from_utf8(buf).expect("csv is utf-8");
            for (k, line) in text.lines().enumerate() {
                if k == 0 {
                    if i == 0 {
                        let _ = writeln!(out, "digest,seed,run_id,{line}");
                    }
                    continue;
                }
                let _ = writeln!(out, "{},{},{},{line}", self.digest, run.seed, run.run_id());
            }
        }
        Ok(out)
    }

    pub fn artifacts(&self) -> Vec<ModelArtifact> {
        self.runs
            .iter()
            .map(|r| ModelArtifact {
                digest: self.digest.clone(),
                seed: r.seed,
                run_id: r.run_id(),
                point: r.point,
                replication: r.replication,
                best_iteration: r.state.best_iteration,
                model: r.model.clone(),
            })
            .collect()
    }
}

/// A trained model as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub digest: String,
    pub seed: u64,
    pub run_id: String,
    pub point: GridPoint,
    pub replication: usize,
    pub best_iteration: usize,
    pub model: TrainedModel,
}

/// Parses a stored model and checks that its tensors fit its architecture.
pub fn parse_artifact(text: &str) -> Result<ModelArtifact> {
    let a: ModelArtifact =
        serde_json::from_str(text).map_err(|e| Error::load("model artifact", e.to_string()))?;
    let m = &a.model;
    m.backbone
        .validate()
        .map_err(|e| Error::load("model artifact", e.to_string()))?;
    let input = m.params.values.first().map_or(0, |w| w.rows());
    let expected = m.backbone.shapes(input);
    let ok = input > 0
        && m.params.names.len() == expected.len()
        && m.params.values.len() == expected.len()
        && expected
            .iter()
            .zip(m.params.names.iter().zip(&m.params.values))
            .all(|((en, es), (n, v))| en == n && *es == v.shape() && v.is_finite());
    if !ok {
        return Err(Error::load(
            "model artifact",
            "parameters do not match the architecture",
        ));
    }
    match (&m.bn, m.backbone.batch_norm) {
        (None, false) => {}
        (Some(bn), true) => {
            let fits = |v: &[crate::gradcore::Matrix]| {
                v.len() == m.backbone.d_r
                    && v.iter()
                        .all(|s| s.shape() == (1, m.backbone.h_r) && s.is_finite())
            };
            if !fits(&bn.mean)
                || !fits(&bn.var)
                || bn.var.iter().any(|v| v.data().iter().any(|&x| x < 0.0))
            {
                return Err(Error::load(
                    "model artifact",
                    "invalid batch-norm statistics",
                ));
            }
        }
        _ => {
            return Err(Error::load(
                "model artifact",
                "batch-norm statistics do not match the architecture",
            ))
        }
    }
    Ok(a)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub digest: String,
    pub seed: u64,
    pub replications: usize,
    pub gen_params: Vec<Option<String>>,
    pub files: Vec<ManifestFile>,
}

struct Writer {
    root: PathBuf,
    files: Vec<ManifestFile>,
}

impl Writer {
    fn new(root: &Path) -> Result<Self> {
        ensure_dir(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn put(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            ensure_dir(parent)?;
        }
        write(&path, text)?;
        self.files.push(ManifestFile {
            path: rel.to_string(),
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(())
    }

    fn finish(
        self,
        cfg: &ExperimentConfig,
        command: &str,
        gen_params: Vec<Option<String>>,
    ) -> Result<Manifest> {
        let m = Manifest {
            command: command.to_string(),
            digest: cfg.digest(),
            seed: cfg.seed,
            replications: cfg.replications,
            gen_params,
            files: self.files,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        write(&self.root.join(format!("manifest-{command}.json")), &text)?;
        Ok(m)
    }
}

/// Writes each replication's data: parent population, train/val split,
/// and one file per test environment, with role sidecars.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Manifest> {
    cfg.validate()?;
    let reps: Vec<usize> = (0..cfg.replications).collect();
    let data = with_pool(jobs, || {
        reps.par_iter()
            .map(|&r| prepare_data(cfg, r))
            .collect::<Result<Vec<_>>>()
    })??;
    let mut w = Writer::new(out)?;
    for (r, d) in data.iter().enumerate() {
        let dir = format!("rep-{r}");
        if let Some(p) = &d.population {
            w.put(&format!("{dir}/population.csv"), &render_csv(p))?;
        }
        w.put(&format!("{dir}/train.csv"), &render_csv(&d.train))?;
        w.put(&format!("{dir}/val.csv"), &render_csv(&d.val))?;
        for e in &d.envs {
            w.put(&format!("{dir}/{}.csv", e.name), &render_csv(&e.data))?;
        }
        w.put(&format!("{dir}/roles.toml"), &render_roles(&d.train))?;
    }
    w.finish(
        cfg,
        "generate",
        data.iter().map(|d| d.gen_digest.clone()).collect(),
    )
}

/// Trains every run and stores model artifacts, plus traces when enabled.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    jobs: usize,
    trace: bool,
) -> Result<ExperimentResults> {
    let res = run_experiment(cfg, jobs, trace)?;
    let mut w = Writer::new(out)?;
    for a in res.artifacts() {
        let text = serde_json::to_string(&a).expect("artifact serializes");
        w.put(&format!("models/{}.json", a.run_id), &text)?;
    }
    if trace {
        w.put("trace.csv", &res.trace_csv()?)?;
    }
    w.finish(cfg, "train", Vec::new())?;
    Ok(res)
}

/// Re-scores stored model artifacts on regenerated test environments.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<ExperimentResults> {
    cfg.validate()?;
    let grid = cfg.grid();
    let digest = cfg.digest();
    let mut artifacts = Vec::new();
    for p in 0..grid.len() {
        for r in 0..cfg.replications {
            let path = out.join("models").join(format!("p{p}-r{r}.json"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let a = parse_artifact(&text)?;
            if a.digest != digest {
                return Err(Error::Protocol(format!(
                    "{} was trained under config {} but the current config is {digest}",
                    path.display(),
                    a.digest
                )));
            }
            artifacts.push(a);
        }
    }
    let reps: Vec<usize> = (0..cfg.replications).collect();
    let runs = with_pool(jobs, || -> Result<Vec<RunResult>> {
        let data: Vec<Prepared> = reps
            .par_iter()
            .map(|&r| prepare_data(cfg, r))
            .collect::<Result<_>>()?;
        artifacts
            .par_iter()
            .enumerate()
            .map(|(i, a)| {
                let p = i / cfg.replications;
                let (report, heatmap) =
                    evaluate_model(cfg, &a.model, &data[a.replication], a.seed)?;
                Ok(RunResult {
                    point_index: p,
                    point: a.point,
                    replication: a.replication,
                    seed: a.seed,
                    model: a.model.clone(),
                    weights: Vec::new(),
                    state: TrainState {
                        iteration: 0,
                        best_iteration: a.best_iteration,
                        best_val_loss: f64::NAN,
                        stopped_early: false,
                        trace: Vec::new(),
                    },
                    report,
                    heatmap,
                })
            })
            .collect()
    })??;
    let res = ExperimentResults {
        digest,
        seed: cfg.seed,
        runs,
    };
    write_reports(cfg, out, &res, "evaluate")?;
    Ok(res)
}

fn write_reports(
    cfg: &ExperimentConfig,
    out: &Path,
    res: &ExperimentResults,
    command: &str,
) -> Result<()> {
    let mut w = Writer::new(out)?;
    w.put("metrics.json", &res.metrics_json())?;
    w.put("results.csv", &res.results_csv())?;
    w.put("heatmap.csv", &res.heatmap_csv())?;
    w.finish(cfg, command, Vec::new())?;
    Ok(())
}

/// Trains and evaluates every grid point and writes all reports.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    jobs: usize,
    trace: bool,
) -> Result<ExperimentResults> {
    let res = cmd_train(cfg, out, jobs, trace)?;
    write_reports(cfg, out, &res, "sweep")?;
    Ok(res)
}
