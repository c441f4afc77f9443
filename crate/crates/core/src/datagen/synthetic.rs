use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ColumnRole, Dataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::gradcore::{sigmoid, Matrix, RngState};

/// Dimensions and size of a `Syn_mI_mC_mA_mV` population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynConfig {
    pub m_i: usize,
    pub m_c: usize,
    pub m_a: usize,
    pub m_v: usize,
    pub n: usize,
    pub seed: u64,
}

impl SynConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::Config("at least one covariate is required".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("population size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.m_i + self.m_c + self.m_a + self.m_v
    }

    pub fn name(&self) -> String {
        format!("Syn_{}_{}_{}_{}", self.m_i, self.m_c, self.m_a, self.m_v)
    }

    fn roles(&self) -> Vec<ColumnRole> {
        let mut r = vec![ColumnRole::Instrument; self.m_i];
        r.extend(std::iter::repeat_n(ColumnRole::Confounder, self.m_c));
        r.extend(std::iter::repeat_n(ColumnRole::Adjustment, self.m_a));
        r.extend(std::iter::repeat_n(ColumnRole::Unstable, self.m_v));
        r
    }
}

/// Coefficients shared by every environment of one benchmark family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub dims: SynConfig,
    /// Over instrument and confounder columns.
    pub theta_t: Vec<f64>,
    /// Over confounder and adjustment columns.
    pub theta_y0: Vec<f64>,
    pub theta_y1: Vec<f64>,
    /// Centering constants taken over the parent population.
    pub z0_mean: f64,
    pub z1_mean: f64,
    /// Treatment noise drawn for the parent population.
    pub xi: Vec<f64>,
}

/// Selection-bias environment: `|rho| > 1`, optionally with a fixed size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub rho: f64,
    pub target: Option<usize>,
}

impl EnvSpec {
    pub fn new(rho: f64) -> Self {
        Self { rho, target: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_finite() || self.rho.abs() <= 1.0 {
            return Err(Error::Config(format!(
                "bias rate must satisfy |rho| > 1, got {}",
                self.rho
            )));
        }
        if self.target == Some(0) {
            return Err(Error::Config(
                "environment target size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Bias rates used for the synthetic benchmark environments.
pub const DEFAULT_RHO_GRID: [f64; 8] = [-3.0, -2.5, -1.5, -1.3, 1.3, 1.5, 2.5, 3.0];

fn draw_uniform(rng: &mut RngState, k: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(lo..hi)).collect()
}

struct RawRows {
    x: Vec<f64>,
    xi: Vec<f64>,
    z0: Vec<f64>,
    z1: Vec<f64>,
    t: Vec<f64>,
}

/// Covariates, noise, latent outcome scores, and treatments for `n` rows.
/// Each row consumes its draws in a fixed order.
fn draw_rows(
    dims: &SynConfig,
    theta_t: &[f64],
    theta_y0: &[f64],
    theta_y1: &[f64],
    n: usize,
    rng: &mut RngState,
) -> RawRows {
    let m = dims.dim();
    let ic = dims.m_i + dims.m_c;
    let ca = dims.m_c + dims.m_a;
    let ca_start = dims.m_i;
    let mut x = Vec::with_capacity(n * m);
    let mut xi = Vec::with_capacity(n);
    let mut z0 = Vec::with_capacity(n);
    let mut z1 = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let start = x.len();
        for _ in 0..m {
            x.push(StandardNormal.sample(rng));
        }
        let row = &x[start..];
        let noise: f64 = StandardNormal.sample(rng);
        let u: f64 = rng.random();
        let z = row[..ic]
            .iter()
            .zip(theta_t)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / 10.0
            + noise;
        let (a0, a1) = if ca == 0 {
            (0.0, 0.0)
        } else {
            let seg = &row[ca_start..ca_start + ca];
            let s0 = seg.iter().zip(theta_y0).map(|(a, b)| a * b).sum::<f64>();
            let s1 = seg
                .iter()
                .zip(theta_y1)
                .map(|(a, b)| a * a * b)
                .sum::<f64>();
            (s0 / 10.0 / ca as f64, s1 / 10.0 / ca as f64)
        };
        xi.push(noise);
        z0.push(a0);
        z1.push(a1);
        t.push(if u < sigmoid(z) { 1.0 } else { 0.0 });
    }
    RawRows { x, xi, z0, z1, t }
}

fn assemble(dims: &SynConfig, raw: RawRows, z0_mean: f64, z1_mean: f64) -> Dataset {
    let n = raw.t.len();
    let label = |z: f64, mean: f64| if z - mean > 0.0 { 1.0 } else { 0.0 };
    let y0: Vec<f64> = raw.z0.iter().map(|&z| label(z, z0_mean)).collect();
    let y1: Vec<f64> = raw.z1.iter().map(|&z| label(z, z1_mean)).collect();
    let yf: Vec<f64> = (0..n)
        .map(|i| if raw.t[i] == 1.0 { y1[i] } else { y0[i] })
        .collect();
    let ycf: Vec<f64> = (0..n)
        .map(|i| if raw.t[i] == 1.0 { y0[i] } else { y1[i] })
        .collect();
    let m = dims.dim();
    Dataset {
        x: Matrix::new(n, m, raw.x).expect("row-major buffer of n*m draws"),
        t: raw.t,
        yf,
        ycf: Some(ycf),
        y0: Some(y0),
        y1: Some(y1),
        kind: OutcomeKind::Binary,
        roles: dims.roles(),
        names: (1..=m).map(|j| format!("x{j}")).collect(),
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Draws coefficients and a parent population of `cfg.n` units.
pub fn generate_population(cfg: &SynConfig) -> Result<(Dataset, GenParams)> {
    cfg.validate()?;
    let mut prng = RngState::with_stream(cfg.seed, 0);
    let theta_t = draw_uniform(&mut prng, cfg.m_i + cfg.m_c, 8.0, 16.0);
    let theta_y0 = draw_uniform(&mut prng, cfg.m_c + cfg.m_a, 8.0, 16.0);
    let theta_y1 = draw_uniform(&mut prng, cfg.m_c + cfg.m_a, 8.0, 16.0);
    let mut rng = RngState::with_stream(cfg.seed, 1);
    let raw = draw_rows(cfg, &theta_t, &theta_y0, &theta_y1, cfg.n, &mut rng);
    let z0_mean = mean(&raw.z0);
    let z1_mean = mean(&raw.z1);
    let xi = raw.xi.clone();
    let ds = assemble(cfg, raw, z0_mean, z1_mean);
    Ok((
        ds,
        GenParams {
            dims: *cfg,
            theta_t,
            theta_y0,
            theta_y1,
            z0_mean,
            z1_mean,
            xi,
        },
    ))
}

/// A fresh pool from the same coefficients and centering constants.
pub fn generate_pool(params: &GenParams, n: usize, rng: &mut RngState) -> Dataset {
    let raw = draw_rows(
        &params.dims,
        &params.theta_t,
        &params.theta_y0,
        &params.theta_y1,
        n,
        rng,
    );
    assemble(&params.dims, raw, params.z0_mean, params.z1_mean)
}

/// Natural log of the retention probability of every row:
/// `-10 ln|rho| sum_v |y1 - y0 - sign(rho) x_v|` over the given columns.
pub fn log_selection_probs(ds: &Dataset, rho: f64, cols: &[usize]) -> Result<Vec<f64>> {
    let ite = ds.ite()?;
    let s = rho.signum();
    let scale = -10.0 * rho.abs().ln();
    Ok((0..ds.len())
        .map(|i| {
            let d: f64 = cols
                .iter()
                .map(|&c| (ite[i] - s * ds.x.get(i, c)).abs())
                .sum();
            scale * d
        })
        .collect())
}

/// Keeps each row independently with its selection probability. Row contents
/// are untouched and their order is preserved.
pub fn biased_sample(ds: &Dataset, env: &EnvSpec, rng: &mut RngState) -> Result<Dataset> {
    env.validate()?;
    if !ds.has_potential_outcomes() {
        return Err(Error::Protocol("biased sampling needs y0 and y1".into()));
    }
    let cols = ds.columns_with(ColumnRole::Unstable);
    let logp = log_selection_probs(ds, env.rho, &cols)?;
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| {
            let u: f64 = rng.random();
            u < logp[i].exp()
        })
        .collect();
    ds.subset(&keep)
}

/// Biased sample of exactly `target` rows: the parent is screened first, then
/// fresh pools are screened until enough rows are retained.
pub fn sample_environment(
    params: &GenParams,
    parent: &Dataset,
    env: &EnvSpec,
    target: usize,
    pool_size: usize,
    rng: &mut RngState,
) -> Result<Dataset> {
    env.validate()?;
    if target == 0 || pool_size == 0 {
        return Err(Error::Config(
            "target and pool size must be positive".into(),
        ));
    }
    let mut parts = vec![biased_sample(parent, env, rng)?];
    let mut have = parts[0].len();
    let mut pools = 0usize;
    while have < target {
        pools += 1;
        if pools > 100_000 {
            return Err(Error::Protocol(format!(
                "rho={} retained only {have} of {target} rows",
                env.rho
            )));
        }
        let pool = generate_pool(params, pool_size, rng);
        let kept = biased_sample(&pool, env, rng)?;
        have += kept.len();
        parts.push(kept);
    }
    let all = Dataset::concat(&parts)?;
    let idx: Vec<usize> = (0..target).collect();
    all.subset(&idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteOptions {
    /// Bias rate of the training population.
    pub train_rho: f64,
    /// Size of every environment, including the training one.
    pub env_size: usize,
    pub pool_size: usize,
    pub val_fraction: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            train_rho: 2.5,
            env_size: 10_000,
            pool_size: 50_000,
            val_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub spec: EnvSpec,
    pub data: Dataset,
}

/// Training/validation split drawn at the training bias rate plus one test
/// environment per requested rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSuite {
    pub train: Dataset,
    pub val: Dataset,
    pub envs: Vec<Environment>,
}

/// Random split into `(1 - val_fraction, val_fraction)` parts.
pub fn split_train_val(
    ds: &Dataset,
    val_fraction: f64,
    rng: &mut RngState,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} not in [0,1)"
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
    let n_val = (ds.len() as f64 * val_fraction).round() as usize;
    let (val, train) = idx.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train)?, ds.subset(&val)?))
}

/// Stream used for the environment at bias rate `rho`; keyed by value so an
/// environment does not depend on the rest of the grid.
fn env_stream(rho: f64) -> u64 {
    rho.to_bits() ^ 0x5eed_0000_0000_0000
}

/// Builds the training split and the test environments. Each environment
/// has its own random stream, so they can be generated in parallel.
pub fn env_suite(
    params: &GenParams,
    parent: &Dataset,
    rhos: &[f64],
    opts: &SuiteOptions,
    seed: u64,
) -> Result<EnvSuite> {
    if rhos.is_empty() {
        return Err(Error::Config("bias-rate grid is empty".into()));
    }
    let train_spec = EnvSpec {
        rho: opts.train_rho,
        target: Some(opts.env_size),
    };
    train_spec.validate()?;
    let mut trng = RngState::with_stream(seed, 2);
    let train_env = sample_environment(
        params,
        parent,
        &train_spec,
        opts.env_size,
        opts.pool_size,
        &mut trng,
    )?;
    let mut srng = RngState::with_stream(seed, 3);
    let (train, val) = split_train_val(&train_env, opts.val_fraction, &mut srng)?;
    let envs = rhos
        .par_iter()
        .map(|&rho| {
            let spec = EnvSpec {
                rho,
                target: Some(opts.env_size),
            };
            let mut rng = RngState::with_stream(seed, env_stream(rho));
            let data = sample_environment(
                params,
                parent,
                &spec,
                opts.env_size,
                opts.pool_size,
                &mut rng,
            )?;
            Ok(Environment { spec, data })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnvSuite { train, val, envs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syn(m_v: usize, n: usize, seed: u64) -> SynConfig {
        SynConfig {
            m_i: 8,
            m_c: 8,
            m_a: 8,
            m_v,
            n,
            seed,
        }
    }

    #[test]
    fn population_shape_and_labels() {
        let (ds, params) = generate_population(&syn(2, 10_000, 1)).unwrap();
        assert_eq!(ds.dim(), 26);
        assert_eq!(ds.len(), 10_000);
        ds.validate().unwrap();
        assert_eq!(ds.kind, OutcomeKind::Binary);
        for v in ds
            .y0
            .as_ref()
            .unwrap()
            .iter()
            .chain(ds.y1.as_ref().unwrap())
        {
            assert!(*v == 0.0 || *v == 1.0);
        }
        assert!(params.theta_t.iter().all(|v| (8.0..16.0).contains(v)));
        assert_eq!(params.theta_t.len(), 16);
        assert_eq!(params.theta_y1.len(), 16);
    }

    #[test]
    fn treated_fraction_matches_propensity() {
        let cfg = syn(2, 10_000, 2);
        let (ds, p) = generate_population(&cfg).unwrap();
        let ic = cfg.m_i + cfg.m_c;
        let mean_prop: f64 = (0..ds.len())
            .map(|i| {
                let z: f64 =
                    (0..ic).map(|j| ds.x.get(i, j) * p.theta_t[j]).sum::<f64>() / 10.0 + p.xi[i];
                1.0 / (1.0 + (-z).exp())
            })
            .sum::<f64>()
            / ds.len() as f64;
        let treated = ds.t.iter().sum::<f64>() / ds.len() as f64;
        assert!(
            (treated - mean_prop).abs() < 0.02,
            "{treated} vs {mean_prop}"
        );
    }

    #[test]
    fn same_seed_same_population() {
        let a = generate_population(&syn(2, 500, 3)).unwrap();
        let b = generate_population(&syn(2, 500, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_unstable_columns_keeps_everything() {
        let (ds, _) = generate_population(&syn(0, 300, 4)).unwrap();
        let kept = biased_sample(&ds, &EnvSpec::new(3.0), &mut RngState::new(0)).unwrap();
        assert_eq!(kept, ds);
    }

    #[test]
    fn exact_match_is_always_kept() {
        let (mut ds, _) = generate_population(&syn(2, 50, 5)).unwrap();
        let ite = ds.ite().unwrap();
        for (i, &v) in ite.iter().enumerate() {
            ds.x.set(i, 24, v);
            ds.x.set(i, 25, v);
        }
        let logp = log_selection_probs(&ds, 2.5, &[24, 25]).unwrap();
        assert!(logp.iter().all(|&v| v == 0.0));
        let kept = biased_sample(&ds, &EnvSpec::new(2.5), &mut RngState::new(1)).unwrap();
        assert_eq!(kept.len(), ds.len());
    }

    #[test]
    fn probabilities_in_unit_interval() {
        let (ds, _) = generate_population(&syn(2, 2000, 6)).unwrap();
        for rho in DEFAULT_RHO_GRID {
            for lp in log_selection_probs(&ds, rho, &[24, 25]).unwrap() {
                let p = lp.exp();
                assert!(p > 0.0 || lp < -700.0);
                assert!(p <= 1.0);
            }
        }
    }

    #[test]
    fn sampling_only_changes_membership() {
        let (ds, _) = generate_population(&syn(2, 3000, 7)).unwrap();
        let kept = biased_sample(&ds, &EnvSpec::new(1.3), &mut RngState::new(2)).unwrap();
        assert!(!kept.is_empty() && kept.len() < ds.len());
        let mut j = 0;
        for r in 0..kept.len() {
            while ds.x.row_slice(j) != kept.x.row_slice(r) {
                j += 1;
            }
            assert_eq!(ds.t[j], kept.t[r]);
            assert_eq!(ds.yf[j], kept.yf[r]);
        }
    }

    #[test]
    fn bad_rho_and_missing_outcomes_rejected() {
        let (mut ds, _) = generate_population(&syn(2, 10, 8)).unwrap();
        let mut rng = RngState::new(0);
        assert!(matches!(
            biased_sample(&ds, &EnvSpec::new(1.0), &mut rng),
            Err(Error::Config(_))
        ));
        ds.y0 = None;
        assert!(matches!(
            biased_sample(&ds, &EnvSpec::new(2.0), &mut rng),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn fixed_size_environment() {
        let cfg = syn(2, 2000, 9);
        let (parent, params) = generate_population(&cfg).unwrap();
        let env = EnvSpec::new(-3.0);
        let ds =
            sample_environment(&params, &parent, &env, 300, 20_000, &mut RngState::new(3)).unwrap();
        assert_eq!(ds.len(), 300);
        ds.validate().unwrap();
    }

    #[test]
    fn suite_has_one_env_per_rate() {
        let cfg = syn(2, 2000, 10);
        let (parent, params) = generate_population(&cfg).unwrap();
        let opts = SuiteOptions {
            env_size: 200,
            pool_size: 20_000,
            ..SuiteOptions::default()
        };
        let suite = env_suite(&params, &parent, &DEFAULT_RHO_GRID, &opts, 10).unwrap();
        assert_eq!(suite.envs.len(), 8);
        assert_eq!(suite.train.len() + suite.val.len(), 200);
        assert_eq!(suite.val.len(), 60);
        let single = env_suite(&params, &parent, &[2.5], &opts, 10).unwrap();
        assert_eq!(single.envs.len(), 1);
        assert!(single.envs[0] == suite.envs[6]);
    }
}
