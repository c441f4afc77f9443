mod common;

use std::fmt::Write as _;

use common::pearson;
use rand::Rng;
use sbrl_core::datagen::{
    biased_sample, env_suite, generate_population, load_semi_synthetic, log_selection_probs,
    prepare_semi_synthetic, sample_environment, ColumnRole, EnvSpec, OutcomeKind, Schema,
    SuiteOptions, SynConfig,
};
use sbrl_core::gradcore::RngState;
use sbrl_core::Error;

fn syn(seed: u64, n: usize) -> SynConfig {
    SynConfig {
        m_i: 8,
        m_c: 8,
        m_a: 8,
        m_v: 2,
        n,
        seed,
    }
}

/// Mean over unstable columns of corr(y1 - y0, x_v).
fn unstable_corr(ds: &sbrl_core::datagen::Dataset) -> f64 {
    let ite = ds.ite().unwrap();
    let cols = ds.columns_with(ColumnRole::Unstable);
    cols.iter()
        .map(|&c| pearson(&ite, &ds.x.col_vec(c)))
        .sum::<f64>()
        / cols.len() as f64
}

#[test]
fn opposite_bias_rates_flip_the_spurious_correlation() {
    let (pop, params) = generate_population(&syn(11, 20_000)).unwrap();
    let mut rng = RngState::new(3);
    let pos = sample_environment(&params, &pop, &EnvSpec::new(2.5), 500, 20_000, &mut rng).unwrap();
    let neg =
        sample_environment(&params, &pop, &EnvSpec::new(-2.5), 500, 20_000, &mut rng).unwrap();
    let (cp, cn) = (unstable_corr(&pos), unstable_corr(&neg));
    assert!(cp > 0.1, "rho=2.5 corr {cp}");
    assert!(cn < -0.1, "rho=-2.5 corr {cn}");
}

#[test]
fn correlation_strength_grows_with_bias_rate() {
    let rhos = [1.3, 1.5, 2.5, 3.0];
    let opts = SuiteOptions {
        env_size: 2000,
        pool_size: 10_000,
        ..SuiteOptions::default()
    };
    let mut monotone = 0;
    for seed in 0..5 {
        let (pop, params) = generate_population(&syn(100 + seed, 10_000)).unwrap();
        let suite = env_suite(&params, &pop, &rhos, &opts, seed).unwrap();
        let c: Vec<f64> = suite
            .envs
            .iter()
            .map(|e| unstable_corr(&e.data).abs())
            .collect();
        if c.windows(2).all(|w| w[0] <= w[1]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 4, "monotone in {monotone}/5 seeds");
}

#[test]
fn retention_probabilities_lie_in_unit_interval() {
    let (pop, _) = generate_population(&syn(5, 2000)).unwrap();
    let cols = pop.columns_with(ColumnRole::Unstable);
    for rho in [-3.0, -1.3, 1.3, 3.0] {
        let lp = log_selection_probs(&pop, rho, &cols).unwrap();
        assert!(lp
            .iter()
            .all(|&v| v <= 0.0 && (0.0..=1.0).contains(&v.exp())));
    }
    let kept = biased_sample(&pop, &EnvSpec::new(3.0), &mut RngState::new(1)).unwrap();
    assert!(kept.len() < pop.len());
}

#[test]
fn population_treatment_rate_matches_propensity() {
    let (pop, params) = generate_population(&syn(7, 10_000)).unwrap();
    let ic = params.dims.m_i + params.dims.m_c;
    let p: f64 = (0..pop.len())
        .map(|i| {
            let z: f64 = pop.x.row_slice(i)[..ic]
                .iter()
                .zip(&params.theta_t)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / 10.0
                + params.xi[i];
            1.0 / (1.0 + (-z).exp())
        })
        .sum::<f64>()
        / pop.len() as f64;
    let emp = pop.t.iter().sum::<f64>() / pop.len() as f64;
    assert!((p - emp).abs() < 0.02, "expected {p}, got {emp}");
}

fn twins_csv(n: usize, seed: u64) -> String {
    let mut rng = RngState::new(seed);
    let mut s = String::new();
    let header: Vec<String> = (1..=28).map(|j| format!("x{j}")).collect();
    writeln!(s, "{},t,yf,y0,y1", header.join(",")).unwrap();
    for _ in 0..n {
        let x: Vec<String> = (0..28)
            .map(|j| {
                if j % 3 == 0 {
                    format!("{:.3}", rng.random::<f64>() * 40.0)
                } else {
                    ((rng.random::<f64>() < 0.4) as u8).to_string()
                }
            })
            .collect();
        let y0 = (rng.random::<f64>() < 0.2) as u8;
        let y1 = (rng.random::<f64>() < 0.15) as u8;
        let t = (rng.random::<f64>() < 0.5) as u8;
        let yf = if t == 1 { y1 } else { y0 };
        writeln!(s, "{},{t},{yf},{y0},{y1}", x.join(",")).unwrap();
    }
    s
}

fn ihdp_csv(n: usize, seed: u64) -> String {
    let mut rng = RngState::new(seed);
    let mut s = String::new();
    let header: Vec<String> = (1..=25).map(|j| format!("x{j}")).collect();
    writeln!(s, "{},t,yf,ycf", header.join(",")).unwrap();
    for i in 0..n {
        let x: Vec<String> = (0..25)
            .map(|j| {
                if j < 6 {
                    format!("{:.4}", rng.random::<f64>() * 4.0 - 2.0)
                } else {
                    ((rng.random::<f64>() < 0.5) as u8).to_string()
                }
            })
            .collect();
        let t = (i < 139) as u8;
        let y0 = rng.random::<f64>() * 3.0;
        let y1 = y0 + 4.0;
        let (yf, ycf) = if t == 1 { (y1, y0) } else { (y0, y1) };
        writeln!(s, "{},{t},{yf:.5},{ycf:.5}", x.join(",")).unwrap();
    }
    s
}

#[test]
fn twins_schema_has_43_covariates() {
    let csv = twins_csv(600, 1);
    let split = prepare_semi_synthetic(
        csv.as_bytes(),
        None,
        Schema::Twins,
        &EnvSpec::new(-2.5),
        &mut RngState::new(2),
        "twins.csv",
    )
    .unwrap();
    for ds in [&split.train, &split.val, &split.test] {
        assert_eq!(ds.dim(), 43);
        assert_eq!(ds.kind, OutcomeKind::Binary);
    }
    assert_eq!(split.train.len() + split.val.len() + split.test.len(), 600);
    assert_eq!(split.test.len(), 120);
}

#[test]
fn ihdp_schema_keeps_747_units_and_25_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ihdp.csv");
    std::fs::write(&path, ihdp_csv(747, 5)).unwrap();
    let split = load_semi_synthetic(
        &path,
        None,
        Schema::Ihdp,
        &EnvSpec::new(2.5),
        &mut RngState::new(9),
    )
    .unwrap();
    let total = split.train.len() + split.val.len() + split.test.len();
    assert_eq!(total, 747);
    let treated: f64 = [&split.train, &split.val, &split.test]
        .iter()
        .map(|d| d.t.iter().sum::<f64>())
        .sum();
    assert_eq!(treated, 139.0);
    assert_eq!(split.train.dim(), 25);
    assert_eq!(split.train.kind, OutcomeKind::Continuous);
    let ite = split.test.ite().unwrap();
    assert!(ite.iter().all(|v| (v - 4.0).abs() < 1e-9));
}

#[test]
fn empty_semi_synthetic_file_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::write(&path, "").unwrap();
    let err = load_semi_synthetic(
        &path,
        None,
        Schema::Twins,
        &EnvSpec::new(-2.5),
        &mut RngState::new(1),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Load { .. }), "{err:?}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn wrong_width_is_rejected() {
    let csv = ihdp_csv(50, 2);
    let err = prepare_semi_synthetic(
        csv.as_bytes(),
        None,
        Schema::Twins,
        &EnvSpec::new(-2.5),
        &mut RngState::new(1),
        "x.csv",
    )
    .unwrap_err();
    assert!(matches!(err, Error::Load { .. }));
}
