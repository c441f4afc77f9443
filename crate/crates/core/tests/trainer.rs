use sbrl_core::datagen::OutcomeKind;
use sbrl_core::datagen::{generate_population, split_train_val, SynConfig};
use sbrl_core::gradcore::RngState;
use sbrl_core::losses::{decorrelation_loss, LossWeights};
use sbrl_core::nets::{BackboneConfig, BackboneKind};
use sbrl_core::trainer::{train, TrainConfig, Trainer, Variant};

fn backbone() -> BackboneConfig {
    BackboneConfig {
        d_r: 2,
        d_y: 2,
        h_r: 8,
        h_y: 6,
        batch_norm: true,
        rep_norm: false,
        kind: BackboneKind::Cfr,
        outcome: OutcomeKind::Binary,
    }
}

fn data(seed: u64) -> (sbrl_core::datagen::Dataset, sbrl_core::datagen::Dataset) {
    let (pop, _) = generate_population(&SynConfig {
        m_i: 2,
        m_c: 2,
        m_a: 2,
        m_v: 2,
        n: 400,
        seed,
    })
    .unwrap();
    split_train_val(&pop, 0.25, &mut RngState::new(seed)).unwrap()
}

fn lw() -> LossWeights {
    LossWeights {
        alpha: 0.1,
        gamma1: 1.0,
        gamma2: 1.0,
        gamma3: 0.1,
        ..LossWeights::default()
    }
}

#[test]
fn weight_steps_reduce_weighted_dependence_of_a_fixed_network() {
    let mut improved = 0;
    for seed in 0..5u64 {
        let (tr, va) = data(seed);
        let tc = TrainConfig {
            lr: 1e-2,
            seed,
            variant: Variant::SbrlHap,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(backbone(), &tr, &va, lw(), tc).unwrap();
        let first = t.weight_step().unwrap().unwrap();
        let mut last = first;
        for _ in 0..150 {
            last = t.weight_step().unwrap().unwrap();
        }
        assert!(
            last.total < first.total,
            "seed {seed}: {} -> {}",
            first.total,
            last.total
        );
        let model = t.snapshot().unwrap();
        let z = model.taps(&tr.x, &tr.t).unwrap().z_r;
        let bank = &t.banks().r;
        let flat = decorrelation_loss(&z, &vec![1.0; tr.len()], bank).unwrap();
        let weighted = decorrelation_loss(&z, &t.weights().weights(), bank).unwrap();
        if weighted < flat {
            improved += 1;
        }
    }
    assert!(
        improved >= 4,
        "weighted dependence lower in {improved}/5 seeds"
    );
}

#[test]
fn outcome_reports_best_snapshot_and_matching_weights() {
    let (tr, va) = data(9);
    let tc = TrainConfig {
        max_iters: 60,
        lr: 1e-2,
        eval_every: 5,
        seed: 3,
        variant: Variant::Sbrl,
        trace: true,
        ..TrainConfig::default()
    };
    let out = train(backbone(), &tr, &va, lw(), tc).unwrap();
    assert_eq!(out.weights.len(), tr.len());
    assert!(out.state.best_iteration <= out.state.iteration);
    let evals: Vec<f64> = out.state.trace.iter().filter_map(|r| r.val_loss).collect();
    let min = evals.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(out.state.best_val_loss, min);
    let fx = out.model.predict_effects(&va.x).unwrap();
    let ate = fx.ite.iter().sum::<f64>() / fx.ite.len() as f64;
    let direct = fx.y1.iter().zip(&fx.y0).map(|(a, b)| a - b).sum::<f64>() / fx.ite.len() as f64;
    assert!((ate - direct).abs() < 1e-12);
}
