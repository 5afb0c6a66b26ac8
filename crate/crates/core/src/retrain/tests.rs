use super::*;
use crate::lq::{riccati_optimal_cost, riccati_solve, saturated_feedback_controller, LqParams};
use crate::nn::{supervised_loss, Architecture, InitScheme, RecordMeta};

fn lq(sigma: f64) -> (ProblemSpec, TimeGrid) {
    let p = LqParams {
        sigma,
        ..LqParams::default()
    };
    (p.problem((-50.0, 50.0)).unwrap(), p.grid().unwrap())
}

fn saturated(s: f64) -> MlpParams {
    let sol = riccati_solve(&LqParams::default()).unwrap();
    saturated_feedback_controller(sol.mean_gain[0], sol.dev_gain[0], s).unwrap()
}

fn quick_attack() -> AttackConfig {
    AttackConfig {
        restarts: 2,
        max_pgd_iters: 300,
        seed: 11,
        ..AttackConfig::default()
    }
}

#[test]
fn empty_request_is_not_a_shortfall() {
    let (spec, grid) = lq(1.0);
    let h = harvest_adversarials(
        &spec,
        &grid,
        &saturated(0.02),
        &quick_attack(),
        &HarvestConfig {
            count: 0,
            ..HarvestConfig::default()
        },
    )
    .unwrap();
    assert!(h.records.is_empty());
    assert!(!h.shortfall);
    assert_eq!(h.attempts, 0);
}

#[test]
fn stable_loop_yields_shortfall() {
    let (spec, grid) = lq(0.0);
    let cfg = AttackConfig {
        max_pgd_iters: 50,
        beta: 1e-3,
        ..quick_attack()
    };
    let h = harvest_adversarials(
        &spec,
        &grid,
        &saturated(1e-4),
        &cfg,
        &HarvestConfig {
            count: 3,
            max_attempts: 4,
            ..HarvestConfig::default()
        },
    )
    .unwrap();
    assert!(h.shortfall);
    assert!(h.records.is_empty());
    assert_eq!(h.attempts, 4);
}

#[test]
fn harvested_states_are_separated_outside_basin_and_replay() {
    let (spec, grid) = lq(1.0);
    let spec = spec.with_divergence_threshold(1e6).unwrap();
    let net = saturated(0.02);
    let attack = quick_attack();
    let hc = HarvestConfig {
        count: 6,
        exclude_radius: 20.0,
        max_attempts: 200,
        ..HarvestConfig::default()
    };
    let h = harvest_adversarials(&spec, &grid, &net, &attack, &hc).unwrap();
    assert!(!h.shortfall);
    assert_eq!(h.records.len(), 6);
    for (a, r) in h.records.iter().enumerate() {
        let n = norm2(&r.state);
        assert!(n > 20.0 && n <= attack.alpha);
        for q in &h.records[..a] {
            assert!((q.state[0] - r.state[0]).abs() >= attack.alpha / 100.0);
        }
        let cfg = AttackConfig {
            seed: r.attack_seed,
            ..attack.clone()
        };
        let res = crate::attack::pgd_attack(&spec, &grid, &net, &cfg).unwrap();
        assert_eq!(res.adversarial.as_deref(), Some(r.state.as_slice()));
    }
    assert_eq!(h, harvest_adversarials(&spec, &grid, &net, &attack, &hc).unwrap());
    let m = RetrainManifest::new(&attack, &hc, &h, PopulationMode::Joint, 5);
    let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 6);
    assert_eq!(v["shortfall"], false);
}

#[test]
fn zero_state_without_noise_needs_no_control() {
    let (spec, grid) = lq(0.0);
    let out = solve_from_adversarials(
        &spec,
        &grid,
        &[0.0],
        1,
        &OptimizerConfig::default(),
        PopulationMode::PerState { copies: 1 },
    )
    .unwrap();
    assert!(out.batches[0].controls.controls().iter().all(|&u| u == 0.0));
}

#[test]
fn joint_solve_matches_riccati_oracle() {
    let (spec, grid) = lq(1.0);
    let states: Vec<f64> = (0..20).map(|i| 60.0 + 7.0 * i as f64).collect();
    let out = solve_from_adversarials(&spec, &grid, &states, 9, &OptimizerConfig::default(), PopulationMode::Joint)
        .unwrap();
    let oracle = riccati_optimal_cost(&riccati_solve(&LqParams::default()).unwrap(), &states);
    let gap = (out.batches[0].achieved_cost - oracle) / oracle;
    assert!(gap.abs() < 0.01, "gap {gap}");
    let data = out.to_dataset().unwrap();
    assert_eq!(data.len(), 20 * 15);
    assert_eq!(data.count(Provenance::Adversarial), data.len());
}

#[test]
fn per_state_solves_follow_the_order_of_states() {
    let (spec, grid) = lq(1.0);
    let states = [80.0, -120.0, 150.0];
    let cfg = OptimizerConfig::default();
    let mode = PopulationMode::PerState { copies: 2 };
    let a = solve_from_adversarials(&spec, &grid, &states, 4, &cfg, mode).unwrap();
    let b = solve_from_adversarials(&spec, &grid, &[150.0, 80.0, -120.0], 4, &cfg, mode).unwrap();
    for (ia, ib) in [(0, 1), (1, 2), (2, 0)] {
        assert_eq!(a.batches[ia].controls, b.batches[ib].controls);
        assert_eq!(a.batches[ia].achieved_cost, b.batches[ib].achieved_cost);
    }
    let sol = riccati_solve(&LqParams::default()).unwrap();
    for (x, batch) in states.iter().zip(&a.batches) {
        let oracle = riccati_optimal_cost(&sol, &[*x, *x]);
        assert!(((batch.achieved_cost - oracle) / oracle).abs() < 0.01);
    }
}

#[test]
fn joint_solve_is_permutation_equivariant() {
    let (spec, grid) = lq(1.0);
    let cfg = OptimizerConfig::default();
    let a = solve_from_adversarials(&spec, &grid, &[70.0, -90.0, 110.0], 2, &cfg, PopulationMode::Joint).unwrap();
    let b = solve_from_adversarials(&spec, &grid, &[110.0, 70.0, -90.0], 2, &cfg, PopulationMode::Joint).unwrap();
    let (ja, jb) = (a.batches[0].achieved_cost, b.batches[0].achieved_cost);
    // the problem is badly conditioned, so both orderings only agree to the
    // optimizer's stopping accuracy
    assert!((ja - jb).abs() <= 1e-5 * ja, "{ja} vs {jb}");
    let (ca, cb) = (&a.batches[0].controls, &b.batches[0].controls);
    for (ia, ib) in [(0, 1), (1, 2), (2, 0)] {
        for k in 0..grid.steps() {
            let (u, v) = (ca.control(ia, k)[0], cb.control(ib, k)[0]);
            assert!((u - v).abs() <= 1e-2 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }
}

fn toy_dataset(prov: Provenance, n: usize, shift: f64) -> Dataset {
    let mut d = Dataset::new(3, 2);
    for r in 0..n {
        let x = r as f64 / n as f64 - 0.5 + shift;
        let meta = RecordMeta {
            provenance: prov,
            group: 0,
            sample: r as u32,
            step: 0,
        };
        d.push(&[x, 0.5 * x, 0.0], &[-0.3 * x, -0.1 * x], meta).unwrap();
    }
    d
}

#[test]
fn retrain_without_adversarials_is_plain_training() {
    let base = toy_dataset(Provenance::Base, 64, 0.0);
    let aug = AugmentedDataset::new(base.clone(), Dataset::new(3, 2)).unwrap();
    let net = Architecture::Nn1.build(InitScheme::GlorotUniform, 1).unwrap();
    let cfg = RetrainConfig {
        train: TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
        ..RetrainConfig::default()
    };
    let a = retrain(&net, &aug, &cfg).unwrap();
    let b = train(&net, &base, &cfg.train).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn warm_start_never_worsens_the_combined_loss() {
    let base = toy_dataset(Provenance::Base, 64, 0.0);
    let adv = toy_dataset(Provenance::Adversarial, 32, 2.0);
    let aug = AugmentedDataset::new(base, adv).unwrap();
    let net = Architecture::Nn1.build(InitScheme::GlorotUniform, 3).unwrap();
    let cfg = RetrainConfig {
        train: TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        },
        ..RetrainConfig::default()
    };
    let before = supervised_loss(&net, &aug.combined(1.0).unwrap()).unwrap();
    let rep = retrain(&net, &aug, &cfg).unwrap();
    let after = supervised_loss(&rep.params, &aug.combined(1.0).unwrap()).unwrap();
    assert!(after.mse <= before.mse);
    let cold = retrain(
        &net,
        &aug,
        &RetrainConfig {
            cold_start: true,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_ne!(cold.initial_loss, rep.initial_loss);
}

#[test]
fn augmented_csv_round_trip_and_provenance_checks() {
    let base = toy_dataset(Provenance::Base, 5, 0.0);
    let adv = toy_dataset(Provenance::Adversarial, 3, 1.0);
    assert!(AugmentedDataset::new(adv.clone(), base.clone()).is_err());
    let aug = AugmentedDataset::new(base, adv).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("aug.csv");
    aug.write_csv(&path).unwrap();
    let back = AugmentedDataset::read_csv(&path).unwrap();
    assert_eq!(back, aug);
    assert!(retrain(
        &Architecture::Nn1.build(InitScheme::Zeros, 0).unwrap(),
        &AugmentedDataset::new(Dataset::new(3, 2), Dataset::new(3, 2)).unwrap(),
        &RetrainConfig::default()
    )
    .is_err());
}
