use super::*;
use crate::lq::LqParams;
use proptest::prelude::*;

/// `f = 0` with zero costs, in any dimension.
#[derive(Debug)]
struct Still(usize);

impl MeanFieldModel for Still {
    fn state_dim(&self) -> usize {
        self.0
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64, _a: &StepArgs<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn drift_vjp(&self, _t: f64, _a: &StepArgs<'_>, _c: &[f64], _g: &mut ArgGrads) {}
    fn running_cost(&self, _t: f64, _a: &StepArgs<'_>) -> f64 {
        0.0
    }
    fn running_cost_grad(&self, _t: f64, _a: &StepArgs<'_>, _s: f64, _g: &mut ArgGrads) {}
    fn terminal_cost(&self, _x: &[f64], _m: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost_grad(&self, _x: &[f64], _m: &[f64], _s: f64, _gx: &mut [f64], _gm: &mut [f64]) {}
}

/// Odd-symmetric drift `f = -x^3 + mean_x` (Euler form).
#[derive(Debug)]
struct Cubic;

impl MeanFieldModel for Cubic {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64, a: &StepArgs<'_>, out: &mut [f64]) {
        out[0] = -a.x[0].powi(3) + a.mean_x[0];
    }
    fn drift_vjp(&self, _t: f64, a: &StepArgs<'_>, c: &[f64], g: &mut ArgGrads) {
        g.x[0] += -3.0 * a.x[0] * a.x[0] * c[0];
        g.mean_x[0] += c[0];
    }
    fn running_cost(&self, _t: f64, _a: &StepArgs<'_>) -> f64 {
        0.0
    }
    fn running_cost_grad(&self, _t: f64, _a: &StepArgs<'_>, _s: f64, _g: &mut ArgGrads) {}
    fn terminal_cost(&self, _x: &[f64], _m: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost_grad(&self, _x: &[f64], _m: &[f64], _s: f64, _gx: &mut [f64], _gm: &mut [f64]) {}
}

fn lq_spec(sigma: f64) -> (ProblemSpec, TimeGrid) {
    let p = LqParams {
        sigma,
        ..LqParams::default()
    };
    (p.problem((-50.0, 50.0)).unwrap(), p.grid().unwrap())
}

#[test]
fn grid_spacing() {
    let g = TimeGrid::new(0.75, 15).unwrap();
    assert!((g.dt() * 15.0 - 0.75).abs() < 1e-15);
    assert_eq!(g.t(0), 0.0);
    assert!(TimeGrid::new(0.0, 3).is_err());
}

#[test]
fn euler_still_model_is_identity_step() {
    let spec = ProblemSpec::new(Arc::new(Still(2)), 0.0, Discretization::Euler).unwrap();
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let args = StepArgs {
        x: &[1.5, -7.0],
        mean_x: &[0.0, 0.0],
        u: &[3.0],
        mean_u: &[0.0],
    };
    let s = step(&spec, &grid, 0, &args, &[0.4, 0.1]).unwrap();
    assert_eq!(s.next, vec![1.5, -7.0]);
    assert!(!s.diverged);
}

#[test]
fn direct_lq_hand_values() {
    let (spec, grid) = lq_spec(0.0);
    let s = |x: f64, m: f64, u: f64, mu: f64| {
        step(
            &spec,
            &grid,
            0,
            &StepArgs {
                x: &[x],
                mean_x: &[m],
                u: &[u],
                mean_u: &[mu],
            },
            &[0.0],
        )
        .unwrap()
        .next[0]
    };
    assert_eq!(s(1.0, 1.0, 0.0, 0.0), 3.0);
    assert_eq!(s(1.0, 1.0, 1.0, 1.0), 6.0);
}

#[test]
fn step_contract_violations() {
    let (spec, grid) = lq_spec(1.0);
    let bad = StepArgs {
        x: &[1.0, 2.0],
        mean_x: &[1.0],
        u: &[0.0],
        mean_u: &[0.0],
    };
    assert!(matches!(step(&spec, &grid, 0, &bad, &[0.0]), Err(Error::Dimension { .. })));
    let ok = StepArgs {
        x: &[1e300],
        mean_x: &[1e300],
        u: &[0.0],
        mean_u: &[0.0],
    };
    assert!(step(&spec, &grid, 0, &ok, &[0.0]).unwrap().diverged);
}

#[test]
fn single_still_sample_is_constant() {
    let spec = ProblemSpec::new(Arc::new(Still(1)), 0.0, Discretization::Euler).unwrap();
    let grid = TimeGrid::new(1.0, 6).unwrap();
    let ens = rollout_ensemble(
        &spec,
        &grid,
        &[5.0],
        &ControlBatch::zeros(1, 6, 1),
        &NoiseTensor::sample(1, &grid, 1, 3),
    )
    .unwrap();
    assert!((0..=6).all(|k| ens.state(0, k)[0] == 5.0));
}

#[test]
fn symmetric_pair_keeps_zero_mean() {
    let spec = ProblemSpec::new(Arc::new(Cubic), 0.0, Discretization::Euler).unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let ens = rollout_ensemble(
        &spec,
        &grid,
        &[0.8, -0.8],
        &ControlBatch::zeros(2, 10, 1),
        &NoiseTensor::zeros(2, 10, 1),
    )
    .unwrap();
    assert!((0..=10).all(|k| ens.mean_state(k)[0] == 0.0));
}

#[test]
fn uncontrolled_mean_grows_by_three() {
    let (spec, grid) = lq_spec(0.0);
    let ens = rollout_ensemble(
        &spec,
        &grid,
        &[1.0],
        &ControlBatch::zeros(1, 15, 1),
        &NoiseTensor::zeros(1, 15, 1),
    )
    .unwrap();
    let path = propagate_mean(&spec, &grid, &[1.0], &[0.0; 15]).unwrap();
    for k in 0..=15 {
        assert_eq!(ens.mean_state(k)[0], 3f64.powi(k as i32));
        assert_eq!(path[k], 3f64.powi(k as i32));
    }
    let zero = propagate_mean(&spec, &grid, &[0.0], &[0.0; 15]).unwrap();
    assert!(zero.iter().all(|v| *v == 0.0));
}

#[test]
fn empirical_cost_hand_values() {
    let p = LqParams {
        steps: 1,
        sigma: 0.0,
        ..LqParams::default()
    };
    let spec = p.problem((0.0, 1.0)).unwrap();
    let grid = p.grid().unwrap();
    let u = ControlBatch::zeros(1, 1, 1);
    let ens = rollout_ensemble(&spec, &grid, &[1.0], &u, &NoiseTensor::zeros(1, 1, 1)).unwrap();
    assert_eq!(ens.state(0, 1)[0], 3.0);
    assert_eq!(empirical_cost(&spec, &grid, &ens, &u).unwrap(), 200.0);

    let ens0 = rollout_ensemble(&spec, &grid, &[0.0], &u, &NoiseTensor::zeros(1, 1, 1)).unwrap();
    assert_eq!(empirical_cost(&spec, &grid, &ens0, &u).unwrap(), 0.0);
}

#[test]
fn diverged_samples_are_excluded_from_means() {
    let (spec, grid) = lq_spec(0.0);
    let spec = spec.with_divergence_threshold(100.0).unwrap();
    let ens = rollout_ensemble(
        &spec,
        &grid,
        &[0.0, 0.0, 60.0],
        &ControlBatch::zeros(3, 15, 1),
        &NoiseTensor::zeros(3, 15, 1),
    )
    .unwrap();
    // sample 2: 60 -> 2*60 + 20 = 140 diverges at step 1
    assert_eq!(ens.diverged_at()[2], Some(1));
    assert_eq!(ens.mean_state(0)[0], 20.0);
    // survivors both at 0 + 20; the diverged sample no longer counts
    assert_eq!(ens.mean_state(1)[0], 20.0);
    assert_eq!(ens.diverged_at()[0], Some(3));
    assert!(ens.state(2, 2)[0].is_nan());
    assert!(matches!(
        empirical_cost(&spec, &grid, &ens, &ControlBatch::zeros(3, 15, 1)),
        Err(Error::DivergedCost)
    ));
}

#[test]
fn noise_is_keyed_and_scaled() {
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let a = NoiseTensor::sample(2000, &grid, 1, 77);
    let b = NoiseTensor::sample(2000, &grid, 1, 77);
    assert_eq!(a, b);
    let small = NoiseTensor::sample(5, &grid, 1, 77);
    assert_eq!(small.data(), &a.data()[..5 * 20]);
    let var = a.data().iter().map(|v| v * v).sum::<f64>() / a.data().len() as f64;
    assert!((var - grid.dt()).abs() < 0.05 * grid.dt(), "{var}");
}

#[test]
fn mean_propagation_agrees_with_ensemble_at_rate() {
    let (spec, grid) = lq_spec(1.0);
    let ubar = vec![-0.5; 15];
    let err = |n: usize| {
        let u = ControlBatch::new(n, 15, 1, ubar.iter().cycle().take(n * 15).copied().collect()).unwrap();
        let ens = rollout_ensemble(&spec, &grid, &vec![1.0; n], &u, &NoiseTensor::sample(n, &grid, 1, 5)).unwrap();
        let path = propagate_mean(&spec, &grid, &[1.0], &ubar).unwrap();
        (0..=15)
            .map(|k| (ens.mean_state(k)[0] - path[k]).abs() / 3f64.powi(k as i32))
            .fold(0.0, f64::max)
    };
    let e_small = err(100);
    let e_big = err(10_000);
    // the mean noise enters with std sigma sqrt(dt / N) per step
    assert!(e_small < 3.0 * (0.05f64 / 100.0).sqrt() * 1.5);
    assert!(e_big < e_small / 4.0, "{e_small} -> {e_big}");
}

proptest! {
    #[test]
    fn rollouts_are_deterministic_and_means_consistent(
        x0 in proptest::collection::vec(-50.0..50.0f64, 1..12),
        seed in any::<u64>(),
        ctrl in -3.0..3.0f64,
    ) {
        let (spec, grid) = lq_spec(1.0);
        let n = x0.len();
        let u = ControlBatch::new(n, 15, 1, (0..n * 15).map(|j| ctrl * ((j % 7) as f64 - 3.0)).collect()).unwrap();
        let noise = NoiseTensor::sample(n, &grid, 1, seed);
        let a = rollout_ensemble(&spec, &grid, &x0, &u, &noise).unwrap();
        let b = rollout_ensemble(&spec, &grid, &x0, &u, &noise).unwrap();
        prop_assert_eq!(
            a.states().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.states().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for k in 0..=15 {
            let direct: f64 = (0..n).map(|i| a.state(i, k)[0]).sum::<f64>() / n as f64;
            let scale = (0..n).map(|i| a.state(i, k)[0].abs()).fold(1.0, f64::max);
            prop_assert!((a.mean_state(k)[0] - direct).abs() <= 4.0 * f64::EPSILON * n as f64 * scale);
        }
        for k in 0..15 {
            let direct: f64 = (0..n).map(|i| u.control(i, k)[0]).sum::<f64>() / n as f64;
            prop_assert!((u.mean(k)[0] - direct).abs() <= 4.0 * f64::EPSILON * n as f64 * 3.0 * ctrl.abs().max(1.0));
        }
    }
}
