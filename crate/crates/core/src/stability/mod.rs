//! Empirical stochastic stability of closed-loop systems.
//!
//! A controller is stable at `(r, eps)` with radius `delta` when trajectories
//! started in `B_delta` stay inside `B_r` at steps `1..N_T-1` with
//! probability at least `1 - eps`. The estimators here count contained
//! trials, attach Wilson intervals, and search for the largest such `delta`.

mod closed_loop;
mod report;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{NoiseTensor, ProblemSpec, TimeGrid};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::norm2;
use crate::nn::MlpParams;
use crate::rng::{self, derive_seed, keyed};

pub use closed_loop::{
    closed_loop_cost, closed_loop_cost_gradient, closed_loop_rollout, ClosedLoop,
    ClosedLoopConfig, MeanControlSource, MeanMode,
};
pub use report::{
    compare_controllers, write_trials_csv, Comparison, ComparisonRow, Scenario, StabilityReport,
};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::invalid("radius", "must be finite and nonnegative"));
        }
        Ok(Self { center, radius })
    }

    pub fn centered(dim: usize, radius: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], radius)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        norm2(&diff)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.distance(x) <= self.radius
    }
}

/// Wilson score interval for `successes / trials`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let m = trials as f64;
    let p = successes as f64 / m;
    let z2 = z * z;
    let denom = 1.0 + z2 / m;
    let center = (p + z2 / (2.0 * m)) / denom;
    let half = z / denom * (p * (1.0 - p) / m + z2 / (4.0 * m * m)).sqrt();
    ((center - half).max(0.0).min(p), (center + half).min(1.0).max(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Uniform in the ball, drawn in antithetic pairs `(x, -x)`.
    #[default]
    UniformBall,
    UniformSphere,
    /// Regular lattice over the ball (for `d = 1`, evenly spaced points on
    /// `[-delta, delta]`).
    Grid,
}

/// How the initial mean relates to the sampled initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialMean {
    /// `E[x0] = x0` for the trial.
    #[default]
    Matched,
    /// The drawn point is the mean; samples are spread uniformly in a ball of
    /// the given radius around it.
    Spread { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Contained,
    Escaped,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityQuery {
    pub r: f64,
    pub epsilon: f64,
    pub trials: usize,
    pub sampling: Sampling,
    pub closed_loop: ClosedLoopConfig,
    /// Samples simulated per trial; sample 0 is the tracked trajectory.
    pub ensemble_size: usize,
    pub initial_mean: InitialMean,
    /// Also check the terminal step `N_T`.
    pub include_terminal: bool,
    pub seed: u64,
}

impl Default for StabilityQuery {
    fn default() -> Self {
        Self {
            r: 200.0,
            epsilon: 0.05,
            trials: 1000,
            sampling: Sampling::UniformBall,
            closed_loop: ClosedLoopConfig::default(),
            ensemble_size: 1,
            initial_mean: InitialMean::Matched,
            include_terminal: false,
            seed: 0,
        }
    }
}

impl StabilityQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon", format!("{} is outside (0, 1)", self.epsilon)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::invalid("r", "must be positive"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials", "must be at least 1"));
        }
        if self.ensemble_size == 0 {
            return Err(Error::invalid("ensemble_size", "must be at least 1"));
        }
        if let InitialMean::Spread { radius } = self.initial_mean {
            if !(radius >= 0.0 && radius.is_finite()) {
                return Err(Error::invalid("initial_mean.radius", "must be nonnegative"));
            }
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut rng::StreamRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}

/// Point of the unit ball for trial `t`; scaling by `delta` gives nested
/// samples across radii.
pub fn unit_sample(sampling: Sampling, d: usize, trials: usize, t: usize, seed: u64) -> Vec<f64> {
    match sampling {
        Sampling::UniformBall => {
            let mut rng = keyed(seed, rng::domain::INITIAL_STATE, (t / 2) as u64);
            let dir = unit_direction(&mut rng, d);
            let rho = rng.random::<f64>().powf(1.0 / d as f64);
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            dir.into_iter().map(|c| sign * rho * c).collect()
        }
        Sampling::UniformSphere => {
            let mut rng = keyed(seed, rng::domain::INITIAL_STATE, t as u64);
            unit_direction(&mut rng, d)
        }
        Sampling::Grid => grid_point(d, trials, t),
    }
}

fn grid_point(d: usize, trials: usize, t: usize) -> Vec<f64> {
    if trials <= 1 {
        return vec![0.0; d];
    }
    let per_axis = ((trials as f64).powf(1.0 / d as f64).ceil() as usize).max(2);
    let mut idx = t;
    let mut p: Vec<f64> = (0..d)
        .map(|_| {
            let j = idx % per_axis;
            idx /= per_axis;
            -1.0 + 2.0 * j as f64 / (per_axis - 1) as f64
        })
        .collect();
    let n = norm2(&p);
    if n > 1.0 {
        p.iter_mut().for_each(|c| *c /= n);
    }
    p
}

/// Everything needed to replay one trial.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub initial: Vec<f64>,
    pub mean_x0: Vec<f64>,
    pub noise: NoiseTensor,
}

pub fn trial_setup(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    query: &StabilityQuery,
    center: &[f64],
    delta: f64,
    t: usize,
) -> TrialSetup {
    let d = spec.state_dim();
    let n = query.ensemble_size;
    let unit = unit_sample(query.sampling, d, query.trials, t, query.seed);
    let x0: Vec<f64> = unit.iter().zip(center).map(|(u, c)| c + delta * u).collect();
    let mut initial = Vec::with_capacity(n * d);
    match query.initial_mean {
        InitialMean::Matched => {
            for _ in 0..n {
                initial.extend_from_slice(&x0);
            }
        }
        InitialMean::Spread { radius } => {
            for i in 0..n {
                let mut rng = keyed(
                    derive_seed(query.seed, rng::domain::TRIAL, t as u64),
                    rng::domain::INITIAL_STATE,
                    i as u64,
                );
                let dir = unit_direction(&mut rng, d);
                let rho = radius * rng.random::<f64>().powf(1.0 / d as f64);
                initial.extend(x0.iter().zip(&dir).map(|(c, u)| c + rho * u));
            }
        }
    }
    let noise = NoiseTensor::sample(n, grid, d, derive_seed(query.seed, rng::domain::TRIAL, t as u64));
    TrialSetup {
        initial,
        mean_x0: x0,
        noise,
    }
}

/// Containment verdict for the tracked sample of a rollout.
pub fn classify(roll: &ClosedLoop, ball: &Ball, include_terminal: bool) -> (Outcome, Option<usize>) {
    if let Some(k) = roll.diverged_at()[0] {
        return (Outcome::Diverged, Some(k));
    }
    let last = if include_terminal { roll.steps() } else { roll.steps().saturating_sub(1) };
    for k in 1..=last {
        if !ball.contains(roll.state(0, k)) {
            return (Outcome::Escaped, Some(k));
        }
    }
    (Outcome::Contained, None)
}

/// Per-trial result kept for CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub initial_state: Vec<f64>,
    pub outcome: Outcome,
    pub exit_step: Option<usize>,
}

/// Estimates `P(x(t_k) in B_r for all checked k | x(t0) in B_delta)`.
pub fn estimate_containment(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    delta: f64,
    query: &StabilityQuery,
) -> Result<StabilityReport> {
    query.validate()?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta", "must be finite and nonnegative"));
    }
    let d = spec.state_dim();
    ensure_dim("controller input", 3 * d, params.input_dim())?;
    ensure_dim("controller output", 2 * spec.control_dim(), params.output_dim())?;
    let ball = Ball::centered(d, query.r)?;
    let records: Vec<TrialRecord> = (0..query.trials)
        .into_par_iter()
        .map(|t| -> Result<TrialRecord> {
            let setup = trial_setup(spec, grid, query, &ball.center, delta, t);
            let roll = closed_loop_rollout(
                spec,
                grid,
                params,
                &setup.initial,
                &setup.mean_x0,
                &setup.noise,
                query.closed_loop,
            )?;
            let (outcome, exit_step) = classify(&roll, &ball, query.include_terminal);
            Ok(TrialRecord {
                initial_state: setup.initial[..d].to_vec(),
                outcome,
                exit_step,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StabilityReport::from_trials(String::new(), query, delta, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaFlag {
    Found,
    NoneFound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSearch {
    pub delta: f64,
    pub flag: DeltaFlag,
    /// `(delta, p_hat, wilson_lo)` at every queried radius, in query order.
    pub evaluated: Vec<(f64, f64, f64)>,
    /// Whether `p_hat` was non-increasing in `delta` over the queried points.
    pub monotone: bool,
}

/// Largest `delta = j * r / 256` whose estimate satisfies `p_hat >= 1 - eps`
/// and `wilson_lo >= 1 - eps - 0.02`, found by bisection on `j`.
pub fn find_delta(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    r: f64,
    epsilon: f64,
    query: &StabilityQuery,
) -> Result<DeltaSearch> {
    let query = StabilityQuery {
        r,
        epsilon,
        ..query.clone()
    };
    query.validate()?;
    const RESOLUTION: usize = 256;
    let mut evaluated = Vec::new();
    let mut accept = |j: usize| -> Result<bool> {
        let delta = j as f64 * r / RESOLUTION as f64;
        let rep = estimate_containment(spec, grid, params, delta, &query)?;
        evaluated.push((delta, rep.p_hat, rep.ci_lo));
        Ok(rep.p_hat >= 1.0 - epsilon && rep.ci_lo >= 1.0 - epsilon - 0.02)
    };
    let (delta, flag) = if !accept(1)? {
        (0.0, DeltaFlag::NoneFound)
    } else if accept(RESOLUTION)? {
        (r, DeltaFlag::Found)
    } else {
        let (mut lo, mut hi) = (1, RESOLUTION);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if accept(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo as f64 * r / RESOLUTION as f64, DeltaFlag::Found)
    };
    let mut sorted = evaluated.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = sorted.windows(2).all(|w| w[1].1 <= w[0].1);
    Ok(DeltaSearch {
        delta,
        flag,
        evaluated,
        monotone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentEdge {
    /// Largest tested `x0 > 0` whose containment fraction is at least one half.
    pub edge: f64,
    /// True when even the upper search bound was contained.
    pub saturated: bool,
    pub fractions: Vec<(f64, f64)>,
}

/// Bisection on `x0 = E[x0] > 0` for the edge of the region whose
/// trajectories stay in `B_r` (fraction over `query.trials` noise draws
/// at least one half).
pub fn containment_edge(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    query: &StabilityQuery,
    upper: f64,
    tolerance: f64,
) -> Result<ContainmentEdge> {
    query.validate()?;
    ensure_dim("state dimension (edge search is scalar)", 1, spec.state_dim())?;
    if !(upper > 0.0 && tolerance > 0.0) {
        return Err(Error::invalid("upper", "bounds must be positive"));
    }
    let ball = Ball::centered(1, query.r)?;
    let matched = StabilityQuery {
        initial_mean: InitialMean::Matched,
        ..query.clone()
    };
    let mut fractions = Vec::new();
    let mut fraction = |x0: f64| -> Result<f64> {
        let contained = (0..matched.trials)
            .into_par_iter()
            .map(|t| -> Result<bool> {
                let mut setup = trial_setup(spec, grid, &matched, &[0.0], 0.0, t);
                setup.initial.iter_mut().for_each(|v| *v = x0);
                let roll = closed_loop_rollout(
                    spec,
                    grid,
                    params,
                    &setup.initial,
                    &[x0],
                    &setup.noise,
                    matched.closed_loop,
                )?;
                Ok(classify(&roll, &ball, matched.include_terminal).0 == Outcome::Contained)
            })
            .collect::<Result<Vec<bool>>>()?
            .into_iter()
            .filter(|c| *c)
            .count();
        let f = contained as f64 / matched.trials as f64;
        fractions.push((x0, f));
        Ok(f)
    };
    if fraction(upper)? >= 0.5 {
        return Ok(ContainmentEdge {
            edge: upper,
            saturated: true,
            fractions,
        });
    }
    let (mut lo, mut hi) = (0.0, upper);
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        if fraction(mid)? >= 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ContainmentEdge {
        edge: lo,
        saturated: false,
        fractions,
    })
}

/// Tracked trajectories from a list of initial states `x0 = E[x0]`, for
/// fan plots: one `(x0, trial, states)` entry per start and noise trial.
pub fn trajectory_fan(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    starts: &[f64],
    trials_per_start: usize,
    query: &StabilityQuery,
) -> Result<Vec<(f64, usize, Vec<f64>)>> {
    ensure_dim("state dimension (fan plots are scalar)", 1, spec.state_dim())?;
    let jobs: Vec<(f64, usize)> = starts
        .iter()
        .flat_map(|&x| (0..trials_per_start).map(move |t| (x, t)))
        .collect();
    jobs.into_par_iter()
        .map(|(x0, t)| {
            let mut setup = trial_setup(spec, grid, query, &[0.0], 0.0, t);
            setup.initial.iter_mut().for_each(|v| *v = x0);
            let roll = closed_loop_rollout(
                spec,
                grid,
                params,
                &setup.initial,
                &[x0],
                &setup.noise,
                query.closed_loop,
            )?;
            let path = (0..=grid.steps()).map(|k| roll.state(0, k)[0]).collect();
            Ok((x0, t, path))
        })
        .collect()
}
