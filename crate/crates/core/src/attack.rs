//! Projected-gradient search for adversarial initial states.
//!
//! The objective is the closed-loop sample-average cost as a function of a
//! common initial state `y` (all samples and the initial mean start at `y`).
//! Iterates follow `y <- Proj_{B_alpha}(y + beta * grad J(y))` on a fixed noise
//! sample per restart and stop at the first `y` whose rollout diverges.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{NoiseTensor, ProblemSpec, TimeGrid};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::norm2;
use crate::nn::MlpParams;
use crate::optimizer::GradientMethod;
use crate::rng::{self, derive_seed, keyed};
use crate::stability::{
    classify, closed_loop_cost, closed_loop_cost_gradient, closed_loop_rollout, Ball, ClosedLoop,
    ClosedLoopConfig, Outcome,
};

/// Cost charged for each diverged sample.
pub const SATURATED_COST: f64 = 1e30;

/// What counts as a successful attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackGoal {
    /// Some sample crosses the divergence threshold.
    #[default]
    Diverge,
    /// The tracked sample leaves `B_r` (or diverges).
    Escape { r: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub alpha: f64,
    pub beta: f64,
    pub max_pgd_iters: usize,
    pub restarts: usize,
    pub seed: u64,
    pub gradient_method: GradientMethod,
    /// Radius of the ball `y0` is drawn from.
    pub start_radius: f64,
    /// Samples in the objective's ensemble.
    pub ensemble_size: usize,
    pub closed_loop: ClosedLoopConfig,
    pub goal: AttackGoal,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 250.0,
            beta: 1e-4,
            max_pgd_iters: 200,
            restarts: 20,
            seed: 0,
            gradient_method: GradientMethod::Adjoint,
            start_radius: 20.0,
            ensemble_size: 10,
            closed_loop: ClosedLoopConfig::default(),
            goal: AttackGoal::Diverge,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("attack.alpha", "must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("attack.beta", "must be finite and nonnegative"));
        }
        if self.max_pgd_iters == 0 || self.restarts == 0 || self.ensemble_size == 0 {
            return Err(Error::invalid(
                "attack",
                "max_pgd_iters, restarts and ensemble_size must be positive",
            ));
        }
        if !(self.start_radius >= 0.0 && self.start_radius <= self.alpha) {
            return Err(Error::invalid("attack.start_radius", "must lie in [0, alpha]"));
        }
        if let AttackGoal::Escape { r } = self.goal {
            if !(r > 0.0) {
                return Err(Error::invalid("attack.goal.r", "must be positive"));
            }
        }
        Ok(())
    }

    fn noise_seed(&self, restart: usize) -> u64 {
        derive_seed(self.seed, rng::domain::ATTACK, restart as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    Diverged,
    MaxIters,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub found: bool,
    pub adversarial: Option<Vec<f64>>,
    pub path: Vec<Vec<f64>>,
    pub objectives: Vec<f64>,
    pub stop_reason: StopReason,
    pub seed: u64,
    /// Restart that produced this result and the seed of its noise sample.
    pub restart: usize,
    pub noise_seed: u64,
    pub ensemble_size: usize,
}

impl AttackResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The PGD walk: `iter, objective, y_0.., y_{d-1}`.
    pub fn write_walk_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.path.first().map_or(0, Vec::len);
        let mut header = vec!["iter".to_string(), "objective".into()];
        header.extend((0..d).map(|c| format!("y_{c}")));
        w.write_record(&header)?;
        for (m, y) in self.path.iter().enumerate() {
            let mut row = vec![
                m.to_string(),
                self.objectives.get(m).map_or(String::new(), |v| format!("{v:?}")),
            ];
            row.extend(y.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Closed-loop sample-average cost with diverged samples charged
/// [`SATURATED_COST`].
pub fn attack_objective(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    initial: &[f64],
    mean_x0: &[f64],
    noise: &NoiseTensor,
    closed_loop: ClosedLoopConfig,
) -> Result<f64> {
    let roll = closed_loop_rollout(spec, grid, params, initial, mean_x0, noise, closed_loop)?;
    Ok(closed_loop_cost(spec, grid, &roll, SATURATED_COST))
}

/// Euclidean projection onto a ball.
pub fn project_ball(x: &[f64], ball: &Ball) -> Vec<f64> {
    let dist = ball.distance(x);
    if dist <= ball.radius {
        return x.to_vec();
    }
    let s = ball.radius / dist;
    x.iter()
        .zip(&ball.center)
        .map(|(v, c)| c + s * (v - c))
        .collect()
}

fn objective_at(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    y: &[f64],
    noise: &NoiseTensor,
    closed_loop: ClosedLoopConfig,
) -> Result<f64> {
    let initial: Vec<f64> = (0..noise.n()).flat_map(|_| y.iter().copied()).collect();
    attack_objective(spec, grid, params, &initial, y, noise, closed_loop)
}

fn finite_difference(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    y: &[f64],
    noise: &NoiseTensor,
    closed_loop: ClosedLoopConfig,
) -> Result<Vec<f64>> {
    (0..y.len())
        .map(|c| {
            let h = 1e-5 * (1.0 + y[c].abs());
            let mut plus = y.to_vec();
            let mut minus = y.to_vec();
            plus[c] += h;
            minus[c] -= h;
            let fp = objective_at(spec, grid, params, &plus, noise, closed_loop)?;
            let fm = objective_at(spec, grid, params, &minus, noise, closed_loop)?;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// Gradient of the attack objective w.r.t. the common initial state.
///
/// Reverse mode through the dynamics, the controller and the mean
/// recursion; falls back to central differences on the saturated objective
/// when the rollout diverges.
pub fn input_gradient(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    y: &[f64],
    noise: &NoiseTensor,
    closed_loop: ClosedLoopConfig,
    method: GradientMethod,
) -> Result<Vec<f64>> {
    ensure_dim("initial state", spec.state_dim(), y.len())?;
    if method == GradientMethod::Adjoint {
        if let Some((_, g)) = closed_loop_cost_gradient(spec, grid, params, y, noise, closed_loop)? {
            return Ok(g);
        }
    }
    finite_difference(spec, grid, params, y, noise, closed_loop)
}

fn goal_met(roll: &ClosedLoop, goal: AttackGoal, d: usize) -> Result<bool> {
    Ok(match goal {
        AttackGoal::Diverge => roll.any_diverged(),
        AttackGoal::Escape { r } => {
            let ball = Ball::centered(d, r)?;
            classify(roll, &ball, true).0 != Outcome::Contained
        }
    })
}

fn draw_start(rng: &mut rng::StreamRng, d: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm2(&v).max(1e-300);
    let rho = radius * rng.random::<f64>().powf(1.0 / d as f64);
    v.into_iter().map(|c| rho * c / n).collect()
}

const MAX_RESEEDS: usize = 3;

fn run_restart(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    config: &AttackConfig,
    restart: usize,
) -> Result<AttackResult> {
    let d = spec.state_dim();
    let ball = Ball::centered(d, config.alpha)?;
    let mut rng = keyed(config.seed, rng::domain::ATTACK, restart as u64);
    let noise_seed = config.noise_seed(restart);
    let noise = NoiseTensor::sample(config.ensemble_size, grid, d, noise_seed);
    let mut y = draw_start(&mut rng, d, config.start_radius);
    let mut path = vec![y.clone()];
    let mut objectives = Vec::new();
    let mut reseeds = 0;
    let mut stop = StopReason::MaxIters;
    let mut found = false;
    for m in 0..=config.max_pgd_iters {
        let initial: Vec<f64> = (0..config.ensemble_size).flat_map(|_| y.iter().copied()).collect();
        let roll = closed_loop_rollout(spec, grid, params, &initial, &y, &noise, config.closed_loop)?;
        objectives.push(closed_loop_cost(spec, grid, &roll, SATURATED_COST));
        if goal_met(&roll, config.goal, d)? {
            found = true;
            stop = StopReason::Diverged;
            break;
        }
        if m == config.max_pgd_iters {
            break;
        }
        let g = input_gradient(spec, grid, params, &y, &noise, config.closed_loop, config.gradient_method)?;
        if g.iter().any(|v| !v.is_finite()) {
            if reseeds == MAX_RESEEDS {
                stop = StopReason::Stalled;
                break;
            }
            reseeds += 1;
            y = draw_start(&mut rng, d, config.start_radius);
            path.push(y.clone());
            continue;
        }
        let stepped: Vec<f64> = y.iter().zip(&g).map(|(v, gv)| v + config.beta * gv).collect();
        let next = project_ball(&stepped, &ball);
        let moved: Vec<f64> = next.iter().zip(&y).map(|(a, b)| a - b).collect();
        if norm2(&moved) <= 1e-12 * (1.0 + norm2(&y)) {
            stop = StopReason::Stalled;
            break;
        }
        y = next;
        path.push(y.clone());
    }
    Ok(AttackResult {
        found,
        adversarial: found.then(|| y.clone()),
        path,
        objectives,
        stop_reason: stop,
        seed: config.seed,
        restart,
        noise_seed,
        ensemble_size: config.ensemble_size,
    })
}

/// Runs `restarts` independent PGD walks in parallel and returns the
/// successful one with the lowest restart index, or else the walk that
/// reached the highest objective.
pub fn pgd_attack(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    ensure_dim("controller input", 3 * spec.state_dim(), params.input_dim())?;
    let results: Vec<AttackResult> = (0..config.restarts)
        .into_par_iter()
        .map(|j| run_restart(spec, grid, params, config, j))
        .collect::<Result<_>>()?;
    let best = match results.iter().position(|r| r.found) {
        Some(i) => i,
        None => results
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let fa = a.1.objectives.last().copied().unwrap_or(f64::NEG_INFINITY);
                let fb = b.1.objectives.last().copied().unwrap_or(f64::NEG_INFINITY);
                fa.total_cmp(&fb).then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i)
            .expect("at least one restart"),
    };
    Ok(results.into_iter().nth(best).expect("index in range"))
}

/// Re-rolls a reported adversarial state with the stored noise seed and
/// checks that the attack goal is met again.
pub fn replay(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    config: &AttackConfig,
    result: &AttackResult,
) -> Result<bool> {
    let Some(y) = &result.adversarial else {
        return Ok(false);
    };
    let noise = NoiseTensor::sample(result.ensemble_size, grid, spec.state_dim(), result.noise_seed);
    let initial: Vec<f64> = (0..result.ensemble_size).flat_map(|_| y.iter().copied()).collect();
    let roll = closed_loop_rollout(spec, grid, params, &initial, y, &noise, config.closed_loop)?;
    goal_met(&roll, config.goal, spec.state_dim())
}
