//! Sample-average trajectory optimization.
//!
//! Minimizes the empirical cost over free per-sample, per-step controls for a
//! fixed noise sample (common random numbers), which turns the stochastic
//! problem into a smooth deterministic program. Gradients come from a reverse
//! sweep through the coupled rollout, including the `1/N` cross-sample terms
//! contributed by the empirical means.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    empirical_cost, rollout_ensemble, step_vjp, ArgGrads, ControlBatch, Ensemble, NoiseTensor,
    ProblemSpec, StepArgs, TimeGrid,
};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{dot, norm_inf, pairwise_sum};
use crate::nn::{Dataset, Provenance, RecordMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    Adjoint,
    FiniteDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Limited-memory quasi-Newton directions with Armijo backtracking.
    Lbfgs,
    /// Adaptive moment estimates with cost-based step halving.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Adam step size; for L-BFGS, the largest per-coordinate change of the
    /// first (steepest-descent) step.
    pub learning_rate: f64,
    pub gradient_method: GradientMethod,
    /// Relative tolerance for both the gradient test and the stall test.
    pub convergence_tol: f64,
    pub update: UpdateRule,
    pub memory: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Consecutive iterations of relative decrease below tolerance before
    /// the run is declared stalled.
    pub stall_window: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            learning_rate: 1.0,
            gradient_method: GradientMethod::Adjoint,
            convergence_tol: 1e-10,
            update: UpdateRule::Lbfgs,
            memory: 30,
            beta1: 0.9,
            beta2: 0.999,
            stall_window: 20,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("optimizer.max_iters", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("optimizer.learning_rate", "must be positive"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::invalid("optimizer.convergence_tol", "must be positive"));
        }
        for (name, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(name, "must lie in (0, 1)"));
            }
        }
        if self.memory == 0 {
            return Err(Error::invalid("optimizer.memory", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Gradient max-norm below `tol * (1 + |J|)`.
    Converged,
    /// Relative decrease stayed below tolerance for the stall window, or
    /// no further decrease was representable.
    Stalled,
    MaxIters,
}

/// Optimal controls, the states they generate and their empirical means.
#[derive(Debug, Clone)]
pub struct OptimalBatch {
    pub controls: ControlBatch,
    pub ensemble: Ensemble,
    pub noise: NoiseTensor,
    pub initial_states: Vec<f64>,
    pub achieved_cost: f64,
    pub iterations_used: usize,
    pub status: SolveStatus,
    pub cost_history: Vec<f64>,
}

impl OptimalBatch {
    /// One record per `(i, k)`, `k < N_T`: input `(x, mu_x, B)`, target `(u, mu_u)`.
    pub fn to_dataset(&self, provenance: Provenance, group: u32) -> Dataset {
        let n = self.controls.n();
        let steps = self.controls.steps();
        let d = self.ensemble.dim();
        let m = self.controls.dim();
        let mut data = Dataset::new(3 * d, 2 * m);
        let mut input = Vec::with_capacity(3 * d);
        let mut target = Vec::with_capacity(2 * m);
        for i in 0..n {
            for k in 0..steps {
                input.clear();
                input.extend_from_slice(self.ensemble.state(i, k));
                input.extend_from_slice(self.ensemble.mean_state(k));
                input.extend_from_slice(self.noise.increment(i, k));
                target.clear();
                target.extend_from_slice(self.controls.control(i, k));
                target.extend_from_slice(self.controls.mean(k));
                let meta = RecordMeta {
                    provenance,
                    group,
                    sample: i as u32,
                    step: k as u32,
                };
                data.push(&input, &target, meta)
                    .expect("record extents follow the batch");
            }
        }
        data
    }
}

fn column_sums(data: &[f64], dim: usize) -> Vec<f64> {
    let n = data.len() / dim;
    (0..dim)
        .map(|c| {
            let col: Vec<f64> = (0..n).map(|i| data[i * dim + c]).collect();
            pairwise_sum(&col)
        })
        .collect()
}

/// Reverse sweep through a completed (non-diverged) open-loop rollout.
fn adjoint_gradient(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    ens: &Ensemble,
    controls: &ControlBatch,
) -> Vec<f64> {
    let n = ens.n();
    let d = spec.state_dim();
    let m = spec.control_dim();
    let steps = grid.steps();
    let inv_n = 1.0 / n as f64;
    let w = spec.running_weight(grid);
    let model = spec.model();

    // costate w.r.t. x_i(t_k)
    let mut lam = vec![0.0; n * d];
    let mut gm = vec![0.0; n * d];
    for i in 0..n {
        model.terminal_cost_grad(
            ens.state(i, steps),
            ens.mean_state(steps),
            inv_n,
            &mut lam[i * d..(i + 1) * d],
            &mut gm[i * d..(i + 1) * d],
        );
    }
    let s = column_sums(&gm, d);
    for i in 0..n {
        for c in 0..d {
            lam[i * d + c] += s[c] * inv_n;
        }
    }

    let mut grad = vec![0.0; n * steps * m];
    for k in (0..steps).rev() {
        let t = grid.t(k);
        let per_sample: Vec<ArgGrads> = (0..n)
            .into_par_iter()
            .with_min_len(64)
            .map(|i| {
                let args = StepArgs {
                    x: ens.state(i, k),
                    mean_x: ens.mean_state(k),
                    u: controls.control(i, k),
                    mean_u: ens.mean_control(k),
                };
                let mut g = ArgGrads::zeros(d, m);
                step_vjp(spec, grid, k, &args, &lam[i * d..(i + 1) * d], &mut g);
                model.running_cost_grad(t, &args, w * inv_n, &mut g);
                g
            })
            .collect();
        let gmx: Vec<f64> = per_sample.iter().flat_map(|g| g.mean_x.iter().copied()).collect();
        let gmu: Vec<f64> = per_sample.iter().flat_map(|g| g.mean_u.iter().copied()).collect();
        let sx = column_sums(&gmx, d);
        let su = column_sums(&gmu, m);
        for (i, g) in per_sample.iter().enumerate() {
            let o = (i * steps + k) * m;
            for c in 0..m {
                grad[o + c] = g.u[c] + su[c] * inv_n;
            }
            for c in 0..d {
                lam[i * d + c] = g.x[c] + sx[c] * inv_n;
            }
        }
    }
    grad
}

fn cost_of(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    initial_states: &[f64],
    controls: &ControlBatch,
    noise: &NoiseTensor,
) -> Result<(f64, Ensemble)> {
    let ens = rollout_ensemble(spec, grid, initial_states, controls, noise)?;
    let j = empirical_cost(spec, grid, &ens, controls)?;
    Ok((j, ens))
}

/// Gradient of the sample-average cost w.r.t. every control coordinate,
/// `(N x N_T x m)`.
///
/// The finite-difference route uses central differences with step
/// `1e-5 * (1 + |u|)` per coordinate.
pub fn cost_gradient(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    controls: &ControlBatch,
    initial_states: &[f64],
    noise: &NoiseTensor,
    method: GradientMethod,
) -> Result<Vec<f64>> {
    if controls.controls().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("controls", "must be finite"));
    }
    let grad = match method {
        GradientMethod::Adjoint => {
            let (_, ens) = cost_of(spec, grid, initial_states, controls, noise)
                .map_err(|e| nonconvergence_on_divergence(e, "gradient evaluation"))?;
            adjoint_gradient(spec, grid, &ens, controls)
        }
        GradientMethod::FiniteDiff => {
            let base = controls.controls();
            let (n, steps, m) = (controls.n(), controls.steps(), controls.dim());
            (0..base.len())
                .into_par_iter()
                .map(|j| -> Result<f64> {
                    let h = 1e-5 * (1.0 + base[j].abs());
                    let eval = |delta: f64| -> Result<f64> {
                        let mut u = base.to_vec();
                        u[j] += delta;
                        let batch = ControlBatch::new(n, steps, m, u)?;
                        Ok(cost_of(spec, grid, initial_states, &batch, noise)?.0)
                    };
                    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
                })
                .collect::<Result<Vec<f64>>>()
                .map_err(|e| nonconvergence_on_divergence(e, "finite-difference gradient"))?
        }
    };
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonConvergence("non-finite gradient".into()));
    }
    Ok(grad)
}

fn nonconvergence_on_divergence(e: Error, what: &str) -> Error {
    match e {
        Error::DivergedCost => Error::NonConvergence(format!("{what}: rollout diverged")),
        other => other,
    }
}

struct Evaluated {
    controls: ControlBatch,
    ensemble: Ensemble,
    cost: f64,
    grad: Vec<f64>,
}

struct Problem<'a> {
    spec: &'a ProblemSpec,
    grid: &'a TimeGrid,
    initial_states: &'a [f64],
    noise: &'a NoiseTensor,
    method: GradientMethod,
    n: usize,
    m: usize,
}

impl Problem<'_> {
    fn batch(&self, mut u: Vec<f64>) -> ControlBatch {
        if let Some(bound) = &self.spec.control_bound {
            bound.project(&mut u);
        }
        ControlBatch::new(self.n, self.grid.steps(), self.m, u).expect("extents fixed by problem")
    }

    /// Cost only; `None` when the trial point diverges.
    fn try_cost(&self, controls: &ControlBatch) -> Result<Option<(f64, Ensemble)>> {
        match cost_of(self.spec, self.grid, self.initial_states, controls, self.noise) {
            Ok(v) => Ok(Some(v)),
            Err(Error::DivergedCost) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn gradient(&self, controls: &ControlBatch, ensemble: &Ensemble) -> Result<Vec<f64>> {
        let g = match self.method {
            GradientMethod::Adjoint => adjoint_gradient(self.spec, self.grid, ensemble, controls),
            GradientMethod::FiniteDiff => cost_gradient(
                self.spec,
                self.grid,
                controls,
                self.initial_states,
                self.noise,
                GradientMethod::FiniteDiff,
            )?,
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonConvergence("non-finite gradient".into()));
        }
        Ok(g)
    }

    fn evaluate(&self, controls: ControlBatch, cost: f64, ensemble: Ensemble) -> Result<Evaluated> {
        let grad = self.gradient(&controls, &ensemble)?;
        Ok(Evaluated {
            controls,
            ensemble,
            cost,
            grad,
        })
    }
}

const MAX_HALVINGS: usize = 30;
const ARMIJO: f64 = 1e-4;

/// Solves the sample-average control problem from zero controls.
///
/// Accepted iterates never increase the cost. A step whose rollout diverges
/// is rejected and halved; if thirty halvings still diverge the solve aborts
/// with [`Error::NonConvergence`].
pub fn solve_pcd(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    initial_states: &[f64],
    noise: &NoiseTensor,
    config: &OptimizerConfig,
) -> Result<OptimalBatch> {
    config.validate()?;
    let d = spec.state_dim();
    let m = spec.control_dim();
    if initial_states.len() % d != 0 || initial_states.is_empty() {
        return Err(Error::dim("initial states", d, initial_states.len() % d));
    }
    let n = initial_states.len() / d;
    ensure_dim("noise samples", n, noise.n())?;
    ensure_dim("noise steps", grid.steps(), noise.steps())?;
    if initial_states.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial_states", "must be finite"));
    }
    let problem = Problem {
        spec,
        grid,
        initial_states,
        noise,
        method: config.gradient_method,
        n,
        m,
    };

    let start = problem.batch(vec![0.0; n * grid.steps() * m]);
    let (j0, e0) = problem
        .try_cost(&start)?
        .ok_or_else(|| Error::NonConvergence("initial rollout diverged".into()))?;
    let mut cur = problem.evaluate(start, j0, e0)?;
    let mut history = vec![cur.cost];

    let status = match config.update {
        UpdateRule::Lbfgs => run_lbfgs(&problem, config, &mut cur, &mut history)?,
        UpdateRule::Adam => run_adam(&problem, config, &mut cur, &mut history)?,
    };
    let iterations_used = history.len() - 1;
    Ok(OptimalBatch {
        controls: cur.controls,
        ensemble: cur.ensemble,
        noise: noise.clone(),
        initial_states: initial_states.to_vec(),
        achieved_cost: cur.cost,
        iterations_used,
        status,
        cost_history: history,
    })
}

fn gradient_converged(cur: &Evaluated, tol: f64) -> bool {
    norm_inf(&cur.grad) <= tol * (1.0 + cur.cost.abs())
}

struct StallMonitor {
    window: usize,
    count: usize,
    tol: f64,
}

impl StallMonitor {
    fn record(&mut self, before: f64, after: f64) -> bool {
        let rel = (before - after) / before.abs().max(f64::MIN_POSITIVE);
        if rel < self.tol {
            self.count += 1;
        } else {
            self.count = 0;
        }
        self.count >= self.window
    }
}

fn lbfgs_direction(grad: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn run_lbfgs(
    problem: &Problem<'_>,
    config: &OptimizerConfig,
    cur: &mut Evaluated,
    history: &mut Vec<f64>,
) -> Result<SolveStatus> {
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut stall = StallMonitor {
        window: config.stall_window.max(1),
        count: 0,
        tol: config.convergence_tol,
    };
    for _ in 0..config.max_iters {
        if gradient_converged(cur, config.convergence_tol) {
            return Ok(SolveStatus::Converged);
        }
        let mut retried = false;
        let accepted = loop {
            let steepest = memory.is_empty();
            let dir = if steepest {
                let scale = config.learning_rate / norm_inf(&cur.grad).max(f64::MIN_POSITIVE);
                cur.grad.iter().map(|g| -g * scale).collect()
            } else {
                lbfgs_direction(&cur.grad, &memory)
            };
            let slope = dot(&cur.grad, &dir);
            if !(slope < 0.0) {
                if steepest {
                    return Ok(SolveStatus::Stalled);
                }
                memory.clear();
                continue;
            }
            match line_search(problem, cur, &dir, slope)? {
                LineSearch::Accepted(next) => break next,
                LineSearch::Diverged => {
                    return Err(Error::NonConvergence(format!(
                        "line search diverged after {MAX_HALVINGS} halvings"
                    )))
                }
                LineSearch::NoDecrease => {
                    if steepest || retried {
                        return Ok(SolveStatus::Stalled);
                    }
                    memory.clear();
                    retried = true;
                }
            }
        };
        let next = problem.evaluate(accepted.0, accepted.1, accepted.2)?;
        let s: Vec<f64> = next
            .controls
            .controls()
            .iter()
            .zip(cur.controls.controls())
            .map(|(a, b)| a - b)
            .collect();
        let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            memory.push_back((s, y, 1.0 / sy));
            if memory.len() > config.memory {
                memory.pop_front();
            }
        }
        let stalled = stall.record(cur.cost, next.cost);
        *cur = next;
        history.push(cur.cost);
        if stalled {
            return Ok(if gradient_converged(cur, config.convergence_tol) {
                SolveStatus::Converged
            } else {
                SolveStatus::Stalled
            });
        }
    }
    Ok(if gradient_converged(cur, config.convergence_tol) {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIters
    })
}

enum LineSearch {
    Accepted((ControlBatch, f64, Ensemble)),
    Diverged,
    NoDecrease,
}

fn line_search(
    problem: &Problem<'_>,
    cur: &Evaluated,
    dir: &[f64],
    slope: f64,
) -> Result<LineSearch> {
    let mut alpha = 1.0;
    let mut all_diverged = true;
    for _ in 0..=MAX_HALVINGS {
        let trial: Vec<f64> = cur
            .controls
            .controls()
            .iter()
            .zip(dir)
            .map(|(u, p)| u + alpha * p)
            .collect();
        let batch = problem.batch(trial);
        if let Some((j, ens)) = problem.try_cost(&batch)? {
            all_diverged = false;
            if j <= cur.cost + ARMIJO * alpha * slope {
                return Ok(LineSearch::Accepted((batch, j, ens)));
            }
        }
        alpha *= 0.5;
    }
    Ok(if all_diverged {
        LineSearch::Diverged
    } else {
        LineSearch::NoDecrease
    })
}

fn run_adam(
    problem: &Problem<'_>,
    config: &OptimizerConfig,
    cur: &mut Evaluated,
    history: &mut Vec<f64>,
) -> Result<SolveStatus> {
    let len = cur.grad.len();
    let mut first = vec![0.0; len];
    let mut second = vec![0.0; len];
    let mut lr = config.learning_rate;
    let mut stall = StallMonitor {
        window: config.stall_window.max(1),
        count: 0,
        tol: config.convergence_tol,
    };
    for it in 1..=config.max_iters {
        if gradient_converged(cur, config.convergence_tol) {
            return Ok(SolveStatus::Converged);
        }
        for ((f, s), g) in first.iter_mut().zip(second.iter_mut()).zip(&cur.grad) {
            *f = config.beta1 * *f + (1.0 - config.beta1) * g;
            *s = config.beta2 * *s + (1.0 - config.beta2) * g * g;
        }
        let c1 = 1.0 - config.beta1.powi(it as i32);
        let c2 = 1.0 - config.beta2.powi(it as i32);
        let mut accepted = None;
        let mut any_finite = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = cur
                .controls
                .controls()
                .iter()
                .zip(first.iter().zip(&second))
                .map(|(u, (f, s))| u - lr * (f / c1) / ((s / c2).sqrt() + 1e-12))
                .collect();
            let batch = problem.batch(trial);
            if let Some((j, ens)) = problem.try_cost(&batch)? {
                any_finite = true;
                if j <= cur.cost {
                    accepted = Some((batch, j, ens));
                    break;
                }
            }
            lr *= 0.5;
        }
        let Some((batch, j, ens)) = accepted else {
            if any_finite {
                return Ok(SolveStatus::Stalled);
            }
            return Err(Error::NonConvergence(format!(
                "step diverged after {MAX_HALVINGS} halvings"
            )));
        };
        let next = problem.evaluate(batch, j, ens)?;
        let stalled = stall.record(cur.cost, next.cost);
        *cur = next;
        history.push(cur.cost);
        if stalled {
            return Ok(SolveStatus::Stalled);
        }
    }
    Ok(if gradient_converged(cur, config.convergence_tol) {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIters
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlBox, Discretization, MeanFieldModel};
    use crate::linalg::relative_error;
    use crate::lq::{riccati_optimal_cost, riccati_solve, LqParams};
    use proptest::prelude::*;
    use std::sync::Arc;

    /// Nonlinear test model (Euler form):
    /// `f = sin(x) + 0.5 m + u + 0.3 mu^2`,
    /// `l = x^2 m^2 / 10 + u^4 + (u - mu)^2`, `psi = x^2 + x m`.
    #[derive(Debug)]
    struct Wobbly;

    impl MeanFieldModel for Wobbly {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn drift(&self, _t: f64, a: &StepArgs<'_>, out: &mut [f64]) {
            out[0] = a.x[0].sin() + 0.5 * a.mean_x[0] + a.u[0] + 0.3 * a.mean_u[0] * a.mean_u[0];
        }
        fn drift_vjp(&self, _t: f64, a: &StepArgs<'_>, c: &[f64], g: &mut ArgGrads) {
            g.x[0] += a.x[0].cos() * c[0];
            g.mean_x[0] += 0.5 * c[0];
            g.u[0] += c[0];
            g.mean_u[0] += 0.6 * a.mean_u[0] * c[0];
        }
        fn running_cost(&self, _t: f64, a: &StepArgs<'_>) -> f64 {
            let (x, m, u, mu) = (a.x[0], a.mean_x[0], a.u[0], a.mean_u[0]);
            x * x * m * m / 10.0 + u.powi(4) + (u - mu) * (u - mu)
        }
        fn running_cost_grad(&self, _t: f64, a: &StepArgs<'_>, s: f64, g: &mut ArgGrads) {
            let (x, m, u, mu) = (a.x[0], a.mean_x[0], a.u[0], a.mean_u[0]);
            g.x[0] += s * x * m * m / 5.0;
            g.mean_x[0] += s * x * x * m / 5.0;
            g.u[0] += s * (4.0 * u.powi(3) + 2.0 * (u - mu));
            g.mean_u[0] -= s * 2.0 * (u - mu);
        }
        fn terminal_cost(&self, x: &[f64], m: &[f64]) -> f64 {
            x[0] * x[0] + x[0] * m[0]
        }
        fn terminal_cost_grad(&self, x: &[f64], m: &[f64], s: f64, gx: &mut [f64], gm: &mut [f64]) {
            gx[0] += s * (2.0 * x[0] + m[0]);
            gm[0] += s * x[0];
        }
    }

    fn lq(sigma: f64, steps: usize) -> (ProblemSpec, TimeGrid) {
        let p = LqParams {
            sigma,
            steps,
            ..LqParams::default()
        };
        (p.problem((-50.0, 50.0)).unwrap(), p.grid().unwrap())
    }

    #[test]
    fn origin_is_optimal_without_noise() {
        let (spec, grid) = lq(0.0, 15);
        let noise = NoiseTensor::zeros(4, 15, 1);
        let out = solve_pcd(&spec, &grid, &[0.0; 4], &noise, &OptimizerConfig::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Converged);
        assert_eq!(out.achieved_cost, 0.0);
        assert!(out.controls.controls().iter().all(|u| *u == 0.0));
    }

    #[test]
    fn one_step_mean_and_deviation_gains() {
        let (spec, grid) = lq(0.0, 1);
        let y = 4.0;
        let noise = NoiseTensor::zeros(1, 1, 1);
        let single = solve_pcd(&spec, &grid, &[y], &noise, &OptimizerConfig::default()).unwrap();
        assert!((single.controls.control(0, 0)[0] + 9.0 / 19.0 * y).abs() < 1e-8);

        let noise = NoiseTensor::zeros(2, 1, 1);
        let pair = solve_pcd(&spec, &grid, &[y, -y], &noise, &OptimizerConfig::default()).unwrap();
        assert!((pair.controls.control(0, 0)[0] + 2.0 / 11.0 * y).abs() < 1e-8);
        assert!((pair.controls.control(1, 0)[0] - 2.0 / 11.0 * y).abs() < 1e-8);
    }

    #[test]
    fn single_sample_adjoint_is_classical_costate() {
        let (spec, grid) = lq(1.0, 5);
        let noise = NoiseTensor::sample(1, &grid, 1, 8);
        let u = ControlBatch::new(1, 5, 1, vec![0.3, -1.0, 2.0, 0.1, -0.4]).unwrap();
        let g = cost_gradient(&spec, &grid, &u, &[2.5], &noise, GradientMethod::Adjoint).unwrap();
        // with one sample x = E[x]: x+ = 3x + 3u + B, cost 20 x^2 + 200 u^2
        let ens = rollout_ensemble(&spec, &grid, &[2.5], &u, &noise).unwrap();
        let mut lam = 2.0 * 20.0 * ens.state(0, 5)[0];
        let mut expect = vec![0.0; 5];
        for k in (0..5).rev() {
            expect[k] = 2.0 * 200.0 * u.control(0, k)[0] + 3.0 * lam;
            lam = 2.0 * 20.0 * ens.state(0, k)[0] + 3.0 * lam;
        }
        assert!(relative_error(&g, &expect) < 1e-13, "{g:?} vs {expect:?}");
    }

    #[test]
    fn lq_solution_is_near_riccati_oracle() {
        let p = LqParams::default();
        let (spec, grid) = (p.problem((-50.0, 50.0)).unwrap(), p.grid().unwrap());
        let x0 = spec.sample_initial_states(20, 1);
        let noise = NoiseTensor::sample(20, &grid, 1, 2);
        let out = solve_pcd(&spec, &grid, &x0, &noise, &OptimizerConfig::default()).unwrap();
        let oracle = riccati_optimal_cost(&riccati_solve(&p).unwrap(), &x0);
        let gap = (out.achieved_cost - oracle) / oracle;
        assert!(gap.abs() < 0.01, "gap {gap}");
        assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
        // the stored ensemble is the rollout of the stored controls
        let again = rollout_ensemble(&spec, &grid, &x0, &out.controls, &noise).unwrap();
        assert_eq!(again.states(), out.ensemble.states());
    }

    #[test]
    fn adam_also_descends() {
        let (spec, grid) = lq(1.0, 4);
        let x0 = [1.0, -2.0, 0.5];
        let noise = NoiseTensor::sample(3, &grid, 1, 3);
        let cfg = OptimizerConfig {
            update: UpdateRule::Adam,
            learning_rate: 0.05,
            max_iters: 400,
            ..OptimizerConfig::default()
        };
        let adam = solve_pcd(&spec, &grid, &x0, &noise, &cfg).unwrap();
        let lbfgs = solve_pcd(&spec, &grid, &x0, &noise, &OptimizerConfig::default()).unwrap();
        assert!(adam.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(adam.achieved_cost < adam.cost_history[0]);
        assert!(lbfgs.achieved_cost <= adam.achieved_cost * (1.0 + 1e-9));
    }

    #[test]
    fn control_box_is_respected() {
        let (spec, grid) = lq(0.0, 6);
        let spec = spec.with_control_bound(ControlBox { lo: -0.1, hi: 0.1 }).unwrap();
        let noise = NoiseTensor::zeros(2, 6, 1);
        let out = solve_pcd(&spec, &grid, &[1.0, 0.5], &noise, &OptimizerConfig::default()).unwrap();
        assert!(out.controls.controls().iter().all(|u| (-0.1..=0.1).contains(u)));
        assert!(out.controls.controls().iter().any(|u| *u == -0.1));
    }

    #[test]
    fn diverging_start_is_nonconvergence() {
        let (spec, grid) = lq(0.0, 15);
        let spec = spec.with_divergence_threshold(10.0).unwrap();
        let noise = NoiseTensor::zeros(1, 15, 1);
        let err = solve_pcd(&spec, &grid, &[5.0], &noise, &OptimizerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonConvergence(_)), "{err}");
    }

    #[test]
    fn batch_converts_to_records() {
        let (spec, grid) = lq(1.0, 3);
        let noise = NoiseTensor::sample(2, &grid, 1, 1);
        let out = solve_pcd(&spec, &grid, &[1.0, 2.0], &noise, &OptimizerConfig::default()).unwrap();
        let data = out.to_dataset(Provenance::Base, 7);
        assert_eq!(data.len(), 6);
        let r = 1 * 3 + 2;
        assert_eq!(data.input(r), &[out.ensemble.state(1, 2)[0], out.ensemble.mean_state(2)[0], noise.increment(1, 2)[0]]);
        assert_eq!(data.target(r), &[out.controls.control(1, 2)[0], out.controls.mean(2)[0]]);
        assert_eq!(data.meta(r).group, 7);
    }

    fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, u64, bool)> {
        (1usize..=5, 1usize..=6, any::<u64>(), any::<bool>()).prop_flat_map(|(n, steps, seed, nonlinear)| {
            (
                Just(n),
                Just(steps),
                proptest::collection::vec(-1.0..1.0f64, n),
                proptest::collection::vec(-1.0..1.0f64, n * steps),
                Just(seed),
                Just(nonlinear),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn adjoint_matches_central_differences((n, steps, x0, u, seed, nonlinear) in instance()) {
            let (spec, grid) = if nonlinear {
                (
                    ProblemSpec::new(Arc::new(Wobbly), 0.5, Discretization::Euler).unwrap(),
                    TimeGrid::new(0.5, steps).unwrap(),
                )
            } else {
                lq(1.0, steps)
            };
            let noise = NoiseTensor::sample(n, &grid, 1, seed);
            let batch = ControlBatch::new(n, steps, 1, u).unwrap();
            let adj = cost_gradient(&spec, &grid, &batch, &x0, &noise, GradientMethod::Adjoint).unwrap();
            let fd = cost_gradient(&spec, &grid, &batch, &x0, &noise, GradientMethod::FiniteDiff).unwrap();
            let err = relative_error(&adj, &fd);
            prop_assert!(err < 1e-5, "relative error {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn permuting_samples_permutes_controls(
            x0 in proptest::collection::vec(-20.0..20.0f64, 2..6),
            seed in any::<u64>(),
            rot in 1usize..5,
        ) {
            let (spec, grid) = lq(1.0, 6);
            let n = x0.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let noise = NoiseTensor::sample(n, &grid, 1, seed);
            let px0: Vec<f64> = perm.iter().map(|&i| x0[i]).collect();
            let pnoise = noise.permuted(&perm);
            let cfg = OptimizerConfig::default();
            let a = solve_pcd(&spec, &grid, &x0, &noise, &cfg).unwrap();
            let b = solve_pcd(&spec, &grid, &px0, &pnoise, &cfg).unwrap();
            prop_assert!((a.achieved_cost - b.achieved_cost).abs() <= 1e-8 * a.achieved_cost.abs().max(1.0));
            let scale = norm_inf(a.controls.controls()).max(1e-3);
            for (new_i, &old_i) in perm.iter().enumerate() {
                for k in 0..6 {
                    let d = (a.controls.control(old_i, k)[0] - b.controls.control(new_i, k)[0]).abs();
                    prop_assert!(d <= 1e-5 * scale, "sample {old_i} step {k}: {d}");
                }
            }
        }
    }
}
