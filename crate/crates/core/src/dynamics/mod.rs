//! Discretized mean-field-type problem and ensemble simulation.
//!
//! An ensemble of `N` trajectories is coupled through the empirical means of
//! states and controls, recomputed at every step before stepping. Noise is
//! pre-sampled into a [`NoiseTensor`] so that, for fixed seeds, rollouts and
//! costs are deterministic functions of initial states and controls.

mod model;

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{masked_mean, pairwise_sum};
use crate::rng::{self, domain};

pub use model::{
    ArgGrads, InitialLaw, LqModel, MeanFieldModel, PointMass, StepArgs, UniformBox,
};

/// Default magnitude beyond which a state counts as diverged.
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Uniform time grid `t_k = k * dt`, `k = 0..steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon", "must be positive and finite"));
        }
        if steps == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    /// Grid with a given step size; the horizon is `dt * steps`.
    pub fn with_step(dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", "must be positive and finite"));
        }
        Self::new(dt * steps as f64, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// How the drift map enters the state update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// `x+ = x + f dt + sigma B`, running cost weighted by `dt`.
    Euler,
    /// `x+ = f + sigma B`: the drift is the discrete map itself and the
    /// running cost already includes the step length.
    Direct,
}

/// Box constraint on controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lo: f64,
    pub hi: f64,
}

impl ControlBox {
    pub fn project(&self, u: &mut [f64]) {
        for v in u {
            *v = v.clamp(self.lo, self.hi);
        }
    }
}

/// A discretized mean-field-type control problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    model: Arc<dyn MeanFieldModel>,
    initial_law: Arc<dyn InitialLaw>,
    pub noise_scale: f64,
    pub discretization: Discretization,
    pub control_bound: Option<ControlBox>,
    pub divergence_threshold: f64,
}

impl ProblemSpec {
    pub fn new(
        model: Arc<dyn MeanFieldModel>,
        noise_scale: f64,
        discretization: Discretization,
    ) -> Result<Self> {
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::invalid("noise_scale", "must be finite and >= 0"));
        }
        let d = model.state_dim();
        if d == 0 || model.control_dim() == 0 {
            return Err(Error::invalid("model", "state and control dimensions must be >= 1"));
        }
        Ok(Self {
            model,
            initial_law: Arc::new(PointMass(vec![0.0; d])),
            noise_scale,
            discretization,
            control_bound: None,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
        })
    }

    pub fn with_initial_law(mut self, law: Arc<dyn InitialLaw>) -> Result<Self> {
        ensure_dim("initial law", self.state_dim(), law.dim())?;
        self.initial_law = law;
        Ok(self)
    }

    pub fn with_control_bound(mut self, bound: ControlBox) -> Result<Self> {
        if !(bound.lo <= bound.hi) {
            return Err(Error::invalid("control_bound", "lo must not exceed hi"));
        }
        self.control_bound = Some(bound);
        Ok(self)
    }

    pub fn with_divergence_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::invalid("divergence_threshold", "must be positive"));
        }
        self.divergence_threshold = threshold;
        Ok(self)
    }

    pub fn with_noise_scale(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("noise_scale", "must be finite and >= 0"));
        }
        self.noise_scale = sigma;
        Ok(self)
    }

    pub fn model(&self) -> &dyn MeanFieldModel {
        self.model.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    /// Factor applied to the running cost in the sample-average objective.
    pub fn running_weight(&self, grid: &TimeGrid) -> f64 {
        match self.discretization {
            Discretization::Euler => grid.dt(),
            Discretization::Direct => 1.0,
        }
    }

    /// Whether a state is beyond the divergence threshold or non-finite.
    pub fn is_diverged(&self, x: &[f64]) -> bool {
        x.iter()
            .any(|v| !v.is_finite() || v.abs() > self.divergence_threshold)
    }

    /// Draws `n` initial states from the initial law, `(n x d)` row-major.
    pub fn sample_initial_states(&self, n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .flat_map(|i| {
                let mut rng = rng::keyed(seed, domain::INITIAL_STATE, i as u64);
                self.initial_law.sample(&mut rng)
            })
            .collect()
    }
}

/// Result of a single state update.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next: Vec<f64>,
    pub diverged: bool,
}

/// Next state of one sample from grid point `k`. Non-finite or oversized
/// results are flagged as diverged rather than raised as errors.
pub fn step(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    k: usize,
    args: &StepArgs<'_>,
    noise: &[f64],
) -> Result<Step> {
    let d = spec.state_dim();
    let m = spec.control_dim();
    ensure_dim("step x", d, args.x.len())?;
    ensure_dim("step mean_x", d, args.mean_x.len())?;
    ensure_dim("step u", m, args.u.len())?;
    ensure_dim("step mean_u", m, args.mean_u.len())?;
    ensure_dim("step noise", d, noise.len())?;
    if k >= grid.steps() {
        return Err(Error::invalid("k", format!("step index {k} is off the grid")));
    }
    let mut next = vec![0.0; d];
    let diverged = step_into(spec, grid, k, args, noise, &mut next);
    Ok(Step { next, diverged })
}

/// Unchecked [`step`] writing into `out`; returns the divergence flag.
pub(crate) fn step_into(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    k: usize,
    args: &StepArgs<'_>,
    noise: &[f64],
    out: &mut [f64],
) -> bool {
    spec.model.drift(grid.t(k), args, out);
    let sigma = spec.noise_scale;
    match spec.discretization {
        Discretization::Euler => {
            let dt = grid.dt();
            for ((o, x), b) in out.iter_mut().zip(args.x).zip(noise) {
                *o = x + *o * dt + sigma * b;
            }
        }
        Discretization::Direct => {
            for (o, b) in out.iter_mut().zip(noise) {
                *o += sigma * b;
            }
        }
    }
    spec.is_diverged(out)
}

/// Reverse-mode counterpart of [`step_into`]: accumulates the pullback of
/// `cotangent` (w.r.t. the next state) into the four argument slots.
pub(crate) fn step_vjp(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    k: usize,
    args: &StepArgs<'_>,
    cotangent: &[f64],
    grads: &mut ArgGrads,
) {
    match spec.discretization {
        Discretization::Euler => {
            let dt = grid.dt();
            for (g, c) in grads.x.iter_mut().zip(cotangent) {
                *g += c;
            }
            let scaled: Vec<f64> = cotangent.iter().map(|c| c * dt).collect();
            spec.model.drift_vjp(grid.t(k), args, &scaled, grads);
        }
        Discretization::Direct => spec.model.drift_vjp(grid.t(k), args, cotangent, grads),
    }
}

/// Pre-sampled Brownian increments `B[i][k]`, each coordinate `N(0, dt)`.
///
/// Sample `i` draws from its own keyed stream, so the tensor for a seed is
/// bit-identical whatever the sample count or thread schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor {
    n: usize,
    steps: usize,
    dim: usize,
    seed: u64,
    data: Vec<f64>,
}

impl NoiseTensor {
    pub fn sample(n: usize, grid: &TimeGrid, dim: usize, seed: u64) -> Self {
        let steps = grid.steps();
        let sd = grid.dt().sqrt();
        let mut data = Vec::with_capacity(n * steps * dim);
        for i in 0..n {
            let mut rng = rng::keyed(seed, domain::NOISE, i as u64);
            for _ in 0..steps * dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(sd * z);
            }
        }
        Self {
            n,
            steps,
            dim,
            seed,
            data,
        }
    }

    pub fn zeros(n: usize, steps: usize, dim: usize) -> Self {
        Self {
            n,
            steps,
            dim,
            seed: 0,
            data: vec![0.0; n * steps * dim],
        }
    }

    pub fn from_raw(n: usize, steps: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dim("noise data", n * steps * dim, data.len())?;
        Ok(Self {
            n,
            steps,
            dim,
            seed: 0,
            data,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn increment(&self, i: usize, k: usize) -> &[f64] {
        let o = (i * self.steps + k) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// Rows `perm[0], perm[1], ...` of this tensor.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let row = self.steps * self.dim;
        let data = perm
            .iter()
            .flat_map(|&i| self.data[i * row..(i + 1) * row].iter().copied())
            .collect();
        Self {
            n: perm.len(),
            steps: self.steps,
            dim: self.dim,
            seed: self.seed,
            data,
        }
    }
}

/// Controls `u[i][k]` for `N` samples over `N_T` steps with their per-step means.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBatch {
    n: usize,
    steps: usize,
    dim: usize,
    controls: Vec<f64>,
    means: Vec<f64>,
}

impl ControlBatch {
    pub fn new(n: usize, steps: usize, dim: usize, controls: Vec<f64>) -> Result<Self> {
        ensure_dim("control data", n * steps * dim, controls.len())?;
        let mut batch = Self {
            n,
            steps,
            dim,
            controls,
            means: vec![0.0; steps * dim],
        };
        batch.refresh_means();
        Ok(batch)
    }

    pub fn zeros(n: usize, steps: usize, dim: usize) -> Self {
        Self::new(n, steps, dim, vec![0.0; n * steps * dim]).expect("consistent extents")
    }

    fn refresh_means(&mut self) {
        let active = vec![true; self.n];
        let mut slice = vec![0.0; self.n * self.dim];
        let mut out = vec![0.0; self.dim];
        for k in 0..self.steps {
            for i in 0..self.n {
                slice[i * self.dim..(i + 1) * self.dim].copy_from_slice(self.control(i, k));
            }
            masked_mean(&slice, self.dim, &active, &mut out);
            self.means[k * self.dim..(k + 1) * self.dim].copy_from_slice(&out);
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn control(&self, i: usize, k: usize) -> &[f64] {
        let o = (i * self.steps + k) * self.dim;
        &self.controls[o..o + self.dim]
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn into_controls(self) -> Vec<f64> {
        self.controls
    }
}

/// `N` trajectories over `N_T + 1` grid points with their empirical means.
///
/// A trajectory that diverges keeps the first offending value (when finite)
/// and holds NaN afterwards; from that step on it is excluded from all means.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    n: usize,
    steps: usize,
    dim: usize,
    control_dim: usize,
    states: Vec<f64>,
    mean_states: Vec<f64>,
    mean_controls: Vec<f64>,
    diverged_at: Vec<Option<usize>>,
}

impl Ensemble {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// All states, `(N x (N_T+1) x d)` row-major.
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Means `mu_x(t_k)`, `((N_T+1) x d)`.
    pub fn mean_states(&self) -> &[f64] {
        &self.mean_states
    }

    /// Means of the controls actually applied (over surviving samples).
    pub fn mean_controls(&self) -> &[f64] {
        &self.mean_controls
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let o = (i * (self.steps + 1) + k) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn mean_state(&self, k: usize) -> &[f64] {
        &self.mean_states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn mean_control(&self, k: usize) -> &[f64] {
        &self.mean_controls[k * self.control_dim..(k + 1) * self.control_dim]
    }

    /// Grid index at which each trajectory first diverged.
    pub fn diverged_at(&self) -> &[Option<usize>] {
        &self.diverged_at
    }

    pub fn any_diverged(&self) -> bool {
        self.diverged_at.iter().any(Option::is_some)
    }

    /// Whether sample `i` is still active (not diverged) at grid index `k`.
    pub fn is_active(&self, i: usize, k: usize) -> bool {
        self.diverged_at[i].is_none_or(|d| k < d)
    }
}

fn check_rollout_inputs(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    initial_states: &[f64],
    controls: &ControlBatch,
    noise: &NoiseTensor,
) -> Result<usize> {
    let d = spec.state_dim();
    if initial_states.len() % d != 0 {
        return Err(Error::dim("initial states", d, initial_states.len() % d));
    }
    let n = initial_states.len() / d;
    ensure_dim("control samples", n, controls.n())?;
    ensure_dim("control steps", grid.steps(), controls.steps())?;
    ensure_dim("control dim", spec.control_dim(), controls.dim())?;
    ensure_dim("noise samples", n, noise.n())?;
    ensure_dim("noise steps", grid.steps(), noise.steps())?;
    ensure_dim("noise dim", d, noise.dim())?;
    if initial_states.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial_states", "must be finite"));
    }
    Ok(n)
}

/// Simulates the coupled ensemble: at each step the means of surviving
/// states and controls are recomputed, then every surviving sample steps.
pub fn rollout_ensemble(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    initial_states: &[f64],
    controls: &ControlBatch,
    noise: &NoiseTensor,
) -> Result<Ensemble> {
    let n = check_rollout_inputs(spec, grid, initial_states, controls, noise)?;
    let d = spec.state_dim();
    let m = spec.control_dim();
    let steps = grid.steps();
    let stride = (steps + 1) * d;

    let mut states = vec![f64::NAN; n * stride];
    for i in 0..n {
        states[i * stride..i * stride + d].copy_from_slice(&initial_states[i * d..(i + 1) * d]);
    }
    let mut mean_states = vec![f64::NAN; (steps + 1) * d];
    let mut mean_controls = vec![f64::NAN; steps * m];
    let mut diverged_at = vec![None; n];
    let mut active = vec![true; n];

    let mut x_k = vec![0.0; n * d];
    let mut u_k = vec![0.0; n * m];
    let mut next = vec![0.0; d];
    for k in 0..steps {
        for i in 0..n {
            x_k[i * d..(i + 1) * d].copy_from_slice(&states[i * stride + k * d..i * stride + (k + 1) * d]);
            u_k[i * m..(i + 1) * m].copy_from_slice(controls.control(i, k));
        }
        let (mx, mu) = (
            &mut mean_states[k * d..(k + 1) * d],
            &mut mean_controls[k * m..(k + 1) * m],
        );
        masked_mean(&x_k, d, &active, mx);
        masked_mean(&u_k, m, &active, mu);
        let (mx, mu) = (mx.to_vec(), mu.to_vec());
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let args = StepArgs {
                x: &x_k[i * d..(i + 1) * d],
                mean_x: &mx,
                u: &u_k[i * m..(i + 1) * m],
                mean_u: &mu,
            };
            let diverged = step_into(spec, grid, k, &args, noise.increment(i, k), &mut next);
            let o = i * stride + (k + 1) * d;
            if diverged {
                active[i] = false;
                diverged_at[i] = Some(k + 1);
                for (s, v) in states[o..o + d].iter_mut().zip(&next) {
                    *s = if v.is_finite() { *v } else { f64::NAN };
                }
            } else {
                states[o..o + d].copy_from_slice(&next);
            }
        }
    }
    for i in 0..n {
        x_k[i * d..(i + 1) * d].copy_from_slice(&states[i * stride + steps * d..(i + 1) * stride]);
    }
    masked_mean(&x_k, d, &active, &mut mean_states[steps * d..]);

    Ok(Ensemble {
        n,
        steps,
        dim: d,
        control_dim: m,
        states,
        mean_states,
        mean_controls,
        diverged_at,
    })
}

/// Sample-average cost
/// `(1/N) sum_i [ sum_k w * l(t_k, x_i, mu_x, u_i, mu_u) + psi(x_i(T), mu_x(T)) ]`
/// with `w = dt` (Euler) or `1` (direct).
///
/// Any diverged trajectory or non-finite value yields [`Error::DivergedCost`].
pub fn empirical_cost(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    ensemble: &Ensemble,
    controls: &ControlBatch,
) -> Result<f64> {
    ensure_dim("cost samples", ensemble.n(), controls.n())?;
    ensure_dim("cost steps", ensemble.steps(), controls.steps())?;
    if ensemble.any_diverged() {
        return Err(Error::DivergedCost);
    }
    let w = spec.running_weight(grid);
    let model = spec.model();
    let per_sample: Vec<f64> = (0..ensemble.n())
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..grid.steps() {
                let args = StepArgs {
                    x: ensemble.state(i, k),
                    mean_x: ensemble.mean_state(k),
                    u: controls.control(i, k),
                    mean_u: ensemble.mean_control(k),
                };
                acc += w * model.running_cost(grid.t(k), &args);
            }
            acc + model.terminal_cost(
                ensemble.state(i, grid.steps()),
                ensemble.mean_state(grid.steps()),
            )
        })
        .collect();
    let cost = pairwise_sum(&per_sample) / ensemble.n() as f64;
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(Error::DivergedCost)
    }
}

/// Deterministic recursion for `E[x(t_k)]` under mean controls, valid for
/// drifts affine in `(x, mean_x, u, mean_u)`: steps the mean with
/// `x = mean_x`, `u = mean_u` and zero noise. Returns `((N_T+1) x d)`.
pub fn propagate_mean(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    mean_x0: &[f64],
    mean_controls: &[f64],
) -> Result<Vec<f64>> {
    let d = spec.state_dim();
    let m = spec.control_dim();
    let steps = grid.steps();
    ensure_dim("mean initial state", d, mean_x0.len())?;
    ensure_dim("mean controls", steps * m, mean_controls.len())?;
    let zero = vec![0.0; d];
    let mut path = Vec::with_capacity((steps + 1) * d);
    path.extend_from_slice(mean_x0);
    let mut next = vec![0.0; d];
    for k in 0..steps {
        let cur = path[k * d..(k + 1) * d].to_vec();
        let u = &mean_controls[k * m..(k + 1) * m];
        let args = StepArgs {
            x: &cur,
            mean_x: &cur,
            u,
            mean_u: u,
        };
        step_into(spec, grid, k, &args, &zero, &mut next);
        path.extend_from_slice(&next);
    }
    Ok(path)
}

#[cfg(test)]
mod tests;
