//! The scalar linear-quadratic mean-field benchmark.
//!
//! Dynamics `x+ = a1 x + a2 E[x] + b1 u + b2 E[u] + sigma B` with per-step
//! cost `q1 x^2 + q2 (x - E[x])^2 + r1 u^2 + r2 (u - E[u])^2` and terminal
//! cost `q1 x^2 + q2 (x - E[x])^2`. Writing `x = E[x] + y` splits the problem
//! into a deterministic mean system `(a1 + a2, b1 + b2, q1, r1)` and a
//! noise-driven deviation system `(a1, b1, q1 + q2, r1 + r2)`, each solved by
//! a scalar Riccati recursion. That solution is the oracle the optimizer and
//! the trained controllers are checked against.

pub mod benchmark;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    rollout_ensemble, step_into, ControlBatch, Discretization, Ensemble, LqModel, NoiseTensor,
    ProblemSpec, StepArgs, TimeGrid, UniformBox,
};
use crate::error::{Error, Result};
use crate::linalg::{masked_mean, pairwise_sum};
use crate::nn::{ActivationKind, LayerSpec, MlpParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqParams {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub q1: f64,
    pub q2: f64,
    pub r1: f64,
    pub r2: f64,
    pub sigma: f64,
    pub steps: usize,
    pub dt: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            a1: 2.0,
            a2: 1.0,
            b1: 1.0,
            b2: 2.0,
            q1: 20.0,
            q2: 10.0,
            r1: 200.0,
            r2: 100.0,
            sigma: 1.0,
            steps: 15,
            dt: 1.0 / 20.0,
        }
    }
}

impl LqParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.a1, self.a2, self.b1, self.b2, self.q1, self.q2, self.r1, self.r2, self.sigma,
            self.dt,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("lq_params", "all coefficients must be finite"));
        }
        for (name, v) in [("q1", self.q1), ("q2", self.q2), ("r1", self.r1), ("r2", self.r2)] {
            if v < 0.0 {
                return Err(Error::invalid(format!("lq_params.{name}"), "must be nonnegative"));
            }
        }
        if !(self.r1 + self.r2 > 0.0) {
            return Err(Error::invalid("lq_params.r1", "r1 + r2 must be positive"));
        }
        if self.sigma < 0.0 {
            return Err(Error::invalid("lq_params.sigma", "must be nonnegative"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("lq_params.dt", "must be positive"));
        }
        Ok(())
    }

    pub fn model(&self) -> LqModel {
        LqModel::scalar(
            self.a1, self.a2, self.b1, self.b2, self.q1, self.q2, self.r1, self.r2,
        )
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_step(self.dt, self.steps)
    }

    /// DIRECT-mode problem with initial law uniform on `[lo, hi]`.
    pub fn problem(&self, initial_range: (f64, f64)) -> Result<ProblemSpec> {
        self.validate()?;
        ProblemSpec::new(Arc::new(self.model()), self.sigma, Discretization::Direct)?
            .with_initial_law(Arc::new(UniformBox {
                lo: vec![initial_range.0],
                hi: vec![initial_range.1],
            }))
    }
}

/// Value coefficients and gains of the two scalar subsystems.
///
/// `mean_p[k]`, `dev_p[k]` for `k = 0..=N_T`; gains and noise constants for
/// `k = 0..N_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub mean_p: Vec<f64>,
    pub mean_gain: Vec<f64>,
    pub dev_p: Vec<f64>,
    pub dev_gain: Vec<f64>,
    pub noise_const: Vec<f64>,
}

fn scalar_riccati(a: f64, b: f64, q: f64, r: f64, terminal: f64, steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p = vec![0.0; steps + 1];
    let mut gain = vec![0.0; steps];
    p[steps] = terminal;
    for k in (0..steps).rev() {
        let next = p[k + 1];
        let denom = r + b * b * next;
        if !(denom > 0.0) {
            return Err(Error::IllPosed {
                step: k,
                denominator: denom,
            });
        }
        p[k] = q + a * a * next - a * a * b * b * next * next / denom;
        gain[k] = a * b * next / denom;
    }
    Ok((p, gain))
}

pub fn riccati_solve(params: &LqParams) -> Result<RiccatiSolution> {
    params.validate()?;
    let n = params.steps;
    let (mean_p, mean_gain) = scalar_riccati(
        params.a1 + params.a2,
        params.b1 + params.b2,
        params.q1,
        params.r1,
        params.q1,
        n,
    )?;
    let (dev_p, dev_gain) = scalar_riccati(
        params.a1,
        params.b1,
        params.q1 + params.q2,
        params.r1 + params.r2,
        params.q1 + params.q2,
        n,
    )?;
    let s2dt = params.sigma * params.sigma * params.dt;
    let noise_const = (0..n).map(|k| s2dt * dev_p[k + 1]).collect();
    Ok(RiccatiSolution {
        mean_p,
        mean_gain,
        dev_p,
        dev_gain,
        noise_const,
    })
}

/// `P_mean(0) mean(x0)^2 + P_dev(0) var(x0) + sum_k c_k` over the empirical
/// moments (population variance) of the scalar initial states.
pub fn riccati_optimal_cost(solution: &RiccatiSolution, initial_states: &[f64]) -> f64 {
    let n = initial_states.len() as f64;
    let mean = pairwise_sum(initial_states) / n;
    let dev: Vec<f64> = initial_states.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / n;
    solution.mean_p[0] * mean * mean + solution.dev_p[0] * var + pairwise_sum(&solution.noise_const)
}

/// Rolls out `u_i = -K_mean mu_x - K_dev (x_i - mu_x)` with empirical means.
pub fn feedback_rollout(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    solution: &RiccatiSolution,
    initial_states: &[f64],
    noise: &NoiseTensor,
) -> Result<(ControlBatch, Ensemble)> {
    if spec.state_dim() != 1 || spec.control_dim() != 1 {
        return Err(Error::invalid("problem", "feedback rollout is scalar"));
    }
    if solution.mean_gain.len() != grid.steps() {
        return Err(Error::dim("Riccati gains", grid.steps(), solution.mean_gain.len()));
    }
    let n = initial_states.len();
    let steps = grid.steps();
    let mut x = initial_states.to_vec();
    let active = vec![true; n];
    let mut controls = vec![0.0; n * steps];
    let mut mu = [0.0];
    let mut next = [0.0];
    for k in 0..steps {
        masked_mean(&x, 1, &active, &mut mu);
        let u: Vec<f64> = x
            .iter()
            .map(|xi| -solution.mean_gain[k] * mu[0] - solution.dev_gain[k] * (xi - mu[0]))
            .collect();
        let ubar = [pairwise_sum(&u) / n as f64];
        for i in 0..n {
            controls[i * steps + k] = u[i];
            let args = StepArgs {
                x: &x[i..i + 1],
                mean_x: &mu,
                u: &u[i..i + 1],
                mean_u: &ubar,
            };
            step_into(spec, grid, k, &args, noise.increment(i, k), &mut next);
            x[i] = next[0];
        }
    }
    let batch = ControlBatch::new(n, steps, 1, controls)?;
    let ens = rollout_ensemble(spec, grid, initial_states, &batch, noise)?;
    Ok((batch, ens))
}

/// An NN1-shaped network implementing the saturated linear feedback
/// `u = -(km / s) tanh(s m) - (kd / s) tanh(s (x - m))`,
/// `E[u] = -(km / s) tanh(s m)`.
///
/// For small `s` this is the Riccati feedback with gains `(km, kd)` near the
/// origin, with controls bounded by `(km + kd) / s`.
pub fn saturated_feedback_controller(km: f64, kd: f64, s: f64) -> Result<MlpParams> {
    if !(s > 0.0) {
        return Err(Error::invalid("s", "must be positive"));
    }
    let layers = vec![
        LayerSpec {
            in_dim: 3,
            out_dim: 2,
            activation: ActivationKind::Linear,
        },
        LayerSpec {
            in_dim: 2,
            out_dim: 2,
            activation: ActivationKind::Tanh,
        },
        LayerSpec {
            in_dim: 2,
            out_dim: 2,
            activation: ActivationKind::Linear,
        },
    ];
    #[rustfmt::skip]
    let params = vec![
        0.0, s, 0.0,
        s, -s, 0.0,
        0.0, 0.0,
        1.0, 0.0,
        0.0, 1.0,
        0.0, 0.0,
        -km / s, -kd / s,
        -km / s, 0.0,
        0.0, 0.0,
    ];
    MlpParams::new(layers, params)
}
