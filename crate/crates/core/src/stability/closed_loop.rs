//! Closed-loop simulation with a network controller in the loop.
//!
//! At each step the controller reads `z = (x, mean_x, B_k)` and returns
//! `(u, mean_u)`, which enter the dynamics in place of the free controls.
//! The mean state is either the empirical mean of the simulated samples or a
//! deterministic companion recursion driven by the controller evaluated at
//! the mean.

use serde::{Deserialize, Serialize};

use crate::dynamics::{step_into, step_vjp, ArgGrads, NoiseTensor, ProblemSpec, StepArgs, TimeGrid};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::pairwise_sum;
use crate::nn::{MlpParams, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Mean propagated by `m+ = step(m, m, c, c)` with zero noise.
    #[default]
    Deterministic,
    /// Mean taken over the simulated samples.
    Ensemble,
}

/// Which network output stands in for the mean control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanControlSource {
    /// The network's second output.
    #[default]
    NetworkHead,
    /// The average of the first output over the population (in the
    /// deterministic mode: the first output evaluated at the mean).
    PopulationAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ClosedLoopConfig {
    pub mean_mode: MeanMode,
    pub mean_control: MeanControlSource,
}

/// Result of a closed-loop rollout of `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    n: usize,
    steps: usize,
    dim: usize,
    control_dim: usize,
    states: Vec<f64>,
    means: Vec<f64>,
    controls: Vec<f64>,
    mean_controls: Vec<f64>,
    diverged_at: Vec<Option<usize>>,
}

impl ClosedLoop {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let o = (i * (self.steps + 1) + k) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn mean_state(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    /// First network output applied to sample `i` at step `k`.
    pub fn control(&self, i: usize, k: usize) -> &[f64] {
        let o = (i * self.steps + k) * self.control_dim;
        &self.controls[o..o + self.control_dim]
    }

    /// Mean control the dynamics of sample `i` used at step `k`.
    pub fn mean_control(&self, i: usize, k: usize) -> &[f64] {
        let o = (i * self.steps + k) * self.control_dim;
        &self.mean_controls[o..o + self.control_dim]
    }

    pub fn diverged_at(&self) -> &[Option<usize>] {
        &self.diverged_at
    }

    pub fn any_diverged(&self) -> bool {
        self.diverged_at.iter().any(Option::is_some)
    }

    /// Per-sample cost; `None` for samples that diverged.
    pub fn sample_costs(&self, spec: &ProblemSpec, grid: &TimeGrid) -> Vec<Option<f64>> {
        let model = spec.model();
        let w = spec.running_weight(grid);
        (0..self.n)
            .map(|i| {
                if self.diverged_at[i].is_some() {
                    return None;
                }
                let mut parts = Vec::with_capacity(self.steps + 1);
                for k in 0..self.steps {
                    let args = StepArgs {
                        x: self.state(i, k),
                        mean_x: self.mean_state(k),
                        u: self.control(i, k),
                        mean_u: self.mean_control(i, k),
                    };
                    parts.push(w * model.running_cost(grid.t(k), &args));
                }
                parts.push(model.terminal_cost(self.state(i, self.steps), self.mean_state(self.steps)));
                let c = pairwise_sum(&parts);
                c.is_finite().then_some(c)
            })
            .collect()
    }
}

fn check(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    initial: &[f64],
    mean_x0: &[f64],
    noise: &NoiseTensor,
) -> Result<usize> {
    let d = spec.state_dim();
    let m = spec.control_dim();
    ensure_dim("controller input", 3 * d, params.input_dim())?;
    ensure_dim("controller output", 2 * m, params.output_dim())?;
    ensure_dim("initial mean", d, mean_x0.len())?;
    if initial.is_empty() || initial.len() % d != 0 {
        return Err(Error::dim("initial states", d, initial.len() % d.max(1)));
    }
    let n = initial.len() / d;
    ensure_dim("noise samples", n, noise.n())?;
    ensure_dim("noise steps", grid.steps(), noise.steps())?;
    ensure_dim("noise dimension", d, noise.dim())?;
    if initial.iter().chain(mean_x0).any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial states", "must be finite"));
    }
    Ok(n)
}

fn pack(z: &mut Vec<f64>, x: &[f64], m: &[f64], b: &[f64]) {
    z.clear();
    z.extend_from_slice(x);
    z.extend_from_slice(m);
    z.extend_from_slice(b);
}

/// Simulates `n = initial.len() / d` closed-loop samples.
///
/// In the deterministic mean mode every sample uses the companion mean path
/// started at `mean_x0`; in the ensemble mode `mean_x0` is ignored and the
/// empirical mean of the active samples is used. A sample that crosses the
/// divergence threshold is frozen at NaN from that step on; a diverging
/// deterministic mean path marks every active sample as diverged.
pub fn closed_loop_rollout(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    initial: &[f64],
    mean_x0: &[f64],
    noise: &NoiseTensor,
    config: ClosedLoopConfig,
) -> Result<ClosedLoop> {
    let n = check(spec, grid, params, initial, mean_x0, noise)?;
    Ok(simulate(spec, grid, params, initial, mean_x0, noise, config, n))
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    initial: &[f64],
    mean_x0: &[f64],
    noise: &NoiseTensor,
    config: ClosedLoopConfig,
    n: usize,
) -> ClosedLoop {
    let d = spec.state_dim();
    let mc = spec.control_dim();
    let steps = grid.steps();
    let mut out = ClosedLoop {
        n,
        steps,
        dim: d,
        control_dim: mc,
        states: vec![f64::NAN; n * (steps + 1) * d],
        means: vec![f64::NAN; (steps + 1) * d],
        controls: vec![f64::NAN; n * steps * mc],
        mean_controls: vec![f64::NAN; n * steps * mc],
        diverged_at: vec![None; n],
    };
    for i in 0..n {
        let o = i * (steps + 1) * d;
        out.states[o..o + d].copy_from_slice(&initial[i * d..(i + 1) * d]);
    }
    let mut tape = Tape::default();
    let mut z = Vec::with_capacity(3 * d);
    let zero = vec![0.0; d];
    let mut mean = match config.mean_mode {
        MeanMode::Deterministic => mean_x0.to_vec(),
        MeanMode::Ensemble => vec![0.0; d],
    };
    let mut outputs = vec![0.0; n * 2 * mc];
    let mut next = vec![0.0; d];
    let mut mean_next = vec![0.0; d];
    let mut common = vec![0.0; mc];

    for k in 0..=steps {
        let active: Vec<bool> = out.diverged_at.iter().map(Option::is_none).collect();
        if config.mean_mode == MeanMode::Ensemble {
            let count = active.iter().filter(|a| **a).count();
            for c in 0..d {
                let col: Vec<f64> = (0..n)
                    .filter(|&i| active[i])
                    .map(|i| out.state(i, k)[c])
                    .collect();
                mean[c] = if count == 0 { f64::NAN } else { pairwise_sum(&col) / count as f64 };
            }
        }
        out.means[k * d..(k + 1) * d].copy_from_slice(&mean);
        if k == steps || active.iter().all(|a| !a) {
            break;
        }

        for i in (0..n).filter(|&i| active[i]) {
            let xo = (i * (steps + 1) + k) * d;
            pack(&mut z, &out.states[xo..xo + d], &mean, noise.increment(i, k));
            let g = params.forward_taped(&z, &mut tape);
            outputs[i * 2 * mc..(i + 1) * 2 * mc].copy_from_slice(g);
        }

        // mean control shared by the population when it is not per-sample
        let shared = match (config.mean_mode, config.mean_control) {
            (MeanMode::Ensemble, MeanControlSource::PopulationAverage) => {
                let count = active.iter().filter(|a| **a).count() as f64;
                for c in 0..mc {
                    let col: Vec<f64> = (0..n)
                        .filter(|&i| active[i])
                        .map(|i| outputs[i * 2 * mc + c])
                        .collect();
                    common[c] = pairwise_sum(&col) / count;
                }
                true
            }
            _ => false,
        };

        for i in (0..n).filter(|&i| active[i]) {
            let g = &outputs[i * 2 * mc..(i + 1) * 2 * mc];
            let co = (i * steps + k) * mc;
            out.controls[co..co + mc].copy_from_slice(&g[..mc]);
            if shared {
                out.mean_controls[co..co + mc].copy_from_slice(&common);
            } else {
                out.mean_controls[co..co + mc].copy_from_slice(&g[mc..]);
            }
            let xo = (i * (steps + 1) + k) * d;
            let args = StepArgs {
                x: &out.states[xo..xo + d],
                mean_x: &mean,
                u: &out.controls[co..co + mc],
                mean_u: &out.mean_controls[co..co + mc],
            };
            let diverged = step_into(spec, grid, k, &args, noise.increment(i, k), &mut next);
            if diverged {
                out.diverged_at[i] = Some(k + 1);
            } else {
                out.states[xo + d..xo + 2 * d].copy_from_slice(&next);
            }
        }

        if config.mean_mode == MeanMode::Deterministic {
            pack(&mut z, &mean, &mean, &zero);
            let g = params.forward_taped(&z, &mut tape);
            let c = match config.mean_control {
                MeanControlSource::NetworkHead => &g[mc..],
                MeanControlSource::PopulationAverage => &g[..mc],
            };
            common.copy_from_slice(c);
            let args = StepArgs {
                x: &mean,
                mean_x: &mean,
                u: &common,
                mean_u: &common,
            };
            if step_into(spec, grid, k, &args, &zero, &mut mean_next) {
                for i in 0..n {
                    if out.diverged_at[i].is_none() {
                        out.diverged_at[i] = Some(k + 1);
                        let xo = (i * (steps + 1) + k + 1) * d;
                        out.states[xo..xo + d].fill(f64::NAN);
                    }
                }
                mean_next.fill(f64::NAN);
            }
            std::mem::swap(&mut mean, &mut mean_next);
        }
    }
    out
}

/// Sample-average closed-loop cost. Diverged samples contribute
/// `saturation` each.
pub fn closed_loop_cost(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    rollout: &ClosedLoop,
    saturation: f64,
) -> f64 {
    let parts: Vec<f64> = rollout
        .sample_costs(spec, grid)
        .into_iter()
        .map(|c| c.unwrap_or(saturation))
        .collect();
    pairwise_sum(&parts) / rollout.n() as f64
}

/// Gradient of the closed-loop cost w.r.t. a common initial state `y`, with
/// every sample and the initial mean set to `y`.
///
/// Returns `None` when any sample diverged (the cost is saturated there).
pub fn closed_loop_cost_gradient(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    y: &[f64],
    noise: &NoiseTensor,
    config: ClosedLoopConfig,
) -> Result<Option<(f64, Vec<f64>)>> {
    let d = spec.state_dim();
    ensure_dim("initial state", d, y.len())?;
    let n = noise.n();
    let initial: Vec<f64> = (0..n).flat_map(|_| y.iter().copied()).collect();
    check(spec, grid, params, &initial, y, noise)?;
    let roll = simulate(spec, grid, params, &initial, y, noise, config, n);
    if roll.any_diverged() {
        return Ok(None);
    }
    let cost = closed_loop_cost(spec, grid, &roll, f64::INFINITY);
    if !cost.is_finite() {
        return Ok(None);
    }
    let grad = adjoint(spec, grid, params, &roll, noise, config);
    if grad.iter().any(|g| !g.is_finite()) {
        return Ok(None);
    }
    Ok(Some((cost, grad)))
}

fn column_sum(rows: &[Vec<f64>], c: usize) -> f64 {
    let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
    pairwise_sum(&col)
}

fn adjoint(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    roll: &ClosedLoop,
    noise: &NoiseTensor,
    config: ClosedLoopConfig,
) -> Vec<f64> {
    let model = spec.model();
    let n = roll.n;
    let d = roll.dim;
    let mc = roll.control_dim;
    let steps = roll.steps;
    let inv_n = 1.0 / n as f64;
    let w = spec.running_weight(grid);
    let ensemble = config.mean_mode == MeanMode::Ensemble;
    let mut tape = Tape::default();
    let mut z = Vec::with_capacity(3 * d);
    let mut dz = vec![0.0; 3 * d];
    let mut upstream = vec![0.0; 2 * mc];
    let zero = vec![0.0; d];

    // cotangents of x_i(k) and (deterministic mode) of m(k)
    let mut lam = vec![vec![0.0; d]; n];
    let mut gm_rows = vec![vec![0.0; d]; n];
    for i in 0..n {
        model.terminal_cost_grad(
            roll.state(i, steps),
            roll.mean_state(steps),
            inv_n,
            &mut lam[i],
            &mut gm_rows[i],
        );
    }
    let mut lam_m: Vec<f64> = (0..d).map(|c| column_sum(&gm_rows, c)).collect();
    if ensemble {
        for l in lam.iter_mut() {
            for c in 0..d {
                l[c] += lam_m[c] * inv_n;
            }
        }
        lam_m.fill(0.0);
    }

    let mut grads: Vec<ArgGrads> = (0..n).map(|_| ArgGrads::zeros(d, mc)).collect();
    for k in (0..steps).rev() {
        let t = grid.t(k);
        let mean = roll.mean_state(k);
        for i in 0..n {
            let g = &mut grads[i];
            g.clear();
            let args = StepArgs {
                x: roll.state(i, k),
                mean_x: mean,
                u: roll.control(i, k),
                mean_u: roll.mean_control(i, k),
            };
            step_vjp(spec, grid, k, &args, &lam[i], g);
            model.running_cost_grad(t, &args, w * inv_n, g);
        }
        let shared = ensemble && config.mean_control == MeanControlSource::PopulationAverage;
        let shared_mean_u: Vec<f64> = if shared {
            let rows: Vec<Vec<f64>> = grads.iter().map(|g| g.mean_u.clone()).collect();
            (0..mc).map(|c| column_sum(&rows, c)).collect()
        } else {
            Vec::new()
        };
        for i in 0..n {
            let g = &mut grads[i];
            if shared {
                for c in 0..mc {
                    upstream[c] = g.u[c] + shared_mean_u[c] * inv_n;
                    upstream[mc + c] = 0.0;
                }
            } else {
                upstream[..mc].copy_from_slice(&g.u);
                upstream[mc..].copy_from_slice(&g.mean_u);
            }
            pack(&mut z, roll.state(i, k), mean, noise.increment(i, k));
            params.forward_taped(&z, &mut tape);
            params.backward_taped(&mut tape, &upstream, None, Some(&mut dz));
            for c in 0..d {
                g.x[c] += dz[c];
                g.mean_x[c] += dz[d + c];
            }
        }
        let mx_rows: Vec<Vec<f64>> = grads.iter().map(|g| g.mean_x.clone()).collect();
        let sum_mx: Vec<f64> = (0..d).map(|c| column_sum(&mx_rows, c)).collect();

        if ensemble {
            for (l, g) in lam.iter_mut().zip(&grads) {
                for c in 0..d {
                    l[c] = g.x[c] + sum_mx[c] * inv_n;
                }
            }
        } else {
            // companion mean recursion m+ = step(m, m, c(m), c(m))
            pack(&mut z, mean, mean, &zero);
            let g = params.forward_taped(&z, &mut tape);
            let cm: Vec<f64> = match config.mean_control {
                MeanControlSource::NetworkHead => g[mc..].to_vec(),
                MeanControlSource::PopulationAverage => g[..mc].to_vec(),
            };
            let args = StepArgs {
                x: mean,
                mean_x: mean,
                u: &cm,
                mean_u: &cm,
            };
            let mut mg = ArgGrads::zeros(d, mc);
            step_vjp(spec, grid, k, &args, &lam_m, &mut mg);
            upstream.fill(0.0);
            let slot = match config.mean_control {
                MeanControlSource::NetworkHead => mc,
                MeanControlSource::PopulationAverage => 0,
            };
            for c in 0..mc {
                upstream[slot + c] = mg.u[c] + mg.mean_u[c];
            }
            params.backward_taped(&mut tape, &upstream, None, Some(&mut dz));
            for c in 0..d {
                lam_m[c] = mg.x[c] + mg.mean_x[c] + dz[c] + dz[d + c] + sum_mx[c];
            }
            for (l, g) in lam.iter_mut().zip(&grads) {
                l.copy_from_slice(&g.x);
            }
        }
    }
    (0..d)
        .map(|c| column_sum(&lam, c) + lam_m[c])
        .collect()
}
