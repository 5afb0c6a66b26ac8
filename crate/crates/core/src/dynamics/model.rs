use std::fmt::Debug;

use crate::linalg::Mat;
use crate::rng::StreamRng;
use rand::Rng;

/// Arguments of the drift and running cost at one `(sample, step)`.
#[derive(Debug, Clone, Copy)]
pub struct StepArgs<'a> {
    pub x: &'a [f64],
    pub mean_x: &'a [f64],
    pub u: &'a [f64],
    pub mean_u: &'a [f64],
}

/// Gradient accumulators matching the four slots of [`StepArgs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArgGrads {
    pub x: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub u: Vec<f64>,
    pub mean_u: Vec<f64>,
}

impl ArgGrads {
    pub fn zeros(state_dim: usize, control_dim: usize) -> Self {
        Self {
            x: vec![0.0; state_dim],
            mean_x: vec![0.0; state_dim],
            u: vec![0.0; control_dim],
            mean_u: vec![0.0; control_dim],
        }
    }

    pub fn clear(&mut self) {
        for v in [&mut self.x, &mut self.mean_x, &mut self.u, &mut self.mean_u] {
            v.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Drift, running cost and terminal cost of a mean-field-type problem,
/// together with their reverse-mode derivatives.
///
/// All `*_vjp` / `*_grad` methods accumulate (`+=`) into their outputs.
/// Implementations must be pure: evaluating never mutates state.
pub trait MeanFieldModel: Send + Sync + Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn drift(&self, t: f64, args: &StepArgs<'_>, out: &mut [f64]);

    /// Accumulates `J^T cotangent` for the Jacobian of the drift w.r.t. each slot.
    fn drift_vjp(&self, t: f64, args: &StepArgs<'_>, cotangent: &[f64], grads: &mut ArgGrads);

    fn running_cost(&self, t: f64, args: &StepArgs<'_>) -> f64;

    /// Accumulates `scale * grad(running_cost)`.
    fn running_cost_grad(&self, t: f64, args: &StepArgs<'_>, scale: f64, grads: &mut ArgGrads);

    fn terminal_cost(&self, x: &[f64], mean_x: &[f64]) -> f64;

    /// Accumulates `scale * grad(terminal_cost)` into `gx`, `gmean_x`.
    fn terminal_cost_grad(
        &self,
        x: &[f64],
        mean_x: &[f64],
        scale: f64,
        gx: &mut [f64],
        gmean_x: &mut [f64],
    );

    /// Whether the drift is affine in `(x, mean_x, u, mean_u)`.
    fn is_affine(&self) -> bool {
        false
    }
}

/// Linear dynamics with quadratic state, control and deviation penalties:
///
/// ```text
/// f   = A1 x + A2 E[x] + B1 u + B2 E[u]
/// l   = x'Q1x + u'R1u + (x-E[x])'Q2(x-E[x]) + (u-E[u])'R2(u-E[u])
/// psi = x'T1x + (x-E[x])'T2(x-E[x])
/// ```
#[derive(Debug, Clone)]
pub struct LqModel {
    pub a1: Mat,
    pub a2: Mat,
    pub b1: Mat,
    pub b2: Mat,
    pub q1: Mat,
    pub q2: Mat,
    pub r1: Mat,
    pub r2: Mat,
    pub terminal_q1: Mat,
    pub terminal_q2: Mat,
}

impl LqModel {
    /// Scalar model with terminal weights equal to the running state weights.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(a1: f64, a2: f64, b1: f64, b2: f64, q1: f64, q2: f64, r1: f64, r2: f64) -> Self {
        Self {
            a1: Mat::scalar(a1),
            a2: Mat::scalar(a2),
            b1: Mat::scalar(b1),
            b2: Mat::scalar(b2),
            q1: Mat::scalar(q1),
            q2: Mat::scalar(q2),
            r1: Mat::scalar(r1),
            r2: Mat::scalar(r2),
            terminal_q1: Mat::scalar(q1),
            terminal_q2: Mat::scalar(q2),
        }
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

impl MeanFieldModel for LqModel {
    fn state_dim(&self) -> usize {
        self.a1.rows()
    }

    fn control_dim(&self) -> usize {
        self.b1.cols()
    }

    fn drift(&self, _t: f64, args: &StepArgs<'_>, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.a1.mul_vec_acc(args.x, out);
        self.a2.mul_vec_acc(args.mean_x, out);
        self.b1.mul_vec_acc(args.u, out);
        self.b2.mul_vec_acc(args.mean_u, out);
    }

    fn drift_vjp(&self, _t: f64, _args: &StepArgs<'_>, cot: &[f64], grads: &mut ArgGrads) {
        self.a1.mul_t_vec_acc(cot, 1.0, &mut grads.x);
        self.a2.mul_t_vec_acc(cot, 1.0, &mut grads.mean_x);
        self.b1.mul_t_vec_acc(cot, 1.0, &mut grads.u);
        self.b2.mul_t_vec_acc(cot, 1.0, &mut grads.mean_u);
    }

    fn running_cost(&self, _t: f64, args: &StepArgs<'_>) -> f64 {
        let dx = diff(args.x, args.mean_x);
        let du = diff(args.u, args.mean_u);
        self.q1.quad(args.x) + self.r1.quad(args.u) + self.q2.quad(&dx) + self.r2.quad(&du)
    }

    fn running_cost_grad(&self, _t: f64, args: &StepArgs<'_>, scale: f64, g: &mut ArgGrads) {
        let dx = diff(args.x, args.mean_x);
        let du = diff(args.u, args.mean_u);
        self.q1.quad_grad_acc(args.x, scale, &mut g.x);
        self.q2.quad_grad_acc(&dx, scale, &mut g.x);
        self.q2.quad_grad_acc(&dx, -scale, &mut g.mean_x);
        self.r1.quad_grad_acc(args.u, scale, &mut g.u);
        self.r2.quad_grad_acc(&du, scale, &mut g.u);
        self.r2.quad_grad_acc(&du, -scale, &mut g.mean_u);
    }

    fn terminal_cost(&self, x: &[f64], mean_x: &[f64]) -> f64 {
        self.terminal_q1.quad(x) + self.terminal_q2.quad(&diff(x, mean_x))
    }

    fn terminal_cost_grad(
        &self,
        x: &[f64],
        mean_x: &[f64],
        scale: f64,
        gx: &mut [f64],
        gmean_x: &mut [f64],
    ) {
        let dx = diff(x, mean_x);
        self.terminal_q1.quad_grad_acc(x, scale, gx);
        self.terminal_q2.quad_grad_acc(&dx, scale, gx);
        self.terminal_q2.quad_grad_acc(&dx, -scale, gmean_x);
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// Law of the initial state.
pub trait InitialLaw: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut StreamRng) -> Vec<f64>;
}

/// Uniform law on an axis-aligned box.
#[derive(Debug, Clone)]
pub struct UniformBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InitialLaw for UniformBox {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| l + (h - l) * rng.random::<f64>())
            .collect()
    }
}

/// Deterministic initial state.
#[derive(Debug, Clone)]
pub struct PointMass(pub Vec<f64>);

impl InitialLaw for PointMass {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, _rng: &mut StreamRng) -> Vec<f64> {
        self.0.clone()
    }
}
