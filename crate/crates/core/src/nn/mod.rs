//! Multilayer perceptron controllers.
//!
//! A network is a composition of dense layers `a -> h(W a + b)`. Parameters
//! live in one flat vector (per layer: `W` row-major, then `b`), which keeps
//! the optimizer and the gradient plumbing trivial.

mod dataset;
mod format;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::rng::{self, keyed};

pub use dataset::{Dataset, Provenance, RecordMeta};
pub use format::{parse_controller, read_controller, serialize_controller, write_controller};
pub use train::{supervised_loss, train, LossValue, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Linear,
    Tanh,
}

impl ActivationKind {
    pub fn value(self, x: f64) -> f64 {
        match self {
            ActivationKind::Linear => x,
            ActivationKind::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y = h(x)`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            ActivationKind::Linear => 1.0,
            ActivationKind::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Linear => "linear",
            ActivationKind::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "linear" | "lin" => Some(ActivationKind::Linear),
            "tanh" => Some(ActivationKind::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: ActivationKind,
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }
}

/// Affine input map `z' = (z - shift) * scale`, stored with the network so a
/// saved controller is self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / (d_in + d_out))`, zero biases.
    #[default]
    GlorotUniform,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    input_scaling: Option<InputScaling>,
}

/// Per-layer activations of one forward pass; reused across calls.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl MlpParams {
    /// Builds a network from layer specs and a flat parameter vector.
    pub fn new(layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        validate_layers(&layers)?;
        let count: usize = layers.iter().map(LayerSpec::param_count).sum();
        ensure_dim("network parameters", count, params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("params", "all entries must be finite"));
        }
        Ok(Self {
            layers,
            params,
            input_scaling: None,
        })
    }

    /// Network with dims `dims[0] -> dims[1] -> ...` and one activation per layer.
    pub fn init(
        dims: &[usize],
        activations: &[ActivationKind],
        scheme: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("dims", "need at least input and output"));
        }
        ensure_dim("activations", dims.len() - 1, activations.len())?;
        let layers: Vec<LayerSpec> = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation,
            })
            .collect();
        validate_layers(&layers)?;
        let mut params = Vec::new();
        for (j, layer) in layers.iter().enumerate() {
            let mut rng = keyed(seed, rng::domain::WEIGHT_INIT, j as u64);
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for _ in 0..layer.in_dim * layer.out_dim {
                params.push(match scheme {
                    InitScheme::GlorotUniform => rng.random_range(-limit..=limit),
                    InitScheme::Zeros => 0.0,
                });
            }
            params.extend(std::iter::repeat_n(0.0, layer.out_dim));
        }
        Self::new(layers, params)
    }

    pub fn with_input_scaling(mut self, scaling: InputScaling) -> Result<Self> {
        ensure_dim("input shift", self.input_dim(), scaling.shift.len())?;
        ensure_dim("input scale", self.input_dim(), scaling.scale.len())?;
        if scaling
            .shift
            .iter()
            .chain(&scaling.scale)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("input_scaling", "entries must be finite"));
        }
        self.input_scaling = Some(scaling);
        Ok(self)
    }

    pub fn input_scaling(&self) -> Option<&InputScaling> {
        self.input_scaling.as_ref()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Sum of layer output widths.
    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(|l| l.out_dim).sum()
    }

    /// Weight matrix (row-major `out x in`) and bias of layer `j`.
    pub fn layer_params(&self, j: usize) -> (&[f64], &[f64]) {
        let off = self.offset(j);
        let l = &self.layers[j];
        let w = l.in_dim * l.out_dim;
        (&self.params[off..off + w], &self.params[off + w..off + w + l.out_dim])
    }

    fn offset(&self, j: usize) -> usize {
        self.layers[..j].iter().map(LayerSpec::param_count).sum()
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("network input", self.input_dim(), z.len())?;
        let mut tape = Tape::default();
        Ok(self.forward_taped(z, &mut tape).to_vec())
    }

    /// Forward pass recording activations. Panics on a wrong input length;
    /// [`forward`](Self::forward) is the checked entry point.
    pub fn forward_taped<'t>(&self, z: &[f64], tape: &'t mut Tape) -> &'t [f64] {
        assert_eq!(z.len(), self.input_dim(), "network input length");
        let nl = self.layers.len();
        tape.acts.resize_with(nl + 1, Vec::new);
        let a0 = &mut tape.acts[0];
        a0.clear();
        match &self.input_scaling {
            Some(s) => a0.extend(
                z.iter()
                    .zip(&s.shift)
                    .zip(&s.scale)
                    .map(|((v, m), c)| (v - m) * c),
            ),
            None => a0.extend_from_slice(z),
        }
        let mut off = 0;
        for (j, layer) in self.layers.iter().enumerate() {
            let (head, tail) = tape.acts.split_at_mut(j + 1);
            let input = &head[j];
            let out = &mut tail[0];
            out.clear();
            let (w, b) =
                self.params[off..off + layer.param_count()].split_at(layer.in_dim * layer.out_dim);
            for r in 0..layer.out_dim {
                let row = &w[r * layer.in_dim..(r + 1) * layer.in_dim];
                let mut acc = b[r];
                for (wi, ai) in row.iter().zip(input) {
                    acc += wi * ai;
                }
                out.push(layer.activation.value(acc));
            }
            off += layer.param_count();
        }
        &tape.acts[nl]
    }

    /// Reverse pass for the forward pass recorded in `tape`.
    ///
    /// Adds `upstream . d(out)/d(theta)` into `param_grad` (when given) and
    /// writes `upstream . d(out)/dz` into `input_grad` (when given).
    pub fn backward_taped(
        &self,
        tape: &mut Tape,
        upstream: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        assert_eq!(upstream.len(), self.output_dim(), "upstream gradient length");
        let nl = self.layers.len();
        let Tape {
            acts,
            delta,
            delta_next,
        } = tape;
        delta.clear();
        let last = self.layers[nl - 1].activation;
        delta.extend(
            upstream
                .iter()
                .zip(&acts[nl])
                .map(|(g, y)| g * last.derivative_from_output(*y)),
        );
        let want_input = input_grad.is_some();
        let mut off = self.params.len();
        for j in (0..nl).rev() {
            let layer = &self.layers[j];
            off -= layer.param_count();
            let input = &acts[j];
            let wlen = layer.in_dim * layer.out_dim;
            if let Some(pg) = param_grad.as_deref_mut() {
                let (gw, gb) = pg[off..off + layer.param_count()].split_at_mut(wlen);
                for r in 0..layer.out_dim {
                    let dr = delta[r];
                    gb[r] += dr;
                    for (g, a) in gw[r * layer.in_dim..(r + 1) * layer.in_dim]
                        .iter_mut()
                        .zip(input)
                    {
                        *g += dr * a;
                    }
                }
            }
            if j == 0 && !want_input {
                break;
            }
            let w = &self.params[off..off + wlen];
            delta_next.clear();
            delta_next.resize(layer.in_dim, 0.0);
            for r in 0..layer.out_dim {
                let dr = delta[r];
                for (dn, wi) in delta_next
                    .iter_mut()
                    .zip(&w[r * layer.in_dim..(r + 1) * layer.in_dim])
                {
                    *dn += wi * dr;
                }
            }
            if j > 0 {
                let prev = self.layers[j - 1].activation;
                for (dn, y) in delta_next.iter_mut().zip(input) {
                    *dn *= prev.derivative_from_output(*y);
                }
            }
            std::mem::swap(delta, delta_next);
        }
        if let Some(ig) = input_grad {
            match &self.input_scaling {
                Some(s) => {
                    for ((g, d), c) in ig.iter_mut().zip(delta.iter()).zip(&s.scale) {
                        *g = d * c;
                    }
                }
                None => ig.copy_from_slice(delta),
            }
        }
    }

    /// Exact reverse-mode derivatives of `upstream . g(z)` w.r.t. every
    /// parameter and the input.
    pub fn backward(&self, z: &[f64], upstream: &[f64]) -> Result<Gradients> {
        ensure_dim("network input", self.input_dim(), z.len())?;
        ensure_dim("upstream gradient", self.output_dim(), upstream.len())?;
        let mut tape = Tape::default();
        self.forward_taped(z, &mut tape);
        let mut params = vec![0.0; self.params.len()];
        let mut input = vec![0.0; self.input_dim()];
        self.backward_taped(&mut tape, upstream, Some(&mut params), Some(&mut input));
        Ok(Gradients { params, input })
    }
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid("layers", "network needs at least one layer"));
    }
    for (j, l) in layers.iter().enumerate() {
        if l.in_dim == 0 || l.out_dim == 0 {
            return Err(Error::invalid(
                format!("layers[{j}]"),
                "dimensions must be positive",
            ));
        }
    }
    for (j, w) in layers.windows(2).enumerate() {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::invalid(
                format!("layers[{}]", j + 1),
                format!(
                    "input width {} does not match previous output width {}",
                    w[1].in_dim, w[0].out_dim
                ),
            ));
        }
    }
    Ok(())
}

/// The two controller architectures of the LQ experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// `3 -> 2 -> 2 -> 2`, linear / tanh / linear (6 neurons).
    Nn1,
    /// `3 -> 2 -> 2 -> 50 -> 50 -> 2`, linear / tanh x3 / linear (106 neurons).
    Nn2,
}

impl Architecture {
    pub fn dims(self) -> &'static [usize] {
        match self {
            Architecture::Nn1 => &[3, 2, 2, 2],
            Architecture::Nn2 => &[3, 2, 2, 50, 50, 2],
        }
    }

    pub fn activations(self) -> &'static [ActivationKind] {
        use ActivationKind::{Linear, Tanh};
        match self {
            Architecture::Nn1 => &[Linear, Tanh, Linear],
            Architecture::Nn2 => &[Linear, Tanh, Tanh, Tanh, Linear],
        }
    }

    pub fn build(self, scheme: InitScheme, seed: u64) -> Result<MlpParams> {
        MlpParams::init(self.dims(), self.activations(), scheme, seed)
    }

    pub fn label(self) -> &'static str {
        match self {
            Architecture::Nn1 => "NN1",
            Architecture::Nn2 => "NN2",
        }
    }
}
