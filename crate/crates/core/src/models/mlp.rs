//! Dense tanh networks with hand-written backpropagation.
//!
//! Input layout is `[state (d) | time embedding (3) | carried feature (D)]`;
//! `D = 0` for a target network. The feature is the activation of one
//! hidden layer, by default the last.

use super::{ModelOutput, ScoreModel};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::stats::{fill_gaussian, Purpose, RngKey};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

pub const TIME_EMBEDDING_DIM: usize = 3;

/// `[t/T, sin(2πt/T), cos(2πt/T)]`.
pub fn time_embedding(t: usize, steps: usize) -> [f64; TIME_EMBEDDING_DIM] {
    let phase = t as f64 / steps as f64;
    let (s, c) = (TAU * phase).sin_cos();
    [phase, s, c]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Fully connected layer, weights row-major `outputs × inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            let mut acc = *b;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct MlpNet {
    state_dim: usize,
    cond_dim: usize,
    steps: usize,
    layers: Vec<Dense>,
    activation: Activation,
    feature_layer: usize,
}

/// JSON checkpoint layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    feature_layer: usize,
    state_dim: usize,
    cond_dim: usize,
    steps: usize,
}

impl From<MlpNet> for Checkpoint {
    fn from(net: MlpNet) -> Self {
        Checkpoint {
            dims: net.dims(),
            weights: net.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: net.layers.iter().map(|l| l.bias.clone()).collect(),
            activation: net.activation,
            feature_layer: net.feature_layer,
            state_dim: net.state_dim,
            cond_dim: net.cond_dim,
            steps: net.steps,
        }
    }
}

impl TryFrom<Checkpoint> for MlpNet {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("checkpoint: {msg}"));
        if c.dims.len() < 3 {
            return Err(bad("need at least one hidden layer".into()));
        }
        if c.weights.len() != c.dims.len() - 1 || c.biases.len() != c.dims.len() - 1 {
            return Err(bad("layer count does not match dims".into()));
        }
        let layers = c
            .dims
            .windows(2)
            .zip(c.weights.into_iter().zip(c.biases))
            .map(|(io, (weights, bias))| {
                if weights.len() != io[0] * io[1] || bias.len() != io[1] {
                    return Err(bad(format!("layer {}x{} has wrong parameter count", io[1], io[0])));
                }
                check_finite("checkpoint weights", &weights)?;
                check_finite("checkpoint biases", &bias)?;
                Ok(Dense {
                    inputs: io[0],
                    outputs: io[1],
                    weights,
                    bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = MlpNet {
            state_dim: c.state_dim,
            cond_dim: c.cond_dim,
            steps: c.steps,
            layers,
            activation: c.activation,
            feature_layer: c.feature_layer,
        };
        net.validate()?;
        Ok(net)
    }
}

/// Activations recorded by a forward pass: `[input, hidden..., output]`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= c);
            l.bias.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Flattened in the same order as [`MlpNet::params`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

impl MlpNet {
    /// Randomly initialised network (scaled normal weights, zero biases).
    pub fn new(state_dim: usize, cond_dim: usize, hidden: &[usize], steps: usize, seed: u64) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) || state_dim == 0 || steps == 0 {
            return Err(Error::InvalidArgument(
                "network needs a state, a step count and non-empty hidden layers".into(),
            ));
        }
        let mut dims = vec![state_dim + TIME_EMBEDDING_DIM + cond_dim];
        dims.extend_from_slice(hidden);
        dims.push(state_dim);
        let mut rng = RngKey::new(seed, 0, Purpose::Init).stream();
        let layers = dims
            .windows(2)
            .map(|io| {
                let mut layer = Dense::zeros(io[0], io[1]);
                fill_gaussian(&mut rng, &mut layer.weights);
                let scale = (1.0 / io[0] as f64).sqrt();
                layer.weights.iter_mut().for_each(|w| *w *= scale);
                layer
            })
            .collect();
        Ok(Self {
            state_dim,
            cond_dim,
            steps,
            layers,
            activation: Activation::Tanh,
            feature_layer: hidden.len() - 1,
        })
    }

    /// Builds a network from explicit layers.
    pub fn from_layers(state_dim: usize, cond_dim: usize, steps: usize, layers: Vec<Dense>, feature_layer: usize) -> Result<Self> {
        let net = Self {
            state_dim,
            cond_dim,
            steps,
            layers,
            activation: Activation::Tanh,
            feature_layer,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("network: {m}")));
        if self.layers.len() < 2 {
            return bad("need at least one hidden layer");
        }
        if self.layers[0].inputs != self.state_dim + TIME_EMBEDDING_DIM + self.cond_dim {
            return bad("input width must be state + time embedding + carried feature");
        }
        if self.layers.last().unwrap().outputs != self.state_dim {
            return bad("output width must equal the state dimension");
        }
        if self.layers.windows(2).any(|w| w[0].outputs != w[1].inputs) {
            return bad("consecutive layer widths disagree");
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return bad("layer parameter count mismatch");
            }
        }
        if self.feature_layer >= self.layers.len() - 1 {
            return bad("feature layer must index a hidden layer");
        }
        if self.steps == 0 {
            return bad("step count must be positive");
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Width of the carried-feature input (0 for a target network).
    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Width of the emitted feature.
    pub fn feature_dim(&self) -> usize {
        self.layers[self.feature_layer].outputs
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flattened parameters, layer by layer (weights then bias).
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    /// The same network with the carried-feature input columns removed.
    pub fn without_conditioning(&self) -> MlpNet {
        let mut out = self.clone();
        let keep = self.state_dim + TIME_EMBEDDING_DIM;
        let first = &self.layers[0];
        out.layers[0] = Dense {
            inputs: keep,
            outputs: first.outputs,
            weights: first
                .weights
                .chunks_exact(first.inputs)
                .flat_map(|row| row[..keep].iter().copied())
                .collect(),
            bias: first.bias.clone(),
        };
        out.cond_dim = 0;
        out
    }

    fn input(&self, x: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.state_dim, x.len())?;
        check_dim(self.cond_dim, cond.len())?;
        let mut input = Vec::with_capacity(self.layers[0].inputs);
        input.extend_from_slice(x);
        input.extend_from_slice(&time_embedding(t, self.steps));
        input.extend_from_slice(cond);
        Ok(input)
    }

    /// Forward pass keeping every activation for backpropagation.
    pub fn forward_cached(&self, x: &[f64], t: usize, cond: &[f64]) -> Result<(ModelOutput, ForwardCache)> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(self.input(x, t, cond)?);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.apply(activations.last().unwrap(), &mut z);
            if i < last {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            activations.push(z);
        }
        let out = ModelOutput {
            eps: activations[last + 1].clone(),
            feature: activations[self.feature_layer + 1].clone(),
        };
        Ok((out, ForwardCache { activations }))
    }

    pub fn forward(&self, x: &[f64], t: usize, cond: &[f64]) -> Result<ModelOutput> {
        self.forward_cached(x, t, cond).map(|(o, _)| o)
    }

    /// Gradients of a scalar loss given `dL/d(eps)` and, optionally,
    /// `dL/d(feature)`.
    pub fn backward(&self, cache: &ForwardCache, d_eps: &[f64], d_feature: Option<&[f64]>) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, d_eps, d_feature, &mut grads);
        grads
    }

    /// Accumulates parameter gradients into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, d_eps: &[f64], d_feature: Option<&[f64]>, grads: &mut Gradients) {
        let acts = &cache.activations;
        let mut delta = d_eps.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &acts[l];
            let g = &mut grads.layers[l];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if l == 0 {
                break;
            }
            // dL/d(hidden activation l-1)
            let mut upstream = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (u, w) in upstream.iter_mut().zip(row) {
                    *u += d * w;
                }
            }
            if l - 1 == self.feature_layer {
                if let Some(df) = d_feature {
                    upstream.iter_mut().zip(df).for_each(|(u, f)| *u += f);
                }
            }
            delta = upstream
                .iter()
                .zip(input)
                .map(|(u, a)| u * self.activation.derivative_from_output(*a))
                .collect();
        }
    }
}

/// Target-network evaluation at `(x, t)`.
pub fn mlp_forward(net: &MlpNet, x: &[f64], t: usize) -> Result<ModelOutput> {
    net.forward(x, t, &[])
}

/// Drafter evaluation: input is `(x, time embedding, previous feature)`.
pub fn drafter_forward(drafter: &MlpNet, x: &[f64], t: usize, prev_feature: &[f64]) -> Result<ModelOutput> {
    drafter.forward(x, t, prev_feature)
}

impl ScoreModel for MlpNet {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn feature_dim(&self) -> usize {
        MlpNet::feature_dim(self)
    }

    fn predict(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<ModelOutput> {
        if self.steps != sched.steps() {
            return Err(Error::InvalidArgument(format!(
                "network trained for T = {}, schedule has T = {}",
                self.steps,
                sched.steps()
            )));
        }
        mlp_forward(self, x, t)
    }
}
