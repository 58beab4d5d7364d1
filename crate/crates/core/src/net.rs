//! Feedforward networks `h_j = σ_j(W_j h_{j-1} + b_j)` with optional
//! per-layer perturbations injected before each affine map,
//! `h̃_j = σ_j(W_j (h̃_{j-1} + d_j) + b_j)`, and exact reverse-mode gradients
//! with respect to parameters and perturbations.
//!
//! Inputs to convolutional layers are flattened channel-major (`c, y, x`).

use crate::linalg::{norm2, Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    z
                } else {
                    a * z
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative; the kink at exactly 0 takes the left slope.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a stride-1, valid-padding 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        self.height + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.width + 1 - self.kernel_w
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    #[inline]
    fn kidx(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel_h + ky) * self.kernel_w + kx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Dense { weights: Matrix },
    /// `kernel` is indexed `(out, in, ky, kx)` row-major.
    Conv { kernel: Vec<f64>, shape: ConvShape },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub bias: Vector,
    /// Frozen biases stay at zero and receive zero gradient.
    pub learn_bias: bool,
    pub activation: Activation,
}

impl Layer {
    pub fn dense(weights: Matrix, bias: Vector, activation: Activation) -> Result<Self, NetError> {
        let layer = Layer { kind: LayerKind::Dense { weights }, bias, learn_bias: true, activation };
        layer.validate()?;
        Ok(layer)
    }

    /// Dense layer without a bias term.
    pub fn dense_unbiased(weights: Matrix, activation: Activation) -> Result<Self, NetError> {
        let bias = vec![0.0; weights.rows()];
        let layer = Layer { kind: LayerKind::Dense { weights }, bias, learn_bias: false, activation };
        layer.validate()?;
        Ok(layer)
    }

    pub fn conv(kernel: Vec<f64>, shape: ConvShape, bias: Vector, activation: Activation) -> Result<Self, NetError> {
        let layer = Layer { kind: LayerKind::Conv { kernel, shape }, bias, learn_bias: true, activation };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<(), NetError> {
        if let Activation::LeakyRelu(a) = self.activation {
            if !(a > 0.0 && a < 1.0) {
                return Err(NetError::InvalidLayer(format!("leaky relu slope {a} not in (0,1)")));
            }
        }
        match &self.kind {
            LayerKind::Dense { weights } => {
                if self.bias.len() != weights.rows() {
                    return Err(NetError::InvalidLayer(format!(
                        "bias length {} does not match {} output rows",
                        self.bias.len(),
                        weights.rows()
                    )));
                }
                if !weights.is_finite() {
                    return Err(NetError::InvalidLayer("non-finite weights".into()));
                }
            }
            LayerKind::Conv { kernel, shape } => {
                if shape.kernel_h == 0 || shape.kernel_w == 0 || shape.kernel_h > shape.height || shape.kernel_w > shape.width {
                    return Err(NetError::InvalidLayer(format!("kernel {}x{} does not fit {}x{} input", shape.kernel_h, shape.kernel_w, shape.height, shape.width)));
                }
                if kernel.len() != shape.kernel_len() {
                    return Err(NetError::InvalidLayer(format!("kernel has {} entries, expected {}", kernel.len(), shape.kernel_len())));
                }
                if self.bias.len() != shape.out_channels {
                    return Err(NetError::InvalidLayer(format!("conv bias length {} != {} channels", self.bias.len(), shape.out_channels)));
                }
            }
        }
        if !self.learn_bias && self.bias.iter().any(|&b| b != 0.0) {
            return Err(NetError::InvalidLayer("frozen bias must be zero".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { weights } => weights.cols(),
            LayerKind::Conv { shape, .. } => shape.input_len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { weights } => weights.rows(),
            LayerKind::Conv { shape, .. } => shape.output_len(),
        }
    }

    pub fn fan_in(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { weights } => weights.cols(),
            LayerKind::Conv { shape, .. } => shape.in_channels * shape.kernel_h * shape.kernel_w,
        }
    }

    pub fn weights(&self) -> &[f64] {
        match &self.kind {
            LayerKind::Dense { weights } => weights.as_slice(),
            LayerKind::Conv { kernel, .. } => kernel,
        }
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        match &mut self.kind {
            LayerKind::Dense { weights } => weights.as_mut_slice(),
            LayerKind::Conv { kernel, .. } => kernel,
        }
    }

    /// The weight matrix of a dense layer.
    pub fn dense_weights(&self) -> Option<&Matrix> {
        match &self.kind {
            LayerKind::Dense { weights } => Some(weights),
            LayerKind::Conv { .. } => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights().len() + self.bias.len()
    }

    /// `W u + b`.
    fn affine(&self, u: &[f64]) -> Vector {
        match &self.kind {
            LayerKind::Dense { weights } => {
                let mut z = self.bias.clone();
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi += weights.row(i).iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
                }
                z
            }
            LayerKind::Conv { kernel, shape } => {
                let (oh, ow) = (shape.out_h(), shape.out_w());
                let (h, w) = (shape.height, shape.width);
                let mut z = vec![0.0; shape.output_len()];
                for o in 0..shape.out_channels {
                    let plane = &mut z[o * oh * ow..(o + 1) * oh * ow];
                    plane.iter_mut().for_each(|v| *v = self.bias[o]);
                    for c in 0..shape.in_channels {
                        let input = &u[c * h * w..(c + 1) * h * w];
                        for ky in 0..shape.kernel_h {
                            for kx in 0..shape.kernel_w {
                                let k = kernel[shape.kidx(o, c, ky, kx)];
                                for y in 0..oh {
                                    let src = &input[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                                    let dst = &mut plane[y * ow..(y + 1) * ow];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += k * s;
                                    }
                                }
                            }
                        }
                    }
                }
                z
            }
        }
    }

    /// Backpropagates `gz = ∂/∂z` through `z = W u + b`, accumulating
    /// weight and bias gradients, and returns `∂/∂u`.
    fn backward_affine(&self, u: &[f64], gz: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vector {
        if self.learn_bias {
            match &self.kind {
                LayerKind::Dense { .. } => gb.copy_from_slice(gz),
                LayerKind::Conv { shape, .. } => {
                    let plane = shape.out_h() * shape.out_w();
                    for (o, g) in gb.iter_mut().enumerate() {
                        *g = gz[o * plane..(o + 1) * plane].iter().sum();
                    }
                }
            }
        }
        match &self.kind {
            LayerKind::Dense { weights } => {
                let cols = weights.cols();
                let mut gu = vec![0.0; cols];
                for (i, &g) in gz.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let grow = &mut gw[i * cols..(i + 1) * cols];
                    for (gwij, &uj) in grow.iter_mut().zip(u) {
                        *gwij = g * uj;
                    }
                    for (guj, &wij) in gu.iter_mut().zip(weights.row(i)) {
                        *guj += g * wij;
                    }
                }
                gu
            }
            LayerKind::Conv { kernel, shape } => {
                let (oh, ow) = (shape.out_h(), shape.out_w());
                let (h, w) = (shape.height, shape.width);
                let mut gu = vec![0.0; shape.input_len()];
                for o in 0..shape.out_channels {
                    let gplane = &gz[o * oh * ow..(o + 1) * oh * ow];
                    for c in 0..shape.in_channels {
                        let input = &u[c * h * w..(c + 1) * h * w];
                        for ky in 0..shape.kernel_h {
                            for kx in 0..shape.kernel_w {
                                let ki = shape.kidx(o, c, ky, kx);
                                let k = kernel[ki];
                                let mut acc = 0.0;
                                for y in 0..oh {
                                    let base = (c * h + y + ky) * w + kx;
                                    let src = &input[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                                    let g = &gplane[y * ow..(y + 1) * ow];
                                    for x in 0..ow {
                                        acc += g[x] * src[x];
                                        gu[base + x] += k * g[x];
                                    }
                                }
                                gw[ki] = acc;
                            }
                        }
                    }
                }
                gu
            }
        }
    }
}

/// Per-layer activations `h_0 = x, …, h_L` and pre-activations `z_1, …, z_L`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Vector>,
    pub pre_activations: Vec<Vector>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }
}

/// One perturbation vector per layer, each the size of that layer's input.
pub type Perturbation = Vec<Vector>;

/// Gradient of one layer's parameters, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vector,
    pub bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<LayerGrad>,
    /// `∂/∂d_j`; entry 0 doubles as the input gradient.
    pub perturbations: Vec<Vector>,
}

impl Gradients {
    /// Parameter gradient flattened in [`Network::params`] order.
    pub fn flat_params(&self) -> Vector {
        let mut out = Vec::new();
        for g in &self.params {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

/// Per-node firing pattern of a two-layer network's hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivationPattern(pub Vec<bool>);

impl ActivationPattern {
    pub fn count_active(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Per-layer ℓ∞ radii bounding each `d_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSet {
    pub radii: Vec<f64>,
}

impl PerturbationSet {
    pub fn new(radii: Vec<f64>) -> Result<Self, NetError> {
        if let Some(r) = radii.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(NetError::Shape(format!("perturbation radius {r} must be finite and nonnegative")));
        }
        Ok(PerturbationSet { radii })
    }

    /// Same radius on every layer.
    pub fn uniform(layers: usize, radius: f64) -> Result<Self, NetError> {
        Self::new(vec![radius; layers])
    }

    /// Perturbs only the network input.
    pub fn input_only(layers: usize, radius: f64) -> Result<Self, NetError> {
        let mut radii = vec![0.0; layers];
        if let Some(r) = radii.first_mut() {
            *r = radius;
        }
        Self::new(radii)
    }

    pub fn check(&self, net: &Network) -> Result<(), NetError> {
        if self.radii.len() != net.layers().len() {
            return Err(NetError::Shape(format!(
                "{} radii for a {}-layer network",
                self.radii.len(),
                net.layers().len()
            )));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.radii.iter().all(|&r| r == 0.0)
    }

    pub fn contains(&self, d: &Perturbation) -> bool {
        d.len() == self.radii.len()
            && d.iter().zip(&self.radii).all(|(dj, &r)| dj.iter().all(|x| x.abs() <= r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Values recorded by a forward pass for backpropagation.
struct Tape {
    inputs: Vec<Vector>,
    pre: Vec<Vector>,
    output: Vector,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Architecture("network needs at least one layer".into()));
        }
        for (j, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NetError::Shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    j,
                    pair[0].output_dim(),
                    j + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for l in &layers {
            l.validate()?;
        }
        Ok(Network { layers })
    }

    /// Dense network with widths `sizes[0] → … → sizes[L]`; hidden layers use
    /// `hidden`, the last layer `output`. All layers carry biases.
    pub fn dense(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self, NetError> {
        Self::dense_with_bias(sizes, hidden, output, true, seed)
    }

    /// Like [`Network::dense`], choosing whether the final layer has a bias.
    pub fn dense_with_bias(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        output_bias: bool,
        seed: u64,
    ) -> Result<Self, NetError> {
        if sizes.len() < 2 {
            return Err(NetError::Architecture("need at least input and output sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = sizes.len() - 1;
        let mut layers = Vec::with_capacity(l);
        for j in 0..l {
            let act = if j + 1 == l { output } else { hidden };
            let biased = j + 1 < l || output_bias;
            layers.push(random_dense(&mut rng, sizes[j], sizes[j + 1], act, biased));
        }
        Network::new(layers)
    }

    /// `x ↦ W (V x + b)_+` with no output bias.
    pub fn two_layer(input: usize, hidden: usize, output: usize, seed: u64) -> Result<Self, NetError> {
        Self::dense_with_bias(&[input, hidden, output], Activation::Relu, Activation::Identity, false, seed)
    }

    /// Deep linear network `W_L ⋯ W_1` without biases.
    pub fn linear_chain(sizes: &[usize], seed: u64) -> Result<Self, NetError> {
        if sizes.len() < 2 {
            return Err(NetError::Architecture("need at least input and output sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| random_dense(&mut rng, w[0], w[1], Activation::Identity, false))
            .collect();
        Network::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    /// Input size of each layer, i.e. the shape of each `d_j`.
    pub fn perturbation_dims(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::input_dim).collect()
    }

    pub fn zero_perturbation(&self) -> Perturbation {
        self.perturbation_dims().into_iter().map(|n| vec![0.0; n]).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::Shape(format!("input has {} entries, network expects {}", x.len(), self.input_dim())));
        }
        Ok(())
    }

    fn check_perturbation(&self, d: &Perturbation) -> Result<(), NetError> {
        if d.len() != self.layers.len() {
            return Err(NetError::Shape(format!("{} perturbation vectors for {} layers", d.len(), self.layers.len())));
        }
        for (j, (dj, l)) in d.iter().zip(&self.layers).enumerate() {
            if dj.len() != l.input_dim() {
                return Err(NetError::Shape(format!("perturbation {j} has {} entries, layer expects {}", dj.len(), l.input_dim())));
            }
        }
        Ok(())
    }

    fn run(&self, x: &[f64], d: Option<&Perturbation>, record: bool) -> Tape {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut h = x.to_vec();
        for (j, layer) in self.layers.iter().enumerate() {
            if let Some(d) = d {
                for (hi, di) in h.iter_mut().zip(&d[j]) {
                    *hi += di;
                }
            }
            let z = layer.affine(&h);
            let out: Vector = z.iter().map(|&v| layer.activation.apply(v)).collect();
            if record {
                inputs.push(std::mem::replace(&mut h, out));
                pre.push(z);
            } else {
                h = out;
            }
        }
        Tape { inputs, pre, output: h }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace, NetError> {
        self.check_input(x)?;
        let tape = self.run(x, None, true);
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.extend(tape.inputs);
        activations.push(tape.output);
        Ok(ForwardTrace { activations, pre_activations: tape.pre })
    }

    /// Output only; cheaper than [`Network::forward`].
    pub fn predict(&self, x: &[f64]) -> Result<Vector, NetError> {
        self.check_input(x)?;
        Ok(self.run(x, None, false).output)
    }

    /// Scalar output of a one-output network.
    pub fn score(&self, x: &[f64]) -> Result<f64, NetError> {
        if self.output_dim() != 1 {
            return Err(NetError::Architecture(format!("expected scalar output, network has {}", self.output_dim())));
        }
        Ok(self.predict(x)?[0])
    }

    pub fn forward_perturbed(&self, x: &[f64], d: &Perturbation) -> Result<Vector, NetError> {
        self.check_input(x)?;
        self.check_perturbation(d)?;
        Ok(self.run(x, Some(d), false).output)
    }

    /// Gradients of `⟨upstream, h̃_L(x; d)⟩` with respect to every weight,
    /// bias and perturbation. Pass `None` for `d = 0`.
    pub fn gradients(&self, x: &[f64], d: Option<&Perturbation>, upstream: &[f64]) -> Result<(Vector, Gradients), NetError> {
        self.check_input(x)?;
        if let Some(d) = d {
            self.check_perturbation(d)?;
        }
        if upstream.len() != self.output_dim() {
            return Err(NetError::Shape(format!("upstream has {} entries, output has {}", upstream.len(), self.output_dim())));
        }
        let tape = self.run(x, d, true);
        let l = self.layers.len();
        let mut params: Vec<LayerGrad> = self
            .layers
            .iter()
            .map(|layer| LayerGrad { weights: vec![0.0; layer.weights().len()], bias: vec![0.0; layer.bias.len()] })
            .collect();
        let mut perturbations = vec![Vec::new(); l];
        let mut g = upstream.to_vec();
        for j in (0..l).rev() {
            let layer = &self.layers[j];
            for (gi, &z) in g.iter_mut().zip(&tape.pre[j]) {
                *gi *= layer.activation.derivative(z);
            }
            let pg = &mut params[j];
            let gu = layer.backward_affine(&tape.inputs[j], &g, &mut pg.weights, &mut pg.bias);
            perturbations[j] = gu.clone();
            g = gu;
        }
        Ok((tape.output, Gradients { params, perturbations }))
    }

    /// Hidden-layer pattern of a dense-relu-dense network:
    /// bit `k` is set iff `V_k x + b_k > 0`.
    pub fn activation_pattern(&self, x: &[f64]) -> Result<ActivationPattern, NetError> {
        let (v, b) = self.two_layer_hidden()?;
        self.check_input(x)?;
        Ok(ActivationPattern(
            (0..v.rows()).map(|k| crate::linalg::dot(v.row(k), x) + b[k] > 0.0).collect(),
        ))
    }

    /// `(V, b)` of a dense-relu-dense network.
    pub fn two_layer_hidden(&self) -> Result<(&Matrix, &[f64]), NetError> {
        self.check_two_layer()?;
        let first = &self.layers[0];
        Ok((first.dense_weights().expect("checked"), &first.bias))
    }

    /// Output weights `W` of a dense-relu-dense network.
    pub fn two_layer_output(&self) -> Result<&Matrix, NetError> {
        self.check_two_layer()?;
        Ok(self.layers[1].dense_weights().expect("checked"))
    }

    pub fn check_two_layer(&self) -> Result<(), NetError> {
        let ok = self.layers.len() == 2
            && self.layers.iter().all(|l| matches!(l.kind, LayerKind::Dense { .. }))
            && self.layers[0].activation == Activation::Relu
            && self.layers[1].activation == Activation::Identity;
        if ok {
            Ok(())
        } else {
            Err(NetError::Architecture("expected a dense-relu-dense network with identity output".into()))
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// All parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vector {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.num_params() {
            return Err(NetError::Shape(format!("{} parameters supplied, network has {}", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights().len();
            l.weights_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            if l.learn_bias {
                l.bias.copy_from_slice(&flat[off..off + nb]);
            }
            off += nb;
        }
        Ok(())
    }

    /// Applies `θ ← θ + alpha · step` in flat parameter order.
    pub fn add_scaled(&mut self, alpha: f64, step: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights().len();
            for (w, s) in l.weights_mut().iter_mut().zip(&step[off..off + nw]) {
                *w += alpha * s;
            }
            off += nw;
            let nb = l.bias.len();
            if l.learn_bias {
                for (b, s) in l.bias.iter_mut().zip(&step[off..off + nb]) {
                    *b += alpha * s;
                }
            }
            off += nb;
        }
    }

    pub fn param_norm(&self) -> f64 {
        norm2(&self.params())
    }

    /// Dense weight matrices, in layer order.
    pub fn dense_weight_matrices(&self) -> Vec<Matrix> {
        self.layers.iter().filter_map(|l| l.dense_weights().cloned()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights().iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// Multiplies every parameter by `factor`.
    pub fn scale_params(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights_mut().iter_mut().for_each(|w| *w *= factor);
            l.bias.iter_mut().for_each(|b| *b *= factor);
        }
    }
}

fn random_dense(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, act: Activation, biased: bool) -> Layer {
    let bound = 1.0 / (n_in as f64).sqrt();
    let data = (0..n_in * n_out).map(|_| rng.random_range(-bound..bound)).collect();
    let weights = Matrix::from_vec(n_out, n_in, data).expect("sizes agree");
    let bias = if biased { (0..n_out).map(|_| rng.random_range(-bound..bound)).collect() } else { vec![0.0; n_out] };
    Layer { kind: LayerKind::Dense { weights }, bias, learn_bias: biased, activation: act }
}

/// Randomly initialised convolutional layer, `U(±1/√fan_in)`.
pub fn random_conv(rng: &mut ChaCha8Rng, shape: ConvShape, act: Activation) -> Result<Layer, NetError> {
    let bound = 1.0 / ((shape.in_channels * shape.kernel_h * shape.kernel_w) as f64).sqrt();
    let kernel = (0..shape.kernel_len()).map(|_| rng.random_range(-bound..bound)).collect();
    let bias = (0..shape.out_channels).map(|_| rng.random_range(-bound..bound)).collect();
    Layer::conv(kernel, shape, bias, act)
}

/// Two conv layers followed by two dense layers, leaky-relu throughout and
/// identity scalar output. Channel and width defaults are guesses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for ConvNetSpec {
    fn default() -> Self {
        ConvNetSpec { in_channels: 3, height: 32, width: 32, conv1_channels: 8, conv2_channels: 8, kernel: 5, hidden: 32 }
    }
}

impl ConvNetSpec {
    pub fn build(&self, seed: u64) -> Result<Network, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE);
        let s1 = ConvShape {
            in_channels: self.in_channels,
            height: self.height,
            width: self.width,
            out_channels: self.conv1_channels,
            kernel_h: self.kernel,
            kernel_w: self.kernel,
        };
        if self.kernel > self.height || self.kernel > self.width {
            return Err(NetError::Architecture("kernel larger than image".into()));
        }
        let s2 = ConvShape {
            in_channels: self.conv1_channels,
            height: s1.out_h(),
            width: s1.out_w(),
            out_channels: self.conv2_channels,
            kernel_h: self.kernel.min(s1.out_h()),
            kernel_w: self.kernel.min(s1.out_w()),
        };
        let c1 = random_conv(&mut rng, s1, act)?;
        let c2 = random_conv(&mut rng, s2, act)?;
        let d1 = random_dense(&mut rng, s2.output_len(), self.hidden, act, true);
        let d2 = random_dense(&mut rng, self.hidden, 1, Activation::Identity, true);
        Network::new(vec![c1, c2, d1, d2])
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Metadata stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    /// Decision threshold on the scalar output, if the network is a classifier.
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerRecord<A> {
    Dense { rows: usize, cols: usize, activation: Activation, learn_bias: bool, weights: A, bias: A },
    Conv { shape: ConvShape, activation: Activation, learn_bias: bool, weights: A, bias: A },
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc<A> {
    format: String,
    version: u32,
    meta: CheckpointMeta,
    layers: Vec<LayerRecord<A>>,
}

const CHECKPOINT_FORMAT: &str = "pexcite-checkpoint";

/// Formats values with 17 significant digits, which round-trips every f64.
fn decimal_array(v: &[f64]) -> Result<Box<RawValue>, NetError> {
    let body: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
    Ok(RawValue::from_string(format!("[{}]", body.join(",")))?)
}

pub fn checkpoint_to_string(net: &Network, meta: &CheckpointMeta) -> Result<String, NetError> {
    if !net.is_finite() {
        return Err(NetError::Checkpoint("refusing to write non-finite parameters".into()));
    }
    let mut layers = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        let weights = decimal_array(l.weights())?;
        let bias = decimal_array(&l.bias)?;
        layers.push(match &l.kind {
            LayerKind::Dense { weights: w } => LayerRecord::Dense {
                rows: w.rows(),
                cols: w.cols(),
                activation: l.activation,
                learn_bias: l.learn_bias,
                weights,
                bias,
            },
            LayerKind::Conv { shape, .. } => {
                LayerRecord::Conv { shape: *shape, activation: l.activation, learn_bias: l.learn_bias, weights, bias }
            }
        });
    }
    let doc = CheckpointDoc { format: CHECKPOINT_FORMAT.into(), version: 1, meta: meta.clone(), layers };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn checkpoint_from_str(s: &str) -> Result<(Network, CheckpointMeta), NetError> {
    let doc: CheckpointDoc<Vec<f64>> = serde_json::from_str(s)?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(NetError::Checkpoint(format!("unknown format {:?}", doc.format)));
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for rec in doc.layers {
        let layer = match rec {
            LayerRecord::Dense { rows, cols, activation, learn_bias, weights, bias } => Layer {
                kind: LayerKind::Dense {
                    weights: Matrix::from_vec(rows, cols, weights).map_err(|e| NetError::Checkpoint(e.to_string()))?,
                },
                bias,
                learn_bias,
                activation,
            },
            LayerRecord::Conv { shape, activation, learn_bias, weights, bias } => {
                Layer { kind: LayerKind::Conv { kernel: weights, shape }, bias, learn_bias, activation }
            }
        };
        layers.push(layer);
    }
    Ok((Network::new(layers)?, doc.meta))
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<(), NetError> {
    std::fs::write(path, checkpoint_to_string(net, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, CheckpointMeta), NetError> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
