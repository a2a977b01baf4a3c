//! Small networks trained with plain SGD: the four-output regression MLP,
//! a circular-conv classifier on shift-invariant synthetic images,
//! checkpointing over a fixed probe set, and Freeze Training.
//!
//! Activations are `features × batch` matrices. Image features are laid out
//! `(h, w, c)` h-major, matching [`ConvTensor`] datapoints.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cca::ActivationMatrix;
use crate::convdft::{self, CircularConv, ConvActivations, ConvTensor, TranslationSpec};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::linalg::RealMatrix;
use crate::tensorio::{self, ActivationDump, Checkpoint as ManifestCheckpoint, LayerEntry, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputSpec {
    Vector { dim: usize },
    Image { size: usize, channels: usize },
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense {
        out: usize,
    },
    /// Circular-boundary convolution.
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    AvgPool {
        size: usize,
    },
    GlobalAvgPool,
    Tanh,
    Relu,
}

/// Architecture plus initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Weight std is `init_gain / √fan_in`.
    #[serde(default = "unit")]
    pub init_gain: f64,
    /// Replaces `init_gain` for the first parametric layer.
    #[serde(default)]
    pub input_gain: Option<f64>,
    /// Bias std of the first parametric layer; other biases start at zero.
    #[serde(default)]
    pub input_bias_std: f64,
}

impl NetSpec {
    /// `dim → hidden × depth (tanh) → outputs`.
    pub fn mlp(input: usize, hidden: usize, depth: usize, outputs: usize, seed: u64) -> Self {
        let mut layers = Vec::new();
        for _ in 0..depth {
            layers.push(LayerSpec::Dense { out: hidden });
            layers.push(LayerSpec::Tanh);
        }
        layers.push(LayerSpec::Dense { out: outputs });
        NetSpec {
            input: InputSpec::Vector { dim: input },
            layers,
            seed,
            init_gain: 1.0,
            input_gain: None,
            input_bias_std: 0.0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        NetSpec {
            seed,
            ..self.clone()
        }
    }
}

/// Shape of the activations between two layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Dims {
    Flat(usize),
    Image { h: usize, w: usize, c: usize },
}

impl Dims {
    pub fn len(&self) -> usize {
        match *self {
            Dims::Flat(n) => n,
            Dims::Image { h, w, c } => h * w * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Dense { w: RealMatrix, b: DVector<f64> },
    Conv { conv: CircularConv, h: usize, w: usize },
    AvgPool { size: usize, h: usize, w: usize, c: usize },
    GlobalAvgPool { h: usize, w: usize, c: usize },
    Tanh,
    Relu,
}

/// Parameters of one parametric layer; dense weights row-major `out × in`,
/// conv kernels `out × in × k × k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Params {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-sample cost of one parametric layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerCost {
    macs: u64,
    outputs: u64,
    params: u64,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
    layers: Vec<Layer>,
    /// `dims[i]` is the input of layer `i`; the last entry is the output.
    dims: Vec<Dims>,
    /// Layer indices of the parametric layers.
    param_layers: Vec<usize>,
    /// For each parametric layer, the layer whose output is its
    /// representation (after any following parameter-free layers).
    taps: Vec<usize>,
}

impl Network {
    pub fn new(spec: &NetSpec) -> Result<Self> {
        let mut dims = vec![match spec.input {
            InputSpec::Vector { dim } if dim > 0 => Dims::Flat(dim),
            InputSpec::Image { size, channels } if size > 0 && channels > 0 => Dims::Image {
                h: size,
                w: size,
                c: channels,
            },
            _ => return Err(Error::Config("input dims must be positive".into())),
        }];
        let mut rng = fixtures::rng(spec.seed);
        let mut layers = Vec::new();
        let mut param_layers = Vec::new();
        for (i, ls) in spec.layers.iter().enumerate() {
            let input = *dims.last().unwrap();
            let first = param_layers.is_empty();
            let gain = match (first, spec.input_gain) {
                (true, Some(g)) => g,
                _ => spec.init_gain,
            };
            let bias_std = if first { spec.input_bias_std } else { 0.0 };
            let (layer, out) = match (*ls, input) {
                (LayerSpec::Dense { out }, _) if out > 0 => {
                    let fan_in = input.len();
                    let std = gain / (fan_in as f64).sqrt();
                    let w = RealMatrix::from_fn(out, fan_in, |_, _| std * rng.sample::<f64, _>(StandardNormal));
                    let b = DVector::from_fn(out, |_, _| bias_std * rng.sample::<f64, _>(StandardNormal));
                    param_layers.push(i);
                    (Layer::Dense { w, b }, Dims::Flat(out))
                }
                (LayerSpec::Conv { channels, kernel, stride }, Dims::Image { h, w, c })
                    if channels > 0 && kernel > 0 && kernel <= h && stride > 0 && h % stride == 0 && w % stride == 0 =>
                {
                    let std = gain / ((c * kernel * kernel) as f64).sqrt();
                    let weights = (0..channels * c * kernel * kernel)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let bias = (0..channels)
                        .map(|_| bias_std * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let conv = CircularConv::new(c, channels, kernel, stride, weights, bias)?;
                    param_layers.push(i);
                    (
                        Layer::Conv { conv, h, w },
                        Dims::Image {
                            h: h / stride,
                            w: w / stride,
                            c: channels,
                        },
                    )
                }
                (LayerSpec::AvgPool { size }, Dims::Image { h, w, c }) if size > 0 && h % size == 0 && w % size == 0 => (
                    Layer::AvgPool { size, h, w, c },
                    Dims::Image {
                        h: h / size,
                        w: w / size,
                        c,
                    },
                ),
                (LayerSpec::GlobalAvgPool, Dims::Image { h, w, c }) => (Layer::GlobalAvgPool { h, w, c }, Dims::Flat(c)),
                (LayerSpec::Tanh, d) => (Layer::Tanh, d),
                (LayerSpec::Relu, d) => (Layer::Relu, d),
                (ls, d) => {
                    return Err(Error::Config(format!(
                        "layer {i} ({ls:?}) does not fit its input {d:?}"
                    )))
                }
            };
            layers.push(layer);
            dims.push(out);
        }
        if param_layers.is_empty() {
            return Err(Error::Config("network has no parametric layer".into()));
        }
        let taps = param_layers
            .iter()
            .enumerate()
            .map(|(p, _)| match param_layers.get(p + 1) {
                Some(&next) => next - 1,
                None => layers.len() - 1,
            })
            .collect();
        Ok(Network {
            spec: spec.clone(),
            layers,
            dims,
            param_layers,
            taps,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn input_dims(&self) -> Dims {
        self.dims[0]
    }

    pub fn output_dims(&self) -> Dims {
        *self.dims.last().unwrap()
    }

    /// Number of parametric layers (= number of representations).
    pub fn depth(&self) -> usize {
        self.param_layers.len()
    }

    /// Representation names, bottom up; the last one is the output.
    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.depth()).map(|p| format!("layer{p}")).collect()
    }

    /// Shape of representation `p`.
    pub fn tap_dims(&self, p: usize) -> Dims {
        self.dims[self.taps[p] + 1]
    }

    pub fn params(&self) -> Vec<Params> {
        self.param_layers
            .iter()
            .map(|&i| match &self.layers[i] {
                Layer::Dense { w, b } => Params {
                    weights: (0..w.nrows()).flat_map(|r| w.row(r).iter().copied().collect::<Vec<_>>()).collect(),
                    bias: b.iter().copied().collect(),
                },
                Layer::Conv { conv, .. } => Params {
                    weights: conv.weights.clone(),
                    bias: conv.bias.clone(),
                },
                _ => unreachable!("param layer"),
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    /// Weights and bias of parametric layer `p` when it is dense.
    pub fn dense_layer(&self, p: usize) -> Option<(&RealMatrix, &DVector<f64>)> {
        match self.layers.get(*self.param_layers.get(p)?)? {
            Layer::Dense { w, b } => Some((w, b)),
            _ => None,
        }
    }

    fn cost(&self, p: usize) -> LayerCost {
        let i = self.param_layers[p];
        let out = self.dims[i + 1].len() as u64;
        match &self.layers[i] {
            Layer::Dense { w, .. } => LayerCost {
                macs: (w.nrows() * w.ncols()) as u64,
                outputs: out,
                params: (w.nrows() * w.ncols() + w.nrows()) as u64,
            },
            Layer::Conv { conv, .. } => {
                let per_out = (conv.in_channels * conv.kernel * conv.kernel) as u64;
                LayerCost {
                    macs: out * per_out,
                    outputs: out,
                    params: conv.weights.len() as u64 + conv.bias.len() as u64,
                }
            }
            _ => unreachable!("param layer"),
        }
    }

    fn forward_layer(&self, i: usize, x: &RealMatrix) -> RealMatrix {
        let batch = x.ncols();
        let per_column = |out_len: usize, f: &dyn Fn(&[f64]) -> Vec<f64>| {
            let in_len = x.nrows();
            let mut y = RealMatrix::zeros(out_len, batch);
            for b in 0..batch {
                let col = f(&x.as_slice()[b * in_len..(b + 1) * in_len]);
                y.column_mut(b).copy_from_slice(&col);
            }
            y
        };
        match &self.layers[i] {
            Layer::Dense { w, b } => {
                let mut y = w * x;
                for mut col in y.column_iter_mut() {
                    col += b;
                }
                y
            }
            Layer::Conv { conv, h, w } => per_column(self.dims[i + 1].len(), &|col| convdft::conv_sample(col, *h, *w, conv, false)),
            Layer::AvgPool { size, h, w, c } => {
                per_column(self.dims[i + 1].len(), &|col| convdft::avg_pool_sample(col, *h, *w, *c, *size))
            }
            Layer::GlobalAvgPool { h, w, c } => per_column(*c, &|col| {
                let mut out = vec![0.0; *c];
                for pos in 0..h * w {
                    for ch in 0..*c {
                        out[ch] += col[pos * c + ch];
                    }
                }
                out.iter().map(|v| v / (h * w) as f64).collect()
            }),
            Layer::Tanh => x.map(f64::tanh),
            Layer::Relu => x.map(|v| v.max(0.0)),
        }
    }

    /// Outputs of every layer; element 0 is the input.
    fn forward_all(&self, x: &RealMatrix, projections: &[(usize, &Projection)]) -> Vec<RealMatrix> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for i in 0..self.layers.len() {
            let mut y = self.forward_layer(i, acts.last().unwrap());
            for (p, proj) in projections {
                if self.taps[*p] == i {
                    y = proj.apply(&y);
                }
            }
            acts.push(y);
        }
        acts
    }

    pub fn predict(&self, x: &RealMatrix) -> RealMatrix {
        self.forward_all(x, &[]).pop().unwrap()
    }

    /// Output with representation `p` replaced by `proj(p)` for each pair.
    pub fn predict_projected(&self, x: &RealMatrix, projections: &[(usize, &Projection)]) -> RealMatrix {
        self.forward_all(x, projections).pop().unwrap()
    }

    /// Every representation over the given inputs, bottom up.
    pub fn representations(&self, x: &RealMatrix) -> Vec<RealMatrix> {
        let acts = self.forward_all(x, &[]);
        self.taps.iter().map(|&t| acts[t + 1].clone()).collect()
    }

    /// Representations with the given projections applied on the way up.
    pub fn representations_projected(&self, x: &RealMatrix, projections: &[(usize, &Projection)]) -> Vec<RealMatrix> {
        let acts = self.forward_all(x, projections);
        self.taps.iter().map(|&t| acts[t + 1].clone()).collect()
    }

    /// Representations wrapped as dense or conv activations.
    pub fn layer_activations(&self, x: &RealMatrix) -> Result<Vec<LayerActs>> {
        self.representations(x)
            .into_iter()
            .enumerate()
            .map(|(p, m)| LayerActs::from_matrix(m, self.tap_dims(p)))
            .collect()
    }

    /// Backward pass and SGD update. Layers frozen per `trainable` get no
    /// gradient; deltas stop below the lowest trainable layer.
    fn sgd_step(&mut self, acts: &[RealMatrix], grad_out: RealMatrix, trainable: &[bool], lr: f64, flops: &mut TrainFlops) {
        let batch = grad_out.ncols() as u64;
        let lowest = trainable.iter().position(|&t| t);
        let Some(lowest) = lowest else {
            for p in 0..self.depth() {
                flops.skip_layer(self.cost(p), batch, p > 0);
            }
            return;
        };
        let mut delta = grad_out;
        let mut p = self.depth();
        for i in (0..self.layers.len()).rev() {
            let is_param = matches!(self.layers[i], Layer::Dense { .. } | Layer::Conv { .. });
            if is_param {
                p -= 1;
            }
            let x = &acts[i];
            let y = &acts[i + 1];
            let train_here = is_param && trainable[p];
            let need_below = is_param && p > lowest;
            if is_param {
                let cost = self.cost(p);
                if train_here {
                    flops.backward += batch * (2 * cost.macs + cost.outputs);
                    flops.update += 2 * cost.params;
                } else {
                    flops.skipped += batch * (2 * cost.macs + cost.outputs) + 2 * cost.params;
                }
                if p > 0 {
                    if need_below {
                        flops.backward += batch * 2 * cost.macs;
                    } else {
                        flops.skipped += batch * 2 * cost.macs;
                    }
                }
            }
            let next = match &mut self.layers[i] {
                Layer::Dense { w, b } => {
                    let below = need_below.then(|| w.transpose() * &delta);
                    if train_here {
                        let gw = &delta * x.transpose();
                        let gb = delta.column_sum();
                        *w -= gw * lr;
                        *b -= gb * lr;
                    }
                    below
                }
                Layer::Conv { conv, h, w } => {
                    let (h, w) = (*h, *w);
                    let in_len = x.nrows();
                    let out_len = delta.nrows();
                    let mut gk = vec![0.0; conv.weights.len()];
                    let mut gb = vec![0.0; conv.bias.len()];
                    let mut below = need_below.then(|| RealMatrix::zeros(in_len, delta.ncols()));
                    for b in 0..delta.ncols() {
                        let dcol = &delta.as_slice()[b * out_len..(b + 1) * out_len];
                        let xcol = &x.as_slice()[b * in_len..(b + 1) * in_len];
                        let din = below.as_mut().map(|m| &mut m.as_mut_slice()[b * in_len..(b + 1) * in_len]);
                        conv_backward_sample(xcol, h, w, conv, dcol, train_here.then_some((&mut gk[..], &mut gb[..])), din);
                    }
                    if train_here {
                        conv.weights.iter_mut().zip(&gk).for_each(|(v, g)| *v -= lr * g);
                        conv.bias.iter_mut().zip(&gb).for_each(|(v, g)| *v -= lr * g);
                    }
                    below
                }
                Layer::AvgPool { size, h, w, c } => {
                    let (size, h, w, c) = (*size, *h, *w, *c);
                    let wo = w / size;
                    let norm = 1.0 / (size * size) as f64;
                    Some(RealMatrix::from_fn(h * w * c, delta.ncols(), |r, b| {
                        let (pos, ch) = (r / c, r % c);
                        let (i, j) = (pos / w, pos % w);
                        delta[(((i / size) * wo + j / size) * c + ch, b)] * norm
                    }))
                }
                Layer::GlobalAvgPool { h, w, c } => {
                    let (hw, c) = ((*h * *w) as f64, *c);
                    Some(RealMatrix::from_fn(x.nrows(), delta.ncols(), |r, b| delta[(r % c, b)] / hw))
                }
                Layer::Tanh => Some(delta.zip_map(y, |d, t| d * (1.0 - t * t))),
                Layer::Relu => Some(delta.zip_map(x, |d, v| if v > 0.0 { d } else { 0.0 })),
            };
            match next {
                Some(d) => delta = d,
                None => {
                    // Nothing below needs a gradient.
                    for q in (0..p).rev() {
                        flops.skip_layer(self.cost(q), batch, q > 0);
                    }
                    return;
                }
            }
        }
    }
}

fn conv_backward_sample(
    input: &[f64],
    h: usize,
    w: usize,
    conv: &CircularConv,
    delta: &[f64],
    mut grads: Option<(&mut [f64], &mut [f64])>,
    mut delta_in: Option<&mut [f64]>,
) {
    let (ho, wo) = (h / conv.stride, w / conv.stride);
    let (cin, cout, k) = (conv.in_channels, conv.out_channels, conv.kernel);
    for i in 0..ho {
        for j in 0..wo {
            for o in 0..cout {
                let g = delta[(i * wo + j) * cout + o];
                if g == 0.0 {
                    continue;
                }
                if let Some((_, gb)) = grads.as_mut() {
                    gb[o] += g;
                }
                for a in 0..k {
                    let ii = (i * conv.stride + a) % h;
                    for b in 0..k {
                        let src = (ii * w + (j * conv.stride + b) % w) * cin;
                        let kbase = (o * cin * k + a) * k + b;
                        for ci in 0..cin {
                            let kidx = kbase + ci * k * k;
                            if let Some((gk, _)) = grads.as_mut() {
                                gk[kidx] += g * input[src + ci];
                            }
                            if let Some(din) = delta_in.as_mut() {
                                din[src + ci] += g * conv.weights[kidx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Analytic flop tallies of a training run (forward, gradient, update).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrainFlops {
    pub forward: u64,
    pub backward: u64,
    pub update: u64,
    /// Gradient and update work not performed because of freezing.
    pub skipped: u64,
}

impl TrainFlops {
    fn skip_layer(&mut self, cost: LayerCost, batch: u64, has_below: bool) {
        self.skipped += batch * (2 * cost.macs + cost.outputs) + 2 * cost.params;
        if has_below {
            self.skipped += batch * 2 * cost.macs;
        }
    }
}

/// A representation over the probe set.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerActs {
    Dense(ActivationMatrix),
    Conv(ConvActivations),
}

impl LayerActs {
    fn from_matrix(m: RealMatrix, dims: Dims) -> Result<Self> {
        match dims {
            Dims::Flat(_) => Ok(LayerActs::Dense(ActivationMatrix::new(m)?)),
            Dims::Image { h, w, c } => {
                let d = m.ncols();
                let row_major = m.transpose().as_slice().to_vec();
                Ok(LayerActs::Conv(ConvTensor::new(h, w, c, d, row_major)?))
            }
        }
    }

    pub fn datapoints(&self) -> usize {
        match self {
            LayerActs::Dense(a) => a.datapoints(),
            LayerActs::Conv(c) => c.datapoints(),
        }
    }

    /// Dense as is; conv through the cross-layer view.
    pub fn matrix(&self) -> Result<ActivationMatrix> {
        match self {
            LayerActs::Dense(a) => Ok(a.clone()),
            LayerActs::Conv(c) => c.cross_layer_view(),
        }
    }

    pub fn to_dump(&self, name: &str, step: Option<u64>) -> ActivationDump {
        match self {
            LayerActs::Dense(a) => ActivationDump::dense(name, step, a.values()),
            LayerActs::Conv(c) => ActivationDump::conv(name, step, c),
        }
    }

    pub fn from_dump(dump: &ActivationDump) -> Result<Self> {
        if dump.is_conv() {
            Ok(LayerActs::Conv(dump.to_conv()?))
        } else {
            Ok(LayerActs::Dense(dump.to_activation_matrix()?))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(RealMatrix),
    Classes { labels: Vec<usize>, classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `features × samples`
    pub inputs: RealMatrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.ncols() == 0
    }

    fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_columns(idx),
            targets: match &self.targets {
                Targets::Regression(t) => Targets::Regression(t.select_columns(idx)),
                Targets::Classes { labels, classes } => Targets::Classes {
                    labels: idx.iter().map(|&i| labels[i]).collect(),
                    classes: *classes,
                },
            },
        }
    }
}

/// Training set plus the fixed probe set every checkpoint is recorded on.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub train: Dataset,
    pub probe: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean squared error or mean cross-entropy.
    pub loss: f64,
    pub accuracy: Option<f64>,
}

fn loss_and_grad(out: &RealMatrix, targets: &Targets) -> (f64, RealMatrix, Option<f64>) {
    let batch = out.ncols() as f64;
    match targets {
        Targets::Regression(t) => {
            let diff = out - t;
            let n = (out.nrows() * out.ncols()) as f64;
            let loss = diff.norm_squared() / n;
            (loss, diff * (2.0 / n), None)
        }
        Targets::Classes { labels, .. } => {
            let mut grad = RealMatrix::zeros(out.nrows(), out.ncols());
            let mut loss = 0.0;
            let mut correct = 0usize;
            for (b, &label) in labels.iter().enumerate() {
                let col = out.column(b);
                let max = col.max();
                let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
                loss += z.ln() + max - col[label];
                let best = (0..col.len()).fold(0, |best, r| if col[r] > col[best] { r } else { best });
                correct += (best == label) as usize;
                for r in 0..out.nrows() {
                    let p = (col[r] - max).exp() / z;
                    grad[(r, b)] = (p - (r == label) as u8 as f64) / batch;
                }
            }
            (loss / batch, grad, Some(correct as f64 / batch))
        }
    }
}

pub fn evaluate(net: &Network, data: &Dataset) -> Metrics {
    let (loss, _, accuracy) = loss_and_grad(&net.predict(&data.inputs), &data.targets);
    Metrics { loss, accuracy }
}

/// `h ↦ μ + M·(h − μ)`: a projection about the probe mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mean: DVector<f64>,
    pub matrix: RealMatrix,
}

impl Projection {
    pub fn new(mean: DVector<f64>, matrix: RealMatrix) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() != mean.len() {
            return Err(Error::Shape(format!(
                "projection {}x{} with mean of length {}",
                matrix.nrows(),
                matrix.ncols(),
                mean.len()
            )));
        }
        Ok(Projection { mean, matrix })
    }

    /// `projector` applied about the mean of `acts`.
    pub fn about_mean(acts: &ActivationMatrix, projector: RealMatrix) -> Result<Self> {
        Projection::new(DVector::from_vec(acts.means()), projector)
    }

    pub fn apply(&self, h: &RealMatrix) -> RealMatrix {
        let mut centered = h.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        let mut out = &self.matrix * centered;
        for mut col in out.column_iter_mut() {
            col += &self.mean;
        }
        out
    }
}

/// Metric with representation `layer` replaced by its projection; no
/// retraining.
pub fn eval_with_projection(net: &Network, layer: usize, projection: &Projection, data: &Dataset) -> Result<Metrics> {
    eval_with_projections(net, &[(layer, projection)], data)
}

pub fn eval_with_projections(net: &Network, projections: &[(usize, &Projection)], data: &Dataset) -> Result<Metrics> {
    for (p, proj) in projections {
        if *p >= net.depth() || net.tap_dims(*p).len() != proj.mean.len() {
            return Err(Error::Shape(format!("projection does not fit layer {p}")));
        }
    }
    let (loss, _, accuracy) = loss_and_grad(&net.predict_projected(&data.inputs, projections), &data.targets);
    Ok(Metrics { loss, accuracy })
}

/// Step at which each parametric layer stops updating (`None`: never).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSchedule {
    pub freeze_steps: Vec<Option<u64>>,
}

impl FreezeSchedule {
    /// Freeze steps must be non-decreasing bottom up; never-frozen layers
    /// may only sit on top.
    pub fn new(freeze_steps: Vec<Option<u64>>) -> Result<Self> {
        for pair in freeze_steps.windows(2) {
            match (pair[0], pair[1]) {
                (Some(a), Some(b)) if b < a => {
                    return Err(Error::Config(format!("freeze steps decrease ({a} then {b})")))
                }
                (None, Some(_)) => {
                    return Err(Error::Config("a never-frozen layer sits below a frozen one".into()))
                }
                _ => {}
            }
        }
        Ok(FreezeSchedule { freeze_steps })
    }

    /// Layer `i` of the lowest `frozen` (1-based) stops at `⌈steps·i/frozen⌉`;
    /// layers above those are never frozen.
    pub fn linear(layers: usize, frozen: usize, steps: u64) -> Self {
        let frozen = frozen.min(layers) as u64;
        let freeze_steps = (1..=layers as u64)
            .map(|i| (i <= frozen).then(|| (steps * i).div_ceil(frozen)))
            .collect();
        FreezeSchedule { freeze_steps }
    }

    pub fn all_at(layers: usize, step: u64) -> Self {
        FreezeSchedule {
            freeze_steps: vec![Some(step); layers],
        }
    }

    /// True when the update taking step `t` to `t + 1` skips layer `p`.
    pub fn is_frozen(&self, p: usize, t: u64) -> bool {
        self.freeze_steps.get(p).copied().flatten().is_some_and(|s| t >= s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Checkpoint at step 0, every `checkpoint_every` steps and at the end.
    pub checkpoint_every: u64,
    /// Seeds minibatch order.
    #[serde(default)]
    pub shuffle_seed: u64,
}

/// Named representation at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub acts: LayerActs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub layers: Vec<LayerRecord>,
    pub params: Vec<Params>,
    pub probe: Metrics,
}

/// Checkpoints of one run, all recorded on the same probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSet {
    pub model_id: String,
    pub dataset_id: String,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl CheckpointSet {
    pub fn last(&self) -> &CheckpointRecord {
        self.checkpoints.last().expect("at least one checkpoint")
    }

    pub fn steps(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|c| c.step).collect()
    }

    /// Writes one dump per layer per checkpoint plus `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut checkpoints = Vec::new();
        for cp in &self.checkpoints {
            let mut layers = Vec::new();
            for rec in &cp.layers {
                let file = format!("{}_step{:08}_{}.dump", self.model_id, cp.step, rec.name);
                tensorio::write_dump(&rec.acts.to_dump(&rec.name, Some(cp.step)), dir.join(&file))?;
                layers.push(LayerEntry {
                    name: rec.name.clone(),
                    path: file.into(),
                });
            }
            checkpoints.push(ManifestCheckpoint { step: cp.step, layers });
        }
        let manifest = Manifest {
            model_id: self.model_id.clone(),
            dataset_id: self.dataset_id.clone(),
            datapoint_count: self.last().layers[0].acts.datapoints(),
            checkpoints,
        };
        tensorio::save_manifest(&manifest, dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

/// Final network, checkpoints and flop tallies of one training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub network: Network,
    pub checkpoints: CheckpointSet,
    pub flops: TrainFlops,
    pub train: Metrics,
    pub probe: Metrics,
}

fn record(net: &Network, step: u64, task: &Task) -> Result<CheckpointRecord> {
    let names = net.layer_names();
    let layers = net
        .layer_activations(&task.probe.inputs)?
        .into_iter()
        .zip(names)
        .map(|(acts, name)| LayerRecord { name, acts })
        .collect();
    Ok(CheckpointRecord {
        step,
        layers,
        params: net.params(),
        probe: evaluate(net, &task.probe),
    })
}

/// Minibatch SGD from the network's seeded initialisation.
pub fn train(spec: &NetSpec, task: &Task, config: &TrainConfig, freeze: Option<&FreezeSchedule>) -> Result<TrainRun> {
    let mut net = Network::new(spec)?;
    if task.train.inputs.nrows() != net.input_dims().len() {
        return Err(Error::Config(format!(
            "task inputs have {} features, network expects {}",
            task.train.inputs.nrows(),
            net.input_dims().len()
        )));
    }
    if config.steps == 0 || config.batch_size == 0 || config.checkpoint_every == 0 {
        return Err(Error::Config("steps, batch_size and checkpoint_every must be positive".into()));
    }
    if let Some(f) = freeze {
        if f.freeze_steps.len() != net.depth() {
            return Err(Error::Config(format!(
                "freeze schedule lists {} layers, network has {}",
                f.freeze_steps.len(),
                net.depth()
            )));
        }
    }
    let n = task.train.len();
    let batch = config.batch_size.min(n);
    let mut rng = fixtures::rng(config.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut flops = TrainFlops::default();
    let mut checkpoints = vec![record(&net, 0, task)?];
    let forward_cost: u64 = (0..net.depth()).map(|p| net.cost(p)).map(|c| 2 * c.macs + c.outputs).sum();
    for t in 0..config.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let data = task.train.select(&order[cursor..cursor + batch]);
        cursor += batch;
        let trainable: Vec<bool> = (0..net.depth())
            .map(|p| !freeze.is_some_and(|f| f.is_frozen(p, t)))
            .collect();
        let acts = net.forward_all(&data.inputs, &[]);
        flops.forward += batch as u64 * forward_cost;
        let (loss, grad, _) = loss_and_grad(acts.last().unwrap(), &data.targets);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: t as usize,
                loss,
            });
        }
        net.sgd_step(&acts, grad, &trainable, config.learning_rate, &mut flops);
        let step = t + 1;
        if step % config.checkpoint_every == 0 || step == config.steps {
            checkpoints.push(record(&net, step, task)?);
        }
    }
    let train = evaluate(&net, &task.train);
    let probe = evaluate(&net, &task.probe);
    if !train.loss.is_finite() {
        return Err(Error::Diverged {
            step: config.steps as usize,
            loss: train.loss,
        });
    }
    Ok(TrainRun {
        checkpoints: CheckpointSet {
            model_id: format!("{}-seed{}", task.name, spec.seed),
            dataset_id: format!("{}-probe", task.name),
            checkpoints,
        },
        network: net,
        flops,
        train,
        probe,
    })
}

/// Closed-form count of the gradient and update flops a schedule skips.
pub fn predicted_skipped_flops(net: &Network, schedule: &FreezeSchedule, steps: u64, batch: usize) -> u64 {
    let batch = batch as u64;
    let frozen_for = |s: Option<u64>| s.map_or(0, |s| steps - s.min(steps));
    let mut total = 0;
    let mut all_below_frozen_since: Option<u64> = None;
    for p in 0..net.depth() {
        let c = net.cost(p);
        let s = schedule.freeze_steps[p];
        total += frozen_for(s) * (batch * (2 * c.macs + c.outputs) + 2 * c.params);
        if p > 0 {
            total += frozen_for(all_below_frozen_since) * batch * 2 * c.macs;
        }
        all_below_frozen_since = match (p, all_below_frozen_since, s) {
            (0, _, s) => s,
            (_, Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
    }
    total
}

/// Two runs of one architecture that differ only in the initialisation
/// seed.
pub fn two_inits_experiment(spec: &NetSpec, task: &Task, config: &TrainConfig, seeds: (u64, u64)) -> Result<(TrainRun, TrainRun)> {
    let a = train(&spec.with_seed(seeds.0), task, config, None)?;
    let b = train(&spec.with_seed(seeds.1), task, config, None)?;
    Ok((a, b))
}

/// The four regression targets, in output order.
pub fn regression_targets(x: f64) -> [f64; 4] {
    [
        (3.0 * x).sin(),
        // x·exp(−x²) scaled to peak at 1.
        2.331_643_981_597_124 * x * (-x * x).exp(),
        (2.0 * x).sin().abs() * (-(x / PI).powi(2)).exp(),
        (2.0 * x).tanh(),
    ]
}

pub const REGRESSION_RANGE: f64 = 2.0 * PI;
pub const REGRESSION_GRID: usize = 2000;
pub const REGRESSION_PROBE: usize = 500;

fn regression_dataset(xs: &[f64]) -> Dataset {
    let inputs = RealMatrix::from_fn(1, xs.len(), |_, j| xs[j] / REGRESSION_RANGE);
    let targets = RealMatrix::from_fn(4, xs.len(), |r, j| regression_targets(xs[j])[r]);
    Dataset {
        inputs,
        targets: Targets::Regression(targets),
    }
}

/// One input on `[−2π, 2π]` (scaled to `[−1, 1]`), four targets. Training
/// uses a fixed 2000-point grid; the probe set is 500 uniform draws from
/// the seed.
pub fn toy_regression_task(seed: u64) -> Task {
    let step = 2.0 * REGRESSION_RANGE / (REGRESSION_GRID - 1) as f64;
    let grid: Vec<f64> = (0..REGRESSION_GRID).map(|i| -REGRESSION_RANGE + step * i as f64).collect();
    let mut rng = fixtures::rng(seed);
    let mut probe: Vec<f64> = (0..REGRESSION_PROBE)
        .map(|_| rng.random_range(-REGRESSION_RANGE..=REGRESSION_RANGE))
        .collect();
    probe.sort_by(f64::total_cmp);
    Task {
        name: "toy-regression".into(),
        train: regression_dataset(&grid),
        probe: regression_dataset(&probe),
    }
}

/// Frequency `(u, v)` that defines class `k`: classes come in pairs sharing
/// a frequency magnitude, one horizontal and one vertical.
pub fn class_frequency(k: usize) -> (usize, usize) {
    let q = 1 + 2 * (k / 2);
    if k.is_multiple_of(2) {
        (q, 0)
    } else {
        (0, q)
    }
}

/// Options for [`synthetic_conv_task`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvTaskSpec {
    pub size: usize,
    pub channels: usize,
    pub classes: usize,
    /// Base images per class (before augmentation).
    pub per_class: usize,
    pub noise: f64,
    /// Include every cyclic shift of every base image.
    pub augment: bool,
}

fn conv_images(spec: &ConvTaskSpec, seed: u64) -> Result<(ConvActivations, Vec<usize>)> {
    let n = spec.size;
    let mut rng = fixtures::rng(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for k in 0..spec.classes {
        let (u, v) = class_frequency(k);
        let amps: Vec<f64> = (0..spec.channels).map(|ch| 1.0 - 0.3 * ch as f64 / spec.channels as f64).collect();
        for _ in 0..spec.per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut img = Vec::with_capacity(n * n * spec.channels);
            for i in 0..n {
                for j in 0..n {
                    let wave = (2.0 * PI * (u * i + v * j) as f64 / n as f64 + phase).cos();
                    for amp in &amps {
                        img.push(amp * wave + spec.noise * rng.sample::<f64, _>(StandardNormal));
                    }
                }
            }
            points.push(img);
            labels.push(k);
        }
    }
    let images = ConvTensor::from_datapoints(n, n, spec.channels, &points)?;
    if !spec.augment {
        return Ok((images, labels));
    }
    let shifts = n * n;
    let augmented = convdft::augment_translations(&images, TranslationSpec::default())?;
    let labels = labels.iter().flat_map(|&l| std::iter::repeat_n(l, shifts)).collect();
    Ok((augmented, labels))
}

fn image_dataset(images: &ConvActivations, labels: Vec<usize>, classes: usize) -> Dataset {
    let (h, w, c, d) = images.dims();
    Dataset {
        inputs: RealMatrix::from_row_slice(h * w * c, d, images.values()),
        targets: Targets::Classes { labels, classes },
    }
}

/// Images whose class is set by a spatial frequency, with a random phase
/// per image, so labels are invariant under every cyclic shift. The probe
/// set is drawn independently from the same distribution.
pub fn synthetic_conv_task(spec: &ConvTaskSpec, seed: u64) -> Result<Task> {
    if spec.size == 0 || spec.size > 16 || spec.channels == 0 || spec.classes == 0 || spec.per_class == 0 {
        return Err(Error::InvalidArgument("conv task needs 1 ≤ size ≤ 16 and positive counts".into()));
    }
    let (u, v) = class_frequency(spec.classes - 1);
    if u.max(v) > spec.size / 2 {
        return Err(Error::InvalidArgument(format!(
            "{} classes need frequencies above the Nyquist limit of a {}-pixel image",
            spec.classes, spec.size
        )));
    }
    let (train, train_labels) = conv_images(spec, seed)?;
    let (probe, probe_labels) = conv_images(spec, seed ^ 0x005e_ed0f_9b0e)?;
    Ok(Task {
        name: "synthetic-conv".into(),
        train: image_dataset(&train, train_labels, spec.classes),
        probe: image_dataset(&probe, probe_labels, spec.classes),
    })
}

/// Images of a dataset as a conv tensor.
pub fn dataset_images(data: &Dataset, size: usize, channels: usize) -> Result<ConvActivations> {
    ConvTensor::new(size, size, channels, data.len(), data.inputs.transpose().as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_regression() -> Task {
        let mut t = toy_regression_task(1);
        t.train = t.train.select(&(0..2000).step_by(10).collect::<Vec<_>>());
        t
    }

    fn config(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 16,
            learning_rate: 0.05,
            checkpoint_every: 5,
            shuffle_seed: 3,
        }
    }

    /// Central finite differences on the loss.
    fn numeric_grad_check(spec: &NetSpec, data: &Dataset) {
        let net = Network::new(spec).unwrap();
        let lr = 1e-3;
        let mut stepped = net.clone();
        let acts = net.forward_all(&data.inputs, &[]);
        let (_, grad, _) = loss_and_grad(acts.last().unwrap(), &data.targets);
        let trainable = vec![true; net.depth()];
        stepped.sgd_step(&acts, grad, &trainable, lr, &mut TrainFlops::default());
        let before = net.params();
        let after = stepped.params();
        let h = 1e-6;
        for (p, (b, a)) in before.iter().zip(&after).enumerate() {
            for idx in [0, b.weights.len() / 2, b.weights.len() - 1] {
                let analytic = (b.weights[idx] - a.weights[idx]) / lr;
                let perturbed = |delta: f64| {
                    let mut n2 = net.clone();
                    let i = n2.param_layers[p];
                    match &mut n2.layers[i] {
                        Layer::Dense { w, .. } => {
                            let (r, c) = (idx / w.ncols(), idx % w.ncols());
                            w[(r, c)] += delta;
                        }
                        Layer::Conv { conv, .. } => conv.weights[idx] += delta,
                        _ => unreachable!(),
                    }
                    evaluate(&n2, data).loss
                };
                let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                assert!(
                    (analytic - numeric).abs() <= 1e-5 * (1.0 + numeric.abs()),
                    "layer {p} weight {idx}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let spec = NetSpec {
            input_bias_std: 0.3,
            ..NetSpec::mlp(1, 7, 2, 4, 5)
        };
        let t = tiny_regression();
        numeric_grad_check(&spec, &t.train.select(&[0, 50, 120, 199]));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let spec = NetSpec {
            input: InputSpec::Image { size: 4, channels: 2 },
            layers: vec![
                LayerSpec::Conv { channels: 3, kernel: 3, stride: 1 },
                LayerSpec::Tanh,
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Conv { channels: 2, kernel: 2, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out: 3 },
            ],
            seed: 4,
            init_gain: 1.0,
            input_gain: None,
            input_bias_std: 0.2,
        };
        let task = synthetic_conv_task(
            &ConvTaskSpec {
                size: 4,
                channels: 2,
                classes: 3,
                per_class: 2,
                noise: 0.3,
                augment: false,
            },
            6,
        );
        // three classes need frequency 3 > 4/2
        assert!(task.is_err());
        let task = synthetic_conv_task(
            &ConvTaskSpec {
                size: 4,
                channels: 2,
                classes: 2,
                per_class: 3,
                noise: 0.3,
                augment: false,
            },
            6,
        )
        .unwrap();
        let mut data = task.train.clone();
        data.targets = Targets::Classes {
            labels: vec![0, 2, 1, 0, 1, 2],
            classes: 3,
        };
        numeric_grad_check(&spec, &data);
    }

    #[test]
    fn spec_validation() {
        let mut spec = NetSpec::mlp(1, 4, 1, 2, 0);
        spec.layers.insert(0, LayerSpec::GlobalAvgPool);
        assert!(Network::new(&spec).is_err());
        let spec = NetSpec {
            input: InputSpec::Image { size: 6, channels: 1 },
            layers: vec![LayerSpec::Conv { channels: 2, kernel: 3, stride: 4 }],
            ..NetSpec::mlp(1, 1, 0, 1, 0)
        };
        assert!(Network::new(&spec).is_err());
        let net = Network::new(&NetSpec::mlp(1, 200, 4, 4, 0)).unwrap();
        assert_eq!(net.depth(), 5);
        assert_eq!(net.tap_dims(3), Dims::Flat(200));
        assert_eq!(net.param_count(), 200 * 2 + 3 * 200 * 201 + 4 * 201);
    }

    #[test]
    fn regression_task_is_deterministic_and_bounded() {
        let a = toy_regression_task(9);
        assert_eq!(a, toy_regression_task(9));
        assert_ne!(a.probe, toy_regression_task(10).probe);
        let Targets::Regression(t) = &a.train.targets else { panic!() };
        assert!(t.iter().all(|v| v.is_finite() && v.abs() <= 1.5));
        assert_eq!(a.train.len(), 2000);
        let peak = regression_targets(std::f64::consts::FRAC_1_SQRT_2)[1];
        assert!((peak - 1.0).abs() < 1e-12);
    }

    #[test]
    fn freeze_all_keeps_initial_weights() {
        let spec = NetSpec::mlp(1, 8, 2, 4, 1);
        let task = tiny_regression();
        let sched = FreezeSchedule::all_at(3, 0);
        let run = train(&spec, &task, &config(20), Some(&sched)).unwrap();
        assert_eq!(run.network.params(), Network::new(&spec).unwrap().params());
        assert_eq!(run.flops.backward + run.flops.update, 0);
        assert_eq!(run.flops.skipped, predicted_skipped_flops(&run.network, &sched, 20, 16));
    }

    #[test]
    fn linear_schedule_and_validation() {
        let s = FreezeSchedule::linear(5, 4, 10);
        assert_eq!(s.freeze_steps, vec![Some(3), Some(5), Some(8), Some(10), None]);
        assert!(FreezeSchedule::new(vec![Some(5), Some(3)]).is_err());
        assert!(FreezeSchedule::new(vec![None, Some(3)]).is_err());
        assert!(FreezeSchedule::new(vec![Some(1), Some(1), None]).is_ok());
        assert!(s.is_frozen(0, 3) && !s.is_frozen(0, 2) && !s.is_frozen(4, 1000));
    }

    #[test]
    fn frozen_layers_stay_bit_identical_and_flops_match() {
        let spec = NetSpec::mlp(1, 8, 4, 4, 2);
        let task = tiny_regression();
        let steps = 23;
        let sched = FreezeSchedule::linear(5, 4, steps);
        let mut cfg = config(steps);
        cfg.checkpoint_every = 1;
        let run = train(&spec, &task, &cfg, Some(&sched)).unwrap();
        for (p, s) in sched.freeze_steps.iter().enumerate() {
            let Some(s) = s else { continue };
            let at_freeze = &run.checkpoints.checkpoints[*s as usize].params[p];
            for cp in &run.checkpoints.checkpoints[*s as usize..] {
                assert_eq!(&cp.params[p], at_freeze);
            }
        }
        assert_eq!(run.flops.skipped, predicted_skipped_flops(&run.network, &sched, steps, 16));
        let free = train(&spec, &task, &cfg, None).unwrap();
        assert_eq!(free.flops.skipped, 0);
        assert_eq!(
            free.flops.backward + free.flops.update,
            run.flops.backward + run.flops.update + run.flops.skipped
        );
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_scheduled() {
        let spec = NetSpec::mlp(1, 8, 2, 4, 7);
        let task = tiny_regression();
        let a = train(&spec, &task, &config(12), None).unwrap();
        let b = train(&spec, &task, &config(12), None).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.checkpoints.steps(), vec![0, 5, 10, 12]);
        assert_eq!(a.checkpoints.last().layers.len(), 3);
    }

    #[test]
    fn divergence_is_reported() {
        let spec = NetSpec::mlp(1, 8, 2, 4, 7);
        let mut cfg = config(200);
        cfg.learning_rate = 1e6;
        let err = train(&spec, &tiny_regression(), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn full_projection_is_identity() {
        let net = Network::new(&NetSpec::mlp(1, 6, 2, 4, 3)).unwrap();
        let task = tiny_regression();
        let reps = net.representations(&task.probe.inputs);
        let acts = ActivationMatrix::new(reps[1].clone()).unwrap();
        let proj = Projection::about_mean(&acts, RealMatrix::identity(6, 6)).unwrap();
        let full = evaluate(&net, &task.probe);
        let projected = eval_with_projection(&net, 1, &proj, &task.probe).unwrap();
        assert!((full.loss - projected.loss).abs() < 1e-10);
    }

    #[test]
    fn conv_labels_survive_shifts() {
        let spec = ConvTaskSpec {
            size: 8,
            channels: 2,
            classes: 4,
            per_class: 2,
            noise: 0.0,
            augment: true,
        };
        let task = synthetic_conv_task(&spec, 11).unwrap();
        assert_eq!(task.train.len(), 4 * 2 * 64);
        let images = dataset_images(&task.train, 8, 2).unwrap();
        let twice = convdft::augment_translations(&images, TranslationSpec::default()).unwrap();
        assert_eq!(twice.datapoints(), images.datapoints() * 64);
        // Every shift of a noiseless image keeps its dominant frequency.
        let spectra = convdft::dft_preprocess(&images).unwrap();
        let Targets::Classes { labels, .. } = &task.train.targets else { panic!() };
        for p in (0..images.datapoints()).step_by(17) {
            let (u, v) = class_frequency(labels[p]);
            let mag = spectra.get(u, v, 0, p).norm();
            for i in 0..8 {
                for j in 0..8 {
                    if (i, j) != (u, v) && (i, j) != ((8 - u) % 8, (8 - v) % 8) {
                        assert!(spectra.get(i, j, 0, p).norm() < 1e-9 * mag.max(1.0));
                    }
                }
            }
        }
    }
}
