//! Convolutional layers: the two reshaping views, cyclic translation
//! augmentation, circular convolutions, and the exact frequency-block SVCCA
//! route.
//!
//! With a dataset closed under cyclic shifts and only circular conv/pool
//! layers below, the per-channel 2-D DFT makes the covariance between any
//! two conv layers block diagonal: entries linking different frequencies
//! vanish, leaving `n²` blocks of `c₁ × c₂`. SVCCA then runs block by block.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cca::{self, ActivationMatrix};
use crate::error::{Error, Result};
use crate::flops::{self, FlopCounter};
use crate::linalg::{self, Complex64, ComplexMatrix, Dft, RealMatrix, Scalar};
use crate::par;
use crate::svcca::{self, Similarity};

/// `h × w × c × d` tensor, datapoints last. Element `(i, j, ch, p)` lives at
/// `((i·w + j)·c + ch)·d + p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTensor<T> {
    h: usize,
    w: usize,
    c: usize,
    d: usize,
    values: Vec<T>,
}

/// Real activations of a conv layer (or an image dataset).
pub type ConvActivations = ConvTensor<f64>;
/// Per-channel DFT of a conv layer; `(i, j)` index frequencies.
pub type SpectralActivations = ConvTensor<Complex64>;

impl<T: Scalar> ConvTensor<T> {
    pub fn new(h: usize, w: usize, c: usize, d: usize, values: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || d == 0 {
            return Err(Error::Shape(format!(
                "conv dims must be positive, got {h}x{w}x{c}x{d}"
            )));
        }
        if values.len() != h * w * c * d {
            return Err(Error::Shape(format!(
                "{} values for a {h}x{w}x{c}x{d} tensor",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite_value()) {
            return Err(Error::NonFinite { index });
        }
        Ok(ConvTensor { h, w, c, d, values })
    }

    pub fn zeros(h: usize, w: usize, c: usize, d: usize) -> Self {
        ConvTensor {
            h,
            w,
            c,
            d,
            values: vec![T::zero(); h * w * c * d],
        }
    }

    /// `(h, w, c, d)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.h, self.w, self.c, self.d)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn datapoints(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, ch: usize, p: usize) -> usize {
        ((i * self.w + j) * self.c + ch) * self.d + p
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, ch: usize, p: usize) -> T {
        self.values[self.index(i, j, ch, p)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, ch: usize, p: usize, v: T) {
        let k = self.index(i, j, ch, p);
        self.values[k] = v;
    }

    /// `hwc × d` matrix; neuron order is h-major, then w, then c.
    pub fn cross_layer_matrix(&self) -> DMatrix<T> {
        DMatrix::from_row_slice(self.h * self.w * self.c, self.d, &self.values)
    }

    /// `c × hwd` matrix; each row is one channel over (h, w, d) in that order.
    pub fn same_layer_matrix(&self) -> DMatrix<T> {
        let cols = self.h * self.w * self.d;
        let mut m = DMatrix::<T>::zeros(self.c, cols);
        for i in 0..self.h {
            for j in 0..self.w {
                for ch in 0..self.c {
                    for p in 0..self.d {
                        m[(ch, (i * self.w + j) * self.d + p)] = self.get(i, j, ch, p);
                    }
                }
            }
        }
        m
    }

    /// Channel `ch` of datapoint `p` as a row-major `h × w` buffer.
    pub fn channel(&self, ch: usize, p: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.h * self.w);
        for i in 0..self.h {
            for j in 0..self.w {
                out.push(self.get(i, j, ch, p));
            }
        }
        out
    }

    /// `c × d` matrix of the values at spatial position (or frequency)
    /// `(i, j)`.
    pub fn position(&self, i: usize, j: usize) -> DMatrix<T> {
        let start = self.index(i, j, 0, 0);
        DMatrix::from_row_slice(self.c, self.d, &self.values[start..start + self.c * self.d])
    }

    /// Datapoint `p` shifted cyclically: `out[i][j] = in[(i+a) mod h][(j+b) mod w]`.
    pub fn shifted_datapoint(&self, p: usize, a: usize, b: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.h * self.w * self.c);
        for i in 0..self.h {
            for j in 0..self.w {
                for ch in 0..self.c {
                    out.push(self.get((i + a) % self.h, (j + b) % self.w, ch, p));
                }
            }
        }
        out
    }

    /// Datapoint `p` as an `(h, w, c)` buffer.
    pub fn datapoint(&self, p: usize) -> Vec<T> {
        self.shifted_datapoint(p, 0, 0)
    }

    /// Builds a tensor from per-datapoint `(h, w, c)` buffers.
    pub fn from_datapoints(h: usize, w: usize, c: usize, points: &[Vec<T>]) -> Result<Self> {
        let d = points.len();
        let mut t = ConvTensor::zeros(h, w, c, d);
        for (p, buf) in points.iter().enumerate() {
            if buf.len() != h * w * c {
                return Err(Error::Shape(format!(
                    "datapoint {p} has {} values, expected {}",
                    buf.len(),
                    h * w * c
                )));
            }
            for (k, v) in buf.iter().enumerate() {
                t.values[k * d + p] = *v;
            }
        }
        ConvTensor::new(h, w, c, d, t.values)
    }
}

impl ConvActivations {
    /// Channels as neurons over `hwd` datapoints.
    pub fn same_layer_view(&self) -> Result<ActivationMatrix> {
        ActivationMatrix::new(self.same_layer_matrix())
    }

    /// `hwc` neurons over `d` datapoints.
    pub fn cross_layer_view(&self) -> Result<ActivationMatrix> {
        ActivationMatrix::new(self.cross_layer_matrix())
    }

    /// Inverse of [`ConvTensor::same_layer_matrix`].
    pub fn from_same_layer_view(view: &ActivationMatrix, h: usize, w: usize) -> Result<Self> {
        let c = view.neurons();
        let cols = view.datapoints();
        if h == 0 || w == 0 || !cols.is_multiple_of(h * w) {
            return Err(Error::Shape(format!(
                "{cols} columns cannot be split into {h}x{w} positions"
            )));
        }
        let d = cols / (h * w);
        let mut t = ConvTensor::zeros(h, w, c, d);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for p in 0..d {
                        t.set(i, j, ch, p, view.values()[(ch, (i * w + j) * d + p)]);
                    }
                }
            }
        }
        Ok(t)
    }

    /// Inverse of [`ConvTensor::cross_layer_matrix`].
    pub fn from_cross_layer_view(view: &ActivationMatrix, h: usize, w: usize) -> Result<Self> {
        let rows = view.neurons();
        if h == 0 || w == 0 || !rows.is_multiple_of(h * w) {
            return Err(Error::Shape(format!(
                "{rows} neurons cannot be split into {h}x{w} positions"
            )));
        }
        ConvTensor::new(h, w, rows / (h * w), view.datapoints(), view.to_row_major())
    }
}

/// Cyclic shift strides `τ_{a,b} = (stride_h·a, stride_w·b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationSpec {
    pub stride_h: usize,
    pub stride_w: usize,
}

impl Default for TranslationSpec {
    fn default() -> Self {
        TranslationSpec {
            stride_h: 1,
            stride_w: 1,
        }
    }
}

/// Every cyclic shift `(a·stride_h, b·stride_w)` of every image, applied to
/// all channels at once. Datapoint `p·S + a·(w/stride_w) + b` of the output
/// is image `p` shifted by `(a·stride_h, b·stride_w)`.
pub fn augment_translations(images: &ConvActivations, spec: TranslationSpec) -> Result<ConvActivations> {
    let (h, w, c, d) = images.dims();
    if h != w {
        return Err(Error::Shape(format!("augmentation needs square images, got {h}x{w}")));
    }
    if spec.stride_h == 0 || spec.stride_w == 0 || h % spec.stride_h != 0 || w % spec.stride_w != 0 {
        return Err(Error::InvalidArgument(format!(
            "strides ({}, {}) must divide the image size {h}",
            spec.stride_h, spec.stride_w
        )));
    }
    let (na, nb) = (h / spec.stride_h, w / spec.stride_w);
    let mut points = Vec::with_capacity(d * na * nb);
    for p in 0..d {
        for a in 0..na {
            for b in 0..nb {
                points.push(images.shifted_datapoint(p, a * spec.stride_h, b * spec.stride_w));
            }
        }
    }
    ConvTensor::from_datapoints(h, w, c, &points)
}

/// Average pooling over non-overlapping `size × size` windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    None,
    Average(usize),
}

/// A circular-boundary convolution, `weights` laid out `out × in × k × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CircularConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl CircularConv {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != out_channels * in_channels * kernel * kernel || bias.len() != out_channels {
            return Err(Error::Shape(format!(
                "kernel tensor {} / bias {} do not match {out_channels}x{in_channels}x{kernel}x{kernel}",
                weights.len(),
                bias.len()
            )));
        }
        if stride == 0 || kernel == 0 {
            return Err(Error::InvalidArgument("kernel and stride must be positive".into()));
        }
        Ok(CircularConv {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights,
            bias,
        })
    }

    /// Gaussian kernels scaled by `1/√(in·k²)`, zero bias.
    pub fn random(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, seed: u64) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let g = crate::fixtures::gaussian(1, out_channels * in_channels * kernel * kernel, seed);
        let weights = g.iter().map(|v| v / fan_in.sqrt()).collect();
        CircularConv {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights,
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    pub fn weight(&self, o: usize, ci: usize, a: usize, b: usize) -> f64 {
        self.weights[((o * self.in_channels + ci) * self.kernel + a) * self.kernel + b]
    }
}

/// Circular convolution of one `(h, w, c_in)` buffer, optionally followed by
/// ReLU. Output is `(h/stride, w/stride, c_out)`.
pub(crate) fn conv_sample(input: &[f64], h: usize, w: usize, conv: &CircularConv, relu: bool) -> Vec<f64> {
    let (ho, wo) = (h / conv.stride, w / conv.stride);
    let (cin, cout, k) = (conv.in_channels, conv.out_channels, conv.kernel);
    let mut out = vec![0.0; ho * wo * cout];
    for i in 0..ho {
        for j in 0..wo {
            let base = (i * wo + j) * cout;
            out[base..base + cout].copy_from_slice(&conv.bias);
            for a in 0..k {
                let ii = (i * conv.stride + a) % h;
                for b in 0..k {
                    let jj = (j * conv.stride + b) % w;
                    let src = &input[(ii * w + jj) * cin..(ii * w + jj + 1) * cin];
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for (ci, x) in src.iter().enumerate() {
                            acc += conv.weight(o, ci, a, b) * x;
                        }
                        out[base + o] += acc;
                    }
                }
            }
            if relu {
                for v in &mut out[base..base + cout] {
                    *v = v.max(0.0);
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_sample(input: &[f64], h: usize, w: usize, c: usize, size: usize) -> Vec<f64> {
    let (ho, wo) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; ho * wo * c];
    for i in 0..h {
        for j in 0..w {
            let dst = ((i / size) * wo + j / size) * c;
            for ch in 0..c {
                out[dst + ch] += input[(i * w + j) * c + ch] * norm;
            }
        }
    }
    out
}

/// Forward pass of a circular convolution (+ optional ReLU and average
/// pooling) over every datapoint.
pub fn circular_conv_forward(images: &ConvActivations, conv: &CircularConv, relu: bool, pool: Pooling) -> Result<ConvActivations> {
    let (h, w, c, d) = images.dims();
    if c != conv.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {c}",
            conv.in_channels
        )));
    }
    if conv.kernel > h || conv.kernel > w {
        return Err(Error::Shape(format!(
            "kernel {} larger than input {h}x{w}",
            conv.kernel
        )));
    }
    if h % conv.stride != 0 || w % conv.stride != 0 {
        return Err(Error::Shape(format!(
            "stride {} does not divide input {h}x{w}",
            conv.stride
        )));
    }
    let (mut ho, mut wo) = (h / conv.stride, w / conv.stride);
    if let Pooling::Average(size) = pool {
        if size == 0 || ho % size != 0 || wo % size != 0 {
            return Err(Error::Shape(format!(
                "pool window {size} does not tile {ho}x{wo}"
            )));
        }
    }
    let outs: Vec<Vec<f64>> = par::map_range(d, |p| {
        let y = conv_sample(&images.datapoint(p), h, w, conv, relu);
        match pool {
            Pooling::None => y,
            Pooling::Average(size) => avg_pool_sample(&y, ho, wo, conv.out_channels, size),
        }
    });
    if let Pooling::Average(size) = pool {
        ho /= size;
        wo /= size;
    }
    ConvTensor::from_datapoints(ho, wo, conv.out_channels, &outs)
}

/// Per-channel, per-datapoint unitary 2-D DFT.
pub fn dft_preprocess(acts: &ConvActivations) -> Result<SpectralActivations> {
    dft_preprocess_counted(acts, None)
}

fn dft_preprocess_counted(acts: &ConvActivations, counter: Option<&FlopCounter>) -> Result<SpectralActivations> {
    let (h, w, c, d) = acts.dims();
    if h != w {
        return Err(Error::Shape(format!(
            "the DFT path needs square channels, got {h}x{w}"
        )));
    }
    let n = h;
    flops::record(counter, (c * d) as u64 * 2 * n as u64 * flops::fft(n));
    let dft = Dft::new(n);
    let spectra: Vec<Vec<Complex64>> = par::map_range(c * d, |k| {
        let (ch, p) = (k / d, k % d);
        let mut buf: Vec<Complex64> = acts
            .channel(ch, p)
            .into_iter()
            .map(|v| Complex64::new(v, 0.0))
            .collect();
        dft.forward2(&mut buf);
        buf
    });
    let mut out = SpectralActivations::zeros(n, n, c, d);
    for (k, buf) in spectra.iter().enumerate() {
        let (ch, p) = (k / d, k % d);
        for u in 0..n {
            for v in 0..n {
                out.set(u, v, ch, p, buf[u * n + v]);
            }
        }
    }
    Ok(out)
}

/// Covariances restricted to one frequency `(u, v)`.
#[derive(Debug, Clone)]
pub struct FrequencyBlock {
    pub u: usize,
    pub v: usize,
    pub xx: ComplexMatrix,
    pub xy: ComplexMatrix,
    pub yy: ComplexMatrix,
}

#[derive(Debug, Clone)]
pub struct BlockCovariance {
    pub n: usize,
    /// Row-major over `(u, v)`.
    pub blocks: Vec<FrequencyBlock>,
}

fn check_pair<T: Scalar>(x: &ConvTensor<T>, y: &ConvTensor<T>) -> Result<usize> {
    if x.h != x.w || y.h != y.w {
        return Err(Error::Shape("frequency blocks need square channels".into()));
    }
    if x.h != y.h {
        return Err(Error::Shape(format!(
            "spatial size mismatch: {} vs {}",
            x.h, y.h
        )));
    }
    if x.d != y.d {
        return Err(Error::DatapointMismatch {
            left: x.d,
            right: y.d,
        });
    }
    Ok(x.h)
}

/// Within-frequency covariance blocks of two DFT-preprocessed layers.
pub fn block_covariance(x: &SpectralActivations, y: &SpectralActivations) -> Result<BlockCovariance> {
    let n = check_pair(x, y)?;
    let blocks: Vec<Result<FrequencyBlock>> = par::map_range(n * n, |f| {
        let (u, v) = (f / n, f % n);
        let xf = cca::center_rows(&x.position(u, v));
        let yf = cca::center_rows(&y.position(u, v));
        let cov = cca::covariance_matrices(&xf, &yf)?;
        Ok(FrequencyBlock {
            u,
            v,
            xx: cov.xx,
            xy: cov.xy,
            yy: cov.yy,
        })
    });
    Ok(BlockCovariance {
        n,
        blocks: blocks.into_iter().collect::<Result<_>>()?,
    })
}

/// How far a dense covariance is from block diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OffBlockReport {
    /// Largest |entry| linking two different frequencies.
    pub max_off_block: f64,
    /// Largest |entry| inside a frequency block.
    pub max_in_block: f64,
    /// `max_off_block / max_in_block`.
    pub ratio: f64,
}

/// Dense cross-covariance of the cross-layer views of two spectral layers
/// (`n²c₁ × n²c₂`), checked for entries outside the frequency blocks.
pub fn off_block_report(x: &SpectralActivations, y: &SpectralActivations) -> Result<OffBlockReport> {
    let n = check_pair(x, y)?;
    let xc = cca::center_rows(&x.cross_layer_matrix());
    let yc = cca::center_rows(&y.cross_layer_matrix());
    let cov = cca::covariance_matrices(&xc, &yc)?.xy;
    let (c1, c2) = (x.c, y.c);
    let mut max_off: f64 = 0.0;
    let mut max_in: f64 = 0.0;
    for r in 0..n * n * c1 {
        for s in 0..n * n * c2 {
            let m = cov[(r, s)].norm();
            if r / c1 == s / c2 {
                max_in = max_in.max(m);
            } else {
                max_off = max_off.max(m);
            }
        }
    }
    let ratio = if max_in > 0.0 { max_off / max_in } else { 0.0 };
    Ok(OffBlockReport {
        max_off_block: max_off,
        max_in_block: max_in,
        ratio,
    })
}

/// Whether the translation-invariance assumptions are claimed to hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DftMode {
    /// Fully augmented data through circular layers: the block path is exact.
    Exact,
    /// Anything else: the same block path, labelled, with the off-block mass
    /// it ignores reported.
    Approximate,
}

/// SVCCA outcome of one frequency block.
#[derive(Debug, Clone, Serialize)]
pub struct BlockOutcome {
    pub u: usize,
    pub v: usize,
    pub correlations: Vec<f64>,
    pub kept_x: usize,
    pub kept_y: usize,
}

/// Frequency-block SVCCA: per-block results merged into one coefficient
/// list.
#[derive(Debug, Clone, Serialize)]
pub struct BlockSvccaResult {
    pub mode: DftMode,
    /// Row-major over `(u, v)`.
    pub blocks: Vec<BlockOutcome>,
    /// All block coefficients, descending.
    pub correlations: Vec<f64>,
    pub kept_x: usize,
    pub kept_y: usize,
    pub original_x: usize,
    pub original_y: usize,
    /// Off-block covariance mass the block path ignored (approximate mode).
    pub off_block: Option<OffBlockReport>,
}

impl Similarity for BlockSvccaResult {
    fn correlations(&self) -> &[f64] {
        &self.correlations
    }

    fn kept(&self) -> (usize, usize) {
        (self.kept_x, self.kept_y)
    }

    fn original(&self) -> (usize, usize) {
        (self.original_x, self.original_y)
    }
}

impl BlockSvccaResult {
    pub fn mean_similarity(&self) -> f64 {
        svcca::mean_similarity(self, svcca::Denominator::Retained)
    }
}

fn block_svcca(xf: &ComplexMatrix, yf: &ComplexMatrix, threshold: f64, counter: Option<&FlopCounter>) -> Result<(Vec<f64>, usize, usize)> {
    let xc = cca::center_rows(xf);
    let yc = cca::center_rows(yf);
    let bx = match svcca::truncate_matrix(&xc, threshold, counter) {
        Ok(b) => Some(b),
        Err(Error::ZeroVariance) => None,
        Err(e) => return Err(e),
    };
    let by = match svcca::truncate_matrix(&yc, threshold, counter) {
        Ok(b) => Some(b),
        Err(Error::ZeroVariance) => None,
        Err(e) => return Err(e),
    };
    match (bx, by) {
        (Some(bx), Some(by)) => {
            let r = cca::cca_matrices(&bx.directions, &by.directions, linalg::DEFAULT_EPS, counter)?;
            Ok((r.correlations, bx.kept, by.kept))
        }
        (bx, by) => Ok((
            Vec::new(),
            bx.map_or(0, |b| b.kept),
            by.map_or(0, |b| b.kept),
        )),
    }
}

/// Frequency-block SVCCA between two conv layers of equal square size.
pub fn dft_cca(l1: &ConvActivations, l2: &ConvActivations, threshold: f64, mode: DftMode) -> Result<BlockSvccaResult> {
    dft_cca_counted(l1, l2, threshold, mode, None)
}

pub fn dft_cca_counted(
    l1: &ConvActivations,
    l2: &ConvActivations,
    threshold: f64,
    mode: DftMode,
    counter: Option<&FlopCounter>,
) -> Result<BlockSvccaResult> {
    let x = dft_preprocess_counted(l1, counter)?;
    let y = dft_preprocess_counted(l2, counter)?;
    dft_cca_spectral(&x, &y, threshold, mode, counter)
}

/// As [`dft_cca_counted`], on already-transformed layers.
pub fn dft_cca_spectral(
    x: &SpectralActivations,
    y: &SpectralActivations,
    threshold: f64,
    mode: DftMode,
    counter: Option<&FlopCounter>,
) -> Result<BlockSvccaResult> {
    let n = check_pair(x, y)?;
    let outcomes: Vec<Result<BlockOutcome>> = par::map_range(n * n, |f| {
        let (u, v) = (f / n, f % n);
        let (correlations, kept_x, kept_y) = block_svcca(&x.position(u, v), &y.position(u, v), threshold, counter)?;
        Ok(BlockOutcome {
            u,
            v,
            correlations,
            kept_x,
            kept_y,
        })
    });
    let blocks: Vec<BlockOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let mut correlations: Vec<f64> = blocks.iter().flat_map(|b| b.correlations.iter().copied()).collect();
    correlations.sort_by(|a, b| b.total_cmp(a));
    let kept_x = blocks.iter().map(|b| b.kept_x).sum();
    let kept_y = blocks.iter().map(|b| b.kept_y).sum();
    if kept_x == 0 || kept_y == 0 {
        return Err(Error::ZeroVariance);
    }
    let off_block = match mode {
        DftMode::Exact => None,
        DftMode::Approximate => Some(off_block_report(x, y)?),
    };
    Ok(BlockSvccaResult {
        mode,
        blocks,
        correlations,
        kept_x,
        kept_y,
        original_x: n * n * x.c,
        original_y: n * n * y.c,
        off_block,
    })
}

/// Dense SVCCA on the cross-layer views: the reference the block path
/// replaces.
pub fn dense_conv_svcca(
    l1: &ConvActivations,
    l2: &ConvActivations,
    threshold: f64,
    counter: Option<&FlopCounter>,
) -> Result<svcca::SvccaResult<f64>> {
    svcca::svcca_matrices(
        &l1.cross_layer_matrix(),
        &l2.cross_layer_matrix(),
        threshold,
        linalg::DEFAULT_EPS,
        counter,
    )
}

/// Covariance (`n² × n²`) of one channel's pixels, pixels ordered by
/// `vec(c)` (columns stacked: pixel `(i, j)` ↦ `i + n·j`).
pub fn channel_vec_covariance(acts: &ConvActivations, channel: usize) -> Result<RealMatrix> {
    let (h, w, c, d) = acts.dims();
    if channel >= c {
        return Err(Error::InvalidArgument(format!("channel {channel} of {c}")));
    }
    let mut m = RealMatrix::zeros(h * w, d);
    for i in 0..h {
        for j in 0..w {
            for p in 0..d {
                m[(i + h * j, p)] = acts.get(i, j, channel, p);
            }
        }
    }
    let mc = cca::center_rows(&m);
    Ok(cca::covariance_matrices(&mc, &mc)?.xx)
}

/// Largest deviation of a `vec(c)`-ordered `n² × n²` covariance from
/// invariance under every 2-D cyclic translation, i.e. from being block
/// circulant with circulant blocks.
pub fn verify_circulant(cov: &RealMatrix, n: usize) -> Result<f64> {
    if cov.nrows() != n * n || cov.ncols() != n * n {
        return Err(Error::Shape(format!(
            "expected a {0}x{0} covariance, got {1}x{2}",
            n * n,
            cov.nrows(),
            cov.ncols()
        )));
    }
    let shift = |k: usize, a: usize, b: usize| {
        let (i, j) = (k % n, k / n);
        (i + a) % n + n * ((j + b) % n)
    };
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            for r in 0..n * n {
                let rs = shift(r, a, b);
                for s in 0..n * n {
                    let diff = (cov[(r, s)] - cov[(rs, shift(s, a, b))]).abs();
                    worst = worst.max(diff);
                }
            }
        }
    }
    Ok(worst)
}

/// Circulant matrix with the given first row: `A[i][j] = r[(j − i) mod n]`.
pub fn circulant(first_row: &[f64]) -> RealMatrix {
    let n = first_row.len();
    RealMatrix::from_fn(n, n, |i, j| first_row[(j + n - i) % n])
}

/// Result of conjugating a matrix by the DFT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagonalizationReport {
    pub max_off_diagonal: f64,
    /// Frobenius norm of the input.
    pub norm: f64,
    pub relative: f64,
}

/// Off-diagonal magnitude of `F·A·F*`.
pub fn verify_dft_diagonalizes(a: &RealMatrix) -> Result<DiagonalizationReport> {
    if !a.is_square() {
        return Err(Error::Shape("expected a square matrix".into()));
    }
    let n = a.nrows();
    let f = linalg::dft_matrix(n);
    let t = &f * linalg::complexify(a) * f.adjoint();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                worst = worst.max(t[(i, j)].norm());
            }
        }
    }
    let norm = a.norm();
    Ok(DiagonalizationReport {
        max_off_diagonal: worst,
        norm,
        relative: if norm > 0.0 { worst / norm } else { 0.0 },
    })
}

/// `max |vec(A·c·B) − (Bᵀ ⊗ A)·vec(c)|`.
pub fn kronecker_identity_residual<T: Scalar>(a: &DMatrix<T>, c: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    let lhs = linalg::vec_columns(&(a * c * b));
    let rhs = b.transpose().kronecker(a) * linalg::vec_columns(c);
    (lhs - rhs).iter().map(|v| v.modulus()).fold(0.0, f64::max)
}

/// Random base images plus two stacked circular conv layers.
#[derive(Debug, Clone)]
pub struct ConvFixture {
    pub images: ConvActivations,
    pub layer1: ConvActivations,
    pub layer2: ConvActivations,
}

/// Translation fixture: `bases` random `n × n × 2` images (fully augmented
/// when `augment`), through conv(3×3) → ReLU → conv(3×3) → ReLU with `c`
/// channels each. Without augmentation the images are smooth random fields.
pub fn translation_fixture(n: usize, c: usize, bases: usize, augment: bool, seed: u64) -> Result<ConvFixture> {
    let in_c = 2;
    let raw = crate::fixtures::gaussian(n * n * in_c, bases, seed);
    let mut images = ConvTensor::new(n, n, in_c, bases, raw.transpose().iter().copied().collect::<Vec<_>>())?;
    // storage from a (hwc × d) matrix: transpose gives column-major d × hwc,
    // whose iteration order is row-major hwc × d.
    if !augment {
        // Smooth with a 3×3 box filter so neighbouring pixels correlate.
        let k = (0..in_c * in_c * 9)
            .map(|i| if (i / 9) / in_c == (i / 9) % in_c { 1.0 / 9.0 } else { 0.0 })
            .collect();
        let smooth = CircularConv::new(in_c, in_c, 3, 1, k, vec![0.0; in_c])?;
        images = circular_conv_forward(&images, &smooth, false, Pooling::None)?;
        // Break translation invariance with a fixed spatial ramp.
        let mut v = images.values.clone();
        for i in 0..n {
            for j in 0..n {
                for ch in 0..in_c {
                    for p in 0..bases {
                        v[images.index(i, j, ch, p)] += 0.3 * (i as f64 - j as f64) / n as f64;
                    }
                }
            }
        }
        images = ConvTensor::new(n, n, in_c, bases, v)?;
    } else {
        images = augment_translations(&images, TranslationSpec::default())?;
    }
    let k = 3.min(n);
    let conv1 = CircularConv::random(in_c, c, k, 1, seed + 101);
    let conv2 = CircularConv::random(c, c, k, 1, seed + 202);
    let layer1 = circular_conv_forward(&images, &conv1, true, Pooling::None)?;
    let layer2 = circular_conv_forward(&layer1, &conv2, true, Pooling::None)?;
    Ok(ConvFixture {
        images,
        layer1,
        layer2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::gaussian;
    use std::collections::BTreeMap;

    fn tensor(h: usize, w: usize, c: usize, d: usize, seed: u64) -> ConvActivations {
        let g = gaussian(1, h * w * c * d, seed);
        ConvTensor::new(h, w, c, d, g.iter().copied().collect()).unwrap()
    }

    #[test]
    fn views_degenerate_spatial() {
        let t = tensor(1, 1, 3, 5, 1);
        let a = t.same_layer_view().unwrap();
        let b = t.cross_layer_view().unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.neurons(), 3);
    }

    #[test]
    fn same_layer_order() {
        let values: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = ConvTensor::new(2, 2, 1, 3, values).unwrap();
        let v = t.same_layer_view().unwrap();
        assert_eq!(v.neurons(), 1);
        // h-major, then w, then d
        let expect: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(v.to_row_major(), expect);
        let back = ConvActivations::from_same_layer_view(&v, 2, 2).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn cross_layer_shape_and_roundtrip() {
        let t = tensor(2, 2, 2, 7, 2);
        let v = t.cross_layer_view().unwrap();
        assert_eq!((v.neurons(), v.datapoints()), (8, 7));
        assert_eq!(v.values()[(3, 4)], t.get(0, 1, 1, 4));
        assert_eq!(ConvActivations::from_cross_layer_view(&v, 2, 2).unwrap(), t);
        let r = svcca::svcca(&v, &v, 0.99).unwrap();
        assert!((r.mean_similarity - 1.0).abs() < 1e-8);
        let s = tensor(3, 3, 2, 7, 3);
        let back = ConvActivations::from_same_layer_view(&s.same_layer_view().unwrap(), 3, 3).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_tensors() {
        assert!(ConvTensor::new(2, 2, 1, 1, vec![0.0; 3]).is_err());
        assert!(ConvTensor::new(0, 2, 1, 1, Vec::<f64>::new()).is_err());
        assert!(matches!(
            ConvTensor::new(1, 1, 1, 2, vec![0.0, f64::INFINITY]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn augment_unit_images_unchanged() {
        let t = tensor(1, 1, 2, 4, 3);
        assert_eq!(augment_translations(&t, TranslationSpec::default()).unwrap(), t);
    }

    #[test]
    fn augment_two_by_two() {
        let t = ConvTensor::new(2, 2, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = augment_translations(&t, TranslationSpec::default()).unwrap();
        assert_eq!(a.datapoints(), 4);
        // shift (1, 1) is datapoint 1·2 + 1
        assert_eq!(a.datapoint(3), vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(a.datapoint(0), vec![1.0, 2.0, 3.0, 4.0]);
    }

    fn multiset(t: &ConvActivations) -> BTreeMap<Vec<u64>, usize> {
        let mut m = BTreeMap::new();
        for p in 0..t.datapoints() {
            let key = t.datapoint(p).iter().map(|v| v.to_bits()).collect();
            *m.entry(key).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn augmentation_is_closed() {
        let t = tensor(3, 3, 2, 2, 4);
        let once = augment_translations(&t, TranslationSpec::default()).unwrap();
        let twice = augment_translations(&once, TranslationSpec::default()).unwrap();
        let a = multiset(&once);
        let b = multiset(&twice);
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (k, count) in &a {
            assert_eq!(b[k], count * 9);
        }
        let coarse = augment_translations(
            &tensor(4, 4, 1, 2, 5),
            TranslationSpec { stride_h: 2, stride_w: 2 },
        )
        .unwrap();
        assert_eq!(coarse.datapoints(), 8);
        assert!(augment_translations(&tensor(2, 3, 1, 1, 6), TranslationSpec::default()).is_err());
    }

    #[test]
    fn identity_kernel_and_constant_image() {
        let t = tensor(4, 4, 2, 3, 7);
        let mut w = vec![0.0; 2 * 2];
        w[0] = 1.0;
        w[3] = 1.0;
        let id = CircularConv::new(2, 2, 1, 1, w, vec![0.0; 2]).unwrap();
        assert_eq!(circular_conv_forward(&t, &id, false, Pooling::None).unwrap(), t);

        let constant = ConvTensor::new(5, 5, 1, 1, vec![2.5; 25]).unwrap();
        let k = CircularConv::random(1, 3, 3, 1, 8);
        let out = circular_conv_forward(&constant, &k, true, Pooling::None).unwrap();
        for ch in 0..3 {
            let v = out.channel(ch, 0);
            for x in &v {
                assert!((x - v[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equivariance_all_shifts() {
        let img = tensor(8, 8, 1, 1, 9);
        let k = CircularConv::random(1, 2, 3, 1, 10);
        let base = circular_conv_forward(&img, &k, false, Pooling::None).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let shifted = ConvTensor::from_datapoints(8, 8, 1, &[img.shifted_datapoint(0, a, b)]).unwrap();
                let out = circular_conv_forward(&shifted, &k, false, Pooling::None).unwrap();
                let expect = base.shifted_datapoint(0, a, b);
                for (x, y) in out.datapoint(0).iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strided_pooled_equivariance() {
        let img = tensor(8, 8, 2, 1, 11);
        let k = CircularConv::random(2, 3, 3, 2, 12);
        let base = circular_conv_forward(&img, &k, true, Pooling::Average(2)).unwrap();
        assert_eq!(base.dims(), (2, 2, 3, 1));
        for a in 0..2 {
            for b in 0..2 {
                let shifted = ConvTensor::from_datapoints(8, 8, 2, &[img.shifted_datapoint(0, 4 * a, 4 * b)]).unwrap();
                let out = circular_conv_forward(&shifted, &k, true, Pooling::Average(2)).unwrap();
                for (x, y) in out.datapoint(0).iter().zip(&base.shifted_datapoint(0, a, b)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        assert!(circular_conv_forward(&img, &k, true, Pooling::Average(3)).is_err());
    }

    #[test]
    fn dft_preprocess_parseval() {
        let t = tensor(4, 4, 2, 3, 13);
        let s = dft_preprocess(&t).unwrap();
        for ch in 0..2 {
            for p in 0..3 {
                let e1: f64 = t.channel(ch, p).iter().map(|v| v * v).sum();
                let e2: f64 = s.channel(ch, p).iter().map(|v| v.norm_sqr()).sum();
                assert!((e1 - e2).abs() < 1e-10);
            }
        }
        assert!(dft_preprocess(&tensor(2, 3, 1, 2, 1)).is_err());
    }

    #[test]
    fn circulant_checks() {
        let a = circulant(&[1.0, 2.0, 0.5, -1.0]);
        assert_eq!(a[(1, 0)], -1.0);
        assert!(verify_dft_diagonalizes(&a).unwrap().relative < 1e-12);
        let id = RealMatrix::identity(5, 5);
        assert!(verify_dft_diagonalizes(&id).unwrap().max_off_diagonal < 1e-12);
        let mut p = a.clone();
        p[(0, 1)] += 0.5;
        let small = verify_dft_diagonalizes(&p).unwrap().max_off_diagonal;
        p[(0, 1)] += 1.5;
        let big = verify_dft_diagonalizes(&p).unwrap().max_off_diagonal;
        assert!(big > small && small > 1e-3);
    }

    #[test]
    fn bccb_matrix_is_translation_invariant() {
        let n = 3;
        let g = gaussian(n, n, 14);
        let cov = RealMatrix::from_fn(n * n, n * n, |r, s| {
            let (i1, j1, i2, j2) = (r % n, r / n, s % n, s / n);
            g[((i2 + n - i1) % n, (j2 + n - j1) % n)]
        });
        assert_eq!(verify_circulant(&cov, n).unwrap(), 0.0);
        let mut broken = cov.clone();
        broken[(0, 1)] += 0.1;
        assert!(verify_circulant(&broken, n).unwrap() > 0.05);
    }

    #[test]
    fn kronecker_identity() {
        let a = gaussian(3, 3, 15);
        let c = gaussian(3, 3, 16);
        let b = gaussian(3, 3, 17);
        assert!(kronecker_identity_residual(&a, &c, &b) < 1e-12);
    }

    #[test]
    fn self_dft_cca_is_one() {
        let f = translation_fixture(4, 2, 6, true, 18).unwrap();
        let r = dft_cca(&f.layer1, &f.layer1, 0.99, DftMode::Exact).unwrap();
        assert!((r.mean_similarity() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn approximate_mode_reports_mass() {
        let f = translation_fixture(4, 2, 40, false, 19).unwrap();
        let r = dft_cca(&f.layer1, &f.layer2, 0.99, DftMode::Approximate).unwrap();
        let off = r.off_block.unwrap();
        assert!(off.ratio > 0.0);
        assert_eq!(r.mode, DftMode::Approximate);
    }

    #[test]
    fn block_covariance_shapes() {
        let f = translation_fixture(4, 3, 5, true, 20).unwrap();
        let x = dft_preprocess(&f.layer1).unwrap();
        let y = dft_preprocess(&f.layer2).unwrap();
        let b = block_covariance(&x, &y).unwrap();
        assert_eq!(b.blocks.len(), 16);
        for blk in &b.blocks {
            assert_eq!(blk.xy.shape(), (3, 3));
            assert!(linalg::hermitian_defect(&blk.xx) < 1e-10);
        }
        let other = dft_preprocess(&translation_fixture(8, 3, 5, true, 20).unwrap().layer1).unwrap();
        assert!(block_covariance(&x, &other).is_err());
    }
}
