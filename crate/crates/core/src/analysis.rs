//! Experiment-level analyses over checkpoints: layer-by-layer similarity
//! grids, convergence curves, class sensitivity, cross-model grids and
//! SVCCA-based compression of dense layers.

use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cca::{self, ActivationMatrix};
use crate::convdft::{self, ConvActivations, DftMode, OffBlockReport};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::linalg::{self, RealMatrix};
use crate::par;
use crate::svcca::{self, Denominator, Directions, Similarity, TruncatedBasis};
use crate::toynet::{LayerActs, LayerRecord, Projection};

/// How conv layers are turned into neurons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvView {
    /// Channels as neurons when a layer is compared with itself (e.g. at
    /// another step), otherwise flattened `h·w·c` neurons.
    #[default]
    Auto,
    SameLayer,
    CrossLayer,
    /// Frequency-block SVCCA.
    Dft,
}

impl FromStr for ConvView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ConvView::Auto),
            "same-layer" => Ok(ConvView::SameLayer),
            "cross-layer" => Ok(ConvView::CrossLayer),
            "dft" => Ok(ConvView::Dft),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (auto, same-layer, cross-layer, dft)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub threshold: f64,
    pub denominator: Denominator,
    pub conv_view: ConvView,
    /// Only used by [`ConvView::Dft`].
    pub dft_mode: DftMode,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            threshold: svcca::DEFAULT_THRESHOLD,
            denominator: Denominator::Retained,
            conv_view: ConvView::Auto,
            dft_mode: DftMode::Approximate,
        }
    }
}

/// Summary of one SVCCA comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// `dense`, `same-layer`, `cross-layer`, `dft-exact` or `dft-approximate`.
    pub method: String,
    pub mean_similarity: f64,
    pub correlations: Vec<f64>,
    pub kept: (usize, usize),
    pub original: (usize, usize),
    pub off_block: Option<OffBlockReport>,
}

fn summarize(method: &str, r: &impl Similarity, denominator: Denominator) -> Comparison {
    Comparison {
        method: method.into(),
        mean_similarity: svcca::mean_similarity(r, denominator),
        correlations: r.correlations().to_vec(),
        kept: r.kept(),
        original: r.original(),
        off_block: None,
    }
}

/// Neuron view a comparison uses for both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum View {
    /// Dense layers as they are; conv layers as `h·w·c` neurons.
    Flat,
    /// Conv channels as neurons over `h·w·d` samples.
    Channels,
}

enum Route {
    Dft,
    Matrix(View, &'static str),
}

fn route(a: &LayerActs, b: &LayerActs, same_layer: bool, opts: &CompareOptions) -> Result<Route> {
    use LayerActs::{Conv, Dense};
    if a.datapoints() != b.datapoints() {
        return Err(Error::DatapointMismatch {
            left: a.datapoints(),
            right: b.datapoints(),
        });
    }
    match (a, b, opts.conv_view) {
        (Dense(_), Dense(_), _) => Ok(Route::Matrix(View::Flat, "dense")),
        (Conv(_), Conv(_), ConvView::Dft) => Ok(Route::Dft),
        (Conv(x), Conv(y), view)
            if view == ConvView::SameLayer || (view == ConvView::Auto && same_layer && x.dims() == y.dims()) =>
        {
            if (x.height(), x.width()) != (y.height(), y.width()) {
                return Err(Error::Shape("same-layer view needs equal spatial sizes".into()));
            }
            Ok(Route::Matrix(View::Channels, "same-layer"))
        }
        (_, _, ConvView::SameLayer | ConvView::Dft) => Err(Error::InvalidArgument(
            "same-layer and dft modes need two conv layers".into(),
        )),
        _ => Ok(Route::Matrix(View::Flat, "cross-layer")),
    }
}

fn view_matrix(acts: &LayerActs, view: View) -> Result<ActivationMatrix> {
    match (acts, view) {
        (LayerActs::Conv(c), View::Channels) => c.same_layer_view(),
        (a, _) => a.matrix(),
    }
}

fn truncated(acts: &LayerActs, view: View, threshold: f64) -> Result<TruncatedBasis<f64>> {
    svcca::truncate_by_variance(&view_matrix(acts, view)?, threshold)
}

fn dft_comparison(x: &ConvActivations, y: &ConvActivations, opts: &CompareOptions) -> Result<Comparison> {
    let r = convdft::dft_cca(x, y, opts.threshold, opts.dft_mode)?;
    let method = match opts.dft_mode {
        DftMode::Exact => "dft-exact",
        DftMode::Approximate => "dft-approximate",
    };
    let mut c = summarize(method, &r, opts.denominator);
    c.off_block = r.off_block;
    Ok(c)
}

/// SVCCA between two representations. `same_layer` marks the two as the
/// same layer (of one model at two steps, or of one model twice).
pub fn compare_layers(a: &LayerActs, b: &LayerActs, same_layer: bool, opts: &CompareOptions) -> Result<Comparison> {
    match (route(a, b, same_layer, opts)?, a, b) {
        (Route::Dft, LayerActs::Conv(x), LayerActs::Conv(y)) => dft_comparison(x, y, opts),
        (Route::Matrix(view, method), _, _) => {
            let r = svcca::svcca(&view_matrix(a, view)?, &view_matrix(b, view)?, opts.threshold)?;
            Ok(summarize(method, &r, opts.denominator))
        }
        _ => unreachable!("dft route only for conv pairs"),
    }
}

/// ρ̄ between every row layer and every column layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityGrid {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub row_step: Option<u64>,
    pub col_step: Option<u64>,
    pub threshold: f64,
    pub denominator: Denominator,
    /// `values[i][j]` compares `rows[i]` with `cols[j]`.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityGrid {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.len().min(self.cols.len())).map(|i| self.values[i][i]).collect()
    }
}

/// One grid; cells are evaluated in parallel and assembled in order. Each
/// layer view is truncated once and shared by its cells. `same_model` lets
/// equally named layers use the same-layer conv view.
pub fn similarity_grid(rows: &[LayerRecord], cols: &[LayerRecord], same_model: bool, opts: &CompareOptions) -> Result<SimilarityGrid> {
    let nc = cols.len();
    let routes: Vec<Route> = (0..rows.len() * nc)
        .map(|k| {
            let (a, b) = (&rows[k / nc], &cols[k % nc]);
            route(&a.acts, &b.acts, same_model && a.name == b.name, opts)
        })
        .collect::<Result<_>>()?;
    // (side, layer index, view) for every truncation a cell needs.
    let mut keys: Vec<(usize, usize, View)> = routes
        .iter()
        .enumerate()
        .filter_map(|(k, r)| match r {
            Route::Matrix(v, _) => Some([(0, k / nc, *v), (1, k % nc, *v)]),
            Route::Dft => None,
        })
        .flatten()
        .collect();
    keys.sort();
    keys.dedup();
    let bases: Vec<TruncatedBasis<f64>> = par::map(&keys, |&(side, i, view)| {
        let layer = if side == 0 { &rows[i] } else { &cols[i] };
        truncated(&layer.acts, view, opts.threshold)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let basis = |key: (usize, usize, View)| &bases[keys.binary_search(&key).expect("truncated above")];
    let cells: Vec<Result<f64>> = par::map_range(rows.len() * nc, |k| {
        let (i, j) = (k / nc, k % nc);
        let c = match (&routes[k], &rows[i].acts, &cols[j].acts) {
            (Route::Matrix(v, method), _, _) => {
                let r = svcca::svcca_from_bases(basis((0, i, *v)).clone(), basis((1, j, *v)).clone(), linalg::DEFAULT_EPS, None)?;
                summarize(method, &r, opts.denominator)
            }
            (Route::Dft, LayerActs::Conv(x), LayerActs::Conv(y)) => dft_comparison(x, y, opts)?,
            _ => unreachable!("dft route only for conv pairs"),
        };
        Ok(c.mean_similarity.clamp(0.0, 1.0))
    });
    let flat: Vec<f64> = cells.into_iter().collect::<Result<_>>()?;
    Ok(SimilarityGrid {
        rows: rows.iter().map(|r| r.name.clone()).collect(),
        cols: cols.iter().map(|r| r.name.clone()).collect(),
        row_step: None,
        col_step: None,
        threshold: opts.threshold,
        denominator: opts.denominator,
        values: flat.chunks(nc.max(1)).map(<[f64]>::to_vec).collect(),
    })
}

/// Layers of one model at one step.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub step: u64,
    pub layers: &'a [LayerRecord],
}

fn check_probe(snapshots: &[Snapshot]) -> Result<usize> {
    let d = snapshots
        .first()
        .and_then(|s| s.layers.first())
        .map(|l| l.acts.datapoints())
        .ok_or_else(|| Error::InvalidArgument("no checkpoints".into()))?;
    for s in snapshots {
        for l in s.layers {
            if l.acts.datapoints() != d {
                return Err(Error::DatapointMismatch {
                    left: d,
                    right: l.acts.datapoints(),
                });
            }
        }
    }
    Ok(d)
}

/// For each step, every layer at that step against every layer at the last
/// step.
pub fn dynamics_grid(snapshots: &[Snapshot], opts: &CompareOptions) -> Result<Vec<SimilarityGrid>> {
    check_probe(snapshots)?;
    let last = snapshots.last().expect("checked non-empty");
    snapshots
        .iter()
        .map(|s| {
            let mut g = similarity_grid(s.layers, last.layers, true, opts)?;
            g.row_step = Some(s.step);
            g.col_step = Some(last.step);
            Ok(g)
        })
        .collect()
}

/// ρ̄ of one layer with its final self over training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceCurve {
    pub layer: String,
    pub steps: Vec<u64>,
    pub values: Vec<f64>,
}

impl ConvergenceCurve {
    /// First step whose value reaches `threshold`.
    pub fn convergence_step(&self, threshold: f64) -> Option<u64> {
        self.steps.iter().zip(&self.values).find(|(_, v)| **v >= threshold).map(|(s, _)| *s)
    }

    /// Fraction of consecutive step pairs over which the curve drops.
    pub fn decrease_fraction(&self) -> f64 {
        let pairs = self.values.len().saturating_sub(1);
        if pairs == 0 {
            return 0.0;
        }
        let drops = self.values.windows(2).filter(|w| w[1] < w[0]).count();
        drops as f64 / pairs as f64
    }
}

/// Diagonals of the dynamics grids, one curve per layer.
pub fn convergence_curves(grids: &[SimilarityGrid]) -> Vec<ConvergenceCurve> {
    let Some(first) = grids.first() else { return Vec::new() };
    let steps: Vec<u64> = grids.iter().map(|g| g.row_step.unwrap_or(0)).collect();
    first
        .rows
        .iter()
        .enumerate()
        .filter_map(|(i, name)| {
            let values = grids
                .iter()
                .map(|g| {
                    let j = g.cols.iter().position(|c| c == name)?;
                    g.values.get(i).map(|row| row[j])
                })
                .collect::<Option<Vec<f64>>>()?;
            Some(ConvergenceCurve {
                layer: name.clone(),
                steps: steps.clone(),
                values,
            })
        })
        .collect()
}

/// Convergence step of each layer, bottom up (`None` when never reached).
pub fn convergence_steps(curves: &[ConvergenceCurve], threshold: f64) -> Vec<Option<u64>> {
    curves.iter().map(|c| c.convergence_step(threshold)).collect()
}

/// True when no layer converges later than a layer above it.
pub fn is_bottom_up(steps: &[Option<u64>]) -> bool {
    let key = |s: &Option<u64>| s.unwrap_or(u64::MAX);
    steps.windows(2).all(|w| key(&w[0]) <= key(&w[1]))
}

/// Every layer of model A against every layer of model B on one probe set.
pub fn cross_model_grid(a: &[LayerRecord], b: &[LayerRecord], opts: &CompareOptions) -> Result<SimilarityGrid> {
    check_probe(&[Snapshot { step: 0, layers: a }, Snapshot { step: 0, layers: b }])?;
    similarity_grid(a, b, false, opts)
}

/// Per-class curves of CCA similarity between a class logit and each layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityCurves {
    pub classes: Vec<String>,
    pub layers: Vec<String>,
    /// `values[class][layer]`
    pub values: Vec<Vec<f64>>,
    /// Mean and 95th percentile of the similarity with shuffled logits, per
    /// layer.
    pub null_mean: Vec<f64>,
    pub null_p95: Vec<f64>,
}

impl SensitivityCurves {
    /// Largest per-layer gap between two class curves.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.values[a]
            .iter()
            .zip(&self.values[b])
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Layer view used against a logit: dense layers whole; conv layers through
/// the zero-frequency block of the DFT path (per-channel spatial means),
/// the only block a shift-invariant logit can correlate with.
fn sensitivity_view(acts: &LayerActs) -> Result<ActivationMatrix> {
    match acts {
        LayerActs::Dense(a) => Ok(a.clone()),
        LayerActs::Conv(c) => dc_block(c),
    }
}

fn dc_block(c: &ConvActivations) -> Result<ActivationMatrix> {
    let (h, w, ch, d) = c.dims();
    let mut m = RealMatrix::zeros(ch, d);
    for i in 0..h {
        for j in 0..w {
            m += c.position(i, j);
        }
    }
    ActivationMatrix::new(m / (h * w) as f64)
}

/// Canonical correlation of each logit row with a truncated layer basis.
fn logit_correlations(basis: &RealMatrix, logits: &RealMatrix) -> Result<Vec<f64>> {
    (0..logits.nrows())
        .map(|c| {
            let y = logits.rows(c, 1).into_owned();
            let r = cca::cca_matrices(basis, &y, linalg::DEFAULT_EPS, None)?;
            Ok(r.correlations.first().copied().unwrap_or(0.0))
        })
        .collect()
}

/// Similarity of every class logit (rows of `logits`) with every layer;
/// truncation applies to the layer side only. The null baseline shuffles
/// the datapoint order of the logits `null_trials` times.
pub fn class_sensitivity(
    layers: &[LayerRecord],
    logits: &ActivationMatrix,
    threshold: f64,
    null_trials: usize,
    seed: u64,
) -> Result<SensitivityCurves> {
    let d = logits.datapoints();
    let logits_c = logits.center().into_values();
    let bases: Vec<RealMatrix> = layers
        .iter()
        .map(|l| {
            if l.acts.datapoints() != d {
                return Err(Error::DatapointMismatch {
                    left: d,
                    right: l.acts.datapoints(),
                });
            }
            let v = sensitivity_view(&l.acts)?.center();
            Ok(svcca::truncate_matrix(v.values(), threshold, None)?.directions)
        })
        .collect::<Result<_>>()?;
    let per_layer: Vec<Vec<f64>> = bases.iter().map(|b| logit_correlations(b, &logits_c)).collect::<Result<_>>()?;
    let classes = logits.neurons();
    let values = (0..classes).map(|c| per_layer.iter().map(|l| l[c]).collect()).collect();

    let shuffled: Vec<RealMatrix> = (0..null_trials)
        .map(|t| {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.shuffle(&mut fixtures::rng(seed.wrapping_add(t as u64)));
            logits_c.select_columns(&idx)
        })
        .collect();
    let mut null_mean = Vec::new();
    let mut null_p95 = Vec::new();
    for b in &bases {
        let trials: Vec<Vec<f64>> = par::map(&shuffled, |l| logit_correlations(b, l).unwrap_or_default());
        let mut all: Vec<f64> = trials.into_iter().flatten().collect();
        all.sort_by(f64::total_cmp);
        if all.is_empty() {
            null_mean.push(0.0);
            null_p95.push(0.0);
        } else {
            null_mean.push(all.iter().sum::<f64>() / all.len() as f64);
            null_p95.push(all[((all.len() - 1) as f64 * 0.95).round() as usize]);
        }
    }
    Ok(SensitivityCurves {
        classes: (0..classes).map(|c| format!("class{c}")).collect(),
        layers: layers.iter().map(|l| l.name.clone()).collect(),
        values,
        null_mean,
        null_p95,
    })
}

/// Top SVCCA directions of `layer` against `other` (near ties within
/// `tie_tolerance` ordered by explained variance), followed by the layer's
/// singular directions so any `k` up to the width is available.
pub fn svcca_directions(layer: &ActivationMatrix, other: &ActivationMatrix, threshold: f64, tie_tolerance: f64) -> Result<Directions> {
    let r = svcca::svcca(layer, other, threshold)?;
    Ok(Directions::canonical_x_ranked(&r, layer, tie_tolerance)?.completed_with(&Directions::singular(layer)?))
}

/// A dense layer `y = W·x + b` rewritten to read its input through a
/// `k`-dimensional bottleneck: `y = (W·Pᵀ)·(P·x) + b′`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionPlan {
    pub layer: String,
    pub k: usize,
    /// Input width `n`.
    pub n: usize,
    /// `k × n`, orthonormal rows.
    #[serde(skip)]
    pub projection: RealMatrix,
    /// Probe mean of the layer input; folded into `bias`.
    #[serde(skip)]
    pub mean: DVector<f64>,
    /// `W·Pᵀ`, `out × k`.
    #[serde(skip)]
    pub folded_weights: RealMatrix,
    /// `b + W·μ − W·Pᵀ·P·μ`
    #[serde(skip)]
    pub bias: DVector<f64>,
    pub size_ratio: f64,
    pub params_folded: usize,
    pub params_original: usize,
}

impl CompressionPlan {
    /// `(W·Pᵀ)·(P·x) + b′` for a batch of inputs (columns).
    pub fn apply(&self, x: &RealMatrix) -> RealMatrix {
        let mut y = &self.folded_weights * (&self.projection * x);
        for mut col in y.column_iter_mut() {
            col += &self.bias;
        }
        y
    }

    /// The same plan as a projection of the layer input about its mean.
    pub fn input_projection(&self) -> Projection {
        Projection {
            mean: self.mean.clone(),
            matrix: self.projection.transpose() * &self.projection,
        }
    }
}

/// Compression plan for a dense layer with weights `W` (`out × n`) whose
/// inputs over the probe set are `acts` (`n × d`), keeping the neuron-space
/// image of the top-`k` directions.
pub fn build_compression_plan(
    layer: &str,
    weights: &RealMatrix,
    bias: &DVector<f64>,
    acts: &ActivationMatrix,
    directions: &Directions,
    k: usize,
) -> Result<CompressionPlan> {
    let n = weights.ncols();
    if acts.neurons() != n || directions.dim() != n || bias.len() != weights.nrows() {
        return Err(Error::Shape(format!(
            "layer {layer}: weights {}x{n}, bias {}, inputs of width {}, directions of width {}",
            weights.nrows(),
            bias.len(),
            acts.neurons(),
            directions.dim()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} out of range 1..={n}")));
    }
    let cov = svcca::neuron_covariance(acts)?;
    let projection = directions.image_basis(k, &cov)?;
    let mean = DVector::from_vec(acts.means());
    let folded_weights = weights * projection.transpose();
    let bias = bias + weights * &mean - &folded_weights * (&projection * &mean);
    let out = weights.nrows();
    Ok(CompressionPlan {
        layer: layer.into(),
        k,
        n,
        size_ratio: k as f64 / n as f64,
        params_folded: k * (n + out),
        params_original: n * out,
        projection,
        mean,
        folded_weights,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::gaussian;

    fn dense(name: &str, m: RealMatrix) -> LayerRecord {
        LayerRecord {
            name: name.into(),
            acts: LayerActs::Dense(ActivationMatrix::new(m).unwrap()),
        }
    }

    #[test]
    fn grid_diagonal_and_symmetry() {
        let a = gaussian(4, 60, 1);
        let b = gaussian(3, 4, 2) * &a + gaussian(3, 60, 3);
        let c = gaussian(5, 60, 4);
        let layers = vec![dense("a", a), dense("b", b), dense("c", c)];
        let opts = CompareOptions::default();
        let g = similarity_grid(&layers, &layers, true, &opts).unwrap();
        let direct = compare_layers(&layers[1].acts, &layers[2].acts, false, &opts).unwrap();
        assert!((g.values[1][2] - direct.mean_similarity).abs() < 1e-12);
        for i in 0..3 {
            assert!((g.values[i][i] - 1.0).abs() < 1e-8);
            for j in 0..3 {
                assert!((0.0..=1.0).contains(&g.values[i][j]));
                assert!((g.values[i][j] - g.values[j][i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn conv_routing() {
        let t = convdft::translation_fixture(4, 2, 6, true, 5).unwrap();
        let l1 = LayerActs::Conv(t.layer1.clone());
        let opts = CompareOptions::default();
        assert_eq!(compare_layers(&l1, &l1, true, &opts).unwrap().method, "same-layer");
        assert_eq!(compare_layers(&l1, &l1, false, &opts).unwrap().method, "cross-layer");
        let dft = CompareOptions {
            conv_view: ConvView::Dft,
            ..opts
        };
        let r = compare_layers(&l1, &l1, true, &dft).unwrap();
        assert_eq!(r.method, "dft-approximate");
        assert!((r.mean_similarity - 1.0).abs() < 1e-8);
        let flat = LayerActs::Dense(t.layer2.cross_layer_view().unwrap());
        assert_eq!(compare_layers(&l1, &flat, false, &opts).unwrap().method, "cross-layer");
        assert!(compare_layers(&l1, &flat, false, &dft).is_err());
    }

    #[test]
    fn curves_and_ordering() {
        let grid = |step, v: [f64; 2]| SimilarityGrid {
            rows: vec!["l1".into(), "l2".into()],
            cols: vec!["l1".into(), "l2".into()],
            row_step: Some(step),
            col_step: Some(10),
            threshold: 0.99,
            denominator: Denominator::Retained,
            values: vec![vec![v[0], 0.1], vec![0.2, v[1]]],
        };
        let curves = convergence_curves(&[grid(0, [0.5, 0.3]), grid(5, [0.95, 0.6]), grid(10, [1.0, 1.0])]);
        assert_eq!(curves[1].values, vec![0.3, 0.6, 1.0]);
        let steps = convergence_steps(&curves, 0.9);
        assert_eq!(steps, vec![Some(5), Some(10)]);
        assert!(is_bottom_up(&steps));
        assert!(!is_bottom_up(&[Some(5), Some(2)]));
        assert!(!is_bottom_up(&[None, Some(2)]));
        assert_eq!(curves[0].decrease_fraction(), 0.0);
    }

    #[test]
    fn sensitivity_basics() {
        let layer = gaussian(6, 300, 6);
        let logits = gaussian(2, 6, 7) * &layer;
        let layers = vec![dense("l", layer), dense("noise", gaussian(6, 300, 8))];
        let logits = ActivationMatrix::new(logits).unwrap();
        let s = class_sensitivity(&layers, &logits, 1.0, 20, 9).unwrap();
        assert!((s.values[0][0] - 1.0).abs() < 1e-8);
        assert!(s.values[0][1] < 0.4);
        assert!(s.null_p95[0] < 0.4);
        let self_layer = vec![LayerRecord {
            name: "logit".into(),
            acts: LayerActs::Dense(ActivationMatrix::new(logits.values().rows(0, 1).into_owned()).unwrap()),
        }];
        let own = class_sensitivity(&self_layer, &logits, 0.99, 0, 0).unwrap();
        assert!((own.values[0][0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn compression_plan_algebra() {
        let x = ActivationMatrix::new(gaussian(8, 100, 10).add_scalar(0.5)).unwrap();
        let w = gaussian(3, 8, 11);
        let b = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let dirs = Directions::singular(&x).unwrap();
        let full = build_compression_plan("l", &w, &b, &x, &dirs, 8).unwrap();
        let mut direct = &w * x.values();
        for mut col in direct.column_iter_mut() {
            col += &b;
        }
        assert!((full.apply(x.values()) - &direct).abs().max() < 1e-10);

        let plan = build_compression_plan("l", &w, &b, &x, &dirs, 3).unwrap();
        let p = &plan.projection;
        assert!((p * p.transpose() - RealMatrix::identity(3, 3)).abs().max() < 1e-12);
        let pp = p.transpose() * p;
        assert!((&pp * &pp - &pp).abs().max() < 1e-10);
        let algebraic = (&w * p.transpose()) * (p * x.values());
        let mut applied = plan.apply(x.values());
        for mut col in applied.column_iter_mut() {
            col -= &plan.bias;
        }
        assert!((applied - algebraic).abs().max() < 1e-12);
        assert_eq!(plan.params_folded, 3 * (8 + 3));
        assert!(build_compression_plan("l", &w, &b, &x, &dirs, 9).is_err());
        let ratio = build_compression_plan("l", &gaussian(2, 200, 1), &DVector::zeros(2), &ActivationMatrix::new(gaussian(200, 300, 2)).unwrap(), &Directions::singular(&ActivationMatrix::new(gaussian(200, 300, 2)).unwrap()).unwrap(), 70).unwrap().size_ratio;
        assert!((ratio - 0.35).abs() < 1e-15);
    }
}
