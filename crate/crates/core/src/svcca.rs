//! Two-step SVCCA: keep the singular directions that explain a threshold
//! fraction of each layer's spectrum, then run CCA between the two reduced
//! bases.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cca::{self, ActivationMatrix, CcaResult};
use crate::error::{Error, Result};
use crate::flops::{self, FlopCounter};
use crate::linalg::{self, RealMatrix, Scalar};

pub const DEFAULT_THRESHOLD: f64 = 0.99;

/// Top singular directions of a centered layer.
#[derive(Debug, Clone)]
pub struct TruncatedBasis<T: Scalar> {
    /// `m′ × d`, orthonormal rows: the kept right singular vectors, i.e. the
    /// directions expressed over datapoints.
    pub directions: DMatrix<T>,
    /// `m × m′`, the matching left singular vectors (neuron coefficients).
    pub left: DMatrix<T>,
    /// Every singular value of the centered layer, descending.
    pub singular_values: Vec<f64>,
    pub kept: usize,
    pub original: usize,
    /// Σ of kept |λ| over Σ of all |λ|.
    pub explained_fraction: f64,
}

impl<T: Scalar> TruncatedBasis<T> {
    /// `m′ × m` map from centered neuron coordinates to `directions`
    /// coordinates: `diag(1/λ)·Uᴴ`.
    pub fn neuron_map(&self) -> DMatrix<T> {
        let mut m = self.left.adjoint();
        for (i, &s) in self.singular_values[..self.kept].iter().enumerate() {
            m.row_mut(i).unscale_mut(s);
        }
        m
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "variance threshold must be in (0, 1], got {threshold}"
        )))
    }
}

/// Smallest `m′` whose leading singular values reach `threshold` of the
/// total Σ|λᵢ|. Values at rounding-noise level relative to the largest
/// (rank-deficient directions) are never kept.
pub fn kept_count(singular_values: &[f64], threshold: f64, dims: (usize, usize)) -> usize {
    let total: f64 = singular_values.iter().map(|s| s.abs()).sum();
    let smax = singular_values.first().copied().unwrap_or(0.0).abs();
    if total == 0.0 {
        return 0;
    }
    let noise = smax * dims.0.max(dims.1) as f64 * f64::EPSILON;
    let significant = singular_values
        .iter()
        .take_while(|s| s.abs() > noise)
        .count();
    let target = threshold * total - total * 1e-12;
    let mut cum = 0.0;
    for (i, s) in singular_values[..significant].iter().enumerate() {
        cum += s.abs();
        if cum >= target {
            return i + 1;
        }
    }
    significant
}

/// SVD truncation of an activation matrix (centered here if it is not yet).
pub fn truncate_by_variance(x: &ActivationMatrix, threshold: f64) -> Result<TruncatedBasis<f64>> {
    truncate_matrix(x.center().values(), threshold, None)
}

/// SVD truncation of a centered matrix of either scalar type.
pub fn truncate_matrix<T: Scalar>(
    xc: &DMatrix<T>,
    threshold: f64,
    counter: Option<&FlopCounter>,
) -> Result<TruncatedBasis<T>> {
    check_threshold(threshold)?;
    let (m, d) = xc.shape();
    flops::record(counter, flops::scale(T::IS_COMPLEX) * flops::svd(m, d));
    let svd = linalg::svd(xc)?;
    let kept = kept_count(&svd.s, threshold, (m, d));
    if kept == 0 {
        return Err(Error::ZeroVariance);
    }
    let total: f64 = svd.s.iter().sum();
    let explained_fraction = svd.s[..kept].iter().sum::<f64>() / total;
    Ok(TruncatedBasis {
        directions: svd.vt.rows(0, kept).into_owned(),
        left: svd.u.columns(0, kept).into_owned(),
        singular_values: svd.s,
        kept,
        original: m,
        explained_fraction,
    })
}

/// Denominator used when averaging canonical correlations into ρ̄.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// `min(m′₁, m′₂)`: the number of retained directions.
    #[default]
    Retained,
    /// `min(m₁, m₂)`: the size of the smaller layer.
    LayerSize,
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retained" => Ok(Denominator::Retained),
            "layer-size" | "layer_size" => Ok(Denominator::LayerSize),
            other => Err(Error::InvalidArgument(format!(
                "unknown denominator {other:?} (expected retained | layer-size)"
            ))),
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Denominator::Retained => "retained",
            Denominator::LayerSize => "layer-size",
        })
    }
}

/// Anything that yields canonical correlations with kept and original
/// direction counts.
pub trait Similarity {
    fn correlations(&self) -> &[f64];
    /// `(m′₁, m′₂)`
    fn kept(&self) -> (usize, usize);
    /// `(m₁, m₂)`
    fn original(&self) -> (usize, usize);
}

/// ρ̄: the sum of canonical correlations over the chosen denominator,
/// clamped to `[0, 1]`.
pub fn mean_similarity(result: &(impl Similarity + ?Sized), denominator: Denominator) -> f64 {
    let (a, b) = match denominator {
        Denominator::Retained => result.kept(),
        Denominator::LayerSize => result.original(),
    };
    let denom = a.min(b);
    if denom == 0 {
        return 0.0;
    }
    let sum: f64 = result.correlations().iter().sum();
    (sum / denom as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct SvccaResult<T: Scalar> {
    pub cca: CcaResult<T>,
    pub basis_x: TruncatedBasis<T>,
    pub basis_y: TruncatedBasis<T>,
    pub kept_x: usize,
    pub kept_y: usize,
    pub original_x: usize,
    pub original_y: usize,
    /// ρ̄ with the default (retained) denominator.
    pub mean_similarity: f64,
}

impl<T: Scalar> Similarity for SvccaResult<T> {
    fn correlations(&self) -> &[f64] {
        &self.cca.correlations
    }

    fn kept(&self) -> (usize, usize) {
        (self.kept_x, self.kept_y)
    }

    fn original(&self) -> (usize, usize) {
        (self.original_x, self.original_y)
    }
}

impl<T: Scalar> SvccaResult<T> {
    /// Canonical directions of X as coefficient rows over X's neurons
    /// (`r × m₁`), applied to centered activations.
    pub fn neuron_directions_x(&self) -> DMatrix<T> {
        &self.cca.transform_x * self.basis_x.neuron_map()
    }

    pub fn neuron_directions_y(&self) -> DMatrix<T> {
        &self.cca.transform_y * self.basis_y.neuron_map()
    }
}

pub fn svcca(x: &ActivationMatrix, y: &ActivationMatrix, threshold: f64) -> Result<SvccaResult<f64>> {
    if x.datapoints() != y.datapoints() {
        return Err(Error::DatapointMismatch {
            left: x.datapoints(),
            right: y.datapoints(),
        });
    }
    svcca_matrices(x.values(), y.values(), threshold, linalg::DEFAULT_EPS, None)
}

/// SVCCA over raw matrices (rows = neurons); inputs are centered here.
pub fn svcca_matrices<T: Scalar>(
    x: &DMatrix<T>,
    y: &DMatrix<T>,
    threshold: f64,
    eps: f64,
    counter: Option<&FlopCounter>,
) -> Result<SvccaResult<T>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DatapointMismatch {
            left: x.ncols(),
            right: y.ncols(),
        });
    }
    let basis_x = truncate_matrix(&cca::center_rows(x), threshold, counter)?;
    let basis_y = truncate_matrix(&cca::center_rows(y), threshold, counter)?;
    svcca_from_bases(basis_x, basis_y, eps, counter)
}

/// CCA step of SVCCA on two already truncated layers.
pub fn svcca_from_bases<T: Scalar>(
    basis_x: TruncatedBasis<T>,
    basis_y: TruncatedBasis<T>,
    eps: f64,
    counter: Option<&FlopCounter>,
) -> Result<SvccaResult<T>> {
    if basis_x.directions.ncols() != basis_y.directions.ncols() {
        return Err(Error::DatapointMismatch {
            left: basis_x.directions.ncols(),
            right: basis_y.directions.ncols(),
        });
    }
    let cca = cca::cca_matrices(&basis_x.directions, &basis_y.directions, eps, counter)?;
    let mut result = SvccaResult {
        kept_x: basis_x.kept,
        kept_y: basis_y.kept,
        original_x: basis_x.original,
        original_y: basis_y.original,
        cca,
        basis_x,
        basis_y,
        mean_similarity: 0.0,
    };
    result.mean_similarity = mean_similarity(&result, Denominator::Retained);
    Ok(result)
}

/// SVCCA that truncates only X; Y (e.g. a single logit) is used whole.
pub fn svcca_truncate_x(
    x: &ActivationMatrix,
    y: &ActivationMatrix,
    threshold: f64,
) -> Result<SvccaResult<f64>> {
    if x.datapoints() != y.datapoints() {
        return Err(Error::DatapointMismatch {
            left: x.datapoints(),
            right: y.datapoints(),
        });
    }
    let basis_x = truncate_matrix(x.center().values(), threshold, None)?;
    let basis_y = truncate_matrix(y.center().values(), 1.0, None)?;
    svcca_from_bases(basis_x, basis_y, linalg::DEFAULT_EPS, None)
}

/// An ordered set of directions in a layer's neuron space (`k × m`, rows
/// ordered by importance). Rows need not be orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    rows: RealMatrix,
}

impl Directions {
    pub fn new(rows: RealMatrix) -> Self {
        Directions { rows }
    }

    /// Canonical directions of the X side of an SVCCA result.
    pub fn canonical_x(result: &SvccaResult<f64>) -> Self {
        Directions::new(result.neuron_directions_x())
    }

    pub fn canonical_y(result: &SvccaResult<f64>) -> Self {
        Directions::new(result.neuron_directions_y())
    }

    /// Canonical directions of X with near-tied correlations ordered by the
    /// variance of `x` they explain.
    ///
    /// Consecutive directions whose correlations differ by less than
    /// `tie_tolerance` form a group. CCA fixes such a group only up to a
    /// rotation, so each group is rotated until its variates are ordered by
    /// explained layer variance. A tolerance of 0 keeps the plain order.
    pub fn canonical_x_ranked(result: &SvccaResult<f64>, x: &ActivationMatrix, tie_tolerance: f64) -> Result<Self> {
        let rows = result.neuron_directions_x();
        let rho = result.correlations();
        if tie_tolerance <= 0.0 || rho.len() < 2 {
            return Ok(Directions::new(rows));
        }
        let cov = neuron_covariance(x)?;
        let mut out = rows.clone();
        let mut start = 0;
        while start < rho.len() {
            let mut end = start + 1;
            while end < rho.len() && rho[end - 1] - rho[end] < tie_tolerance {
                end += 1;
            }
            if end - start > 1 {
                let group = rows.rows(start, end - start).into_owned();
                let gram = &group * &cov * group.transpose();
                let white = linalg::inv_sqrt_psd(&gram, PINV_EPS)?.matrix * &group;
                let c = &cov * white.transpose();
                let eig = linalg::hermitian_eigen(&(c.transpose() * c))?;
                out.rows_mut(start, end - start).copy_from(&(eig.vectors.transpose() * white));
            }
            start = end;
        }
        Ok(Directions::new(out))
    }

    /// Every left singular vector of the centered layer, by decreasing
    /// singular value.
    pub fn singular(x: &ActivationMatrix) -> Result<Self> {
        let svd = linalg::svd(x.center().values())?;
        Ok(Directions::new(svd.u.transpose()))
    }

    /// Unit vectors on the given neurons, in order.
    pub fn neurons(indices: &[usize], width: usize) -> Self {
        let mut rows = RealMatrix::zeros(indices.len(), width);
        for (r, &i) in indices.iter().enumerate() {
            rows[(r, i)] = 1.0;
        }
        Directions::new(rows)
    }

    /// Follows these directions with `extra`, orthonormalised so the extra
    /// rows only contribute what is not already spanned.
    pub fn completed_with(&self, extra: &Directions) -> Self {
        let mut rows = RealMatrix::zeros(self.len() + extra.len(), self.dim());
        rows.rows_mut(0, self.len()).copy_from(&self.rows);
        rows.rows_mut(self.len(), extra.len()).copy_from(&extra.rows);
        Directions::new(linalg::orthonormal_rows(&rows))
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Width of the neuron space.
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &RealMatrix {
        &self.rows
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} out of range 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Orthonormal `k′ × m` basis of the span of the top-k rows.
    pub fn top_k_basis(&self, k: usize) -> Result<RealMatrix> {
        self.check_k(k)?;
        Ok(linalg::orthonormal_rows(&self.rows.rows(0, k).into_owned()))
    }

    /// `M_k = Σ·A_kᵀ·(A_k·Σ·A_kᵀ)⁺·A_k` for the top-k rows `A_k` and a layer
    /// covariance `Σ`. Applied to centered activations it gives their
    /// least-squares reconstruction from the k direction values; on the
    /// layer `Σ` came from, `M_k·X` projects every neuron's activation vector
    /// onto the span of the top-k directions over the datapoints.
    pub fn subspace_map(&self, k: usize, covariance: &RealMatrix) -> Result<RealMatrix> {
        self.check_k(k)?;
        if covariance.nrows() != self.dim() || !covariance.is_square() {
            return Err(Error::Shape(format!(
                "{}-neuron directions with a {}x{} covariance",
                self.dim(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let a = self.rows.rows(0, k);
        let loadings = covariance * a.transpose();
        let gram = a * &loadings;
        let r = linalg::inv_sqrt_psd(&gram, PINV_EPS)?.matrix;
        Ok(loadings * (&r * &r) * a)
    }

    /// Orthonormal `k′ × m` basis of the image of [`Directions::subspace_map`]:
    /// the neuron-space subspace the projected activations live in.
    pub fn image_basis(&self, k: usize, covariance: &RealMatrix) -> Result<RealMatrix> {
        let m = self.subspace_map(k, covariance)?;
        let svd = linalg::svd(&m)?;
        let floor = svd.s.first().copied().unwrap_or(0.0) * PINV_EPS.sqrt();
        let rank = svd.s.iter().filter(|&&s| s > floor).count();
        Ok(svd.u.columns(0, rank).transpose())
    }
}

/// Relative eigenvalue floor for the small pseudo-inverses above; only
/// rounding-level directions are dropped.
const PINV_EPS: f64 = 1e-13;

/// Unbiased covariance of a layer's neurons.
pub fn neuron_covariance(x: &ActivationMatrix) -> Result<RealMatrix> {
    let xc = x.center();
    Ok(cca::covariance_matrices(xc.values(), xc.values())?.xx)
}

/// Projects every neuron of X (a vector over datapoints) onto the span of
/// the top-k directions' activation vectors, keeping the neuron means:
/// `μ + M_k·(X − μ)`.
pub fn project_topk(x: &ActivationMatrix, directions: &Directions, k: usize) -> Result<ActivationMatrix> {
    if directions.dim() != x.neurons() {
        return Err(Error::Shape(format!(
            "directions over {} neurons applied to a {}-neuron layer",
            directions.dim(),
            x.neurons()
        )));
    }
    let map = directions.subspace_map(k, &neuron_covariance(x)?)?;
    let means = x.means();
    let mut out = map * x.center().values();
    for (r, mu) in means.iter().enumerate() {
        out.row_mut(r).add_scalar_mut(*mu);
    }
    ActivationMatrix::new(out)
}

/// How the axis-aligned baselines pick their neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Uniformly random subset, reproducible from the seed.
    Random,
    /// Neurons with the largest mean absolute activation.
    MaxActivation,
}

/// Neuron indices chosen by a baseline, in selection order.
pub fn select_neurons(x: &ActivationMatrix, k: usize, mode: BaselineMode, seed: u64) -> Result<Vec<usize>> {
    let m = x.neurons();
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("k = {k} out of range 1..={m}")));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    match mode {
        BaselineMode::Random => {
            let mut rng = crate::fixtures::rng(seed);
            idx.shuffle(&mut rng);
        }
        BaselineMode::MaxActivation => {
            let d = x.datapoints() as f64;
            let score: Vec<f64> = (0..m)
                .map(|r| x.values().row(r).iter().map(|v| v.abs()).sum::<f64>() / d)
                .collect();
            idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
        }
    }
    idx.truncate(k);
    Ok(idx)
}

/// Projection of X onto the span of `k` chosen neurons.
pub fn neuron_subspace_baselines(
    x: &ActivationMatrix,
    k: usize,
    mode: BaselineMode,
    seed: u64,
) -> Result<ActivationMatrix> {
    let idx = select_neurons(x, k, mode, seed)?;
    project_topk(x, &Directions::neurons(&idx, x.neurons()), k)
}

/// Neurons ranked by the ℓ₂ norm of their coefficients across the top-k
/// directions, most important first; returns the first `count`.
pub fn important_neurons(directions: &Directions, k: usize, count: usize) -> Result<Vec<usize>> {
    let p = directions.top_k_basis(k)?;
    let m = directions.dim();
    let norms: Vec<f64> = (0..m).map(|j| p.column(j).norm()).collect();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx.truncate(count.min(m));
    Ok(idx)
}
