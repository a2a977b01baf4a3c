//! Canonical correlation analysis between two sets of neuron activation
//! vectors.
//!
//! The canonical correlations are the singular values of the whitened
//! cross-covariance `Σxx^{-1/2} Σxy Σyy^{-1/2}`. They are the square roots of
//! the eigenvalues of the usual quadratic-form eigenproblem
//! `Σxx^{-1/2} Σxy Σyy^{-1} Σyx Σxx^{-1/2}`, but going through the SVD avoids
//! forming that squared product.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::flops::{self, FlopCounter};
use crate::linalg::{self, RealMatrix, Scalar};

/// `m` neurons × `d` datapoints of activations; row `i` is neuron `i`'s
/// response over the whole probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    values: RealMatrix,
    centered: bool,
}

impl ActivationMatrix {
    pub fn new(values: RealMatrix) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Shape(format!(
                "activation matrix must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        linalg::check_finite(&values)?;
        Ok(ActivationMatrix {
            values,
            centered: false,
        })
    }

    /// Builds from a row-major `neurons × datapoints` slice.
    pub fn from_row_slice(neurons: usize, datapoints: usize, data: &[f64]) -> Result<Self> {
        if data.len() != neurons * datapoints {
            return Err(Error::Shape(format!(
                "{} values for a {neurons}x{datapoints} matrix",
                data.len()
            )));
        }
        Self::new(RealMatrix::from_row_slice(neurons, datapoints, data))
    }

    pub fn neurons(&self) -> usize {
        self.values.nrows()
    }

    pub fn datapoints(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &RealMatrix {
        &self.values
    }

    pub fn into_values(self) -> RealMatrix {
        self.values
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Mean of every neuron over the datapoints.
    pub fn means(&self) -> Vec<f64> {
        row_means(&self.values)
    }

    pub fn center(&self) -> ActivationMatrix {
        if self.centered {
            return self.clone();
        }
        ActivationMatrix {
            values: center_rows(&self.values),
            centered: true,
        }
    }

    /// Row-major copy of the values.
    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        for r in 0..self.neurons() {
            out.extend(self.values.row(r).iter());
        }
        out
    }
}

pub fn row_means<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let d = m.ncols() as f64;
    (0..m.nrows())
        .map(|r| m.row(r).iter().fold(T::zero(), |a, &b| a + b).unscale(d))
        .collect()
}

/// Subtracts every row's mean.
pub fn center_rows<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let means = row_means(m);
    let mut out = m.clone();
    for (r, mean) in means.into_iter().enumerate() {
        for v in out.row_mut(r).iter_mut() {
            *v -= mean;
        }
    }
    out
}

/// Σxx, Σxy, Σyy with the unbiased `d − 1` normalisation.
#[derive(Debug, Clone)]
pub struct Covariances<T: Scalar> {
    pub xx: DMatrix<T>,
    pub xy: DMatrix<T>,
    pub yy: DMatrix<T>,
}

fn hermitian_part<T: Scalar>(m: DMatrix<T>) -> DMatrix<T> {
    (&m + m.adjoint()).unscale(2.0)
}

/// Covariances of already-centered inputs (conjugate transposes for complex
/// data).
pub fn covariance_matrices<T: Scalar>(x: &DMatrix<T>, y: &DMatrix<T>) -> Result<Covariances<T>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DatapointMismatch {
            left: x.ncols(),
            right: y.ncols(),
        });
    }
    let d = x.ncols();
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least 2 datapoints, got {d}"
        )));
    }
    let norm = (d - 1) as f64;
    Ok(Covariances {
        xx: hermitian_part((x * x.adjoint()).unscale(norm)),
        xy: (x * y.adjoint()).unscale(norm),
        yy: hermitian_part((y * y.adjoint()).unscale(norm)),
    })
}

/// Covariances of two activation matrices. Both must already be centered.
pub fn covariances(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<Covariances<f64>> {
    if !x.is_centered() || !y.is_centered() {
        return Err(Error::InvalidArgument(
            "covariances expects centered inputs".into(),
        ));
    }
    covariance_matrices(x.values(), y.values())
}

/// Canonical correlations and the maps that produce the aligned directions.
#[derive(Debug, Clone)]
pub struct CcaResult<T: Scalar> {
    /// Descending, each in `[0, 1]`.
    pub correlations: Vec<f64>,
    /// `r × m₁`; row `i` maps (centered) neuron coordinates of X to canonical
    /// direction `i`.
    pub transform_x: DMatrix<T>,
    /// `r × m₂`, likewise for Y.
    pub transform_y: DMatrix<T>,
    /// `r × d`, equal to `transform_x · center(X)`.
    pub aligned_x: DMatrix<T>,
    /// `r × d`, equal to `transform_y · center(Y)`.
    pub aligned_y: DMatrix<T>,
}

impl<T: Scalar> CcaResult<T> {
    pub fn len(&self) -> usize {
        self.correlations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correlations.is_empty()
    }
}

/// CCA on real activation matrices (centered internally).
pub fn cca(x: &ActivationMatrix, y: &ActivationMatrix, eps: f64) -> Result<CcaResult<f64>> {
    cca_matrices(x.values(), y.values(), eps, None)
}

/// CCA on raw matrices of either scalar type; rows are variables, columns
/// datapoints. Inputs are centered here.
pub fn cca_matrices<T: Scalar>(
    x: &DMatrix<T>,
    y: &DMatrix<T>,
    eps: f64,
    counter: Option<&FlopCounter>,
) -> Result<CcaResult<T>> {
    let (m1, d) = x.shape();
    let m2 = y.nrows();
    if y.ncols() != d {
        return Err(Error::DatapointMismatch {
            left: d,
            right: y.ncols(),
        });
    }
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "cca needs at least 2 datapoints, got {d}"
        )));
    }
    if d <= m1.max(m2) {
        log::warn!(
            "cca: {d} datapoints for {m1} and {m2} variables; correlations are likely inflated"
        );
    }
    let k = flops::scale(T::IS_COMPLEX);

    let xc = center_rows(x);
    let yc = center_rows(y);
    flops::record(counter, k * ((m1 + m2) * d) as u64);

    let cov = covariance_matrices(&xc, &yc)?;
    flops::record(
        counter,
        k * (flops::gemm(m1, d, m1) + flops::gemm(m1, d, m2) + flops::gemm(m2, d, m2)),
    );

    let rx = linalg::inv_sqrt_psd(&cov.xx, eps)?;
    let ry = linalg::inv_sqrt_psd(&cov.yy, eps)?;
    flops::record(
        counter,
        k * (flops::eig(m1) + flops::eig(m2) + flops::gemm(m1, m1, m1) + flops::gemm(m2, m2, m2)),
    );
    if rx.rank == 0 || ry.rank == 0 {
        return Err(Error::ZeroVariance);
    }

    let whitened = &rx.matrix * &cov.xy * &ry.matrix;
    flops::record(
        counter,
        k * (flops::gemm(m1, m1, m2) + flops::gemm(m1, m2, m2) + flops::svd(m1, m2)),
    );
    let svd = linalg::svd(&whitened)?;

    let r = rx.rank.min(ry.rank).min(svd.s.len());
    let correlations: Vec<f64> = svd.s[..r].iter().map(|s| s.clamp(0.0, 1.0)).collect();
    let mut transform_x = svd.u.columns(0, r).adjoint() * &rx.matrix;
    let mut transform_y = svd.vt.rows(0, r).into_owned() * &ry.matrix;
    let mut aligned_x = &transform_x * &xc;
    let mut aligned_y = &transform_y * &yc;
    flops::record(
        counter,
        k * (flops::gemm(r, m1, m1)
            + flops::gemm(r, m2, m2)
            + flops::gemm(r, m1, d)
            + flops::gemm(r, m2, d)),
    );

    // Canonical pairs are only defined up to a shared sign (phase). Fix it so
    // the largest-magnitude entry of each aligned X direction is positive real.
    for i in 0..r {
        let row = aligned_x.row(i);
        let mut best = 0;
        let mut best_mod = -1.0;
        for (j, v) in row.iter().enumerate() {
            let m = v.modulus();
            if m > best_mod {
                best_mod = m;
                best = j;
            }
        }
        let fix = aligned_x[(i, best)].phase().conjugate();
        aligned_x.row_mut(i).scale_mut_by(fix);
        aligned_y.row_mut(i).scale_mut_by(fix);
        transform_x.row_mut(i).scale_mut_by(fix);
        transform_y.row_mut(i).scale_mut_by(fix);
    }

    Ok(CcaResult {
        correlations,
        transform_x,
        transform_y,
        aligned_x,
        aligned_y,
    })
}

trait ScaleBy<T> {
    fn scale_mut_by(&mut self, f: T);
}

impl<T: Scalar, S> ScaleBy<T> for nalgebra::Matrix<T, nalgebra::U1, nalgebra::Dyn, S>
where
    S: nalgebra::StorageMut<T, nalgebra::U1, nalgebra::Dyn>,
{
    fn scale_mut_by(&mut self, f: T) {
        for v in self.iter_mut() {
            *v *= f;
        }
    }
}

/// Pearson correlation of two equally long real vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Complex64, ComplexMatrix, DEFAULT_EPS};
    use crate::fixtures::{gaussian, orthogonal};

    #[test]
    fn center_row() {
        let a = ActivationMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]).unwrap();
        let c = a.center();
        assert!(c.is_centered());
        assert_eq!(c.values().as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(c.center(), c);
    }

    #[test]
    fn center_random_means() {
        let a = ActivationMatrix::new(gaussian(3, 50, 1) * 5.0 + RealMatrix::from_element(3, 50, 2.0))
            .unwrap()
            .center();
        for m in a.means() {
            assert!(m.abs() < 1e-14);
        }
    }

    #[test]
    fn covariance_small_cases() {
        let x = ActivationMatrix::from_row_slice(1, 2, &[1.0, -1.0])
            .unwrap()
            .center();
        let c = covariances(&x, &x).unwrap();
        assert_eq!(c.xx[(0, 0)], 2.0);
        assert_eq!(c.xy, c.xx);
    }

    #[test]
    fn covariance_matches_double_loop() {
        let x = ActivationMatrix::new(gaussian(3, 100, 2)).unwrap().center();
        let y = ActivationMatrix::new(gaussian(4, 100, 3)).unwrap().center();
        let c = covariances(&x, &y).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..100 {
                    s += x.values()[(i, p)] * y.values()[(j, p)];
                }
                assert!((c.xy[(i, j)] - s / 99.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_errors() {
        let x = ActivationMatrix::new(gaussian(2, 10, 1)).unwrap().center();
        let y = ActivationMatrix::new(gaussian(2, 11, 1)).unwrap().center();
        assert!(matches!(
            covariances(&x, &y),
            Err(Error::DatapointMismatch { .. })
        ));
        let raw = ActivationMatrix::new(gaussian(2, 10, 1)).unwrap();
        assert!(covariances(&raw, &raw).is_err());
    }

    #[test]
    fn self_cca_is_one() {
        let x = ActivationMatrix::new(gaussian(5, 200, 4)).unwrap();
        let r = cca(&x, &x, DEFAULT_EPS).unwrap();
        assert_eq!(r.len(), 5);
        for rho in &r.correlations {
            assert!((rho - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn result_invariants() {
        let x = gaussian(4, 300, 5);
        let noise = gaussian(3, 300, 6);
        let y = gaussian(3, 4, 7) * &x + noise * 0.7;
        let r = cca_matrices(&x, &y, DEFAULT_EPS, None).unwrap();
        assert_eq!(r.len(), 3);
        let xc = center_rows(&x);
        assert!((&r.transform_x * &xc - &r.aligned_x).abs().max() < 1e-12);
        for i in 0..r.len() {
            let a: Vec<f64> = r.aligned_x.row(i).iter().copied().collect();
            let b: Vec<f64> = r.aligned_y.row(i).iter().copied().collect();
            assert!((pearson(&a, &b) - r.correlations[i]).abs() < 1e-8);
            if i > 0 {
                assert!(r.correlations[i - 1] >= r.correlations[i]);
            }
            for j in 0..i {
                let c: Vec<f64> = r.aligned_x.row(j).iter().copied().collect();
                assert!(pearson(&a, &c).abs() < 1e-8);
            }
            // sign convention
            let best = a
                .iter()
                .copied()
                .fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(best > 0.0);
        }
    }

    #[test]
    fn scaled_rotation_leaves_correlations() {
        let x = gaussian(4, 400, 8);
        let y = gaussian(4, 4, 9) * &x + gaussian(4, 400, 10);
        let base = cca_matrices(&x, &y, DEFAULT_EPS, None).unwrap();
        let u = orthogonal(4, 11);
        let dscale = RealMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 1.0, 1.7, 2.0]));
        let moved = dscale * u * &y;
        let other = cca_matrices(&x, &moved, DEFAULT_EPS, None).unwrap();
        for (a, b) in base.correlations.iter().zip(&other.correlations) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_variance_side() {
        let x = RealMatrix::from_element(2, 20, 3.0);
        let y = gaussian(2, 20, 1);
        assert!(matches!(
            cca_matrices(&x, &y, DEFAULT_EPS, None),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn complex_self_cca() {
        let re = gaussian(3, 60, 12);
        let im = gaussian(3, 60, 13);
        let z = ComplexMatrix::from_fn(3, 60, |i, j| Complex64::new(re[(i, j)], im[(i, j)]));
        let r = cca_matrices(&z, &z, DEFAULT_EPS, None).unwrap();
        for rho in &r.correlations {
            assert!((rho - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_in_arguments() {
        let x = gaussian(3, 150, 14);
        let y = gaussian(5, 3, 15) * &x + gaussian(5, 150, 16);
        let a = cca_matrices(&x, &y, DEFAULT_EPS, None).unwrap();
        let b = cca_matrices(&y, &x, DEFAULT_EPS, None).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.correlations.iter().zip(&b.correlations) {
            assert!((p - q).abs() < 1e-10);
        }
    }
}
