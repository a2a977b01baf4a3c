//! Dense kernels shared by every higher module: SVD, Hermitian
//! eigendecomposition, PSD inverse square roots and the unitary 2-D DFT.
//!
//! Everything is generic over [`Scalar`] so that the same code path serves
//! real activations and the complex frequency blocks of the DFT route.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{ComplexField, DMatrix, DVector};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub use nalgebra::Complex;

pub type Complex64 = Complex<f64>;
pub type RealMatrix = DMatrix<f64>;
pub type ComplexMatrix = DMatrix<Complex64>;

const MAX_ITERS: usize = 10_000;

/// Element type of the math core: `f64` or `Complex<f64>`.
pub trait Scalar: ComplexField<RealField = f64> + Copy + Send + Sync + 'static {
    const IS_COMPLEX: bool;

    fn from_f64(v: f64) -> Self {
        <Self as ComplexField>::from_real(v)
    }

    /// `self / |self|`, or one for zero.
    fn phase(self) -> Self {
        let m = self.modulus();
        if m == 0.0 {
            Self::one()
        } else {
            self.unscale(m)
        }
    }

    fn is_finite_value(self) -> bool;
}

impl Scalar for f64 {
    const IS_COMPLEX: bool = false;

    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Complex64 {
    const IS_COMPLEX: bool = true;

    fn is_finite_value(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Thin singular value decomposition `M = U·diag(s)·Vᴴ` with `s` descending.
#[derive(Debug, Clone)]
pub struct Svd<T: Scalar> {
    pub u: DMatrix<T>,
    pub s: Vec<f64>,
    pub vt: DMatrix<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn reconstruct(&self) -> DMatrix<T> {
        let mut us = self.u.clone();
        for (j, &sj) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(sj);
        }
        us * &self.vt
    }
}

pub fn check_finite<T: Scalar>(m: &DMatrix<T>) -> Result<()> {
    match m.iter().position(|v| !v.is_finite_value()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub fn svd<T: Scalar>(m: &DMatrix<T>) -> Result<Svd<T>> {
    check_finite(m)?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("svd of empty {rows}x{cols} matrix")));
    }
    let raw = nalgebra::SVD::try_new(m.clone(), true, true, f64::EPSILON, MAX_ITERS)
        .ok_or(Error::NoConvergence("svd"))?;
    let u = raw.u.ok_or(Error::NoConvergence("svd"))?;
    let vt = raw.v_t.ok_or(Error::NoConvergence("svd"))?;
    let s = raw.singular_values;

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let k = order.len();
    let mut su = DMatrix::<T>::zeros(rows, k);
    let mut svt = DMatrix::<T>::zeros(k, cols);
    let mut ss = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        svt.set_row(dst, &vt.row(src));
        ss.push(s[src].max(0.0));
    }
    Ok(Svd { u: su, s: ss, vt: svt })
}

/// Eigenpairs of a Hermitian matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct HermitianEigen<T: Scalar> {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: DMatrix<T>,
}

/// Largest entrywise |S − Sᴴ| relative to the largest |S|.
pub fn hermitian_defect<T: Scalar>(s: &DMatrix<T>) -> f64 {
    let scale = s.iter().map(|v| v.modulus()).fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let n = s.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((s[(i, j)] - s[(j, i)].conjugate()).modulus());
        }
    }
    worst / scale
}

pub fn hermitian_eigen<T: Scalar>(s: &DMatrix<T>) -> Result<HermitianEigen<T>> {
    if !s.is_square() {
        return Err(Error::Shape(format!(
            "eigendecomposition of non-square {}x{} matrix",
            s.nrows(),
            s.ncols()
        )));
    }
    check_finite(s)?;
    let defect = hermitian_defect(s);
    if defect > 1e-10 {
        return Err(Error::NotHermitian(defect));
    }
    let sym = (s + s.adjoint()).unscale(2.0);
    let raw = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, MAX_ITERS)
        .ok_or(Error::NoConvergence("hermitian eigendecomposition"))?;
    let mut order: Vec<usize> = (0..raw.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        raw.eigenvalues[b]
            .total_cmp(&raw.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let n = s.nrows();
    let mut vectors = DMatrix::<T>::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &raw.eigenvectors.column(src));
        values.push(raw.eigenvalues[src]);
    }
    Ok(HermitianEigen { values, vectors })
}

/// Default relative eigenvalue floor for [`inv_sqrt_psd`].
pub const DEFAULT_EPS: f64 = 1e-6;

/// Pseudo-inverse square root of a Hermitian PSD matrix.
#[derive(Debug, Clone)]
pub struct InvSqrt<T: Scalar> {
    pub matrix: DMatrix<T>,
    /// Number of eigenvalues above the floor.
    pub rank: usize,
}

/// `S^{-1/2}` with eigenvalues below `eps·λ_max` treated as zero, so that
/// `R·S·R` is the projector onto the significant eigenspace.
pub fn inv_sqrt_psd<T: Scalar>(s: &DMatrix<T>, eps: f64) -> Result<InvSqrt<T>> {
    let eig = hermitian_eigen(s)?;
    let n = s.nrows();
    let lmax = eig.values.first().copied().unwrap_or(0.0);
    if lmax <= 0.0 {
        // Zero (or negative definite, caught below) matrix.
        if let Some(&low) = eig.values.last() {
            if low < 0.0 {
                return Err(Error::NotPsd {
                    eigenvalue: low,
                    floor: 0.0,
                });
            }
        }
        return Ok(InvSqrt {
            matrix: DMatrix::zeros(n, n),
            rank: 0,
        });
    }
    let floor = eps * lmax;
    if let Some(&low) = eig.values.last() {
        if low < -floor {
            return Err(Error::NotPsd {
                eigenvalue: low,
                floor,
            });
        }
    }
    let mut scaled = eig.vectors.clone();
    let mut rank = 0;
    for (j, &l) in eig.values.iter().enumerate() {
        let f = if l > floor {
            rank += 1;
            1.0 / l.sqrt()
        } else {
            0.0
        };
        scaled.column_mut(j).scale_mut(f);
    }
    let matrix = &scaled * eig.vectors.adjoint();
    Ok(InvSqrt { matrix, rank })
}

/// Orthonormalises the rows of `m` (modified Gram–Schmidt, two passes),
/// dropping rows that are numerically dependent on earlier ones.
pub fn orthonormal_rows<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let cols = m.ncols();
    let scale = m.iter().map(|v| v.modulus()).fold(0.0, f64::max);
    let tol = scale * 1e-10 * (cols.max(1) as f64).sqrt();
    let mut out: Vec<DVector<T>> = Vec::new();
    for r in 0..m.nrows() {
        let mut v: DVector<T> = m.row(r).transpose();
        for _ in 0..2 {
            for q in &out {
                let proj = q.dotc(&v);
                v.axpy(-proj, q, T::one());
            }
        }
        let norm = v.norm();
        if norm > tol {
            out.push(v.unscale(norm));
        }
    }
    let mut res = DMatrix::<T>::zeros(out.len(), cols);
    for (i, q) in out.iter().enumerate() {
        res.set_row(i, &q.transpose());
    }
    res
}

/// Unitary DFT matrix, `F[k][j] = exp(-2πi·kj/n)/√n`.
pub fn dft_matrix(n: usize) -> ComplexMatrix {
    let norm = 1.0 / (n as f64).sqrt();
    DMatrix::from_fn(n, n, |k, j| {
        let angle = -2.0 * PI * ((k * j) % n) as f64 / n as f64;
        Complex64::from_polar(norm, angle)
    })
}

/// Forward and inverse plans.
type FftPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

/// Unitary 1-D DFT of a fixed length. Powers of two go through an FFT; any
/// other length uses the direct O(n²) sum.
#[derive(Clone)]
pub struct Dft {
    n: usize,
    norm: f64,
    fast: Option<FftPair>,
    twiddles: Vec<Complex64>,
}

impl std::fmt::Debug for Dft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dft")
            .field("n", &self.n)
            .field("fast", &self.fast.is_some())
            .finish()
    }
}

impl Dft {
    pub fn new(n: usize) -> Self {
        let norm = 1.0 / (n.max(1) as f64).sqrt();
        if n.is_power_of_two() {
            let mut planner = FftPlanner::new();
            let fwd = planner.plan_fft_forward(n);
            let inv = planner.plan_fft_inverse(n);
            Dft {
                n,
                norm,
                fast: Some((fwd, inv)),
                twiddles: Vec::new(),
            }
        } else {
            let twiddles = (0..n)
                .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
                .collect();
            Dft {
                n,
                norm,
                fast: None,
                twiddles,
            }
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn uses_fft(&self) -> bool {
        self.fast.is_some()
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, false);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, true);
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        assert_eq!(buf.len(), self.n, "dft length mismatch");
        match &self.fast {
            Some((fwd, inv)) => {
                if inverse {
                    inv.process(buf)
                } else {
                    fwd.process(buf)
                }
            }
            None => {
                let n = self.n;
                let input = buf.to_vec();
                for (k, out) in buf.iter_mut().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (j, x) in input.iter().enumerate() {
                        let w = self.twiddles[(k * j) % n];
                        acc += x * if inverse { w.conj() } else { w };
                    }
                    *out = acc;
                }
            }
        }
        for v in buf.iter_mut() {
            *v *= self.norm;
        }
    }

    /// In-place 2-D transform `F·c·Fᵀ` of a row-major n×n buffer.
    pub fn forward2(&self, buf: &mut [Complex64]) {
        self.run2(buf, false);
    }

    /// In-place inverse 2-D transform `F*·c·F*ᵀ` of a row-major n×n buffer.
    pub fn inverse2(&self, buf: &mut [Complex64]) {
        self.run2(buf, true);
    }

    fn run2(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n * n, "dft2 buffer must be n×n");
        for row in buf.chunks_mut(n) {
            self.run(row, inverse);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = buf[i * n + j];
            }
            self.run(&mut col, inverse);
            for i in 0..n {
                buf[i * n + j] = col[i];
            }
        }
    }
}

fn to_row_major(c: &ComplexMatrix) -> Vec<Complex64> {
    let n = c.nrows();
    let mut buf = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            buf.push(c[(i, j)]);
        }
    }
    buf
}

fn require_square(c: &ComplexMatrix) -> Result<usize> {
    if !c.is_square() || c.nrows() == 0 {
        return Err(Error::Shape(format!(
            "dft2 needs a square channel, got {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    Ok(c.nrows())
}

/// Unitary 2-D DFT of a square channel, `F·c·Fᵀ`.
pub fn dft2(channel: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = require_square(channel)?;
    let mut buf = to_row_major(channel);
    Dft::new(n).forward2(&mut buf);
    Ok(DMatrix::from_row_slice(n, n, &buf))
}

/// Inverse of [`dft2`].
pub fn idft2(spectrum: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = require_square(spectrum)?;
    let mut buf = to_row_major(spectrum);
    Dft::new(n).inverse2(&mut buf);
    Ok(DMatrix::from_row_slice(n, n, &buf))
}

/// Widens a real matrix to complex.
pub fn complexify(m: &RealMatrix) -> ComplexMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

/// `vec(c)`: stacks the columns of `c` (column-major order).
pub fn vec_columns<T: Scalar>(c: &DMatrix<T>) -> DVector<T> {
    DVector::from_iterator(c.len(), c.iter().copied())
}
