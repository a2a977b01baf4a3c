//! Seeded synthetic inputs shared by tests, the verification commands and
//! the acceptance suite.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::RealMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal `rows × cols` matrix.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> RealMatrix {
    let mut r = rng(seed);
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

/// Haar-ish random orthogonal matrix (QR of a Gaussian with sign fix).
pub fn orthogonal(n: usize, seed: u64) -> RealMatrix {
    let qr = gaussian(n, n, seed).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Orthonormal columns spanning a random subspace of centered vectors:
/// `d × k`, every column has zero mean and unit norm.
pub fn centered_orthonormal(d: usize, k: usize, seed: u64) -> RealMatrix {
    let g = crate::cca::center_rows(&gaussian(k, d, seed)).transpose();
    let q = g.qr().q();
    q.columns(0, k).into_owned()
}

/// The three subspaces of the "how many directions matter" example.
///
/// * `a`: 50 directions.
/// * `b`: 200 directions; 50 span the same space as `a`, the other 150 are
///   independent noise at `noise` relative magnitude.
/// * `c`: 200 directions; 50 span the same space as `a`, the other 150 are
///   independent directions at full magnitude.
///
/// Neurons are random invertible mixtures of the underlying directions.
#[derive(Debug, Clone)]
pub struct SubspaceTriple {
    pub a: RealMatrix,
    pub b: RealMatrix,
    pub c: RealMatrix,
}

pub fn subspace_triple(d: usize, noise: f64, seed: u64) -> SubspaceTriple {
    assert!(d > 350, "need room for 350 orthogonal directions");
    let basis = centered_orthonormal(d, 350, seed).transpose(); // 350 × d
    let shared = basis.rows(0, 50).into_owned();
    let noise_dirs = basis.rows(50, 150).into_owned();
    let useful = basis.rows(200, 150).into_owned();
    let mut r = rng(seed ^ 0x5eed);
    let mut scales = |n: usize| -> RealMatrix {
        RealMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| {
            r.random_range(1.0..2.0)
        }))
    };
    let s_a = scales(50);
    let s_b = scales(50);
    let s_c = scales(50);
    let s_useful = scales(150);
    let a = orthogonal(50, seed + 1) * s_a * &shared;

    let mut b_dirs = RealMatrix::zeros(200, d);
    b_dirs.rows_mut(0, 50).copy_from(&(s_b * &shared));
    b_dirs
        .rows_mut(50, 150)
        .copy_from(&(&noise_dirs * noise));
    let b = orthogonal(200, seed + 2) * b_dirs;

    let mut c_dirs = RealMatrix::zeros(200, d);
    c_dirs.rows_mut(0, 50).copy_from(&(s_c * &shared));
    c_dirs.rows_mut(50, 150).copy_from(&(s_useful * useful));
    let c = orthogonal(200, seed + 3) * c_dirs;
    SubspaceTriple { a, b, c }
}
