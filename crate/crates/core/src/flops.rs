//! Analytic floating-point operation accounting.
//!
//! Kernels report their textbook operation counts to a [`FlopCounter`] at the
//! call site, so two algorithms for the same quantity can be compared without
//! depending on wall-clock noise. A complex multiply-add is counted as four
//! real ones.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Default)]
pub struct FlopCounter(AtomicU64);

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, flops: u64) {
        self.0.fetch_add(flops, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

pub(crate) fn record(counter: Option<&FlopCounter>, flops: u64) {
    if let Some(c) = counter {
        c.add(flops);
    }
}

/// `(m×k)·(k×n)` product.
pub fn gemm(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Hermitian eigendecomposition with eigenvectors (tridiagonalisation plus
/// implicit QR), ~9n³.
pub fn eig(n: usize) -> u64 {
    9 * (n as u64).pow(3)
}

/// Thin SVD of an m×n matrix with both factors (Golub–Reinsch), with
/// `p = min(m, n)`, `q = max(m, n)`: ~4qp² + 8p³.
pub fn svd(m: usize, n: usize) -> u64 {
    let (p, q) = (m.min(n) as u64, m.max(n) as u64);
    4 * q * p * p + 8 * p * p * p
}

/// Size-n complex FFT, ~5 n log2 n.
pub fn fft(n: usize) -> u64 {
    if n <= 1 {
        return 0;
    }
    let log = (usize::BITS - (n - 1).leading_zeros()) as u64;
    5 * n as u64 * log
}

/// Real-valued cost multiplier for an element type.
pub(crate) fn scale(is_complex: bool) -> u64 {
    if is_complex {
        4
    } else {
        1
    }
}
