//! Self-generating checks of the frequency-domain identities.

use clap::ValueEnum;
use rand::Rng;
use svcca_core::convdft::{self, ConvFixture, DftMode};
use svcca_core::fixtures::{gaussian, rng};
use svcca_core::report::Table;
use svcca_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Theorem {
    /// Per-channel pixel covariance is invariant under every cyclic shift.
    Circulant,
    /// The DFT diagonalizes random circulant matrices.
    DftDiagonal,
    /// After the 2-D DFT, layer covariances only couple equal frequencies.
    BlockCov,
    /// Frequency-block SVCCA gives the dense coefficients.
    DftCcaEquiv,
    /// vec(A·C·B) = (Bᵀ ⊗ A)·vec(C).
    Kronecker,
}

#[derive(Debug, Clone, Copy)]
pub struct Params {
    pub n: usize,
    pub c: usize,
    pub augment: bool,
    pub seed: u64,
    pub trials: usize,
}

/// One measured deviation against its tolerance.
pub struct Measure {
    pub label: String,
    pub value: f64,
    pub tolerance: f64,
}

pub struct Verdict {
    pub measures: Vec<Measure>,
    /// Set when the fixture breaks the theorem's assumptions: the numbers
    /// are reported, not judged.
    pub approximate: bool,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.approximate || self.measures.iter().all(|m| m.value <= m.tolerance)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["check", "value", "tolerance", "status"]);
        for m in &self.measures {
            t.push(vec![m.label.clone(), m.value.to_string(), m.tolerance.to_string(), self.status(m).into()]);
        }
        t
    }

    fn status(&self, m: &Measure) -> &'static str {
        if self.approximate {
            "approximate"
        } else if m.value <= m.tolerance {
            "pass"
        } else {
            "fail"
        }
    }

    pub fn lines(&self) -> Vec<String> {
        self.measures
            .iter()
            .map(|m| format!("{}: {:.3e} (tolerance {:.0e}) {}", m.label, m.value, m.tolerance, self.status(m)))
            .collect()
    }
}

fn fixture(p: &Params) -> Result<ConvFixture> {
    // Three base images keep the unaugmented fixture well short of full rank
    // while the augmented one has 3·n² datapoints.
    convdft::translation_fixture(p.n, p.c, 3, p.augment, p.seed)
}

fn measure(label: impl Into<String>, value: f64, tolerance: f64) -> Measure {
    Measure {
        label: label.into(),
        value,
        tolerance,
    }
}

pub fn run(theorem: Theorem, p: &Params) -> Result<Verdict> {
    if p.n == 0 || p.c == 0 || p.trials == 0 {
        return Err(Error::InvalidArgument("--n, --c and --trials must be positive".into()));
    }
    let mut approximate = false;
    let measures = match theorem {
        Theorem::Circulant => {
            approximate = !p.augment;
            let fx = fixture(p)?;
            let mut out = Vec::new();
            for (name, layer) in [("layer1", &fx.layer1), ("layer2", &fx.layer2)] {
                for ch in 0..p.c {
                    let cov = convdft::channel_vec_covariance(layer, ch)?;
                    let scale = cov.abs().max().max(f64::MIN_POSITIVE);
                    let dev = convdft::verify_circulant(&cov, p.n)? / scale;
                    out.push(measure(format!("{name} channel {ch} shift deviation (relative)"), dev, 1e-9));
                }
            }
            out
        }
        Theorem::DftDiagonal => {
            let mut r = rng(p.seed);
            let mut worst: f64 = 0.0;
            for _ in 0..p.trials {
                let row: Vec<f64> = (0..p.n).map(|_| r.random_range(-1.0..1.0)).collect();
                worst = worst.max(convdft::verify_dft_diagonalizes(&convdft::circulant(&row))?.relative);
            }
            vec![measure(
                format!("{} circulants of size {}: off-diagonal (relative)", p.trials, p.n),
                worst,
                1e-10,
            )]
        }
        Theorem::BlockCov => {
            approximate = !p.augment;
            let fx = fixture(p)?;
            let x = convdft::dft_preprocess(&fx.layer1)?;
            let y = convdft::dft_preprocess(&fx.layer2)?;
            vec![
                measure("layer1 x layer2 off-block (relative)", convdft::off_block_report(&x, &y)?.ratio, 1e-9),
                measure("layer1 x layer1 off-block (relative)", convdft::off_block_report(&x, &x)?.ratio, 1e-9),
                measure("layer2 x layer2 off-block (relative)", convdft::off_block_report(&y, &y)?.ratio, 1e-9),
            ]
        }
        Theorem::DftCcaEquiv => {
            approximate = !p.augment;
            let fx = fixture(p)?;
            let mode = if p.augment { DftMode::Exact } else { DftMode::Approximate };
            let block = convdft::dft_cca(&fx.layer1, &fx.layer2, 1.0, mode)?;
            let dense = convdft::dense_conv_svcca(&fx.layer1, &fx.layer2, 1.0, None)?;
            let (a, b) = (&block.correlations, &dense.cca.correlations);
            let gap = if a.len() == b.len() {
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            } else {
                f64::INFINITY
            };
            vec![
                measure(format!("max |rho_block - rho_dense| over {} coefficients", b.len()), gap, 1e-6),
                measure(
                    "|mean_block - mean_dense|",
                    (block.mean_similarity() - dense.mean_similarity).abs(),
                    1e-6,
                ),
            ]
        }
        Theorem::Kronecker => {
            let mut worst: f64 = 0.0;
            for t in 0..p.trials as u64 {
                let s = p.seed.wrapping_add(3 * t);
                let a = gaussian(p.n, p.n + 1, s);
                let c = gaussian(p.n + 1, p.c.max(1), s + 1);
                let b = gaussian(p.c.max(1), p.n, s + 2);
                let scale = (&a * &c * &b).abs().max().max(1.0);
                worst = worst.max(convdft::kronecker_identity_residual(&a, &c, &b) / scale);
            }
            vec![measure(format!("{} trials: vec identity residual (relative)", p.trials), worst, 1e-12)]
        }
    };
    Ok(Verdict {
        measures,
        approximate,
    })
}
