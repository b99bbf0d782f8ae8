//! Discrete Fourier low-pass projections on odd-length landmark sequences.
//!
//! For odd `k` and cutoff `lambda <= (k-1)/2`, the projection keeps the
//! Fourier bins `|m| <= lambda`. The `Full` operator splits orthogonally into
//! the `CenteredOnly` part (`0 < |m| <= lambda`) and the `MeanOnly` part
//! (`m = 0`, i.e. `(1/k) 1 1'`).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShapeError};
use crate::geometry::Configuration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingMode {
    Full,
    CenteredOnly,
    MeanOnly,
}

fn max_cutoff(k: usize) -> usize {
    (k - 1) / 2
}

fn validate(k: usize, lambda: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(ShapeError::EvenK(k));
    }
    if lambda > max_cutoff(k) {
        return Err(ShapeError::InvalidCutoff {
            lambda,
            k,
            max: max_cutoff(k),
        });
    }
    Ok(())
}

/// Dense `k x k` smoothing matrix. Only used for verification; the estimator
/// smooths through the FFT path.
pub fn smoothing_matrix(k: usize, lambda: usize, mode: SmoothingMode) -> Result<DMatrix<f64>> {
    validate(k, lambda)?;
    let kf = k as f64;
    let (lo, hi) = match mode {
        SmoothingMode::Full => (0, lambda),
        SmoothingMode::CenteredOnly => (1, lambda),
        SmoothingMode::MeanOnly => (0, 0),
    };
    Ok(DMatrix::from_fn(k, k, |l, lp| {
        let d = l as f64 - lp as f64;
        let mut acc = 0.0;
        for m in lo..=hi {
            if m == 0 {
                acc += 1.0;
            } else {
                acc += 2.0 * (2.0 * PI * m as f64 * d / kf).cos();
            }
        }
        acc / kf
    }))
}

/// FFT-backed smoother for a fixed odd landmark count.
#[derive(Clone)]
pub struct Smoother {
    k: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Smoother {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Smoother").field("k", &self.k).finish()
    }
}

impl Smoother {
    pub fn new(k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(ShapeError::EvenK(k));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            k,
            forward: planner.plan_fft_forward(k),
            inverse: planner.plan_fft_inverse(k),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Projects a complex landmark sequence. Because the retained band is
    /// symmetric in `m`, real and imaginary parts are filtered independently.
    pub fn smooth_complex(&self, z: &[Complex64], lambda: usize, mode: SmoothingMode) -> Result<Vec<Complex64>> {
        if z.len() != self.k {
            return Err(ShapeError::DimensionMismatch(format!(
                "smoother built for k = {}, got {} landmarks",
                self.k,
                z.len()
            )));
        }
        validate(self.k, lambda)?;
        let k = self.k;
        let mut buf = z.to_vec();
        self.forward.process(&mut buf);
        for (idx, c) in buf.iter_mut().enumerate() {
            // bin idx corresponds to frequency m = idx or m = idx - k
            let m = idx.min(k - idx);
            let keep = match mode {
                SmoothingMode::Full => m <= lambda,
                SmoothingMode::CenteredOnly => m >= 1 && m <= lambda,
                SmoothingMode::MeanOnly => m == 0,
            };
            if !keep {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / k as f64;
        for c in &mut buf {
            *c *= scale;
        }
        Ok(buf)
    }

    pub fn smooth(&self, x: &Configuration, lambda: usize, mode: SmoothingMode) -> Result<Configuration> {
        let out = self.smooth_complex(&x.to_complex(), lambda, mode)?;
        Ok(Configuration::from_complex(&out))
    }
}

/// `A x` for the selected operator, computed in `O(k log k)`.
pub fn smooth(x: &Configuration, lambda: usize, mode: SmoothingMode) -> Result<Configuration> {
    Smoother::new(x.k())?.smooth(x, lambda, mode)
}

/// `floor(k^(1/(2s+1)))`, clamped into `[1, (k-1)/2]`.
pub fn cutoff(k: usize, s: f64) -> usize {
    let raw = (k as f64).powf(1.0 / (2.0 * s + 1.0));
    // guard exact integer powers against powf rounding just below
    let lambda = (raw + 1e-9).floor() as usize;
    lambda.clamp(1, max_cutoff(k).max(1))
}

/// Hand-picked cutoffs keyed by (nominal) landmark count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffTable {
    pub entries: Vec<(usize, usize)>,
}

impl CutoffTable {
    /// The values used in the published simulations: 7 for k in {20, 50, 100},
    /// 11 for k = 1000 and 25 for k = 3000.
    pub fn reference() -> Self {
        Self {
            entries: vec![(20, 7), (50, 7), (100, 7), (1000, 11), (3000, 25)],
        }
    }

    /// Cutoff for a nominal landmark count: the entry with the largest key not
    /// exceeding `nominal_k` (the first entry below the table), clamped to
    /// the admissible range of the odd `k` actually used.
    pub fn lookup(&self, nominal_k: usize, k: usize) -> usize {
        let mut sorted = self.entries.clone();
        sorted.sort_unstable();
        let lambda = sorted
            .iter()
            .rev()
            .find(|(key, _)| *key <= nominal_k)
            .or_else(|| sorted.first())
            .map(|(_, l)| *l)
            .unwrap_or(1);
        lambda.min(max_cutoff(k))
    }
}
