//! The similarity group of the plane and its action on landmark configurations.
//!
//! Landmarks are stored as rows of a `k x 2` matrix and group elements act on
//! the right: `g.x = e^a x R_alpha + 1_k (x) b`, with
//! `R_alpha = [[cos, -sin], [sin, cos]]`. Under the identification
//! `(x, y) <-> x + iy`, right multiplication by `R_alpha` is multiplication by
//! `e^{-i alpha}`; the criteria and Procrustes routines use that complex form
//! internally.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShapeError};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(alpha: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let wrapped = alpha - two_pi * ((alpha + PI) / two_pi).floor();
    // floor() rounding can land exactly on +pi
    if wrapped >= PI {
        wrapped - two_pi
    } else {
        wrapped
    }
}

/// The 2x2 rotation matrix `R_alpha`.
pub fn rotation(alpha: f64) -> Matrix2<f64> {
    let (s, c) = alpha.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// `points * m` for a `k x 2` matrix and a 2x2 matrix.
pub(crate) fn right_mul(points: &DMatrix<f64>, m: &Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(points.nrows(), 2, |l, c| {
        points[(l, 0)] * m[(0, c)] + points[(l, 1)] * m[(1, c)]
    })
}

/// Row vector times `R_alpha`.
pub fn rotate_row(v: [f64; 2], alpha: f64) -> [f64; 2] {
    let (s, c) = alpha.sin_cos();
    [v[0] * c + v[1] * s, -v[0] * s + v[1] * c]
}

/// A similarity `(a, alpha, b)`: log-scale, angle in `[-pi, pi)`, translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub a: f64,
    pub alpha: f64,
    pub b: [f64; 2],
}

impl Default for Similarity {
    fn default() -> Self {
        Self::identity()
    }
}

impl Similarity {
    pub fn new(a: f64, alpha: f64, b: [f64; 2]) -> Self {
        Self {
            a,
            alpha: wrap_angle(alpha),
            b,
        }
    }

    pub fn identity() -> Self {
        Self {
            a: 0.0,
            alpha: 0.0,
            b: [0.0, 0.0],
        }
    }

    /// `self . other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Similarity) -> Similarity {
        let scale = self.a.exp();
        let rb = rotate_row(other.b, self.alpha);
        Similarity::new(
            self.a + other.a,
            self.alpha + other.alpha,
            [scale * rb[0] + self.b[0], scale * rb[1] + self.b[1]],
        )
    }

    pub fn inverse(&self) -> Similarity {
        let scale = (-self.a).exp();
        let rb = rotate_row(self.b, -self.alpha);
        Similarity::new(-self.a, -self.alpha, [-scale * rb[0], -scale * rb[1]])
    }

    /// Acts on a single landmark.
    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let scale = self.a.exp();
        let r = rotate_row(p, self.alpha);
        [scale * r[0] + self.b[0], scale * r[1] + self.b[1]]
    }

    /// `e^a R_alpha`, the linear part as a 2x2 matrix.
    pub fn linear_part(&self) -> Matrix2<f64> {
        rotation(self.alpha) * self.a.exp()
    }

    /// Flat parameter vector `(a, alpha, b1, b2)`.
    pub fn params(&self) -> [f64; 4] {
        [self.a, self.alpha, self.b[0], self.b[1]]
    }
}

/// `k >= 2` planar landmarks, one per row of a `k x 2` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    points: DMatrix<f64>,
}

impl Configuration {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.ncols() != 2 {
            return Err(ShapeError::InvalidConfiguration(format!(
                "expected 2 columns, got {}",
                points.ncols()
            )));
        }
        if points.nrows() < 2 {
            return Err(ShapeError::InvalidConfiguration(format!(
                "need at least 2 landmarks, got {}",
                points.nrows()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(ShapeError::InvalidConfiguration(
                "non-finite landmark coordinate".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 2]]) -> Result<Self> {
        let m = DMatrix::from_fn(rows.len(), 2, |i, c| rows[i][c]);
        Self::new(m)
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            points: DMatrix::zeros(k, 2),
        }
    }

    /// `1_k (x) b`.
    pub fn constant(k: usize, b: [f64; 2]) -> Self {
        Self {
            points: DMatrix::from_fn(k, 2, |_, c| b[c]),
        }
    }

    pub(crate) fn from_matrix_unchecked(points: DMatrix<f64>) -> Self {
        debug_assert_eq!(points.ncols(), 2);
        Self { points }
    }

    pub fn k(&self) -> usize {
        self.points.nrows()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.points
    }

    pub fn row(&self, l: usize) -> [f64; 2] {
        [self.points[(l, 0)], self.points[(l, 1)]]
    }

    pub fn rows(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.k()).map(move |l| self.row(l))
    }

    pub fn norm(&self) -> f64 {
        self.points.norm()
    }

    pub fn norm_squared(&self) -> f64 {
        self.points.norm_squared()
    }

    /// Frobenius distance.
    pub fn distance(&self, other: &Configuration) -> f64 {
        (&self.points - &other.points).norm()
    }

    pub fn scaled(&self, c: f64) -> Configuration {
        Self::from_matrix_unchecked(&self.points * c)
    }

    pub fn add(&self, other: &Configuration) -> Configuration {
        Self::from_matrix_unchecked(&self.points + &other.points)
    }

    pub fn sub(&self, other: &Configuration) -> Configuration {
        Self::from_matrix_unchecked(&self.points - &other.points)
    }

    /// Right-multiplies every landmark by `R_alpha`.
    pub fn rotated(&self, alpha: f64) -> Configuration {
        Self::from_matrix_unchecked(right_mul(&self.points, &rotation(alpha)))
    }

    pub fn column_means(&self) -> [f64; 2] {
        let k = self.k() as f64;
        [self.points.column(0).sum() / k, self.points.column(1).sum() / k]
    }

    /// Landmarks as complex numbers `x + iy`.
    pub fn to_complex(&self) -> Vec<Complex64> {
        self.rows().map(|r| Complex64::new(r[0], r[1])).collect()
    }

    pub fn from_complex(z: &[Complex64]) -> Configuration {
        Self::from_matrix_unchecked(DMatrix::from_fn(
            z.len(),
            2,
            |i, c| {
                if c == 0 {
                    z[i].re
                } else {
                    z[i].im
                }
            },
        ))
    }

    pub fn mean_of(configs: &[Configuration]) -> Result<Configuration> {
        let first = configs
            .first()
            .ok_or_else(|| ShapeError::DimensionMismatch("empty configuration list".into()))?;
        let mut acc = DMatrix::zeros(first.k(), 2);
        for c in configs {
            if c.k() != first.k() {
                return Err(ShapeError::DimensionMismatch(format!(
                    "landmark counts {} and {} differ",
                    first.k(),
                    c.k()
                )));
            }
            acc += &c.points;
        }
        Ok(Self::from_matrix_unchecked(acc / configs.len() as f64))
    }
}

/// `g.x = e^a x R_alpha + 1_k (x) b`.
pub fn act(g: &Similarity, x: &Configuration) -> Configuration {
    let mut m = right_mul(x.points(), &g.linear_part());
    for mut row in m.row_iter_mut() {
        row[0] += g.b[0];
        row[1] += g.b[1];
    }
    Configuration::from_matrix_unchecked(m)
}

/// Orthogonal decomposition `x = x_0 + 1_k (x) xbar`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigurationSplit {
    pub centered: Configuration,
    pub degenerate: [f64; 2],
}

impl ConfigurationSplit {
    pub fn reassemble(&self) -> Configuration {
        self.centered
            .add(&Configuration::constant(self.centered.k(), self.degenerate))
    }
}

pub fn split(x: &Configuration) -> ConfigurationSplit {
    let degenerate = x.column_means();
    let centered = x.sub(&Configuration::constant(x.k(), degenerate));
    ConfigurationSplit { centered, degenerate }
}

/// Centered norm below which a configuration is treated as degenerate.
pub fn degeneracy_threshold(k: usize) -> f64 {
    1e-12 * (k as f64).sqrt()
}

/// `Hx / ||Hx||`.
pub fn preshape(x: &Configuration) -> Result<Configuration> {
    let centered = split(x).centered;
    let norm = centered.norm();
    let threshold = degeneracy_threshold(x.k());
    if !(norm >= threshold) {
        return Err(ShapeError::DegenerateConfiguration { norm, threshold });
    }
    Ok(centered.scaled(1.0 / norm))
}

fn check_same_k(x: &Configuration, y: &Configuration) -> Result<()> {
    if x.k() != y.k() {
        return Err(ShapeError::DimensionMismatch(format!(
            "landmark counts {} and {} differ",
            x.k(),
            y.k()
        )));
    }
    Ok(())
}

fn hermitian(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(p, q)| p.conj() * q).sum()
}

/// Full Procrustes distance between the shapes of `x` and `y`:
/// `sqrt(inf_h ||x0 - h.y0||^2)` over scalings and rotations of the pre-shapes.
pub fn full_procrustes_distance(x: &Configuration, y: &Configuration) -> Result<f64> {
    check_same_k(x, y)?;
    let x0 = preshape(x)?.to_complex();
    let y0 = preshape(y)?.to_complex();
    let c = hermitian(&x0, &y0).norm();
    Ok((1.0 - c * c).max(0.0).sqrt())
}

/// Partial Procrustes distance: `sqrt(inf_alpha ||x0 - y0 R_alpha||^2)`.
pub fn partial_procrustes_distance(x: &Configuration, y: &Configuration) -> Result<f64> {
    check_same_k(x, y)?;
    let x0 = preshape(x)?.to_complex();
    let y0 = preshape(y)?.to_complex();
    let c = hermitian(&x0, &y0).norm();
    Ok((2.0 - 2.0 * c).max(0.0).sqrt())
}
