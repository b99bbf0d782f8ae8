//! Matching criteria for the alignment parameters.
//!
//! `M` measures the spread of the aligned, smoothed observations
//! `e^{-a_j} A(Y_j - 1 (x) b_j) R_{-alpha_j}` around their average. It splits
//! into a centered part `M0`, which only involves `(a, alpha)`, and a part
//! `Mbar` built from the landmark means. `D` is the same spread computed on
//! the noiseless orbit points `g*_j . f`; it is used only for verification.
//!
//! `M0` and `Mbar` are evaluated in complex form: a landmark row `(x, y)` is
//! `x + iy` and right multiplication by `R_{-alpha}` is multiplication by
//! `e^{i alpha}`. `D` is evaluated through the real group operations so the
//! two paths check each other.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShapeError};
use crate::geometry::{act, split, Configuration, Similarity};
use crate::model::{DeformationSet, MeanPattern};
use crate::spectral::{Smoother, SmoothingMode};

/// Deformation parameters `(a, alpha, b)` for `J` observations.
///
/// The flat layout is `[a_1..a_J, alpha_1..alpha_J, b^1_1..b^1_J, b^2_1..b^2_J]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub a: Vec<f64>,
    pub alpha: Vec<f64>,
    pub b: Vec<[f64; 2]>,
}

impl ParameterVector {
    pub fn zeros(j: usize) -> Self {
        Self {
            a: vec![0.0; j],
            alpha: vec![0.0; j],
            b: vec![[0.0; 2]; j],
        }
    }

    pub fn new(a: Vec<f64>, alpha: Vec<f64>, b: Vec<[f64; 2]>) -> Result<Self> {
        if a.len() != alpha.len() || a.len() != b.len() {
            return Err(ShapeError::DimensionMismatch(format!(
                "parameter blocks have lengths {}, {}, {}",
                a.len(),
                alpha.len(),
                b.len()
            )));
        }
        Ok(Self { a, alpha, b })
    }

    pub fn j(&self) -> usize {
        self.a.len()
    }

    pub fn from_similarities(gs: &[Similarity]) -> Self {
        Self {
            a: gs.iter().map(|g| g.a).collect(),
            alpha: gs.iter().map(|g| g.alpha).collect(),
            b: gs.iter().map(|g| g.b).collect(),
        }
    }

    pub fn to_similarities(&self) -> Vec<Similarity> {
        (0..self.j())
            .map(|i| Similarity::new(self.a[i], self.alpha[i], self.b[i]))
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * self.j());
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.alpha);
        v.extend(self.b.iter().map(|b| b[0]));
        v.extend(self.b.iter().map(|b| b[1]));
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() % 4 != 0 {
            return Err(ShapeError::DimensionMismatch(format!(
                "flat parameter length {} is not a multiple of 4",
                v.len()
            )));
        }
        let j = v.len() / 4;
        Ok(Self {
            a: v[..j].to_vec(),
            alpha: v[j..2 * j].to_vec(),
            b: (0..j).map(|i| [v[2 * j + i], v[3 * j + i]]).collect(),
        })
    }
}

fn hermitian(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(p, q)| p.conj() * q).sum()
}

fn fingerprint(observations: &[Configuration]) -> u64 {
    // FNV-1a over the raw coordinate bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for y in observations {
        for v in y.points().iter() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Observations with their smoothed centered parts `A0 Y_j` and landmark
/// means cached for repeated criterion evaluation.
#[derive(Debug, Clone)]
pub struct CriterionContext {
    k: usize,
    lambda: usize,
    centered: Vec<Vec<Complex64>>,
    means: Vec<Complex64>,
    checksum: u64,
}

impl CriterionContext {
    pub fn new(observations: &[Configuration], lambda: usize) -> Result<Self> {
        let first = observations
            .first()
            .ok_or_else(|| ShapeError::DimensionMismatch("no observations".into()))?;
        let k = first.k();
        let smoother = Smoother::new(k)?;
        let mut centered = Vec::with_capacity(observations.len());
        let mut means = Vec::with_capacity(observations.len());
        for y in observations {
            if y.k() != k {
                return Err(ShapeError::DimensionMismatch(format!(
                    "observations have k = {k} and k = {}",
                    y.k()
                )));
            }
            let z = y.to_complex();
            centered.push(smoother.smooth_complex(&z, lambda, SmoothingMode::CenteredOnly)?);
            means.push(z.iter().sum::<Complex64>() / k as f64);
        }
        Ok(Self {
            k,
            lambda,
            centered,
            means,
            checksum: fingerprint(observations),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn j(&self) -> usize {
        self.means.len()
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    /// Whether the cache was built from exactly these observations.
    pub fn matches(&self, observations: &[Configuration]) -> bool {
        fingerprint(observations) == self.checksum
    }

    /// `A0 Y_j` for observation `j`.
    pub fn smoothed_centered(&self, j: usize) -> Configuration {
        Configuration::from_complex(&self.centered[j])
    }

    pub fn landmark_mean(&self, j: usize) -> [f64; 2] {
        [self.means[j].re, self.means[j].im]
    }

    /// `A Y_j = A0 Y_j + 1_k (x) Ybar_j`.
    pub fn smoothed(&self, j: usize) -> Configuration {
        let m = self.means[j];
        let z: Vec<Complex64> = self.centered[j].iter().map(|c| c + m).collect();
        Configuration::from_complex(&z)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.j() {
            return Err(ShapeError::DimensionMismatch(format!(
                "context holds {} observations, parameters cover {n}",
                self.j()
            )));
        }
        Ok(())
    }

    fn aligned_centered(&self, a: &[f64], alpha: &[f64]) -> Vec<Vec<Complex64>> {
        self.centered
            .iter()
            .enumerate()
            .map(|(j, z)| {
                let w = Complex64::from_polar((-a[j]).exp(), alpha[j]);
                z.iter().map(|c| w * c).collect()
            })
            .collect()
    }

    fn aligned_means(&self, p: &ParameterVector) -> Vec<Complex64> {
        (0..self.j())
            .map(|j| {
                let b = Complex64::new(p.b[j][0], p.b[j][1]);
                Complex64::from_polar((-p.a[j]).exp(), p.alpha[j]) * (self.means[j] - b)
            })
            .collect()
    }

    /// `M0(a, alpha)` and its gradient `[d/da, d/dalpha]`.
    pub fn m0_with_gradient(&self, a: &[f64], alpha: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(a.len())?;
        self.check_len(alpha.len())?;
        let j = self.j();
        let scale = 1.0 / (j * self.k) as f64;
        let u = self.aligned_centered(a, alpha);
        let mut mean = vec![Complex64::new(0.0, 0.0); self.k];
        for uj in &u {
            for (m, c) in mean.iter_mut().zip(uj) {
                *m += c;
            }
        }
        for m in &mut mean {
            *m /= j as f64;
        }
        let mut value = 0.0;
        let mut grad = vec![0.0; 2 * j];
        for (idx, uj) in u.iter().enumerate() {
            let resid: Vec<Complex64> = uj.iter().zip(&mean).map(|(c, m)| c - m).collect();
            value += resid.iter().map(|r| r.norm_sqr()).sum::<f64>();
            let h = hermitian(uj, &resid);
            // d u_j / d a_j = -u_j, d u_j / d alpha_j = i u_j
            grad[idx] = -2.0 * scale * h.re;
            grad[j + idx] = 2.0 * scale * h.im;
        }
        Ok((scale * value, grad))
    }

    pub fn eval_m0(&self, a: &[f64], alpha: &[f64]) -> Result<f64> {
        Ok(self.m0_with_gradient(a, alpha)?.0)
    }

    pub fn grad_m0(&self, a: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
        Ok(self.m0_with_gradient(a, alpha)?.1)
    }

    /// `Mbar(p)` and its gradient in the flat layout.
    pub fn mbar_with_gradient(&self, p: &ParameterVector) -> Result<(f64, Vec<f64>)> {
        self.check_len(p.j())?;
        let j = self.j();
        let m = self.aligned_means(p);
        let centre = m.iter().sum::<Complex64>() / j as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; 4 * j];
        for idx in 0..j {
            let r = m[idx] - centre;
            value += r.norm_sqr();
            let w = Complex64::from_polar((-p.a[idx]).exp(), p.alpha[idx]);
            let partials = [
                (idx, -m[idx]),
                (j + idx, Complex64::i() * m[idx]),
                (2 * j + idx, -w),
                (3 * j + idx, -Complex64::i() * w),
            ];
            for (slot, d) in partials {
                grad[slot] = 2.0 / j as f64 * (d.conj() * r).re;
            }
        }
        Ok((value / j as f64, grad))
    }

    pub fn eval_mbar(&self, p: &ParameterVector) -> Result<f64> {
        Ok(self.mbar_with_gradient(p)?.0)
    }

    /// `M = M0 + Mbar` and its gradient in the flat layout.
    pub fn m_with_gradient(&self, p: &ParameterVector) -> Result<(f64, Vec<f64>)> {
        let (v0, g0) = self.m0_with_gradient(&p.a, &p.alpha)?;
        let (vb, mut g) = self.mbar_with_gradient(p)?;
        for (slot, d) in g.iter_mut().zip(&g0) {
            *slot += d;
        }
        Ok((v0 + vb, g))
    }

    pub fn eval_m(&self, p: &ParameterVector) -> Result<f64> {
        Ok(self.m_with_gradient(p)?.0)
    }

    pub fn grad_m(&self, p: &ParameterVector) -> Result<Vec<f64>> {
        Ok(self.m_with_gradient(p)?.1)
    }

    /// `e^{-a_j} (A Y_j - 1_k (x) b_j) R_{-alpha_j}` for every `j`.
    pub fn aligned(&self, p: &ParameterVector) -> Result<Vec<Configuration>> {
        self.check_len(p.j())?;
        let u = self.aligned_centered(&p.a, &p.alpha);
        let m = self.aligned_means(p);
        Ok(u.into_iter()
            .zip(m)
            .map(|(uj, mj)| {
                let z: Vec<Complex64> = uj.into_iter().map(|c| c + mj).collect();
                Configuration::from_complex(&z)
            })
            .collect())
    }
}

fn check_truth(pattern: &MeanPattern, truth: &DeformationSet, j: usize) -> Result<()> {
    if truth.len() != j {
        return Err(ShapeError::DimensionMismatch(format!(
            "truth has {} deformations, parameters cover {j}",
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(ShapeError::DimensionMismatch("empty deformation set".into()));
    }
    let _ = pattern;
    Ok(())
}

/// `f_{g_j} = (g_j^{-1} g*_j) . f` for every `j`.
fn orbit_terms(pattern: &MeanPattern, truth: &DeformationSet, p: &ParameterVector) -> Vec<Configuration> {
    p.to_similarities()
        .iter()
        .zip(&truth.params)
        .map(|(g, gs)| act(&g.inverse().compose(gs), &pattern.config))
        .collect()
}

fn mean_matrix(terms: &[Configuration]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(terms[0].k(), 2);
    for t in terms {
        acc += t.points();
    }
    acc / terms.len() as f64
}

/// Noiseless criterion `D(p) = (1/(Jk)) sum_j ||f_{g_j} - mean||^2`.
pub fn eval_d(pattern: &MeanPattern, truth: &DeformationSet, p: &ParameterVector) -> Result<f64> {
    check_truth(pattern, truth, p.j())?;
    let terms = orbit_terms(pattern, truth, p);
    let mean = mean_matrix(&terms);
    let jk = (p.j() * pattern.k()) as f64;
    Ok(terms.iter().map(|t| (t.points() - &mean).norm_squared()).sum::<f64>() / jk)
}

/// Partial derivatives of `f_{g_j}` with respect to `(a_j, alpha_j, b^1_j, b^2_j)`.
pub fn orbit_partials(
    pattern: &MeanPattern,
    truth: &DeformationSet,
    p: &ParameterVector,
    j: usize,
) -> Result<[DMatrix<f64>; 4]> {
    check_truth(pattern, truth, p.j())?;
    let g = Similarity::new(p.a[j], p.alpha[j], p.b[j]);
    let fj = act(&g.inverse().compose(&truth.params[j]), &pattern.config);
    Ok(partials_at(&fj, &g, pattern.k()))
}

fn partials_at(fj: &Configuration, g: &Similarity, k: usize) -> [DMatrix<f64>; 4] {
    // d/dalpha R_{-alpha} = R_{-alpha} K with K = [[0, 1], [-1, 0]]
    let kmat = nalgebra::Matrix2::new(0.0, 1.0, -1.0, 0.0);
    let d_a = -fj.points();
    let d_alpha = crate::geometry::right_mul(fj.points(), &kmat);
    let scale = (-g.a).exp();
    let mut d_b = [DMatrix::zeros(k, 2), DMatrix::zeros(k, 2)];
    for (c, db) in d_b.iter_mut().enumerate() {
        let mut e = [0.0; 2];
        e[c] = 1.0;
        let row = crate::geometry::rotate_row(e, -g.alpha);
        for l in 0..k {
            db[(l, 0)] = -scale * row[0];
            db[(l, 1)] = -scale * row[1];
        }
    }
    let [b1, b2] = d_b;
    [d_a, d_alpha, b1, b2]
}

/// Analytic gradient of `D` in the flat layout:
/// `dD/dtheta_j = (2/(Jk)) <d f_{g_j}/dtheta_j, f_{g_j} - mean>`.
pub fn grad_d(pattern: &MeanPattern, truth: &DeformationSet, p: &ParameterVector) -> Result<Vec<f64>> {
    check_truth(pattern, truth, p.j())?;
    let j = p.j();
    let k = pattern.k();
    let gs = p.to_similarities();
    let terms = orbit_terms(pattern, truth, p);
    let mean = mean_matrix(&terms);
    let scale = 2.0 / (j * k) as f64;
    let mut grad = vec![0.0; 4 * j];
    for idx in 0..j {
        let resid = terms[idx].points() - &mean;
        let parts = partials_at(&terms[idx], &gs[idx], k);
        for (c, d) in parts.iter().enumerate() {
            grad[c * j + idx] = scale * d.dot(&resid);
        }
    }
    Ok(grad)
}

/// Context whose `M0` is the noiseless centered criterion `D0(a, alpha)`.
pub fn noiseless_context(pattern: &MeanPattern, truth: &DeformationSet) -> Result<CriterionContext> {
    let xs: Vec<Configuration> = truth.params.iter().map(|g| act(g, &pattern.config)).collect();
    CriterionContext::new(&xs, (pattern.k() - 1) / 2)
}

pub fn eval_d0(pattern: &MeanPattern, truth: &DeformationSet, a: &[f64], alpha: &[f64]) -> Result<f64> {
    noiseless_context(pattern, truth)?.eval_m0(a, alpha)
}

pub fn grad_d0(pattern: &MeanPattern, truth: &DeformationSet, a: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
    noiseless_context(pattern, truth)?.grad_m0(a, alpha)
}

/// `(a* - mean(a*), alpha* - mean(alpha*))`, where `D0` attains its minimum on
/// the zero-sum section.
pub fn section_rotation_scaling(truth: &DeformationSet) -> (Vec<f64>, Vec<f64>) {
    let j = truth.len() as f64;
    let abar = truth.params.iter().map(|g| g.a).sum::<f64>() / j;
    let alphabar = truth.params.iter().map(|g| g.alpha).sum::<f64>() / j;
    (
        truth.params.iter().map(|g| g.a - abar).collect(),
        truth.params.iter().map(|g| g.alpha - alphabar).collect(),
    )
}

/// Closed-form Hessian of `D0` at the section point:
/// `(2/(J^2 k)) ||e^{abar*} f0||^2 blockdiag(J I - 1 1', J I - 1 1')`.
pub fn hess_d0_at_section(pattern: &MeanPattern, truth: &DeformationSet) -> Result<DMatrix<f64>> {
    let f0 = crate::geometry::preshape(&pattern.config).map(|_| split(&pattern.config).centered)?;
    if truth.is_empty() {
        return Err(ShapeError::DimensionMismatch("empty deformation set".into()));
    }
    let j = truth.len();
    let abar = truth.params.iter().map(|g| g.a).sum::<f64>() / j as f64;
    let c = 2.0 / ((j * j * pattern.k()) as f64) * (2.0 * abar).exp() * f0.norm_squared();
    Ok(DMatrix::from_fn(2 * j, 2 * j, |r, s| {
        if r / j != s / j {
            0.0
        } else if r == s {
            c * (j as f64 - 1.0)
        } else {
            -c
        }
    }))
}

/// Central-difference Hessian of `D0` from its analytic gradient.
pub fn hess_d0_numeric(
    pattern: &MeanPattern,
    truth: &DeformationSet,
    a: &[f64],
    alpha: &[f64],
) -> Result<DMatrix<f64>> {
    let ctx = noiseless_context(pattern, truth)?;
    let j = a.len();
    let x: Vec<f64> = a.iter().chain(alpha).cloned().collect();
    let grad = |v: &[f64]| ctx.grad_m0(&v[..j], &v[j..]);
    let mut h = DMatrix::zeros(2 * j, 2 * j);
    for i in 0..2 * j {
        let step = 1e-6 * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let (gp, gm) = (grad(&xp)?, grad(&xm)?);
        for r in 0..2 * j {
            h[(r, i)] = (gp[r] - gm[r]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_deformations, CurveVariant, DeformationBounds};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(rng: &mut impl Rng, k: usize) -> Configuration {
        let rows: Vec<[f64; 2]> = (0..k)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        Configuration::from_rows(&rows).unwrap()
    }

    fn random_params(rng: &mut impl Rng, j: usize) -> ParameterVector {
        ParameterVector {
            a: (0..j).map(|_| rng.random_range(-0.5..0.5)).collect(),
            alpha: (0..j).map(|_| rng.random_range(-0.7..0.7)).collect(),
            b: (0..j)
                .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                .collect(),
        }
    }

    /// Real-matrix evaluation of M straight from its definition.
    fn m_reference(obs: &[Configuration], lambda: usize, p: &ParameterVector) -> f64 {
        let k = obs[0].k();
        let a_mat = crate::spectral::smoothing_matrix(k, lambda, SmoothingMode::Full).unwrap();
        let terms: Vec<DMatrix<f64>> = obs
            .iter()
            .enumerate()
            .map(|(j, y)| {
                let shifted = y.points() - Configuration::constant(k, p.b[j]).points();
                crate::geometry::right_mul(&(&a_mat * shifted), &crate::geometry::rotation(-p.alpha[j]))
                    * (-p.a[j]).exp()
            })
            .collect();
        let mut mean = DMatrix::zeros(k, 2);
        for t in &terms {
            mean += t;
        }
        mean /= obs.len() as f64;
        terms.iter().map(|t| (t - &mean).norm_squared()).sum::<f64>() / (obs.len() * k) as f64
    }

    #[test]
    fn m_matches_definition_and_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..200 {
            let k = [5usize, 9, 21][case % 3];
            let j = 2 + case % 4;
            let lambda = case % ((k - 1) / 2 + 1);
            let obs: Vec<_> = (0..j).map(|_| random_config(&mut rng, k)).collect();
            let ctx = CriterionContext::new(&obs, lambda).unwrap();
            let p = random_params(&mut rng, j);
            let m = ctx.eval_m(&p).unwrap();
            let m0 = ctx.eval_m0(&p.a, &p.alpha).unwrap();
            let mb = ctx.eval_mbar(&p).unwrap();
            let reference = m_reference(&obs, lambda, &p);
            assert!(
                (m - reference).abs() <= 1e-10 * reference.max(1e-300),
                "{m} vs {reference}"
            );
            assert!((m - m0 - mb).abs() <= 1e-10 * m, "case {case}");
            assert!(mb >= 0.0 && m0 >= 0.0);
        }
    }

    #[test]
    fn m_vanishes_on_aligned_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_config(&mut rng, 11);
        let ctx = CriterionContext::new(&vec![x.clone(); 4], 3).unwrap();
        assert!(ctx.eval_m(&ParameterVector::zeros(4)).unwrap() < 1e-28);

        let truth: Vec<Similarity> = (0..4)
            .map(|_| Similarity::new(rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0), [1.0, -2.0]))
            .collect();
        let obs: Vec<_> = truth.iter().map(|g| act(g, &x)).collect();
        let ctx = CriterionContext::new(&obs, 5).unwrap();
        let p = ParameterVector::from_similarities(&truth);
        assert!(ctx.eval_m(&p).unwrap() < 1e-24);
        // any common shift of (a, alpha) stays on the zero set of M0
        let a: Vec<f64> = p.a.iter().map(|v| v + 0.2).collect();
        let alpha: Vec<f64> = p.alpha.iter().map(|v| v - 0.4).collect();
        assert!(ctx.eval_m0(&a, &alpha).unwrap() < 1e-24);
    }

    #[test]
    fn m0_ignores_translations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs: Vec<_> = (0..3).map(|_| random_config(&mut rng, 9)).collect();
        let shifted: Vec<_> = obs
            .iter()
            .map(|y| y.add(&Configuration::constant(9, [4.0, -7.0])))
            .collect();
        let c1 = CriterionContext::new(&obs, 2).unwrap();
        let c2 = CriterionContext::new(&shifted, 2).unwrap();
        let p = random_params(&mut rng, 3);
        let d = c1.eval_m0(&p.a, &p.alpha).unwrap() - c2.eval_m0(&p.a, &p.alpha).unwrap();
        assert!(d.abs() < 1e-12);
        assert!(c1.matches(&obs) && !c1.matches(&shifted));
    }

    #[test]
    fn mbar_zero_for_centered_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs: Vec<_> = (0..3).map(|_| split(&random_config(&mut rng, 7)).centered).collect();
        let ctx = CriterionContext::new(&obs, 1).unwrap();
        let mut p = random_params(&mut rng, 3);
        p.b = vec![[0.0; 2]; 3];
        assert!(ctx.eval_mbar(&p).unwrap() < 1e-28);
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let h = 1e-6 * x[i].abs().max(1.0);
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    #[test]
    fn m_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let obs: Vec<_> = (0..4).map(|_| random_config(&mut rng, 15)).collect();
            let ctx = CriterionContext::new(&obs, 4).unwrap();
            let p = random_params(&mut rng, 4);
            let g = ctx.grad_m(&p).unwrap();
            let fd = central_diff(
                |v| ctx.eval_m(&ParameterVector::from_flat(v).unwrap()).unwrap(),
                &p.flat(),
            );
            assert!(rel_err(&g, &fd) < 1e-6, "{}", rel_err(&g, &fd));
        }
    }

    fn benchmark_setup(rng: &mut impl Rng, k: usize, j: usize) -> (MeanPattern, DeformationSet) {
        let pattern = MeanPattern::from_curve(k, CurveVariant::Printed).unwrap();
        let truth = sample_deformations(j, &DeformationBounds::reference(), rng).unwrap();
        (pattern, truth)
    }

    #[test]
    fn d_zero_set_is_the_orbit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (pattern, truth) = benchmark_setup(&mut rng, 21, 4);
        let p_true = ParameterVector::from_similarities(&truth.params);
        assert!(eval_d(&pattern, &truth, &p_true).unwrap() < 1e-20);
        for _ in 0..100 {
            let g0 = Similarity::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-3.0..3.0),
                [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            );
            let on: Vec<Similarity> = truth.params.iter().map(|g| g.compose(&g0)).collect();
            let p = ParameterVector::from_similarities(&on);
            let d = eval_d(&pattern, &truth, &p).unwrap();
            assert!(d < 1e-18, "{d}");
            let g = grad_d(&pattern, &truth, &p).unwrap();
            assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10);

            // move one observation off the orbit by at least 0.05
            let mut off = p.clone();
            let which = rng.random_range(0..4);
            match rng.random_range(0..3) {
                0 => off.a[which] += 0.05 + rng.random_range(0.0..0.2),
                1 => off.alpha[which] += 0.05 + rng.random_range(0.0..0.2),
                _ => off.b[which][0] += 0.05 + rng.random_range(0.0..0.2),
            }
            assert!(eval_d(&pattern, &truth, &off).unwrap() > 1e-8);
        }
        let mut single = p_true.clone();
        single.a[0] += 0.1;
        assert!(eval_d(&pattern, &truth, &single).unwrap() > 1e-3);
    }

    #[test]
    fn d_gradient_for_single_observation_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (pattern, truth) = benchmark_setup(&mut rng, 9, 1);
        let p = random_params(&mut rng, 1);
        assert!(grad_d(&pattern, &truth, &p).unwrap().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (pattern, truth) = benchmark_setup(&mut rng, 21, 4);
        for _ in 0..50 {
            let p = random_params(&mut rng, 4);
            let g = grad_d(&pattern, &truth, &p).unwrap();
            let fd = central_diff(
                |v| eval_d(&pattern, &truth, &ParameterVector::from_flat(v).unwrap()).unwrap(),
                &p.flat(),
            );
            assert!(rel_err(&g, &fd) < 1e-5, "{}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn d_mixed_second_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (pattern, truth) = benchmark_setup(&mut rng, 21, 3);
        let j = 3;
        let k = 21;
        for _ in 0..10 {
            let p = random_params(&mut rng, j);
            let x = p.flat();
            let parts: Vec<_> = (0..j)
                .map(|i| orbit_partials(&pattern, &truth, &p, i).unwrap())
                .collect();
            for (r, s) in [(0usize, 1usize), (0, 2), (1, 2)] {
                for cr in 0..4 {
                    let col = cr * j + r;
                    let h = 1e-6 * x[col].abs().max(1.0);
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[col] += h;
                    xm[col] -= h;
                    let gp = grad_d(&pattern, &truth, &ParameterVector::from_flat(&xp).unwrap()).unwrap();
                    let gm = grad_d(&pattern, &truth, &ParameterVector::from_flat(&xm).unwrap()).unwrap();
                    for cs in 0..4 {
                        let fd = (gp[cs * j + s] - gm[cs * j + s]) / (2.0 * h);
                        let exact = -2.0 / ((j * j * k) as f64) * parts[r][cr].dot(&parts[s][cs]);
                        assert!((fd - exact).abs() <= 1e-4 * exact.abs().max(1e-3), "{fd} vs {exact}");
                    }
                }
            }
        }
    }

    #[test]
    fn d0_hessian_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for j in [2usize, 4, 6] {
            let (pattern, truth) = benchmark_setup(&mut rng, 21, j);
            let (a, alpha) = section_rotation_scaling(&truth);
            let exact = hess_d0_at_section(&pattern, &truth).unwrap();
            let numeric = hess_d0_numeric(&pattern, &truth, &a, &alpha).unwrap();
            assert!((&numeric - &exact).norm() <= 1e-4 * exact.norm());

            // eigenvalues {0, J} scaled by (2/(J^2 k)) ||e^{abar} f0||^2
            let eig = nalgebra::SymmetricEigen::new(exact.clone()).eigenvalues;
            let f0 = split(&pattern.config).centered.norm_squared();
            let abar = truth.params.iter().map(|g| g.a).sum::<f64>() / j as f64;
            let unit = 2.0 / ((j * j * 21) as f64) * (2.0 * abar).exp() * f0;
            let zeros = eig.iter().filter(|v| v.abs() < 1e-8 * unit).count();
            let tops = eig
                .iter()
                .filter(|v| (*v - j as f64 * unit).abs() < 1e-8 * unit)
                .count();
            assert_eq!((zeros, tops), (2, 2 * j - 2));

            // restricted to the zero-sum subspace, the smallest eigenvalue
            let lower = (-2.0 * 0.25f64).exp() * 2.0 / ((j * 21) as f64) * f0;
            let min_nonzero = eig
                .iter()
                .cloned()
                .filter(|v| v.abs() > 1e-8 * unit)
                .fold(f64::INFINITY, f64::min);
            assert!(min_nonzero >= lower);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn d0_third_derivative_bound(seed in any::<u64>(), j in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (big_a, big_abar) = (0.25f64, 0.5f64);
            let delta = big_a.max(big_abar);
            let (pattern, truth) = benchmark_setup(&mut rng, 21, j);
            let ctx = noiseless_context(&pattern, &truth).unwrap();
            let centred = |n: usize, w: f64, rng: &mut ChaCha8Rng| {
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-w..w)).collect();
                let m = v.iter().sum::<f64>() / n as f64;
                v.into_iter().map(|x| x - m).collect::<Vec<_>>()
            };
            let mut c: Vec<f64> = centred(j, big_a / 2.0, &mut rng);
            c.extend(centred(j, big_abar / 2.0, &mut rng));
            let h: Vec<f64> = (0..2 * j).map(|_| rng.random_range(-delta..delta)).collect();
            let phi = |t: f64| {
                let x: Vec<f64> = c.iter().zip(&h).map(|(ci, hi)| ci + t * hi).collect();
                let g = ctx.grad_m0(&x[..j], &x[j..]).unwrap();
                g.iter().zip(&h).map(|(gi, hi)| gi * hi).sum::<f64>()
            };
            let step = 1e-3;
            let third = (phi(step) - 2.0 * phi(0.0) + phi(-step)) / (step * step);
            let f0 = split(&pattern.config).centered.norm_squared();
            let hn2: f64 = h.iter().map(|v| v * v).sum();
            let bound = 40.0 * delta * (2.0 * big_a).exp() * f0 / ((j * 21) as f64) * hn2;
            prop_assert!(third.abs() <= bound, "{} > {}", third.abs(), bound);
        }
    }
}
