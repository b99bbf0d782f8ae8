//! Two-step estimation of the deformation parameters and the smoothed
//! Procrustes mean, the section-point utilities used for scoring, and the
//! classical full/partial Procrustes means.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::criteria::{CriterionContext, ParameterVector};
use crate::error::{Result, ShapeError};
use crate::geometry::{act, preshape, Configuration, Similarity};
use crate::model::{DeformationSet, MeanPattern};
use crate::optim::{minimize, Block, FeasibleSet, LinearConstraint, OptimizerOptions};

/// Smallest admissible singular value of `mean(e^{a_j} R_{alpha_j})`.
pub const SINGULAR_THRESHOLD: f64 = 1e-10;

/// Which slice of each orbit the estimator is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Section {
    /// Every parameter block sums to zero.
    #[default]
    ZeroSum,
    /// The first observation is the reference: `(a_1, alpha_1, b_1) = 0`.
    ReferenceFirst,
}

/// Search box `|a_j| <= scale_box`, `|alpha_j| <= angle_box` plus the section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    pub scale_box: f64,
    pub angle_box: f64,
    #[serde(default)]
    pub section: Section,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            scale_box: 1.0,
            angle_box: PI / 4.0,
            section: Section::ZeroSum,
        }
    }
}

impl Constraints {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_box > 0.0 && self.scale_box.is_finite()) {
            return Err(ShapeError::Config(format!(
                "scale box {} must be positive",
                self.scale_box
            )));
        }
        if !(self.angle_box > 0.0 && self.angle_box < PI) {
            return Err(ShapeError::Config(format!(
                "angle box {} must lie in (0, pi)",
                self.angle_box
            )));
        }
        Ok(())
    }

    fn feasible_set(&self, j: usize) -> FeasibleSet {
        let linear = match self.section {
            Section::ZeroSum => LinearConstraint::ZeroSum,
            Section::ReferenceFirst => LinearConstraint::FixFirst,
        };
        FeasibleSet::new(vec![
            Block {
                start: 0,
                len: j,
                bound: self.scale_box,
                linear,
            },
            Block {
                start: j,
                len: j,
                bound: self.angle_box,
                linear,
            },
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub criterion: f64,
    pub iterations: usize,
    pub projected_gradient: f64,
    pub converged: bool,
    pub active_bounds: usize,
    /// Criterion value after each accepted step.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationScaling {
    pub a: Vec<f64>,
    pub alpha: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub params: ParameterVector,
    pub mean: Configuration,
    pub diagnostics: Diagnostics,
}

/// Minimizes `M0` over the constrained `(a, alpha)` set, starting at zero.
///
/// A run that exhausts the iteration budget is reported as
/// [`ShapeError::NoConvergence`] carrying the final diagnostics.
pub fn estimate_rotation_scaling(
    ctx: &CriterionContext,
    constraints: &Constraints,
    opts: &OptimizerOptions,
) -> Result<RotationScaling> {
    constraints.validate()?;
    let j = ctx.j();
    if j < 2 {
        return Err(ShapeError::DimensionMismatch(format!(
            "need at least 2 observations, got {j}"
        )));
    }
    let set = constraints.feasible_set(j);
    let objective = |x: &[f64]| {
        ctx.m0_with_gradient(&x[..j], &x[j..])
            .expect("dimensions fixed by construction")
    };
    let out = minimize(objective, &vec![0.0; 2 * j], &set, opts);
    let diagnostics = Diagnostics {
        criterion: out.value,
        iterations: out.iterations,
        projected_gradient: out.projected_gradient,
        converged: out.converged,
        active_bounds: out.active_bounds,
        trace: out.trace,
    };
    if !diagnostics.converged {
        return Err(ShapeError::NoConvergence {
            diagnostics: Box::new(diagnostics),
        });
    }
    Ok(RotationScaling {
        a: out.x[..j].to_vec(),
        alpha: out.x[j..].to_vec(),
        diagnostics,
    })
}

fn mean_linear_part(a: &[f64], alpha: &[f64]) -> Result<Complex64> {
    // e^a R_alpha acts on rows as multiplication by e^a e^{-i alpha}; a mean
    // of such matrices is a scaled rotation whose singular values are |mu|.
    let mu = a
        .iter()
        .zip(alpha)
        .map(|(ai, al)| Complex64::from_polar(ai.exp(), -al))
        .sum::<Complex64>()
        / a.len() as f64;
    if !(mu.norm() >= SINGULAR_THRESHOLD) {
        return Err(ShapeError::SingularAlignment { sigma_min: mu.norm() });
    }
    Ok(mu)
}

/// Translations minimizing `Mbar` given `(a, alpha)` within the section:
/// `b_j = Ybar_j - e^{a_j} c R_{alpha_j}` with `c` fixed by the section.
pub fn closed_form_b(ctx: &CriterionContext, a: &[f64], alpha: &[f64]) -> Result<Vec<[f64; 2]>> {
    closed_form_b_in(ctx, a, alpha, Section::ZeroSum)
}

pub fn closed_form_b_in(ctx: &CriterionContext, a: &[f64], alpha: &[f64], section: Section) -> Result<Vec<[f64; 2]>> {
    let j = ctx.j();
    if a.len() != j || alpha.len() != j {
        return Err(ShapeError::DimensionMismatch(format!(
            "context holds {j} observations, got {} and {} parameters",
            a.len(),
            alpha.len()
        )));
    }
    let ybar: Vec<Complex64> = (0..j)
        .map(|i| {
            let m = ctx.landmark_mean(i);
            Complex64::new(m[0], m[1])
        })
        .collect();
    let common = match section {
        Section::ZeroSum => {
            let mu = mean_linear_part(a, alpha)?;
            ybar.iter().sum::<Complex64>() / j as f64 / mu
        }
        Section::ReferenceFirst => Complex64::from_polar((-a[0]).exp(), alpha[0]) * ybar[0],
    };
    Ok((0..j)
        .map(|i| {
            let b = ybar[i] - Complex64::from_polar(a[i].exp(), -alpha[i]) * common;
            [b.re, b.im]
        })
        .collect())
}

/// Runs the two-step estimator and averages the aligned smoothed observations.
pub fn smoothed_procrustes_mean(
    ctx: &CriterionContext,
    constraints: &Constraints,
    opts: &OptimizerOptions,
) -> Result<EstimationResult> {
    let rs = estimate_rotation_scaling(ctx, constraints, opts)?;
    let b = closed_form_b_in(ctx, &rs.a, &rs.alpha, constraints.section)?;
    let params = ParameterVector::new(rs.a, rs.alpha, b)?;
    let aligned = ctx.aligned(&params)?;
    let mean = Configuration::mean_of(&aligned)?;
    Ok(EstimationResult {
        params,
        mean,
        diagnostics: rs.diagnostics,
    })
}

/// Minimizes the full criterion `M` over all `4J` coordinates at once. Used to
/// cross-check the two-step procedure.
pub fn joint_minimization(
    ctx: &CriterionContext,
    constraints: &Constraints,
    start: &ParameterVector,
    opts: &OptimizerOptions,
) -> Result<(ParameterVector, Diagnostics)> {
    constraints.validate()?;
    let j = ctx.j();
    let mut blocks = constraints.feasible_set(j).blocks().to_vec();
    let linear = blocks[0].linear;
    for start in [2 * j, 3 * j] {
        blocks.push(Block {
            start,
            len: j,
            bound: f64::INFINITY,
            linear,
        });
    }
    let set = FeasibleSet::new(blocks);
    let objective = |x: &[f64]| {
        let p = ParameterVector::from_flat(x).expect("length fixed by construction");
        ctx.m_with_gradient(&p).expect("dimensions fixed by construction")
    };
    let out = minimize(objective, &start.flat(), &set, opts);
    let diagnostics = Diagnostics {
        criterion: out.value,
        iterations: out.iterations,
        projected_gradient: out.projected_gradient,
        converged: out.converged,
        active_bounds: out.active_bounds,
        trace: out.trace,
    };
    Ok((ParameterVector::from_flat(&out.x)?, diagnostics))
}

/// The element `g0` with `truth_j . g0` on the zero-sum section, together with
/// those projected deformations.
pub fn section_point(truth: &DeformationSet) -> Result<(Similarity, DeformationSet)> {
    if truth.is_empty() {
        return Err(ShapeError::DimensionMismatch("empty deformation set".into()));
    }
    let j = truth.len() as f64;
    let a: Vec<f64> = truth.params.iter().map(|g| g.a).collect();
    let alpha: Vec<f64> = truth.params.iter().map(|g| g.alpha).collect();
    let mu = mean_linear_part(&a, &alpha)?;
    let abar = a.iter().sum::<f64>() / j;
    let alphabar = alpha.iter().sum::<f64>() / j;
    let bbar = truth
        .params
        .iter()
        .map(|g| Complex64::new(g.b[0], g.b[1]))
        .sum::<Complex64>()
        / j;
    let b0 = -bbar / mu;
    let g0 = Similarity::new(-abar, -alphabar, [b0.re, b0.im]);
    let projected = DeformationSet {
        params: truth.params.iter().map(|g| g.compose(&g0)).collect(),
    };
    Ok((g0, projected))
}

/// `f_{Theta0} = g0^{-1} . f`, the representative of the mean pattern that the
/// estimator targets.
pub fn mean_at_section(pattern: &MeanPattern, truth: &DeformationSet) -> Result<Configuration> {
    let (g0, _) = section_point(truth)?;
    Ok(act(&g0.inverse(), &pattern.config))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpaOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for GpaOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 500,
        }
    }
}

fn hermitian(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(p, q)| p.conj() * q).sum()
}

fn preshapes(observations: &[Configuration]) -> Result<Vec<Vec<Complex64>>> {
    if observations.len() < 2 {
        return Err(ShapeError::DimensionMismatch(format!(
            "need at least 2 observations, got {}",
            observations.len()
        )));
    }
    let k = observations[0].k();
    observations
        .iter()
        .map(|y| {
            if y.k() != k {
                return Err(ShapeError::DimensionMismatch("observations differ in k".into()));
            }
            Ok(preshape(y)?.to_complex())
        })
        .collect()
}

fn gpa(observations: &[Configuration], opts: &GpaOptions, with_scale: bool) -> Result<Configuration> {
    let z = preshapes(observations)?;
    let k = z[0].len();
    let mut mean = z[0].clone();
    let mut movement = f64::INFINITY;
    for iter in 0..opts.max_iterations {
        let mut next = vec![Complex64::new(0.0, 0.0); k];
        for zj in &z {
            // optimal complex coefficient of z_j onto the current mean
            let beta = hermitian(zj, &mean);
            let beta = if with_scale {
                beta
            } else {
                beta / beta.norm().max(f64::MIN_POSITIVE)
            };
            for (n, c) in next.iter_mut().zip(zj) {
                *n += beta * c;
            }
        }
        let norm = next.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(ShapeError::DegenerateConfiguration {
                norm,
                threshold: f64::MIN_POSITIVE,
            });
        }
        for c in &mut next {
            *c /= norm;
        }
        movement = next
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        mean = next;
        if movement < opts.tolerance {
            let _ = iter;
            return Ok(Configuration::from_complex(&mean));
        }
    }
    Err(ShapeError::NoConvergence {
        diagnostics: Box::new(Diagnostics {
            criterion: f64::NAN,
            iterations: opts.max_iterations,
            projected_gradient: movement,
            converged: false,
            active_bounds: 0,
            trace: Vec::new(),
        }),
    })
}

/// Generalized Procrustes mean aligning pre-shapes by rotation and scaling;
/// the result has unit norm.
pub fn full_procrustes_mean(observations: &[Configuration]) -> Result<Configuration> {
    full_procrustes_mean_with(observations, &GpaOptions::default())
}

pub fn full_procrustes_mean_with(observations: &[Configuration], opts: &GpaOptions) -> Result<Configuration> {
    gpa(observations, opts, true)
}

/// Generalized Procrustes mean aligning pre-shapes by rotation only; the
/// running mean is put back on the unit sphere after every sweep.
pub fn partial_procrustes_mean(observations: &[Configuration]) -> Result<Configuration> {
    partial_procrustes_mean_with(observations, &GpaOptions::default())
}

pub fn partial_procrustes_mean_with(observations: &[Configuration], opts: &GpaOptions) -> Result<Configuration> {
    gpa(observations, opts, false)
}

/// `sum_j min_{c, alpha} ||c z_j R_alpha - m||^2` for unit-norm `m`.
pub fn full_procrustes_criterion(observations: &[Configuration], mean: &Configuration) -> Result<f64> {
    let z = preshapes(observations)?;
    let m = mean.to_complex();
    let mn = m.iter().map(|c| c.norm_sqr()).sum::<f64>();
    Ok(z.iter().map(|zj| mn - hermitian(zj, &m).norm_sqr()).sum())
}

/// `sum_j min_alpha ||z_j R_alpha - m||^2`.
pub fn partial_procrustes_criterion(observations: &[Configuration], mean: &Configuration) -> Result<f64> {
    let z = preshapes(observations)?;
    let m = mean.to_complex();
    let mn = m.iter().map(|c| c.norm_sqr()).sum::<f64>();
    Ok(z.iter().map(|zj| 1.0 + mn - 2.0 * hermitian(zj, &m).norm()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::section_rotation_scaling;
    use crate::geometry::{full_procrustes_distance, split};
    use crate::model::{sample_deformations, CurveVariant, DeformationBounds};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(rng: &mut impl Rng, k: usize) -> Configuration {
        let rows: Vec<[f64; 2]> = (0..k)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        Configuration::from_rows(&rows).unwrap()
    }

    fn wide() -> Constraints {
        Constraints {
            scale_box: 1.0,
            angle_box: PI / 2.0,
            section: Section::ZeroSum,
        }
    }

    #[test]
    fn identical_observations_give_zero_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_config(&mut rng, 11);
        let ctx = CriterionContext::new(&vec![x; 4], 3).unwrap();
        let rs = estimate_rotation_scaling(&ctx, &Constraints::default(), &OptimizerOptions::default()).unwrap();
        assert!(rs.a.iter().chain(&rs.alpha).all(|v| *v == 0.0));
        assert_eq!(rs.diagnostics.iterations, 0);
    }

    #[test]
    fn zero_noise_recovers_section_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pattern = MeanPattern::from_curve(31, CurveVariant::Printed).unwrap();
        for _ in 0..5 {
            let truth = sample_deformations(5, &DeformationBounds::reference(), &mut rng).unwrap();
            let obs: Vec<_> = truth.params.iter().map(|g| act(g, &pattern.config)).collect();
            let ctx = CriterionContext::new(&obs, 15).unwrap();
            let res = smoothed_procrustes_mean(&ctx, &wide(), &OptimizerOptions::default()).unwrap();
            let (a, alpha) = section_rotation_scaling(&truth);
            for (x, y) in res.params.a.iter().chain(&res.params.alpha).zip(a.iter().chain(&alpha)) {
                assert!((x - y).abs() < 1e-6);
            }
            let (_, projected) = section_point(&truth).unwrap();
            for (b, g) in res.params.b.iter().zip(&projected.params) {
                assert!((b[0] - g.b[0]).abs() < 1e-6 && (b[1] - g.b[1]).abs() < 1e-6);
            }
            let target = mean_at_section(&pattern, &truth).unwrap();
            assert!(res.mean.distance(&target) <= 1e-6 * pattern.config.norm());
        }
    }

    #[test]
    fn constraints_hold_on_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let obs: Vec<_> = (0..5).map(|_| random_config(&mut rng, 15)).collect();
            let ctx = CriterionContext::new(&obs, 4).unwrap();
            let c = Constraints {
                scale_box: 0.2,
                angle_box: 0.3,
                section: Section::ZeroSum,
            };
            let res = smoothed_procrustes_mean(&ctx, &c, &OptimizerOptions::default()).unwrap();
            let p = &res.params;
            assert!(p.a.iter().sum::<f64>().abs() <= 1e-10);
            assert!(p.alpha.iter().sum::<f64>().abs() <= 1e-10);
            let sb = p.b.iter().fold([0.0, 0.0], |s, b| [s[0] + b[0], s[1] + b[1]]);
            assert!(sb[0].hypot(sb[1]) <= 1e-10);
            assert!(p.a.iter().all(|v| v.abs() <= 0.2) && p.alpha.iter().all(|v| v.abs() <= 0.3));
            assert_eq!(res.mean.k(), 15);
            for w in res.diagnostics.trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-13 * w[0]);
            }
        }
    }

    #[test]
    fn two_observation_grid_search() {
        // J = 2 on the zero-sum section: (a_2, alpha_2) = -(a_1, alpha_1).
        let x = Configuration::from_rows(&[[1.0, 0.0], [0.3, 0.9], [-0.8, 0.5], [-0.6, -0.7], [0.4, -0.8]]).unwrap();
        let y = act(&Similarity::new(0.3, 0.4, [0.2, -0.1]), &x).add(
            &Configuration::from_rows(&[[0.05, -0.02], [0.0, 0.04], [-0.03, 0.0], [0.02, 0.01], [0.0, -0.03]]).unwrap(),
        );
        let ctx = CriterionContext::new(&[x, y], 2).unwrap();
        let c = Constraints::default();
        let rs = estimate_rotation_scaling(&ctx, &c, &OptimizerOptions::default()).unwrap();
        let search = |centre: (f64, f64), half: f64, step: f64| {
            let n = (2.0 * half / step).round() as i64;
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for ia in 0..=n {
                let a1 = centre.0 - half + ia as f64 * step;
                for il in 0..=n {
                    let al1 = centre.1 - half + il as f64 * step;
                    let v = ctx.eval_m0(&[a1, -a1], &[al1, -al1]).unwrap();
                    if v < best.0 {
                        best = (v, a1, al1);
                    }
                }
            }
            best
        };
        let coarse = search((0.0, 0.0), 0.5, 1e-2);
        let best = search((coarse.1, coarse.2), 0.02, 1e-3);
        assert!((rs.a[0] - best.1).abs() <= 1e-3, "{} vs {}", rs.a[0], best.1);
        assert!((rs.alpha[0] - best.2).abs() <= 1e-3, "{} vs {}", rs.alpha[0], best.2);
        assert!(rs.diagnostics.criterion <= best.0);
    }

    #[test]
    fn closed_form_b_matches_projected_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let j = 4;
            let obs: Vec<_> = (0..j).map(|_| random_config(&mut rng, 9)).collect();
            let ctx = CriterionContext::new(&obs, 2).unwrap();
            let a: Vec<f64> = (0..j).map(|_| rng.random_range(-0.5..0.5)).collect();
            let alpha: Vec<f64> = (0..j).map(|_| rng.random_range(-0.5..0.5)).collect();
            let b = closed_form_b(&ctx, &a, &alpha).unwrap();
            let p = ParameterVector::new(a.clone(), alpha.clone(), b.clone()).unwrap();
            assert!(ctx.eval_mbar(&p).unwrap() < 1e-24);

            // oracle: Mbar is a quadratic in b; solve its normal equations on
            // the zero-sum subspace by gradient projection.
            let mut bb = vec![0.0; 2 * j];
            let eval = |bb: &[f64]| {
                let q = ParameterVector::new(a.clone(), alpha.clone(), (0..j).map(|i| [bb[i], bb[j + i]]).collect())
                    .unwrap();
                let (v, g) = ctx.mbar_with_gradient(&q).unwrap();
                (v, g[2 * j..].to_vec())
            };
            let set = FeasibleSet::new(vec![
                Block {
                    start: 0,
                    len: j,
                    bound: f64::INFINITY,
                    linear: LinearConstraint::ZeroSum,
                },
                Block {
                    start: j,
                    len: j,
                    bound: f64::INFINITY,
                    linear: LinearConstraint::ZeroSum,
                },
            ]);
            let opts = OptimizerOptions {
                tolerance: 1e-13,
                max_iterations: 500,
            };
            let out = minimize(eval, &bb, &set, &opts);
            bb.copy_from_slice(&out.x);
            for i in 0..j {
                assert!((bb[i] - b[i][0]).abs() < 1e-8 && (bb[j + i] - b[i][1]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn closed_form_b_trivial_and_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs: Vec<_> = (0..3).map(|_| split(&random_config(&mut rng, 7)).centered).collect();
        let ctx = CriterionContext::new(&obs, 1).unwrap();
        let b = closed_form_b(&ctx, &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(b.iter().all(|v| v[0].abs() < 1e-15 && v[1].abs() < 1e-15));
        let ctx2 = CriterionContext::new(&obs[..2], 1).unwrap();
        assert!(matches!(
            closed_form_b(&ctx2, &[0.0, 0.0], &[PI / 2.0, -PI / 2.0]),
            Err(ShapeError::SingularAlignment { .. })
        ));
    }

    #[test]
    fn reference_first_section() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pattern = MeanPattern::from_curve(21, CurveVariant::Printed).unwrap();
        let truth = sample_deformations(4, &DeformationBounds::reference(), &mut rng).unwrap();
        let obs: Vec<_> = truth.params.iter().map(|g| act(g, &pattern.config)).collect();
        let ctx = CriterionContext::new(&obs, 10).unwrap();
        let c = Constraints {
            section: Section::ReferenceFirst,
            ..wide()
        };
        let res = smoothed_procrustes_mean(&ctx, &c, &OptimizerOptions::default()).unwrap();
        assert_eq!((res.params.a[0], res.params.alpha[0]), (0.0, 0.0));
        assert!(res.params.b[0][0].abs() < 1e-12 && res.params.b[0][1].abs() < 1e-12);
        // the mean is the first observation
        assert!(res.mean.distance(&obs[0]) < 1e-6 * obs[0].norm());
    }

    #[test]
    fn section_point_properties() {
        let e = DeformationSet {
            params: vec![
                Similarity::new(0.1, 0.2, [0.0; 2]),
                Similarity::new(-0.1, -0.2, [0.0; 2]),
            ],
        };
        let (g0, proj) = section_point(&e).unwrap();
        assert!(g0.params().iter().all(|v| v.abs() < 1e-15));
        assert_eq!(proj, e);

        let single = DeformationSet {
            params: vec![Similarity::new(0.3, -0.4, [1.0, 2.0])],
        };
        let (_, proj) = section_point(&single).unwrap();
        assert!(proj.params[0].params().iter().all(|v| v.abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let truth = sample_deformations(3, &DeformationBounds::reference(), &mut rng).unwrap();
            let (_, proj) = section_point(&truth).unwrap();
            let sums = proj.params.iter().fold([0.0; 4], |s, g| {
                let p = g.params();
                [s[0] + p[0], s[1] + p[1], s[2] + p[2], s[3] + p[3]]
            });
            assert!(sums.iter().all(|v| v.abs() <= 1e-12), "{sums:?}");
        }
    }

    #[test]
    fn mean_at_section_cases() {
        let pattern = MeanPattern::from_curve(11, CurveVariant::Printed).unwrap();
        let zero = DeformationSet {
            params: vec![Similarity::identity(); 3],
        };
        assert!(mean_at_section(&pattern, &zero).unwrap().distance(&pattern.config) < 1e-12);
        let shifted = DeformationSet {
            params: vec![Similarity::new(0.0, 0.0, [2.0, -1.0]); 3],
        };
        let expected = pattern.config.add(&Configuration::constant(11, [2.0, -1.0]));
        assert!(mean_at_section(&pattern, &shifted).unwrap().distance(&expected) < 1e-12);

        // closed form e^{abar}(f + 1 (x) bbar M^{-1}) R_{alphabar}
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = sample_deformations(4, &DeformationBounds::reference(), &mut rng).unwrap();
        let j = 4.0;
        let abar = truth.params.iter().map(|g| g.a).sum::<f64>() / j;
        let alphabar = truth.params.iter().map(|g| g.alpha).sum::<f64>() / j;
        let mut m = nalgebra::Matrix2::zeros();
        let mut bbar = nalgebra::RowVector2::zeros();
        for g in &truth.params {
            m += g.linear_part() / j;
            bbar += nalgebra::RowVector2::new(g.b[0], g.b[1]) / j;
        }
        let shift = bbar * m.try_inverse().unwrap();
        let direct = pattern
            .config
            .add(&Configuration::constant(11, [shift[0], shift[1]]))
            .rotated(alphabar)
            .scaled(abar.exp());
        assert!(mean_at_section(&pattern, &truth).unwrap().distance(&direct) < 1e-10);

        // every projected deformation maps the section mean back onto Y_j
        let (_, proj) = section_point(&truth).unwrap();
        let target = mean_at_section(&pattern, &truth).unwrap();
        for (g, gp) in truth.params.iter().zip(&proj.params) {
            let y = act(g, &pattern.config);
            assert!(act(gp, &target).distance(&y) < 1e-10);
        }
    }

    #[test]
    fn gpa_on_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_config(&mut rng, 12);
        let obs = vec![x.clone(); 4];
        let expected = preshape(&x).unwrap();
        assert!(full_procrustes_mean(&obs).unwrap().distance(&expected) < 1e-12);
        assert!(partial_procrustes_mean(&obs).unwrap().distance(&expected) < 1e-12);
    }

    #[test]
    fn gpa_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base = random_config(&mut rng, 15);
        let obs: Vec<_> = (0..6)
            .map(|_| {
                let g = Similarity::new(rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0), [1.0, 1.0]);
                act(&g, &base.add(&random_config(&mut rng, 15).scaled(0.1)))
            })
            .collect();
        let full = full_procrustes_mean(&obs).unwrap();
        assert!((full.norm() - 1.0).abs() < 1e-12);
        let v = full_procrustes_criterion(&obs, &full).unwrap();
        assert!((full_procrustes_criterion(&obs, &full.rotated(1.1)).unwrap() - v).abs() < 1e-12);

        let rotated: Vec<_> = obs.iter().map(|y| y.rotated(0.7)).collect();
        let full_rot = full_procrustes_mean(&rotated).unwrap();
        let v_rot = full_procrustes_criterion(&rotated, &full_rot).unwrap();
        assert!((v - v_rot).abs() < 1e-10);
        assert!(full_procrustes_distance(&full, &full_rot).unwrap() < 1e-6);

        let partial = partial_procrustes_mean(&obs).unwrap();
        let vp = partial_procrustes_criterion(&obs, &partial).unwrap();
        let mut turned = obs.clone();
        turned[2] = turned[2].rotated(2.0);
        let partial2 = partial_procrustes_mean(&turned).unwrap();
        assert!((partial_procrustes_criterion(&turned, &partial2).unwrap() - vp).abs() < 1e-10);
    }

    #[test]
    fn partial_and_full_agree_for_equal_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = preshape(&random_config(&mut rng, 21)).unwrap();
        let obs: Vec<_> = (0..5)
            .map(|_| {
                let noisy = preshape(&base.add(&random_config(&mut rng, 21).scaled(1e-5))).unwrap();
                noisy.rotated(rng.random_range(-PI..PI))
            })
            .collect();
        let full = full_procrustes_mean(&obs).unwrap();
        let partial = partial_procrustes_mean(&obs).unwrap();
        assert!(full_procrustes_distance(&full, &partial).unwrap() < 1e-6);
    }

    #[test]
    fn gpa_rejects_degenerate_input() {
        let obs = vec![Configuration::constant(5, [1.0, 1.0]), Configuration::zeros(5)];
        assert!(matches!(
            full_procrustes_mean(&obs),
            Err(ShapeError::DegenerateConfiguration { .. })
        ));
    }
}
