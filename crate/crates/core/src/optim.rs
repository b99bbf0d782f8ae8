//! Projected quasi-Newton minimization over products of boxes intersected with
//! a linear constraint (zero sum, or first coordinate pinned to zero).
//!
//! The inverse-Hessian approximation lives in ambient coordinates but is only
//! ever applied between tangent projectors, which is the same as running BFGS
//! in an orthonormal basis of the constraint subspace. Coordinates sitting on
//! a bound whose projected gradient pushes outward are frozen for the step;
//! the approximation is reset whenever that active set changes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinearConstraint {
    /// Coordinates of the block sum to zero.
    ZeroSum,
    /// The first coordinate of the block is pinned to zero.
    FixFirst,
    Unconstrained,
}

/// A contiguous run of coordinates sharing the box `[-bound, bound]`
/// (`bound` may be infinite) and one linear constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
    pub bound: f64,
    pub linear: LinearConstraint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSet {
    blocks: Vec<Block>,
    dim: usize,
}

impl FeasibleSet {
    /// Blocks must tile `0..dim` in order.
    pub fn new(blocks: Vec<Block>) -> Self {
        let mut next = 0;
        for b in &blocks {
            assert_eq!(b.start, next, "blocks must be contiguous");
            assert!(b.bound >= 0.0);
            next += b.len;
        }
        Self { blocks, dim: next }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Euclidean projection onto the feasible set.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for b in &self.blocks {
            let seg = &mut out[b.start..b.start + b.len];
            match b.linear {
                LinearConstraint::Unconstrained => {
                    for v in seg.iter_mut() {
                        *v = v.clamp(-b.bound, b.bound);
                    }
                }
                LinearConstraint::FixFirst => {
                    for v in seg.iter_mut() {
                        *v = v.clamp(-b.bound, b.bound);
                    }
                    if let Some(first) = seg.first_mut() {
                        *first = 0.0;
                    }
                }
                LinearConstraint::ZeroSum => project_zero_sum_box(seg, b.bound),
            }
        }
        out
    }

    /// `max_i |x_i - P(x - g)_i|`, zero exactly at KKT points.
    pub fn projected_gradient_residual(&self, x: &[f64], g: &[f64]) -> f64 {
        let shifted: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
        let p = self.project(&shifted);
        x.iter().zip(&p).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// Projects `v` onto the tangent space of the linear constraints with the
    /// coordinates flagged in `frozen` held at zero.
    fn tangent(&self, v: &[f64], frozen: &[bool]) -> Vec<f64> {
        let mut out = v.to_vec();
        for b in &self.blocks {
            let range = b.start..b.start + b.len;
            for i in range.clone() {
                if frozen[i] {
                    out[i] = 0.0;
                }
            }
            match b.linear {
                LinearConstraint::Unconstrained => {}
                LinearConstraint::FixFirst => {
                    if b.len > 0 {
                        out[b.start] = 0.0;
                    }
                }
                LinearConstraint::ZeroSum => {
                    let free: Vec<usize> = range.filter(|&i| !frozen[i]).collect();
                    if !free.is_empty() {
                        let mean = free.iter().map(|&i| out[i]).sum::<f64>() / free.len() as f64;
                        for &i in &free {
                            out[i] -= mean;
                        }
                    }
                }
            }
        }
        out
    }

    /// Largest `t` keeping the free coordinates of `x + t d` inside their boxes.
    fn max_step(&self, x: &[f64], d: &[f64], frozen: &[bool]) -> f64 {
        let mut t_max = f64::INFINITY;
        for b in &self.blocks {
            if !b.bound.is_finite() {
                continue;
            }
            for i in b.start..b.start + b.len {
                if frozen[i] || d[i] == 0.0 {
                    continue;
                }
                let room = if d[i] > 0.0 { b.bound - x[i] } else { b.bound + x[i] };
                // coordinates within eps of the bound are reported by blocking()
                t_max = t_max.min(room.max(0.0) / d[i].abs());
            }
        }
        t_max
    }

    /// Free coordinates with no room to move along `d`.
    fn blocking(&self, x: &[f64], d: &[f64], frozen: &[bool]) -> Vec<usize> {
        let mut out = Vec::new();
        for b in &self.blocks {
            if !b.bound.is_finite() {
                continue;
            }
            let eps = 1e-12 * (1.0 + b.bound);
            for i in b.start..b.start + b.len {
                if frozen[i] {
                    continue;
                }
                if (d[i] > 0.0 && x[i] >= b.bound - eps) || (d[i] < 0.0 && x[i] <= -b.bound + eps) {
                    out.push(i);
                }
            }
        }
        out
    }

    /// Coordinates on a bound whose multiplier-corrected gradient points out
    /// of the box. The equality multiplier of a zero-sum block is estimated
    /// from the coordinates strictly inside the box.
    fn active_set(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        let mut active = vec![false; self.dim];
        for b in &self.blocks {
            if !b.bound.is_finite() {
                continue;
            }
            let eps = 1e-12 * (1.0 + b.bound);
            let range = b.start..b.start + b.len;
            let on_bound = |i: usize| x[i].abs() >= b.bound - eps;
            let nu = match b.linear {
                LinearConstraint::ZeroSum => {
                    let interior: Vec<usize> = range.clone().filter(|&i| !on_bound(i)).collect();
                    let pool: Vec<usize> = if interior.is_empty() {
                        range.clone().collect()
                    } else {
                        interior
                    };
                    pool.iter().map(|&i| g[i]).sum::<f64>() / pool.len() as f64
                }
                _ => 0.0,
            };
            for i in range {
                let r = g[i] - nu;
                active[i] = (x[i] >= b.bound - eps && r < 0.0) || (x[i] <= -b.bound + eps && r > 0.0);
            }
        }
        active
    }
}

/// Projection onto `{y : sum y = 0, |y_i| <= bound}` via the monotone shift
/// `y_i = clamp(v_i - tau)`.
fn project_zero_sum_box(seg: &mut [f64], bound: f64) {
    let n = seg.len();
    if n == 0 {
        return;
    }
    let mean = seg.iter().sum::<f64>() / n as f64;
    if !bound.is_finite() {
        for v in seg.iter_mut() {
            *v -= mean;
        }
        return;
    }
    let clamped_sum = |tau: f64| -> f64 { seg.iter().map(|v| (v - tau).clamp(-bound, bound)).sum() };
    let lo_init = seg.iter().cloned().fold(f64::INFINITY, f64::min) - bound;
    let hi_init = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + bound;
    let (mut lo, mut hi) = (lo_init, hi_init);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clamped_sum(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
    }
    let tau = 0.5 * (lo + hi);
    // Solve exactly for tau on the coordinates left strictly inside the box.
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut fixed_sum = 0.0;
    for v in seg.iter() {
        let y = v - tau;
        if y >= bound {
            fixed_sum += bound;
        } else if y <= -bound {
            fixed_sum -= bound;
        } else {
            free_sum += v;
            free_count += 1;
        }
    }
    let tau = if free_count > 0 {
        (free_sum + fixed_sum) / free_count as f64
    } else {
        tau
    };
    for v in seg.iter_mut() {
        *v = (*v - tau).clamp(-bound, bound);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerOptions {
    /// Stop when the projected-gradient residual is at most
    /// `tolerance * (1 + |f|)`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub projected_gradient: f64,
    pub converged: bool,
    /// Objective value after each accepted step, starting with the initial point.
    pub trace: Vec<f64>,
    /// Coordinates resting on a box bound at termination.
    pub active_bounds: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimizes `objective` (returning value and gradient) over `set`, starting
/// from the projection of `x0`.
pub fn minimize<F>(objective: F, x0: &[f64], set: &FeasibleSet, opts: &OptimizerOptions) -> OptimizerOutcome
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = set.dim();
    assert_eq!(x0.len(), n);
    let mut x = set.project(x0);
    let (mut f, mut g) = objective(&x);
    let mut trace = vec![f];
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_identity = true;
    let mut frozen = vec![false; n];
    let mut iterations = 0;
    let mut converged = false;

    let resolution = |f: f64| 100.0 * f64::EPSILON * (1.0 + f.abs());

    while iterations < opts.max_iterations {
        let residual = set.projected_gradient_residual(&x, &g);
        if residual <= opts.tolerance * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;

        let active = set.active_set(&x, &g);
        if active != frozen {
            frozen = active;
            h = DMatrix::identity(n, n);
            h_is_identity = true;
        }

        // Free coordinates sitting on a bound with the step pointing outward
        // are blocked for this iteration, and the direction recomputed.
        let (d, t_max) = loop {
            let pg = set.tangent(&g, &frozen);
            let mut d: Vec<f64> = {
                let hv = &h * DVector::from_column_slice(&pg);
                set.tangent(hv.as_slice(), &frozen).iter().map(|v| -v).collect()
            };
            if dot(&g, &d) >= 0.0 || !d.iter().all(|v| v.is_finite()) {
                h = DMatrix::identity(n, n);
                h_is_identity = true;
                d = pg.iter().map(|v| -v).collect();
            }
            if inf_norm(&d) == 0.0 {
                // the working set is wrong for this point; fall back to the
                // plain projected-gradient path
                let shifted: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
                let d = set.project(&shifted).iter().zip(&x).map(|(p, a)| p - a).collect();
                break (d, f64::INFINITY);
            }
            let stuck = set.blocking(&x, &d, &frozen);
            if stuck.is_empty() {
                let t_max = set.max_step(&x, &d, &frozen);
                break (d, t_max);
            }
            for i in stuck {
                frozen[i] = true;
            }
            h = DMatrix::identity(n, n);
            h_is_identity = true;
        };

        let mut t = if h_is_identity {
            (1.0 / inf_norm(&d)).min(1.0)
        } else {
            1.0
        };
        t = t.min(t_max);
        let mut accepted = None;
        for _ in 0..80 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let xt = set.project(&trial);
            let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            if inf_norm(&s) == 0.0 {
                break;
            }
            let (ft, gt) = objective(&xt);
            if ft.is_finite() {
                let gs = dot(&g, &s);
                let armijo = ft <= f + 1e-4 * gs;
                let unresolved = gs.abs() <= resolution(f)
                    && ft <= f + resolution(f)
                    && set.projected_gradient_residual(&xt, &gt) < residual;
                if armijo || unresolved {
                    accepted = Some((xt, s, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }

        let Some((xt, s, ft, gt)) = accepted else {
            if h_is_identity {
                break;
            }
            h = DMatrix::identity(n, n);
            h_is_identity = true;
            continue;
        };

        let y = set.tangent(&gt.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>(), &frozen);
        let s = set.tangent(&s, &frozen);
        let sy = dot(&s, &y);
        let (sn, yn) = (dot(&s, &s).sqrt(), dot(&y, &y).sqrt());
        if sy > 1e-12 * sn * yn && sy > 0.0 {
            if h_is_identity {
                h *= sy / dot(&y, &y);
            }
            let rho = 1.0 / sy;
            let sv = DVector::from_vec(s);
            let yv = DVector::from_vec(y);
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h -= (&hy * sv.transpose() + &sv * hy.transpose()) * rho;
            h += (&sv * sv.transpose()) * (rho * rho * yhy + rho);
            h_is_identity = false;
        }

        x = xt;
        f = ft;
        g = gt;
        trace.push(f);
    }

    let residual = set.projected_gradient_residual(&x, &g);
    if !converged && residual <= opts.tolerance * (1.0 + f.abs()) {
        converged = true;
    }
    let active_bounds = set
        .blocks()
        .iter()
        .filter(|b| b.bound.is_finite())
        .flat_map(|b| (b.start..b.start + b.len).map(move |i| (i, b.bound)))
        .filter(|&(i, bound)| x[i].abs() >= bound - 1e-12 * (1.0 + bound))
        .count();
    OptimizerOutcome {
        x,
        value: f,
        iterations,
        projected_gradient: residual,
        converged,
        trace,
        active_bounds,
    }
}
