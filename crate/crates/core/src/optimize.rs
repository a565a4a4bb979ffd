//! Bounded Nelder–Mead simplex search with deterministic random restarts.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Box constraints, one `(lower, upper)` pair per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidParameter("bounds have mismatched lengths".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidParameter("each bound needs finite lower < upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iterations: usize,
    /// Stop once the spread of objective values across the simplex drops
    /// below `f_tolerance * (1 + |f_best|)` ...
    pub f_tolerance: f64,
    /// ... and every vertex lies within `x_tolerance` (relative to the bound
    /// width) of the best one.
    pub x_tolerance: f64,
    /// Initial simplex edge as a fraction of the bound width.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            f_tolerance: 1e-10,
            x_tolerance: 1e-7,
            initial_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn eval<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], evaluations: &mut usize) -> f64 {
    *evaluations += 1;
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Minimizes `f` inside `bounds` from `x0`. Trial points are clamped to the
/// box.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    bounds: &Bounds,
    opts: &NelderMeadOptions,
) -> Minimum {
    let n = x0.len();
    let mut evaluations = 0;
    let mut start = x0.to_vec();
    bounds.clamp(&mut start);
    if n == 0 {
        let fx = eval(f, &start, &mut evaluations);
        return Minimum {
            x: start,
            fx,
            iterations: 0,
            evaluations,
            converged: true,
        };
    }

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(f, &start, &mut evaluations);
    simplex.push((start.clone(), f0));
    for i in 0..n {
        let mut v = start.clone();
        let step = opts.initial_step * bounds.width(i);
        v[i] = if v[i] + step <= bounds.upper[i] { v[i] + step } else { v[i] - step };
        bounds.clamp(&mut v);
        let fv = eval(f, &v, &mut evaluations);
        simplex.push((v, fv));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = worst - best;
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(v, _)| {
                v.iter()
                    .zip(&simplex[0].0)
                    .enumerate()
                    .map(|(i, (a, b))| (a - b).abs() / bounds.width(i))
            })
            .fold(0.0, f64::max);
        if best.is_finite() && spread <= opts.f_tolerance * (1.0 + best.abs()) && diameter <= opts.x_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let along = |t: f64| {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            bounds.clamp(&mut p);
            p
        };

        let reflected = along(alpha);
        let fr = eval(f, &reflected, &mut evaluations);
        if fr < simplex[0].1 {
            let expanded = along(gamma);
            let fe = eval(f, &expanded, &mut evaluations);
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
            continue;
        }
        let (contracted, fc) = if fr < simplex[n].1 {
            let p = along(rho);
            let fp = eval(f, &p, &mut evaluations);
            (p, fp)
        } else {
            let p = along(-rho);
            let fp = eval(f, &p, &mut evaluations);
            (p, fp)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (contracted, fc);
            continue;
        }
        // shrink toward the best vertex
        let best_x = simplex[0].0.clone();
        for (v, fv) in simplex.iter_mut().skip(1) {
            for (x, b) in v.iter_mut().zip(&best_x) {
                *x = b + sigma * (*x - b);
            }
            *fv = eval(f, v, &mut evaluations);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Minimum {
        x,
        fx,
        iterations,
        evaluations,
        converged,
    }
}

/// Runs Nelder–Mead from `x0` and from `restarts` uniform random points in
/// the box, then polishes the best result once more. Starts run
/// concurrently; the winner is the lowest objective, ties going to the
/// earliest start.
pub fn minimize_with_restarts<F: Fn(&[f64]) -> f64 + Sync>(
    f: &F,
    x0: &[f64],
    bounds: &Bounds,
    restarts: usize,
    seed: u64,
    opts: &NelderMeadOptions,
) -> Minimum {
    let mut starts = vec![x0.to_vec()];
    for r in 0..restarts {
        let mut rng = rng::stream(seed, Domain::Restarts, r as u64);
        starts.push(
            (0..bounds.dim())
                .map(|i| bounds.lower[i] + rng.random::<f64>() * bounds.width(i))
                .collect(),
        );
    }
    let results: Vec<Minimum> = starts.par_iter().map(|s| nelder_mead(f, s, bounds, opts)).collect();
    let total_iterations: usize = results.iter().map(|m| m.iterations).sum();
    let total_evaluations: usize = results.iter().map(|m| m.evaluations).sum();
    let best = results
        .into_iter()
        .reduce(|a, b| if b.fx < a.fx { b } else { a })
        .expect("at least one start");

    let polished = nelder_mead(f, &best.x, bounds, opts);
    let mut out = if polished.fx <= best.fx { polished } else { best };
    out.iterations += total_iterations;
    out.evaluations += total_evaluations;
    out
}

/// Central-difference Hessian. The stencil is moved inward where it would
/// cross a bound.
pub fn numerical_hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], bounds: &Bounds, rel_step: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let h: Vec<f64> = (0..n)
        .map(|i| (rel_step * x[i].abs()).max(rel_step * 1e-2 * bounds.width(i)))
        .collect();
    let center: Vec<f64> = (0..n)
        .map(|i| x[i].clamp(bounds.lower[i] + h[i], bounds.upper[i] - h[i]))
        .collect();
    let at = |shifts: &[(usize, f64)]| {
        let mut p = center.clone();
        for &(i, s) in shifts {
            p[i] += s * h[i];
        }
        f(&p)
    };
    let f0 = at(&[]);
    let mut hess = vec![vec![0.0; n]; n];
    for i in 0..n {
        hess[i][i] = (at(&[(i, 1.0)]) - 2.0 * f0 + at(&[(i, -1.0)])) / (h[i] * h[i]);
        for j in 0..i {
            let v = (at(&[(i, 1.0), (j, 1.0)]) - at(&[(i, 1.0), (j, -1.0)]) - at(&[(i, -1.0), (j, 1.0)])
                + at(&[(i, -1.0), (j, -1.0)]))
                / (4.0 * h[i] * h[j]);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    hess
}
