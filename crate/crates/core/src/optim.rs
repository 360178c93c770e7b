//! Derivative-free box-constrained minimization and finite-difference curvature.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OptimOptions {
    /// Evaluation budget for the coordinate-quadratic phase.
    pub coordinate_evals: usize,
    /// Evaluation budget for the Nelder–Mead polish.
    pub simplex_evals: usize,
    /// Convergence tolerance on the simplex diameter and on the value spread.
    pub tolerance: f64,
    /// Initial coordinate step.
    pub initial_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            coordinate_evals: 200,
            simplex_evals: 2000,
            tolerance: 1e-4,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Box constraints `lower ≤ x ≤ upper`.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidInput("bounds must satisfy lower < upper componentwise".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }
}

struct Counted<F> {
    f: F,
    evals: usize,
    best: (Vec<f64>, f64),
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < self.best.1 {
            self.best = (x.to_vec(), v);
        }
        v
    }
}

/// Minimizes `f` inside `bounds` starting from `x0`.
///
/// A coordinate search fits a parabola through three points along each axis
/// and jumps to its vertex; a Nelder–Mead simplex then polishes the result.
/// Non-finite values are treated as `+∞`. The simplex stops once its diameter
/// and value spread are both below the tolerance, or once the diameter alone
/// is a hundred times smaller. Fails with [`Error::NonConvergence`] when the
/// simplex budget runs out first.
pub fn minimize<F>(f: F, x0: &[f64], bounds: &Bounds, opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.clamp(&mut x);
    let mut obj = Counted {
        f,
        evals: 0,
        best: (x.clone(), f64::INFINITY),
    };
    let mut fx = obj.eval(&x);
    let mut step = vec![opts.initial_step; n];

    while obj.evals + 2 <= opts.coordinate_evals {
        let mut moved = false;
        for i in 0..n {
            if obj.evals + 2 > opts.coordinate_evals {
                break;
            }
            let h = step[i];
            let mut xp = x.clone();
            xp[i] = (x[i] + h).min(bounds.upper[i]);
            let mut xm = x.clone();
            xm[i] = (x[i] - h).max(bounds.lower[i]);
            let (fp, fm) = (obj.eval(&xp), obj.eval(&xm));
            let (dp, dm) = (xp[i] - x[i], x[i] - xm[i]);
            let mut candidate = None;
            if fp.is_finite() && fm.is_finite() && dp > 0.0 && dm > 0.0 {
                // Vertex of the parabola through (−dm, fm), (0, fx), (dp, fp).
                let curv = (fp - fx) / dp + (fm - fx) / dm;
                if curv > 0.0 {
                    let slope = (fp - fx) / dp * dm / (dp + dm) - (fm - fx) / dm * dp / (dp + dm);
                    let offset = (-slope / (2.0 * curv / (dp + dm))).clamp(-4.0 * h, 4.0 * h);
                    let mut xv = x.clone();
                    xv[i] = (x[i] + offset).clamp(bounds.lower[i], bounds.upper[i]);
                    if xv[i] != x[i] && obj.evals < opts.coordinate_evals {
                        candidate = Some((obj.eval(&xv), xv));
                    }
                }
            }
            let mut best = (fx, None);
            for (v, p) in [(fp, xp), (fm, xm)].into_iter().chain(candidate) {
                if v < best.0 {
                    best = (v, Some(p));
                }
            }
            if let (v, Some(p)) = best {
                let moved_by = (p[i] - x[i]).abs();
                x = p;
                fx = v;
                moved = true;
                step[i] = (0.5 * step[i]).max(moved_by).min(opts.initial_step * 4.0);
            } else {
                step[i] *= 0.25;
            }
        }
        if !moved && step.iter().all(|&s| s < opts.tolerance) {
            break;
        }
    }

    let budget = obj.evals + opts.simplex_evals;
    nelder_mead(&mut obj, &x, fx, &step, bounds, opts.tolerance, budget)?;
    let (x, value) = obj.best.clone();
    Ok(OptimResult {
        x,
        value,
        evaluations: obj.evals,
    })
}

fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<F>,
    x0: &[f64],
    f0: f64,
    steps: &[f64],
    bounds: &Bounds,
    tol: f64,
    budget: usize,
) -> Result<()> {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut v = x0.to_vec();
        let h = steps[i].clamp(10.0 * tol, 0.5);
        v[i] = if v[i] + h <= bounds.upper[i] { v[i] + h } else { v[i] - h };
        let fv = obj.eval(&v);
        simplex.push((v, fv));
    }
    let project = |mut v: Vec<f64>| {
        bounds.clamp(&mut v);
        v
    };
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let spread = simplex[n].1 - simplex[0].1;
        // Below a hundredth of the tolerance any remaining spread is evaluation noise.
        if diameter < tol && (spread.abs() < tol || diameter < 0.01 * tol) {
            return Ok(());
        }
        if obj.evals >= budget {
            let best = simplex[0].0.clone();
            let grad_norm = fd_gradient_norm(obj, &best, bounds);
            return Err(Error::NonConvergence {
                best,
                grad_norm,
                evaluations: obj.evals,
            });
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|(v, _)| v[k]).sum::<f64>() / n as f64)
            .collect();
        let toward = |t: f64, worst: &[f64]| -> Vec<f64> {
            project(
                centroid
                    .iter()
                    .zip(worst)
                    .map(|(c, w)| c + t * (c - w))
                    .collect(),
            )
        };
        let worst = simplex[n].0.clone();
        let xr = toward(1.0, &worst);
        let fr = obj.eval(&xr);
        if fr < simplex[0].1 {
            let xe = toward(2.0, &worst);
            let fe = obj.eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = toward(0.5, &worst);
                let fc = obj.eval(&xc);
                (xc, fc)
            } else {
                let xc = toward(-0.5, &worst);
                let fc = obj.eval(&xc);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let v: Vec<f64> = best.iter().zip(&item.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    let fv = obj.eval(&v);
                    *item = (v, fv);
                }
            }
        }
    }
}

fn fd_gradient_norm<F: FnMut(&[f64]) -> f64>(obj: &mut Counted<F>, x: &[f64], bounds: &Bounds) -> f64 {
    let h = 1e-4;
    let mut sq = 0.0;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] = (x[i] + h).min(bounds.upper[i]);
        let mut xm = x.to_vec();
        xm[i] = (x[i] - h).max(bounds.lower[i]);
        if xp[i] > xm[i] {
            let g = (obj.eval(&xp) - obj.eval(&xm)) / (xp[i] - xm[i]);
            sq += g * g;
        }
    }
    sq.sqrt()
}

/// Central-difference Hessian of `f` at `x` with per-coordinate steps `h`.
pub fn fd_hessian<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(n, n);
    let shifted = |di: &[(usize, f64)]| {
        let mut v = x.to_vec();
        for &(i, s) in di {
            v[i] += s;
        }
        v
    };
    for i in 0..n {
        let fp = f(&shifted(&[(i, h[i])]));
        let fm = f(&shifted(&[(i, -h[i])]));
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = f(&shifted(&[(i, h[i]), (j, h[j])]));
            let fpm = f(&shifted(&[(i, h[i]), (j, -h[j])]));
            let fmp = f(&shifted(&[(i, -h[i]), (j, h[j])]));
            let fmm = f(&shifted(&[(i, -h[i]), (j, -h[j])]));
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Covariance from a negative-log-posterior Hessian with eigenvalues floored
/// so that the result is positive definite.
pub fn covariance_from_hessian(h: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let floor = 1e-6_f64.max(eig.eigenvalues.amax() * 1e-10);
    let inv = eig.eigenvalues.map(|l| 1.0 / l.abs().max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}
