//! Bound-constrained minimisers used by the estimator.
//!
//! Only lower bounds occur (diagonals of the relative covariance factor are
//! non-negative), so feasibility is restored by clamping.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub(crate) struct MinimizeOptions {
    pub max_iter: usize,
    /// relative objective change
    pub ftol: f64,
    /// sup-norm of the projected gradient
    pub gtol: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting point first.
    pub trace: Vec<f64>,
}

fn project(x: &mut DVector<f64>, lower: &[f64]) {
    for (xi, lo) in x.iter_mut().zip(lower) {
        if *xi < *lo {
            *xi = *lo;
        }
    }
}

/// Zero the gradient components that point out of the feasible region at an active bound.
fn projected_gradient(x: &DVector<f64>, g: &DVector<f64>, lower: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        x.iter()
            .zip(g.iter())
            .zip(lower)
            .map(|((&xi, &gi), &lo)| if xi <= lo && gi > 0.0 { 0.0 } else { gi }),
    )
}

/// Projected BFGS with Armijo backtracking along the projection arc.
///
/// `eval` returns `None` where the objective is undefined; the line search treats
/// that as an infinitely bad point.
pub(crate) fn bfgs<F>(mut eval: F, x0: DVector<f64>, lower: &[f64], opts: &MinimizeOptions) -> Option<Minimum>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    const ARMIJO: f64 = 1e-4;
    let n = x0.len();
    let mut x = x0;
    project(&mut x, lower);
    let (mut f, mut g) = eval(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_identity = true;
    let mut rel_change = f64::INFINITY;
    let mut trace = vec![f];
    let mut iterations = 0;

    let done = |x: &DVector<f64>, g: &DVector<f64>, rel: f64| {
        let pg = projected_gradient(x, g, lower).amax();
        pg < opts.gtol && rel < opts.ftol || pg == 0.0
    };

    while iterations < opts.max_iter {
        if done(&x, &g, rel_change) {
            return Some(Minimum { x, iterations, converged: true, trace });
        }
        iterations += 1;

        let free: Vec<bool> = x
            .iter()
            .zip(g.iter())
            .zip(lower)
            .map(|((&xi, &gi), &lo)| !(xi <= lo && gi > 0.0))
            .collect();
        let mut d = DVector::zeros(n);
        for i in (0..n).filter(|&i| free[i]) {
            d[i] = -(0..n).filter(|&l| free[l]).map(|l| h[(i, l)] * g[l]).sum::<f64>();
        }
        if g.dot(&d) >= 0.0 {
            h.fill_with_identity();
            h_is_identity = true;
            d = -projected_gradient(&x, &g, lower);
        }

        let mut step = None;
        let mut alpha = 1.0;
        for _ in 0..60 {
            let mut xn = &x + &d * alpha;
            project(&mut xn, lower);
            if let Some((fn_, gn)) = eval(&xn) {
                if fn_.is_finite() && fn_ <= f + ARMIJO * g.dot(&(&xn - &x)) {
                    step = Some((xn, fn_, gn));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((xn, fn_, gn)) = step else {
            if h_is_identity {
                break;
            }
            h.fill_with_identity();
            h_is_identity = true;
            continue;
        };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if h_is_identity {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
            h_is_identity = false;
        }
        rel_change = (f - fn_).abs() / f.abs().max(1.0);
        x = xn;
        f = fn_;
        g = gn;
        trace.push(f);
    }
    let converged = done(&x, &g, rel_change);
    Some(Minimum { x, iterations, converged, trace })
}

/// Nelder–Mead simplex search with clamping to the lower bounds.
pub(crate) fn nelder_mead<F>(mut eval: F, x0: DVector<f64>, lower: &[f64], opts: &MinimizeOptions) -> Option<Minimum>
where
    F: FnMut(&DVector<f64>) -> Option<f64>,
{
    let n = x0.len();
    let mut f = |x: &DVector<f64>| eval(x).filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
    let mut start = x0;
    project(&mut start, lower);
    let f0 = f(&start);
    if !f0.is_finite() {
        return None;
    }

    let mut simplex = vec![(start.clone(), f0)];
    for i in 0..n {
        let mut v = start.clone();
        v[i] += 0.1 * start[i].abs().max(1.0);
        project(&mut v, lower);
        let fv = f(&v);
        simplex.push((v, fv));
    }

    let mut trace = vec![f0];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| (v - &simplex[0].0).amax())
            .fold(0.0, f64::max);
        if (worst - best).abs() <= opts.ftol * best.abs().max(1.0) && diameter < 1e-8 {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid = simplex[..n]
            .iter()
            .fold(DVector::zeros(n), |acc, (v, _)| acc + v)
            / n as f64;
        let toward = |t: f64| {
            let mut p = &centroid + (&simplex[n].0 - &centroid) * t;
            project(&mut p, lower);
            p
        };

        let xr = toward(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = toward(-2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = toward(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = toward(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for (v, fv) in simplex.iter_mut().skip(1) {
                    *v = &best + (&*v - &best) * 0.5;
                    project(v, lower);
                    *fv = f(v);
                }
            }
        }
        let current = simplex.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        trace.push(current);
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, _) = simplex.swap_remove(0);
    Some(Minimum { x, iterations, converged, trace })
}
