//! Dense BFGS with a strong-Wolfe line search, minimizing `f`.

use nalgebra::{DMatrix, DVector};

use crate::linalg::max_abs_vec;

pub(crate) struct BfgsOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
}

pub(crate) struct BfgsResult {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `eval` returns `None` where the objective is undefined; the line search
/// treats such points as infinitely bad.
pub(crate) fn minimize<E>(x0: DVector<f64>, opts: &BfgsOptions, mut eval: E) -> Option<BfgsResult>
where
    E: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let (mut f, mut g) = eval(&x0)?;
    let mut x = x0;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut rel_change = f64::INFINITY;
    let mut resets = 0;

    for it in 0..opts.max_iter {
        let gnorm = max_abs_vec(&g);
        if gnorm < opts.grad_tol && rel_change < opts.rel_tol {
            return Some(BfgsResult { x, iterations: it, converged: true });
        }
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            p = -g.clone();
            slope = g.dot(&p);
        }
        let alpha0 = if first { (1.0 / max_abs_vec(&p).max(1e-12)).min(1.0) } else { 1.0 };
        match line_search(&x, f, slope, &p, alpha0, &mut eval) {
            Some((alpha, fnew, gnew)) => {
                let s = &p * alpha;
                let y = &gnew - &g;
                rel_change = (f - fnew).abs() / f.abs().max(1.0);
                x += &s;
                f = fnew;
                g = gnew;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    if first {
                        // scale the initial inverse Hessian
                        h *= sy / y.dot(&y);
                    }
                    let rho = 1.0 / sy;
                    let hy = &h * &y;
                    let yhy = y.dot(&hy);
                    h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                        - (&hy * s.transpose() + &s * hy.transpose()) * rho;
                }
                first = false;
                resets = 0;
            }
            None => {
                // no acceptable step: restart from steepest descent once
                if resets > 0 || first {
                    let converged = max_abs_vec(&g) < opts.grad_tol;
                    return Some(BfgsResult { x, iterations: it, converged });
                }
                resets += 1;
                first = true;
                h = DMatrix::identity(n, n);
                rel_change = f64::INFINITY;
            }
        }
    }
    let converged = max_abs_vec(&g) < opts.grad_tol && rel_change < opts.rel_tol;
    Some(BfgsResult { x, iterations: opts.max_iter, converged })
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn line_search<E>(
    x: &DVector<f64>,
    f0: f64,
    d0: f64,
    p: &DVector<f64>,
    alpha0: f64,
    eval: &mut E,
) -> Option<(f64, f64, DVector<f64>)>
where
    E: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    // roundoff allowance so that steps near the optimum are not rejected
    // on function-value noise alone
    let slack = 1e-12 * f0.abs().max(1.0);
    let mut phi = |a: f64| -> Option<(f64, f64, DVector<f64>)> {
        let (fa, ga) = eval(&(x + p * a))?;
        if !fa.is_finite() {
            return None;
        }
        let da = ga.dot(p);
        Some((fa, da, ga))
    };

    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut d_prev = d0;
    let mut a = alpha0;
    for i in 0..40 {
        let Some((fa, da, ga)) = phi(a) else {
            // undefined region: shrink toward the last good point
            if a - a_prev < 1e-14 {
                return None;
            }
            a = a_prev + 0.25 * (a - a_prev);
            continue;
        };
        if fa > f0 + C1 * a * d0 + slack || (i > 0 && fa >= f_prev) {
            return zoom(&mut phi, f0, d0, slack, (a_prev, f_prev, d_prev), (a, fa, da));
        }
        if da.abs() <= -C2 * d0 {
            return Some((a, fa, ga));
        }
        if da >= 0.0 {
            return zoom(&mut phi, f0, d0, slack, (a, fa, da), (a_prev, f_prev, d_prev));
        }
        a_prev = a;
        f_prev = fa;
        d_prev = da;
        a *= 2.0;
    }
    None
}

fn zoom<P>(
    phi: &mut P,
    f0: f64,
    d0: f64,
    slack: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
) -> Option<(f64, f64, DVector<f64>)>
where
    P: FnMut(f64) -> Option<(f64, f64, DVector<f64>)>,
{
    for _ in 0..60 {
        // cubic interpolation, safeguarded to the middle of the bracket
        let (a_lo, f_lo, d_lo) = lo;
        let (a_hi, f_hi, d_hi) = hi;
        let width = a_hi - a_lo;
        let mut a = cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi).unwrap_or(a_lo + 0.5 * width);
        let (left, right) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
        let margin = 0.1 * (right - left);
        if !(a > left + margin && a < right - margin) {
            a = 0.5 * (a_lo + a_hi);
        }
        if (right - left) < 1e-16 * right.abs().max(1.0) {
            break;
        }
        match phi(a) {
            None => {
                hi = (a, f64::INFINITY, 0.0);
            }
            Some((fa, da, ga)) => {
                if fa > f0 + C1 * a * d0 + slack || fa >= f_lo {
                    hi = (a, fa, da);
                } else {
                    if da.abs() <= -C2 * d0 {
                        return Some((a, fa, ga));
                    }
                    if da * (a_hi - a_lo) >= 0.0 {
                        hi = lo;
                    }
                    lo = (a, fa, da);
                }
            }
        }
    }
    // accept the best bracketing point if it made sufficient decrease
    let (a_lo, f_lo, _) = lo;
    if a_lo > 0.0 && f_lo <= f0 + C1 * a_lo * d0 + slack {
        let (fa, _, ga) = phi(a_lo)?;
        return Some((a_lo, fa, ga));
    }
    None
}

fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    if !fb.is_finite() {
        return None;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}
