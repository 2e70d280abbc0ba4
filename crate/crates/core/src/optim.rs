//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The objective closure returns `None` where it is undefined (a covariance
//! that is not positive definite); the line search treats that as `+inf`
//! and backtracks.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when `‖g‖∞ ≤ grad_tolerance · (1 + |f|)`.
    pub grad_tolerance: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 10, max_iterations: 5000, grad_tolerance: 1e-8, max_line_search: 40 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `f` after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

pub fn relative_grad_norm(g: &DVector<f64>, f: f64) -> f64 {
    g.amax() / (1.0 + f.abs())
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

struct Point {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

/// Minimizes `f` from `x0`. Returns `None` if `f` is undefined at `x0`.
pub fn minimize<F>(mut fg: F, x0: DVector<f64>, opts: &LbfgsOptions) -> Option<OptimResult>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let (f0, g0) = fg(&x0)?;
    if !f0.is_finite() {
        return None;
    }
    let mut cur = Point { x: x0, f: f0, g: g0 };
    let mut trace = vec![f0];
    let mut mem: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut converged = relative_grad_norm(&cur.g, cur.f) <= opts.grad_tolerance;
    let mut failures = 0;

    while !converged && iterations < opts.max_iterations {
        let mut d = two_loop(&cur.g, &mem);
        let mut slope = d.dot(&cur.g);
        if !(slope < 0.0) {
            mem.clear();
            d = -&cur.g;
            slope = d.dot(&cur.g);
        }
        let alpha0 = if mem.is_empty() { (1.0 / cur.g.amax().max(1e-300)).min(1.0) } else { 1.0 };
        match line_search(&mut fg, &cur, &d, slope, alpha0, opts.max_line_search) {
            Some(next) => {
                let s = &next.x - &cur.x;
                let y = &next.g - &cur.g;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    if mem.len() == opts.memory {
                        mem.pop_front();
                    }
                    mem.push_back((s, y, 1.0 / sy));
                }
                cur = next;
                trace.push(cur.f);
                failures = 0;
            }
            None => {
                // Restart from steepest descent once; give up if that fails too.
                failures += 1;
                if failures > 1 || mem.is_empty() {
                    break;
                }
                mem.clear();
            }
        }
        iterations += 1;
        converged = relative_grad_norm(&cur.g, cur.f) <= opts.grad_tolerance;
    }
    Some(OptimResult { x: cur.x, f: cur.f, grad: cur.g, iterations, converged, trace })
}

fn two_loop(g: &DVector<f64>, mem: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

fn eval<F>(fg: &mut F, base: &Point, d: &DVector<f64>, alpha: f64) -> Option<Point>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let x = &base.x + d * alpha;
    let (f, g) = fg(&x)?;
    if f.is_finite() && g.iter().all(|v| v.is_finite()) {
        Some(Point { x, f, g })
    } else {
        None
    }
}

/// Strong-Wolfe bracketing and zoom; falls back to the best strictly
/// decreasing point seen so the accepted objectives never increase.
fn line_search<F>(fg: &mut F, cur: &Point, d: &DVector<f64>, slope0: f64, alpha0: f64, max_evals: usize) -> Option<Point>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let mut best: Option<Point> = None;
    let keep = |p: &Point, best: &mut Option<Point>| {
        if p.f < cur.f && best.as_ref().is_none_or(|b| p.f < b.f) {
            *best = Some(Point { x: p.x.clone(), f: p.f, g: p.g.clone() });
        }
    };

    let mut lo_alpha = 0.0;
    let mut lo_f = cur.f;
    let mut lo_slope = slope0;
    let mut alpha = alpha0;
    let mut evals = 0;
    let mut bracket: Option<(f64, f64, f64)> = None; // (alpha_hi, f_hi, slope_hi)

    // Bracketing phase.
    while evals < max_evals {
        evals += 1;
        match eval(fg, cur, d, alpha) {
            None => {
                // Undefined: shrink toward the last good step.
                alpha = lo_alpha + 0.5 * (alpha - lo_alpha);
                continue;
            }
            Some(p) => {
                keep(&p, &mut best);
                let slope = p.g.dot(d);
                if p.f > cur.f + C1 * alpha * slope0 || (evals > 1 && p.f >= lo_f) {
                    bracket = Some((alpha, p.f, slope));
                    break;
                }
                if slope.abs() <= -C2 * slope0 {
                    return Some(p);
                }
                if slope >= 0.0 {
                    bracket = Some((lo_alpha, lo_f, lo_slope));
                    lo_alpha = alpha;
                    lo_f = p.f;
                    lo_slope = slope;
                    break;
                }
                lo_alpha = alpha;
                lo_f = p.f;
                lo_slope = slope;
                alpha *= 2.0;
            }
        }
    }

    // Zoom phase.
    if let Some((mut hi_alpha, mut hi_f, mut hi_slope)) = bracket {
        while evals < max_evals {
            evals += 1;
            let trial = interpolate(lo_alpha, lo_f, lo_slope, hi_alpha, hi_f, hi_slope);
            if (hi_alpha - lo_alpha).abs() < 1e-16 * lo_alpha.abs().max(1e-300) {
                break;
            }
            match eval(fg, cur, d, trial) {
                None => {
                    hi_alpha = trial;
                    hi_f = f64::INFINITY;
                    hi_slope = f64::NAN;
                }
                Some(p) => {
                    keep(&p, &mut best);
                    let slope = p.g.dot(d);
                    if p.f > cur.f + C1 * trial * slope0 || p.f >= lo_f {
                        hi_alpha = trial;
                        hi_f = p.f;
                        hi_slope = slope;
                    } else {
                        if slope.abs() <= -C2 * slope0 {
                            return Some(p);
                        }
                        if slope * (hi_alpha - lo_alpha) >= 0.0 {
                            hi_alpha = lo_alpha;
                            hi_f = lo_f;
                            hi_slope = lo_slope;
                        }
                        lo_alpha = trial;
                        lo_f = p.f;
                        lo_slope = slope;
                    }
                }
            }
        }
    }
    best
}

/// Cubic interpolation inside the bracket, safeguarded to its middle.
fn interpolate(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let lo = a.min(b);
    let hi = a.max(b);
    let width = hi - lo;
    let mid = 0.5 * (a + b);
    if !fb.is_finite() || !gb.is_finite() {
        return mid;
    }
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    if t.is_finite() && t > lo + 0.1 * width && t < hi - 0.1 * width {
        t
    } else {
        mid
    }
}

#[derive(Clone, Debug)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    /// Extra steps taken after convergence; each must lower both `f` and `‖g‖∞`.
    pub polish_steps: usize,
}

/// Levenberg-Marquardt damped Newton iteration on a supplied curvature
/// matrix `H` (positive semidefinite, e.g. the Fisher information). Steps
/// are only accepted when they decrease `f`; the damping follows the gain
/// ratio between actual and predicted decrease.
pub fn damped_newton<F, G>(mut fgh: F, mut f_only: G, x0: DVector<f64>, opts: &NewtonOptions) -> Option<OptimResult>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)>,
    G: FnMut(&DVector<f64>) -> Option<f64>,
{
    let (f, g, h) = fgh(&x0)?;
    if !f.is_finite() {
        return None;
    }
    let mut cur = (x0, f, g, h);
    let mut trace = vec![f];
    let mut mu = 1e-3;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut converged = relative_grad_norm(&cur.2, cur.1) <= opts.grad_tolerance;
    let mut polish = 0;
    while iterations < opts.max_iterations && (!converged || polish < opts.polish_steps) {
        iterations += 1;
        if converged {
            polish += 1;
        }
        let (x, f, g, h) = &cur;
        let p = g.len();
        let scale = (0..p).map(|i| h[(i, i)]).fold(0.0_f64, f64::max).max(1e-300);
        let mut accepted = None;
        while mu < 1e20 {
            let mut m = h.clone();
            for i in 0..p {
                m[(i, i)] += mu * (h[(i, i)].max(0.0) + 1e-8 * scale);
            }
            let Some(chol) = m.cholesky() else {
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            let step = -chol.solve(g);
            let predicted = -(g.dot(&step) + 0.5 * step.dot(&(h * &step)));
            let trial = x + &step;
            match f_only(&trial) {
                Some(ft) if ft.is_finite() && ft < *f && predicted > 0.0 => {
                    let rho = (f - ft) / predicted;
                    mu *= (1.0 / 3.0_f64).max(1.0 - (2.0 * rho - 1.0).powi(3));
                    mu = mu.max(1e-15);
                    nu = 2.0;
                    accepted = Some(trial);
                    break;
                }
                _ => {
                    mu *= nu;
                    nu *= 2.0;
                }
            }
        }
        let Some(trial) = accepted else { break };
        let Some((f2, g2, h2)) = fgh(&trial) else { break };
        if converged && g2.amax() >= cur.2.amax() {
            break;
        }
        cur = (trial, f2, g2, h2);
        trace.push(f2);
        converged = converged || relative_grad_norm(&cur.2, cur.1) <= opts.grad_tolerance;
    }
    let (x, f, grad, _) = cur;
    Some(OptimResult { x, f, grad, iterations, converged, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            Some((v, g))
        };
        let r = minimize(f, DVector::from_vec(vec![-1.2, 1.0]), &LbfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_undefined_region() {
        // -log(x) + x, undefined for x <= 0, minimum at 1.
        let f = |x: &DVector<f64>| {
            if x[0] <= 0.0 {
                None
            } else {
                Some((-x[0].ln() + x[0], DVector::from_vec(vec![-1.0 / x[0] + 1.0])))
            }
        };
        let r = minimize(f, DVector::from_vec(vec![20.0]), &LbfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn damped_newton_on_rosenbrock() {
        let f = |x: &DVector<f64>| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let fgh = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            // Gauss-Newton curvature of the two residuals (1 - a) and 10 (b - a²).
            let j = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -20.0 * a, 10.0]);
            Some((f(x), g, j.transpose() * j * 2.0))
        };
        let opts = NewtonOptions { max_iterations: 500, grad_tolerance: 1e-12, polish_steps: 0 };
        let r = damped_newton(fgh, |x| Some(f(x)), DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-9 && (r.x[1] - 1.0).abs() < 1e-9);
        assert!(r.trace.windows(2).all(|w| w[1] < w[0]));
    }
}
