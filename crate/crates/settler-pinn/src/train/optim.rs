//! Full-batch optimizers: Adam and L-BFGS with a strong Wolfe line search.

use crate::error::{Error, Result};

/// Adam moment state. Steps are deterministic given the gradient sequence.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps skipped because the gradient was not finite.
    pub skipped: usize,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1.0e-8,
            skipped: 0,
        }
    }

    /// One bias-corrected Adam update in place. Non-finite gradients skip
    /// the step and bump the warning counter.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(theta.len(), grad.len());
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("adam: skipping step with non-finite gradient (total {})", self.skipped);
            return;
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// L-BFGS tuning knobs.
#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_steps: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1.0e-4,
            c2: 0.9,
            max_line_steps: 25,
            grad_tol: 1.0e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub theta: Vec<f64>,
    pub best_loss: f64,
    pub iterations: usize,
    /// Loss after each accepted iterate; non-increasing.
    pub loss_history: Vec<f64>,
    /// Present when the search stopped before `max_iters` for a reason other
    /// than the gradient tolerance.
    pub diagnostic: Option<String>,
}

struct Probe {
    alpha: f64,
    f: f64,
    dphi: f64,
    grad: Vec<f64>,
}

/// Two-loop-recursion L-BFGS with strong Wolfe line search. The objective
/// returns the loss and its gradient; the best iterate seen is returned even
/// when the line search fails, so the result never regresses.
pub fn lbfgs_optimize<F>(
    theta0: &[f64],
    max_iters: usize,
    opts: &LbfgsOptions,
    mut objective: F,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = theta0.len();
    let mut x = theta0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() {
        return Err(Error::Training("initial loss is not finite".into()));
    }
    let mut best_x = x.clone();
    let mut best_f = f;
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new(); // (s, y, rho)
    let mut loss_history = vec![f];
    let mut diagnostic = None;
    let mut iterations = 0;

    for _iter in 0..max_iters {
        let g_norm = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if g_norm < opts.grad_tol {
            break;
        }

        // two-loop recursion for d = -H·g
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.last() {
            let gamma = dot(s, y) / dot(y, y).max(1.0e-300);
            for v in &mut d {
                *v *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (a - b) * s[i];
            }
        }

        let mut dphi0 = dot(&g, &d);
        if dphi0 >= 0.0 {
            // not a descent direction; drop the history and fall back to -g
            history.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &d);
            if dphi0 >= 0.0 {
                break;
            }
        }

        let mut probe = |alpha: f64| -> Result<Probe> {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let (ft, gt) = objective(&xt)?;
            let dphi = dot(&gt, &d);
            Ok(Probe { alpha, f: ft, dphi, grad: gt })
        };

        match strong_wolfe(&mut probe, f, dphi0, opts)? {
            Some(p) => {
                let mut s = vec![0.0; n];
                for i in 0..n {
                    s[i] = p.alpha * d[i];
                    x[i] += s[i];
                }
                let y: Vec<f64> = p.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1.0e-12 * norm2(&s) * norm2(&y) {
                    if history.len() == opts.memory {
                        history.remove(0);
                    }
                    history.push((s, y, 1.0 / sy));
                }
                f = p.f;
                g = p.grad;
                iterations += 1;
                loss_history.push(f);
                if f < best_f {
                    best_f = f;
                    best_x.copy_from_slice(&x);
                }
            }
            None => {
                diagnostic = Some("line search failed to satisfy the strong Wolfe conditions".into());
                log::debug!("lbfgs: {}", diagnostic.as_ref().unwrap());
                break;
            }
        }
    }

    Ok(LbfgsOutcome {
        theta: best_x,
        best_loss: best_f,
        iterations,
        loss_history,
        diagnostic,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cubic_min(a: f64, fa: f64, dfa: f64, b: f64, fb: f64, dfb: f64) -> f64 {
    // minimizer of the cubic interpolant; midpoint fallback
    let d1 = dfa + dfb - 3.0 * (fa - fb) / (a - b);
    let d2sq = d1 * d1 - dfa * dfb;
    if d2sq >= 0.0 {
        let d2 = d2sq.sqrt() * (b - a).signum();
        let t = b - (b - a) * (dfb + d2 - d1) / (dfb - dfa + 2.0 * d2);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if t.is_finite() && t > lo && t < hi {
            return t;
        }
    }
    0.5 * (a + b)
}

fn strong_wolfe<P>(
    probe: &mut P,
    phi0: f64,
    dphi0: f64,
    opts: &LbfgsOptions,
) -> Result<Option<Probe>>
where
    P: FnMut(f64) -> Result<Probe>,
{
    let (c1, c2) = (opts.c1, opts.c2);
    let mut evals = 0usize;
    let mut alpha_prev = 0.0;
    let mut f_prev = phi0;
    let mut dphi_prev = dphi0;
    let mut alpha = 1.0;
    let mut bracket: Option<(f64, f64, f64, f64, f64, f64)> = None; // (lo, flo, dlo, hi, fhi, dhi)

    // bracketing phase
    while evals < opts.max_line_steps {
        let p = probe(alpha)?;
        evals += 1;
        let armijo_fail = !p.f.is_finite() || p.f > phi0 + c1 * alpha * dphi0 || (evals > 1 && p.f >= f_prev);
        if armijo_fail {
            bracket = Some((alpha_prev, f_prev, dphi_prev, alpha, p.f, p.dphi));
            break;
        }
        if p.dphi.abs() <= -c2 * dphi0 {
            return Ok(Some(p));
        }
        if p.dphi >= 0.0 {
            bracket = Some((alpha, p.f, p.dphi, alpha_prev, f_prev, dphi_prev));
            break;
        }
        alpha_prev = alpha;
        f_prev = p.f;
        dphi_prev = p.dphi;
        alpha *= 2.0;
    }

    let Some((mut lo, mut flo, mut dlo, mut hi, mut fhi, mut dhi)) = bracket else {
        return Ok(None);
    };

    // zoom phase
    while evals < opts.max_line_steps {
        let mut alpha = cubic_min(lo, flo, dlo, hi, fhi, dhi);
        let width = (hi - lo).abs();
        if !alpha.is_finite()
            || (alpha - lo).abs() < 0.05 * width
            || (alpha - hi).abs() < 0.05 * width
        {
            alpha = 0.5 * (lo + hi);
        }
        let p = probe(alpha)?;
        evals += 1;
        if !p.f.is_finite() || p.f > phi0 + c1 * alpha * dphi0 || p.f >= flo {
            hi = alpha;
            fhi = p.f;
            dhi = p.dphi;
        } else {
            if p.dphi.abs() <= -c2 * dphi0 {
                return Ok(Some(p));
            }
            if p.dphi * (hi - lo) >= 0.0 {
                hi = lo;
                fhi = flo;
                dhi = dlo;
            }
            lo = alpha;
            flo = p.f;
            dlo = p.dphi;
        }
        if (hi - lo).abs() < 1.0e-14 {
            break;
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_leaves_params_alone_on_zero_gradient() {
        let mut theta = vec![1.0, -2.0, 3.0];
        let mut adam = AdamState::new(3);
        adam.step(&mut theta, &[0.0, 0.0, 0.0], 1.0e-3);
        assert_eq!(theta, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut theta = vec![0.0, 0.0];
        let mut adam = AdamState::new(2);
        let g = [0.3, -1.7];
        adam.step(&mut theta, &g, 1.0e-3);
        // bias-corrected first step: lr·g/(|g| + eps·sqrt(b2t)) ≈ lr·sign(g)
        assert_relative_eq!(theta[0], -1.0e-3, max_relative = 1e-6);
        assert_relative_eq!(theta[1], 1.0e-3, max_relative = 1e-6);
    }

    #[test]
    fn adam_is_deterministic_and_skips_bad_gradients() {
        let mut t1 = vec![0.5; 4];
        let mut t2 = vec![0.5; 4];
        let mut a1 = AdamState::new(4);
        let mut a2 = AdamState::new(4);
        for k in 0..50 {
            let g: Vec<f64> = (0..4).map(|i| ((k * 7 + i) as f64).sin()).collect();
            a1.step(&mut t1, &g, 1.0e-2);
            a2.step(&mut t2, &g, 1.0e-2);
        }
        assert_eq!(t1, t2);
        let before = t1.clone();
        a1.step(&mut t1, &[f64::NAN, 0.0, 0.0, 0.0], 1.0e-2);
        assert_eq!(t1, before);
        assert_eq!(a1.skipped, 1);
    }

    #[test]
    fn lbfgs_solves_a_convex_quadratic_to_machine_precision() {
        // f(x) = 1/2 (x-a)ᵀ D (x-a), D = diag(1, 10)
        let a = [3.0, -1.0];
        let d = [1.0, 10.0];
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut f = 0.0;
            let mut g = vec![0.0; 2];
            for i in 0..2 {
                let e = x[i] - a[i];
                f += 0.5 * d[i] * e * e;
                g[i] = d[i] * e;
            }
            Ok((f, g))
        };
        let out = lbfgs_optimize(&[0.0, 0.0], 10, &LbfgsOptions::default(), obj).unwrap();
        assert!(out.best_loss < 1.0e-8, "loss {}", out.best_loss);
        assert_relative_eq!(out.theta[0], 3.0, epsilon = 1e-4);
        assert_relative_eq!(out.theta[1], -1.0, epsilon = 1e-4);
        assert!(out.iterations <= 10);
    }

    #[test]
    fn lbfgs_on_rosenbrock_is_monotone_and_converges() {
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (1.0, 100.0);
            let f = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            let g = vec![
                -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] * x[0]),
                2.0 * b * (x[1] - x[0] * x[0]),
            ];
            Ok((f, g))
        };
        let out = lbfgs_optimize(&[-1.2, 1.0], 200, &LbfgsOptions::default(), obj).unwrap();
        for w in out.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(out.best_loss < 1.0e-10, "loss {}", out.best_loss);
    }

    #[test]
    fn lbfgs_at_optimum_does_not_regress() {
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((x[0] * x[0], vec![2.0 * x[0]]))
        };
        let out = lbfgs_optimize(&[0.0], 10, &LbfgsOptions::default(), obj).unwrap();
        assert_eq!(out.best_loss, 0.0);
        assert_eq!(out.iterations, 0);
    }
}
