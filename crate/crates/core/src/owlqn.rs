//! Orthant-wise limited-memory quasi-Newton (OWL-QN) minimization of
//! `smooth(x) + lambda * |x|_1`.
//!
//! The search direction is the L-BFGS two-loop recursion applied to the
//! pseudo-gradient, restricted to the orthant the pseudo-gradient points
//! into; every trial point of the backtracking line search is projected
//! back onto that orthant, so coordinates that would change sign land on an
//! exact zero.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct OwlqnConfig<T> {
    /// Number of correction pairs kept.
    pub memory: usize,
    pub max_iter: usize,
    /// Stop once the pseudo-gradient's max-norm is at or below this.
    pub grad_tol: T,
    /// Step shrink factor of the backtracking line search.
    pub backtrack: T,
    /// Sufficient-decrease constant.
    pub decrease: T,
    pub max_line_search: usize,
    /// Also stop once the objective fell by at most this fraction of its
    /// magnitude over the last `progress_window` iterations; zero disables.
    pub rel_tol: T,
    pub progress_window: usize,
    /// L1 coefficient.
    pub lambda: T,
}

impl<T: Scalar> Default for OwlqnConfig<T> {
    fn default() -> Self {
        OwlqnConfig {
            memory: 10,
            max_iter: 500,
            grad_tol: T::of(1e-5),
            backtrack: T::of(0.5),
            decrease: T::of(1e-4),
            max_line_search: 60,
            rel_tol: T::of(1e-7),
            progress_window: 10,
            lambda: T::zero(),
        }
    }
}

impl<T: Scalar> OwlqnConfig<T> {
    fn validate(&self) -> Result<()> {
        if self.memory < 1 {
            return Err(Error::InvalidArgument("memory must be at least 1".into()));
        }
        if !(self.lambda >= T::zero()) {
            return Err(Error::InvalidArgument("lambda must be non-negative".into()));
        }
        if !(self.grad_tol > T::zero()) || !(self.decrease > T::zero()) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.rel_tol >= T::zero()) || self.progress_window == 0 {
            return Err(Error::InvalidArgument("invalid progress criterion".into()));
        }
        if !(self.backtrack > T::zero() && self.backtrack < T::one()) {
            return Err(Error::InvalidArgument("backtrack ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One accepted iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub pseudo_grad_norm: f64,
    pub nonzero: usize,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct OwlqnReport<T> {
    pub x: Vec<T>,
    /// Full objective (smooth part plus L1 term) at `x`.
    pub objective: T,
    pub iterations: usize,
    pub converged: bool,
    /// The line search found no acceptable point; `x` is the best iterate so far.
    pub line_search_failed: bool,
    pub log: Vec<IterationRecord>,
}

impl<T> OwlqnReport<T> {
    /// Iteration log as CSV: `iter,objective,pseudo_grad_norm,nonzero,step`.
    pub fn write_log<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for rec in &self.log {
            out.serialize(rec)
                .map_err(|e| Error::Format(format!("iteration log: {e}")))?;
        }
        out.flush().map_err(|e| Error::io("<iteration log>", e))
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn l1<T: Scalar>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &v| acc + v.abs())
}

fn max_norm<T: Scalar>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
}

/// Minimum-norm subgradient of `smooth + lambda * |x|_1` given the smooth gradient `g`.
pub fn pseudo_gradient<T: Scalar>(x: &[T], g: &[T], lambda: T) -> Vec<T> {
    assert_eq!(x.len(), g.len());
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| {
            if xi != T::zero() {
                gi + lambda * sign(xi)
            } else if gi + lambda < T::zero() {
                gi + lambda
            } else if gi - lambda > T::zero() {
                gi - lambda
            } else {
                T::zero()
            }
        })
        .collect()
}

struct Evaluator<F> {
    f: F,
    calls: usize,
}

impl<F> Evaluator<F> {
    fn eval<T: Scalar>(&mut self, x: &[T], g: &mut [T]) -> Result<T>
    where
        F: FnMut(&[T], &mut [T]) -> T,
    {
        self.calls += 1;
        let v = (self.f)(x, g);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is {v} at evaluation {} (|x|_inf = {})",
                self.calls,
                max_norm(x)
            )));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient component {i} is {} at evaluation {}",
                g[i], self.calls
            )));
        }
        Ok(v)
    }
}

/// Minimize `smooth(x) + cfg.lambda * |x|_1`.
///
/// `smooth(x, grad)` returns the smooth value and writes its gradient.
pub fn minimize<T, F>(smooth: F, x0: Vec<T>, cfg: &OwlqnConfig<T>) -> Result<OwlqnReport<T>>
where
    T: Scalar,
    F: FnMut(&[T], &mut [T]) -> T,
{
    cfg.validate()?;
    let n = x0.len();
    let lambda = cfg.lambda;
    let mut eval = Evaluator { f: smooth, calls: 0 };

    let mut x = x0;
    let mut g = vec![T::zero(); n];
    let mut f = eval.eval(&x, &mut g)? + lambda * l1(&x);
    let mut pg = pseudo_gradient(&x, &g, lambda);
    let mut history: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(cfg.memory);
    let mut log = Vec::new();
    let nonzero = |x: &[T]| x.iter().filter(|v| **v != T::zero()).count();

    let report = |x: Vec<T>, f: T, iterations, converged, failed, log| OwlqnReport {
        x,
        objective: f,
        iterations,
        converged,
        line_search_failed: failed,
        log,
    };

    if max_norm(&pg) <= cfg.grad_tol {
        return Ok(report(x, f, 0, true, false, log));
    }

    let mut x_new = vec![T::zero(); n];
    let mut g_new = vec![T::zero(); n];
    for iter in 1..=cfg.max_iter {
        // two-loop recursion on the pseudo-gradient
        let mut q = pg.clone();
        let mut coef = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = *rho * dot(s, &q);
            for (qi, &yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            coef.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in &mut q {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(coef.into_iter().rev()) {
            let b = *rho * dot(y, &q);
            for (qi, &si) in q.iter_mut().zip(s) {
                *qi += si * (a - b);
            }
        }
        let mut dir: Vec<T> = q.into_iter().map(|v| -v).collect();
        // keep only components that descend along the pseudo-gradient
        for (d, &p) in dir.iter_mut().zip(&pg) {
            if *d * p >= T::zero() {
                *d = T::zero();
            }
        }
        if dot(&dir, &pg) >= T::zero() {
            dir = pg.iter().map(|&v| -v).collect();
        }
        let orthant: Vec<T> = x
            .iter()
            .zip(&pg)
            .map(|(&xi, &pi)| if xi != T::zero() { sign(xi) } else { sign(-pi) })
            .collect();

        let mut step = if history.is_empty() {
            T::one().min(T::one() / dot(&pg, &pg).sqrt())
        } else {
            T::one()
        };
        let mut accepted = None;
        for _ in 0..cfg.max_line_search {
            for i in 0..n {
                let v = x[i] + step * dir[i];
                x_new[i] = if sign(v) == orthant[i] { v } else { T::zero() };
            }
            let f_trial = eval.eval(&x_new, &mut g_new)? + lambda * l1(&x_new);
            let moved: Vec<T> = x_new.iter().zip(&x).map(|(&a, &b)| a - b).collect();
            if f_trial <= f + cfg.decrease * dot(&pg, &moved) {
                accepted = Some(f_trial);
                break;
            }
            step *= cfg.backtrack;
        }
        let Some(f_trial) = accepted else {
            return Ok(report(x, f, iter - 1, false, true, log));
        };

        let s: Vec<T> = x_new.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = g_new.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > T::epsilon() * dot(&y, &y) && sy > T::zero() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, T::one() / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_trial;
        pg = pseudo_gradient(&x, &g, lambda);
        let pg_norm = max_norm(&pg);
        log.push(IterationRecord {
            iter,
            objective: f.as_f64(),
            pseudo_grad_norm: pg_norm.as_f64(),
            nonzero: nonzero(&x),
            step: step.as_f64(),
        });
        if pg_norm <= cfg.grad_tol {
            return Ok(report(x, f, iter, true, false, log));
        }
        if iter > cfg.progress_window && cfg.rel_tol > T::zero() {
            let past = log[log.len() - 1 - cfg.progress_window].objective;
            let drop = (past - f.as_f64()) / f.as_f64().abs().max(1.0);
            if drop <= cfg.rel_tol.as_f64() {
                return Ok(report(x, f, iter, true, false, log));
            }
        }
    }
    let iters = cfg.max_iter;
    Ok(report(x, f, iters, false, false, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(target: Vec<f64>) -> impl FnMut(&[f64], &mut [f64]) -> f64 {
        move |x, g| {
            let mut v = 0.0;
            for i in 0..x.len() {
                g[i] = x[i] - target[i];
                v += 0.5 * g[i] * g[i];
            }
            v
        }
    }

    #[test]
    fn pseudo_gradient_examples() {
        assert_eq!(pseudo_gradient(&[0.0], &[0.5], 1.0), vec![0.0]);
        assert!((pseudo_gradient(&[2.0f64], &[0.1], 1.0)[0] - 1.1).abs() < 1e-15);
        assert_eq!(pseudo_gradient(&[0.0], &[-3.0], 1.0), vec![-2.0]);
        assert_eq!(pseudo_gradient(&[0.0], &[3.0], 1.0), vec![2.0]);
        assert_eq!(pseudo_gradient(&[-1.0], &[0.0], 1.0), vec![-1.0]);
    }

    #[test]
    fn unregularized_quadratic() {
        let r = minimize(quad(vec![1.0; 5]), vec![0.0; 5], &OwlqnConfig::default()).unwrap();
        assert!(r.converged);
        for v in r.x {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn soft_threshold_to_zero() {
        let cfg = OwlqnConfig { lambda: 2.0, ..Default::default() };
        let r = minimize(quad(vec![0.0]), vec![5.0], &cfg).unwrap();
        assert!(r.converged);
        assert_eq!(r.x[0].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn soft_threshold_shift() {
        let cfg = OwlqnConfig { lambda: 1.0, ..Default::default() };
        let r = minimize(quad(vec![3.0]), vec![0.0], &cfg).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-8);
        let r = minimize(quad(vec![-3.0]), vec![10.0], &cfg).unwrap();
        assert!((r.x[0] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn separable_lasso_matches_closed_form() {
        let target = vec![3.0, -0.5, 0.2, -4.0, 1.0, 0.0];
        let cfg = OwlqnConfig { lambda: 0.7, ..Default::default() };
        let r = minimize(quad(target.clone()), vec![0.0; 6], &cfg).unwrap();
        assert!(r.converged);
        for (x, t) in r.x.iter().zip(&target) {
            let want = t.signum() * (t.abs() - 0.7).max(0.0);
            if want == 0.0 {
                assert_eq!(*x, 0.0);
            } else {
                assert!((x - want).abs() < 1e-8, "{x} vs {want}");
            }
        }
    }

    #[test]
    fn objective_is_monotone() {
        // ill-conditioned coupled quadratic with an L1 term
        let a = [[10.0, 3.0, 0.0], [3.0, 2.0, 0.5], [0.0, 0.5, 1.0]];
        let b = [1.0, -2.0, 0.3];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..3 {
                let ax: f64 = (0..3).map(|j| a[i][j] * x[j]).sum();
                g[i] = ax - b[i];
                v += 0.5 * x[i] * ax - b[i] * x[i];
            }
            v
        };
        let cfg = OwlqnConfig { lambda: 0.4, ..Default::default() };
        let r = minimize(f, vec![2.0, 2.0, -2.0], &cfg).unwrap();
        assert!(r.converged);
        for w in r.log.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
    }

    #[test]
    fn matches_gradient_descent_without_l1() {
        let a = [[4.0, 1.0], [1.0, 3.0]];
        let b = [1.0, 2.0];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..2 {
                let ax: f64 = (0..2).map(|j| a[i][j] * x[j]).sum();
                g[i] = ax - b[i];
                v += 0.5 * x[i] * ax - b[i] * x[i];
            }
            v
        };
        let cfg = OwlqnConfig { grad_tol: 1e-10, ..Default::default() };
        let r = minimize(f, vec![0.0, 0.0], &cfg).unwrap();
        // reference: fixed-step gradient descent to convergence
        let mut x = [0.0f64, 0.0];
        for _ in 0..20_000 {
            let g: Vec<f64> = (0..2).map(|i| (0..2).map(|j| a[i][j] * x[j]).sum::<f64>() - b[i]).collect();
            for i in 0..2 {
                x[i] -= 0.1 * g[i];
            }
        }
        for i in 0..2 {
            assert!((r.x[i] - x[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            if x[0] < 0.0 { f64::NAN } else { x[0] }
        };
        let err = minimize(f, vec![1.0], &OwlqnConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn line_search_failure_returns_best() {
        // gradient claims descent, function never decreases
        let f = |_: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            0.0
        };
        let cfg = OwlqnConfig { max_line_search: 5, ..Default::default() };
        let r = minimize(f, vec![1.0], &cfg).unwrap();
        assert!(r.line_search_failed);
        assert_eq!(r.x, vec![1.0]);
    }

    #[test]
    fn stalled_progress_stops() {
        // f = sum x_i^4 converges slowly; a loose progress tolerance ends the run early
        let f = |x: &[f64], g: &mut [f64]| {
            for (gi, &xi) in g.iter_mut().zip(x) {
                *gi = 4.0 * xi.powi(3);
            }
            x.iter().map(|v| v.powi(4)).sum()
        };
        let strict = OwlqnConfig { grad_tol: 1e-300, rel_tol: 0.0, max_iter: 200, ..Default::default() };
        let loose = OwlqnConfig { grad_tol: 1e-300, rel_tol: 0.5, ..strict.clone() };
        let a = minimize(f, vec![1.0, -2.0], &strict).unwrap();
        let b = minimize(f, vec![1.0, -2.0], &loose).unwrap();
        assert!(b.converged);
        assert!(b.iterations < a.iterations);
        assert!(b.iterations > loose.progress_window);
    }

    #[test]
    fn invalid_config() {
        let cfg = OwlqnConfig::<f64> { memory: 0, ..Default::default() };
        assert!(minimize(quad(vec![0.0]), vec![1.0], &cfg).is_err());
        let cfg = OwlqnConfig::<f64> { lambda: -1.0, ..Default::default() };
        assert!(minimize(quad(vec![0.0]), vec![1.0], &cfg).is_err());
    }

    #[test]
    fn single_precision_works() {
        let cfg = OwlqnConfig::<f32> { lambda: 1.0, grad_tol: 1e-4, ..Default::default() };
        let f = |x: &[f32], g: &mut [f32]| {
            g[0] = x[0] - 3.0;
            0.5 * g[0] * g[0]
        };
        let r = minimize(f, vec![0.0f32], &cfg).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn log_csv_has_header() {
        let r = minimize(quad(vec![1.0, 2.0]), vec![0.0; 2], &OwlqnConfig::default()).unwrap();
        let mut buf = Vec::new();
        r.write_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,objective,pseudo_grad_norm,nonzero,step\n"));
        assert_eq!(text.lines().count(), r.log.len() + 1);
    }
}
