//! Finite-difference baseline: steepest descent on the full-order cost
//! with one-sided FD gradients, sharing the reduced method's stopping
//! rules. Each gradient costs one full-order run per parameter.

use crate::assim::{HmConfig, StopReason};
use crate::Result;
use nalgebra::DVector;

/// Evaluation counters of the baseline, split by purpose.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct FdCounters {
    pub initial: usize,
    pub gradient: usize,
    pub line_search: usize,
}

impl FdCounters {
    pub fn total(&self) -> usize {
        self.initial + self.gradient + self.line_search
    }
}

#[derive(Debug, Clone)]
pub struct FdResult {
    pub xi: DVector<f64>,
    /// Cost after each accepted iterate, starting from the initial cost.
    pub trace: Vec<f64>,
    pub stop: StopReason,
    pub counters: FdCounters,
    pub iterations: usize,
}

/// Minimize `cost` by steepest descent with one-sided finite-difference
/// gradients and a backtracking line search. The cost closure counts as
/// one full-order evaluation per call.
pub fn fd_minimize(
    cost: &mut dyn FnMut(&DVector<f64>) -> Result<f64>,
    xi0: &DVector<f64>,
    fd_step: f64,
    cfg: &HmConfig,
) -> Result<FdResult> {
    cfg.validate()?;
    let l = xi0.len();
    let mut counters = FdCounters::default();
    let mut xi = xi0.clone();
    let mut j = cost(&xi)?;
    counters.initial = 1;
    let mut trace = vec![j];
    let mut alpha = cfg.alpha_init;
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;

    for _k in 0..cfg.n_max {
        // One-sided gradient: l extra evaluations (the base cost is known).
        // An unevaluable perturbation ends the minimization gracefully:
        // the method has walked somewhere the simulator cannot follow.
        let mut grad = DVector::zeros(l);
        let mut grad_failed = false;
        for p in 0..l {
            let mut xp = xi.clone();
            xp[p] += fd_step;
            match cost(&xp) {
                Ok(jp) => {
                    counters.gradient += 1;
                    grad[p] = (jp - j) / fd_step;
                }
                Err(_) => {
                    counters.gradient += 1;
                    grad_failed = true;
                    break;
                }
            }
        }
        if grad_failed {
            stop = StopReason::EvaluationFailed;
            break;
        }
        iterations += 1;
        let g2 = grad.norm_squared();
        if g2 == 0.0 {
            stop = StopReason::ParamChange;
            break;
        }

        let mut accepted = None;
        let g_inf = grad.amax();
        let mut a = alpha.min(cfg.max_step / g_inf.max(1e-300));
        while a >= cfg.alpha_min {
            let xt = &xi - a * &grad;
            // A trial the simulator cannot evaluate (e.g. a step into
            // absurd permeabilities) is rejected like any other failed
            // Armijo trial.
            match cost(&xt) {
                Ok(jt) => {
                    counters.line_search += 1;
                    if jt.is_finite() && jt <= j - cfg.armijo_c * a * g2 {
                        accepted = Some((xt, jt, a));
                        break;
                    }
                }
                Err(_) => {
                    counters.line_search += 1;
                }
            }
            a *= cfg.backtrack;
        }
        let Some((xi_new, j_new, a_used)) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        let dj = (j_new - j).abs() / j_new.abs().max(1.0);
        let dxi = (&xi_new - &xi).norm() / xi_new.norm().max(1.0);
        xi = xi_new;
        j = j_new;
        trace.push(j);
        alpha = (a_used * cfg.alpha_grow).min(1e6);
        if dj < cfg.eta_j {
            stop = StopReason::CostChange;
            break;
        }
        if dxi < cfg.eta_xi {
            stop = StopReason::ParamChange;
            break;
        }
    }
    Ok(FdResult {
        xi,
        trace,
        stop,
        counters,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_to_quadratic_minimizer() {
        // f(x) = 0.5 (x - c)^T D (x - c), minimizer c known in closed form.
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let d = DVector::from_vec(vec![2.0, 1.0, 4.0]);
        let mut evals = 0usize;
        let mut cost = |x: &DVector<f64>| -> Result<f64> {
            evals += 1;
            let r = x - &c;
            Ok(0.5 * r.component_mul(&d).dot(&r))
        };
        let mut cfg = HmConfig::new(3);
        cfg.n_max = 200;
        cfg.eta_j = 1e-12;
        cfg.eta_xi = 1e-10;
        let res = fd_minimize(&mut cost, &DVector::zeros(3), 1e-7, &cfg).unwrap();
        assert!((res.xi - &c).amax() < 1e-4, "did not reach the minimizer");
        assert_eq!(res.counters.total(), evals);
        for w in res.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn gradient_costs_one_run_per_parameter() {
        let mut cost = |x: &DVector<f64>| -> Result<f64> { Ok(x.norm_squared()) };
        let mut cfg = HmConfig::new(18);
        cfg.n_max = 1;
        let res = fd_minimize(&mut cost, &DVector::from_element(18, 1.0), 1e-6, &cfg).unwrap();
        // 1 initial + 18 gradient + line-search trials.
        assert_eq!(res.counters.initial, 1);
        assert_eq!(res.counters.gradient, 18);
        assert!(res.counters.line_search >= 1);
        assert_eq!(res.iterations, 1);
    }
}
