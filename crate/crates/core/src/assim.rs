//! Reduced-space variational history matching: cost, adjoint recursion,
//! gradient, steepest-descent inner loop, outer-loop rebuilds with a
//! chi-square acceptance band, and RML multi-background ensembles.
//!
//! With the scaled parameter basis the prior term collapses to
//! `0.5 * ||xi - xi_p||^2`, so everything runs in the reduced space. The
//! adjoint couples subdomains at a fixed time level through the transposed
//! neighbor blocks (neighbor states enter the forward step implicitly at
//! the new time level); each backward level therefore solves one dense
//! block system. The data term enters only at measurement levels, while
//! the adjoint propagates through every model step.

use crate::fom::{self, ObservationSet, ReservoirConfig, WellResponse};
use crate::geostat::KleModel;
use crate::rom::TrainingRun;
use crate::tpwl::{ReducedTrajectory, TpwlSystem};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// History-matching configuration.
#[derive(Debug, Clone)]
pub struct HmConfig {
    /// Prior mean in reduced coordinates (encode of beta_p).
    pub xi_prior: DVector<f64>,
    /// Multiplier on the prior term; 0 turns the regularization off.
    pub prior_weight: f64,
    /// Relative cost-change stopping threshold.
    pub eta_j: f64,
    /// Relative parameter-change stopping threshold.
    pub eta_xi: f64,
    /// Inner-iteration cap.
    pub n_max: usize,
    /// Outer-loop cap.
    pub outer_max: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Step-halving factor of the backtracking line search.
    pub backtrack: f64,
    pub alpha_init: f64,
    pub alpha_min: f64,
    /// Growth factor applied to the accepted step for the next trial.
    pub alpha_grow: f64,
    /// Cap on the first trial's step length in parameter units (the prior
    /// gives the coefficients unit scale).
    pub max_step: f64,
}

impl HmConfig {
    pub fn new(l_beta: usize) -> Self {
        Self {
            xi_prior: DVector::zeros(l_beta),
            prior_weight: 1.0,
            eta_j: 1e-4,
            eta_xi: 1e-3,
            n_max: 30,
            outer_max: 10,
            armijo_c: 1e-4,
            backtrack: 0.5,
            alpha_init: 1.0,
            alpha_min: 1e-16,
            alpha_grow: 2.0,
            max_step: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta_j", self.eta_j),
            ("eta_xi", self.eta_xi),
            ("armijo_c", self.armijo_c),
            ("alpha_init", self.alpha_init),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_max == 0 || self.outer_max == 0 {
            return Err(Error::Config("iteration caps must be at least 1".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::Config("backtrack factor must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Observations split by subdomain with inverse variances, aligned to the
/// system's measurement schedule.
#[derive(Debug, Clone)]
pub struct SubObs {
    /// `[meas index][subdomain]` observed data.
    pub obs: Vec<Vec<DVector<f64>>>,
    /// `[meas index][subdomain]` entrywise 1/sigma^2.
    pub r_inv: Vec<Vec<DVector<f64>>>,
    /// Full observed vectors per time, canonical entry order.
    pub full_obs: Vec<DVector<f64>>,
    pub full_r_inv: Vec<DVector<f64>>,
}

impl SubObs {
    pub fn new(system: &TpwlSystem, observations: &ObservationSet) -> Result<Self> {
        if observations.steps != system.meas_steps() {
            return Err(Error::Dimension(format!(
                "observation schedule {:?} does not match the system schedule {:?}",
                observations.steps,
                system.meas_steps()
            )));
        }
        if observations.n_data_per_time() != system.n_data_per_time() {
            return Err(Error::Dimension(
                "observation layout does not match the system well set".into(),
            ));
        }
        for sig in &observations.sigma {
            if sig.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(
                    "observation noise std must be strictly positive".into(),
                ));
            }
        }
        let entries = system.obs_entries();
        let mut obs = Vec::with_capacity(observations.n_times());
        let mut r_inv = Vec::with_capacity(observations.n_times());
        let mut full_obs = Vec::with_capacity(observations.n_times());
        let mut full_r_inv = Vec::with_capacity(observations.n_times());
        for t in 0..observations.n_times() {
            let v = &observations.values[t];
            let s = &observations.sigma[t];
            obs.push(
                entries
                    .iter()
                    .map(|idx| DVector::from_fn(idx.len(), |k, _| v[idx[k]]))
                    .collect(),
            );
            r_inv.push(
                entries
                    .iter()
                    .map(|idx| {
                        DVector::from_fn(idx.len(), |k, _| 1.0 / (s[idx[k]] * s[idx[k]]))
                    })
                    .collect(),
            );
            full_obs.push(v.clone());
            full_r_inv.push(s.map(|x| 1.0 / (x * x)));
        }
        Ok(Self {
            obs,
            r_inv,
            full_obs,
            full_r_inv,
        })
    }

    pub fn n_times(&self) -> usize {
        self.obs.len()
    }

    pub fn total_scalars(&self) -> usize {
        self.full_obs.iter().map(|v| v.len()).sum()
    }
}

/// Reduced cost of an already-computed reduced trajectory.
pub fn reduced_cost_of(
    traj: &ReducedTrajectory,
    xi: &DVector<f64>,
    subobs: &SubObs,
    cfg: &HmConfig,
) -> f64 {
    let dxi = xi - &cfg.xi_prior;
    let mut j = 0.5 * cfg.prior_weight * dxi.norm_squared();
    for (mi, per_sub) in traj.responses.iter().enumerate() {
        for (d, y) in per_sub.iter().enumerate() {
            let o = &subobs.obs[mi][d];
            let w = &subobs.r_inv[mi][d];
            for k in 0..y.len() {
                let r = o[k] - y[k];
                j += 0.5 * w[k] * r * r;
            }
        }
    }
    j
}

/// Forward-evaluate the reduced model and return its cost.
pub fn reduced_cost(
    xi: &DVector<f64>,
    system: &TpwlSystem,
    subobs: &SubObs,
    cfg: &HmConfig,
) -> Result<f64> {
    let traj = system.simulate_reduced(xi)?;
    Ok(reduced_cost_of(&traj, xi, subobs, cfg))
}

/// Adjoint variables per `[time level 1..=N][subdomain]`, stored with the
/// level-1 entry first.
pub type AdjointField = Vec<Vec<DVector<f64>>>;

/// Innovation `obs - predicted` per measurement index and subdomain.
fn innovations(
    traj: &ReducedTrajectory,
    subobs: &SubObs,
) -> Vec<Vec<DVector<f64>>> {
    traj.responses
        .iter()
        .enumerate()
        .map(|(mi, per_sub)| {
            per_sub
                .iter()
                .enumerate()
                .map(|(d, y)| &subobs.obs[mi][d] - y)
                .collect()
        })
        .collect()
}

/// Backward sweep of the subdomain-coupled adjoint recursion. Returns the
/// multipliers for time levels 1..=N.
pub fn adjoint_sweep(
    xi: &DVector<f64>,
    traj: &ReducedTrajectory,
    system: &TpwlSystem,
    subobs: &SubObs,
    _cfg: &HmConfig,
) -> Result<AdjointField> {
    let _ = xi;
    let s = system.layout().n_subdomains();
    let n_steps = system.n_steps();
    let innov = innovations(traj, subobs);
    let widths: Vec<usize> = (0..s).map(|d| system.basis().subs[d].l_state()).collect();
    let offsets: Vec<usize> = widths
        .iter()
        .scan(0, |acc, w| {
            let o = *acc;
            *acc += w;
            Some(o)
        })
        .collect();
    let total: usize = widths.iter().sum();

    let mut lambda: AdjointField = vec![vec![DVector::zeros(0); s]; n_steps];
    let mut next: Vec<DVector<f64>> = (0..s).map(|d| DVector::zeros(widths[d])).collect();

    for level in (1..=n_steps).rev() {
        // rhs = A^T R^-1 innovation (at measurement levels)
        //     + E_self(level+1)^T lambda(level+1).
        let mut rhs = DVector::zeros(total);
        let meas_idx = system.meas_steps().iter().position(|&m| m == level);
        for d in 0..s {
            let mut r = DVector::zeros(widths[d]);
            if let Some(mi) = meas_idx {
                if let Some(wm) = system.well_matrices(mi, d, traj.anchors[level - 1])? {
                    let weighted = subobs.r_inv[mi][d].component_mul(&innov[mi][d]);
                    r += wm.a_psi.transpose() * weighted;
                }
            }
            if level < n_steps {
                let m_next = system.step_matrices(level, d, traj.anchors[level])?;
                r += m_next.e_self.transpose() * &next[d];
            }
            rhs.rows_mut(offsets[d], widths[d]).copy_from(&r);
        }

        // Same-level coupling: lambda^{d} - sum_{d'} H_{d'd}^T lambda^{d'}
        // with H from the step that produced this level's states.
        let mut m = DMatrix::identity(total, total);
        for dprime in 0..s {
            let mats = system.step_matrices(level - 1, dprime, traj.anchors[level - 1])?;
            for (k, &d) in system.layout().neighbors(dprime).iter().enumerate() {
                let block = mats.e_neighbors[k].transpose();
                for r in 0..widths[d] {
                    for c in 0..widths[dprime] {
                        m[(offsets[d] + r, offsets[dprime] + c)] -= block[(r, c)];
                    }
                }
            }
        }
        let solved = m.lu().solve(&rhs).ok_or(Error::AdjointSingular {
            subdomain: s,
            step: level,
        })?;
        for d in 0..s {
            let lam = DVector::from_column_slice(
                solved.rows(offsets[d], widths[d]).as_slice(),
            );
            lambda[level - 1][d] = lam.clone();
            next[d] = lam;
        }
    }
    Ok(lambda)
}

/// Gradient of the reduced cost via the adjoint field.
pub fn reduced_gradient(
    xi: &DVector<f64>,
    traj: &ReducedTrajectory,
    lambda: &AdjointField,
    system: &TpwlSystem,
    subobs: &SubObs,
    cfg: &HmConfig,
) -> Result<DVector<f64>> {
    let s = system.layout().n_subdomains();
    let mut g = cfg.prior_weight * (xi - &cfg.xi_prior);
    let innov = innovations(traj, subobs);
    for (mi, &step) in system.meas_steps().iter().enumerate() {
        for d in 0..s {
            if let Some(wm) = system.well_matrices(mi, d, traj.anchors[step - 1])? {
                let weighted = subobs.r_inv[mi][d].component_mul(&innov[mi][d]);
                g -= wm.b_xi.transpose() * weighted;
            }
        }
    }
    for level in 1..=system.n_steps() {
        for d in 0..s {
            let mats = system.step_matrices(level - 1, d, traj.anchors[level - 1])?;
            g -= mats.g_xi.transpose() * &lambda[level - 1][d];
        }
    }
    Ok(g)
}

/// Why an inner minimization stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    CostChange,
    ParamChange,
    MaxIters,
    LineSearchFailed,
    /// A required cost/gradient evaluation could not be completed.
    EvaluationFailed,
}

/// Outcome of one steepest-descent inner loop.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub xi: DVector<f64>,
    /// Cost after each accepted iterate, starting with the initial cost.
    pub trace: Vec<f64>,
    pub stop: StopReason,
    /// Reduced-model evaluations spent (forward runs).
    pub n_evals: usize,
}

/// Steepest descent with a backtracking Armijo line search on the reduced
/// cost.
pub fn minimize_inner(
    xi0: &DVector<f64>,
    system: &TpwlSystem,
    subobs: &SubObs,
    cfg: &HmConfig,
) -> Result<InnerResult> {
    cfg.validate()?;
    let mut xi = xi0.clone();
    let mut traj = system.simulate_reduced(&xi)?;
    let mut j = reduced_cost_of(&traj, &xi, subobs, cfg);
    let mut trace = vec![j];
    let mut n_evals = 1;
    let mut alpha = cfg.alpha_init;
    let mut stop = StopReason::MaxIters;

    for _k in 0..cfg.n_max {
        let lambda = adjoint_sweep(&xi, &traj, system, subobs, cfg)?;
        let grad = reduced_gradient(&xi, &traj, &lambda, system, subobs, cfg)?;
        let g2 = grad.norm_squared();
        if g2 == 0.0 {
            stop = StopReason::ParamChange;
            break;
        }

        // Backtracking from the grown previous step, capped so the first
        // trial never moves any coefficient further than max_step.
        let mut accepted = None;
        let g_inf = grad.amax();
        let mut a = alpha.min(cfg.max_step / g_inf.max(1e-300));
        while a >= cfg.alpha_min {
            let xi_trial = &xi - a * &grad;
            match system.simulate_reduced(&xi_trial) {
                Ok(t) => {
                    n_evals += 1;
                    let j_trial = reduced_cost_of(&t, &xi_trial, subobs, cfg);
                    if j_trial <= j - cfg.armijo_c * a * g2 {
                        accepted = Some((xi_trial, t, j_trial, a));
                        break;
                    }
                }
                Err(Error::CouplingDiverged { .. }) => {
                    // Too-large step left the trust of the linearization;
                    // shrink like a failed Armijo trial.
                    n_evals += 1;
                }
                Err(e) => return Err(e),
            }
            a *= cfg.backtrack;
        }
        let Some((xi_new, traj_new, j_new, a_used)) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };

        let dj = (j_new - j).abs() / j_new.abs().max(1.0);
        let dxi = (&xi_new - &xi).norm() / xi_new.norm().max(1.0);
        xi = xi_new;
        traj = traj_new;
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
    Ok(InnerResult {
        xi,
        trace,
        stop,
        n_evals,
    })
}

/// Chi-square acceptance band for twice the full-order cost:
/// `n - 2 sqrt(2n) <= 2J <= n + 2 sqrt(2n)` with `n = N_d * N_0`.
pub fn eq_band(n_total: usize) -> (f64, f64) {
    let n = n_total as f64;
    let half_width = 2.0 * (2.0 * n).sqrt();
    (n - half_width, n + half_width)
}

/// Full-order cost: reduced prior term plus the weighted data misfit of
/// actual simulator responses.
pub fn true_cost(
    xi: &DVector<f64>,
    responses: &[WellResponse],
    fom_cfg: &ReservoirConfig,
    observations: &ObservationSet,
    cfg: &HmConfig,
) -> Result<f64> {
    let mut j = 0.5 * cfg.prior_weight * (xi - &cfg.xi_prior).norm_squared();
    for (mi, &step) in observations.steps.iter().enumerate() {
        let resp = responses
            .iter()
            .find(|r| r.step == step)
            .ok_or(Error::Unscheduled(step))?;
        let y = fom::response_to_data_vector(resp, fom_cfg);
        let o = &observations.values[mi];
        let s = &observations.sigma[mi];
        for k in 0..y.len() {
            let r = o[k] - y[k];
            j += 0.5 * r * r / (s[k] * s[k]);
        }
    }
    Ok(j)
}

/// One outer loop of the history match.
#[derive(Debug, Clone)]
pub struct OuterRecord {
    pub inner: InnerResult,
    /// Full-order cost at the inner minimizer.
    pub true_cost: f64,
    pub accepted: bool,
}

/// Final state of a history match.
#[derive(Debug, Clone)]
pub struct HmResult {
    pub xi: DVector<f64>,
    pub outers: Vec<OuterRecord>,
    /// Full-order simulations spent inside the match (one per outer loop;
    /// each doubles as the rebuild trajectory when the loop continues).
    pub fom_runs: usize,
    pub accepted: bool,
    pub band: (f64, f64),
    /// Responses of the final accepted (or last) full-order run.
    pub final_responses: Vec<WellResponse>,
}

/// Adjoint-based history matching with outer-loop rebuilds: minimize on
/// the reduced model, evaluate the true cost with one full-order run, and
/// either accept (cost at or below the chi-square band ceiling) or feed
/// that same run back into the reduced model as a new interpolation
/// point.
pub fn history_match(
    xi0: &DVector<f64>,
    fom_cfg: &ReservoirConfig,
    kle: &KleModel,
    system: TpwlSystem,
    observations: &ObservationSet,
    cfg: &HmConfig,
) -> Result<HmResult> {
    cfg.validate()?;
    let mut system = system;
    let mut subobs = SubObs::new(&system, observations)?;
    let band = eq_band(observations.total_scalars());
    let mut xi = xi0.clone();
    let mut outers = Vec::new();
    let mut fom_runs = 0;
    let mut final_responses = Vec::new();
    let mut accepted = false;

    for outer in 0..cfg.outer_max {
        let inner = minimize_inner(&xi, &system, &subobs, cfg)?;
        xi = inner.xi.clone();

        let field = kle.decode(&xi);
        let sim = fom::simulate(fom_cfg, &field)
            .map_err(|e| e.in_stage(&format!("outer loop {} acceptance run", outer + 1)))?;
        fom_runs += 1;
        let j_true = true_cost(&xi, &sim.responses, fom_cfg, observations, cfg)?;
        let ok = 2.0 * j_true <= band.1;
        outers.push(OuterRecord {
            inner,
            true_cost: j_true,
            accepted: ok,
        });
        final_responses = sim.responses.clone();
        if ok {
            accepted = true;
            break;
        }
        if outer + 1 == cfg.outer_max {
            break;
        }
        // The acceptance run doubles as the new interpolation point.
        let run = TrainingRun {
            xi: xi.clone(),
            sim,
        };
        match system.rebuild_with(fom_cfg, &run) {
            Ok(s) => {
                system = s;
                subobs = SubObs::new(&system, observations)?;
            }
            Err(Error::DuplicateCenter(_)) => {
                // The minimizer landed on an existing training point; a
                // rebuild would change nothing.
                break;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(HmResult {
        xi,
        outers,
        fom_runs,
        accepted,
        band,
        final_responses,
    })
}

/// Randomized-maximum-likelihood ensemble: repeat the inner minimization
/// for several background parameter sets against the shared reduced model,
/// with no further full-order runs.
pub fn rml_ensemble(
    backgrounds: &[(DVector<f64>, DVector<f64>)],
    system: &TpwlSystem,
    observations: &ObservationSet,
    cfg: &HmConfig,
) -> Result<Vec<InnerResult>> {
    let subobs = SubObs::new(system, observations)?;
    backgrounds
        .par_iter()
        .map(|(xi0, xi_prior)| {
            let mut member_cfg = cfg.clone();
            member_cfg.xi_prior = xi_prior.clone();
            minimize_inner(xi0, system, &subobs, &member_cfg)
        })
        .collect()
}
