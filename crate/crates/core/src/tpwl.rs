//! Piecewise-linear reduced model: offline assembly from training
//! trajectories via per-subdomain RBF interpolants, and iterative online
//! evaluation with red-black coupling sweeps.
//!
//! Offline, one interpolant per (subdomain, timestep) maps
//! `(psi^{d,n}, psi^{sd,n+1}, xi) -> psi^{d,n+1}` and one per
//! (subdomain, measurement time) maps `(psi^{d,m}, xi) -> y^{d,m}`.
//! Differentiating the interpolants at a training center yields the
//! derivative matrices of the linearized step and well equations. Online,
//! each step linearizes around the closest training trajectory and solves
//! the neighbor coupling by damped Gauss-Seidel sweeps over the subdomain
//! colors; within one color the updates only read the other color, so the
//! sweep is computed into a buffer and is order-independent by
//! construction.

use crate::fom::{response_to_data_vector, ReservoirConfig};
use crate::rbf::{self, Kernel, KernelKind, RbfModel};
use crate::rom::{PodBasis, SubdomainLayout, TrainingRun};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, RwLock};

/// Knobs of the offline fit and the online coupling iteration.
#[derive(Debug, Clone)]
pub struct TpwlConfig {
    pub kernel: KernelKind,
    /// Tune the shape parameter by leave-one-out error over the candidate
    /// grid; otherwise use the mean nearest-neighbor distance directly.
    pub tune_shape: bool,
    /// Shape candidates as multiples of the mean nearest-neighbor center
    /// distance.
    pub shape_multipliers: Vec<f64>,
    /// Multiplier applied to the mean nearest-neighbor distance when shape
    /// tuning is off.
    pub fixed_shape_multiplier: f64,
    /// Convergence tolerance of the online coupling iteration (max
    /// relative state change across subdomains).
    pub inner_tol: f64,
    pub max_coupling_iters: usize,
    pub damping: f64,
    /// Retry damping when the undamped iteration fails to converge.
    pub fallback_damping: f64,
    /// Weight of the state block in the closeness metric; the parameter
    /// block has weight 1. `None` uses 1 / (total reduced state dim).
    pub psi_weight: Option<f64>,
}

impl Default for TpwlConfig {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Multiquadric,
            tune_shape: true,
            shape_multipliers: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            fixed_shape_multiplier: 1.0,
            inner_tol: 1e-8,
            max_coupling_iters: 50,
            damping: 1.0,
            fallback_damping: 0.5,
            psi_weight: None,
        }
    }
}

/// One reduced training trajectory: parameters, per-time per-subdomain
/// reduced states, and per-measurement-time per-subdomain well data.
#[derive(Debug, Clone)]
pub struct TrainingTrajectory {
    pub xi: DVector<f64>,
    /// `[0..=n_steps][subdomain]`.
    pub psi: Vec<Vec<DVector<f64>>>,
    /// `[meas index][subdomain]`; empty vector where a subdomain has no
    /// wells.
    pub well: Vec<Vec<DVector<f64>>>,
}

/// Derivative matrices of one linearized step equation at one anchor.
#[derive(Debug, Clone)]
pub struct StepMatrices {
    /// d psi^{d,n+1} / d psi^{d,n}.
    pub e_self: DMatrix<f64>,
    /// One block per neighbor (ascending neighbor id):
    /// d psi^{d,n+1} / d psi^{d',n+1}.
    pub e_neighbors: Vec<DMatrix<f64>>,
    /// d psi^{d,n+1} / d xi.
    pub g_xi: DMatrix<f64>,
}

/// Derivative matrices of one linearized well equation at one anchor.
#[derive(Debug, Clone)]
pub struct WellMatrices {
    /// d y^{d,m} / d psi^{d,m}.
    pub a_psi: DMatrix<f64>,
    /// d y^{d,m} / d xi.
    pub b_xi: DMatrix<f64>,
}

/// Output of one online reduced simulation.
#[derive(Debug, Clone)]
pub struct ReducedTrajectory {
    /// `[0..=n_steps][subdomain]`.
    pub psi: Vec<Vec<DVector<f64>>>,
    /// Anchor trajectory index used for each step `n -> n+1` (length
    /// n_steps).
    pub anchors: Vec<usize>,
    /// `[meas index][subdomain]` predicted well data.
    pub responses: Vec<Vec<DVector<f64>>>,
    /// Coupling iterations spent per step.
    pub coupling_iters: Vec<usize>,
    /// Damping factor the converged attempt used, per step.
    pub damping_used: Vec<f64>,
}

/// Weighted squared distance between a query `(psi, xi)` and the stored
/// trajectories at a fixed timestep; returns the argmin trajectory and the
/// timestep back. Ties break to the lowest index.
pub fn select_training(
    psi: &[DVector<f64>],
    xi: &DVector<f64>,
    trajectories: &[TrainingTrajectory],
    step: usize,
    psi_weight: f64,
) -> (usize, usize) {
    assert!(!trajectories.is_empty(), "no training trajectories");
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, tr) in trajectories.iter().enumerate() {
        let mut d = (xi - &tr.xi).norm_squared();
        for (q, t) in psi.iter().zip(&tr.psi[step]) {
            d += psi_weight * (q - t).norm_squared();
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, step)
}

/// Input layout of the state interpolant of one subdomain.
#[derive(Debug, Clone)]
struct StateInputLayout {
    self_range: Range<usize>,
    /// Per neighbor (ascending id), the block of its reduced state.
    neighbor_ranges: Vec<Range<usize>>,
    xi_range: Range<usize>,
}

fn state_input_layout(
    d: usize,
    layout: &SubdomainLayout,
    basis: &PodBasis,
    l_beta: usize,
) -> StateInputLayout {
    let l_d = basis.subs[d].l_state();
    let mut offset = l_d;
    let mut neighbor_ranges = Vec::new();
    for &nb in layout.neighbors(d) {
        let l_nb = basis.subs[nb].l_state();
        neighbor_ranges.push(offset..offset + l_nb);
        offset += l_nb;
    }
    StateInputLayout {
        self_range: 0..l_d,
        neighbor_ranges,
        xi_range: offset..offset + l_beta,
    }
}

/// Fit one interpolant, tuning the shape by LOO if configured, backing off
/// toward smaller shapes if the tuned one is too ill-conditioned to fit.
fn fit_model(
    centers: DMatrix<f64>,
    values: DMatrix<f64>,
    tcfg: &TpwlConfig,
    context: &str,
) -> Result<RbfModel> {
    let base = rbf::mean_nearest_distance(&centers);
    let candidates: Vec<f64> = tcfg.shape_multipliers.iter().map(|m| m * base).collect();
    let mut shape = if tcfg.tune_shape && centers.nrows() >= 3 {
        rbf::tune_shape(&centers, &values, tcfg.kernel, &candidates)?
    } else {
        tcfg.fixed_shape_multiplier * base
    };
    for _ in 0..12 {
        match RbfModel::fit(
            centers.clone(),
            values.clone(),
            Kernel::new(tcfg.kernel, shape)?,
        ) {
            Ok(m) => return Ok(m),
            Err(Error::IllConditioned { .. }) => shape *= 0.5,
            Err(e) => {
                return Err(match e {
                    Error::DuplicateCenter(msg) => {
                        Error::DuplicateCenter(format!("{context}: {msg}"))
                    }
                    other => other,
                })
            }
        }
    }
    Err(Error::IllConditioned {
        cond: f64::INFINITY,
        context: context.to_string(),
    })
}

/// The assembled subdomain POD-TPWL system.
pub struct TpwlSystem {
    layout: SubdomainLayout,
    basis: PodBasis,
    tcfg: TpwlConfig,
    n_steps: usize,
    meas_steps: Vec<usize>,
    n_data_per_time: usize,
    /// Global data-entry indices owned by each subdomain.
    obs_entries: Vec<Vec<usize>>,
    trajectories: Vec<TrainingTrajectory>,
    input_layouts: Vec<StateInputLayout>,
    /// `[n][d]`, step interpolant producing `psi^{d,n+1}`.
    state_models: Vec<Vec<RbfModel>>,
    /// `[meas index][d]`.
    well_models: Vec<Vec<Option<RbfModel>>>,
    psi_weight: f64,
    l_beta: usize,
    /// Worst kernel-matrix condition estimate across all fits.
    pub max_condition: f64,
    step_cache: RwLock<HashMap<(usize, usize, usize), Arc<StepMatrices>>>,
    well_cache: RwLock<HashMap<(usize, usize, usize), Arc<WellMatrices>>>,
}

impl Clone for TpwlSystem {
    fn clone(&self) -> Self {
        Self {
            layout: self.layout.clone(),
            basis: self.basis.clone(),
            tcfg: self.tcfg.clone(),
            n_steps: self.n_steps,
            meas_steps: self.meas_steps.clone(),
            n_data_per_time: self.n_data_per_time,
            obs_entries: self.obs_entries.clone(),
            trajectories: self.trajectories.clone(),
            input_layouts: self.input_layouts.clone(),
            state_models: self.state_models.clone(),
            well_models: self.well_models.clone(),
            psi_weight: self.psi_weight,
            l_beta: self.l_beta,
            max_condition: self.max_condition,
            step_cache: RwLock::new(HashMap::new()),
            well_cache: RwLock::new(HashMap::new()),
        }
    }
}

impl std::fmt::Debug for TpwlSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TpwlSystem")
            .field("n_subdomains", &self.layout.n_subdomains())
            .field("n_trajectories", &self.trajectories.len())
            .field("n_steps", &self.n_steps)
            .field("l_beta", &self.l_beta)
            .finish()
    }
}

/// Which data entries of the canonical observation vector belong to each
/// subdomain (by the perforated cell).
pub fn subdomain_obs_entries(cfg: &ReservoirConfig, layout: &SubdomainLayout) -> Vec<Vec<usize>> {
    let mut kinds_cells = Vec::new();
    for w in cfg.injector_indices() {
        kinds_cells.push(cfg.wells[w].cell);
    }
    for w in cfg.producer_indices() {
        kinds_cells.push(cfg.wells[w].cell);
    }
    for w in cfg.producer_indices() {
        kinds_cells.push(cfg.wells[w].cell);
    }
    let mut entries = vec![Vec::new(); layout.n_subdomains()];
    for (idx, &cell) in kinds_cells.iter().enumerate() {
        entries[layout.subdomain_of(cell)].push(idx);
    }
    entries
}

fn reduce_run_to_trajectory(
    cfg: &ReservoirConfig,
    layout: &SubdomainLayout,
    basis: &PodBasis,
    obs_entries: &[Vec<usize>],
    meas_steps: &[usize],
    run: &TrainingRun,
) -> TrainingTrajectory {
    let psi = crate::rom::reduce_trajectory(&run.sim, basis, layout);
    let mut well = Vec::with_capacity(meas_steps.len());
    for &step in meas_steps {
        let resp = &run.sim.responses[step - 1];
        debug_assert_eq!(resp.step, step);
        let full = response_to_data_vector(resp, cfg);
        let per_sub: Vec<DVector<f64>> = obs_entries
            .iter()
            .map(|idx| DVector::from_fn(idx.len(), |k, _| full[idx[k]]))
            .collect();
        well.push(per_sub);
    }
    TrainingTrajectory {
        xi: run.xi.clone(),
        psi,
        well,
    }
}

impl TpwlSystem {
    /// Offline stage: reduce the training runs, then fit one interpolant
    /// per (subdomain, timestep) and per (subdomain, measurement time).
    pub fn build(
        cfg: &ReservoirConfig,
        layout: SubdomainLayout,
        basis: PodBasis,
        runs: &[TrainingRun],
        tcfg: TpwlConfig,
    ) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Degenerate("tpwl build needs training runs".into()));
        }
        let l_beta = runs[0].xi.len();
        let n_steps = cfg.n_steps;
        let meas_steps = cfg.meas_schedule();
        let obs_entries = subdomain_obs_entries(cfg, &layout);
        let trajectories: Vec<TrainingTrajectory> = runs
            .par_iter()
            .map(|run| {
                reduce_run_to_trajectory(cfg, &layout, &basis, &obs_entries, &meas_steps, run)
            })
            .collect();
        let psi_weight = tcfg
            .psi_weight
            .unwrap_or(1.0 / basis.total_state_dim().max(1) as f64);
        let input_layouts: Vec<StateInputLayout> = (0..layout.n_subdomains())
            .map(|d| state_input_layout(d, &layout, &basis, l_beta))
            .collect();

        let mut sys = Self {
            n_data_per_time: cfg.n_data_per_time(),
            layout,
            basis,
            tcfg,
            n_steps,
            meas_steps,
            obs_entries,
            trajectories,
            input_layouts,
            state_models: Vec::new(),
            well_models: Vec::new(),
            psi_weight,
            l_beta,
            max_condition: 0.0,
            step_cache: RwLock::new(HashMap::new()),
            well_cache: RwLock::new(HashMap::new()),
        };
        sys.fit_all()?;
        Ok(sys)
    }

    fn state_center_row(&self, tr: &TrainingTrajectory, d: usize, n: usize) -> Vec<f64> {
        let mut row = Vec::new();
        row.extend(tr.psi[n][d].iter());
        for &nb in self.layout.neighbors(d) {
            row.extend(tr.psi[n + 1][nb].iter());
        }
        row.extend(tr.xi.iter());
        row
    }

    fn fit_all(&mut self) -> Result<()> {
        let m = self.trajectories.len();
        let s = self.layout.n_subdomains();

        let state_models: Vec<Vec<RbfModel>> = (0..self.n_steps)
            .into_par_iter()
            .map(|n| {
                (0..s)
                    .map(|d| {
                        let dim = self.input_layouts[d].xi_range.end;
                        let out_dim = self.basis.subs[d].l_state();
                        let mut centers = DMatrix::zeros(m, dim);
                        let mut values = DMatrix::zeros(m, out_dim);
                        for (j, tr) in self.trajectories.iter().enumerate() {
                            let row = self.state_center_row(tr, d, n);
                            for (k, v) in row.iter().enumerate() {
                                centers[(j, k)] = *v;
                            }
                            for k in 0..out_dim {
                                values[(j, k)] = tr.psi[n + 1][d][k];
                            }
                        }
                        fit_model(
                            centers,
                            values,
                            &self.tcfg,
                            &format!("state model (subdomain {d}, step {n})"),
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let well_models: Vec<Vec<Option<RbfModel>>> = (0..self.meas_steps.len())
            .into_par_iter()
            .map(|mi| {
                let step = self.meas_steps[mi];
                (0..s)
                    .map(|d| {
                        if self.obs_entries[d].is_empty() {
                            return Ok(None);
                        }
                        let l_d = self.basis.subs[d].l_state();
                        let dim = l_d + self.l_beta;
                        let out_dim = self.obs_entries[d].len();
                        let mut centers = DMatrix::zeros(m, dim);
                        let mut values = DMatrix::zeros(m, out_dim);
                        for (j, tr) in self.trajectories.iter().enumerate() {
                            for k in 0..l_d {
                                centers[(j, k)] = tr.psi[step][d][k];
                            }
                            for k in 0..self.l_beta {
                                centers[(j, l_d + k)] = tr.xi[k];
                            }
                            for k in 0..out_dim {
                                values[(j, k)] = tr.well[mi][d][k];
                            }
                        }
                        fit_model(
                            centers,
                            values,
                            &self.tcfg,
                            &format!("well model (subdomain {d}, step {step})"),
                        )
                        .map(Some)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let mut max_cond = 0.0f64;
        for row in &state_models {
            for model in row {
                max_cond = max_cond.max(model.condition());
            }
        }
        for row in &well_models {
            for model in row.iter().flatten() {
                max_cond = max_cond.max(model.condition());
            }
        }
        self.state_models = state_models;
        self.well_models = well_models;
        self.max_condition = max_cond;
        self.step_cache = RwLock::new(HashMap::new());
        self.well_cache = RwLock::new(HashMap::new());
        Ok(())
    }

    /// Append one training run as a new interpolation center and refit;
    /// the new trajectory becomes a valid linearization anchor.
    pub fn rebuild_with(&self, cfg: &ReservoirConfig, run: &TrainingRun) -> Result<Self> {
        let mut diameter = 0.0f64;
        for i in 0..self.trajectories.len() {
            for j in (i + 1)..self.trajectories.len() {
                diameter =
                    diameter.max((&self.trajectories[i].xi - &self.trajectories[j].xi).norm());
            }
        }
        for tr in &self.trajectories {
            let dist = (&tr.xi - &run.xi).norm();
            if dist <= 1e-10 * diameter.max(f64::MIN_POSITIVE) {
                return Err(Error::DuplicateCenter(format!(
                    "rebuild point lies {dist:.3e} from an existing trajectory"
                )));
            }
        }
        let new_tr = reduce_run_to_trajectory(
            cfg,
            &self.layout,
            &self.basis,
            &self.obs_entries,
            &self.meas_steps,
            run,
        );
        let mut sys = Self {
            layout: self.layout.clone(),
            basis: self.basis.clone(),
            tcfg: self.tcfg.clone(),
            n_steps: self.n_steps,
            meas_steps: self.meas_steps.clone(),
            n_data_per_time: self.n_data_per_time,
            obs_entries: self.obs_entries.clone(),
            trajectories: {
                let mut t = self.trajectories.clone();
                t.push(new_tr);
                t
            },
            input_layouts: self.input_layouts.clone(),
            state_models: Vec::new(),
            well_models: Vec::new(),
            psi_weight: self.psi_weight,
            l_beta: self.l_beta,
            max_condition: 0.0,
            step_cache: RwLock::new(HashMap::new()),
            well_cache: RwLock::new(HashMap::new()),
        };
        sys.fit_all()?;
        Ok(sys)
    }

    /// Tighten or relax the online coupling iteration. Gradient
    /// validation needs the forward states converged well below the
    /// finite-difference resolution, since the adjoint transposes the
    /// exactly-coupled equations.
    pub fn set_coupling_tolerance(&mut self, tol: f64, max_iters: usize) {
        self.tcfg.inner_tol = tol;
        self.tcfg.max_coupling_iters = max_iters;
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn trajectory(&self, i: usize) -> &TrainingTrajectory {
        &self.trajectories[i]
    }

    pub fn trajectories(&self) -> &[TrainingTrajectory] {
        &self.trajectories
    }

    pub fn layout(&self) -> &SubdomainLayout {
        &self.layout
    }

    pub fn basis(&self) -> &PodBasis {
        &self.basis
    }

    pub fn l_beta(&self) -> usize {
        self.l_beta
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn meas_steps(&self) -> &[usize] {
        &self.meas_steps
    }

    pub fn n_data_per_time(&self) -> usize {
        self.n_data_per_time
    }

    pub fn obs_entries(&self) -> &[Vec<usize>] {
        &self.obs_entries
    }

    /// Scatter per-subdomain data vectors into the canonical full vector.
    pub fn assemble_full_data(&self, per_sub: &[DVector<f64>]) -> DVector<f64> {
        let mut full = DVector::zeros(self.n_data_per_time);
        for (d, entries) in self.obs_entries.iter().enumerate() {
            for (k, &idx) in entries.iter().enumerate() {
                full[idx] = per_sub[d][k];
            }
        }
        full
    }

    /// Closest training trajectory to the query at the given time level.
    pub fn select_anchor(&self, psi: &[DVector<f64>], xi: &DVector<f64>, step: usize) -> usize {
        select_training(psi, xi, &self.trajectories, step, self.psi_weight).0
    }

    /// Derivative matrices of the step equation `(d, n -> n+1)` linearized
    /// at training center `anchor`, cached per (n, d, anchor).
    pub fn step_matrices(&self, n: usize, d: usize, anchor: usize) -> Result<Arc<StepMatrices>> {
        let key = (n, d, anchor);
        if let Some(hit) = self.step_cache.read().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let model = &self.state_models[n][d];
        let full = model.grad_at_center(anchor)?;
        let lay = &self.input_layouts[d];
        let slice =
            |r: &Range<usize>| -> DMatrix<f64> { full.columns(r.start, r.end - r.start).into() };
        let mats = Arc::new(StepMatrices {
            e_self: slice(&lay.self_range),
            e_neighbors: lay.neighbor_ranges.iter().map(&slice).collect(),
            g_xi: slice(&lay.xi_range),
        });
        self.step_cache.write().unwrap().insert(key, mats.clone());
        Ok(mats)
    }

    /// Derivative matrices of the well equation at measurement index `mi`
    /// for subdomain `d`, linearized at `anchor`.
    pub fn well_matrices(
        &self,
        mi: usize,
        d: usize,
        anchor: usize,
    ) -> Result<Option<Arc<WellMatrices>>> {
        let Some(model) = self.well_models[mi][d].as_ref() else {
            return Ok(None);
        };
        let key = (mi, d, anchor);
        if let Some(hit) = self.well_cache.read().unwrap().get(&key) {
            return Ok(Some(hit.clone()));
        }
        let full = model.grad_at_center(anchor)?;
        let l_d = self.basis.subs[d].l_state();
        let mats = Arc::new(WellMatrices {
            a_psi: full.columns(0, l_d).into(),
            b_xi: full.columns(l_d, self.l_beta).into(),
        });
        self.well_cache.write().unwrap().insert(key, mats.clone());
        Ok(Some(mats))
    }

    /// Online stage with free anchor selection.
    pub fn simulate_reduced(&self, xi: &DVector<f64>) -> Result<ReducedTrajectory> {
        self.simulate_reduced_impl(xi, None)
    }

    /// Online stage with a frozen anchor schedule (one anchor per step);
    /// used when validating gradients, where anchor switches would make the
    /// cost only piecewise smooth.
    pub fn simulate_reduced_frozen(
        &self,
        xi: &DVector<f64>,
        anchors: &[usize],
    ) -> Result<ReducedTrajectory> {
        assert_eq!(anchors.len(), self.n_steps, "anchor schedule length");
        self.simulate_reduced_impl(xi, Some(anchors))
    }

    fn simulate_reduced_impl(
        &self,
        xi: &DVector<f64>,
        frozen: Option<&[usize]>,
    ) -> Result<ReducedTrajectory> {
        if xi.len() != self.l_beta {
            return Err(Error::Dimension(format!(
                "xi has {} entries, expected {}",
                xi.len(),
                self.l_beta
            )));
        }
        let s = self.layout.n_subdomains();
        let classes = self.layout.color_classes();
        let mut psi: Vec<Vec<DVector<f64>>> = Vec::with_capacity(self.n_steps + 1);
        psi.push(self.trajectories[0].psi[0].clone());
        let mut anchors = Vec::with_capacity(self.n_steps);
        let mut coupling_iters = Vec::with_capacity(self.n_steps);
        let mut damping_used = Vec::with_capacity(self.n_steps);
        let mut responses = Vec::new();

        for n in 0..self.n_steps {
            let anchor = match frozen {
                Some(a) => a[n],
                None => self.select_anchor(&psi[n], xi, n),
            };
            let tr = &self.trajectories[anchor];
            let dxi = xi - &tr.xi;

            // Constant part per subdomain: anchor + self-term + parameter
            // term; only the neighbor increment changes between sweeps.
            let mut base = Vec::with_capacity(s);
            let mut mats = Vec::with_capacity(s);
            for d in 0..s {
                let m = self.step_matrices(n, d, anchor)?;
                let b = &tr.psi[n + 1][d]
                    + &m.e_self * (&psi[n][d] - &tr.psi[n][d])
                    + &m.g_xi * &dxi;
                base.push(b);
                mats.push(m);
            }

            let no_neighbors = (0..s).all(|d| self.layout.neighbors(d).is_empty());
            let mut attempt_damping = self.tcfg.damping;
            let mut cur: Vec<DVector<f64>>;
            let mut iters_used = 0;
            let mut last_residual = 0.0;
            let mut result: Option<Vec<DVector<f64>>> = None;
            for attempt in 0..2 {
                cur = (0..s).map(|d| tr.psi[n + 1][d].clone()).collect();
                if no_neighbors {
                    result = Some(base.clone());
                    iters_used = 1;
                    break;
                }
                let mut converged = false;
                // The damped retry converges more slowly; give it room.
                let iter_cap = if attempt == 0 {
                    self.tcfg.max_coupling_iters
                } else {
                    10 * self.tcfg.max_coupling_iters
                };
                let mut iters = 0;
                while iters < iter_cap {
                    let mut change = 0.0f64;
                    for class in &classes {
                        // Buffer the updates of one color: they only read
                        // the other color, so evaluation order within the
                        // class cannot matter.
                        let updates: Vec<(usize, DVector<f64>)> = class
                            .iter()
                            .map(|&d| {
                                let mut v = base[d].clone();
                                for (k, &nb) in self.layout.neighbors(d).iter().enumerate() {
                                    v += &mats[d].e_neighbors[k]
                                        * (&cur[nb] - &tr.psi[n + 1][nb]);
                                }
                                if attempt_damping < 1.0 {
                                    v = attempt_damping * v + (1.0 - attempt_damping) * &cur[d];
                                }
                                (d, v)
                            })
                            .collect();
                        for (d, v) in updates {
                            let delta = (&v - &cur[d]).norm() / (1.0 + v.norm());
                            change = change.max(delta);
                            cur[d] = v;
                        }
                    }
                    iters += 1;
                    last_residual = change;
                    if change < self.tcfg.inner_tol {
                        converged = true;
                        break;
                    }
                }
                iters_used = iters;
                if converged {
                    result = Some(cur);
                    break;
                }
                if attempt == 0 {
                    attempt_damping = self.tcfg.fallback_damping;
                }
            }
            let Some(cur) = result else {
                return Err(Error::CouplingDiverged {
                    step: n + 1,
                    residual: last_residual,
                });
            };
            anchors.push(anchor);
            coupling_iters.push(iters_used);
            damping_used.push(attempt_damping);
            psi.push(cur);

            let step_number = n + 1;
            if let Some(mi) = self.meas_steps.iter().position(|&m| m == step_number) {
                let mut per_sub = Vec::with_capacity(s);
                for d in 0..s {
                    match self.well_matrices(mi, d, anchor)? {
                        Some(wm) => {
                            let y = &tr.well[mi][d]
                                + &wm.a_psi * (&psi[step_number][d] - &tr.psi[step_number][d])
                                + &wm.b_xi * &dxi;
                            per_sub.push(y);
                        }
                        None => per_sub.push(DVector::zeros(0)),
                    }
                }
                responses.push(per_sub);
            }
        }

        Ok(ReducedTrajectory {
            psi,
            anchors,
            responses,
            coupling_iters,
            damping_used,
        })
    }
}
