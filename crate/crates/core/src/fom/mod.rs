//! Full-order 2D two-phase (oil-water) incompressible flow simulator.
//!
//! Two-point flux approximation with harmonic inter-cell transmissibilities
//! and IMPES time stepping: the pressure equation is solved implicitly with
//! a banded Cholesky factorization, the saturation equation is advanced
//! explicitly with upwind fractional flow and CFL sub-stepping. Wells are
//! Peaceman-type: rate-controlled injectors and BHP-controlled producers.
//! No gravity, no capillary pressure. SI units internally; permeability in
//! millidarcy and time in days are converted at the boundary.

pub mod pressure;
pub mod relperm;

use crate::grid::Grid2;
use crate::{Error, Result};
use nalgebra::DVector;
use pressure::BandedSpd;
pub use relperm::CoreyRelPerm;
use serde::{Deserialize, Serialize};

pub const MILLIDARCY_M2: f64 = 9.869233e-16;
pub const DAY_SECONDS: f64 = 86400.0;
pub const PA_PER_MPA: f64 = 1e6;

/// Relative tolerance on the incompressible well-flux balance per step.
pub const BALANCE_TOL: f64 = 1e-8;

/// Well control mode and set point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WellControl {
    /// Water injector at a fixed surface rate (m^3/day).
    RateInjector { rate_m3_day: f64 },
    /// Producer held at a fixed bottom-hole pressure (Pa).
    BhpProducer { bhp_pa: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub name: String,
    /// Perforated cell (row-major index).
    pub cell: usize,
    pub control: WellControl,
}

/// Full configuration of the reservoir model and its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirConfig {
    pub grid: Grid2,
    /// Water viscosity (Pa s).
    pub mu_w: f64,
    /// Oil viscosity (Pa s).
    pub mu_o: f64,
    /// Water density (kg/m^3); carried for completeness, gravity is off.
    pub rho_w: f64,
    /// Oil density (kg/m^3).
    pub rho_o: f64,
    /// Initial pressure (Pa).
    pub p_init_pa: f64,
    /// Initial water saturation.
    pub s_w_init: f64,
    pub s_wc: f64,
    pub s_or: f64,
    pub n_w: f64,
    pub n_o: f64,
    /// Timestep length (days).
    pub dt_days: f64,
    /// Total number of simulation steps N.
    pub n_steps: usize,
    /// Measurements are taken every this many steps.
    pub meas_every: usize,
    pub wells: Vec<Well>,
    /// Wellbore radius for the Peaceman index (m).
    pub well_radius_m: f64,
    /// Safety factor applied to the explicit CFL limit.
    pub cfl_safety: f64,
}

impl ReservoirConfig {
    pub fn corey(&self) -> CoreyRelPerm {
        CoreyRelPerm {
            s_wc: self.s_wc,
            s_or: self.s_or,
            n_w: self.n_w,
            n_o: self.n_o,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    /// Measurement step indices (subset of 1..=n_steps).
    pub fn meas_schedule(&self) -> Vec<usize> {
        (1..=self.n_steps)
            .filter(|s| s % self.meas_every == 0)
            .collect()
    }

    pub fn n_meas(&self) -> usize {
        self.meas_schedule().len()
    }

    pub fn injector_indices(&self) -> Vec<usize> {
        self.wells
            .iter()
            .enumerate()
            .filter(|(_, w)| matches!(w.control, WellControl::RateInjector { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn producer_indices(&self) -> Vec<usize> {
        self.wells
            .iter()
            .enumerate()
            .filter(|(_, w)| matches!(w.control, WellControl::BhpProducer { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of scalar well measurements per measurement time:
    /// one BHP per injector plus rate and water cut per producer.
    pub fn n_data_per_time(&self) -> usize {
        self.injector_indices().len() + 2 * self.producer_indices().len()
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.nx == 0 || g.ny == 0 {
            return Err(Error::Config("grid has zero cells".into()));
        }
        for (name, v) in [
            ("dx", g.dx),
            ("dy", g.dy),
            ("dz", g.dz),
            ("mu_w", self.mu_w),
            ("mu_o", self.mu_o),
            ("rho_w", self.rho_w),
            ("rho_o", self.rho_o),
            ("p_init_pa", self.p_init_pa),
            ("dt_days", self.dt_days),
            ("well_radius_m", self.well_radius_m),
            ("cfl_safety", self.cfl_safety),
            ("n_w", self.n_w),
            ("n_o", self.n_o),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if self.s_wc < 0.0 || self.s_or < 0.0 || self.s_wc + self.s_or >= 1.0 {
            return Err(Error::Config(format!(
                "residual saturations invalid: s_wc={} s_or={}",
                self.s_wc, self.s_or
            )));
        }
        if self.s_w_init < self.s_wc || self.s_w_init > 1.0 - self.s_or {
            return Err(Error::Config(format!(
                "initial saturation {} outside [{}, {}]",
                self.s_w_init,
                self.s_wc,
                1.0 - self.s_or
            )));
        }
        if self.meas_every == 0 {
            return Err(Error::Config("meas_every must be at least 1".into()));
        }
        let n_g = g.n_cells();
        for w in &self.wells {
            if w.cell >= n_g {
                return Err(Error::Config(format!(
                    "well {} perforates cell {} outside the grid ({} cells)",
                    w.name, w.cell, n_g
                )));
            }
        }
        // Incompressible flow needs a pressure-controlled outlet unless the
        // net imposed rate is zero.
        let has_bhp = !self.producer_indices().is_empty();
        let net_rate: f64 = self
            .wells
            .iter()
            .map(|w| match w.control {
                WellControl::RateInjector { rate_m3_day } => rate_m3_day,
                WellControl::BhpProducer { .. } => 0.0,
            })
            .sum();
        if !has_bhp && net_rate.abs() > 0.0 {
            return Err(Error::Config(
                "nonzero net injection rate with no BHP-controlled well is incompatible \
                 with incompressible flow"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Pressure and water saturation in every grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    pub pressure: DVector<f64>,
    pub saturation: DVector<f64>,
}

impl StateField {
    pub fn initial(cfg: &ReservoirConfig) -> Self {
        let n = cfg.n_cells();
        Self {
            pressure: DVector::from_element(n, cfg.p_init_pa),
            saturation: DVector::from_element(n, cfg.s_w_init),
        }
    }
}

/// Log-permeability field, beta = ln(permeability in mD), with the porosity
/// derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPermField {
    pub beta: DVector<f64>,
}

impl LogPermField {
    pub fn new(beta: DVector<f64>) -> Self {
        Self { beta }
    }

    pub fn uniform(n: usize, beta: f64) -> Self {
        Self {
            beta: DVector::from_element(n, beta),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.beta.len()
    }

    /// Permeability in m^2.
    pub fn perm_si(&self) -> DVector<f64> {
        self.beta.map(|b| b.exp() * MILLIDARCY_M2)
    }

    /// Porosity tied to permeability: 0.25 (e^beta / 200)^0.1.
    pub fn porosity(&self) -> DVector<f64> {
        self.beta.map(|b| 0.25 * (b.exp() / 200.0).powf(0.1))
    }
}

/// Simulated well quantities at one timestep. Bottom-hole pressures are in
/// Pa here; `observe` converts to MPa so that all measurement types enter
/// the data vector at comparable magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellResponse {
    pub step: usize,
    pub time_days: f64,
    /// One entry per injector, in config well order.
    pub injector_bhp_pa: Vec<f64>,
    /// One entry per producer: total liquid rate (m^3/day).
    pub producer_rate_m3_day: Vec<f64>,
    /// One entry per producer: water cut (fraction).
    pub producer_wct: Vec<f64>,
}

/// Per-step balance and stability bookkeeping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// |sum of well fluxes| relative to the total well throughput.
    pub well_flux_imbalance_rel: f64,
    /// Water-in-place balance error relative to the step throughput.
    pub water_balance_rel: f64,
    pub n_substeps: usize,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    /// N + 1 states, including the initial one.
    pub states: Vec<StateField>,
    /// Responses at every step 1..=N.
    pub responses: Vec<WellResponse>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Precomputed per-run quantities: transmissibilities, pore volumes, well
/// indices, and fractional-flow metadata.
struct StepContext<'a> {
    cfg: &'a ReservoirConfig,
    pore_volume: DVector<f64>,
    /// Geometric transmissibility of x-faces, (nx-1) * ny entries.
    trans_x: Vec<f64>,
    /// Geometric transmissibility of y-faces, nx * (ny-1) entries.
    trans_y: Vec<f64>,
    /// Peaceman well index per well (m^3).
    well_index: Vec<f64>,
    corey: CoreyRelPerm,
    max_fw_slope: f64,
}

impl<'a> StepContext<'a> {
    fn new(cfg: &'a ReservoirConfig, field: &LogPermField) -> Result<Self> {
        if field.n_cells() != cfg.n_cells() {
            return Err(Error::Dimension(format!(
                "field has {} cells, grid has {}",
                field.n_cells(),
                cfg.n_cells()
            )));
        }
        let g = &cfg.grid;
        let perm = field.perm_si();
        let poro = field.porosity();
        let pore_volume = poro.map(|p| p * g.cell_volume());

        let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);
        let mut trans_x = vec![0.0; g.nx.saturating_sub(1) * g.ny];
        for iy in 0..g.ny {
            for ix in 0..g.nx.saturating_sub(1) {
                let i = g.index(ix, iy);
                let j = g.index(ix + 1, iy);
                trans_x[iy * (g.nx - 1) + ix] = g.dy * g.dz / g.dx * harmonic(perm[i], perm[j]);
            }
        }
        let mut trans_y = vec![0.0; g.nx * g.ny.saturating_sub(1)];
        for iy in 0..g.ny.saturating_sub(1) {
            for ix in 0..g.nx {
                let i = g.index(ix, iy);
                let j = g.index(ix, iy + 1);
                trans_y[iy * g.nx + ix] = g.dx * g.dz / g.dy * harmonic(perm[i], perm[j]);
            }
        }

        let r_eq = 0.14 * (g.dx * g.dx + g.dy * g.dy).sqrt();
        let well_index = cfg
            .wells
            .iter()
            .map(|w| 2.0 * std::f64::consts::PI * perm[w.cell] * g.dz / (r_eq / cfg.well_radius_m).ln())
            .collect();

        let corey = cfg.corey();
        let max_fw_slope = corey.max_frac_flow_slope(cfg.mu_w, cfg.mu_o);
        Ok(Self {
            cfg,
            pore_volume,
            trans_x,
            trans_y,
            well_index,
            corey,
            max_fw_slope,
        })
    }

    /// Visit every interior face as (cell_i, cell_j, geometric transmissibility).
    fn for_each_face(&self, mut f: impl FnMut(usize, usize, f64)) {
        let g = &self.cfg.grid;
        for iy in 0..g.ny {
            for ix in 0..g.nx.saturating_sub(1) {
                f(
                    g.index(ix, iy),
                    g.index(ix + 1, iy),
                    self.trans_x[iy * (g.nx - 1) + ix],
                );
            }
        }
        for iy in 0..g.ny.saturating_sub(1) {
            for ix in 0..g.nx {
                f(
                    g.index(ix, iy),
                    g.index(ix, iy + 1),
                    self.trans_y[iy * g.nx + ix],
                );
            }
        }
    }

    fn advance(
        &self,
        state: &StateField,
        step: usize,
    ) -> Result<(StateField, WellResponse, StepDiagnostics)> {
        let cfg = self.cfg;
        let n = cfg.n_cells();
        let corey = &self.corey;

        // Cell mobilities from the start-of-step saturations.
        let mut mob_t = DVector::zeros(n);
        for i in 0..n {
            let s = state.saturation[i];
            mob_t[i] = corey.krw(s) / cfg.mu_w + corey.kro(s) / cfg.mu_o;
        }

        // Assemble the implicit pressure system in shifted variables
        // u = p - p_ref with p_ref a producer BHP: the producer fluxes
        // WI*lambda*(p - bhp) are tiny differences of huge pressures, and
        // solving for them directly avoids the cancellation that would
        // otherwise break the flux balance under strong permeability
        // contrast.
        let bandwidth = cfg.grid.nx.min(n.saturating_sub(1)).max(1);
        let mut a = BandedSpd::zeros(n, bandwidth);
        let mut rhs = DVector::zeros(n);
        self.for_each_face(|i, j, t_geo| {
            let t = t_geo * 0.5 * (mob_t[i] + mob_t[j]);
            a.add(i, i, t);
            a.add(j, j, t);
            a.add(j, i, -t);
        });
        let p_ref = cfg
            .wells
            .iter()
            .find_map(|w| match w.control {
                WellControl::BhpProducer { bhp_pa } => Some(bhp_pa),
                WellControl::RateInjector { .. } => None,
            })
            .unwrap_or(cfg.p_init_pa);
        let mut has_bhp = false;
        for (w, well) in cfg.wells.iter().enumerate() {
            match well.control {
                WellControl::RateInjector { rate_m3_day } => {
                    rhs[well.cell] += rate_m3_day / DAY_SECONDS;
                }
                WellControl::BhpProducer { bhp_pa } => {
                    has_bhp = true;
                    let c = self.well_index[w] * mob_t[well.cell];
                    a.add(well.cell, well.cell, c);
                    rhs[well.cell] += c * (bhp_pa - p_ref);
                }
            }
        }
        if !has_bhp {
            // Neumann problem: pin the first cell to its current pressure to
            // fix the constant mode.
            let pin = 1.0;
            a.add(0, 0, pin);
            rhs[0] += pin * (state.pressure[0] - p_ref);
        }
        // Equilibrate, factor, refine.
        let (a_eq, scale) = a.equilibrated();
        let chol = a_eq.clone().cholesky().map_err(|e| match e {
            Error::PressureSolve { reason, .. } => Error::PressureSolve { step, reason },
            other => other,
        })?;
        let rhs_eq = rhs.component_mul(&scale);
        let u = chol.solve_refined(&a_eq, &rhs_eq).component_mul(&scale);
        let p = u.map(|v| v + p_ref);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::PressureSolve {
                step,
                reason: "non-finite pressure".into(),
            });
        }

        // Face fluxes (m^3/s, positive i -> j) and well fluxes
        // (positive = into the reservoir).
        let mut face_flux = Vec::new();
        self.for_each_face(|i, j, t_geo| {
            let t = t_geo * 0.5 * (mob_t[i] + mob_t[j]);
            face_flux.push((i, j, t * (u[i] - u[j])));
        });
        let mut well_flux = vec![0.0; cfg.wells.len()];
        for (w, well) in cfg.wells.iter().enumerate() {
            well_flux[w] = match well.control {
                WellControl::RateInjector { rate_m3_day } => rate_m3_day / DAY_SECONDS,
                WellControl::BhpProducer { bhp_pa } => {
                    -self.well_index[w] * mob_t[well.cell] * (u[well.cell] - (bhp_pa - p_ref))
                }
            };
        }
        let throughput: f64 = well_flux.iter().map(|q| q.abs()).sum();
        let imbalance: f64 = well_flux.iter().sum();
        // Fluxes that could not move any saturation by 1e-8 of a pore
        // volume within the step count as no flow at all; without that
        // floor a closed system divides roundoff by roundoff.
        let dt_si = cfg.dt_days * DAY_SECONDS;
        let pv_total: f64 = self.pore_volume.sum();
        let negligible = 1e-8 * pv_total / dt_si;
        let imbalance_rel = if throughput > negligible {
            imbalance.abs() / throughput
        } else {
            0.0
        };
        if imbalance_rel > BALANCE_TOL {
            return Err(Error::PressureSolve {
                step,
                reason: format!(
                    "well flux imbalance {imbalance_rel:.3e} exceeds {BALANCE_TOL:.1e}"
                ),
            });
        }

        // Explicit saturation update with CFL sub-stepping under the frozen
        // total-velocity field.
        let mut outflux = vec![0.0; n];
        for &(i, j, v) in &face_flux {
            if v > 0.0 {
                outflux[i] += v;
            } else {
                outflux[j] -= v;
            }
        }
        for (w, well) in cfg.wells.iter().enumerate() {
            if well_flux[w] < 0.0 {
                outflux[well.cell] += -well_flux[w];
            }
        }
        let mut dt_cfl = f64::INFINITY;
        for i in 0..n {
            if outflux[i] > 0.0 {
                dt_cfl = dt_cfl.min(self.pore_volume[i] / (outflux[i] * self.max_fw_slope));
            }
        }
        let n_sub = if dt_cfl.is_finite() {
            ((dt_si / (cfg.cfl_safety * dt_cfl)).ceil() as usize).max(1)
        } else {
            1
        };
        if n_sub > 2_000_000 {
            return Err(Error::SaturationUpdate {
                step,
                reason: format!("CFL limit requires {n_sub} substeps"),
            });
        }
        let dt_sub = dt_si / n_sub as f64;

        let s_lo = cfg.s_wc;
        let s_hi = 1.0 - cfg.s_or;
        let bound_tol = 1e-9 * (s_hi - s_lo);
        let mut s = state.saturation.clone();
        let wip_before: f64 = (0..n).map(|i| s[i] * self.pore_volume[i]).sum();
        let mut injected = 0.0;
        let mut produced = 0.0;
        let mut delta = DVector::zeros(n);
        for _ in 0..n_sub {
            delta.fill(0.0);
            for &(i, j, v) in &face_flux {
                let fw = if v >= 0.0 {
                    corey.frac_flow(s[i], cfg.mu_w, cfg.mu_o)
                } else {
                    corey.frac_flow(s[j], cfg.mu_w, cfg.mu_o)
                };
                let wflux = fw * v;
                delta[i] -= wflux;
                delta[j] += wflux;
            }
            for (w, well) in cfg.wells.iter().enumerate() {
                let q = well_flux[w];
                match well.control {
                    WellControl::RateInjector { .. } => {
                        // Injected fluid is water.
                        delta[well.cell] += q;
                        injected += q * dt_sub;
                    }
                    WellControl::BhpProducer { .. } => {
                        let fw = corey.frac_flow(s[well.cell], cfg.mu_w, cfg.mu_o);
                        delta[well.cell] += fw * q;
                        produced += -fw * q * dt_sub;
                    }
                }
            }
            for i in 0..n {
                let snew = s[i] + dt_sub / self.pore_volume[i] * delta[i];
                if snew < s_lo - bound_tol || snew > s_hi + bound_tol {
                    return Err(Error::SaturationUpdate {
                        step,
                        reason: format!(
                            "saturation {snew:.6} outside [{s_lo}, {s_hi}] in cell {i}"
                        ),
                    });
                }
                s[i] = snew.clamp(s_lo, s_hi);
            }
        }
        let wip_after: f64 = (0..n).map(|i| s[i] * self.pore_volume[i]).sum();
        let net = injected - produced;
        let scale = injected.abs().max(produced.abs());
        let water_balance_rel = if scale > 0.0 {
            ((wip_after - wip_before) - net).abs() / scale
        } else {
            (wip_after - wip_before).abs() / wip_before.max(1e-30)
        };
        if water_balance_rel > BALANCE_TOL {
            return Err(Error::SaturationUpdate {
                step,
                reason: format!("water balance error {water_balance_rel:.3e}"),
            });
        }

        // Well responses: rates from this step's flow field, water cut from
        // the end-of-step saturations.
        let mut injector_bhp_pa = Vec::new();
        let mut producer_rate_m3_day = Vec::new();
        let mut producer_wct = Vec::new();
        for (w, well) in cfg.wells.iter().enumerate() {
            match well.control {
                WellControl::RateInjector { .. } => {
                    let wi_mob = self.well_index[w] * mob_t[well.cell];
                    injector_bhp_pa.push(p[well.cell] + well_flux[w] / wi_mob);
                }
                WellControl::BhpProducer { .. } => {
                    producer_rate_m3_day.push(-well_flux[w] * DAY_SECONDS);
                    producer_wct.push(corey.frac_flow(s[well.cell], cfg.mu_w, cfg.mu_o));
                }
            }
        }

        Ok((
            StateField {
                pressure: p,
                saturation: s,
            },
            WellResponse {
                step,
                time_days: step as f64 * cfg.dt_days,
                injector_bhp_pa,
                producer_rate_m3_day,
                producer_wct,
            },
            StepDiagnostics {
                well_flux_imbalance_rel: imbalance_rel,
                water_balance_rel,
                n_substeps: n_sub,
            },
        ))
    }
}

/// Advance one timestep.
pub fn step(state: &StateField, field: &LogPermField, cfg: &ReservoirConfig) -> Result<StateField> {
    cfg.validate()?;
    let ctx = StepContext::new(cfg, field)?;
    ctx.advance(state, 1).map(|(s, _, _)| s)
}

/// Run the full schedule: N + 1 states and responses at every step.
pub fn simulate(cfg: &ReservoirConfig, field: &LogPermField) -> Result<SimResult> {
    cfg.validate()?;
    let ctx = StepContext::new(cfg, field)?;
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    let mut responses = Vec::with_capacity(cfg.n_steps);
    let mut diagnostics = Vec::with_capacity(cfg.n_steps);
    states.push(StateField::initial(cfg));
    for n in 1..=cfg.n_steps {
        let (next, resp, diag) = ctx.advance(states.last().unwrap(), n)?;
        states.push(next);
        responses.push(resp);
        diagnostics.push(diag);
    }
    Ok(SimResult {
        states,
        responses,
        diagnostics,
    })
}

/// What a single scalar observation measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsKind {
    /// Injector bottom-hole pressure (MPa); payload is the well index in
    /// the config well list.
    InjectorBhp(usize),
    /// Producer total liquid rate (m^3/day).
    ProducerRate(usize),
    /// Producer water cut (fraction).
    ProducerWct(usize),
}

/// Flattened, timestamped well measurements with per-entry noise standard
/// deviations. Values are in data units: MPa for pressures, m^3/day for
/// rates, fraction for water cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    /// Measurement step indices.
    pub steps: Vec<usize>,
    pub time_days: Vec<f64>,
    /// Entry layout, identical at every measurement time.
    pub kinds: Vec<ObsKind>,
    /// Perforated cell behind each entry.
    pub well_cells: Vec<usize>,
    /// One value vector per measurement time.
    pub values: Vec<DVector<f64>>,
    /// Noise standard deviation per entry per time; 1.0 until a noise model
    /// is applied.
    pub sigma: Vec<DVector<f64>>,
}

impl ObservationSet {
    pub fn n_times(&self) -> usize {
        self.steps.len()
    }

    pub fn n_data_per_time(&self) -> usize {
        self.kinds.len()
    }

    pub fn total_scalars(&self) -> usize {
        self.n_times() * self.n_data_per_time()
    }
}

/// Flatten simulated responses at the scheduled steps into an observation
/// set. Every `schedule` entry must be a simulated step.
pub fn observe(
    responses: &[WellResponse],
    schedule: &[usize],
    cfg: &ReservoirConfig,
) -> Result<ObservationSet> {
    let mut kinds = Vec::new();
    let mut well_cells = Vec::new();
    for w in cfg.injector_indices() {
        kinds.push(ObsKind::InjectorBhp(w));
        well_cells.push(cfg.wells[w].cell);
    }
    for w in cfg.producer_indices() {
        kinds.push(ObsKind::ProducerRate(w));
        well_cells.push(cfg.wells[w].cell);
    }
    for w in cfg.producer_indices() {
        kinds.push(ObsKind::ProducerWct(w));
        well_cells.push(cfg.wells[w].cell);
    }

    let mut values = Vec::with_capacity(schedule.len());
    let mut time_days = Vec::with_capacity(schedule.len());
    for &s in schedule {
        let resp = responses
            .iter()
            .find(|r| r.step == s)
            .ok_or(Error::Unscheduled(s))?;
        values.push(response_to_data_vector(resp, cfg));
        time_days.push(resp.time_days);
    }
    let n_d = kinds.len();
    Ok(ObservationSet {
        steps: schedule.to_vec(),
        time_days,
        kinds,
        well_cells,
        values,
        sigma: vec![DVector::from_element(n_d, 1.0); schedule.len()],
    })
}

/// Flatten one response into the canonical data-unit vector
/// (injector BHPs in MPa, then producer rates, then producer water cuts).
pub fn response_to_data_vector(resp: &WellResponse, cfg: &ReservoirConfig) -> DVector<f64> {
    let mut out = Vec::with_capacity(cfg.n_data_per_time());
    for &bhp in &resp.injector_bhp_pa {
        out.push(bhp / PA_PER_MPA);
    }
    out.extend_from_slice(&resp.producer_rate_m3_day);
    out.extend_from_slice(&resp.producer_wct);
    DVector::from_vec(out)
}
