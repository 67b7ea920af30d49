//! Twin-experiment orchestration: truth and noise generation, offline
//! reduction stages, history matching by reduced-adjoint and
//! finite-difference methods, RML ensembles, error metrics, and
//! plot-ready exports.

pub mod artifacts;
pub mod config;
pub mod export;
pub mod fd;

use crate::assim::{self, HmConfig, HmResult, InnerResult};
use crate::fom::{self, LogPermField, ObsKind, ObservationSet, ReservoirConfig, SimResult};
use crate::geostat::{CovarianceModel, KleModel};
use crate::rom::{self, PodBasis, SnapshotSet, SubdomainLayout, TrainingRun};
use crate::tpwl::{TpwlConfig, TpwlSystem};
use crate::{Error, Result};
pub use config::ExperimentConfig;
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Calibration methods of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Subdomain reduced model (configured decomposition).
    Sd,
    /// Global-domain reduced model (single subdomain).
    Gd,
    /// Finite-difference baseline on the full-order model.
    Fd,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sd" => Ok(Method::Sd),
            "gd" => Ok(Method::Gd),
            "fd" => Ok(Method::Fd),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Sd => "sd",
            Method::Gd => "gd",
            Method::Fd => "fd",
        }
    }
}

/// Seed derivation: one experiment seed fans out to the sub-stages.
#[derive(Debug, Clone, Copy)]
pub struct Seeds {
    pub ensemble: u64,
    pub noise: u64,
    pub snapshots: u64,
    pub rbf_extras: u64,
    pub rml: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        Self {
            ensemble: seed,
            noise: seed.wrapping_add(1),
            snapshots: seed.wrapping_add(2),
            rbf_extras: seed.wrapping_add(3),
            rml: seed.wrapping_add(4),
        }
    }
}

/// Add independent Gaussian noise to each observation entry: std is
/// `noise_fraction * |true value|` with an absolute floor of
/// `floor_fraction * max |signal|` per signal type, which keeps R
/// invertible for identically-zero stretches like pre-breakthrough water
/// cut. The per-type maximum is itself floored at one data unit (1 MPa,
/// 1 m^3/day, a water cut of 1) so that a signal that never moves cannot
/// collapse the floor to rounding noise.
pub fn apply_noise(
    obs: &mut ObservationSet,
    noise_fraction: f64,
    floor_fraction: f64,
    seed: u64,
) {
    let n_d = obs.n_data_per_time();
    // Signal maxima per kind class.
    let mut max_by_kind: BTreeMap<u8, f64> = BTreeMap::new();
    let class = |k: &ObsKind| -> u8 {
        match k {
            ObsKind::InjectorBhp(_) => 0,
            ObsKind::ProducerRate(_) => 1,
            ObsKind::ProducerWct(_) => 2,
        }
    };
    for t in 0..obs.n_times() {
        for k in 0..n_d {
            let c = class(&obs.kinds[k]);
            let v = obs.values[t][k].abs();
            let e = max_by_kind.entry(c).or_insert(0.0);
            *e = e.max(v);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..obs.n_times() {
        for k in 0..n_d {
            let floor = floor_fraction * max_by_kind[&class(&obs.kinds[k])].max(1.0);
            let sigma = (noise_fraction * obs.values[t][k].abs()).max(floor);
            let draw: f64 = StandardNormal.sample(&mut rng);
            obs.sigma[t][k] = sigma;
            obs.values[t][k] += sigma * draw;
        }
    }
}

/// RMS data and parameter misfits of an updated model.
pub fn metrics(
    obs: &ObservationSet,
    updated_responses: &[fom::WellResponse],
    fom_cfg: &ReservoirConfig,
    truth: &LogPermField,
    updated: &LogPermField,
) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    let mut count = 0usize;
    for (t, &step) in obs.steps.iter().enumerate() {
        let resp = updated_responses
            .iter()
            .find(|r| r.step == step)
            .ok_or(Error::Unscheduled(step))?;
        let y = fom::response_to_data_vector(resp, fom_cfg);
        for k in 0..obs.n_data_per_time() {
            let d = obs.values[t][k] - y[k];
            sq += d * d;
            count += 1;
        }
    }
    let e_obs = (sq / count as f64).sqrt();
    let n_g = truth.n_cells() as f64;
    let e_beta = ((&truth.beta - &updated.beta).norm_squared() / n_g).sqrt();
    Ok((e_obs, e_beta))
}

/// Geostatistics stage output.
pub struct GeoStage {
    pub cov: CovarianceModel,
    pub kle: KleModel,
    pub mean: DVector<f64>,
    pub truth: LogPermField,
    /// Per-cell ensemble standard deviation (reporting).
    pub ensemble_std: DVector<f64>,
    pub ensemble_count: usize,
}

pub fn stage_geostat(xc: &ExperimentConfig) -> Result<GeoStage> {
    let grid = xc.grid2();
    let spec = xc.covariance_spec();
    let seeds = Seeds::derive(xc.experiment.seed);
    let cov = CovarianceModel::from_spec(&spec, &grid).map_err(|e| e.in_stage("geostat"))?;
    let n = grid.n_cells();
    let mean = DVector::from_element(n, xc.rock.mean_log_perm);
    let count = xc.geostat.ensemble_count.max(xc.experiment.truth_index + 1);
    let ensemble = cov
        .sample(&mean, count, seeds.ensemble)
        .map_err(|e| e.in_stage("geostat"))?;
    let truth = ensemble[xc.experiment.truth_index].clone();
    let mut var = DVector::zeros(n);
    let emean = {
        let mut m = DVector::zeros(n);
        for f in &ensemble {
            m += &f.beta;
        }
        m / ensemble.len() as f64
    };
    for f in &ensemble {
        let d = &f.beta - &emean;
        var += d.component_mul(&d);
    }
    var /= (ensemble.len() - 1).max(1) as f64;
    let kle = cov
        .kle(mean.clone(), xc.geostat.kle_energy_fraction)
        .map_err(|e| e.in_stage("geostat"))?;
    Ok(GeoStage {
        cov,
        kle,
        mean,
        truth,
        ensemble_std: var.map(|v| v.sqrt()),
        ensemble_count: ensemble.len(),
    })
}

/// Truth simulation and noisy observations.
pub struct TruthStage {
    /// Truth run over the full forecast horizon.
    pub sim: SimResult,
    /// Noisy observations over the history window.
    pub observations: ObservationSet,
    /// The same observations before noise.
    pub clean: ObservationSet,
}

pub fn stage_truth(xc: &ExperimentConfig, geo: &GeoStage) -> Result<TruthStage> {
    let seeds = Seeds::derive(xc.experiment.seed);
    let fcfg = xc.forecast_config()?;
    let sim = fom::simulate(&fcfg, &geo.truth).map_err(|e| e.in_stage("truth run"))?;
    let hist = xc.to_reservoir_config()?;
    let schedule = hist.meas_schedule();
    let clean = fom::observe(&sim.responses, &schedule, &hist)?;
    let mut observations = clean.clone();
    apply_noise(
        &mut observations,
        xc.assim.noise_fraction,
        xc.assim.noise_floor_fraction,
        seeds.noise,
    );
    Ok(TruthStage {
        sim,
        observations,
        clean,
    })
}

pub fn stage_snapshots(xc: &ExperimentConfig, kle: &KleModel) -> Result<SnapshotSet> {
    let seeds = Seeds::derive(xc.experiment.seed);
    let hist = xc.to_reservoir_config()?;
    let mut sampler = rom::pm_one_sampler(kle.l_beta(), seeds.snapshots);
    rom::collect_snapshots(
        &hist,
        kle,
        &mut sampler,
        xc.rom.snapshot_tolerance,
        xc.rom.max_snapshot_runs,
    )
    .map_err(|e| e.in_stage("snapshot collection"))
}

/// Full-order runs at the two-sided perturbation design points.
pub fn stage_training_runs(xc: &ExperimentConfig, kle: &KleModel) -> Result<Vec<TrainingRun>> {
    let seeds = Seeds::derive(xc.experiment.seed);
    let hist = xc.to_reservoir_config()?;
    let points = rom::rbf_training_points(
        kle.l_beta(),
        xc.rom.rbf_delta,
        xc.rom.rbf_extra_points,
        seeds.rbf_extras,
    )?;
    points
        .into_iter()
        .map(|xi| {
            let field = kle.decode(&xi);
            let sim = fom::simulate(&hist, &field)
                .map_err(|e| e.in_stage("rbf training run"))?;
            Ok(TrainingRun { xi, sim })
        })
        .collect()
}

pub fn stage_rom(
    xc: &ExperimentConfig,
    snapshots: &SnapshotSet,
    rows: usize,
    cols: usize,
) -> Result<(SubdomainLayout, PodBasis)> {
    let layout = rom::partition(&xc.grid2(), rows, cols)?;
    let basis = rom::build_pod(
        snapshots,
        &layout,
        xc.rom.pod_energy_pressure,
        xc.rom.pod_energy_saturation,
    )
    .map_err(|e| e.in_stage("pod"))?;
    Ok((layout, basis))
}

pub fn build_system(
    xc: &ExperimentConfig,
    layout: SubdomainLayout,
    basis: PodBasis,
    runs: &[TrainingRun],
) -> Result<TpwlSystem> {
    let hist = xc.to_reservoir_config()?;
    TpwlSystem::build(&hist, layout, basis, runs, TpwlConfig::default())
        .map_err(|e| e.in_stage("tpwl build"))
}

pub fn hm_config(xc: &ExperimentConfig, l_beta: usize) -> HmConfig {
    let mut cfg = HmConfig::new(l_beta);
    cfg.eta_j = xc.assim.eta_j;
    cfg.eta_xi = xc.assim.eta_xi;
    cfg.n_max = xc.assim.max_inner_iterations;
    cfg.outer_max = xc.assim.max_outer_loops;
    cfg
}

/// Per-method record in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub e_obs_initial: f64,
    pub e_obs_final: f64,
    pub e_beta_initial: f64,
    pub e_beta_final: f64,
    pub cost_initial: f64,
    pub cost_final: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    pub accepted: bool,
    pub outer_loops: usize,
    pub inner_iterations: usize,
    pub fom_snapshots: usize,
    pub fom_training: usize,
    pub fom_outer: usize,
    pub fom_fd_initial: usize,
    pub fom_fd_gradient: usize,
    pub fom_fd_line_search: usize,
    pub fom_total: usize,
    pub stop_reasons: Vec<String>,
}

/// RML summary in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmlSummary {
    pub members: usize,
    /// Matching runs beyond the shared offline set; zero by construction.
    pub additional_fom_runs: usize,
    /// Diagnostic forecast simulations (not part of the matching budget).
    pub forecast_runs: usize,
    pub prior_spread: f64,
    pub posterior_spread: f64,
    pub spread_ratio: f64,
    pub mean_final_cost: f64,
}

/// Everything a twin experiment reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub seed: u64,
    pub grid: (usize, usize),
    pub l_beta: usize,
    pub n_obs_scalars: usize,
    pub band_lo: f64,
    pub band_hi: f64,
    pub snapshot_runs: usize,
    pub training_runs: usize,
    pub truth_runs: usize,
    pub forecast_runs: usize,
    pub methods: Vec<MethodMetrics>,
    pub rml: Option<RmlSummary>,
    pub artifacts: BTreeMap<String, String>,
}

/// Full in-memory results of a twin experiment, used by the exporter.
pub struct TwinOutcome {
    pub manifest: ExperimentManifest,
    pub geo: GeoStage,
    pub truth: TruthStage,
    pub initial_forecast: SimResult,
    /// Per reduced method: the match result and the updated-model forecast.
    pub matches: Vec<(Method, HmResult, SimResult)>,
    pub fd_result: Option<(fd::FdResult, LogPermField, SimResult)>,
    pub rml: Option<RmlOutcome>,
}

pub struct RmlOutcome {
    pub backgrounds: Vec<DVector<f64>>,
    pub results: Vec<InnerResult>,
    pub posterior_fields: Vec<LogPermField>,
    pub prior_forecasts: Vec<SimResult>,
    pub posterior_forecasts: Vec<SimResult>,
    pub prior_spread: f64,
    pub posterior_spread: f64,
}

/// Mean over producers and forecast times of the across-ensemble variance
/// of the water cut.
pub fn wct_spread(sims: &[SimResult]) -> f64 {
    if sims.is_empty() {
        return 0.0;
    }
    let n_steps = sims[0].responses.len();
    let n_prod = sims[0].responses[0].producer_wct.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..n_steps {
        for p in 0..n_prod {
            let vals: Vec<f64> = sims.iter().map(|s| s.responses[t].producer_wct[p]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>()
                / (vals.len() - 1).max(1) as f64;
            total += var;
            count += 1;
        }
    }
    total / count as f64
}

/// Run the RML ensemble against a built system: K backgrounds drawn from
/// the system's own training trajectories, inner minimization only, plus
/// diagnostic forecasts of the prior and posterior members.
pub fn run_rml(
    xc: &ExperimentConfig,
    kle: &KleModel,
    system: &TpwlSystem,
    observations: &ObservationSet,
    k: usize,
) -> Result<RmlOutcome> {
    let seeds = Seeds::derive(xc.experiment.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.rml);
    let n_tr = system.n_trajectories();
    let mut indices: Vec<usize> = (0..n_tr).collect();
    indices.shuffle(&mut rng);
    let chosen: Vec<usize> = if k <= n_tr {
        indices[..k].to_vec()
    } else {
        (0..k).map(|i| indices[i % n_tr]).collect()
    };
    let backgrounds: Vec<(DVector<f64>, DVector<f64>)> = chosen
        .iter()
        .map(|&i| {
            let xi = system.trajectory(i).xi.clone();
            (xi.clone(), xi)
        })
        .collect();
    let cfg = hm_config(xc, system.l_beta());
    let results = assim::rml_ensemble(&backgrounds, system, observations, &cfg)?;

    let fcfg = xc.forecast_config()?;
    let mut prior_forecasts = Vec::with_capacity(k);
    let mut posterior_forecasts = Vec::with_capacity(k);
    let mut posterior_fields = Vec::with_capacity(k);
    for (b, r) in backgrounds.iter().zip(&results) {
        let prior_field = kle.decode(&b.0);
        prior_forecasts.push(fom::simulate(&fcfg, &prior_field).map_err(|e| e.in_stage("rml prior forecast"))?);
        let post_field = kle.decode(&r.xi);
        posterior_forecasts
            .push(fom::simulate(&fcfg, &post_field).map_err(|e| e.in_stage("rml posterior forecast"))?);
        posterior_fields.push(post_field);
    }
    let prior_spread = wct_spread(&prior_forecasts);
    let posterior_spread = wct_spread(&posterior_forecasts);
    Ok(RmlOutcome {
        backgrounds: backgrounds.into_iter().map(|b| b.0).collect(),
        results,
        posterior_fields,
        prior_forecasts,
        posterior_forecasts,
        prior_spread,
        posterior_spread,
    })
}

/// End-to-end twin experiment: build the offline stages, calibrate with
/// the requested methods, collect metrics and forecasts, and write
/// plot-ready artifacts under `out_dir`.
pub fn run_twin(
    xc: &ExperimentConfig,
    methods: &[Method],
    rml_members: Option<usize>,
    out_dir: &Path,
) -> Result<ExperimentManifest> {
    let mut outcome = run_twin_in_memory(xc, methods, rml_members)?;
    export::save_raw(&mut outcome, xc, out_dir)?;
    export::export_plots_from_dir(out_dir)?;
    Ok(outcome.manifest)
}

pub fn run_twin_in_memory(
    xc: &ExperimentConfig,
    methods: &[Method],
    rml_members: Option<usize>,
) -> Result<TwinOutcome> {
    xc.validate()?;
    let hist_cfg = xc.to_reservoir_config()?;
    let fcfg = xc.forecast_config()?;
    let geo = stage_geostat(xc)?;
    let truth = stage_truth(xc, &geo)?;
    let l_beta = geo.kle.l_beta();
    let band = assim::eq_band(truth.observations.total_scalars());

    // Offline stages shared by the reduced methods.
    let needs_reduced = methods.iter().any(|m| matches!(m, Method::Sd | Method::Gd));
    let snapshots = if needs_reduced {
        Some(stage_snapshots(xc, &geo.kle)?)
    } else {
        None
    };
    let training = if needs_reduced {
        Some(stage_training_runs(xc, &geo.kle)?)
    } else {
        None
    };

    // The initial model is the background: its history responses are the
    // design base point (xi = 0), its forecast costs one diagnostic run.
    let initial_field = geo.kle.decode(&DVector::zeros(l_beta));
    let initial_forecast =
        fom::simulate(&fcfg, &initial_field).map_err(|e| e.in_stage("initial forecast"))?;
    let mut forecast_runs = 1usize;
    let initial_history_responses: Vec<fom::WellResponse> = initial_forecast
        .responses
        .iter()
        .filter(|r| r.step <= hist_cfg.n_steps)
        .cloned()
        .collect();

    let hm_cfg = hm_config(xc, l_beta);
    let (e_obs0, e_beta0) = metrics(
        &truth.observations,
        &initial_history_responses,
        &hist_cfg,
        &geo.truth,
        &initial_field,
    )?;
    let cost0 = assim::true_cost(
        &DVector::zeros(l_beta),
        &initial_history_responses,
        &hist_cfg,
        &truth.observations,
        &hm_cfg,
    )?;

    let mut method_rows = Vec::new();
    let mut matches = Vec::new();
    let mut fd_result = None;
    let mut rml_outcome = None;
    let mut shared_sd_system: Option<TpwlSystem> = None;

    for method in methods {
        match method {
            Method::Sd | Method::Gd => {
                let (rows, cols) = if matches!(method, Method::Sd) {
                    (xc.rom.subdomain_rows, xc.rom.subdomain_cols)
                } else {
                    (1, 1)
                };
                let snapshots = snapshots.as_ref().unwrap();
                let training = training.as_ref().unwrap();
                let (layout, basis) = stage_rom(xc, snapshots, rows, cols)?;
                let system = build_system(xc, layout, basis, training)?;
                if matches!(method, Method::Sd) && shared_sd_system.is_none() {
                    // The RML stage shares the initial reduced model.
                    shared_sd_system = Some(system.clone());
                }
                let hm = assim::history_match(
                    &DVector::zeros(l_beta),
                    &hist_cfg,
                    &geo.kle,
                    system,
                    &truth.observations,
                    &hm_cfg,
                )?;
                let updated_field = geo.kle.decode(&hm.xi);
                let (e_obs1, e_beta1) = metrics(
                    &truth.observations,
                    &hm.final_responses,
                    &hist_cfg,
                    &geo.truth,
                    &updated_field,
                )?;
                let cost1 = hm.outers.last().map(|o| o.true_cost).unwrap_or(f64::NAN);
                let updated_forecast = fom::simulate(&fcfg, &updated_field)
                    .map_err(|e| e.in_stage("updated forecast"))?;
                forecast_runs += 1;
                method_rows.push(MethodMetrics {
                    method: method.name().into(),
                    e_obs_initial: e_obs0,
                    e_obs_final: e_obs1,
                    e_beta_initial: e_beta0,
                    e_beta_final: e_beta1,
                    cost_initial: cost0,
                    cost_final: cost1,
                    band_lo: band.0,
                    band_hi: band.1,
                    accepted: hm.accepted,
                    outer_loops: hm.outers.len(),
                    inner_iterations: hm
                        .outers
                        .iter()
                        .map(|o| o.inner.trace.len().saturating_sub(1))
                        .sum(),
                    fom_snapshots: snapshots.n_runs(),
                    fom_training: training.len(),
                    fom_outer: hm.fom_runs,
                    fom_fd_initial: 0,
                    fom_fd_gradient: 0,
                    fom_fd_line_search: 0,
                    fom_total: snapshots.n_runs() + training.len() + hm.fom_runs,
                    stop_reasons: hm
                        .outers
                        .iter()
                        .map(|o| format!("{:?}", o.inner.stop))
                        .collect(),
                });
                matches.push((*method, hm, updated_forecast));
            }
            Method::Fd => {
                let mut cost_fn = |xi: &DVector<f64>| -> Result<f64> {
                    let field = geo.kle.decode(xi);
                    let sim = fom::simulate(&hist_cfg, &field)
                        .map_err(|e| e.in_stage("fd evaluation"))?;
                    assim::true_cost(xi, &sim.responses, &hist_cfg, &truth.observations, &hm_cfg)
                };
                let res = fd::fd_minimize(
                    &mut cost_fn,
                    &DVector::zeros(l_beta),
                    xc.assim.fd_step,
                    &hm_cfg,
                )?;
                let updated_field = geo.kle.decode(&res.xi);
                let updated_hist = fom::simulate(&hist_cfg, &updated_field)
                    .map_err(|e| e.in_stage("fd final history run"))?;
                forecast_runs += 1;
                let (e_obs1, e_beta1) = metrics(
                    &truth.observations,
                    &updated_hist.responses,
                    &hist_cfg,
                    &geo.truth,
                    &updated_field,
                )?;
                let cost1 = *res.trace.last().unwrap();
                let accepted = 2.0 * cost1 <= band.1;
                let updated_forecast = fom::simulate(&fcfg, &updated_field)
                    .map_err(|e| e.in_stage("fd forecast"))?;
                forecast_runs += 1;
                method_rows.push(MethodMetrics {
                    method: method.name().into(),
                    e_obs_initial: e_obs0,
                    e_obs_final: e_obs1,
                    e_beta_initial: e_beta0,
                    e_beta_final: e_beta1,
                    cost_initial: cost0,
                    cost_final: cost1,
                    band_lo: band.0,
                    band_hi: band.1,
                    accepted,
                    outer_loops: 1,
                    inner_iterations: res.iterations,
                    fom_snapshots: 0,
                    fom_training: 0,
                    fom_outer: 0,
                    fom_fd_initial: res.counters.initial,
                    fom_fd_gradient: res.counters.gradient,
                    fom_fd_line_search: res.counters.line_search,
                    fom_total: res.counters.total(),
                    stop_reasons: vec![format!("{:?}", res.stop)],
                });
                fd_result = Some((res, updated_field, updated_forecast));
            }
        }
    }

    if let Some(k) = rml_members {
        let system = match shared_sd_system.take() {
            Some(s) => s,
            None => {
                let snaps_local;
                let snaps_ref = match &snapshots {
                    Some(s) => s,
                    None => {
                        snaps_local = stage_snapshots(xc, &geo.kle)?;
                        &snaps_local
                    }
                };
                let training_local;
                let training_ref = match &training {
                    Some(t) => t,
                    None => {
                        training_local = stage_training_runs(xc, &geo.kle)?;
                        &training_local
                    }
                };
                let (layout, basis) = stage_rom(
                    xc,
                    snaps_ref,
                    xc.rom.subdomain_rows,
                    xc.rom.subdomain_cols,
                )?;
                build_system(xc, layout, basis, training_ref)?
            }
        };
        let rml = run_rml(xc, &geo.kle, &system, &truth.observations, k)?;
        forecast_runs += 2 * k;
        rml_outcome = Some(rml);
    }

    let manifest = ExperimentManifest {
        seed: xc.experiment.seed,
        grid: (xc.grid.nx, xc.grid.ny),
        l_beta,
        n_obs_scalars: truth.observations.total_scalars(),
        band_lo: band.0,
        band_hi: band.1,
        snapshot_runs: snapshots.as_ref().map(|s| s.n_runs()).unwrap_or(0),
        training_runs: training.as_ref().map(|t| t.len()).unwrap_or(0),
        truth_runs: 1,
        forecast_runs,
        methods: method_rows,
        rml: rml_outcome.as_ref().map(|r| RmlSummary {
            members: r.results.len(),
            additional_fom_runs: 0,
            forecast_runs: 2 * r.results.len(),
            prior_spread: r.prior_spread,
            posterior_spread: r.posterior_spread,
            spread_ratio: if r.prior_spread > 0.0 {
                r.posterior_spread / r.prior_spread
            } else {
                f64::NAN
            },
            mean_final_cost: r.results.iter().map(|m| *m.trace.last().unwrap()).sum::<f64>()
                / r.results.len().max(1) as f64,
        }),
        artifacts: BTreeMap::new(),
    };

    Ok(TwinOutcome {
        manifest,
        geo,
        truth,
        initial_forecast,
        matches,
        fd_result,
        rml: rml_outcome,
    })
}

#[cfg(test)]
mod tests;
