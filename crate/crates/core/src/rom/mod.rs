//! Snapshot management, per-subdomain POD bases, and the sampling
//! strategies that feed the reduced-order model.

pub mod layout;

use crate::fom::{self, ReservoirConfig, SimResult, StateField};
use crate::geostat::{energy_truncation, KleModel};
use crate::{Error, Result};
pub use layout::{partition, SubdomainLayout};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// One full-order training run tagged with its reduced parameters.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub xi: DVector<f64>,
    pub sim: SimResult,
}

/// Accumulated training runs plus the singular-value history that drove
/// the stopping rule.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub runs: Vec<TrainingRun>,
    /// Leading combined pressure+saturation spectrum after each accepted
    /// run.
    pub spectrum_history: Vec<Vec<f64>>,
    /// Relative spectrum change after each accepted run (first entry is
    /// infinite: nothing to compare against).
    pub spectrum_changes: Vec<f64>,
    /// Sampled points that were rejected as duplicates.
    pub duplicates_skipped: usize,
}

impl SnapshotSet {
    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    /// Snapshot columns: the states 1..=N of every run (the shared initial
    /// state carries no information).
    fn column_states(&self) -> Vec<&StateField> {
        self.runs
            .iter()
            .flat_map(|r| r.sim.states[1..].iter())
            .collect()
    }
}

/// Random sampler over `{-1, +1}^l`, the training-point distribution for
/// POD snapshot runs.
pub fn pm_one_sampler(l: usize, seed: u64) -> impl FnMut() -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move || DVector::from_fn(l, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// Leading spectrum of the global snapshot matrices (pressure then
/// saturation), truncated to `keep` values each. Spectra are normalized by
/// the square root of the column count: raw singular values grow like
/// sqrt(columns) as runs accumulate, which would mask convergence of the
/// spectrum's shape.
fn leading_spectrum(states: &[&StateField], keep: usize) -> Vec<f64> {
    if states.is_empty() {
        return Vec::new();
    }
    let n_g = states[0].pressure.len();
    let cols = states.len();
    let mut p = DMatrix::zeros(n_g, cols);
    let mut s = DMatrix::zeros(n_g, cols);
    for (j, st) in states.iter().enumerate() {
        p.set_column(j, &st.pressure);
        s.set_column(j, &st.saturation);
    }
    let norm = (cols as f64).sqrt();
    let mut sv_p: Vec<f64> = p.singular_values().iter().map(|v| v / norm).collect();
    let mut sv_s: Vec<f64> = s.singular_values().iter().map(|v| v / norm).collect();
    sv_p.sort_by(|a, b| b.total_cmp(a));
    sv_s.sort_by(|a, b| b.total_cmp(a));
    sv_p.truncate(keep);
    sv_s.truncate(keep);
    sv_p.extend(sv_s);
    sv_p
}

fn spectrum_change(prev: &[f64], cur: &[f64]) -> f64 {
    let k = prev.len().min(cur.len());
    if k == 0 {
        return f64::INFINITY;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        num += (cur[i] - prev[i]).powi(2);
        den += prev[i].powi(2);
    }
    if den == 0.0 {
        return f64::INFINITY;
    }
    (num / den).sqrt()
}

/// Grow the snapshot set one full-order run at a time until the leading
/// singular-value spectrum settles: stop once the relative L2 change over
/// the leading `min(20, rank)` values is at or below `tol` for two runs
/// in a row (one fresh realization can reshape the spectrum after a lull,
/// so a single quiet sample is not trusted). Duplicate sample points are
/// skipped without a run.
pub fn collect_snapshots(
    cfg: &ReservoirConfig,
    kle: &KleModel,
    sampler: &mut dyn FnMut() -> DVector<f64>,
    tol: f64,
    max_runs: usize,
) -> Result<SnapshotSet> {
    if max_runs == 0 {
        return Err(Error::Config("max_runs must be at least 1".into()));
    }
    let mut set = SnapshotSet {
        runs: Vec::new(),
        spectrum_history: Vec::new(),
        spectrum_changes: Vec::new(),
        duplicates_skipped: 0,
    };
    let mut consecutive_dups = 0usize;
    while set.runs.len() < max_runs {
        let xi = sampler();
        if set.runs.iter().any(|r| r.xi == xi) {
            set.duplicates_skipped += 1;
            consecutive_dups += 1;
            if consecutive_dups > 1000 {
                return Err(Error::Degenerate(
                    "snapshot sampler keeps returning duplicate points".into(),
                ));
            }
            continue;
        }
        consecutive_dups = 0;
        let field = kle.decode(&xi);
        let sim = fom::simulate(cfg, &field).map_err(|e| {
            Error::Degenerate(format!(
                "training run failed at xi = {:?}: {e}",
                xi.as_slice()
            ))
        })?;
        set.runs.push(TrainingRun { xi, sim });

        let spectrum = leading_spectrum(&set.column_states(), 20);
        let change = match set.spectrum_history.last() {
            Some(prev) => spectrum_change(prev, &spectrum),
            None => f64::INFINITY,
        };
        set.spectrum_history.push(spectrum);
        set.spectrum_changes.push(change);
        let quiet_twice = set.spectrum_changes.len() >= 2
            && set.spectrum_changes[set.spectrum_changes.len() - 2] <= tol;
        if change <= tol && (quiet_twice || set.runs.len() == 1) {
            break;
        }
    }
    Ok(set)
}

/// Scaled POD basis of one subdomain: `phi = U Sigma` truncated by the
/// energy criterion, separately for pressure and saturation.
#[derive(Debug, Clone, PartialEq)]
pub struct SubdomainBasis {
    pub phi_p: DMatrix<f64>,
    pub phi_s: DMatrix<f64>,
    /// Retained singular values (column scales).
    pub scales_p: DVector<f64>,
    pub scales_s: DVector<f64>,
    /// Full spectra for reporting.
    pub spectrum_p: Vec<f64>,
    pub spectrum_s: Vec<f64>,
}

impl SubdomainBasis {
    pub fn l_p(&self) -> usize {
        self.phi_p.ncols()
    }

    pub fn l_s(&self) -> usize {
        self.phi_s.ncols()
    }

    /// Width of the combined reduced state [psi_p; psi_s].
    pub fn l_state(&self) -> usize {
        self.l_p() + self.l_s()
    }
}

/// Per-subdomain POD bases plus the energy fractions they were built at.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    pub subs: Vec<SubdomainBasis>,
    pub energy_p: f64,
    pub energy_s: f64,
    pub warnings: Vec<String>,
}

impl PodBasis {
    pub fn n_subdomains(&self) -> usize {
        self.subs.len()
    }

    /// Total reduced state dimension across subdomains.
    pub fn total_state_dim(&self) -> usize {
        self.subs.iter().map(|b| b.l_state()).sum()
    }
}

/// Truncated scaled SVD of one variable block.
fn truncated_basis(
    matrix: &DMatrix<f64>,
    energy_fraction: f64,
) -> Result<(DMatrix<f64>, DVector<f64>, Vec<f64>)> {
    let svd = matrix.clone().svd(true, false);
    let u = svd.u.expect("svd with u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    if spectrum[0] <= 0.0 {
        // Zero-variance block: width-0 basis.
        return Ok((
            DMatrix::zeros(matrix.nrows(), 0),
            DVector::zeros(0),
            spectrum,
        ));
    }
    // The criterion sums the singular values themselves: snapshot blocks
    // are not centered (x = phi psi, and a zero state must reduce to zero
    // coefficients), so the leading value carries the mean state and a
    // squared criterion would truncate almost everything else away.
    let l = energy_truncation(&spectrum, energy_fraction)?;
    let mut phi = DMatrix::zeros(matrix.nrows(), l);
    let mut scales = DVector::zeros(l);
    for k in 0..l {
        scales[k] = spectrum[k];
        phi.set_column(k, &(u.column(order[k]) * spectrum[k]));
    }
    Ok((phi, scales, spectrum))
}

/// Build per-subdomain scaled POD bases from the snapshot set.
pub fn build_pod(
    snapshots: &SnapshotSet,
    layout: &SubdomainLayout,
    energy_p: f64,
    energy_s: f64,
) -> Result<PodBasis> {
    let states = snapshots.column_states();
    if states.len() < 2 {
        return Err(Error::Degenerate(
            "POD needs at least 2 snapshot columns".into(),
        ));
    }
    let results: Vec<Result<(SubdomainBasis, Option<String>)>> = (0..layout.n_subdomains())
        .into_par_iter()
        .map(|d| {
            let cells = layout.cells(d);
            let rows = cells.len();
            let cols = states.len();
            let mut p = DMatrix::zeros(rows, cols);
            let mut s = DMatrix::zeros(rows, cols);
            for (j, st) in states.iter().enumerate() {
                for (r, &c) in cells.iter().enumerate() {
                    p[(r, j)] = st.pressure[c];
                    s[(r, j)] = st.saturation[c];
                }
            }
            let (phi_p, scales_p, spectrum_p) = truncated_basis(&p, energy_p)?;
            let (phi_s, scales_s, spectrum_s) = truncated_basis(&s, energy_s)?;
            let warning = if phi_p.ncols() == 0 || phi_s.ncols() == 0 {
                Some(format!(
                    "subdomain {d}: zero-variance snapshot block, width-0 basis"
                ))
            } else {
                None
            };
            Ok((
                SubdomainBasis {
                    phi_p,
                    phi_s,
                    scales_p,
                    scales_s,
                    spectrum_p,
                    spectrum_s,
                },
                warning,
            ))
        })
        .collect();
    let mut subs = Vec::with_capacity(layout.n_subdomains());
    let mut warnings = Vec::new();
    for r in results {
        let (basis, warning) = r?;
        if let Some(w) = warning {
            warnings.push(w);
        }
        subs.push(basis);
    }
    Ok(PodBasis {
        subs,
        energy_p,
        energy_s,
        warnings,
    })
}

/// Project a full state onto the per-subdomain reduced coordinates
/// `psi^d = [Sigma_p^-1 U_p^T x_p; Sigma_s^-1 U_s^T x_s]`.
pub fn reduce(state: &StateField, basis: &PodBasis, layout: &SubdomainLayout) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(basis.n_subdomains());
    for d in 0..basis.n_subdomains() {
        let b = &basis.subs[d];
        let cells = layout.cells(d);
        let mut psi = DVector::zeros(b.l_state());
        for k in 0..b.l_p() {
            let mut dot = 0.0;
            for (r, &c) in cells.iter().enumerate() {
                dot += b.phi_p[(r, k)] * state.pressure[c];
            }
            psi[k] = dot / (b.scales_p[k] * b.scales_p[k]);
        }
        for k in 0..b.l_s() {
            let mut dot = 0.0;
            for (r, &c) in cells.iter().enumerate() {
                dot += b.phi_s[(r, k)] * state.saturation[c];
            }
            psi[b.l_p() + k] = dot / (b.scales_s[k] * b.scales_s[k]);
        }
        out.push(psi);
    }
    out
}

/// Assemble a full state from per-subdomain reduced coordinates.
pub fn reconstruct(
    psis: &[DVector<f64>],
    basis: &PodBasis,
    layout: &SubdomainLayout,
    n_cells: usize,
) -> StateField {
    let mut pressure = DVector::zeros(n_cells);
    let mut saturation = DVector::zeros(n_cells);
    for d in 0..basis.n_subdomains() {
        let b = &basis.subs[d];
        let cells = layout.cells(d);
        let psi = &psis[d];
        for (r, &c) in cells.iter().enumerate() {
            let mut pv = 0.0;
            for k in 0..b.l_p() {
                pv += b.phi_p[(r, k)] * psi[k];
            }
            pressure[c] = pv;
            let mut sv = 0.0;
            for k in 0..b.l_s() {
                sv += b.phi_s[(r, k)] * psi[b.l_p() + k];
            }
            saturation[c] = sv;
        }
    }
    StateField {
        pressure,
        saturation,
    }
}

/// Reduce every state of a run, including the initial one.
pub fn reduce_trajectory(
    sim: &SimResult,
    basis: &PodBasis,
    layout: &SubdomainLayout,
) -> Vec<Vec<DVector<f64>>> {
    sim.states
        .iter()
        .map(|s| reduce(s, basis, layout))
        .collect()
}

/// Two-sided perturbation design for the RBF training points: the
/// background (origin) plus +/- `delta` along each coordinate, then
/// `extra_random` simultaneous perturbations drawn uniformly from
/// `[-delta, delta]^l`.
pub fn rbf_training_points(
    l_beta: usize,
    delta: f64,
    extra_random: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let mut points = Vec::with_capacity(2 * l_beta + 1 + extra_random);
    points.push(DVector::zeros(l_beta));
    for j in 0..l_beta {
        for sign in [1.0, -1.0] {
            let mut p = DVector::zeros(l_beta);
            p[j] = sign * delta;
            points.push(p);
        }
    }
    if extra_random > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..extra_random {
            points.push(DVector::from_fn(l_beta, |_, _| {
                rng.random_range(-delta..=delta)
            }));
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::tests::base_config;
    use crate::geostat::{CovarianceModel, CovarianceSpec};
    use crate::grid::Grid2;

    fn tiny_setup() -> (ReservoirConfig, KleModel) {
        let mut cfg = base_config(6, 6);
        let g = cfg.grid.clone();
        cfg.wells = vec![
            crate::fom::Well {
                name: "I1".into(),
                cell: g.index(3, 3),
                control: crate::fom::WellControl::RateInjector { rate_m3_day: 40.0 },
            },
            crate::fom::Well {
                name: "P1".into(),
                cell: g.index(0, 0),
                control: crate::fom::WellControl::BhpProducer { bhp_pa: 25.0e6 },
            },
        ];
        cfg.n_steps = 4;
        cfg.meas_every = 2;
        let spec = CovarianceSpec {
            sigma: 2.0,
            corr_frac_x: 0.3,
            corr_frac_y: 0.3,
        };
        let model = CovarianceModel::from_spec(&spec, &cfg.grid).unwrap();
        let kle = model
            .kle(DVector::from_element(cfg.n_cells(), 200.0f64.ln()), 0.9)
            .unwrap();
        (cfg, kle)
    }

    #[test]
    fn infinite_tol_stops_after_one_run() {
        let (cfg, kle) = tiny_setup();
        let mut sampler = pm_one_sampler(kle.l_beta(), 5);
        let set = collect_snapshots(&cfg, &kle, &mut sampler, f64::INFINITY, 10).unwrap();
        assert_eq!(set.n_runs(), 1);
    }

    #[test]
    fn duplicate_points_are_skipped_without_a_run() {
        let (cfg, kle) = tiny_setup();
        let l = kle.l_beta();
        let seq = vec![
            DVector::from_element(l, 1.0),
            DVector::from_element(l, 1.0), // duplicate
            DVector::from_element(l, -1.0),
        ];
        let mut k = 0;
        let mut sampler = move || {
            let p = seq[k.min(2)].clone();
            k += 1;
            p
        };
        let set = collect_snapshots(&cfg, &kle, &mut sampler, 0.0, 2).unwrap();
        assert_eq!(set.n_runs(), 2);
        assert_eq!(set.duplicates_skipped, 1);
        assert_ne!(set.runs[0].xi, set.runs[1].xi);
    }

    #[test]
    fn spectrum_converges_with_reasonable_run_count() {
        let (cfg, kle) = tiny_setup();
        let mut sampler = pm_one_sampler(kle.l_beta(), 11);
        let set = collect_snapshots(&cfg, &kle, &mut sampler, 0.05, 40).unwrap();
        assert!(set.n_runs() >= 2);
        assert!(*set.spectrum_changes.last().unwrap() <= 0.05);
    }

    fn snapshot_fixture() -> (ReservoirConfig, SnapshotSet, SubdomainLayout) {
        let (cfg, kle) = tiny_setup();
        let mut sampler = pm_one_sampler(kle.l_beta(), 3);
        let set = collect_snapshots(&cfg, &kle, &mut sampler, 0.0, 4).unwrap();
        let layout = partition(&cfg.grid, 2, 2).unwrap();
        (cfg, set, layout)
    }

    #[test]
    fn full_energy_reproduces_snapshots_exactly() {
        let (cfg, set, layout) = snapshot_fixture();
        let basis = build_pod(&set, &layout, 1.0, 1.0).unwrap();
        let st = &set.runs[1].sim.states[2];
        let rec = reconstruct(&reduce(st, &basis, &layout), &basis, &layout, cfg.n_cells());
        let p_err = (rec.pressure - &st.pressure).amax() / st.pressure.amax();
        let s_err = (rec.saturation - &st.saturation).amax();
        assert!(p_err < 1e-8, "pressure reconstruction error {p_err:.3e}");
        assert!(s_err < 1e-8, "saturation reconstruction error {s_err:.3e}");
    }

    #[test]
    fn round_trip_is_identity_on_reduced_space() {
        let (cfg, set, layout) = snapshot_fixture();
        let basis = build_pod(&set, &layout, 0.95, 0.9).unwrap();
        let mut psis = Vec::new();
        for d in 0..basis.n_subdomains() {
            let l = basis.subs[d].l_state();
            psis.push(DVector::from_fn(l, |i, _| ((i + d) as f64 * 0.31).cos()));
        }
        let state = reconstruct(&psis, &basis, &layout, cfg.n_cells());
        let back = reduce(&state, &basis, &layout);
        for (a, b) in back.iter().zip(&psis) {
            assert!((a - b).amax() < 1e-10);
        }
        // Zero state reduces to zero coefficients.
        let zero = StateField {
            pressure: DVector::zeros(cfg.n_cells()),
            saturation: DVector::zeros(cfg.n_cells()),
        };
        for psi in reduce(&zero, &basis, &layout) {
            assert_eq!(psi.amax(), 0.0);
        }
    }

    #[test]
    fn truncation_error_matches_discarded_spectrum() {
        let (cfg, set, layout) = snapshot_fixture();
        let basis = build_pod(&set, &layout, 0.9, 0.85).unwrap();
        // Frobenius identity: sum over snapshots of the squared projection
        // residual equals the discarded sum of squared singular values.
        let states: Vec<&StateField> = set
            .runs
            .iter()
            .flat_map(|r| r.sim.states[1..].iter())
            .collect();
        let mut resid_p = 0.0;
        let mut resid_s = 0.0;
        for st in &states {
            let rec = reconstruct(&reduce(st, &basis, &layout), &basis, &layout, cfg.n_cells());
            resid_p += (rec.pressure - &st.pressure).norm_squared();
            resid_s += (rec.saturation - &st.saturation).norm_squared();
        }
        let mut expect_p = 0.0;
        let mut expect_s = 0.0;
        for b in &basis.subs {
            expect_p += b.spectrum_p[b.l_p()..].iter().map(|v| v * v).sum::<f64>();
            expect_s += b.spectrum_s[b.l_s()..].iter().map(|v| v * v).sum::<f64>();
        }
        assert!((resid_p - expect_p).abs() <= 1e-6 * expect_p.max(1e-9));
        assert!((resid_s - expect_s).abs() <= 1e-6 * expect_s.max(1e-9));
    }

    #[test]
    fn pod_beats_random_orthonormal_basis() {
        let (cfg, set, _) = snapshot_fixture();
        let single = partition(&cfg.grid, 1, 1).unwrap();
        let basis = build_pod(&set, &single, 0.9, 0.9).unwrap();
        let states: Vec<&StateField> = set
            .runs
            .iter()
            .flat_map(|r| r.sim.states[1..].iter())
            .collect();
        let mut pod_err = 0.0;
        for st in &states {
            let rec = reconstruct(&reduce(st, &basis, &single), &basis, &single, cfg.n_cells());
            pod_err += (rec.pressure - &st.pressure).norm_squared();
        }
        let l = basis.subs[0].l_p();
        let n = cfg.n_cells();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..5 {
            let random = DMatrix::from_fn(n, l, |_, _| rng.random_range(-1.0..1.0));
            let qr = random.qr();
            let q = qr.q();
            let mut rand_err = 0.0;
            for st in &states {
                let coeff = q.transpose() * &st.pressure;
                let rec = &q * coeff;
                rand_err += (rec - &st.pressure).norm_squared();
            }
            assert!(
                pod_err <= rand_err,
                "POD error {pod_err:.3e} worse than random basis {rand_err:.3e}"
            );
        }
    }

    #[test]
    fn scaled_basis_keeps_mode_coefficients_comparable() {
        let (_cfg, set, layout) = snapshot_fixture();
        let basis = build_pod(&set, &layout, 0.95, 0.9).unwrap();
        let states: Vec<&StateField> = set
            .runs
            .iter()
            .flat_map(|r| r.sim.states[1..].iter())
            .collect();
        for d in 0..basis.n_subdomains() {
            let l = basis.subs[d].l_state();
            let mut rms = vec![0.0; l];
            for st in &states {
                let psi = &reduce(st, &basis, &layout)[d];
                for k in 0..l {
                    rms[k] += psi[k] * psi[k];
                }
            }
            let rms: Vec<f64> = rms
                .iter()
                .map(|v| (v / states.len() as f64).sqrt())
                .collect();
            let lead = rms[0].max(1e-300);
            for (k, r) in rms.iter().enumerate() {
                assert!(
                    *r <= 10.0 * lead,
                    "mode {k} rms {r:.3e} above 10x leading {lead:.3e}"
                );
            }
        }
    }

    #[test]
    fn training_point_design_counts() {
        let pts = rbf_training_points(18, 1.0, 0, 0).unwrap();
        assert_eq!(pts.len(), 37);
        assert_eq!(pts[0], DVector::zeros(18));

        let pts = rbf_training_points(1, 1.0, 0, 0).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[1][0], 1.0);
        assert_eq!(pts[2][0], -1.0);

        let pts = rbf_training_points(4, 0.5, 5, 9).unwrap();
        assert_eq!(pts.len(), 2 * 4 + 1 + 5);
        for p in &pts[9..] {
            assert!(p.amax() <= 0.5);
        }
        // Reproducible extras.
        let again = rbf_training_points(4, 0.5, 5, 9).unwrap();
        assert_eq!(pts, again);
    }

    #[test]
    fn grid_helpers_partition_integration() {
        // partition is re-exported through rom for the pipeline.
        let grid = Grid2::new(9, 9, 1.0, 1.0, 1.0);
        let layout = partition(&grid, 3, 3).unwrap();
        assert_eq!(layout.n_subdomains(), 9);
    }
}
