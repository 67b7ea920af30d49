//! Stage-artifact persistence: each pipeline stage can be written to and
//! read back from a directory, using the documented binary layouts for
//! bulk numeric data and JSON manifests for structure.

use crate::fom::{LogPermField, ObservationSet, SimResult, StepDiagnostics, WellResponse};
use crate::geostat::KleModel;
use crate::io;
use crate::rom::{PodBasis, SnapshotSet, SubdomainLayout, SubdomainBasis, TrainingRun};
use crate::{Error, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

pub fn require(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(path.to_path_buf())
}

#[derive(Debug, Serialize, Deserialize)]
struct KleMeta {
    requested_fraction: f64,
    eigenvalues: Vec<f64>,
}

pub fn save_kle(dir: &Path, kle: &KleModel) -> Result<()> {
    mkdir(dir)?;
    io::write_vector(&dir.join("beta_b.rmx"), kle.beta_b())?;
    io::write_matrix(&dir.join("phi.rmx"), kle.phi())?;
    io::write_vector(&dir.join("mode_scales.rmx"), kle.mode_scales())?;
    io::save_json(
        &dir.join("kle.json"),
        &KleMeta {
            requested_fraction: kle.requested_fraction(),
            eigenvalues: kle.eigenvalues().to_vec(),
        },
    )?;
    let rows: Vec<Vec<f64>> = kle
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(i, &l)| vec![i as f64, l, l.sqrt()])
        .collect();
    io::write_csv(
        &dir.join("spectrum.csv"),
        &["mode", "eigenvalue", "singular_value"],
        &rows,
    )
}

pub fn load_kle(dir: &Path) -> Result<KleModel> {
    let beta_b = io::read_vector(&require(&dir.join("beta_b.rmx"))?)?;
    let phi = io::read_matrix(&require(&dir.join("phi.rmx"))?)?;
    let scales = io::read_vector(&require(&dir.join("mode_scales.rmx"))?)?;
    let meta: KleMeta = io::load_json(&require(&dir.join("kle.json"))?)?;
    KleModel::from_parts(beta_b, phi, scales, meta.eigenvalues, meta.requested_fraction)
}

pub fn save_field(path: &Path, field: &LogPermField) -> Result<()> {
    io::write_vector(path, &field.beta)
}

pub fn load_field(path: &Path) -> Result<LogPermField> {
    Ok(LogPermField::new(io::read_vector(&require(path)?)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    xi: Vec<f64>,
    responses: Vec<WellResponse>,
    diagnostics: Vec<StepDiagnostics>,
}

pub fn save_runs(dir: &Path, runs: &[TrainingRun], nx: usize, ny: usize) -> Result<()> {
    mkdir(dir)?;
    io::save_json(&dir.join("runs.json"), &runs.len())?;
    for (i, run) in runs.iter().enumerate() {
        io::write_states(&dir.join(format!("run_{i:03}_states.bin")), nx, ny, &run.sim.states)?;
        io::save_json(
            &dir.join(format!("run_{i:03}.json")),
            &RunMeta {
                xi: run.xi.as_slice().to_vec(),
                responses: run.sim.responses.clone(),
                diagnostics: run.sim.diagnostics.clone(),
            },
        )?;
    }
    Ok(())
}

pub fn load_runs(dir: &Path) -> Result<Vec<TrainingRun>> {
    let count: usize = io::load_json(&require(&dir.join("runs.json"))?)?;
    let mut runs = Vec::with_capacity(count);
    for i in 0..count {
        let (_, _, states) = io::read_states(&require(&dir.join(format!("run_{i:03}_states.bin")))?)?;
        let meta: RunMeta = io::load_json(&require(&dir.join(format!("run_{i:03}.json")))?)?;
        runs.push(TrainingRun {
            xi: DVector::from_vec(meta.xi),
            sim: SimResult {
                states,
                responses: meta.responses,
                diagnostics: meta.diagnostics,
            },
        });
    }
    Ok(runs)
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotMeta {
    spectrum_history: Vec<Vec<f64>>,
    spectrum_changes: Vec<f64>,
    duplicates_skipped: usize,
}

pub fn save_snapshots(dir: &Path, set: &SnapshotSet, nx: usize, ny: usize) -> Result<()> {
    save_runs(&dir.join("runs"), &set.runs, nx, ny)?;
    io::save_json(
        &dir.join("snapshots.json"),
        &SnapshotMeta {
            spectrum_history: set.spectrum_history.clone(),
            spectrum_changes: set.spectrum_changes.clone(),
            duplicates_skipped: set.duplicates_skipped,
        },
    )
}

pub fn load_snapshots(dir: &Path) -> Result<SnapshotSet> {
    let runs = load_runs(&dir.join("runs"))?;
    let meta: SnapshotMeta = io::load_json(&require(&dir.join("snapshots.json"))?)?;
    Ok(SnapshotSet {
        runs,
        spectrum_history: meta.spectrum_history,
        spectrum_changes: meta.spectrum_changes,
        duplicates_skipped: meta.duplicates_skipped,
    })
}

pub fn save_layout(path: &Path, layout: &SubdomainLayout) -> Result<()> {
    io::save_json(path, layout)
}

pub fn load_layout(path: &Path) -> Result<SubdomainLayout> {
    io::load_json(&require(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisMeta {
    energy_p: f64,
    energy_s: f64,
    warnings: Vec<String>,
    scales_p: Vec<Vec<f64>>,
    scales_s: Vec<Vec<f64>>,
    spectrum_p: Vec<Vec<f64>>,
    spectrum_s: Vec<Vec<f64>>,
}

pub fn save_basis(dir: &Path, basis: &PodBasis) -> Result<()> {
    mkdir(dir)?;
    for (d, sub) in basis.subs.iter().enumerate() {
        io::write_matrix(&dir.join(format!("sub_{d:02}_phi_p.rmx")), &sub.phi_p)?;
        io::write_matrix(&dir.join(format!("sub_{d:02}_phi_s.rmx")), &sub.phi_s)?;
    }
    io::save_json(
        &dir.join("basis.json"),
        &BasisMeta {
            energy_p: basis.energy_p,
            energy_s: basis.energy_s,
            warnings: basis.warnings.clone(),
            scales_p: basis.subs.iter().map(|s| s.scales_p.as_slice().to_vec()).collect(),
            scales_s: basis.subs.iter().map(|s| s.scales_s.as_slice().to_vec()).collect(),
            spectrum_p: basis.subs.iter().map(|s| s.spectrum_p.clone()).collect(),
            spectrum_s: basis.subs.iter().map(|s| s.spectrum_s.clone()).collect(),
        },
    )?;
    // Reduced-width table, one row per subdomain.
    let rows: Vec<Vec<f64>> = basis
        .subs
        .iter()
        .enumerate()
        .map(|(d, s)| vec![d as f64, s.l_p() as f64, s.l_s() as f64])
        .collect();
    io::write_csv(&dir.join("pod_table.csv"), &["subdomain", "l_p", "l_s"], &rows)
}

pub fn load_basis(dir: &Path) -> Result<PodBasis> {
    let meta: BasisMeta = io::load_json(&require(&dir.join("basis.json"))?)?;
    let n = meta.scales_p.len();
    let mut subs = Vec::with_capacity(n);
    for d in 0..n {
        let phi_p = io::read_matrix(&require(&dir.join(format!("sub_{d:02}_phi_p.rmx")))?)?;
        let phi_s = io::read_matrix(&require(&dir.join(format!("sub_{d:02}_phi_s.rmx")))?)?;
        subs.push(SubdomainBasis {
            phi_p,
            phi_s,
            scales_p: DVector::from_vec(meta.scales_p[d].clone()),
            scales_s: DVector::from_vec(meta.scales_s[d].clone()),
            spectrum_p: meta.spectrum_p[d].clone(),
            spectrum_s: meta.spectrum_s[d].clone(),
        });
    }
    Ok(PodBasis {
        subs,
        energy_p: meta.energy_p,
        energy_s: meta.energy_s,
        warnings: meta.warnings,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ObservationBundle {
    pub noisy: ObservationSet,
    pub clean: ObservationSet,
}

pub fn save_observations(path: &Path, bundle: &ObservationBundle) -> Result<()> {
    io::save_json(path, bundle)
}

pub fn load_observations(path: &Path) -> Result<ObservationBundle> {
    io::load_json(&require(path)?)
}
