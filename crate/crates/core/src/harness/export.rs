//! Raw result store and plot-ready CSV exports. The raw store keeps the
//! numbers (fields, responses, traces) in exact binary/JSON form; the
//! exporter derives deterministic CSV tables from it, so a re-export of
//! the same raw store is byte-identical.

use super::artifacts::{self, ObservationBundle};
use super::{ExperimentManifest, TwinOutcome};
use crate::fom::{ObsKind, WellResponse};
use crate::harness::ExperimentConfig;
use crate::io;
use crate::{Error, Result};
use nalgebra::DVector;
use std::fs;
use std::path::Path;

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write_raster(path: &Path, beta: &DVector<f64>, nx: usize) -> Result<()> {
    let rows: Vec<Vec<f64>> = beta
        .as_slice()
        .chunks(nx)
        .map(|chunk| chunk.to_vec())
        .collect();
    io::write_csv(path, &[], &rows)
}

/// Write the raw result store and the manifest under `out_dir`, recording
/// every artifact path in the manifest.
pub fn save_raw(outcome: &mut TwinOutcome, xc: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let raw = out_dir.join("raw");
    mkdir(&raw)?;
    xc.save(&out_dir.join("config.toml"))?;
    let mut record = |key: &str, path: &Path| {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        outcome
            .manifest
            .artifacts
            .insert(key.to_string(), rel.display().to_string());
    };

    let obs_path = raw.join("observations.json");
    artifacts::save_observations(
        &obs_path,
        &ObservationBundle {
            noisy: outcome.truth.observations.clone(),
            clean: outcome.truth.clean.clone(),
        },
    )?;
    record("observations", &obs_path);

    let truth_field = raw.join("truth_field.rmx");
    artifacts::save_field(&truth_field, &outcome.geo.truth)?;
    record("truth_field", &truth_field);

    let initial_field_path = raw.join("initial_field.rmx");
    io::write_vector(&initial_field_path, outcome.geo.kle.beta_b())?;
    record("initial_field", &initial_field_path);

    io::save_json(&raw.join("truth_forecast.json"), &outcome.truth.sim.responses)?;
    record("truth_forecast", &raw.join("truth_forecast.json"));
    io::save_json(
        &raw.join("initial_forecast.json"),
        &outcome.initial_forecast.responses,
    )?;
    record("initial_forecast", &raw.join("initial_forecast.json"));

    for (method, hm, forecast) in &outcome.matches {
        let dir = raw.join(format!("method_{}", method.name()));
        mkdir(&dir)?;
        let field = outcome.geo.kle.decode(&hm.xi);
        artifacts::save_field(&dir.join("updated_field.rmx"), &field)?;
        io::save_json(&dir.join("updated_forecast.json"), &forecast.responses)?;
        let traces: Vec<Vec<f64>> = hm.outers.iter().map(|o| o.inner.trace.clone()).collect();
        io::save_json(&dir.join("traces.json"), &traces)?;
        let true_costs: Vec<f64> = hm.outers.iter().map(|o| o.true_cost).collect();
        io::save_json(&dir.join("true_costs.json"), &true_costs)?;
        record(&format!("method_{}", method.name()), &dir);
    }
    if let Some((res, field, forecast)) = &outcome.fd_result {
        let dir = raw.join("method_fd");
        mkdir(&dir)?;
        artifacts::save_field(&dir.join("updated_field.rmx"), field)?;
        io::save_json(&dir.join("updated_forecast.json"), &forecast.responses)?;
        io::save_json(&dir.join("traces.json"), &vec![res.trace.clone()])?;
        io::save_json(&dir.join("true_costs.json"), &vec![*res.trace.last().unwrap()])?;
        record("method_fd", &dir);
    }

    if let Some(rml) = &outcome.rml {
        let dir = raw.join("rml");
        mkdir(&dir)?;
        for (k, field) in rml.posterior_fields.iter().enumerate() {
            artifacts::save_field(&dir.join(format!("member_{k:02}_field.rmx")), field)?;
        }
        let prior: Vec<Vec<WellResponse>> = rml
            .prior_forecasts
            .iter()
            .map(|s| s.responses.clone())
            .collect();
        let posterior: Vec<Vec<WellResponse>> = rml
            .posterior_forecasts
            .iter()
            .map(|s| s.responses.clone())
            .collect();
        io::save_json(&dir.join("prior_forecasts.json"), &prior)?;
        io::save_json(&dir.join("posterior_forecasts.json"), &posterior)?;
        let member_rows: Vec<Vec<f64>> = rml
            .results
            .iter()
            .enumerate()
            .map(|(k, r)| {
                vec![
                    k as f64,
                    *r.trace.first().unwrap(),
                    *r.trace.last().unwrap(),
                    (r.trace.len() - 1) as f64,
                ]
            })
            .collect();
        io::save_json(&dir.join("members.json"), &member_rows)?;
        record("rml", &dir);
    }

    io::save_json(&out_dir.join("manifest.json"), &outcome.manifest)?;
    Ok(())
}

fn kind_label(kind: &ObsKind) -> String {
    match kind {
        ObsKind::InjectorBhp(w) => format!("injector_bhp_w{w}"),
        ObsKind::ProducerRate(w) => format!("producer_rate_w{w}"),
        ObsKind::ProducerWct(w) => format!("producer_wct_w{w}"),
    }
}

/// Per-forecast-step well series of one model alongside the truth.
fn wells_series_rows(
    truth: &[WellResponse],
    initial: &[WellResponse],
    updated: &[WellResponse],
) -> (Vec<String>, Vec<Vec<f64>>) {
    let n_inj = truth[0].injector_bhp_pa.len();
    let n_prod = truth[0].producer_rate_m3_day.len();
    let mut header = vec!["time_days".to_string()];
    for i in 0..n_inj {
        for src in ["truth", "initial", "updated"] {
            header.push(format!("i{i}_bhp_{src}"));
        }
    }
    for p in 0..n_prod {
        for src in ["truth", "initial", "updated"] {
            header.push(format!("p{p}_rate_{src}"));
        }
        for src in ["truth", "initial", "updated"] {
            header.push(format!("p{p}_wct_{src}"));
        }
    }
    let steps = truth.len().min(initial.len()).min(updated.len());
    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut row = vec![truth[t].time_days];
        for i in 0..n_inj {
            for r in [&truth[t], &initial[t], &updated[t]] {
                row.push(r.injector_bhp_pa[i]);
            }
        }
        for p in 0..n_prod {
            for r in [&truth[t], &initial[t], &updated[t]] {
                row.push(r.producer_rate_m3_day[p]);
            }
            for r in [&truth[t], &initial[t], &updated[t]] {
                row.push(r.producer_wct[p]);
            }
        }
        rows.push(row);
    }
    (header, rows)
}

/// Derive all plot CSVs from a previously written raw store. Fails by
/// naming the first missing artifact.
pub fn export_plots_from_dir(out_dir: &Path) -> Result<()> {
    let manifest: ExperimentManifest =
        io::load_json(&artifacts::require(&out_dir.join("manifest.json"))?)?;
    let raw = out_dir.join("raw");
    let plots = out_dir.join("plots");
    mkdir(&plots)?;
    let (nx, _ny) = manifest.grid;

    // Observations table.
    let bundle = artifacts::load_observations(&raw.join("observations.json"))?;
    let mut rows = Vec::new();
    for t in 0..bundle.noisy.n_times() {
        for k in 0..bundle.noisy.n_data_per_time() {
            rows.push((
                kind_label(&bundle.noisy.kinds[k]),
                vec![
                    bundle.noisy.steps[t] as f64,
                    bundle.noisy.time_days[t],
                    bundle.clean.values[t][k],
                    bundle.noisy.values[t][k],
                    bundle.noisy.sigma[t][k],
                ],
            ));
        }
    }
    io::write_csv_labeled(
        &plots.join("observations.csv"),
        &["kind", "step", "time_days", "clean", "noisy", "sigma"],
        &rows,
    )?;

    // Field rasters.
    let truth_field = io::read_vector(&artifacts::require(&raw.join("truth_field.rmx"))?)?;
    write_raster(&plots.join("field_truth.csv"), &truth_field, nx)?;
    let initial_field = io::read_vector(&artifacts::require(&raw.join("initial_field.rmx"))?)?;
    write_raster(&plots.join("field_initial.csv"), &initial_field, nx)?;

    let truth_forecast: Vec<WellResponse> =
        io::load_json(&artifacts::require(&raw.join("truth_forecast.json"))?)?;
    let initial_forecast: Vec<WellResponse> =
        io::load_json(&artifacts::require(&raw.join("initial_forecast.json"))?)?;

    for m in &manifest.methods {
        let dir = raw.join(format!("method_{}", m.method));
        artifacts::require(&dir)?;
        let updated_field = io::read_vector(&artifacts::require(&dir.join("updated_field.rmx"))?)?;
        write_raster(
            &plots.join(format!("field_updated_{}.csv", m.method)),
            &updated_field,
            nx,
        )?;
        let traces: Vec<Vec<f64>> =
            io::load_json(&artifacts::require(&dir.join("traces.json"))?)?;
        let mut trace_rows = Vec::new();
        for (outer, trace) in traces.iter().enumerate() {
            for (it, cost) in trace.iter().enumerate() {
                trace_rows.push(vec![(outer + 1) as f64, it as f64, *cost]);
            }
        }
        io::write_csv(
            &plots.join(format!("cost_trace_{}.csv", m.method)),
            &["outer_loop", "iteration", "cost"],
            &trace_rows,
        )?;
        let updated_forecast: Vec<WellResponse> =
            io::load_json(&artifacts::require(&dir.join("updated_forecast.json"))?)?;
        let (header, rows) = wells_series_rows(&truth_forecast, &initial_forecast, &updated_forecast);
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        io::write_csv(
            &plots.join(format!("wells_{}.csv", m.method)),
            &header_refs,
            &rows,
        )?;
    }

    if let Some(rml) = &manifest.rml {
        let dir = raw.join("rml");
        artifacts::require(&dir)?;
        io::write_csv(
            &plots.join("rml_spread.csv"),
            &["prior_spread", "posterior_spread", "ratio"],
            &[vec![rml.prior_spread, rml.posterior_spread, rml.spread_ratio]],
        )?;
        let member_rows: Vec<Vec<f64>> =
            io::load_json(&artifacts::require(&dir.join("members.json"))?)?;
        io::write_csv(
            &plots.join("rml_members.csv"),
            &["member", "initial_cost", "final_cost", "iterations"],
            &member_rows,
        )?;
        for k in 0..rml.members {
            let f = io::read_vector(&artifacts::require(
                &dir.join(format!("member_{k:02}_field.rmx")),
            )?)?;
            write_raster(&plots.join(format!("rml_field_{k:02}.csv")), &f, nx)?;
        }
        // Across-ensemble WCT variance per forecast step, prior vs
        // posterior, averaged over producers.
        let prior: Vec<Vec<WellResponse>> =
            io::load_json(&artifacts::require(&dir.join("prior_forecasts.json"))?)?;
        let posterior: Vec<Vec<WellResponse>> =
            io::load_json(&artifacts::require(&dir.join("posterior_forecasts.json"))?)?;
        let n_steps = prior[0].len();
        let n_prod = prior[0][0].producer_wct.len();
        let var_at = |ens: &[Vec<WellResponse>], t: usize| -> f64 {
            let mut total = 0.0;
            for p in 0..n_prod {
                let vals: Vec<f64> = ens.iter().map(|m| m[t].producer_wct[p]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (vals.len() - 1).max(1) as f64;
            }
            total / n_prod as f64
        };
        let rows: Vec<Vec<f64>> = (0..n_steps)
            .map(|t| {
                vec![
                    prior[0][t].time_days,
                    var_at(&prior, t),
                    var_at(&posterior, t),
                ]
            })
            .collect();
        io::write_csv(
            &plots.join("rml_wct_spread_series.csv"),
            &["time_days", "prior_variance", "posterior_variance"],
            &rows,
        )?;
    }
    Ok(())
}
