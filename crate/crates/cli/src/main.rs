//! Command-line driver for the subdomain POD-TPWL history-matching
//! toolkit. Subcommands mirror the pipeline stages; `match` runs the whole
//! twin experiment for the chosen methods. Every stage is deterministic
//! under the config seed, so staged artifacts and end-to-end runs agree.

use clap::{Args, Parser, Subcommand};
use podtpwl::harness::{self, artifacts, export, ExperimentConfig, Method};
use podtpwl::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "podtpwl", about = "Subdomain POD-TPWL reservoir history matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Omit to use the built-in
    /// desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output/artifact directory.
    #[arg(long, default_value = "artifacts")]
    out: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in configuration to a file for editing.
    InitConfig {
        /// Target path.
        #[arg(long, default_value = "experiment.toml")]
        path: PathBuf,
        /// Use the full-resolution 50x50 settings.
        #[arg(long)]
        paper: bool,
    },
    /// Generate the covariance model, KL expansion and truth realization.
    GenEnsemble(Common),
    /// Run the full-order truth simulation and write noisy observations.
    RunFom(Common),
    /// Collect snapshots, partition the domain and build the POD bases.
    BuildRom(Common),
    /// Run the perturbation-design training simulations and assemble the
    /// reduced linear model.
    BuildTpwl(Common),
    /// History-match the observations with the selected methods.
    Match {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list: sd, gd, fd.
        #[arg(long, default_value = "sd")]
        method: String,
        /// Override the outer-loop cap.
        #[arg(long)]
        outer_max: Option<usize>,
    },
    /// Randomized-maximum-likelihood ensemble against the shared reduced
    /// model.
    Rml {
        #[command(flatten)]
        common: Common,
        /// Number of background parameter sets.
        #[arg(long, default_value_t = 20)]
        backgrounds: usize,
    },
    /// Re-derive the plot CSV tables from a previous run's raw store.
    Export {
        /// Artifact directory of a previous `match`/`rml` run.
        #[arg(long, default_value = "artifacts")]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> podtpwl::Result<ExperimentConfig> {
    let mut xc = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk_default(),
    };
    if let Some(seed) = common.seed {
        xc.experiment.seed = seed;
    }
    xc.validate()?;
    Ok(xc)
}

fn mkdirs(dir: &Path) -> podtpwl::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| podtpwl::Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn cmd_gen_ensemble(common: &Common) -> podtpwl::Result<()> {
    let xc = load_config(common)?;
    let geo = harness::stage_geostat(&xc)?;
    let dir = common.out.join("geo");
    mkdirs(&dir)?;
    artifacts::save_kle(&dir.join("kle"), &geo.kle)?;
    artifacts::save_field(&dir.join("truth_field.rmx"), &geo.truth)?;
    io::write_vector(&dir.join("ensemble_std.rmx"), &geo.ensemble_std)?;
    println!(
        "geostat: {} cells, ensemble of {}, l_beta = {} at {:.0}% energy",
        geo.kle.n_cells(),
        geo.ensemble_count,
        geo.kle.l_beta(),
        100.0 * geo.kle.requested_fraction()
    );
    Ok(())
}

fn cmd_run_fom(common: &Common) -> podtpwl::Result<()> {
    let xc = load_config(common)?;
    let geo = harness::stage_geostat(&xc)?;
    let truth = harness::stage_truth(&xc, &geo)?;
    let dir = common.out.join("fom");
    mkdirs(&dir)?;
    let g = xc.grid2();
    io::write_states(&dir.join("truth_states.bin"), g.nx, g.ny, &truth.sim.states)?;
    io::save_json(&dir.join("truth_responses.json"), &truth.sim.responses)?;
    artifacts::save_observations(
        &dir.join("observations.json"),
        &artifacts::ObservationBundle {
            noisy: truth.observations.clone(),
            clean: truth.clean.clone(),
        },
    )?;
    println!(
        "truth run: {} steps, {} observed scalars over {} times",
        truth.sim.states.len() - 1,
        truth.observations.total_scalars(),
        truth.observations.n_times()
    );
    Ok(())
}

fn cmd_build_rom(common: &Common) -> podtpwl::Result<()> {
    let xc = load_config(common)?;
    let geo = harness::stage_geostat(&xc)?;
    let snapshots = harness::stage_snapshots(&xc, &geo.kle)?;
    let (layout, basis) = harness::stage_rom(
        &xc,
        &snapshots,
        xc.rom.subdomain_rows,
        xc.rom.subdomain_cols,
    )?;
    let dir = common.out.join("rom");
    mkdirs(&dir)?;
    let g = xc.grid2();
    artifacts::save_snapshots(&dir.join("snapshots"), &snapshots, g.nx, g.ny)?;
    artifacts::save_layout(&dir.join("layout.json"), &layout)?;
    artifacts::save_basis(&dir.join("basis"), &basis)?;
    for w in &basis.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "rom: {} snapshot runs, {} subdomains, total reduced state dim {}",
        snapshots.n_runs(),
        layout.n_subdomains(),
        basis.total_state_dim()
    );
    Ok(())
}

fn cmd_build_tpwl(common: &Common) -> podtpwl::Result<()> {
    let xc = load_config(common)?;
    let geo = harness::stage_geostat(&xc)?;
    let snapshots = harness::stage_snapshots(&xc, &geo.kle)?;
    let (layout, basis) = harness::stage_rom(
        &xc,
        &snapshots,
        xc.rom.subdomain_rows,
        xc.rom.subdomain_cols,
    )?;
    let runs = harness::stage_training_runs(&xc, &geo.kle)?;
    let system = harness::build_system(&xc, layout, basis, &runs)?;
    let dir = common.out.join("tpwl");
    mkdirs(&dir)?;
    let g = xc.grid2();
    artifacts::save_runs(&dir.join("runs"), &runs, g.nx, g.ny)?;
    let shapes: Vec<(usize, usize)> = (0..system.layout().n_subdomains())
        .map(|d| {
            (
                system.basis().subs[d].l_state(),
                system.obs_entries()[d].len(),
            )
        })
        .collect();
    io::save_json(
        &dir.join("tpwl_manifest.json"),
        &serde_json::json!({
            "training_points": system.n_trajectories(),
            "n_steps": system.n_steps(),
            "measurement_steps": system.meas_steps(),
            "per_subdomain_state_and_data_dims": shapes,
            "max_kernel_condition": system.max_condition,
        }),
    )?;
    println!(
        "tpwl: {} training points, worst kernel condition {:.3e}",
        system.n_trajectories(),
        system.max_condition
    );
    Ok(())
}

fn cmd_match(common: &Common, method: &str, outer_max: Option<usize>) -> podtpwl::Result<()> {
    let mut xc = load_config(common)?;
    if let Some(cap) = outer_max {
        xc.assim.max_outer_loops = cap;
    }
    let methods: Vec<Method> = method
        .split(',')
        .filter(|s| !s.is_empty())
        .map(Method::parse)
        .collect::<podtpwl::Result<_>>()?;
    mkdirs(&common.out)?;
    let manifest = harness::run_twin(&xc, &methods, None, &common.out)?;
    for row in &manifest.methods {
        println!(
            "{}: e_obs {:.3} -> {:.3}, e_beta {:.3} -> {:.3}, 2J {:.1} (band [{:.1}, {:.1}]), \
             {} FOM runs, accepted: {}",
            row.method,
            row.e_obs_initial,
            row.e_obs_final,
            row.e_beta_initial,
            row.e_beta_final,
            2.0 * row.cost_final,
            row.band_lo,
            row.band_hi,
            row.fom_total,
            row.accepted
        );
    }
    println!("manifest: {}", common.out.join("manifest.json").display());
    Ok(())
}

fn cmd_rml(common: &Common, backgrounds: usize) -> podtpwl::Result<()> {
    let xc = load_config(common)?;
    mkdirs(&common.out)?;
    let manifest = harness::run_twin(&xc, &[Method::Sd], Some(backgrounds), &common.out)?;
    if let Some(rml) = &manifest.rml {
        println!(
            "rml: {} members, 0 additional matching FOM runs, spread {:.3e} -> {:.3e} (ratio {:.3})",
            rml.members, rml.prior_spread, rml.posterior_spread, rml.spread_ratio
        );
    }
    Ok(())
}

fn run() -> podtpwl::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::InitConfig { path, paper } => {
            let cfg = if *paper {
                ExperimentConfig::paper_default()
            } else {
                ExperimentConfig::desk_default()
            };
            cfg.save(path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::GenEnsemble(common) => cmd_gen_ensemble(common),
        Command::RunFom(common) => cmd_run_fom(common),
        Command::BuildRom(common) => cmd_build_rom(common),
        Command::BuildTpwl(common) => cmd_build_tpwl(common),
        Command::Match {
            common,
            method,
            outer_max,
        } => cmd_match(common, method, *outer_max),
        Command::Rml {
            common,
            backgrounds,
        } => cmd_rml(common, *backgrounds),
        Command::Export { out } => {
            export::export_plots_from_dir(out)?;
            println!("plots written under {}", out.join("plots").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
