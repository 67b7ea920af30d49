//! Experiment configuration: plain-text TOML with sections mirroring the
//! usual reservoir-settings tables, plus reduction and matching knobs.

use crate::fom::{ReservoirConfig, Well, WellControl};
use crate::geostat::CovarianceSpec;
use crate::grid::Grid2;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidSection {
    /// Pa s.
    pub viscosity_water: f64,
    pub viscosity_oil: f64,
    /// kg/m^3.
    pub density_water: f64,
    pub density_oil: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RockSection {
    pub connate_water_saturation: f64,
    pub residual_oil_saturation: f64,
    pub corey_exponent_water: f64,
    pub corey_exponent_oil: f64,
    /// ln(permeability in mD); the background field is uniform at this
    /// value.
    pub mean_log_perm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    /// Pa.
    pub initial_pressure: f64,
    pub initial_water_saturation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub timestep_days: f64,
    /// History window, in steps.
    pub history_steps: usize,
    /// Measurements every this many steps.
    pub measurement_every: usize,
    /// Full horizon for forecasts, in steps (>= history_steps).
    pub forecast_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellsSection {
    /// "inverted-nine-spot" or "custom".
    pub pattern: String,
    /// m^3/day, applied to pattern injectors.
    pub injection_rate: f64,
    /// Pa, applied to pattern producers.
    pub producer_bhp: f64,
    pub well_radius: f64,
    /// Explicit wells, used when pattern = "custom".
    #[serde(default)]
    pub well: Vec<WellEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellEntry {
    pub name: String,
    pub i: usize,
    pub j: usize,
    /// "rate-injector" or "bhp-producer".
    pub kind: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeostatSection {
    pub sigma: f64,
    pub correlation_fraction_x: f64,
    pub correlation_fraction_y: f64,
    pub ensemble_count: usize,
    pub kle_energy_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RomSection {
    pub subdomain_rows: usize,
    pub subdomain_cols: usize,
    pub pod_energy_pressure: f64,
    pub pod_energy_saturation: f64,
    pub snapshot_tolerance: f64,
    pub max_snapshot_runs: usize,
    pub rbf_delta: f64,
    pub rbf_extra_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssimSection {
    /// Noise std as a fraction of the true datum.
    pub noise_fraction: f64,
    /// Absolute noise floor as a fraction of each signal type's maximum.
    pub noise_floor_fraction: f64,
    pub eta_j: f64,
    pub eta_xi: f64,
    pub max_inner_iterations: usize,
    pub max_outer_loops: usize,
    /// One-sided finite-difference step of the baseline method.
    pub fd_step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    /// Which ensemble member plays the truth.
    pub truth_index: usize,
}

/// Whole-experiment configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub fluid: FluidSection,
    pub rock: RockSection,
    pub init: InitSection,
    pub schedule: ScheduleSection,
    pub wells: WellsSection,
    pub geostat: GeostatSection,
    pub rom: RomSection,
    pub assim: AssimSection,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Desk-scale default: a quarter-resolution variant of the classic
    /// 50x50 waterflood, sized so the whole comparison runs in minutes.
    pub fn desk_default() -> Self {
        Self {
            grid: GridSection {
                nx: 25,
                ny: 25,
                dx: 40.0,
                dy: 40.0,
                dz: 10.0,
            },
            fluid: FluidSection {
                viscosity_water: 0.4e-3,
                viscosity_oil: 2.0e-3,
                density_water: 1014.0,
                density_oil: 859.0,
            },
            rock: RockSection {
                connate_water_saturation: 0.2,
                residual_oil_saturation: 0.2,
                corey_exponent_water: 4.0,
                corey_exponent_oil: 4.0,
                mean_log_perm: 200.0f64.ln(),
            },
            init: InitSection {
                initial_pressure: 30.0e6,
                initial_water_saturation: 0.2,
            },
            schedule: ScheduleSection {
                timestep_days: 36.5,
                history_steps: 50,
                measurement_every: 2,
                forecast_steps: 100,
            },
            wells: WellsSection {
                pattern: "inverted-nine-spot".into(),
                injection_rate: 200.0,
                producer_bhp: 25.0e6,
                well_radius: 0.1,
                well: Vec::new(),
            },
            geostat: GeostatSection {
                sigma: 5.0,
                correlation_fraction_x: 0.2,
                correlation_fraction_y: 0.2,
                ensemble_count: 200,
                kle_energy_fraction: 0.95,
            },
            rom: RomSection {
                subdomain_rows: 3,
                subdomain_cols: 3,
                pod_energy_pressure: 0.95,
                pod_energy_saturation: 0.9,
                snapshot_tolerance: 0.015,
                max_snapshot_runs: 30,
                rbf_delta: 1.0,
                rbf_extra_points: 0,
            },
            assim: AssimSection {
                noise_fraction: 0.05,
                noise_floor_fraction: 0.01,
                eta_j: 1e-4,
                eta_xi: 1e-3,
                max_inner_iterations: 30,
                max_outer_loops: 20,
                fd_step: 1e-2,
            },
            experiment: ExperimentSection {
                seed: 2024,
                truth_index: 18,
            },
        }
    }

    /// Full-resolution 50x50 variant.
    pub fn paper_default() -> Self {
        let mut cfg = Self::desk_default();
        cfg.grid = GridSection {
            nx: 50,
            ny: 50,
            dx: 20.0,
            dy: 20.0,
            dz: 10.0,
        };
        cfg.geostat.ensemble_count = 1000;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.forecast_steps < self.schedule.history_steps {
            return Err(Error::Config(
                "forecast_steps must be at least history_steps".into(),
            ));
        }
        if self.wells.pattern != "inverted-nine-spot" && self.wells.pattern != "custom" {
            return Err(Error::Config(format!(
                "unknown well pattern '{}'",
                self.wells.pattern
            )));
        }
        if self.wells.pattern == "custom" && self.wells.well.is_empty() {
            return Err(Error::Config("custom pattern needs [[wells.well]] entries".into()));
        }
        self.to_reservoir_config()?.validate()?;
        Ok(())
    }

    pub fn grid2(&self) -> Grid2 {
        Grid2::new(
            self.grid.nx,
            self.grid.ny,
            self.grid.dx,
            self.grid.dy,
            self.grid.dz,
        )
    }

    pub fn covariance_spec(&self) -> CovarianceSpec {
        CovarianceSpec {
            sigma: self.geostat.sigma,
            corr_frac_x: self.geostat.correlation_fraction_x,
            corr_frac_y: self.geostat.correlation_fraction_y,
        }
    }

    fn build_wells(&self) -> Result<Vec<Well>> {
        let g = self.grid2();
        if self.wells.pattern == "custom" {
            return self
                .wells
                .well
                .iter()
                .map(|w| {
                    if w.i >= g.nx || w.j >= g.ny {
                        return Err(Error::Config(format!(
                            "well {} at ({}, {}) outside the grid",
                            w.name, w.i, w.j
                        )));
                    }
                    let control = match w.kind.as_str() {
                        "rate-injector" => WellControl::RateInjector { rate_m3_day: w.value },
                        "bhp-producer" => WellControl::BhpProducer { bhp_pa: w.value },
                        other => {
                            return Err(Error::Config(format!(
                                "unknown well kind '{other}' for {}",
                                w.name
                            )))
                        }
                    };
                    Ok(Well {
                        name: w.name.clone(),
                        cell: g.index(w.i, w.j),
                        control,
                    })
                })
                .collect();
        }
        Ok(inverted_nine_spot(
            &g,
            self.wells.injection_rate,
            self.wells.producer_bhp,
        ))
    }

    fn reservoir_config_with_steps(&self, n_steps: usize) -> Result<ReservoirConfig> {
        Ok(ReservoirConfig {
            grid: self.grid2(),
            mu_w: self.fluid.viscosity_water,
            mu_o: self.fluid.viscosity_oil,
            rho_w: self.fluid.density_water,
            rho_o: self.fluid.density_oil,
            p_init_pa: self.init.initial_pressure,
            s_w_init: self.init.initial_water_saturation,
            s_wc: self.rock.connate_water_saturation,
            s_or: self.rock.residual_oil_saturation,
            n_w: self.rock.corey_exponent_water,
            n_o: self.rock.corey_exponent_oil,
            dt_days: self.schedule.timestep_days,
            n_steps,
            meas_every: self.schedule.measurement_every,
            wells: self.build_wells()?,
            well_radius_m: self.wells.well_radius,
            cfl_safety: 0.5,
        })
    }

    /// Simulator configuration over the history window.
    pub fn to_reservoir_config(&self) -> Result<ReservoirConfig> {
        self.reservoir_config_with_steps(self.schedule.history_steps)
    }

    /// Simulator configuration over the full forecast horizon.
    pub fn forecast_config(&self) -> Result<ReservoirConfig> {
        self.reservoir_config_with_steps(self.schedule.forecast_steps)
    }
}

/// One central injector surrounded by eight producers: corners plus edge
/// midpoints.
pub fn inverted_nine_spot(grid: &Grid2, rate_m3_day: f64, bhp_pa: f64) -> Vec<Well> {
    let (nx, ny) = (grid.nx, grid.ny);
    let cx = nx / 2;
    let cy = ny / 2;
    let mut wells = vec![Well {
        name: "I1".into(),
        cell: grid.index(cx, cy),
        control: WellControl::RateInjector { rate_m3_day },
    }];
    let corners_and_edges = [
        (0, 0),
        (cx, 0),
        (nx - 1, 0),
        (nx - 1, cy),
        (nx - 1, ny - 1),
        (cx, ny - 1),
        (0, ny - 1),
        (0, cy),
    ];
    for (k, (ix, iy)) in corners_and_edges.iter().enumerate() {
        wells.push(Well {
            name: format!("P{}", k + 1),
            cell: grid.index(*ix, *iy),
            control: WellControl::BhpProducer { bhp_pa },
        });
    }
    wells
}
