//! Shared fixtures for unit tests: a small but complete pipeline from
//! geostatistics through the assembled reduced model.

use crate::fom::{ReservoirConfig, Well, WellControl};
use crate::geostat::{CovarianceModel, CovarianceSpec, KleModel};
use crate::rom::{self, PodBasis, SnapshotSet, SubdomainLayout, TrainingRun};
use crate::tpwl::{TpwlConfig, TpwlSystem};
use nalgebra::DVector;

pub(crate) struct SmallPipeline {
    pub cfg: ReservoirConfig,
    pub kle: KleModel,
    pub snapshots: SnapshotSet,
    pub runs: Vec<TrainingRun>,
    pub system: TpwlSystem,
}

fn small_config() -> ReservoirConfig {
    let mut cfg = crate::fom::tests::base_config(8, 8);
    let g = cfg.grid.clone();
    cfg.wells = vec![
        Well {
            name: "I1".into(),
            cell: g.index(4, 4),
            control: WellControl::RateInjector { rate_m3_day: 60.0 },
        },
        Well {
            name: "P1".into(),
            cell: g.index(0, 0),
            control: WellControl::BhpProducer { bhp_pa: 25.0e6 },
        },
        Well {
            name: "P2".into(),
            cell: g.index(7, 0),
            control: WellControl::BhpProducer { bhp_pa: 25.0e6 },
        },
        Well {
            name: "P3".into(),
            cell: g.index(7, 7),
            control: WellControl::BhpProducer { bhp_pa: 25.0e6 },
        },
        Well {
            name: "P4".into(),
            cell: g.index(0, 7),
            control: WellControl::BhpProducer { bhp_pa: 25.0e6 },
        },
    ];
    cfg.n_steps = 6;
    cfg.meas_every = 2;
    cfg
}

fn build_with_layout(rows: usize, cols: usize) -> SmallPipeline {
    let cfg = small_config();
    let spec = CovarianceSpec {
        sigma: 2.0,
        corr_frac_x: 0.3,
        corr_frac_y: 0.3,
    };
    let cov = CovarianceModel::from_spec(&spec, &cfg.grid).unwrap();
    let kle = cov
        .kle(DVector::from_element(cfg.n_cells(), 200.0f64.ln()), 0.9)
        .unwrap();

    let mut sampler = rom::pm_one_sampler(kle.l_beta(), 17);
    let snapshots = rom::collect_snapshots(&cfg, &kle, &mut sampler, 0.0, 4).unwrap();
    let layout: SubdomainLayout = rom::partition(&cfg.grid, rows, cols).unwrap();
    let basis: PodBasis = rom::build_pod(&snapshots, &layout, 0.999, 0.995).unwrap();

    let points = rom::rbf_training_points(kle.l_beta(), 1.0, 0, 23).unwrap();
    let runs: Vec<TrainingRun> = points
        .into_iter()
        .map(|xi| {
            let field = kle.decode(&xi);
            let sim = crate::fom::simulate(&cfg, &field).unwrap();
            TrainingRun { xi, sim }
        })
        .collect();
    let system = TpwlSystem::build(
        &cfg,
        layout,
        basis,
        &runs,
        TpwlConfig::default(),
    )
    .unwrap();
    SmallPipeline {
        cfg,
        kle,
        snapshots,
        runs,
        system,
    }
}

pub(crate) fn small_pipeline() -> SmallPipeline {
    build_with_layout(2, 2)
}

pub(crate) fn small_pipeline_single() -> SmallPipeline {
    build_with_layout(1, 1)
}
