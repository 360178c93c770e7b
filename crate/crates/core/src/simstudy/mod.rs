//! Replicated simulation study over the twelve scenario cells.
//!
//! A scenario fixes the series length, the monitor network (sparse or not) and
//! the prior specification. Every replicate simulates a fresh field, proxy,
//! monitor readings and counts, fits stage 1, draws `J` latent surfaces,
//! aggregates each by both block methods, propagates them through stage 2 with
//! `K` draws per fit and reduces everything to per-replicate metrics.
//!
//! All randomness is keyed by `(master seed, replicate, purpose)`, so outputs
//! are identical for any thread count, and changing `J` or `K` leaves the
//! simulated data unchanged.

pub mod generate;
pub mod layout;
pub mod metrics;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockagg::{AggregationMethod, GridSpec, OverlapTable};
use crate::error::{Error, Result};
use crate::geometry::BlockGeometry;
use crate::mesh::{build_mesh, build_projector, rectangle, Projector, TriangularMesh};
use crate::rng::{derive_seed, stream, substream, Stream};
use crate::stage1::{
    fit_model, predict_latent, HyperIntegration, ObservationSet, Stage1Config, Stage1Fit, Stage1Fixed, Stage1Hyper, Stage1Model,
    Stage1Priors,
};
use crate::stage2::{propagate_exposures, HealthData, PooledPosterior, Stage2Config, Stage2Priors, Stage2Samples};

pub use generate::{
    monitor_sites, simulate_health, simulate_monitors, simulate_proxy, FieldSimulator, Gamma1Reading, MonitorDesign,
    SimulatedField, TrueParams,
};
pub use metrics::{
    aggregate, compute_metrics, reduce_draws, BlockDraws, BlockMetrics, MetricsReport, ParameterDraws,
    ParameterMetrics, ReplicateFailure, ReplicateOutcome, ReplicateSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSpec {
    Informative,
    NonInformative,
}

/// The scenario grid: label, series length, sparse network, priors.
pub const SCENARIOS: [(&str, usize, bool, PriorSpec); 12] = [
    ("A", 3, false, PriorSpec::Informative),
    ("B", 3, false, PriorSpec::NonInformative),
    ("C", 3, true, PriorSpec::Informative),
    ("D", 3, true, PriorSpec::NonInformative),
    ("E", 6, false, PriorSpec::Informative),
    ("F", 6, false, PriorSpec::NonInformative),
    ("G", 6, true, PriorSpec::Informative),
    ("H", 6, true, PriorSpec::NonInformative),
    ("I", 12, false, PriorSpec::Informative),
    ("J", 12, false, PriorSpec::NonInformative),
    ("K", 12, true, PriorSpec::Informative),
    ("L", 12, true, PriorSpec::NonInformative),
];

pub fn scenario_labels() -> Vec<&'static str> {
    SCENARIOS.iter().map(|s| s.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// 30 × 30 grid, 50 replicates, `J = 20`, `K = 100`.
    Desk,
    /// 100 × 100 grid, 500 replicates, `J = 50`, `K = 200`.
    Full,
}

/// Default master seed shared by all presets, so scenarios see common random numbers.
pub const DEFAULT_SEED: u64 = 20_240_607;

/// Everything that defines one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub label: String,
    pub n_times: usize,
    pub sparse: bool,
    pub priors: PriorSpec,
    pub n_sim: usize,
    /// `J`: stage-1 latent surfaces per replicate.
    pub n_exposure_draws: usize,
    /// `K`: posterior draws per fitted model.
    pub n_posterior_draws: usize,
    /// Grid cells per side.
    pub grid_cells: usize,
    pub seed: u64,
    /// Side of the square study region.
    pub domain_width: f64,
    /// When set, overrides `truth.gamma1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1_reading: Option<Gamma1Reading>,
    pub expected_range: [f64; 2],
    pub fit_max_edge: f64,
    pub fit_buffer: f64,
    pub truth_max_edge: f64,
    pub truth_buffer: f64,
    pub integration: HyperIntegration,
    pub methods: Vec<AggregationMethod>,
    /// Replicate failures tolerated before the run counts as failed.
    pub max_failures: usize,
    /// Coefficient of variation of the informative inverse-gamma priors.
    pub informative_cv: f64,
    /// Prior sd of the calibration slope under informative priors.
    pub informative_alpha1_sd: f64,
    /// Prior sd of the AR transform under non-informative priors.
    pub ar_prior_sd: f64,
    pub monitors: MonitorDesign,
    pub truth: TrueParams,
}

impl ScenarioConfig {
    pub fn preset(label: &str, scale: Scale) -> Result<Self> {
        let &(label, n_times, sparse, priors) = SCENARIOS
            .iter()
            .find(|s| s.0 == label)
            .ok_or_else(|| unknown_label(label))?;
        let truth = TrueParams::default();
        let domain_width = 4.11;
        let (grid_cells, n_sim, j, k, fraction) = match scale {
            Scale::Desk => (30, 50, 20, 100, 0.2),
            Scale::Full => (100, 500, 50, 200, 0.02),
        };
        Ok(Self {
            label: label.to_string(),
            n_times,
            sparse,
            priors,
            n_sim,
            n_exposure_draws: j,
            n_posterior_draws: k,
            grid_cells,
            seed: DEFAULT_SEED,
            domain_width,
            gamma1_reading: None,
            expected_range: [50.0, 150.0],
            fit_max_edge: truth.rho / 4.0,
            fit_buffer: 0.3 * domain_width,
            truth_max_edge: truth.rho / 8.0,
            truth_buffer: truth.rho,
            integration: HyperIntegration::Mode,
            methods: AggregationMethod::ALL.to_vec(),
            max_failures: n_sim / 10,
            informative_cv: 0.1,
            informative_alpha1_sd: 0.1,
            ar_prior_sd: 0.15,
            monitors: MonitorDesign {
                non_sparse_fraction: fraction,
                sparse_count: 20,
            },
            truth,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario configuration serializes")
    }

    /// Generating values with the `γ₁` reading applied.
    pub fn resolved_truth(&self) -> TrueParams {
        let mut t = self.truth;
        if let Some(r) = self.gamma1_reading {
            t.gamma1 = r.value();
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let cell = SCENARIOS
            .iter()
            .find(|s| s.0 == self.label)
            .ok_or_else(|| unknown_label(&self.label))?;
        if (cell.1, cell.2, cell.3) != (self.n_times, self.sparse, self.priors) {
            return Err(Error::Config(format!(
                "scenario {} is T = {}, sparse = {}, priors = {:?}; config has T = {}, sparse = {}, priors = {:?}",
                cell.0, cell.1, cell.2, cell.3, self.n_times, self.sparse, self.priors
            )));
        }
        let positive = [
            ("n_sim", self.n_sim),
            ("n_exposure_draws", self.n_exposure_draws),
            ("n_posterior_draws", self.n_posterior_draws),
            ("grid_cells", self.grid_cells),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{key} must be at least 1")));
        }
        let lengths = [
            ("domain_width", self.domain_width),
            ("fit_max_edge", self.fit_max_edge),
            ("truth_max_edge", self.truth_max_edge),
            ("informative_cv", self.informative_cv),
            ("informative_alpha1_sd", self.informative_alpha1_sd),
            ("ar_prior_sd", self.ar_prior_sd),
        ];
        if let Some((key, v)) = lengths.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{key} must be positive, got {v}")));
        }
        if !(self.fit_buffer >= 0.0 && self.truth_buffer >= 0.0) {
            return Err(Error::Config("mesh buffers must be non-negative".into()));
        }
        let [lo, hi] = self.expected_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("expected_range must satisfy 0 < lo ≤ hi, got [{lo}, {hi}]")));
        }
        if self.methods.is_empty() || (1..self.methods.len()).any(|i| self.methods[..i].contains(&self.methods[i])) {
            return Err(Error::Config("methods must be a non-empty list without repeats".into()));
        }
        if !(self.monitors.non_sparse_fraction > 0.0 && self.monitors.non_sparse_fraction <= 1.0)
            || self.monitors.sparse_count == 0
        {
            return Err(Error::Config(
                "monitors need 0 < non_sparse_fraction ≤ 1 and sparse_count ≥ 1".into(),
            ));
        }
        self.resolved_truth().validate()
    }
}

fn unknown_label(label: &str) -> Error {
    Error::Config(format!(
        "unknown scenario label {label:?}; valid labels are {}",
        scenario_labels().join(", ")
    ))
}

/// Simulated inputs of one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub field: SimulatedField,
    /// Grid cells holding monitors.
    pub sites: Vec<usize>,
    pub obs: ObservationSet,
    pub health: HealthData,
}

/// Names of stage-1 quantities in metrics output, hyperparameters first.
pub const STAGE1_PARAMETERS: [&str; 9] = [
    "alpha1",
    "sigma2_e",
    "sigma2_delta",
    "varsigma",
    "sigma2_omega",
    "rho",
    "alpha0",
    "beta0",
    "beta1",
];

/// Block exposures and, when counts were supplied, the propagated stage-2
/// posterior of one aggregation method.
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub method: AggregationMethod,
    /// `J` blocks × times matrices.
    pub exposures: Vec<DMatrix<f64>>,
    pub stage2: Option<PooledPosterior>,
}

/// Both stages fitted to one data set.
#[derive(Debug, Clone)]
pub struct ObservedFit {
    pub stage1: Stage1Fit,
    pub hyper: Vec<Stage1Hyper>,
    pub fixed: Vec<Stage1Fixed>,
    pub methods: Vec<MethodFit>,
}

impl ObservedFit {
    /// Draws of the `index`-th entry of [`STAGE1_PARAMETERS`].
    pub fn stage1_draws(&self, index: usize) -> Vec<f64> {
        if index < 6 {
            self.hyper.iter().map(|h| h.as_array()[index]).collect()
        } else {
            self.fixed.iter().map(|f| [f.alpha0, f.beta0, f.beta1][index - 6]).collect()
        }
    }
}

/// Geometry, meshes and model settings shared by every replicate of a scenario.
#[derive(Debug, Clone)]
pub struct Study {
    pub config: ScenarioConfig,
    pub truth: TrueParams,
    pub blocks: Vec<BlockGeometry>,
    pub grid: GridSpec,
    pub simulator: FieldSimulator,
    pub fit_mesh: TriangularMesh,
    pub grid_projector: Projector,
    pub tables: Vec<(AggregationMethod, OverlapTable)>,
    /// Monitor cells; a fixed network shared by all replicates.
    pub sites: Vec<usize>,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Study {
    /// Scenario on the bundled 98-block layout scaled to the domain.
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        let blocks = layout::default_blocks(config.domain_width)?;
        Self::with_blocks(config, blocks)
    }

    pub fn with_blocks(config: ScenarioConfig, blocks: Vec<BlockGeometry>) -> Result<Self> {
        config.validate()?;
        let truth = config.resolved_truth();
        let w = config.domain_width;
        let grid = GridSpec::covering(0.0, 0.0, w, w, config.grid_cells, config.grid_cells)?;
        let simulator = FieldSimulator::new(&truth, &grid, &blocks, config.truth_max_edge, config.truth_buffer)?;
        let fit_mesh = build_mesh(&rectangle(0.0, 0.0, w, w), config.fit_max_edge, config.fit_buffer)?;
        let grid_projector = build_projector(&fit_mesh, &grid.centroids())?;
        let tables = config
            .methods
            .iter()
            .map(|&m| Ok((m, m.table(&blocks, &grid)?)))
            .collect::<Result<Vec<_>>>()?;
        let n_monitors = config.monitors.count(grid.n_cells(), config.sparse);
        let sites = monitor_sites(
            grid.n_cells(),
            n_monitors,
            &mut stream(config.seed, u64::MAX, Stream::Layout),
        );

        let stage1_priors = match config.priors {
            PriorSpec::Informative => Stage1Priors::informative(
                &truth.stage1_hyper(),
                config.informative_cv,
                config.informative_alpha1_sd,
            ),
            PriorSpec::NonInformative => {
                // A fifth of the mesh diameter.
                let extent = w + 2.0 * config.fit_buffer;
                Stage1Priors::non_informative(0.2 * std::f64::consts::SQRT_2 * extent, config.ar_prior_sd)
            }
        };
        let mut stage1 = Stage1Config::new(stage1_priors);
        stage1.integration = config.integration;
        let stage2 = Stage2Config::new(match config.priors {
            PriorSpec::Informative => Stage2Priors::informative(&truth.stage2_hyper()),
            PriorSpec::NonInformative => Stage2Priors::non_informative(),
        });
        Ok(Self {
            config,
            truth,
            blocks,
            grid,
            simulator,
            fit_mesh,
            grid_projector,
            tables,
            sites,
            stage1,
            stage2,
        })
    }

    pub fn block_ids(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.id.clone()).collect()
    }

    /// Simulates the data of one replicate.
    pub fn simulate(&self, replicate: usize) -> Result<ReplicateData> {
        let (seed, r, t) = (self.config.seed, replicate as u64, self.config.n_times);
        let field = self.simulator.simulate(
            t,
            &mut stream(seed, r, Stream::Field),
            &mut stream(seed, r, Stream::Covariate),
        );
        let w = simulate_monitors(&field, &self.sites, self.truth.sigma2_e, &mut stream(seed, r, Stream::Monitors));
        let x_tilde = simulate_proxy(
            &field.x,
            self.truth.alpha0,
            self.truth.alpha1,
            self.truth.sigma2_delta,
            &mut stream(seed, r, Stream::Proxy),
        );
        let areas: Vec<f64> = self.blocks.iter().map(BlockGeometry::area).collect();
        let [lo, hi] = self.config.expected_range;
        let health = simulate_health(
            &field.block_truth,
            &self.truth,
            &areas,
            (lo, hi),
            &mut stream(seed, r, Stream::Health),
        )?;
        let m = self.sites.len();
        let g = self.grid.n_cells();
        let z = DMatrix::from_fn(m + g, t, |i, tt| {
            let cell = if i < m { self.sites[i] } else { i - m };
            field.z[(cell, tt)]
        });
        let centroids = self.grid.centroids();
        let obs = ObservationSet::new(
            self.sites.iter().map(|&c| centroids[c]).collect(),
            w,
            centroids,
            x_tilde,
            z,
        )?;
        Ok(ReplicateData {
            field,
            sites: self.sites.clone(),
            obs,
            health,
        })
    }

    /// Fits stage 1 to `obs` and, when counts are given, propagates `J`
    /// aggregated surfaces through stage 2 for every configured method.
    ///
    /// `z_grid` holds the covariate at every grid cell (cells × times).
    pub fn fit_observed(
        &self,
        replicate: usize,
        obs: &ObservationSet,
        z_grid: &DMatrix<f64>,
        health: Option<&HealthData>,
    ) -> Result<ObservedFit> {
        let (seed, r) = (self.config.seed, replicate as u64);
        let (j, k) = (self.config.n_exposure_draws, self.config.n_posterior_draws);
        if z_grid.shape() != (self.grid.n_cells(), obs.n_times()) {
            return Err(Error::InvalidInput(format!(
                "grid covariate is {:?}, expected {:?}",
                z_grid.shape(),
                (self.grid.n_cells(), obs.n_times())
            )));
        }
        let model = Stage1Model::new(obs, &self.fit_mesh, self.stage1.fixed_precisions, self.stage1.priors.fixed)?;
        let stage1 = fit_model(&model, &self.stage1)?;
        let stage1_seed = derive_seed(seed, &[r, Stream::Stage1Samples as u64]);
        let hyper = stage1.sample_hyper(k, &mut substream(stage1_seed, 0));
        let fixed = stage1.sample_fixed(k, &mut substream(stage1_seed, 1));
        let latent = predict_latent(&stage1, &self.grid_projector, z_grid, j, &mut substream(stage1_seed, 2))?;
        let surfaces: Vec<DMatrix<f64>> = (0..j)
            .map(|s| DMatrix::from_fn(latent.n_points, latent.n_times, |g, t| latent.get(s, t, g)))
            .collect();

        let stage2_seed = derive_seed(seed, &[r, Stream::Stage2Samples as u64]);
        let mut methods = Vec::with_capacity(self.tables.len());
        for (method, table) in &self.tables {
            let exposures = surfaces
                .iter()
                .map(|s| table.apply_columns(s))
                .collect::<Result<Vec<_>>>()?;
            let stage2 = match health {
                Some(h) => Some(propagate_exposures(&exposures, h, &self.stage2, k, stage2_seed)?),
                None => None,
            };
            methods.push(MethodFit {
                method: *method,
                exposures,
                stage2,
            });
        }
        Ok(ObservedFit {
            stage1,
            hyper,
            fixed,
            methods,
        })
    }

    /// Fits both stages to one replicate's data and collects all posterior draws.
    pub fn fit_replicate(&self, replicate: usize, data: &ReplicateData) -> Result<ReplicateOutcome> {
        let fit = self.fit_observed(replicate, &data.obs, &data.field.z, Some(&data.health))?;
        let mut outcome = ReplicateOutcome::default();
        for (i, name) in STAGE1_PARAMETERS.iter().enumerate() {
            outcome.parameters.push(ParameterDraws {
                parameter: name.to_string(),
                method: None,
                truth: self.truth.get(name).expect("stage-1 parameter has a generating value"),
                draws: fit.stage1_draws(i),
            });
        }
        for m in fit.methods {
            let pooled = m.stage2.expect("counts were supplied");
            for (p, name) in Stage2Samples::PARAMETERS.iter().enumerate() {
                outcome.parameters.push(ParameterDraws {
                    parameter: name.to_string(),
                    method: Some(m.method),
                    truth: self.truth.get(name).expect("stage-2 parameter has a generating value"),
                    draws: pooled.samples.parameter(p).to_vec(),
                });
            }
            outcome.blocks.push(BlockDraws {
                method: m.method,
                truth: data.field.block_truth.clone(),
                draws: m.exposures,
            });
        }
        Ok(outcome)
    }

    pub fn run_replicate(&self, replicate: usize) -> Result<ReplicateSummary> {
        let data = self.simulate(replicate)?;
        let outcome = self.fit_replicate(replicate, &data)?;
        ReplicateSummary::from_outcome(replicate, &outcome)
    }

    pub fn run(&self) -> Result<MetricsReport> {
        self.run_with_progress(&|_, _| {})
    }

    /// Runs all replicates in parallel; `progress(replicate, ok)` fires as each finishes.
    pub fn run_with_progress(&self, progress: &(dyn Fn(usize, bool) + Sync)) -> Result<MetricsReport> {
        let results: Vec<Result<ReplicateSummary>> = (0..self.config.n_sim)
            .into_par_iter()
            .map(|i| {
                let r = self.run_replicate(i);
                progress(i, r.is_ok());
                r
            })
            .collect();
        let mut summaries = Vec::new();
        let mut failures = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(s) => summaries.push(s),
                Err(e) => failures.push(ReplicateFailure {
                    replicate: i,
                    message: e.to_string(),
                }),
            }
        }
        aggregate(&self.config.label, summaries, failures, &self.block_ids())
    }

    pub fn within_budget(&self, report: &MetricsReport) -> bool {
        report.n_failures() <= self.config.max_failures
    }
}

/// Runs every replicate of a scenario on the bundled layout.
pub fn run_scenario(config: &ScenarioConfig) -> Result<MetricsReport> {
    Study::new(config.clone())?.run()
}
