//! Generators for one synthetic replicate: latent field, monitors, proxy and counts.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::blockagg::{centroid_table, GridSpec, OverlapTable};
use crate::error::{Error, Result};
use crate::geometry::BlockGeometry;
use crate::gmrf::{spde_precision, MaternParams, SparsePrecision};
use crate::mesh::{assemble_fem, build_mesh, build_projector, rectangle, Projector};
use crate::stage1::{Stage1Fixed, Stage1Hyper};
use crate::stage2::{HealthData, Stage2Hyper};

/// Generating values of every model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParams {
    pub beta0: f64,
    pub beta1: f64,
    pub sigma2_omega: f64,
    pub rho: f64,
    pub varsigma: f64,
    pub sigma2_e: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub sigma2_delta: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub sigma2_phi: f64,
    pub sigma2_nu: f64,
}

/// How the stated exposure effect is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma1Reading {
    /// A 20% relative-risk increase per unit: `γ₁ = ln 1.2`.
    RelativeRisk,
    /// `ln γ₁ = 1.2`.
    Literal,
}

impl Gamma1Reading {
    pub fn value(self) -> f64 {
        match self {
            Gamma1Reading::RelativeRisk => 1.2f64.ln(),
            Gamma1Reading::Literal => 1.2f64.exp(),
        }
    }
}

impl Default for TrueParams {
    fn default() -> Self {
        Self {
            beta0: 0.0,
            beta1: 2.0,
            sigma2_omega: 1.5,
            rho: 1.89,
            varsigma: 0.7,
            sigma2_e: 0.1,
            alpha0: -1.0,
            alpha1: 1.5,
            sigma2_delta: 1.0,
            gamma0: -3.0,
            gamma1: Gamma1Reading::RelativeRisk.value(),
            sigma2_phi: 0.02,
            sigma2_nu: 0.02,
        }
    }
}

impl TrueParams {
    pub fn stage1_hyper(&self) -> Stage1Hyper {
        Stage1Hyper {
            alpha1: self.alpha1,
            sigma2_e: self.sigma2_e,
            sigma2_delta: self.sigma2_delta,
            varsigma: self.varsigma,
            sigma2_omega: self.sigma2_omega,
            rho: self.rho,
        }
    }

    pub fn stage1_fixed(&self) -> Stage1Fixed {
        Stage1Fixed {
            alpha0: self.alpha0,
            beta0: self.beta0,
            beta1: self.beta1,
        }
    }

    pub fn stage2_hyper(&self) -> Stage2Hyper {
        Stage2Hyper {
            sigma2_phi: self.sigma2_phi,
            sigma2_nu: self.sigma2_nu,
        }
    }

    /// Generating values keyed by the names used in metrics output.
    pub fn named(&self) -> [(&'static str, f64); 13] {
        [
            ("beta0", self.beta0),
            ("beta1", self.beta1),
            ("alpha0", self.alpha0),
            ("alpha1", self.alpha1),
            ("sigma2_delta", self.sigma2_delta),
            ("sigma2_e", self.sigma2_e),
            ("sigma2_omega", self.sigma2_omega),
            ("rho", self.rho),
            ("varsigma", self.varsigma),
            ("gamma0", self.gamma0),
            ("gamma1", self.gamma1),
            ("sigma2_phi", self.sigma2_phi),
            ("sigma2_nu", self.sigma2_nu),
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.named().iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1_hyper().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.stage2_hyper().validate().map_err(|e| Error::Config(e.to_string()))?;
        let finite = [self.beta0, self.beta1, self.alpha0, self.gamma0, self.gamma1]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("fixed effects must be finite".into()));
        }
        Ok(())
    }
}

/// One replicate of the true surface on the grid and its block averages.
#[derive(Debug, Clone)]
pub struct SimulatedField {
    /// Space-time random effect, cells × T.
    pub xi: DMatrix<f64>,
    /// Covariate, cells × T.
    pub z: DMatrix<f64>,
    /// `β₀ + β₁z + ξ`, cells × T.
    pub x: DMatrix<f64>,
    /// Mean of `x` over the cells whose centroids lie in each block, blocks × T.
    pub block_truth: DMatrix<f64>,
}

/// Draws the latent field on a fine SPDE mesh and interpolates it to the grid.
///
/// Innovations have the Matérn precision of `(σ²_ω, ρ)`; the first time slice is
/// scaled to the stationary variance `σ²_ω / (1 − ς²)`.
#[derive(Debug, Clone)]
pub struct FieldSimulator {
    precision: SparsePrecision,
    projector: Projector,
    truth_table: OverlapTable,
    varsigma: f64,
    beta0: f64,
    beta1: f64,
}

impl FieldSimulator {
    pub fn new(
        params: &TrueParams,
        grid: &GridSpec,
        blocks: &[BlockGeometry],
        max_edge: f64,
        buffer: f64,
    ) -> Result<Self> {
        params.validate()?;
        let (x0, y0, x1, y1) = grid.bounds();
        let mesh = build_mesh(&rectangle(x0, y0, x1, y1), max_edge, buffer)?;
        let fem = assemble_fem(&mesh);
        let precision = spde_precision(&fem, &MaternParams::new(params.sigma2_omega, params.rho)?)?;
        let projector = build_projector(&mesh, &grid.centroids())?;
        Ok(Self {
            precision,
            projector,
            truth_table: centroid_table(blocks, grid)?,
            varsigma: params.varsigma,
            beta0: params.beta0,
            beta1: params.beta1,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.projector.n_points()
    }

    /// The centroid-mean table that defines block truth.
    pub fn truth_table(&self) -> &OverlapTable {
        &self.truth_table
    }

    pub fn simulate<R: Rng + ?Sized, S: Rng + ?Sized>(
        &self,
        n_times: usize,
        field_rng: &mut R,
        covariate_rng: &mut S,
    ) -> SimulatedField {
        let g = self.n_cells();
        let mut xi = DMatrix::zeros(g, n_times);
        let mut nodes = vec![0.0; self.precision.dim()];
        let stationary = 1.0 / (1.0 - self.varsigma * self.varsigma).sqrt();
        for t in 0..n_times {
            let innovation = self.precision.sample(field_rng);
            for (v, w) in nodes.iter_mut().zip(&innovation) {
                *v = if t == 0 { stationary * w } else { self.varsigma * *v + w };
            }
            xi.column_mut(t).copy_from_slice(&self.projector.apply(&nodes));
        }
        let z = DMatrix::from_fn(g, n_times, |_, _| covariate_rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(g, n_times, |i, t| self.beta0 + self.beta1 * z[(i, t)] + xi[(i, t)]);
        let block_truth = self
            .truth_table
            .apply_columns(&x)
            .expect("truth table was built for this grid");
        SimulatedField { xi, z, x, block_truth }
    }
}

/// Monitor network design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorDesign {
    /// Fraction of grid cells holding a monitor in the non-sparse network.
    pub non_sparse_fraction: f64,
    /// Number of monitors in the sparse network.
    pub sparse_count: usize,
}

impl MonitorDesign {
    pub fn count(&self, n_cells: usize, sparse: bool) -> usize {
        let m = if sparse {
            self.sparse_count
        } else {
            (self.non_sparse_fraction * n_cells as f64).round() as usize
        };
        m.clamp(1, n_cells)
    }
}

/// Grid cells hosting monitors, drawn without replacement in draw order.
pub fn monitor_sites<R: Rng + ?Sized>(n_cells: usize, count: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, n_cells, count.min(n_cells)).into_vec()
}

/// Monitor readings `w = x + e`, sites × T, with `e ~ N(0, σ²_e)`.
pub fn simulate_monitors<R: Rng + ?Sized>(
    field: &SimulatedField,
    sites: &[usize],
    sigma2_e: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let sd = sigma2_e.max(0.0).sqrt();
    DMatrix::from_fn(sites.len(), field.x.ncols(), |m, t| {
        field.x[(sites[m], t)] + sd * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Proxy `x̃ = α₀ + α₁x + δ`, cells × T, with `δ ~ N(0, σ²_δ)`.
pub fn simulate_proxy<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    alpha0: f64,
    alpha1: f64,
    sigma2_delta: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let sd = sigma2_delta.max(0.0).sqrt();
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, t| {
        alpha0 + alpha1 * x[(i, t)] + sd * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Poisson counts given block truths.
///
/// `P_i = (area_i / mean area) · U_i` with `U_i ~ Uniform(expected_range)`,
/// constant over time; `φ ~ N(0, σ²_φ)`; `ν` a centred RW1 with increment
/// variance `σ²_ν`. The returned exposure is the block truth.
pub fn simulate_health<R: Rng + ?Sized>(
    block_truth: &DMatrix<f64>,
    params: &TrueParams,
    block_areas: &[f64],
    expected_range: (f64, f64),
    rng: &mut R,
) -> Result<HealthData> {
    let (n, nt) = block_truth.shape();
    if block_areas.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} block areas for {n} blocks",
            block_areas.len()
        )));
    }
    if !(expected_range.0 > 0.0 && expected_range.1 >= expected_range.0) {
        return Err(Error::Config(format!("invalid expected-count range {expected_range:?}")));
    }
    let mean_area = block_areas.iter().sum::<f64>() / n as f64;
    let uniform = Uniform::new_inclusive(expected_range.0, expected_range.1)
        .map_err(|e| Error::Config(e.to_string()))?;
    let expected: Vec<f64> = block_areas.iter().map(|a| a / mean_area * uniform.sample(rng)).collect();
    let phi_sd = params.sigma2_phi.max(0.0).sqrt();
    let phi: Vec<f64> = (0..n).map(|_| phi_sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let nu_sd = params.sigma2_nu.max(0.0).sqrt();
    let mut nu = vec![0.0; nt];
    for t in 1..nt {
        nu[t] = nu[t - 1] + nu_sd * rng.sample::<f64, _>(StandardNormal);
    }
    let nu_mean = nu.iter().sum::<f64>() / nt as f64;
    nu.iter_mut().for_each(|v| *v -= nu_mean);

    let mut counts = DMatrix::zeros(n, nt);
    for t in 0..nt {
        for i in 0..n {
            let eta = params.gamma0 + params.gamma1 * block_truth[(i, t)] + phi[i] + nu[t];
            let mu = expected[i] * eta.exp();
            counts[(i, t)] = if mu > 0.0 {
                Poisson::new(mu).map_err(|e| Error::Degenerate(format!("Poisson mean {mu}: {e}")))?.sample(rng)
            } else {
                0.0
            };
        }
    }
    let expected = DMatrix::from_fn(n, nt, |i, _| expected[i]);
    HealthData::new(counts, expected, block_truth.clone())
}
