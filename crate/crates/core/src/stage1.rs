//! First-stage fusion model: point monitors and a gridded proxy are noisy
//! views of one latent space-time field.
//!
//! The latent vector `χ` is laid out time-major within each block:
//! `x` (n·T), `x*` (n·T), `ξ` (D·T), then `α₀`, `β₀`, `β₁`, where the n = M + G
//! sites are ordered monitors first and D is the number of mesh nodes.
//! Observation rows, in order, are monitor readings, proxy values,
//! pseudo-zeros tying `x` to `β₀ + β₁z + Bξ`, and copy rows tying `x*` to `x`
//! (monitors) or `α₁x` (proxy cells).
//!
//! Every hyperparameter enters the posterior precision
//! `P = Q(θ) + AᵀWA` through a handful of fixed coefficient arrays aligned on
//! one sparse pattern, so the fill-reducing analysis is done once per data
//! set and each evaluation of the marginal likelihood is one numeric
//! factorization.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cholesky::{Cholesky, Symbolic};
use crate::error::{Error, Result};
use crate::geometry::Point2D;
use crate::gmrf::{ar1_matrix, kron_matrix, MaternParams, SpdeOperator};
use crate::mesh::{assemble_fem, build_projector, FemMatrices, Projector, TriangularMesh};
use crate::optim::{covariance_from_hessian, fd_hessian, minimize, Bounds, OptimOptions};
use crate::priors::{ar_from_internal, ar_to_internal, MaternPrior, ScalarPrior};
use crate::sparse::{weighted_gram, CscMatrix, SymMatrix, Triplets};
use crate::stats::{mean, variance, ParameterSummary};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Monitor and proxy data for one fit. Matrices are sites × times.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub monitor_locations: Vec<Point2D>,
    pub w: DMatrix<f64>,
    pub proxy_centroids: Vec<Point2D>,
    pub x_tilde: DMatrix<f64>,
    /// Covariate at monitors followed by centroids.
    pub z: DMatrix<f64>,
}

impl ObservationSet {
    pub fn new(
        monitor_locations: Vec<Point2D>,
        w: DMatrix<f64>,
        proxy_centroids: Vec<Point2D>,
        x_tilde: DMatrix<f64>,
        z: DMatrix<f64>,
    ) -> Result<Self> {
        let (m, g, t) = (monitor_locations.len(), proxy_centroids.len(), w.ncols());
        if m == 0 || g == 0 || t == 0 {
            return Err(Error::InvalidInput("need at least one monitor, one proxy cell and one time".into()));
        }
        if w.nrows() != m || x_tilde.shape() != (g, t) || z.shape() != (m + g, t) {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: M={m}, G={g}, T={t} but w is {:?}, x_tilde {:?}, z {:?}",
                w.shape(),
                x_tilde.shape(),
                z.shape()
            )));
        }
        let finite = w.iter().chain(x_tilde.iter()).chain(z.iter()).all(|v| v.is_finite())
            && monitor_locations.iter().chain(&proxy_centroids).all(Point2D::is_finite);
        if !finite {
            return Err(Error::InvalidInput("observations must be finite".into()));
        }
        Ok(Self {
            monitor_locations,
            w,
            proxy_centroids,
            x_tilde,
            z,
        })
    }

    pub fn n_monitors(&self) -> usize {
        self.monitor_locations.len()
    }

    pub fn n_proxy(&self) -> usize {
        self.proxy_centroids.len()
    }

    pub fn n_times(&self) -> usize {
        self.w.ncols()
    }

    /// Monitors followed by centroids.
    pub fn sites(&self) -> Vec<Point2D> {
        self.monitor_locations.iter().chain(&self.proxy_centroids).copied().collect()
    }
}

pub const HYPER_NAMES: [&str; 6] = ["alpha1", "sigma2_e", "sigma2_delta", "varsigma", "sigma2_omega", "rho"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Hyper {
    pub alpha1: f64,
    pub sigma2_e: f64,
    pub sigma2_delta: f64,
    pub varsigma: f64,
    pub sigma2_omega: f64,
    pub rho: f64,
}

impl Stage1Hyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha1.is_finite()
            && self.sigma2_e > 0.0
            && self.sigma2_delta > 0.0
            && self.varsigma.abs() < 1.0
            && self.sigma2_omega > 0.0
            && self.rho > 0.0
            && [self.sigma2_e, self.sigma2_delta, self.sigma2_omega, self.rho]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid stage-1 hyperparameters: {self:?}")))
        }
    }

    /// `(α₁, log σ²_e, log σ²_δ, log((1+ς)/(1−ς)), log σ²_ω, log ρ)`.
    pub fn to_internal(&self) -> [f64; 6] {
        [
            self.alpha1,
            self.sigma2_e.ln(),
            self.sigma2_delta.ln(),
            ar_to_internal(self.varsigma),
            self.sigma2_omega.ln(),
            self.rho.ln(),
        ]
    }

    pub fn from_internal(u: &[f64]) -> Self {
        Self {
            alpha1: u[0],
            sigma2_e: u[1].exp(),
            sigma2_delta: u[2].exp(),
            varsigma: ar_from_internal(u[3]),
            sigma2_omega: u[4].exp(),
            rho: u[5].exp(),
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.alpha1,
            self.sigma2_e,
            self.sigma2_delta,
            self.varsigma,
            self.sigma2_omega,
            self.rho,
        ]
    }

    fn matern(&self) -> Result<MaternParams> {
        MaternParams::new(self.sigma2_omega, self.rho)
    }
}

/// Back-transform of internal coordinate `index` and its derivative.
fn back_transform(index: usize, u: f64) -> (f64, f64) {
    match index {
        0 => (u, 1.0),
        3 => {
            let s = ar_from_internal(u);
            (s, 0.5 * (1.0 - s * s))
        }
        _ => (u.exp(), u.exp()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Fixed {
    pub alpha0: f64,
    pub beta0: f64,
    pub beta1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPrecisions {
    /// Pseudo-zero rows.
    pub tau0: f64,
    /// Diffuse prior on `x`.
    pub tau_x: f64,
    /// Copy rows.
    pub tau_xstar: f64,
}

impl Default for FixedPrecisions {
    fn default() -> Self {
        Self {
            tau0: 1e8,
            tau_x: 1e-6,
            tau_xstar: 1e8,
        }
    }
}

impl FixedPrecisions {
    fn validate(&self) -> Result<()> {
        if [self.tau0, self.tau_x, self.tau_xstar].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("fixed precisions must be positive: {self:?}")))
        }
    }
}

/// Gaussian prior variances of the fixed effects; `None` is a flat prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectPriors {
    pub alpha0_var: Option<f64>,
    pub beta0_var: Option<f64>,
    pub beta1_var: Option<f64>,
}

impl Default for FixedEffectPriors {
    fn default() -> Self {
        Self {
            alpha0_var: None,
            beta0_var: None,
            beta1_var: Some(1000.0),
        }
    }
}

impl FixedEffectPriors {
    fn precisions(&self) -> [Option<f64>; 3] {
        [self.alpha0_var, self.beta0_var, self.beta1_var].map(|v| v.map(|v| 1.0 / v))
    }
}

/// Priors on the internal hyperparameter coordinates and on the fixed effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Priors {
    pub alpha1: ScalarPrior,
    pub sigma2_e: ScalarPrior,
    pub sigma2_delta: ScalarPrior,
    pub ar: ScalarPrior,
    pub matern: MaternPrior,
    pub fixed: FixedEffectPriors,
}

impl Stage1Priors {
    /// Vague priors: Gamma(1, 5e-5) precisions, `N(0, 1000)` calibration slope,
    /// a Gaussian with standard deviation `ar_sd` on the AR transform and a
    /// Gaussian `log τ`, `log κ` prior centred at `nominal_range`.
    pub fn non_informative(nominal_range: f64, ar_sd: f64) -> Self {
        let vague_precision = ScalarPrior::GammaPrecision {
            shape: 1.0,
            rate: 5e-5,
        };
        Self {
            alpha1: ScalarPrior::Normal {
                mean: 0.0,
                sd: 1000f64.sqrt(),
            },
            sigma2_e: vague_precision,
            sigma2_delta: vague_precision,
            ar: ScalarPrior::Normal { mean: 0.0, sd: ar_sd },
            matern: MaternPrior::default_log_tau_kappa(nominal_range),
            fixed: FixedEffectPriors::default(),
        }
    }

    /// Priors concentrated around `truth`: inverse-gamma error variances with
    /// coefficient of variation `cv`, Gaussians on `α₁` (sd `alpha1_sd`) and on
    /// the AR transform (sd 0.15), and a PC prior on the Matérn field with
    /// `P(σ > σ_ω) = P(ρ < ρ) = 0.05` at the true values.
    pub fn informative(truth: &Stage1Hyper, cv: f64, alpha1_sd: f64) -> Self {
        Self {
            alpha1: ScalarPrior::Normal {
                mean: truth.alpha1,
                sd: alpha1_sd,
            },
            sigma2_e: ScalarPrior::inv_gamma_from_mean_cv(truth.sigma2_e, cv),
            sigma2_delta: ScalarPrior::inv_gamma_from_mean_cv(truth.sigma2_delta, cv),
            ar: ScalarPrior::Normal {
                mean: ar_to_internal(truth.varsigma),
                sd: 0.15,
            },
            matern: MaternPrior::PcJoint {
                sigma0: truth.sigma2_omega.sqrt(),
                rho0: truth.rho,
                alpha: 0.05,
            },
            fixed: FixedEffectPriors::default(),
        }
    }

    /// No prior information on any hyperparameter coordinate.
    pub fn flat() -> Self {
        Self {
            alpha1: ScalarPrior::Flat,
            sigma2_e: ScalarPrior::Flat,
            sigma2_delta: ScalarPrior::Flat,
            ar: ScalarPrior::Flat,
            matern: MaternPrior::Independent {
                log_variance: ScalarPrior::Flat,
                log_range: ScalarPrior::Flat,
            },
            fixed: FixedEffectPriors::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.alpha1, self.sigma2_e, self.sigma2_delta, self.ar] {
            p.validate()?;
        }
        self.matern.validate()?;
        let vars = [self.fixed.alpha0_var, self.fixed.beta0_var, self.fixed.beta1_var];
        if vars.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("fixed-effect prior variances must be positive".into()));
        }
        Ok(())
    }

    /// Log prior density of the internal coordinates.
    pub fn log_density(&self, u: &[f64]) -> f64 {
        self.alpha1.log_density(u[0])
            + self.sigma2_e.log_density(u[1])
            + self.sigma2_delta.log_density(u[2])
            + self.ar.log_density(u[3])
            + self.matern.log_density(u[4], u[5])
    }
}

/// Index map of the latent vector `χ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentLayout {
    pub n_monitors: usize,
    pub n_proxy: usize,
    pub n_times: usize,
    pub n_mesh: usize,
}

impl LatentLayout {
    pub fn n_sites(&self) -> usize {
        self.n_monitors + self.n_proxy
    }

    pub fn x(&self, t: usize, site: usize) -> usize {
        t * self.n_sites() + site
    }

    pub fn xstar(&self, t: usize, site: usize) -> usize {
        (self.n_times + t) * self.n_sites() + site
    }

    pub fn xi(&self, t: usize, node: usize) -> usize {
        2 * self.n_times * self.n_sites() + t * self.n_mesh + node
    }

    pub fn alpha0(&self) -> usize {
        self.n_times * (2 * self.n_sites() + self.n_mesh)
    }

    pub fn beta0(&self) -> usize {
        self.alpha0() + 1
    }

    pub fn beta1(&self) -> usize {
        self.alpha0() + 2
    }

    pub fn dim(&self) -> usize {
        self.alpha0() + 3
    }

    pub fn n_rows(&self) -> usize {
        3 * self.n_times * self.n_sites()
    }
}

/// Design rows grouped by the hyperparameter that scales them.
struct RowGroups {
    monitor: CscMatrix,
    proxy: CscMatrix,
    pseudo: CscMatrix,
    /// Copy rows with `α₁` set to zero.
    copy_fixed: CscMatrix,
    /// Coefficient of `α₁` in the copy rows.
    copy_alpha1: CscMatrix,
    y_monitor: Vec<f64>,
    y_proxy: Vec<f64>,
}

fn check_projector(obs: &ObservationSet, projector: &Projector) -> Result<()> {
    let n = obs.n_monitors() + obs.n_proxy();
    if projector.n_points() != n {
        return Err(Error::InvalidInput(format!(
            "projector maps to {} points but there are {n} sites",
            projector.n_points()
        )));
    }
    Ok(())
}

fn row_groups(layout: &LatentLayout, obs: &ObservationSet, b_rows: &[Vec<(usize, f64)>]) -> RowGroups {
    let (m, g, nt, n, d) = (
        layout.n_monitors,
        layout.n_proxy,
        layout.n_times,
        layout.n_sites(),
        layout.dim(),
    );
    let mut monitor = Triplets::new(m * nt, d);
    let mut proxy = Triplets::new(g * nt, d);
    let mut pseudo = Triplets::new(n * nt, d);
    let mut copy_fixed = Triplets::new(n * nt, d);
    let mut copy_alpha1 = Triplets::new(n * nt, d);
    let (mut y_monitor, mut y_proxy) = (Vec::with_capacity(m * nt), Vec::with_capacity(g * nt));
    for t in 0..nt {
        for i in 0..m {
            monitor.push(t * m + i, layout.xstar(t, i), 1.0);
            y_monitor.push(obs.w[(i, t)]);
        }
        for j in 0..g {
            let r = t * g + j;
            proxy.push(r, layout.alpha0(), 1.0);
            proxy.push(r, layout.xstar(t, m + j), 1.0);
            y_proxy.push(obs.x_tilde[(j, t)]);
        }
        for (site, brow) in b_rows.iter().enumerate() {
            let r = t * n + site;
            pseudo.push(r, layout.x(t, site), -1.0);
            pseudo.push(r, layout.beta0(), 1.0);
            pseudo.push(r, layout.beta1(), obs.z[(site, t)]);
            for &(k, v) in brow {
                pseudo.push(r, layout.xi(t, k), v);
            }
            copy_fixed.push(r, layout.xstar(t, site), 1.0);
            if site < m {
                copy_fixed.push(r, layout.x(t, site), -1.0);
            } else {
                copy_alpha1.push(r, layout.x(t, site), -1.0);
            }
        }
    }
    RowGroups {
        monitor: monitor.to_csc(),
        proxy: proxy.to_csc(),
        pseudo: pseudo.to_csc(),
        copy_fixed: copy_fixed.to_csc(),
        copy_alpha1: copy_alpha1.to_csc(),
        y_monitor,
        y_proxy,
    }
}

/// The stage-1 model written as a generic Gaussian linear system
/// `y = Aχ + ε`, `ε ~ N(0, W⁻¹)`, `χ ~ N(0, Q⁻¹)` with some prior components flat.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub layout: LatentLayout,
    pub design: CscMatrix,
    pub observations: Vec<f64>,
    pub weights: Vec<f64>,
    /// Zero rows and columns for flat components.
    pub prior_precision: SymMatrix,
    /// Log-determinant of the proper part of the prior precision.
    pub prior_log_det: f64,
    pub n_proper: usize,
}

/// Builds the stacked system for fixed hyperparameters. `projector` maps
/// mesh nodes to the sites (monitors then centroids).
pub fn assemble_system(
    obs: &ObservationSet,
    fem: &FemMatrices,
    projector: &Projector,
    hyper: &Stage1Hyper,
    fp: &FixedPrecisions,
    fixed_priors: &FixedEffectPriors,
) -> Result<AugmentedSystem> {
    hyper.validate()?;
    fp.validate()?;
    check_projector(obs, projector)?;
    let layout = LatentLayout {
        n_monitors: obs.n_monitors(),
        n_proxy: obs.n_proxy(),
        n_times: obs.n_times(),
        n_mesh: fem.c_lumped.len(),
    };
    let groups = row_groups(&layout, obs, &projector.matrix.rows());
    let (nt, n, d) = (layout.n_times, layout.n_sites(), layout.dim());

    let mut a = Triplets::new(layout.n_rows(), d);
    let proxy_row0 = groups.monitor.nrows();
    let pseudo_row0 = proxy_row0 + groups.proxy.nrows();
    let copy_row0 = pseudo_row0 + groups.pseudo.nrows();
    for (block, row0, scale) in [
        (&groups.monitor, 0, 1.0),
        (&groups.proxy, proxy_row0, 1.0),
        (&groups.pseudo, pseudo_row0, 1.0),
        (&groups.copy_fixed, copy_row0, 1.0),
        (&groups.copy_alpha1, copy_row0, hyper.alpha1),
    ] {
        for j in 0..d {
            for (i, v) in block.column(j) {
                a.push(row0 + i, j, scale * v);
            }
        }
    }
    let mut observations = groups.y_monitor.clone();
    observations.extend(&groups.y_proxy);
    observations.resize(layout.n_rows(), 0.0);
    let mut weights = vec![1.0 / hyper.sigma2_e; groups.y_monitor.len()];
    weights.extend(vec![1.0 / hyper.sigma2_delta; groups.y_proxy.len()]);
    weights.extend(vec![fp.tau0; n * nt]);
    weights.extend(vec![fp.tau_xstar; n * nt]);

    let spde = SpdeOperator::new(fem);
    let qs = spde.precision_matrix(&hyper.matern()?);
    let qt = ar1_matrix(hyper.varsigma, nt)?;
    let kron = kron_matrix(&qs, &qt);
    let mut q = Triplets::new(d, d);
    for t in 0..nt {
        for site in 0..n {
            q.push(layout.x(t, site), layout.x(t, site), fp.tau_x);
            q.push(layout.xstar(t, site), layout.xstar(t, site), 0.0);
        }
    }
    let xi0 = layout.xi(0, 0);
    for j in 0..kron.dim() {
        for (i, v) in kron.csc().column(j) {
            q.push(xi0 + i, xi0 + j, v);
        }
    }
    let mut prior_log_det = (n * nt) as f64 * fp.tau_x.ln()
        + nt as f64 * Cholesky::factor(&qs)?.log_det()
        + layout.n_mesh as f64 * (1.0 - hyper.varsigma * hyper.varsigma).ln();
    let mut n_proper = n * nt + layout.n_mesh * nt;
    for (k, prec) in fixed_priors.precisions().iter().enumerate() {
        let idx = layout.alpha0() + k;
        q.push(idx, idx, prec.unwrap_or(0.0));
        if let Some(p) = prec {
            prior_log_det += p.ln();
            n_proper += 1;
        }
    }
    Ok(AugmentedSystem {
        layout,
        design: a.to_csc(),
        observations,
        weights,
        prior_precision: q.to_sym()?,
        prior_log_det,
        n_proper,
    })
}

impl AugmentedSystem {
    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn posterior_precision(&self) -> Result<SymMatrix> {
        let gram = weighted_gram(&self.design, &self.weights);
        self.prior_precision.linear_combination(1.0, &gram, 1.0)
    }

    /// Conditional mean and factorized precision of `χ` given the data.
    pub fn conditional(&self) -> Result<(Vec<f64>, Cholesky)> {
        let p = self.posterior_precision()?;
        let chol = Cholesky::factor(&p)?;
        let wy: Vec<f64> = self.observations.iter().zip(&self.weights).map(|(y, w)| y * w).collect();
        let mean = chol.solve(&self.design.tr_mul_vec(&wy));
        Ok((mean, chol))
    }

    /// Log marginal likelihood of the observations with `χ` integrated out.
    pub fn log_likelihood(&self) -> Result<f64> {
        let p = self.posterior_precision()?;
        let chol = Cholesky::factor(&p)?;
        let wy: Vec<f64> = self.observations.iter().zip(&self.weights).map(|(y, w)| y * w).collect();
        let b = self.design.tr_mul_vec(&wy);
        let yy: f64 = self.observations.iter().zip(&wy).map(|(y, v)| y * v).sum();
        let log_w: f64 = self.weights.iter().map(|w| w.ln()).sum();
        Ok(gaussian_log_marginal(
            self.n_rows(),
            self.layout.dim(),
            self.n_proper,
            log_w,
            self.prior_log_det,
            chol.log_det(),
            yy,
            chol.inv_quad_form(&b),
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn gaussian_log_marginal(
    n_rows: usize,
    dim: usize,
    n_proper: usize,
    log_weights: f64,
    prior_log_det: f64,
    posterior_log_det: f64,
    yy: f64,
    b_pinv_b: f64,
) -> f64 {
    0.5 * (dim as f64 - n_proper as f64 - n_rows as f64) * LN_2PI + 0.5 * log_weights + 0.5 * prior_log_det
        - 0.5 * posterior_log_det
        - 0.5 * yy
        + 0.5 * b_pinv_b
}

/// Values of `m` scattered onto the slots of `pattern`, which must contain
/// the pattern of `m`.
fn align(pattern: &SymMatrix, m: &SymMatrix) -> Vec<f64> {
    let (pc, mc) = (pattern.csc(), m.csc());
    let mut out = vec![0.0; pc.nnz()];
    for j in 0..pc.ncols() {
        let (start, end) = (pc.col_ptr()[j], pc.col_ptr()[j + 1]);
        let rows = &pc.row_idx()[start..end];
        for (i, v) in mc.column(j) {
            let pos = rows.binary_search(&i).expect("pattern covers the component");
            out[start + pos] += v;
        }
    }
    out
}

fn slot(pattern: &SymMatrix, i: usize, j: usize) -> usize {
    let c = pattern.csc();
    let start = c.col_ptr()[j];
    start
        + c.row_idx()[start..c.col_ptr()[j + 1]]
            .binary_search(&i)
            .expect("entry is in the pattern")
}

#[derive(Debug, Clone, Copy)]
struct KronSlot {
    slot: usize,
    qs_index: usize,
    t: u32,
    u: u32,
}

/// Reusable evaluator of the stage-1 marginal likelihood and conditional latent.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    layout: LatentLayout,
    fp: FixedPrecisions,
    fixed_priors: FixedEffectPriors,
    spde: SpdeOperator,
    qs_symbolic: Arc<Symbolic>,
    pattern: SymMatrix,
    symbolic: Arc<Symbolic>,
    constant: Vec<f64>,
    monitor: Vec<f64>,
    proxy: Vec<f64>,
    alpha1: Vec<f64>,
    alpha1_sq: Vec<f64>,
    kron_slots: Vec<KronSlot>,
    b_monitor: Vec<f64>,
    b_proxy: Vec<f64>,
    yy_monitor: f64,
    yy_proxy: f64,
    range_bounds: (f64, f64),
    initial: Stage1Hyper,
}

impl Stage1Model {
    pub fn new(
        obs: &ObservationSet,
        mesh: &TriangularMesh,
        fp: FixedPrecisions,
        fixed_priors: FixedEffectPriors,
    ) -> Result<Self> {
        let fem = assemble_fem(mesh);
        let projector = build_projector(mesh, &obs.sites())?;
        let (xmin, ymin, xmax, ymax) = bbox(mesh.vertices());
        let width = (xmax - xmin).max(ymax - ymin);
        let range_bounds = (mesh.max_edge_length(), 10.0 * width);
        Self::from_parts(obs, &fem, &projector, fp, fixed_priors, range_bounds)
    }

    /// `range_bounds` limits the Matérn range during fitting.
    pub fn from_parts(
        obs: &ObservationSet,
        fem: &FemMatrices,
        projector: &Projector,
        fp: FixedPrecisions,
        fixed_priors: FixedEffectPriors,
        range_bounds: (f64, f64),
    ) -> Result<Self> {
        fp.validate()?;
        check_projector(obs, projector)?;
        let layout = LatentLayout {
            n_monitors: obs.n_monitors(),
            n_proxy: obs.n_proxy(),
            n_times: obs.n_times(),
            n_mesh: fem.c_lumped.len(),
        };
        let groups = row_groups(&layout, obs, &projector.matrix.rows());
        let (nt, n, d) = (layout.n_times, layout.n_sites(), layout.dim());

        let ones = |a: &CscMatrix| vec![1.0; a.nrows()];
        let g_monitor = weighted_gram(&groups.monitor, &ones(&groups.monitor));
        let g_proxy = weighted_gram(&groups.proxy, &ones(&groups.proxy));
        let g_pseudo = weighted_gram(&groups.pseudo, &ones(&groups.pseudo));
        let g_copy0 = weighted_gram(&groups.copy_fixed, &ones(&groups.copy_fixed));
        let g_copy2 = weighted_gram(&groups.copy_alpha1, &ones(&groups.copy_alpha1));
        let mut both = Triplets::new(n * nt, d);
        for block in [&groups.copy_fixed, &groups.copy_alpha1] {
            for j in 0..d {
                for (i, v) in block.column(j) {
                    both.push(i, j, v);
                }
            }
        }
        let both = both.to_csc();
        let g_copy_sum = weighted_gram(&both, &ones(&both));

        let spde = SpdeOperator::new(fem);
        let qs_pattern = spde.precision_matrix(&MaternParams::new(1.0, 1.0)?);
        let qs_symbolic = Arc::new(Symbolic::analyze(&qs_pattern));

        let mut trip = Triplets::new(d, d);
        for m in [&g_monitor, &g_proxy, &g_pseudo, &g_copy0, &g_copy2, &g_copy_sum] {
            for j in 0..d {
                for (i, _) in m.csc().column(j) {
                    trip.push(i, j, 0.0);
                }
            }
        }
        for k in 0..d {
            trip.push(k, k, 0.0);
        }
        let qsc = qs_pattern.csc();
        for t in 0..nt {
            for u in t.saturating_sub(1)..(t + 2).min(nt) {
                for j in 0..layout.n_mesh {
                    for (i, _) in qsc.column(j) {
                        trip.push(layout.xi(t, i), layout.xi(u, j), 0.0);
                    }
                }
            }
        }
        let pattern = trip.to_sym()?;

        let mut constant = align(&pattern, &g_pseudo);
        let copy0 = align(&pattern, &g_copy0);
        let copy2 = align(&pattern, &g_copy2);
        let copy_sum = align(&pattern, &g_copy_sum);
        let mut alpha1 = vec![0.0; pattern.nnz()];
        let mut alpha1_sq = vec![0.0; pattern.nnz()];
        for s in 0..pattern.nnz() {
            constant[s] = fp.tau0 * constant[s] + fp.tau_xstar * copy0[s];
            alpha1[s] = fp.tau_xstar * (copy_sum[s] - copy0[s] - copy2[s]);
            alpha1_sq[s] = fp.tau_xstar * copy2[s];
        }
        for t in 0..nt {
            for site in 0..n {
                constant[slot(&pattern, layout.x(t, site), layout.x(t, site))] += fp.tau_x;
            }
        }
        for (k, prec) in fixed_priors.precisions().iter().enumerate() {
            let idx = layout.alpha0() + k;
            constant[slot(&pattern, idx, idx)] += prec.unwrap_or(0.0);
        }
        let mut kron_slots = Vec::new();
        for t in 0..nt {
            for u in t.saturating_sub(1)..(t + 2).min(nt) {
                for j in 0..layout.n_mesh {
                    let start = qsc.col_ptr()[j];
                    for (off, &i) in qsc.row_idx()[start..qsc.col_ptr()[j + 1]].iter().enumerate() {
                        kron_slots.push(KronSlot {
                            slot: slot(&pattern, layout.xi(t, i), layout.xi(u, j)),
                            qs_index: start + off,
                            t: t as u32,
                            u: u as u32,
                        });
                    }
                }
            }
        }

        let symbolic = Arc::new(Symbolic::analyze(&pattern));
        let b_monitor = groups.monitor.tr_mul_vec(&groups.y_monitor);
        let b_proxy = groups.proxy.tr_mul_vec(&groups.y_proxy);
        let yy_monitor = groups.y_monitor.iter().map(|v| v * v).sum();
        let yy_proxy = groups.y_proxy.iter().map(|v| v * v).sum();
        let initial = initial_hyper(obs, range_bounds);
        Ok(Self {
            layout,
            fp,
            fixed_priors,
            monitor: align(&pattern, &g_monitor),
            proxy: align(&pattern, &g_proxy),
            spde,
            qs_symbolic,
            pattern,
            symbolic,
            constant,
            alpha1,
            alpha1_sq,
            kron_slots,
            b_monitor,
            b_proxy,
            yy_monitor,
            yy_proxy,
            range_bounds,
            initial,
        })
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn fixed_precisions(&self) -> &FixedPrecisions {
        &self.fp
    }

    /// Data-driven starting point for the optimizer.
    pub fn initial_hyper(&self) -> Stage1Hyper {
        self.initial
    }

    pub fn range_bounds(&self) -> (f64, f64) {
        self.range_bounds
    }

    /// Sparsity pattern of the posterior precision.
    pub fn pattern(&self) -> &SymMatrix {
        &self.pattern
    }

    pub fn factor_nnz(&self) -> usize {
        self.symbolic.factor_nnz()
    }

    fn posterior_precision(&self, hyper: &Stage1Hyper) -> Result<SymMatrix> {
        let qs = self.spde.precision_matrix(&hyper.matern()?);
        let qt = ar1_matrix(hyper.varsigma, self.layout.n_times)?;
        let (se, sd, a1) = (1.0 / hyper.sigma2_e, 1.0 / hyper.sigma2_delta, hyper.alpha1);
        let mut p = self.pattern.clone();
        let vals = p.values_mut();
        for s in 0..vals.len() {
            vals[s] = self.constant[s] + se * self.monitor[s] + sd * self.proxy[s] + a1 * self.alpha1[s]
                + a1 * a1 * self.alpha1_sq[s];
        }
        let qs_vals = qs.csc().values();
        for k in &self.kron_slots {
            vals[k.slot] += qt.get(k.t as usize, k.u as usize) * qs_vals[k.qs_index];
        }
        Ok(p)
    }

    fn rhs(&self, hyper: &Stage1Hyper) -> Vec<f64> {
        let (se, sd) = (1.0 / hyper.sigma2_e, 1.0 / hyper.sigma2_delta);
        self.b_monitor.iter().zip(&self.b_proxy).map(|(a, b)| se * a + sd * b).collect()
    }

    fn prior_log_det(&self, hyper: &Stage1Hyper) -> Result<(f64, usize)> {
        let l = &self.layout;
        let qs = self.spde.precision_matrix(&hyper.matern()?);
        let qs_ld = Cholesky::factor_with(self.qs_symbolic.clone(), &qs)?.log_det();
        let mut ld = (l.n_sites() * l.n_times) as f64 * self.fp.tau_x.ln()
            + l.n_times as f64 * qs_ld
            + l.n_mesh as f64 * (1.0 - hyper.varsigma * hyper.varsigma).ln();
        let mut n_proper = l.n_sites() * l.n_times + l.n_mesh * l.n_times;
        for p in self.fixed_priors.precisions().iter().flatten() {
            ld += p.ln();
            n_proper += 1;
        }
        Ok((ld, n_proper))
    }

    /// Conditional Gaussian of `χ` and the log marginal likelihood at `hyper`.
    pub fn conditional(&self, hyper: &Stage1Hyper) -> Result<ConditionalLatent> {
        hyper.validate()?;
        let p = self.posterior_precision(hyper)?;
        let factor = Cholesky::factor_with(self.symbolic.clone(), &p)?;
        let b = self.rhs(hyper);
        let mean = factor.solve(&b);
        let b_mean: f64 = b.iter().zip(&mean).map(|(x, y)| x * y).sum();
        let (prior_ld, n_proper) = self.prior_log_det(hyper)?;
        let l = &self.layout;
        let (mt, gt, nt) = (
            l.n_monitors * l.n_times,
            l.n_proxy * l.n_times,
            l.n_sites() * l.n_times,
        );
        let log_w = -(mt as f64) * hyper.sigma2_e.ln() - gt as f64 * hyper.sigma2_delta.ln()
            + nt as f64 * (self.fp.tau0.ln() + self.fp.tau_xstar.ln());
        let yy = self.yy_monitor / hyper.sigma2_e + self.yy_proxy / hyper.sigma2_delta;
        let log_likelihood =
            gaussian_log_marginal(l.n_rows(), l.dim(), n_proper, log_w, prior_ld, factor.log_det(), yy, b_mean);
        Ok(ConditionalLatent {
            hyper: *hyper,
            layout: *l,
            mean,
            factor,
            log_likelihood,
        })
    }

    /// Log marginal likelihood; `−∞` where the system cannot be factorized.
    pub fn log_likelihood(&self, hyper: &Stage1Hyper) -> f64 {
        match self.conditional(hyper) {
            Ok(c) if c.log_likelihood.is_finite() => c.log_likelihood,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Log prior plus log marginal likelihood at internal coordinates `u`.
pub fn log_marginal(model: &Stage1Model, u: &[f64], priors: &Stage1Priors) -> f64 {
    let hyper = Stage1Hyper::from_internal(u);
    if hyper.validate().is_err() {
        return f64::NEG_INFINITY;
    }
    model.log_likelihood(&hyper) + priors.log_density(u)
}

fn bbox(points: &[Point2D]) -> (f64, f64, f64, f64) {
    points.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
    )
}

/// Moment-based starting values from monitors and their nearest proxy cells.
fn initial_hyper(obs: &ObservationSet, range_bounds: (f64, f64)) -> Stage1Hyper {
    let (m, nt) = (obs.n_monitors(), obs.n_times());
    let nearest: Vec<usize> = obs
        .monitor_locations
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, c) in obs.proxy_centroids.iter().enumerate() {
                let d = p.distance(c);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect();
    let w: Vec<f64> = obs.w.iter().copied().collect();
    let near: Vec<f64> = (0..nt)
        .flat_map(|t| nearest.iter().map(move |&j| (j, t)))
        .map(|(j, t)| obs.x_tilde[(j, t)])
        .collect();
    let var_w = variance(&w).max(1e-6);
    let mw = mean(&w);
    let mn = mean(&near);
    let cov = if w.len() > 1 {
        w.iter().zip(&near).map(|(a, b)| (a - mw) * (b - mn)).sum::<f64>() / (w.len() - 1) as f64
    } else {
        0.0
    };
    let alpha1 = if cov.is_finite() && cov.abs() > 1e-8 {
        (cov / var_w).clamp(-20.0, 20.0)
    } else {
        1.0
    };

    // Residual variance of w after regressing on the covariate.
    let zs: Vec<f64> = (0..nt).flat_map(|t| (0..m).map(move |i| (i, t))).map(|(i, t)| obs.z[(i, t)]).collect();
    let mz = mean(&zs);
    let szz: f64 = zs.iter().map(|z| (z - mz) * (z - mz)).sum();
    let szw: f64 = zs.iter().zip(&w).map(|(z, v)| (z - mz) * (v - mw)).sum();
    let slope = if szz > 1e-12 { szw / szz } else { 0.0 };
    let resid: Vec<f64> = zs.iter().zip(&w).map(|(z, v)| v - mw - slope * (z - mz)).collect();
    let r_w = variance(&resid).max(1e-4);

    let sigma2_e = (0.1 * r_w).max(1e-4);
    let diff: Vec<f64> = near.iter().zip(&w).map(|(a, b)| a - alpha1 * b).collect();
    let var_x = variance(&obs.x_tilde.iter().copied().collect::<Vec<_>>()).max(1e-6);
    let sigma2_delta = (variance(&diff) - alpha1 * alpha1 * sigma2_e).max(0.1 * var_x).max(1e-4);
    let width = range_bounds.1 / 10.0;
    Stage1Hyper {
        alpha1,
        sigma2_e,
        sigma2_delta,
        varsigma: 0.5,
        sigma2_omega: (0.8 * r_w).max(1e-3),
        rho: (0.3 * width).clamp(range_bounds.0 * 1.01, range_bounds.1 * 0.99),
    }
}

/// Conditional Gaussian of the full latent vector at one hyperparameter value.
#[derive(Debug, Clone)]
pub struct ConditionalLatent {
    pub hyper: Stage1Hyper,
    pub layout: LatentLayout,
    pub mean: Vec<f64>,
    /// Factor of the conditional precision.
    pub factor: Cholesky,
    pub log_likelihood: f64,
}

impl ConditionalLatent {
    pub fn fixed_mean(&self) -> Stage1Fixed {
        let l = &self.layout;
        Stage1Fixed {
            alpha0: self.mean[l.alpha0()],
            beta0: self.mean[l.beta0()],
            beta1: self.mean[l.beta1()],
        }
    }

    pub fn fixed_variances(&self) -> [f64; 3] {
        let l = &self.layout;
        let v = self.factor.inverse_diagonal_at(&[l.alpha0(), l.beta0(), l.beta1()]);
        [v[0], v[1], v[2]]
    }

    /// Mesh-node conditional mean of `ξ` at time `t`.
    pub fn xi_mean(&self, t: usize) -> &[f64] {
        let start = self.layout.xi(t, 0);
        &self.mean[start..start + self.layout.n_mesh]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        let dev = self.factor.sample_from_normals(&z);
        self.mean.iter().zip(dev).map(|(m, e)| m + e).collect()
    }

    /// `β₀ + β₁z + Bξ_t` for a latent vector `chi`, points × times.
    pub fn surface(&self, chi: &[f64], grid: &Projector, z_grid: &DMatrix<f64>) -> DMatrix<f64> {
        let l = &self.layout;
        let (b0, b1) = (chi[l.beta0()], chi[l.beta1()]);
        let mut out = DMatrix::zeros(grid.n_points(), l.n_times);
        for t in 0..l.n_times {
            let start = l.xi(t, 0);
            let field = grid.apply(&chi[start..start + l.n_mesh]);
            for (g, v) in field.iter().enumerate() {
                out[(g, t)] = b0 + b1 * z_grid[(g, t)] + v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperIntegration {
    /// Plug in the posterior mode.
    Mode,
    /// Mode plus ±1 posterior sd along each axis, weighted by the posterior.
    Grid,
}

#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub priors: Stage1Priors,
    pub fixed_precisions: FixedPrecisions,
    pub integration: HyperIntegration,
    pub optim: OptimOptions,
    /// Starting point; data-driven when absent.
    pub initial: Option<Stage1Hyper>,
    /// Finite-difference step for the curvature at the mode.
    pub hessian_step: f64,
}

impl Stage1Config {
    pub fn new(priors: Stage1Priors) -> Self {
        Self {
            priors,
            fixed_precisions: FixedPrecisions::default(),
            integration: HyperIntegration::Mode,
            optim: OptimOptions::default(),
            initial: None,
            hessian_step: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightedConditional {
    pub weight: f64,
    pub conditional: ConditionalLatent,
}

#[derive(Debug, Clone)]
pub struct Stage1Fit {
    pub hyper_hat: Stage1Hyper,
    pub internal_mode: Vec<f64>,
    /// Gaussian approximation of the hyperparameter posterior in internal coordinates.
    pub internal_cov: DMatrix<f64>,
    pub log_posterior: f64,
    pub log_likelihood: f64,
    pub fixed_mean: Stage1Fixed,
    pub fixed_sd: Stage1Fixed,
    /// Retained hyperparameter points; a single unit-weight point in mode mode.
    pub points: Vec<WeightedConditional>,
    pub evaluations: usize,
}

pub fn internal_bounds(range_bounds: (f64, f64)) -> Result<Bounds> {
    Bounds::new(
        vec![-20.0, -12.0, -12.0, -7.6, -12.0, range_bounds.0.ln()],
        vec![20.0, 8.0, 8.0, 7.6, 8.0, range_bounds.1.ln()],
    )
}

pub fn fit(obs: &ObservationSet, mesh: &TriangularMesh, config: &Stage1Config) -> Result<Stage1Fit> {
    let model = Stage1Model::new(obs, mesh, config.fixed_precisions, config.priors.fixed)?;
    fit_model(&model, config)
}

/// Fits the hyperparameters of a prepared model.
pub fn fit_model(model: &Stage1Model, config: &Stage1Config) -> Result<Stage1Fit> {
    config.priors.validate()?;
    if config.priors.fixed != model.fixed_priors || config.fixed_precisions != model.fp {
        return Err(Error::Config("model was assembled with different fixed-effect priors or precisions".into()));
    }
    let bounds = internal_bounds(model.range_bounds)?;
    let start = config.initial.unwrap_or(model.initial);
    start.validate()?;
    let mut u0 = start.to_internal().to_vec();
    bounds.clamp(&mut u0);

    let objective = |u: &[f64]| -log_marginal(model, u, &config.priors);
    let opt = minimize(objective, &u0, &bounds, &config.optim)?;
    let mode = opt.x;
    let h = vec![config.hessian_step; 6];
    let hess = fd_hessian(objective, &mode, &h);
    let cov = covariance_from_hessian(&hess);
    let hyper_hat = Stage1Hyper::from_internal(&mode);
    let at_mode = model.conditional(&hyper_hat)?;

    let mut points = vec![(0.0, at_mode)];
    if config.integration == HyperIntegration::Grid {
        for axis in 0..6 {
            for sign in [-1.0, 1.0] {
                let mut u = mode.clone();
                u[axis] += sign * cov[(axis, axis)].sqrt();
                bounds.clamp(&mut u);
                let lp = log_marginal(model, &u, &config.priors);
                if lp.is_finite() {
                    let c = model.conditional(&Stage1Hyper::from_internal(&u))?;
                    points.push((lp + opt.value, c));
                }
            }
        }
    }
    let max_lw = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = points.iter().map(|p| (p.0 - max_lw).exp()).sum();
    let points: Vec<WeightedConditional> = points
        .into_iter()
        .map(|(lw, c)| WeightedConditional {
            weight: (lw - max_lw).exp() / total,
            conditional: c,
        })
        .collect();

    // Mixture moments of the fixed effects.
    let mut mean = [0.0; 3];
    let mut second = [0.0; 3];
    for p in &points {
        let m = p.conditional.fixed_mean();
        let v = p.conditional.fixed_variances();
        for (k, mk) in [m.alpha0, m.beta0, m.beta1].iter().enumerate() {
            mean[k] += p.weight * mk;
            second[k] += p.weight * (v[k] + mk * mk);
        }
    }
    let sd: Vec<f64> = (0..3).map(|k| (second[k] - mean[k] * mean[k]).max(0.0).sqrt()).collect();
    let log_likelihood = points[0].conditional.log_likelihood;
    Ok(Stage1Fit {
        hyper_hat,
        internal_mode: mode,
        internal_cov: cov,
        log_posterior: -opt.value,
        log_likelihood,
        fixed_mean: Stage1Fixed {
            alpha0: mean[0],
            beta0: mean[1],
            beta1: mean[2],
        },
        fixed_sd: Stage1Fixed {
            alpha0: sd[0],
            beta0: sd[1],
            beta1: sd[2],
        },
        points,
        evaluations: opt.evaluations,
    })
}

impl Stage1Fit {
    pub fn layout(&self) -> &LatentLayout {
        &self.points[0].conditional.layout
    }

    pub fn mode(&self) -> &ConditionalLatent {
        &self.points[0].conditional
    }

    /// Posterior sds of the internal coordinates.
    pub fn internal_sd(&self) -> Vec<f64> {
        (0..6).map(|i| self.internal_cov[(i, i)].sqrt()).collect()
    }

    /// Summary rows for the hyperparameters and fixed effects. Hyperparameter
    /// intervals are back-transformed from the Gaussian approximation.
    pub fn summary(&self) -> Vec<ParameterSummary> {
        let mut rows = Vec::with_capacity(9);
        let sd = self.internal_sd();
        for (i, name) in HYPER_NAMES.iter().enumerate() {
            let u = self.internal_mode[i];
            let (estimate, deriv) = back_transform(i, u);
            let a = back_transform(i, u - 1.959_963_984_540_054 * sd[i]).0;
            let b = back_transform(i, u + 1.959_963_984_540_054 * sd[i]).0;
            rows.push(ParameterSummary {
                parameter: name.to_string(),
                estimate,
                sd: deriv.abs() * sd[i],
                lower: a.min(b),
                upper: a.max(b),
            });
        }
        let m = self.fixed_mean;
        let s = self.fixed_sd;
        for (name, mu, sd) in [
            ("alpha0", m.alpha0, s.alpha0),
            ("beta0", m.beta0, s.beta0),
            ("beta1", m.beta1, s.beta1),
        ] {
            rows.push(ParameterSummary {
                parameter: name.to_string(),
                estimate: mu,
                sd,
                lower: mu - 1.959_963_984_540_054 * sd,
                upper: mu + 1.959_963_984_540_054 * sd,
            });
        }
        rows
    }

    /// Draws from the approximate hyperparameter posterior.
    pub fn sample_hyper<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Stage1Hyper> {
        let l = self
            .internal_cov
            .clone()
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::from_diagonal(&self.internal_cov.diagonal().map(|v| v.max(0.0).sqrt())));
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
                let u = DVector::from_column_slice(&self.internal_mode) + &l * z;
                Stage1Hyper::from_internal(u.as_slice())
            })
            .collect()
    }

    /// Draws of `(α₀, β₀, β₁)` from the conditional Gaussian mixture.
    pub fn sample_fixed<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Stage1Fixed> {
        let comps: Vec<(Stage1Fixed, [f64; 3])> = self
            .points
            .iter()
            .map(|p| (p.conditional.fixed_mean(), p.conditional.fixed_variances()))
            .collect();
        (0..n)
            .map(|_| {
                let k = self.pick_point(rng);
                let (m, v) = &comps[k];
                let draw = |mu: f64, var: f64, rng: &mut R| mu + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                Stage1Fixed {
                    alpha0: draw(m.alpha0, v[0], rng),
                    beta0: draw(m.beta0, v[1], rng),
                    beta1: draw(m.beta1, v[2], rng),
                }
            })
            .collect()
    }

    fn pick_point<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.points.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.points.iter().enumerate() {
            acc += p.weight;
            if u < acc {
                return k;
            }
        }
        self.points.len() - 1
    }
}

/// Posterior-predictive draws of the latent surface, indexed `[sample][time][point]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSamples {
    pub n_samples: usize,
    pub n_times: usize,
    pub n_points: usize,
    pub values: Vec<f64>,
}

impl LatentSamples {
    pub fn get(&self, sample: usize, t: usize, point: usize) -> f64 {
        self.values[(sample * self.n_times + t) * self.n_points + point]
    }

    /// All points of one sample at one time.
    pub fn slice(&self, sample: usize, t: usize) -> &[f64] {
        let start = (sample * self.n_times + t) * self.n_points;
        &self.values[start..start + self.n_points]
    }

    /// `sample,t,grid_index,value` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sample,t,grid_index,value")?;
        for s in 0..self.n_samples {
            for t in 0..self.n_times {
                for (g, v) in self.slice(s, t).iter().enumerate() {
                    writeln!(w, "{s},{t},{g},{v}")?;
                }
            }
        }
        Ok(())
    }
}

/// Draws `n_samples` latent surfaces `β₀ + β₁z + Bξ_t` on the grid.
pub fn predict_latent<R: Rng + ?Sized>(
    fit: &Stage1Fit,
    grid: &Projector,
    z_grid: &DMatrix<f64>,
    n_samples: usize,
    rng: &mut R,
) -> Result<LatentSamples> {
    let l = *fit.layout();
    if grid.matrix.ncols() != l.n_mesh {
        return Err(Error::InvalidInput(format!(
            "grid projector has {} columns but the mesh has {} nodes",
            grid.matrix.ncols(),
            l.n_mesh
        )));
    }
    if z_grid.shape() != (grid.n_points(), l.n_times) {
        return Err(Error::InvalidInput(format!(
            "grid covariate is {:?}, expected ({}, {})",
            z_grid.shape(),
            grid.n_points(),
            l.n_times
        )));
    }
    let mut values = Vec::with_capacity(n_samples * l.n_times * grid.n_points());
    for _ in 0..n_samples {
        let cond = &fit.points[fit.pick_point(rng)].conditional;
        let chi = cond.sample(rng);
        let surface = cond.surface(&chi, grid, z_grid);
        for t in 0..l.n_times {
            values.extend(surface.column(t).iter());
        }
    }
    Ok(LatentSamples {
        n_samples,
        n_times: l.n_times,
        n_points: grid.n_points(),
        values,
    })
}
