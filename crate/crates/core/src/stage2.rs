//! Second-stage Poisson health model with propagated exposure uncertainty.
//!
//! Counts follow `Y ~ Poisson(P·λ)` with `log λ = γ₀ + γ₁x + φ_i + ν_t`,
//! iid block effects `φ` and a first-order random walk `ν`. The walk is
//! written `ν = Vη` with `V` an orthonormal basis of the sum-to-zero subspace,
//! which turns the intrinsic prior into a proper one on `η`. The latent vector
//! is `θ = (γ₀, γ₁, φ₁..φ_N, η₁..η_{T−1})`; its conditional mode is found by
//! Newton's method and the hyperparameters by maximizing the Laplace
//! approximation of the marginal likelihood.

use std::cell::RefCell;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::blockagg::OverlapTable;
use crate::error::{Error, Result};
use crate::mesh::Projector;
use crate::optim::{covariance_from_hessian, fd_hessian, minimize, Bounds, OptimOptions};
use crate::priors::ScalarPrior;
use crate::rng::substream;
use crate::stage1::{predict_latent, HyperIntegration, Stage1Fit};
use crate::stats::{mean, quantile_sorted, sorted, ParameterSummary};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Counts, expected counts and exposures; all matrices are blocks × times.
#[derive(Debug, Clone)]
pub struct HealthData {
    pub counts: DMatrix<f64>,
    pub expected: DMatrix<f64>,
    pub exposure: DMatrix<f64>,
}

impl HealthData {
    pub fn new(counts: DMatrix<f64>, expected: DMatrix<f64>, exposure: DMatrix<f64>) -> Result<Self> {
        let shape = counts.shape();
        if expected.shape() != shape || exposure.shape() != shape || shape.0 == 0 || shape.1 == 0 {
            return Err(Error::InvalidInput(format!(
                "counts {:?}, expected {:?} and exposure {:?} must share a non-empty shape",
                shape,
                expected.shape(),
                exposure.shape()
            )));
        }
        if expected.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidInput("expected counts must be positive and finite".into()));
        }
        if counts.iter().chain(exposure.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("counts and exposures must be finite".into()));
        }
        Ok(Self {
            counts,
            expected,
            exposure,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.counts.ncols()
    }

    /// Same counts and offsets with a different exposure matrix.
    pub fn with_exposure(&self, exposure: DMatrix<f64>) -> Result<Self> {
        Self::new(self.counts.clone(), self.expected.clone(), exposure)
    }

    fn check_counts(&self) -> Result<()> {
        if self.counts.iter().any(|&y| y < 0.0 || y.fract() != 0.0) {
            return Err(Error::InvalidInput("counts must be non-negative integers".into()));
        }
        if let Some(t) = (0..self.n_times()).find(|&t| self.counts.column(t).iter().all(|&y| y == 0.0)) {
            return Err(Error::Degenerate(format!("all counts are zero at time {t}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Hyper {
    pub sigma2_phi: f64,
    pub sigma2_nu: f64,
}

impl Stage2Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.sigma2_phi > 0.0 && self.sigma2_nu > 0.0 && self.sigma2_phi.is_finite() && self.sigma2_nu.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("stage-2 variances must be positive: {self:?}")))
        }
    }

    pub fn to_internal(&self) -> [f64; 2] {
        [self.sigma2_phi.ln(), self.sigma2_nu.ln()]
    }

    pub fn from_internal(u: &[f64]) -> Self {
        Self {
            sigma2_phi: u[0].exp(),
            sigma2_nu: u[1].exp(),
        }
    }
}

/// Observation model. `Gaussian` replaces the Poisson likelihood by
/// `Y ~ N(log P + η, noise_variance)`, for which the Laplace step is exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Likelihood {
    Poisson,
    Gaussian { noise_variance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Priors {
    /// Prior on `log σ²_φ`.
    pub sigma2_phi: ScalarPrior,
    /// Prior on `log σ²_ν`.
    pub sigma2_nu: ScalarPrior,
    /// Prior variance of `γ₀`; `None` is flat.
    pub gamma0_var: Option<f64>,
    /// Prior variance of `γ₁`; `None` is flat.
    pub gamma1_var: Option<f64>,
}

impl Stage2Priors {
    /// Gamma(1, 0.00005) on both precisions, flat `γ₀`, `γ₁ ~ N(0, 1000)`.
    pub fn non_informative() -> Self {
        let gamma = ScalarPrior::GammaPrecision {
            shape: 1.0,
            rate: 0.00005,
        };
        Self {
            sigma2_phi: gamma,
            sigma2_nu: gamma,
            gamma0_var: None,
            gamma1_var: Some(1000.0),
        }
    }

    /// Penalized-complexity priors with `P(σ > σ_true) = 0.05` on both sds.
    pub fn informative(truth: &Stage2Hyper) -> Self {
        Self {
            sigma2_phi: ScalarPrior::PcSd {
                sd0: truth.sigma2_phi.sqrt(),
                alpha: 0.05,
            },
            sigma2_nu: ScalarPrior::PcSd {
                sd0: truth.sigma2_nu.sqrt(),
                alpha: 0.05,
            },
            ..Self::non_informative()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sigma2_phi.validate()?;
        self.sigma2_nu.validate()?;
        for v in [self.gamma0_var, self.gamma1_var].into_iter().flatten() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("fixed-effect prior variance must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        self.sigma2_phi.log_density(u[0]) + self.sigma2_nu.log_density(u[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// Stop once the largest step component falls below this.
    pub step_tolerance: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Config {
    pub priors: Stage2Priors,
    pub likelihood: Likelihood,
    pub integration: HyperIntegration,
    pub optim: OptimOptions,
    pub newton: NewtonOptions,
    pub initial: Option<Stage2Hyper>,
    /// Finite-difference step for the curvature at the hyperparameter mode.
    pub hessian_step: f64,
}

impl Stage2Config {
    pub fn new(priors: Stage2Priors) -> Self {
        Self {
            priors,
            likelihood: Likelihood::Poisson,
            integration: HyperIntegration::Mode,
            optim: OptimOptions {
                coordinate_evals: 0,
                simplex_evals: 400,
                tolerance: 1e-4,
                initial_step: 0.5,
            },
            newton: NewtonOptions::default(),
            initial: None,
            hessian_step: 0.02,
        }
    }
}

/// Lower and upper bounds on `log σ²` for both variances.
const LOG_VARIANCE_BOUNDS: (f64, f64) = (-12.0, 8.0);

/// Orthonormal basis of `{v ∈ ℝᵀ : Σv = 0}` from Helmert contrasts, `T × (T−1)`.
pub fn sum_to_zero_basis(n_times: usize) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(n_times, n_times.saturating_sub(1));
    for k in 1..n_times {
        let scale = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for t in 0..k {
            v[(t, k - 1)] = scale;
        }
        v[(k, k - 1)] = -(k as f64) * scale;
    }
    v
}

/// `Vᵀ R V` for the first-order random-walk structure `R = DᵀD`.
fn rw1_structure(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let t = basis.nrows();
    let k = basis.ncols();
    let mut s = DMatrix::zeros(k, k);
    for step in 0..t.saturating_sub(1) {
        let diff: Vec<f64> = (0..k).map(|c| basis[(step + 1, c)] - basis[(step, c)]).collect();
        for a in 0..k {
            for b in 0..k {
                s[(a, b)] += diff[a] * diff[b];
            }
        }
    }
    s
}

/// Precomputed design and prior structure for one data set.
#[derive(Debug, Clone)]
struct Design {
    n_blocks: usize,
    n_times: usize,
    basis: DMatrix<f64>,
    rw1: DMatrix<f64>,
    rw1_log_det: f64,
    offset: DVector<f64>,
    y: DVector<f64>,
    /// Sparse rows `(column, value)` of the linear predictor, ordered block-major.
    rows: Vec<Vec<(usize, f64)>>,
    log_factorial: f64,
}

impl Design {
    fn new(data: &HealthData) -> Result<Self> {
        let (n, nt) = (data.n_blocks(), data.n_times());
        let basis = sum_to_zero_basis(nt);
        let rw1 = rw1_structure(&basis);
        let rw1_log_det = if nt > 1 {
            let c = Cholesky::new(rw1.clone())
                .ok_or_else(|| Error::Degenerate("random-walk structure is singular".into()))?;
            2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
        } else {
            0.0
        };
        let mut rows = Vec::with_capacity(n * nt);
        let mut offset = Vec::with_capacity(n * nt);
        let mut y = Vec::with_capacity(n * nt);
        for i in 0..n {
            for t in 0..nt {
                let mut row = vec![(0, 1.0), (1, data.exposure[(i, t)]), (2 + i, 1.0)];
                for k in 0..nt - 1 {
                    row.push((2 + n + k, basis[(t, k)]));
                }
                rows.push(row);
                offset.push(data.expected[(i, t)].ln());
                y.push(data.counts[(i, t)]);
            }
        }
        let log_factorial = y.iter().map(|&v| if v >= 0.0 { ln_gamma(v + 1.0) } else { 0.0 }).sum();
        Ok(Self {
            n_blocks: n,
            n_times: nt,
            basis,
            rw1,
            rw1_log_det,
            offset: DVector::from_vec(offset),
            y: DVector::from_vec(y),
            rows,
            log_factorial,
        })
    }

    fn dim(&self) -> usize {
        2 + self.n_blocks + self.n_times - 1
    }

    fn prior_precision(&self, hyper: &Stage2Hyper, priors: &Stage2Priors) -> DMatrix<f64> {
        let d = self.dim();
        let mut q = DMatrix::zeros(d, d);
        if let Some(v) = priors.gamma0_var {
            q[(0, 0)] = 1.0 / v;
        }
        if let Some(v) = priors.gamma1_var {
            q[(1, 1)] = 1.0 / v;
        }
        for i in 0..self.n_blocks {
            q[(2 + i, 2 + i)] = 1.0 / hyper.sigma2_phi;
        }
        let base = 2 + self.n_blocks;
        let k = self.n_times - 1;
        for a in 0..k {
            for b in 0..k {
                q[(base + a, base + b)] = self.rw1[(a, b)] / hyper.sigma2_nu;
            }
        }
        q
    }

    /// `(log|Q|, rank)` over the proper part of the prior.
    fn prior_log_det(&self, hyper: &Stage2Hyper, priors: &Stage2Priors) -> (f64, usize) {
        let k = self.n_times - 1;
        let mut ld = -(self.n_blocks as f64) * hyper.sigma2_phi.ln() - k as f64 * hyper.sigma2_nu.ln() + self.rw1_log_det;
        let mut rank = self.n_blocks + k;
        for v in [priors.gamma0_var, priors.gamma1_var].into_iter().flatten() {
            ld -= v.ln();
            rank += 1;
        }
        (ld, rank)
    }

    fn predictor(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .zip(self.offset.iter())
                .map(|(row, o)| o + row.iter().map(|&(c, a)| a * theta[c]).sum::<f64>()),
        )
    }

    /// Log-likelihood with its per-row score and curvature weights.
    fn likelihood(&self, eta: &DVector<f64>, model: Likelihood) -> (f64, Vec<f64>, Vec<f64>) {
        let m = eta.len();
        let mut score = Vec::with_capacity(m);
        let mut weight = Vec::with_capacity(m);
        let mut ll = 0.0;
        match model {
            Likelihood::Poisson => {
                for (e, y) in eta.iter().zip(self.y.iter()) {
                    let mu = e.exp();
                    ll += y * e - mu;
                    score.push(y - mu);
                    weight.push(mu);
                }
                ll -= self.log_factorial;
            }
            Likelihood::Gaussian { noise_variance } => {
                for (e, y) in eta.iter().zip(self.y.iter()) {
                    let r = y - e;
                    ll += -0.5 * (LN_2PI + noise_variance.ln()) - 0.5 * r * r / noise_variance;
                    score.push(r / noise_variance);
                    weight.push(1.0 / noise_variance);
                }
            }
        }
        (ll, score, weight)
    }

    fn objective(&self, theta: &DVector<f64>, q: &DMatrix<f64>, model: Likelihood) -> f64 {
        let (ll, _, _) = self.likelihood(&self.predictor(theta), model);
        ll - 0.5 * theta.dot(&(q * theta))
    }

    /// Gradient and negative Hessian of the log-posterior at `theta`.
    fn derivatives(&self, theta: &DVector<f64>, q: &DMatrix<f64>, model: Likelihood) -> (DVector<f64>, DMatrix<f64>) {
        let (_, score, weight) = self.likelihood(&self.predictor(theta), model);
        let mut grad = -(q * theta);
        let mut hess = q.clone();
        for ((row, s), w) in self.rows.iter().zip(&score).zip(&weight) {
            for &(a, va) in row {
                grad[a] += s * va;
                for &(b, vb) in row {
                    hess[(a, b)] += w * va * vb;
                }
            }
        }
        (grad, hess)
    }

    fn initial_theta(&self, model: Likelihood) -> DVector<f64> {
        let mut theta = DVector::zeros(self.dim());
        theta[0] = match model {
            Likelihood::Poisson => {
                let total_y: f64 = self.y.sum();
                let total_p: f64 = self.offset.iter().map(|o| o.exp()).sum();
                (total_y.max(0.5) / total_p).ln()
            }
            Likelihood::Gaussian { .. } => (self.y.sum() - self.offset.sum()) / self.y.len() as f64,
        };
        theta
    }
}

/// Laplace approximation at fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct LaplaceConditional {
    pub hyper: Stage2Hyper,
    /// Mode of `θ = (γ₀, γ₁, φ, η)`.
    pub mode: DVector<f64>,
    /// Cholesky factor of the negative Hessian at the mode.
    pub curvature: Cholesky<f64, Dyn>,
    /// Laplace approximation of `log p(Y | hyper)`.
    pub log_marginal: f64,
    /// Relative gradient norm of the log-posterior at the returned mode.
    pub gradient_norm: f64,
    pub iterations: usize,
    n_blocks: usize,
    basis: DMatrix<f64>,
}

impl LaplaceConditional {
    pub fn gamma0(&self) -> f64 {
        self.mode[0]
    }

    pub fn gamma1(&self) -> f64 {
        self.mode[1]
    }

    pub fn phi(&self) -> Vec<f64> {
        self.mode.rows(2, self.n_blocks).iter().copied().collect()
    }

    /// Time effects `ν = Vη`.
    pub fn nu(&self) -> Vec<f64> {
        self.nu_of(&self.mode)
    }

    fn nu_of(&self, theta: &DVector<f64>) -> Vec<f64> {
        let k = self.basis.ncols();
        let eta = theta.rows(2 + self.n_blocks, k);
        (&self.basis * eta).iter().copied().collect()
    }

    /// Posterior covariance `H⁻¹`.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.curvature.inverse()
    }

    /// Draw of `θ` from the Gaussian approximation.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.mode.len();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let l = self.curvature.l();
        let x = l
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        &self.mode + x
    }
}

/// Newton iterations for the latent mode at `hyper`, then the Laplace marginal.
pub fn laplace(data: &HealthData, hyper: &Stage2Hyper, config: &Stage2Config) -> Result<LaplaceConditional> {
    let design = Design::new(data)?;
    laplace_with(&design, hyper, config, None)
}

fn laplace_with(
    design: &Design,
    hyper: &Stage2Hyper,
    config: &Stage2Config,
    start: Option<&DVector<f64>>,
) -> Result<LaplaceConditional> {
    hyper.validate()?;
    let model = config.likelihood;
    let q = design.prior_precision(hyper, &config.priors);
    let mut theta = start.cloned().unwrap_or_else(|| design.initial_theta(model));
    let mut value = design.objective(&theta, &q, model);
    let mut trace = vec![value];
    let mut iterations = 0;
    let diverged = |trace: &[f64], why: &str| Error::NewtonDivergence {
        trace: format!("{why}; objective trace {trace:?}"),
    };
    loop {
        let (grad, hess) = design.derivatives(&theta, &q, model);
        let chol = Cholesky::new(hess).ok_or_else(|| diverged(&trace, "negative Hessian is not positive definite"))?;
        let step = chol.solve(&grad);
        let step_size = step.amax();
        if !step_size.is_finite() {
            return Err(diverged(&trace, "non-finite Newton step"));
        }
        if step_size <= config.newton.step_tolerance * (1.0 + theta.amax()) {
            break;
        }
        if iterations >= config.newton.max_iterations {
            return Err(diverged(&trace, "iteration limit reached"));
        }
        let mut scale = 1.0;
        let accepted = loop {
            let candidate = &theta + &step * scale;
            let v = design.objective(&candidate, &q, model);
            if v.is_finite() && v >= value - 1e-12 * value.abs().max(1.0) {
                break Some((candidate, v));
            }
            scale *= 0.5;
            if scale < 1e-10 {
                break None;
            }
        };
        match accepted {
            Some((candidate, v)) => {
                theta = candidate;
                value = v;
                trace.push(v);
            }
            None => return Err(diverged(&trace, "line search failed")),
        }
        iterations += 1;
    }

    let (grad, hess) = design.derivatives(&theta, &q, model);
    let scale = hess.diagonal().iter().map(|v| v.abs()).fold(1.0, f64::max);
    let gradient_norm = grad.norm() / scale;
    let curvature =
        Cholesky::new(hess).ok_or_else(|| diverged(&trace, "negative Hessian at the mode is not positive definite"))?;
    let log_det_h = 2.0 * curvature.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let (prior_ld, rank) = design.prior_log_det(hyper, &config.priors);
    let d = design.dim();
    let log_marginal =
        value + 0.5 * prior_ld - 0.5 * rank as f64 * LN_2PI + 0.5 * d as f64 * LN_2PI - 0.5 * log_det_h;
    Ok(LaplaceConditional {
        hyper: *hyper,
        mode: theta,
        curvature,
        log_marginal,
        gradient_norm,
        iterations,
        n_blocks: design.n_blocks,
        basis: design.basis.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct WeightedLaplace {
    pub weight: f64,
    pub conditional: LaplaceConditional,
}

#[derive(Debug, Clone)]
pub struct Stage2Fit {
    pub hyper_hat: Stage2Hyper,
    pub internal_mode: Vec<f64>,
    /// Gaussian approximation of the hyperparameter posterior on `(log σ²_φ, log σ²_ν)`.
    pub internal_cov: DMatrix<f64>,
    pub log_posterior: f64,
    /// Retained hyperparameter points; the first is the mode.
    pub points: Vec<WeightedLaplace>,
    pub evaluations: usize,
}

const PARAMETERS: [&str; 4] = ["gamma0", "gamma1", "sigma2_phi", "sigma2_nu"];

/// Fits the model: Laplace marginal maximized over the log variances.
pub fn fit_glmm(data: &HealthData, config: &Stage2Config) -> Result<Stage2Fit> {
    config.priors.validate()?;
    if let Likelihood::Gaussian { noise_variance } = config.likelihood {
        if !(noise_variance > 0.0) {
            return Err(Error::Config("Gaussian noise variance must be positive".into()));
        }
    } else {
        data.check_counts()?;
    }
    let design = Design::new(data)?;
    let warm: RefCell<Option<DVector<f64>>> = RefCell::new(None);
    let log_posterior = |u: &[f64]| -> f64 {
        let hyper = Stage2Hyper::from_internal(u);
        let start = warm.borrow().clone();
        match laplace_with(&design, &hyper, config, start.as_ref()) {
            Ok(c) => {
                let lp = c.log_marginal + config.priors.log_density(u);
                *warm.borrow_mut() = Some(c.mode);
                lp
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let bounds = Bounds::new(vec![LOG_VARIANCE_BOUNDS.0; 2], vec![LOG_VARIANCE_BOUNDS.1; 2])?;
    let start = config.initial.unwrap_or(Stage2Hyper {
        sigma2_phi: 0.1,
        sigma2_nu: 0.1,
    });
    start.validate()?;
    let mut u0 = start.to_internal().to_vec();
    bounds.clamp(&mut u0);
    let opt = minimize(|u| -log_posterior(u), &u0, &bounds, &config.optim)?;
    let mode = opt.x;
    let hess = fd_hessian(|u| -log_posterior(u), &mode, &[config.hessian_step; 2]);
    let cov = covariance_from_hessian(&hess);
    let hyper_hat = Stage2Hyper::from_internal(&mode);
    let at_mode = laplace_with(&design, &hyper_hat, config, None)?;
    let mode_lp = at_mode.log_marginal + config.priors.log_density(&mode);

    let mut points = vec![(0.0, at_mode)];
    if config.integration == HyperIntegration::Grid {
        let sd = [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt()];
        for a in [-1.0, 0.0, 1.0] {
            for b in [-1.0, 0.0, 1.0] {
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                let mut u = vec![mode[0] + a * sd[0], mode[1] + b * sd[1]];
                bounds.clamp(&mut u);
                let hyper = Stage2Hyper::from_internal(&u);
                if let Ok(c) = laplace_with(&design, &hyper, config, Some(&points[0].1.mode)) {
                    let lp = c.log_marginal + config.priors.log_density(&u);
                    points.push((lp - mode_lp, c));
                }
            }
        }
    }
    let max_lw = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = points.iter().map(|p| (p.0 - max_lw).exp()).sum();
    let points = points
        .into_iter()
        .map(|(lw, c)| WeightedLaplace {
            weight: (lw - max_lw).exp() / total,
            conditional: c,
        })
        .collect();
    Ok(Stage2Fit {
        hyper_hat,
        internal_mode: mode,
        internal_cov: cov,
        log_posterior: mode_lp,
        points,
        evaluations: opt.evaluations,
    })
}

/// Draws per parameter, in the order of [`Stage2Samples::PARAMETERS`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stage2Samples {
    pub gamma0: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub sigma2_phi: Vec<f64>,
    pub sigma2_nu: Vec<f64>,
}

impl Stage2Samples {
    pub const PARAMETERS: [&'static str; 4] = PARAMETERS;

    pub fn len(&self) -> usize {
        self.gamma1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma1.is_empty()
    }

    pub fn parameter(&self, index: usize) -> &[f64] {
        match index {
            0 => &self.gamma0,
            1 => &self.gamma1,
            2 => &self.sigma2_phi,
            _ => &self.sigma2_nu,
        }
    }

    fn extend(&mut self, other: &Stage2Samples) {
        self.gamma0.extend_from_slice(&other.gamma0);
        self.gamma1.extend_from_slice(&other.gamma1);
        self.sigma2_phi.extend_from_slice(&other.sigma2_phi);
        self.sigma2_nu.extend_from_slice(&other.sigma2_nu);
    }
}

impl Stage2Fit {
    pub fn mode(&self) -> &LaplaceConditional {
        &self.points[0].conditional
    }

    /// Mode estimates and posterior sds; variance intervals are
    /// back-transformed from the log scale.
    pub fn summary(&self) -> Vec<ParameterSummary> {
        let mut rows = Vec::with_capacity(4);
        let (m, v) = self.fixed_moments();
        for k in 0..2 {
            let sd = v[k].sqrt();
            rows.push(ParameterSummary {
                parameter: PARAMETERS[k].to_string(),
                estimate: m[k],
                sd,
                lower: m[k] - 1.959_963_984_540_054 * sd,
                upper: m[k] + 1.959_963_984_540_054 * sd,
            });
        }
        for k in 0..2 {
            let (u, sd) = (self.internal_mode[k], self.internal_cov[(k, k)].sqrt());
            rows.push(ParameterSummary {
                parameter: PARAMETERS[2 + k].to_string(),
                estimate: u.exp(),
                sd: u.exp() * sd,
                lower: (u - 1.959_963_984_540_054 * sd).exp(),
                upper: (u + 1.959_963_984_540_054 * sd).exp(),
            });
        }
        rows
    }

    /// Mixture mean and variance of `(γ₀, γ₁)` over the retained points.
    pub fn fixed_moments(&self) -> ([f64; 2], [f64; 2]) {
        let mut mean = [0.0; 2];
        let mut second = [0.0; 2];
        for p in &self.points {
            let cov = p.conditional.covariance();
            for k in 0..2 {
                let mu = p.conditional.mode[k];
                mean[k] += p.weight * mu;
                second[k] += p.weight * (cov[(k, k)] + mu * mu);
            }
        }
        (mean, [second[0] - mean[0] * mean[0], second[1] - mean[1] * mean[1]])
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

/// `k` posterior draws: variances from the Gaussian approximation on the log
/// scale, fixed effects from the Laplace approximation at a weighted point.
pub fn sample_stage2<R: Rng + ?Sized>(fit: &Stage2Fit, k: usize, rng: &mut R) -> Stage2Samples {
    let l = fit
        .internal_cov
        .clone()
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::from_diagonal(&fit.internal_cov.diagonal().map(|v| v.max(0.0).sqrt())));
    let mut out = Stage2Samples::default();
    for _ in 0..k {
        let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = DVector::from_column_slice(&fit.internal_mode) + &l * z;
        out.sigma2_phi.push(u[0].exp());
        out.sigma2_nu.push(u[1].exp());
        let theta = fit.points[fit.pick_point(rng)].conditional.sample(rng);
        out.gamma0.push(theta[0]);
        out.gamma1.push(theta[1]);
    }
    out
}

/// One parameter's pooled summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledSummary {
    pub parameter: String,
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    pub n_samples: usize,
    pub n_failures: usize,
}

/// Draws pooled over the exposure samples that were fitted successfully.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledPosterior {
    pub samples: Stage2Samples,
    /// Draws contributed by each successful exposure sample, in sample order.
    pub per_fit: Vec<Stage2Samples>,
    pub n_requested: usize,
    pub n_failures: usize,
}

impl PooledPosterior {
    pub fn pool(results: Vec<Result<Stage2Samples>>) -> Result<Self> {
        let n_requested = results.len();
        let mut samples = Stage2Samples::default();
        let mut per_fit = Vec::new();
        let mut n_failures = 0;
        let mut last_error = None;
        for r in results {
            match r {
                Ok(s) => {
                    samples.extend(&s);
                    per_fit.push(s);
                }
                Err(e) => {
                    n_failures += 1;
                    last_error = Some(e);
                }
            }
        }
        if per_fit.is_empty() {
            return Err(last_error.unwrap_or_else(|| Error::InvalidInput("no exposure samples to pool".into())));
        }
        Ok(Self {
            samples,
            per_fit,
            n_requested,
            n_failures,
        })
    }

    pub fn summary(&self) -> Vec<PooledSummary> {
        (0..4)
            .map(|k| {
                let draws = self.samples.parameter(k);
                let s = sorted(draws);
                PooledSummary {
                    parameter: PARAMETERS[k].to_string(),
                    mean: mean(draws),
                    median: quantile_sorted(&s, 0.5),
                    q025: quantile_sorted(&s, 0.025),
                    q975: quantile_sorted(&s, 0.975),
                    n_samples: draws.len(),
                    n_failures: self.n_failures,
                }
            })
            .collect()
    }

    /// CSV with header `parameter,mean,median,q025,q975,n_samples,n_failures`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "parameter,mean,median,q025,q975,n_samples,n_failures")?;
        for r in self.summary() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.parameter, r.mean, r.median, r.q025, r.q975, r.n_samples, r.n_failures
            )?;
        }
        Ok(())
    }
}

/// Fits stage 2 once per exposure matrix and pools `k` draws from each.
///
/// Fit `j` draws from sub-stream `j` of `seed`; results are pooled in order.
pub fn propagate_exposures(
    exposures: &[DMatrix<f64>],
    health: &HealthData,
    config: &Stage2Config,
    k: usize,
    seed: u64,
) -> Result<PooledPosterior> {
    if exposures.is_empty() || k == 0 {
        return Err(Error::InvalidInput("propagation needs J ≥ 1 and K ≥ 1".into()));
    }
    let results: Vec<Result<Stage2Samples>> = exposures
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            let data = health.with_exposure(x.clone())?;
            let fit = fit_glmm(&data, config)?;
            Ok(sample_stage2(&fit, k, &mut substream(seed, j as u64)))
        })
        .collect();
    PooledPosterior::pool(results)
}

/// Block exposures from `j` stage-1 posterior surfaces on the grid.
pub fn sample_exposures<R: Rng + ?Sized>(
    stage1: &Stage1Fit,
    grid: &Projector,
    z_grid: &DMatrix<f64>,
    table: &OverlapTable,
    j: usize,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    let draws = predict_latent(stage1, grid, z_grid, j, rng)?;
    (0..j)
        .map(|s| {
            let surface = DMatrix::from_fn(draws.n_points, draws.n_times, |g, t| draws.get(s, t, g));
            table.apply_columns(&surface)
        })
        .collect()
}

/// Full propagation: `j` stage-1 surfaces aggregated by `table`, one stage-2
/// fit each, `k` draws per fit.
#[allow(clippy::too_many_arguments)]
pub fn propagate(
    stage1: &Stage1Fit,
    grid: &Projector,
    z_grid: &DMatrix<f64>,
    table: &OverlapTable,
    health: &HealthData,
    config: &Stage2Config,
    j: usize,
    k: usize,
    seed: u64,
) -> Result<PooledPosterior> {
    if j == 0 || k == 0 {
        return Err(Error::InvalidInput("propagation needs J ≥ 1 and K ≥ 1".into()));
    }
    let exposures = sample_exposures(stage1, grid, z_grid, table, j, &mut substream(seed, u64::MAX))?;
    propagate_exposures(&exposures, health, config, k, seed)
}
