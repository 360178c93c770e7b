//! Hyperparameter priors expressed as log densities on internal coordinates.
//!
//! Variances are optimized on the log scale, the AR(1) coefficient through
//! `u = log((1+ς)/(1−ς))` and ranges on the log scale; every density here
//! includes the Jacobian of that map so that it can be added directly to a
//! log marginal likelihood in the same coordinates.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `u = log((1+ς)/(1−ς))`.
pub fn ar_to_internal(varsigma: f64) -> f64 {
    ((1.0 + varsigma) / (1.0 - varsigma)).ln()
}

pub fn ar_from_internal(u: f64) -> f64 {
    (0.5 * u).tanh()
}

/// Prior on one scalar hyperparameter.
///
/// For a variance parameter `v` the internal coordinate is `u = log v`; the
/// `Normal` and `Flat` variants act directly on whatever the internal
/// coordinate is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarPrior {
    Flat,
    Normal { mean: f64, sd: f64 },
    /// Gamma(shape, rate) on the precision `1/v`.
    GammaPrecision { shape: f64, rate: f64 },
    /// Inverse-gamma(shape, scale) on the variance `v`.
    InvGamma { shape: f64, scale: f64 },
    /// Exponential on the standard deviation with `P(sd > sd0) = alpha`.
    PcSd { sd0: f64, alpha: f64 },
}

impl ScalarPrior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalarPrior::Flat => true,
            ScalarPrior::Normal { mean, sd } => mean.is_finite() && sd > 0.0,
            ScalarPrior::GammaPrecision { shape, rate } => shape > 0.0 && rate > 0.0,
            ScalarPrior::InvGamma { shape, scale } => shape > 0.0 && scale > 0.0,
            ScalarPrior::PcSd { sd0, alpha } => sd0 > 0.0 && alpha > 0.0 && alpha < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid prior parameters: {self:?}")))
        }
    }

    /// Inverse-gamma with the given mean and coefficient of variation.
    pub fn inv_gamma_from_mean_cv(mean: f64, cv: f64) -> Self {
        let shape = 2.0 + 1.0 / (cv * cv);
        ScalarPrior::InvGamma {
            shape,
            scale: mean * (shape - 1.0),
        }
    }

    /// Log density of the internal coordinate `u`.
    pub fn log_density(&self, u: f64) -> f64 {
        match *self {
            ScalarPrior::Flat => 0.0,
            ScalarPrior::Normal { mean, sd } => {
                let z = (u - mean) / sd;
                -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
            }
            ScalarPrior::GammaPrecision { shape, rate } => {
                let log_prec = -u;
                shape * rate.ln() - ln_gamma(shape) + shape * log_prec - rate * log_prec.exp()
            }
            ScalarPrior::InvGamma { shape, scale } => {
                shape * scale.ln() - ln_gamma(shape) - shape * u - scale * (-u).exp()
            }
            ScalarPrior::PcSd { sd0, alpha } => {
                let lambda = -alpha.ln() / sd0;
                let sd = (0.5 * u).exp();
                lambda.ln() - lambda * sd + (0.5 * sd).ln()
            }
        }
    }
}

/// Joint prior on the Matérn parameters in internal coordinates `(log σ², log ρ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaternPrior {
    /// Penalized-complexity prior in two dimensions:
    /// `P(σ > sigma0) = alpha` and `P(ρ < rho0) = alpha`.
    PcJoint { sigma0: f64, rho0: f64, alpha: f64 },
    /// Independent Gaussians on `log τ` and `log κ` of the SPDE parametrization.
    LogTauLogKappa {
        mean_log_tau: f64,
        mean_log_kappa: f64,
        sd_log_tau: f64,
        sd_log_kappa: f64,
    },
    Independent { log_variance: ScalarPrior, log_range: ScalarPrior },
}

fn log_tau_kappa(log_variance: f64, log_range: f64) -> (f64, f64) {
    let log_kappa = 0.5 * 8f64.ln() - log_range;
    let log_tau = -0.5 * (4.0 * std::f64::consts::PI).ln() - log_kappa - 0.5 * log_variance;
    (log_tau, log_kappa)
}

impl MaternPrior {
    /// Gaussian `log τ`, `log κ` prior centred at variance one and `nominal_range`,
    /// with precision 0.1 on each coordinate.
    pub fn default_log_tau_kappa(nominal_range: f64) -> Self {
        let (mean_log_tau, mean_log_kappa) = log_tau_kappa(0.0, nominal_range.ln());
        let sd = 10f64.sqrt();
        MaternPrior::LogTauLogKappa {
            mean_log_tau,
            mean_log_kappa,
            sd_log_tau: sd,
            sd_log_kappa: sd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MaternPrior::PcJoint { sigma0, rho0, alpha } if sigma0 > 0.0 && rho0 > 0.0 && alpha > 0.0 && alpha < 1.0 => {
                Ok(())
            }
            MaternPrior::LogTauLogKappa {
                mean_log_tau,
                mean_log_kappa,
                sd_log_tau,
                sd_log_kappa,
            } if mean_log_tau.is_finite() && mean_log_kappa.is_finite() && sd_log_tau > 0.0 && sd_log_kappa > 0.0 => {
                Ok(())
            }
            MaternPrior::Independent { log_variance, log_range } => {
                log_variance.validate()?;
                log_range.validate()
            }
            _ => Err(Error::Config(format!("invalid Matérn prior parameters: {self:?}"))),
        }
    }

    pub fn log_density(&self, log_variance: f64, log_range: f64) -> f64 {
        match *self {
            MaternPrior::PcJoint { sigma0, rho0, alpha } => {
                let lambda_range = -alpha.ln() * rho0;
                let range = log_range.exp();
                let range_part = lambda_range.ln() - log_range - lambda_range / range;
                let sd_part = ScalarPrior::PcSd { sd0: sigma0, alpha }.log_density(log_variance);
                range_part + sd_part
            }
            MaternPrior::LogTauLogKappa {
                mean_log_tau,
                mean_log_kappa,
                sd_log_tau,
                sd_log_kappa,
            } => {
                let (lt, lk) = log_tau_kappa(log_variance, log_range);
                // |∂(log τ, log κ)/∂(log σ², log ρ)| = 1/2.
                ScalarPrior::Normal {
                    mean: mean_log_tau,
                    sd: sd_log_tau,
                }
                .log_density(lt)
                    + ScalarPrior::Normal {
                        mean: mean_log_kappa,
                        sd: sd_log_kappa,
                    }
                    .log_density(lk)
                    + 0.5f64.ln()
            }
            MaternPrior::Independent { log_variance: pv, log_range: pr } => {
                pv.log_density(log_variance) + pr.log_density(log_range)
            }
        }
    }
}
