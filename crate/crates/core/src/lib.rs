//! Two-stage spatio-temporal data fusion.
//!
//! Stage one joins sparse monitor series and a gridded proxy through a shared
//! latent field whose spatial part is an SPDE-discretized Matérn GMRF with
//! AR(1) temporal dependence. Stage two is a Poisson health model whose
//! exposure covariate is aggregated from stage-one posterior samples, so that
//! exposure uncertainty propagates into the health-effect estimates.
//! [`simstudy`] drives the replicated simulation design and its metrics.

pub mod blockagg;
pub mod cholesky;
pub mod error;
pub mod geometry;
pub mod gmrf;
pub mod mesh;
pub mod optim;
pub mod priors;
pub mod rng;
pub mod simstudy;
pub mod sparse;
pub mod stage1;
pub mod stage2;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{BlockGeometry, Point2D};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
