//! Transfer-function intervention analysis for count-valued multivariate
//! time series.
//!
//! One gradient-boosted model per taxon maps lagged abundances, lagged
//! interventions and subject covariates to the next abundance. Fitted models
//! forecast recursively under hypothetical interventions, and mirror
//! statistics over random subject splits select the taxa whose response to
//! an intervention is reproducible, with false discovery rate control.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalbench;
pub mod gbrt;
pub mod io;
pub mod mirrors;
pub mod normalize;
pub mod simgen;
pub mod transfer;
pub mod ts;

pub use error::{Error, ErrorKind, Result};
pub use evalbench::{CvConfig, EvalReport, Forecaster};
pub use gbrt::{BoostConfig, TreeEnsemble};
pub use mirrors::{MirrorReport, SelectConfig, SplitPlan};
pub use normalize::{NormalizationMode, Normalizer, SizeFactors};
pub use simgen::{SimConfig, SimTruth};
pub use transfer::{FitRecipe, InterventionScenario, TransferModel};
pub use ts::{InterventionSeriesSet, ScaleTag, SubjectSeries};
