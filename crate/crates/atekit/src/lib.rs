//! Selecting treatment-effect estimators and roll-out policies across a
//! corpus of randomized controlled trials.
//!
//! A single RCT never reveals its true average treatment effect, so estimator
//! quality cannot be judged trial by trial. The toolkit instead splits each
//! trial's arms into two folds, uses the held-out difference-of-means estimate
//! as a noisy but unbiased label for the effect, and pools the resulting
//! per-trial error proxies across the whole corpus:
//!
//! * [`corpus`] — trial data model, CSV ingestion, a seeded heavy-tailed
//!   synthetic corpus generator with known ground truth, and tail diagnostics
//!   (Hill exponent, Gini share curve).
//! * [`estimators`] — difference-of-means, median-of-means, covariate-adjusted
//!   least squares and its inverse-`(1+d)^γ` weighted variant, plus
//!   training-fold Winsorization.
//! * [`crossval`] — per-arm fold splitting and the squared held-out error
//!   proxy, averaged over split replicates.
//! * [`aggregate`] — normalized pairwise scores, one-sample t-tests, the
//!   comparison matrix, and Copeland ranking.
//! * [`policy`] — roll-out rules (t-statistic thresholds, learned linear
//!   rules, hindsight oracle) evaluated by their estimated cumulative impact.
//!
//! Everything is deterministic given a 64-bit seed: per-trial and
//! per-replicate randomness is derived from counters, never from execution
//! order, so results are identical across thread counts. Data-parallel loops
//! use rayon when the default `parallel` feature is enabled and fall back to
//! sequential iteration otherwise.

pub mod aggregate;
pub mod corpus;
pub mod crossval;
pub mod estimators;
pub mod exec;
pub mod linalg;
pub mod policy;
pub mod rng;
pub mod stats;

pub use crossval::{MseEstimate, SplitPlan};
pub use policy::{ImpactEstimate, PolicySpec};
pub use corpus::{Corpus, GeneratorConfig, Rct, TailReport, UnitRecord};

pub use estimators::{Estimate, EstimatorSpec};

