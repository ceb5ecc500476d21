//! RCT data model, ingestion, synthetic generation, and tail diagnostics.

mod generate;
mod io;
mod tail;

pub use generate::simulate_corpus;
pub use io::{ingest_csv, write_corpus_csv, write_truth_json};
pub use tail::{gini_curve, hill_estimate, hill_estimate_with_k};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One experimental unit: pre/post responses, auxiliary covariate, treatment
/// flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitRecord {
    /// Averaged pretreatment response.
    pub x: f64,
    /// Nonnegative pretreatment auxiliary covariate (same scale family as `y`).
    pub d: f64,
    /// Averaged posttreatment response.
    pub y: f64,
    /// Treatment arm flag.
    pub treated: bool,
}

impl UnitRecord {
    pub fn new(x: f64, d: f64, y: f64, treated: bool) -> Result<Self, CorpusError> {
        if !x.is_finite() || !d.is_finite() || !y.is_finite() {
            return Err(CorpusError::NonFiniteValue);
        }
        if d < 0.0 {
            return Err(CorpusError::NegativeAuxiliary { value: d });
        }
        Ok(Self { x, d, y, treated })
    }
}

/// A single identified trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Rct {
    id: String,
    units: Vec<UnitRecord>,
    /// Size of the roll-out target population; at least the unit count.
    m: u64,
    profit_per_unit: Option<f64>,
    /// Ground-truth average treatment effect; synthetic corpora only.
    true_delta: Option<f64>,
    /// Ordering key for online policy runs.
    time_index: Option<i64>,
}

impl Rct {
    pub fn new(
        id: impl Into<String>,
        units: Vec<UnitRecord>,
        m: u64,
        profit_per_unit: Option<f64>,
        true_delta: Option<f64>,
        time_index: Option<i64>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let n_treated = units.iter().filter(|u| u.treated).count();
        let n_control = units.len() - n_treated;
        if n_treated < 2 || n_control < 2 {
            return Err(CorpusError::ArmTooSmall {
                id,
                n_treated,
                n_control,
            });
        }
        if (m as usize) < units.len() {
            return Err(CorpusError::PopulationTooSmall {
                id,
                m,
                units: units.len(),
            });
        }
        Ok(Self {
            id,
            units,
            m,
            profit_per_unit,
            true_delta,
            time_index,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    /// Target population size M.
    pub fn population(&self) -> u64 {
        self.m
    }

    pub fn profit_per_unit(&self) -> Option<f64> {
        self.profit_per_unit
    }

    pub fn true_delta(&self) -> Option<f64> {
        self.true_delta
    }

    pub fn time_index(&self) -> Option<i64> {
        self.time_index
    }

    pub fn n_treated(&self) -> usize {
        self.units.iter().filter(|u| u.treated).count()
    }

    pub fn n_control(&self) -> usize {
        self.units.len() - self.n_treated()
    }

    pub fn treated_ys(&self) -> Vec<f64> {
        self.units.iter().filter(|u| u.treated).map(|u| u.y).collect()
    }

    pub fn control_ys(&self) -> Vec<f64> {
        self.units.iter().filter(|u| !u.treated).map(|u| u.y).collect()
    }
}

/// Where a corpus came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Ingested,
    Synthetic { config: GeneratorConfig, seed: u64 },
}

/// A non-empty collection of trials with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    rcts: Vec<Rct>,
    provenance: Provenance,
}

impl Corpus {
    pub fn new(rcts: Vec<Rct>, provenance: Provenance) -> Result<Self, CorpusError> {
        if rcts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut seen = std::collections::HashSet::new();
        for rct in &rcts {
            if !seen.insert(rct.id.clone()) {
                return Err(CorpusError::DuplicateRct {
                    id: rct.id.clone(),
                });
            }
        }
        Ok(Self { rcts, provenance })
    }

    pub fn rcts(&self) -> &[Rct] {
        &self.rcts
    }

    pub fn len(&self) -> usize {
        self.rcts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rcts.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// All posttreatment responses pooled across trials, in corpus order.
    pub fn pooled_ys(&self) -> Vec<f64> {
        self.rcts
            .iter()
            .flat_map(|r| r.units.iter().map(|u| u.y))
            .collect()
    }
}

/// Knobs for the synthetic heavy-tailed corpus generator.
///
/// Baseline responses follow a Pareto law whose density decays like
/// `y^(-tail_exponent_eta)`; `x` and `d` share the same marginal and are tied
/// to the response through a Gaussian copula with the configured strengths.
/// Treatment adds the trial's effect (drawn from the normal prior) to treated
/// units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_rcts: usize,
    /// Inclusive bounds on the per-trial unit count.
    pub units_per_rct: (usize, usize),
    /// Density tail exponent of the baseline response; must exceed 1.
    pub tail_exponent_eta: f64,
    pub delta_prior_mean: f64,
    pub delta_prior_sd: f64,
    /// Copula correlation between the pretreatment response and the baseline.
    pub xy_correlation: f64,
    /// Copula correlation between the auxiliary covariate and the baseline.
    pub dy_correlation: f64,
    pub treated_fraction: f64,
    /// Scale of the additive conditionally mean-zero response noise.
    pub noise_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_rcts: 300,
            units_per_rct: (400, 1200),
            tail_exponent_eta: 2.3,
            delta_prior_mean: 0.5,
            delta_prior_sd: 1.0,
            xy_correlation: 0.9,
            dy_correlation: 0.9,
            treated_fraction: 0.5,
            noise_scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |field: &'static str, reason: &str| {
            Err(CorpusError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.n_rcts == 0 {
            return invalid("n_rcts", "must be positive");
        }
        let (lo, hi) = self.units_per_rct;
        if lo < 4 || hi < lo {
            return invalid("units_per_rct", "need 4 <= min <= max");
        }
        if !(self.tail_exponent_eta > 1.0) || !self.tail_exponent_eta.is_finite() {
            return invalid("tail_exponent_eta", "must be a finite value > 1");
        }
        if !self.delta_prior_mean.is_finite() {
            return invalid("delta_prior_mean", "must be finite");
        }
        if !(self.delta_prior_sd >= 0.0) || !self.delta_prior_sd.is_finite() {
            return invalid("delta_prior_sd", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.xy_correlation) {
            return invalid("xy_correlation", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dy_correlation) {
            return invalid("dy_correlation", "must lie in [0, 1)");
        }
        if !(self.treated_fraction > 0.0 && self.treated_fraction < 1.0) {
            return invalid("treated_fraction", "must lie in (0, 1)");
        }
        if !(self.noise_scale > 0.0) || !self.noise_scale.is_finite() {
            return invalid("noise_scale", "must be a finite value > 0");
        }
        Ok(())
    }
}

/// Output of the Hill tail diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailReport {
    /// Fraction of (positive) samples used as order statistics.
    pub cutoff_fraction: f64,
    /// Estimated density exponent: `alpha_hat + 1`.
    pub eta_hat: f64,
    /// Raw Hill estimate of the survival-function exponent.
    pub alpha_hat: f64,
    /// Number of order statistics k entering the estimate.
    pub n_tail: usize,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("rct `{id}` has {n_treated} treated / {n_control} control units; need at least 2 of each")]
    ArmTooSmall {
        id: String,
        n_treated: usize,
        n_control: usize,
    },
    #[error("rct `{id}` declares population {m} smaller than its {units} units")]
    PopulationTooSmall { id: String, m: u64, units: usize },
    #[error("rct `{id}` has inconsistent values for `{field}`")]
    InconsistentField { id: String, field: &'static str },
    #[error("duplicate rct id `{id}`")]
    DuplicateRct { id: String },
    #[error("corpus contains no rcts")]
    EmptyCorpus,
    #[error("non-finite value")]
    NonFiniteValue,
    #[error("auxiliary covariate must be nonnegative, got {value}")]
    NegativeAuxiliary { value: f64 },
    #[error("invalid generator config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("hill cutoff must lie in (0, 0.5], got {0}")]
    InvalidCutoff(f64),
    #[error("need at least {needed} strictly positive samples, got {got}")]
    TooFewPositive { needed: usize, got: usize },
    #[error("hill estimate needs k >= 2 order statistics, got k = {0}")]
    TailTooShort(usize),
    #[error("degenerate tail: all top-k samples equal the reference order statistic")]
    DegenerateTail,
    #[error("gini curve requires at least one strictly positive sample")]
    AllZeroSamples,
    #[error("gini curve input must be nonnegative, got {0}")]
    NegativeSample(f64),
    #[error("gini curve needs at least 2 grid points, got {0}")]
    TooFewGridPoints(usize),
}
