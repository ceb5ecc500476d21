//! Arm splitting and the held-out squared-error proxy.
//!
//! Each trial's treated and control arms are split into fold 1 (estimation)
//! and fold 2 (evaluation) at a common proportion `p`, independently redrawn
//! for every replicate. The proxy error of a spec on one trial and replicate
//! is the squared gap between its fold-1 estimate and the fold-2 difference
//! of means. Fold 2 always sees raw corpus values; Winsorization applies to
//! fold 1 only, inside the estimator itself.

use std::collections::HashMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::corpus::{Corpus, Rct, UnitRecord};
use crate::estimators::{estimate_dm, run_estimator, EstimatorError, EstimatorSpec};
use crate::exec;
use crate::rng::{derive_rng, derive_seed, stream};

use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum CrossvalError {
    #[error("split proportion must lie in (0, 1), got {0}")]
    InvalidProportion(f64),
    #[error("need at least one replicate")]
    NoReplicates,
    #[error("proportion {p} leaves an empty fold in rct `{rct_id}`")]
    FoldEmpty { rct_id: String, p: f64 },
    #[error("rct `{0}` is not covered by this split plan")]
    UnknownRct(String),
    #[error("replicate {got} out of range; plan has {available}")]
    ReplicateOutOfRange { got: usize, available: usize },
    #[error("plan does not match rct `{rct_id}`: {reason}")]
    PlanMismatch { rct_id: String, reason: String },
    #[error("estimator failed on rct `{rct_id}` replicate {replicate}: {source}")]
    Estimator {
        rct_id: String,
        replicate: usize,
        #[source]
        source: EstimatorError,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed errors csv at line {line}: {reason}")]
    MalformedErrorsRow { line: u64, reason: String },
}

/// Fold-1 index sets for one trial and replicate; indices point into the
/// trial's unit list and are sorted. Fold 2 is the arm complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub treat_fold1: Vec<u32>,
    pub control_fold1: Vec<u32>,
}

/// Replicated fold assignments for one trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RctSplits {
    pub rct_id: String,
    pub replicates: Vec<FoldAssignment>,
}

/// Per-trial, per-replicate fold-1 index sets over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    p: f64,
    n_replicates: usize,
    seed: u64,
    rcts: Vec<RctSplits>,
    index: HashMap<String, usize>,
}

impl SplitPlan {
    /// Assembles a plan from explicit assignments (fixture support); every
    /// trial must carry the same replicate count.
    pub fn from_assignments(
        p: f64,
        seed: u64,
        rcts: Vec<RctSplits>,
    ) -> Result<Self, CrossvalError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(CrossvalError::InvalidProportion(p));
        }
        let n_replicates = rcts.first().map_or(0, |r| r.replicates.len());
        if n_replicates == 0 {
            return Err(CrossvalError::NoReplicates);
        }
        let mut index = HashMap::new();
        for (i, rct) in rcts.iter().enumerate() {
            if rct.replicates.len() != n_replicates {
                return Err(CrossvalError::PlanMismatch {
                    rct_id: rct.rct_id.clone(),
                    reason: "uneven replicate counts".to_string(),
                });
            }
            index.insert(rct.rct_id.clone(), i);
        }
        Ok(Self { p, n_replicates, seed, rcts, index })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn n_replicates(&self) -> usize {
        self.n_replicates
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rcts(&self) -> &[RctSplits] {
        &self.rcts
    }

    pub fn position(&self, rct_id: &str) -> Option<usize> {
        self.index.get(rct_id).copied()
    }

    pub fn assignment(
        &self,
        rct_id: &str,
        replicate: usize,
    ) -> Result<&FoldAssignment, CrossvalError> {
        let pos = self
            .position(rct_id)
            .ok_or_else(|| CrossvalError::UnknownRct(rct_id.to_string()))?;
        self.rcts[pos]
            .replicates
            .get(replicate)
            .ok_or(CrossvalError::ReplicateOutOfRange {
                got: replicate,
                available: self.n_replicates,
            })
    }

    /// Deterministic per-(trial, replicate) seed for estimator-internal
    /// randomness, derived from the plan position rather than execution order.
    pub fn estimator_seed(&self, rct_id: &str, replicate: usize) -> Result<u64, CrossvalError> {
        let pos = self
            .position(rct_id)
            .ok_or_else(|| CrossvalError::UnknownRct(rct_id.to_string()))?;
        Ok(derive_seed(
            self.seed,
            &[stream::ESTIMATOR, pos as u64, replicate as u64],
        ))
    }
}

fn round_half_even(x: f64) -> usize {
    x.round_ties_even() as usize
}

/// Fold-1 size for one arm under proportion `p`; `None` if either fold would
/// be empty.
fn fold1_size(arm: usize, p: f64) -> Option<usize> {
    let s = round_half_even(p * arm as f64);
    (s >= 1 && s + 1 <= arm).then_some(s)
}

/// Draws uniformly random per-arm fold assignments for every trial and
/// replicate. Sizes follow round-half-to-even of `p · arm size`; randomness
/// is derived from `(seed, trial position, replicate)`.
pub fn make_splits(
    corpus: &Corpus,
    p: f64,
    n_replicates: usize,
    seed: u64,
) -> Result<SplitPlan, CrossvalError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CrossvalError::InvalidProportion(p));
    }
    if n_replicates == 0 {
        return Err(CrossvalError::NoReplicates);
    }
    // Validate fold sizes up front so failures name the trial.
    for rct in corpus.rcts() {
        if fold1_size(rct.n_treated(), p).is_none() || fold1_size(rct.n_control(), p).is_none() {
            return Err(CrossvalError::FoldEmpty {
                rct_id: rct.id().to_string(),
                p,
            });
        }
    }

    let rcts = exec::map_indexed(corpus.len(), |i| {
        let rct = &corpus.rcts()[i];
        let treated = indices_of(rct, true);
        let control = indices_of(rct, false);
        let s = fold1_size(treated.len(), p).expect("validated above");
        let r = fold1_size(control.len(), p).expect("validated above");
        let replicates = (0..n_replicates)
            .map(|b| {
                let mut rng = derive_rng(seed, &[stream::SPLIT, i as u64, b as u64]);
                FoldAssignment {
                    treat_fold1: sample_sorted(&treated, s, &mut rng),
                    control_fold1: sample_sorted(&control, r, &mut rng),
                }
            })
            .collect();
        RctSplits {
            rct_id: rct.id().to_string(),
            replicates,
        }
    });

    SplitPlan::from_assignments(p, seed, rcts)
}

fn indices_of(rct: &Rct, treated: bool) -> Vec<u32> {
    rct.units()
        .iter()
        .enumerate()
        .filter(|(_, u)| u.treated == treated)
        .map(|(i, _)| i as u32)
        .collect()
}

fn sample_sorted(pool: &[u32], amount: usize, rng: &mut impl rand::Rng) -> Vec<u32> {
    let mut shuffled = pool.to_vec();
    let (chosen, _) = shuffled.partial_shuffle(rng, amount);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    chosen
}

/// Materialized folds for one trial and replicate: fold-1 units feed the
/// estimator under test, fold-2 responses feed the difference-of-means label.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldData {
    pub fold1: Vec<UnitRecord>,
    pub fold2_treat_y: Vec<f64>,
    pub fold2_control_y: Vec<f64>,
}

/// Splits a trial's units according to the plan's assignment.
pub fn fold_units(rct: &Rct, plan: &SplitPlan, replicate: usize) -> Result<FoldData, CrossvalError> {
    let assignment = plan.assignment(rct.id(), replicate)?;
    let n = rct.units().len();
    let mut in_fold1 = vec![false; n];
    for &i in assignment.treat_fold1.iter().chain(&assignment.control_fold1) {
        let i = i as usize;
        if i >= n {
            return Err(CrossvalError::PlanMismatch {
                rct_id: rct.id().to_string(),
                reason: format!("unit index {i} out of range ({n} units)"),
            });
        }
        in_fold1[i] = true;
    }

    let capacity = assignment.treat_fold1.len() + assignment.control_fold1.len();
    let mut fold1 = Vec::with_capacity(capacity);
    let mut fold2_treat_y = Vec::new();
    let mut fold2_control_y = Vec::new();
    for (i, unit) in rct.units().iter().enumerate() {
        if in_fold1[i] {
            fold1.push(*unit);
        } else if unit.treated {
            fold2_treat_y.push(unit.y);
        } else {
            fold2_control_y.push(unit.y);
        }
    }
    if fold2_treat_y.is_empty() || fold2_control_y.is_empty() {
        return Err(CrossvalError::PlanMismatch {
            rct_id: rct.id().to_string(),
            reason: "fold 2 has an empty arm".to_string(),
        });
    }
    Ok(FoldData {
        fold1,
        fold2_treat_y,
        fold2_control_y,
    })
}

/// Squared gap between the spec's fold-1 estimate and the fold-2 difference
/// of means for one replicate. Fold-2 responses are raw corpus values.
pub fn heldout_error(
    rct: &Rct,
    spec: &EstimatorSpec,
    plan: &SplitPlan,
    replicate: usize,
) -> Result<f64, CrossvalError> {
    let folds = fold_units(rct, plan, replicate)?;
    let wrap = |source| CrossvalError::Estimator {
        rct_id: rct.id().to_string(),
        replicate,
        source,
    };
    let seed = plan.estimator_seed(rct.id(), replicate)?;
    let fold1_estimate = run_estimator(spec, &folds.fold1, seed).map_err(wrap)?;
    let label = estimate_dm(&folds.fold2_treat_y, &folds.fold2_control_y).map_err(wrap)?;
    let gap = fold1_estimate.delta_hat - label.delta_hat;
    Ok(gap * gap)
}

/// Replicate-averaged proxy error of one spec on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct MseEstimate {
    pub rct_id: String,
    pub spec: EstimatorSpec,
    /// Mean of `per_replicate`.
    pub value: f64,
    pub per_replicate: Vec<f64>,
}

/// A trial skipped during a corpus run, with the failure it hit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RctFailure {
    pub rct_id: String,
    pub message: String,
}

/// Per-trial proxy errors of one spec over a corpus; trials whose estimator
/// fails on any replicate are flagged and skipped rather than sinking the run.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusErrors {
    pub spec: EstimatorSpec,
    pub estimates: Vec<MseEstimate>,
    pub failures: Vec<RctFailure>,
}

/// Averages [`heldout_error`] over replicates for every trial in the corpus.
pub fn corpus_errors(
    corpus: &Corpus,
    spec: &EstimatorSpec,
    plan: &SplitPlan,
) -> Result<CorpusErrors, CrossvalError> {
    for rct in corpus.rcts() {
        if plan.position(rct.id()).is_none() {
            return Err(CrossvalError::UnknownRct(rct.id().to_string()));
        }
    }
    let per_rct = exec::map_indexed(corpus.len(), |i| {
        let rct = &corpus.rcts()[i];
        let mut per_replicate = Vec::with_capacity(plan.n_replicates());
        for b in 0..plan.n_replicates() {
            match heldout_error(rct, spec, plan, b) {
                Ok(value) => per_replicate.push(value),
                Err(err) => {
                    return Err(RctFailure {
                        rct_id: rct.id().to_string(),
                        message: err.to_string(),
                    })
                }
            }
        }
        Ok(MseEstimate {
            rct_id: rct.id().to_string(),
            spec: *spec,
            value: crate::stats::mean(&per_replicate),
            per_replicate,
        })
    });

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for outcome in per_rct {
        match outcome {
            Ok(est) => estimates.push(est),
            Err(failure) => failures.push(failure),
        }
    }
    Ok(CorpusErrors {
        spec: *spec,
        estimates,
        failures,
    })
}

/// Writes `rct_id,spec,value` rows for any number of spec runs.
pub fn write_errors_csv(runs: &[CorpusErrors], mut out: impl Write) -> Result<(), CrossvalError> {
    writeln!(out, "rct_id,spec,value")?;
    for run in runs {
        for est in &run.estimates {
            writeln!(out, "{},{},{}", est.rct_id, run.spec, est.value)?;
        }
    }
    Ok(())
}

/// Long per-replicate format `rct_id,spec,replicate,value`.
pub fn write_errors_replicates_csv(
    runs: &[CorpusErrors],
    mut out: impl Write,
) -> Result<(), CrossvalError> {
    writeln!(out, "rct_id,spec,replicate,value")?;
    for run in runs {
        for est in &run.estimates {
            for (b, value) in est.per_replicate.iter().enumerate() {
                writeln!(out, "{},{},{},{}", est.rct_id, run.spec, b, value)?;
            }
        }
    }
    Ok(())
}

/// Reads `rct_id,spec,value` rows back into per-spec error lists, preserving
/// first-seen order of specs and trials.
pub fn read_errors_csv(source: impl Read) -> Result<Vec<CorpusErrors>, CrossvalError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(rct_col), Some(spec_col), Some(value_col)) =
        (col("rct_id"), col("spec"), col("value"))
    else {
        return Err(CrossvalError::MalformedErrorsRow {
            line: 1,
            reason: "need columns rct_id,spec,value".to_string(),
        });
    };

    let mut order: Vec<CorpusErrors> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| CrossvalError::MalformedErrorsRow { line, reason };
        let spec_name = record.get(spec_col).unwrap_or("").to_string();
        let spec: EstimatorSpec = spec_name
            .parse()
            .map_err(|e: EstimatorError| bad(e.to_string()))?;
        let value: f64 = record
            .get(value_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| bad("cannot parse value".to_string()))?;
        if !value.is_finite() || value < 0.0 {
            return Err(bad(format!(
                "value must be finite and nonnegative, got {value}"
            )));
        }
        let rct_id = record.get(rct_col).unwrap_or("").to_string();
        let slot = *index.entry(spec_name).or_insert_with(|| {
            order.push(CorpusErrors {
                spec,
                estimates: Vec::new(),
                failures: Vec::new(),
            });
            order.len() - 1
        });
        order[slot].estimates.push(MseEstimate {
            rct_id,
            spec,
            value,
            per_replicate: vec![value],
        });
    }
    Ok(order)
}
