//! Roll-out policies and their estimated cumulative impact.
//!
//! A policy maps a trial's fold-1 statistics to a binary deploy decision. Its
//! value on one replicate is Σᵢ Mᵢ · Δ̂ᵢ(fold 2) · Dᵢ(fold 1), where the
//! fold-2 difference of means prices the decision on data the policy never
//! saw; averaging over split replicates gives the reported impact and its
//! interval. Policies:
//!
//! * `tstat:<spec>:<c>` — deploy when the fold-1 t-statistic is at least `c`;
//!   `c = -inf` deploys everything, `c = inf` nothing.
//! * `regression:default` — a linear model of realized fold-2 value on fold-1
//!   estimator statistics plus trial size (and profit when present), deploying
//!   on positive predictions.
//! * `oracle` — hindsight rule deploying exactly the trials with positive
//!   fold-2 estimates; per replicate it upper-bounds every other policy.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{Corpus, Rct};
use crate::crossval::{fold_units, CrossvalError, RctFailure, SplitPlan};
use crate::estimators::{estimate_dm, run_estimator, Estimate, EstimatorError, EstimatorSpec};
use crate::exec;
use crate::linalg::{self, SingularMatrix};
use crate::stats::{mean, percentile_sorted, sample_variance, sort_ascending};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Crossval(#[from] CrossvalError),
    #[error("estimator failed on rct `{rct_id}` replicate {replicate}: {source}")]
    Estimator {
        rct_id: String,
        replicate: usize,
        #[source]
        source: EstimatorError,
    },
    #[error("rct `{rct_id}` replicate {replicate} has no t-statistic at a finite threshold")]
    MissingTStat { rct_id: String, replicate: usize },
    #[error("critical t must not be NaN")]
    InvalidCriticalT,
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("no evaluable rcts remain")]
    NoEvaluableRcts,
    #[error("regression policy needs at least {needed} training rows, got {got}")]
    NotEnoughRows { needed: usize, got: usize },
    #[error("regression design is rank deficient after dropping constant columns ({0})")]
    RankDeficient(#[from] SingularMatrix),
    #[error("feature rows are inconsistent: {0}")]
    MismatchedRows(String),
    #[error("corpus is not totally ordered by time_index: {0}")]
    Unordered(String),
    #[error("warm-up must cover at least one rct")]
    InvalidWarmup,
    #[error("cannot parse policy spec `{input}`: {reason}")]
    PolicyParse { input: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Estimator specs whose fold-1 statistics feed the regression policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub specs: Vec<EstimatorSpec>,
}

impl Default for FeatureSet {
    fn default() -> Self {
        Self {
            specs: vec![
                EstimatorSpec::dm(),
                EstimatorSpec::gen_dd(),
                EstimatorSpec::gen_dd_w(0.6),
            ],
        }
    }
}

/// What a policy is.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    TThreshold {
        spec: EstimatorSpec,
        /// May be ±infinity: +inf never deploys, -inf always deploys.
        critical_t: f64,
    },
    Regression {
        features: FeatureSet,
        /// Refit every step during online runs; otherwise fit once after
        /// warm-up.
        refit: bool,
    },
    Oracle,
}

/// A policy plus an optional baseline it is reported against.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub normalize_against: Option<Box<PolicySpec>>,
}

impl PolicySpec {
    pub fn t_threshold(spec: EstimatorSpec, critical_t: f64) -> Self {
        Self {
            kind: PolicyKind::TThreshold { spec, critical_t },
            normalize_against: None,
        }
    }

    pub fn oracle() -> Self {
        Self {
            kind: PolicyKind::Oracle,
            normalize_against: None,
        }
    }

    pub fn regression(features: FeatureSet, refit: bool) -> Self {
        Self {
            kind: PolicyKind::Regression { features, refit },
            normalize_against: None,
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            PolicyKind::TThreshold { spec, critical_t } => {
                write!(f, "tstat:{spec}:{critical_t}")
            }
            PolicyKind::Regression { refit, .. } => {
                write!(f, "regression:default")?;
                if !refit {
                    write!(f, ":norefit")?;
                }
                Ok(())
            }
            PolicyKind::Oracle => write!(f, "oracle"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| PolicyError::PolicyParse {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        if s == "oracle" {
            return Ok(Self::oracle());
        }
        if let Some(rest) = s.strip_prefix("regression:") {
            let (name, refit) = match rest.strip_suffix(":norefit") {
                Some(name) => (name, false),
                None => (rest, true),
            };
            if name != "default" {
                return Err(err("unknown regression feature set"));
            }
            return Ok(Self::regression(FeatureSet::default(), refit));
        }
        if let Some(rest) = s.strip_prefix("tstat:") {
            let (spec_str, crit_str) = rest
                .rsplit_once(':')
                .ok_or_else(|| err("expected tstat:<estimator>:<critical_t>"))?;
            let spec: EstimatorSpec = spec_str
                .parse()
                .map_err(|e: EstimatorError| err(&e.to_string()))?;
            let critical_t: f64 = match crit_str {
                "inf" | "+inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                other => other.parse().map_err(|_| err("bad critical t"))?,
            };
            if critical_t.is_nan() {
                return Err(err("critical t must not be NaN"));
            }
            return Ok(Self::t_threshold(spec, critical_t));
        }
        Err(err("expected tstat:..., regression:..., or oracle"))
    }
}

/// Confidence-interval construction over replicate values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiMethod {
    /// mean ± 1.96 · sd / √B.
    NormalApprox,
    /// Empirical 2.5 and 97.5 percentiles.
    Percentile,
}

/// Replicate-averaged policy value with a 95% interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactEstimate {
    /// Mean of `per_replicate`.
    pub f_hat: f64,
    pub per_replicate: Vec<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_replicates: usize,
}

impl ImpactEstimate {
    fn from_replicates(per_replicate: Vec<f64>, ci: CiMethod) -> Self {
        let n = per_replicate.len();
        let f_hat = mean(&per_replicate);
        let (mut ci_low, mut ci_high) = match (ci, sample_variance(&per_replicate)) {
            (CiMethod::NormalApprox, Some(var)) => {
                let margin = 1.96 * (var / n as f64).sqrt();
                (f_hat - margin, f_hat + margin)
            }
            (CiMethod::Percentile, Some(_)) => {
                let sorted = sort_ascending(&per_replicate);
                (
                    percentile_sorted(&sorted, 0.025),
                    percentile_sorted(&sorted, 0.975),
                )
            }
            _ => (f_hat, f_hat),
        };
        ci_low = ci_low.min(f_hat);
        ci_high = ci_high.max(f_hat);
        Self {
            f_hat,
            per_replicate,
            ci_low,
            ci_high,
            n_replicates: n,
        }
    }
}

/// Threshold rule: deploy iff the t-statistic is at or above `critical_t`.
/// ±infinity thresholds decide without a t-statistic.
pub fn decide_t_threshold(est: &Estimate, critical_t: f64) -> Result<bool, PolicyError> {
    if critical_t.is_nan() {
        return Err(PolicyError::InvalidCriticalT);
    }
    if critical_t == f64::INFINITY {
        return Ok(false);
    }
    if critical_t == f64::NEG_INFINITY {
        return Ok(true);
    }
    let t = est.t_stat.ok_or(PolicyError::MissingTStat {
        rct_id: String::new(),
        replicate: 0,
    })?;
    Ok(t >= critical_t)
}

/// Fold-1 statistics of one estimator spec on one trial and replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecStats {
    pub delta_hat: f64,
    pub std_err: f64,
    pub t_stat: f64,
}

/// Regression-policy features for one trial and replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFeatures {
    /// Aligned with the feature set's spec list.
    pub per_spec: Vec<SpecStats>,
    /// Target population size M.
    pub population: f64,
    pub profit_per_unit: Option<f64>,
}

/// Per-trial fold-2 labels and metadata shared by all policy evaluations.
struct EvalTable {
    rct_ids: Vec<String>,
    m: Vec<f64>,
    /// Fold-2 difference of means, indexed `[rct][replicate]`.
    dm2: Vec<Vec<f64>>,
    excluded: Vec<RctFailure>,
}

fn build_table<P: Send>(
    corpus: &Corpus,
    plan: &SplitPlan,
    per_replicate_payload: impl Fn(&Rct, usize) -> Result<P, PolicyError> + Send + Sync,
) -> Result<(EvalTable, Vec<Vec<P>>), PolicyError> {
    for rct in corpus.rcts() {
        if plan.position(rct.id()).is_none() {
            return Err(CrossvalError::UnknownRct(rct.id().to_string()).into());
        }
    }
    let rows = exec::map_indexed(corpus.len(), |i| {
        let rct = &corpus.rcts()[i];
        let mut dm2 = Vec::with_capacity(plan.n_replicates());
        let mut payload = Vec::with_capacity(plan.n_replicates());
        for b in 0..plan.n_replicates() {
            let folds = fold_units(rct, plan, b).map_err(PolicyError::from)?;
            let label = estimate_dm(&folds.fold2_treat_y, &folds.fold2_control_y).map_err(
                |source| PolicyError::Estimator {
                    rct_id: rct.id().to_string(),
                    replicate: b,
                    source,
                },
            )?;
            dm2.push(label.delta_hat);
            payload.push(per_replicate_payload(rct, b)?);
        }
        Ok::<_, PolicyError>((dm2, payload))
    });

    let mut table = EvalTable {
        rct_ids: Vec::new(),
        m: Vec::new(),
        dm2: Vec::new(),
        excluded: Vec::new(),
    };
    let mut payloads = Vec::new();
    for (rct, row) in corpus.rcts().iter().zip(rows) {
        match row {
            Ok((dm2, payload)) => {
                table.rct_ids.push(rct.id().to_string());
                table.m.push(rct.population() as f64);
                table.dm2.push(dm2);
                payloads.push(payload);
            }
            Err(err) => table.excluded.push(RctFailure {
                rct_id: rct.id().to_string(),
                message: err.to_string(),
            }),
        }
    }
    if table.rct_ids.is_empty() {
        return Err(PolicyError::NoEvaluableRcts);
    }
    Ok((table, payloads))
}

fn fold1_estimate(
    rct: &Rct,
    plan: &SplitPlan,
    replicate: usize,
    spec: &EstimatorSpec,
) -> Result<Estimate, PolicyError> {
    let folds = fold_units(rct, plan, replicate)?;
    let seed = plan.estimator_seed(rct.id(), replicate)?;
    run_estimator(spec, &folds.fold1, seed).map_err(|source| PolicyError::Estimator {
        rct_id: rct.id().to_string(),
        replicate,
        source,
    })
}

fn fold1_t_stat(
    rct: &Rct,
    plan: &SplitPlan,
    replicate: usize,
    spec: &EstimatorSpec,
) -> Result<f64, PolicyError> {
    let est = fold1_estimate(rct, plan, replicate, spec)?;
    est.t_stat.ok_or(PolicyError::MissingTStat {
        rct_id: rct.id().to_string(),
        replicate,
    })
}

fn fold1_features(
    rct: &Rct,
    plan: &SplitPlan,
    replicate: usize,
    set: &FeatureSet,
) -> Result<PolicyFeatures, PolicyError> {
    let per_spec = set
        .specs
        .iter()
        .map(|spec| {
            let est = fold1_estimate(rct, plan, replicate, spec)?;
            let (Some(std_err), Some(t_stat)) = (est.std_err, est.t_stat) else {
                return Err(PolicyError::MissingTStat {
                    rct_id: rct.id().to_string(),
                    replicate,
                });
            };
            Ok(SpecStats {
                delta_hat: est.delta_hat,
                std_err,
                t_stat,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PolicyFeatures {
        per_spec,
        population: rct.population() as f64,
        profit_per_unit: rct.profit_per_unit(),
    })
}

/// Estimated cumulative impact of a policy under a split plan.
///
/// Trials whose fold-1 statistics cannot be computed are excluded from the
/// sum. A pure ±infinity threshold needs no fold-1 statistics and therefore
/// excludes nothing.
pub fn f_hat(
    corpus: &Corpus,
    policy: &PolicySpec,
    plan: &SplitPlan,
    ci: CiMethod,
) -> Result<ImpactEstimate, PolicyError> {
    let n_replicates = plan.n_replicates();
    let per_replicate = match &policy.kind {
        PolicyKind::TThreshold { spec, critical_t } => {
            if critical_t.is_nan() {
                return Err(PolicyError::InvalidCriticalT);
            }
            if critical_t.is_finite() {
                let (table, t1) =
                    build_table(corpus, plan, |rct, b| fold1_t_stat(rct, plan, b, spec))?;
                replicate_sums(&table, n_replicates, |i, b| t1[i][b] >= *critical_t)
            } else {
                let (table, _) = build_table(corpus, plan, |_, _| Ok(()))?;
                let deploy = *critical_t == f64::NEG_INFINITY;
                replicate_sums(&table, n_replicates, |_, _| deploy)
            }
        }
        PolicyKind::Oracle => {
            let (table, _) = build_table(corpus, plan, |_, _| Ok(()))?;
            replicate_sums(&table, n_replicates, |i, b| table.dm2[i][b] > 0.0)
        }
        PolicyKind::Regression { features, .. } => {
            let (table, rows) =
                build_table(corpus, plan, |rct, b| fold1_features(rct, plan, b, features))?;
            let mut values = Vec::with_capacity(n_replicates);
            for b in 0..n_replicates {
                let row_refs: Vec<&PolicyFeatures> = rows.iter().map(|r| &r[b]).collect();
                let targets: Vec<f64> = (0..table.m.len())
                    .map(|i| table.m[i] * table.dm2[i][b])
                    .collect();
                let model = fit_linear_policy_refs(&row_refs, &targets)?;
                let value = (0..table.m.len())
                    .map(|i| {
                        let deploy = model.decide(row_refs[i]);
                        table.m[i] * table.dm2[i][b] * f64::from(deploy)
                    })
                    .sum();
                values.push(value);
            }
            values
        }
    };
    Ok(ImpactEstimate::from_replicates(per_replicate, ci))
}

fn replicate_sums(
    table: &EvalTable,
    n_replicates: usize,
    deploy: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    (0..n_replicates)
        .map(|b| {
            (0..table.m.len())
                .map(|i| table.m[i] * table.dm2[i][b] * f64::from(deploy(i, b)))
                .sum()
        })
        .collect()
}

/// One point of a critical-t sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub critical_t: f64,
    pub impact: ImpactEstimate,
    /// Deploy count per replicate, for monotonicity diagnostics.
    pub rollouts_per_replicate: Vec<usize>,
}

/// Evaluates the same threshold policy across a grid of critical
/// t-statistics on one shared plan and exclusion set (paired comparison).
pub fn sweep_critical_t(
    corpus: &Corpus,
    spec: &EstimatorSpec,
    grid: &[f64],
    plan: &SplitPlan,
    ci: CiMethod,
) -> Result<Vec<SweepPoint>, PolicyError> {
    if grid.is_empty() {
        return Err(PolicyError::EmptyGrid);
    }
    if grid.iter().any(|c| c.is_nan()) {
        return Err(PolicyError::InvalidCriticalT);
    }
    let (table, t1) = build_table(corpus, plan, |rct, b| fold1_t_stat(rct, plan, b, spec))?;
    let n_replicates = plan.n_replicates();
    Ok(grid
        .iter()
        .map(|&critical_t| {
            let per_replicate =
                replicate_sums(&table, n_replicates, |i, b| t1[i][b] >= critical_t);
            let rollouts = (0..n_replicates)
                .map(|b| {
                    (0..table.m.len())
                        .filter(|&i| t1[i][b] >= critical_t)
                        .count()
                })
                .collect();
            SweepPoint {
                critical_t,
                impact: ImpactEstimate::from_replicates(per_replicate, ci),
                rollouts_per_replicate: rollouts,
            }
        })
        .collect())
}

/// Hindsight upper bound: deploy exactly the trials with positive fold-2
/// estimates, per replicate.
pub fn oracle_policy(
    corpus: &Corpus,
    plan: &SplitPlan,
    ci: CiMethod,
) -> Result<ImpactEstimate, PolicyError> {
    f_hat(corpus, &PolicySpec::oracle(), plan, ci)
}

/// A fitted linear deploy rule: features are z-scored with the training
/// moments, constant features are dropped, and the decision is a positive
/// predicted value.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicyModel {
    n_specs: usize,
    uses_profit: bool,
    means: Vec<f64>,
    sds: Vec<f64>,
    kept: Vec<usize>,
    /// Intercept first, then coefficients for `kept` standardized features.
    pub coefficients: Vec<f64>,
}

fn raw_features(row: &PolicyFeatures, n_specs: usize, uses_profit: bool) -> Vec<f64> {
    debug_assert_eq!(row.per_spec.len(), n_specs);
    let mut raw = Vec::with_capacity(3 * n_specs + 2);
    for stats in &row.per_spec {
        raw.push(stats.delta_hat);
        raw.push(stats.std_err);
        raw.push(stats.t_stat);
    }
    raw.push(row.population);
    if uses_profit {
        raw.push(row.profit_per_unit.unwrap_or(0.0));
    }
    raw
}

impl LinearPolicyModel {
    pub fn predict(&self, row: &PolicyFeatures) -> f64 {
        let raw = raw_features(row, self.n_specs, self.uses_profit);
        let mut value = self.coefficients[0];
        for (c, &k) in self.coefficients[1..].iter().zip(&self.kept) {
            value += c * (raw[k] - self.means[k]) / self.sds[k];
        }
        value
    }

    pub fn decide(&self, row: &PolicyFeatures) -> bool {
        self.predict(row) > 0.0
    }

    pub fn kept_features(&self) -> &[usize] {
        &self.kept
    }
}

/// Least-squares fit of targets on standardized features plus an intercept.
pub fn fit_linear_policy(
    rows: &[PolicyFeatures],
    targets: &[f64],
) -> Result<LinearPolicyModel, PolicyError> {
    let refs: Vec<&PolicyFeatures> = rows.iter().collect();
    fit_linear_policy_refs(&refs, targets)
}

fn fit_linear_policy_refs(
    rows: &[&PolicyFeatures],
    targets: &[f64],
) -> Result<LinearPolicyModel, PolicyError> {
    if rows.len() != targets.len() {
        return Err(PolicyError::MismatchedRows(format!(
            "{} rows vs {} targets",
            rows.len(),
            targets.len()
        )));
    }
    let Some(first) = rows.first() else {
        return Err(PolicyError::NotEnoughRows { needed: 1, got: 0 });
    };
    let n_specs = first.per_spec.len();
    if rows.iter().any(|r| r.per_spec.len() != n_specs) {
        return Err(PolicyError::MismatchedRows(
            "uneven per-spec statistics".to_string(),
        ));
    }
    let uses_profit = rows.iter().all(|r| r.profit_per_unit.is_some());

    let raw: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| raw_features(r, n_specs, uses_profit))
        .collect();
    let n_features = raw[0].len();
    if rows.len() < n_features + 1 {
        return Err(PolicyError::NotEnoughRows {
            needed: n_features + 1,
            got: rows.len(),
        });
    }

    let n = rows.len() as f64;
    let means: Vec<f64> = (0..n_features)
        .map(|k| raw.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect();
    let sds: Vec<f64> = (0..n_features)
        .map(|k| {
            let var = raw.iter().map(|r| (r[k] - means[k]).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect();
    let kept: Vec<usize> = (0..n_features)
        .filter(|&k| sds[k] > 0.0 && sds[k].is_finite())
        .collect();

    // Design: intercept plus standardized kept features.
    let width = kept.len() + 1;
    let mut xtx = vec![vec![0.0f64; width]; width];
    let mut xty = vec![0.0f64; width];
    for (row, &target) in raw.iter().zip(targets) {
        let mut design = Vec::with_capacity(width);
        design.push(1.0);
        for &k in &kept {
            design.push((row[k] - means[k]) / sds[k]);
        }
        for i in 0..width {
            for j in 0..width {
                xtx[i][j] += design[i] * design[j];
            }
            xty[i] += design[i] * target;
        }
    }
    let max_norm_sq = (0..width).map(|i| xtx[i][i]).fold(0.0f64, f64::max);
    let coefficients = linalg::solve(&xtx, &xty, 1e-12 * max_norm_sq)?;

    Ok(LinearPolicyModel {
        n_specs,
        uses_profit,
        means,
        sds,
        kept,
        coefficients,
    })
}

/// One step of an online run or reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStep {
    pub rct_id: String,
    pub time_index: i64,
    pub decision: bool,
    /// Whether the fitted model (rather than the warm-up baseline) decided.
    pub used_model: bool,
    /// Fold-2 value M · Δ̂ available at this step.
    pub step_value: f64,
    /// `step_value` if deployed, else zero.
    pub realized: f64,
    /// Running sum of realized values.
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRunResult {
    pub replicate: usize,
    pub warmup: usize,
    pub steps: Vec<OnlineStep>,
}

impl OnlineRunResult {
    pub fn final_value(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cumulative)
    }
}

/// Warm-up steps fall back to this rule: deploy on a fold-1 `gen_dd`
/// t-statistic of at least 1.96.
pub const BASELINE_SPEC: &str = "gen_dd";
pub const BASELINE_CRITICAL_T: f64 = 1.96;

fn time_ordered_indices(corpus: &Corpus) -> Result<Vec<usize>, PolicyError> {
    let mut keyed: Vec<(i64, usize)> = Vec::with_capacity(corpus.len());
    for (i, rct) in corpus.rcts().iter().enumerate() {
        let Some(t) = rct.time_index() else {
            return Err(PolicyError::Unordered(format!(
                "rct `{}` has no time_index",
                rct.id()
            )));
        };
        keyed.push((t, i));
    }
    keyed.sort_by_key(|&(t, _)| t);
    for pair in keyed.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(PolicyError::Unordered(format!(
                "duplicate time_index {}",
                pair[0].0
            )));
        }
    }
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

struct OnlineStepInput {
    rct_id: String,
    time_index: i64,
    step_value: f64,
    row: PolicyFeatures,
    baseline_decision: bool,
}

/// Expanding-window online run of a regression policy on one split replicate.
///
/// Trials are visited in `time_index` order. The first `warmup` steps (and
/// any step whose window cannot support a fit) use the baseline threshold
/// rule; each later step fits on all previous trials' fold-1 features and
/// fold-2 targets, then decides the current trial out-of-sample.
pub fn online_policy_run(
    corpus: &Corpus,
    plan: &SplitPlan,
    features: &FeatureSet,
    refit: bool,
    warmup: usize,
    replicate: usize,
) -> Result<OnlineRunResult, PolicyError> {
    if warmup == 0 {
        return Err(PolicyError::InvalidWarmup);
    }
    let order = time_ordered_indices(corpus)?;
    let baseline_spec: EstimatorSpec = BASELINE_SPEC.parse().expect("static spec");

    // Per-step inputs are independent; build them in parallel.
    let inputs = exec::map_indexed(order.len(), |s| {
        let rct = &corpus.rcts()[order[s]];
        let folds = fold_units(rct, plan, replicate)?;
        let label = estimate_dm(&folds.fold2_treat_y, &folds.fold2_control_y).map_err(
            |source| PolicyError::Estimator {
                rct_id: rct.id().to_string(),
                replicate,
                source,
            },
        )?;
        let row = fold1_features(rct, plan, replicate, features)?;
        let baseline_est = fold1_estimate(rct, plan, replicate, &baseline_spec)?;
        let baseline_decision = baseline_est
            .t_stat
            .map(|t| t >= BASELINE_CRITICAL_T)
            .ok_or(PolicyError::MissingTStat {
                rct_id: rct.id().to_string(),
                replicate,
            })?;
        Ok::<_, PolicyError>(OnlineStepInput {
            rct_id: rct.id().to_string(),
            time_index: rct.time_index().expect("checked above"),
            step_value: rct.population() as f64 * label.delta_hat,
            row,
            baseline_decision,
        })
    });
    let mut step_inputs = Vec::with_capacity(order.len());
    for input in inputs {
        step_inputs.push(input?);
    }

    let mut steps = Vec::with_capacity(step_inputs.len());
    let mut cumulative = 0.0;
    let mut model: Option<LinearPolicyModel> = None;
    for s in 0..step_inputs.len() {
        let mut used_model = false;
        let decision = if s < warmup {
            step_inputs[s].baseline_decision
        } else {
            if refit || model.is_none() {
                let window: Vec<&PolicyFeatures> =
                    step_inputs[..s].iter().map(|input| &input.row).collect();
                let targets: Vec<f64> =
                    step_inputs[..s].iter().map(|input| input.step_value).collect();
                match fit_linear_policy_refs(&window, &targets) {
                    Ok(fitted) => model = Some(fitted),
                    Err(PolicyError::NotEnoughRows { .. }) | Err(PolicyError::RankDeficient(_)) => {}
                    Err(other) => return Err(other),
                }
            }
            match &model {
                Some(m) => {
                    used_model = true;
                    m.decide(&step_inputs[s].row)
                }
                None => step_inputs[s].baseline_decision,
            }
        };
        let input = &step_inputs[s];
        let realized = if decision { input.step_value } else { 0.0 };
        cumulative += realized;
        steps.push(OnlineStep {
            rct_id: input.rct_id.clone(),
            time_index: input.time_index,
            decision,
            used_model,
            step_value: input.step_value,
            realized,
            cumulative,
        });
    }
    Ok(OnlineRunResult {
        replicate,
        warmup,
        steps,
    })
}

/// Hindsight trajectory on the same ordering and replicate: deploy exactly
/// the positive fold-2 values.
pub fn oracle_trajectory(
    corpus: &Corpus,
    plan: &SplitPlan,
    replicate: usize,
) -> Result<Vec<OnlineStep>, PolicyError> {
    let order = time_ordered_indices(corpus)?;
    let values = exec::map_indexed(order.len(), |s| {
        let rct = &corpus.rcts()[order[s]];
        let folds = fold_units(rct, plan, replicate)?;
        let label = estimate_dm(&folds.fold2_treat_y, &folds.fold2_control_y).map_err(
            |source| PolicyError::Estimator {
                rct_id: rct.id().to_string(),
                replicate,
                source,
            },
        )?;
        Ok::<_, PolicyError>((
            rct.id().to_string(),
            rct.time_index().expect("checked above"),
            rct.population() as f64 * label.delta_hat,
        ))
    });
    let mut steps = Vec::with_capacity(order.len());
    let mut cumulative = 0.0;
    for value in values {
        let (rct_id, time_index, step_value) = value?;
        let decision = step_value > 0.0;
        let realized = if decision { step_value } else { 0.0 };
        cumulative += realized;
        steps.push(OnlineStep {
            rct_id,
            time_index,
            decision,
            used_model: false,
            step_value,
            realized,
            cumulative,
        });
    }
    Ok(steps)
}

/// Sweep CSV: one row per grid point, optionally normalized against a
/// baseline impact.
pub fn write_sweep_csv(
    points: &[SweepPoint],
    baseline: Option<f64>,
    mut out: impl Write,
) -> Result<(), PolicyError> {
    let mut header = String::from("critical_t,f_hat,ci_low,ci_high,n_replicates");
    if baseline.is_some() {
        header.push_str(",f_hat_normalized");
    }
    writeln!(out, "{header}")?;
    for point in points {
        let mut row = format!(
            "{},{},{},{},{}",
            point.critical_t,
            point.impact.f_hat,
            point.impact.ci_low,
            point.impact.ci_high,
            point.impact.n_replicates
        );
        if let Some(base) = baseline {
            row.push(',');
            if base != 0.0 {
                row.push_str(&(point.impact.f_hat / base).to_string());
            }
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

pub fn write_policies_csv(
    rows: &[(String, ImpactEstimate)],
    mut out: impl Write,
) -> Result<(), PolicyError> {
    writeln!(out, "policy,f_hat,ci_low,ci_high,n_replicates")?;
    for (name, impact) in rows {
        writeln!(
            out,
            "{name},{},{},{},{}",
            impact.f_hat, impact.ci_low, impact.ci_high, impact.n_replicates
        )?;
    }
    Ok(())
}

pub fn write_trajectory_csv(steps: &[OnlineStep], mut out: impl Write) -> Result<(), PolicyError> {
    writeln!(
        out,
        "step,rct_id,time_index,decision,used_model,step_value,realized,cumulative"
    )?;
    for (s, step) in steps.iter().enumerate() {
        writeln!(
            out,
            "{s},{},{},{},{},{},{},{}",
            step.rct_id,
            step.time_index,
            u8::from(step.decision),
            u8::from(step.used_model),
            step.step_value,
            step.realized,
            step.cumulative
        )?;
    }
    Ok(())
}

/// Decision log: the per-step deploy choices without the value columns.
pub fn write_decision_log_csv(
    steps: &[OnlineStep],
    mut out: impl Write,
) -> Result<(), PolicyError> {
    writeln!(out, "step,rct_id,time_index,decision,used_model")?;
    for (s, step) in steps.iter().enumerate() {
        writeln!(
            out,
            "{s},{},{},{},{}",
            step.rct_id,
            step.time_index,
            u8::from(step.decision),
            u8::from(step.used_model)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Provenance, UnitRecord};
    use crate::crossval::{FoldAssignment, RctSplits};
    use approx::assert_relative_eq;

    fn unit(y: f64, treated: bool) -> UnitRecord {
        UnitRecord { x: 0.0, d: 0.0, y, treated }
    }

    fn estimate(t_stat: Option<f64>) -> Estimate {
        Estimate {
            delta_hat: 1.0,
            std_err: t_stat.map(|t| 1.0 / t),
            t_stat,
            n_treat: 10,
            n_control: 10,
        }
    }

    #[test]
    fn threshold_decisions() {
        assert!(decide_t_threshold(&estimate(Some(2.5)), 1.96).unwrap());
        assert!(!decide_t_threshold(&estimate(Some(1.5)), 1.96).unwrap());
        // Equal or greater deploys.
        assert!(decide_t_threshold(&estimate(Some(1.96)), 1.96).unwrap());
        // Infinite thresholds decide without a t-statistic.
        assert!(decide_t_threshold(&estimate(None), f64::NEG_INFINITY).unwrap());
        assert!(!decide_t_threshold(&estimate(None), f64::INFINITY).unwrap());
        assert!(matches!(
            decide_t_threshold(&estimate(None), 0.0),
            Err(PolicyError::MissingTStat { .. })
        ));
    }

    /// Two-trial fixture with hand-built folds: fold-2 labels are 0.5 and
    /// −0.2, fold-1 t-statistics 2.0 and −10.0, populations 10 and 100.
    fn hand_corpus_and_plan() -> (Corpus, SplitPlan) {
        let rct1 = Rct::new(
            "r1",
            vec![
                unit(2.0, true),  // fold 1
                unit(4.0, true),  // fold 1
                unit(1.5, true),  // fold 2
                unit(1.5, true),  // fold 2
                unit(1.0, false), // fold 1
                unit(1.0, false), // fold 1
                unit(1.0, false), // fold 2
                unit(1.0, false), // fold 2
            ],
            10,
            None,
            None,
            Some(0),
        )
        .unwrap();
        let rct2 = Rct::new(
            "r2",
            vec![
                unit(0.9, true),  // fold 1
                unit(1.1, true),  // fold 1
                unit(1.0, true),  // fold 2
                unit(1.0, true),  // fold 2
                unit(2.0, false), // fold 1
                unit(2.0, false), // fold 1
                unit(1.2, false), // fold 2
                unit(1.2, false), // fold 2
            ],
            100,
            None,
            None,
            Some(1),
        )
        .unwrap();
        let corpus = Corpus::new(vec![rct1, rct2], Provenance::Ingested).unwrap();
        let assignment = FoldAssignment {
            treat_fold1: vec![0, 1],
            control_fold1: vec![4, 5],
        };
        let plan = SplitPlan::from_assignments(
            0.5,
            0,
            vec![
                RctSplits {
                    rct_id: "r1".into(),
                    replicates: vec![assignment.clone()],
                },
                RctSplits {
                    rct_id: "r2".into(),
                    replicates: vec![assignment],
                },
            ],
        )
        .unwrap();
        (corpus, plan)
    }

    #[test]
    fn f_hat_hand_corpus_arithmetic() {
        let (corpus, plan) = hand_corpus_and_plan();
        // Critical t of 1.0 deploys r1 (t = 2) but not r2 (t = −10):
        // 10 · 0.5 · 1 + 100 · (−0.2) · 0 = 5.
        let policy = PolicySpec::t_threshold(EstimatorSpec::dm(), 1.0);
        let impact = f_hat(&corpus, &policy, &plan, CiMethod::NormalApprox).unwrap();
        assert_relative_eq!(impact.f_hat, 5.0, max_relative = 1e-12);
        assert_eq!(impact.n_replicates, 1);
        assert_eq!(impact.ci_low, impact.ci_high);
    }

    #[test]
    fn f_hat_infinite_thresholds() {
        let (corpus, plan) = hand_corpus_and_plan();
        let never = PolicySpec::t_threshold(EstimatorSpec::dm(), f64::INFINITY);
        let impact = f_hat(&corpus, &never, &plan, CiMethod::NormalApprox).unwrap();
        assert_eq!(impact.f_hat, 0.0);

        let always = PolicySpec::t_threshold(EstimatorSpec::dm(), f64::NEG_INFINITY);
        let impact = f_hat(&corpus, &always, &plan, CiMethod::NormalApprox).unwrap();
        // 10 · 0.5 + 100 · (−0.2) = −15.
        assert_relative_eq!(impact.f_hat, -15.0, max_relative = 1e-12);
    }

    #[test]
    fn oracle_takes_positive_terms_only() {
        let (corpus, plan) = hand_corpus_and_plan();
        let impact = oracle_policy(&corpus, &plan, CiMethod::NormalApprox).unwrap();
        assert_relative_eq!(impact.f_hat, 5.0, max_relative = 1e-12);
    }

    #[test]
    fn oracle_equals_deploy_everything_when_all_positive() {
        let (corpus, plan) = hand_corpus_and_plan();
        // Rebuild r2 so its fold-2 label is positive.
        let rct2 = Rct::new(
            "r2",
            vec![
                unit(0.9, true),
                unit(1.1, true),
                unit(2.0, true),
                unit(2.0, true),
                unit(2.0, false),
                unit(2.0, false),
                unit(1.2, false),
                unit(1.2, false),
            ],
            100,
            None,
            None,
            Some(1),
        )
        .unwrap();
        let corpus = Corpus::new(
            vec![corpus.rcts()[0].clone(), rct2],
            Provenance::Ingested,
        )
        .unwrap();
        let oracle = oracle_policy(&corpus, &plan, CiMethod::NormalApprox).unwrap();
        let always = f_hat(
            &corpus,
            &PolicySpec::t_threshold(EstimatorSpec::dm(), f64::NEG_INFINITY),
            &plan,
            CiMethod::NormalApprox,
        )
        .unwrap();
        assert_eq!(oracle.f_hat, always.f_hat);
    }

    #[test]
    fn sweep_endpoints_and_monotone_rollout_count() {
        let (corpus, plan) = hand_corpus_and_plan();
        let grid = [f64::NEG_INFINITY, -3.0, 0.0, 1.0, 3.0, f64::INFINITY];
        let points = sweep_critical_t(
            &corpus,
            &EstimatorSpec::dm(),
            &grid,
            &plan,
            CiMethod::NormalApprox,
        )
        .unwrap();
        assert_relative_eq!(points[0].impact.f_hat, -15.0, max_relative = 1e-12);
        assert_eq!(points.last().unwrap().impact.f_hat, 0.0);
        for pair in points.windows(2) {
            assert!(pair[0].rollouts_per_replicate[0] >= pair[1].rollouts_per_replicate[0]);
        }
        // A single-point grid matches f_hat directly.
        let single = sweep_critical_t(
            &corpus,
            &EstimatorSpec::dm(),
            &[1.0],
            &plan,
            CiMethod::NormalApprox,
        )
        .unwrap();
        let direct = f_hat(
            &corpus,
            &PolicySpec::t_threshold(EstimatorSpec::dm(), 1.0),
            &plan,
            CiMethod::NormalApprox,
        )
        .unwrap();
        assert_eq!(single[0].impact.f_hat, direct.f_hat);
    }

    fn feature_row(t: f64) -> PolicyFeatures {
        PolicyFeatures {
            per_spec: vec![SpecStats {
                delta_hat: t,
                std_err: 1.0,
                t_stat: t,
            }],
            population: 50.0,
            profit_per_unit: None,
        }
    }

    #[test]
    fn linear_policy_recovers_sign_boundary() {
        // Single varying feature (the t-statistic; every other column is
        // constant and dropped) with targets proportional to it: the fitted
        // rule must deploy exactly on positive t.
        let rows: Vec<PolicyFeatures> = (-10..=10)
            .map(|i| {
                let t = i as f64 / 2.0;
                PolicyFeatures {
                    per_spec: vec![SpecStats {
                        delta_hat: 1.0,
                        std_err: 1.0,
                        t_stat: t,
                    }],
                    population: 50.0,
                    profit_per_unit: None,
                }
            })
            .collect();
        let targets: Vec<f64> = rows.iter().map(|r| 3.0 * r.per_spec[0].t_stat).collect();
        let model = fit_linear_policy(&rows, &targets).unwrap();
        for row in &rows {
            let t = row.per_spec[0].t_stat;
            if t == 0.0 {
                // Knife-edge: the exact fit predicts zero up to rounding.
                assert!(model.predict(row).abs() < 1e-9);
            } else {
                assert_eq!(model.decide(row), t > 0.0, "t = {t}");
            }
        }
    }

    #[test]
    fn linear_policy_constant_features_intercept_only() {
        let rows: Vec<PolicyFeatures> = (0..8).map(|_| feature_row(1.5)).collect();
        let targets = vec![2.0; 8];
        let model = fit_linear_policy(&rows, &targets).unwrap();
        assert!(model.kept_features().is_empty());
        assert_relative_eq!(model.coefficients[0], 2.0, max_relative = 1e-12);
        assert!(model.decide(&rows[0]));
    }

    #[test]
    fn linear_policy_matches_normal_equations_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(17, &[5]);
        let rows: Vec<PolicyFeatures> = (0..200)
            .map(|_| PolicyFeatures {
                per_spec: vec![SpecStats {
                    delta_hat: rng.random_range(-2.0..2.0),
                    std_err: rng.random_range(0.1..2.0),
                    t_stat: rng.random_range(-4.0..4.0),
                }],
                population: rng.random_range(10.0..1000.0),
                profit_per_unit: None,
            })
            .collect();
        let targets: Vec<f64> = rows
            .iter()
            .map(|r| {
                1.0 + 2.0 * r.per_spec[0].delta_hat - 0.5 * r.per_spec[0].t_stat
                    + 0.001 * r.population
                    + rng.random_range(-0.01..0.01)
            })
            .collect();
        let model = fit_linear_policy(&rows, &targets).unwrap();

        // Independent solve: Gauss-Jordan without pivoting on the same
        // standardized design.
        let raw: Vec<Vec<f64>> = rows.iter().map(|r| raw_features(r, 1, false)).collect();
        let k = raw[0].len();
        let n = raw.len() as f64;
        let means: Vec<f64> = (0..k)
            .map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let sds: Vec<f64> = (0..k)
            .map(|j| {
                (raw.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect();
        let design: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| {
                let mut d = vec![1.0];
                for j in 0..k {
                    d.push((r[j] - means[j]) / sds[j]);
                }
                d
            })
            .collect();
        let w = k + 1;
        let mut a = vec![vec![0.0; w + 1]; w];
        for (d, &t) in design.iter().zip(targets.iter()) {
            for i in 0..w {
                for j in 0..w {
                    a[i][j] += d[i] * d[j];
                }
                a[i][w] += d[i] * t;
            }
        }
        for col in 0..w {
            let pivot = a[col][col];
            for row in 0..w {
                if row != col {
                    let factor = a[row][col] / pivot;
                    for j in col..=w {
                        a[row][j] -= factor * a[col][j];
                    }
                }
            }
        }
        let oracle: Vec<f64> = (0..w).map(|i| a[i][w] / a[i][i]).collect();
        for (got, want) in model.coefficients.iter().zip(&oracle) {
            assert_relative_eq!(got, want, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn linear_policy_requires_enough_rows() {
        let rows: Vec<PolicyFeatures> = (0..3).map(|i| feature_row(i as f64)).collect();
        let targets = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            fit_linear_policy(&rows, &targets),
            Err(PolicyError::NotEnoughRows { .. })
        ));
    }

    #[test]
    fn policy_spec_strings_round_trip() {
        for s in [
            "tstat:gen_dd_w0.6:-1.96",
            "tstat:dm:1.96",
            "tstat:gen_dd:inf",
            "tstat:gen_dd:-inf",
            "regression:default",
            "regression:default:norefit",
            "oracle",
        ] {
            let spec: PolicySpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s, "round trip of {s}");
        }
        assert!("tstat:gen_dd".parse::<PolicySpec>().is_err());
        assert!("nonsense".parse::<PolicySpec>().is_err());
        assert!("regression:fancy".parse::<PolicySpec>().is_err());
    }

    #[test]
    fn impact_percentile_interval_brackets_mean() {
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let impact = ImpactEstimate::from_replicates(values, CiMethod::Percentile);
        assert!(impact.ci_low <= impact.f_hat && impact.f_hat <= impact.ci_high);
        assert!(impact.ci_low > 0.0);
        assert!(impact.ci_high < 99.0);
    }
}
