//! Cross-trial aggregation: normalized scores, one-sample t-tests, the
//! pairwise comparison matrix, and Copeland ranking.
//!
//! Raw proxy errors live on wildly different scales across trials, so a pair
//! of specs (A, B) is compared per trial through the normalized score
//! (B − A)/(B + A) ∈ [−1, 1]; positive scores favor A. A two-sided one-sample
//! t-test on the score vector summarizes each pair, and ranking counts
//! significant wins row-wise.

use std::collections::HashSet;
use std::io::Write;

use thiserror::Error;

use crate::crossval::{CorpusErrors, MseEstimate};
use crate::estimators::EstimatorSpec;
use crate::exec;
use crate::stats::{mean, sample_variance, student_t_two_sided_p};

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("error vectors are misaligned: {0}")]
    Misaligned(String),
    #[error("proxy error for rct `{rct_id}` is negative ({value})")]
    NegativeError { rct_id: String, value: f64 },
    #[error("need at least 2 scores for a t-test, got {0}")]
    TooFewScores(usize),
    #[error("need at least 2 specs to compare, got {0}")]
    TooFewSpecs(usize),
    #[error("fewer than 2 rcts are shared by all specs")]
    TooFewSharedRcts,
    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-trial normalized scores comparing a pair of specs; positive favors A.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub spec_a: EstimatorSpec,
    pub spec_b: EstimatorSpec,
    pub rct_ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Element-wise (B − A)/(B + A) over aligned per-trial errors; both errors
/// zero counts as a tie (score 0).
pub fn normalized_scores(
    errors_a: &[MseEstimate],
    errors_b: &[MseEstimate],
) -> Result<ScoreVector, AggregateError> {
    if errors_a.len() != errors_b.len() || errors_a.is_empty() {
        return Err(AggregateError::Misaligned(format!(
            "lengths {} vs {}",
            errors_a.len(),
            errors_b.len()
        )));
    }
    let mut rct_ids = Vec::with_capacity(errors_a.len());
    let mut scores = Vec::with_capacity(errors_a.len());
    for (a, b) in errors_a.iter().zip(errors_b) {
        if a.rct_id != b.rct_id {
            return Err(AggregateError::Misaligned(format!(
                "rct `{}` vs `{}`",
                a.rct_id, b.rct_id
            )));
        }
        for e in [a, b] {
            if e.value < 0.0 || !e.value.is_finite() {
                return Err(AggregateError::NegativeError {
                    rct_id: e.rct_id.clone(),
                    value: e.value,
                });
            }
        }
        let score = if a.value == 0.0 && b.value == 0.0 {
            0.0
        } else {
            ((b.value - a.value) / (b.value + a.value)).clamp(-1.0, 1.0)
        };
        rct_ids.push(a.rct_id.clone());
        scores.push(score);
    }
    Ok(ScoreVector {
        spec_a: errors_a[0].spec,
        spec_b: errors_b[0].spec,
        rct_ids,
        scores,
    })
}

/// A computed two-sided one-sample t-test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t_stat: f64,
    /// Two-sided, from the Student t distribution with n − 1 degrees of
    /// freedom.
    pub p_value: f64,
    pub n: usize,
    pub mean_score: f64,
}

/// T-test outcome; an identically-repeated score vector has no spread to test
/// against and is reported as degenerate, carrying the mean's sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TTestOutcome {
    Computed(TTestResult),
    Degenerate { mean_score: f64, n: usize },
}

impl TTestOutcome {
    fn negated(self) -> Self {
        match self {
            Self::Computed(r) => Self::Computed(TTestResult {
                t_stat: -r.t_stat,
                mean_score: -r.mean_score,
                ..r
            }),
            Self::Degenerate { mean_score, n } => Self::Degenerate {
                mean_score: -mean_score,
                n,
            },
        }
    }
}

/// Tests the null that the population mean of the score vector is zero.
pub fn t_test_one_sample(scores: &ScoreVector) -> Result<TTestOutcome, AggregateError> {
    let n = scores.scores.len();
    if n < 2 {
        return Err(AggregateError::TooFewScores(n));
    }
    let m = mean(&scores.scores);
    let sd = sample_variance(&scores.scores)
        .expect("n >= 2 checked above")
        .sqrt();
    if sd == 0.0 {
        return Ok(TTestOutcome::Degenerate {
            mean_score: m,
            n,
        });
    }
    let t_stat = m * (n as f64).sqrt() / sd;
    Ok(TTestOutcome::Computed(TTestResult {
        t_stat,
        p_value: student_t_two_sided_p(t_stat, n - 1),
        n,
        mean_score: m,
    }))
}

/// Pairwise t-test cells over a spec list. The cell at (A, B) is the test of
/// A's scores against B: positive t means A is better. Antisymmetric by
/// construction; the diagonal is undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonMatrix {
    specs: Vec<EstimatorSpec>,
    /// Row-major, `None` on the diagonal.
    cells: Vec<Option<TTestOutcome>>,
    /// Trials dropped because some spec failed on them (or lacked coverage).
    pub excluded_rcts: Vec<String>,
    /// Trials entering every pairwise test.
    pub n_shared: usize,
}

impl ComparisonMatrix {
    pub fn specs(&self) -> &[EstimatorSpec] {
        &self.specs
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&TTestOutcome> {
        self.cells[row * self.specs.len() + col].as_ref()
    }
}

/// Builds the full comparison matrix from per-spec corpus error runs.
///
/// Trials missing from any run (estimator failures) are excluded from every
/// pair so all cells share the same support.
pub fn compare_all(runs: &[CorpusErrors]) -> Result<ComparisonMatrix, AggregateError> {
    if runs.len() < 2 {
        return Err(AggregateError::TooFewSpecs(runs.len()));
    }
    let mut excluded: HashSet<String> = HashSet::new();
    for run in runs {
        for failure in &run.failures {
            excluded.insert(failure.rct_id.clone());
        }
    }
    // Keep trials covered by every run, in the first run's order.
    for run in &runs[1..] {
        let ids: HashSet<&str> = run.estimates.iter().map(|e| e.rct_id.as_str()).collect();
        for est in &runs[0].estimates {
            if !ids.contains(est.rct_id.as_str()) {
                excluded.insert(est.rct_id.clone());
            }
        }
    }
    let shared: Vec<&str> = runs[0]
        .estimates
        .iter()
        .map(|e| e.rct_id.as_str())
        .filter(|id| !excluded.contains(*id))
        .collect();
    if shared.len() < 2 {
        return Err(AggregateError::TooFewSharedRcts);
    }

    let filtered: Vec<Vec<MseEstimate>> = runs
        .iter()
        .map(|run| {
            let keep: HashSet<&str> = shared.iter().copied().collect();
            let mut by_id: std::collections::HashMap<&str, &MseEstimate> = run
                .estimates
                .iter()
                .filter(|e| keep.contains(e.rct_id.as_str()))
                .map(|e| (e.rct_id.as_str(), e))
                .collect();
            shared
                .iter()
                .map(|id| by_id.remove(id).expect("id coverage checked").clone())
                .collect()
        })
        .collect();

    let k = runs.len();
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
        .collect();
    let upper = exec::map_indexed(pairs.len(), |p| {
        let (i, j) = pairs[p];
        let scores = normalized_scores(&filtered[i], &filtered[j])?;
        t_test_one_sample(&scores)
    });

    let mut cells = vec![None; k * k];
    for (p, outcome) in upper.into_iter().enumerate() {
        let (i, j) = pairs[p];
        let outcome = outcome?;
        cells[i * k + j] = Some(outcome);
        cells[j * k + i] = Some(outcome.negated());
    }

    let mut excluded_rcts: Vec<String> = excluded.into_iter().collect();
    excluded_rcts.sort();
    Ok(ComparisonMatrix {
        specs: runs.iter().map(|r| r.spec).collect(),
        cells,
        excluded_rcts,
        n_shared: shared.len(),
    })
}

/// One row of a Copeland ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub spec: EstimatorSpec,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

/// Specs ordered by significant pairwise wins.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub alpha: f64,
    pub rows: Vec<RankingRow>,
}

impl Ranking {
    pub fn position(&self, spec: &EstimatorSpec) -> Option<usize> {
        self.rows.iter().position(|r| r.spec == *spec)
    }
}

/// Counts row-wise wins (t > 0, p < alpha) and losses (t < 0, p < alpha);
/// everything else, including degenerate cells, ties. Rows sort by wins
/// descending, then losses ascending, then canonical name.
pub fn rank_copeland(matrix: &ComparisonMatrix, alpha: f64) -> Result<Ranking, AggregateError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AggregateError::InvalidAlpha(alpha));
    }
    let k = matrix.specs.len();
    let mut rows: Vec<RankingRow> = (0..k)
        .map(|i| {
            let mut wins = 0;
            let mut losses = 0;
            let mut ties = 0;
            for j in 0..k {
                if i == j {
                    continue;
                }
                match matrix.cell(i, j) {
                    Some(TTestOutcome::Computed(r)) if r.p_value < alpha && r.t_stat > 0.0 => {
                        wins += 1
                    }
                    Some(TTestOutcome::Computed(r)) if r.p_value < alpha && r.t_stat < 0.0 => {
                        losses += 1
                    }
                    _ => ties += 1,
                }
            }
            RankingRow {
                spec: matrix.specs[i],
                wins,
                losses,
                ties,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.wins
            .cmp(&a.wins)
            .then(a.losses.cmp(&b.losses))
            .then_with(|| a.spec.canonical_name().cmp(&b.spec.canonical_name()))
    });
    Ok(Ranking { alpha, rows })
}

/// Uniform-bin histogram over [−1, 1]. Boundary values go to the upper bin;
/// 1.0 stays in the last.
pub fn histogram(
    scores: &ScoreVector,
    n_bins: usize,
) -> Result<Vec<(f64, f64, usize)>, AggregateError> {
    if n_bins == 0 {
        return Err(AggregateError::NoBins);
    }
    let mut counts = vec![0usize; n_bins];
    for &s in &scores.scores {
        let idx = (((s + 1.0) / 2.0) * n_bins as f64).floor() as usize;
        counts[idx.min(n_bins - 1)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            let lo = -1.0 + 2.0 * i as f64 / n_bins as f64;
            let hi = -1.0 + 2.0 * (i + 1) as f64 / n_bins as f64;
            (lo, hi, count)
        })
        .collect())
}

/// Writes the matrix in table form: one row per spec, `(t, p)` cells,
/// `x` on the diagonal, `tie` for degenerate cells.
pub fn write_matrix_csv(
    matrix: &ComparisonMatrix,
    mut out: impl Write,
) -> Result<(), AggregateError> {
    let names: Vec<String> = matrix.specs.iter().map(|s| s.canonical_name()).collect();
    writeln!(out, "spec,{}", names.join(","))?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        for j in 0..names.len() {
            let cell = match matrix.cell(i, j) {
                None => "x".to_string(),
                Some(TTestOutcome::Computed(r)) => {
                    format!("\"({}, {})\"", r.t_stat, r.p_value)
                }
                Some(TTestOutcome::Degenerate { .. }) => "tie".to_string(),
            };
            row.push(cell);
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Long machine-readable form of the matrix cells.
pub fn write_matrix_cells_csv(
    matrix: &ComparisonMatrix,
    mut out: impl Write,
) -> Result<(), AggregateError> {
    writeln!(out, "spec_a,spec_b,n,mean_score,t_stat,p_value,degenerate")?;
    let k = matrix.specs.len();
    for i in 0..k {
        for j in 0..k {
            let Some(outcome) = matrix.cell(i, j) else {
                continue;
            };
            let (a, b) = (&matrix.specs[i], &matrix.specs[j]);
            match outcome {
                TTestOutcome::Computed(r) => writeln!(
                    out,
                    "{a},{b},{},{},{},{},false",
                    r.n, r.mean_score, r.t_stat, r.p_value
                )?,
                TTestOutcome::Degenerate { mean_score, n } => {
                    writeln!(out, "{a},{b},{n},{mean_score},,,true")?
                }
            }
        }
    }
    Ok(())
}

pub fn write_ranking_csv(ranking: &Ranking, mut out: impl Write) -> Result<(), AggregateError> {
    writeln!(out, "rank,spec,wins,losses,ties")?;
    for (i, row) in ranking.rows.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            row.spec,
            row.wins,
            row.losses,
            row.ties
        )?;
    }
    Ok(())
}

pub fn write_histogram_csv(
    bins: &[(f64, f64, usize)],
    mut out: impl Write,
) -> Result<(), AggregateError> {
    writeln!(out, "bin_low,bin_high,count")?;
    for (lo, hi, count) in bins {
        writeln!(out, "{lo},{hi},{count}")?;
    }
    Ok(())
}

pub fn write_scores_csv(scores: &ScoreVector, mut out: impl Write) -> Result<(), AggregateError> {
    writeln!(out, "rct_id,score")?;
    for (id, s) in scores.rct_ids.iter().zip(&scores.scores) {
        writeln!(out, "{id},{s}")?;
    }
    Ok(())
}
