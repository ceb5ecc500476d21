//! Average-treatment-effect estimators.
//!
//! Four families sharing one [`Estimate`] output:
//!
//! * `dm` — difference of arm means, with a Welch unpooled standard error.
//! * `mom<B>` — difference of per-arm medians of block means, `B` total
//!   blocks split across arms.
//! * `gen_dd` — least squares of the response on (1, treatment, pretreatment
//!   response); the effect is the treatment coefficient.
//! * `gen_dd_w<γ>` — the same regression weighted by `(1 + d)^(-γ)`, which
//!   downweights units with large auxiliary covariates.
//!
//! Any family accepts a `_wins<level>` suffix: bounds are fitted on the
//! training units at percentiles (level, 1 − level) — upper tail only for the
//! nonnegative auxiliary covariate — and applied before estimating. Held-out
//! data is never passed through this transform; that is the caller's contract.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::corpus::UnitRecord;
use crate::linalg::{self, SingularMatrix};
use crate::rng::{derive_rng, stream};
use crate::stats::{mean, median_sorted, percentile_sorted, sample_variance, sort_ascending};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Treated,
    Control,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Treated => write!(f, "treated"),
            Arm::Control => write!(f, "control"),
        }
    }
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("the {arm} arm is empty")]
    EmptyArm { arm: Arm },
    #[error("need at least {needed} units, got {got}")]
    TooFewUnits { needed: usize, got: usize },
    #[error("singular design matrix ({0})")]
    SingularDesign(#[from] SingularMatrix),
    #[error("median-of-means needs at least 2 total blocks, got {0}")]
    InvalidBlocks(usize),
    #[error("weight exponent must be finite and nonnegative, got {0}")]
    InvalidGamma(f64),
    #[error("winsorization level must lie in (0, 0.5), got {0}")]
    InvalidLevel(f64),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("cannot parse estimator spec `{input}`: {reason}")]
    SpecParse { input: String, reason: String },
}

/// Estimator family plus parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorFamily {
    Dm,
    Mom { total_blocks: usize },
    GenDd,
    GenDdW { gamma: f64 },
}

/// A named estimator configuration; prints and parses the canonical names
/// `dm`, `mom1000`, `gen_dd`, `gen_dd_w1`, `dm_wins.001`, ...
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorSpec {
    pub family: EstimatorFamily,
    pub winsorize_level: Option<f64>,
}

impl EstimatorSpec {
    pub fn dm() -> Self {
        Self { family: EstimatorFamily::Dm, winsorize_level: None }
    }

    pub fn mom(total_blocks: usize) -> Self {
        Self { family: EstimatorFamily::Mom { total_blocks }, winsorize_level: None }
    }

    pub fn gen_dd() -> Self {
        Self { family: EstimatorFamily::GenDd, winsorize_level: None }
    }

    pub fn gen_dd_w(gamma: f64) -> Self {
        Self { family: EstimatorFamily::GenDdW { gamma }, winsorize_level: None }
    }

    pub fn winsorized(mut self, level: f64) -> Self {
        self.winsorize_level = Some(level);
        self
    }

    pub fn canonical_name(&self) -> String {
        let base = match self.family {
            EstimatorFamily::Dm => "dm".to_string(),
            EstimatorFamily::Mom { total_blocks } => format!("mom{total_blocks}"),
            EstimatorFamily::GenDd => "gen_dd".to_string(),
            EstimatorFamily::GenDdW { gamma } => format!("gen_dd_w{gamma}"),
        };
        match self.winsorize_level {
            // "0.001" prints as "_wins.001", matching the conventional names.
            Some(level) => {
                let digits = format!("{level}");
                let digits = digits.strip_prefix('0').unwrap_or(&digits);
                format!("{base}_wins{digits}")
            }
            None => base,
        }
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.canonical_name())
    }
}

impl FromStr for EstimatorSpec {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_err = |reason: &str| EstimatorError::SpecParse {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let (base, winsorize_level) = match s.rfind("_wins") {
            Some(pos) => {
                let level_str = &s[pos + "_wins".len()..];
                let level: f64 = level_str
                    .parse()
                    .map_err(|_| parse_err("bad winsorization level"))?;
                if !(level > 0.0 && level < 0.5) {
                    return Err(parse_err("winsorization level must lie in (0, 0.5)"));
                }
                (&s[..pos], Some(level))
            }
            None => (s, None),
        };
        let family = if base == "dm" {
            EstimatorFamily::Dm
        } else if base == "gen_dd" {
            EstimatorFamily::GenDd
        } else if let Some(gamma_str) = base.strip_prefix("gen_dd_w") {
            let gamma: f64 = gamma_str
                .parse()
                .map_err(|_| parse_err("bad weight exponent"))?;
            if !gamma.is_finite() || gamma < 0.0 {
                return Err(parse_err("weight exponent must be finite and nonnegative"));
            }
            EstimatorFamily::GenDdW { gamma }
        } else if let Some(blocks_str) = base.strip_prefix("mom") {
            let total_blocks: usize = blocks_str
                .parse()
                .map_err(|_| parse_err("bad block count"))?;
            if total_blocks < 2 {
                return Err(parse_err("block count must be at least 2"));
            }
            EstimatorFamily::Mom { total_blocks }
        } else {
            return Err(parse_err("unknown estimator family"));
        };
        Ok(Self { family, winsorize_level })
    }
}

/// A point estimate of the average treatment effect with optional
/// uncertainty. `t_stat` is present exactly when `std_err` is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub delta_hat: f64,
    pub std_err: Option<f64>,
    pub t_stat: Option<f64>,
    pub n_treat: usize,
    pub n_control: usize,
}

impl Estimate {
    fn new(delta_hat: f64, std_err: Option<f64>, n_treat: usize, n_control: usize) -> Self {
        let std_err = std_err.filter(|se| se.is_finite() && *se > 0.0);
        let t_stat = std_err.map(|se| delta_hat / se);
        Self { delta_hat, std_err, t_stat, n_treat, n_control }
    }
}

/// Full output of the (weighted) regression estimators; coefficients are
/// exposed for diagnostics and testing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenDdFit {
    pub intercept: f64,
    /// Coefficient on the treatment dummy: the effect estimate.
    pub effect: f64,
    /// Coefficient on the pretreatment response.
    pub slope: f64,
    pub std_err_effect: Option<f64>,
    /// (Weighted) residual sum of squares.
    pub rss: f64,
    pub n_treat: usize,
    pub n_control: usize,
}

impl GenDdFit {
    fn into_estimate(self) -> Estimate {
        Estimate::new(self.effect, self.std_err_effect, self.n_treat, self.n_control)
    }
}

/// Percentile clipping bounds fitted on a training fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinsorBounds {
    pub x_low: f64,
    pub x_high: f64,
    pub y_low: f64,
    pub y_high: f64,
    /// Upper bound only; the auxiliary covariate is already nonnegative.
    pub d_high: f64,
}

/// Difference of arm means with a Welch unpooled standard error.
///
/// The standard error is reported when both arms have at least two units and
/// at least one arm has positive variance.
pub fn estimate_dm(treat_y: &[f64], control_y: &[f64]) -> Result<Estimate, EstimatorError> {
    if treat_y.is_empty() {
        return Err(EstimatorError::EmptyArm { arm: Arm::Treated });
    }
    if control_y.is_empty() {
        return Err(EstimatorError::EmptyArm { arm: Arm::Control });
    }
    let delta = mean(treat_y) - mean(control_y);
    let std_err = match (sample_variance(treat_y), sample_variance(control_y)) {
        (Some(vt), Some(vc)) if vt > 0.0 || vc > 0.0 => {
            Some((vt / treat_y.len() as f64 + vc / control_y.len() as f64).sqrt())
        }
        _ => None,
    };
    Ok(Estimate::new(delta, std_err, treat_y.len(), control_y.len()))
}

/// Median of block means over values taken in their given order, dealt into
/// `blocks` contiguous runs whose sizes differ by at most one.
pub fn mom_statistic(values: &[f64], blocks: usize) -> f64 {
    debug_assert!(blocks >= 1 && blocks <= values.len());
    if blocks == 1 {
        return mean(values);
    }
    let base = values.len() / blocks;
    let remainder = values.len() % blocks;
    let mut block_means = Vec::with_capacity(blocks);
    let mut start = 0;
    for b in 0..blocks {
        let size = base + usize::from(b < remainder);
        block_means.push(mean(&values[start..start + size]));
        start += size;
    }
    block_means.sort_by(|a, b| a.partial_cmp(b).expect("finite block means"));
    median_sorted(&block_means)
}

/// Difference of per-arm medians of block means.
///
/// The `total_blocks` budget is split ⌈B/2⌉ treated / ⌊B/2⌋ control, clamped
/// to each arm's size; each arm is permuted with a seeded generator before
/// the blocks are dealt. A single block per arm reduces to the plain mean, so
/// `total_blocks = 2` reproduces `estimate_dm` exactly.
pub fn estimate_mom(
    treat_y: &[f64],
    control_y: &[f64],
    total_blocks: usize,
    seed: u64,
) -> Result<Estimate, EstimatorError> {
    if total_blocks < 2 {
        return Err(EstimatorError::InvalidBlocks(total_blocks));
    }
    if treat_y.is_empty() {
        return Err(EstimatorError::EmptyArm { arm: Arm::Treated });
    }
    if control_y.is_empty() {
        return Err(EstimatorError::EmptyArm { arm: Arm::Control });
    }
    let arm_statistic = |values: &[f64], blocks: usize, tag: u64| {
        let blocks = blocks.clamp(1, values.len());
        if blocks == 1 {
            return mean(values);
        }
        let mut permuted = values.to_vec();
        permuted.shuffle(&mut derive_rng(seed, &[stream::ESTIMATOR, tag]));
        mom_statistic(&permuted, blocks)
    };
    let treat_stat = arm_statistic(treat_y, total_blocks.div_ceil(2), 0);
    let control_stat = arm_statistic(control_y, total_blocks / 2, 1);
    Ok(Estimate::new(
        treat_stat - control_stat,
        None,
        treat_y.len(),
        control_y.len(),
    ))
}

/// Shared (weighted) least squares of y on (1, t, x). `gamma = None` is the
/// unweighted fit; `gamma = Some(0.0)` takes the identical unit-weight path.
fn fit_linear(units: &[UnitRecord], gamma: Option<f64>) -> Result<GenDdFit, EstimatorError> {
    let n = units.len();
    if n < 4 {
        return Err(EstimatorError::TooFewUnits { needed: 4, got: n });
    }
    let n_treat = units.iter().filter(|u| u.treated).count();
    let n_control = n - n_treat;
    if n_treat == 0 {
        return Err(EstimatorError::EmptyArm { arm: Arm::Treated });
    }
    if n_control == 0 {
        return Err(EstimatorError::EmptyArm { arm: Arm::Control });
    }
    if let Some(g) = gamma {
        if !g.is_finite() || g < 0.0 {
            return Err(EstimatorError::InvalidGamma(g));
        }
    }

    let weight = |u: &UnitRecord| match gamma {
        Some(g) if g != 0.0 => (1.0 + u.d).powf(-g),
        _ => 1.0,
    };

    // Normal equations for the columns (1, t, x).
    let mut xtx = [[0.0f64; 3]; 3];
    let mut xty = [0.0f64; 3];
    for u in units {
        let w = weight(u);
        let t = f64::from(u.treated);
        let cols = [1.0, t, u.x];
        for i in 0..3 {
            for j in i..3 {
                xtx[i][j] += w * cols[i] * cols[j];
            }
            xty[i] += w * cols[i] * u.y;
        }
    }
    for i in 0..3 {
        for j in 0..i {
            xtx[i][j] = xtx[j][i];
        }
    }

    // Declare singularity when a pivot falls below 1e-12 of the largest
    // weighted column norm squared. A covariate column that is identically
    // zero is dropped instead: the fit degenerates to intercept + dummy,
    // whose dummy coefficient is the difference of (weighted) arm means.
    let (beta, effect_inv_diag, dof) = if xtx[2][2] == 0.0 {
        let a = vec![
            vec![xtx[0][0], xtx[0][1]],
            vec![xtx[1][0], xtx[1][1]],
        ];
        let tol = 1e-12 * xtx[0][0].max(xtx[1][1]);
        let (b, inv) = linalg::solve_and_invert(&a, &xty[..2], tol)?;
        ([b[0], b[1], 0.0], inv[1][1], n - 2)
    } else {
        let max_norm_sq = xtx[0][0].max(xtx[1][1]).max(xtx[2][2]);
        let tol = 1e-12 * max_norm_sq;
        let a: Vec<Vec<f64>> = xtx.iter().map(|row| row.to_vec()).collect();
        let (b, inv) = linalg::solve_and_invert(&a, &xty, tol)?;
        ([b[0], b[1], b[2]], inv[1][1], n - 3)
    };

    let rss: f64 = units
        .iter()
        .map(|u| {
            let fitted = beta[0] + beta[1] * f64::from(u.treated) + beta[2] * u.x;
            weight(u) * (u.y - fitted) * (u.y - fitted)
        })
        .sum();

    let std_err_effect = if dof > 0 {
        let sigma_sq = rss / dof as f64;
        let var = sigma_sq * effect_inv_diag;
        (var > 0.0).then(|| var.sqrt())
    } else {
        None
    };

    Ok(GenDdFit {
        intercept: beta[0],
        effect: beta[1],
        slope: beta[2],
        std_err_effect,
        rss,
        n_treat,
        n_control,
    })
}

/// Regression-adjusted estimate: OLS of y on (1, t, x), classical standard
/// error with n − 3 degrees of freedom.
pub fn fit_gen_dd(units: &[UnitRecord]) -> Result<GenDdFit, EstimatorError> {
    fit_linear(units, None)
}

pub fn estimate_gen_dd(units: &[UnitRecord]) -> Result<Estimate, EstimatorError> {
    fit_gen_dd(units).map(GenDdFit::into_estimate)
}

/// Weighted regression-adjusted estimate with weights `(1 + d)^(-gamma)`.
pub fn fit_gen_dd_weighted(units: &[UnitRecord], gamma: f64) -> Result<GenDdFit, EstimatorError> {
    fit_linear(units, Some(gamma))
}

pub fn estimate_gen_dd_w(units: &[UnitRecord], gamma: f64) -> Result<Estimate, EstimatorError> {
    fit_gen_dd_weighted(units, gamma).map(GenDdFit::into_estimate)
}

/// Fits clipping bounds on training units: x and y at percentiles
/// (level, 1 − level), d at 1 − level only. Percentiles interpolate linearly
/// between closest ranks.
pub fn winsorize_fit(train: &[UnitRecord], level: f64) -> Result<WinsorBounds, EstimatorError> {
    if train.is_empty() {
        return Err(EstimatorError::EmptyTrainingSet);
    }
    if !(level > 0.0 && level < 0.5) {
        return Err(EstimatorError::InvalidLevel(level));
    }
    let xs = sort_ascending(&train.iter().map(|u| u.x).collect::<Vec<_>>());
    let ys = sort_ascending(&train.iter().map(|u| u.y).collect::<Vec<_>>());
    let ds = sort_ascending(&train.iter().map(|u| u.d).collect::<Vec<_>>());
    Ok(WinsorBounds {
        x_low: percentile_sorted(&xs, level),
        x_high: percentile_sorted(&xs, 1.0 - level),
        y_low: percentile_sorted(&ys, level),
        y_high: percentile_sorted(&ys, 1.0 - level),
        d_high: percentile_sorted(&ds, 1.0 - level),
    })
}

/// Clips x and y into their bounds and d into [0, d_high]; treatment flags
/// and order are untouched. Idempotent.
pub fn winsorize_apply(units: &[UnitRecord], bounds: &WinsorBounds) -> Vec<UnitRecord> {
    units
        .iter()
        .map(|u| UnitRecord {
            x: u.x.clamp(bounds.x_low, bounds.x_high),
            d: u.d.clamp(0.0, bounds.d_high),
            y: u.y.clamp(bounds.y_low, bounds.y_high),
            treated: u.treated,
        })
        .collect()
}

fn split_arms(units: &[UnitRecord]) -> (Vec<f64>, Vec<f64>) {
    let mut treat = Vec::new();
    let mut control = Vec::new();
    for u in units {
        if u.treated {
            treat.push(u.y);
        } else {
            control.push(u.y);
        }
    }
    (treat, control)
}

/// Runs a spec on its training units. When the spec carries a Winsorization
/// level, bounds are fitted on these units and applied before dispatching;
/// evaluation folds must never pass through here.
pub fn run_estimator(
    spec: &EstimatorSpec,
    train_units: &[UnitRecord],
    seed: u64,
) -> Result<Estimate, EstimatorError> {
    let winsorized;
    let units = match spec.winsorize_level {
        Some(level) => {
            let bounds = winsorize_fit(train_units, level)?;
            winsorized = winsorize_apply(train_units, &bounds);
            winsorized.as_slice()
        }
        None => train_units,
    };
    match spec.family {
        EstimatorFamily::Dm => {
            let (treat, control) = split_arms(units);
            estimate_dm(&treat, &control)
        }
        EstimatorFamily::Mom { total_blocks } => {
            let (treat, control) = split_arms(units);
            estimate_mom(&treat, &control, total_blocks, seed)
        }
        EstimatorFamily::GenDd => estimate_gen_dd(units),
        EstimatorFamily::GenDdW { gamma } => estimate_gen_dd_w(units, gamma),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit(x: f64, d: f64, y: f64, treated: bool) -> UnitRecord {
        UnitRecord { x, d, y, treated }
    }

    #[test]
    fn dm_arithmetic() {
        let est = estimate_dm(&[2.0, 4.0], &[1.0, 1.0]).unwrap();
        assert_eq!(est.delta_hat, 2.0);
        assert_eq!(est.std_err, Some(1.0));
        assert_eq!(est.t_stat, Some(2.0));
        assert_eq!((est.n_treat, est.n_control), (2, 2));
    }

    #[test]
    fn dm_same_multiset_is_zero() {
        let est = estimate_dm(&[3.0, 1.0, 2.0], &[2.0, 3.0, 1.0]).unwrap();
        assert_eq!(est.delta_hat, 0.0);
    }

    #[test]
    fn dm_single_sample_arms_have_no_std_err() {
        let est = estimate_dm(&[5.0], &[3.0]).unwrap();
        assert_eq!(est.delta_hat, 2.0);
        assert_eq!(est.std_err, None);
        assert_eq!(est.t_stat, None);
    }

    #[test]
    fn dm_constant_arms_have_no_std_err() {
        let est = estimate_dm(&[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(est.std_err, None);
    }

    #[test]
    fn dm_empty_arm_errors() {
        assert!(matches!(
            estimate_dm(&[], &[1.0]),
            Err(EstimatorError::EmptyArm { arm: Arm::Treated })
        ));
    }

    #[test]
    fn mom_fixed_permutation_blocks() {
        // {1,2,3,100} in 2 blocks {1,2} and {3,100}: means 1.5 and 51.5,
        // median (even count) is their average.
        assert_eq!(mom_statistic(&[1.0, 2.0, 3.0, 100.0], 2), 26.5);
    }

    #[test]
    fn mom_two_total_blocks_equals_dm() {
        let treat = [1.0, 5.0, 2.5, -4.0];
        let control = [0.5, 0.25, 8.0];
        let mom = estimate_mom(&treat, &control, 2, 99).unwrap();
        let dm = estimate_dm(&treat, &control).unwrap();
        assert_eq!(mom.delta_hat, dm.delta_hat);
        assert_eq!(mom.std_err, None);
    }

    #[test]
    fn mom_shrinks_outlier_influence() {
        let treat = [1.0, 1.0, 1.0, 1.0, 1.0, 1e6];
        let control = [1.0; 6];
        // Fixed order: blocks {1,1},{1,1},{1,1e6} → means {1,1,500000.5},
        // median 1, so the fixed-permutation statistic ignores the outlier.
        assert_eq!(mom_statistic(&treat, 3), 1.0);
        let dm = estimate_dm(&treat, &control).unwrap();
        let mom = estimate_mom(&treat, &control, 6, 123).unwrap();
        assert!(mom.delta_hat.abs() < dm.delta_hat.abs());
    }

    #[test]
    fn mom_rejects_single_total_block() {
        assert!(matches!(
            estimate_mom(&[1.0], &[1.0], 1, 0),
            Err(EstimatorError::InvalidBlocks(1))
        ));
    }

    #[test]
    fn gen_dd_interpolates_exactly() {
        let units = [
            unit(0.0, 0.0, 0.0, false),
            unit(0.0, 0.0, 1.0, true),
            unit(1.0, 0.0, 2.0, false),
            unit(1.0, 0.0, 3.0, true),
        ];
        let fit = fit_gen_dd(&units).unwrap();
        assert_relative_eq!(fit.intercept, 0.0, epsilon = 1e-12);
        assert_relative_eq!(fit.effect, 1.0, max_relative = 1e-12);
        assert_relative_eq!(fit.slope, 2.0, max_relative = 1e-12);
        assert!(fit.rss.abs() < 1e-20);
        assert_eq!(fit.std_err_effect, None);
    }

    #[test]
    fn gen_dd_with_zero_covariate_matches_dm() {
        let units = [
            unit(0.0, 0.0, 4.0, true),
            unit(0.0, 0.0, 2.0, true),
            unit(0.0, 0.0, 1.0, false),
            unit(0.0, 0.0, 1.5, false),
        ];
        let fit = fit_gen_dd(&units).unwrap();
        let dm = estimate_dm(&[4.0, 2.0], &[1.0, 1.5]).unwrap();
        assert_relative_eq!(fit.effect, dm.delta_hat, max_relative = 1e-12);
        assert_eq!(fit.slope, 0.0);
    }

    #[test]
    fn gen_dd_matches_normal_equations_oracle() {
        use rand::Rng;
        let mut rng = derive_rng(31, &[7]);
        let units: Vec<UnitRecord> = (0..50)
            .map(|i| {
                let x: f64 = rng.random_range(-3.0..3.0);
                let noise: f64 = rng.random_range(-0.5..0.5);
                let treated = i % 2 == 0;
                unit(x, 0.0, 1.0 + 2.5 * f64::from(treated) + 0.8 * x + noise, treated)
            })
            .collect();
        let fit = fit_gen_dd(&units).unwrap();

        // Independent oracle: Cramer's rule on the 3x3 normal equations.
        let mut m = [[0.0f64; 3]; 3];
        let mut v = [0.0f64; 3];
        for u in &units {
            let c = [1.0, f64::from(u.treated), u.x];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += c[i] * c[j];
                }
                v[i] += c[i] * u.y;
            }
        }
        let det = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d0 = det(&m);
        let mut m1 = m;
        for i in 0..3 {
            m1[i][1] = v[i];
        }
        let oracle_effect = det(&m1) / d0;
        assert_relative_eq!(fit.effect, oracle_effect, max_relative = 1e-10);
    }

    #[test]
    fn gen_dd_rejects_collinear_design() {
        let units = [
            unit(1.0, 0.0, 1.0, true),
            unit(1.0, 0.0, 2.0, true),
            unit(1.0, 0.0, 0.5, false),
            unit(1.0, 0.0, 0.6, false),
        ];
        assert!(matches!(
            fit_gen_dd(&units),
            Err(EstimatorError::SingularDesign(_))
        ));
    }

    #[test]
    fn weighted_fit_with_zero_gamma_is_identical() {
        use rand::Rng;
        let mut rng = derive_rng(5, &[1]);
        let units: Vec<UnitRecord> = (0..40)
            .map(|i| {
                unit(
                    rng.random_range(0.0..4.0),
                    rng.random_range(0.0..10.0),
                    rng.random_range(-2.0..8.0),
                    i % 3 == 0,
                )
            })
            .collect();
        let plain = fit_gen_dd(&units).unwrap();
        let weighted = fit_gen_dd_weighted(&units, 0.0).unwrap();
        assert_eq!(plain, weighted);
    }

    #[test]
    fn weighted_fit_constant_d_matches_plain_effect() {
        use rand::Rng;
        let mut rng = derive_rng(6, &[2]);
        let units: Vec<UnitRecord> = (0..30)
            .map(|i| {
                unit(
                    rng.random_range(0.0..4.0),
                    3.5,
                    rng.random_range(-2.0..8.0),
                    i % 2 == 0,
                )
            })
            .collect();
        let plain = fit_gen_dd(&units).unwrap();
        let weighted = fit_gen_dd_weighted(&units, 1.0).unwrap();
        assert_relative_eq!(plain.effect, weighted.effect, max_relative = 1e-12);
    }

    #[test]
    fn weighted_fit_matches_weighted_oracle() {
        use rand::Rng;
        let mut rng = derive_rng(77, &[3]);
        let units: Vec<UnitRecord> = (0..50)
            .map(|i| {
                unit(
                    rng.random_range(0.5..5.0),
                    rng.random_range(0.0..20.0),
                    rng.random_range(-3.0..12.0),
                    i % 2 == 1,
                )
            })
            .collect();
        let gamma = 1.0;
        let fit = fit_gen_dd_weighted(&units, gamma).unwrap();

        let mut m = [[0.0f64; 3]; 3];
        let mut v = [0.0f64; 3];
        for u in &units {
            let w = (1.0 + u.d).powf(-gamma);
            let c = [1.0, f64::from(u.treated), u.x];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += w * c[i] * c[j];
                }
                v[i] += w * c[i] * u.y;
            }
        }
        let det = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d0 = det(&m);
        let mut m1 = m;
        for i in 0..3 {
            m1[i][1] = v[i];
        }
        assert_relative_eq!(fit.effect, det(&m1) / d0, max_relative = 1e-10);
    }

    #[test]
    fn winsorize_level_maps_to_stated_percentiles() {
        let units: Vec<UnitRecord> = (1..=1000)
            .map(|i| unit(i as f64, i as f64, i as f64, i % 2 == 0))
            .collect();
        let bounds = winsorize_fit(&units, 0.1).unwrap();
        assert_relative_eq!(bounds.y_low, 100.9, max_relative = 1e-12);
        assert_relative_eq!(bounds.y_high, 900.1, max_relative = 1e-12);
        assert_relative_eq!(bounds.x_low, 100.9, max_relative = 1e-12);
        assert_relative_eq!(bounds.d_high, 900.1, max_relative = 1e-12);
    }

    #[test]
    fn winsorize_constant_sample_collapses_bounds() {
        let units = vec![unit(2.0, 2.0, 2.0, false); 5];
        let bounds = winsorize_fit(&units, 0.001).unwrap();
        assert_eq!(bounds.y_low, 2.0);
        assert_eq!(bounds.y_high, 2.0);
    }

    #[test]
    fn winsorize_apply_clips_and_preserves() {
        let units = [
            unit(0.5, 9.0, -10.0, true),
            unit(2.0, 1.0, 3.0, false),
            unit(5.0, 0.5, 50.0, true),
        ];
        let bounds = WinsorBounds {
            x_low: 1.0,
            x_high: 4.0,
            y_low: 0.0,
            y_high: 10.0,
            d_high: 2.0,
        };
        let clipped = winsorize_apply(&units, &bounds);
        assert_eq!(clipped[0].x, 1.0);
        assert_eq!(clipped[0].d, 2.0);
        assert_eq!(clipped[0].y, 0.0);
        assert!(clipped[0].treated);
        assert_eq!(clipped[1], units[1]); // inside bounds: identity
        assert_eq!(clipped[2].y, 10.0);
        // Idempotence.
        assert_eq!(winsorize_apply(&clipped, &bounds), clipped);
    }

    #[test]
    fn run_estimator_plain_dm_is_dispatcher_identity() {
        let units = [
            unit(1.0, 0.0, 2.0, true),
            unit(1.0, 0.0, 4.0, true),
            unit(1.0, 0.0, 1.0, false),
            unit(1.0, 0.0, 1.0, false),
        ];
        let est = run_estimator(&EstimatorSpec::dm(), &units, 0).unwrap();
        let direct = estimate_dm(&[2.0, 4.0], &[1.0, 1.0]).unwrap();
        assert_eq!(est, direct);
    }

    #[test]
    fn run_estimator_winsorized_composes() {
        use rand::Rng;
        let mut rng = derive_rng(8, &[4]);
        let mut units: Vec<UnitRecord> = (0..2000)
            .map(|i| {
                unit(
                    rng.random_range(0.0..10.0),
                    rng.random_range(0.0..10.0),
                    rng.random_range(0.0..10.0),
                    i % 2 == 0,
                )
            })
            .collect();
        // Extremes beyond the 99.9th percentile.
        units[0].y = 1e7;
        units[1].y = -1e7;

        let spec = EstimatorSpec::dm().winsorized(0.001);
        let est = run_estimator(&spec, &units, 0).unwrap();

        let bounds = winsorize_fit(&units, 0.001).unwrap();
        let clipped = winsorize_apply(&units, &bounds);
        let (t, c) = split_arms(&clipped);
        let oracle = estimate_dm(&t, &c).unwrap();
        assert_eq!(est, oracle);

        let plain = run_estimator(&EstimatorSpec::dm(), &units, 0).unwrap();
        assert_ne!(est.delta_hat, plain.delta_hat);

        // Same composition for the weighted regression family.
        let spec = EstimatorSpec::gen_dd_w(1.0).winsorized(0.001);
        let est = run_estimator(&spec, &units, 0).unwrap();
        let oracle = estimate_gen_dd_w(&clipped, 1.0).unwrap();
        assert_eq!(est, oracle);
    }

    #[test]
    fn canonical_names_round_trip() {
        let cases = [
            "dm",
            "mom1000",
            "mom2",
            "gen_dd",
            "gen_dd_w1",
            "gen_dd_w0.6",
            "dm_wins.001",
            "gen_dd_wins.001",
            "gen_dd_w1_wins.001",
            "mom1000_wins.05",
        ];
        for name in cases {
            let spec: EstimatorSpec = name.parse().unwrap();
            assert_eq!(spec.canonical_name(), name);
        }
        let spec: EstimatorSpec = "gen_dd_w1_wins.001".parse().unwrap();
        assert_eq!(spec.family, EstimatorFamily::GenDdW { gamma: 1.0 });
        assert_eq!(spec.winsorize_level, Some(0.001));
    }

    #[test]
    fn spec_parse_rejects_nonsense() {
        for bad in ["dmx", "mom", "mom1", "gen_dd_w", "gen_dd_wins", "dm_wins.9"] {
            assert!(bad.parse::<EstimatorSpec>().is_err(), "{bad} should not parse");
        }
    }
}
