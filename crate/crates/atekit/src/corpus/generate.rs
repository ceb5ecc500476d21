//! Seeded synthetic corpus generation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::exec;
use crate::rng::{derive_rng, stream};
use crate::stats::normal_sf;

use super::{Corpus, CorpusError, GeneratorConfig, Provenance, Rct, UnitRecord};

/// Generates a corpus of independent heavy-tailed trials with known effects.
///
/// Each trial draws its effect from the normal prior and stores it as
/// `true_delta`. Per-trial randomness is derived from `(seed, trial index)`,
/// so the output is bit-identical across runs and thread counts.
pub fn simulate_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let rcts = exec::map_indexed(cfg.n_rcts, |i| generate_rct(cfg, seed, i));
    Corpus::new(
        rcts,
        Provenance::Synthetic {
            config: cfg.clone(),
            seed,
        },
    )
}

fn generate_rct(cfg: &GeneratorConfig, seed: u64, index: usize) -> Rct {
    let mut rng = derive_rng(seed, &[stream::GENERATOR, index as u64]);
    let (lo, hi) = cfg.units_per_rct;
    let n = rng.random_range(lo..=hi);

    let z: f64 = StandardNormal.sample(&mut rng);
    let delta = cfg.delta_prior_mean + cfg.delta_prior_sd * z;

    // Randomized assignment with a fixed treated count, clamped so both arms
    // keep at least two units.
    let n_treated = ((cfg.treated_fraction * n as f64).round() as usize).clamp(2, n - 2);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut treated = vec![false; n];
    for &j in order.iter().take(n_treated) {
        treated[j] = true;
    }

    let alpha = cfg.tail_exponent_eta - 1.0;
    let r_xy = cfg.xy_correlation;
    let r_dy = cfg.dy_correlation;
    let mix_x = (1.0 - r_xy * r_xy).sqrt();
    let mix_d = (1.0 - r_dy * r_dy).sqrt();

    let mut units = Vec::with_capacity(n);
    for &is_treated in &treated {
        let g_y: f64 = StandardNormal.sample(&mut rng);
        let e_x: f64 = StandardNormal.sample(&mut rng);
        let e_d: f64 = StandardNormal.sample(&mut rng);
        let eps: f64 = StandardNormal.sample(&mut rng);

        let baseline = pareto_from_gaussian(g_y, alpha);
        let x = pareto_from_gaussian(r_xy * g_y + mix_x * e_x, alpha);
        let d = pareto_from_gaussian(r_dy * g_y + mix_d * e_d, alpha);
        let mut y = baseline + cfg.noise_scale * eps;
        if is_treated {
            y += delta;
        }
        units.push(UnitRecord { x, d, y, treated: is_treated });
    }

    Rct::new(
        format!("rct{index:05}"),
        units,
        n as u64,
        None,
        Some(delta),
        Some(index as i64),
    )
    .expect("generated rct satisfies the data-model invariants")
}

/// Pushes a standard normal through the Pareto(scale 1, shape `alpha`)
/// quantile: value = P(Z > z)^(-1/alpha). Exact Pareto marginal, and jointly
/// Gaussian latents give the copula correlations.
fn pareto_from_gaussian(z: f64, alpha: f64) -> f64 {
    let sf = normal_sf(z).max(f64::MIN_POSITIVE);
    sf.powf(-1.0 / alpha)
}
