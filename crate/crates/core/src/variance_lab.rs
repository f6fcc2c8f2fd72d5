//! Numerical checks for the variance story behind latent thoughts.
//!
//! Fits one-dimensional Gaussians to sample sets and compares closed-form
//! KL divergences against a reference, to verify that a wider latent
//! distribution (variance approaching the reference) approximates the
//! reference strictly better than a narrow one centered on a single draw.
//! Also measures the empirical variance of latent vectors produced by a
//! trained generator.

use ndarray::{Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::corpus::{tokenize, ReasoningSample, Vocab};
use crate::error::{Error, Result};
use crate::generator::LatentModel;
use crate::seeded_rng;

/// Fraction of trials the ordering must hold for the lemma check to pass.
pub const LEMMA_PASS_FRACTION: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianSpec {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() || !variance.is_finite() || variance <= 0.0 {
            return Err(Error::invalid(format!(
                "gaussian needs finite mean and positive variance, got ({mean}, {variance})"
            )));
        }
        Ok(GaussianSpec { mean, variance })
    }
}

/// Unbiased moment fit; needs at least two samples and non-zero spread.
pub fn fit_gaussian(samples: &[f64]) -> Result<GaussianSpec> {
    if samples.len() < 2 {
        return Err(Error::invalid("need at least two samples to fit a gaussian"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if variance == 0.0 {
        return Err(Error::invalid("samples have zero variance"));
    }
    GaussianSpec::new(mean, variance)
}

/// KL(p || q) between univariate Gaussians, closed form.
pub fn kl_gaussian(p: &GaussianSpec, q: &GaussianSpec) -> f64 {
    let ratio = q.variance / p.variance;
    0.5 * ratio.ln() + (p.variance + (p.mean - q.mean).powi(2)) / (2.0 * q.variance) - 0.5
}

/// Sum of per-dimension KL terms for diagonal Gaussians.
pub fn kl_gaussian_diag(p: &[GaussianSpec], q: &[GaussianSpec]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid("diagonal KL needs matching non-empty dims"));
    }
    Ok(p.iter().zip(q).map(|(a, b)| kl_gaussian(a, b)).sum())
}

/// KL(p || fit(samples)).
pub fn kl_via_fit(p: &GaussianSpec, samples: &[f64]) -> Result<f64> {
    Ok(kl_gaussian(p, &fit_gaussian(samples)?))
}

/// Narrow candidate: one draw from `p`, jittered `n` times with variance
/// `var_q1`. Its fit sits near the base draw, not near `p`'s mean.
pub fn make_q1(p: &GaussianSpec, var_q1: f64, n: usize, rng: &mut impl rand::Rng) -> Result<Vec<f64>> {
    if var_q1 <= 0.0 || n < 2 {
        return Err(Error::invalid("q1 needs positive variance and n >= 2"));
    }
    let base = Normal::new(p.mean, p.variance.sqrt())
        .map_err(|e| Error::invalid(e.to_string()))?
        .sample(rng);
    let jitter = Normal::new(0.0, var_q1.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((0..n).map(|_| base + jitter.sample(rng)).collect())
}

/// Wide candidate: `n` draws centered on `p`'s mean with variance
/// `var_q2`, rescaled around their sample mean so the fitted variance is
/// exactly `var_q2`.
pub fn make_q2(p: &GaussianSpec, var_q2: f64, n: usize, rng: &mut impl rand::Rng) -> Result<Vec<f64>> {
    if var_q2 <= 0.0 || n < 2 {
        return Err(Error::invalid("q2 needs positive variance and n >= 2"));
    }
    let dist = Normal::new(p.mean, var_q2.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let draws: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let fitted = fit_gaussian(&draws)?;
    let scale = (var_q2 / fitted.variance).sqrt();
    Ok(draws
        .iter()
        .map(|x| fitted.mean + (x - fitted.mean) * scale)
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaReport {
    pub trials: usize,
    pub samples_per_trial: usize,
    pub var_q1: f64,
    pub var_q2: f64,
    pub holds: usize,
    pub holds_fraction: f64,
    pub mean_kl_q1: f64,
    pub mean_kl_q2: f64,
    pub passed: bool,
}

/// Check that the wide candidate beats the narrow one, KL-wise, in at
/// least [`LEMMA_PASS_FRACTION`] of trials. Requires
/// `0 < var_q1 < var_q2 <= p.variance`.
pub fn verify_variance_ordering(
    p: &GaussianSpec,
    var_q1: f64,
    var_q2: f64,
    trials: usize,
    n: usize,
    seed: u64,
) -> Result<LemmaReport> {
    if !(0.0 < var_q1 && var_q1 < var_q2 && var_q2 <= p.variance) {
        return Err(Error::invalid(format!(
            "need 0 < var_q1 < var_q2 <= reference variance, got {var_q1}, {var_q2}, {}",
            p.variance
        )));
    }
    if trials == 0 || n < 2 {
        return Err(Error::invalid("need trials >= 1 and n >= 2"));
    }
    let results: Result<Vec<(f64, f64)>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| lemma_trial(p, var_q1, var_q2, n, seed, t))
        .collect();
    let results = results?;
    let holds = results.iter().filter(|(kl1, kl2)| kl2 < kl1).count();
    let holds_fraction = holds as f64 / trials as f64;
    Ok(LemmaReport {
        trials,
        samples_per_trial: n,
        var_q1,
        var_q2,
        holds,
        holds_fraction,
        mean_kl_q1: results.iter().map(|r| r.0).sum::<f64>() / trials as f64,
        mean_kl_q2: results.iter().map(|r| r.1).sum::<f64>() / trials as f64,
        passed: holds_fraction >= LEMMA_PASS_FRACTION,
    })
}

/// One trial of the ordering experiment: build both candidate sets under
/// the trial's own stream and return their fitted KL to the reference.
/// The ordering holds for the trial when the second KL is the smaller.
pub fn lemma_trial(
    p: &GaussianSpec,
    var_q1: f64,
    var_q2: f64,
    n: usize,
    seed: u64,
    trial: u64,
) -> Result<(f64, f64)> {
    let mut rng = seeded_rng(seed, 3_000_000 + trial);
    let q1 = make_q1(p, var_q1, n, &mut rng)?;
    let q2 = make_q2(p, var_q2, n, &mut rng)?;
    Ok((kl_via_fit(p, &q1)?, kl_via_fit(p, &q2)?))
}

/// Mean over dimensions of the per-dimension unbiased variance of the
/// rows. Fewer than two rows give zero.
pub fn mean_dim_variance(rows: &ArrayView2<f64>) -> f64 {
    let n = rows.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for col in rows.axis_iter(Axis(1)) {
        let mean = col.sum() / n as f64;
        acc += col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    acc / rows.ncols() as f64
}

/// Pool every latent vector the model produces over `samples` and report
/// [`mean_dim_variance`] of the pool.
pub fn measure_latent_variance(
    backbone: &Backbone,
    model: &LatentModel,
    samples: &[ReasoningSample],
    vocab: &Vocab,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to measure latent variance on"));
    }
    let latent_count = model.config().latent_count;
    let per_sample: Result<Vec<Array2<f64>>> = samples
        .par_iter()
        .map(|s| {
            let tok = tokenize(s, vocab, latent_count)?;
            let rows = backbone.embed_ids(&tok.prompt_ids[..tok.latent_span.start])?;
            let (latents, _) = model.latents_plain(&rows, tok.question_span.clone())?;
            Ok(latents)
        })
        .collect();
    let per_sample = per_sample?;
    let d = model.config().d_b;
    let mut pool = Array2::zeros((samples.len() * latent_count, d));
    for (i, latents) in per_sample.iter().enumerate() {
        for l in 0..latent_count {
            pool.row_mut(i * latent_count + l).assign(&latents.row(l));
        }
    }
    Ok(mean_dim_variance(&pool.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::corpus::{generate_corpus, CorpusBounds};
    use crate::generator::GeneratorConfig;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn closed_form_kl_anchors() {
        let p = GaussianSpec::new(0.0, 1.0).unwrap();
        let half = GaussianSpec::new(0.0, 0.5).unwrap();
        let tenth = GaussianSpec::new(0.0, 0.1).unwrap();
        assert_relative_eq!(kl_gaussian(&p, &half), 0.15342640972002733, max_relative = 1e-12);
        assert_relative_eq!(kl_gaussian(&p, &tenth), 3.348707453502977, max_relative = 1e-12);
        assert_relative_eq!(
            kl_gaussian(&p, &tenth),
            5.0 - 0.5 + 0.5 * 0.1f64.ln(),
            max_relative = 1e-14
        );
        assert_eq!(kl_gaussian(&p, &p), 0.0);
        let shifted = GaussianSpec::new(2.0, 1.0).unwrap();
        assert_relative_eq!(kl_gaussian(&p, &shifted), 2.0, max_relative = 1e-14);
    }

    #[test]
    fn kl_is_non_negative_and_asymmetric() {
        let p = GaussianSpec::new(0.3, 1.7).unwrap();
        let q = GaussianSpec::new(-0.8, 0.4).unwrap();
        assert!(kl_gaussian(&p, &q) > 0.0);
        assert!(kl_gaussian(&q, &p) > 0.0);
        assert!((kl_gaussian(&p, &q) - kl_gaussian(&q, &p)).abs() > 1e-6);
        let diag = kl_gaussian_diag(&[p, q], &[q, p]).unwrap();
        assert_relative_eq!(
            diag,
            kl_gaussian(&p, &q) + kl_gaussian(&q, &p),
            max_relative = 1e-14
        );
        assert!(kl_gaussian_diag(&[p], &[p, q]).is_err());
    }

    #[test]
    fn moment_fit_matches_hand_values() {
        let fit = fit_gaussian(&[-1.0, 1.0]).unwrap();
        assert_eq!(fit.mean, 0.0);
        assert_eq!(fit.variance, 2.0);
        assert!(fit_gaussian(&[0.5]).is_err());
        assert!(fit_gaussian(&[0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn q2_rescaling_pins_the_fitted_variance() {
        let p = GaussianSpec::new(1.5, 1.0).unwrap();
        let mut rng = seeded_rng(42, 0);
        let q2 = make_q2(&p, 0.01, 10_000, &mut rng).unwrap();
        let fit = fit_gaussian(&q2).unwrap();
        assert_relative_eq!(fit.variance, 0.01, max_relative = 1e-10);
        assert!((fit.mean - 1.5).abs() < 0.05, "mean drifted to {}", fit.mean);
    }

    #[test]
    fn q1_sample_variance_lands_in_the_expected_band() {
        let p = GaussianSpec::new(0.0, 1.0).unwrap();
        let mut rng = seeded_rng(7, 0);
        let q1 = make_q1(&p, 0.01, 10_000, &mut rng).unwrap();
        let fit = fit_gaussian(&q1).unwrap();
        assert!(
            (0.0094..=0.0106).contains(&fit.variance),
            "variance {} outside band",
            fit.variance
        );
    }

    #[test]
    fn fit_kl_vanishes_with_sample_size() {
        let p = GaussianSpec::new(0.0, 1.0).unwrap();
        let dist = Normal::new(0.0, 1.0).unwrap();
        let mean_kl = |n: usize, seed: u64| {
            let mut acc = 0.0;
            for t in 0..20u64 {
                let mut rng = seeded_rng(seed, t);
                let samples: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
                acc += kl_via_fit(&p, &samples).unwrap();
            }
            acc / 20.0
        };
        let kl_100 = mean_kl(100, 1);
        let kl_1k = mean_kl(1_000, 2);
        let kl_10k = mean_kl(10_000, 3);
        assert!(kl_1k < kl_100, "{kl_1k} !< {kl_100}");
        assert!(kl_10k < kl_1k, "{kl_10k} !< {kl_1k}");
        let mut rng = seeded_rng(4, 0);
        let big: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut rng)).collect();
        assert!(kl_via_fit(&p, &big).unwrap() < 1e-3);
    }

    #[test]
    fn lemma_ordering_holds_almost_always() {
        let p = GaussianSpec::new(0.0, 1.0).unwrap();
        let report = verify_variance_ordering(&p, 0.05, 0.8, 200, 64, 99).unwrap();
        assert!(report.passed, "holds fraction {}", report.holds_fraction);
        assert!(report.mean_kl_q2 < report.mean_kl_q1);
        assert_eq!(report.trials, 200);
    }

    #[test]
    fn lemma_preconditions_are_enforced() {
        let p = GaussianSpec::new(0.0, 1.0).unwrap();
        assert!(verify_variance_ordering(&p, 0.8, 0.05, 10, 16, 0).is_err());
        assert!(verify_variance_ordering(&p, 0.05, 1.5, 10, 16, 0).is_err());
        assert!(verify_variance_ordering(&p, 0.0, 0.5, 10, 16, 0).is_err());
        assert!(verify_variance_ordering(&p, 0.05, 0.8, 0, 16, 0).is_err());
    }

    #[test]
    fn two_point_variance_matches_formula() {
        let rows = array![[1.0, 4.0], [3.0, 0.0]];
        let expected = ((1.0f64 - 3.0).powi(2) / 2.0 + (4.0f64 - 0.0).powi(2) / 2.0) / 2.0;
        assert_relative_eq!(mean_dim_variance(&rows.view()), expected, max_relative = 1e-14);
        assert_eq!(mean_dim_variance(&array![[5.0, 5.0]].view()), 0.0);
    }

    #[test]
    fn latent_variance_of_zero_init_generator_is_zero() {
        let vocab = Vocab::standard();
        let cfg = BackboneConfig {
            vocab_size: vocab.size(),
            d_b: 16,
            layers: 1,
            heads: 2,
            d_ff: 32,
            context: 96,
        };
        let backbone = Backbone::init(cfg, 5).unwrap();
        let mut gcfg = GeneratorConfig::toy(2);
        gcfg.d_b = 16;
        gcfg.d_g = 8;
        gcfg.heads = 2;
        gcfg.d_ff = 16;
        gcfg.context = 96;
        gcfg.init_scale = 0.0;
        let model = LatentModel::init_block(gcfg, 5).unwrap();
        let samples = generate_corpus(17, 6, &CorpusBounds::default()).unwrap();
        let v = measure_latent_variance(&backbone, &model, &samples, &vocab).unwrap();
        assert_eq!(v, 0.0);

        gcfg.init_scale = 0.05;
        let live = LatentModel::init_block(gcfg, 5).unwrap();
        let v2 = measure_latent_variance(&backbone, &live, &samples, &vocab).unwrap();
        assert!(v2 > 0.0);
    }
}
