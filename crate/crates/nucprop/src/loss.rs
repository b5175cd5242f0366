//! Heteroscedastic classification loss with analytic gradients.
//!
//! For every pixel the predicted logits are corrupted by Gaussian noise
//! with a per-pixel learned scale, and the negative log of the expected
//! correct-class likelihood over `T` noise samples is accumulated:
//!
//! ```text
//! loss_i = -log( (1/T) * sum_t exp( s_hat[t][c'] - logsumexp_c s_hat[t][c] ) )
//! ```
//!
//! with `s_hat[t] = s + sigma * eps_t`. The same noise samples are reused
//! for the value and both gradients (common random numbers), so central
//! finite differences reproduce the analytic gradient to high accuracy.
//! Noise is drawn from a per-pixel counter-derived stream, making the
//! computation independent of pixel evaluation order.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("negative noise scale {sigma} at pixel {pixel}")]
    NegativeSigma { pixel: usize, sigma: f64 },
    #[error("target class {target} out of range for {classes} classes at pixel {pixel}")]
    BadTarget { pixel: usize, target: usize, classes: usize },
    #[error("field arrays disagree on pixel count")]
    LengthMismatch,
}

/// Per-pixel logits with noise scales and targets.
#[derive(Debug, Clone)]
pub struct LogitField {
    pub classes: usize,
    /// Pixel-major logits, `pixels * classes` values.
    pub logits: Vec<f64>,
    /// Per-pixel noise standard deviation, nonnegative.
    pub sigma: Vec<f64>,
    /// Per-pixel correct class, `< classes`.
    pub target: Vec<usize>,
    /// Noise sample count `T`.
    pub samples: usize,
    pub seed: u64,
}

impl LogitField {
    pub fn pixels(&self) -> usize {
        self.sigma.len()
    }

    fn validate(&self) -> Result<(), LossError> {
        if self.samples < 1 {
            return Err(LossError::NoSamples);
        }
        let n = self.sigma.len();
        if self.logits.len() != n * self.classes || self.target.len() != n {
            return Err(LossError::LengthMismatch);
        }
        for (pixel, &s) in self.sigma.iter().enumerate() {
            if s < 0.0 || !s.is_finite() {
                return Err(LossError::NegativeSigma { pixel, sigma: s });
            }
        }
        for (pixel, &t) in self.target.iter().enumerate() {
            if t >= self.classes {
                return Err(LossError::BadTarget { pixel, target: t, classes: self.classes });
            }
        }
        Ok(())
    }
}

/// How per-pixel losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Sum over pixels.
    #[default]
    Sum,
    /// Mean over pixels.
    Mean,
}

/// Loss value with gradients w.r.t. the logits and the noise scales.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Pixel-major, same layout as `LogitField::logits`.
    pub grad_logits: Vec<f64>,
    pub grad_sigma: Vec<f64>,
}

fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

struct PixelResult {
    loss: f64,
    grad_logits: Vec<f64>,
    grad_sigma: f64,
}

fn pixel_loss(field: &LogitField, pixel: usize) -> PixelResult {
    let c = field.classes;
    let t_count = field.samples;
    let s = &field.logits[pixel * c..(pixel + 1) * c];
    let sigma = field.sigma[pixel];
    let correct = field.target[pixel];

    let mut rng = stream_rng(field.seed, pixel as u64);
    let mut eps = vec![0.0f64; t_count * c];
    for e in eps.iter_mut() {
        *e = StandardNormal.sample(&mut rng);
    }

    // a[t] = log-softmax of the corrupted logits at the correct class
    let mut corrupted = vec![0.0f64; c];
    let mut a = vec![0.0f64; t_count];
    let mut probs = vec![0.0f64; t_count * c];
    for t in 0..t_count {
        for k in 0..c {
            corrupted[k] = s[k] + sigma * eps[t * c + k];
        }
        let lse = logsumexp(&corrupted);
        a[t] = corrupted[correct] - lse;
        for k in 0..c {
            probs[t * c + k] = (corrupted[k] - lse).exp();
        }
    }
    let loss = -(logsumexp(&a) - (t_count as f64).ln());

    // q[t] = softmax over samples of a[t]; dloss/da[t] = -q[t]
    let lse_a = logsumexp(&a);
    let mut grad_logits = vec![0.0f64; c];
    let mut grad_sigma = 0.0f64;
    for t in 0..t_count {
        let q = (a[t] - lse_a).exp();
        for k in 0..c {
            let indicator = if k == correct { 1.0 } else { 0.0 };
            let da_ds = indicator - probs[t * c + k];
            grad_logits[k] -= q * da_ds;
            grad_sigma -= q * da_ds * eps[t * c + k];
        }
    }
    PixelResult { loss, grad_logits, grad_sigma }
}

/// Evaluate the loss and its gradients.
///
/// With `sigma = 0` this reduces exactly to softmax cross-entropy for any
/// sample count. Equal seeds give bit-identical results, in serial or
/// parallel execution.
pub fn heteroscedastic_ce_loss(
    field: &LogitField,
    reduction: Reduction,
) -> Result<LossOutput, LossError> {
    field.validate()?;
    let n = field.pixels();
    let c = field.classes;
    let per_pixel: Vec<PixelResult> =
        (0..n).into_par_iter().map(|p| pixel_loss(field, p)).collect();

    let mut loss = 0.0f64;
    let mut grad_logits = vec![0.0f64; n * c];
    let mut grad_sigma = vec![0.0f64; n];
    for (p, r) in per_pixel.into_iter().enumerate() {
        loss += r.loss;
        grad_logits[p * c..(p + 1) * c].copy_from_slice(&r.grad_logits);
        grad_sigma[p] = r.grad_sigma;
    }
    if reduction == Reduction::Mean && n > 0 {
        let inv = 1.0 / n as f64;
        loss *= inv;
        grad_logits.iter_mut().for_each(|g| *g *= inv);
        grad_sigma.iter_mut().for_each(|g| *g *= inv);
    }
    Ok(LossOutput { loss, grad_logits, grad_sigma })
}

/// Plain softmax cross-entropy of one logit vector (reference path).
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    logsumexp(logits) - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn single_pixel(logits: &[f64], target: usize, sigma: f64, samples: usize, seed: u64) -> LogitField {
        LogitField {
            classes: logits.len(),
            logits: logits.to_vec(),
            sigma: vec![sigma],
            target: vec![target],
            samples,
            seed,
        }
    }

    #[test]
    fn zero_noise_collapses_to_cross_entropy() {
        let f = single_pixel(&[0.0, 0.0], 0, 0.0, 7, 1);
        let out = heteroscedastic_ce_loss(&f, Reduction::Sum).unwrap();
        assert!((out.loss - 2.0f64.ln()).abs() < 1e-12);

        let f = single_pixel(&[2.0, 0.0], 0, 0.0, 3, 1);
        let out = heteroscedastic_ce_loss(&f, Reduction::Sum).unwrap();
        assert!((out.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_matches_ce_on_random_logits() {
        let mut rng = crate::rng::stream_rng(3, 0);
        for trial in 0..100 {
            let classes = if trial % 2 == 0 { 2 } else { 3 };
            let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-5.0..5.0)).collect();
            let target = rng.random_range(0..classes);
            let f = single_pixel(&logits, target, 0.0, 5, trial as u64);
            let out = heteroscedastic_ce_loss(&f, Reduction::Sum).unwrap();
            let ce = softmax_cross_entropy(&logits, target);
            assert!((out.loss - ce).abs() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn seeded_determinism() {
        let field = LogitField {
            classes: 3,
            logits: vec![1.0, -0.5, 0.25, 2.0, 0.0, -1.0],
            sigma: vec![0.7, 1.3],
            target: vec![0, 2],
            samples: 16,
            seed: 42,
        };
        let a = heteroscedastic_ce_loss(&field, Reduction::Sum).unwrap();
        let b = heteroscedastic_ce_loss(&field, Reduction::Sum).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad_logits, b.grad_logits);
        assert_eq!(a.grad_sigma, b.grad_sigma);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = crate::rng::stream_rng(9, 1);
        for trial in 0..10u64 {
            let classes = 3;
            let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
            let sigma = rng.random_range(0.2..1.5);
            let target = rng.random_range(0..classes);
            let base = single_pixel(&logits, target, sigma, 8, 100 + trial);
            let out = heteroscedastic_ce_loss(&base, Reduction::Sum).unwrap();
            let h = 1e-5;
            for k in 0..classes {
                let mut plus = base.clone();
                plus.logits[k] += h;
                let mut minus = base.clone();
                minus.logits[k] -= h;
                let fd = (heteroscedastic_ce_loss(&plus, Reduction::Sum).unwrap().loss
                    - heteroscedastic_ce_loss(&minus, Reduction::Sum).unwrap().loss)
                    / (2.0 * h);
                let a = out.grad_logits[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-4, "trial {trial} class {k}: {a} vs {fd}");
            }
            let mut plus = base.clone();
            plus.sigma[0] += h;
            let mut minus = base.clone();
            minus.sigma[0] -= h;
            let fd = (heteroscedastic_ce_loss(&plus, Reduction::Sum).unwrap().loss
                - heteroscedastic_ce_loss(&minus, Reduction::Sum).unwrap().loss)
                / (2.0 * h);
            let a = out.grad_sigma[0];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-4, "trial {trial} sigma: {a} vs {fd}");
        }
    }

    #[test]
    fn loss_against_independent_monte_carlo() {
        // C = 2, s = (2, 0), correct class 0, sigma = 1, T = 10.
        let field = single_pixel(&[2.0, 0.0], 0, 1.0, 10, 77);
        let loss = heteroscedastic_ce_loss(&field, Reduction::Sum).unwrap().loss;

        // Independent generator: splitmix64 + Box-Muller, no shared code
        // with the implementation's ChaCha/ziggurat path.
        let mut state = 0x1234_5678_9abc_def0u64;
        let mut next = move || {
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64
        };
        let n = 1_000_000usize;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut i = 0;
        while i < n {
            let u1: f64 = next().max(1e-300);
            let u2: f64 = next();
            let r = (-2.0 * u1.ln()).sqrt();
            for eps in [
                r * (2.0 * std::f64::consts::PI * u2).cos(),
                r * (2.0 * std::f64::consts::PI * u2).sin(),
            ] {
                // exp(a) for one sample reduces to sigmoid(2 - sqrt(2)*eps)
                let x = 1.0 / (1.0 + (-(2.0 - std::f64::consts::SQRT_2 * eps)).exp());
                sum += x;
                sum_sq += x * x;
                i += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let reference = -mean.ln();
        // delta-method standard error of the T = 10 estimator
        let se = (var / 10.0).sqrt() / mean;
        assert!(
            (loss - reference).abs() <= 3.0 * se,
            "loss {loss} vs reference {reference} (se {se})"
        );
    }

    #[test]
    fn noise_increases_loss_at_confident_pixels() {
        let mut prev = f64::NEG_INFINITY;
        for &sigma in &[0.0, 0.5, 1.0, 2.0] {
            let f = single_pixel(&[2.5, 0.0, -1.0], 0, sigma, 10_000, 5);
            let loss = heteroscedastic_ce_loss(&f, Reduction::Sum).unwrap().loss;
            assert!(loss >= prev - 1e-9, "sigma {sigma}: {loss} < {prev}");
            prev = loss;
        }
    }

    #[test]
    fn mean_reduction_divides_by_pixels() {
        let field = LogitField {
            classes: 2,
            logits: vec![1.0, 0.0, 0.0, 1.0],
            sigma: vec![0.0, 0.0],
            target: vec![0, 0],
            samples: 1,
            seed: 0,
        };
        let sum = heteroscedastic_ce_loss(&field, Reduction::Sum).unwrap();
        let mean = heteroscedastic_ce_loss(&field, Reduction::Mean).unwrap();
        assert!((mean.loss - sum.loss / 2.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs_error() {
        let mut f = single_pixel(&[0.0, 0.0], 0, 0.5, 4, 1);
        f.samples = 0;
        assert!(matches!(heteroscedastic_ce_loss(&f, Reduction::Sum), Err(LossError::NoSamples)));
        let f = single_pixel(&[0.0, 0.0], 0, -0.5, 4, 1);
        assert!(matches!(
            heteroscedastic_ce_loss(&f, Reduction::Sum),
            Err(LossError::NegativeSigma { .. })
        ));
        let f = single_pixel(&[0.0, 0.0], 2, 0.5, 4, 1);
        assert!(matches!(
            heteroscedastic_ce_loss(&f, Reduction::Sum),
            Err(LossError::BadTarget { .. })
        ));
    }
}
