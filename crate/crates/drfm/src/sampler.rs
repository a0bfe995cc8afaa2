//! Ancestral sampling and denoising along the reverse chain.
//!
//! A trajectory starts at pure noise `x_K ~ N(0, I)` (or at a corrupted
//! input entering mid-chain) and applies [`reverse_step`] for
//! `k = K, K-1, ..., 1`, querying the model for `eps_hat` at each step.
//! Two update rules are exposed: the derived posterior-mean rule
//! ([`SamplerVariant::Standard`], the default) and a literal transcription
//! of the alternative update ([`SamplerVariant::PaperLiteral`]) kept behind
//! a flag for comparison.
//!
//! Every trajectory owns a counter-derived RNG stream, so independent
//! samples are reproducible in isolation and the whole batch is a pure
//! function of `(checkpoint, seed, variant)`.

use rand_chacha::ChaCha8Rng;

use crate::data_io::Checkpoint;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{self, RandomFeatures, TrainableParams};
use crate::rng::{self, purpose};
use crate::schedule::VarianceSchedule;

/// Standard deviation rule for the additive noise of [`SamplerVariant::Standard`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseRule {
    /// `sigma_k = sqrt(beta_k)` — the fixed isotropic choice `Sigma = beta_k I`.
    #[default]
    BetaSqrt,
    /// `sigma_k = sqrt(beta_tilde_k)` — the reverse-posterior variance.
    PosteriorSqrt,
    /// `sigma_k = 0` — a fully deterministic trajectory.
    Zero,
}

impl NoiseRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseRule::BetaSqrt => "beta-sqrt",
            NoiseRule::PosteriorSqrt => "posterior-sqrt",
            NoiseRule::Zero => "zero",
        }
    }
}

impl std::fmt::Display for NoiseRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NoiseRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta-sqrt" => Ok(NoiseRule::BetaSqrt),
            "posterior-sqrt" => Ok(NoiseRule::PosteriorSqrt),
            "zero" => Ok(NoiseRule::Zero),
            other => Err(Error::InvalidConfig(format!(
                "unknown noise rule '{other}' (expected beta-sqrt, posterior-sqrt, or zero)"
            ))),
        }
    }
}

/// Update rule applied at every step of a reverse trajectory.
///
/// The variant is fixed for a whole trajectory and recorded in output
/// metadata by callers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerVariant {
    /// Literal transcription of the sampling pseudocode: mean coefficient
    /// `sqrt(beta_k)/sqrt(1 - abar_k)` on `eps_hat` and additive noise
    /// `beta_k * z` at every step, including `k = 1`.
    PaperLiteral,
    /// Derived reparameterized posterior mean
    /// `(1/sqrt(alpha_k)) (x_k - beta_k/sqrt(1 - abar_k) eps_hat)`
    /// plus `sigma_k * z` with `sigma_k` set by the [`NoiseRule`];
    /// `z` is forced to zero at the final step `k = 1`.
    Standard(NoiseRule),
}

impl Default for SamplerVariant {
    fn default() -> Self {
        SamplerVariant::Standard(NoiseRule::BetaSqrt)
    }
}

impl SamplerVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerVariant::PaperLiteral => "paper-literal",
            SamplerVariant::Standard(_) => "standard",
        }
    }

    /// The noise rule, when the variant has one.
    pub fn noise_rule(&self) -> Option<NoiseRule> {
        match self {
            SamplerVariant::PaperLiteral => None,
            SamplerVariant::Standard(rule) => Some(*rule),
        }
    }

    /// Whether the trajectory consumes a fresh `z` draw at timestep `k`.
    ///
    /// This fixes the RNG stream layout: a step that adds no noise draws
    /// nothing, so deterministic rules consume only the initial draw.
    fn consumes_noise(&self, k: usize) -> bool {
        match self {
            SamplerVariant::PaperLiteral => true,
            SamplerVariant::Standard(NoiseRule::Zero) => false,
            SamplerVariant::Standard(_) => k > 1,
        }
    }
}

impl std::fmt::Display for SamplerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SamplerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(SamplerVariant::PaperLiteral),
            "standard" => Ok(SamplerVariant::Standard(NoiseRule::default())),
            other => Err(Error::InvalidConfig(format!(
                "unknown sampler variant '{other}' (expected standard or paper-literal)"
            ))),
        }
    }
}

/// One reverse-chain update `x_k -> x_{k-1}`.
///
/// `eps_hat` is the model's noise prediction at `(x_k, k)` and `z` is a
/// caller-supplied standard-normal draw of the same dimension. For
/// [`SamplerVariant::Standard`] the mean is computed by
/// [`VarianceSchedule::posterior_mean_from_eps`] — the identical
/// expression, so supplying the exact conditional noise reproduces the
/// posterior mean bit for bit — and the noise term is skipped entirely at
/// `k = 1`. [`SamplerVariant::PaperLiteral`] applies its update verbatim at
/// every step.
pub fn reverse_step(
    schedule: &VarianceSchedule,
    x_k: &[f64],
    k: usize,
    eps_hat: &[f64],
    z: &[f64],
    variant: SamplerVariant,
) -> Result<Vec<f64>> {
    if x_k.len() != eps_hat.len() || x_k.len() != z.len() {
        return Err(Error::DimensionMismatch(format!(
            "reverse_step x_k len {} vs eps_hat len {} vs z len {}",
            x_k.len(),
            eps_hat.len(),
            z.len()
        )));
    }
    match variant {
        SamplerVariant::PaperLiteral => {
            let beta = schedule.beta(k)?;
            let inv = 1.0 / (1.0 - beta).sqrt();
            let c_eps = beta.sqrt() / (1.0 - schedule.alpha_bar(k)?).sqrt();
            Ok(x_k
                .iter()
                .zip(eps_hat)
                .zip(z)
                .map(|((&xk, &e), &zm)| inv * (xk - c_eps * e) + beta * zm)
                .collect())
        }
        SamplerVariant::Standard(rule) => {
            let mut out = schedule.posterior_mean_from_eps(x_k, eps_hat, k)?;
            let sigma = if k == 1 {
                0.0
            } else {
                match rule {
                    NoiseRule::BetaSqrt => schedule.beta(k)?.sqrt(),
                    NoiseRule::PosteriorSqrt => schedule.posterior_variance(k)?.sqrt(),
                    NoiseRule::Zero => 0.0,
                }
            };
            if sigma != 0.0 {
                for (o, &zm) in out.iter_mut().zip(z) {
                    *o = sigma.mul_add(zm, *o);
                }
            }
            Ok(out)
        }
    }
}

fn unpack(checkpoint: &Checkpoint) -> Result<(VarianceSchedule, RandomFeatures, TrainableParams)> {
    Ok((checkpoint.schedule()?, checkpoint.features()?, checkpoint.params()?))
}

/// Generate `count` samples by ancestral sampling down the full chain.
///
/// Each sample `i` owns the stream `(seed, SAMPLING, i)` and consumes it in
/// a fixed order: `d` draws for `x_K ~ N(0, I)`, then one `d`-draw `z` per
/// noise-consuming timestep, from `k = K` downward. The model is evaluated
/// batched across samples at each timestep (they all share `k`), which is
/// bit-identical to per-sample evaluation.
pub fn sample(
    checkpoint: &Checkpoint,
    count: usize,
    seed: u64,
    variant: SamplerVariant,
) -> Result<Mat> {
    if count == 0 {
        return Err(Error::InvalidConfig("sample count must be >= 1".into()));
    }
    let (schedule, features, params) = unpack(checkpoint)?;
    let d = checkpoint.input_dim();
    let k_steps = schedule.k_steps();

    let mut streams: Vec<ChaCha8Rng> = (0..count)
        .map(|i| rng::stream(seed, &[purpose::SAMPLING, i as u64]))
        .collect();

    let mut x = Mat::zeros(count, d);
    for (i, stream) in streams.iter_mut().enumerate() {
        rng::fill_standard_normal(stream, x.row_mut(i));
    }

    let mut z = vec![0.0; d];
    for k in (1..=k_steps).rev() {
        let ks = vec![k; count];
        let eps_hat = model::predict_noise_batch(&params, &features, &schedule, &x, &ks)?;
        let consumes = variant.consumes_noise(k);
        for i in 0..count {
            if consumes {
                rng::fill_standard_normal(&mut streams[i], &mut z);
            }
            let next = reverse_step(&schedule, x.row(i), k, eps_hat.row(i), &z, variant)?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "sample {i} became non-finite at timestep k = {k}"
                )));
            }
            x.row_mut(i).copy_from_slice(&next);
        }
    }
    Ok(x)
}

/// Denoise a single input by entering the reverse chain at `k_start`.
///
/// `x_noisy` must already live in chain coordinates, i.e. be distributed
/// like `q(x_{k_start} | x_0)` — see [`denoise_corrupted`] for the
/// plain-additive-corruption entry point. Consumes the stream
/// `(seed, DENOISE)`: one `d`-draw `z` per noise-consuming timestep from
/// `k_start` downward.
pub fn denoise(
    checkpoint: &Checkpoint,
    x_noisy: &[f64],
    k_start: usize,
    seed: u64,
    variant: SamplerVariant,
) -> Result<Vec<f64>> {
    let (schedule, features, params) = unpack(checkpoint)?;
    let k_steps = schedule.k_steps();
    if k_start == 0 || k_start > k_steps {
        return Err(Error::TimestepOutOfRange { k: k_start, k_steps });
    }
    let d = checkpoint.input_dim();
    if x_noisy.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "denoise input dim {} vs model dim {d}",
            x_noisy.len()
        )));
    }

    let mut stream = rng::stream(seed, &[purpose::DENOISE]);
    let mut x = x_noisy.to_vec();
    let mut z = vec![0.0; d];
    for k in (1..=k_start).rev() {
        let eps_hat = model::predict_noise(&params, &features, &schedule, &x, k)?;
        if variant.consumes_noise(k) {
            rng::fill_standard_normal(&mut stream, &mut z);
        }
        x = reverse_step(&schedule, &x, k, &eps_hat, &z, variant)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "denoise state became non-finite at timestep k = {k}"
            )));
        }
    }
    Ok(x)
}

/// Map an additive-corruption level onto the chain: the timestep whose
/// marginal noise-to-signal ratio `(1 - abar_k)/abar_k` best matches
/// `corruption_sigma^2`, with ties broken toward smaller `k`. The result is
/// always inside `{1, ..., K}`, so extreme sigmas clamp to the ends.
pub fn match_noise_level(corruption_sigma: f64, schedule: &VarianceSchedule) -> Result<usize> {
    if !(corruption_sigma.is_finite() && corruption_sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "corruption sigma must be positive and finite, got {corruption_sigma}"
        )));
    }
    let target = corruption_sigma * corruption_sigma;
    let mut best_k = 1;
    let mut best_diff = f64::INFINITY;
    for (i, &abar) in schedule.alpha_bars().iter().enumerate() {
        let diff = ((1.0 - abar) / abar - target).abs();
        if diff < best_diff {
            best_diff = diff;
            best_k = i + 1;
        }
    }
    Ok(best_k)
}

/// Denoise an input corrupted as `x + corruption_sigma * eps` (plain
/// additive noise, no signal attenuation).
///
/// Picks the entry timestep by [`match_noise_level`], rescales the input by
/// `sqrt(abar_k)` so it matches the forward marginal's signal scaling, and
/// runs [`denoise`] from there. Returns the reconstruction and the entry
/// timestep used.
pub fn denoise_corrupted(
    checkpoint: &Checkpoint,
    x_corrupt: &[f64],
    corruption_sigma: f64,
    seed: u64,
    variant: SamplerVariant,
) -> Result<(Vec<f64>, usize)> {
    let schedule = checkpoint.schedule()?;
    let k_start = match_noise_level(corruption_sigma, &schedule)?;
    let scale = schedule.alpha_bar(k_start)?.sqrt();
    let x_in: Vec<f64> = x_corrupt.iter().map(|&v| scale * v).collect();
    let x0 = denoise(checkpoint, &x_in, k_start, seed, variant)?;
    Ok((x0, k_start))
}
