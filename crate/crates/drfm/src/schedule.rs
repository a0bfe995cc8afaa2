//! The variance schedule and every closed-form quantity of the forward
//! process and reverse posterior.
//!
//! A schedule is the increasing sequence `0 < beta_1 < ... < beta_K < 1`
//! together with its derived tables `alpha_k = 1 - beta_k`,
//! `alpha_bar_k = prod_{i<=k} alpha_i` (with `alpha_bar_0 := 1`), and the
//! reverse-posterior variance
//! `beta_tilde_k = (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k) * beta_k`.
//!
//! Timesteps are 1-indexed in the API (`k` in `1..=K`); tables are stored
//! 0-indexed. All tables are precomputed once at construction and the type is
//! immutable afterwards, so it can be shared freely across threads.

use crate::error::{Error, Result};

/// Precomputed beta/alpha/alpha-bar/posterior-beta tables.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_betas: Vec<f64>,
}

impl VarianceSchedule {
    /// Equally spaced betas from `beta_start` to `beta_end` inclusive.
    ///
    /// `betas[i] = beta_start + i * (beta_end - beta_start) / (steps - 1)`.
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidConfig(format!(
                "linear schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_start.is_finite() && beta_end.is_finite()) {
            return Err(Error::InvalidConfig(
                "schedule endpoints must be finite".into(),
            ));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule endpoints must satisfy 0 < beta_start < beta_end < 1, \
                 got beta_start = {beta_start}, beta_end = {beta_end}"
            )));
        }
        let step = (beta_end - beta_start) / (steps - 1) as f64;
        let betas = (0..steps).map(|i| beta_start + i as f64 * step).collect();
        Self::from_betas(betas)
    }

    /// Build a schedule from an explicit beta table (e.g. from a checkpoint).
    ///
    /// The table must be nonempty, strictly increasing, and inside (0, 1).
    /// A single-step table is allowed — degenerate but well-defined.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("empty beta table".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b.is_finite() && 0.0 < b && b < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "beta[{}] = {b} outside (0, 1)",
                    i + 1
                )));
            }
            if i > 0 && b <= betas[i - 1] {
                return Err(Error::InvalidConfig(format!(
                    "beta table not strictly increasing at k = {}: {} -> {b}",
                    i + 1,
                    betas[i - 1]
                )));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        if !alpha_bars.last().unwrap().is_normal() {
            // Underflow is possible for very long schedules; reject rather
            // than let 1/alpha_bar blow up downstream.
            return Err(Error::InvalidConfig(format!(
                "alpha_bar underflows at K = {}",
                betas.len()
            )));
        }
        // beta_tilde_k = (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k) * beta_k,
        // with alpha_bar_0 = 1 (so beta_tilde_1 = 0 exactly).
        let posterior_betas: Vec<f64> = (0..betas.len())
            .map(|i| {
                let ab_prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - ab_prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Ok(VarianceSchedule {
            betas,
            alphas,
            alpha_bars,
            posterior_betas,
        })
    }

    /// Number of timesteps K.
    pub fn k_steps(&self) -> usize {
        self.betas.len()
    }

    /// Validate `k` in `1..=K` and return its table index.
    #[inline]
    fn idx(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.betas.len() {
            Err(Error::TimestepOutOfRange {
                k,
                k_steps: self.betas.len(),
            })
        } else {
            Ok(k - 1)
        }
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.betas[self.idx(k)?])
    }

    pub fn alpha(&self, k: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(k)?])
    }

    /// `alpha_bar_k`; accepts `k = 0` and returns the defining
    /// `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.idx(k)?])
    }

    /// `beta_tilde_k` from the precomputed table.
    pub fn posterior_variance(&self, k: usize) -> Result<f64> {
        Ok(self.posterior_betas[self.idx(k)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_betas(&self) -> &[f64] {
        &self.posterior_betas
    }

    /// One forward-noising step: `sqrt(1 - beta_k) x_prev + sqrt(beta_k) eps`.
    ///
    /// `eps` is caller-supplied (no hidden RNG).
    pub fn forward_step(&self, x_prev: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let i = self.idx(k)?;
        same_len(x_prev, eps, "forward_step x_prev vs eps")?;
        let ca = (1.0 - self.betas[i]).sqrt();
        let cb = self.betas[i].sqrt();
        Ok(x_prev
            .iter()
            .zip(eps)
            .map(|(&x, &e)| ca * x + cb * e)
            .collect())
    }

    /// Closed-form jump to the marginal:
    /// `sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps`.
    pub fn forward_jump(&self, x0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let i = self.idx(k)?;
        same_len(x0, eps, "forward_jump x0 vs eps")?;
        let ca = self.alpha_bars[i].sqrt();
        let cb = (1.0 - self.alpha_bars[i]).sqrt();
        Ok(x0.iter().zip(eps).map(|(&x, &e)| ca * x + cb * e).collect())
    }

    /// Reverse-posterior mean conditioned on `x0`:
    /// `mu_tilde_k = sqrt(alpha_k)(1 - alpha_bar_{k-1})/(1 - alpha_bar_k) x_k
    ///             + sqrt(alpha_bar_{k-1}) beta_k/(1 - alpha_bar_k) x0`.
    pub fn posterior_mean(&self, x_k: &[f64], x0: &[f64], k: usize) -> Result<Vec<f64>> {
        let i = self.idx(k)?;
        same_len(x_k, x0, "posterior_mean x_k vs x0")?;
        let ab_prev = if i == 0 { 1.0 } else { self.alpha_bars[i - 1] };
        let denom = 1.0 - self.alpha_bars[i];
        let c_xk = self.alphas[i].sqrt() * (1.0 - ab_prev) / denom;
        let c_x0 = ab_prev.sqrt() * self.betas[i] / denom;
        Ok(x_k
            .iter()
            .zip(x0)
            .map(|(&xk, &x0)| c_xk * xk + c_x0 * x0)
            .collect())
    }

    /// Reverse mean in noise parameterization:
    /// `(1/sqrt(alpha_k)) (x_k - beta_k/sqrt(1 - alpha_bar_k) eps)`.
    pub fn posterior_mean_from_eps(&self, x_k: &[f64], eps: &[f64], k: usize) -> Result<Vec<f64>> {
        let i = self.idx(k)?;
        same_len(x_k, eps, "posterior_mean_from_eps x_k vs eps")?;
        let inv_sqrt_a = 1.0 / self.alphas[i].sqrt();
        let c_eps = self.betas[i] / (1.0 - self.alpha_bars[i]).sqrt();
        Ok(x_k
            .iter()
            .zip(eps)
            .map(|(&xk, &e)| inv_sqrt_a * (xk - c_eps * e))
            .collect())
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}
