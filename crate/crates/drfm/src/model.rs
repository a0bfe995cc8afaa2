//! The DRFM noise predictor.
//!
//! The predictor is a semi-random feature expansion
//!
//! ```text
//! p(x, k) = ( sin(x' W + b') ⊙ cos(tau_k' theta1) ) theta2
//! ```
//!
//! with fixed random frequencies `W` (columns `omega_j`) and phases `b`, a
//! trainable time-weight matrix `theta1` (row `k` active at timestep `k`),
//! and a trainable readout `theta2`. For a fixed `k` it collapses to a plain
//! random feature model with coefficients `c_ij = cos(theta1[k,i]) theta2[i,j]`,
//! which is what makes the class analyzable — and testable against itself.
//!
//! Internally `W` is stored feature-major (`N x d`, row `j` = `omega_j`) so
//! the per-feature dot products are contiguous; the conceptual orientation in
//! the formulas (and the checkpoint layout) is `d x N`.

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::mat::Mat;
use crate::rng;
use crate::schedule::VarianceSchedule;

/// Sampling law for the random features: `W` entries i.i.d.
/// `Normal(0, gaussian_sigma^2)`, phases i.i.d. `Uniform[0, phase_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoSpec {
    pub gaussian_sigma: f64,
    pub phase_max: f64,
}

impl RhoSpec {
    /// Standard phases over a full period.
    pub fn new(gaussian_sigma: f64) -> Self {
        RhoSpec {
            gaussian_sigma,
            phase_max: std::f64::consts::TAU,
        }
    }

    /// Default frequency scale `sigma = 1/sqrt(d)`: keeps `omega_j . x` at
    /// O(1) for inputs normalized to [-1, 1]^d.
    pub fn default_for_dim(d: usize) -> Self {
        RhoSpec::new(1.0 / (d as f64).sqrt())
    }
}

/// Fixed random projection `W` and phases `b` (mutated only in NN mode).
#[derive(Clone, Debug, PartialEq)]
pub struct RandomFeatures {
    /// `N x d`, row `j` is `omega_j`.
    weights: Mat,
    /// Phase per feature, length `N`.
    phases: Vec<f64>,
    /// The law the features were drawn from. `None` when the features came
    /// from a checkpoint (the file stores the matrices, not the law).
    pub rho_spec: Option<RhoSpec>,
    /// Seed the features were drawn with (or the checkpoint's root seed).
    pub seed: u64,
}

impl RandomFeatures {
    /// Draw fresh features: `W[j,i] ~ Normal(0, sigma^2)`,
    /// `b[j] ~ Uniform[0, phase_max)`; bit-deterministic in `seed`.
    pub fn init(d: usize, n_features: usize, rho_spec: RhoSpec, seed: u64) -> Result<Self> {
        if d == 0 || n_features == 0 {
            return Err(Error::InvalidConfig(format!(
                "feature init needs d >= 1 and N >= 1, got d = {d}, N = {n_features}"
            )));
        }
        if !(rho_spec.gaussian_sigma > 0.0) || !rho_spec.gaussian_sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "rho gaussian_sigma must be positive and finite, got {}",
                rho_spec.gaussian_sigma
            )));
        }
        if !(rho_spec.phase_max > 0.0) || !rho_spec.phase_max.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "rho phase_max must be positive and finite, got {}",
                rho_spec.phase_max
            )));
        }
        let mut weights = Mat::zeros(n_features, d);
        let mut w_rng = rng::stream(seed, &[rng::purpose::FEATURES, 0]);
        rng::fill_standard_normal(&mut w_rng, weights.as_mut_slice());
        for w in weights.as_mut_slice() {
            *w *= rho_spec.gaussian_sigma;
        }
        let mut b_rng = rng::stream(seed, &[rng::purpose::FEATURES, 1]);
        let phases = (0..n_features)
            .map(|_| rand::Rng::gen::<f64>(&mut b_rng) * rho_spec.phase_max)
            .collect();
        Ok(RandomFeatures {
            weights,
            phases,
            rho_spec: Some(rho_spec),
            seed,
        })
    }

    /// Wrap explicit matrices (checkpoint load, tests, Lemma constructions).
    pub fn from_parts(weights: Mat, phases: Vec<f64>, seed: u64) -> Result<Self> {
        if weights.rows() != phases.len() {
            return Err(Error::DimensionMismatch(format!(
                "weights rows {} vs phases {}",
                weights.rows(),
                phases.len()
            )));
        }
        if !weights.is_finite() || !phases.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("random features".into()));
        }
        Ok(RandomFeatures {
            weights,
            phases,
            rho_spec: None,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn n_features(&self) -> usize {
        self.weights.rows()
    }

    /// Feature-major weights (`N x d`; row `j` = `omega_j`).
    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// Frequency vector of feature `j`.
    pub fn omega(&self, j: usize) -> &[f64] {
        self.weights.row(j)
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Mat {
        &mut self.weights
    }

    pub(crate) fn phases_mut(&mut self) -> &mut [f64] {
        &mut self.phases
    }
}

/// Trainable tensors: time weights `theta1` (K x N) and readout `theta2`
/// (N x d).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableParams {
    pub theta1: Mat,
    pub theta2: Mat,
}

impl TrainableParams {
    /// Mode-appropriate initialization: `theta2 = 0` (zero predictor, finite
    /// initial loss), `theta1 ~ Uniform[0, 2pi)` — except RF mode, which
    /// freezes `theta1` at exactly 0 so the model is the classical
    /// sin-feature RF expansion.
    pub fn init(mode: ModelMode, k_steps: usize, n_features: usize, d: usize, seed: u64) -> Self {
        let mut theta1 = Mat::zeros(k_steps, n_features);
        if mode != ModelMode::Rf {
            let mut rng = rng::stream(seed, &[rng::purpose::PARAMS, 0]);
            for v in theta1.as_mut_slice() {
                *v = rand::Rng::gen::<f64>(&mut rng) * std::f64::consts::TAU;
            }
        }
        TrainableParams {
            theta1,
            theta2: Mat::zeros(n_features, d),
        }
    }

    pub fn from_parts(theta1: Mat, theta2: Mat) -> Result<Self> {
        if theta1.cols() != theta2.rows() {
            return Err(Error::DimensionMismatch(format!(
                "theta1 cols {} vs theta2 rows {}",
                theta1.cols(),
                theta2.rows()
            )));
        }
        if !theta1.is_finite() || !theta2.is_finite() {
            return Err(Error::NonFinite("trainable parameters".into()));
        }
        Ok(TrainableParams { theta1, theta2 })
    }

    pub fn k_steps(&self) -> usize {
        self.theta1.rows()
    }

    pub fn n_features(&self) -> usize {
        self.theta1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.theta2.cols()
    }
}

/// Which tensors train: DRFM (theta1, theta2), NN (W, b, theta1, theta2),
/// RF (theta2 only; theta1 frozen at zero).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Drfm,
    Nn,
    Rf,
}

impl ModelMode {
    pub fn code(self) -> u8 {
        match self {
            ModelMode::Drfm => 0,
            ModelMode::Nn => 1,
            ModelMode::Rf => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ModelMode::Drfm),
            1 => Ok(ModelMode::Nn),
            2 => Ok(ModelMode::Rf),
            other => Err(Error::InvalidConfig(format!("unknown mode code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Drfm => "drfm",
            ModelMode::Nn => "nn",
            ModelMode::Rf => "rf",
        }
    }
}

impl std::str::FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drfm" => Ok(ModelMode::Drfm),
            "nn" => Ok(ModelMode::Nn),
            "rf" => Ok(ModelMode::Rf),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode '{other}' (expected drfm, nn, or rf)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Validate that params/features/schedule agree on (K, N, d).
pub(crate) fn check_shapes(
    params: &TrainableParams,
    features: &RandomFeatures,
    schedule: &VarianceSchedule,
) -> Result<()> {
    if params.n_features() != features.n_features() {
        return Err(Error::DimensionMismatch(format!(
            "theta1 cols {} vs N = {} features",
            params.n_features(),
            features.n_features()
        )));
    }
    if params.output_dim() != features.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "theta2 cols {} vs d = {} feature input dim",
            params.output_dim(),
            features.input_dim()
        )));
    }
    if params.k_steps() != schedule.k_steps() {
        return Err(Error::DimensionMismatch(format!(
            "theta1 rows {} vs K = {} schedule steps",
            params.k_steps(),
            schedule.k_steps()
        )));
    }
    Ok(())
}

/// Evaluate the predictor at one point:
/// `out = sum_j sin(omega_j . x + b_j) cos(theta1[k,j]) theta2[j,:]`.
pub fn predict_noise(
    params: &TrainableParams,
    features: &RandomFeatures,
    schedule: &VarianceSchedule,
    x_k: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    check_shapes(params, features, schedule)?;
    if k == 0 || k > schedule.k_steps() {
        return Err(Error::TimestepOutOfRange {
            k,
            k_steps: schedule.k_steps(),
        });
    }
    if x_k.len() != features.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "x_k len {} vs d = {}",
            x_k.len(),
            features.input_dim()
        )));
    }
    let d = x_k.len();
    let time_row = params.theta1.row(k - 1);
    let mut out = vec![0.0; d];
    for j in 0..features.n_features() {
        let pre = dot(features.omega(j), x_k) + features.phases[j];
        let h = pre.sin() * time_row[j].cos();
        if h != 0.0 {
            axpy(&mut out, h, params.theta2.row(j));
        }
    }
    Ok(out)
}

/// Intermediates of the batched forward pass, shared by training (which
/// needs them for the analytic gradients) and by sampling (which only wants
/// `out`).
pub(crate) struct ForwardBatch {
    /// `sin(omega_j . x_i + b_j)`, `B x N`.
    pub act: Mat,
    /// `cos(omega_j . x_i + b_j)`, `B x N`; only when requested (W/b grads).
    pub cospre: Option<Mat>,
    /// `act` scaled per-row by `cos(theta1[k_i,:])`, `B x N`.
    pub ht: Mat,
    /// Predictions `ht * theta2`, `B x d`.
    pub out: Mat,
    /// `cos(theta1[k-1,:])` for each timestep present in `ks`.
    pub cosrows: Vec<Option<Vec<f64>>>,
    /// `sin(theta1[k-1,:])` rows; only when requested (theta1 grads).
    pub sinrows: Vec<Option<Vec<f64>>>,
}

/// Evaluate the predictor on a whole batch at once via the tiled kernels.
///
/// `wt` must be `features.weights().transposed()` (passed in so training
/// loops with frozen `W` can transpose once instead of per call). Bit-for-bit
/// identical to calling [`predict_noise`] row by row: the kernels accumulate
/// each output element in the same fused-multiply-add order. Inputs are
/// assumed validated by the caller.
pub(crate) fn forward_batch(
    params: &TrainableParams,
    features: &RandomFeatures,
    wt: &Mat,
    x_batch: &Mat,
    ks: &[usize],
    want_cospre: bool,
    want_sin: bool,
) -> ForwardBatch {
    let bsz = x_batch.rows();
    let n = features.n_features();
    let kk = params.k_steps();
    debug_assert_eq!(ks.len(), bsz);
    debug_assert_eq!(x_batch.cols(), features.input_dim());
    debug_assert_eq!((wt.rows(), wt.cols()), (features.input_dim(), n));

    // Pre-activations, then fused phase shift + sin (+ cos for W/b grads).
    let mut act = Mat::zeros(bsz, n);
    linalg::matmul_into(&mut act, x_batch, wt);
    let phases = features.phases();
    let mut cospre = want_cospre.then(|| Mat::zeros(bsz, n));
    match &mut cospre {
        Some(cp) => {
            exec::for_each_row_pair(act.as_mut_slice(), n, cp.as_mut_slice(), n, |_i, ar, cr| {
                for j in 0..n {
                    let pre = ar[j] + phases[j];
                    ar[j] = pre.sin();
                    cr[j] = pre.cos();
                }
            });
        }
        None => {
            exec::for_each_row(act.as_mut_slice(), n, |_i, ar| {
                for (a, &b) in ar.iter_mut().zip(phases) {
                    *a = (*a + b).sin();
                }
            });
        }
    }

    // Time rows cos(theta1[k-1,:]) for the timesteps actually present.
    let mut cosrows: Vec<Option<Vec<f64>>> = vec![None; kk];
    let mut sinrows: Vec<Option<Vec<f64>>> = vec![None; kk];
    for &k in ks {
        if cosrows[k - 1].is_none() {
            let row = params.theta1.row(k - 1);
            cosrows[k - 1] = Some(row.iter().map(|t| t.cos()).collect());
            if want_sin {
                sinrows[k - 1] = Some(row.iter().map(|t| t.sin()).collect());
            }
        }
    }

    // h_i = act_i ⊙ cosrow(k_i), then out = ht * theta2.
    let mut ht = Mat::zeros(bsz, n);
    {
        let act_ref = &act;
        let cos_ref = &cosrows;
        exec::for_each_row(ht.as_mut_slice(), n, |i, hrow| {
            let arow = act_ref.row(i);
            let crow = cos_ref[ks[i] - 1].as_ref().expect("filled above");
            for j in 0..n {
                hrow[j] = arow[j] * crow[j];
            }
        });
    }
    let mut out = Mat::zeros(bsz, x_batch.cols());
    linalg::matmul_into(&mut out, &ht, &params.theta2);

    ForwardBatch {
        act,
        cospre,
        ht,
        out,
        cosrows,
        sinrows,
    }
}

/// Batched [`predict_noise`]: row `i` of the result is the prediction for
/// `x_batch` row `i` at timestep `ks[i]` (bit-identical to the pointwise op).
pub fn predict_noise_batch(
    params: &TrainableParams,
    features: &RandomFeatures,
    schedule: &VarianceSchedule,
    x_batch: &Mat,
    ks: &[usize],
) -> Result<Mat> {
    check_shapes(params, features, schedule)?;
    if x_batch.rows() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if x_batch.cols() != features.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch dim {} vs d = {}",
            x_batch.cols(),
            features.input_dim()
        )));
    }
    if ks.len() != x_batch.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} timesteps vs {} batch rows",
            ks.len(),
            x_batch.rows()
        )));
    }
    for &k in ks {
        if k == 0 || k > schedule.k_steps() {
            return Err(Error::TimestepOutOfRange {
                k,
                k_steps: schedule.k_steps(),
            });
        }
    }
    let wt = features.weights().transposed();
    Ok(forward_batch(params, features, &wt, x_batch, ks, false, false).out)
}

/// Per-timestep RF reduction: `C[i,j] = cos(theta1[k,i]) theta2[i,j]`, so
/// that `predict_noise(x, k) = sum_i sin(omega_i . x + b_i) C[i,:]`.
pub fn rf_coefficients(params: &TrainableParams, k: usize) -> Result<Mat> {
    if k == 0 || k > params.k_steps() {
        return Err(Error::TimestepOutOfRange {
            k,
            k_steps: params.k_steps(),
        });
    }
    let n = params.n_features();
    let d = params.output_dim();
    let time_row = params.theta1.row(k - 1);
    let mut c = Mat::zeros(n, d);
    for i in 0..n {
        let ci = time_row[i].cos();
        let row = c.row_mut(i);
        for (out, &t2) in row.iter_mut().zip(params.theta2.row(i)) {
            *out = ci * t2;
        }
    }
    Ok(c)
}

/// Score relation `s(x_k, k) = -eps_hat / sqrt(1 - alpha_bar_k)`.
pub fn score_from_eps(eps_hat: &[f64], k: usize, schedule: &VarianceSchedule) -> Result<Vec<f64>> {
    let ab = schedule.alpha_bar(k)?;
    if k == 0 {
        return Err(Error::TimestepOutOfRange {
            k,
            k_steps: schedule.k_steps(),
        });
    }
    let scale = -1.0 / (1.0 - ab).sqrt();
    Ok(eps_hat.iter().map(|&e| scale * e).collect())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Fused multiply-add, ascending index: the batched kernels in `linalg`
    // reproduce exactly this per-element accumulation order, which is what
    // makes the batched forward bit-identical to `predict_noise`.
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        acc = x.mul_add(y, acc);
    }
    acc
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = a.mul_add(xi, *o);
    }
}
