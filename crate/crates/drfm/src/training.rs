//! Loss, hand-derived analytic gradients, Adam, and the epoch loop.
//!
//! The objective is the denoising loss
//!
//! ```text
//! L = (1/B) sum_i w(k_i) || eps_i - p(x_{k_i}, k_i) ||^2,
//! x_{k_i} = sqrt(abar_{k_i}) x0_i + sqrt(1 - abar_{k_i}) eps_i,
//! ```
//!
//! with `w = 1` by default or the DDPM weight `1/(2 alpha_k (1 - abar_k))`.
//! Gradients come from the chain rule through the forward expression, with
//! `a = sin(W'x + b)`, `c = cos(theta1[k,:])`, `h = a ⊙ c`, and
//! `r_i = (2 w_i / B)(out_i - eps_i)`:
//!
//! ```text
//! dL/dtheta2[j,:]  = sum_i h_ji r_i
//! dL/dtheta1[k,j]  = sum_{i: k_i = k} -sin(theta1[k,j]) a_ji (theta2[j,:] . r_i)
//! dL/db[j]         = sum_i cos(pre_ji) c_ji (theta2[j,:] . r_i)      (NN mode)
//! dL/dW[:,j]       = sum_i cos(pre_ji) c_ji (theta2[j,:] . r_i) x_i  (NN mode)
//! ```
//!
//! Every gradient coordinate belongs to exactly one feature `j`, so the
//! backward pass parallelizes over features with disjoint output slices and
//! a fixed `i`-ascending accumulation order — parallel and sequential runs
//! are bit-identical, which the tests assert.

use std::path::Path;

use rand::Rng;

use crate::data_io::{Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::mat::Mat;
use crate::model::{
    self, check_shapes, ModelMode, RandomFeatures, RhoSpec, TrainableParams,
};
use crate::rng::{self, purpose};
use crate::schedule::VarianceSchedule;

/// Which per-example weight multiplies the squared error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossWeighting {
    /// Algorithm-style plain mean of squared errors.
    #[default]
    Unweighted,
    /// Variational weight `1/(2 alpha_k (1 - abar_k))` (equals the DSM form).
    DdpmWeighted,
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unweighted" => Ok(LossWeighting::Unweighted),
            "ddpm" => Ok(LossWeighting::DdpmWeighted),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss weighting '{other}' (expected unweighted or ddpm)"
            ))),
        }
    }
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossWeighting::Unweighted => "unweighted",
            LossWeighting::DdpmWeighted => "ddpm",
        })
    }
}

/// Everything the epoch loop needs to know.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: ModelMode,
    pub n_features: usize,
    pub epochs: usize,
    /// `None` = full batch (the datasets here are small).
    pub batch: Option<usize>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub loss_weighting: LossWeighting,
    pub seed: u64,
    /// Keep an interim checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(mode: ModelMode, n_features: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            mode,
            n_features,
            epochs,
            batch: None,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            loss_weighting: LossWeighting::Unweighted,
            seed,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::InvalidConfig("n_features must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch == Some(0) {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0 && self.adam_epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "adam_epsilon {} must be positive and finite",
                self.adam_epsilon
            )));
        }
        Ok(())
    }
}

/// Gradients for one batch; frozen tensors are zero/absent.
#[derive(Clone, Debug)]
pub struct GradientSet {
    /// `K x N`; all zeros in RF mode.
    pub g_theta1: Mat,
    /// `N x d`; trained in every mode.
    pub g_theta2: Mat,
    /// Feature-major `N x d` like `RandomFeatures::weights`; NN mode only.
    pub g_weights: Option<Mat>,
    /// `N`; NN mode only.
    pub g_phases: Option<Vec<f64>>,
}

/// Adam first/second moments for one tensor.
#[derive(Clone, Debug)]
struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamMoments {
    fn new(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Moments for every trainable tensor plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    step: u64,
    theta1: Option<AdamMoments>,
    theta2: AdamMoments,
    weights: Option<AdamMoments>,
    phases: Option<AdamMoments>,
}

impl OptimizerState {
    pub fn new(mode: ModelMode, k_steps: usize, n_features: usize, d: usize) -> Self {
        let trains_theta1 = matches!(mode, ModelMode::Drfm | ModelMode::Nn);
        OptimizerState {
            step: 0,
            theta1: trains_theta1.then(|| AdamMoments::new(k_steps * n_features)),
            theta2: AdamMoments::new(n_features * d),
            weights: (mode == ModelMode::Nn).then(|| AdamMoments::new(n_features * d)),
            phases: (mode == ModelMode::Nn).then(|| AdamMoments::new(n_features)),
        }
    }

    /// Completed update count (strictly increasing).
    pub fn step(&self) -> u64 {
        self.step
    }
}

fn loss_weight(weighting: LossWeighting, schedule: &VarianceSchedule, k: usize) -> f64 {
    match weighting {
        LossWeighting::Unweighted => 1.0,
        LossWeighting::DdpmWeighted => {
            let alpha = schedule.alphas()[k - 1];
            let abar = schedule.alpha_bars()[k - 1];
            1.0 / (2.0 * alpha * (1.0 - abar))
        }
    }
}

/// One pass over a batch: loss and (optionally) gradients.
struct BatchEval {
    loss: f64,
    grads: Option<GradientSet>,
}

fn validate_batch(
    params: &TrainableParams,
    features: &RandomFeatures,
    schedule: &VarianceSchedule,
    x0_batch: &Mat,
    ks: &[usize],
    eps_batch: &Mat,
) -> Result<()> {
    check_shapes(params, features, schedule)?;
    if x0_batch.rows() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if x0_batch.cols() != features.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "x0 batch dim {} vs d = {}",
            x0_batch.cols(),
            features.input_dim()
        )));
    }
    if eps_batch.rows() != x0_batch.rows() || eps_batch.cols() != x0_batch.cols() {
        return Err(Error::DimensionMismatch(format!(
            "eps batch {}x{} vs x0 batch {}x{}",
            eps_batch.rows(),
            eps_batch.cols(),
            x0_batch.rows(),
            x0_batch.cols()
        )));
    }
    if ks.len() != x0_batch.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} timesteps vs {} batch rows",
            ks.len(),
            x0_batch.rows()
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
    Ok(())
}

fn batch_pass(
    params: &TrainableParams,
    features: &RandomFeatures,
    schedule: &VarianceSchedule,
    wt: &Mat,
    x0_batch: &Mat,
    ks: &[usize],
    eps_batch: &Mat,
    weighting: LossWeighting,
    grad_mode: Option<ModelMode>,
) -> Result<BatchEval> {
    validate_batch(params, features, schedule, x0_batch, ks, eps_batch)?;
    let (bsz, d) = (x0_batch.rows(), x0_batch.cols());
    let n = features.n_features();
    let kk = schedule.k_steps();

    // Noise the batch: x_k per row via the closed-form jump.
    let mut xk = Mat::zeros(bsz, d);
    exec::for_each_row(xk.as_mut_slice(), d, |i, row| {
        let jumped = schedule
            .forward_jump(x0_batch.row(i), ks[i], eps_batch.row(i))
            .expect("batch inputs validated");
        row.copy_from_slice(&jumped);
    });

    let want_cospre = grad_mode == Some(ModelMode::Nn);
    let want_sin = matches!(grad_mode, Some(ModelMode::Drfm | ModelMode::Nn));
    let fwd = model::forward_batch(params, features, wt, &xk, ks, want_cospre, want_sin);

    // Loss and, when training, the residual r_i = (2 w_i / B)(out_i - eps_i).
    let mut loss_sum = 0.0;
    let mut resid = grad_mode.map(|_| Mat::zeros(bsz, d));
    for i in 0..bsz {
        let w = loss_weight(weighting, schedule, ks[i]);
        let orow = fwd.out.row(i);
        let erow = eps_batch.row(i);
        let mut sq = 0.0;
        for m in 0..d {
            let e = orow[m] - erow[m];
            sq = e.mul_add(e, sq);
        }
        loss_sum += w * sq;
        if let Some(r) = &mut resid {
            let scale = 2.0 * w / bsz as f64;
            let rrow = r.row_mut(i);
            for m in 0..d {
                rrow[m] = scale * (orow[m] - erow[m]);
            }
        }
    }
    let loss = loss_sum / bsz as f64;

    let grads = match grad_mode {
        None => None,
        Some(mode) => {
            let resid = resid.expect("allocated with grad_mode");

            // dL/dtheta2 = h r' as the matmul (N x B)(B x d).
            let h = fwd.ht.transposed();
            let mut g_theta2 = Mat::zeros(n, d);
            linalg::matmul_into(&mut g_theta2, &h, &resid);

            let mut g_theta1 = Mat::zeros(kk, n);
            let mut g_weights = None;
            let mut g_phases = None;
            if mode != ModelMode::Rf {
                // s[j,i] = theta2[j,:] . r_i as the matmul (N x d)(d x B).
                let rt = resid.transposed();
                let mut s = Mat::zeros(n, bsz);
                linalg::matmul_into(&mut s, &params.theta2, &rt);
                let act_nb = fwd.act.transposed();

                // Feature-major theta1 gradient, transposed once at the end.
                let mut g1t = Mat::zeros(n, kk);
                let sinrows = &fwd.sinrows;
                exec::for_each_row(g1t.as_mut_slice(), kk, |j, grow| {
                    let arow = act_nb.row(j);
                    let srow = s.row(j);
                    for i in 0..bsz {
                        let k = ks[i] - 1;
                        let sin_kj = sinrows[k].as_ref().expect("filled in forward")[j];
                        grow[k] += -sin_kj * arow[i] * srow[i];
                    }
                });
                g_theta1 = g1t.transposed();

                if mode == ModelMode::Nn {
                    let cospre = fwd.cospre.as_ref().expect("requested for NN");
                    let cosrows = &fwd.cosrows;
                    let mut gw = Mat::zeros(n, d);
                    let mut gb = vec![0.0; n];
                    let xk_ref = &xk;
                    exec::for_each_row_pair(
                        gw.as_mut_slice(),
                        d,
                        &mut gb,
                        1,
                        |j, gwrow, gbj| {
                            let srow = s.row(j);
                            let mut acc = 0.0;
                            for i in 0..bsz {
                                let c = cosrows[ks[i] - 1].as_ref().expect("filled")[j];
                                let t = cospre.at(i, j) * c * srow[i];
                                acc += t;
                                model::axpy(gwrow, t, xk_ref.row(i));
                            }
                            gbj[0] = acc;
                        },
                    );
                    g_weights = Some(gw);
                    g_phases = Some(gb);
                }
            }
            Some(GradientSet {
                g_theta1,
                g_theta2,
                g_weights,
                g_phases,
            })
        }
    };

    Ok(BatchEval { loss, grads })
}

/// Batch loss of Algorithm-style training: mean over the batch of
/// `w(k_i) ||eps_i - p(x_{k_i}, k_i)||^2` with `x_k` formed internally.
pub fn loss_batch(
    params: &TrainableParams,
    features: &RandomFeatures,
    schedule: &VarianceSchedule,
    x0_batch: &Mat,
    ks: &[usize],
    eps_batch: &Mat,
    weighting: LossWeighting,
) -> Result<f64> {
    let wt = features.weights().transposed();
    Ok(batch_pass(
        params, features, schedule, &wt, x0_batch, ks, eps_batch, weighting, None,
    )?
    .loss)
}

/// Analytic gradients of [`loss_batch`] for the tensors `mode` trains.
pub fn backward(
    params: &TrainableParams,
    features: &RandomFeatures,
    schedule: &VarianceSchedule,
    x0_batch: &Mat,
    ks: &[usize],
    eps_batch: &Mat,
    weighting: LossWeighting,
    mode: ModelMode,
) -> Result<GradientSet> {
    let wt = features.weights().transposed();
    Ok(batch_pass(
        params,
        features,
        schedule,
        &wt,
        x0_batch,
        ks,
        eps_batch,
        weighting,
        Some(mode),
    )?
    .grads
    .expect("grads requested"))
}

/// Elementwise Adam with bias correction; `c1/c2 = 1 - beta^t`.
fn adam_update(
    p: &mut [f64],
    g: &[f64],
    mo: &mut AdamMoments,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * (g * g);
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

fn ensure_finite(name: &str, g: &[f64], step: u64) -> Result<()> {
    for (i, v) in g.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient {name}[{i}] = {v} at optimizer step {step}"
            )));
        }
    }
    Ok(())
}

/// One Adam update over the tensors `config.mode` trains; frozen tensors are
/// untouched bit-for-bit.
pub fn adam_step(
    params: &mut TrainableParams,
    features: &mut RandomFeatures,
    grads: &GradientSet,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let (kk, n, d) = (params.k_steps(), params.n_features(), params.output_dim());
    if grads.g_theta1.rows() != kk
        || grads.g_theta1.cols() != n
        || grads.g_theta2.rows() != n
        || grads.g_theta2.cols() != d
    {
        return Err(Error::DimensionMismatch(
            "gradient shapes do not match parameters".into(),
        ));
    }
    let nn = config.mode == ModelMode::Nn;
    if nn != grads.g_weights.is_some() || nn != grads.g_phases.is_some() {
        return Err(Error::InvalidConfig(format!(
            "gradient set does not match mode {}",
            config.mode
        )));
    }

    let step = state.step + 1;
    ensure_finite("theta2", grads.g_theta2.as_slice(), step)?;
    if state.theta1.is_some() {
        ensure_finite("theta1", grads.g_theta1.as_slice(), step)?;
    }
    if let Some(gw) = &grads.g_weights {
        ensure_finite("W", gw.as_slice(), step)?;
    }
    if let Some(gb) = &grads.g_phases {
        ensure_finite("b", gb, step)?;
    }

    let (lr, b1, b2, eps) = (
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
    );
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);

    adam_update(
        params.theta2.as_mut_slice(),
        grads.g_theta2.as_slice(),
        &mut state.theta2,
        lr,
        b1,
        b2,
        eps,
        c1,
        c2,
    );
    if let Some(mo) = &mut state.theta1 {
        adam_update(
            params.theta1.as_mut_slice(),
            grads.g_theta1.as_slice(),
            mo,
            lr,
            b1,
            b2,
            eps,
            c1,
            c2,
        );
    }
    if let (Some(mo), Some(gw)) = (&mut state.weights, &grads.g_weights) {
        adam_update(
            features.weights_mut().as_mut_slice(),
            gw.as_slice(),
            mo,
            lr,
            b1,
            b2,
            eps,
            c1,
            c2,
        );
    }
    if let (Some(mo), Some(gb)) = (&mut state.phases, &grads.g_phases) {
        adam_update(features.phases_mut(), gb, mo, lr, b1, b2, eps, c1, c2);
    }
    state.step = step;
    Ok(())
}

/// A finished training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// One loss value per epoch, in order.
    pub loss_trace: Vec<f64>,
    /// Interim checkpoints at `checkpoint_every` boundaries (epoch, state).
    pub snapshots: Vec<(u64, Checkpoint)>,
}

/// Run Algorithm-style training: per epoch, draw an independent timestep and
/// fresh noise for every batch example, form `x_k` by the closed-form jump,
/// take one Adam step. Fully deterministic given `config.seed`; the batch,
/// timestep, and noise streams are derived per epoch by counter-based
/// splitting, so parallel and sequential execution consume identical draws.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    schedule: &VarianceSchedule,
    rho_spec: RhoSpec,
) -> Result<TrainRun> {
    train_matrix(&dataset.examples, config, schedule, rho_spec)
}

/// [`train`] on a bare example matrix, one row per example.
///
/// This is the entry point for synthetic data that does not satisfy the
/// `[-1, 1]` range contract of [`Dataset`] (e.g. verification experiments
/// on unbounded Gaussians); entries must still be finite.
pub fn train_matrix(
    examples: &Mat,
    config: &TrainConfig,
    schedule: &VarianceSchedule,
    rho_spec: RhoSpec,
) -> Result<TrainRun> {
    config.validate()?;
    if examples.rows() == 0 {
        return Err(Error::InvalidConfig("training data is empty".into()));
    }
    if !examples.as_slice().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("training data contains a non-finite entry".into()));
    }
    let d = examples.cols();
    let n_ex = examples.rows();
    let kk = schedule.k_steps();

    let mut features = RandomFeatures::init(d, config.n_features, rho_spec, config.seed)?;
    let mut params = TrainableParams::init(config.mode, kk, config.n_features, d, config.seed);
    let mut opt = OptimizerState::new(config.mode, kk, config.n_features, d);
    // W is frozen outside NN mode: transpose once for the whole run.
    let fixed_wt = (config.mode != ModelMode::Nn).then(|| features.weights().transposed());

    let mut trace = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::new();
    for epoch in 1..=config.epochs as u64 {
        let idx: Vec<usize> = match config.batch {
            None => (0..n_ex).collect(),
            Some(b) => {
                // I.i.d. draws from the empirical distribution (with
                // replacement), matching the expectation the loss estimates.
                let mut r = rng::stream(config.seed, &[purpose::BATCH, epoch]);
                (0..b).map(|_| r.gen_range(0..n_ex as u32) as usize).collect()
            }
        };
        let bsz = idx.len();

        let mut tr = rng::stream(config.seed, &[purpose::TIMESTEPS, epoch]);
        let ks: Vec<usize> = (0..bsz)
            .map(|_| tr.gen_range(1..=kk as u32) as usize)
            .collect();

        let mut nr = rng::stream(config.seed, &[purpose::NOISE, epoch]);
        let mut eps = Mat::zeros(bsz, d);
        rng::fill_standard_normal(&mut nr, eps.as_mut_slice());

        let mut x0 = Mat::zeros(bsz, d);
        for (row, &i) in idx.iter().enumerate() {
            x0.row_mut(row).copy_from_slice(examples.row(i));
        }

        let wt_epoch;
        let wt = match &fixed_wt {
            Some(w) => w,
            None => {
                wt_epoch = features.weights().transposed();
                &wt_epoch
            }
        };
        let ev = batch_pass(
            &params,
            &features,
            schedule,
            wt,
            &x0,
            &ks,
            &eps,
            config.loss_weighting,
            Some(config.mode),
        )?;
        if !ev.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss became {} at epoch {epoch}",
                ev.loss
            )));
        }
        adam_step(
            &mut params,
            &mut features,
            ev.grads.as_ref().expect("grads requested"),
            &mut opt,
            config,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {epoch})")),
            other => other,
        })?;
        trace.push(ev.loss);

        if config.checkpoint_every > 0
            && epoch as usize % config.checkpoint_every == 0
            && (epoch as usize) < config.epochs
        {
            snapshots.push((
                epoch,
                Checkpoint::from_state(config.mode, schedule, &features, &params, config.seed, epoch),
            ));
        }
    }

    let checkpoint = Checkpoint::from_state(
        config.mode,
        schedule,
        &features,
        &params,
        config.seed,
        config.epochs as u64,
    );
    Ok(TrainRun {
        checkpoint,
        loss_trace: trace,
        snapshots,
    })
}

/// Write a loss trace as `<epoch><TAB><loss>` lines (epochs 1-based); the
/// loss is printed shortest-round-trip so parsing it back is exact.
pub fn write_loss_trace(trace: &[f64], path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::with_capacity(trace.len() * 24);
    for (i, loss) in trace.iter().enumerate() {
        writeln!(&mut text, "{}\t{}", i + 1, loss).expect("string write");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
