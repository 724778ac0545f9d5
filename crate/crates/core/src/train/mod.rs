//! Optimisers and training loops.
//!
//! Three update rules share one loop:
//!
//! * `at`: attack the batch at θ, take one momentum-SGD step on the robust loss.
//! * `edac`: first a plain gradient step of size η on the adversarial
//!   certainty (inputs attacked at θ, then frozen) giving θ½, then attack
//!   the batch again at θ½ and take the momentum-SGD robust step from θ½.
//!   The η-step never touches the momentum buffer.
//! * `edac_reg`: one momentum-SGD step on `robust_loss + λ·certainty`, both
//!   terms evaluated on a single attack generated at θ.
//!
//! In `edac` the certainty attack draws its random start from a clone of the
//! training RNG, so the main stream advances exactly as in `at` and η = 0
//! reproduces `at` bit for bit.

mod checkpoint;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{generate_batch, AdversarialBatch, AttackConfig};
use crate::data::{batches, Batch, Dataset};
use crate::diagnostics::{evaluate_split, MetricsRecord};
use crate::error::{Error, Result};
use crate::netcore::{init_model, ModelSpec, ModelState, ParamVector};
use crate::objective::{certainty_of, grad_certainty_frozen, grad_robust_loss, ObjectiveKind};

pub use checkpoint::{Checkpoint, RngRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub type TrainRng = ChaCha8Rng;

pub const DEFAULT_EDAC_ETA: f64 = 0.1;
pub const DEFAULT_EDAC_REG_LAMBDA: f64 = 0.5;
/// Upper bound on η halvings when the certainty backoff is enabled.
pub const MAX_BACKOFF_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    At,
    Edac,
    EdacReg,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::At => "at",
            Method::Edac => "edac",
            Method::EdacReg => "edac_reg",
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            Method::At => 0,
            Method::Edac => 1,
            Method::EdacReg => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Method::At),
            1 => Some(Method::Edac),
            2 => Some(Method::EdacReg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_eta")]
    pub edac_eta: f64,
    /// Halve η (at most [`MAX_BACKOFF_HALVINGS`] times) until the half step
    /// lowers certainty on the frozen batch.
    #[serde(default)]
    pub edac_backoff: bool,
    /// Scale η by the same decay factors as the learning rate.
    #[serde(default)]
    pub edac_eta_follows_lr: bool,
    #[serde(default = "default_lambda")]
    pub edac_reg_lambda: f64,
    #[serde(default)]
    pub objective: ObjectiveKind,
    pub train_attack: AttackConfig,
    pub eval_attack: AttackConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub method: Method,
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_eta() -> f64 {
    DEFAULT_EDAC_ETA
}

fn default_lambda() -> f64 {
    DEFAULT_EDAC_REG_LAMBDA
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if !(self.edac_eta >= 0.0 && self.edac_eta.is_finite()) {
            return Err(Error::config(format!("edac_eta must be >= 0, got {}", self.edac_eta)));
        }
        if !(self.edac_reg_lambda >= 0.0 && self.edac_reg_lambda.is_finite()) {
            return Err(Error::config(format!(
                "edac_reg_lambda must be >= 0, got {}",
                self.edac_reg_lambda
            )));
        }
        self.objective.validate()?;
        self.train_attack.validate()?;
        self.eval_attack.validate()
    }
}

/// Classical momentum: `v ← m·v + g`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &ParamVector,
    grad: &ParamVector,
    lr: f64,
    momentum: f64,
    buffer: &ParamVector,
) -> Result<(ParamVector, ParamVector)> {
    let mut v = buffer.clone();
    v.scale(momentum);
    v.axpy(1.0, grad)?;
    let mut next = params.clone();
    next.axpy(-lr, &v)?;
    Ok((next, v))
}

/// Learning rate for a (1-based) epoch: `lr · factor^{#(decay epochs ≤ epoch)}`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = config.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    config.lr * config.lr_decay_factor.powi(decays as i32)
}

/// Extragradient step size in effect when the learning rate is `lr`.
pub fn eta_at_lr(config: &TrainConfig, lr: f64) -> f64 {
    if config.edac_eta_follows_lr {
        config.edac_eta * lr / config.lr
    } else {
        config.edac_eta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub momentum: ParamVector,
}

impl OptState {
    pub fn new(model: &ModelState) -> Self {
        OptState {
            momentum: model.params().zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub model: ModelState,
    pub opt: OptState,
    /// Robust loss at the parameters the SGD step was taken from.
    pub loss: f64,
}

fn apply_sgd(model: &ModelState, grad: &ParamVector, lr: f64, config: &TrainConfig, opt: &OptState) -> Result<(ModelState, OptState)> {
    let (params, momentum) = sgd_step(model.params(), grad, lr, config.momentum, &opt.momentum)?;
    if !params.is_finite() {
        return Err(Error::numeric("non-finite parameters after SGD step"));
    }
    Ok((model.with_params(params)?, OptState { momentum }))
}

/// One adversarial-training step.
pub fn at_update(
    model: &ModelState,
    batch: &Batch,
    config: &TrainConfig,
    opt: &OptState,
    lr: f64,
    rng: &mut TrainRng,
) -> Result<StepOutput> {
    let adv = generate_batch(model, &batch.inputs, &batch.labels, &config.train_attack, rng)?;
    let (loss, grad) = grad_robust_loss(model, &adv, &config.objective)?;
    let (model, opt) = apply_sgd(model, &grad, lr, config, opt)?;
    Ok(StepOutput { model, opt, loss })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalfStepReport {
    /// η actually used after any backoff.
    pub eta: f64,
    pub halvings: usize,
    /// Certainty at θ on inputs attacked at θ.
    pub ac_before: f64,
    /// Certainty at θ½ on the same (frozen) inputs.
    pub ac_half_frozen: f64,
    /// Certainty at θ½ on inputs re-attacked at θ½.
    pub ac_half_regenerated: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalfStep {
    pub model: ModelState,
    pub frozen: AdversarialBatch,
    pub eta: f64,
    pub halvings: usize,
    pub ac_before: f64,
    pub ac_after: f64,
}

/// The certainty-descent half step `θ½ = θ − η·∇AC(θ)` on one batch.
///
/// With `backoff`, η is halved until certainty on the frozen adversarial
/// inputs drops, up to [`MAX_BACKOFF_HALVINGS`] times; if it never drops the
/// smallest η tried is kept.
pub fn certainty_half_step(
    model: &ModelState,
    batch: &Batch,
    attack: &AttackConfig,
    eta: f64,
    backoff: bool,
    rng: &mut TrainRng,
) -> Result<HalfStep> {
    let frozen = generate_batch(model, &batch.inputs, &batch.labels, attack, rng)?;
    let (ac_before, grad) = grad_certainty_frozen(model, &frozen.perturbed)?;
    if eta == 0.0 {
        return Ok(HalfStep {
            model: model.clone(),
            frozen,
            eta,
            halvings: 0,
            ac_before,
            ac_after: ac_before,
        });
    }
    let step = |eta: f64| -> Result<ModelState> {
        let mut p = model.params().clone();
        p.axpy(-eta, &grad)?;
        if !p.is_finite() {
            return Err(Error::numeric("non-finite parameters after certainty half step"));
        }
        model.with_params(p)
    };
    let mut eta_used = eta;
    let mut half = step(eta_used)?;
    let mut ac_after = certainty_of(&half, &frozen)?.mean;
    let mut halvings = 0;
    while backoff && ac_after >= ac_before && halvings < MAX_BACKOFF_HALVINGS {
        eta_used *= 0.5;
        halvings += 1;
        half = step(eta_used)?;
        ac_after = certainty_of(&half, &frozen)?.mean;
    }
    Ok(HalfStep {
        model: half,
        frozen,
        eta: eta_used,
        halvings,
        ac_before,
        ac_after,
    })
}

/// One extragradient step: certainty half step, then a robust step on inputs
/// re-attacked at the half-step parameters.
pub fn edac_update(
    model: &ModelState,
    batch: &Batch,
    config: &TrainConfig,
    opt: &OptState,
    lr: f64,
    rng: &mut TrainRng,
) -> Result<(StepOutput, HalfStepReport)> {
    let mut ac_rng = rng.clone();
    let half = certainty_half_step(
        model,
        batch,
        &config.train_attack,
        eta_at_lr(config, lr),
        config.edac_backoff,
        &mut ac_rng,
    )?;
    let adv = generate_batch(&half.model, &batch.inputs, &batch.labels, &config.train_attack, rng)?;
    let ac_half_regenerated = certainty_of(&half.model, &adv)?.mean;
    let (loss, grad) = grad_robust_loss(&half.model, &adv, &config.objective)?;
    let (next, opt) = apply_sgd(&half.model, &grad, lr, config, opt)?;
    let report = HalfStepReport {
        eta: half.eta,
        halvings: half.halvings,
        ac_before: half.ac_before,
        ac_half_frozen: half.ac_after,
        ac_half_regenerated,
    };
    Ok((StepOutput { model: next, opt, loss }, report))
}

/// Value and gradient of `robust_loss + λ·certainty` on a fixed adversarial batch.
pub fn edac_reg_gradient(model: &ModelState, adv: &AdversarialBatch, config: &TrainConfig) -> Result<(f64, ParamVector)> {
    let (mut value, mut grad) = grad_robust_loss(model, adv, &config.objective)?;
    let lambda = config.edac_reg_lambda;
    if lambda > 0.0 {
        let (ac, g_ac) = grad_certainty_frozen(model, &adv.perturbed)?;
        grad.axpy(lambda, &g_ac)?;
        value += lambda * ac;
    }
    Ok((value, grad))
}

/// One step on the certainty-regularised robust loss.
pub fn edac_reg_update(
    model: &ModelState,
    batch: &Batch,
    config: &TrainConfig,
    opt: &OptState,
    lr: f64,
    rng: &mut TrainRng,
) -> Result<StepOutput> {
    let adv = generate_batch(model, &batch.inputs, &batch.labels, &config.train_attack, rng)?;
    let (loss, grad) = edac_reg_gradient(model, &adv, config)?;
    let (model, opt) = apply_sgd(model, &grad, lr, config, opt)?;
    Ok(StepOutput { model, opt, loss })
}

/// Dispatches on `config.method`.
pub fn method_update(
    model: &ModelState,
    batch: &Batch,
    config: &TrainConfig,
    opt: &OptState,
    lr: f64,
    rng: &mut TrainRng,
) -> Result<StepOutput> {
    match config.method {
        Method::At => at_update(model, batch, config, opt, lr, rng),
        Method::Edac => edac_update(model, batch, config, opt, lr, rng).map(|(s, _)| s),
        Method::EdacReg => edac_reg_update(model, batch, config, opt, lr, rng),
    }
}

/// SplitMix64 finaliser over `(base, stream, index)`; used to derive
/// independent per-epoch seeds.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_EVAL_TRAIN: u64 = 2;
const STREAM_EVAL_TEST: u64 = 3;
const STREAM_TRAIN_RNG: u64 = 4;

/// Seed of the attack RNG used when evaluating a split after an epoch.
pub fn eval_seed(config: &TrainConfig, epoch: usize, test_split: bool) -> u64 {
    let stream = if test_split { STREAM_EVAL_TEST } else { STREAM_EVAL_TRAIN };
    derive_seed(config.seed, stream, epoch as u64)
}

/// Runs every batch of one (1-based) epoch.
pub fn train_epoch(
    model: &ModelState,
    opt: &OptState,
    rng: &mut TrainRng,
    config: &TrainConfig,
    train: &Dataset,
    epoch: usize,
) -> Result<(ModelState, OptState)> {
    let lr = lr_at_epoch(config, epoch);
    let mut model = model.clone();
    let mut opt = opt.clone();
    for batch in batches(train, config.batch_size, derive_seed(config.seed, STREAM_SHUFFLE, epoch as u64))? {
        let out = method_update(&model, &batch, config, &opt, lr, rng)?;
        model = out.model;
        opt = out.opt;
    }
    Ok((model, opt))
}

/// Clean/robust accuracy and certainty on both splits. Train-split numbers
/// use the training attack, test-split numbers the evaluation attack.
pub fn epoch_metrics(
    model: &ModelState,
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    epoch: usize,
    wall_time_s: f64,
) -> Result<MetricsRecord> {
    let mut rng_tr = TrainRng::seed_from_u64(eval_seed(config, epoch, false));
    let mut rng_te = TrainRng::seed_from_u64(eval_seed(config, epoch, true));
    let tr = evaluate_split(model, train, &config.train_attack, &mut rng_tr)?;
    let te = evaluate_split(model, test, &config.eval_attack, &mut rng_te)?;
    Ok(MetricsRecord {
        epoch,
        clean_acc_train: tr.clean_acc,
        clean_acc_test: te.clean_acc,
        robust_acc_train: tr.robust_acc,
        robust_acc_test: te.robust_acc,
        ac_train: tr.certainty,
        ac_test: te.certainty,
        lr: lr_at_epoch(config, epoch),
        method: config.method,
        wall_time_s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub history: Vec<MetricsRecord>,
}

#[derive(Debug, Error)]
#[error("training failed in epoch {epoch}: {source}")]
pub struct TrainFailure {
    pub epoch: usize,
    #[source]
    pub source: Error,
    /// State after the last completed epoch, if any.
    pub last: Option<Box<Checkpoint>>,
    pub history: Vec<MetricsRecord>,
}

/// Full training run from a freshly initialised model.
pub fn train_run(
    config: &TrainConfig,
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fail0 = |source| TrainFailure {
        epoch: 0,
        source,
        last: None,
        history: Vec::new(),
    };
    config.validate().map_err(fail0)?;
    let model = init_model(spec).map_err(fail0)?;
    check_data(&model, train, test).map_err(fail0)?;
    let opt = OptState::new(&model);
    let rng = TrainRng::seed_from_u64(derive_seed(config.seed, STREAM_TRAIN_RNG, 0));
    run_epochs(config, train, test, model, opt, rng, 0, None)
}

/// Continues training from a saved state until `config.epochs`. The
/// returned history covers only the new epochs.
pub fn resume_run(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    last: &Checkpoint,
    best: &Checkpoint,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fail = |source| TrainFailure {
        epoch: last.epoch,
        source,
        last: Some(Box::new(last.clone())),
        history: Vec::new(),
    };
    config.validate().map_err(fail)?;
    if last.model.spec() != best.model.spec() {
        return Err(fail(Error::Checkpoint("best and last checkpoints have different specs".into())));
    }
    check_data(&last.model, train, test).map_err(fail)?;
    let opt = OptState {
        momentum: last.optimizer_momentum.clone(),
    };
    run_epochs(
        config,
        train,
        test,
        last.model.clone(),
        opt,
        last.rng_state.restore(),
        last.epoch,
        Some(best.clone()),
    )
}

fn check_data(model: &ModelState, train: &Dataset, test: &Dataset) -> Result<()> {
    for d in [train, test] {
        if d.input_dim() != model.input_dim() {
            return Err(Error::shape(format!(
                "dataset `{}` has {} features, model expects {}",
                d.name,
                d.input_dim(),
                model.input_dim()
            )));
        }
        if d.num_classes > model.num_classes() {
            return Err(Error::shape(format!(
                "dataset `{}` has {} classes, model outputs {}",
                d.name,
                d.num_classes,
                model.num_classes()
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    mut model: ModelState,
    mut opt: OptState,
    mut rng: TrainRng,
    start_epoch: usize,
    mut best: Option<Checkpoint>,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut history: Vec<MetricsRecord> = Vec::new();
    let mut last: Option<Checkpoint> = None;
    for epoch in start_epoch + 1..=config.epochs {
        let started = Instant::now();
        let step = train_epoch(&model, &opt, &mut rng, config, train, epoch).and_then(|(m, o)| {
            let metrics = epoch_metrics(&m, config, train, test, epoch, 0.0)?;
            Ok((m, o, metrics))
        });
        let (m, o, mut metrics) = match step {
            Ok(v) => v,
            Err(source) => {
                return Err(TrainFailure {
                    epoch,
                    source,
                    last: last.map(Box::new),
                    history,
                })
            }
        };
        metrics.wall_time_s = started.elapsed().as_secs_f64();
        model = m;
        opt = o;
        let ckpt = Checkpoint {
            model: model.clone(),
            epoch,
            optimizer_momentum: opt.momentum.clone(),
            rng_state: RngRecord::capture(&rng),
            metrics: metrics.clone(),
        };
        let improves = best
            .as_ref()
            .is_none_or(|b| metrics.robust_acc_test > b.metrics.robust_acc_test);
        if improves {
            best = Some(ckpt.clone());
        }
        history.push(metrics);
        last = Some(ckpt);
    }
    match (last, best) {
        (Some(last), Some(best)) => Ok(TrainOutcome { last, best, history }),
        (None, Some(best)) => Err(TrainFailure {
            epoch: start_epoch,
            source: Error::config("checkpoint already covers every configured epoch"),
            last: Some(Box::new(best)),
            history,
        }),
        _ => unreachable!("at least one epoch runs when epochs >= 1"),
    }
}
