//! Fast adversarial training loops: FGSM-PGK and its baselines.
//!
//! Every FGSM-family method spends one input gradient on the attack and one
//! parameter gradient on the update; PGD-AT-k spends `k + 1`.
//!
//! Per batch the trainer
//! 1. builds the starting perturbation (zero, uniform or prior-guided),
//! 2. attacks,
//! 3. evaluates the update loss `CE(x + δ_adv) + R` jointly with `f(x + δ_pgi)`,
//! 4. derives `Γ` and `Λ` from pre-update accuracies on `x` and `x + δ_adv`,
//! 5. commits the prior-guided stores, steps the optimizer and updates the average.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, DataRange};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{count_correct, Classifier, Counted, Differentiable, GradCounter, LossTerm, ParamSet, TermValue};
use crate::pgi::{self, compute_gamma, PendingUpdate, PgiState, Strategy};
use crate::real::Real;
use crate::wa::{compute_lambda, EmaMode, EmaState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FGSM-AT")]
    FgsmAt,
    #[serde(rename = "FGSM-RS")]
    FgsmRs,
    #[serde(rename = "PGD-AT")]
    PgdAt,
    #[serde(rename = "FGSM-BP")]
    FgsmBp,
    #[serde(rename = "FGSM-EP")]
    FgsmEp,
    #[serde(rename = "FGSM-MEP")]
    FgsmMep,
    #[serde(rename = "FGSM-WMEP")]
    FgsmWmep,
    #[serde(rename = "FGSM-PGK")]
    FgsmPgk,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::FgsmAt,
        Method::FgsmRs,
        Method::PgdAt,
        Method::FgsmBp,
        Method::FgsmEp,
        Method::FgsmMep,
        Method::FgsmWmep,
        Method::FgsmPgk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FgsmAt => "FGSM-AT",
            Method::FgsmRs => "FGSM-RS",
            Method::PgdAt => "PGD-AT",
            Method::FgsmBp => "FGSM-BP",
            Method::FgsmEp => "FGSM-EP",
            Method::FgsmMep => "FGSM-MEP",
            Method::FgsmWmep => "FGSM-WMEP",
            Method::FgsmPgk => "FGSM-PGK",
        }
    }

    /// The prior-guided strategy the method fixes, if any.
    pub fn fixed_strategy(self) -> Option<Strategy> {
        match self {
            Method::FgsmBp => Some(Strategy::Bp),
            Method::FgsmEp => Some(Strategy::Ep),
            Method::FgsmMep => Some(Strategy::Mep),
            Method::FgsmWmep => Some(Strategy::Wmep),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?}")))
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    /// `initial · factor^k` after `k` milestones, each a fraction of the run.
    Multistep {
        #[serde(default = "defaults::lr0")]
        initial: f64,
        #[serde(default = "defaults::milestones")]
        milestones: Vec<f64>,
        #[serde(default = "defaults::lr_factor")]
        factor: f64,
    },
    /// Triangle `0 -> max_lr -> 0` over the whole run.
    Cyclic { max_lr: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Multistep {
            initial: defaults::lr0(),
            milestones: defaults::milestones(),
            factor: defaults::lr_factor(),
        }
    }
}

/// Momentum gradient descent with coupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
        }
    }
}

pub(crate) mod defaults {
    pub fn epsilon() -> f64 {
        8.0 / 255.0
    }
    pub fn epochs() -> usize {
        110
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn pgd_steps() -> usize {
        10
    }
    pub fn yes() -> bool {
        true
    }
    pub fn mu() -> f64 {
        0.3
    }
    pub fn nu() -> f64 {
        0.5
    }
    pub fn kappa() -> f64 {
        0.999
    }
    pub fn clamp_max() -> f64 {
        1.0
    }
    pub fn lr0() -> f64 {
        0.1
    }
    pub fn milestones() -> Vec<f64> {
        vec![100.0 / 110.0, 105.0 / 110.0]
    }
    pub fn lr_factor() -> f64 {
        0.1
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
}

/// Everything that determines a training trajectory besides data and initial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Overrides the initialization strategy of FGSM-PGK (default WMEP).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    /// Attack step size; default `ε`, `1.25ε` for FGSM-RS and `2/255` for PGD-AT.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "defaults::pgd_steps")]
    pub pgd_steps: usize,
    #[serde(default = "defaults::yes")]
    pub pgd_random_init: bool,
    /// Regularizer weight; default 10 for FGSM-PGK and 0 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    /// Replaces the measured `Γ` (WMEP only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_gamma: Option<f64>,
    #[serde(default = "defaults::nu")]
    pub nu: f64,
    #[serde(default = "defaults::kappa")]
    pub kappa: f64,
    #[serde(default = "defaults::clamp_max")]
    pub clamp_max: f64,
    /// Default `dynamic` for FGSM-PGK and `off` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_ema: Option<EmaMode>,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub range: DataRange,
    #[serde(default)]
    pub seed: u64,
    /// Keep a per-step log in memory.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub record_steps: bool,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            strategy: None,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            epsilon: defaults::epsilon(),
            alpha: None,
            pgd_steps: defaults::pgd_steps(),
            pgd_random_init: true,
            lambda: None,
            mu: defaults::mu(),
            fixed_gamma: None,
            nu: defaults::nu(),
            kappa: defaults::kappa(),
            clamp_max: defaults::clamp_max(),
            use_ema: None,
            lr_schedule: LrSchedule::default(),
            optimizer: OptimizerConfig::default(),
            range: DataRange::default(),
            seed: 0,
            record_steps: false,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.method {
            Method::FgsmRs => 1.25 * self.epsilon,
            Method::PgdAt => 2.0 / 255.0,
            _ => self.epsilon,
        })
    }

    pub fn strategy(&self) -> Option<Strategy> {
        match self.method {
            Method::FgsmPgk => Some(self.strategy.unwrap_or(Strategy::Wmep)),
            m => m.fixed_strategy(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
            .unwrap_or(if self.method == Method::FgsmPgk { 10.0 } else { 0.0 })
    }

    pub fn ema_mode(&self) -> EmaMode {
        self.use_ema.unwrap_or(if self.method == Method::FgsmPgk {
            EmaMode::Dynamic
        } else {
            EmaMode::Off
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(field, reason));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", format!("must be finite and >= 0, got {}", self.epsilon));
        }
        let alpha = self.alpha();
        if !(alpha > 0.0 && alpha.is_finite()) {
            return bad("alpha", format!("must be finite and > 0, got {alpha}"));
        }
        if self.method == Method::PgdAt && self.pgd_steps == 0 {
            return bad("pgd_steps", "must be at least 1".into());
        }
        let lambda = self.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return bad("lambda", format!("must be finite and >= 0, got {lambda}"));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return bad("mu", format!("must lie in [0, 1), got {}", self.mu));
        }
        if let Some(g) = self.fixed_gamma {
            if !(0.0..=1.0).contains(&g) {
                return bad("fixed_gamma", format!("must lie in [0, 1], got {g}"));
            }
        }
        if let (Some(s), Some(fixed)) = (self.strategy, self.method.fixed_strategy()) {
            if s != fixed {
                return bad("strategy", format!("{} always uses {}", self.method, fixed.name()));
            }
        }
        if self.strategy.is_some() && self.strategy().is_none() {
            return bad("strategy", format!("{} has no prior-guided initialization", self.method));
        }
        if self.ema_mode() != EmaMode::Off {
            EmaState::<f64>::new(self.kappa, self.nu, self.clamp_max)?;
        }
        match &self.lr_schedule {
            LrSchedule::Multistep {
                initial,
                milestones,
                factor,
            } => {
                if !(*initial > 0.0 && initial.is_finite()) {
                    return bad("lr_schedule.initial", "must be positive".into());
                }
                if milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
                    return bad("lr_schedule.milestones", "must lie within [0, 1]".into());
                }
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return bad("lr_schedule.factor", "must lie in (0, 1]".into());
                }
            }
            LrSchedule::Cyclic { max_lr } => {
                if !(*max_lr > 0.0 && max_lr.is_finite()) {
                    return bad("lr_schedule.max_lr", "must be positive".into());
                }
            }
        }
        if !(self.optimizer.momentum >= 0.0 && self.optimizer.momentum < 1.0) {
            return bad("optimizer.momentum", "must lie in [0, 1)".into());
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return bad("optimizer.weight_decay", "must be >= 0".into());
        }
        if !(self.range.lo < self.range.hi) {
            return bad("range", "lower bound must be below upper bound".into());
        }
        Ok(())
    }
}

/// Learning rate at `step_in_epoch` of 1-based `epoch`.
///
/// A multistep milestone `m` applies from epoch `round(m · total) + 1` on; the
/// cyclic schedule is evaluated at the fraction of the run completed before the step.
pub fn lr_at(schedule: &LrSchedule, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize, total_epochs: usize) -> f64 {
    match schedule {
        LrSchedule::Multistep {
            initial,
            milestones,
            factor,
        } => {
            let passed = milestones
                .iter()
                .filter(|&&m| epoch as f64 > (m * total_epochs as f64).round())
                .count();
            initial * factor.powi(passed as i32)
        }
        LrSchedule::Cyclic { max_lr } => {
            let spe = steps_per_epoch.max(1) as f64;
            let done = (epoch.saturating_sub(1) as f64 * spe + step_in_epoch as f64) / (total_epochs as f64 * spe);
            let p = done.clamp(0.0, 1.0);
            max_lr * (1.0 - (2.0 * p - 1.0).abs())
        }
    }
}

/// Gradient evaluations per batch: attack plus update.
pub fn gradient_budget(method: Method, config: &TrainConfig) -> u64 {
    match method {
        Method::PgdAt => config.pgd_steps as u64 + 1,
        _ => 2,
    }
}

/// `λ · (1/N) · Σ_i ‖a_i − p_i‖²` over logit rows of width `classes`.
pub fn regularizer<T: Real>(logits_adv: &[T], logits_pgi: &[T], classes: usize, lambda: f64) -> Result<f64> {
    let n = check_logit_pair(logits_adv, logits_pgi, classes)?;
    let sq: f64 = logits_adv
        .iter()
        .zip(logits_pgi)
        .map(|(&a, &p)| (a - p).as_f64().powi(2))
        .sum();
    Ok(lambda * sq / n as f64)
}

/// Gradient of [`regularizer`] with respect to `logits_adv`; the gradient with
/// respect to `logits_pgi` is its negation.
pub fn regularizer_grad<T: Real>(logits_adv: &[T], logits_pgi: &[T], classes: usize, lambda: f64) -> Result<Vec<T>> {
    let n = check_logit_pair(logits_adv, logits_pgi, classes)?;
    let scale = T::of(2.0 * lambda / n as f64);
    Ok(logits_adv.iter().zip(logits_pgi).map(|(&a, &p)| scale * (a - p)).collect())
}

fn check_logit_pair<T>(a: &[T], p: &[T], classes: usize) -> Result<usize> {
    if a.len() != p.len() || classes == 0 || !a.len().is_multiple_of(classes) || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "regularizer needs matching [N, {classes}] logits, got {} and {} values",
            a.len(),
            p.len()
        )));
    }
    Ok(a.len() / classes)
}

/// The prior-guided regularizer as a loss term; `f(x + δ_pgi)` is evaluated
/// jointly with the main batch.
pub struct PriorGuidedRegularizer<'a, T> {
    pub lambda: f64,
    /// `x + δ_pgi`, sample-major.
    pub pgi_inputs: &'a [T],
}

impl<T: Real> LossTerm<T> for PriorGuidedRegularizer<'_, T> {
    fn auxiliary_inputs(&self) -> Option<&[T]> {
        Some(self.pgi_inputs)
    }

    fn evaluate(&self, logits: &[T], aux_logits: Option<&[T]>, _n: usize, classes: usize) -> Result<TermValue<T>> {
        let pgi = aux_logits.ok_or_else(|| Error::InvalidInput("regularizer needs auxiliary logits".into()))?;
        let value = T::of(regularizer(logits, pgi, classes, self.lambda)?);
        let d_logits = regularizer_grad(logits, pgi, classes, self.lambda)?;
        let d_aux = d_logits.iter().map(|&g| -g).collect();
        Ok(TermValue {
            value,
            d_logits,
            d_aux: Some(d_aux),
        })
    }
}

/// Momentum gradient descent: `v <- m·v + (g + wd·w)`, `w <- w - lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub config: OptimizerConfig,
    pub velocity: ParamSet<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: OptimizerConfig, params: &ParamSet<T>) -> Self {
        Sgd {
            config,
            velocity: ParamSet::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        params.check_compatible(grads)?;
        params.check_compatible(&self.velocity)?;
        let (m, wd, lr) = (
            T::of(self.config.momentum),
            T::of(self.config.weight_decay),
            T::of(lr),
        );
        for ((p, g), v) in params.params.iter_mut().zip(&grads.params).zip(&mut self.velocity.params) {
            for ((w, &gi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                let d = gi + wd * *w;
                *vi = m * *vi + d;
                *w = *w - lr * *vi;
            }
        }
        Ok(())
    }
}

/// Periodic evaluation results attached to an epoch record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_acc: Option<f64>,
    /// Accuracy of the live weights per attack name.
    #[serde(default)]
    pub robust_acc: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_acc_ema: Option<f64>,
    /// Accuracy of the averaged weights per attack name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub robust_acc_ema: BTreeMap<String, f64>,
    /// Evaluation-set attack success rate of the live weights per attack name.
    #[serde(default)]
    pub attack_success_rate: BTreeMap<String, f64>,
}

/// Metrics of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the first step.
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub regularizer: f64,
    /// Training accuracy on clean inputs, before each step.
    pub clean_acc: f64,
    /// Training accuracy on the training attack's adversarial inputs.
    pub adv_acc_train: f64,
    /// `1 - adv_acc_train / clean_acc` of the training attack.
    pub attack_success_rate: f64,
    /// Mean measured batch quality, also when the update weight is pinned.
    pub mean_gamma: f64,
    pub mean_lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_kappa: Option<f64>,
    pub gradient_evaluations: u64,
    #[serde(default)]
    pub eval: EpochEval,
    /// Not serialized with the record so that metrics stay byte-deterministic.
    #[serde(skip)]
    pub wallclock_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

impl RunHistory {
    /// Evaluation robust accuracy per epoch for `attack`, from the averaged
    /// weights when `ema` is set.
    pub fn robust_series(&self, attack: &str, ema: bool) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| {
                if ema {
                    r.eval.robust_acc_ema.get(attack).copied()
                } else {
                    r.eval.robust_acc.get(attack).copied()
                }
            })
            .collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub regularizer: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub kappa: Option<f64>,
    pub gradients: u64,
}

/// Hook run after every epoch with the live and (if any) averaged model.
pub type EpochHook<'a, T> = dyn FnMut(usize, &Classifier<T>, Option<&Classifier<T>>) -> Result<EpochEval> + 'a;

/// Random stream for `(seed, epoch, purpose)`; resuming at an epoch boundary
/// reproduces it without saved generator state.
pub fn stream_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | (purpose & 0xff));
    rng
}

const SHUFFLE_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

/// Final state of a run.
pub struct TrainOutcome<T> {
    pub model: Classifier<T>,
    pub ema: Option<EmaState<T>>,
    pub history: RunHistory,
}

impl<T: Real> TrainOutcome<T> {
    /// The averaged weights as a classifier, when averaging ran.
    pub fn ema_model(&self) -> Option<Classifier<T>> {
        let w = self.ema.as_ref()?.w_tilde.as_ref()?;
        Classifier::from_params(self.model.arch().clone(), w.clone()).ok()
    }
}

/// A resumable training run.
pub struct Trainer<T: Real> {
    pub(crate) config: TrainConfig,
    pub(crate) model: Classifier<T>,
    pub(crate) optimizer: Sgd<T>,
    pub(crate) ema: Option<EmaState<T>>,
    pub(crate) pgi: Option<PgiState<T>>,
    pub(crate) history: RunHistory,
    pub(crate) steps: Vec<StepRecord>,
    /// Number of completed epochs.
    pub(crate) epoch: usize,
    pub(crate) counter: GradCounter,
}

struct Sums {
    loss: f64,
    ce: f64,
    reg: f64,
    gamma: f64,
    lambda: f64,
    kappa: f64,
    batches: usize,
    clean: usize,
    adv: usize,
    seen: usize,
    gradients: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, model: Classifier<T>) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.optimizer, model.params());
        let ema = match config.ema_mode() {
            EmaMode::Off => None,
            _ => Some(EmaState::new(config.kappa, config.nu, config.clamp_max)?),
        };
        let pgi = match config.strategy() {
            Some(s) => {
                let mut state = PgiState::new(s, config.epsilon, config.alpha(), config.mu, model.input_len())?;
                state.range = config.range;
                Some(state)
            }
            None => None,
        };
        Ok(Trainer {
            config,
            model,
            optimizer,
            ema,
            pgi,
            history: RunHistory::default(),
            steps: Vec::new(),
            epoch: 0,
            counter: GradCounter::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Classifier<T> {
        &self.model
    }

    pub fn ema(&self) -> Option<&EmaState<T>> {
        self.ema.as_ref()
    }

    /// The averaged weights as a classifier, once at least one update happened.
    pub fn ema_model(&self) -> Option<Classifier<T>> {
        let w = self.ema.as_ref()?.w_tilde.as_ref()?;
        Classifier::from_params(self.model.arch().clone(), w.clone()).ok()
    }

    pub fn pgi(&self) -> Option<&PgiState<T>> {
        self.pgi.as_ref()
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn step_log(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn into_outcome(self) -> TrainOutcome<T> {
        TrainOutcome {
            model: self.model,
            ema: self.ema,
            history: self.history,
        }
    }

    /// Train one epoch and run `hook`; returns the new record.
    pub fn run_epoch(&mut self, data: &Dataset<T>, hook: Option<&mut EpochHook<'_, T>>) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(Error::InvalidInput("all epochs are already complete".into()));
        }
        if data.sample_len() != self.model.input_len() || data.num_classes != self.model.num_classes() {
            return Err(Error::InvalidInput("dataset does not match the model".into()));
        }
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(seed, epoch, SHUFFLE_STREAM));
        let mut init_rng = stream_rng(seed, epoch, INIT_STREAM);
        let bs = self.config.batch_size;
        let steps_per_epoch = order.len().div_ceil(bs);
        let mut sums = Sums {
            loss: 0.0,
            ce: 0.0,
            reg: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            kappa: 0.0,
            batches: 0,
            clean: 0,
            adv: 0,
            seen: 0,
            gradients: 0,
        };
        let mut first_lr = None;
        for (step, chunk) in order.chunks(bs).enumerate() {
            let lr = lr_at(&self.config.lr_schedule, epoch, step, steps_per_epoch, self.config.epochs);
            first_lr.get_or_insert(lr);
            let owned = data.gather(chunk);
            self.step(epoch, step, &owned, lr, &mut init_rng, &mut sums)
                .map_err(|e| diverged(e, epoch))?;
        }
        if let Some(p) = &self.pgi {
            if epoch == 1 || p.strategy != Strategy::Bp {
                p.check_coverage(&data.ids)?;
            }
        }
        self.epoch = epoch;
        let eval = match hook {
            Some(h) => {
                let ema_model = self.ema_model();
                h(epoch, &self.model, ema_model.as_ref())?
            }
            None => EpochEval::default(),
        };
        let b = sums.batches.max(1) as f64;
        let seen = sums.seen.max(1) as f64;
        self.history.records.push(EpochRecord {
            epoch,
            lr: first_lr.unwrap_or(0.0),
            loss: sums.loss / b,
            ce: sums.ce / b,
            regularizer: sums.reg / b,
            clean_acc: sums.clean as f64 / seen,
            adv_acc_train: sums.adv as f64 / seen,
            attack_success_rate: compute_gamma(sums.clean, sums.adv),
            mean_gamma: sums.gamma / b,
            mean_lambda: sums.lambda / b,
            mean_kappa: self.ema.as_ref().map(|_| sums.kappa / b),
            gradient_evaluations: sums.gradients,
            eval,
            wallclock_seconds: started.elapsed().as_secs_f64(),
        });
        Ok(self.history.records.last().expect("just pushed"))
    }

    fn step(
        &mut self,
        epoch: usize,
        step: usize,
        owned: &crate::data::OwnedBatch<T>,
        lr: f64,
        rng: &mut ChaCha8Rng,
        sums: &mut Sums,
    ) -> Result<()> {
        let batch = owned.as_batch();
        let cfg = &self.config;
        let (eps, alpha, range) = (cfg.epsilon, cfg.alpha(), cfg.range);
        let classes = self.model.num_classes();
        self.counter.reset();
        let counted = Counted::new(&self.model, &self.counter);

        // attack
        let mut pending: Option<PendingUpdate<T>> = None;
        let (delta_pgi, delta_adv) = match (cfg.method, &self.pgi) {
            (_, Some(state)) => {
                let init = state.fetch_init(batch, epoch, rng)?;
                let p = state.attack(&counted, batch, init)?;
                let out = (p.delta_pgi.clone(), p.delta_adv.clone());
                pending = Some(p);
                out
            }
            (Method::FgsmAt, None) => {
                let init = vec![T::zero(); batch.inputs.len()];
                let adv = attacks::fgsm_in_range(&counted, batch, &init, alpha, eps, range)?;
                (init, adv)
            }
            (Method::FgsmRs, None) => {
                let mut init = pgi::initial_delta(batch.inputs.len(), eps, rng);
                attacks::clip_to_data_range_in_place(batch.inputs, &mut init, range);
                let adv = attacks::fgsm_in_range(&counted, batch, &init, alpha, eps, range)?;
                (init, adv)
            }
            (Method::PgdAt, None) => {
                let mut init = if cfg.pgd_random_init {
                    pgi::initial_delta(batch.inputs.len(), eps, rng)
                } else {
                    vec![T::zero(); batch.inputs.len()]
                };
                attacks::clip_to_data_range_in_place(batch.inputs, &mut init, range);
                let attack = AttackConfig {
                    epsilon: eps,
                    alpha,
                    steps: cfg.pgd_steps,
                    range,
                };
                let adv = attacks::pgd(&counted, batch, &attack, &init)?;
                (init, adv)
            }
            (m, None) => return Err(Error::config("method", format!("{m} needs a prior-guided strategy"))),
        };

        // update pass
        let x_adv = attacks::perturb(batch.inputs, &delta_adv);
        let x_pgi;
        let lambda = cfg.lambda();
        let reg_term;
        let extra: Vec<&dyn LossTerm<T>> = if lambda > 0.0 {
            x_pgi = attacks::perturb(batch.inputs, &delta_pgi);
            reg_term = PriorGuidedRegularizer {
                lambda,
                pgi_inputs: &x_pgi,
            };
            vec![&reg_term]
        } else {
            Vec::new()
        };
        let pg = counted.loss_and_param_grad(batch.with_inputs(&x_adv), &extra)?;
        let clean_logits = counted.forward(batch.inputs, batch.len())?;
        let gradients = self.counter.gradients();

        let clean_correct = count_correct(&clean_logits, batch.labels, classes);
        let adv_correct = count_correct(&pg.logits, batch.labels, classes);
        // Recorded statistics use the measured value even when the weight is pinned.
        let gamma = compute_gamma(clean_correct, adv_correct);
        let weight = cfg.fixed_gamma.unwrap_or(gamma);
        let lam = compute_lambda(clean_correct, adv_correct);
        let (loss, ce) = (pg.loss.as_f64(), pg.ce.as_f64());
        let reg = pg.extra.first().map_or(0.0, |v| v.as_f64());
        if !loss.is_finite() {
            return Err(Error::NumericOverflow("non-finite training loss".into()));
        }
        let record_steps = cfg.record_steps;
        let ema_mode = cfg.ema_mode();

        if let (Some(state), Some(p)) = (self.pgi.as_mut(), pending.as_ref()) {
            state.commit(batch, p, weight)?;
        }
        self.optimizer.step(self.model.params_mut(), &pg.grads, lr)?;
        let mut kappa = None;
        if let Some(ema) = self.ema.as_mut() {
            let k = ema.decay(ema_mode, lam);
            ema.update(self.model.params(), k)?;
            kappa = Some(k);
        }

        sums.loss += loss;
        sums.ce += ce;
        sums.reg += reg;
        sums.gamma += gamma;
        sums.lambda += lam;
        sums.kappa += kappa.unwrap_or(0.0);
        sums.batches += 1;
        sums.clean += clean_correct;
        sums.adv += adv_correct;
        sums.seen += batch.len();
        sums.gradients += gradients;
        if record_steps {
            self.steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss,
                ce,
                regularizer: reg,
                gamma,
                lambda: lam,
                kappa,
                gradients,
            });
        }
        Ok(())
    }
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NumericOverflow(reason) => Error::Diverged { epoch, reason },
        other => other,
    }
}

/// Run all epochs of `config` on `data` starting from `model`.
pub fn train<T: Real>(config: TrainConfig, data: &Dataset<T>, model: Classifier<T>) -> Result<TrainOutcome<T>> {
    train_with_hook(config, data, model, None)
}

pub fn train_with_hook<T: Real>(
    config: TrainConfig,
    data: &Dataset<T>,
    model: Classifier<T>,
    mut hook: Option<&mut EpochHook<'_, T>>,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(config, model)?;
    while !trainer.is_finished() {
        trainer.run_epoch(data, hook.as_deref_mut())?;
    }
    Ok(trainer.into_outcome())
}
