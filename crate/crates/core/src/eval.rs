//! Robustness evaluation and training diagnostics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, DataRange};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{argmax_rows, count_correct, softmax_cross_entropy, Batch, Differentiable};
use crate::pgi::{self, compute_gamma};
use crate::real::Real;
use crate::trainer::RunHistory;

/// Default evaluation batch size.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackKind {
    /// One step from zero with `α = ε`.
    Fgsm,
    Pgd { steps: usize },
}

/// An evaluation attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalAttack {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Default `ε/4` for PGD (`1/255` when `ε = 0`), `ε` for FGSM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Uniform random start for PGD.
    #[serde(default = "yes")]
    pub random_start: bool,
    #[serde(default)]
    pub range: DataRange,
}

fn yes() -> bool {
    true
}

impl EvalAttack {
    pub fn fgsm(epsilon: f64) -> Self {
        EvalAttack {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: None,
            random_start: false,
            range: DataRange::default(),
        }
    }

    pub fn pgd(steps: usize, epsilon: f64) -> Self {
        EvalAttack {
            kind: AttackKind::Pgd { steps },
            epsilon,
            alpha: None,
            random_start: true,
            range: DataRange::default(),
        }
    }

    /// Parse `fgsm` or `pgd<k>` (e.g. `pgd10`).
    pub fn parse(name: &str, epsilon: f64) -> Result<Self> {
        let lower = name.trim().to_ascii_lowercase();
        if lower == "fgsm" {
            return Ok(Self::fgsm(epsilon));
        }
        match lower.strip_prefix("pgd").map(|k| k.trim_start_matches('-').parse::<usize>()) {
            Some(Ok(steps)) if steps > 0 => Ok(Self::pgd(steps, epsilon)),
            _ => Err(Error::config("attacks", format!("unknown attack {name:?}; expected fgsm or pgd<k>"))),
        }
    }

    /// `fgsm` or `pgd<k>`.
    pub fn name(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => "fgsm".into(),
            AttackKind::Pgd { steps } => format!("pgd{steps}"),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.kind {
            AttackKind::Fgsm => self.epsilon.max(f64::MIN_POSITIVE),
            AttackKind::Pgd { .. } if self.epsilon > 0.0 => self.epsilon / 4.0,
            AttackKind::Pgd { .. } => 1.0 / 255.0,
        })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Perturbations for one batch.
    pub fn perturb<T: Real, M: Differentiable<T> + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        batch: Batch<'_, T>,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        let len = batch.inputs.len();
        match self.kind {
            AttackKind::Fgsm => {
                attacks::fgsm_in_range(model, batch, &vec![T::zero(); len], self.alpha(), self.epsilon, self.range)
            }
            AttackKind::Pgd { steps } => {
                let mut init = if self.random_start {
                    pgi::initial_delta(len, self.epsilon, rng)
                } else {
                    vec![T::zero(); len]
                };
                attacks::clip_to_data_range_in_place(batch.inputs, &mut init, self.range);
                let cfg = AttackConfig {
                    epsilon: self.epsilon,
                    alpha: self.alpha(),
                    steps,
                    range: self.range,
                };
                attacks::pgd(model, batch, &cfg, &init)
            }
        }
    }
}

/// Counts from attacking a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome<T> {
    pub total: usize,
    pub clean_correct: usize,
    pub adv_correct: usize,
    /// Per-sample perturbations in dataset order, when requested.
    pub deltas: Option<Vec<T>>,
}

impl<T> AttackOutcome<T> {
    pub fn clean_acc(&self) -> f64 {
        self.clean_correct as f64 / self.total.max(1) as f64
    }

    pub fn robust_acc(&self) -> f64 {
        self.adv_correct as f64 / self.total.max(1) as f64
    }

    pub fn success_rate(&self) -> f64 {
        compute_gamma(self.clean_correct, self.adv_correct)
    }
}

/// Attack every sample of `data` with random starts drawn from `seed`.
pub fn run_attack<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    attack: &EvalAttack,
    seed: u64,
    keep_deltas: bool,
) -> Result<AttackOutcome<T>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let classes = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = AttackOutcome {
        total: 0,
        clean_correct: 0,
        adv_correct: 0,
        deltas: keep_deltas.then(Vec::new),
    };
    for owned in data.sequential_batches(EVAL_BATCH) {
        let batch = owned.as_batch();
        let clean = model.forward(batch.inputs, batch.len())?;
        let delta = attack.perturb(model, batch, &mut rng)?;
        let adv = model.forward(&attacks::perturb(batch.inputs, &delta), batch.len())?;
        out.total += batch.len();
        out.clean_correct += count_correct(&clean, batch.labels, classes);
        out.adv_correct += count_correct(&adv, batch.labels, classes);
        if let Some(d) = out.deltas.as_mut() {
            d.extend_from_slice(&delta);
        }
    }
    Ok(out)
}

/// Fraction of samples still classified correctly under `attack`.
pub fn robust_accuracy<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    attack: &EvalAttack,
    seed: u64,
) -> Result<f64> {
    Ok(run_attack(model, data, attack, seed, false)?.robust_acc())
}

/// `1 - Acc(adv) / Acc(clean)` under `attack`.
pub fn attack_success_rate<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    attack: &EvalAttack,
    seed: u64,
) -> Result<f64> {
    Ok(run_attack(model, data, attack, seed, false)?.success_rate())
}

pub fn clean_accuracy<T: Real, M: Differentiable<T> + ?Sized>(model: &M, data: &Dataset<T>) -> Result<f64> {
    let mut correct = 0;
    for owned in data.sequential_batches(EVAL_BATCH) {
        let logits = model.forward(&owned.inputs, owned.labels.len())?;
        correct += count_correct(&logits, &owned.labels, model.num_classes());
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// First 1-based epoch whose value falls below `rho` times the running peak
/// and stays below for `persistence` consecutive epochs.
pub fn detect_collapse(series: &[f64], rho: f64, persistence: usize) -> Option<usize> {
    if series.len() < 3 || persistence == 0 {
        return None;
    }
    let mut peaks = Vec::with_capacity(series.len());
    let mut peak = f64::NEG_INFINITY;
    for &v in series {
        peak = peak.max(v);
        peaks.push(peak);
    }
    let below = |k: usize| series[k] < rho * peaks[k];
    (0..series.len())
        .find(|&e| e + persistence <= series.len() && (e..e + persistence).all(below))
        .map(|e| e + 1)
}

/// Catastrophic-overfitting epoch of a run, read from the evaluation robust
/// accuracy under `attack` (of the averaged weights when `ema` is set).
pub fn detect_catastrophic_overfitting(
    history: &RunHistory,
    attack: &str,
    ema: bool,
    rho: f64,
    persistence: usize,
) -> Option<usize> {
    detect_collapse(&history.robust_series(attack, ema), rho, persistence)
}

/// Default drop ratio and persistence of [`detect_catastrophic_overfitting`].
pub const CO_RHO: f64 = 0.5;
pub const CO_PERSISTENCE: usize = 3;

/// Cross-entropy over `x + a·u + b·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    /// Shared coefficient axis in `[-1, 1]`.
    pub coords: Vec<f64>,
    /// `losses[i][j]` at `a = coords[i]`, `b = coords[j]`.
    pub losses: Vec<Vec<f64>>,
    pub eta: f64,
    pub resolution: usize,
    /// Entries in `{-η, 0, η}`.
    pub u: Vec<f64>,
    /// Entries in `{-η, η}`.
    pub v: Vec<f64>,
}

impl LandscapeGrid {
    /// Whitespace-separated matrix with the coordinate axis as header row and column.
    pub fn to_table(&self) -> String {
        let mut out = String::from("a\\b");
        for b in &self.coords {
            out.push_str(&format!("\t{b:.6}"));
        }
        out.push('\n');
        for (a, row) in self.coords.iter().zip(&self.losses) {
            out.push_str(&format!("{a:.6}"));
            for l in row {
                out.push_str(&format!("\t{l:.9}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Settings of [`loss_landscape`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeConfig {
    pub eta: f64,
    pub resolution: usize,
    /// Budget of the PGD-50 attack that locates `x̂`.
    pub epsilon: f64,
    pub seed: u64,
}

/// Loss surface around `batch` along `u = η·sign(∇_x L(x̂))`, with `x̂` the
/// PGD-50 adversarial point, and a Rademacher direction `v`.
pub fn loss_landscape<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    batch: Batch<'_, T>,
    config: &LandscapeConfig,
) -> Result<LandscapeGrid> {
    if !(config.eta > 0.0 && config.eta.is_finite()) {
        return Err(Error::config("eta", "must be positive"));
    }
    if config.resolution < 2 {
        return Err(Error::config("resolution", "must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let attack = EvalAttack::pgd(50, config.epsilon);
    let delta = attack.perturb(model, batch, &mut rng)?;
    let x_hat = attacks::perturb(batch.inputs, &delta);
    let g = model.loss_and_input_grad(batch.with_inputs(&x_hat))?;
    let eta = T::of(config.eta);
    let u: Vec<T> = g.grad.iter().map(|d| eta * d.sign0()).collect();
    let v: Vec<T> = (0..u.len()).map(|_| if rng.gen::<bool>() { eta } else { -eta }).collect();
    let r = config.resolution;
    let coords: Vec<f64> = (0..r).map(|i| -1.0 + 2.0 * i as f64 / (r - 1) as f64).collect();
    let classes = model.num_classes();
    let mut losses = Vec::with_capacity(r);
    for &a in &coords {
        let mut row = Vec::with_capacity(r);
        for &b in &coords {
            let (ta, tb) = (T::of(a), T::of(b));
            let x: Vec<T> = batch
                .inputs
                .iter()
                .zip(u.iter().zip(&v))
                .map(|(&xi, (&ui, &vi))| xi + ta * ui + tb * vi)
                .collect();
            let logits = model.forward(&x, batch.len())?;
            let (loss, _) = softmax_cross_entropy(&logits, batch.labels, classes)?;
            row.push(loss.as_f64());
        }
        losses.push(row);
    }
    Ok(LandscapeGrid {
        coords,
        losses,
        eta: config.eta,
        resolution: r,
        u: u.iter().map(|x| x.as_f64()).collect(),
        v: v.iter().map(|x| x.as_f64()).collect(),
    })
}

/// Norm statistics of a set of perturbations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub count: usize,
    pub dimension: usize,
    pub epsilon: f64,
    pub mean_l2: f64,
    pub max_l2: f64,
    pub mean_sq_l2: f64,
    pub mean_linf: f64,
    /// `sqrt(d)·ε`, the largest ℓ2 norm inside the ε-ball.
    pub l2_bound: f64,
    pub within_bound: bool,
    /// `mean_l2 / (sqrt(d)·ε)`.
    pub ratio_to_bound: f64,
    /// `sqrt(d/3)·ε`, the root-mean-square norm of a uniform random start.
    pub uniform_reference: f64,
    pub ratio_to_uniform: f64,
    /// `sqrt(1/d)·ε`; reported for comparison only.
    pub prior_guided_bound: f64,
    pub ratio_to_prior_guided_bound: f64,
}

/// Statistics over `deltas`, split into rows of `dimension` values.
pub fn perturbation_norm_stats<T: Real>(deltas: &[T], dimension: usize, epsilon: f64) -> Result<NormStats> {
    if dimension == 0 || deltas.is_empty() || !deltas.len().is_multiple_of(dimension) {
        return Err(Error::InvalidInput("perturbations must be a nonempty [count, dimension] array".into()));
    }
    let count = deltas.len() / dimension;
    let (mut sum_l2, mut max_l2, mut sum_sq, mut sum_inf) = (0.0, 0.0f64, 0.0, 0.0);
    for row in deltas.chunks(dimension) {
        let sq: f64 = row.iter().map(|d| d.as_f64().powi(2)).sum();
        let l2 = sq.sqrt();
        sum_sq += sq;
        sum_l2 += l2;
        max_l2 = max_l2.max(l2);
        sum_inf += attacks::linf_norm(row).as_f64();
    }
    let n = count as f64;
    let d = dimension as f64;
    let l2_bound = d.sqrt() * epsilon;
    let uniform_reference = (d / 3.0).sqrt() * epsilon;
    let prior_guided_bound = (1.0 / d).sqrt() * epsilon;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let mean_l2 = sum_l2 / n;
    Ok(NormStats {
        count,
        dimension,
        epsilon,
        mean_l2,
        max_l2,
        mean_sq_l2: sum_sq / n,
        mean_linf: sum_inf / n,
        l2_bound,
        // one ulp of slack per component for single precision
        within_bound: max_l2 <= l2_bound * (1.0 + 1e-6),
        ratio_to_bound: ratio(mean_l2, l2_bound),
        uniform_reference,
        ratio_to_uniform: ratio(mean_l2, uniform_reference),
        prior_guided_bound,
        ratio_to_prior_guided_bound: ratio(mean_l2, prior_guided_bound),
    })
}

/// One point of an ε sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub robust_acc: f64,
}

/// Full evaluation of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub clean_acc: f64,
    pub robust_acc: BTreeMap<String, f64>,
    pub attack_success_rate: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep_attack: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eps_sweep: Vec<SweepPoint>,
    /// Perturbations of the first listed attack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<NormStats>,
}

/// Clean accuracy, every attack in `attacks`, and `sweep_attack` (if given) at each ε of `sweep`.
pub fn evaluate<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    attacks: &[EvalAttack],
    sweep_attack: Option<&EvalAttack>,
    sweep: &[f64],
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        samples: data.len(),
        clean_acc: clean_accuracy(model, data)?,
        robust_acc: BTreeMap::new(),
        attack_success_rate: BTreeMap::new(),
        sweep_attack: Vec::new(),
        eps_sweep: Vec::new(),
        norm_stats: None,
    };
    for (i, attack) in attacks.iter().enumerate() {
        let out = run_attack(model, data, attack, seed, i == 0)?;
        if let Some(d) = &out.deltas {
            report.norm_stats = Some(perturbation_norm_stats(d, data.sample_len(), attack.epsilon)?);
        }
        report.robust_acc.insert(attack.name(), out.robust_acc());
        report.attack_success_rate.insert(attack.name(), out.success_rate());
    }
    if let Some(base) = sweep_attack {
        report.sweep_attack.push(base.name());
        for &eps in sweep {
            let acc = robust_accuracy(model, data, &base.with_epsilon(eps), seed)?;
            report.eps_sweep.push(SweepPoint { epsilon: eps, robust_acc: acc });
        }
    }
    Ok(report)
}

/// Largest increase between consecutive sweep points (0 when non-increasing).
pub fn sweep_violation(points: &[SweepPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| w[1].robust_acc - w[0].robust_acc)
        .fold(0.0, f64::max)
}

/// Predicted labels for a whole dataset.
pub fn predictions<T: Real, M: Differentiable<T> + ?Sized>(model: &M, data: &Dataset<T>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for owned in data.sequential_batches(EVAL_BATCH) {
        out.extend(argmax_rows(&model.forward(&owned.inputs, owned.labels.len())?, model.num_classes()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchSpec, Classifier};

    const EPS: f64 = 8.0 / 255.0;

    fn random_data(n: usize, d: usize, classes: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::new(
            (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect(),
            (0..n).map(|_| rng.gen_range(0..classes)).collect(),
            (0..n as u64).collect(),
            vec![d],
            classes,
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_gives_clean_accuracy() {
        let data = random_data(300, 6, 4, 1);
        let model = Classifier::<f64>::new(ArchSpec::mlp(6, 10, 4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let clean = clean_accuracy(&model, &data).unwrap();
        for attack in [EvalAttack::pgd(10, 0.0), EvalAttack::fgsm(0.0)] {
            assert_eq!(robust_accuracy(&model, &data, &attack, 0).unwrap(), clean);
        }
    }

    #[test]
    fn random_model_is_near_chance() {
        // labels independent of inputs: correct predictions are Binomial(n, 1/C)
        let (n, c) = (1000, 5);
        let data = random_data(n, 8, c, 3);
        let model = Classifier::<f64>::new(ArchSpec::mlp(8, 16, c), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let acc = clean_accuracy(&model, &data).unwrap();
        let p = 1.0 / c as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * se, "accuracy {acc}");
    }

    #[test]
    fn success_rate_examples() {
        let out = AttackOutcome::<f64> {
            total: 100,
            clean_correct: 90,
            adv_correct: 45,
            deltas: None,
        };
        assert_eq!(out.success_rate(), 0.5);
        assert_eq!(out.success_rate(), compute_gamma(90, 45));
        let same = AttackOutcome::<f64> {
            adv_correct: 90,
            ..out
        };
        assert_eq!(same.success_rate(), 0.0);
    }

    #[test]
    fn collapse_detection_examples() {
        assert_eq!(detect_collapse(&[0.3; 10], 0.5, 3), None);
        assert_eq!(detect_collapse(&[0.40, 0.41, 0.42, 0.02, 0.01, 0.00], 0.5, 3), Some(4));
        // a rise to 41.26% followed by a collapse to 0.02%
        let trace = [0.20, 0.31, 0.38, 0.4126, 0.405, 0.03, 0.001, 0.0004, 0.0002];
        assert_eq!(detect_collapse(&trace, 0.5, 3), Some(6));
        // a short dip is not a collapse
        assert_eq!(detect_collapse(&[0.4, 0.1, 0.4, 0.41, 0.42], 0.5, 3), None);
        assert_eq!(detect_collapse(&[0.4, 0.0], 0.5, 1), None);
    }

    #[test]
    fn collapse_detection_is_scale_invariant() {
        let trace = [0.2, 0.35, 0.3, 0.1, 0.05, 0.3, 0.02, 0.01, 0.0];
        let a = detect_collapse(&trace, 0.5, 2);
        for k in [0.01, 3.0, 1e4] {
            let scaled: Vec<f64> = trace.iter().map(|v| v * k).collect();
            assert_eq!(detect_collapse(&scaled, 0.5, 2), a);
        }
    }

    #[test]
    fn norm_stats_examples() {
        let zeros = vec![0.0f64; 40];
        assert_eq!(perturbation_norm_stats(&zeros, 10, EPS).unwrap().mean_l2, 0.0);
        let d = 12;
        let corner: Vec<f64> = (0..3 * d).map(|i| if i % 3 == 0 { EPS } else { -EPS }).collect();
        let s = perturbation_norm_stats(&corner, d, EPS).unwrap();
        assert!((s.mean_l2 - (d as f64).sqrt() * EPS).abs() < 1e-15);
        assert!(s.within_bound);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws: Vec<f64> = pgi::initial_delta(10_000 * d, EPS, &mut rng);
        let s = perturbation_norm_stats(&draws, d, EPS).unwrap();
        let expect = d as f64 * EPS * EPS / 3.0;
        assert!((s.mean_sq_l2 / expect - 1.0).abs() < 0.05);
    }

    #[test]
    fn landscape_origin_is_plain_loss_and_linear_slice_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Classifier::<f64>::new(ArchSpec::linear(6, 3), &mut rng).unwrap();
        let data = random_data(4, 6, 3, 6);
        let batch = Batch::new(&data.inputs[..], &data.labels[..], &data.ids[..]);
        let cfg = LandscapeConfig {
            eta: 0.05,
            resolution: 11,
            epsilon: EPS,
            seed: 1,
        };
        let grid = loss_landscape(&model, batch, &cfg).unwrap();
        let logits = model.forward(batch.inputs, 4).unwrap();
        let (plain, _) = softmax_cross_entropy(&logits, batch.labels, 3).unwrap();
        assert_eq!(grid.losses[5][5], plain);
        assert!(grid.u.iter().all(|&x| x == 0.0 || x.abs() == 0.05));
        assert!(grid.v.iter().all(|&x| x.abs() == 0.05));
        // mean cross-entropy of an affine model is convex along any line
        let col: Vec<f64> = grid.losses.iter().map(|row| row[5]).collect();
        for w in col.windows(3) {
            assert!(w[1] <= 0.5 * (w[0] + w[2]) + 1e-12);
        }
        assert!(grid.to_table().lines().count() == 12);
    }

    #[test]
    fn attack_names_round_trip() {
        for name in ["fgsm", "pgd10", "pgd50"] {
            assert_eq!(EvalAttack::parse(name, EPS).unwrap().name(), name);
        }
        assert!(EvalAttack::parse("cw", EPS).is_err());
        assert_eq!(EvalAttack::pgd(10, EPS).alpha(), EPS / 4.0);
    }
}
