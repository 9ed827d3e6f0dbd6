//! ℓ∞-bounded perturbations: projection, data-range clipping, FGSM from an
//! arbitrary start and multi-step PGD.
//!
//! Every perturbation returned here satisfies `|δ_i| <= ε` and keeps `x + δ`
//! inside the data range. `sign(0)` is `0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Batch, Differentiable, InputGrad};
use crate::real::Real;

/// Closed interval of valid input values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for DataRange {
    fn default() -> Self {
        DataRange { lo: 0.0, hi: 1.0 }
    }
}

/// Budget, step size and iteration count of an ℓ∞ attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub range: DataRange,
}

impl AttackConfig {
    pub fn new(epsilon: f64, alpha: f64, steps: usize) -> Result<Self> {
        let cfg = AttackConfig {
            epsilon,
            alpha,
            steps,
            range: DataRange::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Single step with `alpha = epsilon`.
    pub fn fgsm(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, epsilon.max(f64::MIN_POSITIVE), 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("epsilon", format!("must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha", format!("must be finite and > 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.range.lo < self.range.hi) {
            return Err(Error::config("range", "lower bound must be below upper bound"));
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon >= 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::config("epsilon", format!("must be finite and >= 0, got {epsilon}")))
    }
}

/// Clamp every component into `[-ε, ε]`.
pub fn project_linf<T: Real>(delta: &[T], epsilon: f64) -> Result<Vec<T>> {
    let mut out = delta.to_vec();
    project_linf_in_place(&mut out, epsilon)?;
    Ok(out)
}

pub fn project_linf_in_place<T: Real>(delta: &mut [T], epsilon: f64) -> Result<()> {
    check_epsilon(epsilon)?;
    let eps = T::of(epsilon);
    for d in delta.iter_mut() {
        *d = d.max(-eps).min(eps);
    }
    Ok(())
}

/// Shrink `δ` so that `x + δ` stays inside `range`; never increases `|δ_i|`.
pub fn clip_to_data_range<T: Real>(x: &[T], delta: &[T], range: DataRange) -> Vec<T> {
    let mut out = delta.to_vec();
    clip_to_data_range_in_place(x, &mut out, range);
    out
}

pub fn clip_to_data_range_in_place<T: Real>(x: &[T], delta: &mut [T], range: DataRange) {
    let (lo, hi) = (T::of(range.lo), T::of(range.hi));
    for (d, &xi) in delta.iter_mut().zip(x) {
        let y = xi + *d;
        if y > hi {
            *d = (hi - xi).min(*d).max(T::zero());
        } else if y < lo {
            *d = (lo - xi).max(*d).min(T::zero());
        }
    }
}

/// `x + δ` componentwise.
pub fn perturb<T: Real>(x: &[T], delta: &[T]) -> Vec<T> {
    x.iter().zip(delta).map(|(&a, &b)| a + b).collect()
}

/// Largest `|δ_i|`.
pub fn linf_norm<T: Real>(delta: &[T]) -> T {
    delta.iter().fold(T::zero(), |m, &d| m.max(d.abs()))
}

fn check_budget<T: Real>(init: &[T], epsilon: f64, len: usize) -> Result<()> {
    check_epsilon(epsilon)?;
    if init.len() != len {
        return Err(Error::InvalidInput(format!(
            "initial perturbation has {} values, batch has {len}",
            init.len()
        )));
    }
    if linf_norm(init) > T::of(epsilon) {
        return Err(Error::InvalidInput("initial perturbation exceeds the epsilon budget".into()));
    }
    Ok(())
}

/// Outcome of one signed-gradient evaluation at `x + init`.
#[derive(Debug, Clone)]
pub struct SignedGradient<T> {
    /// `sign(∇_x L(f(x + init), y))`.
    pub sign: Vec<T>,
    /// Loss, raw gradient and logits at `x + init`.
    pub eval: InputGrad<T>,
}

/// One gradient evaluation at `x + init`, returning the gradient sign.
pub fn signed_gradient<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    batch: Batch<'_, T>,
    init: &[T],
) -> Result<SignedGradient<T>> {
    let start = perturb(batch.inputs, init);
    let eval = model.loss_and_input_grad(batch.with_inputs(&start))?;
    let sign = eval.grad.iter().map(|g| g.sign0()).collect();
    Ok(SignedGradient { sign, eval })
}

/// `clip(Π_ε[base + α · direction])`.
pub fn step_and_project<T: Real>(
    x: &[T],
    base: &[T],
    direction: &[T],
    alpha: f64,
    epsilon: f64,
    range: DataRange,
) -> Result<Vec<T>> {
    let a = T::of(alpha);
    let mut out: Vec<T> = base.iter().zip(direction).map(|(&b, &d)| b + a * d).collect();
    project_linf_in_place(&mut out, epsilon)?;
    clip_to_data_range_in_place(x, &mut out, range);
    Ok(out)
}

/// FGSM from `init`: `clip(Π_ε[init + α · sign(∇_x L(f(x + init), y))])`.
///
/// Costs exactly one input-gradient evaluation.
pub fn fgsm_from<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    batch: Batch<'_, T>,
    init: &[T],
    alpha: f64,
    epsilon: f64,
) -> Result<Vec<T>> {
    fgsm_in_range(model, batch, init, alpha, epsilon, DataRange::default())
}

pub fn fgsm_in_range<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    batch: Batch<'_, T>,
    init: &[T],
    alpha: f64,
    epsilon: f64,
    range: DataRange,
) -> Result<Vec<T>> {
    check_budget(init, epsilon, batch.inputs.len())?;
    let g = signed_gradient(model, batch, init)?;
    step_and_project(batch.inputs, init, &g.sign, alpha, epsilon, range)
}

/// Projected sign-gradient ascent for `config.steps` iterations from `init`.
///
/// Costs exactly `config.steps` input-gradient evaluations.
pub fn pgd<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    batch: Batch<'_, T>,
    config: &AttackConfig,
    init: &[T],
) -> Result<Vec<T>> {
    config.validate()?;
    check_budget(init, config.epsilon, batch.inputs.len())?;
    let mut delta = init.to_vec();
    for _ in 0..config.steps {
        let g = signed_gradient(model, batch, &delta)?;
        delta = step_and_project(batch.inputs, &delta, &g.sign, config.alpha, config.epsilon, config.range)?;
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchSpec, Classifier, GradCounter, Counted, LossTerm, ParamGrad};
    use proptest::prelude::*;

    const EPS: f64 = 8.0 / 255.0;

    #[test]
    fn projection_examples() {
        let out = project_linf(&[0.05f64, 0.01, -0.2], EPS).unwrap();
        assert_eq!(out, vec![EPS, 0.01, -EPS]);
        assert_eq!(project_linf(&[0.3f32, -0.1], 0.0).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(project_linf(&[0.1f32], -1.0), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn data_range_examples() {
        let r = DataRange::default();
        let d = clip_to_data_range(&[0.99f64, 0.5, 0.0], &[0.03, 0.02, -0.01], r);
        assert!((d[0] - 0.01).abs() < 1e-15);
        assert_eq!(d[1], 0.02);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn zero_budget_gives_zero_perturbation() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let model = Classifier::<f64>::new(ArchSpec::mlp(3, 5, 2), &mut rng).unwrap();
        let x = [0.2, 0.4, 0.6];
        let b = Batch::new(&x, &[1], &[0]);
        assert_eq!(fgsm_from(&model, b, &[0.0; 3], 0.1, 0.0).unwrap(), vec![0.0; 3]);
        let cfg = AttackConfig::new(0.0, 0.01, 5).unwrap();
        assert_eq!(pgd(&model, b, &cfg, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn init_outside_budget_is_rejected() {
        let model = Classifier::<f64>::zeros(ArchSpec::linear(2, 2)).unwrap();
        let b = Batch::new(&[0.5, 0.5], &[0], &[0]);
        assert!(fgsm_from(&model, b, &[0.5, 0.0], 0.1, 0.1).is_err());
    }

    #[test]
    fn pgd_single_step_is_fgsm_and_counts_gradients() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let model = Classifier::<f32>::new(ArchSpec::mlp(6, 8, 3), &mut rng).unwrap();
        let x: Vec<f32> = (0..12).map(|i| (i as f32 * 0.13) % 1.0).collect();
        let b = Batch::new(&x, &[0, 2], &[0, 1]);
        let zero = vec![0.0f32; 12];
        let counter = GradCounter::new();
        let counted = Counted::new(&model, &counter);
        let f = fgsm_from(&counted, b, &zero, EPS, EPS).unwrap();
        assert_eq!(counter.input_grads(), 1);
        let p = pgd(&counted, b, &AttackConfig::new(EPS, EPS, 1).unwrap(), &zero).unwrap();
        assert_eq!(counter.input_grads(), 2);
        assert_eq!(f, p);
        pgd(&counted, b, &AttackConfig::new(EPS, EPS / 4.0, 7).unwrap(), &zero).unwrap();
        assert_eq!(counter.input_grads(), 9);
        assert_eq!(counter.param_grads(), 0);
    }

    /// Wraps a model and negates its loss.
    struct Negated<'a>(&'a Classifier<f64>);

    impl Differentiable<f64> for Negated<'_> {
        fn arch(&self) -> &ArchSpec {
            self.0.arch()
        }
        fn forward(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
            self.0.forward(inputs, n)
        }
        fn loss_and_input_grad(&self, batch: Batch<'_, f64>) -> Result<InputGrad<f64>> {
            let mut g = self.0.loss_and_input_grad(batch)?;
            g.loss = -g.loss;
            g.grad.iter_mut().for_each(|v| *v = -*v);
            Ok(g)
        }
        fn loss_and_param_grad(&self, _: Batch<'_, f64>, _: &[&dyn LossTerm<f64>]) -> Result<ParamGrad<f64>> {
            unimplemented!()
        }
    }

    #[test]
    fn negated_loss_negates_step_direction() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let model = Classifier::<f64>::new(ArchSpec::mlp(5, 7, 3), &mut rng).unwrap();
        let x = [0.3, 0.4, 0.5, 0.6, 0.45];
        let b = Batch::new(&x, &[1], &[0]);
        let init = [0.0; 5];
        let up = fgsm_from(&model, b, &init, 0.01, 0.02).unwrap();
        let down = fgsm_from(&Negated(&model), b, &init, 0.01, 0.02).unwrap();
        for (u, d) in up.iter().zip(&down) {
            assert_eq!(*u, -*d);
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_bounded(
            delta in proptest::collection::vec(-1.0f32..1.0, 1..64),
            eps in 0.0f64..0.5,
        ) {
            let once = project_linf(&delta, eps).unwrap();
            let twice = project_linf(&once, eps).unwrap();
            prop_assert_eq!(&once, &twice);
            for (o, d) in once.iter().zip(&delta) {
                prop_assert!(o.abs() <= eps as f32);
                if d.abs() <= eps as f32 {
                    prop_assert_eq!(o, d);
                }
            }
        }

        #[test]
        fn clipping_keeps_inputs_valid_and_never_grows(
            pairs in proptest::collection::vec((0.0f64..=1.0, -0.1f64..0.1), 1..64),
        ) {
            let (x, d): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let c = clip_to_data_range(&x, &d, DataRange::default());
            for ((xi, di), ci) in x.iter().zip(&d).zip(&c) {
                prop_assert!(ci.abs() <= di.abs());
                let y = xi + ci;
                prop_assert!((0.0..=1.0).contains(&y));
            }
        }
    }
}
