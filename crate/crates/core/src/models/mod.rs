//! Differentiable classifiers with exact input and parameter gradients.

mod arch;
mod net;
mod params;

use std::cell::Cell;

pub use arch::{ArchSpec, LayerSpec};
pub use net::{Classifier, Mode};
pub use params::{Param, ParamSet};

use crate::error::{Error, Result};
use crate::real::Real;
use net::ensure_finite;

/// A borrowed mini-batch: sample-major inputs, labels and stable sample ids.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, T> {
    pub inputs: &'a [T],
    pub labels: &'a [usize],
    pub ids: &'a [u64],
}

impl<'a, T> Batch<'a, T> {
    pub fn new(inputs: &'a [T], labels: &'a [usize], ids: &'a [u64]) -> Self {
        Batch { inputs, labels, ids }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same labels and ids, different inputs (typically `x + delta`).
    pub fn with_inputs<'b>(&self, inputs: &'b [T]) -> Batch<'b, T>
    where
        'a: 'b,
    {
        Batch {
            inputs,
            labels: self.labels,
            ids: self.ids,
        }
    }
}

/// Result of an input-gradient evaluation.
#[derive(Debug, Clone)]
pub struct InputGrad<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    /// Gradient of the mean loss with respect to the inputs.
    pub grad: Vec<T>,
    pub logits: Vec<T>,
}

/// Result of a parameter-gradient evaluation.
#[derive(Debug, Clone)]
pub struct ParamGrad<T> {
    /// `ce + sum(extra)`.
    pub loss: T,
    pub ce: T,
    /// Value of each extra loss term, in the order given.
    pub extra: Vec<T>,
    pub grads: ParamSet<T>,
    /// Logits of the main batch.
    pub logits: Vec<T>,
    /// Logits of each term's auxiliary inputs, for terms that have them.
    pub aux_logits: Vec<Vec<T>>,
}

/// Value and logit-gradients of an additional differentiable loss term.
#[derive(Debug, Clone)]
pub struct TermValue<T> {
    pub value: T,
    /// Gradient with respect to the main batch logits.
    pub d_logits: Vec<T>,
    /// Gradient with respect to the auxiliary logits, when the term has auxiliary inputs.
    pub d_aux: Option<Vec<T>>,
}

/// A scalar loss added to the cross-entropy in [`Differentiable::loss_and_param_grad`].
///
/// A term may request one auxiliary forward pass on its own inputs; the main and
/// auxiliary batches are then evaluated jointly so the gradient is exact.
pub trait LossTerm<T: Real> {
    fn auxiliary_inputs(&self) -> Option<&[T]> {
        None
    }

    fn evaluate(&self, logits: &[T], aux_logits: Option<&[T]>, n: usize, classes: usize) -> Result<TermValue<T>>;
}

/// The identically-zero loss term.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroTerm;

impl<T: Real> LossTerm<T> for ZeroTerm {
    fn evaluate(&self, logits: &[T], _aux: Option<&[T]>, _n: usize, _classes: usize) -> Result<TermValue<T>> {
        Ok(TermValue {
            value: T::zero(),
            d_logits: vec![T::zero(); logits.len()],
            d_aux: None,
        })
    }
}

/// Operations the attacks and trainers need from a model.
pub trait Differentiable<T: Real> {
    fn arch(&self) -> &ArchSpec;

    fn forward(&self, inputs: &[T], n: usize) -> Result<Vec<T>>;

    fn loss_and_input_grad(&self, batch: Batch<'_, T>) -> Result<InputGrad<T>>;

    fn loss_and_param_grad(&self, batch: Batch<'_, T>, extra: &[&dyn LossTerm<T>]) -> Result<ParamGrad<T>>;

    fn num_classes(&self) -> usize {
        self.arch().num_classes
    }

    fn input_len(&self) -> usize {
        self.arch().input_len()
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> Result<(T, Vec<T>)> {
    let n = labels.len();
    if logits.len() != n * classes || n == 0 {
        return Err(Error::InvalidInput(format!(
            "logits of length {} do not match {n} x {classes}",
            logits.len()
        )));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for ((row, g), &label) in logits.chunks(classes).zip(grad.chunks_mut(classes)).zip(labels) {
        if label >= classes {
            return Err(Error::InvalidInput(format!("label {label} out of range for {classes} classes")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - max).exp();
            sum = sum + *gi;
        }
        total = total + (sum.ln() + max - row[label]);
        for gi in g.iter_mut() {
            *gi = *gi / sum * inv_n;
        }
        g[label] = g[label] - inv_n;
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NumericOverflow("non-finite cross-entropy".into()));
    }
    Ok((loss, grad))
}

/// Index of the largest logit in each row.
pub fn argmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Number of rows whose argmax equals the label.
pub fn count_correct<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> usize {
    argmax_rows(logits, classes)
        .into_iter()
        .zip(labels)
        .filter(|(p, l)| p == *l)
        .count()
}

impl<T: Real> Differentiable<T> for Classifier<T> {
    fn arch(&self) -> &ArchSpec {
        Classifier::arch(self)
    }

    fn forward(&self, inputs: &[T], n: usize) -> Result<Vec<T>> {
        self.logits(inputs, n)
    }

    fn loss_and_input_grad(&self, batch: Batch<'_, T>) -> Result<InputGrad<T>> {
        let n = batch.len();
        self.check_inputs(batch.inputs, n)?;
        let trace = self.trace(batch.inputs, n, true);
        ensure_finite(trace.logits(), "logits")?;
        let (loss, d_logits) = softmax_cross_entropy(trace.logits(), batch.labels, self.num_classes())?;
        let grad = self.backward(&trace, d_logits, true, None).unwrap_or_default();
        Ok(InputGrad {
            loss,
            grad,
            logits: trace.logits().to_vec(),
        })
    }

    fn loss_and_param_grad(&self, batch: Batch<'_, T>, extra: &[&dyn LossTerm<T>]) -> Result<ParamGrad<T>> {
        let n = batch.len();
        let classes = self.num_classes();
        self.check_inputs(batch.inputs, n)?;

        // Main batch followed by every auxiliary batch, evaluated in one pass.
        let aux: Vec<Option<&[T]>> = extra.iter().map(|t| t.auxiliary_inputs()).collect();
        let aux_count = aux.iter().flatten().count();
        let joint_inputs;
        let inputs = if aux_count == 0 {
            batch.inputs
        } else {
            let mut buf = batch.inputs.to_vec();
            for a in aux.iter().flatten() {
                if a.len() != batch.inputs.len() {
                    return Err(Error::InvalidInput(
                        "auxiliary inputs must have the shape of the main batch".into(),
                    ));
                }
                buf.extend_from_slice(a);
            }
            joint_inputs = buf;
            &joint_inputs[..]
        };
        let total_n = n * (1 + aux_count);
        let trace = self.trace(inputs, total_n, true);
        let all_logits = trace.logits();
        ensure_finite(all_logits, "logits")?;
        let block = n * classes;
        let main_logits = &all_logits[..block];
        let (ce, mut d_main) = softmax_cross_entropy(main_logits, batch.labels, classes)?;

        let mut d_all = vec![T::zero(); all_logits.len()];
        let mut values = Vec::with_capacity(extra.len());
        let mut aux_logits = Vec::with_capacity(aux_count);
        let mut aux_slot = 0;
        let mut loss = ce;
        for (term, a) in extra.iter().zip(&aux) {
            let term_aux = if a.is_some() {
                aux_slot += 1;
                let lo = aux_slot * block;
                aux_logits.push(all_logits[lo..lo + block].to_vec());
                Some(&all_logits[lo..lo + block])
            } else {
                None
            };
            let tv = term.evaluate(main_logits, term_aux, n, classes)?;
            if tv.d_logits.len() != block {
                return Err(Error::InvalidInput("loss term gradient has the wrong length".into()));
            }
            for (d, g) in d_main.iter_mut().zip(&tv.d_logits) {
                *d = *d + *g;
            }
            match (term_aux, tv.d_aux) {
                (Some(_), Some(da)) if da.len() == block => {
                    let lo = aux_slot * block;
                    for (d, g) in d_all[lo..lo + block].iter_mut().zip(&da) {
                        *d = *d + *g;
                    }
                }
                (Some(_), _) => {
                    return Err(Error::InvalidInput(
                        "loss term with auxiliary inputs must return their gradient".into(),
                    ))
                }
                _ => {}
            }
            loss = loss + tv.value;
            values.push(tv.value);
        }
        if !loss.is_finite() {
            return Err(Error::NumericOverflow("non-finite total loss".into()));
        }
        d_all[..block].copy_from_slice(&d_main);

        let mut grads = ParamSet::zeros_like(self.params());
        self.backward(&trace, d_all, false, Some(&mut grads));
        Ok(ParamGrad {
            loss,
            ce,
            extra: values,
            grads,
            logits: main_logits.to_vec(),
            aux_logits,
        })
    }
}

/// Counts of model evaluations seen through a [`Counted`] wrapper.
#[derive(Debug, Default)]
pub struct GradCounter {
    input_grads: Cell<u64>,
    param_grads: Cell<u64>,
    forwards: Cell<u64>,
}

impl GradCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input_grads(&self) -> u64 {
        self.input_grads.get()
    }

    pub fn param_grads(&self) -> u64 {
        self.param_grads.get()
    }

    /// Gradient evaluations of either kind.
    pub fn gradients(&self) -> u64 {
        self.input_grads() + self.param_grads()
    }

    /// Gradient-free forward passes.
    pub fn forwards(&self) -> u64 {
        self.forwards.get()
    }

    pub fn reset(&self) {
        self.input_grads.set(0);
        self.param_grads.set(0);
        self.forwards.set(0);
    }
}

/// Instrumented model wrapper that counts every evaluation it forwards.
pub struct Counted<'a, M> {
    inner: &'a M,
    counter: &'a GradCounter,
}

impl<'a, M> Counted<'a, M> {
    pub fn new(inner: &'a M, counter: &'a GradCounter) -> Self {
        Counted { inner, counter }
    }
}

impl<T: Real, M: Differentiable<T>> Differentiable<T> for Counted<'_, M> {
    fn arch(&self) -> &ArchSpec {
        self.inner.arch()
    }

    fn forward(&self, inputs: &[T], n: usize) -> Result<Vec<T>> {
        self.counter.forwards.set(self.counter.forwards.get() + 1);
        self.inner.forward(inputs, n)
    }

    fn loss_and_input_grad(&self, batch: Batch<'_, T>) -> Result<InputGrad<T>> {
        self.counter.input_grads.set(self.counter.input_grads.get() + 1);
        self.inner.loss_and_input_grad(batch)
    }

    fn loss_and_param_grad(&self, batch: Batch<'_, T>, extra: &[&dyn LossTerm<T>]) -> Result<ParamGrad<T>> {
        self.counter.param_grads.set(self.counter.param_grads.get() + 1);
        self.inner.loss_and_param_grad(batch, extra)
    }
}
