//! In-memory labelled datasets with stable sample ids.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::real::Real;

/// Sample-major inputs in the data range with labels and ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Vec<T>,
    pub labels: Vec<usize>,
    /// Unique, stable across epochs (the index in the source archive).
    pub ids: Vec<u64>,
    /// `[c, h, w]` or `[features]`.
    pub sample_shape: Vec<usize>,
    pub num_classes: usize,
}

/// An owned mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedBatch<T> {
    pub inputs: Vec<T>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl<T> OwnedBatch<T> {
    pub fn as_batch(&self) -> Batch<'_, T> {
        Batch::new(&self.inputs, &self.labels, &self.ids)
    }
}

impl<T: Real> Dataset<T> {
    pub fn new(inputs: Vec<T>, labels: Vec<usize>, ids: Vec<u64>, sample_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        let data = Dataset {
            inputs,
            labels,
            ids,
            sample_shape,
            num_classes,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.sample_len();
        if d == 0 || self.num_classes == 0 {
            return Err(Error::InvalidInput("dataset needs a nonempty sample shape and classes".into()));
        }
        if self.inputs.len() != self.labels.len() * d || self.ids.len() != self.labels.len() {
            return Err(Error::InvalidInput(format!(
                "dataset arrays disagree: {} inputs, {} labels, {} ids for sample size {d}",
                self.inputs.len(),
                self.labels.len(),
                self.ids.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {} classes", self.num_classes)));
        }
        let mut sorted = self.ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("sample ids must be unique".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, index: usize) -> &[T] {
        let d = self.sample_len();
        &self.inputs[index * d..(index + 1) * d]
    }

    /// Batch of the given positions, in order.
    pub fn gather(&self, indices: &[usize]) -> OwnedBatch<T> {
        let d = self.sample_len();
        let mut inputs = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        OwnedBatch {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Dataset of the given positions; ids are kept.
    pub fn select(&self, indices: &[usize]) -> Self {
        let b = self.gather(indices);
        Dataset {
            inputs: b.inputs,
            labels: b.labels,
            ids: b.ids,
            sample_shape: self.sample_shape.clone(),
            num_classes: self.num_classes,
        }
    }

    /// `size` distinct samples drawn with `seed`, in ascending source order.
    pub fn subset(&self, size: usize, seed: u64) -> Result<Self> {
        if size > self.len() {
            return Err(Error::config(
                "subset_size",
                format!("{size} exceeds the {} available samples", self.len()),
            ));
        }
        let mut positions: Vec<usize> = (0..self.len()).collect();
        positions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        positions.truncate(size);
        positions.sort_unstable();
        Ok(self.select(&positions))
    }

    /// Consecutive batches of at most `batch_size` in storage order.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = OwnedBatch<T>> + '_ {
        let order: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.gather(&c))
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            inputs: crate::real::cast_vec(&self.inputs),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
            sample_shape: self.sample_shape.clone(),
            num_classes: self.num_classes,
        }
    }
}
