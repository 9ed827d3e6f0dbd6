//! Prior-guided initialization.
//!
//! Perturbations and gradient momentum are remembered per sample id and used
//! to start the next FGSM step instead of a fresh random draw:
//!
//! * `BP` reuses the previous batch's adversarial perturbation,
//! * `EP` reuses the sample's perturbation from the previous epoch,
//! * `MEP` keeps a per-sample momentum `G_E = μ·G_E' + G` and stores
//!   `η = Π[η' + α·sign(G_E)]` for the next epoch,
//! * `WMEP` weights the fresh sign-gradient by the attack quality `Γ`.
//!
//! A step is split in two: [`PgiState::attack`] spends the single gradient
//! and returns a [`PendingUpdate`]; [`PgiState::commit`] writes the stores
//! once `Γ` is known.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;

use memmap2::MmapMut;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, step_and_project, DataRange};
use crate::error::{Error, Result};
use crate::models::{Batch, Differentiable, InputGrad};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "BP")]
    Bp,
    #[serde(rename = "EP")]
    Ep,
    #[serde(rename = "MEP")]
    Mep,
    #[serde(rename = "WMEP")]
    Wmep,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Bp => "BP",
            Strategy::Ep => "EP",
            Strategy::Mep => "MEP",
            Strategy::Wmep => "WMEP",
        }
    }

    fn uses_momentum(self) -> bool {
        matches!(self, Strategy::Mep | Strategy::Wmep)
    }

    fn uses_store(self) -> bool {
        !matches!(self, Strategy::Bp)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BP" => Ok(Strategy::Bp),
            "EP" => Ok(Strategy::Ep),
            "MEP" => Ok(Strategy::Mep),
            "WMEP" => Ok(Strategy::Wmep),
            other => Err(Error::config("strategy", format!("unknown strategy {other:?}"))),
        }
    }
}

enum Backing<T> {
    Heap(Vec<T>),
    Mapped { map: MmapMut, capacity: usize },
}

/// Fixed-width rows keyed by sample id, on the heap or in a mapped file.
struct Slab<T> {
    item_len: usize,
    slots: BTreeMap<u64, usize>,
    backing: Backing<T>,
}

impl<T: Real> Slab<T> {
    fn heap(item_len: usize) -> Self {
        Slab {
            item_len,
            slots: BTreeMap::new(),
            backing: Backing::Heap(Vec::new()),
        }
    }

    fn mapped(item_len: usize, capacity: usize, path: &Path) -> Result<Self> {
        let bytes = (capacity * item_len * std::mem::size_of::<T>()).max(1) as u64;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(format!("creating spill file {}", path.display()), e))?;
        file.set_len(bytes)
            .map_err(|e| Error::io(format!("sizing spill file {}", path.display()), e))?;
        // SAFETY: the file was just created and sized by us and is not shared.
        let map = unsafe { MmapMut::map_mut(&file) }
            .map_err(|e| Error::io(format!("mapping spill file {}", path.display()), e))?;
        Ok(Slab {
            item_len,
            slots: BTreeMap::new(),
            backing: Backing::Mapped { map, capacity },
        })
    }

    fn values(&self) -> &[T] {
        match &self.backing {
            Backing::Heap(v) => v,
            // SAFETY: the mapping is page aligned, sized for `capacity` rows of
            // plain floating-point values and only accessed through this slab.
            Backing::Mapped { map, capacity } => unsafe {
                std::slice::from_raw_parts(map.as_ptr() as *const T, capacity * self.item_len)
            },
        }
    }

    fn values_mut(&mut self) -> &mut [T] {
        match &mut self.backing {
            Backing::Heap(v) => v,
            // SAFETY: as in `values`.
            Backing::Mapped { map, capacity } => unsafe {
                std::slice::from_raw_parts_mut(map.as_mut_ptr() as *mut T, *capacity * self.item_len)
            },
        }
    }

    fn get(&self, id: u64) -> Option<&[T]> {
        let slot = *self.slots.get(&id)?;
        Some(&self.values()[slot * self.item_len..(slot + 1) * self.item_len])
    }

    fn insert(&mut self, id: u64, row: &[T]) -> Result<()> {
        if row.len() != self.item_len {
            return Err(Error::InvalidInput(format!(
                "store row has {} values, expected {}",
                row.len(),
                self.item_len
            )));
        }
        let slot = match self.slots.get(&id) {
            Some(&s) => s,
            None => {
                let s = self.slots.len();
                match &mut self.backing {
                    Backing::Heap(v) => v.resize((s + 1) * self.item_len, T::zero()),
                    Backing::Mapped { capacity, .. } => {
                        if s >= *capacity {
                            return Err(Error::StoreCorruption(format!(
                                "spill file holds {capacity} samples; id {id} does not fit"
                            )));
                        }
                    }
                }
                self.slots.insert(id, s);
                s
            }
        };
        let len = self.item_len;
        self.values_mut()[slot * len..(slot + 1) * len].copy_from_slice(row);
        Ok(())
    }

    fn clear(&mut self) {
        self.slots.clear();
        if let Backing::Heap(v) = &mut self.backing {
            v.clear();
        }
    }
}

/// Per-sample perturbations, every entry inside the ε-ball.
pub struct PerturbationStore<T> {
    epsilon: f64,
    slab: Slab<T>,
}

impl<T: Real> PerturbationStore<T> {
    pub fn new(epsilon: f64, item_len: usize) -> Self {
        PerturbationStore {
            epsilon,
            slab: Slab::heap(item_len),
        }
    }

    /// Store backed by a memory-mapped file with room for `capacity` samples.
    pub fn with_spill(epsilon: f64, item_len: usize, capacity: usize, path: &Path) -> Result<Self> {
        Ok(PerturbationStore {
            epsilon,
            slab: Slab::mapped(item_len, capacity, path)?,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn item_len(&self) -> usize {
        self.slab.item_len
    }

    pub fn get(&self, id: u64) -> Option<&[T]> {
        self.slab.get(id)
    }

    /// Errors when the entry leaves the ε-ball.
    pub fn insert(&mut self, id: u64, delta: &[T]) -> Result<()> {
        if attacks::linf_norm(delta) > T::of(self.epsilon) {
            return Err(Error::StoreCorruption(format!("entry for id {id} exceeds epsilon")));
        }
        self.slab.insert(id, delta)
    }

    pub fn len(&self) -> usize {
        self.slab.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slab.slots.is_empty()
    }

    /// Ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.slab.slots.keys().copied()
    }

    pub fn clear(&mut self) {
        self.slab.clear();
    }
}

/// Per-sample accumulated sign-gradient momentum.
pub struct MomentumStore<T> {
    mu: f64,
    slab: Slab<T>,
}

impl<T: Real> MomentumStore<T> {
    pub fn new(mu: f64, item_len: usize) -> Self {
        MomentumStore {
            mu,
            slab: Slab::heap(item_len),
        }
    }

    pub fn with_spill(mu: f64, item_len: usize, capacity: usize, path: &Path) -> Result<Self> {
        Ok(MomentumStore {
            mu,
            slab: Slab::mapped(item_len, capacity, path)?,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn get(&self, id: u64) -> Option<&[T]> {
        self.slab.get(id)
    }

    pub fn insert(&mut self, id: u64, momentum: &[T]) -> Result<()> {
        if !momentum.iter().all(|v| v.is_finite()) {
            return Err(Error::StoreCorruption(format!("non-finite momentum for id {id}")));
        }
        self.slab.insert(id, momentum)
    }

    pub fn len(&self) -> usize {
        self.slab.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slab.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.slab.slots.keys().copied()
    }

    pub fn clear(&mut self) {
        self.slab.clear();
    }
}

/// The previous batch's adversarial perturbation, used by `BP`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchCarry<T> {
    pub delta: Option<Vec<T>>,
}

impl<T: Real> BatchCarry<T> {
    /// The carried perturbation truncated or tiled to `len` values.
    pub fn sized(&self, len: usize) -> Option<Vec<T>> {
        let d = self.delta.as_ref().filter(|d| !d.is_empty())?;
        Some(d.iter().copied().cycle().take(len).collect())
    }
}

/// I.i.d. `U(-ε, ε)` components; all zero when `ε = 0`.
pub fn initial_delta<T: Real, R: Rng + ?Sized>(len: usize, epsilon: f64, rng: &mut R) -> Vec<T> {
    if epsilon <= 0.0 {
        return vec![T::zero(); len];
    }
    (0..len).map(|_| T::of(rng.gen_range(-epsilon..=epsilon))).collect()
}

/// Attack quality `Γ = 1 - Acc(adv) / Acc(clean)`, in `[0, 1]`; `0` when nothing is
/// classified correctly on clean inputs.
pub fn compute_gamma(clean_correct: usize, adv_correct: usize) -> f64 {
    if clean_correct == 0 {
        return 0.0;
    }
    (1.0 - adv_correct as f64 / clean_correct as f64).clamp(0.0, 1.0)
}

/// Result of the gradient half of a prior-guided FGSM step.
#[derive(Debug, Clone)]
pub struct PendingUpdate<T> {
    pub delta_pgi: Vec<T>,
    pub delta_adv: Vec<T>,
    /// `sign(∇_x L(f(x + δ_pgi), y))`.
    pub sign: Vec<T>,
    /// Loss and logits at `x + δ_pgi`.
    pub eval: InputGrad<T>,
}

/// Stores and settings of one prior-guided initialization run.
pub struct PgiState<T> {
    pub strategy: Strategy,
    pub epsilon: f64,
    pub alpha: f64,
    pub range: DataRange,
    pub carry: BatchCarry<T>,
    pub perturbations: PerturbationStore<T>,
    pub momentum: MomentumStore<T>,
}

impl<T: Real> PgiState<T> {
    pub fn new(strategy: Strategy, epsilon: f64, alpha: f64, mu: f64, item_len: usize) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be finite and >= 0"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config("alpha", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::config("mu", format!("must lie in [0, 1), got {mu}")));
        }
        Ok(PgiState {
            strategy,
            epsilon,
            alpha,
            range: DataRange::default(),
            carry: BatchCarry::default(),
            perturbations: PerturbationStore::new(epsilon, item_len),
            momentum: MomentumStore::new(mu, item_len),
        })
    }

    /// Move both stores into memory-mapped files under `dir`.
    pub fn spill_to(&mut self, dir: &Path, capacity: usize) -> Result<()> {
        let len = self.perturbations.item_len();
        let mut perturbations = PerturbationStore::with_spill(self.epsilon, len, capacity, &dir.join("perturbations.bin"))?;
        let mut momentum = MomentumStore::with_spill(self.momentum.mu, len, capacity, &dir.join("momentum.bin"))?;
        for id in self.perturbations.ids().collect::<Vec<_>>() {
            perturbations.insert(id, self.perturbations.get(id).unwrap_or_default())?;
        }
        for id in self.momentum.ids().collect::<Vec<_>>() {
            momentum.insert(id, self.momentum.get(id).unwrap_or_default())?;
        }
        self.perturbations = perturbations;
        self.momentum = momentum;
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        self.momentum.mu
    }

    /// Starting perturbation `δ_pgi` for `batch` in 1-based `epoch`.
    ///
    /// Epoch 1, and `BP` without a carry, draw `U(-ε, ε)`; later epochs read the
    /// stores. The result is clipped to the data range.
    pub fn fetch_init<R: Rng + ?Sized>(&self, batch: Batch<'_, T>, epoch: usize, rng: &mut R) -> Result<Vec<T>> {
        if epoch == 0 {
            return Err(Error::InvalidInput("epochs are counted from 1".into()));
        }
        let len = batch.inputs.len();
        let item = self.perturbations.item_len();
        if batch.len() * item != len {
            return Err(Error::InvalidInput("batch inputs do not match the store row size".into()));
        }
        let mut delta = match self.strategy {
            Strategy::Bp => match self.carry.sized(len) {
                Some(d) => d,
                None => initial_delta(len, self.epsilon, rng),
            },
            _ if epoch == 1 => initial_delta(len, self.epsilon, rng),
            _ => {
                let mut out = Vec::with_capacity(len);
                for &id in batch.ids {
                    let row = self
                        .perturbations
                        .get(id)
                        .ok_or_else(|| Error::StoreCorruption(format!("no stored perturbation for id {id}")))?;
                    out.extend_from_slice(row);
                }
                out
            }
        };
        attacks::clip_to_data_range_in_place(batch.inputs, &mut delta, self.range);
        Ok(delta)
    }

    /// One gradient at `x + δ_pgi` and `δ_adv = clip(Π[δ_pgi + α·G])`. Stores are untouched.
    pub fn attack<M: Differentiable<T> + ?Sized>(
        &self,
        model: &M,
        batch: Batch<'_, T>,
        delta_pgi: Vec<T>,
    ) -> Result<PendingUpdate<T>> {
        if delta_pgi.len() != batch.inputs.len() {
            return Err(Error::InvalidInput("initial perturbation does not match the batch".into()));
        }
        if attacks::linf_norm(&delta_pgi) > T::of(self.epsilon) {
            return Err(Error::InvalidInput("initial perturbation exceeds the epsilon budget".into()));
        }
        let g = attacks::signed_gradient(model, batch, &delta_pgi)?;
        let delta_adv = step_and_project(batch.inputs, &delta_pgi, &g.sign, self.alpha, self.epsilon, self.range)?;
        Ok(PendingUpdate {
            delta_pgi,
            delta_adv,
            sign: g.sign,
            eval: g.eval,
        })
    }

    /// Write the stores for `pending` with attack quality `gamma` (used by `WMEP` only).
    ///
    /// A sample seen for the first time starts its momentum at `G` and stores `δ_adv`.
    pub fn commit(&mut self, batch: Batch<'_, T>, pending: &PendingUpdate<T>, gamma: f64) -> Result<()> {
        let item = self.perturbations.item_len();
        match self.strategy {
            Strategy::Bp => {
                self.carry.delta = Some(pending.delta_adv.clone());
            }
            Strategy::Ep => {
                for (k, &id) in batch.ids.iter().enumerate() {
                    self.perturbations.insert(id, &pending.delta_adv[k * item..(k + 1) * item])?;
                }
            }
            Strategy::Mep | Strategy::Wmep => {
                let mu = T::of(self.momentum.mu);
                let weight = if self.strategy == Strategy::Wmep {
                    T::of(gamma)
                } else {
                    T::one()
                };
                let mut momentum = vec![T::zero(); item];
                for (k, &id) in batch.ids.iter().enumerate() {
                    let rows = k * item..(k + 1) * item;
                    let g = &pending.sign[rows.clone()];
                    let next = match self.momentum.get(id) {
                        Some(prev) => {
                            for ((m, &p), &gi) in momentum.iter_mut().zip(prev).zip(g) {
                                *m = mu * p + weight * gi;
                            }
                            let dir: Vec<T> = momentum.iter().map(|m| m.sign0()).collect();
                            step_and_project(
                                &batch.inputs[rows.clone()],
                                &pending.delta_pgi[rows.clone()],
                                &dir,
                                self.alpha,
                                self.epsilon,
                                self.range,
                            )?
                        }
                        None => {
                            momentum.copy_from_slice(g);
                            pending.delta_adv[rows.clone()].to_vec()
                        }
                    };
                    self.momentum.insert(id, &momentum)?;
                    self.perturbations.insert(id, &next)?;
                }
            }
        }
        Ok(())
    }

    /// [`attack`](Self::attack) followed by [`commit`](Self::commit); returns `δ_adv`.
    pub fn generate_and_update<M: Differentiable<T> + ?Sized>(
        &mut self,
        model: &M,
        batch: Batch<'_, T>,
        delta_pgi: Vec<T>,
        gamma: f64,
    ) -> Result<Vec<T>> {
        let pending = self.attack(model, batch, delta_pgi)?;
        self.commit(batch, &pending, gamma)?;
        Ok(pending.delta_adv)
    }

    /// Errors unless the stores hold exactly `ids` (after a complete epoch).
    pub fn check_coverage(&self, ids: &[u64]) -> Result<()> {
        if !self.strategy.uses_store() {
            return Ok(());
        }
        let mut want: Vec<u64> = ids.to_vec();
        want.sort_unstable();
        want.dedup();
        if !self.perturbations.ids().eq(want.iter().copied()) {
            return Err(Error::StoreCorruption("perturbation store keys differ from the training ids".into()));
        }
        if self.strategy.uses_momentum() && !self.momentum.ids().eq(want.iter().copied()) {
            return Err(Error::StoreCorruption("momentum store keys differ from the training ids".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchSpec, Classifier, Counted, GradCounter, Param, ParamSet};
    use super::Strategy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 8.0 / 255.0;

    /// Two features, two classes, logits `W x + b`.
    fn linear(w: [f64; 4], b: [f64; 2]) -> Classifier<f64> {
        let params = ParamSet {
            params: vec![
                Param {
                    name: "layer0.weight".into(),
                    shape: vec![2, 2],
                    data: w.to_vec(),
                },
                Param {
                    name: "layer0.bias".into(),
                    shape: vec![2],
                    data: b.to_vec(),
                },
            ],
        };
        Classifier::from_params(ArchSpec::linear(2, 2), params).unwrap()
    }

    #[test]
    fn gamma_examples() {
        // accuracies 0.8 / 0.4 over ten samples
        assert_eq!(compute_gamma(8, 4), 0.5);
        assert_eq!(compute_gamma(7, 7), 0.0);
        assert_eq!(compute_gamma(0, 0), 0.0);
        assert_eq!(compute_gamma(5, 0), 1.0);
    }

    #[test]
    fn gamma_is_nonincreasing_in_adversarial_accuracy() {
        for clean in 1..20 {
            let mut last = f64::INFINITY;
            for adv in 0..=clean {
                let g = compute_gamma(clean, adv);
                assert!((0.0..=1.0).contains(&g) && g <= last);
                last = g;
            }
        }
    }

    #[test]
    fn initial_delta_moments_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = initial_delta(100_000, EPS, &mut rng);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        let se = (EPS * EPS / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
        assert!((var / (EPS * EPS / 3.0) - 1.0).abs() < 0.05, "var {var}");
        assert!(draws.iter().all(|d| d.abs() <= EPS));
        let again: Vec<f64> = initial_delta(100_000, EPS, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(draws, again);
        assert!(initial_delta::<f64, _>(10, 0.0, &mut rng).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn carry_is_truncated_or_tiled() {
        let carry = BatchCarry {
            delta: Some(vec![1.0f32, 2.0, 3.0, 4.0]),
        };
        assert_eq!(carry.sized(2), Some(vec![1.0, 2.0]));
        assert_eq!(carry.sized(6), Some(vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0]));
        assert_eq!(BatchCarry::<f32>::default().sized(3), None);
    }

    #[test]
    fn ep_returns_previous_epoch_entry() {
        let model = linear([1.0, -1.0, -1.0, 1.0], [0.0, 0.0]);
        let x = [0.5, 0.5, 0.4, 0.6];
        let labels = [0, 1];
        let ids = [10, 20];
        let batch = Batch::new(&x[..], &labels[..], &ids[..]);
        let mut state = PgiState::<f64>::new(Strategy::Ep, EPS, EPS, 0.3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = state.fetch_init(batch, 1, &mut rng).unwrap();
        let adv = state.generate_and_update(&model, batch, init, 0.0).unwrap();
        let next = state.fetch_init(batch, 2, &mut rng).unwrap();
        assert_eq!(next, adv);
        assert_eq!(state.perturbations.get(20).unwrap(), &adv[2..]);
        state.check_coverage(&ids).unwrap();
        assert!(state.check_coverage(&[10]).is_err());
        // a new id in a later epoch has no entry
        let other_ids = [10, 30];
        let err = state.fetch_init(Batch::new(&x[..], &labels[..], &other_ids[..]), 2, &mut rng);
        assert!(matches!(err, Err(Error::StoreCorruption(_))));
    }

    #[test]
    fn bp_carries_previous_batch() {
        let model = linear([1.0, -1.0, -1.0, 1.0], [0.0, 0.0]);
        let x = [0.5, 0.5, 0.4, 0.6];
        let labels = [0, 1];
        let ids = [0, 1];
        let batch = Batch::new(&x[..], &labels[..], &ids[..]);
        let mut state = PgiState::<f64>::new(Strategy::Bp, EPS, EPS, 0.3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = state.fetch_init(batch, 1, &mut rng).unwrap();
        let adv = state.generate_and_update(&model, batch, init, 0.0).unwrap();
        let small = Batch::new(&x[..2], &labels[..1], &ids[..1]);
        assert_eq!(state.fetch_init(small, 1, &mut rng).unwrap(), adv[..2].to_vec());
    }

    /// Hand trace on one sample of a linear model across two visits.
    ///
    /// With `W = [[1, -1], [-1, 1]]`, `b = 0` and label 0 the input gradient is
    /// `(p1 - 0)(W1 - W0) = p1 · (-2, 2)`, so `G = (-1, 1)` whenever `p1 > 0`.
    #[test]
    fn mep_two_visit_hand_trace() {
        let model = linear([1.0, -1.0, -1.0, 1.0], [0.0, 0.0]);
        let x = [0.5, 0.5];
        let labels = [0];
        let ids = [7];
        let batch = Batch::new(&x[..], &labels[..], &ids[..]);
        let (mu, alpha, eps) = (0.5, 0.01, 0.03);
        let mut state = PgiState::<f64>::new(Strategy::Mep, eps, alpha, mu, 2).unwrap();

        // first visit: δ_pgi = (0.02, 0.0)
        let d0 = vec![0.02, 0.0];
        let adv1 = state.generate_and_update(&model, batch, d0, 1.0).unwrap();
        let g = [-1.0, 1.0];
        assert_eq!(adv1, vec![0.02 + alpha * g[0], 0.0 + alpha * g[1]]);
        assert_eq!(state.momentum.get(7).unwrap(), &g);
        let eta1 = state.perturbations.get(7).unwrap().to_vec();
        assert_eq!(eta1, adv1);

        // second visit: G_E2 = μ·G + G = 1.5·G, η2 = Π[η1 + α·sign(G_E2)]
        let init = state.fetch_init(batch, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(init, eta1);
        let adv2 = state.generate_and_update(&model, batch, init, 1.0).unwrap();
        let expect_adv2: Vec<f64> = (0..2).map(|i| (eta1[i] + alpha * g[i]).clamp(-eps, eps)).collect();
        assert_eq!(adv2, expect_adv2);
        assert_eq!(state.momentum.get(7).unwrap(), &[mu * g[0] + g[0], mu * g[1] + g[1]]);
        let expect_eta2: Vec<f64> = (0..2).map(|i| (eta1[i] + alpha * g[i]).clamp(-eps, eps)).collect();
        assert_eq!(state.perturbations.get(7).unwrap(), &expect_eta2[..]);
    }

    fn random_batch(seed: u64, n: usize, d: usize) -> (Vec<f64>, Vec<usize>, Vec<u64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y = (0..n).map(|_| rng.gen_range(0..3)).collect();
        (x, y, (0..n as u64).collect())
    }

    /// Runs `visits` updates with a per-visit Γ and returns every sign-gradient seen.
    fn run_visits(
        strategy: Strategy,
        gammas: &[f64],
        mu: f64,
    ) -> (PgiState<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Classifier::<f64>::new(ArchSpec::mlp(6, 8, 3), &mut rng).unwrap();
        let (x, y, ids) = random_batch(5, 4, 6);
        let batch = Batch::new(&x[..], &y[..], &ids[..]);
        let mut state = PgiState::new(strategy, EPS, EPS, mu, 6).unwrap();
        let mut signs = Vec::new();
        let mut advs = Vec::new();
        for (t, &gamma) in gammas.iter().enumerate() {
            let init = state.fetch_init(batch, t + 1, &mut rng).unwrap();
            let pending = state.attack(&model, batch, init).unwrap();
            state.commit(batch, &pending, gamma).unwrap();
            signs.push(pending.sign.clone());
            advs.push(pending.delta_adv);
        }
        (state, signs, advs)
    }

    #[test]
    fn momentum_matches_geometric_oracle() {
        let gammas = [1.0, 0.7, 0.2, 0.9, 0.5];
        let mu = 0.3;
        let (state, signs, _) = run_visits(Strategy::Wmep, &gammas, mu);
        for id in 0..4u64 {
            let stored = state.momentum.get(id).unwrap();
            for (j, &m) in stored.iter().enumerate() {
                let i = id as usize * 6 + j;
                let t = gammas.len();
                // the first visit enters with weight 1
                let oracle: f64 = (0..t)
                    .map(|k| {
                        let w = if k == 0 { 1.0 } else { gammas[k] };
                        mu.powi((t - 1 - k) as i32) * w * signs[k][i]
                    })
                    .sum();
                let denom = oracle.abs().max(1e-12);
                assert!((m - oracle).abs() / denom < 1e-6 || (m - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wmep_with_unit_gamma_equals_mep() {
        let gammas = [1.0; 4];
        let (a, _, adv_a) = run_visits(Strategy::Wmep, &gammas, 0.3);
        let (b, _, adv_b) = run_visits(Strategy::Mep, &gammas, 0.3);
        assert_eq!(adv_a, adv_b);
        for id in 0..4 {
            assert_eq!(a.momentum.get(id), b.momentum.get(id));
            assert_eq!(a.perturbations.get(id), b.perturbations.get(id));
        }
    }

    #[test]
    fn mep_without_momentum_stores_adversarial_perturbation() {
        let (state, _, advs) = run_visits(Strategy::Mep, &[1.0], 0.0);
        let stored: Vec<f64> = (0..4).flat_map(|id| state.perturbations.get(id).unwrap().to_vec()).collect();
        assert_eq!(stored, advs[0]);
        // and with μ = 0 every later visit behaves like EP
        let (mep, _, mep_adv) = run_visits(Strategy::Mep, &[1.0; 3], 0.0);
        let (ep, _, ep_adv) = run_visits(Strategy::Ep, &[1.0; 3], 0.0);
        assert_eq!(mep_adv, ep_adv);
        for id in 0..4 {
            assert_eq!(mep.perturbations.get(id), ep.perturbations.get(id));
        }
    }

    #[test]
    fn one_gradient_per_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Classifier::<f64>::new(ArchSpec::mlp(6, 8, 3), &mut rng).unwrap();
        let counter = GradCounter::new();
        let counted = Counted::new(&model, &counter);
        let (x, y, ids) = random_batch(2, 4, 6);
        let batch = Batch::new(&x[..], &y[..], &ids[..]);
        for strategy in [Strategy::Bp, Strategy::Ep, Strategy::Mep, Strategy::Wmep] {
            let mut state = PgiState::new(strategy, EPS, EPS, 0.3, 6).unwrap();
            for epoch in 1..=3 {
                counter.reset();
                let init = state.fetch_init(batch, epoch, &mut rng).unwrap();
                state.generate_and_update(&counted, batch, init, 0.5).unwrap();
                assert_eq!(counter.gradients(), 1, "{strategy:?}");
            }
        }
    }

    #[test]
    fn spilled_store_behaves_like_heap_store() {
        let dir = tempfile::tempdir().unwrap();
        let mut heap = PgiState::<f64>::new(Strategy::Mep, EPS, EPS, 0.3, 6).unwrap();
        let mut mapped = PgiState::<f64>::new(Strategy::Mep, EPS, EPS, 0.3, 6).unwrap();
        mapped.spill_to(dir.path(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Classifier::<f64>::new(ArchSpec::mlp(6, 8, 3), &mut rng).unwrap();
        let (x, y, ids) = random_batch(2, 4, 6);
        let batch = Batch::new(&x[..], &y[..], &ids[..]);
        for epoch in 1..=3 {
            let a = heap.fetch_init(batch, epoch, &mut ChaCha8Rng::seed_from_u64(epoch as u64)).unwrap();
            let b = mapped.fetch_init(batch, epoch, &mut ChaCha8Rng::seed_from_u64(epoch as u64)).unwrap();
            assert_eq!(a, b);
            heap.generate_and_update(&model, batch, a, 1.0).unwrap();
            mapped.generate_and_update(&model, batch, b, 1.0).unwrap();
        }
        for id in 0..4 {
            assert_eq!(heap.perturbations.get(id), mapped.perturbations.get(id));
        }
        let extra_ids = [9u64];
        let one = Batch::new(&x[..6], &y[..1], &extra_ids[..]);
        let pending = mapped.attack(&model, one, vec![0.0; 6]).unwrap();
        assert!(mapped.commit(one, &pending, 1.0).is_err());
    }

    #[test]
    fn oversized_entries_are_rejected() {
        let mut store = PerturbationStore::<f64>::new(0.1, 2);
        assert!(store.insert(1, &[0.05, -0.1]).is_ok());
        assert!(matches!(store.insert(2, &[0.2, 0.0]), Err(Error::StoreCorruption(_))));
        let mut momentum = MomentumStore::<f64>::new(0.3, 1);
        assert!(momentum.insert(1, &[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn fetched_and_stored_entries_respect_budget(seed in 0u64..500, eps in 0.0f64..0.1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = Classifier::<f64>::new(ArchSpec::mlp(6, 8, 3), &mut rng).unwrap();
            let (x, y, ids) = random_batch(seed, 4, 6);
            let batch = Batch::new(&x[..], &y[..], &ids[..]);
            for strategy in [Strategy::Bp, Strategy::Ep, Strategy::Mep, Strategy::Wmep] {
                let mut state = PgiState::new(strategy, eps, eps.max(1e-3), 0.3, 6).unwrap();
                for epoch in 1..=3 {
                    let init = state.fetch_init(batch, epoch, &mut rng).unwrap();
                    prop_assert!(attacks::linf_norm(&init) <= eps);
                    let adv = state.generate_and_update(&model, batch, init, 0.6).unwrap();
                    prop_assert!(attacks::linf_norm(&adv) <= eps);
                    for (xi, di) in x.iter().zip(&adv) {
                        prop_assert!((0.0..=1.0).contains(&(xi + di)));
                    }
                    for id in state.perturbations.ids() {
                        prop_assert!(attacks::linf_norm(state.perturbations.get(id).unwrap()) <= eps);
                    }
                }
            }
        }
    }
}
