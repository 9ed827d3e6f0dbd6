//! Versioned binary container for resumable training state.
//!
//! Layout (little endian): magic, `u32` version, `u64`-prefixed JSON
//! metadata, `u32` array count, then per array its name, dtype tag, shape,
//! element count and payload. Arrays are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::{ArchSpec, Classifier, GradCounter, Param, ParamSet};
use crate::pgi::{BatchCarry, PgiState, Strategy};
use crate::real::Real;
use crate::trainer::{RunHistory, Sgd, TrainConfig, Trainer};
use crate::wa::EmaState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PGKCKPT\0";

/// Typed array payload.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U64(_) => 2,
        }
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U64(_) => "u64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_real<T: Real>(values: &[T]) -> Self {
        if T::DTYPE == "f32" {
            ArrayData::F32(values.iter().map(|v| v.as_f64() as f32).collect())
        } else {
            ArrayData::F64(values.iter().map(|v| v.as_f64()).collect())
        }
    }

    fn to_real<T: Real>(&self, name: &str) -> Result<Vec<T>> {
        match (self, T::DTYPE) {
            (ArrayData::F32(v), "f32") => Ok(v.iter().map(|&x| T::of(x as f64)).collect()),
            (ArrayData::F64(v), "f64") => Ok(v.iter().map(|&x| T::of(x)).collect()),
            _ => Err(Error::Checkpoint(format!(
                "array {name} has dtype {}, expected {}",
                self.dtype(),
                T::DTYPE
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// Structured metadata plus named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: Value,
    pub arrays: BTreeMap<String, NamedArray>,
}

impl Container {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) {
        self.arrays.insert(name.into(), NamedArray { shape, data });
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("array {name}: shape {:?} does not match {} values", a.shape, a.data.len())));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.data.tag());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(a.data.len() as u64).to_le_bytes());
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version == 0 || version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let meta_len = r.u64("metadata length")? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32("array count")?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("array name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "array name")?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let ctx = |what: &str| format!("array {name}: {what}");
            let tag = r.take(1, &ctx("dtype"))?[0];
            let ndim = r.u32(&ctx("rank"))? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64(&ctx("shape")).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = r.u64(&ctx("length"))? as usize;
            if shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)) != Some(len) {
                return Err(Error::Checkpoint(format!("array {name}: length {len} does not match shape {shape:?}")));
            }
            let width = if tag == 0 { 4 } else { 8 };
            let payload = r.take(
                len.checked_mul(width).ok_or_else(|| Error::Checkpoint(ctx("length overflows")))?,
                &ctx("payload"),
            )?;
            let data = match tag {
                0 => ArrayData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::U64(payload.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                t => return Err(Error::Checkpoint(format!("array {name}: unknown dtype tag {t}"))),
            };
            if arrays.insert(name.clone(), NamedArray { shape, data }).is_some() {
                return Err(Error::Checkpoint(format!("array {name} appears twice")));
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last array", bytes.len() - r.at)));
        }
        Ok(Container { metadata, arrays })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("{what}: truncated at byte {}", self.at))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmaMeta {
    kappa: f64,
    nu: f64,
    clamp_max: f64,
    updates: u64,
    averaged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PgiMeta {
    strategy: Strategy,
    epsilon: f64,
    alpha: f64,
    mu: f64,
    item_len: usize,
    carry: bool,
}

/// Trainer fields recorded next to the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerMeta {
    dtype: String,
    epoch: usize,
    config: TrainConfig,
    arch: ArchSpec,
    history: RunHistory,
    ema: Option<EmaMeta>,
    pgi: Option<PgiMeta>,
    /// Random streams are derived from `(seed, epoch)`, so no generator state is stored.
    rng: String,
}

const RNG_NOTE: &str = "derived from (seed, epoch, purpose)";

fn put_params<T: Real>(c: &mut Container, prefix: &str, set: &ParamSet<T>) {
    for p in &set.params {
        c.insert(format!("{prefix}/{}", p.name), p.shape.clone(), ArrayData::from_real(&p.data));
    }
}

fn get_params<T: Real>(c: &Container, prefix: &str, like: &ParamSet<T>) -> Result<ParamSet<T>> {
    let params = like
        .params
        .iter()
        .map(|p| {
            let name = format!("{prefix}/{}", p.name);
            let a = c.array(&name)?;
            if a.shape != p.shape {
                return Err(Error::Checkpoint(format!("array {name}: shape {:?}, expected {:?}", a.shape, p.shape)));
            }
            Ok(Param {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: a.data.to_real(&name)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet { params })
}

fn put_rows<T: Real>(c: &mut Container, prefix: &str, item_len: usize, ids: Vec<u64>, row: impl Fn(u64) -> Vec<T>) {
    let values: Vec<T> = ids.iter().flat_map(|&id| row(id)).collect();
    c.insert(format!("{prefix}/ids"), vec![ids.len()], ArrayData::U64(ids));
    let n = values.len() / item_len.max(1);
    c.insert(format!("{prefix}/values"), vec![n, item_len], ArrayData::from_real(&values));
}

fn get_rows<T: Real>(c: &Container, prefix: &str, item_len: usize) -> Result<Vec<(u64, Vec<T>)>> {
    let ids_name = format!("{prefix}/ids");
    let values_name = format!("{prefix}/values");
    let ids = match &c.array(&ids_name)?.data {
        ArrayData::U64(v) => v.clone(),
        other => return Err(Error::Checkpoint(format!("array {ids_name} has dtype {}", other.dtype()))),
    };
    let values_arr = c.array(&values_name)?;
    if values_arr.shape != [ids.len(), item_len] {
        return Err(Error::Checkpoint(format!(
            "array {values_name}: shape {:?} does not match {} ids of {item_len} values",
            values_arr.shape,
            ids.len()
        )));
    }
    let values: Vec<T> = values_arr.data.to_real(&values_name)?;
    Ok(ids.into_iter().zip(values.chunks(item_len.max(1)).map(<[T]>::to_vec)).collect())
}

/// Snapshot of a trainer between epochs; `extra` is stored under `"experiment"`.
pub fn trainer_to_container<T: Real>(trainer: &Trainer<T>, extra: Option<Value>) -> Result<Container> {
    let mut c = Container::default();
    put_params(&mut c, "params", trainer.model.params());
    put_params(&mut c, "velocity", &trainer.optimizer.velocity);
    let ema = trainer.ema.as_ref().map(|e| {
        if let Some(w) = &e.w_tilde {
            put_params(&mut c, "ema", w);
        }
        EmaMeta {
            kappa: e.kappa,
            nu: e.nu,
            clamp_max: e.clamp_max,
            updates: e.updates,
            averaged: e.w_tilde.is_some(),
        }
    });
    let pgi = trainer.pgi.as_ref().map(|p| {
        let item = p.perturbations.item_len();
        put_rows(&mut c, "pgi/perturbations", item, p.perturbations.ids().collect(), |id| {
            p.perturbations.get(id).map(<[T]>::to_vec).unwrap_or_default()
        });
        put_rows(&mut c, "pgi/momentum", item, p.momentum.ids().collect(), |id| {
            p.momentum.get(id).map(<[T]>::to_vec).unwrap_or_default()
        });
        if let Some(d) = &p.carry.delta {
            c.insert("pgi/carry", vec![d.len()], ArrayData::from_real(d));
        }
        PgiMeta {
            strategy: p.strategy,
            epsilon: p.epsilon,
            alpha: p.alpha,
            mu: p.mu(),
            item_len: item,
            carry: p.carry.delta.is_some(),
        }
    });
    let meta = TrainerMeta {
        dtype: T::DTYPE.into(),
        epoch: trainer.epoch,
        config: trainer.config.clone(),
        arch: trainer.model.arch().clone(),
        history: trainer.history.clone(),
        ema,
        pgi,
        rng: RNG_NOTE.into(),
    };
    let mut metadata = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "trainer": serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
    });
    if let Some(extra) = extra {
        metadata["experiment"] = extra;
    }
    c.metadata = metadata;
    Ok(c)
}

/// Rebuild a trainer from [`trainer_to_container`] output.
pub fn trainer_from_container<T: Real>(c: &Container) -> Result<Trainer<T>> {
    let meta: TrainerMeta = serde_json::from_value(c.metadata.get("trainer").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Checkpoint(format!("trainer metadata: {e}")))?;
    if meta.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("checkpoint holds {} values, expected {}", meta.dtype, T::DTYPE)));
    }
    let template = Classifier::<T>::zeros(meta.arch.clone())?;
    let model = Classifier::from_params(meta.arch.clone(), get_params(c, "params", template.params())?)?;
    let mut optimizer = Sgd::new(meta.config.optimizer, model.params());
    optimizer.velocity = get_params(c, "velocity", model.params())?;
    let ema = match &meta.ema {
        None => None,
        Some(m) => {
            let mut e = EmaState::new(m.kappa, m.nu, m.clamp_max)?;
            e.updates = m.updates;
            if m.averaged {
                e.w_tilde = Some(get_params(c, "ema", model.params())?);
            }
            Some(e)
        }
    };
    let pgi = match &meta.pgi {
        None => None,
        Some(m) => {
            let mut p = PgiState::new(m.strategy, m.epsilon, m.alpha, m.mu, m.item_len)?;
            p.range = meta.config.range;
            for (id, row) in get_rows::<T>(c, "pgi/perturbations", m.item_len)? {
                p.perturbations.insert(id, &row)?;
            }
            for (id, row) in get_rows::<T>(c, "pgi/momentum", m.item_len)? {
                p.momentum.insert(id, &row)?;
            }
            if m.carry {
                p.carry = BatchCarry {
                    delta: Some(c.array("pgi/carry")?.data.to_real("pgi/carry")?),
                };
            }
            Some(p)
        }
    };
    if meta.history.records.len() != meta.epoch {
        return Err(Error::Checkpoint(format!(
            "history has {} records for {} completed epochs",
            meta.history.records.len(),
            meta.epoch
        )));
    }
    meta.config.validate()?;
    Ok(Trainer {
        config: meta.config,
        model,
        optimizer,
        ema,
        pgi,
        history: meta.history,
        steps: Vec::new(),
        epoch: meta.epoch,
        counter: GradCounter::new(),
    })
}

pub fn save_checkpoint<T: Real>(trainer: &Trainer<T>, extra: Option<Value>, path: &Path) -> Result<()> {
    trainer_to_container(trainer, extra)?.save(path)
}

/// The trainer and the `"experiment"` metadata, if any.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Trainer<T>, Option<Value>)> {
    let c = Container::load(path)?;
    let trainer = trainer_from_container(&c)?;
    Ok((trainer, c.metadata.get("experiment").cloned()))
}
