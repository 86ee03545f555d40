//! Named parameter storage, the Adam optimizer, and binary checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"CRFMCKP1"
//! version u32      1
//! config  u64 len + UTF-8 bytes   (flat key=value echo of the run config)
//! count   u64      number of parameters
//! per parameter, in ascending name order:
//!   name  u16 len + UTF-8 bytes
//!   flags u8       bit 0 = trainable
//!   ndim  u8
//!   dims  ndim × u64
//!   data  ∏dims × f64
//! adam    u8 (0 or 1); if 1:
//!   t     u64
//!   per parameter, same order: m data then v data (each ∏dims × f64)
//! ```
//!
//! f64 values round-trip through `to_le_bytes`, so a saved and reloaded
//! model is bitwise identical to the original.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

const MAGIC: &[u8; 8] = b"CRFMCKP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    /// Shared so a forward graph can hold parameter leaves without copying
    /// megabytes of weights every step; mutation goes through
    /// [`Arc::make_mut`], which is in-place whenever no graph is alive.
    pub tensor: Arc<Tensor>,
    /// Non-trainable entries (batch-norm running statistics) are carried in
    /// the store and the checkpoint but never touched by the optimizer.
    pub trainable: bool,
}

/// Ordered map of named tensors. Iteration order is the ascending name
/// order, which keeps every whole-store walk deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.to_string(), ParamEntry { tensor: Arc::new(tensor), trainable });
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(self.entry(name)?.tensor.as_ref())
    }

    /// Shared handle to a parameter's current value (a cheap refcount bump).
    pub fn tensor_shared(&self, name: &str) -> Result<Arc<Tensor>> {
        Ok(Arc::clone(&self.entry(name)?.tensor))
    }

    /// Replaces the value of an existing entry; shapes must agree.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if entry.tensor.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param_set",
                detail: format!(
                    "{name}: {:?} vs {:?}",
                    entry.tensor.shape(),
                    value.shape()
                ),
            });
        }
        entry.tensor = Arc::new(value);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total scalar count across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Mutates one scalar in place; used by finite-difference probes.
    pub fn nudge(&mut self, name: &str, index: usize, value: f64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if index >= entry.tensor.len() {
            return Err(Error::Shape {
                op: "param_nudge",
                detail: format!("{name}[{index}] out of {}", entry.tensor.len()),
            });
        }
        Arc::make_mut(&mut entry.tensor).data_mut()[index] = value;
        Ok(())
    }
}

/// Adam configuration; the defaults are the standard ones.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment estimates, one pair per trainable parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Zero-initialized moments for every trainable entry in the store.
    pub fn new(store: &ParamStore) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, entry) in store.iter() {
            if entry.trainable {
                m.insert(name.clone(), Tensor::zeros(entry.tensor.shape().to_vec()));
                v.insert(name.clone(), Tensor::zeros(entry.tensor.shape().to_vec()));
            }
        }
        AdamState { t: 0, m, v }
    }
}

/// One Adam update over every trainable parameter.
///
/// `grads` must contain a gradient for each trainable entry (zero tensors
/// are fine); a missing one is an error rather than a silent skip, and a
/// gradient for an unknown or frozen parameter is rejected too.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for name in grads.keys() {
        match store.entries.get(name) {
            None => return Err(Error::UnknownParam(name.clone())),
            Some(e) if !e.trainable => {
                return Err(Error::Domain(format!(
                    "gradient supplied for non-trainable parameter {name}"
                )))
            }
            Some(_) => {}
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, entry) in store.entries.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        if g.shape() != entry.tensor.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{name}: grad {:?} vs param {:?}", g.shape(), entry.tensor.shape()),
            });
        }
        g.check_finite("adam_step")?;
        let m = state.m.get_mut(name).expect("moment exists for trainable param");
        let v = state.v.get_mut(name).expect("moment exists for trainable param");
        for ((theta, (mi, vi)), &gi) in Arc::make_mut(&mut entry.tensor)
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *theta -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    adam: Option<&AdamState>,
    config_echo: &str,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = config_echo.as_bytes();
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&(store.entries.len() as u64).to_le_bytes())?;
    for (name, entry) in store.iter() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("parameter name too long: {name}")));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[entry.trainable as u8])?;
        let shape = entry.tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("too many dimensions: {name}")));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in entry.tensor.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    match adam {
        None => w.write_all(&[0u8])?,
        Some(state) => {
            w.write_all(&[1u8])?;
            w.write_all(&state.t.to_le_bytes())?;
            for (name, entry) in store.iter() {
                if !entry.trainable {
                    continue;
                }
                let m = state
                    .m
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing Adam moment for {name}")))?;
                let v = state.v.get(name).expect("m/v keys match");
                for &x in m.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
                for &x in v.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Option<AdamState>, String)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config_echo = String::from_utf8(cfg)
        .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
    let count = read_u64(&mut r)? as usize;
    let mut store = ParamStore::new();
    let mut order: Vec<(String, bool, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let flags = read_u8(&mut r)?;
        let trainable = flags & 1 != 0;
        let ndim = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        for x in data.iter_mut() {
            *x = read_f64(&mut r)?;
        }
        store.insert(&name, Tensor::new(shape, data)?, trainable);
        order.push((name, trainable, len));
    }
    let has_adam = read_u8(&mut r)?;
    let adam = match has_adam {
        0 => None,
        1 => {
            let t = read_u64(&mut r)?;
            let mut state = AdamState::new(&store);
            state.t = t;
            for (name, trainable, len) in &order {
                if !trainable {
                    continue;
                }
                let m = state.m.get_mut(name).expect("trainable entry has moments");
                for x in m.data_mut().iter_mut().take(*len) {
                    *x = read_f64(&mut r)?;
                }
                let v = state.v.get_mut(name).expect("trainable entry has moments");
                for x in v.data_mut().iter_mut().take(*len) {
                    *x = read_f64(&mut r)?;
                }
            }
            Some(state)
        }
        other => {
            return Err(Error::Checkpoint(format!("bad Adam flag {other}")));
        }
    };
    Ok((store, adam, config_echo))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
