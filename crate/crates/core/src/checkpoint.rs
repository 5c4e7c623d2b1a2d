//! Binary checkpoints: parameters, optimizer moments and loop position.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "ISSRCKPT" | u32 version
//! u32 len | config text (utf-8) | u64 config hash
//! u64 epoch | u64 batch | u64 step | u64 adam step
//! u64 best epoch | f64 best recall@10 | u64 stale epochs
//! u32 tensor count | { u32 len | name | tensor }*
//! ```
//!
//! Tensor values are stored as f64 so a save/load cycle is lossless.
//! Sampling streams are pure functions of `(seed, epoch, step)`, so the
//! loop position is the entire random state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::numerics::{AdamConfig, AdamState, DType, Tensor};

const MAGIC: &[u8; 8] = b"ISSRCKPT";
const VERSION: u32 = 1;

/// Early-stopping bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    /// Next epoch to run (0-based).
    pub epoch: usize,
    /// Next batch within `epoch`.
    pub batch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub stale_epochs: usize,
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            epoch: 0,
            batch: 0,
            step: 0,
            best_epoch: 0,
            best_recall: f64::NEG_INFINITY,
            stale_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    pub progress: Progress,
}

fn adam_config(config: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    }
}

impl Checkpoint {
    /// Freshly initialized model with zeroed optimizer state.
    pub fn initial(config: TrainConfig, num_users: usize, num_items: usize) -> Self {
        let model = Model::new(config, num_users, num_items);
        let adam = {
            let refs: Vec<&Tensor> = model.params.named_tensors().into_iter().map(|(_, t)| t).collect();
            AdamState::new(adam_config(&model.config), &refs)
        };
        Checkpoint {
            model,
            adam,
            progress: Progress::default(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let config = &self.model.config;
        let text = config.to_config_text();
        let p = &self.progress;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&config.hash().to_le_bytes())?;
        for v in [p.epoch as u64, p.batch as u64, p.step, self.adam.step, p.best_epoch as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&p.best_recall.to_le_bytes())?;
        w.write_all(&(p.stale_epochs as u64).to_le_bytes())?;

        let named = self.model.params.named_tensors();
        let mut entries: Vec<(String, &Tensor)> = Vec::with_capacity(3 * named.len());
        for (i, (name, t)) in named.iter().enumerate() {
            entries.push((name.clone(), t));
            entries.push((format!("adam.m.{name}"), &self.adam.first_moment[i]));
            entries.push((format!("adam.v.{name}"), &self.adam.second_moment[i]));
        }
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w, DType::F64)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let ck = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(ck)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let text = read_string(r)?;
        let config = TrainConfig::from_config_text(&text)?;
        let hash = read_u64(r)?;
        if hash != config.hash() {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let epoch = read_u64(r)? as usize;
        let batch = read_u64(r)? as usize;
        let step = read_u64(r)?;
        let adam_step = read_u64(r)?;
        let best_epoch = read_u64(r)? as usize;
        let best_recall = f64::from_le_bytes(read_array(r)?);
        let stale_epochs = read_u64(r)? as usize;

        let count = read_u32(r)? as usize;
        let mut tensors = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let name = read_string(r)?;
            let t = Tensor::read_from(r)?;
            tensors.insert(name, t);
        }
        let shape_of = |name: &str| {
            tensors
                .get(name)
                .map(|t| t.rows())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let num_items = shape_of("emb.items")?;
        let num_users = shape_of("emb.users")?;

        let mut ck = Checkpoint::initial(config, num_users, num_items);
        let names: Vec<String> = ck.model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
        if tensors.len() != 3 * names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                3 * names.len(),
                tensors.len()
            )));
        }
        let mut take = |name: &str, slot: &mut Tensor| -> Result<()> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape != slot.shape {
                return Err(Error::ShapeMismatch {
                    expected: slot.shape.clone(),
                    actual: t.shape,
                });
            }
            *slot = t;
            Ok(())
        };
        for (name, slot) in names.iter().zip(ck.model.params.tensors_mut()) {
            take(name, slot)?;
        }
        for (i, name) in names.iter().enumerate() {
            take(&format!("adam.m.{name}"), &mut ck.adam.first_moment[i])?;
            take(&format!("adam.v.{name}"), &mut ck.adam.second_moment[i])?;
        }
        ck.adam.step = adam_step;
        ck.progress = Progress {
            epoch,
            batch,
            step,
            best_epoch,
            best_recall,
            stale_epochs,
        };
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn params(&self) -> &ModelParams {
        &self.model.params
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("string of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}
