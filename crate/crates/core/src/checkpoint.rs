//! Binary snapshots of a [`Learner`] between tasks.
//!
//! Layout: 8-byte magic, `u32` version, `u64` manifest length, the JSON
//! manifest, then every parameter's values as little-endian `f64` in
//! manifest order. Optimizer moments are not stored since each task starts
//! a fresh optimizer.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ParadigmConfig, TrainConfig};
use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::harness::{Learner, PackNetState, ReplayEntry};
use crate::metrics::{SuccessRecord, UsageLog};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPECICKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
    pub trainable: bool,
    pub frozen: bool,
    /// `'1'` for updatable elements; absent when unmasked.
    pub update_mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub completed: usize,
    pub params: Vec<ParamEntry>,
    pub codebook_rows: usize,
    pub codebook_frozen_upto: usize,
    pub packnet: Option<PackNetState>,
    /// `(task_id, demo index)` of every stored replay trajectory.
    pub replay: Vec<(usize, usize)>,
    pub record: SuccessRecord,
    pub usage: UsageLog,
}

fn encode_mask(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn decode_mask(s: &str, n: usize) -> Result<Vec<bool>> {
    if s.len() != n {
        return Err(Error::Checkpoint(format!("mask has {} entries, expected {n}", s.len())));
    }
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::Checkpoint(format!("bad mask character {other:?}"))),
        })
        .collect()
}

pub fn manifest(learner: &Learner) -> Manifest {
    let store = &learner.policy.store;
    let mut offset = 0;
    let params = store
        .iter()
        .map(|(_, name, p)| {
            let e = ParamEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                offset,
                trainable: p.trainable,
                frozen: p.frozen,
                update_mask: p.update_mask.as_deref().map(encode_mask),
            };
            offset += p.value.numel();
            e
        })
        .collect();
    Manifest {
        seed: learner.seed,
        completed: learner.completed,
        params,
        codebook_rows: learner.policy.codebook.rows(),
        codebook_frozen_upto: learner.policy.codebook.frozen_upto(store),
        packnet: learner.packnet.clone(),
        replay: learner.replay.stored.iter().map(|e| (e.task_id, e.index)).collect(),
        record: learner.record.clone(),
        usage: learner.usage.clone(),
    }
}

pub fn to_bytes(learner: &Learner) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&manifest(learner))?;
    let n: usize = learner.policy.store.num_elements();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, p) in learner.policy.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Split a checkpoint into its manifest and value payload.
pub fn parse(bytes: &[u8]) -> Result<(Manifest, Vec<f64>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])?;
    let payload = &body[len..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if values.len() != expected {
        return Err(Error::Checkpoint(format!("payload holds {} values, manifest needs {expected}", values.len())));
    }
    Ok((manifest, values))
}

/// Write through a temporary file so an interrupted save never leaves a
/// partial checkpoint behind.
pub fn save(learner: &Learner, path: &Path) -> Result<()> {
    let bytes = to_bytes(learner)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Manifest, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

/// Rebuild a learner from a checkpoint. The configuration must be the one
/// the checkpoint was written under; structure is recreated by replaying the
/// per-task hooks and then every value and flag is overwritten.
pub fn restore(
    bytes: &[u8],
    model: &ModelConfig,
    train: &TrainConfig,
    paradigm: &ParadigmConfig,
    tasks: Vec<TaskSpec>,
) -> Result<Learner> {
    let (m, values) = parse(bytes)?;
    if m.completed == 0 || m.completed > tasks.len() {
        return Err(Error::Checkpoint(format!("checkpoint covers {} of {} tasks", m.completed, tasks.len())));
    }
    let mut l = Learner::new(model, train, paradigm, tasks, m.seed)?;
    for k in 0..m.completed {
        l.register_task(k)?;
    }
    let store = &mut l.policy.store;
    if store.len() != m.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, configuration builds {}",
            m.params.len(),
            store.len()
        )));
    }
    for e in &m.params {
        let id = store
            .lookup(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let p = store.get_mut(id);
        if p.value.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} in checkpoint, {:?} in model",
                e.name,
                e.shape,
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        p.value = Tensor::new(e.shape.clone(), values[e.offset..e.offset + n].to_vec())?;
        p.trainable = e.trainable;
        p.frozen = e.frozen;
        p.update_mask = e.update_mask.as_deref().map(|s| decode_mask(s, n)).transpose()?;
    }
    if l.policy.codebook.rows() != m.codebook_rows || l.policy.codebook.frozen_upto(&l.policy.store) != m.codebook_frozen_upto {
        return Err(Error::Checkpoint("codebook layout differs from checkpoint".into()));
    }
    if m.packnet.is_some() != l.packnet.is_some() {
        return Err(Error::Checkpoint("paradigm differs from checkpoint".into()));
    }
    l.packnet = m.packnet;
    let mut demos: Vec<Option<Vec<crate::env::Demonstration>>> = vec![None; m.completed];
    for &(task_id, index) in &m.replay {
        if task_id >= m.completed {
            return Err(Error::Checkpoint(format!("replay entry for untrained task {task_id}")));
        }
        if demos[task_id].is_none() {
            demos[task_id] = Some(l.demos(task_id)?);
        }
        let demo = demos[task_id].as_ref().unwrap().get(index).cloned().ok_or_else(|| {
            Error::Checkpoint(format!("replay index {index} out of range for task {task_id}"))
        })?;
        l.replay.stored.push(ReplayEntry { task_id, index, demo });
    }
    if l.replay.stored.len() > l.replay.capacity {
        return Err(Error::Checkpoint("replay buffer exceeds configured capacity".into()));
    }
    if m.record.n_tasks() != l.tasks.len() || m.record.eval_points != train.eval_points() {
        return Err(Error::Checkpoint("success record does not match the configuration".into()));
    }
    l.record = m.record;
    l.usage = m.usage;
    l.completed = m.completed;
    Ok(l)
}

pub fn load(
    path: &Path,
    model: &ModelConfig,
    train: &TrainConfig,
    paradigm: &ParadigmConfig,
    tasks: Vec<TaskSpec>,
) -> Result<Learner> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    restore(&bytes, model, train, paradigm, tasks)
}
