use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::model::{AdamW, EpochRecord, ModelConfig, ModelParameters, ParamStore, TrainerState};
use crate::{Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DDCKPT\0\0";
const LOG_TAIL: usize = 20;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    epoch_next: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    epoch_next: usize,
    /// None encodes "no finite validation loss yet" (JSON cannot carry
    /// infinities).
    best_val: Option<f64>,
    epochs_since_improve_lr: usize,
    epochs_since_improve_stop: usize,
    opt: OptimizerMeta,
    rng: RngState,
    log_tail: Vec<EpochRecord>,
    has_best: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    trainer: TrainerMeta,
}

/// Everything a saved checkpoint restores.
#[derive(Debug)]
pub struct CheckpointContents {
    pub params: ModelParameters,
    pub trainer: TrainerState,
    pub seed: u64,
}

fn push_blob(out: &mut Vec<u8>, values: &[Real]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_blob(bytes: &[u8], pos: &mut usize, len: usize, name: &str) -> Result<Vec<Real>, IoError> {
    let need = len * 8;
    if *pos + need > bytes.len() {
        return Err(IoError::BlobSize {
            name: name.to_string(),
            got: bytes.len().saturating_sub(*pos),
            want: need,
        });
    }
    let out = bytes[*pos..*pos + need]
        .chunks_exact(8)
        .map(|b| Real::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    *pos += need;
    Ok(out)
}

/// Serializes parameters, optimizer state, trainer bookkeeping, the rng
/// record, and the training log tail; all numeric payloads are f64 LE.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParameters,
    trainer: &TrainerState,
    seed: u64,
) -> Result<(), IoError> {
    let entries: Vec<ParamEntry> = params
        .store
        .iter()
        .map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape().to_vec() })
        .collect();
    let tail_from = trainer.log.len().saturating_sub(LOG_TAIL);
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: params.config,
        params: entries,
        trainer: TrainerMeta {
            epoch_next: trainer.epoch_next,
            best_val: trainer.best_val.is_finite().then_some(trainer.best_val),
            epochs_since_improve_lr: trainer.epochs_since_improve_lr,
            epochs_since_improve_stop: trainer.epochs_since_improve_stop,
            opt: OptimizerMeta {
                lr: trainer.opt.lr,
                beta1: trainer.opt.beta1,
                beta2: trainer.opt.beta2,
                eps: trainer.opt.eps,
                weight_decay: trainer.opt.weight_decay,
                t: trainer.opt.t,
            },
            rng: RngState { seed, epoch_next: trainer.epoch_next },
            log_tail: trainer.log[tail_from..].to_vec(),
            has_best: trainer.best_val.is_finite(),
        },
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in params.store.iter() {
        push_blob(&mut bytes, t.data());
    }
    for m in &trainer.opt.m {
        push_blob(&mut bytes, m);
    }
    for v in &trainer.opt.v {
        push_blob(&mut bytes, v);
    }
    if header.trainer.has_best {
        for (_, t) in trainer.best_params.iter() {
            push_blob(&mut bytes, t.data());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointContents, IoError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(IoError::Header("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Version { what: "checkpoint", got: version, want: CHECKPOINT_VERSION });
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if 20 + json_len > bytes.len() {
        return Err(IoError::Header("header length exceeds file size".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + json_len])
        .map_err(|e| IoError::Header(e.to_string()))?;

    let mut pos = 20 + json_len;
    let mut store = ParamStore::new();
    for e in &header.params {
        let numel: usize = e.shape.iter().product();
        let data = read_blob(&bytes, &mut pos, numel, &e.name)?;
        let tensor = Tensor::new(e.shape.clone(), data)
            .map_err(|err| IoError::Header(err.to_string()))?;
        store.insert(&e.name, tensor);
    }
    let params = ModelParameters { config: header.config, store };

    let mut opt = AdamW::new(&params.store, header.trainer.opt.lr, header.trainer.opt.weight_decay);
    opt.beta1 = header.trainer.opt.beta1;
    opt.beta2 = header.trainer.opt.beta2;
    opt.eps = header.trainer.opt.eps;
    opt.t = header.trainer.opt.t;
    for (i, e) in header.params.iter().enumerate() {
        let numel: usize = e.shape.iter().product();
        opt.m[i] = read_blob(&bytes, &mut pos, numel, &format!("{}.m", e.name))?;
    }
    for (i, e) in header.params.iter().enumerate() {
        let numel: usize = e.shape.iter().product();
        opt.v[i] = read_blob(&bytes, &mut pos, numel, &format!("{}.v", e.name))?;
    }
    let best_params = if header.trainer.has_best {
        let mut best = ParamStore::new();
        for e in &header.params {
            let numel: usize = e.shape.iter().product();
            let data = read_blob(&bytes, &mut pos, numel, &format!("{}.best", e.name))?;
            let tensor = Tensor::new(e.shape.clone(), data)
                .map_err(|err| IoError::Header(err.to_string()))?;
            best.insert(&e.name, tensor);
        }
        best
    } else {
        params.store.clone()
    };
    if pos != bytes.len() {
        return Err(IoError::PayloadSize { got: bytes.len(), want: pos });
    }

    let trainer = TrainerState {
        epoch_next: header.trainer.epoch_next,
        opt,
        best_val: header.trainer.best_val.unwrap_or(f64::INFINITY),
        best_params,
        epochs_since_improve_lr: header.trainer.epochs_since_improve_lr,
        epochs_since_improve_stop: header.trainer.epochs_since_improve_stop,
        log: header.trainer.log_tail.clone(),
    };
    Ok(CheckpointContents { params, trainer, seed: header.trainer.rng.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_forward, ModelConfig, TrainConfig};
    use std::path::PathBuf;

    fn tmp(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ddtrack-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{tag}.ckpt"))
    }

    fn fresh() -> (ModelParameters, TrainerState) {
        let params = ModelParameters::init(ModelConfig::tiny(), 7);
        let trainer = TrainerState::fresh(&params, &TrainConfig::default());
        (params, trainer)
    }

    #[test]
    fn roundtrip_preserves_forward_bitwise() {
        let path = tmp("rt");
        let (params, mut trainer) = fresh();
        trainer.best_val = 0.5;
        trainer.log.push(EpochRecord { epoch: 0, train_loss: 1.0, val_loss: 0.5, lr: 1e-4 });
        save_checkpoint(&path, &params, &trainer, 99).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.trainer.epoch_next, trainer.epoch_next);
        assert_eq!(loaded.trainer.log, trainer.log);
        let a = reference_forward(&params, 0.4).unwrap();
        let b = reference_forward(&loaded.params, 0.4).unwrap();
        for i in 0..3 {
            assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let path = tmp("ver");
        let (params, trainer) = fresh();
        save_checkpoint(&path, &params, &trainer, 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(IoError::Version { got: 9, want: 1, .. }) => {}
            other => panic!("wrong outcome: {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_names_parameter() {
        let path = tmp("trunc");
        let (params, trainer) = fresh();
        save_checkpoint(&path, &params, &trainer, 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            IoError::BlobSize { name, .. } => {
                assert!(name.ends_with(".best") || name.ends_with(".v"), "name {name}")
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let path = tmp("opt");
        let (params, mut trainer) = fresh();
        trainer.opt.t = 42;
        trainer.opt.lr = 3e-5;
        for m in trainer.opt.m.iter_mut() {
            for x in m.iter_mut() {
                *x = 0.125;
            }
        }
        save_checkpoint(&path, &params, &trainer, 1).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.trainer.opt.t, 42);
        assert_eq!(loaded.trainer.opt.lr, 3e-5);
        assert!(loaded.trainer.opt.m.iter().flatten().all(|&x| x == 0.125));
    }
}
