//! Single-file model archive.
//!
//! ```text
//! magic   8 bytes  "HGCKPT\0\0"
//! version u32 LE   1
//! hlen    u64 LE   length of the JSON header in bytes
//! header  hlen     UTF-8 JSON (CheckpointHeader)
//! payload          f32 LE values, tensors back to back in header order
//! ```
//!
//! Parameters are kept at f32 precision during training, so writing them as
//! f32 loses nothing and a reload reproduces every forward pass bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HistGenError, Result};
use crate::model::{ModelConfig, ReportModel};
use crate::nn::Mat;
use crate::tokenizer::Vocabulary;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HGCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub vocab: BTreeMap<String, usize>,
    pub epoch: usize,
    pub best_metric: Option<f64>,
    /// Free-form snapshot of the run configuration that produced the model.
    pub run_config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub model: ReportModel,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub run_config: serde_json::Value,
}

fn bad(path: &Path, reason: impl Into<String>) -> HistGenError {
    HistGenError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let store = &ckpt.model.store;
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, m) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            offset,
        });
        offset += m.len();
    }
    let header = CheckpointHeader {
        model: ckpt.model.config.clone(),
        init_seed: store.seed(),
        vocab: ckpt.vocab.to_map(),
        epoch: ckpt.epoch,
        best_metric: ckpt.best_metric,
        run_config: ckpt.run_config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HistGenError::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| HistGenError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| HistGenError::io(path, e));
    write(&CHECKPOINT_MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for (_, _, m) in store.iter() {
        for &v in m.iter() {
            write(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| HistGenError::io(path, e))
}

pub fn read_checkpoint_header(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| HistGenError::io(path, e))?;
    if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad(path, "not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.len() - 20;
    if hlen > body {
        return Err(bad(path, "truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..20 + hlen]).map_err(|e| bad(path, format!("header: {e}")))?;
    Ok((header, bytes[20 + hlen..].to_vec()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload) = read_checkpoint_header(path)?;
    let mut model = ReportModel::new(&header.model, header.init_seed)?;
    if header.tensors.len() != model.store.len() {
        return Err(bad(
            path,
            format!(
                "archive has {} tensors, model expects {}",
                header.tensors.len(),
                model.store.len()
            ),
        ));
    }
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let start = t.offset * 4;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(bad(path, format!("tensor {} runs past the payload", t.name)));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let m = Mat::from_shape_vec((t.rows, t.cols), values).expect("length checked above");
        model
            .store
            .assign(&t.name, m)
            .map_err(|reason| bad(path, reason))?;
    }
    let vocab = Vocabulary::from_map(&header.vocab)?;
    if vocab.len() != model.config.decoder.vocab_size {
        return Err(bad(path, "vocabulary size differs from the decoder's"));
    }
    Ok(Checkpoint {
        model,
        vocab,
        epoch: header.epoch,
        best_metric: header.best_metric,
        run_config: header.run_config,
    })
}
