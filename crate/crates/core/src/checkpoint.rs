//! Binary checkpoint container.
//!
//! Layout: `MSCL`, u32 LE version, u64 LE header length, a JSON header, then
//! contiguous little-endian payloads at the offsets the header lists. Model
//! checkpoints store fp32; training state stores fp64 so a resumed run is
//! bitwise identical to an uninterrupted one.

use std::fs;
use std::path::Path;

use mscl_autodiff::{AdamW, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Vocabulary;
use crate::error::{CoreError, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"MSCL";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub dtype: Dtype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    /// Present only in training-state files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    pub optimizer_step: u64,
    pub best_bleu4: f64,
}

fn encode(config: &RunConfig, vocab: &Vocabulary, tensors: &[(&str, &Tensor)], dtype: Dtype, progress: Option<Progress>) -> Vec<u8> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            dtype,
        });
        for &v in t.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        vocab: vocab.tokens().to_vec(),
        tensors: entries,
        progress,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bad = |message: String| CoreError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing MSCL magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = start
            .checked_add(n * e.dtype.width())
            .and_then(|end| payload.get(start..end))
            .ok_or_else(|| bad(format!("tensor `{}` runs past the end of the file", e.name)))?;
        let data = match e.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((header, tensors))
}

fn read(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(path, &bytes)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Serialized fp32 model checkpoint.
pub fn model_bytes(config: &RunConfig, vocab: &Vocabulary, model: &Model) -> Vec<u8> {
    let tensors: Vec<(&str, &Tensor)> = model.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    encode(config, vocab, &tensors, Dtype::F32, None)
}

pub fn save_model(path: &Path, config: &RunConfig, vocab: &Vocabulary, model: &Model) -> Result<()> {
    write(path, &model_bytes(config, vocab, model))
}

#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (header, tensors) = read(path)?;
    if header.config.model.vocab_size != header.vocab.len() {
        return Err(CoreError::Compat(format!(
            "{}: config vocab_size {} but {} vocabulary entries",
            path.display(),
            header.config.model.vocab_size,
            header.vocab.len()
        )));
    }
    let model = Model::from_tensors(header.config.model.clone(), tensors)?;
    Ok(LoadedModel {
        config: header.config,
        vocab: Vocabulary::from_tokens(header.vocab),
        model,
    })
}

/// Parameters plus optimizer moments in fp64.
pub fn save_state(
    path: &Path,
    config: &RunConfig,
    vocab: &Vocabulary,
    model: &Model,
    optimizer: &AdamW,
    progress: Progress,
) -> Result<()> {
    let moments: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let shape = p.value.shape().to_vec();
            let m = optimizer.m.get(i).cloned().unwrap_or_else(|| vec![0.0; p.value.numel()]);
            let v = optimizer.v.get(i).cloned().unwrap_or_else(|| vec![0.0; p.value.numel()]);
            [
                (format!("adam.m.{}", p.name), Tensor::new(shape.clone(), m).expect("moment shape")),
                (format!("adam.v.{}", p.name), Tensor::new(shape, v).expect("moment shape")),
            ]
        })
        .collect();
    let mut tensors: Vec<(&str, &Tensor)> = model.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    tensors.extend(moments.iter().map(|(n, t)| (n.as_str(), t)));
    write(path, &encode(config, vocab, &tensors, Dtype::F64, Some(progress)))
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model,
    pub optimizer: AdamW,
    pub progress: Progress,
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let (header, mut tensors) = read(path)?;
    let progress = header.progress.ok_or_else(|| CoreError::Checkpoint {
        path: path.to_path_buf(),
        message: "not a training-state file".into(),
    })?;
    if tensors.len() % 3 != 0 {
        return Err(CoreError::Checkpoint {
            path: path.to_path_buf(),
            message: format!("{} tensors cannot split into params and two moments", tensors.len()),
        });
    }
    let moments = tensors.split_off(tensors.len() / 3);
    let model = Model::from_tensors(header.config.model.clone(), tensors)?;
    let mut optimizer = AdamW::new(header.config.train.lr, header.config.train.weight_decay);
    optimizer.step = progress.optimizer_step;
    if progress.optimizer_step > 0 {
        for (i, p) in model.params().iter().enumerate() {
            let (m, v) = (&moments[2 * i], &moments[2 * i + 1]);
            if m.0 != format!("adam.m.{}", p.name) || v.0 != format!("adam.v.{}", p.name) {
                return Err(CoreError::Compat(format!("optimizer moments out of order at `{}`", p.name)));
            }
            optimizer.m.push(m.1.data().to_vec());
            optimizer.v.push(v.1.data().to_vec());
        }
    }
    Ok(TrainState {
        config: header.config,
        vocab: Vocabulary::from_tokens(header.vocab),
        model,
        optimizer,
        progress,
    })
}
