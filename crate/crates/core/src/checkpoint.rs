//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes   "QANNCKPT"
//! version  u32 LE    1
//! hlen     u64 LE    length of the JSON header
//! header   hlen bytes UTF-8 JSON (config, dims, vocab, progress, tensor table)
//! params   f64 LE    every tensor in header order, row-major
//! m, v     f64 LE    Adam moments in the same order, when has_optimizer
//! ```
//!
//! Floats in the header are written with round-trip precision, so a reload
//! reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ModelDims, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{OptimizerState, Progress, TrainConfig, TrainState};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"QANNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    dims: ModelDims,
    vocab: Vocab,
    progress: Progress,
    dev_accuracy: Option<f64>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub progress: Progress,
    /// Dev accuracy of `params` when it was written.
    pub dev_accuracy: Option<f64>,
}

impl Checkpoint {
    /// Snapshot of a running state, optimizer included.
    pub fn from_state(config: &TrainConfig, vocab: &Vocab, state: &TrainState, dev_accuracy: Option<f64>) -> Self {
        Self {
            config: config.clone(),
            vocab: vocab.clone(),
            params: state.params.clone(),
            optimizer: Some(state.optimizer.clone()),
            progress: state.progress.clone(),
            dev_accuracy,
        }
    }

    /// Training state for resuming; requires optimizer moments.
    pub fn into_state(self) -> Result<TrainState> {
        let optimizer = self
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        Ok(TrainState {
            params: self.params,
            optimizer,
            progress: self.progress,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let names = self.params.names();
        let tensors = self.params.tensors();
        let header = Header {
            config: self.config.clone(),
            dims: self.params.dims,
            vocab: self.vocab.clone(),
            progress: self.progress.clone(),
            dev_accuracy: self.dev_accuracy,
            tensors: names
                .into_iter()
                .zip(&tensors)
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta { step: o.step, lr: o.lr }),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let write_all = |w: &mut dyn Write, ts: &[&Tensor]| -> Result<()> {
            for t in ts {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Ok(())
        };
        write_all(&mut w, &tensors)?;
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != tensors.len() || opt.v.len() != tensors.len() {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
            write_all(&mut w, &opt.m.iter().collect::<Vec<_>>())?;
            write_all(&mut w, &opt.v.iter().collect::<Vec<_>>())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = usize::try_from(u64::from_le_bytes(b8))
            .map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;

        let mut read_set = |entries: &[TensorEntry]| -> Result<Vec<Tensor>> {
            entries
                .iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    let mut bytes = vec![0u8; n * 8];
                    r.read_exact(&mut bytes)
                        .map_err(|_| Error::Checkpoint(format!("truncated data for {}", e.name)))?;
                    let data = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    Tensor::new(e.shape.clone(), data)
                })
                .collect()
        };
        let tensors = read_set(&header.tensors)?;
        let optimizer = match &header.optimizer {
            Some(meta) => Some(OptimizerState {
                m: read_set(&header.tensors)?,
                v: read_set(&header.tensors)?,
                step: meta.step,
                lr: meta.lr,
            }),
            None => None,
        };
        let params = ModelParams::from_tensors(header.dims, tensors)?;
        let expected = params.names();
        let found: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
        if expected != found {
            return Err(Error::Checkpoint(format!("tensor names {found:?} do not match {expected:?}")));
        }
        if header.vocab.len() != header.dims.vocab {
            return Err(Error::Checkpoint(format!(
                "vocab has {} tokens but dims say {}",
                header.vocab.len(),
                header.dims.vocab
            )));
        }
        Ok(Self {
            config: header.config,
            vocab: header.vocab,
            params,
            optimizer,
            progress: header.progress,
            dev_accuracy: header.dev_accuracy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
