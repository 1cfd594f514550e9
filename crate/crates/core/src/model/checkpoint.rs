//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CUTIECKP"  u32 version  u64 header_len  header (JSON)
//! records: u32 name_len  name (UTF-8)  tensor
//! ```
//!
//! The header carries the model config, the scalar type, the record names in
//! order, and optionally the vocabulary, class set, inference grid shape and
//! optimizer step. Adam moments, when present, are stored as `adam.m.<param>`
//! and `adam.v.<param>` records after the parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CutieConfig, CutieModel};
use crate::data::ClassSet;
use crate::error::{Error, Result};
use crate::gridder::GridShape;
use crate::nn::{AdamHyper, AdamState, Scalar, Tensor};
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 8] = b"CUTIECKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: CutieConfig,
    dtype: String,
    records: Vec<String>,
    #[serde(default)]
    vocab: Option<Vec<String>>,
    #[serde(default)]
    classes: Option<ClassSet>,
    #[serde(default)]
    adam: Option<AdamHeader>,
    #[serde(default)]
    grid: Option<GridShape>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    hyper: AdamHyper,
    step: u64,
}

/// Everything needed to resume training or serve predictions.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: CutieModel<T>,
    pub optimizer: Option<AdamState<T>>,
    pub vocab: Option<Vocabulary>,
    pub classes: Option<ClassSet>,
    /// Grid shape to use at inference, normally the training mean.
    pub grid: Option<GridShape>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: CutieModel<T>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            vocab: None,
            classes: None,
            grid: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let params = self.model.named_params();
        let mut records: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        if let Some(opt) = &self.optimizer {
            if opt.first.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
            records.extend(names.iter().map(|n| format!("adam.m.{n}")));
            records.extend(names.iter().map(|n| format!("adam.v.{n}")));
        }
        let header = Header {
            config: self.model.config.clone(),
            dtype: T::DTYPE.to_string(),
            records: records.clone(),
            vocab: self.vocab.as_ref().map(|v| v.tokens().to_vec()),
            classes: self.classes.clone(),
            adam: self.optimizer.as_ref().map(|o| AdamHeader {
                hyper: o.hyper,
                step: o.step,
            }),
            grid: self.grid,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;

        let mut tensors: Vec<&Tensor<T>> = params.iter().map(|(_, p)| &p.value).collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.first.iter());
            tensors.extend(opt.second.iter());
        }
        for (name, t) in records.iter().zip(tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {VERSION}"
            )));
        }
        let len = u64::from_le_bytes(read_array(r)?);
        if len > 1 << 30 {
            return Err(Error::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(corrupt)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }

        // Building with any seed gives the right shapes; values are overwritten.
        let mut model = CutieModel::<T>::build(header.config.clone(), 0)?;
        let expected: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let n = expected.len();
        let with_adam = header.adam.is_some();
        let total = if with_adam { 3 * n } else { n };
        if header.records.len() != total || header.records[..n] != expected[..] {
            return Err(Error::Checkpoint("record list does not match the model layout".into()));
        }

        let mut tensors = Vec::with_capacity(total);
        for name in &header.records {
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(corrupt)?;
            let len = u32::from_le_bytes(len) as usize;
            let mut raw = vec![0u8; len];
            r.read_exact(&mut raw).map_err(corrupt)?;
            if raw != name.as_bytes() {
                return Err(Error::Checkpoint(format!(
                    "expected record {name:?}, found {:?}",
                    String::from_utf8_lossy(&raw)
                )));
            }
            tensors.push(Tensor::<T>::read_from(r).map_err(|e| match e {
                Error::Io(_) => corrupt(e),
                other => other,
            })?);
        }
        let mut rest = tensors.into_iter();
        for (p, name) in model.params_mut().into_iter().zip(&expected) {
            let t = rest.next().expect("counted above");
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        let optimizer = match header.adam {
            Some(AdamHeader { hyper, step }) => {
                let mut state = AdamState::new(model.named_params().into_iter().map(|(_, p)| p), hyper);
                state.step = step;
                state.first = rest.by_ref().take(n).collect();
                state.second = rest.by_ref().take(n).collect();
                let shapes_ok = state
                    .first
                    .iter()
                    .chain(&state.second)
                    .zip(model.named_params().iter().chain(model.named_params().iter()))
                    .all(|(m, (_, p))| m.shape() == p.value.shape());
                if !shapes_ok {
                    return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
                }
                Some(state)
            }
            None => None,
        };
        let vocab = header.vocab.map(Vocabulary::from_tokens).transpose()?;
        if let Some(v) = &vocab {
            if v.len() != model.config.vocab_size {
                return Err(Error::Checkpoint(format!(
                    "vocabulary of {} tokens for an embedding of {}",
                    v.len(),
                    model.config.vocab_size
                )));
            }
        }
        if let Some(c) = &header.classes {
            if c.len() != model.config.num_classes {
                return Err(Error::Checkpoint(format!(
                    "{} classes for a model with K = {}",
                    c.len(),
                    model.config.num_classes
                )));
            }
        }
        Ok(Checkpoint {
            model,
            optimizer,
            vocab,
            classes: header.classes,
            grid: header.grid,
        })
    }

    /// Fails unless the model was trained for exactly `classes`.
    pub fn expect_classes(&self, classes: &ClassSet) -> Result<()> {
        if self.model.config.num_classes != classes.len() {
            return Err(Error::Checkpoint(format!(
                "model predicts {} classes, {} expected",
                self.model.config.num_classes,
                classes.len()
            )));
        }
        if let Some(own) = &self.classes {
            if own != classes {
                return Err(Error::Checkpoint(format!(
                    "model classes {:?} differ from {:?}",
                    own.names(),
                    classes.names()
                )));
            }
        }
        Ok(())
    }
}

/// Writes the bare model (no optimizer, vocabulary or classes).
pub fn save_checkpoint<T: Scalar>(model: &CutieModel<T>, path: &Path) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CutieModel<T>> {
    Ok(Checkpoint::load(path)?.model)
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(corrupt)?;
    Ok(b)
}

fn corrupt(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("truncated or corrupt file: {e}"))
}
