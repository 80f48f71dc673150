use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::las::LasConfig;
use crate::nncore::{ParamStore, Tensor};
use crate::quant::{dequantize, quantize, QuantizedTensor};
use crate::rnnt::RnnTConfig;
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"TPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const FLAG_QUANTIZED: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    Real(Tensor),
    Quantized(QuantizedTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Real(t) => t.shape(),
            StoredTensor::Quantized(q) => &q.shape,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        match self {
            StoredTensor::Real(t) => t.clone(),
            StoredTensor::Quantized(q) => dequantize(q),
        }
    }
}

/// Named tensors, vocabulary and a JSON echo of the configuration.
///
/// Layout (little-endian): magic, version, flags (bit 0: int8 payload),
/// tensor count, then per tensor name, rank, dims and either 64-bit reals or
/// a 64-bit scale followed by int8 codes; then the vocabulary and the config.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
    pub vocab: Vocab,
    pub config: String,
}

impl Checkpoint {
    pub fn quantized(&self) -> bool {
        self.tensors
            .iter()
            .any(|(_, t)| matches!(t, StoredTensor::Quantized(_)))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let quantized = self.quantized();
        if quantized
            && self
                .tensors
                .iter()
                .any(|(_, t)| matches!(t, StoredTensor::Real(_)))
        {
            return Err(Error::contract(
                "checkpoint mixes quantized and real tensors",
            ));
        }
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(if quantized { FLAG_QUANTIZED } else { 0 });
        w.len_u32(self.tensors.len())?;
        for (name, t) in &self.tensors {
            w.str(name)?;
            w.len_u32(t.shape().len())?;
            for &d in t.shape() {
                w.u64(d as u64);
            }
            match t {
                StoredTensor::Real(t) => t.data().iter().for_each(|&v| w.f64(v)),
                StoredTensor::Quantized(q) => {
                    w.f64(q.scale);
                    q.codes.iter().for_each(|&c| w.i8(c));
                }
            }
        }
        w.len_u32(self.vocab.len())?;
        for tok in self.vocab.tokens() {
            w.str(tok)?;
        }
        w.str(&self.config)?;
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let flags = r.u32()?;
        if flags & !FLAG_QUANTIZED != 0 {
            return Err(Error::format(format!(
                "unknown checkpoint flags {flags:#x}"
            )));
        }
        let quantized = flags & FLAG_QUANTIZED != 0;
        let n = r.len(8)?;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.len(8)?;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::format(format!("{name}: shape overflows")))?;
            let t = if quantized {
                let scale = r.f64()?;
                let raw = r.take(numel)?;
                StoredTensor::Quantized(QuantizedTensor {
                    shape,
                    codes: raw.iter().map(|&b| b as i8).collect(),
                    scale,
                })
            } else {
                let raw = r.take(
                    numel
                        .checked_mul(8)
                        .ok_or_else(|| Error::format("tensor too large"))?,
                )?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                StoredTensor::Real(Tensor::new(shape, data)?)
            };
            tensors.push((name, t));
        }
        let nv = r.len(4)?;
        let tokens = (0..nv).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_tokens(tokens)?;
        let config = r.str()?;
        if !r.is_done() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            tensors,
            vocab,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Same checkpoint with every tensor quantized to int8.
    pub fn to_quantized(&self) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let q = match t {
                    StoredTensor::Real(t) => quantize(t)?,
                    StoredTensor::Quantized(q) => q.clone(),
                };
                Ok((n.clone(), StoredTensor::Quantized(q)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            tensors,
            vocab: self.vocab.clone(),
            config: self.config.clone(),
        })
    }

    /// Tensors whose names start with `prefix`, with the prefix removed,
    /// dequantized when stored as int8.
    pub fn params_with_prefix(&self, prefix: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, t.to_tensor())?;
            }
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigEcho {
    rnnt: RnnTConfig,
    las: Option<LasConfig>,
    #[serde(default)]
    notes: serde_json::Value,
}

/// Both models of the two-pass system with their vocabulary.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub vocab: Vocab,
    pub rnnt_cfg: RnnTConfig,
    pub rnnt: ParamStore,
    pub las: Option<(LasConfig, ParamStore)>,
    /// Free-form metadata echoed into the checkpoint.
    pub notes: serde_json::Value,
}

impl ModelBundle {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        for (_, name, t) in self.rnnt.iter() {
            tensors.push((format!("rnnt.{name}"), StoredTensor::Real(t.clone())));
        }
        if let Some((_, store)) = &self.las {
            for (_, name, t) in store.iter() {
                tensors.push((format!("las.{name}"), StoredTensor::Real(t.clone())));
            }
        }
        let echo = ConfigEcho {
            rnnt: self.rnnt_cfg.clone(),
            las: self.las.as_ref().map(|(c, _)| c.clone()),
            notes: self.notes.clone(),
        };
        let config =
            serde_json::to_string_pretty(&echo).map_err(|e| Error::format(e.to_string()))?;
        Ok(Checkpoint {
            tensors,
            vocab: self.vocab.clone(),
            config,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let echo: ConfigEcho = serde_json::from_str(&ckpt.config)
            .map_err(|e| Error::format(format!("config echo: {e}")))?;
        let las = match echo.las {
            Some(cfg) => Some((cfg, ckpt.params_with_prefix("las.")?)),
            None => None,
        };
        Ok(ModelBundle {
            vocab: ckpt.vocab.clone(),
            rnnt_cfg: echo.rnnt,
            rnnt: ckpt.params_with_prefix("rnnt.")?,
            las,
            notes: echo.notes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
