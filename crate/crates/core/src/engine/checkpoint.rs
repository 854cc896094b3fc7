//! Checkpoint archive: magic, version, a JSON header (config snapshot, step,
//! rng state, tensor directory), the raw little-endian float32 payload, and
//! a trailing CRC-32 of everything before it.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::config::TrainConfig;
use crate::engine::model::Model;
use crate::engine::optim::AdamState;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MCORECKP";
const OPTIM_M: &str = "optim.m/";
const OPTIM_V: &str = "optim.v/";

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal string; the position is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Format(format!("invalid rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Params<f32>,
    /// Optimizer updates applied so far.
    pub step: u64,
    pub rng: RngState,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: u64,
    rng: RngState,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    /// Verifies the parameters fit `config`; errors name the first
    /// missing or mis-shaped tensor.
    pub fn validate_against(&self, config: &TrainConfig) -> Result<()> {
        self.params.validate(&config.param_specs())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(o) = &self.optimizer {
            named.extend(o.m.iter().map(|(k, v)| (format!("{OPTIM_M}{k}"), v)));
            named.extend(o.v.iter().map(|(k, v)| (format!("{OPTIM_V}{k}"), v)));
        }
        let mut offset = 0;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.t),
            tensors,
        })?;
        let mut out = Vec::with_capacity(24 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &named {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        if bytes.len() < 12 {
            return Err(Error::Integrity("checkpoint truncated before version".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 24 {
            return Err(Error::Integrity("checkpoint truncated in header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Integrity(
                "checkpoint checksum mismatch (truncated or corrupted)".into(),
            ));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Integrity("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[20..payload_start])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let payload = &body[payload_start..];

        let mut params = Params::new();
        let mut m = Params::new();
        let mut v = Params::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let range = e.offset * 4..(e.offset + n) * 4;
            let raw = payload
                .get(range)
                .ok_or_else(|| Error::Integrity(format!("tensor {} lies outside the payload", e.name)))?;
            let t = Tensor::new(e.shape.clone(), raw.chunks_exact(4).map(f32::read_le).collect())?;
            if let Some(name) = e.name.strip_prefix(OPTIM_M) {
                m.insert(name, t);
            } else if let Some(name) = e.name.strip_prefix(OPTIM_V) {
                v.insert(name, t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let optimizer = header.optimizer_step.map(|t| AdamState { t, m, v });
        Ok(Self {
            config: header.config,
            params,
            step: header.step,
            rng: header.rng,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Reads and checks integrity, then validates tensors against the
    /// embedded config.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Self::from_bytes(&bytes)?;
        c.validate_against(&c.config)?;
        Ok(c)
    }
}
