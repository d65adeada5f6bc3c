//! Binary checkpoint format.
//!
//! ```text
//! "PYMX"  u32 version
//! u64 meta length, meta JSON (model config, optimizer and loop state)
//! u64 tensor count, then per tensor: u64 name length, name, u64 rank, rank × u64 dims
//! tensor data, little-endian f32, in manifest order
//! u32 CRC32 of everything above
//! ```
//! All integers are little-endian.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, PyramidMixer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PYMX";
pub const VERSION: u32 = 1;

/// Everything needed to resume training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    /// Parameters after the last completed epoch.
    pub current: ParamStore<f32>,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_mrr: Option<f64>,
    pub since_best: usize,
}

/// A model (the best one seen so far) plus optional training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub state: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct RngMeta {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    best_epoch: usize,
    best_mrr: Option<f64>,
    since_best: usize,
    adam: AdamConfig,
    adam_step: u64,
    rng: RngMeta,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    state: Option<StateMeta>,
}

fn rng_meta(rng: &ChaCha8Rng) -> RngMeta {
    RngMeta {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn rng_from_meta(m: &RngMeta) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let bad = || Error::Format("malformed RNG state".into());
    if m.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&m.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(m.stream);
    rng.set_word_pos(m.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

const MODEL: &str = "model/";
const CURRENT: &str = "current/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

impl Checkpoint {
    /// A model-only checkpoint.
    pub fn from_model(model: &PyramidMixer<f32>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
            state: None,
        }
    }

    pub fn model(&self) -> Result<PyramidMixer<f32>> {
        PyramidMixer::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            state: self.state.as_ref().map(|s| StateMeta {
                epoch: s.epoch,
                best_epoch: s.best_epoch,
                best_mrr: s.best_mrr,
                since_best: s.since_best,
                adam: s.optimizer.config.clone(),
                adam_step: s.optimizer.step,
                rng: rng_meta(&s.rng),
            }),
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("meta: {e}")))?;

        let mut stores: Vec<(&str, &ParamStore<f32>)> = vec![(MODEL, &self.params)];
        if let Some(s) = &self.state {
            stores.extend([(CURRENT, &s.current), (ADAM_M, &s.optimizer.m), (ADAM_V, &s.optimizer.v)]);
        }
        let tensors: Vec<(String, &Tensor<f32>)> = stores
            .iter()
            .flat_map(|(prefix, store)| store.iter().map(move |(n, t)| (format!("{prefix}{n}"), t)))
            .collect();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing PYMX magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        if bytes.len() < 12 {
            return Err(Error::Format("truncated file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let mut r = Reader { bytes: body, pos: 8 };
        // Parse first so that truncation is reported as such, then verify the CRC.
        let parsed = r.parse();
        if crc32fast::hash(body) != stored {
            return Err(match parsed {
                Err(e) => e,
                Ok(_) => Error::Format("CRC mismatch".into()),
            });
        }
        parsed
    }

    /// Writes to a temporary sibling and renames it into place, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("pymx.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored config equals `expected`.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        check_config(expected, &ckpt.config)?;
        Ok(ckpt)
    }
}

/// Names the first top-level config key whose value differs.
pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let to_map = |c: &ModelConfig| match serde_json::to_value(c) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("ModelConfig serializes to an object"),
    };
    let (want, got) = (to_map(expected), to_map(found));
    for (key, w) in &want {
        let g = got.get(key).cloned().unwrap_or(Value::Null);
        if *w != g {
            return Err(Error::ConfigMismatch {
                field: key.clone(),
                expected: w.to_string(),
                found: g.to_string(),
            });
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in memory")))
    }

    fn parse(&mut self) -> Result<Checkpoint> {
        let meta_len = self.u64()?;
        let meta: Meta = serde_json::from_slice(self.take(meta_len)?)
            .map_err(|e| Error::Format(format!("meta: {e}")))?;
        let count = self.u64()?;
        let mut manifest = Vec::new();
        for _ in 0..count.min(1 << 20) {
            let n = self.u64()?;
            let name = String::from_utf8(self.take(n)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = self.u64()?;
            let dims = (0..rank).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
            manifest.push((name, dims));
        }
        let mut stores: [ParamStore<f32>; 4] = Default::default();
        for (name, dims) in manifest {
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            let (slot, rest) = [MODEL, CURRENT, ADAM_M, ADAM_V]
                .iter()
                .enumerate()
                .find_map(|(i, p)| name.strip_prefix(p).map(|r| (i, r)))
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
            stores[slot]
                .insert(rest, t)
                .map_err(|_| Error::Format(format!("duplicate tensor `{name}`")))?;
        }
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        let [params, current, m, v] = stores;
        let state = match meta.state {
            None => None,
            Some(s) => Some(TrainingState {
                current,
                optimizer: Adam {
                    config: s.adam,
                    step: s.adam_step,
                    m,
                    v,
                },
                rng: rng_from_meta(&s.rng)?,
                epoch: s.epoch,
                best_epoch: s.best_epoch,
                best_mrr: s.best_mrr,
                since_best: s.since_best,
            }),
        };
        Ok(Checkpoint {
            config: meta.config,
            params,
            state,
        })
    }
}
