//! Versioned binary checkpoints (`TSCK`).
//!
//! Layout, little-endian: magic, `u16` version, model spec, epoch, best
//! validation error, shuffle-rng state, normalization statistics, named
//! parameter tensors with their velocity buffers, then a CRC-32 of every
//! preceding byte.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::layers::{ParamStore, TowerShape};
use crate::model::{LossMode, Model, ModelSpec};
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Exact position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn to_rng(self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub epoch: usize,
    pub best_val: f64,
    pub rng_state: RngState,
    pub stats: NormStats,
    pub params: Vec<(String, Tensor<f32>)>,
    /// One per parameter, or empty when optimizer state is not kept.
    pub velocities: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        Checkpoint {
            spec: t.model.spec,
            epoch: t.epoch,
            best_val: t.best_val,
            rng_state: RngState::of(&t.rng),
            stats: t.stats,
            params: t
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            velocities: t.velocities.clone(),
        }
    }

    /// Rebuilds the model and loads every parameter by name.
    pub fn restore(&self) -> Result<(Model, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Model::new(self.spec, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        if store.len() != self.params.len() {
            return Err(Error::integrity(
                0,
                format!(
                    "{} architecture has {} parameter tensors, checkpoint holds {}",
                    self.spec.kind,
                    store.len(),
                    self.params.len()
                ),
            ));
        }
        for (name, value) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::integrity(0, format!("unexpected parameter `{name}`")))?;
            let p = store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::integrity(
                    0,
                    format!(
                        "parameter `{name}` has shape {:?}, checkpoint {:?}",
                        p.value.shape(),
                        value.shape()
                    ),
                ));
            }
            p.value = value.clone();
        }
        Ok((model, store))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut w, &self.spec.kind.to_string());
        w.push(match self.spec.loss_mode {
            LossMode::OneEntropy => 1,
            LossMode::ThreeEntropy => 3,
        });
        w.extend_from_slice(&self.spec.tower.width_multiplier.to_le_bytes());
        w.extend_from_slice(&self.spec.tower.bottleneck_multiplier.to_le_bytes());
        w.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        w.extend_from_slice(&self.best_val.to_le_bytes());
        w.extend_from_slice(&self.rng_state.seed);
        w.extend_from_slice(&self.rng_state.stream.to_le_bytes());
        w.extend_from_slice(&self.rng_state.word_pos.to_le_bytes());
        for v in self.stats.mean.iter().chain(&self.stats.std) {
            w.extend_from_slice(&v.to_le_bytes());
        }
        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        w.push(!self.velocities.is_empty() as u8);
        for (i, (name, t)) in self.params.iter().enumerate() {
            put_str(&mut w, name);
            put_tensor(&mut w, t);
            if let Some(v) = self.velocities.get(i) {
                put_tensor(&mut w, v);
            }
        }
        let crc = crc32fast::hash(&w);
        w.extend_from_slice(&crc.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::integrity(
                bytes.len() as u64,
                "file shorter than the header",
            ));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::integrity(0, "bad magic, not a checkpoint"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::integrity(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::integrity(
                body.len() as u64,
                "checksum mismatch (file truncated or corrupt)",
            ));
        }
        let kind_at = r.pos;
        let kind = r
            .string()?
            .parse()
            .map_err(|e| Error::integrity(kind_at as u64, format!("bad model kind: {e}")))?;
        let mode_at = r.pos;
        let loss_mode = match r.u8()? {
            1 => LossMode::OneEntropy,
            3 => LossMode::ThreeEntropy,
            m => {
                return Err(Error::integrity(
                    mode_at as u64,
                    format!("bad loss mode byte {m}"),
                ))
            }
        };
        let tower = TowerShape {
            width_multiplier: r.f64()?,
            bottleneck_multiplier: r.f64()?,
        };
        let epoch = r.u64()? as usize;
        let best_val = r.f64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let stats = NormStats {
            mean: [r.f64()?, r.f64()?],
            std: [r.f64()?, r.f64()?],
        };
        let n = r.u32()? as usize;
        let has_vel = r.u8()? != 0;
        let mut params = Vec::with_capacity(n);
        let mut velocities = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let t = r.tensor()?;
            if has_vel {
                let v = r.tensor()?;
                if v.shape() != t.shape() {
                    return Err(Error::integrity(
                        r.pos as u64,
                        "velocity shape differs from parameter",
                    ));
                }
                velocities.push(v);
            }
            params.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::integrity(
                r.pos as u64,
                "trailing bytes after parameters",
            ));
        }
        Ok(Checkpoint {
            spec: ModelSpec {
                kind,
                loss_mode,
                tower,
            },
            epoch,
            best_val,
            rng_state: RngState {
                seed,
                stream,
                word_pos,
            },
            stats,
            params,
            velocities,
        })
    }

    /// Writes through a temporary file so readers never see a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tsck.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u16).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor<f32>) {
    w.push(t.shape().len() as u8);
    for &d in t.shape() {
        w.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::integrity(
                self.pos as u64,
                format!("need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::integrity(at as u64, "name is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let at = self.pos;
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::integrity(at as u64, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::integrity(at as u64, e.to_string()))
    }
}
