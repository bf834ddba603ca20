//! Binary checkpoints: model spec, named tensors, BN running statistics,
//! the training config and RNG state.
//!
//! Layout (little endian): magic `SSQL`, `u16` version, then length-prefixed
//! sections. Strings are `u32` byte length plus UTF-8; tensors are name, `u32`
//! rank, `u32` dims and `f32` data. Saving a loaded checkpoint reproduces the
//! original bytes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ModelParams, ModelSpec};
use crate::tensor::{Float, RunningStats, Tensor};
use crate::train::{TrainConfig, TrainRng, TrainState};

pub const MAGIC: &[u8; 4] = b"SSQL";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub rng: TrainRng,
    pub step: usize,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &TrainConfig) -> Self {
        Self {
            params: state.params.clone(),
            config: config.clone(),
            rng: state.rng.clone(),
            step: state.step,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        w.str(&self.params.spec().to_text());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.named_tensors() {
            w.str(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.floats(t.data());
        }
        let stats: Vec<_> = self.params.named_stats().collect();
        w.u32(stats.len() as u32);
        for (name, s) in stats {
            w.str(name);
            w.u32(s.channels() as u32);
            w.f32(s.momentum);
            w.f32(s.eps);
            w.floats(&s.mean);
            w.floats(&s.var);
        }
        w.str(&self.config.to_text());
        for rng in [&self.rng.data, &self.rng.bits] {
            w.0.extend_from_slice(&rng.get_seed());
            w.0.extend_from_slice(&rng.get_stream().to_le_bytes());
            w.0.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        }
        w.0.extend_from_slice(&(self.step as u64).to_le_bytes());
        w.0
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let spec = ModelSpec::from_text(&r.str()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.floats(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| r.err(format!("tensor '{name}': {e}")))?;
            tensors.push((name, t));
        }
        let count = r.u32()? as usize;
        let mut stats = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.str()?;
            let channels = r.u32()? as usize;
            let momentum = r.f32()?;
            let eps = r.f32()?;
            let mean = r.floats(channels)?;
            let var = r.floats(channels)?;
            stats.push((
                name,
                RunningStats {
                    mean,
                    var,
                    momentum,
                    eps,
                },
            ));
        }
        let params = ModelParams::from_named(&spec, tensors, stats)?;
        let config = TrainConfig::from_text(&r.str()?)?;
        let mut rngs = Vec::with_capacity(2);
        for _ in 0..2 {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            rngs.push(rng);
        }
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let bits = rngs.pop().expect("two rngs");
        let data = rngs.pop().expect("two rngs");
        Ok(Self {
            params,
            config,
            rng: TrainRng { data, bits },
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: Float) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn floats(&mut self, v: &[Float]) {
        for &x in v {
            self.f32(x);
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.path, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated at byte {} (wanted {n} more)", self.pos))),
        }
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

    fn f32(&mut self) -> Result<Float> {
        Ok(Float::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<Float>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.err("tensor size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| Float::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }
}
