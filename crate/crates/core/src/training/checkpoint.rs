//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic[8] version:u32 config_digest[32]
//! config_json:bytes step:u64
//! rng_seed[32] rng_stream:u64 rng_word_pos:u128
//! n_params:u64 { name:bytes ndim:u32 dims:u64* data:f64* }*
//! adam_t:u64 { m:f64* }* { v:f64* }*
//! vocab_tsv:bytes vocab_min_count:u64
//! sha256[32] over everything above
//! ```
//!
//! `bytes` is a u64 length followed by the payload.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig};
use crate::encoders::{EncoderParams, Init};
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IWCKPT\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn to_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub adam: AdamState,
    pub vocab: Vocabulary,
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(Sha256::digest(bytes).as_slice());
    out
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n} for {what}")))
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.len(what)?;
        self.take(n, what)
    }
    fn str(&mut self, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.bytes(what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.0.extend_from_slice(&digest(&config));
        w.bytes(&config);
        w.u64(self.step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.params.len() as u64);
        for (_, name, t) in self.params.iter() {
            w.bytes(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.floats(t.data());
        }
        w.u64(self.adam.t);
        for t in self.adam.m.iter().chain(&self.adam.v) {
            w.floats(t.data());
        }
        w.bytes(self.vocab.to_tsv().as_bytes());
        w.u64(self.vocab.min_count());
        let sum = digest(&w.0);
        w.0.extend_from_slice(&sum);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < CHECKPOINT_MAGIC.len() + 4 + 32 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        if &buf[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let (body, sum) = buf.split_at(buf.len() - 32);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        if digest(body) != sum {
            return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
        }
        let config_digest = r.take(32, "config digest")?;
        let config_bytes = r.bytes("config")?;
        if digest(config_bytes) != config_digest {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let config: TrainConfig = serde_json::from_slice(config_bytes)?;
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let rng = RngState {
            seed,
            stream: r.u64("rng stream")?,
            word_pos: r.u128("rng position")?,
        };
        let n = r.len("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str("parameter name")?.to_string();
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len("dimension")?);
            }
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count =
                count.ok_or_else(|| Error::Checkpoint(format!("shape overflow in `{name}`")))?;
            let data = r.floats(count, &name)?;
            params
                .register(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let t = r.u64("adam step")?;
        let mut moments = Vec::with_capacity(2 * n);
        for _ in 0..2 {
            for (_, name, p) in params.iter() {
                let data = r.floats(p.len(), name)?;
                moments.push(Tensor::new(p.shape().to_vec(), data)?);
            }
        }
        let v = moments.split_off(n);
        let adam = AdamState { m: moments, v, t };
        let vocab = Vocabulary::from_tsv(r.str("vocabulary")?)?;
        let vocab = vocab.with_min_count(r.u64("vocabulary min count")?);
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after vocabulary".into()));
        }
        Ok(Self {
            config,
            step,
            rng,
            params,
            adam,
            vocab,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Encoder rebuilt from the stored configuration and parameters.
    pub fn encoder(&self) -> Result<EncoderParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = EncoderParams::new(self.config.model.clone(), Init::Zeros, &mut rng)?;
        self.restore_params(&mut model.params)?;
        Ok(model)
    }

    /// Copies stored parameters into `target`. Every name and shape is
    /// checked first, so a mismatch leaves `target` untouched.
    pub fn restore_params(&self, target: &mut ParamStore) -> Result<()> {
        if target.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                target.len()
            )));
        }
        for ((_, a, ta), (_, b, tb)) in self.params.iter().zip(target.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{a}` {:?} does not match model `{b}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        let ids: Vec<_> = target.ids().collect();
        for (id, (_, _, t)) in ids.into_iter().zip(self.params.iter()) {
            *target.get_mut(id) = t.clone();
        }
        Ok(())
    }
}
