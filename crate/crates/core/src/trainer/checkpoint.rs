//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DTPR" | version u32 | config_len u64 | config bytes
//! | step u64 | rng seed [u8; 32] | rng stream u64 | rng word_pos u128
//! | n_params u32 | n_params × (name_len u32 | name | rank u32 | dims u64… | data f64…)
//! | adam_t u64 | n_params × (m f64…) | n_params × (v f64…)
//! | crc32 u32 over every preceding byte
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DTPR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical text of the configuration that produced the state.
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
    pub adam_t: u64,
    /// First and second moments, one pair per parameter.
    pub moments: Vec<(Tensor, Tensor)>,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} while reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large at byte {}", self.pos)))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("{what}: size overflow at byte {}", self.pos)))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.moments.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} moment pairs for {} parameters",
                self.moments.len(),
                self.params.len()
            )));
        }
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION);
        put_u64(&mut b, self.config.len() as u64);
        b.extend_from_slice(self.config.as_bytes());
        put_u64(&mut b, self.step);
        b.extend_from_slice(&self.rng.seed);
        put_u64(&mut b, self.rng.stream);
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut b, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut b, name.len() as u32);
            b.extend_from_slice(name.as_bytes());
            put_u32(&mut b, t.rank() as u32);
            for &d in t.shape() {
                put_u64(&mut b, d as u64);
            }
            put_f64s(&mut b, t.data());
        }
        put_u64(&mut b, self.adam_t);
        for (m, _) in &self.moments {
            put_f64s(&mut b, m.data());
        }
        for (_, v) in &self.moments {
            put_f64s(&mut b, v.data());
        }
        let crc = crc32fast::hash(&b);
        put_u32(&mut b, crc);
        Ok(b)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes (not a checkpoint file)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let n = r.len("config length")?;
        let config = std::str::from_utf8(r.take(n, "config text")?)
            .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?
            .to_owned();
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let len = r.u32("parameter name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "parameter name")?)
                .map_err(|_| Error::Checkpoint(format!("parameter {i}: name is not UTF-8")))?
                .to_owned();
            let rank = r.u32("parameter rank")? as usize;
            let shape = (0..rank).map(|_| r.len("parameter dimension")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("entry {name}: shape {shape:?} overflows")))?;
            let data = r.f64s(numel, "parameter data")?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("entry {name}: {e}")))?;
            params.push((name, t));
        }
        let adam_t = r.u64("optimizer step")?;
        let mut firsts = Vec::with_capacity(params.len());
        for (_, p) in &params {
            firsts.push(Tensor::new(p.shape(), r.f64s(p.numel(), "first moments")?)?);
        }
        let mut moments = Vec::with_capacity(params.len());
        for ((_, p), m) in params.iter().zip(firsts) {
            moments.push((m, Tensor::new(p.shape(), r.f64s(p.numel(), "second moments")?)?));
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checksum at byte {}",
                buf.len() - r.pos,
                r.pos
            )));
        }
        let actual = crc32fast::hash(&buf[..body_end]);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        Ok(Checkpoint {
            config,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
            adam_t,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
