//! Little-endian binary snapshot of parameters, velocities and RNG state.
//!
//! Layout: magic `TRICON01`, iteration `u64`, RNG seed `[u8; 32]`, stream
//! `u64`, word position `u128`, then two tensor tables (parameters, then
//! velocities). A table is a `u32` count followed by entries of
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims and `f64` values.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TRICON01";
const MAGIC_PREFIX: &[u8; 6] = b"TRICON";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    pub iteration: u64,
    pub rng: RngState,
    pub params: ParameterSet,
    pub velocity: ParameterSet,
}

fn put_table(out: &mut Vec<u8>, set: &ParameterSet) {
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn table(&mut self) -> Result<ParameterSet> {
        let count = self.u32()?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= self.bytes.len() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for {name}")))?;
            let raw = self.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if set.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            set.insert(name, Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        Ok(set)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_table(&mut out, &self.params);
        put_table(&mut out, &self.velocity);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).map_err(|_| Error::Checkpoint("file too short for a header".into()))?;
        if magic != MAGIC {
            if magic.starts_with(MAGIC_PREFIX) {
                return Err(Error::CheckpointVersion {
                    expected: String::from_utf8_lossy(MAGIC).into_owned(),
                    found: String::from_utf8_lossy(magic).into_owned(),
                });
            }
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let iteration = r.u64()?;
        let seed = r.array()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let params = r.table()?;
        let velocity = r.table()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            iteration,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
