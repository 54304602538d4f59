//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "IEOR"            magic
//! u32               format version
//! u16 + bytes       phase tag (UTF-8)
//! u32               epoch
//! u64               seed
//! u32               block count
//! per block:
//!   u16 + bytes     parameter name (UTF-8)
//!   u8              rank
//!   u32 × rank      dimensions
//!   u64             payload byte length (= 4 × element count)
//!   f32 × n         values
//! ```

use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IEOR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub phase: String,
    pub epoch: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.meta.phase)?;
        out.extend_from_slice(&self.meta.epoch.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            put_str(&mut out, &p.name)?;
            let shape = p.value.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("parameter `{}` has too many dimensions", p.name)));
            }
            out.push(shape.len() as u8);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&((p.value.len() * 4) as u64).to_le_bytes());
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"IEOR\"")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {version} (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let phase = r.string("phase")?;
        let epoch = r.u32("epoch")?;
        let seed = r.u64("seed")?;
        let n = r.u32("block count")?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let name = r.string("parameter name")?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let count: usize = shape.iter().product();
            let byte_len = r.u64("block length")?;
            if byte_len != (count as u64) * 4 {
                return Err(Error::Checkpoint(format!(
                    "block `{name}` declares {byte_len} bytes but shape {shape:?} needs {}",
                    count * 4
                )));
            }
            let payload = r.take(byte_len as usize, "block payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("block `{name}`: {e}")))?;
            if params.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            params.push(name, value);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            meta: CheckpointMeta { phase, epoch, seed },
            params,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Checkpoint("string too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()) as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
