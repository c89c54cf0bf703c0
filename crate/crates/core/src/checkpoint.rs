//! Named-tensor checkpoints.
//!
//! Layout (little-endian): `COCA`, version u32, count u32, then per tensor
//! a u16 name length, the UTF-8 name, a u8 rank, u32 dims and f32 data.
//! A CRC32 of every preceding byte closes the file.

use std::fs;
use std::path::Path;

use coca_numerics::{ParamStore, Tensor};

use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"COCA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name of {} bytes", name.len())))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("{name}: rank {}", t.rank())))?;
            buf.extend_from_slice(&name_len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(rank);
            for &d in t.shape() {
                let d =
                    u32::try_from(d).map_err(|_| Error::Format(format!("{name}: extent {d}")))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a COCA checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unknown version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| bad("tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = if rank == 0 {
                Tensor::scalar(data_first(data)?)
            } else {
                Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }

    /// Every parameter of `store` under `prefix`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.name()), p.to_tensor());
        }
    }

    /// Overwrites every parameter of `store` from tensors under `prefix`;
    /// names and shapes must match exactly.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.get(id).name());
            let t = self.require(&name)?;
            store
                .set_value(id, t)
                .map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        }
        Ok(())
    }
}

fn data_first(data: Vec<f32>) -> Result<f32> {
    data.first()
        .copied()
        .ok_or_else(|| Error::Format("checkpoint: empty scalar".into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint: truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
