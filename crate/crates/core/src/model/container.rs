//! ACRS binary container: `"ACRS"`, version, record count, then named typed
//! arrays. Every integer is a little-endian u32.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ACRS";
pub const VERSION: u32 = 1;

const DTYPE_F32: u32 = 0;
const DTYPE_F64: u32 = 1;
const DTYPE_UTF8: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    /// Stored at single precision, held as f64 in memory.
    F32(Tensor),
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

impl Record {
    pub fn tensor(name: impl Into<String>, t: Tensor) -> Self {
        Self {
            name: name.into(),
            payload: Payload::F64(t),
        }
    }

    pub fn text(name: impl Into<String>, s: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            payload: Payload::Text(s.into()),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, records.len())?;
    for r in records {
        put_u32(&mut out, r.name.len())?;
        out.extend_from_slice(r.name.as_bytes());
        match &r.payload {
            Payload::F64(t) | Payload::F32(t) => {
                let f32 = matches!(r.payload, Payload::F32(_));
                put_u32(&mut out, if f32 { DTYPE_F32 } else { DTYPE_F64 } as usize)?;
                put_u32(&mut out, t.rank())?;
                for &d in t.shape() {
                    put_u32(&mut out, d)?;
                }
                for &v in t.data() {
                    if f32 {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    } else {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            Payload::Text(s) => {
                put_u32(&mut out, DTYPE_UTF8 as usize)?;
                put_u32(&mut out, 1)?;
                put_u32(&mut out, s.len())?;
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("missing ACRS magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let count = c.u32()?;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = c.u32()?;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let dtype = c.u32()? as u32;
        let rank = c.u32()?;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(c.u32()?);
        }
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len =
            len.ok_or_else(|| Error::Format(format!("record {name}: dimensions overflow")))?;
        let payload = match dtype {
            DTYPE_F64 => {
                let raw = c.take(
                    len.checked_mul(8)
                        .ok_or_else(|| Error::Format("payload overflow".into()))?,
                )?;
                let data = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Payload::F64(Tensor::from_vec(dims, data)?)
            }
            DTYPE_F32 => {
                let raw = c.take(
                    len.checked_mul(4)
                        .ok_or_else(|| Error::Format("payload overflow".into()))?,
                )?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect();
                Payload::F32(Tensor::from_vec(dims, data)?)
            }
            DTYPE_UTF8 if rank == 1 => {
                let s = std::str::from_utf8(c.take(len)?)
                    .map_err(|_| Error::Format(format!("record {name}: text is not UTF-8")))?;
                Payload::Text(s.to_string())
            }
            other => {
                return Err(Error::Format(format!(
                    "record {name}: unknown dtype {other}"
                )))
            }
        };
        records.push(Record { name, payload });
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(records)
}

pub fn write_file(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let bytes = encode(records)?;
    let path = path.as_ref();
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("acrs.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
