//! Versioned binary container of named blocks.
//!
//! Layout, little-endian: magic `ODCK`, u32 version, u32 block count, then per
//! block: u16 name length, UTF-8 name, u8 kind (0 = f64, 1 = u64, 2 = bytes),
//! u32 rank, u64 dims, payload. Values are stored bit-exactly.

use std::io::{Read, Write};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ODCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl BlockData {
    fn len(&self) -> usize {
        match self {
            BlockData::F64(v) => v.len(),
            BlockData::U64(v) => v.len(),
            BlockData::Bytes(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlockData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub blocks: Vec<NamedBlock>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    fn put(&mut self, name: &str, shape: Vec<usize>, data: BlockData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blocks.retain(|b| b.name != name);
        self.blocks.push(NamedBlock { name: name.to_string(), shape, data });
    }

    pub fn put_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.put(name, shape, BlockData::F64(data));
    }

    pub fn put_u64(&mut self, name: &str, data: Vec<u64>) {
        self.put(name, vec![data.len()], BlockData::U64(data));
    }

    pub fn put_bytes(&mut self, name: &str, data: Vec<u8>) {
        self.put(name, vec![data.len()], BlockData::Bytes(data));
    }

    pub fn put_str(&mut self, name: &str, s: &str) {
        self.put_bytes(name, s.as_bytes().to_vec());
    }

    fn find(&self, name: &str) -> Result<&NamedBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format { offset: 0, message: format!("checkpoint has no block `{name}`") })
    }

    pub fn has(&self, name: &str) -> bool {
        self.blocks.iter().any(|b| b.name == name)
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.find(name)?.data {
            BlockData::F64(v) => Ok(v),
            _ => Err(Error::Format { offset: 0, message: format!("block `{name}` is not f64") }),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.find(name)?.data {
            BlockData::U64(v) => Ok(v),
            _ => Err(Error::Format { offset: 0, message: format!("block `{name}` is not u64") }),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        self.u64s(name)?
            .first()
            .copied()
            .ok_or_else(|| Error::Format { offset: 0, message: format!("block `{name}` is empty") })
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.find(name)?.data {
            BlockData::Bytes(v) => Ok(v),
            _ => Err(Error::Format { offset: 0, message: format!("block `{name}` is not bytes") }),
        }
    }

    pub fn string(&self, name: &str) -> Result<String> {
        String::from_utf8(self.bytes(name)?.to_vec())
            .map_err(|_| Error::Format { offset: 0, message: format!("block `{name}` is not UTF-8") })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            let kind: u8 = match b.data {
                BlockData::F64(_) => 0,
                BlockData::U64(_) => 1,
                BlockData::Bytes(_) => 2,
            };
            out.push(kind);
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &b.data {
                BlockData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, message: "bad magic, expected ODCK".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version, expected: VERSION });
        }
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format { offset: at, message: "block name is not UTF-8".into() })?;
            let at = r.pos;
            let kind = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
                offset: at,
                message: format!("block `{name}` shape overflows"),
            })?;
            let data = match kind {
                0 => BlockData::F64(
                    r.take(len.checked_mul(8).unwrap_or(usize::MAX))?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => BlockData::U64(
                    r.take(len.checked_mul(8).unwrap_or(usize::MAX))?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => BlockData::Bytes(r.take(len)?.to_vec()),
                k => return Err(Error::Format { offset: at, message: format!("unknown block kind {k}") }),
            };
            blocks.push(NamedBlock { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, message: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        Ok(Self { blocks })
    }

    pub fn save<W: Write>(&self, sink: &mut W) -> Result<()> {
        sink.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load<R: Read>(source: &mut R) -> Result<Self> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
