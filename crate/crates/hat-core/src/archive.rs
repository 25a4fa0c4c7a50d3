//! Weight archive format.
//!
//! Canonical layout, little-endian throughout:
//!
//! ```text
//! magic    4 bytes  "HATW"
//! version  u32      1
//! count    u64      number of records
//! records  count x { name_len u32, name utf-8, dtype u8, rank u8,
//!                    dims rank x u64, offset u64 }
//! data     tensors back to back, element bytes little-endian
//! ```
//!
//! Records are sorted by name; offsets are relative to the start of the data
//! section and packed ascending with no gaps, so encoding is canonical: any
//! valid archive re-encodes to identical bytes. Malformed structure is a
//! format error; inconsistent sizes, gaps or trailing bytes are integrity
//! errors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HATW";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

pub fn encode<T: Scalar>(entries: &BTreeMap<String, Tensor<T>>) -> Vec<u8> {
    let mut header = Vec::new();
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(entries.len() as u64).to_le_bytes());

    let mut data = Vec::new();
    for (name, t) in entries {
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(T::DTYPE);
        header.push(t.rank() as u8);
        for &d in t.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut data);
        }
    }
    header.extend_from_slice(&data);
    header
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated archive: {what} needs {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            )));
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

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = cur.u64("record count")? as usize;

    struct Record {
        name: String,
        shape: Vec<usize>,
        offset: u64,
        byte_len: u64,
    }
    let mut records: Vec<Record> = Vec::with_capacity(count.min(1 << 16));
    let mut expected_offset = 0u64;
    for i in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("record {i}: name is not valid UTF-8")))?
            .to_string();
        if let Some(prev) = records.last() {
            if prev.name >= name {
                return Err(Error::Format(format!(
                    "records out of order: {:?} then {:?}",
                    prev.name, name
                )));
            }
        }
        let dtype = cur.u8("dtype")?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "{name}: dtype tag {dtype} does not match requested element width {}",
                T::BYTE_WIDTH
            )));
        }
        let rank = cur.u8("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("{name}: rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = cur.u64("dimension")?;
            if d == 0 {
                return Err(Error::Format(format!("{name}: zero dimension")));
            }
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("{name}: element count overflows")))?;
            shape.push(d as usize);
        }
        let offset = cur.u64("offset")?;
        if offset != expected_offset {
            return Err(Error::Integrity(format!(
                "{name}: offset {offset} leaves a gap or overlap (expected {expected_offset})"
            )));
        }
        let byte_len = elems
            .checked_mul(T::BYTE_WIDTH as u64)
            .ok_or_else(|| Error::Format(format!("{name}: byte size overflows")))?;
        expected_offset += byte_len;
        records.push(Record { name, shape, offset, byte_len });
    }

    let data = &bytes[cur.pos..];
    if (data.len() as u64) != expected_offset {
        return Err(Error::Integrity(format!(
            "data section is {} bytes, records describe {expected_offset}",
            data.len()
        )));
    }

    let mut out = BTreeMap::new();
    for r in records {
        let start = r.offset as usize;
        let chunk = &data[start..start + r.byte_len as usize];
        let vals: Vec<T> = chunk
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::read_le)
            .collect();
        out.insert(r.name, Tensor::new(&r.shape, vals)?);
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, entries: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    Ok(std::fs::write(path, encode(entries))?)
}

pub fn load<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    decode(&std::fs::read(path)?)
}
