//! CSTF tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSTF" | u32 version (=1) | record*
//! record = u16 name_len | name (UTF-8) | u8 dtype (0=f32, 1=u32) | u8 rank
//!          | u32 dims[rank] | payload (row-major, little-endian)
//! ```
//!
//! Records run until end of file. A rank-0 record holds one element.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{format_err, shape_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"CSTF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U32(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Record {
    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self::new(name.into(), dims, TensorData::F32(data))
    }

    pub fn u32(name: impl Into<String>, dims: &[usize], data: Vec<u32>) -> Self {
        Self::new(name.into(), dims, TensorData::U32(data))
    }

    pub fn scalar_u32(name: impl Into<String>, value: u32) -> Self {
        Self::new(name.into(), &[], TensorData::U32(vec![value]))
    }

    fn new(name: String, dims: &[usize], data: TensorData) -> Self {
        let expected: usize = dims.iter().product();
        assert_eq!(
            expected,
            data.len(),
            "record {name}: dims {dims:?} do not match payload length {}",
            data.len()
        );
        Self {
            name,
            dims: dims.iter().map(|&d| d as u32).collect(),
            data,
        }
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    records: Vec<Record>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Inserts a record, replacing any existing record with the same name.
    pub fn push(&mut self, record: Record) {
        if let Some(slot) = self.records.iter_mut().find(|r| r.name == record.name) {
            *slot = record;
        } else {
            self.records.push(record);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    /// Fetches an f32 tensor and checks its dims.
    pub fn f32_tensor(&self, name: &str, dims: &[usize]) -> Result<&[f32]> {
        let rec = self
            .get(name)
            .ok_or_else(|| format_err(format!("missing record {name}")))?;
        if rec.dims_usize() != dims {
            return Err(shape_err(format!(
                "record {name} has dims {:?}, expected {dims:?}",
                rec.dims
            )));
        }
        match &rec.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U32(_) => Err(format_err(format!("record {name} is u32, expected f32"))),
        }
    }

    pub fn f32_any(&self, name: &str) -> Result<(&[f32], Vec<usize>)> {
        let rec = self
            .get(name)
            .ok_or_else(|| format_err(format!("missing record {name}")))?;
        match &rec.data {
            TensorData::F32(v) => Ok((v, rec.dims_usize())),
            TensorData::U32(_) => Err(format_err(format!("record {name} is u32, expected f32"))),
        }
    }

    pub fn u32_any(&self, name: &str) -> Result<(&[u32], Vec<usize>)> {
        let rec = self
            .get(name)
            .ok_or_else(|| format_err(format!("missing record {name}")))?;
        match &rec.data {
            TensorData::U32(v) => Ok((v, rec.dims_usize())),
            TensorData::F32(_) => Err(format_err(format!("record {name} is f32, expected u32"))),
        }
    }

    pub fn scalar_u32(&self, name: &str) -> Result<u32> {
        let (v, _) = self.u32_any(name)?;
        match v {
            [x] => Ok(*x),
            _ => Err(shape_err(format!("record {name} is not a scalar"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for rec in &self.records {
            let name = rec.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| format_err(format!("record name too long: {}", rec.name)))?;
            let rank = u8::try_from(rec.dims.len())
                .map_err(|_| format_err(format!("record {} has rank > 255", rec.name)))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[rec.data.dtype(), rank])?;
            for d in &rec.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(rec.data.len() * 4);
            match &rec.data {
                TensorData::F32(v) => v.iter().for_each(|x| payload.extend(x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| payload.extend(x.to_le_bytes())),
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(format_err(format!("bad magic {magic:?}")));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let mut container = Container::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u16("name length")? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "name")?)
                .map_err(|e| format_err(format!("record name is not UTF-8: {e}")))?
                .to_owned();
            let dtype = cur.u8("dtype")?;
            let rank = cur.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32("dims")?);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| format_err(format!("record {name}: element count overflows")))?;
            let nbytes = count
                .checked_mul(4)
                .ok_or_else(|| format_err(format!("record {name}: payload size overflows")))?;
            let payload = cur.take(nbytes, &name)?;
            let words = payload
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match dtype {
                0 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
                1 => TensorData::U32(words.map(u32::from_le_bytes).collect()),
                other => return Err(format_err(format!("record {name}: unknown dtype {other}"))),
            };
            if container.contains(&name) {
                return Err(format_err(format!("duplicate record {name}")));
            }
            container.records.push(Record { name, dims, data });
        }
        Ok(container)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                format_err(format!(
                    "truncated file while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Container::new();
        c.push(Record::f32("x", &[2], vec![1.0, -2.0]));
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"CSTF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        // name_len(2) + "x" + dtype + rank + dim + 2 floats
        assert_eq!(bytes.len(), 8 + 2 + 1 + 1 + 1 + 4 + 8);
        assert_eq!(&bytes[8..10], &1u16.to_le_bytes());
        assert_eq!(bytes[10], b'x');
        assert_eq!(bytes[11], 0);
        assert_eq!(bytes[12], 1);
    }

    #[test]
    fn empty_container_round_trips() {
        let c = Container::new();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = Container::new().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_version_error() {
        let mut bytes = Container::new().to_bytes();
        bytes[4] = 7;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn truncation_is_format_error() {
        let mut c = Container::new();
        c.push(Record::u32("ids", &[3, 2], vec![1, 2, 3, 4, 5, 6]));
        let bytes = c.to_bytes();
        for cut in [3, 6, 9, bytes.len() - 1] {
            assert!(
                matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn scalar_records() {
        let mut c = Container::new();
        c.push(Record::scalar_u32("cfg.patch", 14));
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.scalar_u32("cfg.patch").unwrap(), 14);
        assert!(back.get("cfg.patch").unwrap().dims.is_empty());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            floats in prop::collection::vec(any::<u32>().prop_map(f32::from_bits), 0..64),
            ints in prop::collection::vec(any::<u32>(), 0..64),
        ) {
            let mut c = Container::new();
            c.push(Record::f32("a/b", &[floats.len()], floats.clone()));
            c.push(Record::u32("ints", &[1, ints.len()], ints));
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            let (got, _) = back.f32_any("a/b").unwrap();
            let got_bits: Vec<u32> = got.iter().map(|x| x.to_bits()).collect();
            let want_bits: Vec<u32> = floats.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got_bits, want_bits);
            prop_assert_eq!(back.get("ints"), c.get("ints"));
        }
    }
}
