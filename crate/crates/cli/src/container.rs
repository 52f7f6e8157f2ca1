//! `PNQW` weight container.
//!
//! Layout, all integers little-endian: `"PNQW"`, `u16` version, `u32` entry
//! count, then per entry a `u16` name length and UTF-8 name, a `u8` dtype
//! (0 int8, 1 int16, 2 float32), an `i8` frac_bits, a `u8` rank, `rank` `u32`
//! dims and the row-major payload.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"PNQW";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Int8(Vec<i8>),
    Int16(Vec<i16>),
    Float32(Vec<f32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Int8(v) => v.len(),
            TensorData::Int16(v) => v.len(),
            TensorData::Float32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::Int8(_) => 0,
            TensorData::Int16(_) => 1,
            TensorData::Float32(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    /// Ignored for float32 entries.
    pub frac_bits: i8,
    pub data: TensorData,
}

impl Entry {
    pub fn float(name: impl Into<String>, dims: Vec<u32>, values: impl IntoIterator<Item = f64>) -> Self {
        Entry { name: name.into(), dims, frac_bits: 0, data: TensorData::Float32(values.into_iter().map(|v| v as f32).collect()) }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightContainer {
    pub entries: Vec<Entry>,
}

fn format_err(msg: impl Into<String>) -> CliError {
    CliError::Format(msg.into())
}

fn take<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| format_err(format!("truncated container while reading {what}")))?;
    Ok(buf)
}

fn take_array<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| format_err(format!("truncated container while reading {what}")))?;
    Ok(buf)
}

impl WeightContainer {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(format_err(format!("duplicate entry `{}`", e.name)));
            }
            let elems: u64 = e.dims.iter().map(|&d| d as u64).product();
            if elems != e.data.len() as u64 {
                return Err(format_err(format!(
                    "entry `{}` has dims {:?} but {} values",
                    e.name,
                    e.dims,
                    e.data.len()
                )));
            }
            if e.dims.len() > u8::MAX as usize || e.name.len() > u16::MAX as usize {
                return Err(format_err(format!("entry `{}` header does not fit", e.name)));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        let count = u32::try_from(self.entries.len()).map_err(|_| format_err("too many entries"))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u16).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.data.dtype(), e.frac_bits as u8, e.dims.len() as u8])?;
            for d in &e.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            match &e.data {
                TensorData::Int8(v) => w.write_all(&v.iter().map(|&x| x as u8).collect::<Vec<_>>())?,
                TensorData::Int16(v) => w.write_all(&v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>())?,
                TensorData::Float32(v) => w.write_all(&v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>())?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let magic: [u8; 4] = take_array(&mut r, "magic")?;
        if &magic != MAGIC {
            return Err(format_err("not a PNQW weight container"));
        }
        let version = u16::from_le_bytes(take_array(&mut r, "version")?);
        if version != VERSION {
            return Err(format_err(format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(take_array(&mut r, "entry count")?);
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take_array(&mut r, "name length")?) as usize;
            let name = String::from_utf8(take(&mut r, name_len, "name")?)
                .map_err(|_| format_err("entry name is not UTF-8"))?;
            let [dtype, frac, rank] = take_array(&mut r, "entry header")?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take_array(&mut r, "dims")?));
            }
            let elems = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let elems = elems
                .filter(|&n| n <= 1 << 31)
                .ok_or_else(|| format_err(format!("entry `{name}` is implausibly large")))?;
            let data = match dtype {
                0 => TensorData::Int8(take(&mut r, elems, &name)?.into_iter().map(|b| b as i8).collect()),
                1 => TensorData::Int16(
                    take(&mut r, elems * 2, &name)?.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
                ),
                2 => TensorData::Float32(
                    take(&mut r, elems * 4, &name)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                other => return Err(format_err(format!("entry `{name}` has unknown dtype {other}"))),
            };
            entries.push(Entry { name, dims, frac_bits: frac as i8, data });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(format_err(format!("{} trailing bytes after the last entry", rest.len())));
        }
        let c = WeightContainer { entries };
        c.validate()?;
        Ok(c)
    }
}
