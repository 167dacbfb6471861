//! Binary container for named arrays (checkpoints, datasets, traces).
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "NARY" | version u32 | count u32
//! per entry: name_len u16 | name utf-8 | dtype u8 (0=f32,1=f64,2=u8)
//!            | ndim u8 | shape u64 × ndim | raw payload
//! ```
//!
//! Entries are written in sorted-name order so identical contents produce
//! identical bytes. Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffcore::array::{Array, Scalar};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NARY";
const VERSION: u32 = 1;

/// One stored array with its dtype preserved.
#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Stored {
    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32 { shape, .. } | Stored::F64 { shape, .. } | Stored::U8 { shape, .. } => shape,
        }
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            Stored::F32 { .. } => 0,
            Stored::F64 { .. } => 1,
            Stored::U8 { .. } => 2,
        }
    }

    fn check_len(&self) -> Result<()> {
        let want: usize = self.shape().iter().product();
        let got = match self {
            Stored::F32 { data, .. } => data.len(),
            Stored::F64 { data, .. } => data.len(),
            Stored::U8 { data, .. } => data.len(),
        };
        if want != got {
            return Err(Error::Shape(format!(
                "stored array shape {:?} wants {want} elements, got {got}",
                self.shape()
            )));
        }
        Ok(())
    }
}

/// Named arrays, saved and loaded as one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayContainer {
    entries: BTreeMap<String, Stored>,
}

impl ArrayContainer {
    pub fn new() -> Self {
        ArrayContainer { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Stored) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("container already has an entry named '{name}'")));
        }
        value.check_len()?;
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("entry name too long ({} bytes)", name.len())));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    /// Store a float array under its native dtype.
    pub fn put_array<F: Scalar>(&mut self, name: &str, a: &Array<F>) -> Result<()> {
        let shape = a.shape().to_vec();
        let stored = match F::DTYPE {
            "f32" => Stored::F32 { shape, data: a.data().iter().map(|x| x.as_f64() as f32).collect() },
            _ => Stored::F64 { shape, data: a.to_f64_vec() },
        };
        self.insert(name, stored)
    }

    pub fn put_u8(&mut self, name: &str, shape: Vec<usize>, data: Vec<u8>) -> Result<()> {
        self.insert(name, Stored::U8 { shape, data })
    }

    pub fn get(&self, name: &str) -> Result<&Stored> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("container has no entry named '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fetch as dtype `F`, converting from the stored float width if needed.
    pub fn get_array<F: Scalar>(&self, name: &str) -> Result<Array<F>> {
        match self.get(name)? {
            Stored::F32 { shape, data } => {
                Array::new(shape.clone(), data.iter().map(|&x| F::of_f64(x as f64)).collect())
            }
            Stored::F64 { shape, data } => {
                Array::new(shape.clone(), data.iter().map(|&x| F::of_f64(x)).collect())
            }
            Stored::U8 { .. } => Err(Error::Contract(format!("entry '{name}' holds bytes, not floats"))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name)? {
            Stored::U8 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Contract(format!("entry '{name}' holds floats, not bytes"))),
        }
    }

    /// Serialize to bytes (sorted-name order, deterministic).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.entries.len() > u32::MAX as usize {
            return Err(Error::Contract("too many entries for the container header".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, v) in &self.entries {
            v.check_len()?;
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(v.dtype_tag());
            let shape = v.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Contract(format!("entry '{name}' has too many dims")));
            }
            out.push(shape.len() as u8);
            for &s in shape {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            match v {
                Stored::F32 { data, .. } => {
                    for x in data {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Stored::F64 { data, .. } => {
                    for x in data {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Stored::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"NARY\"")));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not valid UTF-8".into()))?
                .to_string();
            let dtype = cur.take(1)?[0];
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let s = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
                shape.push(s as usize);
            }
            let n: usize = shape.iter().product();
            let stored = match dtype {
                0 => {
                    let raw = cur.take(n * 4)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Stored::F32 { shape, data }
                }
                1 => {
                    let raw = cur.take(n * 8)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Stored::F64 { shape, data }
                }
                2 => Stored::U8 { shape, data: cur.take(n)?.to_vec() },
                other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
            };
            if entries.insert(name.clone(), stored).is_some() {
                return Err(Error::Format(format!("duplicate entry '{name}' in container")));
            }
        }
        if cur.pos != buf.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after the last entry",
                buf.len() - cur.pos
            )));
        }
        Ok(ArrayContainer { entries })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corruption(format!(
                "container truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Write a container to disk.
pub fn save_container(path: &Path, c: &ArrayContainer) -> Result<()> {
    let bytes = c.to_bytes()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Read a container from disk.
pub fn load_container(path: &Path) -> Result<ArrayContainer> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    ArrayContainer::from_bytes(&buf)
}
