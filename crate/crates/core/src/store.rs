//! Named-tensor container and its binary file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SKW1" | version u32 | count u32
//! count × ( name_len u16 | name utf-8 | rank u8 | rank × extent u32 | f32 payload )
//! crc32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result, StoreError};
use crate::nn::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SKW1";
pub const VERSION: u32 = 1;

/// Tensors keyed by name, kept in sorted order so serialization is canonical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Option<Tensor<f32>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>, StoreError> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| StoreError::Missing(name.to_owned()))?;
        if t.shape() != shape {
            return Err(StoreError::ShapeMismatch {
                name: name.to_owned(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    /// Copies every parameter of `module` into the store.
    pub fn put_all(&mut self, module: &dyn Parameters<f32>) {
        module.visit(&mut |name, t| {
            self.tensors.insert(name.to_owned(), t.clone());
        });
    }

    /// Overwrites every parameter of `module` from the store, checking shapes.
    pub fn fill(&self, module: &mut dyn Parameters<f32>) -> Result<(), StoreError> {
        let mut first_err = None;
        module.visit_mut(&mut |name, t| {
            if first_err.is_some() {
                return;
            }
            match self.expect(name, t.shape()) {
                Ok(src) => *t = src.clone(),
                Err(e) => first_err = Some(e),
            }
        });
        first_err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| StoreError::NameTooLong(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(StoreError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| StoreError::BadName)?
                .to_owned();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(StoreError::Truncated("payload"))?;
            let raw = r.take(n.checked_mul(4).ok_or(StoreError::Truncated("payload"))?, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let t = Tensor::new(shape, data).expect("extent product matches payload");
            if tensors.insert(name.clone(), t).is_some() {
                return Err(StoreError::DuplicateName(name));
            }
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(StoreError::Checksum { stored, computed });
        }
        if r.pos != bytes.len() {
            return Err(StoreError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(WeightStore { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(StoreError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}

/// Stores a `u64` exactly as four 16-bit chunks in an `f32` tensor.
pub fn u64_to_tensor(v: u64) -> Tensor<f32> {
    Tensor::from_vec((0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect())
}

pub fn tensor_to_u64(t: &Tensor<f32>) -> Option<u64> {
    if t.shape() != [4] {
        return None;
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (i, &c)| {
        ((0.0..=65535.0).contains(&c) && c.fract() == 0.0).then(|| acc | ((c as u64) << (16 * i)))
    })
}
