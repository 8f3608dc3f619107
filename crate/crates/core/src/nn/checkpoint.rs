//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "EDGFCKPT"
//! version    u32      1
//! n_meta     u32
//!   key_len u32, key utf-8, val_len u32, val utf-8      (n_meta times)
//! n_tensors  u32
//!   name_len u32, name utf-8, ndim u32, dims u64 × ndim,
//!   values f64 × product(dims)                           (n_tensors times)
//! ```
//!
//! Metadata is written in key order and tensors in insertion order, so the
//! same contents always serialise to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"EDGFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: IndexMap<String, Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Malformed {
                format: "checkpoint",
                offset: self.pos,
                message: format!("need {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Malformed {
            format: "checkpoint",
            offset: at,
            message: "string is not valid utf-8".into(),
        })
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, t: Tensor) -> Result<()> {
        if self.tensors.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate entry {name:?}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Malformed {
                format: "checkpoint",
                offset: 0,
                message: "bad magic header".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Unsupported(format!("checkpoint format version {version}")));
        }
        let mut ckpt = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ckpt.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let at = r.pos;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Malformed {
                format: "checkpoint",
                offset: at,
                message: "tensor size overflows".into(),
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Float)
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Malformed {
                format: "checkpoint",
                offset: at,
                message: e.to_string(),
            })?;
            ckpt.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed {
                format: "checkpoint",
                offset: r.pos,
                message: "trailing bytes".into(),
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_input_names_offset() {
        let mut c = Checkpoint::new();
        c.insert("w".into(), Tensor::ones(&[2, 2])).unwrap();
        let bytes = c.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("byte offset"), "{err}");
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise_exact(
            vals in prop::collection::vec(-1e6f64..1e6, 1..40),
            key in "[a-z]{1,8}",
        ) {
            let mut c = Checkpoint::new();
            c.meta.insert(key.clone(), "value".into());
            let t = Tensor::new(&[vals.len()], vals.iter().map(|&v| v as Float).collect()).unwrap();
            c.insert(format!("p.{key}"), t).unwrap();
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }
}
