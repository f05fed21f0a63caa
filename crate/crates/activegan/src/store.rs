//! Flat binary container for named tensors, used for checkpoints.
//!
//! Layout: magic `AGAN`, format version (u32 LE), then zero or more records
//! of `name_len: u32 LE | name: utf8 | rank: u32 LE | dims: u64 LE each |
//! payload: f64 LE each`, until end of file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"AGAN";
pub const FORMAT_VERSION: u32 = 1;

/// Sanity bounds: a malformed header should fail fast, not allocate gigabytes.
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_DIM: u64 = 1 << 32;

/// An ordered set of named tensors.
#[derive(Default, Debug, Clone)]
pub struct TensorStore {
    entries: BTreeMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> TensorStore {
        TensorStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::contract("store: empty tensor name"));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("store: duplicate tensor name `{}`", name)));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Fetch a tensor that must exist; missing names are format errors since
    /// they indicate a checkpoint from a different layout.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::Format {
            offset: 0,
            detail: format!("checkpoint is missing tensor `{}`", name),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for (name, tensor) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<TensorStore> {
        let mut r = Cursor { inner: r, offset: 0 };
        let mut magic = [0u8; 4];
        r.read_exact_or(&mut magic, "magic header")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {:02x?}, expected {:02x?}", magic, MAGIC),
            });
        }
        let version = r.read_u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported format version {}", version),
            });
        }

        let mut store = TensorStore::new();
        loop {
            let Some(name_len) = r.try_read_u32("tensor name length")? else {
                break; // clean end of file at a record boundary
            };
            if name_len == 0 || name_len > MAX_NAME_LEN {
                return Err(Error::Format {
                    offset: r.offset - 4,
                    detail: format!("implausible name length {}", name_len),
                });
            }
            let name_off = r.offset;
            let mut name_bytes = vec![0u8; name_len as usize];
            r.read_exact_or(&mut name_bytes, "tensor name")?;
            let name = String::from_utf8(name_bytes).map_err(|e| Error::Format {
                offset: name_off,
                detail: format!("tensor name is not utf-8: {}", e),
            })?;

            let rank_off = r.offset;
            let rank = r.read_u32("tensor rank")?;
            if rank > MAX_RANK {
                return Err(Error::Format {
                    offset: rank_off,
                    detail: format!("implausible rank {}", rank),
                });
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let dim_off = r.offset;
                let d = r.read_u64("tensor dimension")?;
                if d > MAX_DIM {
                    return Err(Error::Format {
                        offset: dim_off,
                        detail: format!("implausible dimension {}", d),
                    });
                }
                numel = numel.saturating_mul(d);
                shape.push(d as usize);
            }
            if numel > MAX_DIM {
                return Err(Error::Format {
                    offset: rank_off,
                    detail: format!("implausible element count {}", numel),
                });
            }
            let mut data = Vec::with_capacity(numel as usize);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.read_8("tensor payload")?));
            }
            let tensor = Tensor::new(shape, data)
                .expect("shape/data consistency is guaranteed by construction");
            store.insert(name, tensor)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TensorStore> {
        TensorStore::read_from(BufReader::new(File::open(path)?))
    }
}

/// Reader wrapper that tracks the byte offset for error reporting.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact_or(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Length(format!(
                "file truncated while reading {} at byte {}",
                what, self.offset
            ))),
            Err(e) => Err(e.into()),
        }
    }

    /// Like `read_exact_or`, but a clean EOF before any byte returns `None`.
    fn try_read_u32(&mut self, what: &str) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(Error::Length(format!(
                    "file truncated while reading {} at byte {}",
                    what,
                    self.offset + filled as u64
                )));
            }
            filled += n;
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(buf)))
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact_or(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.read_exact_or(&mut buf, what)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn read_8(&mut self, what: &str) -> Result<[u8; 8]> {
        let mut buf = [0u8; 8];
        self.read_exact_or(&mut buf, what)?;
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> TensorStore {
        let mut s = TensorStore::new();
        s.insert("a/w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 5.5, -6.0]).unwrap())
            .unwrap();
        s.insert("a/b", Tensor::from_vec(vec![0.125, -0.25])).unwrap();
        s.insert("meta", Tensor::scalar(7.0)).unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let store = sample_store();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let back = TensorStore::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for name in ["a/w", "a/b", "meta"] {
            assert_eq!(back.get(name), store.get(name), "{}", name);
        }
    }

    #[test]
    fn header_layout_is_as_documented() {
        let mut s = TensorStore::new();
        s.insert("x", Tensor::scalar(1.0)).unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"AGAN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1); // name len
        assert_eq!(&bytes[12..13], b"x");
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 1); // rank
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 1); // dim
        assert_eq!(f64::from_le_bytes(bytes[25..33].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let bytes = b"NOPE\x01\x00\x00\x00".to_vec();
        match TensorStore::read_from(bytes.as_slice()) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error, got {:?}", other.map(|s| s.len())),
        }
    }

    #[test]
    fn wrong_version_is_a_format_error() {
        let mut bytes = Vec::new();
        sample_store().write_to(&mut bytes).unwrap();
        bytes[4] = 99;
        assert!(matches!(
            TensorStore::read_from(bytes.as_slice()),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn truncation_is_a_length_error() {
        let mut bytes = Vec::new();
        sample_store().write_to(&mut bytes).unwrap();
        for cut in [6, 10, 14, 20, 40, bytes.len() - 3] {
            let truncated = &bytes[..cut];
            assert!(
                matches!(TensorStore::read_from(truncated), Err(Error::Length(_))),
                "cut at {} should be a length error",
                cut
            );
        }
    }

    #[test]
    fn implausible_name_length_is_rejected_early() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            TensorStore::read_from(bytes.as_slice()),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = TensorStore::new();
        s.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("x", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.agan");
        let store = sample_store();
        store.save(&path).unwrap();
        let back = TensorStore::load(&path).unwrap();
        assert_eq!(back.get("a/w"), store.get("a/w"));
    }
}
