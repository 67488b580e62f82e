//! Named parameter store with a flat binary checkpoint format.
//!
//! Checkpoint layout: magic bytes `SEPTCKPT`, version u32, then per-parameter
//! records of (name length u32, name bytes, rank u32, extents u32..., payload
//! little-endian f64...). Parameters are written in name order, so identical
//! stores serialize to identical bytes.

use super::{DiffArray, GradRecord, TensorError};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered name -> value map of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, DiffArray>,
}

impl Params {
    pub fn new() -> Self {
        Params { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DiffArray) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&DiffArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffArray> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DiffArray)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Register every parameter as a leaf of `rec` for one training step.
    pub fn leaves(&self, rec: &GradRecord) -> LeafParams {
        let map = self.entries.iter().map(|(k, v)| (k.clone(), rec.leaf(v))).collect();
        LeafParams { map }
    }

    /// Parameters as plain constants; forward passes record nothing, which
    /// is the fast path for inference.
    pub fn constants(&self) -> LeafParams {
        LeafParams { map: self.entries.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, value) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &extent in value.shape() {
                buf.extend_from_slice(&(extent as u32).to_le_bytes());
            }
            for &v in value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| TensorError::CheckpointIo(e.to_string()))?;
        file.write_all(&buf).map_err(|e| TensorError::CheckpointIo(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| TensorError::CheckpointIo(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(TensorError::CheckpointFormat(format!("bad magic {magic:?}")));
        }
        let version = cursor.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::CheckpointFormat(format!("unsupported version {version}")));
        }
        let mut entries = BTreeMap::new();
        while !cursor.done() {
            let name_len = cursor.u32()? as usize;
            let name_bytes = cursor.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| TensorError::CheckpointFormat("name is not utf-8".into()))?
                .to_string();
            let rank = cursor.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cursor.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(cursor.f64()?);
            }
            entries.insert(name, DiffArray::new(shape, data)?);
        }
        Ok(Params { entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::CheckpointFormat(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, TensorError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

/// Per-step leaf registrations of a parameter store.
pub struct LeafParams {
    map: BTreeMap<String, DiffArray>,
}

impl LeafParams {
    /// Wrap an explicit name -> array map (used by the gradient suite to
    /// probe parameters as plain check inputs).
    pub fn from_map(map: BTreeMap<String, DiffArray>) -> Self {
        LeafParams { map }
    }

    pub fn get(&self, name: &str) -> Result<&DiffArray, TensorError> {
        self.map.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DiffArray)> {
        self.map.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut p = Params::new();
        p.insert("b.weight", DiffArray::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1e-300, 4.0, 5.5]).unwrap());
        p.insert("a.bias", DiffArray::vector(vec![0.0, -0.0, f64::MIN_POSITIVE]));
        let dir = std::env::temp_dir().join("sept_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.septckpt");
        p.save(&path).unwrap();
        let q = Params::load(&path).unwrap();
        assert_eq!(p.len(), q.len());
        for (name, value) in p.iter() {
            let loaded = q.get(name).unwrap();
            assert_eq!(value.shape(), loaded.shape());
            for (a, b) in value.data().iter().zip(loaded.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn golden_bytes_layout() {
        let mut p = Params::new();
        p.insert("w", DiffArray::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let dir = std::env::temp_dir().join("sept_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("golden.septckpt");
        p.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut expected = Vec::new();
        expected.extend_from_slice(b"SEPTCKPT");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes()); // name length
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&2u32.to_le_bytes()); // rank
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic_rejected() {
        match Params::from_bytes(b"NOTSEPT!\x01\x00\x00\x00") {
            Err(TensorError::CheckpointFormat(msg)) => assert!(msg.contains("magic")),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut p = Params::new();
        p.insert("w", DiffArray::vector(vec![1.0, 2.0]));
        let dir = std::env::temp_dir().join("sept_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.septckpt");
        p.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        match Params::from_bytes(&bytes) {
            Err(TensorError::CheckpointFormat(msg)) => assert!(msg.contains("truncated")),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }
}
