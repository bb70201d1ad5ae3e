//! Named parameter storage and the `MMWT` weights container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMWT"  u16 version  u32 entry-count
//! per entry: u32 name-len, name (UTF-8), u32 rank, rank x u32 dims, f32 values
//! ```
//!
//! Entries are written in name order, so equal stores serialize to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MMWT";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore<T = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        WeightStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Keeps only the entries belonging to `layer` (`layer/...`).
    pub fn layer_subset(&self, layer: &str) -> WeightStore<T> {
        let prefix = format!("{layer}/");
        WeightStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(&prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

impl WeightStore<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a complete container. Nothing is returned unless every entry parses.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::WeightsFormat("bad magic, expected MMWT".into()));
        }
        let version = r.u16()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::WeightsFormat(format!(
                "unsupported version {version}, expected {WEIGHTS_VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::WeightsFormat("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::WeightsFormat("entry too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::WeightsFormat(format!("entry `{name}`: {e}")))?;
            if store.entries.insert(name.clone(), t).is_some() {
                return Err(Error::WeightsFormat(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightsFormat(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::WeightsFormat(format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(store: &WeightStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightStore::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("V_conv2d_1/kernel", Tensor::new(vec![1, 1, 2, 2], vec![0.5, -1.25, f32::MIN_POSITIVE, 3.0]).unwrap());
        s.insert("V_conv2d_1/bias", Tensor::new(vec![2], vec![0.0, -0.0]).unwrap());
        s
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"MMWT");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]), 2);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 5, 9, 14, bytes.len() - 1] {
            match WeightStore::from_bytes(&bytes[..cut]) {
                Err(Error::WeightsFormat(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(WeightStore::from_bytes(&bytes).is_err());
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let err = WeightStore::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn negative_zero_survives() {
        let back = WeightStore::from_bytes(&sample().to_bytes()).unwrap();
        let bias = back.get("V_conv2d_1/bias").unwrap();
        assert_eq!(bias.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::btree_map(
                "[A-Za-z_/0-9]{1,12}",
                (proptest::collection::vec(1usize..4, 1..4), any::<u32>()),
                0..5,
            )
        ) {
            let mut store = WeightStore::new();
            for (name, (shape, seed)) in &entries {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
                store.insert(name.clone(), Tensor::new(shape.clone(), data).unwrap());
            }
            let bytes = store.to_bytes();
            let back = WeightStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for (name, t) in store.iter() {
                let b = back.get(name).unwrap();
                prop_assert_eq!(b.shape(), t.shape());
                let same = b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
        }
    }
}
