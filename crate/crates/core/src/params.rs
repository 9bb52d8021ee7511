//! Named parameter registry, seeded initialisation and the binary
//! checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"TBTW" | version: u32 | count: u32 |
//!   count × ( name_len: u16 | name bytes | rank: u8 | extent: u32 × rank | f64 × numel )
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TBTW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter `{0}` registered twice")]
    Duplicate(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Ordered registry of named tensors. Insertion order is the checkpoint order.
#[derive(Clone)]
pub struct ParamStore {
    seed: u64,
    rng: ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let id = ParamId(self.tensors.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<ParamId, ParamError> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                data.push(z * std);
            }
        }
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape product"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId, ParamError> {
        self.insert(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId, ParamError> {
        self.insert(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Sum of element counts of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_elements() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (_, name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for e in t.shape() {
                out.extend_from_slice(&(*e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a checkpoint into `(name, tensor)` pairs in file order.
    pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, ParamError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(ParamError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ParamError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| ParamError::Format("parameter name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, e| a.checked_mul(*e))
                .ok_or_else(|| ParamError::Format(format!("{name}: extents overflow")))?;
            let payload = r.take(numel.checked_mul(8).ok_or_else(|| ParamError::Format("payload overflow".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Tensor::new(shape, data).expect("numel checked")));
        }
        if r.pos != bytes.len() {
            return Err(ParamError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }

    /// Overwrites every parameter from a decoded checkpoint. Names, order and
    /// shapes must match exactly.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<(), ParamError> {
        if entries.len() != self.len() {
            return Err(ParamError::Mismatch(format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                self.len()
            )));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(ParamError::Mismatch(format!("expected `{}`, found `{name}`", self.names[i])));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(ParamError::Mismatch(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        fs::write(path, self.to_bytes()).map_err(|source| ParamError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(&mut self, path: &Path) -> Result<(), ParamError> {
        let bytes = fs::read(path).map_err(|source| ParamError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.load_entries(Self::decode(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| ParamError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ParamError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ParamError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            let mut s = ParamStore::new(seed);
            s.trunc_normal("a", &[4, 5], 0.02).unwrap();
            s.trunc_normal("b", &[3], 1.0).unwrap();
            s.to_bytes()
        };
        assert_eq!(build(11), build(11));
        assert_ne!(build(11), build(12));
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut s = ParamStore::new(3);
        let id = s.trunc_normal("w", &[1000], 0.02).unwrap();
        assert!(s.get(id).data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn checkpoint_golden_bytes() {
        let mut s = ParamStore::new(0);
        s.insert("b", Tensor::vector(vec![1.5])).unwrap();
        let bytes = s.to_bytes();
        let mut expected = b"TBTW".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, b'b', 1, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let mut s = ParamStore::new(5);
        s.trunc_normal("x.weight", &[2, 3, 4], 0.5).unwrap();
        s.zeros("x.bias", &[4]).unwrap();
        let bytes = s.to_bytes();
        let mut t = ParamStore::new(99);
        t.zeros("x.weight", &[2, 3, 4]).unwrap();
        t.zeros("x.bias", &[4]).unwrap();
        t.load_entries(ParamStore::decode(&bytes).unwrap()).unwrap();
        assert_eq!(t.to_bytes(), bytes);

        assert!(matches!(ParamStore::decode(&bytes[..bytes.len() - 1]), Err(ParamError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamStore::decode(&bad), Err(ParamError::Format(_))));

        let mut u = ParamStore::new(0);
        u.zeros("x.weight", &[2, 3, 5]).unwrap();
        u.zeros("x.bias", &[4]).unwrap();
        assert!(matches!(u.load_entries(ParamStore::decode(&bytes).unwrap()), Err(ParamError::Mismatch(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.zeros("a", &[1]).unwrap();
        assert!(matches!(s.zeros("a", &[1]), Err(ParamError::Duplicate(_))));
    }
}
