//! Named weight storage, initialization and the binary weight file format.
//!
//! File layout (little endian): magic `FSAL`, `u16` version, `u32` entry
//! count, then per entry a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank` `u32` dimensions and the `f32` payload. Trailing unit dimensions
//! are dropped on save and restored on load.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{NetworkGraph, SlotRole};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub const WEIGHT_MAGIC: &[u8; 4] = b"FSAL";
pub const WEIGHT_VERSION: u16 = 1;

/// Weight tensors keyed by slot name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> WeightStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingSlot(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingSlot(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn cast<U: Element>(&self) -> WeightStore<U> {
        WeightStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every slot of `other` whose name passes `keep`.
    pub fn merge_from(&mut self, other: &WeightStore<T>, keep: impl Fn(&str) -> bool) {
        for (k, v) in other.iter() {
            if keep(k) {
                self.tensors.insert(k.to_string(), v.clone());
            }
        }
    }

    /// Every slot the graph declares must exist with the declared shape.
    pub fn check(&self, graph: &NetworkGraph) -> Result<()> {
        for slot in graph.slots() {
            let t = self.get(&slot.name)?;
            if t.shape() != slot.shape {
                return Err(Error::SlotShape {
                    slot: slot.name,
                    expected: slot.shape.dims(),
                    got: t.shape().dims(),
                });
            }
        }
        Ok(())
    }

    /// Total number of learned scalars (running statistics excluded).
    pub fn parameter_count(&self, graph: &NetworkGraph) -> usize {
        graph
            .slots()
            .iter()
            .filter(|s| s.role.is_parameter())
            .map(|s| s.shape.numel())
            .sum()
    }
}

/// Deterministic initialization of every slot in `graph`.
///
/// Conv weights are uniform in `±sqrt(6 / fan_in)`, biases uniform in
/// `±1 / sqrt(fan_in)`. Batch norm starts as the identity.
pub fn init_weights(graph: &NetworkGraph, seed: u64) -> WeightStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    let mut fan_in = 1usize;
    for slot in graph.slots() {
        let n = slot.shape.numel();
        let data: Vec<f32> = match slot.role {
            SlotRole::Weight => {
                fan_in = slot.shape.c * slot.shape.h * slot.shape.w;
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            SlotRole::Bias => {
                let bound = (1.0 / fan_in as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            SlotRole::Gamma | SlotRole::RunningVar => vec![1.0; n],
            SlotRole::Beta | SlotRole::RunningMean => vec![0.0; n],
        };
        store.insert(slot.name, Tensor::from_vec(slot.shape, data).expect("slot shape"));
    }
    store
}

fn trimmed_dims(shape: Shape) -> Vec<usize> {
    let mut dims = shape.dims().to_vec();
    while dims.last() == Some(&1) {
        dims.pop();
    }
    dims
}

pub fn weights_to_bytes(store: &WeightStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::config("too many weight slots"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("slot name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = trimmed_dims(t.shape());
        out.push(dims.len() as u8);
        for d in dims {
            let d = u32::try_from(d).map_err(|_| Error::config("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(self.pos, format!("unexpected end of file reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

pub fn weights_from_bytes(bytes: &[u8]) -> Result<WeightStore<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != WEIGHT_MAGIC {
        return Err(Error::parse(0, "bad magic, expected FSAL"));
    }
    let version = r.u16("version")?;
    if version != WEIGHT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: WEIGHT_VERSION,
        });
    }
    let count = r.u32("entry count")?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(name_at, "slot name is not UTF-8"))?
            .to_string();
        let rank_at = r.pos;
        let rank = r.u8("rank")? as usize;
        if rank > 4 {
            return Err(Error::parse(rank_at, format!("rank {rank} exceeds 4")));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank) {
            *d = r.u32("dimension")? as usize;
        }
        let shape = Shape::from_dims(dims);
        let payload_at = r.pos;
        let n = shape.numel();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::parse(payload_at, "payload too large"))?, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if store.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
            return Err(Error::parse(name_at, format!("duplicate slot `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos, "trailing bytes after last entry"));
    }
    Ok(store)
}

pub fn save_weights(store: &WeightStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, weights_to_bytes(store)?).map_err(|e| Error::file(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    weights_from_bytes(&bytes).map_err(|e| e.in_file(path))
}
