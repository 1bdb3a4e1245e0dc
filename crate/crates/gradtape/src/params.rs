use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

const BLOB_MAGIC: &[u8; 8] = b"GTPARAM1";

/// Named trainable tensors with deterministic, seeded initialization.
///
/// Parameters keep their insertion order, which is also the serialization
/// order, so two stores built by the same code with the same seed are
/// identical.
#[derive(Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: vec![],
            values: vec![],
            frozen: vec![],
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f32) -> ParamId {
        self.add(name, Tensor::full(shape, v))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, f) in self.names.iter().zip(self.frozen.iter_mut()) {
            if name.starts_with(prefix) {
                *f = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names.iter().enumerate().filter(move |(_, n)| n.starts_with(prefix)).map(|(i, _)| ParamId(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Serialize names, frozen flags, shapes and values (little endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 4);
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for ((name, value), &frozen) in self.names.iter().zip(&self.values).zip(&self.frozen) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(frozen as u8);
            out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Overwrite values and frozen flags from a blob produced by
    /// [`ParamStore::to_bytes`]. Every stored parameter must exist here with
    /// the same shape, and vice versa.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<(), String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != BLOB_MAGIC {
            return Err("bad parameter blob magic".into());
        }
        let count = r.u32()? as usize;
        if count != self.values.len() {
            return Err(format!("blob holds {count} parameters, model has {}", self.values.len()));
        }
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?.to_string();
            let frozen = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let &i = self.index.get(&name).ok_or_else(|| format!("unknown parameter {name}"))?;
            if self.values[i].shape() != shape.as_slice() {
                return Err(format!("parameter {name}: shape {:?} vs {:?}", shape, self.values[i].shape()));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            self.values[i] = Tensor::new(&shape, data);
            self.frozen[i] = frozen;
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes in parameter blob".into());
        }
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err("truncated blob".into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64, String> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// One forward/backward pass over a [`ParamStore`].
///
/// Parameters are bound lazily: the first call to [`Session::p`] puts the
/// parameter on the tape. Frozen parameters are bound as constants, so they
/// never receive a gradient.
pub struct Session<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: RefCell<HashMap<usize, Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: RefCell::new(HashMap::new()) }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id.0) {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.store.is_frozen(id) { self.graph.constant(t) } else { self.graph.leaf(t) };
        self.bound.borrow_mut().insert(id.0, v);
        v
    }

    /// Backward from `loss`; returns one entry per parameter of the store.
    /// Parameters that were never used, or are frozen, get `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor>> {
        let mut grads: Gradients = self.graph.backward(loss);
        let bound = self.bound.borrow();
        (0..self.store.len())
            .map(|i| match bound.get(&i) {
                Some(&v) if !self.store.is_frozen(ParamId(i)) => {
                    Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(self.store.get(ParamId(i)).shape())))
                }
                _ => None,
            })
            .collect()
    }
}

impl Deref for Session<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}
