//! Named parameter tensors, initializers and the checkpoint file format.
//!
//! A checkpoint is an 8-byte little-endian header length, a JSON header
//! mapping each tensor name to `{"dtype": "F32", "shape": [r, c],
//! "offset": o, "len": n}` (byte offset and length into the blob section),
//! then the concatenated little-endian `f32` blobs in name order. Extra
//! run metadata sits under the `__metadata__` key.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde_json::{json, Map, Value};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Matrix<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<F>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<F>> {
        self.tensors.get_mut(name)
    }

    /// Panics on unknown names; model code only asks for what it created.
    pub fn expect(&self, name: &str) -> &Matrix<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers (or reuses) the named parameter as a graph leaf.
    pub fn leaf(&self, g: &mut Graph<F>, name: &str) -> NodeId {
        g.param(name, self.expect(name))
    }
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<F: Real, R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    let data = (0..rows * cols).map(|_| F::lit(dist.sample(rng))).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn init_normal<F: Real, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| F::lit(dist.sample(rng))).collect();
    Matrix::from_vec(rows, cols, data)
}

/// A linear layer `x W + b` stored as `{prefix}.w` (`in x out`) and `{prefix}.b`.
pub fn init_linear<F: Real, R: Rng>(store: &mut ParamStore<F>, prefix: &str, input: usize, output: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w"), init_uniform(input, output, input, rng));
    store.insert(format!("{prefix}.b"), init_uniform(1, output, input, rng));
}

pub fn linear<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, prefix: &str, x: NodeId) -> NodeId {
    let w = store.leaf(g, &format!("{prefix}.w"));
    let b = store.leaf(g, &format!("{prefix}.b"));
    g.linear(x, w, b)
}

/// Two-layer perceptron `Linear -> GELU -> Linear` under `{prefix}.l1`, `{prefix}.l2`.
pub fn init_mlp<F: Real, R: Rng>(
    store: &mut ParamStore<F>,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut R,
) {
    init_linear(store, &format!("{prefix}.l1"), input, hidden, rng);
    init_linear(store, &format!("{prefix}.l2"), hidden, output, rng);
}

pub fn mlp<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, prefix: &str, x: NodeId) -> NodeId {
    let h = linear(g, store, &format!("{prefix}.l1"), x);
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.l2"), h)
}

pub fn mlp_num_params(input: usize, hidden: usize, output: usize) -> usize {
    input * hidden + hidden + hidden * output + output
}

const METADATA_KEY: &str = "__metadata__";

/// Serializes parameters (as `f32`) plus metadata into checkpoint bytes.
pub fn checkpoint_bytes<F: Real>(store: &ParamStore<F>, metadata: &Value) -> Vec<u8> {
    let mut header = Map::new();
    let mut blob: Vec<u8> = Vec::with_capacity(store.num_scalars() * 4);
    for (name, m) in store.iter() {
        let offset = blob.len();
        for &x in m.data() {
            let v = x.to_f32().expect("finite parameter");
            blob.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.clone(),
            json!({
                "dtype": "F32",
                "shape": [m.rows(), m.cols()],
                "offset": offset,
                "len": blob.len() - offset,
            }),
        );
    }
    header.insert(METADATA_KEY.into(), metadata.clone());
    let head = serde_json::to_vec(&Value::Object(header)).expect("serializable header");
    let mut out = Vec::with_capacity(8 + head.len() + blob.len());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&blob);
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ParamStore<f32>, Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("file shorter than header length"));
    }
    let head_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let blob_start = 8usize
        .checked_add(head_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Value = serde_json::from_slice(&bytes[8..blob_start])?;
    let Value::Object(header) = header else {
        return Err(bad("header is not a JSON object"));
    };
    let blob = &bytes[blob_start..];
    let mut store = ParamStore::new();
    let mut metadata = Value::Null;
    for (name, entry) in header {
        if name == METADATA_KEY {
            metadata = entry;
            continue;
        }
        if entry["dtype"] != "F32" {
            return Err(bad(&format!("{name}: unsupported dtype")));
        }
        let shape: Vec<usize> = serde_json::from_value(entry["shape"].clone())?;
        let offset: usize = serde_json::from_value(entry["offset"].clone())?;
        let len: usize = serde_json::from_value(entry["len"].clone())?;
        if shape.len() != 2 || shape[0] * shape[1] * 4 != len {
            return Err(bad(&format!("{name}: shape does not match byte length")));
        }
        let end = offset
            .checked_add(len)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| bad(&format!("{name}: blob out of range")))?;
        let data = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.insert(name, Matrix::from_vec(shape[0], shape[1], data));
    }
    Ok((store, metadata))
}

pub fn save_checkpoint<F: Real>(path: impl AsRef<Path>, store: &ParamStore<F>, metadata: &Value) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(store, metadata))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, Value)> {
    parse_checkpoint(&std::fs::read(path)?)
}
