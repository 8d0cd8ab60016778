//! Named parameter collections, tape binding, and the `CCMLAB1` container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! b"CCMLAB1"
//! u32 metadata length, metadata bytes (UTF-8 `key=value` lines, sorted)
//! u32 parameter count
//! per parameter, in name order:
//!   u32 name length, name bytes, u32 rank, rank x u64 dims, f64 values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::Error;

pub const MODEL_MAGIC: &[u8; 7] = b"CCMLAB1";

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, Error> {
        self.map.get(name).ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Glorot-uniform initialisation of a `[fan_in, fan_out]` matrix.
    pub fn init_matrix(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data).expect("consistent shape"));
    }

    /// Standard-normal initialisation of a `[rows, cols]` embedding table.
    pub fn init_embedding(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data).expect("consistent shape"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// SHA-256 over names, shapes and raw values of every parameter whose
    /// name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.map.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Returns a copy with every weight set to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            map: self.map.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect(),
        }
    }
}

/// Parameters registered on a tape for one forward pass.
#[derive(Debug)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Registers every parameter; those selected by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn new(tape: &mut Tape, params: &Params, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        Self { vars }
    }

    /// Like [`Bindings::new`] but registers only the parameters `include` accepts.
    pub fn select(tape: &mut Tape, params: &Params, include: impl Fn(&str) -> bool, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .filter(|(name, _)| include(name))
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, Error> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("parameter {name} not bound")))
    }

    /// Gradients of every differentiable binding reached by the backward pass.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .filter_map(|(name, v)| {
                let g = grads.get(*v)?;
                let t = Tensor::new(tape.shape(*v).to_vec(), g.to_vec()).ok()?;
                Some((name.clone(), t))
            })
            .collect()
    }
}

/// Parameters plus free-form metadata, as stored in a model file.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub meta: BTreeMap<String, String>,
    pub params: Params,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let mut r = bytes;
        let mut magic = [0u8; 7];
        read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Model("bad magic, not a CCMLAB1 model file".into()));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta_bytes)?;
        let meta_text = String::from_utf8(meta_bytes).map_err(|_| Error::Model("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Model(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = read_u32(&mut r)?;
        let mut params = Params::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Model("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel * 8 > r.len() {
                return Err(Error::Model(format!("truncated values for {name}")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Model(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
        if !r.is_empty() {
            return Err(Error::Model(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), Error> {
    r.read_exact(buf).map_err(|_| Error::Model("unexpected end of model file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, Error> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
