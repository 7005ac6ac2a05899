//! Named parameter store and its on-disk checkpoint format.
//!
//! Checkpoint layout (all integers 64-bit little-endian):
//!   magic "GCKT" | version u8 = 1 | records...
//! each record:
//!   name_len | name UTF-8 bytes | rank | dims[rank] | values f64 LE
//! Records are written in lexicographic name order and values preserve IEEE
//! bits exactly, so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GCKT";
const VERSION: u8 = 1;

/// Parameters keyed by dotted names, iterated in lexicographic order.
#[derive(Clone, Default)]
pub struct ParamStore<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::parameter(
                "param_store",
                format!("duplicate parameter name {:?}", name),
            ));
        }
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    /// Creates a gradient-tracked parameter initialized uniformly in
    /// [-1/sqrt(fan_in), 1/sqrt(fan_in)] and returns a handle to it.
    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor<S>> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<S> = (0..numel)
            .map(|_| S::lit((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        let t = Tensor::from_vec(shape, data)?.with_grad();
        self.insert(name, t.clone())?;
        Ok(t)
    }

    /// Inserts a gradient-tracked parameter with explicit values.
    pub fn insert_values(&mut self, name: &str, shape: &[usize], data: Vec<S>) -> Result<Tensor<S>> {
        let t = Tensor::from_vec(shape, data)?.with_grad();
        self.insert(name, t.clone())?;
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map.get(name).ok_or_else(|| {
            Error::parameter("param_store", format!("unknown parameter {:?}", name))
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.map.get_mut(name).ok_or_else(|| {
            Error::parameter("param_store", format!("unknown parameter {:?}", name))
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.map.values() {
            t.clear_grad();
        }
    }

    /// Gradients in lexicographic parameter order; missing slots read zero.
    pub fn grads(&self) -> Vec<(String, Vec<S>)> {
        self.map
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    t.grad().unwrap_or_else(|| vec![S::zero(); t.numel()]),
                )
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        for (name, t) in &self.map {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u64).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let need = |pos: usize, n: usize, what: &str| -> Result<()> {
            if pos + n > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated while reading {} at byte {}",
                    what, pos
                )));
            }
            Ok(())
        };
        need(pos, 5, "header")?;
        if &bytes[0..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                bytes[4]
            )));
        }
        pos = 5;
        let mut store = ParamStore::new();
        while pos < bytes.len() {
            let read_u64 = |pos: &mut usize| -> Result<u64> {
                need(*pos, 8, "integer")?;
                let mut b = [0u8; 8];
                b.copy_from_slice(&bytes[*pos..*pos + 8]);
                *pos += 8;
                Ok(u64::from_le_bytes(b))
            };
            let name_len = read_u64(&mut pos)? as usize;
            need(pos, name_len, "name")?;
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            pos += name_len;
            let rank = read_u64(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            need(pos, numel * 8, "values")?;
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let mut b = [0u8; 8];
                b.copy_from_slice(&bytes[pos + i * 8..pos + i * 8 + 8]);
                let v = f64::from_le_bytes(b);
                data.push(S::from_f64(v).ok_or_else(|| {
                    Error::Checkpoint(format!("value {} not representable", v))
                })?);
            }
            pos += numel * 8;
            store.insert_values(&name, &shape, data)?;
        }
        Ok(store)
    }
}
