use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::io::{io_err, read_tnsr, read_u32, write_tnsr};
use crate::tape::{grad, Tape};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";

/// Named parameter collection in registration order.
#[derive(Clone, Default, Debug)]
pub struct ParamSet {
    params: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::invalid("ParamSet::insert", format!("duplicate name `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its position.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(TensorError::mismatch("ParamSet::set", slot.shape(), t.shape()));
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose names satisfy `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&str) -> bool) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites entries present in `other` and appends new ones.
    pub fn merged(&self, other: &ParamSet) -> ParamSet {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.params.insert(k.to_string(), v.clone());
        }
        out
    }

    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<ParamSet> {
        let mut params = IndexMap::with_capacity(self.len());
        for (k, v) in &self.params {
            params.insert(k.clone(), f(k, v)?);
        }
        Ok(ParamSet { params })
    }

    /// Fresh requires-grad leaves on `tape` sharing these values.
    pub fn track(&self, tape: &Tape) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v)))
                .collect(),
        }
    }

    pub fn detach(&self) -> ParamSet {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    /// Gradient of `loss` with respect to every parameter, aligned by name.
    pub fn grads_of(&self, loss: &Tensor, create_graph: bool) -> Result<ParamSet> {
        let wrt: Vec<&Tensor> = self.params.values().collect();
        let grads = grad(loss, &wrt, create_graph)?;
        Ok(ParamSet {
            params: self.params.keys().cloned().zip(grads).collect(),
        })
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// CKPT encoding: `"CKPT" | u32 count | { u16 len | name | TNSR }*`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(bytes);
            write_tnsr(&mut out, t).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<ParamSet> {
        let bad = |msg: String| TensorError::Format { kind: "CKPT", msg };
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != CKPT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let count = read_u32(r).map_err(|e| bad(e.to_string()))?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let t = read_tnsr(r)?;
            set.insert(name, t)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }
}
