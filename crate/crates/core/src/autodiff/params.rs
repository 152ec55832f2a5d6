//! Named parameter sets and the `U4DP` checkpoint format:
//!
//! ```text
//! "U4DP" count:u32
//! repeated: name_len:u32 name:[u8] rank:u32 dims:[u32; rank] payload:[f64 LE]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::scalar::Real;

pub const PARAM_MAGIC: &[u8; 4] = b"U4DP";

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Put every tensor on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Put every tensor on the tape as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Same names, same shapes.
    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != PARAM_MAGIC {
            bail!(Format, "not a U4DP checkpoint");
        }
        let count = cur.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| crate::U4dError::Format("parameter name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| cur.take(8).map(|b| T::c(f64::from_le_bytes(b.try_into().unwrap()))))
                .collect::<Result<Vec<_>>>()?;
            set.insert(name, Tensor::new(&shape, data)?);
        }
        if cur.pos != bytes.len() {
            bail!(Length, "{} trailing bytes after checkpoint", bytes.len() - cur.pos);
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(Length, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Tape handles for a [`ParamSet`], in the set's order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        match self.index.get(name) {
            Some(&i) => Ok(self.vars[i]),
            None => bail!(Usage, "unknown parameter {}", name),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; zeros for parameters the loss ignores.
    pub fn gradients<T: Real>(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut p = ParamSet::<f64>::new();
        p.insert("a.w", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, -0.0, 1e-300]).unwrap());
        p.insert("b", Tensor::scalar(7.25));
        let bytes = p.encode();
        let q = ParamSet::<f64>::decode(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.encode(), bytes);
        assert!(ParamSet::<f64>::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamSet::<f64>::decode(&bad), Err(crate::U4dError::Format(_))));
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut p = ParamSet::<f32>::new();
        p.insert("x", Tensor::scalar(1.0));
        p.insert("y", Tensor::scalar(2.0));
        p.insert("x", Tensor::scalar(3.0));
        assert_eq!(p.len(), 2);
        assert_eq!(p.get("x").unwrap().item(), 3.0);
        assert_eq!(p.iter().map(|(n, _)| n).collect::<Vec<_>>(), vec!["x", "y"]);
    }
}
