//! Named parameter blocks, their binding onto a tape, and the checkpoint
//! file format.
//!
//! Checkpoint layout (little-endian): magic `MEFACKP1`, `u32` version (1),
//! `u32` block count, then per block `u32` name length, UTF-8 name,
//! `u32` rank, `u32` dims, `f32` values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::numerics::{Real, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEFACKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
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

    /// Inserts a tensor drawn uniformly from `[-scale, scale]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: Vec<usize>,
        scale: f64,
    ) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-scale..=scale))).collect();
        self.insert(name, Tensor::new(shape, data).expect("valid init shape"));
    }

    /// Glorot-uniform matrix.
    pub fn insert_glorot<R: Rng>(&mut self, rng: &mut R, name: &str, rows: usize, cols: usize) {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        self.insert_uniform(rng, name, vec![rows, cols], scale);
    }

    pub fn insert_fill(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        self.insert(name, Tensor::full(shape, T::of(value)).expect("valid init shape"));
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Input(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let mut out = Params::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Records every block whose name starts with one of `prefixes` on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, prefixes: &[&str], trainable: bool) -> Binding {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for (i, (name, t)) in self.iter().enumerate() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                vars.insert(name.to_string(), v);
                order.push((i, v));
            }
        }
        Binding { vars, order }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.len() as u32);
        for (name, t) in self.iter() {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f32(v.as_f64() as f32);
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&w.into_inner())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let count = r.u32()? as usize;
        let mut out = Params::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.offset();
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
                offset: at,
                reason: "parameter name is not UTF-8".into(),
            })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let at = r.offset();
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(T::of(r.f32()? as f64));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at,
                reason: e.to_string(),
            })?;
            out.insert(name, t);
        }
        r.finish()?;
        Ok(out)
    }
}

/// Parameter blocks recorded on one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: HashMap<String, Var>,
    order: Vec<(usize, Var)>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Input(format!("parameter `{name}` is not bound")))
    }

    /// Substitutes `var` for the block `name`, e.g. to probe one block in
    /// a gradient check.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// `(store index, gradient)` for every bound block that received one.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<(usize, Vec<T>)> {
        self.order
            .iter()
            .filter_map(|&(i, v)| tape.grad(v).map(|g| (i, g.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::<f32>::new();
        p.insert_glorot(&mut rng, "a.w", 3, 4);
        p.insert_fill("a.b", vec![4], 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        p.save(&path).unwrap();
        let q = Params::<f32>::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let mut p = Params::<f32>::new();
        p.insert_fill("x", vec![2], 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        p.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Params::<f32>::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(
            Params::<f32>::from_bytes(cut),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn binding_filters_by_prefix() {
        let mut p = Params::<f64>::new();
        p.insert_fill("img.w", vec![2], 1.0);
        p.insert_fill("txt.w", vec![2], 1.0);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &["img."], true);
        assert!(b.get("img.w").is_ok());
        assert!(b.get("txt.w").is_err());
    }
}
