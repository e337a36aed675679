//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is two files: a plain-text manifest with one
//! `name shape dtype offset` line per parameter (shape written as
//! `AxBxC`, offset in bytes) and a little-endian blob of row-major values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

/// Parameters keyed by dotted path. Iteration is lexicographic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTree<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamTree<T> {
    pub fn new() -> Self {
        ParamTree {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Consistency(format!("invalid parameter name {name:?}")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Consistency(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamTree<U> {
        ParamTree {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every entry as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes; reports
    /// the first difference in lexicographic order.
    pub fn check_layout<U: Real>(&self, other: &ParamTree<U>) -> Result<()> {
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => return Err(Error::Checkpoint(format!("parameter {name} missing"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Sums trees elementwise; used to accumulate per-scene gradients.
    pub fn add_assign(&mut self, other: &ParamTree<T>) -> Result<()> {
        for (name, t) in &mut self.entries {
            let o = other
                .entries
                .get(name)
                .ok_or_else(|| Error::Consistency(format!("missing entry {name}")))?;
            if o.shape() != t.shape() {
                return Err(Error::shape("add_assign", t.shape(), o.shape()));
            }
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn write_checkpoint(&self, manifest: &Path, blob: &Path) -> Result<()> {
        let mut text = String::new();
        let mut bytes = Vec::with_capacity(self.numel() * T::DTYPE.size());
        for (name, t) in &self.entries {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(text, "{} {} {} {}", name, shape.join("x"), T::DTYPE.as_str(), bytes.len())
                .expect("write to string");
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
        }
        fs::write(manifest, text).map_err(|e| Error::io(manifest, e))?;
        fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
        Ok(())
    }

    /// Loads a checkpoint written in either precision, converting to `T`.
    pub fn read_checkpoint(manifest: &Path, blob: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
        let mut tree = ParamTree::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Checkpoint(format!("{}:{}: {msg}", manifest.display(), lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, dtype, offset] = fields[..] else {
                return Err(bad("expected `name shape dtype offset`"));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad shape"))?;
            let dtype = DType::parse(dtype).ok_or_else(|| bad("unknown dtype"))?;
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            if offset != expected_offset {
                return Err(bad(&format!("offset {offset}, expected {expected_offset}")));
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * dtype.size();
            if end > bytes.len() {
                return Err(bad(&format!("blob too short: need {end} bytes, have {}", bytes.len())));
            }
            let raw = &bytes[offset..end];
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
            };
            tree.insert(name, Tensor::new(&shape, data)?)?;
            expected_offset = end;
        }
        if expected_offset != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: blob has {} bytes, manifest accounts for {expected_offset}",
                blob.display(),
                bytes.len()
            )));
        }
        Ok(tree)
    }
}

/// Checkpoint file pair inside a directory.
pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("params.manifest"), dir.join("params.bin"))
}

/// Graph handles for a bound [`ParamTree`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds names to existing graph leaves, e.g. for finite-difference checks.
    pub fn from_vars<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Consistency(format!("parameter {name} not bound")))
    }

    /// Collects the gradient of every bound parameter. Parameters the loss
    /// does not depend on get zeros.
    pub fn gradients<T: Real>(&self, g: &Graph<T>, grads: &Gradients<T>) -> ParamTree<T> {
        let mut out = ParamTree::new();
        for (name, &v) in &self.vars {
            let t = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            out.entries.insert(name.clone(), t);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamTree<f32> {
        let mut p = ParamTree::new();
        p.insert("b.weight", Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.1, 1e-7, -0.0]).unwrap())
            .unwrap();
        p.insert("a.bias", Tensor::from_f64(&[3], &[0.25, 0.5, 0.75]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn names_iterate_lexicographically() {
        let p = sample();
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a.bias", "b.weight"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p.insert("a.bias", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_manifest_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = checkpoint_paths(dir.path());
        let p = sample();
        p.write_checkpoint(&m, &b).unwrap();
        let manifest = fs::read_to_string(&m).unwrap();
        assert_eq!(manifest, "a.bias 3 f32 0\nb.weight 2x3 f32 12\n");
        assert_eq!(fs::read(&b).unwrap().len(), 36);
        let q = ParamTree::<f32>::read_checkpoint(&m, &b).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn loader_validates_blob_length() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = checkpoint_paths(dir.path());
        sample().write_checkpoint(&m, &b).unwrap();
        let mut bytes = fs::read(&b).unwrap();
        bytes.push(0);
        fs::write(&b, &bytes).unwrap();
        assert!(ParamTree::<f32>::read_checkpoint(&m, &b).is_err());
        bytes.truncate(30);
        fs::write(&b, &bytes).unwrap();
        assert!(ParamTree::<f32>::read_checkpoint(&m, &b).is_err());
    }

    #[test]
    fn layout_check_names_first_mismatch() {
        let p = sample();
        let mut q = ParamTree::<f32>::new();
        q.insert("a.bias", Tensor::zeros(&[4])).unwrap();
        q.insert("b.weight", Tensor::zeros(&[2, 3])).unwrap();
        let err = p.check_layout(&q).unwrap_err().to_string();
        assert!(err.contains("a.bias"), "{err}");
    }
}
