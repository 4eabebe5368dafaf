use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CSDA";
const FORMAT_VERSION: u32 = 1;

/// Named parameter tensors. Iteration order is the sorted name order, which
/// fixes every reduction over parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

pub type GradMap = BTreeMap<String, Tensor>;

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
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

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Hash of the sorted `(name, shape)` list.
    pub fn arch_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest length"))
    }

    /// Register every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Elementwise mean of several parameter sets with one architecture.
    pub fn average(sets: &[ModelParams]) -> Result<ModelParams> {
        let first = sets
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to average".into()))?;
        let hash = first.arch_hash();
        if sets.iter().any(|p| p.arch_hash() != hash) {
            return Err(Error::Checkpoint("architecture hash mismatch while averaging".into()));
        }
        let k = sets.len() as f64;
        let mut out = ModelParams::new();
        for (name, t) in &first.tensors {
            let mut acc = Tensor::zeros(t.rows(), t.cols());
            for p in sets {
                acc.add_assign(&p.tensors[name]);
            }
            acc.scale_in_place(1.0 / k);
            out.tensors.insert(name.clone(), acc);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self, path)
    }
}

/// Parameter leaves registered on a tape. Both training branches look up the
/// same `Var` for a given name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("parameter {name} is not bound")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Per-name gradients; names the loss did not reach get zeros.
    pub fn gradients(&self, tape: &Tape, grads: &mut Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(n, v)| {
                let g = grads.take(*v).unwrap_or_else(|| {
                    let t = tape.value(*v);
                    Tensor::zeros(t.rows(), t.cols())
                });
                (n.clone(), g)
            })
            .collect()
    }
}

pub fn add_grads(acc: &mut GradMap, other: &GradMap) {
    for (n, g) in other {
        match acc.get_mut(n) {
            Some(a) => a.add_assign(g),
            None => {
                acc.insert(n.clone(), g.clone());
            }
        }
    }
}

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Binary checkpoint: magic, format version, architecture hash, record count,
/// then `(name, shape, little-endian f64 values)` records with length prefixes.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&FORMAT_VERSION.to_le_bytes())?;
    write(&params.arch_hash().to_le_bytes())?;
    write(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        write(&(name.len() as u32).to_le_bytes())?;
        write(name.as_bytes())?;
        write(&2u32.to_le_bytes())?;
        write(&(t.rows() as u64).to_le_bytes())?;
        write(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, optionally requiring a specific architecture hash.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_hash: Option<u64>) -> Result<ModelParams> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut read = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| ck(format!("{}: truncated ({e})", path.display())))?;
        Ok(buf)
    };
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_of = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    if read(4)? != MAGIC {
        return Err(ck(format!("{}: bad magic", path.display())));
    }
    let version = u32_of(read(4)?);
    if version != FORMAT_VERSION {
        return Err(ck(format!("{}: unsupported format version {version}", path.display())));
    }
    let stored_hash = u64_of(read(8)?);
    let count = u32_of(read(4)?) as usize;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let nlen = u32_of(read(4)?) as usize;
        if nlen > 4096 {
            return Err(ck("parameter name too long"));
        }
        let name = String::from_utf8(read(nlen)?).map_err(ck)?;
        let ndims = u32_of(read(4)?);
        if ndims != 2 {
            return Err(ck(format!("{name}: expected 2 dims, found {ndims}")));
        }
        let rows = u64_of(read(8)?) as usize;
        let cols = u64_of(read(8)?) as usize;
        let n = rows.checked_mul(cols).filter(|n| *n < (1 << 31)).ok_or_else(|| ck("tensor too large"))?;
        let raw = read(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::from_vec(rows, cols, data)?)?;
    }
    if params.arch_hash() != stored_hash {
        return Err(ck(format!("{}: architecture hash does not match contents", path.display())));
    }
    if let Some(h) = expected_hash {
        if h != stored_hash {
            return Err(ck(format!(
                "{}: architecture hash {stored_hash:016x} differs from expected {h:016x}",
                path.display()
            )));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("a.w", Tensor::from_vec(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        p.insert("b", Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        p
    }

    #[test]
    fn round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = sample();
        p.save(&path).unwrap();
        let q = load_checkpoint(&path, Some(p.arch_hash())).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn hash_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        sample().save(&path).unwrap();
        assert!(load_checkpoint(&path, Some(1234)).is_err());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }

    #[test]
    fn averaging_identities() {
        let p = sample();
        let avg = ModelParams::average(&[p.clone(), p.clone(), p.clone()]).unwrap();
        for (n, t) in p.iter() {
            for (a, b) in t.data().iter().zip(avg.get(n).unwrap().data()) {
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
        let mut neg = p.clone();
        for n in ["a.w", "b"] {
            neg.get_mut(n).unwrap().scale_in_place(-1.0);
        }
        let z = ModelParams::average(&[p.clone(), neg]).unwrap();
        assert!(z.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
        let mut other = ModelParams::new();
        other.insert("c", Tensor::zeros(1, 1)).unwrap();
        assert!(ModelParams::average(&[p, other]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p.insert("b", Tensor::zeros(1, 1)).is_err());
    }
}
