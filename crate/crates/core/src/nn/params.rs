use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

/// A named region of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub range: Range<usize>,
    pub shape: Vec<usize>,
}

/// Flat parameter vector with a registry of named slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub data: Vec<f64>,
    slices: Vec<ParamSlice>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { data: Vec::new(), slices: Vec::new() }
    }

    /// Appends a zero-filled slice and returns its range.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let len: usize = shape.iter().product();
        let start = self.data.len();
        self.data.resize(start + len, 0.0);
        let range = start..start + len;
        self.slices.push(ParamSlice { name: name.into(), range: range.clone(), shape: shape.to_vec() });
        range
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.slices.iter().find(|s| s.name == name).map(|s| &self.data[s.range.clone()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Slices tile the vector without gaps.
    pub fn is_partitioned(&self) -> bool {
        let mut next = 0;
        for s in &self.slices {
            if s.range.start != next || s.range.len() != s.shape.iter().product::<usize>() {
                return false;
            }
            next = s.range.end;
        }
        next == self.data.len()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.slices == other.slices
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Polyak averaging: `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !target.same_layout(online) {
        return Err(Error::Argument("soft_update requires identical architectures".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Argument(format!("tau {tau} outside [0,1]")));
    }
    if tau == 1.0 {
        target.data.copy_from_slice(&online.data);
        return Ok(());
    }
    for (t, o) in target.data.iter_mut().zip(&online.data) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSPARAMS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 64-bit FNV-1a, stable across builds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Hash of the slice layout (names and shapes).
pub fn layout_hash(store: &ParamStore) -> u64 {
    let mut desc = String::new();
    for s in &store.slices {
        desc.push_str(&s.name);
        desc.push(':');
        for d in &s.shape {
            desc.push_str(&d.to_string());
            desc.push('x');
        }
        desc.push(';');
    }
    fnv1a(desc.as_bytes())
}

/// Writes `magic | version u32 | arch hash u64 | count u64 | f64 LE...`.
pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, arch_hash: u64) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&arch_hash.to_le_bytes())?;
    w.write_all(&(store.data.len() as u64).to_le_bytes())?;
    for v in &store.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads parameters into `store`, whose layout must match `arch_hash`.
pub fn read_checkpoint<R: Read>(mut r: R, store: &mut ParamStore, arch_hash: u64) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint("unsupported version".into()));
    }
    r.read_exact(&mut b8)?;
    if u64::from_le_bytes(b8) != arch_hash {
        return Err(Error::Checkpoint("architecture hash mismatch".into()));
    }
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    if count != store.data.len() {
        return Err(Error::Checkpoint(format!("expected {} parameters, found {count}", store.data.len())));
    }
    for v in store.data.iter_mut() {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, arch_hash: u64) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, store, arch_hash)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, store: &mut ParamStore, arch_hash: u64) -> Result<()> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?), store, arch_hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        let r = p.register("w", &[vals.len()]);
        p.data[r].copy_from_slice(vals);
        p
    }

    #[test]
    fn soft_update_examples() {
        let online = store(&[2.0, 2.0]);
        let mut t = store(&[0.0, 0.0]);
        soft_update(&mut t, &online, 0.5).unwrap();
        assert_eq!(t.data, vec![1.0, 1.0]);
        soft_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.data, vec![1.0, 1.0]);
        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.data, online.data);
        let mut other = ParamStore::new();
        other.register("w", &[3]);
        assert!(soft_update(&mut other, &online, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let p = store(&[1.5, -0.25, f64::MIN_POSITIVE]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, 42).unwrap();
        let mut q = store(&[0.0; 3]);
        read_checkpoint(&buf[..], &mut q, 42).unwrap();
        assert_eq!(p, q);
        assert!(matches!(read_checkpoint(&buf[..], &mut q, 43), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn registry_partitions() {
        let mut p = ParamStore::new();
        p.register("a", &[2, 3]);
        p.register("b", &[4]);
        assert!(p.is_partitioned());
        assert_eq!(p.len(), 10);
    }
}
