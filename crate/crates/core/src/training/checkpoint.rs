//! `BSNC` checkpoints: header, parameter manifest, `f64` values, and
//! optionally the optimizer state for resumption.
//!
//! Layout (little-endian): `"BSNC"`, version `u32`, flags `u32`, parameter
//! count `u32`; per parameter: name length `u32`, UTF-8 name, rank `u32`,
//! dims `u32 × rank`; then every parameter's values as `f64`. With flag bit 0
//! set, the trailer holds the training step `u64`, the Adam step `u64`, then
//! the first and second moments as `f64` in parameter order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamConfig, AdamState, Scalar};

const MAGIC: &[u8; 4] = b"BSNC";
const VERSION: u32 = 1;
const FLAG_OPTIMIZER: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Contents of a checkpoint file, independent of any model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Vec<ManifestEntry>,
    pub values: Vec<Vec<f64>>,
    /// `(training step, adam step, m, v)`.
    pub optimizer: Option<(u64, u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl Checkpoint {
    pub fn of<S: Scalar>(model: &Model<S>, optimizer: Option<(&AdamState<S>, usize)>) -> Self {
        let manifest = model
            .store
            .iter()
            .map(|p| ManifestEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec() })
            .collect();
        let values = model.store.iter().map(|p| p.tensor.to_f64_vec()).collect();
        let to64 = |m: &Vec<Vec<S>>| m.iter().map(|v| v.iter().map(|x| x.to_f64_lossy()).collect()).collect();
        let optimizer = optimizer.map(|(a, step)| (step as u64, a.step, to64(&a.m), to64(&a.v)));
        Self { manifest, values, optimizer }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let u32le = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
        b.extend_from_slice(MAGIC);
        u32le(&mut b, VERSION as usize);
        u32le(&mut b, if self.optimizer.is_some() { FLAG_OPTIMIZER as usize } else { 0 });
        u32le(&mut b, self.manifest.len());
        for e in &self.manifest {
            u32le(&mut b, e.name.len());
            b.extend_from_slice(e.name.as_bytes());
            u32le(&mut b, e.shape.len());
            for &d in &e.shape {
                u32le(&mut b, d);
            }
        }
        let put = |b: &mut Vec<u8>, vals: &[Vec<f64>]| {
            for v in vals.iter().flatten() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&mut b, &self.values);
        if let Some((step, adam_step, m, v)) = &self.optimizer {
            b.extend_from_slice(&step.to_le_bytes());
            b.extend_from_slice(&adam_step.to_le_bytes());
            put(&mut b, m);
            put(&mut b, v);
        }
        b
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a BSNC checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let flags = r.u32()?;
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push(ManifestEntry { name, shape });
        }
        let read_all = |r: &mut Reader| -> Result<Vec<Vec<f64>>> {
            manifest
                .iter()
                .map(|e| (0..e.shape.iter().product::<usize>()).map(|_| r.f64()).collect())
                .collect()
        };
        let values = read_all(&mut r)?;
        let optimizer = if flags & FLAG_OPTIMIZER != 0 {
            let step = r.u64()?;
            let adam_step = r.u64()?;
            let m = read_all(&mut r)?;
            let v = read_all(&mut r)?;
            Some((step, adam_step, m, v))
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { manifest, values, optimizer })
    }

    /// Differences between this manifest and the model's, one line each.
    pub fn manifest_diff<S: Scalar>(&self, model: &Model<S>) -> Vec<String> {
        let mut diff = Vec::new();
        let theirs: Vec<(&str, &[usize])> = model.store.iter().map(|p| (p.name.as_str(), p.tensor.shape())).collect();
        for e in &self.manifest {
            match theirs.iter().find(|(n, _)| *n == e.name) {
                None => diff.push(format!("- {} {:?} (not in model)", e.name, e.shape)),
                Some((_, s)) if *s != e.shape.as_slice() => diff.push(format!("~ {}: checkpoint {:?}, model {:?}", e.name, e.shape, s)),
                _ => {}
            }
        }
        for (n, s) in &theirs {
            if !self.manifest.iter().any(|e| e.name == *n) {
                diff.push(format!("+ {n} {s:?} (missing from checkpoint)"));
            }
        }
        if diff.is_empty() && self.manifest.iter().map(|e| &e.name).ne(theirs.iter().map(|(n, _)| n)) {
            diff.push("parameter order differs".into());
        }
        diff
    }

    /// Copies values into `model` (and returns the optimizer state if stored).
    pub fn restore<S: Scalar>(&self, path: &Path, model: &mut Model<S>) -> Result<Option<(AdamState<S>, usize)>> {
        let diff = self.manifest_diff(model);
        if !diff.is_empty() {
            return Err(Error::format(path, format!("checkpoint does not match the configured model:\n{}", diff.join("\n"))));
        }
        for (p, vals) in model.store.iter_mut().zip(&self.values) {
            for (d, &v) in p.tensor.data_mut().iter_mut().zip(vals) {
                *d = S::of(v);
            }
        }
        Ok(self.optimizer.as_ref().map(|(step, adam_step, m, v)| {
            let conv = |x: &Vec<Vec<f64>>| x.iter().map(|r| r.iter().map(|&y| S::of(y)).collect()).collect();
            let state = AdamState { step: *adam_step, m: conv(m), v: conv(v), config: AdamConfig::default() };
            (state, *step as usize)
        }))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Model<S>, optimizer: Option<(&AdamState<S>, usize)>) -> Result<()> {
    fs::write(path, Checkpoint::of(model, optimizer).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(path, &bytes)
}

/// Loads values into `model`; returns stored optimizer state and step, if any.
pub fn load_checkpoint<S: Scalar>(path: &Path, model: &mut Model<S>) -> Result<Option<(AdamState<S>, usize)>> {
    read_checkpoint(path)?.restore(path, model)
}
