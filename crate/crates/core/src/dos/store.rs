//! The sealed signal store and its binary file format.
//!
//! Layout (little-endian): magic `DSSS`, u32 version, u32 classes,
//! u32 iterations, u32 d, u32 D, u32 metadata length, metadata bytes
//! (`key=value` lines, sorted), u64 record count, then per record:
//! u32 i, u32 c, u64 zeta, u64 theta, u8 has_projection,
//! [D*d f64 projection], u32 length, f64 noisy mean.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::SignalSpec;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ser::Projection;

pub const STORE_MAGIC: &[u8; 4] = b"DSSS";
pub const STORE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub iteration: u32,
    pub class: u32,
    pub aug_seed: u64,
    pub extractor_seed: u64,
    pub projection: Option<Projection>,
    pub noisy_mean: Vec<f64>,
}

/// Immutable collection of `classes x iterations` records plus run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalStore {
    num_classes: usize,
    iterations: usize,
    subspace_dim: usize,
    feature_dim: usize,
    meta: BTreeMap<String, String>,
    /// Ordered by iteration, then class.
    records: Vec<SignalRecord>,
}

impl SignalStore {
    pub(crate) fn seal(
        num_classes: usize,
        iterations: usize,
        feature_dim: usize,
        meta: BTreeMap<String, String>,
        records: Vec<SignalRecord>,
    ) -> Result<Self> {
        let subspace_dim = records
            .first()
            .map(|r| r.noisy_mean.len())
            .unwrap_or(feature_dim);
        let store = Self {
            num_classes,
            iterations,
            subspace_dim,
            feature_dim,
            meta,
            records,
        };
        store.check()?;
        Ok(store)
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.records.len() != self.num_classes * self.iterations {
            return bad(format!(
                "store holds {} records, expected {} classes x {} iterations",
                self.records.len(),
                self.num_classes,
                self.iterations
            ));
        }
        for (k, r) in self.records.iter().enumerate() {
            let (i, c) = (k / self.num_classes.max(1), k % self.num_classes.max(1));
            if r.iteration as usize != i || r.class as usize != c {
                return bad(format!("record {k} is out of order"));
            }
            if r.noisy_mean.len() != self.subspace_dim || r.noisy_mean.iter().any(|v| !v.is_finite()) {
                return bad(format!("record {k} has a malformed noisy mean"));
            }
            match &r.projection {
                Some(p) if p.input_dim() != self.feature_dim || p.subspace_dim() != self.subspace_dim => {
                    return bad(format!("record {k} has a projection of the wrong shape"))
                }
                None if self.subspace_dim != self.feature_dim => {
                    return bad(format!("record {k} lacks a projection"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn subspace_dim(&self) -> usize {
        self.subspace_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn records(&self) -> &[SignalRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of class `c` in iteration order.
    pub fn class_records(&self, c: usize) -> Vec<&SignalRecord> {
        self.records.iter().filter(|r| r.class as usize == c).collect()
    }

    pub fn signal_spec(&self) -> Result<SignalSpec> {
        SignalSpec::from_meta(&self.meta)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        for v in [
            STORE_VERSION,
            self.num_classes as u32,
            self.iterations as u32,
            self.subspace_dim as u32,
            self.feature_dim as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&r.iteration.to_le_bytes())?;
            w.write_all(&r.class.to_le_bytes())?;
            w.write_all(&r.aug_seed.to_le_bytes())?;
            w.write_all(&r.extractor_seed.to_le_bytes())?;
            match &r.projection {
                Some(p) => {
                    w.write_all(&[1])?;
                    write_f64s(&mut w, p.matrix().data())?;
                }
                None => w.write_all(&[0])?,
            }
            w.write_all(&(r.noisy_mean.len() as u32).to_le_bytes())?;
            write_f64s(&mut w, &r.noisy_mean)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(Error::Format("not a signal store (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let num_classes = read_u32(&mut r)? as usize;
        let iterations = read_u32(&mut r)? as usize;
        let subspace_dim = read_u32(&mut r)? as usize;
        let feature_dim = read_u32(&mut r)? as usize;
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta_bytes)?;
        let meta_text =
            String::from_utf8(meta_bytes).map_err(|_| Error::Format("store metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = crate::numerics::read_u64(&mut r)?;
        if count != (num_classes * iterations) as u64 {
            return Err(Error::Format(format!("store header promises {count} records")));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let iteration = read_u32(&mut r)?;
            let class = read_u32(&mut r)?;
            let aug_seed = crate::numerics::read_u64(&mut r)?;
            let extractor_seed = crate::numerics::read_u64(&mut r)?;
            let mut flag = [0u8; 1];
            read_exact(&mut r, &mut flag)?;
            let projection = match flag[0] {
                0 => None,
                1 => {
                    let data = read_f64s(&mut r, feature_dim * subspace_dim)?;
                    Some(Projection::new(Tensor::new(vec![feature_dim, subspace_dim], data)?)?)
                }
                f => return Err(Error::Format(format!("bad projection flag {f}"))),
            };
            let len = read_u32(&mut r)? as usize;
            if len != subspace_dim {
                return Err(Error::Format(format!("record mean has length {len}, expected {subspace_dim}")));
            }
            records.push(SignalRecord {
                iteration,
                class,
                aug_seed,
                extractor_seed,
                projection,
                noisy_mean: read_f64s(&mut r, len)?,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        let store = Self {
            num_classes,
            iterations,
            subspace_dim,
            feature_dim,
            meta,
            records,
        };
        store.check()?;
        Ok(store)
    }
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated signal store: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
