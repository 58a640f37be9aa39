//! Flat binary checkpoint: a header followed by named little-endian `f32`
//! tensors.
//!
//! ```text
//! magic      8 bytes  "MWALKCK1"
//! config     u64      hash of the effective run config
//! step       u64      optimizer step counter
//! epoch      u64      completed training epochs
//! count      u32      number of entries
//! entry*     u32 name length, name bytes (UTF-8), u32 rank, u32 dims[rank],
//!            f32 data[product(dims)]
//! ```
//!
//! Parameters are stored under their own names; Adam moments under
//! `adam.m/<name>` and `adam.v/<name>`; trainer state under `extra/<name>`.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MWALKCK1";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";
const EXTRA_PREFIX: &str = "extra/";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub epoch: u64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, config_hash: u64, epoch: u64) -> Self {
        let mut entries = Vec::with_capacity(store.len() * 3);
        for id in store.ids() {
            let t = store.get(id);
            entries.push(Entry {
                name: store.name(id).to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
        for id in store.ids() {
            let (m, v) = store.adam_moments(id);
            let shape = store.get(id).shape().to_vec();
            entries.push(Entry {
                name: format!("{M_PREFIX}{}", store.name(id)),
                shape: shape.clone(),
                data: m.to_vec(),
            });
            entries.push(Entry {
                name: format!("{V_PREFIX}{}", store.name(id)),
                shape,
                data: v.to_vec(),
            });
        }
        Checkpoint {
            config_hash,
            step: store.step(),
            epoch,
            entries,
        }
    }

    /// Overwrites parameters and optimizer state of a store built with the
    /// same architecture.
    pub fn apply_to(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let mut seen = 0;
        for e in &self.entries {
            if e.name.starts_with(EXTRA_PREFIX) {
                continue;
            }
            let (base, kind) = if let Some(n) = e.name.strip_prefix(M_PREFIX) {
                (n, 1)
            } else if let Some(n) = e.name.strip_prefix(V_PREFIX) {
                (n, 2)
            } else {
                (e.name.as_str(), 0)
            };
            let id = store
                .id(base)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{base}`")))?;
            if store.get(id).shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: model {:?}, file {:?}",
                    e.name,
                    store.get(id).shape(),
                    e.shape
                )));
            }
            match kind {
                0 => {
                    store.data_mut(id).copy_from_slice(&e.data);
                    seen += 1;
                }
                1 => {
                    let v = store.adam_moments(id).1.to_vec();
                    store.restore_optimizer(id, e.data.clone(), v)?;
                }
                _ => {
                    let m = store.adam_moments(id).0.to_vec();
                    store.restore_optimizer(id, m, e.data.clone())?;
                }
            }
        }
        if seen != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} parameters",
                store.len()
            )));
        }
        store.set_step(self.step);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.data.len() * 4);
            for x in &e.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let config_hash = read_u64(&mut r)?;
        let step = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        Ok(Checkpoint {
            config_hash,
            step,
            epoch,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Attaches a named non-parameter vector (trainer state).
    pub fn set_extra(&mut self, name: &str, data: Vec<f32>) {
        let name = format!("{EXTRA_PREFIX}{name}");
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry {
            name,
            shape: vec![data.len()],
            data,
        });
    }

    pub fn extra(&self, name: &str) -> Option<&[f32]> {
        let name = format!("{EXTRA_PREFIX}{name}");
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.data.as_slice())
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor<f32>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .and_then(|e| Tensor::new(e.shape.clone(), e.data.clone()).ok())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;
    use proptest::prelude::*;

    fn store(values: &[f32]) -> ParamStore<f32> {
        let mut ps = ParamStore::new();
        let a = ps
            .add(
                "enc.0.weight",
                Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
            )
            .unwrap();
        ps.add("enc.0.bias", Tensor::vector(vec![1.5, -0.25]))
            .unwrap();
        ps.grads_mut().get_mut(a)[0] = 0.5;
        ps.adam_step(&AdamConfig::default());
        ps
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..40)) {
            let ps = store(&values);
            let mut ck = Checkpoint::from_store(&ps, 0xdead_beef, 3);
            ck.set_extra("baseline", vec![values[0]]);
            let mut bytes = Vec::new();
            ck.write_to(&mut bytes).unwrap();
            let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &ck);
            let mut fresh = store(&vec![0.0; values.len()]);
            back.apply_to(&mut fresh).unwrap();
            prop_assert_eq!(fresh, ps);
            prop_assert_eq!(back.extra("baseline"), Some(&values[..1]));
        }
    }

    #[test]
    fn rejects_foreign_architecture() {
        let ck = Checkpoint::from_store(&store(&[1.0, 2.0]), 1, 0);
        let mut other = store(&[1.0, 2.0, 3.0]);
        assert!(ck.apply_to(&mut other).is_err());
        assert!(Checkpoint::read_from(&b"NOTACKPT"[..]).is_err());
    }
}
