//! Binary checkpoint container.
//!
//! Layout (little-endian): 8-byte magic, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u8` element tag (1 = f32, 2 = f64,
//! 3 = u32 words), `u32` rank, `u64` dims, raw element bytes.

use std::path::Path;

use super::{Network, Sgd};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DISOUTC1";
const WORDS_TAG: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: EntryData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("checkpoint truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = match T::PRECISION {
            Precision::F32 => EntryData::F32(t.data().iter().map(|v| v.to_f32().expect("f32")).collect()),
            Precision::F64 => EntryData::F64(t.data().iter().map(|v| v.to_f64().expect("f64")).collect()),
        };
        self.entries.push(Entry {
            name: name.into(),
            dims: t.shape().to_vec(),
            data,
        });
    }

    pub fn push_words(&mut self, name: impl Into<String>, words: Vec<u32>) {
        self.entries.push(Entry {
            name: name.into(),
            dims: vec![words.len()],
            data: EntryData::U32(words),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| format_err(format!("checkpoint has no entry `{name}`")))
    }

    /// Tensor stored under `name`; its precision must be `T`'s.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.require(name)?;
        let values: Vec<T> = match (&e.data, T::PRECISION) {
            (EntryData::F32(v), Precision::F32) => v.iter().map(|&x| T::from_f32(x).expect("f32")).collect(),
            (EntryData::F64(v), Precision::F64) => v.iter().map(|&x| T::from_f64(x).expect("f64")).collect(),
            _ => {
                return Err(format_err(format!(
                    "entry `{name}` does not hold {} values",
                    T::PRECISION.name()
                )))
            }
        };
        Tensor::new(&e.dims, values).map_err(|err| format_err(format!("entry `{name}`: {err}")))
    }

    pub fn words(&self, name: &str) -> Result<&[u32]> {
        match &self.require(name)?.data {
            EntryData::U32(w) => Ok(w),
            _ => Err(format_err(format!("entry `{name}` does not hold words"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            let tag = match &e.data {
                EntryData::F32(_) => Precision::F32.tag(),
                EntryData::F64(_) => Precision::F64.tag(),
                EntryData::U32(_) => WORDS_TAG,
            };
            out.push(tag);
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                EntryData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                EntryData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(format_err("not a checkpoint file (bad magic)"));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err("entry name is not UTF-8"))?
                .to_string();
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::new();
            for _ in 0..rank {
                dims.push(usize::try_from(r.u64()?).map_err(|_| format_err("dimension overflows"))?);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| format_err("entry size overflows"))?;
            let width = match tag {
                1 | 3 => 4,
                2 => 8,
                other => return Err(format_err(format!("entry `{name}` has unknown tag {other}"))),
            };
            let raw = r.take(len.checked_mul(width).ok_or_else(|| format_err("entry size overflows"))?)?;
            let data = match tag {
                1 => EntryData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                2 => EntryData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
                _ => EntryData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
            };
            entries.push(Entry { name, dims, data });
        }
        if r.at != bytes.len() {
            return Err(format_err(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters and optimizer velocity of a model.
    pub fn from_model<T: Scalar>(net: &Network<T>, opt: &Sgd<T>) -> Self {
        let mut ck = Checkpoint::default();
        for (name, t) in net.named_params().into_iter().chain(opt.named_velocity()) {
            ck.push_tensor(name, t);
        }
        ck
    }

    /// Overwrites the parameters and velocity of a model with the same layout.
    pub fn restore_model<T: Scalar>(&self, net: &mut Network<T>, opt: &mut Sgd<T>) -> Result<()> {
        let load = |name: String, target: &mut Tensor<T>| -> Result<()> {
            let t = self.tensor::<T>(&name)?;
            if t.shape() != target.shape() {
                return Err(format_err(format!(
                    "entry `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t;
            Ok(())
        };
        for (prefix, slots) in [("layers", net.params_mut()), ("velocity", opt.velocity_mut())] {
            for (i, p) in slots.iter_mut().enumerate() {
                if let Some(p) = p {
                    load(format!("{prefix}.{i}.weight"), &mut p.weight)?;
                    if let Some(b) = &mut p.bias {
                        load(format!("{prefix}.{i}.bias"), b)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::LayerSpec;
    use super::*;

    fn model<T: Scalar>(seed: u64) -> (Network<T>, Sgd<T>) {
        let layers = vec![
            LayerSpec::conv(1, 2, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::flatten(),
            LayerSpec::dense(2 * 4 * 4, 3),
            LayerSpec::head(),
        ];
        let net = Network::new(&[1, 4, 4], layers, true, seed).unwrap();
        let opt = Sgd::new(&net, 0.1, 0.9, 0.0).unwrap();
        (net, opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, opt) = model::<f32>(3);
        let mut ck = Checkpoint::from_model(&net, &opt);
        ck.push_words("rng", vec![1, 2, u32::MAX]);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let (mut other, mut other_opt) = model::<f32>(4);
        assert_ne!(other, net);
        back.restore_model(&mut other, &mut other_opt).unwrap();
        assert_eq!(other, net);
        assert_eq!(back.words("rng").unwrap(), &[1, 2, u32::MAX]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (net, opt) = model::<f64>(1);
        let path = dir.path().join("m.ckpt");
        Checkpoint::from_model(&net, &opt).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(loaded.tensor::<f64>("layers.0.weight").unwrap().bit_eq(&net.params()[0].as_ref().unwrap().weight));
        assert!(matches!(loaded.tensor::<f32>("layers.0.weight"), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (net, opt) = model::<f32>(1);
        let bytes = Checkpoint::from_model(&net, &opt).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT\0\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(Error::Format(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Format(_))));
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let (net, opt) = model::<f32>(1);
        let ck = Checkpoint::from_model(&net, &opt);
        let mut other = Network::<f32>::new(&[3], vec![LayerSpec::dense(3, 2), LayerSpec::head()], true, 0).unwrap();
        let mut other_opt = Sgd::new(&other, 0.1, 0.0, 0.0).unwrap();
        assert!(ck.restore_model(&mut other, &mut other_opt).is_err());
    }
}
