//! Binary tensor container used for network checkpoints, meta-parameters and datasets.
//!
//! Layout (little-endian): `b"RMBR"`, version `u16`, entry count `u16`, then per entry a kind
//! byte, a rank byte, `rank` dimensions as `u32`, and the payload as `f64`.

use std::fs;
use std::path::Path;

use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::meta::MetaParams;
use crate::nets::{Architecture, NetworkParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RMBR";
pub const VERSION: u16 = 1;

/// Entry kinds beyond the network parameter kinds (0..=5).
pub const KIND_META: u8 = 16;
pub const KIND_META_NORM: u8 = 17;
pub const KIND_INPUTS: u8 = 32;
pub const KIND_LABELS: u8 = 33;
pub const KIND_CLASSES: u8 = 34;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub kind: u8,
    pub tensor: Tensor,
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let count = u16::try_from(entries.len())
        .map_err(|_| Error::Format(format!("{} entries exceed the u16 count field", entries.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        let shape = e.tensor.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
        out.push(e.kind);
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not an RMBR container".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = r.u16()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("payload too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry {
            kind,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn encode_network(params: &NetworkParams) -> Result<Vec<u8>> {
    let entries: Vec<Entry> = params
        .slots()
        .iter()
        .zip(&params.tensors)
        .map(|(s, t)| Entry {
            kind: s.kind.code(),
            tensor: t.clone(),
        })
        .collect();
    encode(&entries)
}

/// Decodes a checkpoint and checks every entry against `arch`.
pub fn decode_network(bytes: &[u8], arch: &Architecture) -> Result<NetworkParams> {
    let entries = decode(bytes)?;
    let slots = arch.param_slots();
    if entries.len() != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, architecture needs {}",
            entries.len(),
            slots.len()
        )));
    }
    for (i, (e, s)) in entries.iter().zip(&slots).enumerate() {
        if e.kind != s.kind.code() || e.tensor.shape() != s.shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint entry {i} is kind {} {:?}, expected kind {} {:?}",
                e.kind,
                e.tensor.shape(),
                s.kind.code(),
                s.shape
            )));
        }
    }
    Ok(NetworkParams {
        arch: arch.clone(),
        tensors: entries.into_iter().map(|e| e.tensor).collect(),
    })
}

pub fn encode_theta(theta: &MetaParams) -> Result<Vec<u8>> {
    let mut entries: Vec<Entry> = theta
        .tensors()
        .into_iter()
        .map(|t| Entry {
            kind: KIND_META,
            tensor: t.clone(),
        })
        .collect();
    for net in &theta.nets {
        if let Some(n) = &net.norm {
            let mut data = vec![n.count];
            data.extend(&n.mean);
            data.extend(&n.m2);
            entries.push(Entry {
                kind: KIND_META_NORM,
                tensor: Tensor::new(vec![data.len()], data)?,
            });
        }
    }
    encode(&entries)
}

/// Loads meta-parameters into a copy of `template`, which fixes the layout.
pub fn decode_theta(bytes: &[u8], template: &MetaParams) -> Result<MetaParams> {
    let entries = decode(bytes)?;
    let mut theta = template.clone();
    let (tensors, norms): (Vec<Entry>, Vec<Entry>) = entries.into_iter().partition(|e| e.kind == KIND_META);
    {
        let mut slots = theta.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Format(format!(
                "meta checkpoint has {} tensors, expected {}",
                tensors.len(),
                slots.len()
            )));
        }
        for (i, (dst, e)) in slots.iter_mut().zip(tensors).enumerate() {
            if dst.shape() != e.tensor.shape() {
                return Err(Error::Format(format!(
                    "meta tensor {i} has shape {:?}, expected {:?}",
                    e.tensor.shape(),
                    dst.shape()
                )));
            }
            **dst = e.tensor;
        }
    }
    let mut norms = norms.into_iter();
    for net in &mut theta.nets {
        if let Some(n) = &mut net.norm {
            let e = norms
                .next()
                .ok_or_else(|| Error::Format("missing input statistics".into()))?;
            let k = n.mean.len();
            if e.kind != KIND_META_NORM || e.tensor.len() != 2 * k + 1 {
                return Err(Error::Format("malformed input statistics".into()));
            }
            let d = e.tensor.data();
            n.count = d[0];
            n.mean.copy_from_slice(&d[1..=k]);
            n.m2.copy_from_slice(&d[k + 1..]);
        }
    }
    if norms.next().is_some() {
        return Err(Error::Format("unexpected entries after meta tensors".into()));
    }
    Ok(theta)
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let labels = ds.labels.iter().map(|&l| l as f64).collect();
    let classes = ds.classes.iter().map(|&c| c as f64).collect();
    encode(&[
        Entry {
            kind: KIND_INPUTS,
            tensor: ds.inputs.clone(),
        },
        Entry {
            kind: KIND_LABELS,
            tensor: Tensor::new(vec![ds.len()], labels)?,
        },
        Entry {
            kind: KIND_CLASSES,
            tensor: Tensor::new(vec![ds.classes.len()], classes)?,
        },
    ])
}

pub fn decode_dataset(bytes: &[u8], split: SplitTag) -> Result<Dataset> {
    let entries = decode(bytes)?;
    let kinds: Vec<u8> = entries.iter().map(|e| e.kind).collect();
    if kinds != [KIND_INPUTS, KIND_LABELS, KIND_CLASSES] {
        return Err(Error::Format(format!("not a dataset container (kinds {kinds:?})")));
    }
    let as_usize = |t: &Tensor| -> Result<Vec<usize>> {
        t.data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("{v} is not an index")))
                }
            })
            .collect()
    };
    let labels = as_usize(&entries[1].tensor)?;
    let classes = as_usize(&entries[2].tensor)?;
    Dataset::new(entries[0].tensor.clone(), labels, classes, split)
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    Ok(fs::write(path, bytes)?)
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}
