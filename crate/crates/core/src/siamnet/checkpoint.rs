//! Binary checkpoint of a [`SiamUNet`].
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "CARTALCK"
//! 8       4     u32 format version (currently 1)
//! 12      4     u32 length L of the config header
//! 16      L     SiamUNetConfig as UTF-8 JSON
//! 16+L    4     u32 tensor count T
//! then T records, sorted by name:
//!         2     u16 name length K
//!         K     UTF-8 name
//!         1     u8 rank R
//!         4·R   u32 dimensions
//!         8·n   f64 values, n = product of dimensions
//! ```
//!
//! Learnable tensors use their parameter names (`enc0.conv.w`, ...).
//! Batch-norm running statistics are stored as `<layer>.bn.running_mean`
//! and `<layer>.bn.running_var`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use gradkit::{ParameterSet, Tensor};

use super::{build, RunningStats, SiamUNet, SiamUNetConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CARTALCK";
pub const VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".bn.running_mean";
const RUNNING_VAR: &str = ".bn.running_var";

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name `{name}` too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(shape.len()).map_err(|_| Error::Checkpoint(format!("rank of `{name}` too large")))?;
    out.push(rank);
    for &d in shape {
        put_u32(out, d, "dimension")?;
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serialises a model into the checkpoint byte layout.
pub fn to_bytes(model: &SiamUNet) -> Result<Vec<u8>> {
    let mut tensors: BTreeMap<String, (Vec<usize>, &[f64])> = BTreeMap::new();
    for (name, t) in model.params().iter() {
        tensors.insert(name.clone(), (t.shape().to_vec(), t.data()));
    }
    for (layer, r) in model.running_stats() {
        tensors.insert(format!("{layer}{RUNNING_MEAN}"), (vec![r.mean.len()], &r.mean));
        tensors.insert(format!("{layer}{RUNNING_VAR}"), (vec![r.var.len()], &r.var));
    }
    let header = serde_json::to_vec(model.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, header.len(), "header length")?;
    out.extend_from_slice(&header);
    put_u32(&mut out, tensors.len(), "tensor count")?;
    for (name, (shape, values)) in &tensors {
        put_tensor(&mut out, name, shape, values)?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return bad(format!("truncated while reading {what} at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses checkpoint bytes and checks them against the architecture named
/// in the header: every expected tensor must be present with its exact shape.
pub fn from_bytes(bytes: &[u8]) -> Result<SiamUNet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return bad("not a checkpoint file (bad magic)");
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return bad(format!("unsupported format version {version}"));
    }
    let hlen = r.u32("header length")?;
    let config: SiamUNetConfig = serde_json::from_slice(r.take(hlen, "config header")?)?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let klen = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(klen, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(bytes_len) = n.and_then(|n| n.checked_mul(8)) else {
            return bad(format!("tensor `{name}` is too large"));
        };
        let values = r
            .take(bytes_len, &name)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, values)?).is_some() {
            return bad(format!("tensor `{name}` appears twice"));
        }
    }
    if r.pos != bytes.len() {
        return bad(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    assemble(config, tensors)
}

fn assemble(config: SiamUNetConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<SiamUNet> {
    let template = build(&config)?;
    let mut params = ParameterSet::new(config.seed);
    for (name, expected) in template.params().iter() {
        let Some(t) = tensors.remove(name) else {
            return bad(format!("missing tensor `{name}`"));
        };
        if t.shape() != expected.shape() {
            return bad(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                expected.shape()
            ));
        }
        params.insert(name.clone(), t)?;
    }
    let mut running = BTreeMap::new();
    for (layer, expected) in template.running_stats() {
        let mut take = |suffix: &str| -> Result<Vec<f64>> {
            let name = format!("{layer}{suffix}");
            match tensors.remove(&name) {
                Some(t) if t.shape() == [expected.mean.len()] => Ok(t.into_data()),
                Some(t) => bad(format!("tensor `{name}` has shape {:?}", t.shape())),
                None => bad(format!("missing tensor `{name}`")),
            }
        };
        let mean = take(RUNNING_MEAN)?;
        let var = take(RUNNING_VAR)?;
        if var.iter().any(|v| !(*v >= 0.0)) {
            return bad(format!("negative running variance in layer {layer}"));
        }
        running.insert(layer.clone(), RunningStats { mean, var });
    }
    if let Some(name) = tensors.keys().next() {
        return bad(format!("unexpected tensor `{name}`"));
    }
    Ok(SiamUNet {
        config,
        params,
        running,
    })
}

pub fn save(model: &SiamUNet, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SiamUNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
