//! Binary checkpoint format.
//!
//! ```text
//! "CPS1" | u32 version | u64 n | n × tensor
//!        | u64 k | k × tensor          (optimizer block, k = 0 when absent)
//!        | u64 step | [u8; 32] rng key
//! tensor = u16 name_len | name | u8 rank | rank × u32 dim | f32 data
//! ```
//! All integers little-endian. Model hyperparameters travel as a rank-1
//! tensor named `hparams`.

use std::path::Path;

use super::optim::AdamState;
use crate::data::write_atomic;
use crate::model::{CapsNet, CapsNetConfig};
use crate::rng::RngKey;
use crate::tensor::Tensor;
use crate::{CapsError, Result};

const MAGIC: &[u8; 4] = b"CPS1";
pub const CHECKPOINT_VERSION: u32 = 1;
const HPARAMS: &str = "hparams";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CapsNet<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub step: u64,
    pub rng_key: RngKey,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend((name.len() as u16).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend((d as u32).to_le_bytes());
    }
    for x in t.data() {
        buf.extend(x.to_le_bytes());
    }
}

/// Serialises a checkpoint to bytes.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let params = ck.model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    buf.extend(((params.len() + 1) as u64).to_le_bytes());
    let h: Vec<f32> = ck.model.config().to_hparams().iter().map(|&x| x as f32).collect();
    put_tensor(&mut buf, HPARAMS, &Tensor::new(vec![h.len()], h).expect("rank-1"));
    for (name, t) in &params {
        put_tensor(&mut buf, name, t);
    }
    match &ck.optimizer {
        Some(opt) => {
            buf.extend(((2 * params.len()) as u64).to_le_bytes());
            for ((name, _), m) in params.iter().zip(&opt.m) {
                put_tensor(&mut buf, &format!("m.{name}"), m);
            }
            for ((name, _), v) in params.iter().zip(&opt.v) {
                put_tensor(&mut buf, &format!("v.{name}"), v);
            }
        }
        None => buf.extend(0u64.to_le_bytes()),
    }
    buf.extend(ck.step.to_le_bytes());
    buf.extend(ck.rng_key);
    buf
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CapsError::format(self.path, format!("truncated: needed {n} bytes at offset {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = usize::from(self.u16()?);
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CapsError::format(self.path, "tensor name is not UTF-8"))?;
        let rank = usize::from(self.u8()?);
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = n
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CapsError::format(self.path, format!("tensor {name:?} is too large")))?;
        let data =
            self.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

/// Hyperparameters are stored as f32; decimal values with up to seven
/// significant digits (0.0005, 0.9, ...) are recovered exactly.
fn widen(x: f32) -> f64 {
    x.to_string().parse().expect("f32 display round-trips")
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4)? != MAGIC {
        return Err(CapsError::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CapsError::format(
            path,
            format!("checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"),
        ));
    }
    let count = r.u64()?;
    let mut config = None;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if name == HPARAMS {
            let h: Vec<f64> = t.data().iter().map(|&x| widen(x)).collect();
            config = Some(CapsNetConfig::from_hparams(&h)?);
        } else {
            tensors.push((name, t));
        }
    }
    let config = config.ok_or_else(|| CapsError::format(path, "missing hparams tensor"))?;
    let model = CapsNet::from_named(config, tensors).map_err(|e| CapsError::format(path, e.to_string()))?;

    let opt_count = r.u64()? as usize;
    let names = model.param_names();
    let optimizer = if opt_count == 0 {
        None
    } else {
        if opt_count != 2 * names.len() {
            return Err(CapsError::format(
                path,
                format!("optimizer block has {opt_count} tensors, expected {}", 2 * names.len()),
            ));
        }
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (prefix, out) in [("m", &mut m), ("v", &mut v)] {
            for (name, (_, p)) in names.iter().zip(model.params()) {
                let (got, t) = r.tensor()?;
                let want = format!("{prefix}.{name}");
                if got != want {
                    return Err(CapsError::format(path, format!("unknown tensor name {got:?}, expected {want:?}")));
                }
                if t.shape() != p.shape() {
                    return Err(CapsError::format(path, format!("{got} has shape {:?}", t.shape())));
                }
                out.push(t);
            }
        }
        Some(AdamState { m, v, step: 0 })
    };
    let step = r.u64()?;
    let rng_key: RngKey = r.take(32)?.try_into().expect("32 bytes");
    if r.at != bytes.len() {
        return Err(CapsError::format(path, format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint { model, optimizer: optimizer.map(|o| AdamState { step, ..o }), step, rng_key })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CapsError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
