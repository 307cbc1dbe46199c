//! Binary parameter snapshot for a single [`Mlp`].
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic  b"FORKMLP\0"
//! 8       4           format version (u32) = 1
//! 12      1           hidden activation (0 = ReLU)
//! 13      1           output activation (0 = identity, 1 = scaled tanh)
//! 14      8           output scale (f64; 0.0 for identity)
//! 22      4           layer count L (u32)
//! 26      8 * L       per layer: out_dim (u32), in_dim (u32)
//! ...     variable    per layer: weights out_dim*in_dim f64 row-major, then bias out_dim f64
//! ```

use super::matrix::Matrix;
use super::mlp::{HiddenActivation, Layer, Mlp, OutputActivation};
use super::NnError;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"FORKMLP\0";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn encode(mlp: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(26 + 8 * mlp.layers().len() + 8 * mlp.num_params());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.push(match mlp.hidden_activation() {
        HiddenActivation::Relu => 0,
    });
    let (tag, scale) = match mlp.output_activation() {
        OutputActivation::Identity => (0u8, 0.0),
        OutputActivation::TanhScaled(s) => (1u8, s),
    };
    out.push(tag);
    out.extend_from_slice(&scale.to_le_bytes());
    out.extend_from_slice(&(mlp.layers().len() as u32).to_le_bytes());
    for l in mlp.layers() {
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
    }
    for l in mlp.layers() {
        for v in l.weight.as_slice().iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Mlp, NnError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != SNAPSHOT_MAGIC {
        return Err(NnError::Snapshot("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(NnError::Snapshot(format!("unsupported version {version}")));
    }
    let hidden = match cur.take(1)?[0] {
        0 => HiddenActivation::Relu,
        t => return Err(NnError::Snapshot(format!("unknown hidden activation {t}"))),
    };
    let tag = cur.take(1)?[0];
    let scale = cur.f64()?;
    let output = match tag {
        0 => OutputActivation::Identity,
        1 => OutputActivation::TanhScaled(scale),
        t => return Err(NnError::Snapshot(format!("unknown output activation {t}"))),
    };
    let count = cur.u32()? as usize;
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        dims.push((cur.u32()? as usize, cur.u32()? as usize));
    }
    let mut layers = Vec::with_capacity(count);
    for (out_dim, in_dim) in dims {
        let weight = (0..out_dim * in_dim)
            .map(|_| cur.f64())
            .collect::<Result<Vec<_>, _>>()?;
        let bias = (0..out_dim).map(|_| cur.f64()).collect::<Result<Vec<_>, _>>()?;
        layers.push(Layer {
            weight: Matrix::new(out_dim, in_dim, weight)?,
            bias,
        });
    }
    if cur.pos != bytes.len() {
        return Err(NnError::Snapshot(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Mlp::new(layers, hidden, output)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Snapshot("truncated snapshot".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
