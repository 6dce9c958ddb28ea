//! Input tensor files for `run`: one JSON header line `{"shape": [...]}`
//! followed by the row-major little-endian float32 values.
//!
//! The values are fed to the network exactly as stored, so they must carry
//! the same preprocessing the model was trained with. The MNIST loader used
//! by `train` standardizes pixels as `(p / 255 - 0.1307) / 0.3081`; raw
//! `[0, 1]` pixels are far outside that range and produce garbage logits.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use flgc_core::Tensor;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: Vec<usize>,
}

/// Reads a tensor file. A 3-d `[c, h, w]` shape gains a leading batch of
/// one; a 4-d shape is taken as `[batch, c, h, w]` directly.
pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .with_context(|| format!("{}: missing header line", path.display()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .with_context(|| format!("{}: parsing header", path.display()))?;
    let shape: Vec<usize> = match header.shape.len() {
        3 => [vec![1], header.shape].concat(),
        4 => header.shape,
        n => bail!("{}: rank {n} shape, expected [c,h,w] or [batch,c,h,w]", path.display()),
    };
    let blob = &bytes[nl + 1..];
    let count: usize = shape.iter().product();
    if blob.len() != count * 4 {
        bail!("{}: {} blob bytes for {} values", path.display(), blob.len(), count);
    }
    let mut data = Vec::with_capacity(count);
    for chunk in blob.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            bail!("{}: non-finite value at index {}", path.display(), data.len());
        }
        data.push(v);
    }
    Ok(Tensor::from_vec(&shape, data)?)
}
