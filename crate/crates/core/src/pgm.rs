//! Binary PGM (P5, maxval 255) export for triggers and perturbations.

use std::io::Write;
use std::path::Path;

use crate::error::{invalid, IoContext, Result};
use crate::numcore::{Scalar, Tensor};

/// Encodes an `(H, W, C)` tensor of values in `[0, 1]`; channels are averaged.
pub fn encode_unit(image: &Tensor) -> Result<Vec<u8>> {
    encode_with(image, |v| v)
}

/// Encodes a perturbation in `[-1, 1]` with `p = round(255 * clip((v + 1) / 2, 0, 1))`.
pub fn encode_signed(perturbation: &Tensor) -> Result<Vec<u8>> {
    encode_with(perturbation, |v| (v + 1.0) / 2.0)
}

fn encode_with(image: &Tensor, to_unit: impl Fn(Scalar) -> Scalar) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(invalid(format!("PGM export expects (H, W, C), got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for px in image.data().chunks_exact(c) {
        let mean = px.iter().sum::<Scalar>() / c as Scalar;
        out.push((255.0 * to_unit(mean).clamp(0.0, 1.0)).round() as u8);
    }
    Ok(out)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(bytes).at(path)
}
