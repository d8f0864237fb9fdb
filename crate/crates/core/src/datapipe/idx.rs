//! IDX reader/writer (the big-endian container MNIST and Fashion-MNIST ship in).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, IoContext, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format(format!("{what}: truncated header")))?;
    Ok(u32::from_be_bytes(b))
}

fn expect_magic(r: &mut impl Read, what: &'static str, expected: u32) -> Result<()> {
    let found = read_be_u32(r, what)?;
    if found == expected {
        Ok(())
    } else {
        Err(Error::BadMagic { what, expected, found })
    }
}

/// Reads an idx3 image file: `(count, rows, cols, bytes)`.
pub fn read_images(r: &mut impl Read) -> Result<(usize, usize, usize, Vec<u8>)> {
    expect_magic(r, "idx images", IMAGES_MAGIC)?;
    let count = read_be_u32(r, "idx images")? as usize;
    let rows = read_be_u32(r, "idx images")? as usize;
    let cols = read_be_u32(r, "idx images")? as usize;
    let mut bytes = vec![0u8; count * rows * cols];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("idx images: payload truncated, expected {count} images of {rows}x{cols}")))?;
    Ok((count, rows, cols, bytes))
}

pub fn read_labels(r: &mut impl Read) -> Result<Vec<u8>> {
    expect_magic(r, "idx labels", LABELS_MAGIC)?;
    let count = read_be_u32(r, "idx labels")? as usize;
    let mut bytes = vec![0u8; count];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("idx labels: payload truncated, expected {count} labels")))?;
    Ok(bytes)
}

/// Loads an image/label IDX pair, scaling bytes to `[0, 1]` by division by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (count, rows, cols, bytes) = read_images(&mut BufReader::new(File::open(images_path).at(images_path)?))?;
    let labels = read_labels(&mut BufReader::new(File::open(labels_path).at(labels_path)?))?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "image file holds {count} images but label file holds {} labels",
            labels.len()
        )));
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Empty(format!("{} holds no pixels", images_path.display())));
    }
    let pixels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    LabeledDataset::new(
        [rows, cols, 1],
        pixels,
        labels.into_iter().map(usize::from).collect(),
        format!("idx:{}", images_path.display()),
    )
}

fn to_byte(p: f64) -> Result<u8> {
    let b = (p * 255.0).round();
    if f64::from(b as u8) / 255.0 == p {
        Ok(b as u8)
    } else {
        Err(Error::Format(format!("pixel {p} is not representable as k/255")))
    }
}

/// Writes a single-channel dataset as an IDX pair. Pixels must be exact multiples of 1/255.
pub fn write_idx(data: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [h, w, c] = data.image_shape();
    if c != 1 {
        return Err(Error::Format(format!("idx3 holds single-channel images, got {c} channels")));
    }
    let mut iw = BufWriter::new(File::create(images_path).at(images_path)?);
    for v in [IMAGES_MAGIC, data.len() as u32, h as u32, w as u32] {
        iw.write_all(&v.to_be_bytes())?;
    }
    let bytes = data.pixels().iter().map(|&p| to_byte(p)).collect::<Result<Vec<_>>>()?;
    iw.write_all(&bytes)?;
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path).at(labels_path)?);
    for v in [LABELS_MAGIC, data.len() as u32] {
        lw.write_all(&v.to_be_bytes())?;
    }
    let labels = data
        .labels()
        .iter()
        .map(|&y| u8::try_from(y).map_err(|_| Error::Format(format!("label {y} does not fit in a byte"))))
        .collect::<Result<Vec<_>>>()?;
    lw.write_all(&labels)?;
    lw.flush()?;
    Ok(())
}
