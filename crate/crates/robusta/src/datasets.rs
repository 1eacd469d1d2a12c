//! Loaders for the IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary formats.

use std::path::Path;

use robusta_core::data::{Dataset, Split};
use robusta_core::{Real, Tensor};

use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_BATCH: usize = 10_000;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, offset as u64, "file ends inside the header"))
}

/// Decodes an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(path, 0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let want = 16 + n * rows * cols;
    if bytes.len() != want {
        return Err(Error::format(
            path,
            bytes.len().min(want) as u64,
            format!("header implies {want} bytes, file has {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Decodes an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(path, 0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(
            path,
            bytes.len().min(8 + n) as u64,
            format!("header implies {} bytes, file has {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

fn scale<T: Real>(pixels: &[u8]) -> Vec<T> {
    pixels.iter().map(|&p| T::cast_from(p as f64 / 255.0)).collect()
}

/// Loads an IDX image/label pair with pixels scaled into `[0, 1]`.
pub fn load_idx<T: Real>(name: &str, split: Split, images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images)?, images)?;
    let raw = parse_idx_labels(&read(labels)?, labels)?;
    if raw.len() != n {
        return Err(Error::format(labels, 4, format!("{} labels for {n} images", raw.len())));
    }
    if let Some(i) = raw.iter().position(|&l| l > 9) {
        return Err(Error::format(labels, 8 + i as u64, format!("label {} outside 0-9", raw[i])));
    }
    let tensor = Tensor::new([n, 1, rows, cols], scale(&pixels))?;
    let labels = raw.into_iter().map(usize::from).collect();
    Ok(Dataset::new(name, split, tensor, labels, 10)?)
}

/// Standard file names of the MNIST-style distributions inside `dir`.
pub fn load_idx_dir<T: Real>(name: &str, dir: &Path, split: Split) -> Result<Dataset<T>> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        name,
        split,
        &dir.join(idx_name(dir, prefix, "images", 3)),
        &dir.join(idx_name(dir, prefix, "labels", 1)),
    )
}

/// Accepts both `train-images-idx3-ubyte` and `train-images.idx3-ubyte`.
fn idx_name(dir: &Path, prefix: &str, kind: &str, dims: u8) -> String {
    let dashed = format!("{prefix}-{kind}-idx{dims}-ubyte");
    if dir.join(&dashed).exists() {
        dashed
    } else {
        format!("{prefix}-{kind}.idx{dims}-ubyte")
    }
}

/// Decodes CIFAR-10 binary batches (label byte plus 3072 channel-major
/// pixels per record).
pub fn load_cifar10<T: Real>(name: &str, split: Split, batches: &[&Path]) -> Result<Dataset<T>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for &path in batches {
        let bytes = read(path)?;
        parse_cifar_records(&bytes, path, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    let tensor = Tensor::new([n, 3, 32, 32], scale(&pixels))?;
    Ok(Dataset::new(name, split, tensor, labels, 10)?)
}

/// Appends the records of one batch. A standard batch holds exactly 10000
/// records; shorter files are accepted only if they hold whole records.
pub fn parse_cifar_records(bytes: &[u8], path: &Path, pixels: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) || bytes.len() > CIFAR_BATCH * CIFAR_RECORD {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(path, (i * CIFAR_RECORD) as u64, format!("label {} outside 0-9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}
