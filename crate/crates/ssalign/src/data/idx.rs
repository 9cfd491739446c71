//! Big-endian IDX image/label files (the MNIST container format).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn fmt_err(path: &Path, what: &str) -> Error {
    Error::Format(format!("{}: {what}", path.display()))
}

/// Reads an IDX image file into a `[N, 1, H, W]` tensor scaled to `[0, 1]`.
pub fn read_images(path: &Path) -> Result<Tensor<f32>> {
    let ctx = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::open(path).map_err(ctx)?;
    let mut r = BufReader::new(file);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| fmt_err(path, "truncated header"))?;
    if magic != IMAGES_MAGIC {
        return Err(fmt_err(path, &format!("bad image magic {magic:#010x}")));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| fmt_err(path, "truncated dims"))? as usize;
    let h = r.read_u32::<BigEndian>().map_err(|_| fmt_err(path, "truncated dims"))? as usize;
    let w = r.read_u32::<BigEndian>().map_err(|_| fmt_err(path, "truncated dims"))? as usize;
    let mut bytes = vec![0u8; n * h * w];
    r.read_exact(&mut bytes)
        .map_err(|_| fmt_err(path, "truncated pixel data"))?;
    let data: Vec<f32> = bytes.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Reads an IDX label file.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let ctx = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::open(path).map_err(ctx)?;
    let mut r = BufReader::new(file);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| fmt_err(path, "truncated header"))?;
    if magic != LABELS_MAGIC {
        return Err(fmt_err(path, &format!("bad label magic {magic:#010x}")));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| fmt_err(path, "truncated count"))? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)
        .map_err(|_| fmt_err(path, "truncated label data"))?;
    Ok(bytes.into_iter().map(|b| b as usize).collect())
}

/// Loads a labeled set from an image file and a label file; the two must
/// agree on the sample count.
pub fn load_labeled(
    images_path: &Path,
    labels_path: &Path,
    num_classes: usize,
) -> Result<super::LabeledSet> {
    let images = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            images.shape()[0],
            labels_path.display(),
            labels.len()
        )));
    }
    super::LabeledSet::new(images, labels, num_classes)
}

pub fn load_unlabeled(images_path: &Path) -> Result<super::UnlabeledSet> {
    Ok(super::UnlabeledSet::new(read_images(images_path)?))
}

/// Loads a test set whose ground truth lives in a separate sidecar file.
pub fn load_with_sidecar(images_path: &Path, sidecar_path: &Path) -> Result<super::UnlabeledSet> {
    let images = read_images(images_path)?;
    let labels = read_labels(sidecar_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} sidecar labels",
            images.shape()[0],
            labels.len()
        )));
    }
    super::UnlabeledSet::with_sidecar(images, labels)
}

/// Writes images as IDX, quantizing pixels to bytes (round of `255 * x`).
pub fn write_images(path: &Path, images: &Tensor<f32>) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Dim(format!(
            "IDX writer expects single-channel [N,1,H,W], got {s:?}"
        )));
    }
    let ctx = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::create(path).map_err(ctx)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_u32::<BigEndian>(IMAGES_MAGIC)?;
        w.write_u32::<BigEndian>(s[0] as u32)?;
        w.write_u32::<BigEndian>(s[2] as u32)?;
        w.write_u32::<BigEndian>(s[3] as u32)?;
        for &v in images.data() {
            w.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
        }
        w.flush()
    })()
    .map_err(ctx)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::Format(format!("label {bad} does not fit in a byte")));
    }
    let ctx = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::create(path).map_err(ctx)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_u32::<BigEndian>(LABELS_MAGIC)?;
        w.write_u32::<BigEndian>(labels.len() as u32)?;
        for &l in labels {
            w.write_all(&[l as u8])?;
        }
        w.flush()
    })()
    .map_err(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_scaling_rule() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx");
        let imgs = Tensor::new(
            vec![2, 1, 2, 2],
            vec![0.0, 1.0, 0.5, 0.25, 1.0, 0.0, 0.75, 0.1],
        )
        .unwrap();
        write_images(&path, &imgs).unwrap();
        let back = read_images(&path).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[1], 1.0);
    }

    #[test]
    fn byte_quantized_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx");
        // data already on the byte grid
        let data: Vec<f32> = (0..16).map(|v| (v * 17 % 256) as f32 / 255.0).collect();
        let imgs = Tensor::new(vec![4, 1, 2, 2], data).unwrap();
        write_images(&path, &imgs).unwrap();
        let back = read_images(&path).unwrap();
        assert_eq!(back.data(), imgs.data());

        let lpath = dir.path().join("labels.idx");
        let labels = vec![3usize, 1, 4, 1];
        write_labels(&lpath, &labels).unwrap();
        assert_eq!(read_labels(&lpath).unwrap(), labels);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&10u32.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 7]); // far too few pixels
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_images(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        std::fs::write(&path, 0xDEAD_BEEFu32.to_be_bytes()).unwrap();
        assert!(matches!(read_images(&path), Err(Error::Format(_))));
        assert!(matches!(read_labels(&path), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("imgs.idx");
        let lpath = dir.path().join("labels.idx");
        let imgs = Tensor::new(vec![3, 1, 2, 2], vec![0.0; 12]).unwrap();
        write_images(&ipath, &imgs).unwrap();
        write_labels(&lpath, &[0, 1]).unwrap();
        assert!(matches!(
            load_labeled(&ipath, &lpath, 10),
            Err(Error::Consistency(_))
        ));
    }
}
