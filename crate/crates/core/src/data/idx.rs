//! Big-endian IDX files (the MNIST distribution format).

use std::fs;
use std::io;
use std::path::Path;

use crate::tasks::LabeledExample;
use crate::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(truncated(path, offset)),
    }
}

fn truncated(path: &Path, offset: usize) -> Error {
    Error::io(
        path,
        io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("file truncated at byte offset {offset}"),
        ),
    )
}

/// Parses an image file and its label file into 28×28 examples with pixels
/// scaled to `[0, 1]`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Vec<LabeledExample>> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            images_path,
            Some(0),
            format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(Error::format(
            images_path,
            Some(8),
            format!("image dimensions {rows}x{cols}, expected {SIDE}x{SIDE}"),
        ));
    }

    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            labels_path,
            Some(0),
            format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let label_count = be_u32(&labels, 4, labels_path)? as usize;
    if label_count != count {
        return Err(Error::format(
            labels_path,
            Some(4),
            format!("{label_count} labels for {count} images"),
        ));
    }

    let pixels = SIDE * SIDE;
    let image_end = 16 + count * pixels;
    if images.len() < image_end {
        return Err(truncated(images_path, images.len()));
    }
    if labels.len() < 8 + count {
        return Err(truncated(labels_path, labels.len()));
    }

    let out = images[16..image_end]
        .chunks_exact(pixels)
        .zip(&labels[8..8 + count])
        .map(|(img, &label)| {
            let features: Vec<f64> = img.iter().map(|&b| b as f64 / 255.0).collect();
            LabeledExample::new(features, label as usize)
        })
        .collect();
    Ok(out)
}

/// Writes 28×28 byte images and labels in IDX format.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    images: &[[u8; SIDE * SIDE]],
    labels: &[u8],
) -> Result<()> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    assert_eq!(images.len(), labels.len(), "one label per image");
    let n = images.len() as u32;
    let mut img = Vec::with_capacity(16 + images.len() * SIDE * SIDE);
    for word in [IMAGE_MAGIC, n, SIDE as u32, SIDE as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut images = vec![[0u8; SIDE * SIDE]; n];
        for (i, im) in images.iter_mut().enumerate() {
            im[0] = 255;
            im[1] = i as u8;
        }
        let labels: Vec<u8> = (0..n as u8).map(|i| i % 10).collect();
        let ip = dir.join("img");
        let lp = dir.join("lab");
        write_idx(&ip, &lp, &images, &labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn parses_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny(dir.path(), 3);
        let ex = load_idx(&ip, &lp).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].features.len(), 784);
        assert_eq!(ex[0].features[0], 1.0);
        assert_eq!(ex[0].features[2], 0.0);
        assert_eq!(ex[2].features[1], 2.0 / 255.0);
        assert_eq!(ex[2].label, 2);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny(dir.path(), 2);
        let mut bytes = fs::read(&ip).unwrap();
        bytes[..4].copy_from_slice(&0u32.to_be_bytes());
        fs::write(&ip, bytes).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::Format {
                offset: Some(0),
                ..
            })
        ));
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = tiny(dir.path(), 3);
        let (_, lp) = tiny(
            &{
                let d = dir.path().join("b");
                fs::create_dir(&d).unwrap();
                d
            },
            2,
        );
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny(dir.path(), 3);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = load_idx(dir.path().join("nope"), dir.path().join("nope2"));
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
