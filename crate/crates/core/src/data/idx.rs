//! IDX container format (big-endian), as used by MNIST.
//!
//! Images: magic `0x00000803`, then item count, rows and columns as u32,
//! then `count * rows * cols` unsigned bytes. Labels: magic `0x00000801`,
//! item count, then one byte per item.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.bytes.len(),
            message: format!("truncated {what}: need {n} bytes from offset {}", self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn magic(r: &mut Reader, expected: u32) -> Result<()> {
    let m = r.u32("magic number")?;
    if m != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic number {m:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

/// Images as rows scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let mut r = Reader { bytes, pos: 0 };
    magic(&mut r, IMAGES_MAGIC)?;
    let n = r.u32("item count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let dim = rows * cols;
    let pixels = r.bytes(n * dim, "pixel data")?;
    Ok(Array2::from_shape_fn((n, dim), |(i, j)| pixels[i * dim + j] as f64 / 255.0))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0 };
    magic(&mut r, LABELS_MAGIC)?;
    let n = r.u32("item count")? as usize;
    Ok(r.bytes(n, "label data")?.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair. The class count is one more than the
/// largest label present.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    if images.nrows() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", images.nrows(), labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::Format {
            offset: 4,
            message: "file pair holds no items".into(),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(images, labels, num_classes)
}

/// Serializes `n` images of `rows x cols` bytes into IDX.
pub fn encode_idx_images(pixels: &[u8], rows: usize, cols: usize) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut pixels = vec![0u8; 3 * 784];
        pixels[0] = 255;
        pixels[784 + 1] = 51;
        pixels[2 * 784 + 783] = 255;
        (encode_idx_images(&pixels, 28, 28), encode_idx_labels(&[7, 0, 9]))
    }

    #[test]
    fn three_image_fixture() {
        let (img, lab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx3-ubyte");
        let lp = dir.path().join("lab.idx1-ubyte");
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lab).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.input_dim(), 784);
        assert_eq!(d.labels(), &[7, 0, 9]);
        assert_eq!(d.num_classes(), 10);
        assert_eq!(d.inputs()[[0, 0]], 1.0);
        assert_eq!(d.inputs()[[1, 1]], 0.2);
        assert_eq!(d.inputs()[[2, 783]], 1.0);
        assert!(d.inputs().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn header_bytes_are_big_endian() {
        let (img, lab) = fixture();
        assert_eq!(&img[..16], &[0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 28, 0, 0, 0, 28]);
        assert_eq!(&lab[..8], &[0, 0, 8, 1, 0, 0, 0, 3]);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let (mut img, lab) = fixture();
        img[3] = 0x05;
        assert!(matches!(parse_idx_images(&img), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&img), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_images(&lab), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let (img, _) = fixture();
        match parse_idx_images(&img[..100]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 100),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_idx_images(&img[..10]), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let (img, _) = fixture();
        let lab = encode_idx_labels(&[1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }
}
