use std::path::Path;

use ndarray::Array2;

use super::{io_err, DataError, Result};

/// Decoded IDX file: dimensions and raw bytes in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn malformed(detail: impl Into<String>) -> DataError {
    DataError::Malformed { what: "idx file".into(), detail: detail.into() }
}

/// Parses an unsigned-byte IDX file (magic `0x00 0x00 0x08 ndim`).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(malformed("truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(malformed(format!("unsupported magic {:02x?}", &bytes[..4])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(malformed("truncated dimensions"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| {
            let at = 4 + 4 * d;
            u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    let data = &bytes[header..];
    if data.len() != expected {
        return Err(malformed(format!("expected {expected} payload bytes, found {}", data.len())));
    }
    Ok(IdxArray { dims, data: data.to_vec() })
}

/// Both MNIST splits as raw bytes, one flattened image per row.
#[derive(Debug, Clone)]
pub struct MnistRaw {
    pub train_images: Array2<u8>,
    pub train_labels: Vec<usize>,
    pub test_images: Array2<u8>,
    pub test_labels: Vec<usize>,
    pub side: usize,
}

fn read(dir: &Path, name: &str) -> Result<IdxArray> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    parse_idx(&bytes)
}

fn images(idx: IdxArray) -> Result<(Array2<u8>, usize)> {
    let [n, h, w] = idx.dims[..] else {
        return Err(malformed(format!("image file must be 3-d, got {:?}", idx.dims)));
    };
    let x = Array2::from_shape_vec((n, h * w), idx.data).expect("length checked by parse_idx");
    Ok((x, h))
}

fn labels(idx: IdxArray, n: usize) -> Result<Vec<usize>> {
    if idx.dims != [n] {
        return Err(malformed(format!("label file shape {:?} does not match {n} images", idx.dims)));
    }
    Ok(idx.data.into_iter().map(usize::from).collect())
}

impl MnistRaw {
    /// Reads the four standard IDX files from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let (train_images, side) = images(read(dir, "train-images-idx3-ubyte")?)?;
        let train_labels = labels(read(dir, "train-labels-idx1-ubyte")?, train_images.nrows())?;
        let (test_images, _) = images(read(dir, "t10k-images-idx3-ubyte")?)?;
        let test_labels = labels(read(dir, "t10k-labels-idx1-ubyte")?, test_images.nrows())?;
        Ok(Self { train_images, train_labels, test_images, test_labels, side })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_small_file() {
        let mut bytes = vec![0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        bytes.extend(1..=6);
        let idx = parse_idx(&bytes).unwrap();
        assert_eq!(idx.dims, vec![2, 3]);
        assert_eq!(idx.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_wrong_length_and_magic() {
        assert!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 5, 1]).is_err());
        assert!(parse_idx(&[0, 0, 13, 1, 0, 0, 0, 1, 1]).is_err());
    }
}
