//! IDX ingestion for MNIST digits and Fashion-MNIST, the mixed in/out
//! evaluation set, and seeded mini-batch ordering.
//!
//! IDX layout: a 4-byte big-endian magic (`0x00000803` for `u8` images with
//! three dimensions, `0x00000801` for `u8` labels with one), one big-endian
//! `u32` per dimension, then the raw bytes. Gzip-compressed files are accepted
//! and detected by their `1f 8b` prefix.

use std::env;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const DATA_ENV: &str = "SYMWD_DATA";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path:?}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path:?}: truncated, {actual} bytes but the header implies {expected}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path:?}: {actual} bytes but the header implies {expected}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path:?}: images are {rows}x{cols}, expected 28x28")]
    BadImageSize { path: PathBuf, rows: u32, cols: u32 },
    #[error("image file holds {images} images but label file holds {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path:?}: label {label} at index {index} is outside 0..=9")]
    LabelOutOfRange { path: PathBuf, index: usize, label: u8 },
    #[error("dataset is empty")]
    Empty,
    #[error("no {what} file found; looked for {candidates:?}")]
    MissingFile { what: String, candidates: Vec<PathBuf> },
}

/// Which dataset an image set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Digits,
    Fashion,
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceTag::Digits => "digits",
            SourceTag::Fashion => "fashion",
        })
    }
}

/// Whether an entry of a mixed set is drawn from the training distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Distribution {
    In,
    Out,
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Distribution::In => "in",
            Distribution::Out => "out",
        })
    }
}

/// Labeled images, `N × 1 × 28 × 28`, pixels in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub source: SourceTag,
}

impl ImageDataset {
    pub fn new(images: Tensor, labels: Vec<u8>, source: SourceTag) -> Result<Self, DataError> {
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        assert_eq!(images.shape(), &[n, 1, IMAGE_SIDE, IMAGE_SIDE], "image batch shape");
        Ok(Self { images, labels, source })
    }

    /// Builds a dataset from raw `u8` pixels, normalizing by 255.
    pub fn from_raw(pixels: &[u8], labels: Vec<u8>, source: SourceTag) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if pixels.len() != labels.len() * IMAGE_PIXELS {
            return Err(DataError::CountMismatch {
                images: pixels.len() / IMAGE_PIXELS,
                labels: labels.len(),
            });
        }
        let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let images = Tensor::new(&[labels.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data)
            .expect("pixel count checked");
        Self::new(images, labels, source)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        if indices.is_empty() {
            return Err(DataError::Empty);
        }
        let images = self
            .images
            .gather_rows(indices)
            .expect("indices within dataset");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            images,
            labels,
            source: self.source,
        })
    }

    /// The first `n` images (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Result<Self, DataError> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_length(path: &Path, bytes: &[u8], expected: usize) -> Result<(), DataError> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32, header: usize) -> Result<(), DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX image file body into `(count, raw pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, Vec<u8>), DataError> {
    check_magic(path, bytes, IMAGES_MAGIC, 16)?;
    let n = be_u32(bytes, 4) as usize;
    let (rows, cols) = (be_u32(bytes, 8), be_u32(bytes, 12));
    if rows as usize != IMAGE_SIDE || cols as usize != IMAGE_SIDE {
        return Err(DataError::BadImageSize {
            path: path.to_path_buf(),
            rows,
            cols,
        });
    }
    check_length(path, bytes, 16 + n * IMAGE_PIXELS)?;
    Ok((n, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    check_magic(path, bytes, LABELS_MAGIC, 8)?;
    let n = be_u32(bytes, 4) as usize;
    check_length(path, bytes, 8 + n)?;
    let labels = bytes[8..].to_vec();
    if let Some((index, &label)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= NUM_CLASSES)
    {
        return Err(DataError::LabelOutOfRange {
            path: path.to_path_buf(),
            index,
            label,
        });
    }
    Ok(labels)
}

/// Loads a paired IDX image file and label file, normalizing pixels by 255.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    source: SourceTag,
) -> Result<ImageDataset, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, pixels) = parse_idx_images(ip, &read_maybe_gz(ip)?)?;
    let labels = parse_idx_labels(lp, &read_maybe_gz(lp)?)?;
    if n != labels.len() {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    ImageDataset::from_raw(&pixels, labels, source)
}

pub fn encode_idx_images(count: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * IMAGE_PIXELS);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGES_MAGIC, count as u32, IMAGE_SIDE as u32, IMAGE_SIDE as u32] {
        out.extend_from_slice(&word.to_be_bytes());
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

/// In-distribution and out-of-distribution evaluation images, shuffled together.
#[derive(Clone, Debug)]
pub struct MixedDataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub tags: Vec<Distribution>,
    /// Index of each entry within its source set.
    pub origin: Vec<usize>,
}

impl MixedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, tag: Distribution) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    /// Digits entries as a labeled dataset, in mixed order.
    pub fn in_distribution(&self) -> Result<ImageDataset, DataError> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.tags[i] == Distribution::In).collect();
        let images = self.images.gather_rows(&idx).map_err(|_| DataError::Empty)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        ImageDataset::new(images, labels, SourceTag::Digits)
    }
}

/// Concatenates `digits` (tagged in) and `fashion` (tagged out) and applies a
/// seeded shuffle.
pub fn build_mixed(digits: &ImageDataset, fashion: &ImageDataset, seed: u64) -> MixedDataset {
    let total = digits.len() + fashion.len();
    let mut order: Vec<(Distribution, usize)> = (0..digits.len())
        .map(|i| (Distribution::In, i))
        .chain((0..fashion.len()).map(|i| (Distribution::Out, i)))
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut data = Vec::with_capacity(total * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(total);
    let mut tags = Vec::with_capacity(total);
    let mut origin = Vec::with_capacity(total);
    for (tag, i) in order {
        let src = match tag {
            Distribution::In => digits,
            Distribution::Out => fashion,
        };
        data.extend_from_slice(src.images.row(i));
        labels.push(src.labels[i]);
        tags.push(tag);
        origin.push(i);
    }
    MixedDataset {
        images: Tensor::new(&[total.max(1), 1, IMAGE_SIDE, IMAGE_SIDE], data)
            .expect("mixed set of non-empty inputs"),
        labels,
        tags,
        origin,
    }
}

/// Index batches for one epoch: a permutation of `0..len` seeded by
/// `(seed, epoch)`, cut into chunks of `batch_size` with the remainder last.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Locations of the IDX files under a data directory:
///
/// ```text
/// <dir>/mnist/train-images-idx3-ubyte[.gz]   <dir>/mnist/train-labels-idx1-ubyte[.gz]
/// <dir>/mnist/t10k-images-idx3-ubyte[.gz]    <dir>/mnist/t10k-labels-idx1-ubyte[.gz]
/// <dir>/fashion/t10k-images-idx3-ubyte[.gz]  <dir>/fashion/t10k-labels-idx1-ubyte[.gz]
/// ```
#[derive(Clone, Debug)]
pub struct DataDir {
    pub root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl DataDir {
    /// Flag value, then `$SYMWD_DATA`, then `./data`.
    pub fn resolve(flag: Option<&Path>) -> Self {
        let root = flag
            .map(Path::to_path_buf)
            .or_else(|| env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"));
        Self { root }
    }

    fn find(&self, source: SourceTag, split: Split, kind: &str) -> Result<PathBuf, DataError> {
        let sub = match source {
            SourceTag::Digits => "mnist",
            SourceTag::Fashion => "fashion",
        };
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "t10k",
        };
        let base = self.root.join(sub).join(format!("{prefix}-{kind}-ubyte"));
        let gz = PathBuf::from(format!("{}.gz", base.display()));
        let candidates = vec![base, gz];
        candidates
            .iter()
            .find(|p| p.is_file())
            .cloned()
            .ok_or(DataError::MissingFile {
                what: format!("{source} {prefix} {kind}"),
                candidates,
            })
    }

    pub fn load(&self, source: SourceTag, split: Split) -> Result<ImageDataset, DataError> {
        let images = self.find(source, split, "images-idx3")?;
        let labels = self.find(source, split, "labels-idx1")?;
        load_idx(images, labels, source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny(n: usize, source: SourceTag, offset: u8) -> ImageDataset {
        let pixels: Vec<u8> = (0..n * IMAGE_PIXELS).map(|i| (i % 251) as u8).collect();
        let labels = (0..n).map(|i| ((i as u8) + offset) % 10).collect();
        ImageDataset::from_raw(&pixels, labels, source).unwrap()
    }

    #[test]
    fn parse_roundtrip_and_normalization() {
        let pixels: Vec<u8> = (0..2 * IMAGE_PIXELS).map(|i| (i % 256) as u8).collect();
        let bytes = encode_idx_images(2, &pixels);
        let (n, back) = parse_idx_images(Path::new("x"), &bytes).unwrap();
        assert_eq!(n, 2);
        assert_eq!(back, pixels);
        let ds = ImageDataset::from_raw(&pixels, vec![3, 9], SourceTag::Digits).unwrap();
        assert_eq!(ds.images.data()[255], 1.0);
        assert_eq!(ds.images.data()[0], 0.0);
        assert!(ds.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn labels_with_image_magic_rejected() {
        let bytes = encode_idx_images(1, &[0; IMAGE_PIXELS]);
        assert!(matches!(
            parse_idx_labels(Path::new("l"), &bytes),
            Err(DataError::BadMagic {
                expected: LABELS_MAGIC,
                found: IMAGES_MAGIC,
                ..
            })
        ));
    }

    #[test]
    fn length_checks() {
        let bytes = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(
            parse_idx_labels(Path::new("l"), &bytes[..bytes.len() - 1]),
            Err(DataError::Truncated { expected: 11, actual: 10, .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            parse_idx_labels(Path::new("l"), &long),
            Err(DataError::LengthMismatch { .. })
        ));
        let img = encode_idx_images(1, &[0; IMAGE_PIXELS]);
        assert!(matches!(
            parse_idx_images(Path::new("i"), &img[..100]),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn label_range_checked() {
        let bytes = encode_idx_labels(&[1, 10]);
        assert!(matches!(
            parse_idx_labels(Path::new("l"), &bytes),
            Err(DataError::LabelOutOfRange { index: 1, label: 10, .. })
        ));
    }

    #[test]
    fn mixed_is_a_tagged_permutation() {
        let d = tiny(7, SourceTag::Digits, 0);
        let f = tiny(5, SourceTag::Fashion, 3);
        let m = build_mixed(&d, &f, 42);
        assert_eq!(m.len(), 12);
        assert_eq!(m.count(Distribution::In), 7);
        assert_eq!(m.count(Distribution::Out), 5);
        let seen: HashSet<(Distribution, usize)> = m.tags.iter().copied().zip(m.origin.iter().copied()).collect();
        assert_eq!(seen.len(), 12);
        for i in 0..m.len() {
            let src = if m.tags[i] == Distribution::In { &d } else { &f };
            assert_eq!(m.images.row(i), src.images.row(m.origin[i]));
            assert_eq!(m.labels[i], src.labels[m.origin[i]]);
        }
        let again = build_mixed(&d, &f, 42);
        assert_eq!(again.origin, m.origin);
        assert_eq!(again.tags, m.tags);
    }

    #[test]
    fn batch_sizes_and_partition() {
        let b = batches(10, 4, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(batches(50, 50, 1, 0), batches(50, 50, 1, 1));
        assert_eq!(batches(50, 7, 9, 3), batches(50, 7, 9, 3));
    }
}
