//! Training-data ingestion: IDX image/label files (the MNIST container
//! format) and a deterministic synthetic generator for fast tests.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::distributions::{Distribution, Uniform};
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { path: String, expected: u32, got: u32 },
    #[error("{path} truncated: expected {expected} data bytes, got {got}")]
    Truncated { path: String, expected: usize, got: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("invalid batch size {batch_size} for {n} samples")]
    BadBatchSize { n: usize, batch_size: usize },
    #[error("cannot build {classes} classes from {n} samples")]
    TooFewSamples { n: usize, classes: usize },
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory dataset: features normalized to `[0, 1]`, labels one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: Matrix<T>,
    pub labels: Matrix<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_width(&self) -> usize {
        self.samples.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.cols()
    }

    /// Splits off the first `n` rows; the remainder becomes the second set.
    pub fn split_at(&self, n: usize) -> (Dataset<T>, Dataset<T>) {
        assert!(n <= self.len(), "split point past the end");
        let head: Vec<u32> = (0..n as u32).collect();
        let tail: Vec<u32> = (n as u32..self.len() as u32).collect();
        (
            Dataset {
                samples: self.samples.select_rows(&head),
                labels: self.labels.select_rows(&head),
            },
            Dataset {
                samples: self.samples.select_rows(&tail),
                labels: self.labels.select_rows(&tail),
            },
        )
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
            expected: offset + 4,
            got: bytes.len(),
        })
}

/// Loads an IDX image/label file pair: pixels scaled by 1/255, labels one-hot
/// over ten classes (the MNIST convention).
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>, DataError> {
    load_idx_with_classes(images_path, labels_path, 10)
}

pub fn load_idx_with_classes<T: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    classes: usize,
) -> Result<Dataset<T>, DataError> {
    let image_bytes = read_file(images_path)?;
    let magic = read_u32_be(&image_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = read_u32_be(&image_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&image_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&image_bytes, 12, images_path)? as usize;
    let pixel_count = n * rows * cols;
    let pixels = image_bytes.get(16..16 + pixel_count).ok_or(DataError::Truncated {
        path: images_path.display().to_string(),
        expected: 16 + pixel_count,
        got: image_bytes.len(),
    })?;

    let label_bytes = read_file(labels_path)?;
    let magic = read_u32_be(&label_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let label_count = read_u32_be(&label_bytes, 4, labels_path)? as usize;
    if label_count != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: label_count,
        });
    }
    let raw_labels = label_bytes.get(8..8 + n).ok_or(DataError::Truncated {
        path: labels_path.display().to_string(),
        expected: 8 + n,
        got: label_bytes.len(),
    })?;

    let scale = T::from_f64(1.0 / 255.0);
    let samples = Matrix::from_vec(
        n,
        rows * cols,
        pixels.iter().map(|&p| T::from_f64(f64::from(p)) * scale).collect(),
    );
    let mut labels = Matrix::zeros(n, classes);
    for (i, &label) in raw_labels.iter().enumerate() {
        if usize::from(label) >= classes {
            return Err(DataError::LabelOutOfRange { label, classes });
        }
        labels.set(i, usize::from(label), T::one());
    }
    Ok(Dataset { samples, labels })
}

/// Writes an IDX image file (u8 pixels) and a matching label file; the exact
/// inverse of [`load_idx`] modulo the 1/255 scaling.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    n: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<(), DataError> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel buffer size");
    assert_eq!(labels.len(), n, "label buffer size");
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| DataError::Io { path, source }
    };

    let mut f = std::fs::File::create(images_path).map_err(io_err(images_path))?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())
        .and_then(|_| f.write_all(&(n as u32).to_be_bytes()))
        .and_then(|_| f.write_all(&(rows as u32).to_be_bytes()))
        .and_then(|_| f.write_all(&(cols as u32).to_be_bytes()))
        .and_then(|_| f.write_all(pixels))
        .map_err(io_err(images_path))?;

    let mut f = std::fs::File::create(labels_path).map_err(io_err(labels_path))?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())
        .and_then(|_| f.write_all(&(n as u32).to_be_bytes()))
        .and_then(|_| f.write_all(labels))
        .map_err(io_err(labels_path))?;
    Ok(())
}

const BLOB_SPREAD: f64 = 0.05;

/// Gaussian clusters, one per class, spaced so a linear classifier separates
/// them at the default spread. Fully deterministic under the seed.
pub fn synthetic_blobs<T: Scalar>(
    n: usize,
    classes: usize,
    feature_width: usize,
    seed: u64,
) -> Result<Dataset<T>, DataError> {
    if classes > n {
        return Err(DataError::TooFewSamples { n, classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    // Cluster centers: coordinates drawn uniformly over most of the unit
    // interval, so classes differ strongly in every feature.
    let center_dist = Uniform::new(0.15, 0.85);
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let center: Vec<f64> = (0..feature_width)
            .map(|_| center_dist.sample(&mut rng))
            .collect();
        centers.push(center);
    }

    let mut samples = Matrix::zeros(n, feature_width);
    let mut labels = Matrix::zeros(n, classes);
    for i in 0..n {
        let class = i % classes;
        let center = &centers[class];
        for (j, &c) in center.iter().enumerate() {
            let noise: f64 = normal.sample(&mut rng);
            let v = (c + BLOB_SPREAD * noise).clamp(0.0, 1.0);
            samples.set(i, j, T::from_f64(v));
        }
        labels.set(i, class, T::one());
    }
    Ok(Dataset { samples, labels })
}

/// Ordered index slices covering `[0, n)`: every slice but the last holds
/// exactly `batch_size` indices, the last holds the remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub slices: Vec<Vec<u32>>,
}

impl BatchPlan {
    pub fn iterations(&self) -> usize {
        self.slices.len()
    }
}

pub fn plan_batches(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchPlan, DataError> {
    if batch_size == 0 || batch_size > n {
        return Err(DataError::BadBatchSize { n, batch_size });
    }
    let mut indices: Vec<u32> = (0..n as u32).collect();
    if let Some(seed) = shuffle_seed {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
    }
    let slices = indices.chunks(batch_size).map(<[u32]>::to_vec).collect();
    Ok(BatchPlan { batch_size, slices })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_fixture_roundtrips_bit_exactly() {
        // Two 2x2 "images" built byte by byte.
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");
        let pixels = [0u8, 51, 102, 255, 10, 20, 30, 40];
        write_idx(&images, &labels, 2, 2, 2, &pixels, &[3, 7]).unwrap();

        let raw = std::fs::read(&images).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        assert_eq!(&raw[4..8], &[0, 0, 0, 2]);
        assert_eq!(&raw[16..], &pixels);

        let ds: Dataset<f64> = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_width(), 4);
        assert_eq!(ds.samples.get(0, 1), 51.0 / 255.0);
        assert_eq!(ds.samples.get(1, 3), 40.0 / 255.0);
        assert_eq!(ds.labels.get(0, 3), 1.0);
        assert_eq!(ds.labels.get(1, 7), 1.0);
        assert_eq!(ds.labels.row(0).iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn idx_loader_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");
        write_idx(&images, &labels, 1, 2, 2, &[1, 2, 3, 4], &[0]).unwrap();

        // Swapped paths hit the magic check.
        assert!(matches!(
            load_idx::<f32>(&labels, &images),
            Err(DataError::BadMagic { .. })
        ));

        // Truncated pixel data.
        let mut bytes = std::fs::read(&images).unwrap();
        bytes.truncate(18);
        std::fs::write(&images, &bytes).unwrap();
        assert!(matches!(
            load_idx::<f32>(&images, &labels),
            Err(DataError::Truncated { .. })
        ));

        // Count mismatch between the two files.
        let images2 = dir.path().join("images2.idx");
        let labels2 = dir.path().join("labels2.idx");
        write_idx(&images2, &labels2, 2, 1, 2, &[1, 2, 3, 4], &[0, 1]).unwrap();
        let labels1 = dir.path().join("labels1.idx");
        write_idx(&dir.path().join("im.idx"), &labels1, 1, 1, 2, &[1, 2], &[0]).unwrap();
        assert!(matches!(
            load_idx::<f32>(&images2, &labels1),
            Err(DataError::CountMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_blobs_deterministic_and_bounded() {
        let a: Dataset<f32> = synthetic_blobs(60, 3, 8, 42).unwrap();
        let b: Dataset<f32> = synthetic_blobs(60, 3, 8, 42).unwrap();
        assert_eq!(a, b);
        let c: Dataset<f32> = synthetic_blobs(60, 3, 8, 43).unwrap();
        assert_ne!(a, c);
        assert!(a.samples.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.classes(), 3);
        for i in 0..a.len() {
            assert_eq!(a.labels.row(i).iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn synthetic_blobs_edge_cases() {
        let single: Dataset<f64> = synthetic_blobs(1, 1, 4, 0).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.labels.get(0, 0), 1.0);
        assert!(matches!(
            synthetic_blobs::<f64>(2, 3, 4, 0),
            Err(DataError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn batch_plan_matches_mnist_iteration_count() {
        // 60000 samples at batch 512: 118 slices, the last holding 96.
        let plan = plan_batches(60_000, 512, None).unwrap();
        assert_eq!(plan.iterations(), 118);
        assert_eq!(plan.slices.last().unwrap().len(), 96);
        assert!(plan.slices[..117].iter().all(|s| s.len() == 512));
    }

    #[test]
    fn batch_plan_basic_shapes() {
        let plan = plan_batches(10, 10, None).unwrap();
        assert_eq!(plan.iterations(), 1);
        // No shuffle: contiguous ascending indices.
        assert_eq!(plan.slices[0], (0..10).collect::<Vec<u32>>());

        assert!(plan_batches(10, 0, None).is_err());
        assert!(plan_batches(10, 11, None).is_err());

        let shuffled = plan_batches(100, 32, Some(5)).unwrap();
        assert_eq!(shuffled, plan_batches(100, 32, Some(5)).unwrap());
        assert_ne!(shuffled.slices[0], (0..32).collect::<Vec<u32>>());
        let mut all: Vec<u32> = shuffled.slices.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<u32>>());
    }
}
