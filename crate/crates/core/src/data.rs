//! MNIST IDX ingestion and synthetic datasets.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Features in `[0, 1]` with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("feature values must lie in [0, 1]".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    /// First `n` samples (or all of them when `n` is larger).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            features: self.features.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Flattened images scaled by 1/255.
    pub fn from_idx(images: &Array3<u8>, labels: &[u8], classes: usize) -> Result<Self> {
        let (n, rows, cols) = images.dim();
        let features = images
            .mapv(|p| p as f64 / 255.0)
            .into_shape_with_order((n, rows * cols))
            .expect("contiguous");
        Self::new(features, labels.iter().map(|&l| l as usize).collect(), classes)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Length {
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Format(format!("IDX magic {magic:#010x}, expected {expected:#010x}")));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, counts: &[u32]) -> Result<&'a [u8]> {
    let len = counts
        .iter()
        .try_fold(1usize, |acc, &c| acc.checked_mul(c as usize))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let expected = header
        .checked_add(len)
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[header..])
}

/// Parses an IDX3 unsigned-byte image file into `(N, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array3<u8>> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let dims = [read_u32(bytes, 4)?, read_u32(bytes, 8)?, read_u32(bytes, 12)?];
    let data = payload(bytes, 16, &dims)?;
    let shape = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    Ok(Array3::from_shape_vec(shape, data.to_vec()).expect("length checked"))
}

/// Parses an IDX1 unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)?;
    Ok(payload(bytes, 8, &[n])?.to_vec())
}

pub fn encode_idx_images(images: &Array3<u8>) -> Vec<u8> {
    let (n, r, c) = images.dim();
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, r as u32, c as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.iter());
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn load_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let img = parse_idx_images(&std::fs::read(dir.join(images))?)?;
    let lab = parse_idx_labels(&std::fs::read(dir.join(labels))?)?;
    if img.len_of(Axis(0)) != lab.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels in {}",
            img.len_of(Axis(0)),
            lab.len(),
            dir.display()
        )));
    }
    Dataset::from_idx(&img, &lab, 10)
}

/// Loads the standard MNIST file pair for the train or test split from `dir`.
pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    if train {
        load_split(dir, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS)
    } else {
        load_split(dir, MNIST_TEST_IMAGES, MNIST_TEST_LABELS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Two classes split by a random hyperplane, with a margin.
    LinearSeparable,
    /// Labels are the argmax of a random linear teacher.
    RandomLinearTeacher { classes: usize },
}

const SEPARABLE_MARGIN: f64 = 0.05;

/// Deterministic synthetic dataset with features uniform in `[0, 1]`.
pub fn make_synthetic(kind: SyntheticKind, n: usize, dims: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || dims == 0 {
        return Err(Error::InvalidArgument("synthetic datasets need n >= 1 and dims >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::zeros((n, dims));
    let mut labels = Vec::with_capacity(n);
    match kind {
        SyntheticKind::LinearSeparable => {
            let w: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for mut row in features.rows_mut() {
                loop {
                    row.mapv_inplace(|_| rng.random_range(0.0..=1.0));
                    let side: f64 = row.iter().zip(&w).map(|(x, w)| (x - 0.5) * w).sum::<f64>() / norm;
                    if side.abs() >= SEPARABLE_MARGIN {
                        labels.push(usize::from(side > 0.0));
                        break;
                    }
                }
            }
            Dataset::new(features, labels, 2)
        }
        SyntheticKind::RandomLinearTeacher { classes } => {
            if classes == 0 {
                return Err(Error::InvalidArgument("teacher needs at least one class".into()));
            }
            let teacher = Array2::from_shape_fn((dims, classes), |_| rng.random_range(-1.0..1.0));
            features.mapv_inplace(|_| rng.random_range(0.0..=1.0));
            let scores = (&features - 0.5).dot(&teacher);
            labels.extend(scores.rows().into_iter().map(|r| crate::nn::argmax(r.iter())));
            Dataset::new(features, labels, classes)
        }
    }
}
