//! Datasets: synthetic ellipse-vs-rectangle images, IDX files and the
//! train/val/test split manifest.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::io::hex_digest;
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const SYNTH_SIDE: usize = 28;
const SYNTH_STREAM: u64 = 0xda7a;
const SPLIT_STREAM: u64 = 0x5b17;
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

pub const IMAGES_FILE: &str = "images.idx";
pub const LABELS_FILE: &str = "labels.idx";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(C, H, W)` images with values in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn input_shape(&self) -> Result<[usize; 3]> {
        let first = self.images.first().ok_or(Error::EmptyInput)?;
        first
            .shape()
            .try_into()
            .map_err(|_| Error::Validation(format!("image shape {:?} is not (C, H, W)", first.shape())))
    }

    /// Images and labels at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<(Vec<Tensor>, Vec<usize>)> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::SplitViolation(format!("index {i} outside dataset of {}", self.len())));
            }
            images.push(self.images[i].clone());
            labels.push(self.labels[i]);
        }
        Ok((images, labels))
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One 28x28 image: class 0 is an ellipse, class 1 a rectangle, each randomly
/// placed, scaled and rotated, with additive Gaussian noise.
fn synth_image(seed: u64, index: usize, label: usize) -> Tensor {
    let mut rng = rng_for(seed, &[SYNTH_STREAM, index as u64]);
    let side = SYNTH_SIDE as f64;
    let cy = rng.random_range(11.0..side - 11.0);
    let cx = rng.random_range(11.0..side - 11.0);
    let a = rng.random_range(6.0..10.0);
    let b = rng.random_range(4.0..8.0);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let intensity = rng.random_range(0.6..1.0);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let (s, c) = theta.sin_cos();
    Tensor::from_fn(&[1, SYNTH_SIDE, SYNTH_SIDE], |i| {
        let (y, x) = ((i / SYNTH_SIDE) as f64 + 0.5 - cy, (i % SYNTH_SIDE) as f64 + 0.5 - cx);
        let (u, v) = (c * x + s * y, -s * x + c * y);
        let inside = if label == 0 {
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        } else {
            u.abs() <= a && v.abs() <= b
        };
        let base = if inside { intensity } else { 0.0 };
        quantize(base + noise.sample(&mut rng))
    })
}

/// `n` balanced images (labels alternate 0, 1, ...). Pixels are multiples of
/// 1/255 so they survive an IDX round trip exactly.
pub fn gen_synthetic(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let images = (0..n).into_par_iter().map(|i| synth_image(seed, i, labels[i])).collect();
    Dataset::new(images, labels, 2)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file (`0x00000803`) into `(1, rows, cols)` tensors
/// scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    if rows == 0 || cols == 0 {
        return Err(Error::Format("IDX images have a zero dimension".into()));
    }
    let plane = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * plane {
        return Err(Error::Format(format!(
            "IDX image payload is {} bytes, header implies {}",
            body.len(),
            n * plane
        )));
    }
    Ok(body
        .chunks_exact(plane)
        .map(|px| Tensor::from_fn(&[1, rows, cols], |i| px[i] as f64 / 255.0))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "IDX label payload is {} bytes, header implies {n}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(images, labels, num_classes)
}

/// Serializes single-channel images as IDX bytes. Pixels are rounded to the
/// nearest multiple of 1/255.
pub fn idx_images_bytes(images: &[Tensor]) -> Result<Vec<u8>> {
    let first = images.first().ok_or(Error::EmptyInput)?;
    let (rows, cols) = match first.shape() {
        [1, h, w] => (*h, *w),
        other => return Err(Error::Validation(format!("IDX needs (1, H, W) images, got {other:?}"))),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        img.check_same_shape(first)?;
        out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn idx_labels_bytes(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::Validation(format!("label {l} does not fit a byte")))?;
        out.push(b);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Disjoint, covering index sets over a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub n: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    /// Seeded shuffle of `0..n` cut into train/val/test by the given
    /// fractions (test takes the remainder).
    pub fn new(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<Self> {
        if !(train_frac >= 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
            return Err(Error::InvalidConfig("split fractions must be >= 0 and sum to <= 1".into()));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(seed, &[SPLIT_STREAM]));
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
        let mut m = SplitManifest {
            n,
            test: idx.split_off(n_train + n_val),
            val: idx.split_off(n_train),
            train: idx,
        };
        m.train.sort_unstable();
        m.val.sort_unstable();
        m.test.sort_unstable();
        Ok(m)
    }

    /// 60/20/20 split.
    pub fn default_for(n: usize, seed: u64) -> Self {
        SplitManifest::new(n, 0.6, 0.2, seed).expect("valid fractions")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n];
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in part {
                if i >= self.n {
                    return Err(Error::SplitViolation(format!("{name} index {i} >= {}", self.n)));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::SplitViolation(format!("index {i} appears twice ({name})")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::SplitViolation(format!("index {i} belongs to no split")));
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: SplitManifest = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Format(format!("split manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }
}

/// Writes `images.idx`, `labels.idx` and `split.json` into `dir`.
pub fn save_dataset_dir(data: &Dataset, split: &SplitManifest, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(IMAGES_FILE), idx_images_bytes(&data.images)?)?;
    fs::write(dir.join(LABELS_FILE), idx_labels_bytes(&data.labels)?)?;
    split.save(dir.join(SPLIT_FILE))
}

/// Reads a dataset directory. A missing `split.json` falls back to the
/// default split seeded with `seed`.
pub fn load_dataset_dir(dir: impl AsRef<Path>, seed: u64) -> Result<(Dataset, SplitManifest)> {
    let dir = dir.as_ref();
    let data = load_idx(dir.join(IMAGES_FILE), dir.join(LABELS_FILE))?;
    let split_path = dir.join(SPLIT_FILE);
    let split = if split_path.exists() {
        SplitManifest::load(split_path)?
    } else {
        SplitManifest::default_for(data.len(), seed)
    };
    if split.n != data.len() {
        return Err(Error::SplitViolation(format!(
            "manifest covers {} images, dataset has {}",
            split.n,
            data.len()
        )));
    }
    Ok((data, split))
}
