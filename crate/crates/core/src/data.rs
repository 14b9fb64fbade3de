//! Dataset ingestion: MNIST IDX files and the CIFAR-10 binary format.

use std::path::{Path, PathBuf};

use autodiff::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable overriding the MNIST directory.
pub const MNIST_DIR_ENV: &str = "SPLINENET_MNIST_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Images `[n, h, w, c]` in `[0, 1]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Contract(format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self { images, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[h, w, c]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch::<f32>(&idx);
        Self { images, labels, classes: self.classes, split: self.split }
    }

    /// Gathers the samples at `indices` into a batch.
    pub fn batch<T: Float>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(src[i * per..][..per].iter().map(|&v| T::cst(v as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let images = Tensor::new(shape, data).expect("batch shape matches its data");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn ingest(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Ingest { path: path.to_path_buf(), offset, detail: detail.into() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ingest(path, 0, format!("cannot read: {e}")))
}

/// Parses an IDX header of unsigned bytes with `ndim` dimensions; returns the
/// dimensions and the payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], ndim: u8) -> Result<(Vec<usize>, &'a [u8])> {
    let header = 4 + 4 * ndim as usize;
    if bytes.len() < 4 {
        return Err(ingest(path, bytes.len() as u64, "truncated magic number"));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    let want = 0x0800 | ndim as u32;
    if magic != want {
        return Err(ingest(path, 0, format!("bad magic 0x{magic:08x}, expected 0x{want:08x}")));
    }
    if bytes.len() < header {
        return Err(ingest(path, bytes.len() as u64, "truncated header"));
    }
    let dims: Vec<usize> = bytes[4..header].chunks_exact(4).map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize).collect();
    let len: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < len {
        return Err(ingest(path, bytes.len() as u64, format!("truncated payload: {} of {len} bytes", payload.len())));
    }
    if payload.len() > len {
        return Err(ingest(path, (header + len) as u64, format!("{} trailing bytes", payload.len() - len)));
    }
    Ok((dims, payload))
}

/// Loads an IDX image file (`0x00000803`) and label file (`0x00000801`).
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = read(images)?;
    let lbl_bytes = read(labels)?;
    let (dims, pixels) = parse_idx(images, &img_bytes, 3)?;
    let (ldims, lbls) = parse_idx(labels, &lbl_bytes, 1)?;
    if dims[0] != ldims[0] {
        return Err(ingest(labels, 4, format!("{} labels for {} images", ldims[0], dims[0])));
    }
    if let Some(i) = lbls.iter().position(|&l| l > 9) {
        return Err(ingest(labels, 8 + i as u64, format!("label {} outside [0, 10)", lbls[i])));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(vec![dims[0], dims[1], dims[2], 1], data)?;
    Dataset::new(images, lbls.iter().map(|&l| l as usize).collect(), 10, split)
}

/// MNIST directory: `$SPLINENET_MNIST_DIR`, else `data/mnist` under the
/// workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os(MNIST_DIR_ENV) {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Loads one split from a directory holding the four canonical files.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    if !images.exists() || !labels.exists() {
        return Err(ingest(
            &images,
            0,
            format!("MNIST files not found in {}; set {MNIST_DIR_ENV} or see the README", dir.display()),
        ));
    }
    load_mnist_idx(&images, &labels, split)
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Loads CIFAR-10 binary batches: records of one label byte followed by
/// 32x32 planes of red, green and blue. Images come out channels-last.
pub fn load_cifar10_bin(files: &[PathBuf], split: Split) -> Result<Dataset> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return Err(ingest(path, whole as u64, format!("{} bytes is not a whole number of records", bytes.len())));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(ingest(path, (r * CIFAR_RECORD) as u64, format!("label {} outside [0, 10)", rec[0])));
            }
            labels.push(rec[0] as usize);
            let px = &rec[1..];
            for i in 0..plane {
                data.extend((0..3).map(|c| px[c * plane + i] as f32 / 255.0));
            }
        }
    }
    let images = Tensor::new(vec![labels.len(), CIFAR_SIDE, CIFAR_SIDE, 3], data)?;
    Dataset::new(images, labels, 10, split)
}
