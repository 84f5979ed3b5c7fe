//! IDX and CIFAR-10 binary loaders, synthetic data and fixture writers.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_UBYTE: u8 = 0x08;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: &str) -> Result<Self> {
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if labels.len() != n {
            return Err(Error::Dataset(format!("{} labels for {} images", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { images, labels, num_classes, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (`C × H × W` or feature count).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Views every sample with a new shape of the same size.
    pub fn reshape_samples(self, shape: &[usize]) -> Result<Dataset> {
        let per: usize = self.sample_shape().iter().product();
        if shape.iter().product::<usize>() != per {
            return Err(Error::Dataset(format!(
                "cannot view samples of shape {:?} as {:?}",
                self.sample_shape(),
                shape
            )));
        }
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(Dataset { images: self.images.reshape(&full)?, ..self })
    }

    /// Samples at the given indices, in that order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gather shape"), labels)
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize, split: &str) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Dataset { images, labels, num_classes: self.num_classes, split: split.into() }
    }

    /// Splits off the last `fraction` of the samples as a held-out set.
    pub fn split_off(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        let held = ((self.len() as f64) * fraction).round() as usize;
        if held == 0 || held >= self.len() {
            return Err(Error::Dataset(format!("split fraction {fraction} leaves an empty side")));
        }
        let cut = self.len() - held;
        let a: Vec<usize> = (0..cut).collect();
        let b: Vec<usize> = (cut..self.len()).collect();
        let (ia, la) = self.gather(&a);
        let (ib, lb) = self.gather(&b);
        Ok((Dataset::new(ia, la, self.num_classes, "train")?, Dataset::new(ib, lb, self.num_classes, "val")?))
    }

    /// Index batches of one shuffled epoch.
    pub fn epoch_batches<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Dataset(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX buffer into its dims and payload.
pub fn parse_idx<'a>(bytes: &'a [u8], what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset(format!("{what}: bad IDX magic")));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::Dataset(format!("{what}: unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if ndims == 0 || bytes.len() < header {
        return Err(Error::Dataset(format!("{what}: truncated IDX header")));
    }
    let dims: Vec<usize> =
        bytes[4..header].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(Error::Dataset(format!(
            "{what}: truncated, expected {count} bytes of data, found {}",
            payload.len()
        )));
    }
    Ok((dims, &payload[..count]))
}

fn scale(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

/// Loads an IDX image/label pair (optionally gzipped). Images come out as
/// `N × 1 × H × W` scaled to `[0, 1]`.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images)?;
    let lab_bytes = read_maybe_gz(labels)?;
    let (dims, pixels) = parse_idx(&img_bytes, "images")?;
    let (ldims, lab) = parse_idx(&lab_bytes, "labels")?;
    if ldims.len() != 1 {
        return Err(Error::Dataset(format!("labels: expected 1 dim, found {}", ldims.len())));
    }
    let shape = match dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        other => {
            return Err(Error::Dataset(format!("images: unsupported IDX dims {other:?}")));
        }
    };
    if ldims[0] != shape[0] {
        return Err(Error::Dataset(format!("label count {} does not match image count {}", ldims[0], shape[0])));
    }
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    Dataset::new(Tensor::new(shape, scale(pixels))?, labels, classes, "train")
}

/// Loads CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record).
pub fn load_cifar10(paths: &[&Path]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{}: truncated CIFAR-10 file ({} bytes is not a multiple of {CIFAR_RECORD})",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(Error::Dataset(format!("{}: label {} >= 10", path.display(), rec[0])));
            }
            labels.push(rec[0] as usize);
            pixels.extend(scale(&rec[1..]));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, "train")
}

/// Loads `<dir>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        for cand in [format!("{stem}.gz"), stem.to_string()] {
            let p = dir.join(cand);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Dataset(format!("{} has no {stem}", dir.display())))
    };
    let mut train = load_idx_dataset(&find("train-images-idx3-ubyte")?, &find("train-labels-idx1-ubyte")?)?;
    let mut test = load_idx_dataset(&find("t10k-images-idx3-ubyte")?, &find("t10k-labels-idx1-ubyte")?)?;
    train.split = "train".into();
    test.split = "test".into();
    Ok((train, test))
}

/// Serializes an unsigned-byte IDX file.
pub fn encode_idx(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Deterministic pixel bytes of fixture image `i`.
pub fn fixture_pixels(i: usize, h: usize, w: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..h * w).map(|_| rng.gen()).collect()
}

/// Writes an `n`-image 28×28 IDX fixture pair and returns the paths.
pub fn write_idx_fixture(dir: &Path, n: usize, seed: u64) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let mut pixels = Vec::with_capacity(n * 784);
    for i in 0..n {
        pixels.extend(fixture_pixels(i, 28, 28, seed));
    }
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let ip = dir.join("images-idx3-ubyte");
    let lp = dir.join("labels-idx1-ubyte");
    std::fs::File::create(&ip)?.write_all(&encode_idx(&[n, 28, 28], &pixels))?;
    std::fs::File::create(&lp)?.write_all(&encode_idx(&[n], &labels))?;
    Ok((ip, lp))
}

/// Gaussian blobs in `dims` dimensions, one per class, means drawn in
/// `[-1, 1]` and per-coordinate noise `spread`.
pub fn synthetic_blobs(n: usize, dims: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    use rand_distr::{Distribution, Normal};
    if n == 0 || dims == 0 || classes < 2 {
        return Err(Error::InvalidArgument("blobs need n, dims >= 1 and >= 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let noise = Normal::new(0.0, spread).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        data.extend(centers[c].iter().map(|&m| (m + noise.sample(&mut rng)) as f32));
    }
    Dataset::new(Tensor::new(vec![n, dims], data)?, labels, classes, "synthetic")
}

/// Random images with class-dependent intensity templates, for shape-only
/// experiments on conv models.
pub fn synthetic_images(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || classes < 2 {
        return Err(Error::InvalidArgument("need n >= 1 and >= 2 classes".into()));
    }
    let per: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f32>> = (0..classes).map(|_| (0..per).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        data.extend(templates[c].iter().map(|&t| (0.7 * t + 0.3 * rng.gen_range(0.0f32..1.0)).clamp(0.0, 1.0)));
    }
    Dataset::new(Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?, labels, classes, "synthetic")
}
