//! Dataset ingestion, normalization and deterministic batching.
//!
//! Real datasets are read from `<root>/<name>/` in their upstream formats
//! (idx for MNIST/EMNIST, binary batches for CIFAR-10, png class folders for
//! CINIC-10). Two procedural generators are available for machines without
//! the archives: `synthetic` (class-conditional Gaussian blobs, cheap test
//! fixture) and `glyphs` (rendered digit shapes under random affine jitter,
//! an MNIST-like surrogate that is hard enough for capacity ablations).

use crate::error::{Result, UkieError};
use crate::rng::{next_gaussian, shuffle, stream};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One source datum: image in `[0,1]` plus its class label.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub x: Array3<f64>,
    pub y: usize,
}

/// An immutable, normalized dataset. Samples are stored in one contiguous
/// (n, c, h, w) block; iteration order is fixed at load time.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(UkieError::Shape(format!(
                "dataset has {} images but {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(UkieError::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    pub fn view(&self, i: usize) -> (ArrayView3<'_, f64>, usize) {
        (self.images.index_axis(Axis(0), i), self.labels[i])
    }

    pub fn sample(&self, i: usize) -> LabeledSample {
        LabeledSample { x: self.images.index_axis(Axis(0), i).to_owned(), y: self.labels[i] }
    }

    /// Clamps every pixel into `[0,1]`. Loaders already emit normalized data,
    /// so applying this twice is a no-op.
    pub fn normalize(&mut self) {
        self.images.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// First `n` samples (dataset order), used for desk-scale budgets.
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            images: self.images.slice(ndarray::s![..n, .., .., ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Materialized mini-batch for the given sample indices.
    pub fn gather(&self, idxs: &[usize]) -> Batch {
        let (c, h, w) = self.shape();
        let mut images = Array4::<f64>::zeros((idxs.len(), c, h, w));
        let mut labels = Vec::with_capacity(idxs.len());
        for (row, &i) in idxs.iter().enumerate() {
            images.index_axis_mut(Axis(0), row).assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        Batch { images, labels }
    }
}

/// A materialized mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Generator settings for the procedural datasets.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub num_classes: usize,
    pub shape: (usize, usize, usize),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { n: 1024, num_classes: 10, shape: (1, 32, 32) }
    }
}

/// Loads a named dataset split. `synth` supplies the generator settings for
/// the procedural names and is ignored for on-disk datasets.
pub fn load_dataset(
    name: &str,
    split: Split,
    root: &Path,
    synth: Option<&SyntheticConfig>,
) -> Result<LabeledDataset> {
    let seed_base = match split {
        Split::Train => 0x5eed_0001,
        Split::Test => 0x5eed_0002,
    };
    match name {
        "mnist" => load_idx_pair(&root.join("mnist"), split, "", 10),
        "emnist" => load_idx_pair(&root.join("emnist"), split, "emnist-digits-", 10),
        "cifar10" => load_cifar10(&root.join("cifar10"), split),
        "cinic10" => load_cinic10(&root.join("cinic10"), split),
        "synthetic" => {
            let cfg = synth.cloned().unwrap_or_default();
            make_synthetic(cfg.n, cfg.num_classes, cfg.shape, seed_base)
        }
        "glyphs" => {
            let cfg = synth.cloned().unwrap_or_default();
            make_glyphs(cfg.n, cfg.shape, seed_base)
        }
        other => Err(UkieError::Config(format!(
            "unknown dataset '{other}' (expected mnist|emnist|cifar10|cinic10|synthetic|glyphs)"
        ))),
    }
}

/// Shuffled index batches; the last short batch is dropped. The partition is
/// a pure function of `(dataset length, batch_size, seed)`.
pub fn make_batches(ds: &LabeledDataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size > ds.len() {
        return Err(UkieError::Config(format!(
            "batch_size {batch_size} exceeds dataset size {}",
            ds.len()
        )));
    }
    if batch_size < 2 * ds.num_classes {
        return Err(UkieError::Config(format!(
            "batch_size {batch_size} < 2*num_classes = {}; per-class statistics would be starved",
            2 * ds.num_classes
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    shuffle(&mut stream(seed, "batches", 0), &mut order);
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

// ---------------------------------------------------------------------------
// procedural generators
// ---------------------------------------------------------------------------

/// Class-conditional Gaussian blobs: each class owns a blob center and width;
/// samples jitter the center, amplitude and width, plus pixel noise.
pub fn make_synthetic(
    n: usize,
    num_classes: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<LabeledDataset> {
    if n < num_classes {
        return Err(UkieError::Config(format!(
            "synthetic dataset needs n >= num_classes (got n={n}, C={num_classes})"
        )));
    }
    let (c, h, w) = shape;
    let mut class_rng = stream(seed, "synthetic-classes", 0);
    // per-class blob layout
    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let cy = class_rng.gen_range(0.25..0.75) * h as f64;
        let cx = class_rng.gen_range(0.25..0.75) * w as f64;
        let sigma = class_rng.gen_range(0.08..0.16) * h as f64;
        centers.push((cy, cx, sigma));
    }
    let mut images = Array4::<f64>::zeros((n, c, h, w));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        labels.push(y);
        let mut rng = stream(seed, "synthetic-sample", i as u64);
        let (cy0, cx0, s0) = centers[y];
        let cy = cy0 + next_gaussian(&mut rng) * 0.06 * h as f64;
        let cx = cx0 + next_gaussian(&mut rng) * 0.06 * w as f64;
        let sigma = (s0 * rng.gen_range(0.85..1.15)).max(0.5);
        let amp = rng.gen_range(0.6..1.0);
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let d2 = (r as f64 - cy).powi(2) + (col as f64 - cx).powi(2);
                    let v = amp * (-d2 / (2.0 * sigma * sigma)).exp()
                        + 0.02 * next_gaussian(&mut rng);
                    images[[i, ch, r, col]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    LabeledDataset::new(images, labels, num_classes)
}

const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

fn glyph_at(digit: usize, gy: f64, gx: f64) -> f64 {
    // bilinear sample of the 5x7 bitmap, zero outside
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = gx - x0;
    let fy = gy - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let yy = y0 as i64 + dy;
            let xx = x0 as i64 + dx;
            if (0..7).contains(&yy) && (0..5).contains(&xx) {
                let bit = (GLYPHS[digit][yy as usize] >> (4 - xx as usize)) & 1;
                acc += wy * wx * bit as f64;
            }
        }
    }
    acc
}

/// Digit-glyph surrogate: ten fixed 5x7 digit shapes rendered at random
/// scale, rotation, shift and intensity with pixel noise. Stands in for
/// MNIST on machines without the archive.
pub fn make_glyphs(n: usize, shape: (usize, usize, usize), seed: u64) -> Result<LabeledDataset> {
    let num_classes = 10;
    if n < num_classes {
        return Err(UkieError::Config(format!(
            "glyphs dataset needs n >= {num_classes} (got n={n})"
        )));
    }
    let (c, h, w) = shape;
    let mut images = Array4::<f64>::zeros((n, c, h, w));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        labels.push(y);
        let mut rng = stream(seed, "glyph-sample", i as u64);
        // cells are ~2.9..4.1 output pixels at h=32
        let scale = rng.gen_range(0.09..0.13) * h as f64;
        let theta: f64 = rng.gen_range(-0.35..0.35);
        let tx = rng.gen_range(-0.09..0.09) * w as f64;
        let ty = rng.gen_range(-0.09..0.09) * h as f64;
        let intensity = rng.gen_range(0.7..1.0);
        let (sin_t, cos_t) = theta.sin_cos();
        let cyc = (h as f64 - 1.0) / 2.0;
        let cxc = (w as f64 - 1.0) / 2.0;
        for r in 0..h {
            for col in 0..w {
                let dy = r as f64 - cyc - ty;
                let dx = col as f64 - cxc - tx;
                let ux = cos_t * dx + sin_t * dy;
                let uy = -sin_t * dx + cos_t * dy;
                let gx = ux / scale + 2.0;
                let gy = uy / scale + 3.0;
                let v = intensity * glyph_at(y, gy, gx) + 0.04 * next_gaussian(&mut rng);
                let v = v.clamp(0.0, 1.0);
                for ch in 0..c {
                    images[[i, ch, r, col]] = v;
                }
            }
        }
    }
    LabeledDataset::new(images, labels, num_classes)
}

// ---------------------------------------------------------------------------
// on-disk loaders
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| UkieError::Ingestion { path: path.to_owned(), reason: e.to_string() })?
        .read_to_end(&mut buf)
        .map_err(|e| UkieError::Ingestion { path: path.to_owned(), reason: e.to_string() })?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// idx3 image file -> (n, rows, cols, pixels)
pub fn parse_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    if bytes.len() < 16 || be_u32(&bytes, 0) != 2051 {
        return Err(UkieError::Ingestion {
            path: path.to_owned(),
            reason: "not an idx3 image file (bad magic)".into(),
        });
    }
    let n = be_u32(&bytes, 4) as usize;
    let rows = be_u32(&bytes, 8) as usize;
    let cols = be_u32(&bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(UkieError::Ingestion {
            path: path.to_owned(),
            reason: format!("truncated idx3 file: {} bytes, expected {expected}", bytes.len()),
        });
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// idx1 label file -> labels
pub fn parse_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    if bytes.len() < 8 || be_u32(&bytes, 0) != 2049 {
        return Err(UkieError::Ingestion {
            path: path.to_owned(),
            reason: "not an idx1 label file (bad magic)".into(),
        });
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(UkieError::Ingestion {
            path: path.to_owned(),
            reason: "truncated idx1 file".into(),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Pads an image batch with zeros so 28x28 inputs become 32x32 (the encoder
/// topology wants spatial sizes that halve down to 8x8).
pub fn pad_to(images: Array4<f64>, target: usize) -> Array4<f64> {
    let (n, c, h, w) = images.dim();
    if h == target && w == target {
        return images;
    }
    let off_h = (target - h) / 2;
    let off_w = (target - w) / 2;
    let mut out = Array4::<f64>::zeros((n, c, target, target));
    out.slice_mut(ndarray::s![.., .., off_h..off_h + h, off_w..off_w + w])
        .assign(&images);
    out
}

/// Inverse of [`pad_to`]: crops the centered region back out.
pub fn crop_center(images: &Array4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (_, _, th, tw) = images.dim();
    let off_h = (th - h) / 2;
    let off_w = (tw - w) / 2;
    images.slice(ndarray::s![.., .., off_h..off_h + h, off_w..off_w + w]).to_owned()
}

fn load_idx_pair(dir: &Path, split: Split, prefix: &str, num_classes: usize) -> Result<LabeledDataset> {
    let (img_name, lbl_name) = match split {
        Split::Train => (
            format!("{prefix}train-images-idx3-ubyte"),
            format!("{prefix}train-labels-idx1-ubyte"),
        ),
        Split::Test => (
            format!("{prefix}t10k-images-idx3-ubyte"),
            format!("{prefix}t10k-labels-idx1-ubyte"),
        ),
    };
    let (n, rows, cols, pixels) = parse_idx_images(&dir.join(img_name))?;
    let labels_u8 = parse_idx_labels(&dir.join(lbl_name))?;
    if labels_u8.len() != n {
        return Err(UkieError::Ingestion {
            path: dir.to_owned(),
            reason: format!("{n} images but {} labels", labels_u8.len()),
        });
    }
    let mut images = Array4::<f64>::zeros((n, 1, rows, cols));
    for i in 0..n {
        for r in 0..rows {
            for c in 0..cols {
                images[[i, 0, r, c]] = pixels[i * rows * cols + r * cols + c] as f64 / 255.0;
            }
        }
    }
    let images = pad_to(images, 32);
    let labels: Vec<usize> = labels_u8.iter().map(|&b| b as usize).collect();
    LabeledDataset::new(images, labels, num_classes)
}

fn load_cifar10(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let base = dir.join("cifar-10-batches-bin");
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![base.join("test_batch.bin")],
    };
    const REC: usize = 3073;
    let mut all = Vec::new();
    for f in &files {
        let bytes = read_file(f)?;
        if bytes.len() % REC != 0 {
            return Err(UkieError::Ingestion {
                path: f.clone(),
                reason: format!("file size {} not a multiple of {REC}", bytes.len()),
            });
        }
        all.push(bytes);
    }
    let n: usize = all.iter().map(|b| b.len() / REC).sum();
    let mut images = Array4::<f64>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    let mut i = 0usize;
    for bytes in &all {
        for rec in bytes.chunks_exact(REC) {
            labels.push(rec[0] as usize);
            for ch in 0..3 {
                for r in 0..32 {
                    for c in 0..32 {
                        images[[i, ch, r, c]] = rec[1 + ch * 1024 + r * 32 + c] as f64 / 255.0;
                    }
                }
            }
            i += 1;
        }
    }
    LabeledDataset::new(images, labels, 10)
}

fn load_cinic10(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let split_dir = dir.join(match split {
        Split::Train => "train",
        Split::Test => "test",
    });
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(&split_dir)
        .map_err(|e| UkieError::Ingestion { path: split_dir.clone(), reason: e.to_string() })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(UkieError::Ingestion { path: split_dir, reason: "no class directories".into() });
    }
    let mut entries: Vec<(PathBuf, usize)> = Vec::new();
    for (label, cd) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(cd)
            .map_err(|e| UkieError::Ingestion { path: cd.clone(), reason: e.to_string() })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        entries.extend(files.into_iter().map(|f| (f, label)));
    }
    let n = entries.len();
    let mut images = Array4::<f64>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    for (i, (path, label)) in entries.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| UkieError::Ingestion { path: path.clone(), reason: e.to_string() })?
            .to_rgb8();
        if img.width() != 32 || img.height() != 32 {
            return Err(UkieError::Ingestion {
                path: path.clone(),
                reason: format!("expected 32x32 png, got {}x{}", img.width(), img.height()),
            });
        }
        for (x, y, px) in img.enumerate_pixels() {
            let (r, c) = (y as usize, x as usize);
            images[[i, 0, r, c]] = px[0] as f64 / 255.0;
            images[[i, 1, r, c]] = px[1] as f64 / 255.0;
            images[[i, 2, r, c]] = px[2] as f64 / 255.0;
        }
        labels.push(*label);
    }
    LabeledDataset::new(images, labels, class_dirs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_counts_and_balance() {
        let ds = make_synthetic(100, 10, (1, 8, 8), 0).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.num_classes, 10);
        let mut counts = vec![0usize; 10];
        for &y in &ds.labels {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
    }

    #[test]
    fn synthetic_one_per_class() {
        let ds = make_synthetic(10, 10, (1, 8, 8), 0).unwrap();
        let mut seen = vec![false; 10];
        for &y in &ds.labels {
            seen[y] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn synthetic_seed_determinism() {
        let a = make_synthetic(30, 5, (1, 8, 8), 7).unwrap();
        let b = make_synthetic(30, 5, (1, 8, 8), 7).unwrap();
        assert_eq!(a.images, b.images);
        let c = make_synthetic(30, 5, (1, 8, 8), 8).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_rejects_too_few_samples() {
        assert!(make_synthetic(5, 10, (1, 8, 8), 0).is_err());
    }

    #[test]
    fn glyphs_are_normalized_and_balanced() {
        let ds = make_glyphs(40, (1, 32, 32), 1).unwrap();
        assert!(ds.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut counts = vec![0usize; 10];
        for &y in &ds.labels {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn batching_contract() {
        let ds = make_synthetic(256, 10, (1, 8, 8), 0).unwrap();
        let batches = make_batches(&ds, 128, 7).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 128));
        let again = make_batches(&ds, 128, 7).unwrap();
        assert_eq!(batches, again);
        let other = make_batches(&ds, 128, 8).unwrap();
        assert_ne!(batches, other);
    }

    #[test]
    fn batching_drops_last() {
        let ds = make_synthetic(300, 10, (1, 8, 8), 0).unwrap();
        let batches = make_batches(&ds, 128, 7).unwrap();
        assert_eq!(batches.len(), 2);
        let used: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(300 - used, 44);
    }

    #[test]
    fn batching_errors() {
        let ds = make_synthetic(100, 10, (1, 8, 8), 0).unwrap();
        assert!(make_batches(&ds, 101, 0).is_err(), "batch larger than dataset");
        assert!(make_batches(&ds, 10, 0).is_err(), "batch below 2*num_classes");
    }

    proptest! {
        #[test]
        fn batching_is_a_partition(n in 40usize..200, bs in 20usize..40, seed in 0u64..50) {
            prop_assume!(bs <= n);
            let ds = make_synthetic(n, 10, (1, 4, 4), 0).unwrap();
            let batches = make_batches(&ds, bs, seed).unwrap();
            let mut seen = vec![0usize; n];
            for b in &batches {
                for &i in b {
                    seen[i] += 1;
                }
            }
            // retained samples appear exactly once; dropped tail not at all
            let retained = batches.len() * bs;
            prop_assert_eq!(seen.iter().filter(|&&c| c == 1).count(), retained);
            prop_assert!(seen.iter().all(|&c| c <= 1));
        }
    }

    #[test]
    fn normalization_idempotent() {
        let mut ds = make_synthetic(20, 5, (1, 8, 8), 3).unwrap();
        let before = ds.images.clone();
        ds.normalize();
        assert_eq!(ds.images, before);
        ds.normalize();
        assert_eq!(ds.images, before);
    }

    #[test]
    fn pad_crop_roundtrip_lossless() {
        let ds = make_synthetic(4, 2, (1, 28, 28), 0).unwrap();
        let padded = pad_to(ds.images.clone(), 32);
        assert_eq!(padded.dim(), (4, 1, 32, 32));
        let cropped = crop_center(&padded, 28, 28);
        assert_eq!(cropped, ds.images);
    }

    #[test]
    fn idx_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mnist = dir.path().join("mnist");
        fs::create_dir_all(&mnist).unwrap();
        // 3 images of 28x28, labels 0,1,2
        let n = 3usize;
        let mut img = Vec::new();
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..n * 28 * 28 {
            img.push((i % 251) as u8);
        }
        fs::write(mnist.join("train-images-idx3-ubyte"), &img).unwrap();
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&2049u32.to_be_bytes());
        lbl.extend_from_slice(&(n as u32).to_be_bytes());
        lbl.extend_from_slice(&[0u8, 1, 2]);
        fs::write(mnist.join("train-labels-idx1-ubyte"), &lbl).unwrap();

        let ds = load_dataset("mnist", Split::Train, dir.path(), None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.shape(), (1, 32, 32));
        assert_eq!(ds.labels, vec![0, 1, 2]);
        assert!(ds.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // padded border is zero; source pixel (0,1) = 1/255 lands at (2,3)
        assert_eq!(ds.images[[0, 0, 0, 0]], 0.0);
        assert_eq!(ds.images[[0, 0, 2, 2]], 0.0);
        assert!((ds.images[[0, 0, 2, 3]] - 1.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_bad_magic_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let mnist = dir.path().join("mnist");
        fs::create_dir_all(&mnist).unwrap();
        fs::write(mnist.join("train-images-idx3-ubyte"), [0u8; 32]).unwrap();
        fs::write(mnist.join("train-labels-idx1-ubyte"), [0u8; 16]).unwrap();
        let err = load_dataset("mnist", Split::Train, dir.path(), None).unwrap_err();
        assert!(matches!(err, UkieError::Ingestion { .. }), "{err}");
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset("mnist", Split::Train, dir.path(), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mnist"), "{msg}");
    }

    #[test]
    fn unknown_name_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset("imagenet", Split::Train, dir.path(), None).unwrap_err();
        assert!(matches!(err, UkieError::Config(_)));
    }

    #[test]
    fn cifar_fixture_shape() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("cifar10").join("cifar-10-batches-bin");
        fs::create_dir_all(&base).unwrap();
        let mut rec = vec![0u8; 3073 * 2];
        rec[0] = 3; // label of record 0
        rec[1] = 255; // its first red pixel
        rec[3073] = 7;
        fs::write(base.join("test_batch.bin"), &rec).unwrap();
        let ds = load_dataset("cifar10", Split::Test, dir.path(), None).unwrap();
        assert_eq!(ds.shape(), (3, 32, 32));
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 7]);
        assert!((ds.images[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn emnist_uses_prefixed_idx_names() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("emnist");
        fs::create_dir_all(&root).unwrap();
        let n = 2usize;
        let mut img = Vec::new();
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.resize(16 + n * 28 * 28, 128);
        fs::write(root.join("emnist-digits-t10k-images-idx3-ubyte"), &img).unwrap();
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&2049u32.to_be_bytes());
        lbl.extend_from_slice(&(n as u32).to_be_bytes());
        lbl.extend_from_slice(&[4u8, 9]);
        fs::write(root.join("emnist-digits-t10k-labels-idx1-ubyte"), &lbl).unwrap();
        let ds = load_dataset("emnist", Split::Test, dir.path(), None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![4, 9]);
        assert_eq!(ds.shape(), (1, 32, 32));
    }

    #[test]
    fn cinic_png_class_folders() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("cinic10").join("train");
        for class in ["airplane", "bird"] {
            fs::create_dir_all(base.join(class)).unwrap();
        }
        let make_png = |path: &std::path::Path, level: u8| {
            let img = image::RgbImage::from_pixel(32, 32, image::Rgb([level, 0, 255 - level]));
            img.save(path).unwrap();
        };
        make_png(&base.join("airplane").join("a1.png"), 10);
        make_png(&base.join("bird").join("b1.png"), 200);
        let ds = load_dataset("cinic10", Split::Train, dir.path(), None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape(), (3, 32, 32));
        // alphabetical class order: airplane=0, bird=1
        assert_eq!(ds.labels, vec![0, 1]);
        assert!((ds.images[[0, 0, 0, 0]] - 10.0 / 255.0).abs() < 1e-12);
        assert!((ds.images[[1, 0, 0, 0]] - 200.0 / 255.0).abs() < 1e-12);
        assert!((ds.images[[0, 2, 5, 5]] - 245.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn gather_materializes_batches() {
        let ds = make_synthetic(20, 5, (1, 8, 8), 0).unwrap();
        let b = ds.gather(&[3, 5, 7]);
        assert_eq!(b.len(), 3);
        assert_eq!(b.labels, vec![3, 0, 2]);
        assert_eq!(b.images.index_axis(Axis(0), 0), ds.images.index_axis(Axis(0), 3));
    }
}
