//! Datasets: CIFAR-10 binary batches, a synthetic two-band image set,
//! augmentation and stratified splitting.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_container, u64_to_limbs, limbs_to_u64, write_container, AnyTensor};
use crate::error::{Error, Result};
use crate::rng::Streams;
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// N×C×H×W images in [0,1] with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    /// Validates pixel range and labels.
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "images {} do not match {} labels",
                shape_str(images.shape()),
                labels.len()
            )));
        }
        if let Some(&v) = images.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::Data(format!("pixel {v} outside [0,1]")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} outside 0..{classes}")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// C×H×W.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        Ok((
            self.images.select_outer(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Ok(Self {
            images,
            labels,
            classes: self.classes,
            split,
        })
    }

    /// First `n` samples (all if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split,
        }
    }
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Decodes concatenated records: one label byte then 3072 channel-major pixels.
pub fn decode_cifar10<T: Scalar>(bytes: &[u8], split: Split) -> Result<Dataset<T>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let scale = 1.0 / 255.0;
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("record {i}: label {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| T::of(p as f64 * scale)));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, split)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Returns (train, test) from the five training batches and the test batch.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut train = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        train.extend(read_file(&dir.join(f))?);
    }
    let test = read_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok((decode_cifar10(&train, Split::Train)?, decode_cifar10(&test, Split::Test)?))
}

/// Construction parameters of [`synth_freq_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Random bins summed per image.
    pub components: usize,
    /// Pattern RMS before noise, per class.
    pub amplitude: [f64; 2],
    /// Standard deviation of the pixel noise.
    pub noise: f64,
    /// Fraction of images drawn with the other class's band pattern.
    #[serde(default)]
    pub band_swap: f64,
    /// RMS of a fixed column cosine added with sign + for class 1 and − for class 0.
    #[serde(default)]
    pub cue: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            components: 4,
            amplitude: [0.12, 0.12],
            noise: 0.04,
            band_swap: 0.0,
            cue: 0.0,
        }
    }
}

impl SynthConfig {
    /// Robustness benchmark: a fifth of the images carry the other class's
    /// band, and a weak label-aligned cue below the attack radius separates all of them.
    pub fn benchmark() -> Self {
        Self {
            components: 4,
            amplitude: [0.18, 0.10],
            noise: 0.02,
            band_swap: 0.2,
            cue: 0.02,
        }
    }
}

/// Signed frequency offsets per class: class 0 inside the centered size/4
/// window, class 1 in the band size/4 ≤ max(|u|,|v|) ≤ size/2.
pub fn class_band(size: usize, class: usize) -> Vec<(i64, i64)> {
    let s = size as i64;
    let half_window = s / 8;
    let mut bins = Vec::new();
    for u in -s / 2..s / 2 {
        for v in -s / 2..s / 2 {
            let r = u.abs().max(v.abs());
            let keep = match class {
                0 => r > 0 && u >= -half_window && u < half_window && v >= -half_window && v < half_window,
                _ => r >= s / 4,
            };
            if keep {
                bins.push((u, v));
            }
        }
    }
    bins
}

pub fn synth_freq_dataset<T: Scalar>(n: usize, size: usize, seed: u64) -> Result<Dataset<T>> {
    synth_freq_dataset_with(n, size, seed, SynthConfig::default())
}

/// Balanced 1×size×size two-class set: 0.5 + pattern + noise, clipped.
pub fn synth_freq_dataset_with<T: Scalar>(n: usize, size: usize, seed: u64, cfg: SynthConfig) -> Result<Dataset<T>> {
    if n % 2 != 0 {
        return Err(Error::Data(format!("n = {n} must be even for balanced classes")));
    }
    if size < 4 || !size.is_power_of_two() {
        return Err(Error::Data(format!("size {size} must be a power of two >= 4")));
    }
    let mut rng = Streams::new(seed).stream("synth");
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Data(e.to_string()))?;
    let bands = [class_band(size, 0), class_band(size, 1)];
    let hw = size * size;
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(n * hw);
    let mut pattern = vec![0.0; hw];
    for &y in &labels {
        pattern.iter_mut().for_each(|p| *p = 0.0);
        let flip = cfg.band_swap > 0.0 && rng.gen_bool(cfg.band_swap);
        let band = if flip { 1 - y } else { y };
        add_band(&mut pattern, &bands[band], size, cfg.components, cfg.amplitude[band], &mut rng);
        let sign = if y == 1 { cfg.cue } else { -cfg.cue };
        for (k, &p) in pattern.iter().enumerate() {
            let v = 0.5 + p + sign * cue_pattern(size, k % size) + noise.sample(&mut rng);
            pixels.push(T::of(v.clamp(0.0, 1.0)));
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, size, size], pixels)?, labels, 2, Split::Train)
}

/// Unit-RMS column cosine at frequency ⌊5·size/16⌋, zero phase.
fn cue_pattern(size: usize, b: usize) -> f64 {
    let f = (5 * size / 16) as f64;
    std::f64::consts::SQRT_2 * (2.0 * PI * f * b as f64 / size as f64).cos()
}

fn add_band<R: Rng>(out: &mut [f64], bins: &[(i64, i64)], size: usize, components: usize, amplitude: f64, rng: &mut R) {
    let mut pattern = vec![0.0; size * size];
    for _ in 0..components {
        let (u, v) = *bins.choose(rng).expect("band is non-empty");
        let phase = rng.gen_range(0.0..2.0 * PI);
        let weight = rng.gen_range(0.5..1.0);
        for a in 0..size {
            for b in 0..size {
                let t = 2.0 * PI * (u as f64 * a as f64 + v as f64 * b as f64) / size as f64;
                pattern[a * size + b] += weight * (t + phase).cos();
            }
        }
    }
    let rms = (pattern.iter().map(|p| p * p).sum::<f64>() / pattern.len() as f64).sqrt().max(1e-12);
    for (o, p) in out.iter_mut().zip(&pattern) {
        *o += amplitude * p / rms;
    }
}

/// Zero-pads by `pad`, crops at (dy, dx) in the padded frame, optionally mirrors columns.
pub fn crop_flip<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                let (py, px) = (y + dy, sx + dx);
                if py >= pad && px >= pad && py - pad < h && px - pad < w {
                    out[ch * h * w + y * w + x] = img[ch * h * w + (py - pad) * w + (px - pad)];
                }
            }
        }
    }
    out
}

/// 4-pixel zero padding, random crop, horizontal flip with probability 1/2.
pub fn augment<T: Scalar, R: Rng>(batch: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(Error::shape("augment", "[N,C,H,W]", shape_str(batch.shape())));
    };
    if h != w {
        return Err(Error::shape("augment", "square images", shape_str(batch.shape())));
    }
    const PAD: usize = 4;
    let mut out = Vec::with_capacity(batch.len());
    for img in batch.data().chunks_exact(c * h * w) {
        let dy = rng.gen_range(0..=2 * PAD);
        let dx = rng.gen_range(0..=2 * PAD);
        let flip = rng.gen_bool(0.5);
        out.extend(crop_flip(img, c, h, w, PAD, dy, dx, flip));
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Stratified 9:1 partition into (train, validation).
pub fn split<T: Scalar>(data: &Dataset<T>, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if data.len() < 10 {
        return Err(Error::Data(format!("{} samples cannot be split 9:1", data.len())));
    }
    let mut rng = Streams::new(seed).stream("split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..data.classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 10 {
            return Err(Error::Data(format!("class {class} has only {} samples", idx.len())));
        }
        idx.shuffle(&mut rng);
        let k = (idx.len() + 5) / 10;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train, Split::Train)?, data.subset(&val, Split::Validation)?))
}

/// Saves images, labels and class count in the tensor container.
pub fn save_dataset<T: Scalar>(data: &Dataset<T>, path: &Path) -> Result<()> {
    let labels = Tensor::from_vec(data.labels.iter().map(|&y| y as f64).collect());
    write_container(
        path,
        &[
            ("images".into(), AnyTensor::wrap(&data.images)),
            ("labels".into(), AnyTensor::F64(labels)),
            ("__meta__.classes".into(), AnyTensor::F64(u64_to_limbs(data.classes as u64))),
        ],
    )
}

pub fn load_dataset<T: Scalar>(path: &Path, split: Split) -> Result<Dataset<T>> {
    let entries = read_container(path)?;
    let get = |k: &str| {
        entries
            .iter()
            .find(|(n, _)| n == k)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("{}: missing {k}", path.display())))
    };
    let images = get("images")?.to::<T>()?;
    let labels = get("labels")?
        .to_f64_vec()
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let classes = limbs_to_u64(&get("__meta__.classes")?.to_f64_vec())? as usize;
    Dataset::new(images, labels, classes, split)
}
