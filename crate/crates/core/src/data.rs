//! Image datasets: CIFAR-10 binary records, synthetic class blobs,
//! augmentation, corruptions and input normalization.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 3;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by 3072 channel-major pixel bytes.
pub const CIFAR_RECORD: usize = 1 + CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const PAD: usize = 4;

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Labelled `u8` images stored channel-major, `(N, 3, side, side)`.
#[derive(Clone, PartialEq, Eq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    side: usize,
    num_classes: usize,
    pub name: String,
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("name", &self.name)
            .field("len", &self.len())
            .field("side", &self.side)
            .field("num_classes", &self.num_classes)
            .finish()
    }
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<u8>, labels: Vec<u8>, side: usize, num_classes: usize) -> Result<Self> {
        let per = CHANNELS * side * side;
        if labels.is_empty() || side == 0 || images.len() != labels.len() * per {
            return Err(Error::Shape(format!(
                "{} image bytes for {} labels of 3x{side}x{side}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(Error::LabelSpace(format!("example {i} has label {l} with {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            side,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("index {i} out of range for {} examples", self.len())));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(self.name.clone(), images, labels, self.side, self.num_classes)
    }

    /// First `n` examples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Re-serialize into CIFAR-10 binary records.
    pub fn to_binary(&self) -> Result<Vec<u8>> {
        if self.side != CIFAR_SIDE {
            return Err(Error::arg(format!("CIFAR records hold 32x32 images, dataset has {0}x{0}", self.side)));
        }
        let mut out = Vec::with_capacity(self.len() * CIFAR_RECORD);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        Ok(out)
    }
}

pub fn parse_cifar10_binary(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::TruncatedCifar {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if chunk[0] as usize >= CIFAR_CLASSES {
            return Err(Error::BadCifarLabel {
                path: path.to_path_buf(),
                record,
                label: chunk[0],
            });
        }
        labels.push(chunk[0]);
        images.extend_from_slice(&chunk[1..]);
    }
    let name = path.file_name().map_or_else(|| "cifar10".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, images, labels, CIFAR_SIDE, CIFAR_CLASSES)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    parse_cifar10_binary(&fs::read(path)?, path)
}

/// Concatenate several record files in the given order.
pub fn load_cifar10_files(paths: &[PathBuf], name: &str) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let d = load_cifar10_binary(p)?;
        images.extend_from_slice(d.images());
        labels.extend_from_slice(d.labels());
    }
    Dataset::new(name, images, labels, CIFAR_SIDE, CIFAR_CLASSES)
}

/// The standard `cifar-10-batches-bin` layout: `(train, test)`.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    Ok((
        load_cifar10_files(&train, "cifar10-train")?,
        load_cifar10_files(&[dir.join(CIFAR_TEST_FILE)], "cifar10-test")?,
    ))
}

/// Scale of the class signal relative to the pixel noise.
pub const SEPARABILITY_HIGH: f64 = 1.0;

const NOISE_STD: f64 = 48.0;
const SIGNAL_AMPLITUDE: f64 = 96.0;

/// Class-conditional Gaussian blobs over pixel noise. Each class owns a blob
/// centre and a colour sign pattern; `separability` scales the blob against
/// the noise and `0` makes pixels independent of the label.
pub fn synthetic_dataset(seed: u64, n: usize, num_classes: usize, separability: f64) -> Result<Dataset> {
    synthetic_dataset_sized(seed, n, num_classes, separability, CIFAR_SIDE)
}

pub fn synthetic_dataset_sized(seed: u64, n: usize, num_classes: usize, separability: f64, side: usize) -> Result<Dataset> {
    if num_classes == 0 || num_classes > 256 || n < num_classes {
        return Err(Error::arg(format!("synthetic dataset needs 1 <= classes <= min(n, 256), got n={n}, classes={num_classes}")));
    }
    if !(separability >= 0.0 && separability.is_finite()) {
        return Err(Error::arg(format!("separability must be finite and >= 0, got {separability}")));
    }
    let hw = side * side;
    let mut proto_rng = stream_rng(seed, Stream::Synthetic, 0);
    let radius = side as f64 / 5.0;
    let prototypes: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let cy = proto_rng.random_range(0.2..0.8) * side as f64;
            let cx = proto_rng.random_range(0.2..0.8) * side as f64;
            let colour: Vec<f64> = (0..CHANNELS).map(|_| if proto_rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let mut p = vec![0.0; CHANNELS * hw];
            for (c, &sign) in colour.iter().enumerate() {
                for y in 0..side {
                    for x in 0..side {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        p[c * hw + y * side + x] = sign * (-d2 / (2.0 * radius * radius)).exp();
                    }
                }
            }
            p
        })
        .collect();
    let mut rng = stream_rng(seed, Stream::Synthetic, 1);
    let mut images = Vec::with_capacity(n * CHANNELS * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        labels.push(label as u8);
        for &p in &prototypes[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = 128.0 + NOISE_STD * z + separability * SIGNAL_AMPLITUDE * p;
            images.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Dataset::new(format!("synthetic-s{seed}-sep{separability}"), images, labels, side, num_classes)
}

/// Crop offsets into the padded image and the flip bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        dy: PAD,
        dx: PAD,
        flip: false,
    };

    /// Draw for example `index` in `epoch`.
    pub fn sample(seed: u64, epoch: usize, index: usize) -> Self {
        let mut rng = stream_rng(seed, Stream::Augment, ((epoch as u64) << 32) | index as u64);
        AugmentDraw {
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Zero-pad by four pixels, crop back to `side` at the drawn offset, then
/// optionally mirror horizontally.
pub fn augment_with(image: &[u8], side: usize, draw: AugmentDraw) -> Vec<u8> {
    assert_eq!(image.len(), CHANNELS * side * side, "augment: image is not 3x{side}x{side}");
    assert!(draw.dy <= 2 * PAD && draw.dx <= 2 * PAD, "augment: crop offset outside padding");
    let mut out = vec![0u8; image.len()];
    for c in 0..CHANNELS {
        for y in 0..side {
            let sy = (y + draw.dy).wrapping_sub(PAD);
            if sy >= side {
                continue;
            }
            for x in 0..side {
                let sx = (x + draw.dx).wrapping_sub(PAD);
                if sx >= side {
                    continue;
                }
                let ox = if draw.flip { side - 1 - x } else { x };
                out[(c * side + y) * side + ox] = image[(c * side + sy) * side + sx];
            }
        }
    }
    out
}

pub fn augment(image: &[u8], side: usize, seed: u64, epoch: usize, index: usize) -> Vec<u8> {
    augment_with(image, side, AugmentDraw::sample(seed, epoch, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    BoxBlur,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

/// Noise standard deviation per severity, as a fraction of 255.
pub const NOISE_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
/// Blur kernel side per severity.
pub const BLUR_KERNEL: [usize; 5] = [3, 5, 7, 9, 11];
/// Additive brightness shift per severity, as a fraction of 255.
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.30];
/// Contrast factor around the per-channel image mean.
pub const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::arg(format!("corruption severity must be in 1..=5, got {severity}")));
        }
        Ok(CorruptionSpec { kind, severity, seed })
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.kind, self.severity)
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn box_blur(image: &[u8], side: usize, k: usize) -> Vec<u8> {
    let r = (k / 2) as isize;
    let area = (k * k) as u32;
    let clamp = |v: isize| v.clamp(0, side as isize - 1) as usize;
    let mut out = vec![0u8; image.len()];
    for c in 0..CHANNELS {
        let plane = &image[c * side * side..(c + 1) * side * side];
        for y in 0..side {
            for x in 0..side {
                let mut sum = 0u32;
                for dy in -r..=r {
                    let row = clamp(y as isize + dy) * side;
                    for dx in -r..=r {
                        sum += plane[row + clamp(x as isize + dx)] as u32;
                    }
                }
                out[(c * side + y) * side + x] = ((sum + area / 2) / area) as u8;
            }
        }
    }
    out
}

fn contrast(image: &[u8], side: usize, factor: f64) -> Vec<u8> {
    let hw = side * side;
    let mut out = Vec::with_capacity(image.len());
    for plane in image.chunks(hw) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        out.extend(plane.iter().map(|&v| to_u8((v as f64 - mean) * factor + mean)));
    }
    out
}

/// Apply one corruption to every image; the input dataset is untouched.
pub fn corrupt(dataset: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let spec = CorruptionSpec::new(spec.kind, spec.severity, spec.seed)?;
    let s = spec.severity as usize - 1;
    let side = dataset.side();
    let mut images = Vec::with_capacity(dataset.images().len());
    for i in 0..dataset.len() {
        let img = dataset.image(i);
        match spec.kind {
            CorruptionKind::GaussianNoise => {
                let mut rng = stream_rng(spec.seed, Stream::Corruption, i as u64);
                let sigma = NOISE_SIGMA[s] * 255.0;
                images.extend(img.iter().map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    to_u8(v as f64 + sigma * z)
                }));
            }
            CorruptionKind::BoxBlur => images.extend(box_blur(img, side, BLUR_KERNEL[s])),
            CorruptionKind::Brightness => {
                let shift = BRIGHTNESS_SHIFT[s] * 255.0;
                images.extend(img.iter().map(|&v| to_u8(v as f64 + shift)));
            }
            CorruptionKind::Contrast => images.extend(contrast(img, side, CONTRAST_FACTOR[s])),
        }
    }
    Dataset::new(
        format!("{}+{}", dataset.name, spec.label()),
        images,
        dataset.labels().to_vec(),
        side,
        dataset.num_classes(),
    )
}

/// Per-channel input standardization fitted on a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn fit(dataset: &Dataset) -> Self {
        let hw = dataset.side() * dataset.side();
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for i in 0..dataset.len() {
            for (c, plane) in dataset.image(i).chunks(hw).enumerate() {
                for &v in plane {
                    let v = v as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (dataset.len() * hw) as f64;
        let mean = sum.map(|s| s / count);
        let mut std = [0.0; 3];
        for c in 0..3 {
            let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    /// Stack images into a normalized `(N, 3, side, side)` tensor.
    pub fn tensor<T: Scalar, I: AsRef<[u8]>>(&self, images: &[I], side: usize) -> Result<Tensor<T>> {
        let hw = side * side;
        let mut data = Vec::with_capacity(images.len() * CHANNELS * hw);
        for img in images {
            let img = img.as_ref();
            if img.len() != CHANNELS * hw {
                return Err(Error::Shape(format!("image of {} bytes is not 3x{side}x{side}", img.len())));
            }
            for (c, plane) in img.chunks(hw).enumerate() {
                let (m, s) = (self.mean[c], self.std[c]);
                data.extend(plane.iter().map(|&v| T::of((v as f64 / 255.0 - m) / s)));
            }
        }
        Tensor::from_vec(&[images.len(), CHANNELS, side, side], data)
    }

    /// Normalized tensor and labels for the given examples, without augmentation.
    pub fn batch<T: Scalar>(&self, dataset: &Dataset, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images: Vec<&[u8]> = indices.iter().map(|&i| dataset.image(i)).collect();
        Ok((self.tensor(&images, dataset.side())?, indices.iter().map(|&i| dataset.label(i)).collect()))
    }
}

/// Indices of a class-balanced scoring batch: classes are visited
/// round-robin, each drawing from its own seeded shuffle, until `size`
/// examples are collected or the dataset is exhausted.
pub fn scoring_batch(dataset: &Dataset, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::CriterionBatch, 0);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for i in 0..dataset.len() {
        per_class[dataset.label(i)].push(i);
    }
    for members in &mut per_class {
        members.shuffle(&mut rng);
        members.reverse();
    }
    let mut out = Vec::with_capacity(size.min(dataset.len()));
    while out.len() < size.min(dataset.len()) {
        for members in &mut per_class {
            if out.len() == size {
                break;
            }
            if let Some(i) = members.pop() {
                out.push(i);
            }
        }
    }
    out
}
