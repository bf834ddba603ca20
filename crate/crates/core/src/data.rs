//! Labeled image datasets: the CIFAR-10 binary format, seeded stratified
//! subsets and class-conditional synthetic images.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::parse_num;
use crate::tensor::{Float, Tensor};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Images stored contiguously as `[N, C, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<Float>,
    pub labels: Vec<usize>,
    pub image_len: usize,
}

impl Split {
    pub fn empty(image_len: usize) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            image_len,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[Float] {
        &self.images[i * self.image_len..(i + 1) * self.image_len]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.image_len);
        for &i in indices {
            out.images.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    fn append(&mut self, other: Split) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    pub train: Split,
    pub test: Split,
    /// Per-channel normalization applied when batches are built.
    pub mean: Vec<Float>,
    pub std: Vec<Float>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let image_len = self.shape.iter().product::<usize>();
        for (which, split) in [("train", &self.train), ("test", &self.test)] {
            if split.image_len != image_len || split.images.len() != split.len() * image_len {
                return Err(Error::InvalidArgument(format!(
                    "{which} split does not match shape {:?}",
                    self.shape
                )));
            }
            if let Some(bad) = split.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "{which} label {bad} >= {} classes",
                    self.num_classes
                )));
            }
        }
        if self.mean.len() != self.shape[0] || self.std.len() != self.shape[0] {
            return Err(Error::InvalidArgument(
                "normalization constants do not match channels".into(),
            ));
        }
        Ok(())
    }

    /// Normalized batch `[B, C, H, W]` from raw `[0, 1]` images.
    pub fn normalized_batch<'a>(
        &self,
        images: impl IntoIterator<Item = &'a [Float]>,
    ) -> Result<Tensor> {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            for ch in 0..c {
                let (m, s) = (self.mean[ch], self.std[ch]);
                data.extend(
                    img[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| (v - m) / s),
                );
            }
            n += 1;
        }
        Tensor::new(vec![n, c, h, w], data)
    }

    /// Keeps a seeded stratified sample of `n` training images. Classes get
    /// `n / num_classes` images each; the remainder goes to the lowest classes.
    pub fn stratified_subset(&self, n: usize, seed: u64) -> Result<Self> {
        let train = stratified_indices(&self.train.labels, self.num_classes, n, seed)
            .map(|idx| self.train.select(&idx))?;
        Ok(Self {
            train,
            ..self.clone()
        })
    }

    /// Same as [`Dataset::stratified_subset`] on the test split.
    pub fn stratified_test_subset(&self, n: usize, seed: u64) -> Result<Self> {
        let test = stratified_indices(&self.test.labels, self.num_classes, n, seed)
            .map(|idx| self.test.select(&idx))?;
        Ok(Self {
            test,
            ..self.clone()
        })
    }
}

fn stratified_indices(labels: &[usize], classes: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut picked = Vec::with_capacity(n);
    for (c, members) in by_class.iter_mut().enumerate() {
        let want = n / classes + usize::from(c < n % classes);
        if members.len() < want {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, subset needs {want}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..want]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Reads one CIFAR-10 binary batch: records of a label byte followed by
/// 3072 pixel bytes (R, G, B planes, row-major).
pub fn read_cifar_batch(path: &Path) -> Result<Split> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, path)
}

fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<Split> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            path,
            format!(
                "size {} bytes is not a positive multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        ));
    }
    let mut split = Split::empty(CIFAR_RECORD - 1);
    for record in bytes.chunks(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(Error::format(
                path,
                format!("label byte {label} out of range"),
            ));
        }
        split.labels.push(label);
        split
            .images
            .extend(record[1..].iter().map(|&b| b as Float / 255.0));
    }
    Ok(split)
}

fn read_full_cifar_file(path: &Path) -> Result<Split> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    parse_cifar_records(&bytes, path)
}

/// Loads the 50000/10000 CIFAR-10 split from the standard binary batches.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut train = Split::empty(CIFAR_RECORD - 1);
    for f in CIFAR_TRAIN_FILES {
        train.append(read_full_cifar_file(&dir.join(f))?);
    }
    let test = read_full_cifar_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok(Dataset {
        name: "cifar10".into(),
        num_classes: 10,
        shape: [3, 32, 32],
        train,
        test,
        mean: vec![0.4914, 0.4822, 0.4465],
        std: vec![0.2023, 0.1994, 0.2010],
    })
}

/// Class-conditional Gaussian-blob images.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Height and width.
    pub size: usize,
    pub channels: usize,
    /// Amplitude of the class prototype; 0 makes images independent of labels.
    pub separation: Float,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: Float,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            test_per_class: 50,
            size: 16,
            channels: 3,
            separation: 1.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Parses `key=value` pairs separated by commas, e.g. `classes=4,size=8`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = Self::default();
        for pair in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed synthetic option '{pair}'")))?;
            match k.trim() {
                "classes" => spec.classes = parse_num(k, v)?,
                "per_class" => spec.per_class = parse_num(k, v)?,
                "test_per_class" => spec.test_per_class = parse_num(k, v)?,
                "size" => spec.size = parse_num(k, v)?,
                "channels" => spec.channels = parse_num(k, v)?,
                "separation" => spec.separation = parse_num(k, v)?,
                "noise" => spec.noise = parse_num(k, v)?,
                "seed" => spec.seed = parse_num(k, v)?,
                other => return Err(Error::Config(format!("unknown synthetic option '{other}'"))),
            }
        }
        Ok(spec)
    }
}

struct Blob {
    cy: Float,
    cx: Float,
    sigma: Float,
    color: Vec<Float>,
}

impl Blob {
    fn random(rng: &mut impl Rng, size: usize, channels: usize) -> Self {
        let s = size as Float;
        Self {
            cy: rng.random_range(0.0..s),
            cx: rng.random_range(0.0..s),
            sigma: rng.random_range(s / 8.0..s / 4.0),
            color: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn render(&self, size: usize, amplitude: Float, out: &mut [Float]) {
        let plane = size * size;
        for (c, &col) in self.color.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as Float - self.cy).powi(2) + (x as Float - self.cx).powi(2);
                    out[c * plane + y * size + x] +=
                        amplitude * col * (-d2 / (2.0 * self.sigma * self.sigma)).exp();
                }
            }
        }
    }
}

/// Generates a synthetic dataset deterministically from `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2
        || spec.per_class == 0
        || spec.test_per_class == 0
        || spec.size == 0
        || spec.channels == 0
    {
        return Err(Error::InvalidArgument(format!(
            "degenerate synthetic spec {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (size, ch) = (spec.size, spec.channels);
    let image_len = ch * size * size;
    let prototypes: Vec<Vec<Float>> = (0..spec.classes)
        .map(|_| {
            let mut proto = vec![0.0; image_len];
            for _ in 0..3 {
                Blob::random(&mut rng, size, ch).render(size, 1.0, &mut proto);
            }
            proto
        })
        .collect();
    let sample = |rng: &mut ChaCha8Rng, label: usize, split: &mut Split| {
        let mut img = vec![0.0; image_len];
        Blob::random(rng, size, ch).render(size, 1.0, &mut img);
        for (v, p) in img.iter_mut().zip(&prototypes[label]) {
            let eps: Float = StandardNormal.sample(rng);
            *v = (0.5 + 0.25 * (spec.separation * p + *v) + spec.noise * eps).clamp(0.0, 1.0);
        }
        split.images.extend(img);
        split.labels.push(label);
    };
    let mut train = Split::empty(image_len);
    let mut test = Split::empty(image_len);
    for label in 0..spec.classes {
        for _ in 0..spec.per_class {
            sample(&mut rng, label, &mut train);
        }
    }
    for label in 0..spec.classes {
        for _ in 0..spec.test_per_class {
            sample(&mut rng, label, &mut test);
        }
    }
    let (mean, std) = channel_moments(&train, ch);
    Ok(Dataset {
        name: "synthetic".into(),
        num_classes: spec.classes,
        shape: [ch, size, size],
        train,
        test,
        mean,
        std,
    })
}

fn channel_moments(split: &Split, channels: usize) -> (Vec<Float>, Vec<Float>) {
    let plane = split.image_len / channels;
    let mut sum = vec![0f64; channels];
    let mut sq = vec![0f64; channels];
    for i in 0..split.len() {
        for (c, px) in split.image(i).chunks(plane).enumerate() {
            for &v in px {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
    }
    let count = (split.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as Float)
        .collect();
    (mean.into_iter().map(|m| m as Float).collect(), std)
}

/// Where a command reads its images from: a CIFAR-10 directory or an inline
/// synthetic spec written `synthetic:key=value,...`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Cifar10(std::path::PathBuf),
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("synthetic") {
            Some(rest) => Ok(DataSource::Synthetic(SyntheticSpec::parse(
                rest.trim_start_matches(':'),
            )?)),
            None => Ok(DataSource::Cifar10(s.into())),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Cifar10(dir) => load_cifar10(dir),
            DataSource::Synthetic(spec) => gen_synthetic(spec),
        }
    }
}
