//! Augmentation, optimizer, learning-rate schedule and the siamese
//! pretraining loop with per-step random bit-widths.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::diag::{self, DecompositionRecord};
use crate::error::{Error, Result};
use crate::nn::{forward_encoder, forward_predictor, parse_num, BnUse, ModelParams};
use crate::quant::{psq_refresh, sample_bits, BitWidthSpec, QuantPlan};
use crate::ssl::{
    cross_nce_loss, cross_nce_loss_with_negatives, info_nce_loss, simsiam_loss, ssql_loss,
    LossConfig, LossVariant, NceNegatives,
};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Stochastic view generator applied to `[C, H, W]` images in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPipeline {
    /// Area fraction range of the random resized crop.
    pub crop_scale: (Float, Float),
    /// Aspect-ratio range of the random resized crop.
    pub crop_ratio: (Float, Float),
    pub flip_p: Float,
    pub jitter_p: Float,
    pub brightness: Float,
    pub contrast: Float,
    pub saturation: Float,
    pub hue: Float,
    pub grayscale_p: Float,
}

impl Default for AugmentPipeline {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
        }
    }
}

impl AugmentPipeline {
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_p: 0.0,
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flip_p: 0.5,
            ..Self::identity()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "simsiam" | "default" => Ok(Self::default()),
            "flip" => Ok(Self::flip_only()),
            "none" | "identity" => Ok(Self::identity()),
            other => Err(Error::Config(format!(
                "unknown augmentation preset '{other}'"
            ))),
        }
    }

    pub fn preset_name(&self) -> Option<&'static str> {
        if *self == Self::default() {
            Some("simsiam")
        } else if *self == Self::flip_only() {
            Some("flip")
        } else if *self == Self::identity() {
            Some("none")
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        let (rlo, rhi) = self.crop_ratio;
        let probs = [self.flip_p, self.jitter_p, self.grayscale_p];
        if !(0.0 < lo && lo <= hi && hi <= 1.0) || !(0.0 < rlo && rlo <= rhi) {
            return Err(Error::Config(
                "crop scale must lie in (0, 1] and ranges must be ordered".into(),
            ));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(
                "augmentation probabilities must lie in [0, 1]".into(),
            ));
        }
        if [self.brightness, self.contrast, self.saturation]
            .iter()
            .any(|&f| f < 0.0)
            || !(0.0..=0.5).contains(&self.hue)
        {
            return Err(Error::Config(
                "jitter strengths must be >= 0 and hue <= 0.5".into(),
            ));
        }
        Ok(())
    }

    /// One random view of `image` with shape `[c, h, w]`.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        image: &[Float],
        shape: [usize; 3],
        rng: &mut R,
    ) -> Vec<Float> {
        let [c, h, w] = shape;
        let mut out = self.resized_crop(image, shape, rng);
        if self.flip_p > 0.0 && rng.random::<Float>() < self.flip_p {
            for plane in out.chunks_mut(h * w) {
                for row in plane.chunks_mut(w) {
                    row.reverse();
                }
            }
        }
        if c == 3 {
            if self.jitter_p > 0.0 && rng.random::<Float>() < self.jitter_p {
                self.color_jitter(&mut out, h * w, rng);
            }
            if self.grayscale_p > 0.0 && rng.random::<Float>() < self.grayscale_p {
                grayscale(&mut out, h * w);
            }
        }
        out
    }

    fn resized_crop<R: Rng + ?Sized>(
        &self,
        image: &[Float],
        [c, h, w]: [usize; 3],
        rng: &mut R,
    ) -> Vec<Float> {
        if self.crop_scale == (1.0, 1.0) {
            return image.to_vec();
        }
        let area = (h * w) as Float;
        let (log_lo, log_hi) = (self.crop_ratio.0.ln(), self.crop_ratio.1.ln());
        let mut window = None;
        for _ in 0..10 {
            let target = area * uniform(rng, self.crop_scale.0, self.crop_scale.1);
            let ratio = uniform(rng, log_lo, log_hi).exp();
            let cw = (target * ratio).sqrt().round() as usize;
            let ch = (target / ratio).sqrt().round() as usize;
            if 0 < cw && cw <= w && 0 < ch && ch <= h {
                let top = rng.random_range(0..=h - ch);
                let left = rng.random_range(0..=w - cw);
                window = Some((top, left, ch, cw));
                break;
            }
        }
        let (top, left, ch, cw) = window.unwrap_or_else(|| {
            let side = h.min(w);
            ((h - side) / 2, (w - side) / 2, side, side)
        });
        resize_bilinear(image, c, (h, w), (top, left, ch, cw))
    }

    fn color_jitter<R: Rng + ?Sized>(&self, img: &mut [Float], plane: usize, rng: &mut R) {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 if self.brightness > 0.0 => {
                    let f = jitter_factor(rng, self.brightness);
                    img.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
                }
                1 if self.contrast > 0.0 => {
                    let f = jitter_factor(rng, self.contrast);
                    let mean = luma(img, plane).iter().sum::<Float>() / plane as Float;
                    img.iter_mut()
                        .for_each(|v| *v = (mean + f * (*v - mean)).clamp(0.0, 1.0));
                }
                2 if self.saturation > 0.0 => {
                    let f = jitter_factor(rng, self.saturation);
                    let gray = luma(img, plane);
                    for ch in img.chunks_mut(plane) {
                        for (v, g) in ch.iter_mut().zip(&gray) {
                            *v = (g + f * (*v - g)).clamp(0.0, 1.0);
                        }
                    }
                }
                3 if self.hue > 0.0 => {
                    let shift = uniform(rng, -self.hue, self.hue);
                    shift_hue(img, plane, shift);
                }
                _ => {}
            }
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Float, hi: Float) -> Float {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn jitter_factor<R: Rng + ?Sized>(rng: &mut R, strength: Float) -> Float {
    uniform(rng, (1.0 - strength).max(0.0), 1.0 + strength)
}

fn luma(img: &[Float], plane: usize) -> Vec<Float> {
    (0..plane)
        .map(|i| 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i])
        .collect()
}

fn grayscale(img: &mut [Float], plane: usize) {
    let gray = luma(img, plane);
    for ch in img.chunks_mut(plane) {
        ch.copy_from_slice(&gray);
    }
}

fn shift_hue(img: &mut [Float], plane: usize, shift: Float) {
    for i in 0..plane {
        let (r, g, b) = (img[i], img[plane + i], img[2 * plane + i]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        if delta <= 0.0 {
            continue;
        }
        let hue = if max == r {
            ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            (b - r) / delta + 2.0
        } else {
            (r - g) / delta + 4.0
        } / 6.0;
        let hue = (hue + shift).rem_euclid(1.0);
        let sat = delta / max;
        let (nr, ng, nb) = hsv_to_rgb(hue, sat, max);
        img[i] = nr;
        img[plane + i] = ng;
        img[2 * plane + i] = nb;
    }
}

fn hsv_to_rgb(h: Float, s: Float, v: Float) -> (Float, Float, Float) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Bilinearly resamples a crop window back to the full `h x w` size
/// (half-pixel centers, edge clamping).
fn resize_bilinear(
    image: &[Float],
    c: usize,
    (h, w): (usize, usize),
    (top, left, ch, cw): (usize, usize, usize, usize),
) -> Vec<Float> {
    let mut out = vec![0.0; c * h * w];
    let sy = ch as Float / h as Float;
    let sx = cw as Float / w as Float;
    let coord = |dst: usize, scale: Float, len: usize| {
        let src = ((dst as Float + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as Float);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as Float)
    };
    let xs: Vec<_> = (0..w).map(|x| coord(x, sx, cw)).collect();
    for y in 0..h {
        let (y0, y1, fy) = coord(y, sy, ch);
        for k in 0..c {
            let base = k * h * w;
            let row0 = base + (top + y0) * w + left;
            let row1 = base + (top + y1) * w + left;
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let a = image[row0 + x0] * (1.0 - fx) + image[row0 + x1] * fx;
                let b = image[row1 + x0] * (1.0 - fx) + image[row1 + x1] * fx;
                out[base + y * w + x] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    out
}

/// Two independent draws of `pipeline` on the same image.
pub fn augment_two_views<R: Rng + ?Sized>(
    image: &[Float],
    shape: [usize; 3],
    rng: &mut R,
    pipeline: &AugmentPipeline,
) -> (Vec<Float>, Vec<Float>) {
    let a = pipeline.apply(image, shape, rng);
    let b = pipeline.apply(image, shape, rng);
    (a, b)
}

/// Half-cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(base_lr: Float, step: usize, total_steps: usize) -> Float {
    if total_steps == 0 {
        return base_lr;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    (0.5 * base_lr as f64 * (1.0 + (std::f64::consts::PI * progress).cos())) as Float
}

/// Momentum buffers, one per parameter, created on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Option<Vec<Float>>>,
}

/// `v = momentum * v + (g + wd * w); w -= lr * v`. Parameters whose gradient
/// is `None` are left untouched, decay included.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    lr: Float,
    momentum: Float,
    weight_decay: Float,
    state: &mut SgdState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    state.velocity.resize(params.len(), None);
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let Some(g) = g else { continue };
        if g.shape() != w.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: w.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let v = v.get_or_insert_with(|| vec![0.0; w.numel()]);
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *wi);
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for a batch of 256; scaled linearly with `batch_size`.
    pub base_lr: Float,
    pub momentum: Float,
    /// `None` uses the loss variant's own default.
    pub weight_decay: Option<Float>,
    pub loss: LossConfig,
    pub bits: BitWidthSpec,
    pub quantize_weights: bool,
    pub quantize_acts: bool,
    pub quantize_first_layer: bool,
    pub augment: AugmentPipeline,
    pub seed: u64,
    /// Write a snapshot every this many epochs; 0 disables snapshots.
    pub snapshot_every: usize,
    /// Record the loss decomposition every this many steps; 0 disables it.
    pub diag_every: usize,
    /// Sample pairs per correlation window; 0 means one batch.
    pub diag_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: None,
            loss: LossConfig::default(),
            bits: BitWidthSpec::default(),
            quantize_weights: true,
            quantize_acts: true,
            quantize_first_layer: true,
            augment: AugmentPipeline::default(),
            seed: 0,
            snapshot_every: 0,
            diag_every: 0,
            diag_window: 0,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{value}' for '{key}'"))),
    }
}

/// Parses a bit set written as `2-8`, `4` or `2,4,8`.
pub fn parse_bit_set(key: &str, value: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi): (u32, u32) = (parse_num(key, lo)?, parse_num(key, hi)?);
                if lo > hi {
                    return Err(Error::Config(format!("empty range '{part}' for '{key}'")));
                }
                out.extend(lo..=hi);
            }
            None => out.push(parse_num(key, part)?),
        }
    }
    Ok(out)
}

fn format_bit_set(bits: &std::collections::BTreeSet<u32>) -> String {
    let v: Vec<u32> = bits.iter().copied().collect();
    if v.len() > 1 && v.windows(2).all(|p| p[1] == p[0] + 1) {
        format!("{}-{}", v[0], v[v.len() - 1])
    } else {
        v.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
    }
}

impl TrainConfig {
    pub fn lr(&self) -> Float {
        self.base_lr * self.batch_size as Float / 256.0
    }

    pub fn weight_decay(&self) -> Float {
        self.weight_decay
            .unwrap_or_else(|| self.loss.variant.default_weight_decay())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay().is_sign_negative() {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight decay must be >= 0".into(),
            ));
        }
        self.loss.validate()?;
        self.bits.validate()?;
        self.augment.validate()
    }

    /// The plan used by the quantized branch for one sampled bit pair.
    pub fn plan(&self, weight_bits: u32, act_bits: u32) -> QuantPlan {
        QuantPlan {
            quantize_weights: self.quantize_weights,
            quantize_acts: self.quantize_acts,
            quantize_first_layer: self.quantize_first_layer,
            ..QuantPlan::new(weight_bits, act_bits)
        }
    }

    /// Sets one `key=value` field. Returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "base_lr" => self.base_lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => {
                self.weight_decay = match v {
                    "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "variant" | "loss" => self.loss.variant = v.parse()?,
            "temperature" => self.loss.temperature = parse_num(key, v)?,
            "quantize_pred" => self.loss.quantize_pred = parse_bool(key, v)?,
            "quantize_target" => self.loss.quantize_target = parse_bool(key, v)?,
            "nce_negatives" => {
                self.loss.nce_negatives = match v {
                    "fp" => NceNegatives::FullPrecision,
                    "quant" => NceNegatives::Quantized,
                    _ => {
                        return Err(Error::Config(format!(
                            "nce_negatives must be fp or quant, got '{v}'"
                        )))
                    }
                }
            }
            "nce_aux" => self.loss.nce_aux = parse_bool(key, v)?,
            "weight_bits" => self.bits.weight_bits = parse_bit_set(key, v)?.into_iter().collect(),
            "act_bits" => self.bits.act_bits = parse_bit_set(key, v)?.into_iter().collect(),
            "quantize_weights" => self.quantize_weights = parse_bool(key, v)?,
            "quantize_acts" => self.quantize_acts = parse_bool(key, v)?,
            "quantize_first_layer" => self.quantize_first_layer = parse_bool(key, v)?,
            "augment" => self.augment = AugmentPipeline::preset(v)?,
            "crop_scale_min" => self.augment.crop_scale.0 = parse_num(key, v)?,
            "crop_scale_max" => self.augment.crop_scale.1 = parse_num(key, v)?,
            "crop_ratio" => {
                let (lo, hi) = v.split_once(',').ok_or_else(|| {
                    Error::Config(format!("crop_ratio must be 'lo,hi', got '{v}'"))
                })?;
                self.augment.crop_ratio = (parse_num(key, lo)?, parse_num(key, hi)?);
            }
            "flip_p" => self.augment.flip_p = parse_num(key, v)?,
            "jitter_p" => self.augment.jitter_p = parse_num(key, v)?,
            "brightness" => self.augment.brightness = parse_num(key, v)?,
            "contrast" => self.augment.contrast = parse_num(key, v)?,
            "saturation" => self.augment.saturation = parse_num(key, v)?,
            "hue" => self.augment.hue = parse_num(key, v)?,
            "grayscale_p" => self.augment.grayscale_p = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "snapshot_every" => self.snapshot_every = parse_num(key, v)?,
            "diag_every" => self.diag_every = parse_num(key, v)?,
            "diag_window" => self.diag_window = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key=value` lines; parsing them back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.loss;
        let a = &self.augment;
        let wd = self
            .weight_decay
            .map_or("auto".to_string(), |w| w.to_string());
        let neg = match l.nce_negatives {
            NceNegatives::FullPrecision => "fp",
            NceNegatives::Quantized => "quant",
        };
        let lines: [(&str, String); 30] = [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", wd),
            ("variant", l.variant.to_string()),
            ("temperature", l.temperature.to_string()),
            ("quantize_pred", l.quantize_pred.to_string()),
            ("quantize_target", l.quantize_target.to_string()),
            ("nce_negatives", neg.to_string()),
            ("nce_aux", l.nce_aux.to_string()),
            ("weight_bits", format_bit_set(&self.bits.weight_bits)),
            ("act_bits", format_bit_set(&self.bits.act_bits)),
            ("quantize_weights", self.quantize_weights.to_string()),
            ("quantize_acts", self.quantize_acts.to_string()),
            (
                "quantize_first_layer",
                self.quantize_first_layer.to_string(),
            ),
            ("crop_scale_min", a.crop_scale.0.to_string()),
            ("crop_scale_max", a.crop_scale.1.to_string()),
            (
                "crop_ratio",
                format!("{},{}", a.crop_ratio.0, a.crop_ratio.1),
            ),
            ("flip_p", a.flip_p.to_string()),
            ("jitter_p", a.jitter_p.to_string()),
            ("brightness", a.brightness.to_string()),
            ("contrast", a.contrast.to_string()),
            ("saturation", a.saturation.to_string()),
            ("hue", a.hue.to_string()),
            ("grayscale_p", a.grayscale_p.to_string()),
            ("seed", self.seed.to_string()),
            ("snapshot_every", self.snapshot_every.to_string()),
            ("diag_every", self.diag_every.to_string()),
            ("diag_window", self.diag_window.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown training key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-step record written to the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    /// Sampled precision, `(0, 0)` when the step ran no quantized branch.
    pub w_bits: u32,
    pub a_bits: u32,
    pub lr: Float,
    pub loss: Float,
    /// Full-precision term of the objective, when present.
    pub loss_simsiam: Option<Float>,
    /// Quantized-branch term of the objective, when present.
    pub loss_ssql: Option<Float>,
    pub wall_secs: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,w_bits,a_bits,lr,loss,loss_simsiam,loss_ssql";

impl StepMetrics {
    /// CSV row without wall time, so reruns produce identical bytes.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<Float>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.w_bits,
            self.a_bits,
            self.lr,
            self.loss,
            opt(self.loss_simsiam),
            opt(self.loss_ssql)
        )
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<StepMetrics>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Config("metrics CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Config(format!(
                    "metrics row '{line}' needs 8 fields"
                )));
            }
            let opt = |k: &str, v: &str| -> Result<Option<Float>> {
                if v.is_empty() {
                    Ok(None)
                } else {
                    parse_num(k, v).map(Some)
                }
            };
            Ok(StepMetrics {
                step: parse_num("step", f[0])?,
                epoch: parse_num("epoch", f[1])?,
                w_bits: parse_num("w_bits", f[2])?,
                a_bits: parse_num("a_bits", f[3])?,
                lr: parse_num("lr", f[4])?,
                loss: parse_num("loss", f[5])?,
                loss_simsiam: opt("loss_simsiam", f[6])?,
                loss_ssql: opt("loss_ssql", f[7])?,
                wall_secs: 0.0,
            })
        })
        .collect()
}

/// Separate streams for augmentation/shuffling and bit sampling, so runs
/// that differ only in whether they quantize see identical views.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRng {
    pub data: ChaCha8Rng,
    pub bits: ChaCha8Rng,
}

impl TrainRng {
    pub fn new(seed: u64) -> Self {
        let mut data = ChaCha8Rng::seed_from_u64(seed);
        data.set_stream(0);
        let mut bits = ChaCha8Rng::seed_from_u64(seed);
        bits.set_stream(1);
        Self { data, bits }
    }
}

/// Everything that evolves during pretraining.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub sgd: SgdState,
    pub rng: TrainRng,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        Self {
            params,
            sgd: SgdState::default(),
            rng: TrainRng::new(seed),
            step: 0,
        }
    }
}

/// Per-view encoder outputs of one step, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct StepCapture {
    /// Full-precision encoder outputs.
    pub z: [Tensor; 2],
    /// Quantized-encoder outputs at the step's sampled bits.
    pub zq: [Tensor; 2],
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    pub capture: Option<StepCapture>,
}

struct Branch {
    z: [Var; 2],
    p: Option<[Var; 2]>,
}

/// One optimizer step on the images `indices` of `dataset.train`.
///
/// Order: augment two views, full-precision forward, sample bits, quantized
/// forward as the loss toggles require, loss, backward (straight-through onto
/// the shared weights), SGD. The quantized view of the next step is rebuilt
/// from the updated weights.
pub fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    lr: Float,
    epoch: usize,
    capture: bool,
) -> Result<StepOutput> {
    let started = Instant::now();
    let shape = dataset.shape;
    let (mut v1, mut v2) = (
        Vec::with_capacity(indices.len()),
        Vec::with_capacity(indices.len()),
    );
    for &i in indices {
        let (a, b) = augment_two_views(
            dataset.train.image(i),
            shape,
            &mut state.rng.data,
            &cfg.augment,
        );
        v1.push(a);
        v2.push(b);
    }
    let x1 = dataset.normalized_batch(v1.iter().map(Vec::as_slice))?;
    let x2 = dataset.normalized_batch(v2.iter().map(Vec::as_slice))?;
    let (w_bits, a_bits) = sample_bits(&cfg.bits, &mut state.rng.bits);

    let mut stats = std::mem::take(&mut state.params.stats);
    let result = forward_backward(
        &state.params,
        &mut stats,
        cfg,
        [x1, x2],
        (w_bits, a_bits),
        capture,
    );
    state.params.stats = stats;
    let (loss, fp_term, q_term, grads, captured) = result?;

    let step = state.step;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            diagnostics: format!(
                "loss={loss} fp_term={fp_term:?} q_term={q_term:?} bits={w_bits}w{a_bits}a lr={lr}"
            ),
        });
    }
    sgd_step(
        state.params.tensors_mut(),
        &grads,
        lr,
        cfg.momentum,
        cfg.weight_decay(),
        &mut state.sgd,
    )?;
    state.step += 1;
    let quantized = cfg.loss.variant.uses_quantization();
    Ok(StepOutput {
        metrics: StepMetrics {
            step,
            epoch,
            w_bits: if quantized { w_bits } else { 0 },
            a_bits: if quantized { a_bits } else { 0 },
            lr,
            loss,
            loss_simsiam: fp_term,
            loss_ssql: q_term,
            wall_secs: started.elapsed().as_secs_f64(),
        },
        capture: captured,
    })
}

type StepValues = (
    Float,
    Option<Float>,
    Option<Float>,
    Vec<Option<Tensor>>,
    Option<StepCapture>,
);

fn forward_backward(
    params: &ModelParams,
    stats: &mut [crate::tensor::RunningStats],
    cfg: &TrainConfig,
    [x1, x2]: [Tensor; 2],
    (w_bits, a_bits): (u32, u32),
    capture: bool,
) -> Result<StepValues> {
    let spec = params.spec();
    let lc = &cfg.loss;
    let variant = lc.variant;
    let nce = variant == LossVariant::SsqlNce;
    let quantized = variant.uses_quantization();
    let needs_q_branch = quantized && (lc.quantize_pred || lc.quantize_target);
    let needs_fp_pred = !nce && (lc.aux() || !lc.quantize_pred || !quantized);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| true);
    let x = [tape.constant(x1), tape.constant(x2)];

    let mut bn = BnUse::TrainUpdate(stats);
    let z = [
        forward_encoder(&mut tape, spec, &bound, &mut bn, None, x[0])?,
        forward_encoder(&mut tape, spec, &bound, &mut bn, None, x[1])?,
    ];
    let p = if needs_fp_pred {
        Some([
            forward_predictor(&mut tape, &bound, &mut bn, z[0])?,
            forward_predictor(&mut tape, &bound, &mut bn, z[1])?,
        ])
    } else {
        None
    };
    let fp = Branch { z, p };

    let view = psq_refresh(params, &cfg.plan(w_bits, a_bits));
    let mut frozen = BnUse::TrainFrozen;
    let q = if needs_q_branch || capture {
        let zq = [
            forward_encoder(&mut tape, spec, &bound, &mut frozen, Some(&view), x[0])?,
            forward_encoder(&mut tape, spec, &bound, &mut frozen, Some(&view), x[1])?,
        ];
        let pq = if nce || !lc.quantize_pred {
            None
        } else {
            Some([
                forward_predictor(&mut tape, &bound, &mut frozen, zq[0])?,
                forward_predictor(&mut tape, &bound, &mut frozen, zq[1])?,
            ])
        };
        Some(Branch { z: zq, p: pq })
    } else {
        None
    };

    let (fp_term, q_term) = if nce {
        let fp_term = if lc.aux() {
            Some(info_nce_loss(&mut tape, fp.z[0], fp.z[1], lc.temperature)?)
        } else {
            None
        };
        let q = q.as_ref().expect("quantized branch present for NCE");
        let anchors = if lc.quantize_pred { q.z } else { fp.z };
        let targets = if lc.quantize_target { q.z } else { fp.z };
        let t = [
            tape.stop_gradient(targets[0]),
            tape.stop_gradient(targets[1]),
        ];
        let q_term = match lc.nce_negatives {
            NceNegatives::FullPrecision => cross_nce_loss(
                &mut tape,
                anchors[0],
                anchors[1],
                t[0],
                t[1],
                lc.temperature,
            )?,
            NceNegatives::Quantized => {
                let n = [tape.stop_gradient(q.z[0]), tape.stop_gradient(q.z[1])];
                cross_nce_loss_with_negatives(
                    &mut tape,
                    (anchors[0], anchors[1]),
                    (t[0], t[1]),
                    (n[0], n[1]),
                    lc.temperature,
                )?
            }
        };
        (fp_term, Some(q_term))
    } else if !quantized {
        let p = fp.p.expect("fp predictions present");
        (
            Some(simsiam_loss(&mut tape, p[0], p[1], fp.z[0], fp.z[1])?),
            None,
        )
    } else {
        let fp_term = if lc.aux() {
            let p = fp.p.expect("fp predictions present");
            Some(simsiam_loss(&mut tape, p[0], p[1], fp.z[0], fp.z[1])?)
        } else {
            None
        };
        let pred = match (&q, lc.quantize_pred) {
            (Some(q), true) => q.p.expect("quantized predictions present"),
            _ => fp.p.expect("fp predictions present"),
        };
        let target = match (&q, lc.quantize_target) {
            (Some(q), true) => q.z,
            _ => fp.z,
        };
        (
            fp_term,
            Some(ssql_loss(
                &mut tape, pred[0], pred[1], target[0], target[1],
            )?),
        )
    };
    let loss = match (fp_term, q_term) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("every variant has at least one loss term"),
    };
    let value = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]);
    let (fp_value, q_value) = (value(fp_term), value(q_term));
    let loss_value = tape.value(loss).data()[0];

    let captured = match (capture, &q) {
        (true, Some(q)) => Some(StepCapture {
            z: [tape.value(fp.z[0]).clone(), tape.value(fp.z[1]).clone()],
            zq: [tape.value(q.z[0]).clone(), tape.value(q.z[1]).clone()],
        }),
        _ => None,
    };

    if loss_value.is_finite() {
        tape.backward(loss)?;
    }
    let grads = bound
        .vars()
        .iter()
        .map(|&v| tape.grad(v).cloned())
        .collect();
    Ok((loss_value, fp_value, q_value, grads, captured))
}

/// Correlation between per-sample quantization and contrastive errors over
/// one window of sample pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationPoint {
    pub step: usize,
    pub r: Float,
}

/// Output of [`pretrain`].
#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub decomposition: Vec<(usize, DecompositionRecord)>,
    pub correlation: Vec<CorrelationPoint>,
}

/// Number of optimizer steps per epoch.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Runs `cfg.epochs` epochs of `ceil(N / B)` steps over `dataset.train`,
/// reshuffling every epoch. `on_epoch` sees the state after each epoch.
pub fn pretrain(
    dataset: &Dataset,
    params: ModelParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &TrainState) -> Result<()>,
) -> Result<PretrainRun> {
    cfg.validate()?;
    dataset.validate()?;
    if params.spec().input != dataset.shape {
        return Err(Error::Dimension {
            op: "pretrain",
            lhs: params.spec().input.to_vec(),
            rhs: dataset.shape.to_vec(),
        });
    }
    let n = dataset.train.len();
    if cfg.epochs > 0 && (n == 0 || n % cfg.batch_size == 1 || n == 1) {
        return Err(Error::DegenerateBatch { batch: 1 });
    }
    let per_epoch = steps_per_epoch(n, cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let lr0 = cfg.lr();
    let window = if cfg.diag_window == 0 {
        cfg.batch_size
    } else {
        cfg.diag_window
    };
    let mut state = TrainState::new(params, cfg.seed);
    let mut metrics = Vec::with_capacity(total);
    let mut decomposition = Vec::new();
    let mut correlation = Vec::new();
    let (mut q_err, mut c_err) = (Vec::new(), Vec::new());
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut state.rng.data);
        for batch in order.chunks(cfg.batch_size) {
            let step = state.step;
            let capture = cfg.diag_every > 0 && step.is_multiple_of(cfg.diag_every);
            let lr = cosine_lr(lr0, step, total);
            let out = train_step(&mut state, dataset, batch, cfg, lr, epoch, capture)?;
            if let Some(c) = out.capture {
                let rec = diag::decompose_embeddings(
                    &diag::stack_rows(&c.zq[0], &c.zq[1]),
                    &diag::stack_rows(&c.z[0], &c.z[1]),
                    &diag::stack_rows(&c.z[1], &c.z[0]),
                )?;
                q_err.extend_from_slice(&rec.q_errors);
                c_err.extend_from_slice(&rec.cl_errors);
                decomposition.push((step, rec));
                while q_err.len() >= window {
                    let r = diag::pearson(&q_err[..window], &c_err[..window]);
                    correlation.push(CorrelationPoint { step, r });
                    q_err.drain(..window);
                    c_err.drain(..window);
                }
            }
            metrics.push(out.metrics);
        }
        on_epoch(epoch + 1, &state)?;
    }
    Ok(PretrainRun {
        state,
        metrics,
        decomposition,
        correlation,
    })
}
