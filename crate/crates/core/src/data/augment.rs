//! Stochastic input augmentation.
//!
//! Image ops (random resized crop, horizontal flip, color jitter, grayscale)
//! act on channel-major `[0, 1]` images. Vector inputs have no spatial or
//! color structure; for them the jitter strengths act on the whole vector
//! (brightness scales it, contrast scales it about its mean) and
//! `feature_noise` adds per-coordinate Gaussian noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{InputShape, LabeledExample};
use crate::error::{Error, Result};
use crate::rng::{stable_hash, RngStreams, AUGMENT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    ContrastivePretrain,
    ProbeFinetune,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub name: PolicyName,
    /// Crop area as a fraction of the image; `(1, 1)` disables cropping.
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub feature_noise: f64,
}

impl AugmentationPolicy {
    pub fn identity(name: PolicyName) -> Self {
        Self {
            name,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            feature_noise: 0.0,
        }
    }

    pub fn none() -> Self {
        Self::identity(PolicyName::None)
    }

    /// Resized crop, flip, color jitter and grayscale for pre-training views.
    pub fn contrastive_pretrain() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            feature_noise: 0.5,
            ..Self::identity(PolicyName::ContrastivePretrain)
        }
    }

    /// Flip and crop only, for classifier training.
    pub fn probe_finetune() -> Self {
        Self {
            crop_scale: (0.64, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            ..Self::identity(PolicyName::ProbeFinetune)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.jitter_prob, self.grayscale_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("augmentation probabilities must lie in [0, 1]"));
        }
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) || self.crop_ratio.0 <= 0.0 || self.crop_ratio.0 > self.crop_ratio.1 {
            return Err(Error::config("crop scale must satisfy 0 < lo ≤ hi ≤ 1 and ratio 0 < lo ≤ hi"));
        }
        if [self.brightness, self.contrast, self.saturation, self.feature_noise].iter().any(|s| *s < 0.0) {
            return Err(Error::config("jitter strengths must be nonnegative"));
        }
        let colorless = self.jitter_prob == 0.0 && self.grayscale_prob == 0.0 && self.feature_noise == 0.0;
        match self.name {
            PolicyName::ProbeFinetune if !colorless => {
                Err(Error::config("probe-finetune policy admits only flip and crop"))
            }
            PolicyName::None if *self != Self::none() => Err(Error::config("policy none must be the identity")),
            _ => Ok(()),
        }
    }
}

/// Resamples the `[top, left, height, width]` window of a channel-major image
/// to `out_h × out_w` with bilinear interpolation (half-pixel centers, edge
/// clamping).
fn resample(
    img: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    window: (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let (top, left, win_h, win_w) = window;
    let mut out = vec![0.0; channels * out_h * out_w];
    let sample = |c: usize, y: f64, x: f64| {
        let y = y.clamp(0.0, (height - 1) as f64);
        let x = x.clamp(0.0, (width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(height - 1), (x0 + 1).min(width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let px = |yy: usize, xx: usize| img[(c * height + yy) * width + xx];
        (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x1)) + fy * ((1.0 - fx) * px(y1, x0) + fx * px(y1, x1))
    };
    for c in 0..channels {
        for oy in 0..out_h {
            let y = top + (oy as f64 + 0.5) * win_h / out_h as f64 - 0.5;
            for ox in 0..out_w {
                let x = left + (ox as f64 + 0.5) * win_w / out_w as f64 - 0.5;
                out[(c * out_h + oy) * out_w + ox] = sample(c, y, x);
            }
        }
    }
    out
}

/// Bilinear resize of a whole channel-major image. Returns the input
/// unchanged when the size already matches.
pub fn bilinear_resize(img: &[f64], channels: usize, height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if (height, width) == (out_h, out_w) {
        return img.to_vec();
    }
    resample(img, channels, height, width, (0.0, 0.0, height as f64, width as f64), out_h, out_w)
}

/// Resizes every example to `target × target`.
pub fn resize_inputs(shape: InputShape, examples: &[LabeledExample], target: usize) -> Result<(InputShape, Vec<LabeledExample>)> {
    let InputShape::Image { channels, height, width } = shape else {
        return Err(Error::Misuse("resize_inputs needs image inputs".into()));
    };
    if target == 0 {
        return Err(Error::config("target size must be positive"));
    }
    let resized = examples
        .iter()
        .map(|e| LabeledExample { input: bilinear_resize(&e.input, channels, height, width, target, target), ..e.clone() })
        .collect();
    Ok((InputShape::Image { channels, height: target, width: target }, resized))
}

fn random_crop_window(rng: &mut impl Rng, height: usize, width: usize, policy: &AugmentationPolicy) -> (f64, f64, f64, f64) {
    let area = (height * width) as f64;
    let (lo, hi) = policy.crop_scale;
    let (rlo, rhi) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * if hi > lo { rng.random_range(lo..hi) } else { lo };
        let ratio = if rhi > rlo { rng.random_range(rlo..rhi) } else { rlo }.exp();
        let w = (target * ratio).sqrt();
        let h = (target / ratio).sqrt();
        if w <= width as f64 && h <= height as f64 {
            let top = rng.random_range(0.0..=(height as f64 - h));
            let left = rng.random_range(0.0..=(width as f64 - w));
            return (top, left, h, w);
        }
    }
    (0.0, 0.0, height as f64, width as f64)
}

fn factor(rng: &mut impl Rng, strength: f64) -> f64 {
    rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
}

fn augment_image(
    x: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut img = x.to_vec();
    if policy.crop_scale.0 < 1.0 {
        let window = random_crop_window(rng, height, width, policy);
        img = resample(&img, channels, height, width, window, height, width);
    }
    if rng.random_bool(policy.flip_prob) {
        for c in 0..channels {
            for y in 0..height {
                img[(c * height + y) * width..(c * height + y + 1) * width].reverse();
            }
        }
    }
    let plane = height * width;
    let gray = |img: &[f64], i: usize| {
        if channels == 3 {
            0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i]
        } else {
            img[i]
        }
    };
    if rng.random_bool(policy.jitter_prob) {
        if policy.brightness > 0.0 {
            let b = factor(rng, policy.brightness);
            img.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
        }
        if policy.contrast > 0.0 {
            let c = factor(rng, policy.contrast);
            let mean = (0..plane).map(|i| gray(&img, i)).sum::<f64>() / plane as f64;
            img.iter_mut().for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
        }
        if policy.saturation > 0.0 && channels == 3 {
            let s = factor(rng, policy.saturation);
            for i in 0..plane {
                let g = gray(&img, i);
                for c in 0..3 {
                    let v = &mut img[c * plane + i];
                    *v = ((*v - g) * s + g).clamp(0.0, 1.0);
                }
            }
        }
    }
    if channels == 3 && rng.random_bool(policy.grayscale_prob) {
        for i in 0..plane {
            let g = gray(&img, i);
            for c in 0..3 {
                img[c * plane + i] = g;
            }
        }
    }
    img
}

fn augment_vector(x: &[f64], policy: &AugmentationPolicy, rng: &mut impl Rng) -> Vec<f64> {
    let mut v = x.to_vec();
    if rng.random_bool(policy.jitter_prob) {
        if policy.brightness > 0.0 {
            let b = factor(rng, policy.brightness);
            v.iter_mut().for_each(|x| *x *= b);
        }
        if policy.contrast > 0.0 {
            let c = factor(rng, policy.contrast);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x = (*x - mean) * c + mean);
        }
    }
    if policy.feature_noise > 0.0 {
        v.iter_mut().for_each(|x| *x += policy.feature_noise * rng.sample::<f64, _>(StandardNormal));
    }
    v
}

/// One stochastic draw of `policy` applied to `x`.
pub fn augment(x: &[f64], shape: InputShape, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if x.len() != shape.len() {
        return Err(Error::shape(format!("input of {} values for shape {shape:?}", x.len())));
    }
    if policy.name == PolicyName::None {
        return Ok(x.to_vec());
    }
    Ok(match shape {
        InputShape::Image { channels, height, width } => augment_image(x, channels, height, width, policy, rng),
        InputShape::Vector { .. } => augment_vector(x, policy, rng),
    })
}

/// Anchor and positive views of one sample. Each view draws from its own
/// stream keyed by `(seed, source_id, epoch, view)`, so results do not depend
/// on processing order or worker count.
pub fn augment_pair(
    x: &[f64],
    shape: InputShape,
    policy: &AugmentationPolicy,
    streams: &RngStreams,
    source_id: &str,
    epoch: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if policy.name != PolicyName::ContrastivePretrain {
        return Err(Error::Misuse(format!("augment_pair needs the contrastive-pretrain policy, got {:?}", policy.name)));
    }
    let id = stable_hash(source_id.as_bytes());
    let anchor = augment(x, shape, policy, &mut streams.stream(AUGMENT, &[id, epoch, 0]))?;
    let positive = augment(x, shape, policy, &mut streams.stream(AUGMENT, &[id, epoch, 1]))?;
    Ok((anchor, positive))
}
