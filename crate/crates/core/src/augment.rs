//! Stochastic view generation for multi-channel 1-D signals.
//!
//! A transform is a random window crop resampled back to full length, a
//! per-channel gain/offset jitter, and a Gaussian blur with reflective
//! padding. Outputs are clamped to the data range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InputShape, VALUE_MAX, VALUE_MIN};
use crate::error::{Error, Result};

/// Gain jitter amplitude at strength 1: gains are drawn from `1 ± 0.4`.
const GAIN_SPAN: f64 = 0.4;
/// Offset jitter amplitude at strength 1.
const OFFSET_SPAN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    pub crop_scale_range: (f64, f64),
    pub jitter_strength: f64,
    pub blur_sigma_range: (f64, f64),
    pub seed: u64,
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec { crop_scale_range: (1.0, 1.0), jitter_strength: 0.0, blur_sigma_range: (0.0, 0.0), seed: 0 }
    }

    /// Mild crops only: no jitter, no blur.
    pub fn weak() -> Self {
        TransformSpec { crop_scale_range: (0.85, 1.0), jitter_strength: 0.0, blur_sigma_range: (0.0, 0.0), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})")));
        }
        let (blo, bhi) = self.blur_sigma_range;
        if !(self.jitter_strength >= 0.0 && blo >= 0.0 && blo <= bhi) {
            return Err(Error::Config("jitter strength and blur sigmas must be nonnegative and ordered".into()));
        }
        Ok(())
    }
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec { crop_scale_range: (0.6, 1.0), jitter_strength: 0.5, blur_sigma_range: (0.0, 1.0), seed: 0 }
    }
}

/// One drawn transformation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub window_start: usize,
    pub window_len: usize,
    pub gains: Vec<f64>,
    pub offsets: Vec<f64>,
    pub blur_sigma: f64,
}

impl Transform {
    pub fn sample(spec: &TransformSpec, shape: InputShape, rng: &mut impl Rng) -> Self {
        let len = shape.length;
        let (lo, hi) = spec.crop_scale_range;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let window_len = ((scale * len as f64).round() as usize).clamp(2.min(len), len);
        let window_start = if window_len < len { rng.gen_range(0..=len - window_len) } else { 0 };
        let s = spec.jitter_strength;
        let mut gains = Vec::with_capacity(shape.channels);
        let mut offsets = Vec::with_capacity(shape.channels);
        for _ in 0..shape.channels {
            if s > 0.0 {
                gains.push(1.0 + GAIN_SPAN * s * rng.gen_range(-1.0..1.0));
                offsets.push(OFFSET_SPAN * s * rng.gen_range(-1.0..1.0));
            } else {
                gains.push(1.0);
                offsets.push(0.0);
            }
        }
        let (blo, bhi) = spec.blur_sigma_range;
        let blur_sigma = if bhi > blo { rng.gen_range(blo..bhi) } else { blo };
        Transform { window_start, window_len, gains, offsets, blur_sigma }
    }

    pub fn apply(&self, input: &[f64], shape: InputShape) -> Vec<f64> {
        let len = shape.length;
        let mut out = Vec::with_capacity(input.len());
        for (ch, signal) in input.chunks(len).enumerate() {
            let mut x = crop_resize(signal, self.window_start, self.window_len);
            let (g, o) = (self.gains[ch], self.offsets[ch]);
            if g != 1.0 || o != 0.0 {
                for v in x.iter_mut() {
                    *v = (g * *v + o).clamp(VALUE_MIN, VALUE_MAX);
                }
            }
            if self.blur_sigma > 1e-6 {
                x = gaussian_blur(&x, self.blur_sigma);
            }
            out.extend(x);
        }
        out
    }
}

/// Linear resampling of `signal[start..start + window]` back to `signal.len()` points.
pub fn crop_resize(signal: &[f64], start: usize, window: usize) -> Vec<f64> {
    let len = signal.len();
    if window >= len || len < 2 {
        return signal.to_vec();
    }
    let step = (window - 1) as f64 / (len - 1) as f64;
    (0..len)
        .map(|i| {
            let p = start as f64 + i as f64 * step;
            let lo = (p.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(start + window - 1);
            let frac = p - lo as f64;
            signal[lo] * (1.0 - frac) + signal[hi] * frac
        })
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Gaussian convolution with reflective padding; the kernel spans ±3σ.
pub fn gaussian_blur(signal: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    (0..signal.len() as isize)
        .map(|i| {
            kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(w, k)| w * signal[reflect(i + k, signal.len())])
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// Two independently transformed copies of `input`.
pub fn sample_views(input: &[f64], shape: InputShape, spec: &TransformSpec, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if input.len() != shape.size() {
        return Err(Error::Shape(format!("input has {} values, shape expects {}", input.len(), shape.size())));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("input contains non-finite values".into()));
    }
    let s = Transform::sample(spec, shape, rng);
    let t = Transform::sample(spec, shape, rng);
    Ok((s.apply(input, shape), t.apply(input, shape)))
}
