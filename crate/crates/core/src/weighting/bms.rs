//! Boolean Map Saliency.
//!
//! Each colour channel is thresholded at a ladder of levels. Every boolean map (and its
//! complement) contributes an attention map marking foreground regions that are not connected
//! to the image border. Attention maps are dilated, L2-normalised, averaged, blurred and
//! scaled to `[0, 1]`.

use std::collections::VecDeque;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorio::Tensor;

/// Thresholds per parallel work unit.
const THRESHOLDS_PER_TASK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmsParams {
    /// Spacing of the threshold ladder on the 0–255 channel scale.
    pub step: u32,
    /// Side of the square dilation kernel, in pixels.
    pub dilation_width: usize,
    /// Gaussian blur sigma in pixels; `None` means `0.02 · max(H, W)`.
    pub blur_sigma: Option<f64>,
    /// Standardise each channel (mean/std) before thresholding; `false` thresholds raw RGB.
    pub whiten: bool,
}

impl Default for BmsParams {
    fn default() -> Self {
        BmsParams {
            step: 8,
            dilation_width: 7,
            blur_sigma: None,
            whiten: true,
        }
    }
}

/// Full-resolution `H × W` saliency map in `[0, 1]`. A map with no surrounded regions at all
/// (e.g. a constant image) yields the uniform map of ones.
pub fn bms_saliency<S: Scalar>(image: &RgbImage, params: &BmsParams) -> Result<Tensor<S>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidParameter("empty image".into()));
    }
    if params.step == 0 || params.step > 255 {
        return Err(Error::InvalidParameter(format!(
            "BMS step {} outside 1..=255",
            params.step
        )));
    }
    if params.dilation_width == 0 {
        return Err(Error::InvalidParameter("BMS dilation width must be ≥ 1".into()));
    }

    let channels: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let raw: Vec<f64> = image.pixels().map(|p| f64::from(p.0[c])).collect();
            if params.whiten {
                standardize_to_byte_range(&raw)
            } else {
                raw
            }
        })
        .collect();
    let thresholds: Vec<f64> = (1..)
        .map(|k| f64::from(k * params.step))
        .take_while(|&t| t <= 255.0)
        .collect();

    let tasks: Vec<(usize, &[f64])> = (0..3)
        .flat_map(|c| thresholds.chunks(THRESHOLDS_PER_TASK).map(move |t| (c, t)))
        .collect();
    let partials: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(c, levels)| {
            let mut acc = vec![0.0f64; w * h];
            let mut mask = vec![false; w * h];
            for &theta in levels {
                for polarity in [true, false] {
                    for (m, &v) in mask.iter_mut().zip(&channels[c]) {
                        *m = (v > theta) == polarity;
                    }
                    let attention = dilate(&surrounded(&mask, w, h), w, h, params.dilation_width);
                    let ones = attention.iter().filter(|&&a| a).count();
                    if ones == 0 {
                        continue;
                    }
                    let inv_norm = 1.0 / (ones as f64).sqrt();
                    for (a, &on) in acc.iter_mut().zip(&attention) {
                        if on {
                            *a += inv_norm;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let map_count = (3 * thresholds.len() * 2) as f64;
    let mut mean = vec![0.0f64; w * h];
    for p in &partials {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= map_count);

    let sigma = params.blur_sigma.unwrap_or(0.02 * w.max(h) as f64);
    let blurred = gaussian_blur(&mean, w, h, sigma);
    let peak = blurred.iter().copied().fold(0.0f64, f64::max);
    let data: Vec<S> = if peak > 0.0 {
        blurred.iter().map(|&v| S::of((v / peak).clamp(0.0, 1.0))).collect()
    } else {
        vec![S::one(); w * h]
    };
    Tensor::new(vec![h, w], data)
}

/// Standardises a channel and maps the result linearly onto `[0, 255]`.
fn standardize_to_byte_range(raw: &[f64]) -> Vec<f64> {
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return vec![0.0; raw.len()];
    }
    let z: Vec<f64> = raw.iter().map(|v| (v - mean) / std).collect();
    let (lo, hi) = z.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    z.iter().map(|v| 255.0 * (v - lo) / (hi - lo)).collect()
}

/// Foreground pixels whose 4-connected component does not touch the image border.
pub(crate) fn surrounded(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut reached = vec![false; w * h];
    let mut queue = VecDeque::new();
    let seed = |idx: usize, reached: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        if mask[idx] && !reached[idx] {
            reached[idx] = true;
            queue.push_back(idx);
        }
    };
    for x in 0..w {
        seed(x, &mut reached, &mut queue);
        seed((h - 1) * w + x, &mut reached, &mut queue);
    }
    for y in 0..h {
        seed(y * w, &mut reached, &mut queue);
        seed(y * w + w - 1, &mut reached, &mut queue);
    }
    while let Some(idx) = queue.pop_front() {
        let (y, x) = (idx / w, idx % w);
        if x > 0 {
            seed(idx - 1, &mut reached, &mut queue);
        }
        if x + 1 < w {
            seed(idx + 1, &mut reached, &mut queue);
        }
        if y > 0 {
            seed(idx - w, &mut reached, &mut queue);
        }
        if y + 1 < h {
            seed(idx + w, &mut reached, &mut queue);
        }
    }
    mask.iter().zip(&reached).map(|(&m, &r)| m && !r).collect()
}

/// Binary dilation with a `side × side` square structuring element.
pub(crate) fn dilate(mask: &[bool], w: usize, h: usize, side: usize) -> Vec<bool> {
    if side <= 1 {
        return mask.to_vec();
    }
    let before = side / 2;
    let after = side - 1 - before;
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        let row = &mask[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(after);
            let hi = (x + before).min(w - 1);
            horiz[y * w + x] = row[lo..=hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; w * h];
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(after);
            let hi = (y + before).min(h - 1);
            out[y * w + x] = (lo..=hi).any(|yy| horiz[yy * w + x]);
        }
    }
    out
}

/// Separable Gaussian blur with replicated borders. `sigma ≤ 0` is a no-op.
pub(crate) fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * src[y * w + clamp(x as isize + t as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[clamp(y as isize + t as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}
