//! Spatial weight maps on the assignment grid.

mod bms;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bms::{bms_saliency, BmsParams};

use crate::error::{Error, Result};
use crate::scalar::{l2_norm, Scalar};
use crate::tensorio::{read_saliency, Tensor};

/// Side of the pixel blocks that map onto one feature-map cell.
pub const SALIENCY_BLOCK: usize = 16;

/// Default Gaussian centre-prior spread, as a fraction of each grid dimension.
pub const DEFAULT_SIGMA_FRAC: f64 = 1.0 / 3.0;

/// `M × N` non-negative weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap<S> {
    rows: usize,
    cols: usize,
    weights: Vec<S>,
}

impl<S: Scalar> WeightMap<S> {
    pub fn new(rows: usize, cols: usize, weights: Vec<S>) -> Result<Self> {
        if rows == 0 || cols == 0 || weights.len() != rows * cols {
            return Err(Error::Shape(format!(
                "weight map {rows}x{cols} with {} cells",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= S::zero() && *w <= S::one())) {
            return Err(Error::InvalidParameter("weights must lie in [0, 1]".into()));
        }
        Ok(WeightMap { rows, cols, weights })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.weights[i * self.cols + j]
    }

    /// Divides by the maximum; an all-zero map becomes uniform ones.
    fn from_raw_max_normalized(rows: usize, cols: usize, mut raw: Vec<S>) -> Self {
        let peak = raw.iter().copied().fold(S::zero(), S::max);
        if peak > S::zero() {
            raw.iter_mut().for_each(|v| *v = (*v / peak).min(S::one()));
        } else {
            raw.iter_mut().for_each(|v| *v = S::one());
        }
        WeightMap {
            rows,
            cols,
            weights: raw,
        }
    }
}

pub fn uniform_weights<S: Scalar>(rows: usize, cols: usize) -> Result<WeightMap<S>> {
    WeightMap::new(rows, cols, vec![S::one(); rows * cols])
}

/// Gaussian centre prior with per-axis sigma `sigma_frac · M` and `sigma_frac · N`.
/// Even-sized grids have no centre cell, so the map is scaled to peak at exactly 1.
pub fn gaussian_weights<S: Scalar>(rows: usize, cols: usize, sigma_frac: f64) -> Result<WeightMap<S>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("grid {rows}x{cols}")));
    }
    if !sigma_frac.is_finite() || sigma_frac <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma_frac {sigma_frac} must be positive"
        )));
    }
    let (si, sj) = (sigma_frac * rows as f64, sigma_frac * cols as f64);
    let (ci, cj) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let raw = (0..rows)
        .flat_map(|i| {
            (0..cols).map(move |j| {
                let di = i as f64 - ci;
                let dj = j as f64 - cj;
                S::of((-(di * di / (2.0 * si * si) + dj * dj / (2.0 * sj * sj))).exp())
            })
        })
        .collect();
    Ok(WeightMap::from_raw_max_normalized(rows, cols, raw))
}

/// Norm of each local descriptor of a raw `M × N × D` map, divided by the largest norm.
pub fn l2norm_weights<S: Scalar>(raw_features: &Tensor<S>) -> Result<WeightMap<S>> {
    let (m, n, d) = raw_features.shape3()?;
    let norms = raw_features.data().chunks_exact(d).map(|x| S::of(l2_norm(x))).collect();
    Ok(WeightMap::from_raw_max_normalized(m, n, norms))
}

/// Max-pools an `H' × W'` saliency map onto an `M × N` grid.
///
/// Block sides are `ceil(H'/M)` and `ceil(W'/N)`; trailing partial blocks are kept and blocks
/// falling entirely outside the map are zero. The result is divided by its maximum.
pub fn downsample_saliency<S: Scalar>(saliency: &Tensor<S>, rows: usize, cols: usize) -> Result<WeightMap<S>> {
    let pooled = block_max(saliency, rows, cols)?;
    Ok(WeightMap::from_raw_max_normalized(rows, cols, pooled))
}

/// Unnormalised block maxima behind [`downsample_saliency`].
pub(crate) fn block_max<S: Scalar>(saliency: &Tensor<S>, rows: usize, cols: usize) -> Result<Vec<S>> {
    let (h, w) = saliency.shape2()?;
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("grid {rows}x{cols}")));
    }
    let bh = h.div_ceil(rows);
    let bw = w.div_ceil(cols);
    let data = saliency.data();
    let mut pooled = vec![S::zero(); rows * cols];
    for i in 0..rows {
        let ys = (i * bh).min(h)..((i + 1) * bh).min(h);
        for j in 0..cols {
            let xs = (j * bw).min(w)..((j + 1) * bw).min(w);
            let mut best = S::zero();
            for y in ys.clone() {
                for &v in &data[y * w + xs.start..y * w + xs.end] {
                    best = best.max(v);
                }
            }
            pooled[i * cols + j] = best;
        }
    }
    Ok(pooled)
}

/// Which spatial weighting to apply before histogramming.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightingScheme {
    #[default]
    None,
    Gaussian {
        sigma_frac: f64,
    },
    L2norm,
    /// Externally produced saliency map, read from the manifest's `saliency_path`.
    #[serde(rename = "saliency")]
    SaliencyFile,
    Bms(BmsParams),
}

impl WeightingScheme {
    pub fn name(&self) -> &'static str {
        match self {
            WeightingScheme::None => "none",
            WeightingScheme::Gaussian { .. } => "gaussian",
            WeightingScheme::L2norm => "l2norm",
            WeightingScheme::SaliencyFile => "saliency",
            WeightingScheme::Bms(_) => "bms",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SaliencySource<'a, S> {
    Path(&'a Path),
    Map(&'a Tensor<S>),
}

/// Everything a scheme may need to produce weights for one grid.
#[derive(Debug, Clone, Copy)]
pub struct WeightContext<'a, S> {
    pub rows: usize,
    pub cols: usize,
    /// Raw (not post-processed) feature map on the same grid.
    pub raw_features: Option<&'a Tensor<S>>,
    pub saliency: Option<SaliencySource<'a, S>>,
    /// RGB image for on-the-fly BMS.
    pub image_path: Option<&'a Path>,
    /// Original image `(width, height)`; saliency images are read at this size.
    pub image_size: (usize, usize),
}

impl<'a, S> WeightContext<'a, S> {
    pub fn grid(rows: usize, cols: usize) -> Self {
        WeightContext {
            rows,
            cols,
            raw_features: None,
            saliency: None,
            image_path: None,
            image_size: (cols * SALIENCY_BLOCK, rows * SALIENCY_BLOCK),
        }
    }
}

pub fn make_weights<S: Scalar>(scheme: &WeightingScheme, ctx: &WeightContext<'_, S>) -> Result<WeightMap<S>> {
    match scheme {
        WeightingScheme::None => uniform_weights(ctx.rows, ctx.cols),
        WeightingScheme::Gaussian { sigma_frac } => gaussian_weights(ctx.rows, ctx.cols, *sigma_frac),
        WeightingScheme::L2norm => {
            let raw = ctx
                .raw_features
                .ok_or_else(|| Error::Config("l2norm weighting needs the raw feature map".into()))?;
            let (m, n, _) = raw.shape3()?;
            if (m, n) != (ctx.rows, ctx.cols) {
                return Err(Error::Shape(format!(
                    "feature map grid {m}x{n} differs from weight grid {}x{}",
                    ctx.rows, ctx.cols
                )));
            }
            l2norm_weights(raw)
        }
        WeightingScheme::SaliencyFile => {
            let source = ctx
                .saliency
                .ok_or_else(|| Error::Config("saliency weighting needs a saliency_path".into()))?;
            let map = match source {
                SaliencySource::Map(t) => return downsample_saliency(t, ctx.rows, ctx.cols),
                SaliencySource::Path(p) => read_saliency::<S>(p, ctx.image_size.0, ctx.image_size.1)?,
            };
            downsample_saliency(&map, ctx.rows, ctx.cols)
        }
        WeightingScheme::Bms(params) => {
            let path = ctx
                .image_path
                .ok_or_else(|| Error::Config("bms weighting needs an image_path".into()))?;
            let rgb = image::open(path)
                .map_err(|source| Error::Decode {
                    path: path.to_path_buf(),
                    source,
                })?
                .into_rgb8();
            let saliency = bms_saliency::<S>(&rgb, params)?;
            downsample_saliency(&saliency, ctx.rows, ctx.cols)
        }
    }
}
