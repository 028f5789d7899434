//! Weighted bag-of-words encoding of assignment maps, query regions and the sum-pooling baseline.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptors::PcaModel;
use crate::error::{Error, Result};
use crate::scalar::{l2_norm, l2_normalize, Scalar};
use crate::tensorio::Tensor;
use crate::vocab::{upsample_query, AssignmentMap, Vocabulary};
use crate::weighting::{make_weights, SaliencySource, WeightContext, WeightMap, WeightingScheme};

/// L2-normalised sparse histogram over a `K`-word vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseBow<S> {
    pub image_id: String,
    #[serde(rename = "K")]
    k: usize,
    /// `(word, weight)` with strictly increasing words and positive weights.
    entries: Vec<(u32, S)>,
}

impl<S: Scalar> SparseBow<S> {
    /// Validates and wraps already-sorted entries. Weights are stored as given.
    pub fn from_entries(image_id: impl Into<String>, k: usize, entries: Vec<(u32, S)>) -> Result<Self> {
        for pair in entries.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::InvalidParameter(format!(
                    "sparse entries not strictly increasing at word {}",
                    pair[1].0
                )));
            }
        }
        if let Some(&(w, _)) = entries.iter().find(|(w, _)| *w as usize >= k) {
            return Err(Error::InvalidParameter(format!("word {w} outside vocabulary of {k}")));
        }
        if entries.iter().any(|(_, v)| !(v.is_finite() && *v > S::zero())) {
            return Err(Error::InvalidParameter(
                "sparse weights must be finite and positive".into(),
            ));
        }
        Ok(SparseBow {
            image_id: image_id.into(),
            k,
            entries,
        })
    }

    pub fn empty(image_id: impl Into<String>, k: usize) -> Self {
        SparseBow {
            image_id: image_id.into(),
            k,
            entries: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[(u32, S)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.entries.iter().map(|e| e.1).collect::<Vec<_>>())
    }

    /// Sparse dot product accumulated in `f64`.
    pub fn dot(&self, other: &SparseBow<S>) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut acc = 0.0;
        while let (Some(x), Some(y)) = (a.peek(), b.peek()) {
            match x.0.cmp(&y.0) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    acc += x.1.wide() * y.1.wide();
                    a.next();
                    b.next();
                }
            }
        }
        acc
    }

    /// Dense `K`-vector, mainly for oracles.
    pub fn to_dense(&self) -> Vec<S> {
        let mut dense = vec![S::zero(); self.k];
        for &(w, v) in &self.entries {
            dense[w as usize] = v;
        }
        dense
    }
}

/// Sums `(word, weight)` contributions into an L2-normalised histogram.
/// Words whose total weight is zero are dropped.
pub fn encode_cells<S: Scalar>(
    image_id: impl Into<String>,
    k: usize,
    cells: impl IntoIterator<Item = (u32, S)>,
) -> Result<SparseBow<S>> {
    let mut contributions: Vec<(u32, f64)> = Vec::new();
    for (w, v) in cells {
        if w as usize >= k {
            return Err(Error::InvalidParameter(format!("word {w} outside vocabulary of {k}")));
        }
        if !(v.is_finite() && v >= S::zero()) {
            return Err(Error::InvalidParameter(
                "cell weights must be finite and non-negative".into(),
            ));
        }
        contributions.push((w, v.wide()));
    }
    contributions.sort_by_key(|c| c.0);
    let mut summed: Vec<(u32, f64)> = Vec::new();
    for (w, v) in contributions {
        match summed.last_mut() {
            Some(last) if last.0 == w => last.1 += v,
            _ => summed.push((w, v)),
        }
    }
    summed.retain(|e| e.1 > 0.0);
    let norm = summed.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
    let entries = summed
        .into_iter()
        .map(|(w, v)| (w, S::of(v / norm)))
        .filter(|e| e.1 > S::zero())
        .collect();
    Ok(SparseBow {
        image_id: image_id.into(),
        k,
        entries,
    })
}

/// `h_k = Σ weight(i, j)` over cells assigned word `k`, then L2-normalised.
pub fn encode<S: Scalar>(
    image_id: impl Into<String>,
    assignment: &AssignmentMap,
    weights: &WeightMap<S>,
    k: usize,
) -> Result<SparseBow<S>> {
    if (assignment.rows(), assignment.cols()) != (weights.rows(), weights.cols()) {
        return Err(Error::Shape(format!(
            "assignment map {}x{} vs weight map {}x{}",
            assignment.rows(),
            assignment.cols(),
            weights.rows(),
            weights.cols()
        )));
    }
    encode_cells(
        image_id,
        k,
        assignment
            .words()
            .iter()
            .copied()
            .zip(weights.weights().iter().copied()),
    )
}

/// Query bounding box in original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryRegion {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub width: usize,
    pub height: usize,
}

impl QueryRegion {
    pub fn new(bbox: [f64; 4], width: usize, height: usize) -> Result<Self> {
        let [x_min, y_min, x_max, y_max] = bbox;
        let ok = width >= 1
            && height >= 1
            && bbox.iter().all(|v| v.is_finite())
            && 0.0 <= x_min
            && x_min < x_max
            && x_max <= width as f64
            && 0.0 <= y_min
            && y_min < y_max
            && y_max <= height as f64;
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "bounding box {bbox:?} invalid for a {width}x{height} image"
            )));
        }
        Ok(QueryRegion {
            x_min,
            y_min,
            x_max,
            y_max,
            width,
            height,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        QueryRegion {
            x_min: 0.0,
            y_min: 0.0,
            x_max: width as f64,
            y_max: height as f64,
            width,
            height,
        }
    }

    /// Rows and columns of a `rows × cols` grid covered by the box, rounded outwards.
    /// A box that would cover no cell is widened to one cell.
    pub fn grid_cells(&self, rows: usize, cols: usize) -> (Range<usize>, Range<usize>) {
        let span = |lo: f64, hi: f64, extent: usize, cells: usize| {
            let scale = cells as f64 / extent as f64;
            let mut start = ((lo * scale).floor().max(0.0) as usize).min(cells);
            let mut end = ((hi * scale).ceil().max(0.0) as usize).min(cells);
            if end <= start {
                if start >= cells {
                    start = cells - 1;
                }
                end = start + 1;
            }
            start..end
        };
        (
            span(self.y_min, self.y_max, self.height, rows),
            span(self.x_min, self.x_max, self.width, cols),
        )
    }
}

/// Per-image inputs to encoding.
#[derive(Debug, Clone, Copy)]
pub struct ImageInputs<'a, S> {
    /// Raw `M × N × D` activations.
    pub features: &'a Tensor<S>,
    pub saliency: Option<SaliencySource<'a, S>>,
    pub image_path: Option<&'a Path>,
    /// Original `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl<'a, S: Scalar> ImageInputs<'a, S> {
    pub fn new(features: &'a Tensor<S>, width: usize, height: usize) -> Self {
        ImageInputs {
            features,
            saliency: None,
            image_path: None,
            image_size: (width, height),
        }
    }

    fn context(&self, raw: &'a Tensor<S>, rows: usize, cols: usize) -> WeightContext<'a, S> {
        WeightContext {
            rows,
            cols,
            raw_features: Some(raw),
            saliency: self.saliency,
            image_path: self.image_path,
            image_size: self.image_size,
        }
    }
}

/// Database-side encoding: post-process, quantise, weight, histogram.
pub fn encode_image<S: Scalar>(
    image_id: impl Into<String>,
    inputs: &ImageInputs<'_, S>,
    pca: &PcaModel<S>,
    vocab: &Vocabulary<S>,
    scheme: &WeightingScheme,
) -> Result<SparseBow<S>> {
    let (m, n, _) = inputs.features.shape3()?;
    let assignment = vocab.assign_map(&pca.postprocess_map(inputs.features)?)?;
    let weights = make_weights(scheme, &inputs.context(inputs.features, m, n))?;
    encode(image_id, &assignment, &weights, vocab.k())
}

/// Query-side encoding on the ×2 upsampled grid, restricted to `region` when given.
/// Weights are computed on the whole upsampled grid before cropping.
pub fn encode_query<S: Scalar>(
    image_id: impl Into<String>,
    inputs: &ImageInputs<'_, S>,
    region: Option<&QueryRegion>,
    pca: &PcaModel<S>,
    vocab: &Vocabulary<S>,
    scheme: &WeightingScheme,
) -> Result<SparseBow<S>> {
    let upsampled = upsample_query(inputs.features)?;
    let (m, n, _) = upsampled.shape3()?;
    let assignment = vocab.assign_map(&pca.postprocess_map(&upsampled)?)?;
    let weights = make_weights(scheme, &inputs.context(&upsampled, m, n))?;
    let region = region
        .copied()
        .unwrap_or_else(|| QueryRegion::full(inputs.image_size.0, inputs.image_size.1));
    encode_region(image_id, &assignment, &weights, &region, vocab.k())
}

/// Histogram over the cells of `region` only.
pub fn encode_region<S: Scalar>(
    image_id: impl Into<String>,
    assignment: &AssignmentMap,
    weights: &WeightMap<S>,
    region: &QueryRegion,
    k: usize,
) -> Result<SparseBow<S>> {
    let (m, n) = (assignment.rows(), assignment.cols());
    if (m, n) != (weights.rows(), weights.cols()) {
        return Err(Error::Shape(format!(
            "assignment map {m}x{n} vs weight map {}x{}",
            weights.rows(),
            weights.cols()
        )));
    }
    let (rows, cols) = region.grid_cells(m, n);
    let cells = rows.flat_map(|i| cols.clone().map(move |j| (i, j)));
    encode_cells(
        image_id,
        k,
        cells.map(|(i, j)| (assignment.get(i, j), weights.get(i, j))),
    )
}

/// Dense global descriptor from weighted sum pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDescriptor<S> {
    pub image_id: String,
    pub values: Vec<S>,
}

/// `Σ weight(i, j) · x(i, j, ·)`, L2-normalised (a zero sum stays zero).
pub fn sum_pool<S: Scalar>(
    image_id: impl Into<String>,
    raw_features: &Tensor<S>,
    weights: &WeightMap<S>,
) -> Result<DenseDescriptor<S>> {
    let (m, n, d) = raw_features.shape3()?;
    if (m, n) != (weights.rows(), weights.cols()) {
        return Err(Error::Shape(format!(
            "feature grid {m}x{n} vs weight map {}x{}",
            weights.rows(),
            weights.cols()
        )));
    }
    let mut acc = vec![0.0f64; d];
    for (x, w) in raw_features.data().chunks_exact(d).zip(weights.weights()) {
        for (a, v) in acc.iter_mut().zip(x) {
            *a += w.wide() * v.wide();
        }
    }
    let mut values: Vec<S> = acc.into_iter().map(S::of).collect();
    l2_normalize(&mut values);
    Ok(DenseDescriptor {
        image_id: image_id.into(),
        values,
    })
}

/// Debug dump: one `{"image_id", "K", "entries": [[word, weight], …]}` object per line.
pub fn write_bows_jsonl<S: Scalar>(path: impl AsRef<Path>, bows: &[SparseBow<S>]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for bow in bows {
        let line = serde_json::to_string(bow).expect("bow serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
