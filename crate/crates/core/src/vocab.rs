//! Visual vocabulary training (k-means) and quantisation of feature maps into assignment maps.

use std::fs;
use std::path::{Path, PathBuf};

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample;
use crate::scalar::{squared_distance, Scalar};
use crate::tensorio::{read_tensor, write_tensor, Tensor};

/// Points per parallel work unit in the assignment step.
const ASSIGN_CHUNK: usize = 1024;

/// Nearest-centroid search used inside Lloyd iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SearchMode {
    Exact,
    /// Multi-probe search over a coarse k-means of the centroids. Each point scans the
    /// centroids of its `probes` nearest coarse cells plus its previous centroid.
    Approximate {
        probes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub mode: SearchMode,
}

impl TrainParams {
    pub fn new(k: usize, seed: u64) -> Self {
        TrainParams {
            k,
            max_iters: 50,
            seed,
            mode: SearchMode::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary<S> {
    centroids: Vec<S>,
    k: usize,
    dim: usize,
    pub seed: u64,
    pub iterations_run: usize,
    /// Sum of squared distances from each training point to its centroid.
    pub final_objective: f64,
    /// Objective after every assignment step.
    pub objective_history: Vec<f64>,
}

impl<S: Scalar> Vocabulary<S> {
    /// Wraps an explicit `k × dim` centroid matrix.
    pub fn from_centroids(centroids: Vec<S>, dim: usize) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not form a non-empty set of {dim}-vectors",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "centroids".into(),
            });
        }
        Ok(Vocabulary {
            k: centroids.len() / dim,
            centroids,
            dim,
            seed: 0,
            iterations_run: 0,
            final_objective: 0.0,
            objective_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[S] {
        &self.centroids
    }

    pub fn centroid(&self, word: usize) -> &[S] {
        &self.centroids[word * self.dim..(word + 1) * self.dim]
    }

    /// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[S]) -> (u32, S) {
        nearest_exact(&self.centroids, self.dim, x)
    }

    /// Quantises every location of a post-processed `M × N × D` map.
    pub fn assign_map(&self, feature_map: &Tensor<S>) -> Result<AssignmentMap> {
        let (m, n, d) = feature_map.shape3()?;
        if d != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: d,
            });
        }
        let words = feature_map
            .data()
            .par_chunks_exact(d)
            .map(|x| self.nearest(x).0)
            .collect();
        AssignmentMap::new(m, n, words)
    }
}

fn nearest_exact<S: Scalar>(centroids: &[S], dim: usize, x: &[S]) -> (u32, S) {
    let mut best = (0u32, S::infinity());
    for (w, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (w as u32, d);
        }
    }
    best
}

/// Coarse partition of the centroid set used by approximate search.
struct CoarseCells<S> {
    centers: Vec<S>,
    members: Vec<Vec<u32>>,
    probes: usize,
}

impl<S: Scalar> CoarseCells<S> {
    fn build(centroids: &[S], dim: usize, probes: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = centroids.len() / dim;
        let cells = ((k as f64).sqrt().ceil() as usize).clamp(1, k);
        let mut centers = kmeans_pp_init(centroids, dim, cells, rng);
        let mut owner = vec![0u32; k];
        for _ in 0..5 {
            for (w, c) in centroids.chunks_exact(dim).enumerate() {
                owner[w] = nearest_exact(&centers, dim, c).0;
            }
            let (sums, counts) = cluster_sums(centroids, dim, &owner, cells);
            for (cell, count) in counts.iter().enumerate() {
                if *count > 0 {
                    for t in 0..dim {
                        centers[cell * dim + t] = S::of(sums[cell * dim + t] / *count as f64);
                    }
                }
            }
        }
        let mut members = vec![Vec::new(); cells];
        for (w, c) in centroids.chunks_exact(dim).enumerate() {
            members[nearest_exact(&centers, dim, c).0 as usize].push(w as u32);
        }
        CoarseCells {
            centers,
            members,
            probes: probes.clamp(1, cells),
        }
    }

    fn nearest(&self, centroids: &[S], dim: usize, x: &[S], previous: Option<u32>) -> (u32, S) {
        let mut cells: Vec<(S, usize)> = self
            .centers
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, c)| (squared_distance(x, c), i))
            .collect();
        cells.select_nth_unstable_by(self.probes - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        let mut best = (u32::MAX, S::infinity());
        let mut consider = |w: u32| {
            let c = &centroids[w as usize * dim..(w as usize + 1) * dim];
            let d = squared_distance(x, c);
            if d < best.1 || (d == best.1 && w < best.0) {
                best = (w, d);
            }
        };
        for &(_, cell) in &cells[..self.probes] {
            self.members[cell].iter().copied().for_each(&mut consider);
        }
        if let Some(p) = previous {
            consider(p);
        }
        best
    }
}

fn kmeans_pp_init<S: Scalar>(samples: &[S], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<S> {
    let n = samples.len() / dim;
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut chosen = Vec::with_capacity(k);
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    chosen.push(first);
    centroids.extend_from_slice(row(first));
    let mut closest: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| squared_distance(row(i), row(first)).wide())
        .collect();
    while chosen.len() < k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            while closest[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        } else {
            // Every point coincides with a chosen centroid; fall back to an unused index.
            let mut pick = rng.gen_range(0..n);
            while chosen.contains(&pick) && chosen.len() < n {
                pick = (pick + 1) % n;
            }
            pick
        };
        chosen.push(pick);
        let c = row(pick).to_vec();
        centroids.extend_from_slice(&c);
        closest.par_iter_mut().enumerate().for_each(|(i, d)| {
            *d = d.min(squared_distance(row(i), &c).wide());
        });
    }
    centroids
}

/// Per-cluster coordinate sums in `f64` and member counts, accumulated in point order.
fn cluster_sums<S: Scalar>(samples: &[S], dim: usize, assignment: &[u32], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &a) in samples.chunks_exact(dim).zip(assignment) {
        let a = a as usize;
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(x) {
            *s += v.wide();
        }
    }
    (sums, counts)
}

/// Lloyd iterations from a seeded k-means++ start.
///
/// `samples` is a flat row-major list of `dim`-vectors. Stops after `max_iters` assignment
/// steps or as soon as an assignment step changes nothing. Clusters that lose all their points
/// are moved onto the points farthest from their current centroids.
pub fn train_vocabulary<S: Scalar>(samples: &[S], dim: usize, params: &TrainParams) -> Result<Vocabulary<S>> {
    let k = params.k;
    if k == 0 {
        return Err(Error::InvalidParameter("vocabulary size K must be ≥ 1".into()));
    }
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "{} values do not split into {dim}-vectors",
            samples.len()
        )));
    }
    let n = samples.len() / dim;
    if n < k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    if params.max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be ≥ 1".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "k-means samples".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_pp_init(samples, dim, k, &mut rng);
    let mut assignment = vec![u32::MAX; n];
    let mut distances = vec![0.0f64; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;

    for iter in 0..params.max_iters {
        let changed = assign_step(
            samples,
            dim,
            &centroids,
            params.mode,
            &mut rng,
            &mut assignment,
            &mut distances,
        );
        let objective: f64 = distances.iter().sum();
        debug!("k-means iteration {iter}: objective {objective:.6}, {changed} changes");
        history.push(objective);
        iterations_run = iter + 1;
        if changed == 0 {
            converged = true;
            break;
        }
        update_step(samples, dim, k, &assignment, &distances, &mut centroids);
    }
    if !converged {
        assign_step(
            samples,
            dim,
            &centroids,
            params.mode,
            &mut rng,
            &mut assignment,
            &mut distances,
        );
        history.push(distances.iter().sum());
    }

    Ok(Vocabulary {
        centroids,
        k,
        dim,
        seed: params.seed,
        iterations_run,
        final_objective: *history.last().unwrap(),
        objective_history: history,
    })
}

/// Reassigns every point; returns how many assignments changed.
fn assign_step<S: Scalar>(
    samples: &[S],
    dim: usize,
    centroids: &[S],
    mode: SearchMode,
    rng: &mut ChaCha8Rng,
    assignment: &mut [u32],
    distances: &mut [f64],
) -> usize {
    let coarse = match mode {
        SearchMode::Exact => None,
        SearchMode::Approximate { probes } => Some(CoarseCells::build(centroids, dim, probes, rng)),
    };
    samples
        .par_chunks(ASSIGN_CHUNK * dim)
        .zip(assignment.par_chunks_mut(ASSIGN_CHUNK))
        .zip(distances.par_chunks_mut(ASSIGN_CHUNK))
        .map(|((block, assigned), dist)| {
            let mut changed = 0;
            for ((x, a), d) in block.chunks_exact(dim).zip(assigned.iter_mut()).zip(dist.iter_mut()) {
                let previous = (*a != u32::MAX).then_some(*a);
                let (w, best) = match &coarse {
                    None => nearest_exact(centroids, dim, x),
                    Some(cells) => cells.nearest(centroids, dim, x, previous),
                };
                if Some(w) != previous {
                    changed += 1;
                }
                *a = w;
                *d = best.wide();
            }
            changed
        })
        .sum()
}

fn update_step<S: Scalar>(
    samples: &[S],
    dim: usize,
    k: usize,
    assignment: &[u32],
    distances: &[f64],
    centroids: &mut [S],
) {
    let (sums, counts) = cluster_sums(samples, dim, assignment, k);
    let mut empty = Vec::new();
    for (cluster, &count) in counts.iter().enumerate() {
        if count == 0 {
            empty.push(cluster);
            continue;
        }
        for t in 0..dim {
            centroids[cluster * dim + t] = S::of(sums[cluster * dim + t] / count as f64);
        }
    }
    if empty.is_empty() {
        return;
    }
    let mut far: Vec<usize> = (0..assignment.len()).collect();
    far.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    for (cluster, point) in empty.into_iter().zip(far) {
        debug!("k-means: reseeding empty cluster {cluster} at point {point}");
        centroids[cluster * dim..(cluster + 1) * dim].copy_from_slice(&samples[point * dim..(point + 1) * dim]);
    }
}

/// `M × N` grid of visual word ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMap {
    rows: usize,
    cols: usize,
    words: Vec<u32>,
}

impl AssignmentMap {
    pub fn new(rows: usize, cols: usize, words: Vec<u32>) -> Result<Self> {
        if rows == 0 || cols == 0 || words.len() != rows * cols {
            return Err(Error::Shape(format!(
                "assignment map {rows}x{cols} with {} cells",
                words.len()
            )));
        }
        Ok(AssignmentMap { rows, cols, words })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.words[i * self.cols + j]
    }
}

/// Bilinear ×2 upsampling of a raw `M × N × D` map with corner-aligned sampling.
pub fn upsample_query<S: Scalar>(feature_map: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n, d) = feature_map.shape3()?;
    let data = resample::bilinear(feature_map.data(), m, n, d, 2 * m, 2 * n);
    Tensor::new(vec![2 * m, 2 * n, d], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSidecar {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub seed: u64,
    pub iterations_run: usize,
    pub final_objective: f64,
    #[serde(default)]
    pub objective_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Config hash of the PCA model the training samples went through.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca_config_hash: Option<String>,
}

pub fn vocab_paths(prefix: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = prefix.as_ref().as_os_str();
    let mut tensor = p.to_owned();
    tensor.push(".blcf");
    let mut json = p.to_owned();
    json.push(".json");
    (tensor.into(), json.into())
}

pub fn save_vocabulary<S: Scalar>(
    prefix: impl AsRef<Path>,
    vocab: &Vocabulary<S>,
    config_hash: Option<String>,
    pca_config_hash: Option<String>,
) -> Result<()> {
    let (tensor_path, json_path) = vocab_paths(prefix);
    write_tensor(
        &tensor_path,
        &Tensor::new(vec![vocab.k, vocab.dim], vocab.centroids.clone())?,
    )?;
    let sidecar = VocabSidecar {
        k: vocab.k,
        dim: vocab.dim,
        seed: vocab.seed,
        iterations_run: vocab.iterations_run,
        final_objective: vocab.final_objective,
        objective_history: vocab.objective_history.clone(),
        config_hash,
        pca_config_hash,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
}

pub fn read_vocab_sidecar(prefix: impl AsRef<Path>) -> Result<VocabSidecar> {
    let (_, json_path) = vocab_paths(prefix);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: json_path,
        message: e.to_string(),
    })
}

pub fn load_vocabulary<S: Scalar>(prefix: impl AsRef<Path>) -> Result<(Vocabulary<S>, VocabSidecar)> {
    let (tensor_path, _) = vocab_paths(&prefix);
    let sidecar = read_vocab_sidecar(&prefix)?;
    let tensor = read_tensor(&tensor_path)?;
    if tensor.dims() != [sidecar.k, sidecar.dim] {
        return Err(Error::Parse {
            path: tensor_path,
            message: format!(
                "centroid tensor {:?} disagrees with sidecar K={} D={}",
                tensor.dims(),
                sidecar.k,
                sidecar.dim
            ),
        });
    }
    let mut vocab = Vocabulary::from_centroids(tensor.cast::<S>().into_data(), sidecar.dim)?;
    vocab.seed = sidecar.seed;
    vocab.iterations_run = sidecar.iterations_run;
    vocab.final_objective = sidecar.final_objective;
    vocab.objective_history = sidecar.objective_history.clone();
    Ok((vocab, sidecar))
}
