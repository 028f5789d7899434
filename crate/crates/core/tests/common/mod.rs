//! Synthetic planted-instance corpus built directly as feature maps.
//!
//! Every grid cell holds a noisy copy of one codeword, so quantisation against the codebook
//! recovers the planted word. Each database image shows one instance inside a rectangle and a
//! background "scene" elsewhere. Scenes are drawn independently of instances, which makes the
//! background a source of false matches that spatial weighting has to suppress.

#![allow(dead_code)]

use std::collections::BTreeSet;

use blcf::bow::{encode_image, encode_query, ImageInputs};
use blcf::descriptors::PcaModel;
use blcf::evalkit::{evaluate, EvalOptions, EvalReport, QueryGroundTruth};
use blcf::index::build_index;
use blcf::tensorio::Tensor;
use blcf::vocab::Vocabulary;
use blcf::weighting::{SaliencySource, SALIENCY_BLOCK};
use blcf::{SparseBow, WeightingScheme};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub instances: usize,
    pub per_instance: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub scenes: usize,
    pub scene_words: usize,
    /// Words an instance shows in its queries.
    pub query_words: usize,
    /// Words an instance shows in database images but never in queries.
    pub context_words: usize,
    /// Share of database images per instance that keep only one query word.
    pub hard_fraction: f64,
    /// Saliency outside the instance rectangle.
    pub background_saliency: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            instances: 30,
            per_instance: 10,
            rows: 12,
            cols: 16,
            dim: 32,
            scenes: 6,
            scene_words: 4,
            query_words: 6,
            context_words: 6,
            hard_fraction: 0.0,
            background_saliency: 0.1,
            noise: 0.05,
            seed: 7,
        }
    }
}

pub struct PlantedImage {
    pub image_id: String,
    pub features: Tensor<f64>,
    /// Pixel-resolution saliency: 1 inside the instance, `background_saliency` elsewhere.
    pub saliency: Tensor<f64>,
    /// Instance rectangle in grid cells, `[row0, col0, row1, col1)`.
    pub rect: [usize; 4],
}

impl PlantedImage {
    pub fn width(&self) -> usize {
        self.features.dims()[1] * SALIENCY_BLOCK
    }

    pub fn height(&self) -> usize {
        self.features.dims()[0] * SALIENCY_BLOCK
    }

    fn inputs(&self) -> ImageInputs<'_, f64> {
        let mut inputs = ImageInputs::new(&self.features, self.width(), self.height());
        inputs.saliency = Some(SaliencySource::Map(&self.saliency));
        inputs
    }
}

pub struct PlantedBenchmark {
    pub config: PlantedConfig,
    pub pca: PcaModel<f64>,
    pub vocab: Vocabulary<f64>,
    pub database: Vec<PlantedImage>,
    pub queries: Vec<PlantedImage>,
    pub ground_truth: Vec<QueryGroundTruth>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

struct Layout<'a> {
    rect: [usize; 4],
    inside: &'a [u32],
    /// Cells of the rectangle that must use `anchor` instead of `inside`.
    anchor: Option<(u32, usize)>,
    scene: &'a [u32],
}

impl PlantedBenchmark {
    pub fn generate(config: PlantedConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let per_instance = config.query_words + config.context_words;
        let k = config.instances * per_instance + config.scenes * config.scene_words;
        let codebook: Vec<f64> = (0..k).flat_map(|_| unit_gaussian(&mut rng, config.dim)).collect();
        let vocab = Vocabulary::from_centroids(codebook.clone(), config.dim).unwrap();
        let pca = PcaModel::identity(config.dim);

        let scene_words = |s: usize| -> Vec<u32> {
            let base = config.instances * per_instance + s * config.scene_words;
            (base..base + config.scene_words).map(|w| w as u32).collect()
        };
        let words_of = |inst: usize| -> (Vec<u32>, Vec<u32>) {
            let base = inst * per_instance;
            let q = (base..base + config.query_words).map(|w| w as u32).collect();
            let c = (base + config.query_words..base + per_instance)
                .map(|w| w as u32)
                .collect();
            (q, c)
        };

        let mut database = Vec::new();
        let mut queries = Vec::new();
        let mut ground_truth = Vec::new();
        for inst in 0..config.instances {
            let (qw, cw) = words_of(inst);
            let all: Vec<u32> = qw.iter().chain(&cw).copied().collect();
            let hard = (config.hard_fraction * config.per_instance as f64).round() as usize;
            let mut positives = BTreeSet::new();
            for n in 0..config.per_instance {
                let rect = centred_rect(&mut rng, &config);
                let scene = scene_words(rng.gen_range(0..config.scenes));
                let layout = if n < hard {
                    let anchor = *qw.choose(&mut rng).unwrap();
                    Layout {
                        rect,
                        inside: &cw,
                        anchor: Some((anchor, 3)),
                        scene: &scene,
                    }
                } else {
                    Layout {
                        rect,
                        inside: &all,
                        anchor: None,
                        scene: &scene,
                    }
                };
                let id = format!("inst{inst:02}_{n:02}");
                positives.insert(id.clone());
                database.push(render(&mut rng, &config, &codebook, id, &layout));
            }

            let rect = centred_rect(&mut rng, &config);
            let scene = scene_words(rng.gen_range(0..config.scenes));
            let layout = Layout {
                rect,
                inside: &qw,
                anchor: None,
                scene: &scene,
            };
            let query = render(&mut rng, &config, &codebook, format!("query{inst:02}"), &layout);
            // A loose box: the instance plus two cells of background on every side.
            let [r0, c0, r1, c1] = rect;
            let b = SALIENCY_BLOCK as f64;
            let bbox = [
                c0.saturating_sub(2) as f64 * b,
                r0.saturating_sub(2) as f64 * b,
                (c1 + 2).min(config.cols) as f64 * b,
                (r1 + 2).min(config.rows) as f64 * b,
            ];
            ground_truth.push(QueryGroundTruth {
                query_id: format!("q{inst:02}"),
                query_image_id: query.image_id.clone(),
                bbox,
                positives,
                junk: BTreeSet::new(),
                subset: None,
            });
            queries.push(query);
        }
        PlantedBenchmark {
            config,
            pca,
            vocab,
            database,
            queries,
            ground_truth,
        }
    }

    pub fn index(&self, scheme: &WeightingScheme) -> blcf::InvertedIndex<f64> {
        let bows: Vec<SparseBow<f64>> = self
            .database
            .par_iter()
            .map(|img| encode_image(img.image_id.clone(), &img.inputs(), &self.pca, &self.vocab, scheme).unwrap())
            .collect();
        build_index(self.vocab.k(), bows).unwrap()
    }

    pub fn evaluate(&self, scheme: &WeightingScheme, aqe: Option<usize>) -> EvalReport {
        let index = self.index(scheme);
        let encode = |gt: &QueryGroundTruth| {
            let query = self.queries.iter().find(|q| q.image_id == gt.query_image_id).unwrap();
            let region = blcf::QueryRegion::new(gt.bbox, query.width(), query.height())?;
            encode_query(
                gt.query_id.clone(),
                &query.inputs(),
                Some(&region),
                &self.pca,
                &self.vocab,
                scheme,
            )
        };
        let options = EvalOptions {
            aqe: aqe.is_some(),
            aqe_n: aqe.unwrap_or(10),
            ..EvalOptions::default()
        };
        evaluate(&index, &self.ground_truth, encode, &options)
    }
}

/// Rectangle of 4–5 rows and 5–6 columns whose centre sits within one cell of the grid centre.
fn centred_rect(rng: &mut ChaCha8Rng, config: &PlantedConfig) -> [usize; 4] {
    let h = rng.gen_range(4..=5);
    let w = rng.gen_range(5..=6);
    let r0 = ((config.rows - h) / 2) as i64 + rng.gen_range(-1..=1);
    let c0 = ((config.cols - w) / 2) as i64 + rng.gen_range(-1..=1);
    let r0 = r0.clamp(0, (config.rows - h) as i64) as usize;
    let c0 = c0.clamp(0, (config.cols - w) as i64) as usize;
    [r0, c0, r0 + h, c0 + w]
}

fn render(
    rng: &mut ChaCha8Rng,
    config: &PlantedConfig,
    codebook: &[f64],
    image_id: String,
    layout: &Layout<'_>,
) -> PlantedImage {
    let (rows, cols, dim) = (config.rows, config.cols, config.dim);
    let [r0, c0, r1, c1] = layout.rect;
    let mut anchored: BTreeSet<(usize, usize)> = BTreeSet::new();
    if let Some((_, count)) = layout.anchor {
        let mut cells: Vec<(usize, usize)> = (r0..r1).flat_map(|i| (c0..c1).map(move |j| (i, j))).collect();
        cells.shuffle(rng);
        anchored.extend(cells.into_iter().take(count));
    }
    let mut data = Vec::with_capacity(rows * cols * dim);
    for i in 0..rows {
        for j in 0..cols {
            let inside = (r0..r1).contains(&i) && (c0..c1).contains(&j);
            let word = match (inside, layout.anchor) {
                (true, Some((anchor, _))) if anchored.contains(&(i, j)) => anchor,
                (true, _) => *layout.inside.choose(rng).unwrap(),
                (false, _) => *layout.scene.choose(rng).unwrap(),
            } as usize;
            let scale = rng.gen_range(0.5..2.0);
            for &c in &codebook[word * dim..(word + 1) * dim] {
                let noise: f64 = StandardNormal.sample(&mut *rng);
                data.push(scale * (c + config.noise * noise));
            }
        }
    }
    let (h, w) = (rows * SALIENCY_BLOCK, cols * SALIENCY_BLOCK);
    let mut saliency = vec![config.background_saliency; h * w];
    for y in r0 * SALIENCY_BLOCK..r1 * SALIENCY_BLOCK {
        saliency[y * w + c0 * SALIENCY_BLOCK..y * w + c1 * SALIENCY_BLOCK].fill(1.0);
    }
    PlantedImage {
        image_id,
        features: Tensor::new(vec![rows, cols, dim], data).unwrap(),
        saliency: Tensor::new(vec![h, w], saliency).unwrap(),
        rect: layout.rect,
    }
}
