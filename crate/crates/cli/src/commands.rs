use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use blcf::bow::{encode_image, encode_query, write_bows_jsonl, ImageInputs, QueryRegion};
use blcf::descriptors::{fit_pca as fit, load_pca, save_pca, PcaModel};
use blcf::evalkit::{evaluate, parse_groundtruth, EvalOptions, GroundTruthStyle, QueryGroundTruth};
use blcf::index::{build_index, read_index, write_index, IndexHeader, InvertedIndex};
use blcf::scalar::l2_normalize;
use blcf::tensorio::{read_manifest, read_tensor, write_tensor, ImageMeta, Tensor};
use blcf::vocab::{load_vocabulary, save_vocabulary, train_vocabulary, SearchMode, TrainParams, Vocabulary};
use blcf::weighting::bms_saliency;
use blcf::weighting::SaliencySource;
use blcf::{SparseBow, WeightingScheme};
use log::info;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::corpus::Corpus;
use crate::provenance::{check_link, config_hash, file_digest};
use crate::{
    AqeArgs, ArtifactOverrides, DumpArgs, EvalArgs, FitPcaArgs, IndexArgs, ModeArg, QueryArgs, SaliencyArgs,
    TrainVocabArgs, ValidationError,
};

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn inputs_for<'a>(meta: &'a ImageMeta, features: &'a Tensor<f32>) -> ImageInputs<'a, f32> {
    ImageInputs {
        features,
        saliency: meta.saliency_path.as_deref().map(SaliencySource::Path),
        image_path: meta.image_path.as_deref(),
        image_size: (meta.width, meta.height),
    }
}

pub fn fit_pca(args: &FitPcaArgs) -> Result<()> {
    let corpus = Corpus::scan(&args.manifest)?;
    let dim = corpus.dim;
    let out_dim = args.out_dim.unwrap_or(dim);
    info!(
        "{} images, {} locations, D = {dim}; sampling up to {}",
        corpus.entries.len(),
        corpus.total_locations(),
        args.sample_cap
    );
    let mut samples = corpus.sample(args.sample_cap, args.seed)?;
    samples.par_chunks_exact_mut(dim).for_each(|x| {
        l2_normalize(x);
    });
    let samples: Vec<f32> = samples
        .chunks_exact(dim)
        .filter(|x| x.iter().any(|&v| v != 0.0))
        .flatten()
        .copied()
        .collect();
    let model = fit(&samples, dim, out_dim, args.epsilon)?;
    let hash = config_hash(&json!({
        "stage": "pca",
        "manifest": file_digest(&args.manifest)?,
        "out_dim": out_dim,
        "sample_cap": args.sample_cap,
        "seed": args.seed,
        "epsilon": args.epsilon,
    }));
    let files = save_pca(&args.out, &model, Some(args.seed), Some(hash))?;
    info!(
        "PCA {dim} -> {out_dim} on {} descriptors written to {}",
        samples.len() / dim,
        display(&files.sidecar)
    );
    Ok(())
}

pub fn train_vocab(args: &TrainVocabArgs) -> Result<()> {
    let corpus = Corpus::scan(&args.manifest)?;
    let (pca, pca_meta) = load_pca::<f32>(&args.pca)?;
    if pca.in_dim() != corpus.dim {
        bail!(ValidationError(format!(
            "PCA expects {}-D descriptors but the manifest holds {}-D maps",
            pca.in_dim(),
            corpus.dim
        )));
    }
    let raw = corpus.sample(args.sample_cap, args.seed)?;
    let out_dim = pca.out_dim();
    let processed: Vec<Vec<f32>> = raw
        .par_chunks_exact(corpus.dim)
        .filter(|x| x.iter().any(|&v| v != 0.0))
        .map(|x| pca.postprocess(x))
        .collect();
    let samples = processed.concat();
    let mode = match args.mode {
        ModeArg::Exact => SearchMode::Exact,
        ModeArg::Approximate => SearchMode::Approximate { probes: args.probes },
    };
    let params = TrainParams {
        k: args.k,
        max_iters: args.iters,
        seed: args.seed,
        mode,
    };
    info!("training K = {} on {} descriptors ({mode:?})", args.k, processed.len());
    let vocab = train_vocabulary(&samples, out_dim, &params)?;
    for (i, objective) in vocab.objective_history.iter().enumerate() {
        info!("iteration {}: objective {objective:.6}", i + 1);
    }
    let hash = config_hash(&json!({
        "stage": "vocab",
        "manifest": file_digest(&args.manifest)?,
        "pca": pca_meta.config_hash,
        "k": args.k,
        "iters": args.iters,
        "seed": args.seed,
        "sample_cap": args.sample_cap,
        "mode": mode,
    }));
    save_vocabulary(&args.out, &vocab, Some(hash), pca_meta.config_hash)?;
    info!(
        "vocabulary written after {} iterations, objective {:.6}",
        vocab.iterations_run, vocab.final_objective
    );
    Ok(())
}

pub fn index(args: &IndexArgs) -> Result<()> {
    let entries = read_manifest(&args.manifest)?;
    let (pca, pca_meta) = load_pca::<f32>(&args.pca)?;
    let (vocab, vocab_meta) = load_vocabulary::<f32>(&args.vocab)?;
    check_link(
        "PCA",
        vocab_meta.pca_config_hash.as_deref(),
        pca_meta.config_hash.as_deref(),
        args.force,
    )?;
    if vocab.dim() != pca.out_dim() {
        bail!(ValidationError(format!(
            "vocabulary is {}-D but PCA outputs {}-D",
            vocab.dim(),
            pca.out_dim()
        )));
    }
    let scheme = args.weighting.scheme();
    info!("encoding {} images with {} weighting", entries.len(), scheme.name());
    let bows: Vec<SparseBow<f32>> = entries
        .par_iter()
        .map(|meta| {
            let encode = || -> Result<SparseBow<f32>> {
                let features = read_tensor(&meta.tensor_path)?;
                let (_, _, d) = features.shape3()?;
                if d != pca.in_dim() {
                    bail!(ValidationError(format!(
                        "descriptor dimension {d} differs from the PCA input dimension {}",
                        pca.in_dim()
                    )));
                }
                Ok(encode_image(
                    meta.image_id.clone(),
                    &inputs_for(meta, &features),
                    &pca,
                    &vocab,
                    &scheme,
                )?)
            };
            encode().with_context(|| format!("image {}", meta.image_id))
        })
        .collect::<Result<_>>()?;
    let index = build_index(vocab.k(), bows)?;

    let scheme_json = serde_json::to_value(scheme).expect("scheme serializes");
    let hash = config_hash(&json!({
        "stage": "index",
        "manifest": file_digest(&args.manifest)?,
        "pca": pca_meta.config_hash,
        "vocab": vocab_meta.config_hash,
        "weighting": scheme_json,
    }));
    let mut meta = Map::new();
    meta.insert("config_hash".into(), hash.into());
    meta.insert("manifest".into(), display(&args.manifest).into());
    meta.insert("pca".into(), display(&args.pca).into());
    meta.insert("pca_config_hash".into(), json!(pca_meta.config_hash));
    meta.insert("vocab".into(), display(&args.vocab).into());
    meta.insert("vocab_config_hash".into(), json!(vocab_meta.config_hash));
    meta.insert("seed".into(), vocab_meta.seed.into());
    meta.insert("weighting".into(), scheme_json);
    write_index(&args.out, &index, meta)?;
    info!(
        "indexed {} images, {:.1} non-zero words per image, written to {}",
        index.doc_count(),
        index.mean_words_per_doc(),
        display(&args.out)
    );
    Ok(())
}

/// An index with the models and manifest it was built from.
struct SearchSetup {
    index: InvertedIndex<f32>,
    header: IndexHeader,
    pca: PcaModel<f32>,
    vocab: Vocabulary<f32>,
    manifest: Vec<ImageMeta>,
    scheme: WeightingScheme,
}

impl SearchSetup {
    fn load(index_path: &Path, overrides: &ArtifactOverrides) -> Result<Self> {
        let (index, header) = read_index::<f32>(index_path)?;
        let text = |key: &str| header.meta.get(key).and_then(Value::as_str).map(str::to_owned);
        let path_for = |key: &str, given: &Option<PathBuf>| -> Result<PathBuf> {
            match (given, text(key)) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(p)) => Ok(PathBuf::from(p)),
                (None, None) => bail!(ValidationError(format!(
                    "{}: header does not record a {key} path; pass --{key}",
                    display(index_path)
                ))),
            }
        };
        let (pca, pca_meta) = load_pca::<f32>(path_for("pca", &overrides.pca)?)?;
        let (vocab, vocab_meta) = load_vocabulary::<f32>(path_for("vocab", &overrides.vocab)?)?;
        let manifest = read_manifest(path_for("manifest", &overrides.manifest)?)?;
        check_link(
            "PCA",
            text("pca_config_hash").as_deref(),
            pca_meta.config_hash.as_deref(),
            overrides.force,
        )?;
        check_link(
            "vocabulary",
            text("vocab_config_hash").as_deref(),
            vocab_meta.config_hash.as_deref(),
            overrides.force,
        )?;
        if vocab.k() != index.k() {
            bail!(ValidationError(format!(
                "index has K = {} but the vocabulary has K = {}",
                index.k(),
                vocab.k()
            )));
        }
        let scheme = match header.meta.get("weighting") {
            Some(v) => serde_json::from_value(v.clone())
                .with_context(|| format!("{}: bad weighting entry", display(index_path)))?,
            None => WeightingScheme::None,
        };
        Ok(SearchSetup {
            index,
            header,
            pca,
            vocab,
            manifest,
            scheme,
        })
    }

    fn encode_query(&self, query_id: &str, meta: &ImageMeta, bbox: Option<[f64; 4]>) -> blcf::Result<SparseBow<f32>> {
        let features = read_tensor(&meta.tensor_path)?;
        let region = bbox.map(|b| QueryRegion::new(b, meta.width, meta.height)).transpose()?;
        encode_query(
            query_id,
            &inputs_for(meta, &features),
            region.as_ref(),
            &self.pca,
            &self.vocab,
            &self.scheme,
        )
    }

    fn echo(&self, index_path: &Path, aqe: &AqeArgs) -> Map<String, Value> {
        let mut echo = Map::new();
        echo.insert("index".into(), display(index_path).into());
        echo.insert("index_config_hash".into(), json!(self.header.meta.get("config_hash")));
        echo.insert("K".into(), self.index.k().into());
        echo.insert("doc_count".into(), self.index.doc_count().into());
        echo.insert(
            "weighting".into(),
            serde_json::to_value(self.scheme).expect("scheme serializes"),
        );
        echo.insert("seed".into(), json!(self.header.meta.get("seed")));
        echo.insert("aqe".into(), aqe.aqe.into());
        echo.insert("aqe_n".into(), aqe.aqe_n.into());
        echo.insert("aqe_include_query".into(), aqe.aqe_include_query.into());
        echo
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    fs::write(path, text + "\n").with_context(|| format!("writing {}", display(path)))
}

pub fn query(args: &QueryArgs) -> Result<()> {
    let setup = SearchSetup::load(&args.index, &args.overrides)?;
    let meta = match (&args.image_id, &args.tensor) {
        (Some(id), _) => setup
            .manifest
            .iter()
            .find(|m| &m.image_id == id)
            .cloned()
            .ok_or_else(|| ValidationError(format!("image {id} is not in the manifest")))?,
        (None, Some(tensor)) => ImageMeta {
            image_id: "query".into(),
            width: args.width.expect("clap enforces --width"),
            height: args.height.expect("clap enforces --height"),
            tensor_path: tensor.clone(),
            saliency_path: args.saliency.clone(),
            image_path: args.image.clone(),
        },
        (None, None) => bail!(ValidationError("pass --image-id or --tensor".into())),
    };
    let bbox = args.bbox.as_ref().map(|b| [b[0], b[1], b[2], b[3]]);
    let q = setup
        .encode_query(&meta.image_id, &meta, bbox)
        .with_context(|| format!("query {}", meta.image_id))?;
    let mut ranked = setup.index.query(&q, setup.index.doc_count())?;
    if args.aqe.aqe {
        let expanded = setup
            .index
            .expand_query(&q, &ranked, args.aqe.aqe_n, args.aqe.aqe_include_query)?;
        ranked = setup.index.query(&expanded, setup.index.doc_count())?;
    }
    ranked.items.truncate(args.top);
    let mut echo = setup.echo(&args.index, &args.aqe);
    echo.insert("image_id".into(), meta.image_id.clone().into());
    echo.insert("bbox".into(), json!(bbox));
    write_json(&args.out, &json!({ "query": echo, "results": ranked }))?;
    info!("{} results written to {}", ranked.len(), display(&args.out));
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let setup = SearchSetup::load(&args.index, &args.overrides)?;
    let gts = parse_groundtruth(&args.gt, GroundTruthStyle::Oxford)?;
    if gts.is_empty() {
        bail!(ValidationError(format!("{}: no *_query.txt files", display(&args.gt))));
    }
    let by_id: HashMap<&str, &ImageMeta> = setup.manifest.iter().map(|m| (m.image_id.as_str(), m)).collect();
    let encode = |gt: &QueryGroundTruth| -> blcf::Result<SparseBow<f32>> {
        let meta = by_id
            .get(gt.query_image_id.as_str())
            .ok_or_else(|| blcf::Error::Config(format!("query image {} is not in the manifest", gt.query_image_id)))?;
        setup.encode_query(&gt.query_id, meta, Some(gt.bbox))
    };
    let convention = args.ap_convention.into();
    let mut echo = setup.echo(&args.index, &args.aqe);
    echo.insert("gt".into(), display(&args.gt).into());
    echo.insert("style".into(), "oxford".into());
    echo.insert(
        "ap_convention".into(),
        serde_json::to_value(convention).expect("serializes"),
    );
    let options = EvalOptions {
        aqe: args.aqe.aqe,
        aqe_n: args.aqe.aqe_n,
        aqe_include_query: args.aqe.aqe_include_query,
        convention,
        config_echo: Value::Object(echo),
    };
    let report = evaluate(&setup.index, &gts, encode, &options);
    write_json(&args.report, &report)?;
    info!(
        "mAP {:.4} over {} queries ({} excluded), report written to {}",
        report.map,
        report.per_query.len(),
        report.excluded.len(),
        display(&args.report)
    );
    Ok(())
}

pub fn saliency(args: &SaliencyArgs) -> Result<()> {
    let rgb = image::open(&args.image)
        .map_err(|source| blcf::Error::Decode {
            path: args.image.clone(),
            source,
        })?
        .into_rgb8();
    let map = bms_saliency::<f32>(&rgb, &args.bms.params())?;
    let is_png = args.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let (h, w) = map.shape2()?;
        let pixels = map.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        let gray = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches size");
        gray.save(&args.out).map_err(|source| blcf::Error::Decode {
            path: args.out.clone(),
            source,
        })?;
    } else {
        write_tensor(&args.out, &map)?;
    }
    info!("saliency map {:?} written to {}", map.dims(), display(&args.out));
    Ok(())
}

pub fn dump(args: &DumpArgs) -> Result<()> {
    let (index, _) = read_index::<f32>(&args.index)?;
    let bows: Vec<SparseBow<f32>> = (0..index.doc_count()).map(|d| index.document(d)).collect();
    write_bows_jsonl(&args.out, &bows)?;
    info!("{} vectors written to {}", bows.len(), display(&args.out));
    Ok(())
}
