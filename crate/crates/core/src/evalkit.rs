//! Oxford-style ground truth and mean average precision.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bow::SparseBow;
use crate::error::{Error, Result};
use crate::index::{InvertedIndex, RankedList};
use crate::scalar::Scalar;

/// Prefix the Oxford and Paris distributions put in front of query image ids.
const OXFORD_QUERY_PREFIX: &str = "oxc1_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroundTruth {
    pub query_id: String,
    pub query_image_id: String,
    /// `[x_min, y_min, x_max, y_max]` in original-image pixels.
    pub bbox: [f64; 4],
    /// `good ∪ ok`.
    pub positives: BTreeSet<String>,
    pub junk: BTreeSet<String>,
    /// Images the query is ranked against; the whole corpus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthStyle {
    Oxford,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Reads every `<query>_query.txt` in `dir` together with its `_good`, `_ok` and `_junk`
/// companions (and an optional `_subset` list). Results are sorted by query id.
pub fn parse_groundtruth(dir: impl AsRef<Path>, style: GroundTruthStyle) -> Result<Vec<QueryGroundTruth>> {
    let GroundTruthStyle::Oxford = style;
    let dir = dir.as_ref();
    let mut queries: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.strip_suffix("_query.txt").map(str::to_owned)
        })
        .collect();
    queries.sort();

    let mut out = Vec::with_capacity(queries.len());
    for query_id in queries {
        let query_path = dir.join(format!("{query_id}_query.txt"));
        let line = read_lines(&query_path)?.into_iter().next().unwrap_or_default();
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |message: String| Error::Parse {
            path: query_path.clone(),
            message,
        };
        if fields.len() != 5 {
            return Err(bad(format!("expected `image x_min y_min x_max y_max`, got {line:?}")));
        }
        let mut bbox = [0.0; 4];
        for (slot, field) in bbox.iter_mut().zip(&fields[1..]) {
            *slot = field.parse().map_err(|_| bad(format!("bad coordinate {field:?}")))?;
        }
        let image = fields[0];
        let query_image_id = image.strip_prefix(OXFORD_QUERY_PREFIX).unwrap_or(image).to_owned();

        let list = |kind: &str| -> Result<BTreeSet<String>> {
            Ok(read_lines(&dir.join(format!("{query_id}_{kind}.txt")))?
                .into_iter()
                .collect())
        };
        let mut positives = list("good")?;
        positives.extend(list("ok")?);
        let junk = list("junk")?;
        if let Some(both) = positives.intersection(&junk).next() {
            return Err(bad(format!("{both} is listed both as positive and as junk")));
        }
        let subset_path = dir.join(format!("{query_id}_subset.txt"));
        let subset = if subset_path.exists() {
            Some(read_lines(&subset_path)?.into_iter().collect())
        } else {
            None
        };
        out.push(QueryGroundTruth {
            query_id,
            query_image_id,
            bbox,
            positives,
            junk,
            subset,
        });
    }
    Ok(out)
}

/// Writes ground truth in the layout [`parse_groundtruth`] reads. All positives go to `_good`.
pub fn write_groundtruth(dir: impl AsRef<Path>, gts: &[QueryGroundTruth]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    let join = |set: &BTreeSet<String>| set.iter().map(|s| format!("{s}\n")).collect::<String>();
    for gt in gts {
        let [a, b, c, d] = gt.bbox;
        write(
            format!("{}_query.txt", gt.query_id),
            format!("{} {a:?} {b:?} {c:?} {d:?}\n", gt.query_image_id),
        )?;
        write(format!("{}_good.txt", gt.query_id), join(&gt.positives))?;
        write(format!("{}_ok.txt", gt.query_id), String::new())?;
        write(format!("{}_junk.txt", gt.query_id), join(&gt.junk))?;
        if let Some(subset) = &gt.subset {
            write(format!("{}_subset.txt", gt.query_id), join(subset))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApConvention {
    /// Oxford reference: trapezoids between consecutive precision values, the precision before
    /// the first retrieved image taken as 1.
    #[default]
    Trapezoid,
    /// Mean of the precision values at each positive.
    Standard,
}

/// Average precision of a ranking, junk removed. `None` when there are no positives.
pub fn average_precision_ids<'a>(
    ranked: impl IntoIterator<Item = &'a str>,
    gt: &QueryGroundTruth,
    convention: ApConvention,
) -> Option<f64> {
    let positives = gt.positives.len();
    if positives == 0 {
        return None;
    }
    let p = positives as f64;
    let mut hits = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut prev_precision = 1.0;
    for id in ranked {
        if gt.junk.contains(id) {
            continue;
        }
        seen += 1;
        let hit = gt.positives.contains(id);
        if hit {
            hits += 1;
        }
        let precision = hits as f64 / seen as f64;
        if hit {
            ap += match convention {
                ApConvention::Trapezoid => (prev_precision + precision) / 2.0 / p,
                ApConvention::Standard => precision / p,
            };
        }
        prev_precision = precision;
    }
    Some(ap)
}

pub fn average_precision(ranked: &RankedList, gt: &QueryGroundTruth, convention: ApConvention) -> Option<f64> {
    average_precision_ids(ranked.ids(), gt, convention)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query_id: String,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_query: Vec<QueryAp>,
    pub map: f64,
    pub config_echo: serde_json::Value,
    /// Queries left out of the mean, with the reason.
    #[serde(default)]
    pub excluded: Vec<QueryFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub aqe: bool,
    pub aqe_n: usize,
    pub aqe_include_query: bool,
    pub convention: ApConvention,
    pub config_echo: serde_json::Value,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            aqe: false,
            aqe_n: 10,
            aqe_include_query: true,
            convention: ApConvention::Trapezoid,
            config_echo: serde_json::Value::Null,
        }
    }
}

/// Ranks the full corpus for every query, optionally re-queries with average query expansion,
/// and averages the resulting APs. `encode` turns a query into its sparse vector.
pub fn evaluate<S, F>(
    index: &InvertedIndex<S>,
    gts: &[QueryGroundTruth],
    encode: F,
    options: &EvalOptions,
) -> EvalReport
where
    S: Scalar,
    F: Fn(&QueryGroundTruth) -> Result<SparseBow<S>> + Sync,
{
    let outcomes: Vec<std::result::Result<f64, String>> = gts
        .par_iter()
        .map(|gt| {
            let q = encode(gt).map_err(|e| e.to_string())?;
            let ranked = rank(index, gt, &q).map_err(|e| e.to_string())?;
            let ranked = if options.aqe {
                let expanded = index
                    .expand_query(&q, &ranked, options.aqe_n, options.aqe_include_query)
                    .map_err(|e| e.to_string())?;
                rank(index, gt, &expanded).map_err(|e| e.to_string())?
            } else {
                ranked
            };
            average_precision(&ranked, gt, options.convention).ok_or_else(|| "no positives".to_owned())
        })
        .collect();

    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for (gt, outcome) in gts.iter().zip(outcomes) {
        match outcome {
            Ok(ap) => per_query.push(QueryAp {
                query_id: gt.query_id.clone(),
                average_precision: ap,
            }),
            Err(reason) => {
                warn!("query {} excluded: {reason}", gt.query_id);
                excluded.push(QueryFailure {
                    query_id: gt.query_id.clone(),
                    reason,
                });
            }
        }
    }
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|q| q.average_precision).sum::<f64>() / per_query.len() as f64
    };
    EvalReport {
        per_query,
        map,
        config_echo: options.config_echo.clone(),
        excluded,
    }
}

fn rank<S: Scalar>(index: &InvertedIndex<S>, gt: &QueryGroundTruth, q: &SparseBow<S>) -> Result<RankedList> {
    let mut ranked = index.query(q, index.doc_count())?;
    if let Some(subset) = &gt.subset {
        ranked.items.retain(|item| subset.contains(&item.image_id));
    }
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bow::encode_cells;
    use crate::index::build_index;

    fn gt(positives: &[&str], junk: &[&str]) -> QueryGroundTruth {
        QueryGroundTruth {
            query_id: "q".into(),
            query_image_id: "q".into(),
            bbox: [0.0, 0.0, 1.0, 1.0],
            positives: positives.iter().map(|s| s.to_string()).collect(),
            junk: junk.iter().map(|s| s.to_string()).collect(),
            subset: None,
        }
    }

    fn ap(ranking: &[&str], g: &QueryGroundTruth, c: ApConvention) -> f64 {
        average_precision_ids(ranking.iter().copied(), g, c).unwrap()
    }

    #[test]
    fn hand_walked_examples() {
        let g = gt(&["A", "C"], &[]);
        let t = ap(&["B", "A", "C"], &g, ApConvention::Trapezoid);
        assert!((t - 0.416_666_666_666_666_6).abs() < 1e-12, "{t}");
        let s = ap(&["B", "A", "C"], &g, ApConvention::Standard);
        assert!((s - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(ap(&["A", "C", "B"], &g, ApConvention::Trapezoid), 1.0);
        assert_eq!(ap(&["C", "A", "B"], &g, ApConvention::Standard), 1.0);

        let g = gt(&["A"], &["J1", "J2"]);
        assert_eq!(ap(&["J1", "J2", "A"], &g, ApConvention::Trapezoid), 1.0);
        assert_eq!(ap(&["B"], &g, ApConvention::Trapezoid), 0.0);
        assert!(average_precision_ids(["A"], &gt(&[], &[]), ApConvention::Trapezoid).is_none());
    }

    #[test]
    fn parse_and_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut gts: Vec<QueryGroundTruth> = (1..=3)
            .map(|i| QueryGroundTruth {
                query_id: format!("q{i}"),
                query_image_id: format!("img00{i}"),
                bbox: [10.0 * i as f64, 20.0, 110.5, 220.25],
                positives: (0..i).map(|k| format!("p{k}")).collect(),
                junk: if i == 2 {
                    BTreeSet::new()
                } else {
                    ["j".to_string()].into()
                },
                subset: None,
            })
            .collect();
        gts[0].subset = Some(["p0".to_string(), "x".to_string()].into());
        write_groundtruth(dir.path(), &gts).unwrap();
        assert_eq!(parse_groundtruth(dir.path(), GroundTruthStyle::Oxford).unwrap(), gts);
    }

    #[test]
    fn parses_oxford_files() {
        let dir = tempfile::tempdir().unwrap();
        let w = |n: &str, b: &str| fs::write(dir.path().join(n), b).unwrap();
        w(
            "all_souls_1_query.txt",
            "oxc1_all_souls_000013 136.5 34.1 648.5 955.7\n",
        );
        w("all_souls_1_good.txt", "all_souls_000013\nall_souls_000026\n");
        w("all_souls_1_ok.txt", "oxford_002985\n");
        w("all_souls_1_junk.txt", "");
        w("plain_query.txt", "img001 10.0 20.0 110.0 220.0");
        w("plain_good.txt", "a");
        w("plain_ok.txt", "");
        w("plain_junk.txt", "b\n");
        let gts = parse_groundtruth(dir.path(), GroundTruthStyle::Oxford).unwrap();
        assert_eq!(gts[0].query_image_id, "all_souls_000013");
        assert_eq!(gts[0].positives.len(), 3);
        assert!(gts[0].junk.is_empty());
        assert_eq!(gts[1].query_image_id, "img001");
        assert_eq!(gts[1].bbox, [10.0, 20.0, 110.0, 220.0]);

        fs::remove_file(dir.path().join("plain_junk.txt")).unwrap();
        let err = parse_groundtruth(dir.path(), GroundTruthStyle::Oxford).unwrap_err();
        assert!(err.to_string().contains("plain_junk.txt"), "{err}");
    }

    #[test]
    fn evaluate_planted_words() {
        // Query i and its positives share word i; nothing else does.
        let k = 32;
        let mut docs = Vec::new();
        let mut gts = Vec::new();
        for q in 0..4u32 {
            let mut positives = BTreeSet::new();
            for d in 0..3 {
                let id = format!("q{q}_d{d}");
                docs.push(encode_cells(id.clone(), k, [(q, 1.0f64), (10 + q * 4 + d, 1.0)]).unwrap());
                positives.insert(id);
            }
            gts.push(QueryGroundTruth {
                query_id: format!("q{q}"),
                query_image_id: format!("q{q}_d0"),
                bbox: [0.0; 4],
                positives,
                junk: BTreeSet::new(),
                subset: None,
            });
        }
        for n in 0..10u32 {
            docs.push(encode_cells(format!("noise{n}"), k, [(30 + n % 2, 1.0f64)]).unwrap());
        }
        let index = build_index(k, docs).unwrap();
        let encode = |gt: &QueryGroundTruth| {
            let q: u32 = gt.query_id[1..].parse().unwrap();
            encode_cells(gt.query_id.clone(), k, [(q, 1.0f64)])
        };
        for aqe in [false, true] {
            let opts = EvalOptions {
                aqe,
                aqe_n: 3,
                ..EvalOptions::default()
            };
            let report = evaluate(&index, &gts, encode, &opts);
            assert_eq!(report.per_query.len(), 4);
            assert_eq!(report.map, 1.0);
        }

        let failing = |gt: &QueryGroundTruth| -> Result<SparseBow<f64>> {
            if gt.query_id == "q1" {
                Err(Error::Config("missing tensor".into()))
            } else {
                encode(gt)
            }
        };
        let report = evaluate(&index, &gts, failing, &EvalOptions::default());
        assert_eq!(report.per_query.len(), 3);
        assert_eq!(report.excluded[0].query_id, "q1");
        let mean = report.per_query.iter().map(|q| q.average_precision).sum::<f64>() / 3.0;
        assert_eq!(report.map, mean);
    }

    #[test]
    fn random_single_positive_matches_expectation() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<String> = (0..100).map(|i| format!("d{i}")).collect();
        let g = gt(&["d0"], &[]);
        let trials = 1000;
        let mut total = 0.0;
        for _ in 0..trials {
            let mut order: Vec<&str> = ids.iter().map(String::as_str).collect();
            order.shuffle(&mut rng);
            total += ap(&order, &g, ApConvention::Trapezoid);
        }
        // Positive at rank r: AP = 1 for r = 1, else (0 + 1/r)/2.
        let expected = (1.0 + (2..=100).map(|r| 0.5 / r as f64).sum::<f64>()) / 100.0;
        assert!((total / trials as f64 - expected).abs() < 0.02);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// A corpus of `n` ids, a ranking of all of them and a positive set.
        fn instance() -> impl Strategy<Value = (Vec<String>, BTreeSet<String>)> {
            (2usize..40).prop_flat_map(|n| {
                let ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
                (
                    Just(ids.clone()).prop_shuffle(),
                    proptest::sample::subsequence(ids, 1..=n),
                )
                    .prop_map(|(ranking, pos)| (ranking, pos.into_iter().collect()))
            })
        }

        fn run(ranking: &[String], g: &QueryGroundTruth, c: ApConvention) -> f64 {
            average_precision_ids(ranking.iter().map(String::as_str), g, c).unwrap()
        }

        fn with(positives: &BTreeSet<String>, junk: BTreeSet<String>) -> QueryGroundTruth {
            QueryGroundTruth {
                query_id: "q".into(),
                query_image_id: "q".into(),
                bbox: [0.0; 4],
                positives: positives.clone(),
                junk,
                subset: None,
            }
        }

        proptest! {
            #[test]
            fn junk_is_invisible((ranking, positives) in instance(), slots in proptest::collection::vec(any::<prop::sample::Index>(), 1..6)) {
                let plain = with(&positives, BTreeSet::new());
                let mut noisy = ranking.clone();
                let mut junk = BTreeSet::new();
                for (n, slot) in slots.iter().enumerate() {
                    let id = format!("junk{n}");
                    noisy.insert(slot.index(noisy.len() + 1), id.clone());
                    junk.insert(id);
                }
                let g = with(&positives, junk);
                for c in [ApConvention::Trapezoid, ApConvention::Standard] {
                    prop_assert_eq!(run(&ranking, &plain, c), run(&noisy, &g, c));
                }
            }

            #[test]
            fn promoting_a_positive_never_hurts((ranking, positives) in instance(), at in any::<prop::sample::Index>()) {
                let g = with(&positives, BTreeSet::new());
                let i = at.index(ranking.len() - 1) + 1;
                if positives.contains(&ranking[i]) && !positives.contains(&ranking[i - 1]) {
                    let mut swapped = ranking.clone();
                    swapped.swap(i, i - 1);
                    for c in [ApConvention::Trapezoid, ApConvention::Standard] {
                        prop_assert!(run(&swapped, &g, c) >= run(&ranking, &g, c) - 1e-12);
                    }
                }
            }

            #[test]
            fn extreme_placements((ranking, positives) in instance()) {
                let g = with(&positives, BTreeSet::new());
                let (mut top, mut bottom): (Vec<String>, Vec<String>) =
                    ranking.iter().cloned().partition(|id| positives.contains(id));
                let best: Vec<String> = top.iter().chain(&bottom).cloned().collect();
                bottom.append(&mut top);
                for c in [ApConvention::Trapezoid, ApConvention::Standard] {
                    let here = run(&ranking, &g, c);
                    prop_assert!((run(&best, &g, c) - 1.0).abs() < 1e-12);
                    prop_assert!(run(&bottom, &g, c) <= here + 1e-12);
                }
            }
        }
    }
}
