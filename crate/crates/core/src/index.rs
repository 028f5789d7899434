//! Inverted index with exact cosine ranking and average query expansion.
//!
//! On-disk layout, little-endian:
//!
//! ```text
//! u32 header_len | header_len bytes of JSON {"K", "doc_count", "format_version", ...}
//! doc_count × (u32 id_len | id_len bytes of UTF-8 image id)
//! K × (u32 count | count × (u32 doc_ordinal, f32 weight))
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bow::{encode_cells, SparseBow};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Tolerance on the unit norm of indexed vectors.
const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex<S> {
    k: usize,
    doc_ids: Vec<String>,
    /// Rank of each document's id in ascending id order, used for tie-breaking.
    id_rank: Vec<u32>,
    postings: Vec<Vec<(u32, S)>>,
    forward: Vec<Vec<(u32, S)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub image_id: String,
    pub score: f64,
}

/// Results ordered by score descending, then image id ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<RankedItem>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.image_id.as_str())
    }
}

/// Work done by one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QueryStats {
    pub postings_touched: usize,
}

/// Builds the index over `bows`, which must share vocabulary size `k`, carry distinct image ids
/// and be unit-norm (or empty).
pub fn build_index<S: Scalar>(k: usize, bows: impl IntoIterator<Item = SparseBow<S>>) -> Result<InvertedIndex<S>> {
    let mut doc_ids = Vec::new();
    let mut forward = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for bow in bows {
        if bow.k() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: bow.k(),
            });
        }
        if !seen.insert(bow.image_id.clone()) {
            return Err(Error::DuplicateImageId(bow.image_id));
        }
        if !bow.is_empty() && (bow.norm() - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidParameter(format!(
                "{}: indexed vectors must be unit-norm, got {}",
                bow.image_id,
                bow.norm()
            )));
        }
        forward.push(bow.entries().to_vec());
        doc_ids.push(bow.image_id);
    }
    InvertedIndex::from_forward(k, doc_ids, forward)
}

impl<S: Scalar> InvertedIndex<S> {
    fn from_forward(k: usize, doc_ids: Vec<String>, forward: Vec<Vec<(u32, S)>>) -> Result<Self> {
        let mut postings = vec![Vec::new(); k];
        for (doc, entries) in forward.iter().enumerate() {
            for &(w, v) in entries {
                postings[w as usize].push((doc as u32, v));
            }
        }
        let mut order: Vec<usize> = (0..doc_ids.len()).collect();
        order.sort_by(|&a, &b| doc_ids[a].cmp(&doc_ids[b]));
        let mut id_rank = vec![0u32; doc_ids.len()];
        for (rank, doc) in order.into_iter().enumerate() {
            id_rank[doc] = rank as u32;
        }
        Ok(InvertedIndex {
            k,
            doc_ids,
            id_rank,
            postings,
            forward,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn postings(&self, word: u32) -> &[(u32, S)] {
        &self.postings[word as usize]
    }

    /// Stored vector of document `ordinal`.
    pub fn document(&self, ordinal: usize) -> SparseBow<S> {
        SparseBow::from_entries(self.doc_ids[ordinal].clone(), self.k, self.forward[ordinal].clone())
            .expect("indexed entries are valid")
    }

    pub fn ordinal_of(&self, image_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == image_id)
    }

    /// Mean number of non-zero words per document.
    pub fn mean_words_per_doc(&self) -> f64 {
        if self.forward.is_empty() {
            return 0.0;
        }
        self.forward.iter().map(Vec::len).sum::<usize>() as f64 / self.forward.len() as f64
    }

    pub fn query(&self, q: &SparseBow<S>, top_n: usize) -> Result<RankedList> {
        self.query_with_stats(q, top_n).map(|(r, _)| r)
    }

    /// Cosine scores of every document against `q`, accumulated in `f64` by walking the
    /// posting lists of `q`'s words only. Returns the best `top_n`.
    pub fn query_with_stats(&self, q: &SparseBow<S>, top_n: usize) -> Result<(RankedList, QueryStats)> {
        if q.k() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                found: q.k(),
            });
        }
        let mut scores = vec![0.0f64; self.doc_count()];
        let mut stats = QueryStats::default();
        for &(w, qv) in q.entries() {
            let list = &self.postings[w as usize];
            stats.postings_touched += list.len();
            let qv = qv.wide();
            for &(doc, dv) in list {
                scores[doc as usize] += qv * dv.wide();
            }
        }
        let mut order: Vec<usize> = (0..self.doc_count()).collect();
        let cmp = |a: &usize, b: &usize| {
            scores[*b]
                .total_cmp(&scores[*a])
                .then(self.id_rank[*a].cmp(&self.id_rank[*b]))
        };
        let top_n = top_n.min(order.len());
        if top_n < order.len() && top_n > 0 {
            order.select_nth_unstable_by(top_n - 1, cmp);
            order.truncate(top_n);
        }
        order.truncate(top_n);
        order.sort_by(cmp);
        let items = order
            .into_iter()
            .map(|d| RankedItem {
                image_id: self.doc_ids[d].clone(),
                score: scores[d],
            })
            .collect();
        Ok((RankedList { items }, stats))
    }

    /// Average query expansion: normalised sum of the top `n` results (and `q` itself when
    /// `include_query`). With nothing to add, `q` is returned unchanged.
    pub fn expand_query(
        &self,
        q: &SparseBow<S>,
        ranked: &RankedList,
        n: usize,
        include_query: bool,
    ) -> Result<SparseBow<S>> {
        let mut docs = Vec::new();
        for item in ranked.items.iter().take(n) {
            let ordinal = self
                .ordinal_of(&item.image_id)
                .ok_or_else(|| Error::InvalidParameter(format!("{} is not in the index", item.image_id)))?;
            docs.push(ordinal);
        }
        if docs.is_empty() {
            return Ok(q.clone());
        }
        let own = include_query.then_some(q.entries()).into_iter().flatten();
        let cells = own.chain(docs.iter().flat_map(|&d| self.forward[d].iter())).copied();
        encode_cells(q.image_id.clone(), self.k, cells)
    }
}

/// JSON header of an index file. Unknown fields are kept in `meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    #[serde(rename = "K")]
    pub k: usize,
    pub doc_count: usize,
    pub format_version: u32,
    #[serde(flatten)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

pub fn write_index<S: Scalar>(
    path: impl AsRef<Path>,
    index: &InvertedIndex<S>,
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let header = IndexHeader {
        k: index.k,
        doc_count: index.doc_count(),
        format_version: INDEX_FORMAT_VERSION,
        meta,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut put = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&(json.len() as u32).to_le_bytes())?;
    put(&json)?;
    for id in &index.doc_ids {
        put(&(id.len() as u32).to_le_bytes())?;
        put(id.as_bytes())?;
    }
    for list in &index.postings {
        put(&(list.len() as u32).to_le_bytes())?;
        for &(doc, v) in list {
            put(&doc.to_le_bytes())?;
            put(&(v.wide() as f32).to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                message: format!("index file ends early at byte {}", self.at),
            });
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads only the JSON header.
pub fn read_index_header(path: impl AsRef<Path>) -> Result<IndexHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&mut Cursor {
        path,
        bytes: &bytes,
        at: 0,
    })
}

fn parse_header(cur: &mut Cursor<'_>) -> Result<IndexHeader> {
    let len = cur.u32()? as usize;
    let header: IndexHeader = serde_json::from_slice(cur.take(len)?).map_err(|e| Error::Parse {
        path: cur.path.to_path_buf(),
        message: format!("index header: {e}"),
    })?;
    if header.format_version != INDEX_FORMAT_VERSION {
        return Err(Error::Parse {
            path: cur.path.to_path_buf(),
            message: format!("unsupported index format version {}", header.format_version),
        });
    }
    Ok(header)
}

pub fn read_index<S: Scalar>(path: impl AsRef<Path>) -> Result<(InvertedIndex<S>, IndexHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        at: 0,
    };
    let header = parse_header(&mut cur)?;
    let corrupt = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut doc_ids = Vec::with_capacity(header.doc_count);
    for _ in 0..header.doc_count {
        let len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(len)?).map_err(|e| corrupt(format!("image id is not UTF-8: {e}")))?;
        doc_ids.push(id.to_owned());
    }
    let mut forward: Vec<Vec<(u32, S)>> = vec![Vec::new(); header.doc_count];
    for word in 0..header.k {
        let count = cur.u32()? as usize;
        for _ in 0..count {
            let doc = cur.u32()? as usize;
            let v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            if doc >= header.doc_count || !(v.is_finite() && v > 0.0) {
                return Err(corrupt(format!("bad posting ({doc}, {v}) for word {word}")));
            }
            if forward[doc].last().is_some_and(|e| e.0 as usize >= word) {
                return Err(corrupt(format!("duplicate posting for word {word}, doc {doc}")));
            }
            forward[doc].push((word as u32, S::of(f64::from(v))));
        }
    }
    if cur.at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - cur.at)));
    }
    let index = InvertedIndex::from_forward(header.k, doc_ids, forward)?;
    Ok((index, header))
}
