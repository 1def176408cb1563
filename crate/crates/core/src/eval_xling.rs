//! Cross-lingual evaluators: Procrustes-aligned bilingual lexicon induction
//! and IDF-weighted bag-of-embeddings retrieval.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datasets::{BilingualLexicon, RetrievalCollection};
use crate::error::{Error, Result};
use crate::matrix::TypeEmbeddingMatrix;
use crate::numerics::{norm, procrustes, OrthogonalMap};
use crate::par;
use crate::vocab::Vocabulary;

/// Mapping normalization applied to both spaces before alignment.
pub const MAPPING_PIPELINE: &str = "unit,center,unit";

/// Row-major `f64` embedding space used for alignment and retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct Space {
    vocab: Arc<Vocabulary>,
    dim: usize,
    data: Vec<f64>,
}

impl Space {
    pub fn new(vocab: Arc<Vocabulary>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != vocab.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} rows of dim {dim}",
                data.len(),
                vocab.len()
            )));
        }
        Ok(Space { vocab, dim, data })
    }

    pub fn from_matrix(m: &TypeEmbeddingMatrix) -> Self {
        Space {
            vocab: m.shared_vocab(),
            dim: m.dim(),
            data: m.to_f64(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.vocab.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, word: &str) -> Option<&[f64]> {
        self.vocab.get(word).map(|i| self.row(i))
    }

    fn inverse_norms(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| {
                let n = norm(self.row(i));
                if n > 0.0 {
                    1.0 / n
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn normalize_rows(&mut self) {
        let d = self.dim;
        for row in self.data.chunks_exact_mut(d) {
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    fn center_columns(&mut self) {
        let (d, rows) = (self.dim, self.rows());
        if rows == 0 {
            return;
        }
        let mut mean = vec![0.0; d];
        for row in self.data.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for row in self.data.chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }

    /// Unit-normalizes rows, centers columns, then unit-normalizes again.
    pub fn normalized_for_mapping(m: &TypeEmbeddingMatrix) -> Self {
        let mut s = Space::from_matrix(m);
        s.normalize_rows();
        s.center_columns();
        s.normalize_rows();
        s
    }

    /// `x W` for every row.
    pub fn mapped(&self, map: &OrthogonalMap) -> Result<Space> {
        if map.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "{}-dim map on {}-dim space",
                map.dim(),
                self.dim
            )));
        }
        let data = (0..self.rows()).flat_map(|i| map.apply(self.row(i))).collect();
        Space::new(Arc::clone(&self.vocab), self.dim, data)
    }
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub map: OrthogonalMap,
    /// Source space after the mapping normalization (not yet mapped).
    pub src: Space,
    pub tgt: Space,
    pub used_pairs: usize,
    pub dropped_pairs: usize,
    pub pipeline: &'static str,
}

/// Normalizes both spaces and learns the orthogonal map from the training
/// pairs resolvable on both sides.
pub fn align_spaces(
    src: &TypeEmbeddingMatrix,
    tgt: &TypeEmbeddingMatrix,
    train: &BilingualLexicon,
) -> Result<Alignment> {
    align_normalized(
        Space::normalized_for_mapping(src),
        Space::normalized_for_mapping(tgt),
        train,
    )
}

/// Learns the map on spaces that are used as given.
pub fn align_normalized(src: Space, tgt: Space, train: &BilingualLexicon) -> Result<Alignment> {
    if src.dim() != tgt.dim() {
        return Err(Error::ShapeMismatch(format!(
            "source dim {} vs target dim {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dropped = 0;
    for (s, t) in train.pairs() {
        match (src.row_of(s), tgt.row_of(t)) {
            (Some(x), Some(y)) => {
                xs.extend_from_slice(x);
                ys.extend_from_slice(y);
            }
            _ => dropped += 1,
        }
    }
    let used = xs.len() / src.dim().max(1);
    if used == 0 {
        return Err(Error::InsufficientCoverage(format!(
            "no training pair is in both vocabularies ({dropped} dropped)"
        )));
    }
    let x = DMatrix::from_row_slice(used, src.dim(), &xs);
    let y = DMatrix::from_row_slice(used, tgt.dim(), &ys);
    let map = procrustes(&x, &y)?;
    Ok(Alignment {
        map,
        src,
        tgt,
        used_pairs: used,
        dropped_pairs: dropped,
        pipeline: MAPPING_PIPELINE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BliResult {
    pub mrr: f64,
    pub resolvable: usize,
    pub total: usize,
}

impl BliResult {
    pub fn coverage(&self) -> f64 {
        self.resolvable as f64 / self.total.max(1) as f64
    }
}

/// 1-based rank of candidate `g` when candidates are sorted by descending
/// score with ties broken by lower index.
pub fn rank_with_ties(scores: &[f64], g: usize) -> usize {
    let sg = scores[g];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > sg || (s == sg && j < g))
        .count()
}

fn cosine_scores(query: &[f64], space: &Space, inv_norms: &[f64]) -> Vec<f64> {
    (0..space.rows())
        .map(|j| {
            if inv_norms[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                query.iter().zip(space.row(j)).map(|(a, b)| a * b).sum::<f64>() * inv_norms[j]
            }
        })
        .collect()
}

/// Mean reciprocal rank of the best-ranked gold target over all target words.
pub fn eval_bli(src: &Space, tgt: &Space, map: &OrthogonalMap, test: &BilingualLexicon) -> Result<BliResult> {
    if map.dim() != src.dim() || src.dim() != tgt.dim() {
        return Err(Error::ShapeMismatch("map and spaces disagree on dimension".into()));
    }
    let inv = tgt.inverse_norms();
    let reciprocal: Vec<Option<f64>> = par::map_slice(&test.entries, |(s, golds)| {
        let x = src.row_of(s)?;
        let gold_idx: Vec<usize> = golds.iter().filter_map(|g| tgt.vocab().get(g)).collect();
        if gold_idx.is_empty() {
            return None;
        }
        let q = map.apply(x);
        let scores = cosine_scores(&q, tgt, &inv);
        let best = gold_idx.iter().map(|&g| rank_with_ties(&scores, g)).min()?;
        Some(1.0 / best as f64)
    });
    let hits: Vec<f64> = reciprocal.into_iter().flatten().collect();
    if hits.is_empty() {
        return Err(Error::InsufficientCoverage(format!(
            "none of {} test entries resolvable",
            test.entries.len()
        )));
    }
    Ok(BliResult {
        mrr: hits.iter().sum::<f64>() / hits.len() as f64,
        resolvable: hits.len(),
        total: test.entries.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdfFormula {
    /// `ln((N + 1) / (df + 1)) + 1`, strictly positive.
    #[default]
    Smooth,
    /// `ln(N / df)`.
    Plain,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdfTable {
    pub weights: HashMap<String, f64>,
    pub n_docs: usize,
}

impl IdfTable {
    pub fn get(&self, token: &str) -> Option<f64> {
        self.weights.get(token).copied()
    }
}

pub fn build_idf<'a, I>(documents: I) -> IdfTable
where
    I: IntoIterator<Item = &'a [String]>,
{
    build_idf_with(documents, IdfFormula::Smooth)
}

pub fn build_idf_with<'a, I>(documents: I, formula: IdfFormula) -> IdfTable
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut df: HashMap<String, usize> = HashMap::new();
    let mut n = 0;
    for doc in documents {
        n += 1;
        let unique: HashSet<&String> = doc.iter().collect();
        for t in unique {
            *df.entry(t.clone()).or_insert(0) += 1;
        }
    }
    let nf = n as f64;
    let weights = df
        .into_iter()
        .map(|(t, d)| {
            let w = match formula {
                IdfFormula::Smooth => ((nf + 1.0) / (d as f64 + 1.0)).ln() + 1.0,
                IdfFormula::Plain => (nf / d as f64).ln(),
            };
            (t, w)
        })
        .collect();
    IdfTable { weights, n_docs: n }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    /// Tokens found in both the space and the IDF table.
    pub used: usize,
}

impl TextEmbedding {
    pub fn is_zero(&self) -> bool {
        self.used == 0 || self.vector.iter().all(|v| *v == 0.0)
    }
}

/// `Σ idf(t) · vec(t)` over tokens present in both `space` and `idf`, then
/// mapped by `map` when given.
pub fn embed_text(tokens: &[String], space: &Space, idf: &IdfTable, map: Option<&OrthogonalMap>) -> TextEmbedding {
    let mut v = vec![0.0; space.dim()];
    let mut used = 0;
    for t in tokens {
        let (Some(row), Some(w)) = (space.row_of(t), idf.get(t)) else {
            continue;
        };
        used += 1;
        for (a, b) in v.iter_mut().zip(row) {
            *a += w * b;
        }
    }
    let vector = match map {
        Some(m) if used > 0 => m.apply(&v),
        _ => v,
    };
    TextEmbedding { vector, used }
}

/// Mean over relevant documents of precision at their rank. `ranking` lists
/// every candidate once.
pub fn average_precision<T: Eq + std::hash::Hash>(ranking: &[T], relevant: &HashSet<T>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().enumerate() {
        if relevant.contains(d) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClirResult {
    pub map_score: f64,
    pub queries: usize,
    pub zero_queries: usize,
    pub per_query: BTreeMap<String, f64>,
}

/// Ranks documents (target space) for each judged query (source space, then
/// mapped) by cosine and reports mean average precision.
pub fn eval_clir(
    collection: &RetrievalCollection,
    src: &Space,
    tgt: &Space,
    map: &OrthogonalMap,
    query_idf: &IdfTable,
    doc_idf: &IdfTable,
) -> Result<ClirResult> {
    let doc_ids: Vec<&String> = collection.documents.keys().collect();
    let docs: Vec<(Vec<f64>, f64)> = par::map_slice(&doc_ids, |id| {
        let e = embed_text(&collection.documents[*id], tgt, doc_idf, None);
        let n = if e.is_zero() { 0.0 } else { norm(&e.vector) };
        (e.vector, n)
    });

    let judged: Vec<(&String, &HashSet<String>)> = collection
        .relevance
        .iter()
        .filter(|(q, rel)| !rel.is_empty() && collection.queries.contains_key(*q))
        .collect();
    if judged.is_empty() {
        return Err(Error::InsufficientCoverage("no query has relevance judgments".into()));
    }

    let aps: Vec<(f64, bool)> = par::map_slice(&judged, |(qid, relevant)| {
        let q = embed_text(&collection.queries[*qid], src, query_idf, Some(map));
        if q.is_zero() {
            return (0.0, true);
        }
        let qn = norm(&q.vector);
        let scores: Vec<f64> = docs
            .iter()
            .map(|(v, n)| {
                if *n == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    q.vector.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (qn * n)
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..doc_ids.len()).collect();
        // stable sort keeps doc-id order among equal scores
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let ranking: Vec<&str> = order.iter().map(|&i| doc_ids[i].as_str()).collect();
        let rel: HashSet<&str> = relevant.iter().map(String::as_str).collect();
        (average_precision(&ranking, &rel), false)
    });

    let mut per_query = BTreeMap::new();
    let mut zero_queries = 0;
    for ((qid, _), (ap, zero)) in judged.iter().zip(&aps) {
        if *zero {
            log::warn!("query {qid:?} embeds to the zero vector; AP = 0");
            zero_queries += 1;
        }
        per_query.insert((*qid).clone(), *ap);
    }
    Ok(ClirResult {
        map_score: aps.iter().map(|(ap, _)| ap).sum::<f64>() / aps.len() as f64,
        queries: aps.len(),
        zero_queries,
        per_query,
    })
}
