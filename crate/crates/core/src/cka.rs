//! Layer-geometry analyses with linear CKA: self-similarity across layers,
//! same-layer correspondence across languages and its random-pair baseline.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ContextMode, SpecialPolicy};
use crate::datasets::BilingualLexicon;
use crate::distill::{aggregate_contexts, LayerVectors, StoreSet};
use crate::error::{Error, Result};
use crate::matrix::TypeEmbeddingMatrix;
use crate::numerics::{cka_prepared, spearman, CkaPreprocessing, PreparedSamples, SampleMatrix};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pairing {
    #[serde(rename = "SELF")]
    SelfLayers,
    Translation,
    Random,
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::SelfLayers => "SELF",
            Pairing::Translation => "TRANSLATION",
            Pairing::Random => "RANDOM",
        })
    }
}

/// Pooling and CKA settings shared by the analyses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CkaSettings {
    pub context: ContextMode,
    pub policy: SpecialPolicy,
    pub preprocessing: CkaPreprocessing,
}

impl CkaSettings {
    pub fn new(context: ContextMode, policy: SpecialPolicy) -> Self {
        CkaSettings {
            context,
            policy,
            preprocessing: CkaPreprocessing::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaResult {
    pub axis_a: Vec<String>,
    pub axis_b: Vec<String>,
    /// `scores[i][j]` pairs `axis_a[i]` with `axis_b[j]`.
    pub scores: Vec<Vec<f64>>,
    pub pairing: Pairing,
    pub word_count: usize,
    pub seed: Option<u64>,
    pub context: String,
    pub policy: String,
    pub preprocessing: String,
}

impl CkaResult {
    fn new(
        axis_a: Vec<String>,
        axis_b: Vec<String>,
        scores: Vec<Vec<f64>>,
        pairing: Pairing,
        word_count: usize,
        settings: &CkaSettings,
    ) -> Self {
        CkaResult {
            axis_a,
            axis_b,
            scores,
            pairing,
            word_count,
            seed: None,
            context: settings.context.to_string(),
            policy: settings.policy.to_string(),
            preprocessing: settings.preprocessing.describe(),
        }
    }

    /// Scores of a one-column result, one per layer.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.scores.iter().map(|r| r[j]).collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Heatmap CSV: a header of `axis_b` labels, then one row per `axis_a`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let header = std::iter::once("").chain(self.axis_b.iter().map(String::as_str));
        w.write_record(header).map_err(csv_err)?;
        for (label, row) in self.axis_a.iter().zip(&self.scores) {
            let cells = std::iter::once(label.clone()).chain(row.iter().map(|v| v.to_string()));
            w.write_record(cells).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn layer_labels(n: usize) -> Vec<String> {
    (0..n).map(|l| format!("L{l}")).collect()
}

/// Per-word layer vectors; words absent from the stores come back as `None`.
fn resolve(words: &[&str], stores: &StoreSet<'_>, settings: &CkaSettings) -> Result<Vec<Option<LayerVectors>>> {
    par::map_slice(words, |w| {
        match aggregate_contexts(w, stores, settings.context, settings.policy) {
            Ok(a) => Ok(Some(a.vectors)),
            Err(Error::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    })
    .into_iter()
    .collect()
}

/// One prepared `s x d` sample matrix per layer.
fn prepare_layers(rows: &[&LayerVectors], num_layers: usize, prep: &CkaPreprocessing) -> Result<Vec<PreparedSamples>> {
    let dim = rows.first().map_or(0, |r| r.dim());
    par::map_range(num_layers, |l| {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.layer(l).iter().copied()).collect();
        SampleMatrix::from_rows(rows.len(), dim, &data)?.prepare(prep)
    })
    .into_iter()
    .collect()
}

/// `L x L` CKA between every pair of layers over the same words.
pub fn self_similarity(stores: &StoreSet<'_>, words: &[String], settings: &CkaSettings) -> Result<CkaResult> {
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let resolved = resolve(&refs, stores, settings)?;
    let rows: Vec<&LayerVectors> = resolved.iter().flatten().collect();
    if rows.len() < 2 {
        return Err(Error::InsufficientCoverage(format!(
            "{} of {} words resolvable, need at least 2",
            rows.len(),
            words.len()
        )));
    }
    let l = stores.num_layers();
    let layers = prepare_layers(&rows, l, &settings.preprocessing)?;
    let cells: Vec<(usize, usize)> = (0..l).flat_map(|m| (m..l).map(move |n| (m, n))).collect();
    let values = par::map_slice(&cells, |&(m, n)| cka_prepared(&layers[m], &layers[n]));
    let mut scores = vec![vec![0.0; l]; l];
    for (&(m, n), v) in cells.iter().zip(values) {
        let v = v?;
        scores[m][n] = v;
        scores[n][m] = v;
    }
    Ok(CkaResult::new(
        layer_labels(l),
        layer_labels(l),
        scores,
        Pairing::SelfLayers,
        rows.len(),
        settings,
    ))
}

/// Same-layer CKA between source and target vectors of aligned word pairs.
pub fn bilingual_correspondence(
    src: &StoreSet<'_>,
    tgt: &StoreSet<'_>,
    pairs: &[(String, String)],
    settings: &CkaSettings,
) -> Result<CkaResult> {
    correspondence(src, tgt, pairs, settings, Pairing::Translation)
}

fn correspondence(
    src: &StoreSet<'_>,
    tgt: &StoreSet<'_>,
    pairs: &[(String, String)],
    settings: &CkaSettings,
    pairing: Pairing,
) -> Result<CkaResult> {
    if src.num_layers() != tgt.num_layers() {
        return Err(Error::ShapeMismatch(format!(
            "{} source layers vs {} target layers",
            src.num_layers(),
            tgt.num_layers()
        )));
    }
    let s_words: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
    let t_words: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
    let s_vecs = resolve(&s_words, src, settings)?;
    let t_vecs = resolve(&t_words, tgt, settings)?;
    let (xs, ys): (Vec<&LayerVectors>, Vec<&LayerVectors>) = s_vecs
        .iter()
        .zip(&t_vecs)
        .filter_map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
        .unzip();
    if xs.len() < 2 {
        return Err(Error::InsufficientCoverage(format!(
            "{} of {} pairs resolvable, need at least 2",
            xs.len(),
            pairs.len()
        )));
    }
    let l = src.num_layers();
    let a = prepare_layers(&xs, l, &settings.preprocessing)?;
    let b = prepare_layers(&ys, l, &settings.preprocessing)?;
    let scores = par::map_range(l, |n| cka_prepared(&a[n], &b[n]).map(|v| vec![v]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaResult::new(
        layer_labels(l),
        vec!["same_layer".to_string()],
        scores,
        pairing,
        xs.len(),
        settings,
    ))
}

/// Keeps the first `n_pairs` source words and draws a target for each
/// uniformly with replacement.
pub fn sample_random_pairs(
    source_words: &[String],
    target_words: &[String],
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    if source_words.len() < n_pairs || target_words.len() < n_pairs {
        return Err(Error::InvalidArgument(format!(
            "{n_pairs} random pairs requested from {} source and {} target words",
            source_words.len(),
            target_words.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(source_words[..n_pairs]
        .iter()
        .map(|s| (s.clone(), target_words[rng.random_range(0..target_words.len())].clone()))
        .collect())
}

pub fn random_pair_baseline(
    src: &StoreSet<'_>,
    tgt: &StoreSet<'_>,
    source_words: &[String],
    target_words: &[String],
    n_pairs: usize,
    seed: u64,
    settings: &CkaSettings,
) -> Result<CkaResult> {
    let pairs = sample_random_pairs(source_words, target_words, n_pairs, seed)?;
    let mut r = correspondence(src, tgt, &pairs, settings, Pairing::Random)?;
    r.seed = Some(seed);
    Ok(r)
}

/// First target of every lexicon entry, as `(source, target)` pairs.
pub fn lexicon_pairs(lexicon: &BilingualLexicon) -> Vec<(String, String)> {
    lexicon
        .entries
        .iter()
        .filter_map(|(s, ts)| Some((s.clone(), ts.first()?.clone())))
        .collect()
}

/// CKA between the rows of two type-level matrices for aligned word pairs.
pub fn matrix_pair_cka(
    src: &TypeEmbeddingMatrix,
    tgt: &TypeEmbeddingMatrix,
    pairs: &[(String, String)],
    prep: &CkaPreprocessing,
) -> Result<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut n = 0;
    for (s, t) in pairs {
        if let (Some(x), Some(y)) = (src.row_of(s), tgt.row_of(t)) {
            xs.extend(x.iter().map(|&v| v as f64));
            ys.extend(y.iter().map(|&v| v as f64));
            n += 1;
        }
    }
    if n < 2 {
        return Err(Error::InsufficientCoverage(format!(
            "{n} of {} pairs resolvable",
            pairs.len()
        )));
    }
    let a = SampleMatrix::from_rows(n, src.dim(), &xs)?.prepare(prep)?;
    let b = SampleMatrix::from_rows(n, tgt.dim(), &ys)?.prepare(prep)?;
    cka_prepared(&a, &b)
}

/// Spearman correlation between per-`n` CKA scores and per-`n` BLI MRR.
pub fn correlate_cka_with_bli(cka: &[f64], bli: &[f64]) -> Result<f64> {
    if cka.len() != bli.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} CKA vs {} BLI points",
            cka.len(),
            bli.len()
        )));
    }
    spearman(cka, bli)
}
