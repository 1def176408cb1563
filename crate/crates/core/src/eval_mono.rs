//! Monolingual evaluators: word similarity, analogy, and relation-prediction
//! features with a logistic-regression baseline.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{AnalogyQuestion, RelationLabel, RelationPair, SimilarityPair};
use crate::error::{Error, Result};
use crate::matrix::TypeEmbeddingMatrix;
use crate::numerics::{cosine, norm, spearman};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsimResult {
    pub rho: f64,
    pub covered: usize,
    pub total: usize,
}

impl LsimResult {
    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.total.max(1) as f64
    }
}

/// Spearman correlation between gold scores and cosine similarities over the
/// pairs whose words are both in the vocabulary.
pub fn eval_lsim(matrix: &TypeEmbeddingMatrix, pairs: &[SimilarityPair]) -> Result<LsimResult> {
    let mut gold = Vec::new();
    let mut predicted = Vec::new();
    for p in pairs {
        if let (Some(u), Some(v)) = (matrix.row_of(&p.word1), matrix.row_of(&p.word2)) {
            gold.push(p.gold);
            predicted.push(cosine(u, v)?);
        }
    }
    if gold.len() < 2 {
        return Err(Error::InsufficientCoverage(format!(
            "{} of {} similarity pairs covered",
            gold.len(),
            pairs.len()
        )));
    }
    Ok(LsimResult {
        rho: spearman(&gold, &predicted)?,
        covered: gold.len(),
        total: pairs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub correct: usize,
    pub evaluable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogyResult {
    /// Micro-averaged over all evaluable questions.
    pub p_at_1: f64,
    /// Mean of per-category P@1.
    pub category_macro_p_at_1: f64,
    pub correct: usize,
    pub evaluable: usize,
    pub total: usize,
    pub per_category: BTreeMap<String, CategoryScore>,
}

impl AnalogyResult {
    pub fn coverage(&self) -> f64 {
        self.evaluable as f64 / self.total.max(1) as f64
    }
}

/// Index of the row maximizing `cos(row, c − a + b)` over the vocabulary minus
/// `exclude`. Ties go to the lower index; zero rows never win.
pub fn solve_analogy(matrix: &TypeEmbeddingMatrix, inv_norms: &[f64], a: usize, b: usize, c: usize) -> Option<usize> {
    let (ra, rb, rc) = (matrix.row(a), matrix.row(b), matrix.row(c));
    let target: Vec<f64> = (0..matrix.dim())
        .map(|k| rc[k] as f64 - ra[k] as f64 + rb[k] as f64)
        .collect();
    if norm(&target) == 0.0 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, &inv) in inv_norms.iter().enumerate() {
        if j == a || j == b || j == c || inv == 0.0 {
            continue;
        }
        let row = matrix.row(j);
        let score = target.iter().zip(row).map(|(&t, &r)| t * r as f64).sum::<f64>() * inv;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((j, score));
        }
    }
    best.map(|(j, _)| j)
}

/// Inverse row norms, with zero for zero rows.
pub fn inverse_row_norms(matrix: &TypeEmbeddingMatrix) -> Vec<f64> {
    (0..matrix.rows())
        .map(|i| {
            let n = norm(matrix.row(i));
            if n > 0.0 {
                1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

/// Vector-offset analogy resolution scored by P@1 against gold answer sets.
pub fn eval_analogy(matrix: &TypeEmbeddingMatrix, questions: &[AnalogyQuestion]) -> Result<AnalogyResult> {
    let vocab = matrix.vocab();
    let inv_norms = inverse_row_norms(matrix);
    let outcomes: Vec<Option<bool>> = par::map_slice(questions, |q| {
        let (a, b, c) = (vocab.get(&q.a)?, vocab.get(&q.b)?, vocab.get(&q.c)?);
        let predicted = solve_analogy(matrix, &inv_norms, a, b, c);
        Some(predicted.is_some_and(|p| q.gold.iter().any(|g| g == vocab.word(p))))
    });

    let mut per_category: BTreeMap<String, CategoryScore> = BTreeMap::new();
    let (mut correct, mut evaluable) = (0, 0);
    for (q, outcome) in questions.iter().zip(&outcomes) {
        let Some(hit) = *outcome else { continue };
        let cat = per_category.entry(q.category.clone()).or_insert(CategoryScore {
            correct: 0,
            evaluable: 0,
        });
        cat.evaluable += 1;
        evaluable += 1;
        if hit {
            cat.correct += 1;
            correct += 1;
        }
    }
    if evaluable == 0 {
        return Err(Error::InsufficientCoverage(format!(
            "none of {} analogy questions are in the vocabulary",
            questions.len()
        )));
    }
    let macro_p = per_category
        .values()
        .map(|c| c.correct as f64 / c.evaluable as f64)
        .sum::<f64>()
        / per_category.len() as f64;
    Ok(AnalogyResult {
        p_at_1: correct as f64 / evaluable as f64,
        category_macro_p_at_1: macro_p,
        correct,
        evaluable,
        total: questions.len(),
        per_category,
    })
}

pub const RELP_MAGIC: &[u8; 4] = b"LXRF";
pub const RELP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RelpHeader {
    dim: usize,
    count: usize,
    labels: Vec<String>,
    skipped: usize,
}

/// Relation-pair features: one `[v1 ‖ v2]` row and label per covered pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RelpFeatures {
    pub dim: usize,
    pub labels: Vec<RelationLabel>,
    /// `count x 2·dim`, row-major.
    pub pairs: Vec<f32>,
    pub skipped: usize,
}

impl RelpFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pair(&self, i: usize) -> &[f32] {
        &self.pairs[i * 2 * self.dim..(i + 1) * 2 * self.dim]
    }

    pub fn from_pairs(matrix: &TypeEmbeddingMatrix, pairs: &[RelationPair]) -> Self {
        let mut out = RelpFeatures {
            dim: matrix.dim(),
            labels: Vec::new(),
            pairs: Vec::new(),
            skipped: 0,
        };
        for p in pairs {
            match (matrix.row_of(&p.word1), matrix.row_of(&p.word2)) {
                (Some(u), Some(v)) => {
                    out.pairs.extend_from_slice(u);
                    out.pairs.extend_from_slice(v);
                    out.labels.push(p.label);
                }
                _ => out.skipped += 1,
            }
        }
        out
    }

    /// Binary layout: magic `LXRF`, `u32` version, `u64` JSON length, JSON
    /// header, then per record a `u8` label and `2·dim` `f32` LE values.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |e| Error::io(path, e);
        let header = RelpHeader {
            dim: self.dim,
            count: self.len(),
            labels: RelationLabel::ALL.iter().map(|l| l.to_string()).collect(),
            skipped: self.skipped,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        out.write_all(RELP_MAGIC).map_err(io_err)?;
        out.write_all(&RELP_VERSION.to_le_bytes()).map_err(io_err)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io_err)?;
        out.write_all(&json).map_err(io_err)?;
        for i in 0..self.len() {
            out.write_all(&[self.labels[i] as u8]).map_err(io_err)?;
            for v in self.pair(i) {
                out.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        out.flush().map_err(io_err)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[0..4] != RELP_MAGIC {
            return Err(Error::Format("not a relation feature file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != RELP_VERSION {
            return Err(Error::Format(format!("unsupported feature version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corruption("feature header exceeds file".into()))?;
        let header: RelpHeader = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Format(e.to_string()))?;
        let rec_len = 1 + 2 * header.dim * 4;
        if bytes.len() - body != header.count * rec_len {
            return Err(Error::Corruption(format!(
                "expected {} records of {rec_len} bytes",
                header.count
            )));
        }
        let mut labels = Vec::with_capacity(header.count);
        let mut pairs = Vec::with_capacity(header.count * 2 * header.dim);
        for rec in bytes[body..].chunks_exact(rec_len) {
            labels.push(
                RelationLabel::from_u8(rec[0])
                    .ok_or_else(|| Error::Corruption(format!("unknown label byte {}", rec[0])))?,
            );
            pairs.extend(
                rec[1..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
        }
        Ok(RelpFeatures {
            dim: header.dim,
            labels,
            pairs,
            skipped: header.skipped,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelpExport {
    pub written: usize,
    pub skipped: usize,
}

pub fn export_relp_features(
    matrix: &TypeEmbeddingMatrix,
    pairs: &[RelationPair],
    path: impl AsRef<Path>,
) -> Result<RelpExport> {
    let features = RelpFeatures::from_pairs(matrix, pairs);
    features.write(path)?;
    Ok(RelpExport {
        written: features.len(),
        skipped: features.skipped,
    })
}

/// Fixed hyperparameters of the relation baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub l2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Per-epoch inverse-time decay: `lr / (1 + decay · epoch)`.
    pub decay: f64,
    pub folds: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            l2: 1.0,
            epochs: 100,
            learning_rate: 0.1,
            decay: 0.1,
            folds: 5,
            runs: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub micro_f1_mean: f64,
    /// Sample standard deviation across runs.
    pub micro_f1_std: f64,
    pub per_run: Vec<f64>,
}

/// `[v1 ‖ v2 ‖ v1⊙v2]` for each pair.
fn pair_features(features: &RelpFeatures) -> Vec<Vec<f64>> {
    let d = features.dim;
    (0..features.len())
        .map(|i| {
            let p = features.pair(i);
            let (v1, v2) = p.split_at(d);
            let mut x: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            x.extend(v1.iter().zip(v2).map(|(&a, &b)| a as f64 * b as f64));
            x
        })
        .collect()
}

struct Softmax {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Softmax {
    fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(x);
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        best
    }
}

fn train_softmax(
    xs: &[&[f64]],
    ys: &[usize],
    classes: usize,
    params: &BaselineParams,
    rng: &mut ChaCha8Rng,
) -> Softmax {
    let dim = xs[0].len();
    let n = xs.len() as f64;
    let mut model = Softmax {
        weights: vec![vec![0.0; dim]; classes],
        bias: vec![0.0; classes],
    };
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..params.epochs {
        let lr = params.learning_rate / (1.0 + params.decay * epoch as f64);
        order.shuffle(rng);
        for &i in &order {
            let p = model.probabilities(xs[i]);
            for (k, &pk) in p.iter().enumerate().take(classes) {
                let g = pk - if k == ys[i] { 1.0 } else { 0.0 };
                let w = &mut model.weights[k];
                for (wj, &xj) in w.iter_mut().zip(xs[i]) {
                    *wj -= lr * (g * xj + params.l2 / n * *wj);
                }
                model.bias[k] -= lr * g;
            }
        }
    }
    model
}

/// Standardizes columns with statistics from `train` rows only.
fn standardize(xs: &[Vec<f64>], train: &[usize]) -> Vec<Vec<f64>> {
    let dim = xs[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(&xs[i]) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for &i in train {
        for ((s, v), m) in var.iter_mut().zip(&xs[i]).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
        .collect();
    xs.iter()
        .map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect())
        .collect()
}

/// Micro-averaged F1 over single-label predictions.
pub fn micro_f1(gold: &[usize], predicted: &[usize]) -> f64 {
    let tp = gold.iter().zip(predicted).filter(|(g, p)| g == p).count() as f64;
    let fp = predicted.len() as f64 - tp;
    let fn_ = gold.len() as f64 - tp;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    2.0 * precision * recall / (precision + recall)
}

fn cross_validate(xs: &[Vec<f64>], ys: &[usize], params: &BaselineParams, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut rng);
    let k = params.folds;
    let mut predicted = vec![0; xs.len()];
    for fold in 0..k {
        let lo = fold * order.len() / k;
        let hi = (fold + 1) * order.len() / k;
        let test = &order[lo..hi];
        let train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        let scaled = standardize(xs, &train);
        let train_x: Vec<&[f64]> = train.iter().map(|&i| scaled[i].as_slice()).collect();
        let train_y: Vec<usize> = train.iter().map(|&i| ys[i]).collect();
        let model = train_softmax(&train_x, &train_y, RelationLabel::ALL.len(), params, &mut rng);
        for &i in test {
            predicted[i] = model.predict(&scaled[i]);
        }
    }
    micro_f1(ys, &predicted)
}

/// Multinomial logistic regression on `[v1 ‖ v2 ‖ v1⊙v2]`, k-fold
/// cross-validated; runs differ in their seed (`seed + run`).
pub fn train_relation_baseline(features: &RelpFeatures, params: &BaselineParams) -> Result<BaselineResult> {
    let mut classes: Vec<RelationLabel> = features.labels.clone();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "{} class(es) present, need at least 2",
            classes.len()
        )));
    }
    if params.folds < 2 || params.folds > features.len() {
        return Err(Error::InvalidArgument(format!(
            "{} folds for {} examples",
            params.folds,
            features.len()
        )));
    }
    if params.runs == 0 {
        return Err(Error::InvalidArgument("at least one run is needed".into()));
    }
    let xs = pair_features(features);
    let ys: Vec<usize> = features.labels.iter().map(|&l| l as usize).collect();
    let per_run = par::map_range(params.runs, |r| {
        cross_validate(&xs, &ys, params, params.seed + r as u64)
    });
    let n = per_run.len() as f64;
    let mean = per_run.iter().sum::<f64>() / n;
    let std = if per_run.len() > 1 {
        (per_run.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(BaselineResult {
        micro_f1_mean: mean,
        micro_f1_std: std,
        per_run,
    })
}
