//! Distillation of per-occurrence, per-layer token embeddings into one static
//! vector per word.
//!
//! All reductions accumulate in `f64` in a fixed order (tokens by index,
//! occurrences in stored order, layers ascending) and round to `f32` only when
//! a matrix row is written, so results are bitwise reproducible regardless of
//! how words are scheduled across threads.

use std::sync::Arc;

use crate::config::{ContextMode, ExtractionConfig, LayerScheme, SpecialPolicy};
use crate::error::{Error, Result};
use crate::matrix::{Provenance, TypeEmbeddingMatrix};
use crate::par;
use crate::store::{Limit, OccurrenceRecord, TokenFlag, TokenStore};
use crate::vocab::Vocabulary;

/// `num_layers x dim` vectors for one word or occurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerVectors {
    num_layers: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LayerVectors {
    pub fn zeros(num_layers: usize, dim: usize) -> Self {
        LayerVectors {
            num_layers,
            dim,
            data: vec![0.0; num_layers * dim],
        }
    }

    pub fn from_rows(num_layers: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_layers * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {num_layers} layers of dim {dim}",
                data.len()
            )));
        }
        Ok(LayerVectors { num_layers, dim, data })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    fn layer_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.dim..(n + 1) * self.dim]
    }

    fn add_assign(&mut self, other: &LayerVectors) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn scale(&mut self, by: f64) {
        for a in &mut self.data {
            *a /= by;
        }
    }
}

fn selects(policy: SpecialPolicy, flag: TokenFlag) -> bool {
    matches!(
        (policy, flag),
        (_, TokenFlag::Content) | (SpecialPolicy::All, _) | (SpecialPolicy::WithCls, TokenFlag::Cls)
    )
}

/// Per-layer arithmetic mean over the tokens `policy` selects.
pub fn pool_subwords(record: &OccurrenceRecord, policy: SpecialPolicy) -> Result<LayerVectors> {
    let selected: Vec<usize> = record
        .flags
        .iter()
        .enumerate()
        .filter(|(_, f)| selects(policy, **f))
        .map(|(i, _)| i)
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptySelection {
            word: record.word.clone(),
            policy: policy.to_string(),
        });
    }
    let mut out = LayerVectors::zeros(record.num_layers, record.dim);
    let count = selected.len() as f64;
    for layer in 0..record.num_layers {
        let acc = out.layer_mut(layer);
        for &t in &selected {
            for (a, &v) in acc.iter_mut().zip(record.vector(layer, t)) {
                *a += v as f64;
            }
        }
        for a in acc.iter_mut() {
            *a /= count;
        }
    }
    Ok(out)
}

/// The stores a configuration reads from: the store for its context mode and,
/// for AOC modes, the isolated-encoding store used as back-off.
#[derive(Clone, Copy, Debug)]
pub struct StoreSet<'a> {
    pub primary: &'a TokenStore,
    pub backoff: Option<&'a TokenStore>,
}

impl<'a> StoreSet<'a> {
    pub fn iso(store: &'a TokenStore) -> Self {
        StoreSet {
            primary: store,
            backoff: None,
        }
    }

    pub fn aoc(store: &'a TokenStore, iso: &'a TokenStore) -> Self {
        StoreSet {
            primary: store,
            backoff: Some(iso),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.primary.num_layers()
    }

    pub fn dim(&self) -> usize {
        self.primary.dim()
    }

    pub fn check(&self, mode: ContextMode) -> Result<()> {
        if let ContextMode::Aoc(_) = mode {
            let Some(iso) = self.backoff else {
                return Err(Error::InvalidArgument(
                    "AOC configurations need an isolated-encoding back-off store".into(),
                ));
            };
            if iso.num_layers() != self.primary.num_layers() || iso.dim() != self.primary.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "back-off store is {}x{}, primary is {}x{}",
                    iso.num_layers(),
                    iso.dim(),
                    self.primary.num_layers(),
                    self.primary.dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub vectors: LayerVectors,
    pub backed_off: bool,
}

/// Pools one word's occurrences under `mode`, backing off to the isolated
/// encoding when an AOC store has no occurrence of the word.
pub fn aggregate_contexts(
    word: &str,
    stores: &StoreSet<'_>,
    mode: ContextMode,
    policy: SpecialPolicy,
) -> Result<Aggregated> {
    stores.check(mode)?;
    match mode {
        ContextMode::Iso => Ok(Aggregated {
            vectors: pool_isolated(word, stores.primary, policy)?,
            backed_off: false,
        }),
        ContextMode::Aoc(m) => {
            let records = match stores.primary.read_occurrences(word, Limit::First(m)) {
                Ok(r) => r,
                Err(Error::NotFound(_)) => Vec::new(),
                Err(e) => return Err(e),
            };
            if records.is_empty() {
                let iso = stores.backoff.expect("checked above");
                return Ok(Aggregated {
                    vectors: pool_isolated(word, iso, policy)?,
                    backed_off: true,
                });
            }
            let mut sum = LayerVectors::zeros(stores.num_layers(), stores.dim());
            for r in &records {
                sum.add_assign(&pool_subwords(r, policy)?);
            }
            sum.scale(records.len() as f64);
            Ok(Aggregated {
                vectors: sum,
                backed_off: false,
            })
        }
    }
}

fn pool_isolated(word: &str, store: &TokenStore, policy: SpecialPolicy) -> Result<LayerVectors> {
    let records = store.read_occurrences(word, Limit::First(1))?;
    let record = records.first().ok_or_else(|| Error::NotFound(word.to_string()))?;
    pool_subwords(record, policy)
}

/// Combines per-layer vectors into one `dim`-vector.
pub fn combine_layers(per_layer: &LayerVectors, scheme: LayerScheme) -> Result<Vec<f64>> {
    let range = scheme.layers(per_layer.num_layers())?;
    let count = range.clone().count() as f64;
    let mut out = vec![0.0; per_layer.dim()];
    for n in range {
        for (o, v) in out.iter_mut().zip(per_layer.layer(n)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= count;
    }
    Ok(out)
}

/// Distills `vocab` under one configuration.
pub fn build_matrix(
    vocab: Arc<Vocabulary>,
    stores: &StoreSet<'_>,
    config: &ExtractionConfig,
) -> Result<TypeEmbeddingMatrix> {
    let mut out = build_matrices(vocab, stores, config.context, config.policy, &[config.layers])?;
    let mut m = out.pop().expect("one scheme requested");
    m.provenance.config = Some(config.to_string());
    Ok(m)
}

/// Distills `vocab` once per layer scheme, pooling each word only once.
///
/// Matrix `i` is bitwise identical to `build_matrix` with `schemes[i]`.
/// The provenance config is left unset because the source kind is not known
/// here; `build_matrix` fills it in.
pub fn build_matrices(
    vocab: Arc<Vocabulary>,
    stores: &StoreSet<'_>,
    context: ContextMode,
    policy: SpecialPolicy,
    schemes: &[LayerScheme],
) -> Result<Vec<TypeEmbeddingMatrix>> {
    stores.check(context)?;
    for s in schemes {
        s.layers(stores.num_layers())?;
    }
    let dim = stores.dim();
    let rows: Vec<Result<(Vec<Vec<f32>>, bool)>> = par::map_range(vocab.len(), |i| {
        let agg = aggregate_contexts(vocab.word(i), stores, context, policy)?;
        let per_scheme = schemes
            .iter()
            .map(|&s| combine_layers(&agg.vectors, s).map(|v| v.into_iter().map(|x| x as f32).collect()))
            .collect::<Result<Vec<Vec<f32>>>>()?;
        Ok((per_scheme, agg.backed_off))
    });

    let mut missing = Vec::new();
    let mut backed_off = Vec::new();
    let mut data: Vec<Vec<f32>> = schemes.iter().map(|_| Vec::with_capacity(vocab.len() * dim)).collect();
    for (i, row) in rows.into_iter().enumerate() {
        match row {
            Ok((per_scheme, b)) => {
                if b {
                    backed_off.push(vocab.word(i).to_string());
                }
                for (d, r) in data.iter_mut().zip(per_scheme) {
                    d.extend_from_slice(&r);
                }
            }
            Err(Error::NotFound(_)) => missing.push(vocab.word(i).to_string()),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingWords(missing));
    }
    let provenance = Provenance {
        config: None,
        model_id: stores.primary.header().model_id.clone(),
        backed_off,
    };
    data.into_iter()
        .map(|d| TypeEmbeddingMatrix::new(Arc::clone(&vocab), dim, d, provenance.clone()))
        .collect()
}

/// One `SINGLE(n)` matrix per layer.
pub fn build_layer_matrices(
    vocab: Arc<Vocabulary>,
    stores: &StoreSet<'_>,
    context: ContextMode,
    policy: SpecialPolicy,
) -> Result<Vec<TypeEmbeddingMatrix>> {
    let schemes: Vec<LayerScheme> = (0..stores.num_layers()).map(LayerScheme::Single).collect();
    build_matrices(vocab, stores, context, policy, &schemes)
}
