//! Configuration grid: distills each configured matrix once (through an
//! on-disk cache), runs the requested evaluations and writes result tables.
//!
//! # Grid spec format
//!
//! One `key = value` per line; blank lines and lines starting with `#` are
//! ignored. Relative paths are resolved against the spec file's directory.
//!
//! ```text
//! store.<lang>.<mono|multi>.<iso|aoc> = path    token store
//! vocab.<lang>          = path                  one word per line
//! config                = mono.aoc-10.nospec.avg_le3   (repeatable)
//! tasks                 = lsim, wa, bli, clir, relp, cka
//! lsim.<lang>           = path                  word1 word2 score
//! wa.<lang>             = path                  analogy file or directory
//! relp.<lang>           = path                  word1 word2 label
//! bli.<src>-<tgt>.train = path                  source<TAB>target
//! bli.<src>-<tgt>.test  = path
//! clir.<src>-<tgt>      = dir                   documents/queries/qrels.tsv
//! cka.<src>-<tgt>       = path                  translation pairs
//! out                   = dir
//! seed                  = 0
//! workers               = 4
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::cka::{self, CkaSettings};
use crate::config::{parse_source, ContextMode, ExtractionConfig, LayerScheme, PoolingConfig};
use crate::datasets::{
    load_analogies, load_relations, load_similarity, walk_error, AnalogyQuestion, BilingualLexicon, RelationPair,
    RetrievalCollection, SimilarityPair, Split,
};
use crate::distill::{build_matrices, StoreSet};
use crate::error::{Error, Result};
use crate::eval_mono::{eval_analogy, eval_lsim, train_relation_baseline, BaselineParams, RelpFeatures};
use crate::eval_xling::{align_spaces, build_idf, eval_bli, eval_clir};
use crate::matrix::TypeEmbeddingMatrix;
use crate::numerics::CkaPreprocessing;
use crate::par;
use crate::store::{SourceKind, TokenStore};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Lsim,
    Wa,
    Bli,
    Clir,
    Relp,
    Cka,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::Lsim, Task::Wa, Task::Bli, Task::Clir, Task::Relp, Task::Cka];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Lsim => "LSIM",
            Task::Wa => "WA",
            Task::Bli => "BLI",
            Task::Clir => "CLIR",
            Task::Relp => "RELP",
            Task::Cka => "CKA",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::parse(s, "unknown task"))
    }
}

pub type LangPair = (String, String);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StorePaths {
    pub iso: Option<PathBuf>,
    pub aoc: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LexiconPaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub stores: BTreeMap<(String, SourceKind), StorePaths>,
    pub vocabs: BTreeMap<String, PathBuf>,
    pub configs: Vec<ExtractionConfig>,
    pub tasks: BTreeSet<Task>,
    pub lsim: BTreeMap<String, PathBuf>,
    pub wa: BTreeMap<String, PathBuf>,
    pub relp: BTreeMap<String, PathBuf>,
    pub bli: BTreeMap<LangPair, LexiconPaths>,
    pub clir: BTreeMap<LangPair, PathBuf>,
    pub cka: BTreeMap<LangPair, PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: Option<usize>,
}

fn parse_lang(s: &str, key: &str) -> Result<String> {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        Ok(s.to_ascii_lowercase())
    } else {
        Err(Error::parse(key, format!("bad language code {s:?}")))
    }
}

fn parse_pair(s: &str, key: &str) -> Result<LangPair> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| Error::parse(key, "expected a `src-tgt` language pair"))?;
    Ok((parse_lang(a, key)?, parse_lang(b, key)?))
}

impl GridSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut stores: BTreeMap<(String, SourceKind), StorePaths> = BTreeMap::new();
        let mut vocabs = BTreeMap::new();
        let mut configs: Vec<ExtractionConfig> = Vec::new();
        let mut tasks = BTreeSet::new();
        let (mut lsim, mut wa, mut relp) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        let mut bli: BTreeMap<LangPair, LexiconPaths> = BTreeMap::new();
        let (mut clir, mut cka) = (BTreeMap::new(), BTreeMap::new());
        let mut out = None;
        let mut seed = 0;
        let mut workers = None;

        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("line {}", n + 1), "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let path = || base.join(value);
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["store", lang, source, ctx] => {
                    let entry = stores
                        .entry((parse_lang(lang, key)?, parse_source(source)?))
                        .or_default();
                    match *ctx {
                        "iso" => entry.iso = Some(path()),
                        "aoc" => entry.aoc = Some(path()),
                        _ => return Err(Error::parse(key, "expected `iso` or `aoc`")),
                    }
                }
                ["vocab", lang] => {
                    vocabs.insert(parse_lang(lang, key)?, path());
                }
                ["config"] => {
                    let c: ExtractionConfig = value.parse()?;
                    if !configs.contains(&c) {
                        configs.push(c);
                    }
                }
                ["tasks"] => {
                    for t in value.split(',').filter(|t| !t.trim().is_empty()) {
                        tasks.insert(t.parse()?);
                    }
                }
                ["lsim", lang] => {
                    lsim.insert(parse_lang(lang, key)?, path());
                }
                ["wa", lang] => {
                    wa.insert(parse_lang(lang, key)?, path());
                }
                ["relp", lang] => {
                    relp.insert(parse_lang(lang, key)?, path());
                }
                ["bli", pair, split] => {
                    let entry = bli.entry(parse_pair(pair, key)?).or_default();
                    match *split {
                        "train" => entry.train = Some(path()),
                        "test" => entry.test = Some(path()),
                        _ => return Err(Error::parse(key, "expected `train` or `test`")),
                    }
                }
                ["clir", pair] => {
                    clir.insert(parse_pair(pair, key)?, path());
                }
                ["cka", pair] => {
                    cka.insert(parse_pair(pair, key)?, path());
                }
                ["out"] => out = Some(path()),
                ["seed"] => seed = value.parse().map_err(|_| Error::parse(key, "expected an integer"))?,
                ["workers"] => workers = Some(value.parse().map_err(|_| Error::parse(key, "expected an integer"))?),
                _ => return Err(Error::parse(key, "unknown key")),
            }
        }

        let spec = GridSpec {
            stores,
            vocabs,
            configs,
            tasks,
            lsim,
            wa,
            relp,
            bli,
            clir,
            cka,
            out: out.ok_or_else(|| Error::parse("out", "missing output directory"))?,
            seed,
            workers,
        };
        spec.check_consistency()?;
        Ok(spec)
    }

    fn check_consistency(&self) -> Result<()> {
        if self.configs.is_empty() {
            return Err(Error::parse("config", "no configuration given"));
        }
        if self.tasks.is_empty() {
            return Err(Error::parse("tasks", "no task given"));
        }
        if self.tasks.contains(&Task::Bli) {
            for ((s, t), p) in &self.bli {
                if p.train.is_none() || p.test.is_none() {
                    return Err(Error::parse(format!("bli.{s}-{t}"), "needs both train and test"));
                }
            }
        }
        if self.tasks.contains(&Task::Clir) {
            for (s, t) in self.clir.keys() {
                if self
                    .bli
                    .get(&(s.clone(), t.clone()))
                    .and_then(|p| p.train.as_ref())
                    .is_none()
                {
                    return Err(Error::parse(
                        format!("clir.{s}-{t}"),
                        format!("alignment needs bli.{s}-{t}.train"),
                    ));
                }
            }
        }
        for lang in self.languages() {
            if !self.vocabs.contains_key(&lang) {
                return Err(Error::parse(format!("vocab.{lang}"), "missing vocabulary"));
            }
            for c in &self.configs {
                let paths = self.stores.get(&(lang.clone(), c.source)).cloned().unwrap_or_default();
                let key = |ctx: &str| format!("store.{lang}.{}.{ctx}", c.source.as_str());
                if paths.iso.is_none() {
                    return Err(Error::parse(key("iso"), format!("required by {c}")));
                }
                if matches!(c.context, ContextMode::Aoc(_)) && paths.aoc.is_none() {
                    return Err(Error::parse(key("aoc"), format!("required by {c}")));
                }
            }
        }
        Ok(())
    }

    /// Languages that the enabled tasks need matrices for.
    pub fn languages(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let on = |t| self.tasks.contains(&t);
        if on(Task::Lsim) {
            out.extend(self.lsim.keys().cloned());
        }
        if on(Task::Wa) {
            out.extend(self.wa.keys().cloned());
        }
        if on(Task::Relp) {
            out.extend(self.relp.keys().cloned());
        }
        let pairs = [
            (Task::Bli, self.bli.keys().collect::<Vec<_>>()),
            (Task::Clir, self.clir.keys().collect()),
            (Task::Cka, self.cka.keys().collect()),
        ];
        for (t, keys) in pairs {
            if on(t) {
                for (s, g) in keys {
                    out.insert(s.clone());
                    out.insert(g.clone());
                }
            }
        }
        out
    }

    /// Every input path named by the spec.
    pub fn referenced_paths(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = Vec::new();
        for p in self.stores.values() {
            out.extend(p.iso.iter().chain(&p.aoc).map(PathBuf::as_path));
        }
        out.extend(self.vocabs.values().map(PathBuf::as_path));
        for m in [&self.lsim, &self.wa, &self.relp] {
            out.extend(m.values().map(PathBuf::as_path));
        }
        for p in self.bli.values() {
            out.extend(p.train.iter().chain(&p.test).map(PathBuf::as_path));
        }
        out.extend(self.clir.values().map(PathBuf::as_path));
        out.extend(self.cka.values().map(PathBuf::as_path));
        out
    }
}

/// One evaluated metric. `cell` names a position inside a multi-valued result
/// (a layer, or a layer pair for heatmaps) and is empty otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config: String,
    pub task: Task,
    pub lang: String,
    pub metric: String,
    pub cell: String,
    pub value: Option<f64>,
    pub coverage: Option<f64>,
    pub provenance: String,
    pub error: Option<String>,
    /// Kept out of the result tables so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_ms: f64,
}

pub const RESULT_COLUMNS: [&str; 9] = [
    "config",
    "task",
    "lang",
    "metric",
    "cell",
    "value",
    "coverage",
    "provenance",
    "error",
];

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(RESULT_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.config.clone(),
            r.task.to_string(),
            r.lang.clone(),
            r.metric.clone(),
            r.cell.clone(),
            opt_f64(r.value),
            opt_f64(r.coverage),
            r.provenance.clone(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(RESULT_COLUMNS) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::parse(s, "expected a number"))
        }
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(ResultRow {
            config: rec[0].to_string(),
            task: rec[1].parse()?,
            lang: rec[2].to_string(),
            metric: rec[3].to_string(),
            cell: rec[4].to_string(),
            value: num(&rec[5])?,
            coverage: num(&rec[6])?,
            provenance: rec[7].to_string(),
            error: (!rec[8].is_empty()).then(|| rec[8].to_string()),
            wall_ms: 0.0,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub rows: usize,
    pub failed_rows: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub results_csv: PathBuf,
    pub results_json: PathBuf,
}

fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 of a file, or of every file below a directory in sorted order.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| walk_error(path, e))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let f = entry.path();
        let rel = f.strip_prefix(path).unwrap_or(f).to_string_lossy().into_owned();
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Loaded input with the hash of the file(s) it came from.
struct Hashed<T> {
    data: T,
    hash: String,
}

fn hashed<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>) -> Result<Hashed<T>> {
    Ok(Hashed {
        data: load(path)?,
        hash: hash_path(path)?,
    })
}

struct OpenStore {
    store: TokenStore,
    hash: String,
}

struct Inputs {
    stores: BTreeMap<(String, SourceKind), (Option<OpenStore>, Option<OpenStore>)>,
    vocabs: BTreeMap<String, Hashed<Vocabulary>>,
    lsim: BTreeMap<String, Hashed<Vec<SimilarityPair>>>,
    wa: BTreeMap<String, Hashed<Vec<AnalogyQuestion>>>,
    relp: BTreeMap<String, Hashed<Vec<RelationPair>>>,
    bli: BTreeMap<LangPair, (Hashed<BilingualLexicon>, Hashed<BilingualLexicon>)>,
    clir: BTreeMap<LangPair, Hashed<RetrievalCollection>>,
    cka: BTreeMap<LangPair, Hashed<BilingualLexicon>>,
}

impl Inputs {
    fn load(spec: &GridSpec) -> Result<Self> {
        let open = |p: &Option<PathBuf>| -> Result<Option<OpenStore>> {
            p.as_ref()
                .map(|p| {
                    let store = TokenStore::open(p)?;
                    let hash = store.content_hash();
                    Ok(OpenStore { store, hash })
                })
                .transpose()
        };
        let mut stores = BTreeMap::new();
        for (k, p) in &spec.stores {
            stores.insert(k.clone(), (open(&p.iso)?, open(&p.aoc)?));
        }
        let mut vocabs = BTreeMap::new();
        for (k, p) in &spec.vocabs {
            vocabs.insert(k.clone(), hashed(p, |p| Vocabulary::load(p))?);
        }
        let mut lsim = BTreeMap::new();
        for (k, p) in &spec.lsim {
            lsim.insert(k.clone(), hashed(p, |p| load_similarity(p))?);
        }
        let mut wa = BTreeMap::new();
        for (k, p) in &spec.wa {
            wa.insert(k.clone(), hashed(p, |p| load_analogies(p))?);
        }
        let mut relp = BTreeMap::new();
        for (k, p) in &spec.relp {
            relp.insert(k.clone(), hashed(p, |p| load_relations(p))?);
        }
        let mut bli = BTreeMap::new();
        for (k, p) in &spec.bli {
            if let (Some(train), Some(test)) = (&p.train, &p.test) {
                let train = hashed(train, |p| BilingualLexicon::load(p, Split::Train))?;
                let test = hashed(test, |p| BilingualLexicon::load(p, Split::Test))?;
                if let Err(e) = BilingualLexicon::check_disjoint(&train.data, &test.data) {
                    log::warn!("bli.{}-{}: {e}", k.0, k.1);
                }
                bli.insert(k.clone(), (train, test));
            }
        }
        let mut clir = BTreeMap::new();
        for (k, p) in &spec.clir {
            clir.insert(k.clone(), hashed(p, |p| RetrievalCollection::load(p))?);
        }
        let mut cka = BTreeMap::new();
        for (k, p) in &spec.cka {
            cka.insert(k.clone(), hashed(p, |p| BilingualLexicon::load(p, Split::Test))?);
        }
        Ok(Inputs {
            stores,
            vocabs,
            lsim,
            wa,
            relp,
            bli,
            clir,
            cka,
        })
    }

    /// Store set and the hashes identifying it.
    fn store_set(&self, lang: &str, source: SourceKind, context: ContextMode) -> Result<(StoreSet<'_>, String)> {
        let missing = || Error::InvalidArgument(format!("no {} store for {lang}", source.as_str()));
        let (iso, aoc) = self.stores.get(&(lang.to_string(), source)).ok_or_else(missing)?;
        let iso = iso.as_ref().ok_or_else(missing)?;
        match context {
            ContextMode::Iso => Ok((StoreSet::iso(&iso.store), iso.hash.clone())),
            ContextMode::Aoc(_) => {
                let aoc = aoc.as_ref().ok_or_else(missing)?;
                Ok((
                    StoreSet::aoc(&aoc.store, &iso.store),
                    format!("{}+{}", aoc.hash, iso.hash),
                ))
            }
        }
    }
}

/// A distilled matrix and the key it is cached under.
#[derive(Clone)]
struct Distilled {
    matrix: Arc<TypeEmbeddingMatrix>,
    key: String,
}

type MatrixSlot = std::result::Result<Distilled, String>;

struct Cache {
    dir: PathBuf,
    hits: usize,
    misses: usize,
}

/// Vocabulary words that at least one store in `stores` can resolve.
fn resolvable(vocab: &Vocabulary, stores: &StoreSet<'_>) -> Result<Vocabulary> {
    let words = vocab
        .iter()
        .filter(|w| stores.primary.contains(w) || stores.backoff.is_some_and(|b| b.contains(w)));
    Vocabulary::from_words(words)
}

/// Matrices for every scheme of one pooling config in one language.
fn distill_group(
    inputs: &Inputs,
    lang: &str,
    pooling: PoolingConfig,
    schemes: &[LayerScheme],
    cache: &mut Cache,
) -> Result<Vec<Distilled>> {
    let (stores, store_hash) = inputs.store_set(lang, pooling.source, pooling.context)?;
    let vocab = &inputs.vocabs[lang];
    let configs: Vec<ExtractionConfig> = schemes
        .iter()
        .map(|&l| ExtractionConfig::new(pooling.source, pooling.context, pooling.policy, l))
        .collect();
    let keys: Vec<String> = configs
        .iter()
        .map(|c| sha_hex(&[&store_hash, &vocab.hash, &c.to_string()]))
        .collect();
    let path_of = |k: &str| cache.dir.join(format!("{k}.lxtm"));

    let mut found: Vec<Option<Arc<TypeEmbeddingMatrix>>> = Vec::with_capacity(keys.len());
    for k in &keys {
        let p = path_of(k);
        let m = if p.is_file() {
            match TypeEmbeddingMatrix::read_binary(&p) {
                Ok(m) => Some(Arc::new(m)),
                Err(e) => {
                    log::warn!("ignoring unreadable cache entry {}: {e}", p.display());
                    None
                }
            }
        } else {
            None
        };
        found.push(m);
    }
    let todo: Vec<usize> = (0..keys.len()).filter(|&i| found[i].is_none()).collect();
    cache.hits += keys.len() - todo.len();
    cache.misses += todo.len();
    if !todo.is_empty() {
        let words = Arc::new(resolvable(&vocab.data, &stores)?);
        let dropped = vocab.data.len() - words.len();
        if dropped > 0 {
            log::info!("{lang} {pooling}: {dropped} vocabulary word(s) not in the stores");
        }
        let wanted: Vec<LayerScheme> = todo.iter().map(|&i| schemes[i]).collect();
        let built = build_matrices(words, &stores, pooling.context, pooling.policy, &wanted)?;
        for (&i, mut m) in todo.iter().zip(built) {
            m.provenance.config = Some(configs[i].to_string());
            m.write_binary(path_of(&keys[i]))?;
            found[i] = Some(Arc::new(m));
        }
    }
    Ok(found
        .into_iter()
        .zip(keys)
        .map(|(m, key)| Distilled {
            matrix: m.expect("filled above"),
            key,
        })
        .collect())
}

struct RowBuilder<'a> {
    config: &'a str,
    task: Task,
    lang: String,
    seed: u64,
}

impl RowBuilder<'_> {
    fn row(
        &self,
        metric: &str,
        cell: &str,
        outcome: &std::result::Result<(f64, f64), String>,
        provenance: &[&str],
        wall_ms: f64,
    ) -> ResultRow {
        let mut parts = vec![self.config, metric, cell, &self.lang];
        parts.extend_from_slice(provenance);
        let seed = self.seed.to_string();
        parts.push(&seed);
        let task = self.task.to_string();
        parts.push(&task);
        let (value, coverage, error) = match outcome {
            Ok((v, c)) => (Some(*v), Some(*c), None),
            Err(e) => (None, None, Some(e.clone())),
        };
        ResultRow {
            config: self.config.to_string(),
            task: self.task,
            lang: self.lang.clone(),
            metric: metric.to_string(),
            cell: cell.to_string(),
            value,
            coverage,
            provenance: sha_hex(&parts)[..16].to_string(),
            error,
            wall_ms,
        }
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> (std::result::Result<T, String>, f64) {
    let t = Instant::now();
    let r = f().map_err(|e| e.to_string());
    (r, t.elapsed().as_secs_f64() * 1e3)
}

fn matrix_of<'a>(mats: &'a BTreeMap<String, MatrixSlot>, lang: &str) -> Result<&'a Distilled> {
    match mats.get(lang) {
        Some(Ok(d)) => Ok(d),
        Some(Err(e)) => Err(Error::InvalidArgument(format!("distillation failed for {lang}: {e}"))),
        None => Err(Error::InvalidArgument(format!("no matrix for {lang}"))),
    }
}

fn pair_label((s, t): &LangPair) -> String {
    format!("{s}-{t}")
}

/// All rows of one configuration, in task order.
fn evaluate_config(
    spec: &GridSpec,
    inputs: &Inputs,
    config: &str,
    mats: &BTreeMap<String, MatrixSlot>,
) -> Vec<ResultRow> {
    let on = |t| spec.tasks.contains(&t);
    let mut rows = Vec::new();
    let builder = |task, lang: String| RowBuilder {
        config,
        task,
        lang,
        seed: spec.seed,
    };

    if on(Task::Lsim) {
        for (lang, ds) in &inputs.lsim {
            let b = builder(Task::Lsim, lang.clone());
            let (r, ms) = timed(|| {
                let m = matrix_of(mats, lang)?;
                let r = eval_lsim(&m.matrix, &ds.data)?;
                Ok(((r.rho, r.coverage()), m.key.clone()))
            });
            let key = r.as_ref().map(|x| x.1.clone()).unwrap_or_default();
            rows.push(b.row("spearman", "", &r.map(|x| x.0), &[&key, &ds.hash], ms));
        }
    }
    if on(Task::Wa) {
        for (lang, ds) in &inputs.wa {
            let b = builder(Task::Wa, lang.clone());
            let (r, ms) = timed(|| {
                let m = matrix_of(mats, lang)?;
                Ok((eval_analogy(&m.matrix, &ds.data)?, m.key.clone()))
            });
            let key = r.as_ref().map(|x| x.1.clone()).unwrap_or_default();
            let micro = r.as_ref().map(|(a, _)| (a.p_at_1, a.coverage())).map_err(Clone::clone);
            let macro_ = r
                .as_ref()
                .map(|(a, _)| (a.category_macro_p_at_1, a.coverage()))
                .map_err(Clone::clone);
            rows.push(b.row("p_at_1", "", &micro, &[&key, &ds.hash], ms));
            rows.push(b.row("p_at_1_category_macro", "", &macro_, &[&key, &ds.hash], ms));
        }
    }
    if on(Task::Bli) {
        for (pair, (train, test)) in &inputs.bli {
            let b = builder(Task::Bli, pair_label(pair));
            let (r, ms) = timed(|| {
                let (s, t) = (matrix_of(mats, &pair.0)?, matrix_of(mats, &pair.1)?);
                let a = align_spaces(&s.matrix, &t.matrix, &train.data)?;
                let r = eval_bli(&a.src, &a.tgt, &a.map, &test.data)?;
                Ok(((r.mrr, r.coverage()), format!("{}+{}", s.key, t.key)))
            });
            let key = r.as_ref().map(|x| x.1.clone()).unwrap_or_default();
            rows.push(b.row("mrr", "", &r.map(|x| x.0), &[&key, &train.hash, &test.hash], ms));
        }
    }
    if on(Task::Clir) {
        for (pair, coll) in &inputs.clir {
            let b = builder(Task::Clir, pair_label(pair));
            let train = &inputs.bli[pair].0;
            let (r, ms) = timed(|| {
                let (s, t) = (matrix_of(mats, &pair.0)?, matrix_of(mats, &pair.1)?);
                let a = align_spaces(&s.matrix, &t.matrix, &train.data)?;
                let c = &coll.data;
                let q_idf = build_idf(c.queries.values().map(Vec::as_slice));
                let d_idf = build_idf(c.documents.values().map(Vec::as_slice));
                let r = eval_clir(c, &a.src, &a.tgt, &a.map, &q_idf, &d_idf)?;
                let cov = (r.queries - r.zero_queries) as f64 / r.queries as f64;
                Ok(((r.map_score, cov), format!("{}+{}", s.key, t.key)))
            });
            let key = r.as_ref().map(|x| x.1.clone()).unwrap_or_default();
            rows.push(b.row("map", "", &r.map(|x| x.0), &[&key, &train.hash, &coll.hash], ms));
        }
    }
    if on(Task::Relp) {
        for (lang, ds) in &inputs.relp {
            let b = builder(Task::Relp, lang.clone());
            let (r, ms) = timed(|| {
                let m = matrix_of(mats, lang)?;
                let f = RelpFeatures::from_pairs(&m.matrix, &ds.data);
                let cov = f.len() as f64 / ds.data.len().max(1) as f64;
                let params = BaselineParams {
                    seed: spec.seed,
                    ..BaselineParams::default()
                };
                let r = train_relation_baseline(&f, &params)?;
                Ok(((r.micro_f1_mean, cov), m.key.clone()))
            });
            let key = r.as_ref().map(|x| x.1.clone()).unwrap_or_default();
            rows.push(b.row("micro_f1", "", &r.map(|x| x.0), &[&key, &ds.hash], ms));
        }
    }
    if on(Task::Cka) {
        for (pair, lex) in &inputs.cka {
            let b = builder(Task::Cka, pair_label(pair));
            let (r, ms) = timed(|| {
                let (s, t) = (matrix_of(mats, &pair.0)?, matrix_of(mats, &pair.1)?);
                let pairs = cka::lexicon_pairs(&lex.data);
                let v = cka::matrix_pair_cka(&s.matrix, &t.matrix, &pairs, &CkaPreprocessing::default())?;
                let covered = pairs
                    .iter()
                    .filter(|(a, b)| s.matrix.vocab().contains(a) && t.matrix.vocab().contains(b))
                    .count();
                Ok((
                    (v, covered as f64 / pairs.len().max(1) as f64),
                    format!("{}+{}", s.key, t.key),
                ))
            });
            let key = r.as_ref().map(|x| x.1.clone()).unwrap_or_default();
            rows.push(b.row("matrix_cka", "", &r.map(|x| x.0), &[&key, &lex.hash], ms));
        }
    }
    rows
}

/// Layer-level CKA rows for one pooling config: self-similarity per language
/// and translation / random-pair correspondence per language pair.
fn layer_cka_rows(spec: &GridSpec, inputs: &Inputs, pooling: PoolingConfig) -> Vec<ResultRow> {
    let config = pooling.to_string();
    let settings = CkaSettings::new(pooling.context, pooling.policy);
    let mut rows = Vec::new();
    let langs: BTreeSet<&String> = inputs.cka.keys().flat_map(|(s, t)| [s, t]).collect();

    for lang in langs {
        let b = RowBuilder {
            config: &config,
            task: Task::Cka,
            lang: lang.clone(),
            seed: spec.seed,
        };
        let (r, ms) = timed(|| {
            let (stores, hash) = inputs.store_set(lang, pooling.source, pooling.context)?;
            let vocab = &inputs.vocabs[lang];
            let words = vocab.data.words();
            let r = cka::self_similarity(&stores, words, &settings)?;
            Ok((r, sha_hex(&[&hash, &vocab.hash])))
        });
        match r {
            Ok((res, key)) => {
                let cov = res.word_count as f64 / inputs.vocabs[lang].data.len() as f64;
                for (i, a) in res.axis_a.iter().enumerate() {
                    for (j, c) in res.axis_b.iter().enumerate() {
                        rows.push(b.row("self", &format!("{a},{c}"), &Ok((res.scores[i][j], cov)), &[&key], ms));
                    }
                }
            }
            Err(e) => rows.push(b.row("self", "", &Err(e), &[], ms)),
        }
    }

    for (pair, lex) in &inputs.cka {
        let b = RowBuilder {
            config: &config,
            task: Task::Cka,
            lang: pair_label(pair),
            seed: spec.seed,
        };
        let pairs = cka::lexicon_pairs(&lex.data);
        for metric in ["translation", "random"] {
            let (r, ms) = timed(|| {
                let (src, sh) = inputs.store_set(&pair.0, pooling.source, pooling.context)?;
                let (tgt, th) = inputs.store_set(&pair.1, pooling.source, pooling.context)?;
                let r = if metric == "translation" {
                    cka::bilingual_correspondence(&src, &tgt, &pairs, &settings)?
                } else {
                    let sources: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
                    let targets: Vec<String> = inputs.vocabs[&pair.1].data.words().to_vec();
                    cka::random_pair_baseline(&src, &tgt, &sources, &targets, sources.len(), spec.seed, &settings)?
                };
                Ok((r, sha_hex(&[&sh, &th, &lex.hash])))
            });
            match r {
                Ok((res, key)) => {
                    let cov = res.word_count as f64 / pairs.len().max(1) as f64;
                    for (i, a) in res.axis_a.iter().enumerate() {
                        rows.push(b.row(metric, a, &Ok((res.scores[i][0], cov)), &[&key], ms));
                    }
                }
                Err(e) => rows.push(b.row(metric, "", &Err(e), &[], ms)),
            }
        }
    }
    rows
}

/// Runs the whole grid and writes `results.csv`, `results.json` and
/// `timings.csv` to the output directory.
pub fn run_grid(spec: &GridSpec) -> Result<GridSummary> {
    for p in spec.referenced_paths() {
        if !p.exists() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by the grid spec"),
            ));
        }
    }
    par::with_workers(spec.workers, || run_loaded(spec))
}

fn run_loaded(spec: &GridSpec) -> Result<GridSummary> {
    let inputs = Inputs::load(spec)?;
    let langs = spec.languages();
    for c in &spec.configs {
        for lang in &langs {
            let (stores, _) = inputs.store_set(lang, c.source, c.context)?;
            stores.check(c.context)?;
            c.validate(stores.num_layers())
                .map_err(|e| Error::parse(c.to_string(), e.to_string()))?;
        }
    }

    let cache_dir = spec.out.join("cache");
    std::fs::create_dir_all(&cache_dir).map_err(|e| Error::io(&cache_dir, e))?;
    let mut cache = Cache {
        dir: cache_dir,
        hits: 0,
        misses: 0,
    };

    // configs grouped by pooling so each word is pooled once per group
    let mut groups: Vec<(PoolingConfig, Vec<ExtractionConfig>)> = Vec::new();
    for c in &spec.configs {
        match groups.iter_mut().find(|(p, _)| *p == c.pooling()) {
            Some((_, cs)) => cs.push(*c),
            None => groups.push((c.pooling(), vec![*c])),
        }
    }

    let mut by_config: HashMap<ExtractionConfig, Vec<ResultRow>> = HashMap::new();
    let mut layer_rows = Vec::new();
    for (pooling, configs) in &groups {
        let schemes: Vec<LayerScheme> = configs.iter().map(|c| c.layers).collect();
        let mut per_config: Vec<BTreeMap<String, MatrixSlot>> = vec![BTreeMap::new(); configs.len()];
        for lang in &langs {
            match distill_group(&inputs, lang, *pooling, &schemes, &mut cache) {
                Ok(ms) => {
                    for (slot, m) in per_config.iter_mut().zip(ms) {
                        slot.insert(lang.clone(), Ok(m));
                    }
                }
                Err(e) => {
                    log::error!("{lang} {pooling}: {e}");
                    for slot in &mut per_config {
                        slot.insert(lang.clone(), Err(e.to_string()));
                    }
                }
            }
        }
        let idx: Vec<usize> = (0..configs.len()).collect();
        let results = par::map_slice(&idx, |&i| {
            evaluate_config(spec, &inputs, &configs[i].to_string(), &per_config[i])
        });
        for (c, rows) in configs.iter().zip(results) {
            by_config.insert(*c, rows);
        }
        if spec.tasks.contains(&Task::Cka) && !inputs.cka.is_empty() {
            layer_rows.extend(layer_cka_rows(spec, &inputs, *pooling));
        }
    }

    let mut rows: Vec<ResultRow> = spec
        .configs
        .iter()
        .flat_map(|c| by_config.remove(c).unwrap_or_default())
        .collect();
    rows.extend(layer_rows);
    rows.sort_by_key(|r| r.task);

    write_outputs(spec, &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let summary = GridSummary {
        rows: rows.len(),
        failed_rows: failed,
        cache_hits: cache.hits,
        cache_misses: cache.misses,
        results_csv: spec.out.join("results.csv"),
        results_json: spec.out.join("results.json"),
    };
    log::info!(
        "grid: {} rows ({} failed), matrices {} cached / {} distilled",
        summary.rows,
        summary.failed_rows,
        summary.cache_hits,
        summary.cache_misses
    );
    Ok(summary)
}

fn write_outputs(spec: &GridSpec, rows: &[ResultRow]) -> Result<()> {
    let out = &spec.out;
    write_results_csv(rows, out.join("results.csv"))?;

    let mut nested: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        nested.entry(r.task.to_string()).or_default().push(r);
    }
    let json = serde_json::to_string_pretty(&nested).map_err(|e| Error::Format(e.to_string()))?;
    let path = out.join("results.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let path = out.join("timings.csv");
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["config", "task", "lang", "metric", "cell", "wall_ms"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            &r.config,
            &r.task.to_string(),
            &r.lang,
            &r.metric,
            &r.cell,
            &format!("{:.3}", r.wall_ms),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// One long-format plot point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub config: String,
    pub x: String,
    pub series: String,
    pub value: f64,
}

/// `key=value;key=value` filter over result rows. Keys are `config`, `task`,
/// `lang`, `metric` and `cell`; a value may list alternatives separated by
/// `,` and may end in `*` to match a prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Selector {
    clauses: Vec<(String, Vec<String>)>,
}

const SELECTOR_KEYS: [&str; 5] = ["config", "task", "lang", "metric", "cell"];

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut clauses = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::parse(part, "expected key=value"))?;
            let k = k.trim().to_ascii_lowercase();
            if !SELECTOR_KEYS.contains(&k.as_str()) {
                return Err(Error::parse(
                    part,
                    format!("unknown key, expected one of {SELECTOR_KEYS:?}"),
                ));
            }
            clauses.push((k, v.split(',').map(|x| x.trim().to_string()).collect()));
        }
        Ok(Selector { clauses })
    }
}

fn pattern_matches(pattern: &str, value: &str, case_insensitive: bool) -> bool {
    let (p, v) = if case_insensitive {
        (pattern.to_ascii_uppercase(), value.to_ascii_uppercase())
    } else {
        (pattern.to_string(), value.to_string())
    };
    match p.strip_suffix('*') {
        Some(prefix) => v.starts_with(prefix),
        None => p == v,
    }
}

impl Selector {
    pub fn matches(&self, row: &ResultRow) -> bool {
        self.clauses.iter().all(|(k, alts)| {
            let (value, ci) = match k.as_str() {
                "config" => (row.config.clone(), false),
                "task" => (row.task.to_string(), true),
                "lang" => (row.lang.clone(), false),
                "metric" => (row.metric.clone(), false),
                _ => (row.cell.clone(), false),
            };
            alts.iter().any(|a| pattern_matches(a, &value, ci))
        })
    }
}

/// Long-format points for the successful rows matching `selector`, grouped by
/// task and otherwise in table order.
///
/// Rows of a full configuration plot the layer scheme on `x` under their
/// pooling config. Rows with a `cell` plot it instead: `a,b` cells become
/// `x = a`, `series = b`.
pub fn emit_plot_data(rows: &[ResultRow], selector: &Selector) -> Result<Vec<PlotPoint>> {
    let mut selected: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.value.is_some() && selector.matches(r))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument("selector matches no successful row".into()));
    }
    selected.sort_by_key(|r| r.task);
    Ok(selected
        .into_iter()
        .map(|r| {
            let series = format!("{}/{}/{}", r.task, r.lang, r.metric);
            let (config, scheme) = match r.config.parse::<ExtractionConfig>() {
                Ok(c) => (c.pooling().to_string(), c.layers.to_string()),
                Err(_) => (r.config.clone(), String::new()),
            };
            let (x, series) = match r.cell.split_once(',') {
                Some((a, b)) => (a.to_string(), b.to_string()),
                None if !r.cell.is_empty() => (r.cell.clone(), series),
                None => (scheme, series),
            };
            PlotPoint {
                config,
                x,
                series,
                value: r.value.expect("filtered above"),
            }
        })
        .collect())
}

pub fn write_plot_csv<W: std::io::Write>(points: &[PlotPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["config", "x", "series", "value"]).map_err(csv_err)?;
    for p in points {
        w.write_record([&p.config, &p.x, &p.series, &p.value.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}
