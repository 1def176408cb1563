//! Loaders for the lexical datasets consumed by the evaluators.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn line_error(path: &Path, line: usize, reason: impl fmt::Display) -> Error {
    Error::parse(format!("{}:{line}", path.display()), reason.to_string())
}

/// Splits on tabs when present, otherwise on any whitespace.
fn fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).filter(|f| !f.is_empty()).collect()
    } else {
        line.split_whitespace().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPair {
    pub word1: String,
    pub word2: String,
    pub gold: f64,
}

/// `word1 word2 score` per line.
pub fn load_similarity(path: impl AsRef<Path>) -> Result<Vec<SimilarityPair>> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut out = Vec::new();
    for (n, line) in data_lines(&text) {
        let f = fields(line);
        if f.len() < 3 {
            return Err(line_error(path, n, "expected `word1 word2 score`"));
        }
        let gold: f64 = f[2]
            .parse()
            .map_err(|_| line_error(path, n, format!("bad score {:?}", f[2])))?;
        if !gold.is_finite() {
            return Err(line_error(path, n, "score is not finite"));
        }
        out.push(SimilarityPair {
            word1: f[0].to_lowercase(),
            word2: f[1].to_lowercase(),
            gold,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalogyQuestion {
    pub a: String,
    pub b: String,
    pub c: String,
    pub gold: Vec<String>,
    pub category: String,
}

impl AnalogyQuestion {
    pub fn new(a: &str, b: &str, c: &str, gold: &[&str]) -> Self {
        AnalogyQuestion {
            a: a.to_lowercase(),
            b: b.to_lowercase(),
            c: c.to_lowercase(),
            gold: gold.iter().map(|g| g.to_lowercase()).collect(),
            category: String::new(),
        }
    }
}

/// Loads analogy questions from a file or a BATS-style directory tree.
///
/// Every `.txt` file is one category (named by its path relative to the
/// root). A line is either a full question `a b c d1/d2` (a lone `/` between
/// the pairs is ignored) or a BATS pair line `a<TAB>b1/b2`. Pair files are
/// expanded into every ordered combination of two distinct pairs: `a:b1 =
/// c:?` with the second pair's alternatives as the gold set.
pub fn load_analogies(path: impl AsRef<Path>) -> Result<Vec<AnalogyQuestion>> {
    let path = path.as_ref();
    let mut files = Vec::new();
    if path.is_dir() {
        collect_txt(path, &mut files)?;
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut out = Vec::new();
    for file in files {
        let category = file
            .strip_prefix(path)
            .ok()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(&file)
            .with_extension("")
            .to_string_lossy()
            .into_owned();
        let text = read(&file)?;
        let mut pairs: Vec<(String, Vec<String>)> = Vec::new();
        for (n, line) in data_lines(&text) {
            let f: Vec<&str> = line.split_whitespace().filter(|t| *t != "/").collect();
            let alts =
                |s: &str| -> Vec<String> { s.split('/').filter(|x| !x.is_empty()).map(str::to_lowercase).collect() };
            match f.len() {
                2 => pairs.push((f[0].to_lowercase(), alts(f[1]))),
                4 => {
                    let q = AnalogyQuestion {
                        a: f[0].to_lowercase(),
                        b: f[1].to_lowercase(),
                        c: f[2].to_lowercase(),
                        gold: alts(f[3]),
                        category: category.clone(),
                    };
                    if q.gold.is_empty() {
                        return Err(line_error(&file, n, "empty answer set"));
                    }
                    if distinct_abc(&q) {
                        out.push(q);
                    }
                }
                _ => return Err(line_error(&file, n, "expected `a b c d` or `a<TAB>b`")),
            }
        }
        for (i, (a, bs)) in pairs.iter().enumerate() {
            for (j, (c, ds)) in pairs.iter().enumerate() {
                if i == j || bs.is_empty() || ds.is_empty() {
                    continue;
                }
                let q = AnalogyQuestion {
                    a: a.clone(),
                    b: bs[0].clone(),
                    c: c.clone(),
                    gold: ds.clone(),
                    category: category.clone(),
                };
                if distinct_abc(&q) {
                    out.push(q);
                }
            }
        }
    }
    Ok(out)
}

fn distinct_abc(q: &AnalogyQuestion) -> bool {
    q.a != q.b && q.a != q.c && q.b != q.c
}

fn collect_txt(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in walkdir::WalkDir::new(dir) {
        let entry = entry.map_err(|e| walk_error(dir, e))?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e == "txt") {
            out.push(p.to_path_buf());
        }
    }
    Ok(())
}

pub(crate) fn walk_error(root: &Path, e: walkdir::Error) -> Error {
    let path = e.path().unwrap_or(root).to_path_buf();
    Error::io(path, e.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum RelationLabel {
    Synonymy = 0,
    Antonymy = 1,
    Hypernymy = 2,
    Meronymy = 3,
    NoRelation = 4,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 5] = [
        RelationLabel::Synonymy,
        RelationLabel::Antonymy,
        RelationLabel::Hypernymy,
        RelationLabel::Meronymy,
        RelationLabel::NoRelation,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationLabel::Synonymy => "SYNONYMY",
            RelationLabel::Antonymy => "ANTONYMY",
            RelationLabel::Hypernymy => "HYPERNYMY",
            RelationLabel::Meronymy => "MERONYMY",
            RelationLabel::NoRelation => "NO_RELATION",
        })
    }
}

impl FromStr for RelationLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase().replace(['-', ' '], "_");
        Ok(match norm.as_str() {
            "synonymy" | "synonym" | "syn" => RelationLabel::Synonymy,
            "antonymy" | "antonym" | "ant" => RelationLabel::Antonymy,
            "hypernymy" | "hypernym" | "hyper" | "hyp" => RelationLabel::Hypernymy,
            "meronymy" | "meronym" | "mero" | "mer" => RelationLabel::Meronymy,
            "no_relation" | "norelation" | "none" | "random" => RelationLabel::NoRelation,
            _ => return Err(Error::parse(s, "unknown relation label")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationPair {
    pub word1: String,
    pub word2: String,
    pub label: RelationLabel,
}

/// `word1 word2 label` per line.
pub fn load_relations(path: impl AsRef<Path>) -> Result<Vec<RelationPair>> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut out = Vec::new();
    for (n, line) in data_lines(&text) {
        let f = fields(line);
        if f.len() < 3 {
            return Err(line_error(path, n, "expected `word1 word2 label`"));
        }
        let label = f[2]
            .parse()
            .map_err(|_| line_error(path, n, format!("unknown label {:?}", f[2])))?;
        out.push(RelationPair {
            word1: f[0].to_lowercase(),
            word2: f[1].to_lowercase(),
            label,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Source words with their gold target sets, in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct BilingualLexicon {
    pub entries: Vec<(String, Vec<String>)>,
    pub split: Split,
}

impl BilingualLexicon {
    /// Groups `(source, target)` pairs; repeated sources extend the gold set.
    pub fn from_pairs<I, S, T>(pairs: I, split: Split) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut entries: Vec<(String, Vec<String>)> = Vec::new();
        let mut pos: HashMap<String, usize> = HashMap::new();
        for (s, t) in pairs {
            let (s, t) = (s.as_ref().to_lowercase(), t.as_ref().to_lowercase());
            let i = *pos.entry(s.clone()).or_insert_with(|| {
                entries.push((s, Vec::new()));
                entries.len() - 1
            });
            if !entries[i].1.contains(&t) {
                entries[i].1.push(t);
            }
        }
        BilingualLexicon { entries, split }
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let text = read(path)?;
        let mut pairs = Vec::new();
        for (n, line) in data_lines(&text) {
            let f = fields(line);
            if f.len() < 2 {
                return Err(line_error(path, n, "expected `source<TAB>target`"));
            }
            pairs.push((f[0].to_string(), f[1].to_string()));
        }
        Ok(Self::from_pairs(pairs, split))
    }

    /// All `(source, target)` pairs in order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries
            .iter()
            .flat_map(|(s, ts)| ts.iter().map(move |t| (s.as_str(), t.as_str())))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Errors when a source word appears in both lexicons.
    pub fn check_disjoint(train: &BilingualLexicon, test: &BilingualLexicon) -> Result<()> {
        let sources: HashSet<&str> = train.entries.iter().map(|(s, _)| s.as_str()).collect();
        let shared: Vec<String> = test
            .entries
            .iter()
            .filter(|(s, _)| sources.contains(s.as_str()))
            .map(|(s, _)| s.clone())
            .collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{} source word(s) in both train and test, e.g. {:?}",
                shared.len(),
                shared[0]
            )))
        }
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalCollection {
    /// Documents sorted by id.
    pub documents: BTreeMap<String, Vec<String>>,
    pub queries: BTreeMap<String, Vec<String>>,
    pub relevance: BTreeMap<String, HashSet<String>>,
}

impl RetrievalCollection {
    pub fn new(
        documents: BTreeMap<String, Vec<String>>,
        queries: BTreeMap<String, Vec<String>>,
        relevance: BTreeMap<String, HashSet<String>>,
    ) -> Result<Self> {
        for (q, docs) in &relevance {
            if let Some(d) = docs.iter().find(|d| !documents.contains_key(*d)) {
                return Err(Error::InvalidArgument(format!(
                    "query {q:?} judges unknown document {d:?}"
                )));
            }
        }
        Ok(RetrievalCollection {
            documents,
            queries,
            relevance,
        })
    }

    /// Reads `documents.tsv`, `queries.tsv` (`id<TAB>text`) and `qrels.tsv`
    /// (`query<TAB>doc`) from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let texts = |name: &str| -> Result<BTreeMap<String, Vec<String>>> {
            let path = dir.join(name);
            let text = read(&path)?;
            let mut out = BTreeMap::new();
            for (n, line) in data_lines(&text) {
                let Some((id, body)) = line.split_once('\t') else {
                    return Err(line_error(&path, n, "expected `id<TAB>text`"));
                };
                out.insert(id.trim().to_string(), tokenize(body));
            }
            Ok(out)
        };
        let documents = texts("documents.tsv")?;
        let queries = texts("queries.tsv")?;
        let qrels_path = dir.join("qrels.tsv");
        let text = read(&qrels_path)?;
        let mut relevance: BTreeMap<String, HashSet<String>> = BTreeMap::new();
        for (n, line) in data_lines(&text) {
            let f = fields(line);
            if f.len() < 2 {
                return Err(line_error(&qrels_path, n, "expected `query<TAB>doc`"));
            }
            relevance.entry(f[0].to_string()).or_default().insert(f[1].to_string());
        }
        Self::new(documents, queries, relevance)
    }
}
