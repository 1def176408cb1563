//! Synthetic golden fixture and brute-force reference implementations.
//!
//! Stores are serialized byte by byte here, and every reference metric is
//! computed from the in-memory fixture data with its own arithmetic, so the
//! engine is only ever compared against code that does not call it.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYERS: usize = 4;
pub const DIM: usize = 8;
pub const WORDS: usize = 20;
pub const AOC_M: usize = 3;
pub const SEED: u64 = 0x5eed_2024;

pub const CLS: u8 = 1;
pub const SEP: u8 = 2;

/// One occurrence: flags per token and `LAYERS x tokens x DIM` values.
#[derive(Clone, Debug)]
pub struct Occ {
    pub flags: Vec<u8>,
    pub vectors: Vec<f32>,
}

impl Occ {
    pub fn tokens(&self) -> usize {
        self.flags.len()
    }

    pub fn at(&self, layer: usize, token: usize, d: usize) -> f32 {
        self.vectors[(layer * self.tokens() + token) * DIM + d]
    }
}

#[derive(Clone, Debug)]
pub struct Lang {
    pub words: Vec<String>,
    pub iso: Vec<Occ>,
    pub aoc: Vec<Vec<Occ>>,
}

/// Serializes a store: magic, version, header length, JSON header, records.
pub fn write_store_bytes(path: &Path, source_kind: &str, layers: usize, dim: usize, groups: &[(String, Vec<Occ>)]) {
    let mut payload: Vec<u8> = Vec::new();
    let mut index = Vec::new();
    for (word, occs) in groups {
        if occs.is_empty() {
            continue;
        }
        index.push(serde_json::json!({"word": word, "offset": payload.len(), "count": occs.len()}));
        for o in occs {
            payload.extend_from_slice(&(o.flags.len() as u32).to_le_bytes());
            payload.extend_from_slice(&o.flags);
            assert_eq!(o.vectors.len(), layers * o.flags.len() * dim);
            for v in &o.vectors {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = serde_json::json!({
        "model_id": "fixture-encoder",
        "source_kind": source_kind,
        "num_layers": layers,
        "dim": dim,
        "export_seed": SEED,
        "vocab_size": index.len(),
        "index": index,
    });
    let json = serde_json::to_vec(&header).unwrap();
    let mut f = fs::File::create(path).unwrap();
    f.write_all(b"LXTS").unwrap();
    f.write_all(&1u32.to_le_bytes()).unwrap();
    f.write_all(&(json.len() as u64).to_le_bytes()).unwrap();
    f.write_all(&json).unwrap();
    f.write_all(&payload).unwrap();
}

pub fn write_lines(path: &Path, lines: &[String]) {
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

/// Random orthogonal matrix by Gram-Schmidt on uniform columns.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.iter().map(|a| a / n).collect());
        }
    }
    // rows of q are orthonormal, so q is orthogonal
    q
}

/// `v R` for a row vector.
pub fn rotate(v: &[f64], r: &[Vec<f64>]) -> Vec<f64> {
    (0..r.len())
        .map(|j| v.iter().enumerate().map(|(i, x)| x * r[i][j]).sum())
        .collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const EN: [&str; WORDS] = [
    "river", "stone", "music", "garden", "window", "bread", "silver", "forest", "candle", "winter", "letter", "bridge",
    "mirror", "thunder", "harbor", "pepper", "saddle", "lantern", "meadow", "violin",
];
const DE: [&str; WORDS] = [
    "fluss",
    "stein",
    "musik",
    "garten",
    "fenster",
    "brot",
    "silber",
    "wald",
    "kerze",
    "winterzeit",
    "brief",
    "bruecke",
    "spiegel",
    "donner",
    "hafen",
    "pfeffer",
    "sattel",
    "laterne",
    "wiese",
    "geige",
];

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub en: Lang,
    pub de: Lang,
    pub lsim: Vec<(String, String, f64)>,
    pub wa: Vec<(String, String, String, Vec<String>)>,
    pub bli_train: Vec<(String, String)>,
    pub bli_test: Vec<(String, String)>,
    pub documents: BTreeMap<String, Vec<String>>,
    pub queries: BTreeMap<String, Vec<String>>,
    pub qrels: BTreeMap<String, BTreeSet<String>>,
    pub relations: Vec<(String, String, &'static str)>,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn build() -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let uniform =
            |rng: &mut ChaCha8Rng, n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };

        let mut en = Lang {
            words: EN.iter().map(|s| s.to_string()).collect(),
            iso: Vec::new(),
            aoc: Vec::new(),
        };
        for i in 0..WORDS {
            let k = 1 + i % 3;
            let mut flags = vec![CLS];
            flags.extend(std::iter::repeat_n(0u8, k));
            flags.push(SEP);
            let t = flags.len();
            en.iso.push(Occ {
                flags: flags.clone(),
                vectors: uniform(&mut rng, LAYERS * t * DIM),
            });
            // words with i % 6 == 0 have no corpus occurrence; i % 6 > 3 exceed M
            let count = i % 6;
            let occs = (0..count)
                .map(|j| {
                    // every other occurrence drops the SEP token
                    let f: Vec<u8> = if j % 2 == 1 {
                        flags[..t - 1].to_vec()
                    } else {
                        flags.clone()
                    };
                    let n = LAYERS * f.len() * DIM;
                    Occ {
                        flags: f,
                        vectors: uniform(&mut rng, n),
                    }
                })
                .collect();
            en.aoc.push(occs);
        }

        let r = random_orthogonal(&mut rng, DIM);
        let image = |o: &Occ, rng: &mut ChaCha8Rng| -> Occ {
            let mut vectors = Vec::with_capacity(o.vectors.len());
            for chunk in o.vectors.chunks(DIM) {
                let v: Vec<f64> = chunk.iter().map(|&x| x as f64).collect();
                for x in rotate(&v, &r) {
                    vectors.push((x + 0.05 * gaussian(rng)) as f32);
                }
            }
            Occ {
                flags: o.flags.clone(),
                vectors,
            }
        };
        let de = Lang {
            words: DE.iter().map(|s| s.to_string()).collect(),
            iso: en.iso.iter().map(|o| image(o, &mut rng)).collect(),
            aoc: en
                .aoc
                .iter()
                .map(|os| os.iter().map(|o| image(o, &mut rng)).collect())
                .collect(),
        };

        let mut lsim = Vec::new();
        while lsim.len() < 15 {
            let (a, b) = (rng.random_range(0..WORDS), rng.random_range(0..WORDS));
            if a != b {
                let gold = (rng.random_range(0.0..10.0f64) * 2.0).round() / 2.0;
                lsim.push((EN[a].to_string(), EN[b].to_string(), gold));
            }
        }
        lsim.push(("river".into(), "unseenword".into(), 4.0));

        let mut wa = Vec::new();
        while wa.len() < 12 {
            let mut idx: Vec<usize> = (0..WORDS).collect();
            idx.shuffle(&mut rng);
            let golds = if wa.len() % 3 == 0 {
                vec![EN[idx[3]].to_string(), EN[idx[4]].to_string()]
            } else {
                vec![EN[idx[3]].to_string()]
            };
            wa.push((
                EN[idx[0]].to_string(),
                EN[idx[1]].to_string(),
                EN[idx[2]].to_string(),
                golds,
            ));
        }
        wa.push((
            "river".into(),
            "unseenword".into(),
            "stone".into(),
            vec!["music".into()],
        ));

        let bli_train = (0..12).map(|i| (EN[i].to_string(), DE[i].to_string())).collect();
        let mut bli_test: Vec<(String, String)> = (12..WORDS).map(|i| (EN[i].to_string(), DE[i].to_string())).collect();
        bli_test.push((EN[13].to_string(), DE[2].to_string()));
        bli_test.push(("unseenword".into(), DE[0].to_string()));

        let mut documents = BTreeMap::new();
        for d in 0..6 {
            let n = rng.random_range(3..6);
            let toks: Vec<String> = (0..n).map(|_| DE[rng.random_range(0..WORDS)].to_string()).collect();
            documents.insert(format!("d{d}"), toks);
        }
        documents.insert("d6".into(), vec!["unbekannt".into()]);
        let mut queries = BTreeMap::new();
        let mut qrels: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for q in 0..4 {
            let picks: Vec<usize> = (0..2).map(|_| rng.random_range(0..WORDS)).collect();
            queries.insert(
                format!("q{q}"),
                picks.iter().map(|&i| EN[i].to_string()).collect::<Vec<_>>(),
            );
            let rel: BTreeSet<String> = documents
                .iter()
                .filter(|(_, toks)| picks.iter().any(|&i| toks.contains(&DE[i].to_string())))
                .map(|(id, _)| id.clone())
                .collect();
            qrels.insert(
                format!("q{q}"),
                if rel.is_empty() { ["d0".to_string()].into() } else { rel },
            );
        }

        const LABELS: [&str; 5] = ["synonymy", "antonymy", "hypernymy", "meronymy", "no_relation"];
        let relations = (0..40)
            .map(|i| {
                let (a, b) = (rng.random_range(0..WORDS), rng.random_range(0..WORDS));
                (EN[a].to_string(), EN[b].to_string(), LABELS[i % 5])
            })
            .collect();

        let fx = Fixture {
            dir: tempfile::tempdir().unwrap(),
            en,
            de,
            lsim,
            wa,
            bli_train,
            bli_test,
            documents,
            queries,
            qrels,
            relations,
        };
        fx.write_files();
        fx
    }

    fn write_files(&self) {
        for (name, lang) in [("en", &self.en), ("de", &self.de)] {
            let iso: Vec<(String, Vec<Occ>)> = lang
                .words
                .iter()
                .cloned()
                .zip(lang.iso.iter().map(|o| vec![o.clone()]))
                .collect();
            let aoc: Vec<(String, Vec<Occ>)> = lang.words.iter().cloned().zip(lang.aoc.iter().cloned()).collect();
            write_store_bytes(&self.path(&format!("{name}.iso.lxts")), "MONO", LAYERS, DIM, &iso);
            write_store_bytes(&self.path(&format!("{name}.aoc.lxts")), "MONO", LAYERS, DIM, &aoc);
            write_lines(&self.path(&format!("{name}.vocab")), &lang.words);
        }
        write_lines(
            &self.path("lsim.txt"),
            &self
                .lsim
                .iter()
                .map(|(a, b, g)| format!("{a} {b} {g}"))
                .collect::<Vec<_>>(),
        );
        write_lines(
            &self.path("wa.txt"),
            &self
                .wa
                .iter()
                .map(|(a, b, c, d)| format!("{a} {b} {c} {}", d.join("/")))
                .collect::<Vec<_>>(),
        );
        let tsv = |pairs: &[(String, String)]| pairs.iter().map(|(a, b)| format!("{a}\t{b}")).collect::<Vec<_>>();
        write_lines(&self.path("bli.train.tsv"), &tsv(&self.bli_train));
        write_lines(&self.path("bli.test.tsv"), &tsv(&self.bli_test));
        let clir = self.path("clir");
        fs::create_dir_all(&clir).unwrap();
        let texts = |m: &BTreeMap<String, Vec<String>>| {
            m.iter()
                .map(|(id, t)| format!("{id}\t{}", t.join(" ")))
                .collect::<Vec<_>>()
        };
        write_lines(&clir.join("documents.tsv"), &texts(&self.documents));
        write_lines(&clir.join("queries.tsv"), &texts(&self.queries));
        let qrels: Vec<String> = self
            .qrels
            .iter()
            .flat_map(|(q, ds)| ds.iter().map(move |d| format!("{q}\t{d}")))
            .collect();
        write_lines(&clir.join("qrels.tsv"), &qrels);
        write_lines(
            &self.path("relp.txt"),
            &self
                .relations
                .iter()
                .map(|(a, b, l)| format!("{a} {b} {l}"))
                .collect::<Vec<_>>(),
        );
    }

    pub fn lang(&self, name: &str) -> &Lang {
        if name == "en" {
            &self.en
        } else {
            &self.de
        }
    }

    /// Grid spec text over the fixture files.
    pub fn grid_spec(&self, configs: &[&str], tasks: &str, out: &Path) -> String {
        let mut s = String::new();
        for l in ["en", "de"] {
            s += &format!(
                "store.{l}.mono.iso = {l}.iso.lxts\nstore.{l}.mono.aoc = {l}.aoc.lxts\nvocab.{l} = {l}.vocab\n"
            );
        }
        for c in configs {
            s += &format!("config = {c}\n");
        }
        s += &format!("tasks = {tasks}\n");
        s += "lsim.en = lsim.txt\nwa.en = wa.txt\nrelp.en = relp.txt\n";
        s += "bli.en-de.train = bli.train.tsv\nbli.en-de.test = bli.test.tsv\nclir.en-de = clir\ncka.en-de = bli.train.tsv\n";
        s += &format!("out = {}\nseed = 3\n", out.display());
        s
    }
}

// ---------------------------------------------------------------------------
// reference distillation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    NoSpec,
    All,
    WithCls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Single(usize),
    AvgLe(usize),
    AvgGe(usize),
}

impl Scheme {
    pub fn layers(self) -> Vec<usize> {
        match self {
            Scheme::Single(n) => vec![n],
            Scheme::AvgLe(n) => (0..=n).collect(),
            Scheme::AvgGe(n) => (n..LAYERS).collect(),
        }
    }

    pub fn id(self) -> String {
        match self {
            Scheme::Single(n) => format!("l{n}"),
            Scheme::AvgLe(n) => format!("avg_le{n}"),
            Scheme::AvgGe(n) => format!("avg_ge{n}"),
        }
    }

    pub fn all() -> Vec<Scheme> {
        (0..LAYERS)
            .flat_map(|n| [Scheme::Single(n), Scheme::AvgLe(n), Scheme::AvgGe(n)])
            .collect()
    }
}

impl Policy {
    pub fn id(self) -> &'static str {
        match self {
            Policy::NoSpec => "nospec",
            Policy::All => "all",
            Policy::WithCls => "withcls",
        }
    }

    fn keeps(self, flag: u8) -> bool {
        flag == 0 || self == Policy::All || (self == Policy::WithCls && flag == CLS)
    }
}

/// Layer-and-token average for one occurrence, tokens pooled last.
pub fn occurrence_vector(o: &Occ, policy: Policy, layers: &[usize]) -> Vec<f64> {
    let tokens: Vec<usize> = (0..o.tokens()).filter(|&t| policy.keeps(o.flags[t])).collect();
    let mut out = [0.0; DIM];
    for &t in &tokens {
        let mut per_token = [0.0; DIM];
        for &l in layers {
            for (d, p) in per_token.iter_mut().enumerate() {
                *p += o.at(l, t, d) as f64;
            }
        }
        for d in 0..DIM {
            out[d] += per_token[d] / layers.len() as f64;
        }
    }
    out.iter().map(|v| v / tokens.len() as f64).collect()
}

/// Reference type-level rows for every word of `lang`; `aoc = None` is ISO.
pub fn distill(lang: &Lang, aoc: Option<usize>, policy: Policy, scheme: Scheme) -> Vec<Vec<f32>> {
    let layers = scheme.layers();
    (0..lang.words.len())
        .map(|i| {
            let occs: Vec<&Occ> = match aoc {
                Some(m) if !lang.aoc[i].is_empty() => lang.aoc[i].iter().take(m).collect(),
                _ => vec![&lang.iso[i]],
            };
            let mut v = [0.0; DIM];
            for o in &occs {
                for (a, b) in v.iter_mut().zip(occurrence_vector(o, policy, &layers)) {
                    *a += b;
                }
            }
            v.iter().map(|x| (x / occs.len() as f64) as f32).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// reference metrics

pub fn cos64(u: &[f64], v: &[f64]) -> f64 {
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    d / (nu * nv)
}

pub fn to64(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect()
}

/// Average ranks by counting smaller and equal values.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn index_of(words: &[String], w: &str) -> Option<usize> {
    words.iter().position(|x| x == w)
}

pub fn lsim(words: &[String], rows: &[Vec<f32>], pairs: &[(String, String, f64)]) -> f64 {
    let rows = to64(rows);
    let (mut g, mut p) = (Vec::new(), Vec::new());
    for (a, b, s) in pairs {
        if let (Some(i), Some(j)) = (index_of(words, a), index_of(words, b)) {
            g.push(*s);
            p.push(cos64(&rows[i], &rows[j]));
        }
    }
    spearman(&g, &p)
}

/// P@1 over questions whose a, b, c are all known.
pub fn analogy(words: &[String], rows: &[Vec<f32>], qs: &[(String, String, String, Vec<String>)]) -> f64 {
    let rows = to64(rows);
    let (mut correct, mut evaluable) = (0usize, 0usize);
    for (a, b, c, gold) in qs {
        let (Some(ia), Some(ib), Some(ic)) = (index_of(words, a), index_of(words, b), index_of(words, c)) else {
            continue;
        };
        evaluable += 1;
        let target: Vec<f64> = (0..rows[0].len())
            .map(|k| rows[ic][k] - rows[ia][k] + rows[ib][k])
            .collect();
        let mut candidates: Vec<(f64, usize)> = (0..rows.len())
            .filter(|&j| j != ia && j != ib && j != ic)
            .map(|j| (cos64(&target, &rows[j]), j))
            .collect();
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        if gold.contains(&words[candidates[0].1]) {
            correct += 1;
        }
    }
    correct as f64 / evaluable as f64
}

/// Unit rows, centered columns, unit rows again.
pub fn normalize_space(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    let unit = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        rows.into_iter()
            .map(|r| {
                let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n > 0.0 {
                    r.iter().map(|a| a / n).collect()
                } else {
                    r
                }
            })
            .collect()
    };
    let mut x = unit(to64(rows));
    let d = x[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|k| x.iter().map(|r| r[k]).sum::<f64>() / x.len() as f64)
        .collect();
    for r in &mut x {
        for k in 0..d {
            r[k] -= mean[k];
        }
    }
    unit(x)
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..p).map(|j| (0..m).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        for v in &mut m[c] {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    let pivot = m[c].clone();
                    for (a, b) in m[r].iter_mut().zip(&pivot) {
                        *a -= f * b;
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Orthogonal polar factor of `XᵀY` by Newton iteration `U ← (U + U⁻ᵀ)/2`,
/// which is the Procrustes solution.
pub fn procrustes(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut u = matmul(&transpose(x), y);
    for _ in 0..100 {
        let inv_t = transpose(&inverse(&u));
        let next: Vec<Vec<f64>> = u
            .iter()
            .zip(&inv_t)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p + q) / 2.0).collect())
            .collect();
        let delta: f64 = next
            .iter()
            .flatten()
            .zip(u.iter().flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        u = next;
        if delta < 1e-30 {
            break;
        }
    }
    u
}

/// Rank of `g` in descending score order, ties to the lower index.
fn sorted_rank(scores: &[f64], g: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().position(|&j| j == g).unwrap() + 1
}

/// Reciprocal best-gold rank per resolvable query, averaged in query order.
pub fn mrr(src: &[Vec<f64>], tgt: &[Vec<f64>], queries: &[(usize, Vec<usize>)]) -> f64 {
    let mut sum = 0.0;
    for (q, golds) in queries {
        let scores: Vec<f64> = tgt.iter().map(|t| cos64(&src[*q], t)).collect();
        let best = golds.iter().map(|&g| sorted_rank(&scores, g)).min().unwrap();
        sum += 1.0 / best as f64;
    }
    sum / queries.len() as f64
}

/// Groups `(source, target)` pairs into resolvable `(source index, target indices)`.
pub fn resolve_pairs(
    src_words: &[String],
    tgt_words: &[String],
    pairs: &[(String, String)],
) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for (s, t) in pairs {
        match out.iter_mut().find(|(x, _)| x == s) {
            Some((_, ts)) => ts.push(t.clone()),
            None => out.push((s.clone(), vec![t.clone()])),
        }
    }
    out.into_iter()
        .filter_map(|(s, ts)| {
            let i = index_of(src_words, &s)?;
            let g: Vec<usize> = ts.iter().filter_map(|t| index_of(tgt_words, t)).collect();
            (!g.is_empty()).then_some((i, g))
        })
        .collect()
}

pub struct Aligned {
    pub src: Vec<Vec<f64>>,
    pub tgt: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
}

pub fn align(
    src_words: &[String],
    src: &[Vec<f32>],
    tgt_words: &[String],
    tgt: &[Vec<f32>],
    train: &[(String, String)],
) -> Aligned {
    let (s, t) = (normalize_space(src), normalize_space(tgt));
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (a, b) in train {
        if let (Some(i), Some(j)) = (index_of(src_words, a), index_of(tgt_words, b)) {
            xs.push(s[i].clone());
            ys.push(t[j].clone());
        }
    }
    let w = procrustes(&xs, &ys);
    Aligned { src: s, tgt: t, w }
}

pub fn bli(
    src_words: &[String],
    src: &[Vec<f32>],
    tgt_words: &[String],
    tgt: &[Vec<f32>],
    train: &[(String, String)],
    test: &[(String, String)],
) -> f64 {
    let a = align(src_words, src, tgt_words, tgt, train);
    let mapped = matmul(&a.src, &a.w);
    mrr(&mapped, &a.tgt, &resolve_pairs(src_words, tgt_words, test))
}

pub fn idf(docs: &[&Vec<String>]) -> BTreeMap<String, f64> {
    let n = docs.len() as f64;
    let vocab: BTreeSet<&String> = docs.iter().flat_map(|d| d.iter()).collect();
    vocab
        .into_iter()
        .map(|w| {
            let df = docs.iter().filter(|d| d.contains(w)).count() as f64;
            (w.clone(), ((n + 1.0) / (df + 1.0)).ln() + 1.0)
        })
        .collect()
}

fn embed(tokens: &[String], words: &[String], space: &[Vec<f64>], idf: &BTreeMap<String, f64>) -> Vec<f64> {
    let mut v = vec![0.0; space[0].len()];
    for t in tokens {
        if let (Some(i), Some(w)) = (index_of(words, t), idf.get(t)) {
            for k in 0..v.len() {
                v[k] += w * space[i][k];
            }
        }
    }
    v
}

pub fn average_precision(ranking: &[String], relevant: &BTreeSet<String>) -> f64 {
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().enumerate() {
        if relevant.contains(d) {
            hits += 1.0;
            sum += hits / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

pub fn clir(fx: &Fixture, src: &[Vec<f32>], tgt: &[Vec<f32>]) -> f64 {
    let a = align(&fx.en.words, src, &fx.de.words, tgt, &fx.bli_train);
    let q_idf = idf(&fx.queries.values().collect::<Vec<_>>());
    let d_idf = idf(&fx.documents.values().collect::<Vec<_>>());
    let docs: Vec<(String, Vec<f64>)> = fx
        .documents
        .iter()
        .map(|(id, toks)| (id.clone(), embed(toks, &fx.de.words, &a.tgt, &d_idf)))
        .collect();
    let mut total = 0.0;
    for (qid, rel) in &fx.qrels {
        let q = embed(&fx.queries[qid], &fx.en.words, &a.src, &q_idf);
        let q = matmul(&[q], &a.w).remove(0);
        let mut scored: Vec<(f64, usize)> = docs
            .iter()
            .enumerate()
            .map(|(i, (_, v))| {
                let zero = v.iter().all(|x| *x == 0.0);
                (if zero { f64::NEG_INFINITY } else { cos64(&q, v) }, i)
            })
            .collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let ranking: Vec<String> = scored.iter().map(|&(_, i)| docs[i].0.clone()).collect();
        total += average_precision(&ranking, rel);
    }
    total / fx.qrels.len() as f64
}

/// Linear CKA from the definition on explicitly preprocessed copies.
pub fn cka(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let prep = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut m: Vec<Vec<f64>> = m
            .iter()
            .map(|r| {
                let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
                r.iter().map(|a| a / n).collect()
            })
            .collect();
        let d = m[0].len();
        for k in 0..d {
            let mean = m.iter().map(|r| r[k]).sum::<f64>() / m.len() as f64;
            m.iter_mut().for_each(|r| r[k] -= mean);
        }
        m
    };
    let (x, y) = (prep(x), prep(y));
    let fro2 = |m: &Vec<Vec<f64>>| m.iter().flatten().map(|a| a * a).sum::<f64>();
    let yx = matmul(&transpose(&y), &x);
    let xx = matmul(&transpose(&x), &x);
    let yy = matmul(&transpose(&y), &y);
    fro2(&yx) / (fro2(&xx).sqrt() * fro2(&yy).sqrt())
}
