use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lexprobe::cka::{self, CkaSettings};
use lexprobe::config::{ContextMode, ExtractionConfig, PoolingConfig};
use lexprobe::datasets::{
    load_analogies, load_relations, load_similarity, BilingualLexicon, RetrievalCollection, Split,
};
use lexprobe::distill::{build_matrix, StoreSet};
use lexprobe::eval_mono::{
    eval_analogy, eval_lsim, export_relp_features, train_relation_baseline, BaselineParams, RelpFeatures,
};
use lexprobe::eval_xling::{align_spaces, build_idf, eval_bli, eval_clir};
use lexprobe::grid::{emit_plot_data, read_results_csv, run_grid, write_plot_csv, GridSpec, Selector};
use lexprobe::matrix::TypeEmbeddingMatrix;
use lexprobe::par;
use lexprobe::store::TokenStore;
use lexprobe::vocab::Vocabulary;

#[derive(Parser)]
#[command(
    name = "lexprobe",
    version,
    about = "Distill static word embeddings from token stores and evaluate them"
)]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Where a matrix comes from: a saved file, or distillation from stores.
#[derive(Args, Clone, Debug)]
struct Source {
    /// Saved matrix (text or binary); replaces the distillation flags.
    #[arg(long, conflicts_with_all = ["store", "store_iso", "vocab", "config"])]
    matrix: Option<PathBuf>,
    /// Token store. For AOC configs this is the in-context store.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Isolated-encoding store used as the AOC back-off.
    #[arg(long)]
    store_iso: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Extraction config, e.g. mono.aoc-10.nospec.avg_le6
    #[arg(long)]
    config: Option<String>,
    /// Drop vocabulary words the stores cannot resolve instead of failing.
    #[arg(long)]
    skip_missing: bool,
}

#[derive(Args, Clone, Debug)]
struct TargetSource {
    #[arg(long, conflicts_with_all = ["tgt_store", "tgt_store_iso", "tgt_vocab"])]
    tgt_matrix: Option<PathBuf>,
    #[arg(long)]
    tgt_store: Option<PathBuf>,
    #[arg(long)]
    tgt_store_iso: Option<PathBuf>,
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
}

impl TargetSource {
    /// Target side shares the source's config.
    fn with_config(&self, src: &Source) -> Source {
        Source {
            matrix: self.tgt_matrix.clone(),
            store: self.tgt_store.clone(),
            store_iso: self.tgt_store_iso.clone(),
            vocab: self.tgt_vocab.clone(),
            config: src.config.clone(),
            skip_missing: src.skip_missing,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MatrixFormat {
    /// Binary unless the output ends in .txt
    Auto,
    Text,
    Binary,
}

#[derive(Subcommand)]
enum Command {
    /// Distill a type-level embedding matrix.
    Distill {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        format: MatrixFormat,
    },
    /// Spearman correlation with word-pair similarity ratings.
    EvalLsim {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Word analogy P@1 (file or directory of category files).
    EvalWa {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bilingual lexicon induction MRR after Procrustes alignment.
    EvalBli {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        tgt: TargetSource,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-lingual retrieval MAP.
    EvalClir {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        tgt: TargetSource,
        /// Lexicon used to learn the alignment.
        #[arg(long)]
        train: PathBuf,
        /// Directory with documents.tsv, queries.tsv and qrels.tsv
        #[arg(long)]
        collection: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write relation-prediction pair features.
    RelpExport {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated logistic-regression baseline on exported features.
    RelpBaseline {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer-by-layer CKA self-similarity.
    CkaSelf {
        #[command(flatten)]
        src: Source,
        /// Heatmap CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Same-layer CKA for translation pairs, or for random pairs with --random.
    CkaBiling {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        tgt: TargetSource,
        /// Translation pairs, source<TAB>target
        #[arg(long)]
        pairs: PathBuf,
        /// Pair each source word with a random target word instead.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configured (config, task, language) cell of a grid spec.
    RunGrid {
        spec: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the spec's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Long-format plot data from a grid's results.csv
    PlotData {
        #[arg(long)]
        results: PathBuf,
        /// Row filter, e.g. "task=lsim;lang=en;config=mono.iso.*"
        #[arg(long, default_value = "")]
        select: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(p) = out {
        std::fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .with_context(|| format!("{flag} is required unless a matrix is given"))
}

struct OpenStores {
    primary: TokenStore,
    iso: Option<TokenStore>,
}

impl OpenStores {
    fn open(src: &Source, context: ContextMode) -> Result<Self> {
        let primary = TokenStore::open(required(&src.store, "--store")?)?;
        let iso = match (context, &src.store_iso) {
            (ContextMode::Aoc(_), None) => bail!("AOC configs need --store-iso for the back-off"),
            (_, Some(p)) => Some(TokenStore::open(p)?),
            (ContextMode::Iso, None) => None,
        };
        Ok(OpenStores { primary, iso })
    }

    fn set(&self, context: ContextMode) -> StoreSet<'_> {
        match (context, &self.iso) {
            (ContextMode::Aoc(_), Some(iso)) => StoreSet::aoc(&self.primary, iso),
            _ => StoreSet::iso(&self.primary),
        }
    }
}

fn load_vocab(src: &Source, stores: &StoreSet<'_>) -> Result<Vocabulary> {
    let vocab = Vocabulary::load(required(&src.vocab, "--vocab")?)?;
    if !src.skip_missing {
        return Ok(vocab);
    }
    let kept = vocab
        .iter()
        .filter(|w| stores.primary.contains(w) || stores.backoff.is_some_and(|b| b.contains(w)));
    let kept = Vocabulary::from_words(kept)?;
    if kept.len() < vocab.len() {
        log::warn!("skipping {} unresolvable vocabulary word(s)", vocab.len() - kept.len());
    }
    Ok(kept)
}

fn load_matrix(src: &Source) -> Result<TypeEmbeddingMatrix> {
    if let Some(p) = &src.matrix {
        return TypeEmbeddingMatrix::load(p).with_context(|| format!("loading {}", p.display()));
    }
    let config_str = src
        .config
        .as_deref()
        .context("--config is required unless a matrix is given")?;
    let preliminary: ExtractionConfig = config_str.parse()?;
    let stores = OpenStores::open(src, preliminary.context)?;
    let config = ExtractionConfig::parse_for(config_str, stores.primary.num_layers())?;
    let set = stores.set(config.context);
    let vocab = load_vocab(src, &set)?;
    Ok(build_matrix(Arc::new(vocab), &set, &config)?)
}

/// Accepts either a pooling config or a full config whose layers are ignored.
fn pooling_of(src: &Source) -> Result<PoolingConfig> {
    let s = src.config.as_deref().context("--config is required")?;
    match s.parse::<PoolingConfig>() {
        Ok(p) => Ok(p),
        Err(_) => Ok(s.parse::<ExtractionConfig>()?.pooling()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Distill { src, out, format } => {
            let m = load_matrix(&src)?;
            let text = match format {
                MatrixFormat::Text => true,
                MatrixFormat::Binary => false,
                MatrixFormat::Auto => out.extension().is_some_and(|e| e == "txt"),
            };
            if text {
                m.write_text(&out)?;
            } else {
                m.write_binary(&out)?;
            }
            log::info!("wrote {} x {} matrix to {}", m.rows(), m.dim(), out.display());
            if !m.provenance.backed_off.is_empty() {
                log::info!(
                    "{} word(s) backed off to the isolated encoding",
                    m.provenance.backed_off.len()
                );
            }
        }
        Command::EvalLsim { src, data, out } => {
            let m = load_matrix(&src)?;
            emit(&eval_lsim(&m, &load_similarity(&data)?)?, out.as_deref())?;
        }
        Command::EvalWa { src, data, out } => {
            let m = load_matrix(&src)?;
            emit(&eval_analogy(&m, &load_analogies(&data)?)?, out.as_deref())?;
        }
        Command::EvalBli {
            src,
            tgt,
            train,
            test,
            out,
        } => {
            let (s, t) = (load_matrix(&src)?, load_matrix(&tgt.with_config(&src))?);
            let train = BilingualLexicon::load(&train, Split::Train)?;
            let test = BilingualLexicon::load(&test, Split::Test)?;
            if let Err(e) = BilingualLexicon::check_disjoint(&train, &test) {
                log::warn!("{e}");
            }
            let a = align_spaces(&s, &t, &train)?;
            log::info!("alignment on {} pairs ({} dropped)", a.used_pairs, a.dropped_pairs);
            emit(&eval_bli(&a.src, &a.tgt, &a.map, &test)?, out.as_deref())?;
        }
        Command::EvalClir {
            src,
            tgt,
            train,
            collection,
            out,
        } => {
            let (s, t) = (load_matrix(&src)?, load_matrix(&tgt.with_config(&src))?);
            let train = BilingualLexicon::load(&train, Split::Train)?;
            let a = align_spaces(&s, &t, &train)?;
            let c = RetrievalCollection::load(&collection)?;
            let q_idf = build_idf(c.queries.values().map(Vec::as_slice));
            let d_idf = build_idf(c.documents.values().map(Vec::as_slice));
            emit(&eval_clir(&c, &a.src, &a.tgt, &a.map, &q_idf, &d_idf)?, out.as_deref())?;
        }
        Command::RelpExport { src, data, out } => {
            let m = load_matrix(&src)?;
            emit(&export_relp_features(&m, &load_relations(&data)?, &out)?, None)?;
        }
        Command::RelpBaseline {
            features,
            seed,
            runs,
            folds,
            epochs,
            out,
        } => {
            let f = RelpFeatures::read(&features)?;
            let params = BaselineParams {
                seed,
                runs,
                folds,
                epochs,
                ..BaselineParams::default()
            };
            emit(&train_relation_baseline(&f, &params)?, out.as_deref())?;
        }
        Command::CkaSelf { src, csv, out } => {
            let pooling = pooling_of(&src)?;
            let stores = OpenStores::open(&src, pooling.context)?;
            let set = stores.set(pooling.context);
            let vocab = load_vocab(&src, &set)?;
            let settings = CkaSettings::new(pooling.context, pooling.policy);
            let r = cka::self_similarity(&set, vocab.words(), &settings)?;
            if let Some(p) = &csv {
                r.write_csv_file(p)?;
            }
            emit(&r, out.as_deref())?;
        }
        Command::CkaBiling {
            src,
            tgt,
            pairs,
            random,
            n_pairs,
            seed,
            csv,
            out,
        } => {
            let pooling = pooling_of(&src)?;
            let s_stores = OpenStores::open(&src, pooling.context)?;
            let t_src = tgt.with_config(&src);
            let t_stores =
                OpenStores::open(&t_src, pooling.context).context("target side (--tgt-store, --tgt-store-iso)")?;
            let (ss, ts) = (s_stores.set(pooling.context), t_stores.set(pooling.context));
            let lexicon = BilingualLexicon::load(&pairs, Split::Test)?;
            let pairs = cka::lexicon_pairs(&lexicon);
            let settings = CkaSettings::new(pooling.context, pooling.policy);
            let r = if random {
                let sources: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
                let targets = match &t_src.vocab {
                    Some(p) => Vocabulary::load(p)?,
                    None => ts.primary.vocabulary(),
                };
                let n = n_pairs.unwrap_or(sources.len());
                cka::random_pair_baseline(&ss, &ts, &sources, targets.words(), n, seed, &settings)?
            } else {
                cka::bilingual_correspondence(&ss, &ts, &pairs, &settings)?
            };
            if let Some(p) = &csv {
                r.write_csv_file(p)?;
            }
            emit(&r, out.as_deref())?;
        }
        Command::RunGrid { spec, seed, out } => {
            let mut spec = GridSpec::load(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(o) = out {
                spec.out = o;
            }
            if cli.workers.is_some() {
                spec.workers = cli.workers;
            }
            std::fs::create_dir_all(&spec.out).with_context(|| format!("creating {}", spec.out.display()))?;
            let summary = run_grid(&spec)?;
            emit(&summary, None)?;
        }
        Command::PlotData { results, select, out } => {
            let rows = read_results_csv(&results)?;
            let selector: Selector = select.parse()?;
            let points = emit_plot_data(&rows, &selector)?;
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                    write_plot_csv(&points, std::io::BufWriter::new(f))?;
                }
                None => write_plot_csv(&points, std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let workers = cli.workers;
    par::with_workers(workers, || run(cli))
}
