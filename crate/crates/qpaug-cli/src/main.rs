mod config;

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use config::Common;
use qpaug::corpus::{load_dataset, load_passages, CorpusFormat, PassageStore};
use qpaug::llm::{LlmClient, LlmRequest};
use qpaug::metrics::{answer_recall_at_k, score_example};
use qpaug::pipeline::{
    compose_augmented, read_run_file, run_dataset, PipelineDeps, PipelineMode,
    PipelineRecord, RecordStatus, RunMeta,
};
use qpaug::vindex::{read_qpve, write_qpve, VectorIndex};

#[derive(Parser)]
#[command(
    name = "qpaug",
    version,
    about = "retrieval QA pipeline with question and passage augmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a raw corpus and write the canonical passage store
    Ingest {
        #[command(flatten)]
        common: Common,
        /// raw corpus file (TSV with id/text/title header, or JSONL)
        #[arg(long)]
        input: PathBuf,
        /// tsv or jsonl; inferred from the file extension when omitted
        #[arg(long)]
        format: Option<String>,
    },
    /// Embed the passage store into a vector file
    Embed {
        #[command(flatten)]
        common: Common,
    },
    /// Build the exact-search index from embedded vectors
    BuildIndex {
        #[command(flatten)]
        common: Common,
    },
    /// Answer a dataset, writing one JSON record per line
    Run {
        #[command(flatten)]
        common: Common,
        /// output records file
        #[arg(long)]
        out: PathBuf,
    },
    /// Score run records against the dataset's gold answers
    Eval {
        #[command(flatten)]
        common: Common,
        /// one or more run record files
        #[arg(long, num_args = 1.., required = true)]
        records: Vec<PathBuf>,
        /// compare runs even when their template hashes differ
        #[arg(long)]
        force: bool,
    },
    /// Recall@k across k values, original vs augmented retrieval
    SweepRecall {
        #[command(flatten)]
        common: Common,
        /// comma-separated ascending k values, e.g. 1,5,10
        #[arg(long)]
        ks: String,
        /// output CSV file
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine eval aggregate files into one CSV table
    Report {
        /// eval aggregate JSON files
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// output CSV file
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    if let Err(e) = dispatch() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { common, input, format } => cmd_ingest(&common, &input, format),
        Command::Embed { common } => cmd_embed(&common),
        Command::BuildIndex { common } => cmd_build_index(&common),
        Command::Run { common, out } => cmd_run(&common, &out),
        Command::Eval { common, records, force } => cmd_eval(&common, &records, force),
        Command::SweepRecall { common, ks, out } => cmd_sweep_recall(&common, &ks, &out),
        Command::Report { inputs, out } => cmd_report(&inputs, &out),
    }
}

fn corpus_format(input: &Path, flag: Option<String>) -> Result<CorpusFormat> {
    let name = match flag {
        Some(f) => f,
        None => input
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase(),
    };
    match name.as_str() {
        "tsv" => Ok(CorpusFormat::Tsv),
        "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
        other => bail!("unknown corpus format `{other}` (expected tsv or jsonl)"),
    }
}

fn cmd_ingest(common: &Common, input: &Path, format: Option<String>) -> Result<()> {
    let cfg = common.load()?;
    let format = corpus_format(input, format)?;
    let store = load_passages(input, format)
        .with_context(|| format!("ingesting {}", input.display()))?;
    let corpus_dir = cfg.corpus_dir()?;
    std::fs::create_dir_all(corpus_dir)
        .with_context(|| format!("creating {}", corpus_dir.display()))?;
    store.save_jsonl(&cfg.passages_path()?)?;
    println!("ingested {} passages", store.len());
    Ok(())
}

fn load_store(cfg: &config::RunConfig) -> Result<PassageStore> {
    let path = cfg.passages_path()?;
    load_passages(&path, CorpusFormat::Jsonl)
        .with_context(|| format!("loading passage store {} (run `ingest` first)", path.display()))
}

fn cmd_embed(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let store = load_store(&cfg)?;
    let embedder = cfg.embedder()?;
    let texts: Vec<String> = store.iter().map(|p| p.text.clone()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    let out = cfg.embeddings_path()?;
    write_qpve(
        &out,
        embedder.dim(),
        store.iter().zip(&vectors).map(|(p, v)| (p.id.as_str(), v.as_slice())),
    )?;
    println!("embedded {} passages (dim {})", store.len(), embedder.dim());
    Ok(())
}

fn cmd_build_index(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let path = cfg.embeddings_path()?;
    let (dim, entries) = read_qpve(&path)
        .with_context(|| format!("reading {} (run `embed` first)", path.display()))?;
    let index = VectorIndex::build(dim, entries)?;
    index.save(&cfg.index_dir()?)?;
    println!("indexed {} vectors (dim {})", index.len(), dim);
    Ok(())
}

fn build_deps(cfg: &config::RunConfig, mode: PipelineMode) -> Result<PipelineDeps> {
    // modes without retrieval run fine against an empty store
    let have_corpus = cfg.passages_path().map(|p| p.exists()).unwrap_or(false);
    let store = if mode.uses_retrieval() || have_corpus {
        Arc::new(load_store(cfg)?)
    } else {
        Arc::new(PassageStore::from_passages(Vec::new())?)
    };
    let (embedder, index) = if mode.uses_retrieval() {
        let dir = cfg.index_dir()?;
        let index = VectorIndex::load(&dir)
            .with_context(|| format!("loading index {} (run `build-index` first)", dir.display()))?;
        (Some(cfg.embedder()?), Some(Arc::new(index)))
    } else {
        (None, None)
    };
    let llm = Arc::new(LlmClient::new(
        cfg.llm_backend()?,
        cfg.cache_dir.clone(),
        cfg.max_parallel,
    )?);
    Ok(PipelineDeps {
        prompts: cfg.prompts()?,
        llm,
        embedder,
        index,
        store,
        model: cfg.llm.model.clone(),
        gen_max_tokens: cfg.llm.gen_max_tokens,
        answer_max_tokens: cfg.llm.answer_max_tokens,
        max_parallel: cfg.max_parallel,
    })
}

fn cmd_run(common: &Common, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    let mode = cfg.mode()?;
    let deps = build_deps(&cfg, mode)?;
    let examples = load_dataset(cfg.dataset_path()?)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = BufWriter::new(std::fs::File::create(out)?);
    let summary = run_dataset(&deps, mode, cfg.k_total, &examples, &mut writer)?;
    writer.flush()?;
    println!(
        "mode={mode} total={} ok={} errors={} absent={} backend_calls={} cache_hits={} wall_ms={}",
        summary.total,
        summary.ok,
        summary.errors,
        summary.generated_absent,
        summary.backend_calls,
        summary.cache_hits,
        summary.wall_ms,
    );
    Ok(())
}

fn pct1(fraction: f64) -> f64 {
    (fraction * 1000.0).round() / 10.0
}

fn cmd_eval(common: &Common, records: &[PathBuf], force: bool) -> Result<()> {
    let cfg = common.load()?;
    let k = cfg.k_total;
    let store = load_store(&cfg)?;
    let dataset = load_dataset(cfg.dataset_path()?)?;
    let golds: HashMap<&str, &Vec<String>> =
        dataset.iter().map(|e| (e.id.as_str(), &e.answers)).collect();

    let mut runs: Vec<(&PathBuf, RunMeta, Vec<PipelineRecord>)> = Vec::new();
    for path in records {
        let (meta, recs) = read_run_file(path)
            .with_context(|| format!("reading run file {}", path.display()))?;
        runs.push((path, meta, recs));
    }
    if let Some((_, first, _)) = runs.first() {
        let mismatched = runs
            .iter()
            .any(|(_, meta, _)| meta.template_hashes != first.template_hashes);
        if mismatched {
            if !force {
                bail!(
                    "runs were produced with different prompt templates; \
                     pass --force to compare them anyway"
                );
            }
            log::warn!("comparing runs with differing template hashes (--force)");
        }
    }

    for (path, meta, recs) in &runs {
        let mut sum_f1 = 0.0;
        let mut sum_rouge = 0.0;
        let mut recall_hits = 0usize;
        let mut n_errors = 0usize;

        let base = path.with_extension("");
        let csv_path = base.with_extension("eval.csv");
        let json_path = base.with_extension("eval.json");
        let mut csv = csv::Writer::from_path(&csv_path)
            .with_context(|| format!("writing {}", csv_path.display()))?;
        csv.write_record(["example_id", "f1", "rouge_l", "recall_hit", "prediction", "best_gold"])?;

        for rec in recs {
            let answers = *golds.get(rec.example_id.as_str()).with_context(|| {
                format!(
                    "example `{}` in {} is not in the dataset",
                    rec.example_id,
                    path.display()
                )
            })?;
            let score = score_example(&rec.example_id, &rec.prediction, answers);
            let hit = answer_recall_at_k(&rec.hits, &store, answers, k)?;
            if matches!(rec.status, RecordStatus::Error(_)) {
                n_errors += 1;
            }
            sum_f1 += score.f1;
            sum_rouge += score.rouge_l;
            recall_hits += hit as usize;
            csv.write_record([
                rec.example_id.as_str(),
                &format!("{:.6}", score.f1),
                &format!("{:.6}", score.rouge_l),
                &hit.to_string(),
                rec.prediction.as_str(),
                score.best_gold.as_str(),
            ])?;
        }
        csv.flush()?;

        let n = recs.len();
        let agg = if n == 0 {
            serde_json::json!({
                "mode": meta.mode, "model": meta.model, "k": k,
                "n": 0, "n_errors": 0,
                "mean_f1": null, "mean_rouge_l": null, "recall_at_k": null,
            })
        } else {
            serde_json::json!({
                "mode": meta.mode, "model": meta.model, "k": k,
                "n": n, "n_errors": n_errors,
                "mean_f1": pct1(sum_f1 / n as f64),
                "mean_rouge_l": pct1(sum_rouge / n as f64),
                "recall_at_k": pct1(recall_hits as f64 / n as f64),
            })
        };
        std::fs::write(&json_path, format!("{}\n", serde_json::to_string_pretty(&agg)?))?;
        println!("{}", serde_json::to_string(&agg)?);
    }
    Ok(())
}

fn parse_ks(text: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad --ks `{text}` (expected comma-separated integers)"))?;
    if ks.is_empty() {
        bail!("--ks must list at least one k");
    }
    if ks[0] == 0 {
        bail!("--ks values must be >= 1");
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        bail!("--ks values must be strictly ascending");
    }
    Ok(ks)
}

fn cmd_sweep_recall(common: &Common, ks: &str, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    let ks = parse_ks(ks)?;
    let max_k = *ks.last().unwrap();

    let store = load_store(&cfg)?;
    let dir = cfg.index_dir()?;
    let index = VectorIndex::load(&dir)
        .with_context(|| format!("loading index {} (run `build-index` first)", dir.display()))?;
    let embedder = cfg.embedder()?;
    let prompts = cfg.prompts()?;
    let llm = LlmClient::new(cfg.llm_backend()?, cfg.cache_dir.clone(), cfg.max_parallel)?;
    let examples = load_dataset(cfg.dataset_path()?)?;

    let conditions = [("original", false), ("augmented", true)];
    let mut hits_at = HashMap::new();
    for ex in &examples {
        for (name, augment) in conditions {
            let query = if augment {
                let aug = llm.complete(&LlmRequest {
                    model: cfg.llm.model.clone(),
                    prompt: prompts.render_qaug(&ex.question),
                    max_tokens: cfg.llm.gen_max_tokens,
                    stop: Vec::new(),
                })?;
                compose_augmented(&ex.question, aug.trim())
            } else {
                ex.question.clone()
            };
            let vector = embedder.embed_one(&query)?;
            let hits = index.top_k(&vector, max_k)?;
            for &k in &ks {
                if answer_recall_at_k(&hits, &store, &ex.answers, k)? {
                    *hits_at.entry((name, k)).or_insert(0usize) += 1;
                }
            }
        }
    }

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut csv = csv::Writer::from_path(out)?;
    csv.write_record(["condition", "k", "hits", "total", "recall_pct"])?;
    let total = examples.len();
    for (name, _) in conditions {
        for &k in &ks {
            let hits = hits_at.get(&(name, k)).copied().unwrap_or(0);
            let pct = if total == 0 { 0.0 } else { pct1(hits as f64 / total as f64) };
            csv.write_record([
                name,
                &k.to_string(),
                &hits.to_string(),
                &total.to_string(),
                &format!("{pct:.1}"),
            ])?;
        }
    }
    csv.flush()?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut csv = csv::Writer::from_path(out)?;
    csv.write_record([
        "source", "mode", "model", "k", "n", "n_errors", "mean_f1", "mean_rouge_l",
        "recall_at_k",
    ])?;
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        let cell = |key: &str| match &v[key] {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Null => String::new(),
            other => other.to_string(),
        };
        csv.write_record([
            path.display().to_string(),
            cell("mode"),
            cell("model"),
            cell("k"),
            cell("n"),
            cell("n_errors"),
            cell("mean_f1"),
            cell("mean_rouge_l"),
            cell("recall_at_k"),
        ])?;
    }
    csv.flush()?;
    println!("wrote {}", out.display());
    Ok(())
}
