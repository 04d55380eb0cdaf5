//! `relic`: train entity embeddings from mention contexts and evaluate them.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use manifest::{hash_inputs, RunManifest};
use relic::ablation::{ablate_mask, dedup_rates, AblationConfig};
use relic::corpus::{
    build_vocab, gen_synthetic, read_candidates, read_corpus, read_jsonl, AliasRecord, CategoryRecord, Context as Ctx,
    CorpusRecord, MentionRecord, QaRecord, SyntheticSpec, TypingRecord, Vocab,
};
use relic::eval::{
    category_completion, evaluate_typing, linking_eval, qa_examples, qa_pipeline, AliasTable, CategoryConfig,
    ProbeConfig, QaConfig,
};
use relic::store::{nn_search, CandidateSet, Metric};
use relic::trainer::{train, Checkpoint, TrainConfig, TrainData};

#[derive(Parser)]
#[command(name = "relic", version, about = "Entity embeddings learned from mention contexts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with typing, category, QA and alias files.
    GenSynthetic(GenArgs),
    /// Train the context encoder and entity table on a mention corpus.
    Train(TrainArgs),
    /// Cross-validated entity typing probe over a checkpoint's table.
    EvalTyping(TypingArgs),
    /// Few-shot category completion from exemplar centroids.
    EvalCategory(CategoryArgs),
    /// Link gold mentions to their nearest entity.
    EvalLinking(LinkingArgs),
    /// Two-round QA fine-tuning and retrieval exact match.
    EvalQa(QaArgs),
    /// Nearest entities to an entity or a free-text query.
    Nn(NnArgs),
    /// Train one model per mask rate and compare linking and typing.
    AblateMask(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for data preparation; 1 guarantees bit-identical reruns.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with synthetic corpus settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_entities: Option<usize>,
    #[arg(long)]
    n_types: Option<usize>,
    #[arg(long)]
    types_per_entity: Option<usize>,
    #[arg(long)]
    contexts_per_entity: Option<usize>,
    /// Let several entities share one name.
    #[arg(long)]
    shared_names: bool,
    #[arg(long)]
    fact_rate: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TypingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// TOML probe settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CategoryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    categories: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    exemplars: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Average raw exemplar rows instead of unit-normalized ones.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct LinkingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Documents with gold mentions, in the corpus JSONL format.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    alias: Option<PathBuf>,
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct QaArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training questions.
    #[arg(long)]
    qa: PathBuf,
    /// Evaluation questions; defaults to the training questions.
    #[arg(long)]
    qa_dev: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the manifest and the fine-tuned checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct NnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Entity whose own vector is the query.
    #[arg(long, conflicts_with = "query")]
    entity: Option<String>,
    /// Free text encoded as a question.
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value = "cosine")]
    metric: Metric,
    #[arg(long)]
    candidates: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Comma-separated mask rates.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RELIC_LOG", "info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenSynthetic(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::EvalTyping(a) => eval_typing(a),
        Command::EvalCategory(a) => eval_category(a),
        Command::EvalLinking(a) => eval_linking(a),
        Command::EvalQa(a) => eval_qa(a),
        Command::Nn(a) => nn(a),
        Command::AblateMask(a) => ablate(a),
    }
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn check_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        bail!("--threads must be at least 1");
    }
    if threads > 1 {
        warn!("batch preparation runs on the training thread; --threads {threads} has no effect");
    }
    Ok(())
}

fn manifest<C: Serialize>(
    command: &str,
    config: &C,
    seed: u64,
    threads: usize,
    inputs: &[&Path],
    outputs: Vec<PathBuf>,
) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        threads,
        config: serde_json::to_value(config)?,
        inputs: hash_inputs(inputs)?,
        outputs,
    })
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>, file: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(dir) = out {
        fs::write(dir.join(file), text + "\n").with_context(|| format!("writing {file}"))?;
    }
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec: SyntheticSpec = load_toml(a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        spec.seed = s;
    }
    if let Some(v) = a.n_entities {
        spec.n_entities = v;
    }
    if let Some(v) = a.n_types {
        spec.n_types = v;
    }
    if let Some(v) = a.types_per_entity {
        spec.types_per_entity = v;
    }
    if let Some(v) = a.contexts_per_entity {
        spec.contexts_per_entity = v;
    }
    if let Some(v) = a.fact_rate {
        spec.fact_rate = v;
    }
    if a.shared_names {
        spec.name_uniqueness = false;
    }
    spec.validate().context("invalid synthetic spec")?;
    let inputs: Vec<&Path> = a.config.as_deref().into_iter().collect();
    let names = ["corpus.jsonl", "types.jsonl", "categories.jsonl", "qa.jsonl", "aliases.jsonl"];
    let outputs = names.iter().map(|n| a.out.join(n)).collect();
    manifest("gen-synthetic", &spec, spec.seed, a.common.threads, &inputs, outputs)?.write(&a.out)?;
    let files = gen_synthetic(&spec, &a.out)?;
    info!("wrote synthetic dataset to {}", a.out.display());
    emit(&files, None, "")
}

struct TrainingCorpus {
    vocab: Vocab,
    records: Vec<MentionRecord>,
    /// Sorted distinct entity ids with their mention counts.
    ids: Vec<String>,
    freq: Vec<u64>,
}

fn corpus_vocab(path: &Path, max_vocab: usize) -> Result<TrainingCorpus> {
    let raw: Vec<CorpusRecord> = read_jsonl(path)?;
    if raw.is_empty() {
        bail!("corpus {} has no records", path.display());
    }
    let vocab = build_vocab(raw.iter().map(|r| r.text.as_str()), max_vocab)?;
    let data = read_corpus(path, &vocab)?;
    if data.skipped > 0 {
        warn!("skipped {} corpus records with unusable mention spans", data.skipped);
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for r in &data.records {
        *counts.entry(r.entity_id.clone()).or_default() += 1;
    }
    let (ids, freq) = counts.into_iter().unzip();
    Ok(TrainingCorpus {
        vocab,
        records: data.records,
        ids,
        freq,
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    check_threads(a.common.threads)?;
    let mut cfg: TrainConfig = load_toml(a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mask_rate {
        cfg.mask_rate = m;
    }
    if let Some(t) = a.total_steps {
        cfg.total_steps = t;
    }
    cfg.validate()?;
    let mut inputs = vec![a.corpus.as_path()];
    inputs.extend(a.config.as_deref());
    let outputs = vec![a.out.clone()];
    manifest("train", &cfg, cfg.seed, a.common.threads, &inputs, outputs)?.write(&a.out)?;
    let c = corpus_vocab(&a.corpus, cfg.max_vocab)?;
    info!("{} mentions, {} entities, vocabulary {}", c.records.len(), c.ids.len(), c.vocab.len());
    let mut ckpt = Checkpoint::init(&cfg, c.vocab, c.ids)?;
    ckpt.table.set_frequency(c.freq)?;
    let report = train(&mut ckpt, TrainData::Mentions(&c.records), Some(&a.out))?;
    emit(&report.last(), Some(&a.out), "final_metrics.json")
}

fn eval_typing(a: TypingArgs) -> Result<()> {
    let mut cfg: ProbeConfig = load_toml(a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(out) = &a.out {
        let mut inputs = vec![a.checkpoint.as_path(), a.labels.as_path()];
        inputs.extend(a.config.as_deref());
        manifest("eval-typing", &cfg, cfg.seed, a.common.threads, &inputs, vec![out.join("typing.json")])?
            .write(out)?;
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let labels: Vec<TypingRecord> = read_jsonl(&a.labels)?;
    if labels.is_empty() {
        bail!("labels file {} is empty", a.labels.display());
    }
    let result = evaluate_typing(&ckpt.table, &labels, &cfg)?;
    emit(&result, a.out.as_deref(), "typing.json")
}

fn eval_category(a: CategoryArgs) -> Result<()> {
    let mut cfg: CategoryConfig = load_toml(a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.exemplars {
        cfg.n_exemplars = e;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if a.no_normalize {
        cfg.normalize = false;
    }
    if let Some(out) = &a.out {
        let mut inputs = vec![a.checkpoint.as_path(), a.categories.as_path()];
        inputs.extend(a.config.as_deref());
        manifest("eval-category", &cfg, cfg.seed, a.common.threads, &inputs, vec![out.join("category.json")])?
            .write(out)?;
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cats: Vec<CategoryRecord> = read_jsonl(&a.categories)?;
    let report = category_completion(&ckpt.table, &cats, &cfg)?;
    if report.missing_members > 0 {
        warn!("{} category members are not in the entity table", report.missing_members);
    }
    emit(&report, a.out.as_deref(), "category.json")
}

fn eval_linking(a: LinkingArgs) -> Result<()> {
    if let Some(out) = &a.out {
        let mut inputs = vec![a.checkpoint.as_path(), a.corpus.as_path()];
        inputs.extend(a.alias.as_deref());
        inputs.extend(a.candidates.as_deref());
        let seed = a.common.seed.unwrap_or(0);
        manifest("eval-linking", &serde_json::Value::Null, seed, a.common.threads, &inputs, vec![out.join("linking.json")])?
            .write(out)?;
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = read_corpus(&a.corpus, &ckpt.vocab)?;
    if data.skipped > 0 {
        warn!("skipped {} records with unusable mention spans", data.skipped);
    }
    let aliases = match &a.alias {
        Some(p) => Some(AliasTable::from_records(&read_jsonl::<AliasRecord>(p)?)),
        None => None,
    };
    let candidates = match &a.candidates {
        Some(p) => {
            let c = CandidateSet::new(read_candidates(p)?);
            let (_, missing) = c.resolve(&ckpt.table);
            if missing > 0 {
                warn!("{missing} of {} candidates are not in the entity table", c.len());
            }
            Some(c)
        }
        None => None,
    };
    let res = linking_eval(&ckpt, &data.records, aliases.as_ref(), candidates.as_ref())?;
    if res.unreachable > 0 {
        warn!("{} of {} mentions have an unreachable gold entity", res.unreachable, res.total);
    }
    emit(&res, a.out.as_deref(), "linking.json")
}

fn eval_qa(a: QaArgs) -> Result<()> {
    check_threads(a.common.threads)?;
    let mut cfg: QaConfig = load_toml(a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.round1.seed = s;
        cfg.round2.seed = s;
    }
    if let Some(out) = &a.out {
        let mut inputs = vec![a.checkpoint.as_path(), a.qa.as_path()];
        inputs.extend(a.qa_dev.as_deref());
        inputs.extend(a.config.as_deref());
        manifest("eval-qa", &cfg, cfg.round1.seed, a.common.threads, &inputs, vec![out.join("qa.json"), out.join("checkpoint")])?
            .write(out)?;
    }
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let max_len = ckpt.config.encoder.max_len;
    let (train_ex, skipped) = qa_examples(&read_jsonl::<QaRecord>(&a.qa)?, &ckpt.vocab, max_len)?;
    let dev_ex = match &a.qa_dev {
        Some(p) => qa_examples(&read_jsonl::<QaRecord>(p)?, &ckpt.vocab, max_len)?.0,
        None => train_ex.clone(),
    };
    if skipped > 0 {
        warn!("skipped {skipped} empty questions");
    }
    let unknown: Vec<&str> = train_ex
        .iter()
        .chain(&dev_ex)
        .filter(|e| ckpt.table.index_of(&e.entity_id).is_none())
        .map(|e| e.entity_id.as_str())
        .collect();
    if let Some(first) = unknown.first() {
        bail!("{} answers are not in the entity table, first: {first}", unknown.len());
    }
    let report = qa_pipeline(&mut ckpt, &train_ex, &dev_ex, &cfg)?;
    if let Some(out) = &a.out {
        ckpt.save(&out.join("checkpoint"))?;
    }
    emit(&report, a.out.as_deref(), "qa.json")
}

fn nn(a: NnArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let query: Vec<f32> = match (&a.entity, &a.query) {
        (Some(id), _) => ckpt
            .table
            .vector(id)
            .with_context(|| format!("entity `{id}` is not in the table"))?
            .to_vec(),
        (None, Some(text)) => {
            let mut ids = ckpt.vocab.tokenize(text);
            if ids.is_empty() {
                bail!("query has no tokens");
            }
            ids.truncate(ckpt.config.encoder.max_len - 1);
            ckpt.encode(&Ctx::question(&ids)?)?
        }
        (None, None) => bail!("pass --entity or --query"),
    };
    let candidates = match &a.candidates {
        Some(p) => Some(CandidateSet::new(read_candidates(p)?)),
        None => None,
    };
    let ranked = nn_search(&ckpt.table, &query, a.k, a.metric, candidates.as_ref())?;
    for (id, score) in &ranked.entries {
        println!("{id}\t{score:.6}");
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    check_threads(a.common.threads)?;
    let mut cfg: AblationConfig = load_toml(a.config.as_deref())?;
    if let Some(r) = a.rates {
        cfg.rates = r;
    }
    cfg.rates = dedup_rates(&cfg.rates);
    if let Some(s) = a.common.seed {
        cfg.train.seed = s;
        cfg.probe.seed = s;
    }
    if let Some(t) = a.total_steps {
        cfg.train.total_steps = t;
    }
    cfg.train.validate()?;
    let mut inputs = vec![a.corpus.as_path(), a.labels.as_path()];
    inputs.extend(a.config.as_deref());
    let outputs = vec![a.out.join("ablation.csv"), a.out.join("ablation.json")];
    manifest("ablate-mask", &cfg, cfg.train.seed, a.common.threads, &inputs, outputs)?.write(&a.out)?;
    let c = corpus_vocab(&a.corpus, cfg.train.max_vocab)?;
    let labels: Vec<TypingRecord> = read_jsonl(&a.labels)?;
    let rows = ablate_mask(&c.records, &labels, &c.vocab, &c.ids, &cfg)?;
    let mut csv = String::from("mask_rate,linking_accuracy,typing_map,typing_micro_f1,final_in_batch_accuracy\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mask_rate, r.linking_accuracy, r.typing_map, r.typing_micro_f1, r.final_in_batch_accuracy
        ));
    }
    fs::write(a.out.join("ablation.csv"), csv).context("writing ablation.csv")?;
    emit(&rows, Some(&a.out), "ablation.json")
}
