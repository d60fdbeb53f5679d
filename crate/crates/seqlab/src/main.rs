//! Command-line front end. Every subcommand takes `--config`, an optional
//! `--seed` override, and an `--out` directory; artifacts inside `--out`
//! have fixed names so pipelines can chain without extra bookkeeping.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 IO error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use seqlab::datagen::{select_distractors, Corpus, Grammar, GrammarSpec};
use seqlab::decoding::{greedy, nucleus_sample, top_k_sample, BeamConfig, Hypothesis};
use seqlab::harness::{self, HypDecoder, TrainConfig, N_DISTRACTORS};
use seqlab::kvconfig::KvFile;
use seqlab::metrics::{self, MetricRecord};
use seqlab::model::Model;
use seqlab::{Error, Result, EOS_ID};

#[derive(Parser)]
#[command(
    name = "seqlab",
    version,
    about = "Sequence-to-sequence training laboratory on a synthetic dialogue task"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the synthetic grammar and sample train/valid corpora.
    GenData(GenDataArgs),
    /// Train a model: token-level MLE or combined token+sequence loss.
    Train(TrainArgs),
    /// Decode validation contexts with a chosen decoder.
    Decode(DecodeArgs),
    /// Perplexity, BLEU-4, distinct-n, and mean-rank for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Rank groundtruth responses against oracle-selected distractors.
    Rank(RankArgs),
    /// Oracle-perplexity histograms of human vs decoded responses.
    PplHist(PplHistArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Grammar spec as a key=value file.
    #[arg(long)]
    config: PathBuf,
    /// Corpus sampling seed (default: the grammar config's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for grammar.kv, train.tsv, valid.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Number of dialogue pairs before the 90/10 train/valid split.
    #[arg(long, default_value_t = 4000)]
    pairs: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config as a key=value file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directories are created under this root.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's stage: mle or combined.
    #[arg(long)]
    stage: Option<String>,
    /// Previous run directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Training config (supplies data location, model shape, decode defaults).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed (drives the samplers).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for decodes.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Model checkpoint to decode with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// beam, diverse_beam, greedy, top_k, or nucleus (default: config's decoder).
    #[arg(long)]
    decoder: Option<String>,
    /// Beam size for the search decoders.
    #[arg(long)]
    beam: Option<usize>,
    /// Group count for diverse_beam.
    #[arg(long)]
    groups: Option<usize>,
    /// Diversity penalty strength for diverse_beam.
    #[arg(long)]
    diversity: Option<f64>,
    /// Candidate pool size for top_k.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Nucleus mass for nucleus sampling.
    #[arg(long, default_value_t = 0.9)]
    p: f64,
    /// Softmax temperature for top_k.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Decode at most this many distinct contexts.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Training config (supplies data location and scoring settings).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed (stamped into metric records).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate at most this many validation pairs.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct RankArgs {
    /// Training config (supplies data location and the score function).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed (stamped into metric records).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for rank.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Model checkpoint to rank with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides the config's score function: logprob_avg or logits_avg.
    #[arg(long)]
    score: Option<String>,
    /// Rank at most this many validation pairs.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct PplHistArgs {
    /// Training config (supplies data location and decode settings).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed (stamped into metric records).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for ppl_hist.csv and ppl_hist.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint as name=path; repeat for several models.
    #[arg(long)]
    checkpoint: Vec<String>,
    /// Number of log-spaced histogram bins.
    #[arg(long, default_value_t = 30)]
    bins: usize,
    /// Use at most this many validation pairs.
    #[arg(long)]
    limit: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; keep their exit 0.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::Train(args) => train(args),
        Cmd::Decode(args) => decode(args),
        Cmd::Evaluate(args) => evaluate(args),
        Cmd::Rank(args) => rank(args),
        Cmd::PplHist(args) => ppl_hist(args),
    }
}

fn load_train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    let mut cfg = TrainConfig::from_kv(&KvFile::parse(&text)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_world(data_dir: &Path) -> Result<(Grammar, Corpus, Corpus)> {
    let spec_text = fs::read_to_string(data_dir.join("grammar.kv"))?;
    let spec = GrammarSpec::from_kv(&KvFile::parse(&spec_text)?)?;
    let grammar = Grammar::build(&spec)?;
    let (train, _) = Corpus::parse(&fs::read_to_string(data_dir.join("train.tsv"))?, &grammar)?;
    let (valid, _) = Corpus::parse(&fs::read_to_string(data_dir.join("valid.tsv"))?, &grammar)?;
    Ok((grammar, train, valid))
}

fn limited(corpus: &Corpus, limit: Option<usize>) -> Result<&[seqlab::datagen::DialoguePair]> {
    let n = limit.unwrap_or(corpus.len()).min(corpus.len());
    if n == 0 {
        return Err(Error::Validation("no validation pairs to work with".into()));
    }
    Ok(&corpus.pairs[..n])
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)?;
    let spec = GrammarSpec::from_kv(&KvFile::parse(&text)?)?;
    let grammar = Grammar::build(&spec)?;
    if args.pairs < 2 {
        return Err(Error::Validation("need at least 2 pairs to split".into()));
    }
    let seed = args.seed.unwrap_or(spec.seed);
    let (train, valid) = grammar.sample_corpus(args.pairs, seed);
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("grammar.kv"), spec.to_kv().serialize())?;
    fs::write(args.out.join("train.tsv"), train.serialize(&grammar, seed)?)?;
    fs::write(args.out.join("valid.tsv"), valid.serialize(&grammar, seed)?)?;
    println!(
        "wrote {} train and {} valid pairs under {}",
        train.len(),
        valid.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_train_config(&args.config, args.seed)?;
    if let Some(stage) = &args.stage {
        cfg.stage = stage.parse()?;
        cfg.validate()?;
    }
    let (grammar, train_corpus, valid_corpus) = load_world(&cfg.data_dir)?;
    let outcome = harness::train(
        &cfg,
        &grammar,
        &train_corpus,
        &valid_corpus,
        &args.out,
        args.resume.as_deref(),
    )?;
    let final_ppl = outcome
        .log
        .records
        .iter()
        .rev()
        .find_map(|r| r.valid_ppl)
        .expect("the final step always evaluates");
    println!("run dir: {}", outcome.run_dir.display());
    println!("final validation perplexity: {final_ppl}");
    Ok(())
}

#[derive(Serialize)]
struct DecodeLine {
    context: String,
    output: String,
    tokens: Vec<u32>,
    score: f64,
    finished: bool,
}

fn decode(args: DecodeArgs) -> Result<()> {
    let cfg = load_train_config(&args.config, args.seed)?;
    let (grammar, _, valid) = load_world(&cfg.data_dir)?;
    let model = Model::load(&args.checkpoint)?;

    let mut contexts: Vec<Vec<u32>> = Vec::new();
    for pair in &valid.pairs {
        if !contexts.contains(&pair.context) {
            contexts.push(pair.context.clone());
        }
    }
    if let Some(n) = args.limit {
        contexts.truncate(n);
    }
    if contexts.is_empty() {
        return Err(Error::Validation("no contexts to decode".into()));
    }

    let decoder = match &args.decoder {
        Some(name) => name.clone(),
        None => cfg.hyp_decoder.to_string(),
    };
    let mut beam_cfg = BeamConfig {
        beam_size: args.beam.unwrap_or(cfg.beam_size),
        max_len: cfg.max_decode_len,
        score_fn: cfg.score_fn,
        n_groups: 1,
        diversity_strength: 0.0,
    };
    if decoder == "diverse_beam" {
        beam_cfg.n_groups = args.groups.unwrap_or(cfg.n_groups);
        beam_cfg.diversity_strength = args.diversity.unwrap_or(cfg.diversity_strength);
    }
    if decoder == "beam" || decoder == "diverse_beam" {
        beam_cfg.validate()?;
    }
    let decode_one = |x: &[u32], i: usize| -> Result<Hypothesis> {
        match decoder.as_str() {
            "beam" => harness::decode_top(&model, x, &beam_cfg, HypDecoder::Beam),
            "diverse_beam" => harness::decode_top(&model, x, &beam_cfg, HypDecoder::DiverseBeam),
            "greedy" => greedy(&model, x, cfg.max_decode_len),
            "top_k" => {
                top_k_sample(&model, x, args.k, args.temperature, cfg.seed.wrapping_add(i as u64))
            }
            "nucleus" => nucleus_sample(&model, x, args.p, cfg.seed.wrapping_add(i as u64)),
            other => Err(Error::Validation(format!(
                "unknown decoder {other:?} (expected beam, diverse_beam, greedy, top_k, or nucleus)"
            ))),
        }
    };

    let mut lines = String::new();
    for (i, x) in contexts.iter().enumerate() {
        let hyp = decode_one(x, i)?;
        let mut tokens = hyp.tokens;
        if tokens.last() == Some(&EOS_ID) {
            tokens.pop();
        }
        let line = DecodeLine {
            context: grammar.vocab.decode(x)?,
            output: grammar.vocab.decode(&tokens)?,
            tokens,
            score: hyp.score,
            finished: hyp.finished,
        };
        lines.push_str(&serde_json::to_string(&line).expect("plain struct serializes"));
        lines.push('\n');
    }
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("decodes.jsonl");
    fs::write(&path, lines)?;
    println!("wrote {} decodes to {}", contexts.len(), path.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = load_train_config(&args.config, args.seed)?;
    let (grammar, _, valid) = load_world(&cfg.data_dir)?;
    let model = Model::load(&args.checkpoint)?;
    let records = harness::evaluate(&model, &grammar, &valid, &cfg, args.limit)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("metrics.jsonl");
    fs::write(&path, metrics::to_jsonl(&records)?)?;
    for r in &records {
        println!("{} = {}", r.metric, r.value);
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct RankLine {
    example: usize,
    rank: usize,
}

fn rank(args: RankArgs) -> Result<()> {
    let cfg = load_train_config(&args.config, args.seed)?;
    let (grammar, _, valid) = load_world(&cfg.data_dir)?;
    let model = Model::load(&args.checkpoint)?;
    let pairs = limited(&valid, args.limit)?;
    let score_fn = match &args.score {
        Some(s) => s.parse()?,
        None => cfg.score_fn,
    };
    let distractors = select_distractors(&grammar, N_DISTRACTORS)?;
    let report = metrics::mean_rank(&model, score_fn, pairs, &distractors)?;

    let summary = MetricRecord {
        metric: "mean_rank".to_string(),
        value: report.mean_rank,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let mut lines = metrics::to_jsonl(&[summary])?;
    for (example, &rank) in report.ranks.iter().enumerate() {
        let line = RankLine { example, rank };
        lines.push_str(&serde_json::to_string(&line).expect("plain struct serializes"));
        lines.push('\n');
    }
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("rank.jsonl");
    fs::write(&path, lines)?;
    println!(
        "mean rank {} over {} pairs against {} distractors ({})",
        report.mean_rank,
        report.ranks.len(),
        report.n_distractors,
        report.score_fn
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn ppl_hist(args: PplHistArgs) -> Result<()> {
    let cfg = load_train_config(&args.config, args.seed)?;
    let (grammar, _, valid) = load_world(&cfg.data_dir)?;
    let pairs = limited(&valid, args.limit)?;
    if args.checkpoint.is_empty() {
        return Err(Error::Validation("pass at least one --checkpoint name=path".into()));
    }

    let human: Vec<Vec<u32>> = pairs.iter().map(|p| p.response.clone()).collect();
    let mut series = vec![("human".to_string(), human)];
    let beam_cfg = cfg.decode_config();
    for entry in &args.checkpoint {
        let (name, path) = entry
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--checkpoint {entry:?} is not name=path")))?;
        if name.is_empty() || series.iter().any(|(n, _)| n == name) {
            return Err(Error::Validation(format!(
                "checkpoint name {name:?} is empty or already used"
            )));
        }
        let model = Model::load(Path::new(path))?;
        let outputs = harness::decode_corpus_top1(&model, pairs, &beam_cfg, cfg.hyp_decoder)?;
        series.push((name.to_string(), outputs));
    }

    let (hist, stats) = harness::oracle_ppl_histogram(&grammar, &series, args.bins)?;
    let mut records = Vec::new();
    for s in &stats {
        if s.median_ppl.is_finite() {
            records.push(MetricRecord {
                metric: format!("median_oracle_ppl_{}", s.name),
                value: s.median_ppl,
                config_hash: cfg.hash(),
                seed: cfg.seed,
            });
        }
        records.push(MetricRecord {
            metric: format!("ungeneratable_{}", s.name),
            value: s.n_ungeneratable as f64,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        });
    }
    fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("ppl_hist.csv");
    fs::write(&csv_path, hist.to_csv())?;
    fs::write(args.out.join("ppl_hist.jsonl"), metrics::to_jsonl(&records)?)?;
    for s in &stats {
        println!(
            "{}: median oracle ppl {} ({} of {} ungeneratable)",
            s.name, s.median_ppl, s.n_ungeneratable, s.n_texts
        );
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}
