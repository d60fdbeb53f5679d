//! Training and evaluation harness: Adam with linear warmup and global
//! gradient clipping, the two-stage recipe (token-level MLE, then
//! combined token+sequence fine-tuning with per-batch hypothesis
//! regeneration), deterministic run artifacts, and checkpoint/resume.
//!
//! Every run writes into a directory named by the config hash plus the
//! seed. The config hash covers every key except `seed`, which the
//! directory name and metric records carry separately.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{select_distractors, Corpus, DialoguePair, Grammar};
use crate::decoding::{beam_search, diverse_beam_search, BeamConfig, Hypothesis};
use crate::kvconfig::KvFile;
use crate::losses::{combined_loss, example_combined_loss_taped, token_ce_taped, ScoreFn};
use crate::metrics::{self, MetricRecord};
use crate::model::{Model, ModelConfig, Parameters};
use crate::numerics::{Mode, Tape};
use crate::{stable_hash_hex, Error, Result, EOS_ID};

/// Distractor set size for rank evaluation.
pub const N_DISTRACTORS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stage {
    #[default]
    Mle,
    Combined,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Mle => "mle",
            Stage::Combined => "combined",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Stage::Mle),
            "combined" => Ok(Stage::Combined),
            other => Err(Error::Validation(format!(
                "unknown stage {other:?} (expected mle or combined)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HypDecoder {
    #[default]
    Beam,
    DiverseBeam,
}

impl fmt::Display for HypDecoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HypDecoder::Beam => "beam",
            HypDecoder::DiverseBeam => "diverse_beam",
        })
    }
}

impl FromStr for HypDecoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam" => Ok(HypDecoder::Beam),
            "diverse_beam" => Ok(HypDecoder::DiverseBeam),
            other => Err(Error::Validation(format!(
                "unknown hypothesis decoder {other:?} (expected beam or diverse_beam)"
            ))),
        }
    }
}

/// Architecture block of a training config; the vocabulary size is taken
/// from the data at run time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelShape {
    fn default() -> ModelShape {
        ModelShape {
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 64,
            max_len: 16,
            dropout: 0.1,
            tie_embeddings: true,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

/// One training run. Serialized as a flat key=value file; see
/// [`TrainConfig::to_kv`] for the key set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Weight on the token term. Applied in both stages so that the
    /// combined objective with `beta = 0` is exactly the MLE objective.
    pub alpha: f64,
    /// Weight on the sequence term; ignored in the MLE stage.
    pub beta: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Sequence score used for the sequence loss, hypothesis ranking
    /// during decoding, and rank evaluation.
    pub score_fn: ScoreFn,
    pub hyp_decoder: HypDecoder,
    pub beam_size: usize,
    pub n_groups: usize,
    pub diversity_strength: f64,
    pub max_decode_len: usize,
    /// Directory produced by `gen-data`: grammar.kv, train.tsv, valid.tsv.
    pub data_dir: PathBuf,
    /// Starting weights. Optional for `mle`, required for `combined`.
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            stage: Stage::Mle,
            alpha: 1.0,
            beta: 5.0,
            learning_rate: 3e-4,
            warmup_steps: 200,
            clip_norm: 1.0,
            batch_size: 32,
            max_steps: 3000,
            eval_every: 200,
            seed: 0,
            score_fn: ScoreFn::LogprobAvg,
            hyp_decoder: HypDecoder::Beam,
            beam_size: 6,
            n_groups: 1,
            diversity_strength: 0.5,
            max_decode_len: 12,
            data_dir: PathBuf::from("data"),
            init_checkpoint: None,
            model: ModelShape::default(),
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "stage",
    "alpha",
    "beta",
    "learning_rate",
    "warmup_steps",
    "clip_norm",
    "batch_size",
    "max_steps",
    "eval_every",
    "seed",
    "score_fn",
    "hyp_decoder",
    "beam_size",
    "n_groups",
    "diversity_strength",
    "max_decode_len",
    "data_dir",
    "init_checkpoint",
    "model_d_model",
    "model_n_heads",
    "model_n_enc_layers",
    "model_n_dec_layers",
    "model_d_ff",
    "model_max_len",
    "model_dropout",
    "model_tie_embeddings",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Validation(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.batch_size < 1 || self.max_steps < 1 || self.eval_every < 1 {
            return Err(Error::Validation(
                "batch_size, max_steps, and eval_every must be >= 1".into(),
            ));
        }
        if self.max_decode_len < 2 || self.max_decode_len + 1 > self.model.max_len {
            return Err(Error::Validation(format!(
                "max_decode_len {} does not fit the model's position table of {}",
                self.max_decode_len, self.model.max_len
            )));
        }
        if self.stage == Stage::Combined && self.init_checkpoint.is_none() {
            return Err(Error::Validation(
                "stage=combined requires init_checkpoint with MLE-pretrained weights".into(),
            ));
        }
        self.decode_config().validate()?;
        self.model.with_vocab(100).validate()
    }

    /// Beam configuration used for hypothesis generation and evaluation
    /// decoding. Plain beam search always runs as a single group.
    pub fn decode_config(&self) -> BeamConfig {
        let (n_groups, diversity_strength) = match self.hyp_decoder {
            HypDecoder::Beam => (1, 0.0),
            HypDecoder::DiverseBeam => (self.n_groups, self.diversity_strength),
        };
        BeamConfig {
            beam_size: self.beam_size,
            max_len: self.max_decode_len,
            score_fn: self.score_fn,
            n_groups,
            diversity_strength,
        }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("stage", self.stage);
        kv.set("alpha", self.alpha);
        kv.set("beta", self.beta);
        kv.set("learning_rate", self.learning_rate);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("clip_norm", self.clip_norm);
        kv.set("batch_size", self.batch_size);
        kv.set("max_steps", self.max_steps);
        kv.set("eval_every", self.eval_every);
        kv.set("seed", self.seed);
        kv.set("score_fn", self.score_fn);
        kv.set("hyp_decoder", self.hyp_decoder);
        kv.set("beam_size", self.beam_size);
        kv.set("n_groups", self.n_groups);
        kv.set("diversity_strength", self.diversity_strength);
        kv.set("max_decode_len", self.max_decode_len);
        kv.set("data_dir", self.data_dir.display());
        if let Some(ckpt) = &self.init_checkpoint {
            kv.set("init_checkpoint", ckpt.display());
        }
        kv.set("model_d_model", self.model.d_model);
        kv.set("model_n_heads", self.model.n_heads);
        kv.set("model_n_enc_layers", self.model.n_enc_layers);
        kv.set("model_n_dec_layers", self.model.n_dec_layers);
        kv.set("model_d_ff", self.model.d_ff);
        kv.set("model_max_len", self.model.max_len);
        kv.set("model_dropout", self.model.dropout);
        kv.set("model_tie_embeddings", self.model.tie_embeddings);
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<TrainConfig> {
        kv.ensure_only(CONFIG_KEYS)?;
        let cfg = TrainConfig {
            stage: kv.require("stage")?,
            alpha: kv.require("alpha")?,
            beta: kv.require("beta")?,
            learning_rate: kv.require("learning_rate")?,
            warmup_steps: kv.require("warmup_steps")?,
            clip_norm: kv.require("clip_norm")?,
            batch_size: kv.require("batch_size")?,
            max_steps: kv.require("max_steps")?,
            eval_every: kv.require("eval_every")?,
            seed: kv.require("seed")?,
            score_fn: kv.require("score_fn")?,
            hyp_decoder: kv.require("hyp_decoder")?,
            beam_size: kv.require("beam_size")?,
            n_groups: kv.require("n_groups")?,
            diversity_strength: kv.require("diversity_strength")?,
            max_decode_len: kv.require("max_decode_len")?,
            data_dir: PathBuf::from(kv.require::<String>("data_dir")?),
            init_checkpoint: kv.get("init_checkpoint").map(PathBuf::from),
            model: ModelShape {
                d_model: kv.require("model_d_model")?,
                n_heads: kv.require("model_n_heads")?,
                n_enc_layers: kv.require("model_n_enc_layers")?,
                n_dec_layers: kv.require("model_n_dec_layers")?,
                d_ff: kv.require("model_d_ff")?,
                max_len: kv.require("model_max_len")?,
                dropout: kv.require("model_dropout")?,
                tie_embeddings: kv.require("model_tie_embeddings")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of every config key except `seed`; run directories and metric
    /// records pair this hash with the seed.
    pub fn hash(&self) -> String {
        let mut kv = self.to_kv();
        kv.remove("seed");
        stable_hash_hex(kv.serialize().as_bytes())
    }

    pub fn run_dir_name(&self) -> String {
        format!("{}-s{}", self.hash(), self.seed)
    }
}

/// Learning rate at a 1-indexed optimizer step: linear ramp over the
/// first `warmup` steps, then constant.
pub fn warmup_lr(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        step as f64 / warmup as f64 * base
    }
}

/// Scales gradients in place so their global L2 norm is at most
/// `clip_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, clip_norm: f64) -> f64 {
    let total_sq: f64 = grads.values().flat_map(|g| g.iter()).map(|g| g * g).sum();
    let norm = total_sq.sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Adam with bias correction (0.9 / 0.999 / 1e-8).
#[derive(Debug, Clone, Default)]
pub struct Adam {
    t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new() -> Adam {
        Adam::default()
    }

    pub fn step(
        &mut self,
        params: &mut Parameters,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (path, g) in grads {
            let p = params.get_mut(path)?;
            if p.data.len() != g.len() {
                return Err(Error::Shape(format!(
                    "gradient for `{path}` has {} values, parameter has {}",
                    g.len(),
                    p.data.len()
                )));
            }
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// One training step's logged quantities. `valid_ppl` is present on
/// evaluation steps; `wall_ms` is excluded from determinism comparisons
/// (see [`RunLog::without_wall_clock`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub lr: f64,
    pub l_token: f64,
    pub l_seq: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub valid_ppl: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain struct serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<RunLog> {
        let records: Result<Vec<RunRecord>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Format(format!("bad run record: {e}")))
            })
            .collect();
        let log = RunLog { records: records? };
        if log.records.windows(2).any(|w| w[1].step <= w[0].step) {
            return Err(Error::Format("run log steps are not strictly increasing".into()));
        }
        Ok(log)
    }

    /// Copy with wall-clock times zeroed: every other field is
    /// deterministic per config and seed, wall time never is.
    pub fn without_wall_clock(&self) -> RunLog {
        let records = self.records.iter().map(|r| RunRecord { wall_ms: 0, ..r.clone() }).collect();
        RunLog { records }
    }
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    step: usize,
    adam_t: usize,
    adam_m: BTreeMap<String, Vec<f64>>,
    adam_v: BTreeMap<String, Vec<f64>>,
    batch_pos: u128,
    dropout_pos: u128,
}

fn save_state(
    path: &Path,
    step: usize,
    adam: &Adam,
    batch_rng: &ChaCha8Rng,
    dropout_rng: &ChaCha8Rng,
) -> Result<()> {
    let state = TrainState {
        step,
        adam_t: adam.t,
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
        batch_pos: batch_rng.get_word_pos(),
        dropout_pos: dropout_rng.get_word_pos(),
    };
    let text = serde_json::to_string(&state)
        .map_err(|e| Error::Format(format!("cannot serialize training state: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

fn load_state(path: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("bad training state {}: {e}", path.display())))
}

fn batch_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn dropout_seed(seed: u64) -> u64 {
    seed ^ 0xbf58_476d_1ce4_e5b9
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_model: PathBuf,
    pub log: RunLog,
}

struct StepStats {
    grads: BTreeMap<String, Vec<f64>>,
    l_token: f64,
    l_seq: f64,
    total: f64,
}

fn run_one_step(
    cfg: &TrainConfig,
    model: &Model,
    corpus: &Corpus,
    beam_cfg: &BeamConfig,
    batch_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let (mut l_token, mut l_seq, mut total) = (0.0, 0.0, 0.0);
    for _ in 0..cfg.batch_size {
        let pair = &corpus.pairs[batch_rng.random_range(0..corpus.len())];
        let mut y = pair.response.clone();
        y.push(EOS_ID);

        let hyps: Vec<Vec<u32>> = if cfg.stage == Stage::Combined && cfg.beta > 0.0 {
            let found = match cfg.hyp_decoder {
                HypDecoder::Beam => beam_search(model, &pair.context, beam_cfg)?,
                HypDecoder::DiverseBeam => diverse_beam_search(model, &pair.context, beam_cfg)?,
            };
            let toks: Vec<Vec<u32>> = found.into_iter().map(|h| h.tokens).collect();
            // Every hypothesis can coincide with the groundtruth; the
            // sequence loss then degenerates to a 1-class problem (zero),
            // handled by the token-only path below.
            if toks.iter().any(|t| t[..] != y[..]) {
                toks
            } else {
                Vec::new()
            }
        } else {
            Vec::new()
        };

        let mut tape = Tape::new(Mode::Train);
        let tp = model.register(&mut tape);
        let (root, breakdown) = if hyps.is_empty() {
            let memory = model.encode_taped(&mut tape, &tp, &pair.context, dropout_rng)?;
            let logits = model.decoder_logits_taped(&mut tape, &tp, memory, &y, dropout_rng)?;
            let lt = token_ce_taped(&mut tape, logits, &y)?;
            let root = tape.scale(lt, cfg.alpha);
            let value = tape.value(lt).item()?;
            (root, combined_loss(value, 0.0, cfg.alpha, cfg.beta)?)
        } else {
            example_combined_loss_taped(
                model,
                &mut tape,
                &tp,
                &pair.context,
                &y,
                &hyps,
                cfg.score_fn,
                cfg.alpha,
                cfg.beta,
                dropout_rng,
            )?
        };
        tape.backward(root)?;
        for (path, id) in tp.iter() {
            let g = tape.grad(*id)?;
            match grads.get_mut(path) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(path.clone(), g.to_vec());
                }
            }
        }
        l_token += breakdown.l_token;
        l_seq += breakdown.l_seq;
        total += breakdown.total;
    }
    let denom = cfg.batch_size as f64;
    for g in grads.values_mut() {
        g.iter_mut().for_each(|v| *v /= denom);
    }
    Ok(StepStats { grads, l_token: l_token / denom, l_seq: l_seq / denom, total: total / denom })
}

/// Trains per the config and writes all artifacts under
/// `out_root/<config-hash>-s<seed>/`: a streamed `runlog.jsonl`,
/// `latest.{model,state}` at every evaluation, and `final.{model,state}`.
///
/// `resume` points at a previous run directory of a compatible config; its
/// final checkpoint, optimizer state, and RNG positions are restored so the
/// continued trajectory is bit-identical to an uninterrupted run.
///
/// A non-finite loss, gradient, or validation perplexity aborts with a
/// `diverged.{model,state}` diagnostic checkpoint.
pub fn train(
    cfg: &TrainConfig,
    grammar: &Grammar,
    train_corpus: &Corpus,
    valid_corpus: &Corpus,
    out_root: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_corpus.is_empty() || valid_corpus.is_empty() {
        return Err(Error::Validation("training needs non-empty train and valid corpora".into()));
    }
    let run_dir = out_root.join(cfg.run_dir_name());
    fs::create_dir_all(&run_dir)?;

    let vocab_size = grammar.model_vocab_size();
    let model_cfg = cfg.model.with_vocab(vocab_size);
    let mut adam = Adam::new();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(dropout_seed(cfg.seed));

    let (mut model, start_step) = match resume {
        Some(dir) => {
            let model = Model::load(&dir.join("final.model"))?;
            let state = load_state(&dir.join("final.state"))?;
            if state.step >= cfg.max_steps {
                return Err(Error::Validation(format!(
                    "resumed run is already at step {}, config stops at {}",
                    state.step, cfg.max_steps
                )));
            }
            adam.t = state.adam_t;
            adam.m = state.adam_m;
            adam.v = state.adam_v;
            batch_rng.set_word_pos(state.batch_pos);
            dropout_rng.set_word_pos(state.dropout_pos);
            (model, state.step)
        }
        None => {
            let model = match &cfg.init_checkpoint {
                Some(path) => Model::load(path)?,
                None => Model::init(model_cfg.clone(), cfg.seed)?,
            };
            (model, 0)
        }
    };
    if model.cfg != model_cfg {
        return Err(Error::Validation(format!(
            "checkpoint architecture {:?} does not match the config's {:?}",
            model.cfg, model_cfg
        )));
    }

    let beam_cfg = cfg.decode_config();
    let started = Instant::now();
    let mut log_file = fs::File::create(run_dir.join("runlog.jsonl"))?;
    let mut log = RunLog::default();

    for step in start_step + 1..=cfg.max_steps {
        let lr = warmup_lr(cfg.learning_rate, cfg.warmup_steps, step);
        let stats =
            run_one_step(cfg, &model, train_corpus, &beam_cfg, &mut batch_rng, &mut dropout_rng);
        let diverged = |msg: String,
                        model: &Model,
                        adam: &Adam,
                        b: &ChaCha8Rng,
                        d: &ChaCha8Rng|
         -> Result<TrainOutcome> {
            let diag = run_dir.join("diverged.model");
            model.save(&diag)?;
            save_state(&run_dir.join("diverged.state"), step, adam, b, d)?;
            Err(Error::Numeric(format!(
                "training diverged at step {step}: {msg}; diagnostic checkpoint at {}",
                diag.display()
            )))
        };
        let mut stats = match stats {
            Ok(s) => s,
            Err(Error::Numeric(msg)) => {
                return diverged(msg, &model, &adam, &batch_rng, &dropout_rng)
            }
            Err(e) => return Err(e),
        };
        let grad_norm = clip_global_norm(&mut stats.grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return diverged(
                format!("gradient norm {grad_norm}"),
                &model,
                &adam,
                &batch_rng,
                &dropout_rng,
            );
        }
        adam.step(&mut model.params, &stats.grads, lr)?;

        let valid_ppl = if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let ppl = metrics::perplexity(&model, valid_corpus)?;
            if !ppl.is_finite() {
                return diverged(
                    format!("validation perplexity {ppl}"),
                    &model,
                    &adam,
                    &batch_rng,
                    &dropout_rng,
                );
            }
            model.save(&run_dir.join("latest.model"))?;
            save_state(&run_dir.join("latest.state"), step, &adam, &batch_rng, &dropout_rng)?;
            Some(ppl)
        } else {
            None
        };

        let record = RunRecord {
            step,
            lr,
            l_token: stats.l_token,
            l_seq: stats.l_seq,
            total: stats.total,
            grad_norm,
            valid_ppl,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Format(format!("cannot serialize run record: {e}")))?;
        writeln!(log_file, "{line}")?;
        log_file.flush()?;
        log.records.push(record);
    }

    let final_model = run_dir.join("final.model");
    model.save(&final_model)?;
    save_state(&run_dir.join("final.state"), cfg.max_steps, &adam, &batch_rng, &dropout_rng)?;
    Ok(TrainOutcome { run_dir, final_model, log })
}

/// Best hypothesis for a context under the config's decoder.
pub fn decode_top(
    model: &Model,
    x: &[u32],
    beam_cfg: &BeamConfig,
    decoder: HypDecoder,
) -> Result<Hypothesis> {
    let hyps = match decoder {
        HypDecoder::Beam => beam_search(model, x, beam_cfg)?,
        HypDecoder::DiverseBeam => diverse_beam_search(model, x, beam_cfg)?,
    };
    hyps.into_iter().next().ok_or_else(|| Error::Contract("decoder returned no hypotheses".into()))
}

/// Decodes every pair's context (caching repeated contexts) and returns
/// per-pair top-1 outputs with the trailing EOS stripped.
pub fn decode_corpus_top1(
    model: &Model,
    pairs: &[DialoguePair],
    beam_cfg: &BeamConfig,
    decoder: HypDecoder,
) -> Result<Vec<Vec<u32>>> {
    let mut cache: HashMap<&[u32], Vec<u32>> = HashMap::new();
    let mut outputs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if !cache.contains_key(pair.context.as_slice()) {
            let top = decode_top(model, &pair.context, beam_cfg, decoder)?;
            let mut toks = top.tokens;
            if toks.last() == Some(&EOS_ID) {
                toks.pop();
            }
            cache.insert(&pair.context, toks);
        }
        outputs.push(cache[pair.context.as_slice()].clone());
    }
    Ok(outputs)
}

/// Per-series facts behind an oracle-perplexity histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStats {
    pub name: String,
    pub n_texts: usize,
    /// Texts the oracle assigns zero probability (infinite perplexity);
    /// excluded from the histogram but counted here.
    pub n_ungeneratable: usize,
    /// Median over all texts, infinite values included.
    pub median_ppl: f64,
}

/// Scores every text in every series under the marginal oracle language
/// model and bins the finite perplexities over shared log-spaced edges.
/// Empty texts count as ungeneratable.
pub fn oracle_ppl_histogram(
    grammar: &Grammar,
    series: &[(String, Vec<Vec<u32>>)],
    n_bins: usize,
) -> Result<(metrics::HistogramSpec, Vec<SeriesStats>)> {
    let lm = grammar.lm();
    let mut finite_series = Vec::with_capacity(series.len());
    let mut stats = Vec::with_capacity(series.len());
    for (name, texts) in series {
        if texts.is_empty() {
            return Err(Error::Validation(format!("series {name:?} has no texts")));
        }
        let ppls: Vec<f64> = texts
            .iter()
            .map(|t| if t.is_empty() { Ok(f64::INFINITY) } else { lm.perplexity(t) })
            .collect::<Result<_>>()?;
        let finite: Vec<f64> = ppls.iter().copied().filter(|p| p.is_finite()).collect();
        stats.push(SeriesStats {
            name: name.clone(),
            n_texts: ppls.len(),
            n_ungeneratable: ppls.len() - finite.len(),
            median_ppl: metrics::median(&ppls)?,
        });
        finite_series.push((name.clone(), finite));
    }
    let hist = metrics::ppl_histogram(&finite_series, n_bins)?;
    Ok((hist, stats))
}

/// Evaluation bundle: validation perplexity, BLEU-4 and distinct-1/2/3 of
/// beam top-1 outputs, and groundtruth mean rank against the oracle-selected
/// distractors. Deterministic per checkpoint and config.
pub fn evaluate(
    model: &Model,
    grammar: &Grammar,
    valid: &Corpus,
    cfg: &TrainConfig,
    limit: Option<usize>,
) -> Result<Vec<MetricRecord>> {
    let n = limit.unwrap_or(valid.len()).min(valid.len());
    if n == 0 {
        return Err(Error::Validation("evaluation needs at least one pair".into()));
    }
    let pairs = &valid.pairs[..n];
    let sub = Corpus { pairs: pairs.to_vec() };
    let ppl = metrics::perplexity(model, &sub)?;

    let beam_cfg = cfg.decode_config();
    let outputs = decode_corpus_top1(model, pairs, &beam_cfg, cfg.hyp_decoder)?;
    let references: Vec<Vec<u32>> = pairs.iter().map(|p| p.response.clone()).collect();
    let bleu = metrics::bleu4(&outputs, &references)?;

    let distractors = select_distractors(grammar, N_DISTRACTORS)?;
    let rank = metrics::mean_rank(model, cfg.score_fn, pairs, &distractors)?;

    let record = |metric: &str, value: f64| MetricRecord {
        metric: metric.to_string(),
        value,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let mut records = vec![record("valid_ppl", ppl), record("bleu4", bleu)];
    for k in 1..=3usize {
        records.push(record(&format!("distinct_{k}"), metrics::distinct_n(&outputs, k)?));
    }
    records.push(record("mean_rank", rank.mean_rank));
    Ok(records)
}
