//! Sequence decoders: length-normalized beam search, diverse beam search,
//! greedy, top-k and nucleus sampling.
//!
//! Search decoders (beam, diverse beam, greedy) expand only content tokens
//! and EOS; PAD and BOS are never proposed. Samplers draw from the model's
//! full next-token distribution so that empirical frequencies match model
//! probabilities exactly.
//!
//! All decoders are deterministic given (parameters, input, seed). Score
//! ties are broken lexicographically by token sequence.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::ScoreFn;
use crate::model::{DecoderState, Model};
use crate::numerics::kernels::log_softmax_lane;
use crate::numerics::Tensor;
use crate::{Error, Result, BOS_ID, EOS_ID, N_RESERVED};

/// One decoded candidate. `score` is the running mean of `per_step_values`
/// (log-probabilities or raw logits depending on the active score function);
/// `finished` is true exactly when the last token is EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub finished: bool,
    pub score: f64,
    pub per_step_values: Vec<f64>,
}

impl Hypothesis {
    fn assemble(tokens: Vec<u32>, per_step_values: Vec<f64>) -> Hypothesis {
        debug_assert_eq!(tokens.len(), per_step_values.len());
        debug_assert!(!tokens.is_empty());
        let score = per_step_values.iter().sum::<f64>() / per_step_values.len() as f64;
        let finished = *tokens.last().unwrap() == EOS_ID;
        Hypothesis { tokens, finished, score, per_step_values }
    }
}

#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub score_fn: ScoreFn,
    pub n_groups: usize,
    pub diversity_strength: f64,
}

impl BeamConfig {
    /// Single-group beam search configuration.
    pub fn standard(beam_size: usize, max_len: usize, score_fn: ScoreFn) -> BeamConfig {
        BeamConfig { beam_size, max_len, score_fn, n_groups: 1, diversity_strength: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::Validation("beam_size must be >= 1".into()));
        }
        if self.max_len < 1 {
            return Err(Error::Validation("max_len must be >= 1".into()));
        }
        if self.n_groups < 1 {
            return Err(Error::Validation("n_groups must be >= 1".into()));
        }
        if self.beam_size % self.n_groups != 0 {
            return Err(Error::Validation(format!(
                "beam_size {} not divisible by n_groups {}",
                self.beam_size, self.n_groups
            )));
        }
        if !(self.diversity_strength >= 0.0 && self.diversity_strength.is_finite()) {
            return Err(Error::Validation(format!(
                "diversity_strength must be finite and >= 0, got {}",
                self.diversity_strength
            )));
        }
        Ok(())
    }
}

/// Incremental next-token scorer. `root` positions the decoder after BOS and
/// returns logits for the first output token; `extend` consumes one more
/// token. States are cloned when a prefix branches.
pub(crate) trait StepDriver {
    type State: Clone;
    fn root(&self) -> Result<(Self::State, Vec<f64>)>;
    fn extend(&self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)>;
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
}

struct ModelDriver<'a> {
    model: &'a Model,
    memory: Tensor,
}

impl<'a> ModelDriver<'a> {
    fn new(model: &'a Model, x: &[u32]) -> Result<ModelDriver<'a>> {
        let memory = model.encode(x)?;
        Ok(ModelDriver { model, memory })
    }
}

impl StepDriver for ModelDriver<'_> {
    type State = DecoderState;

    fn root(&self) -> Result<(DecoderState, Vec<f64>)> {
        let mut state = self.model.start_decoder(&self.memory)?;
        let logits = self.model.decode_step(&mut state, BOS_ID)?;
        Ok((state, logits))
    }

    fn extend(&self, state: &DecoderState, token: u32) -> Result<(DecoderState, Vec<f64>)> {
        let mut next = state.clone();
        let logits = self.model.decode_step(&mut next, token)?;
        Ok((next, logits))
    }

    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn max_len(&self) -> usize {
        self.model.cfg.max_len
    }
}

/// Length-normalized beam search. Returns up to `beam_size` hypotheses,
/// deduplicated and sorted by score descending. EOS-terminated hypotheses
/// are preferred; max-length truncations are returned only when the search
/// finishes nothing.
pub fn beam_search(model: &Model, x: &[u32], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.n_groups != 1 {
        return Err(Error::Validation(
            "beam_search requires n_groups == 1; use diverse_beam_search".into(),
        ));
    }
    let driver = ModelDriver::new(model, x)?;
    grouped_beam(&driver, cfg)
}

/// Diverse beam search: at each step the pooled candidates are claimed by
/// the groups in turn, `beam_size / n_groups` claims per group, and later
/// groups pay `diversity_strength` per earlier-group use of a content token
/// at the same step. The penalty affects candidate selection only; stored
/// scores stay pure, and with zero strength the claims reduce to standard
/// beam search's top-`beam_size` selection.
pub fn diverse_beam_search(model: &Model, x: &[u32], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    let driver = ModelDriver::new(model, x)?;
    grouped_beam(&driver, cfg)
}

/// Argmax decoding until EOS or `max_len` tokens. Step values are
/// log-probabilities.
pub fn greedy(model: &Model, x: &[u32], max_len: usize) -> Result<Hypothesis> {
    let driver = ModelDriver::new(model, x)?;
    greedy_core(&driver, max_len)
}

/// Samples each step from the `k` most probable tokens after temperature
/// scaling, renormalized. Step values are the model's unscaled
/// log-probabilities of the chosen tokens.
pub fn top_k_sample(
    model: &Model,
    x: &[u32],
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Hypothesis> {
    let driver = ModelDriver::new(model, x)?;
    top_k_core(&driver, k, temperature, seed)
}

/// Samples each step from the smallest probability-sorted token set with
/// cumulative mass >= p, renormalized.
pub fn nucleus_sample(model: &Model, x: &[u32], p: f64, seed: u64) -> Result<Hypothesis> {
    let driver = ModelDriver::new(model, x)?;
    nucleus_core(&driver, p, seed)
}

struct Beam<S> {
    state: S,
    next_logits: Vec<f64>,
    tokens: Vec<u32>,
    values: Vec<f64>,
    sum: f64,
}

struct Candidate {
    tokens: Vec<u32>,
    value: f64,
    score: f64,
    parent: usize,
    token: u32,
}

fn hyp_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn step_values(logits: &[f64], score_fn: ScoreFn) -> Vec<f64> {
    let mut v = logits.to_vec();
    if score_fn == ScoreFn::LogprobAvg {
        log_softmax_lane(&mut v);
    }
    v
}

/// Best final score this beam could still reach: extend the running sum to
/// the horizon with the optimistic per-step value (0 for log-probabilities,
/// the beam's own maximum so far for raw logits).
fn optimistic_bound(beam: &Beam<impl Clone>, score_fn: ScoreFn, max_len: usize) -> f64 {
    if beam.values.is_empty() {
        return f64::INFINITY;
    }
    let cap = match score_fn {
        ScoreFn::LogprobAvg => 0.0,
        ScoreFn::LogitsAvg => beam.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    cap + (beam.sum - cap * beam.values.len() as f64) / max_len as f64
}

fn grouped_beam<D: StepDriver>(driver: &D, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if cfg.max_len > driver.max_len() {
        return Err(Error::Validation(format!(
            "decode max_len {} exceeds model capacity {}",
            cfg.max_len,
            driver.max_len()
        )));
    }
    let width = cfg.beam_size / cfg.n_groups;
    let vocab = driver.vocab_size();

    let (root_state, root_logits) = driver.root()?;
    let mut active = vec![Beam {
        state: root_state,
        next_logits: root_logits,
        tokens: Vec::new(),
        values: Vec::new(),
        sum: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut truncated: Vec<Hypothesis> = Vec::new();

    while !active.is_empty() {
        let mut candidates: Vec<Candidate> = Vec::new();
        for (bi, beam) in active.iter().enumerate() {
            let values = step_values(&beam.next_logits, cfg.score_fn);
            for t in allowed_tokens(vocab) {
                let value = values[t as usize];
                let score = (beam.sum + value) / (beam.values.len() + 1) as f64;
                let mut tokens = beam.tokens.clone();
                tokens.push(t);
                candidates.push(Candidate { tokens, value, score, parent: bi, token: t });
            }
        }

        // Groups claim `width` candidates each in turn. A claim round is
        // ranked by score minus the penalty for content tokens claimed by
        // earlier rounds this step, frozen while the round selects. EOS is
        // exempt so that finishing is never diversity-punished. With zero
        // strength every round ranks by pure score, so the concatenated
        // claims are exactly standard beam search's top `beam_size`.
        let mut reuse: HashMap<u32, usize> = HashMap::new();
        let mut claimed: Vec<Candidate> = Vec::new();
        for _ in 0..cfg.n_groups {
            candidates.sort_by(|a, b| {
                let penalty = |c: &Candidate| {
                    let r = reuse.get(&c.token).copied().unwrap_or(0);
                    c.score - cfg.diversity_strength * r as f64
                };
                penalty(b).total_cmp(&penalty(a)).then_with(|| a.tokens.cmp(&b.tokens))
            });
            for cand in candidates.drain(..width.min(candidates.len())) {
                if cand.token != EOS_ID {
                    *reuse.entry(cand.token).or_insert(0) += 1;
                }
                claimed.push(cand);
            }
        }

        let mut next_active: Vec<Beam<D::State>> = Vec::new();
        for cand in claimed {
            let parent = &active[cand.parent];
            let mut values = parent.values.clone();
            values.push(cand.value);
            if cand.token == EOS_ID {
                finished.push(Hypothesis::assemble(cand.tokens, values));
            } else if cand.tokens.len() == cfg.max_len {
                truncated.push(Hypothesis::assemble(cand.tokens, values));
            } else {
                let (state, next_logits) = driver.extend(&parent.state, cand.token)?;
                next_active.push(Beam {
                    state,
                    next_logits,
                    tokens: cand.tokens,
                    values,
                    sum: parent.sum + cand.value,
                });
            }
        }
        active = next_active;

        if finished.len() >= cfg.beam_size {
            let mut scores: Vec<f64> = finished.iter().map(|h| h.score).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            let kth = scores[cfg.beam_size - 1];
            active.retain(|b| optimistic_bound(b, cfg.score_fn, cfg.max_len) >= kth);
        }
    }

    let mut pool = if finished.is_empty() { truncated } else { finished };
    pool.sort_by(hyp_order);
    pool.dedup_by(|a, b| a.tokens == b.tokens);
    pool.truncate(cfg.beam_size);
    Ok(pool)
}

fn allowed_tokens(vocab: usize) -> impl Iterator<Item = u32> {
    std::iter::once(EOS_ID).chain(N_RESERVED..vocab as u32)
}

fn greedy_core<D: StepDriver>(driver: &D, max_len: usize) -> Result<Hypothesis> {
    if max_len < 1 || max_len > driver.max_len() {
        return Err(Error::Validation(format!(
            "greedy max_len {} outside 1..={}",
            max_len,
            driver.max_len()
        )));
    }
    let vocab = driver.vocab_size();
    let (mut state, mut logits) = driver.root()?;
    let mut tokens = Vec::new();
    let mut values = Vec::new();
    loop {
        let logprobs = step_values(&logits, ScoreFn::LogprobAvg);
        let best = allowed_tokens(vocab)
            .max_by(|&a, &b| {
                logprobs[a as usize].total_cmp(&logprobs[b as usize]).then_with(|| b.cmp(&a))
            })
            .unwrap();
        tokens.push(best);
        values.push(logprobs[best as usize]);
        if best == EOS_ID || tokens.len() == max_len {
            return Ok(Hypothesis::assemble(tokens, values));
        }
        let (next_state, next_logits) = driver.extend(&state, best)?;
        state = next_state;
        logits = next_logits;
    }
}

/// Probability-descending token order with ascending-id tie break.
fn rank_by_prob(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then_with(|| a.cmp(&b)));
    idx
}

fn sample_from(support: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = support.iter().map(|(_, p)| p).sum();
    let mut u = rng.random::<f64>() * total;
    for &(t, p) in support {
        u -= p;
        if u <= 0.0 {
            return t;
        }
    }
    support.last().unwrap().0
}

fn sample_loop<D: StepDriver>(
    driver: &D,
    seed: u64,
    mut pick_support: impl FnMut(&[f64]) -> Vec<(usize, f64)>,
) -> Result<Hypothesis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, mut logits) = driver.root()?;
    let mut tokens = Vec::new();
    let mut values = Vec::new();
    loop {
        let support = pick_support(&logits);
        let chosen = sample_from(&support, &mut rng);
        let logprobs = step_values(&logits, ScoreFn::LogprobAvg);
        tokens.push(chosen as u32);
        values.push(logprobs[chosen]);
        if chosen as u32 == EOS_ID || tokens.len() == driver.max_len() {
            return Ok(Hypothesis::assemble(tokens, values));
        }
        let (next_state, next_logits) = driver.extend(&state, chosen as u32)?;
        state = next_state;
        logits = next_logits;
    }
}

fn softmax_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut v: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    log_softmax_lane(&mut v);
    for p in v.iter_mut() {
        *p = p.exp();
    }
    v
}

fn top_k_core<D: StepDriver>(
    driver: &D,
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Hypothesis> {
    let vocab = driver.vocab_size();
    if k < 1 || k > vocab {
        return Err(Error::Validation(format!("top-k {k} outside 1..={vocab}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Validation(format!("temperature must be positive, got {temperature}")));
    }
    sample_loop(driver, seed, |logits| {
        let probs = softmax_probs(logits, temperature);
        rank_by_prob(&probs).into_iter().take(k).map(|t| (t, probs[t])).collect()
    })
}

fn nucleus_core<D: StepDriver>(driver: &D, p: f64, seed: u64) -> Result<Hypothesis> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Validation(format!("nucleus p must be in (0, 1], got {p}")));
    }
    sample_loop(driver, seed, |logits| {
        let probs = softmax_probs(logits, 1.0);
        let mut support = Vec::new();
        let mut mass = 0.0;
        for t in rank_by_prob(&probs) {
            support.push((t, probs[t]));
            mass += probs[t];
            if mass >= p {
                break;
            }
        }
        support
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;
    use crate::PAD_ID;

    /// Stateless test dynamics: logits depend only on the emitted prefix.
    struct TableDriver<F: Fn(&[u32]) -> Vec<f64>> {
        vocab: usize,
        cap: usize,
        logits: F,
    }

    impl<F: Fn(&[u32]) -> Vec<f64>> StepDriver for TableDriver<F> {
        type State = Vec<u32>;

        fn root(&self) -> Result<(Vec<u32>, Vec<f64>)> {
            Ok((Vec::new(), (self.logits)(&[])))
        }

        fn extend(&self, state: &Vec<u32>, token: u32) -> Result<(Vec<u32>, Vec<f64>)> {
            let mut next = state.clone();
            next.push(token);
            let logits = (self.logits)(&next);
            Ok((next, logits))
        }

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn max_len(&self) -> usize {
            self.cap
        }
    }

    fn check_shape(h: &Hypothesis, max_len: usize) {
        assert!(!h.tokens.is_empty() && h.tokens.len() <= max_len);
        assert_eq!(h.tokens.len(), h.per_step_values.len());
        assert_eq!(h.finished, *h.tokens.last().unwrap() == EOS_ID);
        let mean = h.per_step_values.iter().sum::<f64>() / h.per_step_values.len() as f64;
        assert!((h.score - mean).abs() < 1e-12);
        for (i, &t) in h.tokens.iter().enumerate() {
            assert_ne!(t, PAD_ID);
            assert_ne!(t, BOS_ID);
            if t == EOS_ID {
                assert_eq!(i, h.tokens.len() - 1, "token after EOS");
            }
        }
    }

    /// Forces the sequence 3, 4, 5, EOS with a 10-logit margin at each step.
    fn forced_chain() -> TableDriver<impl Fn(&[u32]) -> Vec<f64>> {
        TableDriver {
            vocab: 6,
            cap: 8,
            logits: |prefix: &[u32]| {
                let want = [3u32, 4, 5, EOS_ID];
                let next = want.get(prefix.len()).copied().unwrap_or(EOS_ID);
                let mut l = vec![0.0; 6];
                l[next as usize] = 10.0;
                l
            },
        }
    }

    #[test]
    fn forced_chain_wins_and_appears_once() {
        let driver = forced_chain();
        let cfg = BeamConfig::standard(4, 8, ScoreFn::LogprobAvg);
        let hyps = grouped_beam(&driver, &cfg).unwrap();
        assert!(!hyps.is_empty() && hyps.len() <= 4);
        assert_eq!(hyps[0].tokens, vec![3, 4, 5, EOS_ID]);
        let n_forced = hyps.iter().filter(|h| h.tokens == vec![3, 4, 5, EOS_ID]).count();
        assert_eq!(n_forced, 1);
        for w in hyps.windows(2) {
            assert!(w[0].score >= w[1].score);
            assert_ne!(w[0].tokens, w[1].tokens);
        }
        for h in &hyps {
            check_shape(h, 8);
        }
    }

    /// Exhaustive argmax over all EOS-terminated sequences of the test
    /// dynamics, mirroring the beam decoders' score definition.
    fn brute_force_best<F: Fn(&[u32]) -> Vec<f64>>(
        driver: &TableDriver<F>,
        score_fn: ScoreFn,
        max_len: usize,
    ) -> (Vec<u32>, f64) {
        let mut best: Option<(f64, Vec<u32>)> = None;
        let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
        while let Some((prefix, sum)) = stack.pop() {
            let logits = (driver.logits)(&prefix);
            let values = step_values(&logits, score_fn);
            for t in allowed_tokens(driver.vocab) {
                let mut seq = prefix.clone();
                seq.push(t);
                let total = sum + values[t as usize];
                if t == EOS_ID {
                    let score = total / seq.len() as f64;
                    let better = match &best {
                        None => true,
                        Some((bs, bt)) => score > *bs || (score == *bs && seq < *bt),
                    };
                    if better {
                        best = Some((score, seq));
                    }
                } else if seq.len() < max_len {
                    stack.push((seq, total));
                }
            }
        }
        let (score, tokens) = best.unwrap();
        (tokens, score)
    }

    #[test]
    fn saturating_beam_finds_exhaustive_argmax() {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut table = std::collections::HashMap::new();
            let vocab = 5usize;
            let max_len = 4usize;
            let assign = |prefix: Vec<u32>,
                          table: &mut std::collections::HashMap<Vec<u32>, Vec<f64>>,
                          rng: &mut ChaCha8Rng| {
                table.insert(prefix, (0..vocab).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect());
            };
            let mut prefixes = vec![Vec::new()];
            assign(Vec::new(), &mut table, &mut rng);
            for _ in 0..max_len - 1 {
                let mut next_prefixes = Vec::new();
                for p in &prefixes {
                    for t in allowed_tokens(vocab).filter(|&t| t != EOS_ID) {
                        let mut q = p.clone();
                        q.push(t);
                        assign(q.clone(), &mut table, &mut rng);
                        next_prefixes.push(q);
                    }
                }
                prefixes = next_prefixes;
            }
            let driver = TableDriver {
                vocab,
                cap: max_len,
                logits: move |prefix: &[u32]| table[prefix].clone(),
            };
            for score_fn in [ScoreFn::LogprobAvg, ScoreFn::LogitsAvg] {
                let cfg = BeamConfig::standard(64, max_len, score_fn);
                let hyps = grouped_beam(&driver, &cfg).unwrap();
                let (want_tokens, want_score) = brute_force_best(&driver, score_fn, max_len);
                assert_eq!(hyps[0].tokens, want_tokens, "seed {seed} {score_fn}");
                assert!((hyps[0].score - want_score).abs() < 1e-12);
            }
        }
    }

    fn micro_model(seed: u64) -> Model {
        Model::init(
            ModelConfig {
                vocab_size: 8,
                d_model: 8,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_ff: 16,
                max_len: 6,
                dropout: 0.0,
                tie_embeddings: true,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn single_beam_equals_greedy() {
        for seed in [0u64, 1, 2] {
            let m = micro_model(seed);
            let x = [3u32, 5];
            let g = greedy(&m, &x, 6).unwrap();
            let cfg = BeamConfig::standard(1, 6, ScoreFn::LogprobAvg);
            let b = beam_search(&m, &x, &cfg).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0], g);
            let cfg = BeamConfig::standard(1, 6, ScoreFn::LogitsAvg);
            let b = beam_search(&m, &x, &cfg).unwrap();
            assert_eq!(b[0].tokens, g.tokens);
            check_shape(&g, 6);
        }
    }

    #[test]
    fn diverse_with_one_group_or_zero_strength_matches_standard() {
        let m = micro_model(9);
        let x = [4u32, 6, 3];
        let std_cfg = BeamConfig::standard(4, 6, ScoreFn::LogprobAvg);
        let baseline = beam_search(&m, &x, &std_cfg).unwrap();
        assert!(!baseline.is_empty());

        let mut one_group = std_cfg.clone();
        one_group.diversity_strength = 0.7;
        let d1 = diverse_beam_search(&m, &x, &one_group).unwrap();
        assert_eq!(d1, baseline);

        let mut zero_strength = std_cfg.clone();
        zero_strength.n_groups = 2;
        zero_strength.diversity_strength = 0.0;
        let d2 = diverse_beam_search(&m, &x, &zero_strength).unwrap();
        assert_eq!(d2, baseline, "zero strength must reduce to standard beam");
    }

    #[test]
    fn huge_penalty_forces_distinct_group_openings() {
        let driver = TableDriver {
            vocab: 9,
            cap: 4,
            logits: |prefix: &[u32]| {
                let mut l = vec![0.0; 9];
                if prefix.is_empty() {
                    for (i, t) in (N_RESERVED..9).enumerate() {
                        l[t as usize] = 1.0 - 0.01 * i as f64;
                    }
                    l[EOS_ID as usize] = -5.0;
                } else {
                    l[EOS_ID as usize] = 5.0;
                }
                l
            },
        };
        let cfg = BeamConfig {
            beam_size: 4,
            max_len: 4,
            score_fn: ScoreFn::LogprobAvg,
            n_groups: 4,
            diversity_strength: 1e6,
        };
        let hyps = grouped_beam(&driver, &cfg).unwrap();
        let mut first: Vec<u32> = hyps.iter().map(|h| h.tokens[0]).collect();
        first.sort_unstable();
        first.dedup();
        assert_eq!(first.len(), hyps.len(), "group leaders share a first token");
        assert_eq!(hyps.len(), 4);
    }

    #[test]
    fn beam_rejects_bad_configs() {
        let m = micro_model(0);
        let x = [3u32];
        let mut cfg = BeamConfig::standard(6, 6, ScoreFn::LogprobAvg);
        cfg.n_groups = 4;
        assert!(matches!(diverse_beam_search(&m, &x, &cfg), Err(Error::Validation(_))));
        assert!(matches!(beam_search(&m, &x, &cfg), Err(Error::Validation(_))));
        let cfg = BeamConfig::standard(0, 6, ScoreFn::LogprobAvg);
        assert!(matches!(beam_search(&m, &x, &cfg), Err(Error::Validation(_))));
        let cfg = BeamConfig::standard(2, 99, ScoreFn::LogprobAvg);
        assert!(matches!(beam_search(&m, &x, &cfg), Err(Error::Validation(_))));
        let cfg = BeamConfig::standard(2, 6, ScoreFn::LogprobAvg);
        assert!(matches!(beam_search(&m, &[99u32], &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn decoders_respect_length_cap() {
        let driver = TableDriver {
            vocab: 6,
            cap: 5,
            logits: |_: &[u32]| {
                let mut l = vec![0.0; 6];
                l[3] = 10.0;
                l[EOS_ID as usize] = -10.0;
                l
            },
        };
        let g = greedy_core(&driver, 5).unwrap();
        assert_eq!(g.tokens, vec![3; 5]);
        assert!(!g.finished);
        let cfg = BeamConfig::standard(2, 5, ScoreFn::LogprobAvg);
        let hyps = grouped_beam(&driver, &cfg).unwrap();
        for h in &hyps {
            check_shape(h, 5);
        }
        assert!(!hyps[0].finished);
        let s = top_k_core(&driver, 1, 1.0, 0).unwrap();
        assert_eq!(s.tokens, vec![3; 5]);
    }

    fn check_sampler_shape(h: &Hypothesis, max_len: usize) {
        assert!(!h.tokens.is_empty() && h.tokens.len() <= max_len);
        assert_eq!(h.tokens.len(), h.per_step_values.len());
        assert_eq!(h.finished, *h.tokens.last().unwrap() == EOS_ID);
        let mean = h.per_step_values.iter().sum::<f64>() / h.per_step_values.len() as f64;
        assert!((h.score - mean).abs() < 1e-12);
        for (i, &t) in h.tokens.iter().enumerate() {
            if t == EOS_ID {
                assert_eq!(i, h.tokens.len() - 1, "token after EOS");
            }
        }
    }

    #[test]
    fn top_k_one_and_tiny_nucleus_match_greedy() {
        // argmax token cycles through content ids and then EOS
        let driver = TableDriver {
            vocab: 7,
            cap: 8,
            logits: |prefix: &[u32]| {
                let want = [5u32, 3, 6, EOS_ID];
                let next = want.get(prefix.len()).copied().unwrap_or(EOS_ID);
                let mut l: Vec<f64> = (0..7).map(|i| -0.1 * i as f64).collect();
                l[next as usize] = 4.0;
                l
            },
        };
        let g = greedy_core(&driver, 8).unwrap();
        assert_eq!(g.tokens, vec![5, 3, 6, EOS_ID]);
        let t = top_k_core(&driver, 1, 1.0, 123).unwrap();
        let n = nucleus_core(&driver, 1e-12, 123).unwrap();
        assert_eq!(t.tokens, g.tokens);
        assert_eq!(n.tokens, g.tokens);
    }

    #[test]
    fn sampling_is_reproducible_per_seed() {
        let m = micro_model(1);
        let x = [3u32, 7];
        let a = top_k_sample(&m, &x, 5, 0.8, 42).unwrap();
        let b = top_k_sample(&m, &x, 5, 0.8, 42).unwrap();
        let c = top_k_sample(&m, &x, 5, 0.8, 43).unwrap();
        assert_eq!(a, b);
        let d = nucleus_sample(&m, &x, 0.9, 7).unwrap();
        let e = nucleus_sample(&m, &x, 0.9, 7).unwrap();
        assert_eq!(d, e);
        check_sampler_shape(&a, 6);
        check_sampler_shape(&c, 6);
        check_sampler_shape(&d, 6);
    }

    #[test]
    fn full_width_top_k_matches_model_distribution() {
        let logits = vec![-1.0, 0.5, 0.0, 1.5, -0.5];
        let probs = softmax_probs(&logits, 1.0);
        let driver = TableDriver { vocab: 5, cap: 1, logits: move |_: &[u32]| logits.clone() };
        let n = 100_000usize;
        let mut counts = [0usize; 5];
        for seed in 0..n as u64 {
            let h = top_k_core(&driver, 5, 1.0, seed).unwrap();
            counts[h.tokens[0] as usize] += 1;
        }
        for t in 0..5 {
            let freq = counts[t] as f64 / n as f64;
            let sigma = (probs[t] * (1.0 - probs[t]) / n as f64).sqrt();
            assert!(
                (freq - probs[t]).abs() <= 3.0 * sigma,
                "token {t}: freq {freq} vs p {} (sigma {sigma})",
                probs[t]
            );
        }
    }

    #[test]
    fn nucleus_support_is_smallest_prefix_reaching_mass() {
        // token probabilities 0.5, 0.3, 0.2 on ids 2, 3, 4
        let logits = vec![-1e9, -1e9, 0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let driver = TableDriver { vocab: 5, cap: 1, logits: move |_: &[u32]| logits.clone() };
        let n = 20_000usize;
        let mut counts = [0usize; 5];
        for seed in 0..n as u64 {
            let h = nucleus_core(&driver, 0.7, seed).unwrap();
            counts[h.tokens[0] as usize] += 1;
        }
        assert_eq!(counts[4], 0, "token outside the 0.7 nucleus was sampled");
        let p2 = 0.5 / 0.8;
        let freq2 = counts[2] as f64 / n as f64;
        let sigma = (p2 * (1.0 - p2) / n as f64).sqrt();
        assert!((freq2 - p2).abs() <= 3.0 * sigma);
        // p = 1 keeps the full support reachable
        let mut seen = [false; 5];
        for seed in 0..2_000u64 {
            let h = nucleus_core(&driver, 1.0, seed).unwrap();
            seen[h.tokens[0] as usize] = true;
        }
        assert!(seen[2] && seen[3] && seen[4]);
    }

    #[test]
    fn samplers_reject_bad_parameters() {
        let m = micro_model(0);
        let x = [3u32];
        assert!(matches!(top_k_sample(&m, &x, 0, 1.0, 0), Err(Error::Validation(_))));
        assert!(matches!(top_k_sample(&m, &x, 9, 1.0, 0), Err(Error::Validation(_))));
        assert!(matches!(top_k_sample(&m, &x, 2, 0.0, 0), Err(Error::Validation(_))));
        assert!(matches!(nucleus_sample(&m, &x, 0.0, 0), Err(Error::Validation(_))));
        assert!(matches!(nucleus_sample(&m, &x, 1.5, 0), Err(Error::Validation(_))));
        assert!(matches!(greedy(&m, &x, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn three_group_diverse_config_runs() {
        let m = micro_model(5);
        let cfg = BeamConfig {
            beam_size: 6,
            max_len: 6,
            score_fn: ScoreFn::LogprobAvg,
            n_groups: 3,
            diversity_strength: 0.5,
        };
        let hyps = diverse_beam_search(&m, &[3, 4, 5], &cfg).unwrap();
        assert!(!hyps.is_empty() && hyps.len() <= 6);
        for h in &hyps {
            check_shape(h, 6);
        }
        for w in hyps.windows(2) {
            assert!(w[0].score >= w[1].score);
            assert_ne!(w[0].tokens, w[1].tokens);
        }
    }
}
