//! Synthetic open-ended dialogue task with exactly known generative
//! probabilities. Contexts come in classes; a reply is either drawn from a
//! shared generic pool (probability `p_generic`) or from the class's own
//! specific responses. Generic, specific, and context tokens live in
//! disjoint sub-alphabets, so the hidden generic/specific label is
//! recoverable from a response's tokens.
//!
//! The generic pool is structured: a shared opener token, a 4-ary branch
//! token, a leaf token, then a deterministic tail. Pool responses therefore
//! share prefixes and sit near the top length of the response range, which
//! keeps their exact per-token probability (oracle perplexity) below that
//! of every class-specific response under the default spec.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kvconfig::KvFile;
use crate::{stable_hash_hex, Error, Result, N_RESERVED};

/// Sentinel log-probability for in-vocabulary sequences the grammar can
/// never produce.
pub const UNGENERATABLE: f64 = f64::NEG_INFINITY;

/// Token id <-> string bijection. Ids 0..3 are reserved (PAD, BOS, EOS) and
/// are never produced by the grammar as content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(n_content: usize) -> Vocab {
        let mut tokens = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
        tokens.extend((0..n_content).map(|i| format!("w{i:03}")));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Validation(format!("token id {id} out of vocabulary")))
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown token `{token}`")))
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.token(id)).collect();
        Ok(words?.join(" "))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarSpec {
    pub n_context_classes: usize,
    pub specific_responses_per_class: usize,
    pub generic_pool_size: usize,
    pub p_generic: f64,
    pub response_length_range: (usize, usize),
    /// Number of content tokens; the model vocabulary adds the 3 reserved ids.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for GrammarSpec {
    fn default() -> GrammarSpec {
        GrammarSpec {
            n_context_classes: 20,
            specific_responses_per_class: 30,
            generic_pool_size: 60,
            p_generic: 0.3,
            response_length_range: (4, 10),
            vocab_size: 120,
            seed: 17,
        }
    }
}

impl GrammarSpec {
    /// Content-token split: contexts and the generic pool each get a sixth
    /// of the alphabet, specific responses the rest.
    fn side_size(&self) -> usize {
        self.vocab_size / 6
    }

    fn specific_alphabet(&self) -> std::ops::Range<u32> {
        let s = self.vocab_size - 2 * self.side_size();
        N_RESERVED..N_RESERVED + s as u32
    }

    fn generic_alphabet(&self) -> std::ops::Range<u32> {
        let s = self.vocab_size - 2 * self.side_size();
        N_RESERVED + s as u32..N_RESERVED + (s + self.side_size()) as u32
    }

    fn context_alphabet(&self) -> std::ops::Range<u32> {
        N_RESERVED + (self.vocab_size - self.side_size()) as u32
            ..N_RESERVED + self.vocab_size as u32
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_generic >= 0.0 && self.p_generic <= 1.0) {
            return Err(Error::Validation(format!(
                "p_generic must be in [0, 1], got {}",
                self.p_generic
            )));
        }
        if self.n_context_classes < 1
            || self.specific_responses_per_class < 1
            || self.generic_pool_size < 1
        {
            return Err(Error::Validation("grammar counts must be >= 1".into()));
        }
        let (min_len, max_len) = self.response_length_range;
        if min_len < 1 || min_len > max_len {
            return Err(Error::Validation(format!(
                "bad response_length_range ({min_len}, {max_len})"
            )));
        }
        if max_len < 5 || max_len - min_len < 2 {
            return Err(Error::Validation(
                "generic responses need max length >= 5 and a length span >= 2".into(),
            ));
        }
        let needed = 5 + self.generic_pool_size.div_ceil(4);
        if self.side_size() < needed.max(2) {
            return Err(Error::Validation(format!(
                "vocab_size {} leaves a generic alphabet of {}, need {}",
                self.vocab_size,
                self.side_size(),
                needed
            )));
        }
        if self.vocab_size - 2 * self.side_size() < 2 {
            return Err(Error::Validation("specific alphabet too small".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("n_context_classes", self.n_context_classes);
        kv.set("specific_responses_per_class", self.specific_responses_per_class);
        kv.set("generic_pool_size", self.generic_pool_size);
        kv.set("p_generic", self.p_generic);
        kv.set("response_min_len", self.response_length_range.0);
        kv.set("response_max_len", self.response_length_range.1);
        kv.set("vocab_size", self.vocab_size);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<GrammarSpec> {
        kv.ensure_only(&[
            "n_context_classes",
            "specific_responses_per_class",
            "generic_pool_size",
            "p_generic",
            "response_min_len",
            "response_max_len",
            "vocab_size",
            "seed",
        ])?;
        let spec = GrammarSpec {
            n_context_classes: kv.require("n_context_classes")?,
            specific_responses_per_class: kv.require("specific_responses_per_class")?,
            generic_pool_size: kv.require("generic_pool_size")?,
            p_generic: kv.require("p_generic")?,
            response_length_range: (
                kv.require("response_min_len")?,
                kv.require("response_max_len")?,
            ),
            vocab_size: kv.require("vocab_size")?,
            seed: kv.require("seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn hash(&self) -> String {
        stable_hash_hex(self.to_kv().serialize().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialoguePair {
    pub context: Vec<u32>,
    pub response: Vec<u32>,
    /// Hidden label for analysis; not part of the model's view of the data.
    pub is_generic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub pairs: Vec<DialoguePair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One `context<TAB>response` line per pair, preceded by header lines
    /// carrying the grammar hash and the sampling seed.
    pub fn serialize(&self, grammar: &Grammar, seed: u64) -> Result<String> {
        let mut out = format!("# spec_hash={}\n# seed={seed}\n", grammar.spec.hash());
        for pair in &self.pairs {
            out.push_str(&grammar.vocab.decode(&pair.context)?);
            out.push('\t');
            out.push_str(&grammar.vocab.decode(&pair.response)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Inverse of `serialize`; also returns the recorded sampling seed.
    /// Hidden generic labels are recovered from the grammar.
    pub fn parse(text: &str, grammar: &Grammar) -> Result<(Corpus, u64)> {
        let mut spec_hash = None;
        let mut seed = None;
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let header = header.trim();
                if let Some(h) = header.strip_prefix("spec_hash=") {
                    spec_hash = Some(h.to_string());
                } else if let Some(s) = header.strip_prefix("seed=") {
                    seed = Some(s.parse::<u64>().map_err(|_| {
                        Error::Format(format!("line {}: bad seed header", lineno + 1))
                    })?);
                } else {
                    return Err(Error::Format(format!(
                        "line {}: unknown header `{header}`",
                        lineno + 1
                    )));
                }
                continue;
            }
            let (ctx, resp) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("line {}: expected context<TAB>response", lineno + 1))
            })?;
            let context = grammar.vocab.encode(ctx)?;
            let response = grammar.vocab.encode(resp)?;
            if response.is_empty() {
                return Err(Error::Format(format!("line {}: empty response", lineno + 1)));
            }
            let is_generic = grammar.lm.entry(&response).map(|e| e.1).unwrap_or(false);
            pairs.push(DialoguePair { context, response, is_generic });
        }
        let spec_hash =
            spec_hash.ok_or_else(|| Error::Format("missing spec_hash header".into()))?;
        let seed = seed.ok_or_else(|| Error::Format("missing seed header".into()))?;
        if spec_hash != grammar.spec.hash() {
            return Err(Error::Validation(format!(
                "corpus was generated from a different grammar (hash {spec_hash}, expected {})",
                grammar.spec.hash()
            )));
        }
        Ok((Corpus { pairs }, seed))
    }
}

/// Exact unconditional response distribution implied by a grammar,
/// marginalized over context classes.
#[derive(Debug, Clone)]
pub struct OracleLm {
    entries: HashMap<Vec<u32>, (f64, bool)>,
    total_vocab: u32,
}

impl OracleLm {
    fn entry(&self, response: &[u32]) -> Option<(f64, bool)> {
        self.entries.get(response).copied()
    }

    /// Exact log marginal probability; [`UNGENERATABLE`] for in-vocabulary
    /// sequences the grammar cannot produce.
    pub fn logprob(&self, response: &[u32]) -> Result<f64> {
        for &t in response {
            if t >= self.total_vocab {
                return Err(Error::Validation(format!("unknown token id {t}")));
            }
        }
        Ok(self.entry(response).map(|e| e.0).unwrap_or(UNGENERATABLE))
    }

    /// Per-token perplexity `exp(-logprob / len)`.
    pub fn perplexity(&self, response: &[u32]) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::Validation("perplexity of an empty response".into()));
        }
        Ok((-self.logprob(response)? / response.len() as f64).exp())
    }

    pub fn is_generic(&self, response: &[u32]) -> Option<bool> {
        self.entry(response).map(|e| e.1)
    }

    /// Every generatable response with its log-probability and hidden label.
    pub fn responses(&self) -> impl Iterator<Item = (&Vec<u32>, f64, bool)> {
        self.entries.iter().map(|(toks, &(lp, g))| (toks, lp, g))
    }

    pub fn n_responses(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone)]
pub struct Grammar {
    pub spec: GrammarSpec,
    pub vocab: Vocab,
    contexts: Vec<Vec<u32>>,
    specifics: Vec<Vec<Vec<u32>>>,
    generics: Vec<Vec<u32>>,
    lm: OracleLm,
}

impl Grammar {
    pub fn build(spec: &GrammarSpec) -> Result<Grammar> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

        let ctx_alpha: Vec<u32> = spec.context_alphabet().collect();
        let mut contexts: Vec<Vec<u32>> = Vec::with_capacity(spec.n_context_classes);
        for class in 0..spec.n_context_classes {
            let len = 3 + class % 4;
            let ctx = distinct_sample(&mut rng, &ctx_alpha, len, |cand| {
                !contexts.iter().any(|c| c == cand)
            })?;
            contexts.push(ctx);
        }

        let spec_alpha: Vec<u32> = spec.specific_alphabet().collect();
        let (min_len, max_len) = spec.response_length_range;
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        let mut specifics = Vec::with_capacity(spec.n_context_classes);
        for _ in 0..spec.n_context_classes {
            let mut class_responses = Vec::with_capacity(spec.specific_responses_per_class);
            for _ in 0..spec.specific_responses_per_class {
                let len = rng.random_range(min_len..=max_len);
                let resp =
                    distinct_sample(&mut rng, &spec_alpha, len, |cand| !seen.contains(cand))?;
                seen.insert(resp.clone());
                class_responses.push(resp);
            }
            specifics.push(class_responses);
        }

        let gen_alpha: Vec<u32> = spec.generic_alphabet().collect();
        let leaves = spec.generic_pool_size.div_ceil(4);
        let mut generics = Vec::with_capacity(spec.generic_pool_size);
        for i in 0..spec.generic_pool_size {
            let branch = i % 4;
            let leaf = i / 4;
            let len = max_len - i % 3;
            let mut resp = vec![gen_alpha[0], gen_alpha[1 + branch], gen_alpha[5 + leaf]];
            for j in resp.len()..len {
                resp.push(gen_alpha[(1 + branch + leaf + j) % gen_alpha.len()]);
            }
            generics.push(resp);
        }
        debug_assert!(leaves + 5 <= gen_alpha.len());

        let mut entries = HashMap::new();
        let lp_generic = (spec.p_generic / spec.generic_pool_size as f64).ln();
        for g in &generics {
            entries.insert(g.clone(), (lp_generic, true));
        }
        let n_specific = (spec.n_context_classes * spec.specific_responses_per_class) as f64;
        let lp_specific = ((1.0 - spec.p_generic) / n_specific).ln();
        for class in &specifics {
            for s in class {
                entries.insert(s.clone(), (lp_specific, false));
            }
        }
        let lm = OracleLm { entries, total_vocab: (N_RESERVED as usize + spec.vocab_size) as u32 };

        Ok(Grammar {
            spec: spec.clone(),
            vocab: Vocab::new(spec.vocab_size),
            contexts,
            specifics,
            generics,
            lm,
        })
    }

    pub fn contexts(&self) -> &[Vec<u32>] {
        &self.contexts
    }

    pub fn specifics(&self, class: usize) -> &[Vec<u32>] {
        &self.specifics[class]
    }

    pub fn generics(&self) -> &[Vec<u32>] {
        &self.generics
    }

    pub fn lm(&self) -> &OracleLm {
        &self.lm
    }

    /// Exact conditional log-probability of a response given a context.
    /// The context must be one of the grammar's class templates; specific
    /// responses belonging to other classes have zero conditional mass.
    pub fn conditional_logprob(&self, context: &[u32], response: &[u32]) -> Result<f64> {
        let class = self
            .contexts
            .iter()
            .position(|c| c == context)
            .ok_or_else(|| Error::Validation("context is not a grammar template".into()))?;
        self.lm.logprob(response)?;
        match self.lm.is_generic(response) {
            Some(true) => Ok((self.spec.p_generic / self.spec.generic_pool_size as f64).ln()),
            Some(false) if self.specifics[class].iter().any(|s| s == response) => {
                Ok(((1.0 - self.spec.p_generic) / self.spec.specific_responses_per_class as f64)
                    .ln())
            }
            _ => Ok(UNGENERATABLE),
        }
    }

    /// Model-side vocabulary size (content plus reserved ids).
    pub fn model_vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Draws `n_pairs` dialogue pairs and splits them 90/10 into train and
    /// validation corpora. Deterministic per seed.
    pub fn sample_corpus(&self, n_pairs: usize, seed: u64) -> (Corpus, Corpus) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let class = rng.random_range(0..self.spec.n_context_classes);
            let is_generic = rng.random::<f64>() < self.spec.p_generic;
            let response = if is_generic {
                self.generics[rng.random_range(0..self.generics.len())].clone()
            } else {
                let class_responses = &self.specifics[class];
                class_responses[rng.random_range(0..class_responses.len())].clone()
            };
            pairs.push(DialoguePair {
                context: self.contexts[class].clone(),
                response,
                is_generic,
            });
        }
        let n_valid = n_pairs / 10;
        let valid = Corpus { pairs: pairs.split_off(n_pairs - n_valid) };
        (Corpus { pairs }, valid)
    }
}

fn distinct_sample(
    rng: &mut ChaCha8Rng,
    alphabet: &[u32],
    len: usize,
    accept: impl Fn(&Vec<u32>) -> bool,
) -> Result<Vec<u32>> {
    for _ in 0..10_000 {
        let cand: Vec<u32> =
            (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        if accept(&cand) {
            return Ok(cand);
        }
    }
    Err(Error::Validation(
        "grammar too constrained: could not sample a fresh distinct sequence".into(),
    ))
}

/// Builds the grammar for `spec` and samples a 90/10 train/validation split.
pub fn generate_corpus(spec: &GrammarSpec, n_pairs: usize, seed: u64) -> Result<(Corpus, Corpus)> {
    let grammar = Grammar::build(spec)?;
    Ok(grammar.sample_corpus(n_pairs, seed))
}

/// The `n` generatable responses with lowest oracle perplexity, ties broken
/// lexicographically. Under the default spec these are dominated by the
/// generic pool.
pub fn select_distractors(grammar: &Grammar, n: usize) -> Result<Vec<Vec<u32>>> {
    let lm = grammar.lm();
    if lm.n_responses() < n {
        return Err(Error::Validation(format!(
            "asked for {n} distractors but the grammar generates only {} responses",
            lm.n_responses()
        )));
    }
    let mut ranked: Vec<(f64, &Vec<u32>)> = lm
        .responses()
        .map(|(toks, _, _)| (lm.perplexity(toks).expect("generatable response"), toks))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(ranked.into_iter().take(n).map(|(_, toks)| toks.clone()).collect())
}
