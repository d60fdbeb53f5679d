//! Evaluation battery: perplexity, corpus BLEU-4, distinct-n, distractor
//! mean-rank, and perplexity-distribution histograms.
//!
//! Rank convention: ranks are 0-indexed and ties are pessimistic. The
//! groundtruth's rank is the number of distractors scoring greater than or
//! equal to it, so a random scorer against 50 distractors has mean rank
//! 25.0 and comparisons against published 1-indexed numbers should look at
//! orderings only.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::datagen::{Corpus, DialoguePair, Grammar};
use crate::losses::{score_logits_avg, score_logprob_avg, token_ce, ScoreFn};
use crate::model::Model;
use crate::{Error, Result, EOS_ID};

/// Number of histogram bins used by the evaluation pipeline.
pub const DEFAULT_HIST_BINS: usize = 30;

/// Anything that can assign a total negative log-likelihood to a response
/// given its context. Implementations must include the end-of-sequence
/// event and report the matching token count, so perplexities from
/// different scorers share a denominator convention.
pub trait ResponseNll {
    fn response_nll(&self, context: &[u32], response: &[u32]) -> Result<(f64, usize)>;
}

impl ResponseNll for Model {
    fn response_nll(&self, context: &[u32], response: &[u32]) -> Result<(f64, usize)> {
        let mut y = response.to_vec();
        y.push(EOS_ID);
        let logits = self.forward_teacher_forcing(context, &y)?;
        Ok((token_ce(&logits, &y)? * y.len() as f64, y.len()))
    }
}

impl ResponseNll for Grammar {
    fn response_nll(&self, context: &[u32], response: &[u32]) -> Result<(f64, usize)> {
        let lp = self.conditional_logprob(context, response)?;
        Ok((-lp, response.len() + 1))
    }
}

/// Token-weighted corpus perplexity: exp of total NLL over total tokens.
pub fn perplexity<S: ResponseNll + ?Sized>(scorer: &S, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Validation("perplexity of an empty corpus".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for pair in &corpus.pairs {
        let (n, t) = scorer.response_nll(&pair.context, &pair.response)?;
        nll += n;
        tokens += t;
    }
    Ok((nll / tokens as f64).exp())
}

/// Teacher-forced sequence score of `response` (EOS appended) under the
/// given score function.
pub fn sequence_score(
    model: &Model,
    context: &[u32],
    response: &[u32],
    score_fn: ScoreFn,
) -> Result<f64> {
    let mut y = response.to_vec();
    y.push(EOS_ID);
    let logits = model.forward_teacher_forcing(context, &y)?;
    match score_fn {
        ScoreFn::LogprobAvg => score_logprob_avg(&logits, &y),
        ScoreFn::LogitsAvg => score_logits_avg(&logits, &y),
    }
}

/// Corpus-level BLEU with uniform 1..4-gram weights and brevity penalty.
/// Zero n-gram counts get add-one smoothing; nonzero counts are exact.
pub fn bleu4(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Validation("BLEU of an empty corpus".into()));
    }
    let hyp_tokens: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_tokens: usize = references.iter().map(Vec::len).sum();
    if hyp_tokens == 0 {
        return Ok(0.0);
    }

    let mut log_precision_sum = 0.0;
    for n in 1..=4usize {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (hyp, reference) in hypotheses.iter().zip(references) {
            matched += clipped_ngram_matches(hyp, reference, n);
            total += hyp.len().saturating_sub(n - 1);
        }
        let precision = if matched == 0 {
            (matched + 1) as f64 / (total + 1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_precision_sum += 0.25 * precision.ln();
    }

    let brevity = if hyp_tokens >= ref_tokens {
        1.0
    } else {
        (1.0 - ref_tokens as f64 / hyp_tokens as f64).exp()
    };
    Ok(brevity * log_precision_sum.exp())
}

fn clipped_ngram_matches(hyp: &[u32], reference: &[u32], n: usize) -> usize {
    let mut ref_counts: std::collections::HashMap<&[u32], usize> = std::collections::HashMap::new();
    for gram in reference.windows(n) {
        *ref_counts.entry(gram).or_insert(0) += 1;
    }
    let mut hyp_counts: std::collections::HashMap<&[u32], usize> = std::collections::HashMap::new();
    for gram in hyp.windows(n) {
        *hyp_counts.entry(gram).or_insert(0) += 1;
    }
    hyp_counts
        .into_iter()
        .map(|(gram, count)| count.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum()
}

/// Distinct n-grams over the whole corpus divided by total n-grams.
pub fn distinct_n(texts: &[Vec<u32>], n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Validation("distinct-n needs n >= 1".into()));
    }
    let mut seen: HashSet<&[u32]> = HashSet::new();
    let mut total = 0usize;
    for text in texts {
        for gram in text.windows(n) {
            seen.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation(format!("no {n}-grams: every text is shorter than {n}")));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Groundtruth rank against fixed distractors under one score function.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    /// Per-example rank in `[0, n_distractors]`, 0 = groundtruth on top.
    pub ranks: Vec<usize>,
    pub mean_rank: f64,
    pub n_distractors: usize,
    pub score_fn: ScoreFn,
}

/// Pessimistic 0-indexed rank: distractors scoring >= groundtruth count
/// against it.
pub fn rank_against(gt_score: f64, distractor_scores: &[f64]) -> usize {
    distractor_scores.iter().filter(|&&s| s >= gt_score).count()
}

/// Ranks each pair's groundtruth response against the distractor set,
/// scoring every candidate by teacher forcing under `score_fn`.
pub fn mean_rank(
    model: &Model,
    score_fn: ScoreFn,
    pairs: &[DialoguePair],
    distractors: &[Vec<u32>],
) -> Result<RankReport> {
    if distractors.is_empty() {
        return Err(Error::Validation("empty distractor set".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Validation("no evaluation pairs".into()));
    }
    let mut by_context: std::collections::HashMap<&[u32], Vec<f64>> =
        std::collections::HashMap::new();
    let mut ranks = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let gt = sequence_score(model, &pair.context, &pair.response, score_fn)?;
        if !by_context.contains_key(pair.context.as_slice()) {
            let scores: Result<Vec<f64>> = distractors
                .iter()
                .map(|d| sequence_score(model, &pair.context, d, score_fn))
                .collect();
            by_context.insert(&pair.context, scores?);
        }
        ranks.push(rank_against(gt, &by_context[pair.context.as_slice()]));
    }
    let mean = ranks.iter().sum::<usize>() as f64 / ranks.len() as f64;
    Ok(RankReport { ranks, mean_rank: mean, n_distractors: distractors.len(), score_fn })
}

/// Histogram of per-text perplexities over shared log-spaced bins.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSpec {
    /// Bin edges in log-perplexity space, length `n_bins + 1`.
    pub log_edges: Vec<f64>,
    /// Per-series counts; each sums to its series' size.
    pub series: Vec<(String, Vec<usize>)>,
}

impl HistogramSpec {
    /// CSV with perplexity-space edges: `bin_low,bin_high,<series...>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high");
        for (name, _) in &self.series {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for bin in 0..self.log_edges.len() - 1 {
            out.push_str(&format!(
                "{},{}",
                self.log_edges[bin].exp(),
                self.log_edges[bin + 1].exp()
            ));
            for (_, counts) in &self.series {
                out.push_str(&format!(",{}", counts[bin]));
            }
            out.push('\n');
        }
        out
    }
}

/// Bins every series over `n_bins` log-spaced bins spanning the pooled
/// min/max. All perplexities must be finite and positive.
pub fn ppl_histogram(series: &[(String, Vec<f64>)], n_bins: usize) -> Result<HistogramSpec> {
    if n_bins < 1 {
        return Err(Error::Validation("histogram needs at least one bin".into()));
    }
    if series.is_empty() || series.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Validation("histogram needs non-empty series".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (name, values) in series {
        for &v in values {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Validation(format!(
                    "series `{name}` has non-positive or non-finite perplexity {v}"
                )));
            }
            lo = lo.min(v.ln());
            hi = hi.max(v.ln());
        }
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / n_bins as f64;
    let log_edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let binned = series
        .iter()
        .map(|(name, values)| {
            let mut counts = vec![0usize; n_bins];
            for &v in values {
                let idx = (((v.ln() - lo) / width) as usize).min(n_bins - 1);
                counts[idx] += 1;
            }
            (name.clone(), counts)
        })
        .collect();
    Ok(HistogramSpec { log_edges, series: binned })
}

/// Middle value (mean of the two middle values for even lengths). Infinite
/// values participate via their natural ordering; NaN is rejected.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Validation("median of an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("median over NaN values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Ok(sorted[mid])
    } else {
        Ok(0.5 * (sorted[mid - 1] + sorted[mid]))
    }
}

/// One metric observation, emitted as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Serializes records as JSON-lines. Values must be finite so that reruns
/// byte-compare; counts and ratios always are.
pub fn to_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        if !r.value.is_finite() {
            return Err(Error::Validation(format!(
                "metric `{}` has non-finite value {}",
                r.metric, r.value
            )));
        }
        out.push_str(&serde_json::to_string(r).expect("plain struct serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("bad metric line: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Corpus, GrammarSpec};
    use crate::model::{Model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> GrammarSpec {
        GrammarSpec {
            n_context_classes: 4,
            specific_responses_per_class: 5,
            generic_pool_size: 8,
            p_generic: 0.4,
            response_length_range: (3, 6),
            vocab_size: 48,
            seed: 5,
        }
    }

    fn micro_model(vocab_size: usize, seed: u64) -> Model {
        let cfg = ModelConfig {
            vocab_size,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_len: 16,
            dropout: 0.0,
            tie_embeddings: true,
        };
        Model::init(cfg, seed).unwrap()
    }

    struct ConstantNll(f64);

    impl ResponseNll for ConstantNll {
        fn response_nll(&self, _context: &[u32], response: &[u32]) -> Result<(f64, usize)> {
            let tokens = response.len() + 1;
            Ok((self.0 * tokens as f64, tokens))
        }
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocab_size() {
        let grammar = Grammar::build(&small_spec()).unwrap();
        let (train, _) = grammar.sample_corpus(8, 3);
        let mut model = micro_model(grammar.model_vocab_size(), 0);
        for (_, t) in model.params.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let ppl = perplexity(&model, &train).unwrap();
        assert!((ppl - grammar.model_vocab_size() as f64).abs() < 1e-9, "uniform ppl {ppl}");
    }

    #[test]
    fn perplexity_closed_forms_and_empty_corpus() {
        let grammar = Grammar::build(&small_spec()).unwrap();
        let (train, _) = grammar.sample_corpus(6, 3);
        assert_eq!(perplexity(&ConstantNll(0.0), &train).unwrap(), 1.0);

        let generic = grammar.generics()[2].clone();
        let specific = grammar.specifics(1)[3].clone();
        let corpus = Corpus {
            pairs: vec![
                DialoguePair {
                    context: grammar.contexts()[0].clone(),
                    response: generic.clone(),
                    is_generic: true,
                },
                DialoguePair {
                    context: grammar.contexts()[1].clone(),
                    response: specific.clone(),
                    is_generic: false,
                },
            ],
        };
        let tokens = (generic.len() + 1 + specific.len() + 1) as f64;
        let expected = ((-(0.4f64 / 8.0).ln() - (0.6f64 / 5.0).ln()) / tokens).exp();
        let got = perplexity(&grammar, &corpus).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

        assert!(perplexity(&grammar, &Corpus::default()).is_err());
    }

    #[test]
    fn oracle_perplexity_lower_bounds_models_in_expectation() {
        let grammar = Grammar::build(&small_spec()).unwrap();
        let (train, valid) = grammar.sample_corpus(1200, 11);
        let pairs: Vec<&DialoguePair> = train.pairs.iter().chain(valid.pairs.iter()).collect();
        assert!(pairs.len() >= 1000);

        for model_seed in [0, 1] {
            let model = micro_model(grammar.model_vocab_size(), model_seed);
            let diffs: Vec<f64> = pairs
                .iter()
                .map(|p| {
                    let (m, _) = model.response_nll(&p.context, &p.response).unwrap();
                    let (o, _) = grammar.response_nll(&p.context, &p.response).unwrap();
                    m - o
                })
                .collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
            let stderr = (var / n).sqrt();
            assert!(
                mean > -3.0 * stderr,
                "model beat the exact oracle beyond noise: mean diff {mean}, se {stderr}"
            );
        }
    }

    #[test]
    fn bleu_hand_cases() {
        let a = vec![vec![0, 1, 2, 3], vec![5, 6, 7, 8, 9]];
        assert!((bleu4(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let hyp: Vec<Vec<u32>> = (0..8).map(|_| (0u32..50).collect()).collect();
        let reference: Vec<Vec<u32>> = (0..8).map(|_| (100u32..150).collect()).collect();
        let b = bleu4(&hyp, &reference).unwrap();
        assert!(b < 0.01, "zero-overlap BLEU {b}");

        let hyp = vec![vec![0, 1, 2, 3]];
        let reference = vec![vec![0, 1, 2, 3, 4]];
        let b = bleu4(&hyp, &reference).unwrap();
        assert!((b - (-0.25f64).exp()).abs() < 1e-12, "brevity-only BLEU {b}");

        assert!(bleu4(&hyp, &a).is_err(), "misaligned lists");
        assert!(bleu4(&[], &[]).is_err(), "empty corpus");
        assert_eq!(bleu4(&[vec![]], &[vec![0]]).unwrap(), 0.0, "empty hypothesis");
    }

    #[test]
    fn distinct_n_hand_cases_and_duplication_property() {
        let ab = vec![vec![0, 1], vec![0, 1]];
        assert_eq!(distinct_n(&ab, 1).unwrap(), 0.5);

        let unique = vec![vec![0, 1, 2], vec![3, 4]];
        for n in 1..=2 {
            assert_eq!(distinct_n(&unique, n).unwrap(), 1.0);
        }

        let overlapping = vec![vec![0, 1, 2], vec![1, 2, 3]];
        assert_eq!(distinct_n(&overlapping, 2).unwrap(), 0.75);

        assert!(distinct_n(&ab, 0).is_err());
        assert!(distinct_n(&ab, 3).is_err(), "all texts shorter than n");

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let corpus: Vec<Vec<u32>> =
            (0..20).map(|_| (0..6).map(|_| rng.random_range(0..10u32)).collect()).collect();
        let mut doubled = corpus.clone();
        doubled.extend(corpus.iter().cloned());
        let mut permuted = corpus.clone();
        permuted.reverse();
        for n in 1..=3 {
            let base = distinct_n(&corpus, n).unwrap();
            assert!(distinct_n(&doubled, n).unwrap() <= base);
            assert_eq!(distinct_n(&permuted, n).unwrap(), base);
        }
    }

    #[test]
    fn rank_extremes_ties_and_monotone_invariance() {
        let lower = vec![0.1, 0.2, 0.3];
        assert_eq!(rank_against(0.5, &lower), 0);
        assert_eq!(rank_against(0.05, &lower), 3);
        assert_eq!(rank_against(0.2, &lower), 2, "ties are pessimistic");

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let gt: f64 = rng.random_range(-4.0..4.0);
            let scores: Vec<f64> = (0..50).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp()).collect();
            assert_eq!(rank_against(gt, &scores), rank_against((0.7 * gt).exp(), &mapped));
        }
    }

    #[test]
    fn random_scores_give_mean_rank_near_twenty_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let trials = 10_000;
        let mut total = 0usize;
        for _ in 0..trials {
            let gt: f64 = rng.random();
            let scores: Vec<f64> = (0..50).map(|_| rng.random()).collect();
            total += rank_against(gt, &scores);
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 25.0).abs() < 0.5, "random baseline mean rank {mean}");
    }

    #[test]
    fn mean_rank_report_on_a_micro_model() {
        let grammar = Grammar::build(&small_spec()).unwrap();
        let (train, _) = grammar.sample_corpus(6, 13);
        let distractors: Vec<Vec<u32>> = grammar.generics()[..4].to_vec();
        let model = micro_model(grammar.model_vocab_size(), 2);
        for score_fn in [ScoreFn::LogprobAvg, ScoreFn::LogitsAvg] {
            let report = mean_rank(&model, score_fn, &train.pairs, &distractors).unwrap();
            assert_eq!(report.n_distractors, 4);
            assert_eq!(report.score_fn, score_fn);
            assert_eq!(report.ranks.len(), train.len());
            assert!(report.ranks.iter().all(|&r| r <= 4));
            let expect = report.ranks.iter().sum::<usize>() as f64 / report.ranks.len() as f64;
            assert_eq!(report.mean_rank, expect);
        }
        assert!(mean_rank(&model, ScoreFn::LogprobAvg, &train.pairs, &[]).is_err());
        assert!(mean_rank(&model, ScoreFn::LogprobAvg, &[], &distractors).is_err());
    }

    #[test]
    fn histogram_bins_partition_and_clamp() {
        let single = vec![("only".to_string(), vec![7.0])];
        let h = ppl_histogram(&single, 30).unwrap();
        assert_eq!(h.log_edges.len(), 31);
        assert_eq!(h.series[0].1.iter().sum::<usize>(), 1);
        assert_eq!(h.series[0].1.iter().filter(|&&c| c > 0).count(), 1);

        let values: Vec<f64> = (1..=100).map(|i| 1.0 + i as f64 * 0.37).collect();
        let twin = vec![("a".to_string(), values.clone()), ("b".to_string(), values.clone())];
        let h = ppl_histogram(&twin, 30).unwrap();
        assert_eq!(h.series[0].1, h.series[1].1);
        assert_eq!(h.series[0].1.iter().sum::<usize>(), 100);
        assert!(h.log_edges.windows(2).all(|w| w[1] > w[0]));

        let csv = h.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "bin_low,bin_high,a,b");
        assert_eq!(lines.count(), 30);

        assert!(ppl_histogram(&[], 30).is_err());
        assert!(ppl_histogram(&[("x".to_string(), vec![])], 30).is_err());
        assert!(ppl_histogram(&[("x".to_string(), vec![f64::INFINITY])], 30).is_err());
        assert!(ppl_histogram(&[("x".to_string(), vec![1.0])], 0).is_err());
    }

    #[test]
    fn median_handles_parity_and_infinities() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert_eq!(median(&[1.0, 2.0, f64::INFINITY]).unwrap(), 2.0);
        assert!(median(&[]).is_err());
        assert!(median(&[f64::NAN]).is_err());
    }

    #[test]
    fn metric_records_round_trip_as_json_lines() {
        let records = vec![
            MetricRecord {
                metric: "valid_ppl".into(),
                value: 3.25,
                config_hash: "abc123def456".into(),
                seed: 7,
            },
            MetricRecord {
                metric: "distinct_2".into(),
                value: 0.5,
                config_hash: "abc123def456".into(),
                seed: 7,
            },
        ];
        let text = to_jsonl(&records).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_jsonl(&text).unwrap(), records);
        assert_eq!(to_jsonl(&records).unwrap(), text, "serialization is stable");

        let bad = vec![MetricRecord {
            metric: "ppl".into(),
            value: f64::INFINITY,
            config_hash: "x".into(),
            seed: 0,
        }];
        assert!(to_jsonl(&bad).is_err());
        assert!(parse_jsonl("not json\n").is_err());
    }
}
