//! Exhaustive enumeration over micro-instances: scores every EOS-terminated
//! sequence a model can emit, yielding ground truth for decoder optimality
//! and for partition-function bounds that beam subsets must respect.

use crate::losses::{ScoreFn, ScoredSequence};
use crate::model::Model;
use crate::numerics::kernels::{log_softmax_lane, log_sum_exp};
use crate::{Error, Result, BOS_ID, EOS_ID, N_RESERVED};

/// Caps the enumerable universe. `vocab_size` counts the full vocabulary
/// (reserved ids included); sequences are content tokens followed by EOS,
/// total length at most `max_len`.
#[derive(Debug, Clone, Copy)]
pub struct EnumerationBudget {
    pub max_len: usize,
    pub vocab_size: usize,
    pub cap: u64,
}

impl EnumerationBudget {
    pub fn new(max_len: usize, vocab_size: usize) -> EnumerationBudget {
        EnumerationBudget { max_len, vocab_size, cap: 1_000_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 1 {
            return Err(Error::Validation("enumeration max_len must be >= 1".into()));
        }
        if self.vocab_size <= N_RESERVED as usize {
            return Err(Error::Validation(format!(
                "enumeration needs at least one content token, vocab_size {} too small",
                self.vocab_size
            )));
        }
        let mut bound = 1u64;
        for _ in 0..self.max_len {
            bound = bound.saturating_mul(self.vocab_size as u64);
        }
        if bound > self.cap {
            return Err(Error::Validation(format!(
                "enumeration budget exceeded: {}^{} > cap {}",
                self.vocab_size, self.max_len, self.cap
            )));
        }
        Ok(())
    }
}

/// Scores every sequence of content tokens terminated by EOS whose total
/// length is at most `budget.max_len`, in lexicographic token order.
pub fn enumerate_scored(
    model: &Model,
    x: &[u32],
    score_fn: ScoreFn,
    budget: &EnumerationBudget,
) -> Result<Vec<ScoredSequence>> {
    budget.validate()?;
    if budget.vocab_size != model.cfg.vocab_size {
        return Err(Error::Validation(format!(
            "budget vocab_size {} != model vocab_size {}",
            budget.vocab_size, model.cfg.vocab_size
        )));
    }
    if budget.max_len > model.cfg.max_len {
        return Err(Error::Validation(format!(
            "enumeration max_len {} exceeds model capacity {}",
            budget.max_len, model.cfg.max_len
        )));
    }

    let memory = model.encode(x)?;
    let mut state = model.start_decoder(&memory)?;
    let logits = model.decode_step(&mut state, BOS_ID)?;

    let mut out = Vec::new();
    let mut prefix = Vec::new();
    let mut values = Vec::new();
    descend(model, score_fn, budget.max_len, &state, &logits, &mut prefix, &mut values, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn descend(
    model: &Model,
    score_fn: ScoreFn,
    max_len: usize,
    state: &crate::model::DecoderState,
    logits: &[f64],
    prefix: &mut Vec<u32>,
    values: &mut Vec<f64>,
    out: &mut Vec<ScoredSequence>,
) -> Result<()> {
    let step = match score_fn {
        ScoreFn::LogprobAvg => {
            let mut v = logits.to_vec();
            log_softmax_lane(&mut v);
            v
        }
        ScoreFn::LogitsAvg => logits.to_vec(),
    };

    let mut finished = prefix.clone();
    finished.push(EOS_ID);
    let mut finished_values = values.clone();
    finished_values.push(step[EOS_ID as usize]);
    out.push(ScoredSequence::new(finished, finished_values)?);

    if prefix.len() + 1 < max_len {
        for t in N_RESERVED..model.cfg.vocab_size as u32 {
            let mut next_state = state.clone();
            let next_logits = model.decode_step(&mut next_state, t)?;
            prefix.push(t);
            values.push(step[t as usize]);
            descend(model, score_fn, max_len, &next_state, &next_logits, prefix, values, out)?;
            prefix.pop();
            values.pop();
        }
    }
    Ok(())
}

/// Log-sum-exp over a complete score set: the log partition function of the
/// induced sequence-level softmax.
pub fn exact_partition(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("exact_partition needs at least one score".into()));
    }
    Ok(log_sum_exp(scores))
}

/// Highest-scoring sequence, ties broken lexicographically by tokens.
pub fn exact_argmax(sequences: &[ScoredSequence]) -> Result<&ScoredSequence> {
    sequences
        .iter()
        .min_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)))
        .ok_or_else(|| Error::Contract("exact_argmax over an empty sequence set".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::{beam_search, BeamConfig};
    use crate::losses::{score_logits_avg, score_logprob_avg, seq_ce_approx};
    use crate::model::ModelConfig;

    fn micro_model(vocab_size: usize, max_len: usize, seed: u64) -> Model {
        Model::init(
            ModelConfig {
                vocab_size,
                d_model: 8,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_ff: 16,
                max_len,
                dropout: 0.0,
                tie_embeddings: true,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn one_content_token_at_length_two_gives_two_sequences() {
        let m = micro_model(4, 4, 0);
        let budget = EnumerationBudget::new(2, 4);
        let seqs = enumerate_scored(&m, &[3], ScoreFn::LogprobAvg, &budget).unwrap();
        let tokens: Vec<&[u32]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        assert_eq!(tokens, vec![&[EOS_ID][..], &[3, EOS_ID][..]]);
    }

    #[test]
    fn three_content_tokens_at_length_four_give_forty_sequences() {
        let m = micro_model(6, 5, 1);
        let budget = EnumerationBudget::new(4, 6);
        let seqs = enumerate_scored(&m, &[4, 5], ScoreFn::LogprobAvg, &budget).unwrap();
        assert_eq!(seqs.len(), 40);
        let mut unique: Vec<&Vec<u32>> = seqs.iter().map(|s| &s.tokens).collect();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 40, "duplicate sequences in enumeration");
        for s in &seqs {
            assert_eq!(*s.tokens.last().unwrap(), EOS_ID);
            assert!(s.tokens.len() <= 4);
        }
    }

    #[test]
    fn enumerated_scores_match_teacher_forcing_scores() {
        let m = micro_model(5, 4, 7);
        let x = [3u32, 4];
        let budget = EnumerationBudget::new(4, 5);
        for score_fn in [ScoreFn::LogprobAvg, ScoreFn::LogitsAvg] {
            let seqs = enumerate_scored(&m, &x, score_fn, &budget).unwrap();
            for s in &seqs {
                let logits = m.forward_teacher_forcing(&x, &s.tokens).unwrap();
                let want = match score_fn {
                    ScoreFn::LogprobAvg => score_logprob_avg(&logits, &s.tokens).unwrap(),
                    ScoreFn::LogitsAvg => score_logits_avg(&logits, &s.tokens).unwrap(),
                };
                assert!(
                    (s.score - want).abs() < 1e-9,
                    "{score_fn} {:?}: {} vs {}",
                    s.tokens,
                    s.score,
                    want
                );
            }
        }
    }

    #[test]
    fn partition_dominates_every_beam_subset() {
        for seed in 0..20u64 {
            let m = micro_model(5, 4, seed);
            let x = [3u32];
            let budget = EnumerationBudget::new(4, 5);
            let seqs = enumerate_scored(&m, &x, ScoreFn::LogprobAvg, &budget).unwrap();
            let all_scores: Vec<f64> = seqs.iter().map(|s| s.score).collect();
            let log_z = exact_partition(&all_scores).unwrap();

            let cfg = BeamConfig::standard(3, 4, ScoreFn::LogprobAvg);
            let hyps = beam_search(&m, &x, &cfg).unwrap();
            let subset: Vec<f64> = hyps.iter().map(|h| h.score).collect();
            let approx = log_sum_exp(&subset);
            assert!(approx <= log_z + 1e-12, "seed {seed}: {approx} > {log_z}");
            if hyps.len() < seqs.len() {
                assert!(approx < log_z, "seed {seed}: strict bound violated");
            }

            // sequence loss comparison against the full universe
            let gt = &seqs[seqs.len() / 2];
            let exact_hyps: Vec<f64> =
                seqs.iter().filter(|s| s.tokens != gt.tokens).map(|s| s.score).collect();
            let l_exact = seq_ce_approx(gt.score, &exact_hyps).unwrap();
            let beam_hyps: Vec<f64> =
                hyps.iter().filter(|h| h.tokens != gt.tokens).map(|h| h.score).collect();
            if !beam_hyps.is_empty() {
                let l_approx = seq_ce_approx(gt.score, &beam_hyps).unwrap();
                assert!(l_approx <= l_exact + 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn saturating_beam_recovers_exact_argmax_and_partition() {
        for seed in 0..20u64 {
            let m = micro_model(5, 4, 100 + seed);
            let x = [4u32, 3];
            let budget = EnumerationBudget::new(4, 5);
            for score_fn in [ScoreFn::LogprobAvg, ScoreFn::LogitsAvg] {
                let seqs = enumerate_scored(&m, &x, score_fn, &budget).unwrap();
                let best = exact_argmax(&seqs).unwrap();
                let cfg = BeamConfig::standard(32, 4, score_fn);
                let hyps = beam_search(&m, &x, &cfg).unwrap();
                assert_eq!(hyps[0].tokens, best.tokens, "seed {seed} {score_fn}");
                assert!((hyps[0].score - best.score).abs() < 1e-10);

                assert_eq!(hyps.len(), seqs.len(), "saturating beam missed sequences");
                let beam_lse = log_sum_exp(&hyps.iter().map(|h| h.score).collect::<Vec<_>>());
                let exact =
                    exact_partition(&seqs.iter().map(|s| s.score).collect::<Vec<_>>()).unwrap();
                assert!((beam_lse - exact).abs() < 1e-10, "exhaustive beam must match");
            }
        }
    }

    #[test]
    fn argmax_is_deterministic_and_breaks_ties_lexicographically() {
        let a = ScoredSequence::new(vec![4, EOS_ID], vec![0.5, 0.5]).unwrap();
        let b = ScoredSequence::new(vec![3, EOS_ID], vec![0.4, 0.6]).unwrap();
        let c = ScoredSequence::new(vec![5, EOS_ID], vec![0.1, 0.2]).unwrap();
        let seqs = vec![a, b, c];
        let best = exact_argmax(&seqs).unwrap();
        assert_eq!(best.tokens, vec![3, EOS_ID]);
        assert!(exact_argmax(&[]).is_err());
    }

    #[test]
    fn partition_trivial_values() {
        assert_eq!(exact_partition(&[1.25]).unwrap(), 1.25);
        let two = exact_partition(&[0.3, 0.3]).unwrap();
        assert!((two - (0.3 + (2.0f64).ln())).abs() < 1e-12);
        assert!(matches!(exact_partition(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn budget_is_enforced() {
        assert!(EnumerationBudget::new(4, 5).validate().is_ok());
        let mut b = EnumerationBudget::new(12, 40);
        assert!(matches!(b.validate(), Err(Error::Validation(_))));
        b.cap = u64::MAX;
        assert!(b.validate().is_ok());
        assert!(EnumerationBudget::new(0, 5).validate().is_err());
        assert!(EnumerationBudget::new(2, 3).validate().is_err());

        let m = micro_model(5, 4, 0);
        let mismatched = EnumerationBudget::new(4, 6);
        assert!(matches!(
            enumerate_scored(&m, &[3], ScoreFn::LogprobAvg, &mismatched),
            Err(Error::Validation(_))
        ));
        let too_long = EnumerationBudget::new(9, 5);
        assert!(matches!(
            enumerate_scored(&m, &[3], ScoreFn::LogprobAvg, &too_long),
            Err(Error::Validation(_))
        ));
    }
}
