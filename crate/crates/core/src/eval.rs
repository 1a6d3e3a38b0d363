//! Synthetic reward oracle and pairwise win-rate evaluation.
//!
//! The oracle is the desk-scale stand-in for an external reward model or
//! judge. The default rubric rewards responses that echo prompt-dependent
//! target tokens and mildly penalizes length beyond a cap, so preference
//! learning has a learnable signal and length effects stay observable.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GenerationConfig;
use crate::error::{Error, Result};
use crate::model::{sample_response, ModelSnapshot, ParamView, Sequence, TokenId, Vocabulary};
use crate::scalar::Scalar;

/// A deterministic, total scoring rule r(x, y).
pub trait RewardOracle: Send + Sync {
    fn score(&self, prompt: &Sequence, response: &Sequence) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_match_weight")]
    pub match_weight: f64,
    #[serde(default = "default_length_penalty")]
    pub length_penalty: f64,
    #[serde(default = "default_length_cap")]
    pub length_cap: usize,
}

fn default_match_weight() -> f64 {
    1.0
}
fn default_length_penalty() -> f64 {
    0.25
}
fn default_length_cap() -> usize {
    12
}

impl Default for RubricConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            match_weight: default_match_weight(),
            length_penalty: default_length_penalty(),
            length_cap: default_length_cap(),
        }
    }
}

/// Target-pattern rubric: the seed fixes a permutation of the content
/// alphabet; a prompt's target set is the image of its tokens under that
/// permutation. Score = match_weight * (response tokens hitting the target
/// set, with multiplicity) - length_penalty * max(0, |y| - length_cap).
pub struct RubricOracle {
    cfg: RubricConfig,
    vocab: Vocabulary,
    target_map: HashMap<TokenId, TokenId>,
}

impl RubricOracle {
    pub fn new(vocab: Vocabulary, cfg: RubricConfig) -> Self {
        let content: Vec<TokenId> = vocab.content_tokens().collect();
        let mut shuffled = content.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffled.shuffle(&mut rng);
        let target_map = content.into_iter().zip(shuffled).collect();
        Self { cfg, vocab, target_map }
    }

    pub fn config(&self) -> &RubricConfig {
        &self.cfg
    }
}

impl RewardOracle for RubricOracle {
    fn score(&self, prompt: &Sequence, response: &Sequence) -> Result<f64> {
        let targets: std::collections::HashSet<TokenId> = prompt
            .tokens()
            .iter()
            .filter(|&&t| !self.vocab.is_special(t))
            .filter_map(|t| self.target_map.get(t).copied())
            .collect();
        let matches = response
            .tokens()
            .iter()
            .filter(|&&t| !self.vocab.is_special(t) && targets.contains(&t))
            .count();
        let len = response.content_len(&self.vocab);
        let over = len.saturating_sub(self.cfg.length_cap);
        Ok(self.cfg.match_weight * matches as f64 - self.cfg.length_penalty * over as f64)
    }
}

/// Pairwise comparison outcome over a prompt set. Raw counts decompose the
/// prompt set exactly (`wins_a + wins_b + ties == n_prompts`); the headline
/// `win_rate`/`loss_rate` fold ties in at half weight each, which keeps
/// `win_rate(a,b) + win_rate(b,a) == 1` exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_prompts: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub win_rate: f64,
    pub loss_rate: f64,
    pub tie_rate: f64,
    pub avg_len_a: f64,
    pub avg_len_b: f64,
    pub decoding: GenerationConfig,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "win_rate={:.4} tie_rate={:.4} avg_len_a={:.2} avg_len_b={:.2} n_prompts={}",
            self.win_rate, self.tie_rate, self.avg_len_a, self.avg_len_b, self.n_prompts
        )
    }
}

fn prompt_seed(decoding: &GenerationConfig, idx: usize) -> u64 {
    decoding.seed ^ idx as u64
}

/// Decode one response per model per prompt (same derived seed for both
/// sides) and compare oracle scores. Ties contribute 0.5 to the win rate.
pub fn pairwise_win_rate<T: Scalar>(
    model_a: &ModelSnapshot<T>,
    model_b: &ModelSnapshot<T>,
    prompts: &[Sequence],
    oracle: &dyn RewardOracle,
    decoding: &GenerationConfig,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("prompts must be nonempty".into()));
    }
    decoding.validate()?;
    let vocab = model_a.arch().vocab;

    let mut wins_a = 0usize;
    let mut wins_b = 0usize;
    let mut ties = 0usize;
    let mut len_a = 0usize;
    let mut len_b = 0usize;
    for (idx, prompt) in prompts.iter().enumerate() {
        let seed = prompt_seed(decoding, idx);
        let resp_a =
            sample_response(model_a, prompt, decoding.temperature, decoding.top_p, decoding.max_len, seed)?;
        let resp_b =
            sample_response(model_b, prompt, decoding.temperature, decoding.top_p, decoding.max_len, seed)?;
        let score_a = oracle.score(prompt, &resp_a)?;
        let score_b = oracle.score(prompt, &resp_b)?;
        if score_a > score_b {
            wins_a += 1;
        } else if score_b > score_a {
            wins_b += 1;
        } else {
            ties += 1;
        }
        len_a += resp_a.content_len(&vocab);
        len_b += resp_b.content_len(&vocab);
    }

    let n = prompts.len() as f64;
    Ok(EvalReport {
        n_prompts: prompts.len(),
        wins_a,
        wins_b,
        ties,
        win_rate: (wins_a as f64 + 0.5 * ties as f64) / n,
        loss_rate: (wins_b as f64 + 0.5 * ties as f64) / n,
        tie_rate: ties as f64 / n,
        avg_len_a: len_a as f64 / n,
        avg_len_b: len_b as f64 / n,
        decoding: decoding.clone(),
    })
}

/// Mean content-token count of decoded responses over the prompt set, using
/// the same per-prompt seed derivation as [`pairwise_win_rate`].
pub fn avg_response_length<T: Scalar>(
    model: &ModelSnapshot<T>,
    prompts: &[Sequence],
    decoding: &GenerationConfig,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("prompts must be nonempty".into()));
    }
    decoding.validate()?;
    let vocab = model.arch().vocab;
    let mut total = 0usize;
    for (idx, prompt) in prompts.iter().enumerate() {
        let seed = prompt_seed(decoding, idx);
        let resp =
            sample_response(model, prompt, decoding.temperature, decoding.top_p, decoding.max_len, seed)?;
        total += resp.content_len(&vocab);
    }
    Ok(total as f64 / prompts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_prompts;
    use crate::model::{ArchConfig, PolicyModel};

    fn seq(toks: &[u32]) -> Sequence {
        Sequence::from(toks.to_vec())
    }

    #[test]
    fn oracle_is_deterministic() {
        let vocab = Vocabulary::default();
        let oracle = RubricOracle::new(vocab, RubricConfig::default());
        let p = seq(&[3, 4, 5]);
        let r = seq(&[6, 7, 8, 9]);
        assert_eq!(oracle.score(&p, &r).unwrap(), oracle.score(&p, &r).unwrap());
    }

    #[test]
    fn rubric_rewards_target_matches_monotonically() {
        // pure target-count rubric: more hits, strictly higher score
        let vocab = Vocabulary::default();
        let cfg = RubricConfig { length_penalty: 0.0, ..Default::default() };
        let oracle = RubricOracle::new(vocab, cfg);
        let prompt = seq(&[3, 4, 5]);
        let target: Vec<u32> = prompt
            .tokens()
            .iter()
            .map(|t| oracle.target_map[t])
            .collect();
        let three_hits = seq(&[target[0], target[1], target[2], 3]);
        let one_hit = seq(&[target[0], 3, 3, 3]);
        assert!(
            oracle.score(&prompt, &three_hits).unwrap() > oracle.score(&prompt, &one_hit).unwrap()
        );
    }

    #[test]
    fn rubric_penalizes_length_beyond_cap() {
        let vocab = Vocabulary::default();
        let cfg = RubricConfig { length_cap: 4, length_penalty: 0.5, ..Default::default() };
        let oracle = RubricOracle::new(vocab, cfg);
        let prompt = seq(&[3]);
        let short = seq(&[4; 4]);
        let long = seq(&[4; 8]);
        let delta = oracle.score(&prompt, &short).unwrap() - oracle.score(&prompt, &long).unwrap();
        assert_eq!(delta, 0.5 * 4.0);
    }

    #[test]
    fn model_vs_itself_is_all_ties() {
        let arch = ArchConfig::default();
        let snap = PolicyModel::<f32>::init(arch.clone(), 3).unwrap().snapshot();
        let prompts = synthetic_prompts(&arch.vocab, 8, 1);
        let oracle = RubricOracle::new(arch.vocab, RubricConfig::default());
        let decoding = GenerationConfig { temperature: 0.0, ..GenerationConfig::eval_default() };
        let report = pairwise_win_rate(&snap, &snap, &prompts, &oracle, &decoding).unwrap();
        assert_eq!(report.tie_rate, 1.0);
        assert_eq!(report.win_rate, 0.5);
        assert_eq!(report.avg_len_a, report.avg_len_b);
    }

    #[test]
    fn counting_rule_and_rate_identities() {
        // model a greedy-emits token 3, model b token 4; the scripted oracle
        // then forces exactly 3 wins, 1 loss, 1 tie over 5 prompts
        struct Scripted;
        impl RewardOracle for Scripted {
            fn score(&self, prompt: &Sequence, response: &Sequence) -> Result<f64> {
                let has3 = response.tokens().contains(&3);
                let has4 = response.tokens().contains(&4);
                Ok(match prompt.tokens()[0] {
                    3 | 4 | 5 => f64::from(has3),
                    6 => f64::from(has4),
                    _ => 0.0,
                })
            }
        }
        let arch = ArchConfig::micro();
        let mut a = PolicyModel::<f64>::init(arch.clone(), 0).unwrap();
        let bias = a.output_bias_range();
        let mut pa = vec![0.0; arch.param_count()];
        pa[bias.start + 3] = 8.0;
        a.set_params(pa).unwrap();
        let mut b = PolicyModel::<f64>::init(arch.clone(), 0).unwrap();
        let mut pb = vec![0.0; arch.param_count()];
        pb[bias.start + 4] = 8.0;
        b.set_params(pb).unwrap();
        let prompts = vec![seq(&[3]), seq(&[4]), seq(&[5]), seq(&[6]), seq(&[7])];
        let decoding =
            GenerationConfig { temperature: 0.0, max_len: 4, ..GenerationConfig::eval_default() };
        let report =
            pairwise_win_rate(&a.snapshot(), &b.snapshot(), &prompts, &Scripted, &decoding).unwrap();
        assert_eq!((report.wins_a, report.wins_b, report.ties), (3, 1, 1));
        assert_eq!(report.win_rate, (3.0 + 0.5) / 5.0);
        assert_eq!(report.tie_rate, 0.2);
        // raw rates decompose to exactly one
        let raw_sum = (report.wins_a + report.wins_b + report.ties) as f64 / 5.0;
        assert!((raw_sum - 1.0).abs() < 1e-12);
        // folded rates are antisymmetric
        let reverse =
            pairwise_win_rate(&b.snapshot(), &a.snapshot(), &prompts, &Scripted, &decoding).unwrap();
        assert_eq!(report.win_rate + reverse.win_rate, 1.0);
    }

    #[test]
    fn strict_preference_gives_win_rate_one() {
        struct PreferLong;
        impl RewardOracle for PreferLong {
            fn score(&self, _p: &Sequence, r: &Sequence) -> Result<f64> {
                Ok(r.len() as f64)
            }
        }
        // hand-set output biases so model a strongly favors content token 3
        // and model b favors EOS, making b's responses shorter
        let arch = ArchConfig::micro();
        let mut a = PolicyModel::<f64>::init(arch.clone(), 0).unwrap();
        let mut pa = vec![0.0; arch.param_count()];
        let bias = a.output_bias_range();
        pa[bias.start + 3] = 8.0;
        a.set_params(pa).unwrap();
        let mut b = PolicyModel::<f64>::init(arch.clone(), 0).unwrap();
        let mut pb = vec![0.0; arch.param_count()];
        pb[bias.start + arch.vocab.eos as usize] = 8.0;
        b.set_params(pb).unwrap();
        let prompts = vec![seq(&[4]), seq(&[5]), seq(&[6])];
        let decoding = GenerationConfig { temperature: 0.0, max_len: 6, ..GenerationConfig::eval_default() };
        let report =
            pairwise_win_rate(&a.snapshot(), &b.snapshot(), &prompts, &PreferLong, &decoding).unwrap();
        assert_eq!(report.win_rate, 1.0);
        assert_eq!(report.ties, 0);
        // b emits EOS immediately after the forced first token
        assert_eq!(report.avg_len_b, 1.0);
        assert_eq!(report.avg_len_a, 6.0);
    }

    #[test]
    fn antisymmetry_under_shared_seeds() {
        let arch = ArchConfig::default();
        let a = PolicyModel::<f32>::init(arch.clone(), 21).unwrap().snapshot();
        let b = PolicyModel::<f32>::init(arch.clone(), 22).unwrap().snapshot();
        let prompts = synthetic_prompts(&arch.vocab, 12, 7);
        let oracle = RubricOracle::new(arch.vocab, RubricConfig::default());
        let decoding = GenerationConfig { seed: 9, ..GenerationConfig::eval_default() };
        let ab = pairwise_win_rate(&a, &b, &prompts, &oracle, &decoding).unwrap();
        let ba = pairwise_win_rate(&b, &a, &prompts, &oracle, &decoding).unwrap();
        assert_eq!(ab.win_rate + ba.win_rate, 1.0);
        assert_eq!(ab.ties, ba.ties);
        assert_eq!(ab.avg_len_a, ba.avg_len_b);
    }

    #[test]
    fn avg_length_matches_decoded_lengths() {
        let arch = ArchConfig::default();
        let snap = PolicyModel::<f32>::init(arch.clone(), 2).unwrap().snapshot();
        let prompts = synthetic_prompts(&arch.vocab, 5, 3);
        let decoding = GenerationConfig { seed: 13, ..GenerationConfig::eval_default() };
        let avg = avg_response_length(&snap, &prompts, &decoding).unwrap();
        let mut manual = 0.0;
        for (i, p) in prompts.iter().enumerate() {
            let r = sample_response(
                &snap,
                p,
                decoding.temperature,
                decoding.top_p,
                decoding.max_len,
                decoding.seed ^ i as u64,
            )
            .unwrap();
            manual += r.content_len(&arch.vocab) as f64;
        }
        assert_eq!(avg, manual / prompts.len() as f64);
    }
}
