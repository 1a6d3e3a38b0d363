//! Preference-optimization objectives.
//!
//! The DPO loss contrasts policy and reference log-ratios on a preference
//! pair:
//!
//! ```text
//! loss = -ln sigma( beta * (policy_logratio - ref_logratio) )
//! ```
//!
//! where `*_logratio = ln pi(y+|x) - ln pi(y-|x)`. Its gradient is a
//! per-example weighted sum, with weight
//!
//! ```text
//! lambda = sigma( beta * ref_logratio - beta * policy_logratio )
//! ```
//!
//! so the reference model acts as an example reweighter. The same weight
//! formula applies unchanged when a guiding reference supplies
//! `ref_logratio`; there is exactly one code path for both.
//!
//! The SimPO loss is reference-free: it contrasts length-normalized policy
//! log-probabilities against a target reward margin `gamma`.
//!
//! All sigmoids and log-sigmoids go through the stable softplus forms in
//! [`crate::scalar`]; `ln(sigma(z))` is never computed directly.

use serde::{Deserialize, Serialize};

use crate::data::PreferenceTriple;
use crate::error::{Error, Result};
use crate::model::{grad_log_prob, sequence_log_prob, ModelSnapshot, ParamView, PolicyModel};
use crate::scalar::{cast, softplus, to_f64, unit_sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
}

impl DpoConfig {
    pub fn new(beta: f64) -> Self {
        Self { beta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta: must be finite and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimpoConfig {
    pub beta: f64,
    /// Target reward margin.
    pub gamma: f64,
}

impl SimpoConfig {
    pub fn new(beta: f64, gamma: f64) -> Self {
        Self { beta, gamma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta: must be finite and positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma: must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-example lambda weights for one optimizer step. The step index is
/// assigned by the trainer when the record is emitted mid-run.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRecord<T: Scalar> {
    pub step: usize,
    pub lambdas: Vec<T>,
}

/// One preference pair's DPO terms: `loss = softplus(m)` and
/// `lambda = sigma(m)` for the shared argument
/// `m = beta * ref_logratio - beta * policy_logratio`.
pub fn dpo_pair_terms<T: Scalar>(policy_logratio: T, ref_logratio: T, beta: f64) -> (T, T) {
    let b = cast::<T>(beta);
    let m = b * ref_logratio - b * policy_logratio;
    (softplus(m), unit_sigmoid(m))
}

/// The example weight in the DPO gradient. Strictly inside (0, 1); exactly
/// 0.5 whenever the two log-ratios coincide. Works identically for an SFT
/// reference and a guiding reference; only the supplied `ref_logratio`
/// changes.
pub fn lambda_weight<T: Scalar>(ref_logratio: T, policy_logratio: T, beta: f64) -> Result<T> {
    if !ref_logratio.is_finite() || !policy_logratio.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidInput("lambda_weight: inputs must be finite".into()));
    }
    Ok(dpo_pair_terms(policy_logratio, ref_logratio, beta).1)
}

/// One SimPO pair's loss: `softplus(gamma - (beta/|y+|) lp+ + (beta/|y-|) lp-)`.
pub fn simpo_pair_loss<T: Scalar>(
    chosen_log_prob: T,
    chosen_len: usize,
    rejected_log_prob: T,
    rejected_len: usize,
    cfg: &SimpoConfig,
) -> Result<T> {
    if chosen_len == 0 || rejected_len == 0 {
        return Err(Error::InvalidInput("simpo: response lengths must be >= 1".into()));
    }
    let b = cast::<T>(cfg.beta);
    let z = b / cast(chosen_len as f64) * chosen_log_prob
        - b / cast(rejected_len as f64) * rejected_log_prob
        - cast(cfg.gamma);
    Ok(softplus(-z))
}

struct PairEval<T> {
    loss: T,
    lambda: T,
    grads: Option<(Vec<T>, Vec<T>)>,
}

fn eval_dpo_pair<T: Scalar>(
    policy: &PolicyModel<T>,
    reference: &ModelSnapshot<T>,
    triple: &PreferenceTriple,
    beta: f64,
    with_grad: bool,
) -> Result<PairEval<T>> {
    let (pol_pos, pol_neg, grads) = if with_grad {
        let (lp_pos, g_pos) = grad_log_prob(policy, &triple.prompt, &triple.chosen)?;
        let (lp_neg, g_neg) = grad_log_prob(policy, &triple.prompt, &triple.rejected)?;
        (lp_pos, lp_neg, Some((g_pos, g_neg)))
    } else {
        (
            sequence_log_prob(policy, &triple.prompt, &triple.chosen)?,
            sequence_log_prob(policy, &triple.prompt, &triple.rejected)?,
            None,
        )
    };
    let ref_pos = sequence_log_prob(reference, &triple.prompt, &triple.chosen)?;
    let ref_neg = sequence_log_prob(reference, &triple.prompt, &triple.rejected)?;
    let (loss, lambda) = dpo_pair_terms(pol_pos - pol_neg, ref_pos - ref_neg, beta);
    Ok(PairEval { loss, lambda, grads })
}

pub(crate) struct DpoBatchEval<T: Scalar> {
    pub loss: T,
    pub lambdas: Vec<T>,
    pub grad: Option<Vec<T>>,
}

pub(crate) fn dpo_batch_eval<T: Scalar>(
    policy: &PolicyModel<T>,
    reference: &ModelSnapshot<T>,
    batch: &[PreferenceTriple],
    beta: f64,
    with_grad: bool,
) -> Result<DpoBatchEval<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("batch must be nonempty".into()));
    }
    if policy.arch() != reference.arch() {
        return Err(Error::IncompatibleSnapshot(
            "policy and reference architectures differ".into(),
        ));
    }
    let n = cast::<T>(batch.len() as f64);
    let mut loss = T::zero();
    let mut lambdas = Vec::with_capacity(batch.len());
    let mut grad = if with_grad { Some(vec![T::zero(); policy.param_count()]) } else { None };

    for triple in batch {
        let pair = eval_dpo_pair(policy, reference, triple, beta, with_grad)?;
        loss = loss + pair.loss;
        lambdas.push(pair.lambda);
        if let (Some(total), Some((g_pos, g_neg))) = (grad.as_mut(), pair.grads) {
            // d loss_i / d theta = -beta * lambda_i * (grad lp+ - grad lp-)
            let w = cast::<T>(beta) * pair.lambda / n;
            for (t, (gp, gn)) in total.iter_mut().zip(g_pos.iter().zip(g_neg.iter())) {
                *t = *t - w * (*gp - *gn);
            }
        }
    }
    Ok(DpoBatchEval { loss: loss / n, lambdas, grad })
}

/// Mean DPO loss over the batch together with the per-example lambda
/// weights. The loss is strictly positive.
pub fn dpo_loss<T: Scalar>(
    policy: &PolicyModel<T>,
    reference: &ModelSnapshot<T>,
    batch: &[PreferenceTriple],
    cfg: &DpoConfig,
) -> Result<(T, LambdaRecord<T>)> {
    cfg.validate()?;
    let eval = dpo_batch_eval(policy, reference, batch, cfg.beta, false)?;
    Ok((eval.loss, LambdaRecord { step: 0, lambdas: eval.lambdas }))
}

/// The DPO gradient assembled from per-example score-function gradients:
/// `-beta * mean( lambda_i * grad(ln pi(y+|x) / pi(y-|x)) )`. Matches the
/// direct gradient of [`dpo_loss`].
pub fn dpo_analytic_gradient<T: Scalar>(
    policy: &PolicyModel<T>,
    reference: &ModelSnapshot<T>,
    batch: &[PreferenceTriple],
    cfg: &DpoConfig,
) -> Result<Vec<T>> {
    cfg.validate()?;
    let eval = dpo_batch_eval(policy, reference, batch, cfg.beta, true)?;
    Ok(eval.grad.expect("grad requested"))
}

pub(crate) struct SimpoBatchEval<T: Scalar> {
    pub loss: T,
    pub grad: Option<Vec<T>>,
}

pub(crate) fn simpo_batch_eval<T: Scalar>(
    policy: &PolicyModel<T>,
    batch: &[PreferenceTriple],
    cfg: &SimpoConfig,
    with_grad: bool,
) -> Result<SimpoBatchEval<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("batch must be nonempty".into()));
    }
    let vocab = &policy.arch().vocab;
    let n = cast::<T>(batch.len() as f64);
    let b = cast::<T>(cfg.beta);
    let mut loss = T::zero();
    let mut grad = if with_grad { Some(vec![T::zero(); policy.param_count()]) } else { None };

    for triple in batch {
        let len_pos = triple.chosen.content_len(vocab);
        let len_neg = triple.rejected.content_len(vocab);
        if len_pos == 0 || len_neg == 0 {
            return Err(Error::InvalidInput("simpo: response lengths must be >= 1".into()));
        }
        let coef_pos = b / cast(len_pos as f64);
        let coef_neg = b / cast(len_neg as f64);
        if let Some(total) = grad.as_mut() {
            let (lp_pos, g_pos) = grad_log_prob(policy, &triple.prompt, &triple.chosen)?;
            let (lp_neg, g_neg) = grad_log_prob(policy, &triple.prompt, &triple.rejected)?;
            let z = coef_pos * lp_pos - coef_neg * lp_neg - cast(cfg.gamma);
            loss = loss + softplus(-z);
            // d softplus(-z)/d theta = -sigma(-z) * dz/d theta
            let w = unit_sigmoid(-z) / n;
            for (t, (gp, gn)) in total.iter_mut().zip(g_pos.iter().zip(g_neg.iter())) {
                *t = *t - w * (coef_pos * *gp - coef_neg * *gn);
            }
        } else {
            let lp_pos = sequence_log_prob(policy, &triple.prompt, &triple.chosen)?;
            let lp_neg = sequence_log_prob(policy, &triple.prompt, &triple.rejected)?;
            loss = loss
                + simpo_pair_loss(lp_pos, len_pos, lp_neg, len_neg, cfg)?;
        }
    }
    Ok(SimpoBatchEval { loss: loss / n, grad })
}

/// Mean SimPO loss over the batch. No reference model is involved.
pub fn simpo_loss<T: Scalar>(
    policy: &PolicyModel<T>,
    batch: &[PreferenceTriple],
    cfg: &SimpoConfig,
) -> Result<T> {
    cfg.validate()?;
    Ok(simpo_batch_eval(policy, batch, cfg, false)?.loss)
}

/// Gradient of [`simpo_loss`] with respect to the policy parameters.
pub fn simpo_gradient<T: Scalar>(
    policy: &PolicyModel<T>,
    batch: &[PreferenceTriple],
    cfg: &SimpoConfig,
) -> Result<Vec<T>> {
    cfg.validate()?;
    Ok(simpo_batch_eval(policy, batch, cfg, true)?.grad.expect("grad requested"))
}

/// Central finite differences of a scalar loss with respect to every
/// parameter. Test oracle for the analytic gradients; deliberately
/// independent of the backward pass.
pub fn finite_difference_gradient<T: Scalar>(
    policy: &PolicyModel<T>,
    step: f64,
    mut loss_fn: impl FnMut(&PolicyModel<T>) -> Result<T>,
) -> Result<Vec<T>> {
    let h = cast::<T>(step);
    let two_h = cast::<T>(2.0 * step);
    let mut probe = policy.clone();
    let n = policy.param_count();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss_fn(&probe)?;
        probe.params_mut()[i] = orig - h;
        let down = loss_fn(&probe)?;
        probe.params_mut()[i] = orig;
        grad.push((up - down) / two_h);
    }
    Ok(grad)
}

/// Relative L2 distance between two gradient vectors.
pub fn relative_l2_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = to_f64(x) - to_f64(y);
        diff += d * d;
        let m = to_f64(x).max(to_f64(y).abs());
        norm += m * m;
    }
    if norm == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (diff / norm).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PreferenceDataset, PreferenceTriple, Provenance};
    use crate::model::{ArchConfig, Sequence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(toks: &[u32]) -> Sequence {
        Sequence::from(toks.to_vec())
    }

    fn micro_batch(seed: u64, n: usize) -> Vec<PreferenceTriple> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let prompt: Vec<u32> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(3..8)).collect();
                let chosen: Vec<u32> =
                    (0..rng.gen_range(2..5)).map(|_| rng.gen_range(3..8)).collect();
                let mut rejected: Vec<u32> =
                    (0..rng.gen_range(2..5)).map(|_| rng.gen_range(3..8)).collect();
                if rejected == chosen {
                    rejected.push(3);
                }
                PreferenceTriple::new(seq(&prompt), seq(&chosen), seq(&rejected), None).unwrap()
            })
            .collect()
    }

    pub(crate) fn micro_dataset(seed: u64, n: usize) -> PreferenceDataset {
        PreferenceDataset::new("micro", Provenance::Offline, micro_batch(seed, n))
    }

    #[test]
    fn lambda_weight_hand_cases() {
        // equal log-ratios give exactly one half, for any beta
        for &beta in &[0.005, 0.05, 1.0, 7.3] {
            let l = lambda_weight(0.37f64, 0.37, beta).unwrap();
            assert_eq!(l, 0.5);
        }
        let l = lambda_weight(1.0f64, 0.0, 1.0).unwrap();
        assert!((l - 0.7310585786300049).abs() < 1e-12);
        let l = lambda_weight(-10.0f64, 10.0, 0.05).unwrap();
        assert!((l - 0.2689414213699951).abs() < 1e-12);
        assert!(lambda_weight(f64::NAN, 0.0, 1.0).is_err());
        assert!(lambda_weight(f64::INFINITY, 0.0, 1.0).is_err());
    }

    #[test]
    fn lambda_weight_monotonicity() {
        // increasing in ref_logratio, decreasing in policy_logratio
        let mut prev = 0.0;
        for i in 0..20 {
            let r = -5.0 + i as f64 * 0.5;
            let l = lambda_weight(r, 0.0f64, 0.3).unwrap();
            assert!(l > prev);
            prev = l;
        }
        let mut prev = 1.0;
        for i in 0..20 {
            let p = -5.0 + i as f64 * 0.5;
            let l = lambda_weight(0.0f64, p, 0.3).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn dpo_pair_hand_values() {
        // beta 0.05, policy log-ratio 2, ref log-ratio 0:
        // loss = -ln sigma(0.1) = softplus(-0.1)
        let (loss, lambda) = dpo_pair_terms(2.0f64, 0.0, 0.05);
        assert!((loss - 0.6443966600735709).abs() < 1e-12);
        assert!((lambda - crate::scalar::sigmoid(-0.1f64)).abs() < 1e-12);
        // doubling beta doubles the sigmoid argument
        let (l1, _) = dpo_pair_terms(1.5f64, -0.5, 0.1);
        let (l2, _) = dpo_pair_terms(1.5f64, -0.5, 0.2);
        let z1 = 0.1 * (-0.5 - 1.5);
        let z2 = 0.2 * (-0.5 - 1.5);
        assert!((l1 - softplus(z1)).abs() < 1e-12);
        assert!((l2 - softplus(z2)).abs() < 1e-12);
        assert!((z2 / z1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dpo_loss_is_ln2_for_identical_snapshots() {
        let policy = PolicyModel::<f64>::init(ArchConfig::micro(), 3).unwrap();
        let reference = policy.snapshot();
        let batch = micro_batch(1, 8);
        let (loss, record) = dpo_loss(&policy, &reference, &batch, &DpoConfig::new(0.1)).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(record.lambdas.len(), 8);
        for l in &record.lambdas {
            assert!((l - 0.5).abs() < 1e-12);
        }
        assert!(loss > 0.0);
    }

    #[test]
    fn dpo_loss_decreases_in_margin() {
        // larger policy margin on the chosen response lowers the loss
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let margin = -2.0 + i as f64 * 0.5;
            let (loss, _) = dpo_pair_terms(margin, 0.0f64, 0.2);
            assert!(loss < prev);
            prev = loss;
        }
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let margin = -2.0 + i as f64 * 0.5;
            let loss =
                simpo_pair_loss(margin * 4.0, 4usize, 0.0, 4usize, &SimpoConfig::new(1.0, 0.3))
                    .unwrap();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn simpo_hand_values() {
        // equal length-normalized log-probs, gamma 0: ln 2
        let cfg = SimpoConfig::new(2.5, 0.0);
        let loss = simpo_pair_loss(-6.0f64, 3, -8.0, 4, &cfg).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        // equal length-normalized log-probs, gamma 1.2: softplus(1.2)
        let cfg = SimpoConfig::new(2.5, 1.2);
        let loss = simpo_pair_loss(-6.0f64, 3, -8.0, 4, &cfg).unwrap();
        assert!((loss - 1.4632824673380312).abs() < 1e-12);
        // duplicating every token contribution while doubling |y| is a no-op
        let cfg = SimpoConfig::new(2.0, 0.7);
        let a = simpo_pair_loss(-5.0f64, 5, -9.0, 3, &cfg).unwrap();
        let b = simpo_pair_loss(-10.0f64, 10, -18.0, 6, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let policy = PolicyModel::<f64>::init(ArchConfig::micro(), 17).unwrap();
        let reference = PolicyModel::<f64>::init(ArchConfig::micro(), 23).unwrap().snapshot();
        let batch = micro_batch(4, 4);
        let cfg = DpoConfig::new(0.2);
        let analytic = dpo_analytic_gradient(&policy, &reference, &batch, &cfg).unwrap();
        let fd = finite_difference_gradient(&policy, 1e-4, |m| {
            Ok(dpo_loss(m, &reference, &batch, &cfg)?.0)
        })
        .unwrap();
        let err = relative_l2_error(&analytic, &fd);
        assert!(err < 1e-4, "relative L2 error {err}");
    }

    #[test]
    fn simpo_gradient_matches_finite_differences() {
        let policy = PolicyModel::<f64>::init(ArchConfig::micro(), 29).unwrap();
        let batch = micro_batch(6, 4);
        let cfg = SimpoConfig::new(2.0, 0.5);
        let analytic = simpo_gradient(&policy, &batch, &cfg).unwrap();
        let fd = finite_difference_gradient(&policy, 1e-4, |m| simpo_loss(m, &batch, &cfg))
            .unwrap();
        let err = relative_l2_error(&analytic, &fd);
        assert!(err < 1e-4, "relative L2 error {err}");
    }

    #[test]
    fn symmetric_batch_has_exactly_zero_gradient() {
        // {(x,a,b), (x,b,a)} with policy == reference: contributions cancel
        let policy = PolicyModel::<f64>::init(ArchConfig::micro(), 5).unwrap();
        let reference = policy.snapshot();
        let x = seq(&[3, 4]);
        let a = seq(&[5, 6, 7]);
        let b = seq(&[7, 3]);
        let batch = vec![
            PreferenceTriple::new(x.clone(), a.clone(), b.clone(), None).unwrap(),
            PreferenceTriple::new(x, b, a, None).unwrap(),
        ];
        let grad = dpo_analytic_gradient(&policy, &reference, &batch, &DpoConfig::new(0.3)).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identical_snapshot_gradient_is_half_weighted_score_gradient() {
        let policy = PolicyModel::<f64>::init(ArchConfig::micro(), 8).unwrap();
        let reference = policy.snapshot();
        let batch = micro_batch(2, 3);
        let beta = 0.4;
        let grad = dpo_analytic_gradient(&policy, &reference, &batch, &DpoConfig::new(beta)).unwrap();
        // expected: -beta * 0.5 * mean(grad log-ratio)
        let mut expected = vec![0.0f64; policy.param_count()];
        for t in &batch {
            let (_, gp) = grad_log_prob(&policy, &t.prompt, &t.chosen).unwrap();
            let (_, gn) = grad_log_prob(&policy, &t.prompt, &t.rejected).unwrap();
            for i in 0..expected.len() {
                expected[i] -= beta * 0.5 * (gp[i] - gn[i]) / batch.len() as f64;
            }
        }
        for (g, e) in grad.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_approaches_half_as_beta_vanishes() {
        let mut prev_gap = f64::INFINITY;
        for &beta in &[1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001] {
            let l = lambda_weight(1.7f64, -0.9, beta).unwrap();
            let gap = (l - 0.5).abs();
            assert!(gap < prev_gap);
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-3);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let policy = PolicyModel::<f64>::init(ArchConfig::micro(), 1).unwrap();
        let reference = policy.snapshot();
        assert!(dpo_loss(&policy, &reference, &[], &DpoConfig::new(0.1)).is_err());
        assert!(simpo_loss(&policy, &[], &SimpoConfig::new(2.0, 1.0)).is_err());
    }
}
