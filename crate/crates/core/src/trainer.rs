//! The optimization loop.
//!
//! Covers SFT pretraining of the toy policy and the preference-optimization
//! methods: plain DPO, SimPO, TR-DPO (hard reference reset every k steps) and
//! sDPO (staged DPO over a dataset split, each stage's reference being the
//! previous stage's output). Updates are Adam steps under a cosine schedule
//! with linear warmup. Every run is fully determined by (initial snapshot,
//! reference, dataset, config, seed).

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sequences_hash, PreferenceDataset, PreferenceTriple};
use crate::error::{Error, Result};
use crate::losses::{dpo_batch_eval, simpo_batch_eval, LambdaRecord};
use crate::model::{grad_log_prob, ContentHash, ModelSnapshot, ParamView, PolicyModel, Sequence};
use crate::scalar::{cast, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sft")]
    Sft,
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "simpo")]
    SimPo,
    #[serde(rename = "trdpo")]
    TrDpo,
    #[serde(rename = "sdpo")]
    SDpo,
}

impl Method {
    pub fn uses_reference(&self) -> bool {
        matches!(self, Method::Dpo | Method::TrDpo | Method::SDpo)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Sft => "sft",
            Method::Dpo => "dpo",
            Method::SimPo => "simpo",
            Method::TrDpo => "trdpo",
            Method::SDpo => "sdpo",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Method::Sft),
            "dpo" => Ok(Method::Dpo),
            "simpo" => Ok(Method::SimPo),
            "trdpo" => Ok(Method::TrDpo),
            "sdpo" => Ok(Method::SDpo),
            other => Err(Error::Config(format!(
                "method: unknown method '{other}' (expected sft|dpo|simpo|trdpo|sdpo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// SimPO target reward margin; ignored elsewhere.
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// TR-DPO: hard-reset cadence in optimizer steps.
    #[serde(default = "default_update_every")]
    pub tr_dpo_update_every: usize,
    /// sDPO: number of sequential stages over the dataset split.
    #[serde(default = "default_stages")]
    pub sdpo_stages: usize,
    /// Optional global-norm gradient clip; off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn default_beta() -> f64 {
    0.05
}
fn default_lr() -> f64 {
    5e-3
}
fn default_warmup() -> f64 {
    0.06
}
fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    16
}
fn default_update_every() -> usize {
    32
}
fn default_stages() -> usize {
    2
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            beta: default_beta(),
            gamma: 0.0,
            learning_rate: default_lr(),
            warmup_ratio: default_warmup(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            tr_dpo_update_every: default_update_every(),
            sdpo_stages: default_stages(),
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate: must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio: must be in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs: must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be >= 1".into()));
        }
        if self.method != Method::Sft && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta: must be finite and > 0".into()));
        }
        if self.method == Method::SimPo && !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma: must be finite and >= 0".into()));
        }
        if self.method == Method::TrDpo && self.tr_dpo_update_every == 0 {
            return Err(Error::Config("tr_dpo_update_every: must be >= 1".into()));
        }
        if self.method == Method::SDpo && self.sdpo_stages == 0 {
            return Err(Error::Config("sdpo_stages: must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("grad_clip: must be finite and > 0".into()));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `ceil(warmup_ratio * total_steps)`
/// steps, then cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidInput("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} out of range [0, {total_steps}]"
        )));
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let span = total_steps - warmup;
    if span == 0 {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with fixed default moments (0.9, 0.999, eps 1e-8).
struct Adam<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

impl<T: Scalar> Adam<T> {
    fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        self.t += 1;
        let b1 = cast::<T>(0.9);
        let b2 = cast::<T>(0.999);
        let eps = cast::<T>(1e-8);
        let c1 = cast::<T>(1.0 - 0.9f64.powi(self.t as i32));
        let c2 = cast::<T>(1.0 - 0.999f64.powi(self.t as i32));
        let lr = cast::<T>(lr);
        let one = T::one();
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (one - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (one - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

fn clip_grad<T: Scalar>(grad: &mut [T], max_norm: f64) {
    let norm = grad.iter().map(|&g| to_f64(g) * to_f64(g)).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = cast::<T>(max_norm / norm);
        for g in grad.iter_mut() {
            *g = *g * scale;
        }
    }
}

/// Seeded permutation of the dataset indices for one epoch, chunked into
/// batches. Every triple appears exactly once; the last batch may be short.
pub fn make_batches(
    dataset: &PreferenceDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    index_batches(dataset.len(), batch_size, seed, epoch)
}

fn index_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let epoch_seed = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Reference snapshot active from `step` onward (initial assignment, TR-DPO
/// hard resets, sDPO stage handoffs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefEvent {
    pub step: usize,
    pub reference: ContentHash,
}

#[derive(Debug, Clone)]
pub struct TrainReport<T: Scalar> {
    pub final_snapshot: ModelSnapshot<T>,
    pub initial_policy: ContentHash,
    pub dataset_hash: ContentHash,
    pub loss_curve: Vec<LossPoint>,
    /// Per-step example weights; empty for SFT and SimPO.
    pub lambda_records: Vec<LambdaRecord<T>>,
    pub ref_events: Vec<RefEvent>,
    /// sDPO: final snapshot hash of each stage, in order.
    pub stage_outputs: Vec<ContentHash>,
    pub config: TrainConfig,
    pub wall_time_secs: f64,
}

struct RunAccum<T: Scalar> {
    loss_curve: Vec<LossPoint>,
    lambda_records: Vec<LambdaRecord<T>>,
    ref_events: Vec<RefEvent>,
}

fn preference_stage<T: Scalar>(
    policy: &mut PolicyModel<T>,
    reference: &mut Option<ModelSnapshot<T>>,
    dataset: &PreferenceDataset,
    cfg: &TrainConfig,
    shuffle_seed: u64,
    step_offset: usize,
    acc: &mut RunAccum<T>,
) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("cannot train on an empty dataset".into()));
    }
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(policy.param_count());
    if let Some(r) = reference.as_ref() {
        acc.ref_events.push(RefEvent { step: step_offset, reference: r.content_hash() });
    }

    let mut local_step = 0usize;
    for epoch in 0..cfg.epochs {
        for batch_idx in make_batches(dataset, cfg.batch_size, shuffle_seed, epoch)? {
            let batch: Vec<PreferenceTriple> =
                batch_idx.iter().map(|&i| dataset.triples()[i].clone()).collect();
            let lr = cosine_lr(local_step, total_steps, cfg.learning_rate, cfg.warmup_ratio)?;
            let step = step_offset + local_step;

            let (loss, mut grad) = match cfg.method {
                Method::SimPo => {
                    let eval = simpo_batch_eval(
                        policy,
                        &batch,
                        &crate::losses::SimpoConfig::new(cfg.beta, cfg.gamma),
                        true,
                    )?;
                    (eval.loss, eval.grad.expect("grad requested"))
                }
                Method::Dpo | Method::TrDpo | Method::SDpo => {
                    let reference = reference.as_ref().expect("reference checked by caller");
                    let eval = dpo_batch_eval(policy, reference, &batch, cfg.beta, true)?;
                    acc.lambda_records.push(LambdaRecord { step, lambdas: eval.lambdas });
                    (eval.loss, eval.grad.expect("grad requested"))
                }
                Method::Sft => unreachable!("sft handled by sft_train"),
            };

            if let Some(c) = cfg.grad_clip {
                clip_grad(&mut grad, c);
            }
            acc.loss_curve.push(LossPoint { step, lr, loss: to_f64(loss) });
            adam.step(policy.params_mut(), &grad, lr);
            local_step += 1;

            // TR-DPO hard update: after the update at step s, the batch at
            // s+1 sees reference == policy, so its lambdas are exactly 0.5.
            if cfg.method == Method::TrDpo
                && local_step % cfg.tr_dpo_update_every == 0
                && local_step < total_steps
            {
                let snap = policy.snapshot();
                acc.ref_events
                    .push(RefEvent { step: step_offset + local_step, reference: snap.content_hash() });
                *reference = Some(snap);
            }
        }
    }
    Ok(local_step)
}

/// Preference-optimization entry point. DPO, TR-DPO and sDPO require a
/// reference snapshot; SimPO requires `reference == None`.
pub fn train_preference<T: Scalar>(
    policy_init: &ModelSnapshot<T>,
    reference: Option<&ModelSnapshot<T>>,
    dataset: &PreferenceDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("cannot train on an empty dataset".into()));
    }
    match cfg.method {
        Method::Sft => {
            return Err(Error::Config("method: use sft_train for SFT".into()));
        }
        Method::SimPo => {
            if reference.is_some() {
                return Err(Error::Config(
                    "method: simpo is reference-free; no reference snapshot may be supplied".into(),
                ));
            }
        }
        Method::Dpo | Method::TrDpo | Method::SDpo => {
            let r = reference.ok_or_else(|| {
                Error::Config(format!("method: {} requires a reference snapshot", cfg.method))
            })?;
            if r.arch() != policy_init.arch() {
                return Err(Error::IncompatibleSnapshot(
                    "policy and reference architectures differ".into(),
                ));
            }
        }
    }

    let start = Instant::now();
    let mut policy = PolicyModel::restore(policy_init);
    let mut acc = RunAccum { loss_curve: Vec::new(), lambda_records: Vec::new(), ref_events: Vec::new() };
    let mut stage_outputs = Vec::new();

    if cfg.method == Method::SDpo {
        let parts = dataset.split(cfg.sdpo_stages)?;
        let mut stage_ref = reference.cloned();
        let mut offset = 0usize;
        for (i, part) in parts.iter().enumerate() {
            let shuffle_seed = cfg.seed ^ (i as u64).wrapping_mul(0xa076_1d64_78bd_642f);
            offset += preference_stage(
                &mut policy,
                &mut stage_ref,
                part,
                cfg,
                shuffle_seed,
                offset,
                &mut acc,
            )?;
            let out = policy.snapshot();
            stage_outputs.push(out.content_hash());
            stage_ref = Some(out);
        }
    } else {
        let mut run_ref = reference.cloned();
        preference_stage(&mut policy, &mut run_ref, dataset, cfg, cfg.seed, 0, &mut acc)?;
    }

    Ok(TrainReport {
        final_snapshot: policy.snapshot(),
        initial_policy: policy_init.content_hash(),
        dataset_hash: dataset.content_hash(),
        loss_curve: acc.loss_curve,
        lambda_records: acc.lambda_records,
        ref_events: acc.ref_events,
        stage_outputs,
        config: cfg.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Next-token cross-entropy training on a corpus of sequences. The reported
/// loss is the mean per-token negative log-likelihood.
pub fn sft_train<T: Scalar>(
    init: &ModelSnapshot<T>,
    corpus: &[Sequence],
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if cfg.method != Method::Sft {
        return Err(Error::Config("method: sft_train requires method sft".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("sft corpus is empty".into()));
    }
    for s in corpus {
        s.validate_in(&init.arch().vocab)?;
        if s.is_empty() {
            return Err(Error::InvalidInput("sft corpus contains an empty sequence".into()));
        }
    }

    let start = Instant::now();
    let mut policy = PolicyModel::restore(init);
    let mut adam = Adam::new(policy.param_count());
    let n = corpus.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut loss_curve = Vec::with_capacity(total_steps);
    let empty_prompt = Sequence::empty();

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for batch in index_batches(n, cfg.batch_size, cfg.seed, epoch)? {
            let lr = cosine_lr(step, total_steps, cfg.learning_rate, cfg.warmup_ratio)?;
            let mut grad = vec![T::zero(); policy.param_count()];
            let mut log_prob_sum = T::zero();
            let mut token_count = 0usize;
            for &i in &batch {
                let (lp, g) = grad_log_prob(&policy, &empty_prompt, &corpus[i])?;
                log_prob_sum = log_prob_sum + lp;
                token_count += corpus[i].len();
                for (t, &gi) in grad.iter_mut().zip(g.iter()) {
                    *t = *t - gi;
                }
            }
            let scale = cast::<T>(1.0 / token_count as f64);
            for g in grad.iter_mut() {
                *g = *g * scale;
            }
            let loss = -log_prob_sum * scale;
            if let Some(c) = cfg.grad_clip {
                clip_grad(&mut grad, c);
            }
            loss_curve.push(LossPoint { step, lr, loss: to_f64(loss) });
            adam.step(policy.params_mut(), &grad, lr);
            step += 1;
        }
    }

    Ok(TrainReport {
        final_snapshot: policy.snapshot(),
        initial_policy: init.content_hash(),
        dataset_hash: sequences_hash(corpus),
        loss_curve,
        lambda_records: Vec::new(),
        ref_events: Vec::new(),
        stage_outputs: Vec::new(),
        config: cfg.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Report directory serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct ReportManifest<'a> {
    final_snapshot: ContentHash,
    initial_policy: ContentHash,
    dataset_hash: ContentHash,
    ref_events: &'a [RefEvent],
    stage_outputs: &'a [ContentHash],
    optimizer: &'static str,
    total_steps: usize,
    wall_time_secs: f64,
}

impl TrainReport<f32> {
    /// Serialize as a run directory: config.json, manifest.json,
    /// snapshots/final.snap, csv/loss_curve.csv, csv/lambdas.csv.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("snapshots"))?;
        std::fs::create_dir_all(dir.join("csv"))?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&self.config)?)?;
        let manifest = ReportManifest {
            final_snapshot: self.final_snapshot.content_hash(),
            initial_policy: self.initial_policy,
            dataset_hash: self.dataset_hash,
            ref_events: &self.ref_events,
            stage_outputs: &self.stage_outputs,
            optimizer: "adam(0.9, 0.999, 1e-8)",
            total_steps: self.loss_curve.len(),
            wall_time_secs: self.wall_time_secs,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        self.final_snapshot.save(&dir.join("snapshots").join("final.snap"))?;
        write_loss_curve_csv(&self.loss_curve, &dir.join("csv").join("loss_curve.csv"))?;
        crate::telemetry::export_lambda_csv(&self.lambda_records, &dir.join("csv").join("lambdas.csv"))?;
        Ok(())
    }
}

pub fn write_loss_curve_csv(curve: &[LossPoint], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,lr,loss")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.step, p.lr, p.loss)?;
    }
    w.flush()?;
    Ok(())
}
