//! Guided re-optimization pipeline.
//!
//! Four steps: (1) instantiate the initial reference — the SFT snapshot for
//! reference-based methods, none for SimPO; (2) run a first round of
//! preference optimization from the SFT snapshot; (3) reset the resulting
//! model as the guiding reference; (4) re-optimize the *original* SFT
//! snapshot with DPO against that guiding reference, on the same dataset.
//!
//! The final model is never initialized from the first-round output; the
//! first round contributes only through the reference side of the loss,
//! where it reweights examples via lambda.

use serde::Serialize;

use crate::data::PreferenceDataset;
use crate::error::{Error, Result};
use crate::model::{ContentHash, ModelSnapshot};
use crate::scalar::Scalar;
use crate::trainer::{train_preference, Method, TrainConfig, TrainReport};

#[derive(Debug, Clone)]
pub struct PreDpoPlan<T: Scalar> {
    /// The SFT snapshot: initial policy of both rounds.
    pub sft: ModelSnapshot<T>,
    /// First-round method and hyperparameters (dpo, simpo, trdpo or sdpo).
    pub first_config: TrainConfig,
    /// Second-round hyperparameters; method must be dpo. The two rounds may
    /// use different beta and learning rates.
    pub second_config: TrainConfig,
    pub dataset: PreferenceDataset,
}

impl<T: Scalar> PreDpoPlan<T> {
    /// Plan with a derived second round: plain DPO with the first round's
    /// hyperparameters and `seed + 1`.
    pub fn new(sft: ModelSnapshot<T>, first_config: TrainConfig, dataset: PreferenceDataset) -> Self {
        let second_config = TrainConfig {
            method: Method::Dpo,
            seed: first_config.seed.wrapping_add(1),
            ..first_config.clone()
        };
        Self { sft, first_config, second_config, dataset }
    }

    pub fn validate(&self) -> Result<()> {
        self.first_config.validate()?;
        self.second_config.validate()?;
        if self.first_config.method == Method::Sft {
            return Err(Error::Config(
                "first_config.method: must be a preference-optimization method".into(),
            ));
        }
        if self.second_config.method != Method::Dpo {
            return Err(Error::Config("second_config.method: must be dpo".into()));
        }
        if self.dataset.is_empty() {
            return Err(Error::EmptyDataset("pre-dpo plan has an empty dataset".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PreDpoResult<T: Scalar> {
    /// First-round output.
    pub pi_m: ModelSnapshot<T>,
    /// The guiding reference; always identical to `pi_m`.
    pub pi_guide: ModelSnapshot<T>,
    /// Final re-optimized model.
    pub pi_final: ModelSnapshot<T>,
    pub first_report: TrainReport<T>,
    pub second_report: TrainReport<T>,
}

/// Step 4 in isolation: DPO on the SFT snapshot against a given guiding
/// reference. With `guide == sft` this degenerates to vanilla DPO exactly.
pub fn reoptimize_from<T: Scalar>(
    sft: &ModelSnapshot<T>,
    guide: &ModelSnapshot<T>,
    dataset: &PreferenceDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    if cfg.method != Method::Dpo {
        return Err(Error::Config("method: re-optimization round must be dpo".into()));
    }
    train_preference(sft, Some(guide), dataset, cfg)
}

pub fn run_pre_dpo<T: Scalar>(plan: &PreDpoPlan<T>) -> Result<PreDpoResult<T>> {
    plan.validate()?;

    // Step 1: initial reference
    let first_ref = if plan.first_config.method.uses_reference() {
        Some(&plan.sft)
    } else {
        None
    };
    // Step 2: first round of preference optimization
    let first_report = train_preference(&plan.sft, first_ref, &plan.dataset, &plan.first_config)?;
    let pi_m = first_report.final_snapshot.clone();
    // Step 3: the optimized model becomes the guiding reference
    let pi_guide = pi_m.clone();
    // Step 4: re-optimize the SFT snapshot on the same dataset
    let second_report = reoptimize_from(&plan.sft, &pi_guide, &plan.dataset, &plan.second_config)?;
    let pi_final = second_report.final_snapshot.clone();

    Ok(PreDpoResult { pi_m, pi_guide, pi_final, first_report, second_report })
}

/// A further round: the previous result's final model becomes the guide and
/// the original SFT snapshot is re-optimized once more. The plan must carry
/// the same SFT snapshot and dataset as the previous round.
pub fn run_pre_dpo_round2<T: Scalar>(
    prev: &PreDpoResult<T>,
    plan: &PreDpoPlan<T>,
) -> Result<PreDpoResult<T>> {
    plan.validate()?;
    if plan.sft.content_hash() != prev.second_report.initial_policy {
        return Err(Error::Config("sft: round-2 plan must reuse the round-1 SFT snapshot".into()));
    }
    if plan.dataset.content_hash() != prev.second_report.dataset_hash {
        return Err(Error::Config("dataset: round-2 plan must reuse the round-1 dataset".into()));
    }
    let pi_guide = prev.pi_final.clone();
    let second_report = reoptimize_from(&plan.sft, &pi_guide, &plan.dataset, &plan.second_config)?;
    let pi_final = second_report.final_snapshot.clone();
    Ok(PreDpoResult {
        pi_m: prev.pi_final.clone(),
        pi_guide,
        pi_final,
        first_report: prev.second_report.clone(),
        second_report,
    })
}

/// Snapshot hashes for the three pipeline roles plus run provenance.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineManifest {
    pub sft_hash: ContentHash,
    pub guide_hash: ContentHash,
    pub final_hash: ContentHash,
    pub first_method: Method,
    /// `None` when the first round ran reference-free (SimPO).
    pub first_reference: Option<ContentHash>,
    pub dataset_hash: ContentHash,
    pub first_seed: u64,
    pub second_seed: u64,
}

pub fn manifest<T: Scalar>(plan: &PreDpoPlan<T>, result: &PreDpoResult<T>) -> PipelineManifest {
    PipelineManifest {
        sft_hash: plan.sft.content_hash(),
        guide_hash: result.pi_guide.content_hash(),
        final_hash: result.pi_final.content_hash(),
        first_method: plan.first_config.method,
        first_reference: result.first_report.ref_events.first().map(|e| e.reference),
        dataset_hash: plan.dataset.content_hash(),
        first_seed: plan.first_config.seed,
        second_seed: plan.second_config.seed,
    }
}
