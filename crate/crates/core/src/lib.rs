//! preflab-core: a desk-scale preference-optimization laboratory.
//!
//! Implements DPO, SimPO and guided re-optimization (Pre-DPO style training,
//! where a first-round optimized policy is reset as the reference for a
//! second DPO round from the original SFT snapshot) on a tiny trainable
//! autoregressive model, with exact per-example lambda-weight telemetry,
//! on-policy preference-data construction against a synthetic reward oracle,
//! and a two-stage hyperparameter search.
//!
//! Background: the usual KL-constrained reward objective behind these
//! methods is never optimized directly here; DPO's loss is its offline
//! reformulation, and the reward `r(x, y)` appears only as the eval module's
//! synthetic oracle.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`). The
//! `f32` instantiation matches the on-disk snapshot format bit-for-bit and
//! backs the CLI; `f64` is the analysis instantiation used for tight
//! numerical identities. Concrete aliases for both live at the crate root.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pre_dpo;
pub mod scalar;
pub mod search;
pub mod telemetry;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Pipeline instantiation: matches the snapshot file format.
pub type Model32 = model::PolicyModel<f32>;
pub type Snapshot32 = model::ModelSnapshot<f32>;
pub type Report32 = trainer::TrainReport<f32>;
pub type PreDpoPlan32 = pre_dpo::PreDpoPlan<f32>;
pub type PreDpoResult32 = pre_dpo::PreDpoResult<f32>;

/// Analysis instantiation: used for gradient-identity and distribution
/// checks.
pub type Model64 = model::PolicyModel<f64>;
pub type Snapshot64 = model::ModelSnapshot<f64>;
pub type Report64 = trainer::TrainReport<f64>;
pub type PreDpoPlan64 = pre_dpo::PreDpoPlan<f64>;
pub type PreDpoResult64 = pre_dpo::PreDpoResult<f64>;
