//! Two-stage hyperparameter search.
//!
//! Stage 1 fixes the learning rate and sweeps beta (or the beta x gamma
//! product for SimPO). Stage 2 takes the two best stage-1 settings and
//! sweeps the learning rate. The returned best is the argmax over every
//! completed run from both stages, ties broken by grid order.
//!
//! Default grids keep the published shapes (7-point beta for DPO, 2x6 for
//! SimPO, 4-point learning rate) with magnitudes suited to the toy model;
//! the space is echoed into every result for auditability.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GenerationConfig, PreferenceDataset};
use crate::error::{Error, Result};
use crate::eval::{pairwise_win_rate, RewardOracle};
use crate::model::{ContentHash, ModelSnapshot, Sequence};
use crate::scalar::Scalar;
use crate::trainer::{train_preference, Method, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub method: Method,
    pub stage1_fixed_lr: f64,
    pub beta_grid: Vec<f64>,
    /// Swept only for SimPO; must be empty otherwise.
    #[serde(default)]
    pub gamma_grid: Vec<f64>,
    pub lr_grid: Vec<f64>,
    /// Template for epochs, batch size, warmup and seed; method, beta, gamma
    /// and learning rate are overwritten per grid point.
    pub base: TrainConfig,
}

impl SearchSpace {
    /// DPO beta sweep over the published 7-point grid; learning-rate grid
    /// rescaled to toy-model magnitudes.
    pub fn dpo_default(base: TrainConfig) -> Self {
        Self {
            method: Method::Dpo,
            stage1_fixed_lr: 6e-3,
            beta_grid: vec![0.005, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
            gamma_grid: vec![],
            lr_grid: vec![3e-3, 5e-3, 8e-3, 1e-2],
            base,
        }
    }

    /// SimPO 2x6 (beta, gamma) sweep.
    pub fn simpo_default(base: TrainConfig) -> Self {
        Self {
            method: Method::SimPo,
            stage1_fixed_lr: 6e-3,
            beta_grid: vec![2.0, 2.5],
            gamma_grid: vec![0.3, 0.5, 1.0, 1.2, 1.4, 1.6],
            lr_grid: vec![3e-3, 5e-3, 8e-3, 1e-2],
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Sft {
            return Err(Error::Config("space.method: must be a preference method".into()));
        }
        if self.beta_grid.is_empty() {
            return Err(Error::Config("space.beta_grid: must be nonempty".into()));
        }
        if self.lr_grid.is_empty() {
            return Err(Error::Config("space.lr_grid: must be nonempty".into()));
        }
        if self.method == Method::SimPo && self.gamma_grid.is_empty() {
            return Err(Error::Config("space.gamma_grid: required for simpo".into()));
        }
        if self.method != Method::SimPo && !self.gamma_grid.is_empty() {
            return Err(Error::Config("space.gamma_grid: only meaningful for simpo".into()));
        }
        if !(self.stage1_fixed_lr > 0.0 && self.stage1_fixed_lr.is_finite()) {
            return Err(Error::Config("space.stage1_fixed_lr: must be finite and > 0".into()));
        }
        Ok(())
    }

    /// Stage-1 grid points in sweep order.
    pub fn stage1_configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &beta in &self.beta_grid {
            if self.method == Method::SimPo {
                for &gamma in &self.gamma_grid {
                    out.push(TrainConfig {
                        method: self.method,
                        beta,
                        gamma,
                        learning_rate: self.stage1_fixed_lr,
                        ..self.base.clone()
                    });
                }
            } else {
                out.push(TrainConfig {
                    method: self.method,
                    beta,
                    gamma: 0.0,
                    learning_rate: self.stage1_fixed_lr,
                    ..self.base.clone()
                });
            }
        }
        out
    }
}

/// The ranking objective: higher is better.
pub trait SearchObjective<T: Scalar>: Sync {
    fn evaluate(&self, cfg: &TrainConfig, model: &ModelSnapshot<T>) -> Result<f64>;
}

/// Default objective: oracle win rate against a fixed opponent snapshot on a
/// held-out prompt set.
pub struct WinRateObjective<'a, T: Scalar> {
    pub opponent: &'a ModelSnapshot<T>,
    pub prompts: &'a [Sequence],
    pub oracle: &'a dyn RewardOracle,
    pub decoding: GenerationConfig,
}

impl<T: Scalar> SearchObjective<T> for WinRateObjective<'_, T> {
    fn evaluate(&self, _cfg: &TrainConfig, model: &ModelSnapshot<T>) -> Result<f64> {
        Ok(pairwise_win_rate(model, self.opponent, self.prompts, self.oracle, &self.decoding)?
            .win_rate)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub stage: u8,
    pub config: TrainConfig,
    pub objective: Option<f64>,
    pub snapshot_hash: Option<ContentHash>,
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.objective.is_some()
    }
}

/// Audit log of a search: every run in grid order, the echoed space, and the
/// index of the best run. Together with the dataset hash this is enough to
/// replay any single run.
#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub space: SearchSpace,
    pub dataset_hash: ContentHash,
    pub runs: Vec<RunOutcome>,
    pub best: Option<usize>,
    pub warnings: Vec<String>,
}

impl SearchResult {
    /// Indices of successful runs, best objective first, grid order breaking
    /// ties.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> =
            (0..self.runs.len()).filter(|&i| self.runs[i].succeeded()).collect();
        idx.sort_by(|&a, &b| {
            let oa = self.runs[a].objective.unwrap();
            let ob = self.runs[b].objective.unwrap();
            ob.partial_cmp(&oa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        idx
    }

    pub fn best_outcome(&self) -> Option<&RunOutcome> {
        self.best.map(|i| &self.runs[i])
    }

    /// Summary table: stage, method, reference role, beta, gamma, lr,
    /// objective.
    pub fn write_summary_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "stage,method,ref,beta,gamma,lr,objective")?;
        for run in &self.runs {
            let reference = if run.config.method.uses_reference() { "sft" } else { "none" };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                run.stage,
                run.config.method,
                reference,
                run.config.beta,
                run.config.gamma,
                run.config.learning_rate,
                run.objective.map_or(String::from("failed"), |o| o.to_string()),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Search output: the audit log plus the trained reports of successful runs
/// (aligned with `result.runs`) so callers can persist run directories.
pub struct SearchOutput<T: Scalar> {
    pub result: SearchResult,
    pub reports: Vec<Option<TrainReport<T>>>,
}

fn reference_for<'a, T: Scalar>(
    method: Method,
    reference: Option<&'a ModelSnapshot<T>>,
) -> Result<Option<&'a ModelSnapshot<T>>> {
    if method.uses_reference() {
        match reference {
            Some(r) => Ok(Some(r)),
            None => Err(Error::Config(format!("method {method} requires a reference snapshot"))),
        }
    } else {
        Ok(None)
    }
}

fn run_grid<T: Scalar>(
    stage: u8,
    configs: Vec<TrainConfig>,
    sft: &ModelSnapshot<T>,
    reference: Option<&ModelSnapshot<T>>,
    dataset: &PreferenceDataset,
    objective: &dyn SearchObjective<T>,
) -> Result<Vec<(RunOutcome, Option<TrainReport<T>>)>> {
    let runs: Vec<(RunOutcome, Option<TrainReport<T>>)> = configs
        .into_par_iter()
        .map(|cfg| {
            let outcome = reference_for(cfg.method, reference)
                .and_then(|r| train_preference(sft, r, dataset, &cfg))
                .and_then(|report| {
                    let obj = objective.evaluate(&cfg, &report.final_snapshot)?;
                    Ok((report, obj))
                });
            match outcome {
                Ok((report, obj)) => (
                    RunOutcome {
                        stage,
                        config: cfg,
                        objective: Some(obj),
                        snapshot_hash: Some(report.final_snapshot.content_hash()),
                        error: None,
                    },
                    Some(report),
                ),
                Err(e) => {
                    log::warn!("search run failed: {e}");
                    (
                        RunOutcome {
                            stage,
                            config: cfg,
                            objective: None,
                            snapshot_hash: None,
                            error: Some(e.to_string()),
                        },
                        None,
                    )
                }
            }
        })
        .collect();
    Ok(runs)
}

fn assemble<T: Scalar>(
    space: &SearchSpace,
    dataset: &PreferenceDataset,
    runs: Vec<(RunOutcome, Option<TrainReport<T>>)>,
    warnings: Vec<String>,
) -> SearchOutput<T> {
    let (outcomes, reports): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let mut result = SearchResult {
        space: space.clone(),
        dataset_hash: dataset.content_hash(),
        runs: outcomes,
        best: None,
        warnings,
    };
    result.best = result.ranked().first().copied();
    SearchOutput { result, reports }
}

/// Stage 1: one run per grid point at the fixed learning rate.
pub fn stage1<T: Scalar>(
    space: &SearchSpace,
    sft: &ModelSnapshot<T>,
    reference: Option<&ModelSnapshot<T>>,
    dataset: &PreferenceDataset,
    objective: &dyn SearchObjective<T>,
) -> Result<SearchOutput<T>> {
    space.validate()?;
    let runs = run_grid(1, space.stage1_configs(), sft, reference, dataset, objective)?;
    Ok(assemble(space, dataset, runs, Vec::new()))
}

/// Stage 2: learning-rate sweep around the two best stage-1 settings,
/// returning the union of both stages. With fewer than two stage-1
/// successes the sweep degrades to a single setting and records a warning.
pub fn stage2<T: Scalar>(
    stage1_output: &SearchOutput<T>,
    space: &SearchSpace,
    sft: &ModelSnapshot<T>,
    reference: Option<&ModelSnapshot<T>>,
    dataset: &PreferenceDataset,
    objective: &dyn SearchObjective<T>,
) -> Result<SearchOutput<T>> {
    space.validate()?;
    let ranked = stage1_output.result.ranked();
    if ranked.is_empty() {
        return Err(Error::Config("stage2: no successful stage-1 runs to refine".into()));
    }
    let mut warnings = Vec::new();
    let top: Vec<usize> = ranked.iter().copied().take(2).collect();
    if top.len() < 2 {
        warnings.push("stage2: fewer than 2 successful stage-1 configs; sweeping one".into());
    }

    let mut configs = Vec::with_capacity(top.len() * space.lr_grid.len());
    for &i in &top {
        for &lr in &space.lr_grid {
            configs.push(TrainConfig {
                learning_rate: lr,
                ..stage1_output.result.runs[i].config.clone()
            });
        }
    }
    let stage2_runs = run_grid(2, configs, sft, reference, dataset, objective)?;

    let mut all: Vec<(RunOutcome, Option<TrainReport<T>>)> = stage1_output
        .result
        .runs
        .iter()
        .cloned()
        .zip(stage1_output.reports.iter().cloned())
        .collect();
    all.extend(stage2_runs);
    Ok(assemble(space, dataset, all, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PreferenceTriple, Provenance};
    use crate::model::{ArchConfig, PolicyModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_dataset(n: usize) -> PreferenceDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let triples = (0..n)
            .map(|_| {
                let prompt: Vec<u32> = (0..2).map(|_| rng.gen_range(3..8)).collect();
                let chosen: Vec<u32> = (0..3).map(|_| rng.gen_range(3..8)).collect();
                let mut rejected: Vec<u32> = (0..2).map(|_| rng.gen_range(3..8)).collect();
                if rejected == chosen {
                    rejected.push(3);
                }
                PreferenceTriple::new(
                    Sequence::from(prompt),
                    Sequence::from(chosen),
                    Sequence::from(rejected),
                    None,
                )
                .unwrap()
            })
            .collect();
        PreferenceDataset::new("micro", Provenance::Offline, triples)
    }

    fn fast_base(method: Method) -> TrainConfig {
        TrainConfig { batch_size: 8, epochs: 1, ..TrainConfig::new(method) }
    }

    /// Objective that is a known function of the hyperparameters, so the
    /// expected ranking is analytic.
    struct BetaScore;
    impl SearchObjective<f64> for BetaScore {
        fn evaluate(&self, cfg: &TrainConfig, _m: &ModelSnapshot<f64>) -> Result<f64> {
            // peak at beta = 0.1; lr breaks the plateau in stage 2
            Ok(-(cfg.beta - 0.1).abs() + cfg.learning_rate)
        }
    }

    #[test]
    fn stage1_run_counts_match_grid_shapes() {
        let sft = PolicyModel::<f64>::init(ArchConfig::micro(), 1).unwrap().snapshot();
        let ds = micro_dataset(8);
        let dpo_space = SearchSpace::dpo_default(fast_base(Method::Dpo));
        let out = stage1(&dpo_space, &sft, Some(&sft), &ds, &BetaScore).unwrap();
        assert_eq!(out.result.runs.len(), 7);
        assert!(out.result.runs.iter().all(|r| r.succeeded()));

        let simpo_space = SearchSpace::simpo_default(fast_base(Method::SimPo));
        let out = stage1(&simpo_space, &sft, None, &ds, &BetaScore).unwrap();
        assert_eq!(out.result.runs.len(), 12);
    }

    #[test]
    fn stubbed_objective_is_recovered_exactly() {
        let sft = PolicyModel::<f64>::init(ArchConfig::micro(), 1).unwrap().snapshot();
        let ds = micro_dataset(8);
        let space = SearchSpace::dpo_default(fast_base(Method::Dpo));
        let s1 = stage1(&space, &sft, Some(&sft), &ds, &BetaScore).unwrap();
        // analytic stage-1 optimum: beta = 0.1 at the fixed lr
        assert_eq!(s1.result.best_outcome().unwrap().config.beta, 0.1);
        let ranked = s1.result.ranked();
        // second best is beta = 0.05, the next closest grid point to 0.1
        assert_eq!(s1.result.runs[ranked[1]].config.beta, 0.05);

        let s2 = stage2(&s1, &space, &sft, Some(&sft), &ds, &BetaScore).unwrap();
        assert_eq!(s2.result.runs.len(), 7 + 8);
        assert_eq!(
            s2.result.runs.iter().filter(|r| r.stage == 2).count(),
            8,
            "stage 2 sweeps 2 x 4 learning rates"
        );
        let best = s2.result.best_outcome().unwrap();
        // overall optimum: beta 0.1 at the largest lr in the grid
        assert_eq!(best.config.beta, 0.1);
        assert_eq!(best.config.learning_rate, 1e-2);
        // best of the union dominates the stage-1 best
        let s1_best = s1.result.best_outcome().unwrap().objective.unwrap();
        assert!(best.objective.unwrap() >= s1_best);
    }

    #[test]
    fn failed_runs_are_recorded_and_search_continues() {
        struct FailOnBeta(f64);
        impl SearchObjective<f64> for FailOnBeta {
            fn evaluate(&self, cfg: &TrainConfig, _m: &ModelSnapshot<f64>) -> Result<f64> {
                if cfg.beta == self.0 {
                    Err(Error::InvalidInput("synthetic objective failure".into()))
                } else {
                    Ok(cfg.beta)
                }
            }
        }
        let sft = PolicyModel::<f64>::init(ArchConfig::micro(), 1).unwrap().snapshot();
        let ds = micro_dataset(8);
        let space = SearchSpace::dpo_default(fast_base(Method::Dpo));
        let out = stage1(&space, &sft, Some(&sft), &ds, &FailOnBeta(1.0)).unwrap();
        assert_eq!(out.result.runs.len(), 7);
        let failed: Vec<_> = out.result.runs.iter().filter(|r| !r.succeeded()).collect();
        assert_eq!(failed.len(), 1);
        assert!(failed[0].error.is_some());
        // best skips the failure: next largest beta
        assert_eq!(out.result.best_outcome().unwrap().config.beta, 0.5);
    }

    #[test]
    fn stage2_degrades_with_single_success() {
        struct OnlyOne;
        impl SearchObjective<f64> for OnlyOne {
            fn evaluate(&self, cfg: &TrainConfig, _m: &ModelSnapshot<f64>) -> Result<f64> {
                if cfg.beta == 0.1 {
                    Ok(1.0)
                } else {
                    Err(Error::InvalidInput("synthetic failure".into()))
                }
            }
        }
        let sft = PolicyModel::<f64>::init(ArchConfig::micro(), 1).unwrap().snapshot();
        let ds = micro_dataset(8);
        let space = SearchSpace::dpo_default(fast_base(Method::Dpo));
        let s1 = stage1(&space, &sft, Some(&sft), &ds, &OnlyOne).unwrap();
        let s2 = stage2(&s1, &space, &sft, Some(&sft), &ds, &OnlyOne).unwrap();
        assert_eq!(s2.result.runs.iter().filter(|r| r.stage == 2).count(), 4);
        assert_eq!(s2.result.warnings.len(), 1);
    }

    #[test]
    fn search_is_deterministic_end_to_end() {
        let sft = PolicyModel::<f64>::init(ArchConfig::micro(), 1).unwrap().snapshot();
        let ds = micro_dataset(8);
        let space = SearchSpace {
            beta_grid: vec![0.05, 0.2],
            lr_grid: vec![3e-3, 8e-3],
            ..SearchSpace::dpo_default(fast_base(Method::Dpo))
        };
        struct Hash;
        impl SearchObjective<f64> for Hash {
            fn evaluate(&self, _c: &TrainConfig, m: &ModelSnapshot<f64>) -> Result<f64> {
                // deterministic function of the trained snapshot
                Ok(m.content_hash().as_bytes()[0] as f64)
            }
        }
        let run = || {
            let s1 = stage1(&space, &sft, Some(&sft), &ds, &Hash).unwrap();
            stage2(&s1, &space, &sft, Some(&sft), &ds, &Hash).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.result.best, b.result.best);
        let hashes = |o: &SearchOutput<f64>| {
            o.result.runs.iter().map(|r| r.snapshot_hash).collect::<Vec<_>>()
        };
        assert_eq!(hashes(&a), hashes(&b));
    }

    #[test]
    fn summary_csv_mirrors_runs() {
        let sft = PolicyModel::<f64>::init(ArchConfig::micro(), 1).unwrap().snapshot();
        let ds = micro_dataset(8);
        let space = SearchSpace {
            beta_grid: vec![0.05],
            lr_grid: vec![3e-3],
            ..SearchSpace::dpo_default(fast_base(Method::Dpo))
        };
        let out = stage1(&space, &sft, Some(&sft), &ds, &BetaScore).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        out.result.write_summary_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("stage,method,ref,beta,gamma,lr,objective\n"));
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("1,dpo,sft,0.05,"));
    }
}
