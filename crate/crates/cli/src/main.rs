//! preflab: reproducible preference-optimization experiments on a toy model.
//!
//! Subcommands: sft, gen-data, train, pre-dpo, eval, lambda-report, search.
//! Every run is fully determined by its echoed config and seeds; no
//! subcommand mutates its input files. The default output root can be set
//! with the PREFLAB_OUT environment variable.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use preflab_core::data::{
    build_on_policy_dataset, load_jsonl, load_sequences, save_jsonl, synthetic_corpus,
    synthetic_prompts, GenerationConfig,
};
use preflab_core::eval::{pairwise_win_rate, RubricConfig, RubricOracle};
use preflab_core::model::{ArchConfig, PolicyModel, Sequence};
use preflab_core::pre_dpo::{manifest, run_pre_dpo, PreDpoPlan};
use preflab_core::search::{stage1, stage2, SearchSpace, WinRateObjective};
use preflab_core::telemetry::{import_lambda_csv, phase_summary, phase_table};
use preflab_core::trainer::{sft_train, train_preference, Method, TrainConfig};
use preflab_core::Snapshot32;

#[derive(Parser)]
#[command(name = "preflab", version, about = "desk-scale preference-optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a fresh (or given) toy model on a next-token corpus.
    Sft(SftArgs),
    /// Build an on-policy preference dataset scored by the reward oracle.
    GenData(GenDataArgs),
    /// Run one preference-optimization method on a dataset.
    Train(TrainArgs),
    /// Full guided re-optimization pipeline (first round, guide reset, DPO re-run).
    PreDpo(PreDpoArgs),
    /// Pairwise oracle win rate between two snapshots.
    Eval(EvalArgs),
    /// Two-phase lambda bucket table for a finished run directory.
    LambdaReport(LambdaReportArgs),
    /// Two-stage hyperparameter search.
    Search(SearchArgs),
}

#[derive(Args)]
struct SftArgs {
    /// Output run directory (default: $PREFLAB_OUT/sft).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus file (JSON array or JSONL of token sequences).
    #[arg(long, conflicts_with = "synthetic_corpus")]
    corpus: Option<PathBuf>,
    /// Generate a synthetic corpus of this many sequences instead.
    #[arg(long)]
    synthetic_corpus: Option<usize>,
    /// TrainConfig JSON file; defaults to 3-epoch SFT at lr 1e-2.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ArchConfig JSON file; defaults to the stock 32-token architecture.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Continue from an existing snapshot instead of a fresh init.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Policy snapshot to sample from.
    #[arg(long)]
    model: PathBuf,
    /// Output JSONL dataset path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "synthetic_prompts")]
    prompts: Option<PathBuf>,
    /// Generate this many synthetic prompts instead of reading a file.
    #[arg(long)]
    synthetic_prompts: Option<usize>,
    #[arg(long, default_value_t = 6)]
    n_samples: usize,
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// RubricConfig JSON file for the scoring oracle.
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// dpo | simpo | trdpo | sdpo (overrides the config file).
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    dataset: PathBuf,
    /// Initial policy snapshot.
    #[arg(long)]
    init: PathBuf,
    /// Reference snapshot (required for dpo/trdpo/sdpo, forbidden for simpo).
    #[arg(long, name = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TrainConfig JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct PreDpoArgs {
    /// Plan file: { "sft": path, "dataset": path, "first": TrainConfig,
    /// "second": TrainConfig (optional) }.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the first-round method.
    #[arg(long)]
    first: Option<String>,
    /// Override the first-round seed (second round derives seed + 1 unless
    /// the plan pins one).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long, conflicts_with = "synthetic_prompts")]
    prompts: Option<PathBuf>,
    #[arg(long)]
    synthetic_prompts: Option<usize>,
    /// Write the full JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Args)]
struct LambdaReportArgs {
    /// A run directory containing csv/lambdas.csv and csv/loss_curve.csv.
    run_dir: PathBuf,
    /// Where to write the phase summary JSON (default: run_dir/phase_summary.json).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Search file: { "sft": path, "dataset": path, "space": SearchSpace,
    /// "opponent"?, "prompts"? | "synthetic_prompts"?, "oracle"?, "decoding"? }.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel training runs (default: one per core).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the base seed for every run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PreDpoFile {
    sft: PathBuf,
    dataset: PathBuf,
    first: TrainConfig,
    #[serde(default)]
    second: Option<TrainConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchFile {
    sft: PathBuf,
    dataset: PathBuf,
    space: SearchSpace,
    /// Objective opponent snapshot; defaults to the SFT snapshot.
    #[serde(default)]
    opponent: Option<PathBuf>,
    #[serde(default)]
    prompts: Option<PathBuf>,
    #[serde(default)]
    synthetic_prompts: Option<usize>,
    #[serde(default)]
    oracle: Option<RubricConfig>,
    #[serde(default)]
    decoding: Option<GenerationConfig>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Sft(args) => cmd_sft(args),
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::PreDpo(args) => cmd_pre_dpo(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::LambdaReport(args) => cmd_lambda_report(args),
        Cmd::Search(args) => cmd_search(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn resolve_out(out: Option<PathBuf>, subcommand: &str) -> anyhow::Result<PathBuf> {
    match out {
        Some(p) => Ok(p),
        None => match std::env::var_os("PREFLAB_OUT") {
            Some(root) => Ok(PathBuf::from(root).join(subcommand)),
            None => bail!("--out is required (or set PREFLAB_OUT)"),
        },
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} file {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} file {}", path.display()))
}

fn load_snapshot(path: &Path) -> anyhow::Result<Snapshot32> {
    Snapshot32::load(path).with_context(|| format!("loading snapshot {}", path.display()))
}

fn load_prompts(
    file: &Option<PathBuf>,
    synthetic: Option<usize>,
    arch: &ArchConfig,
    seed: u64,
) -> anyhow::Result<Vec<Sequence>> {
    match (file, synthetic) {
        (Some(path), _) => Ok(load_sequences(path)?),
        (None, Some(n)) => Ok(synthetic_prompts(&arch.vocab, n, seed)),
        (None, None) => bail!("either --prompts or --synthetic-prompts is required"),
    }
}

fn cmd_sft(args: SftArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "sft")?;
    let arch: ArchConfig = match &args.arch {
        Some(p) => read_json(p, "arch config")?,
        None => ArchConfig::default(),
    };
    arch.validate()?;
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p, "train config")?,
        None => TrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            batch_size: 8,
            ..TrainConfig::new(Method::Sft)
        },
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if cfg.method != Method::Sft {
        bail!("config error: method: sft subcommand requires method sft");
    }

    let init = match &args.init {
        Some(p) => load_snapshot(p)?,
        None => PolicyModel::<f32>::init(arch.clone(), cfg.seed)?.snapshot(),
    };
    let corpus = match (&args.corpus, args.synthetic_corpus) {
        (Some(path), _) => load_sequences(path)?,
        (None, Some(n)) => synthetic_corpus(&init.arch().vocab, n, 12, cfg.seed),
        (None, None) => bail!("either --corpus or --synthetic-corpus is required"),
    };

    let report = sft_train(&init, &corpus, &cfg)?;
    std::fs::create_dir_all(&out)?;
    report.write_dir(&out)?;
    println!(
        "sft: {} steps, final loss {:.4}, snapshot {} -> {}",
        report.loss_curve.len(),
        report.loss_curve.last().map_or(f64::NAN, |p| p.loss),
        report.final_snapshot.content_hash(),
        out.display()
    );
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let model = load_snapshot(&args.model)?;
    let seed = args.seed.unwrap_or(0);
    let prompts = load_prompts(&args.prompts, args.synthetic_prompts, model.arch(), seed ^ 0x70)?;
    let gen = GenerationConfig {
        n_samples: args.n_samples,
        temperature: args.temperature,
        top_p: args.top_p,
        max_len: args.max_len,
        seed,
    };
    let rubric: RubricConfig = match &args.oracle {
        Some(p) => read_json(p, "oracle config")?,
        None => RubricConfig::default(),
    };
    let oracle = RubricOracle::new(*model.arch().vocab_ref(), rubric.clone());
    let dataset = build_on_policy_dataset(&model, &prompts, &gen, &oracle)?;
    save_jsonl(&dataset, &args.out)?;

    #[derive(Serialize)]
    struct GenEcho<'a> {
        generation: &'a GenerationConfig,
        oracle: &'a RubricConfig,
        model_hash: String,
        n_prompts: usize,
        n_triples: usize,
    }
    let echo = GenEcho {
        generation: &gen,
        oracle: &rubric,
        model_hash: model.content_hash().to_hex(),
        n_prompts: prompts.len(),
        n_triples: dataset.len(),
    };
    let echo_path = args.out.with_extension("config.json");
    std::fs::write(&echo_path, serde_json::to_vec_pretty(&echo)?)?;
    println!(
        "gen-data: {} triples from {} prompts (hash {}) -> {}",
        dataset.len(),
        prompts.len(),
        dataset.content_hash(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "train")?;
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p, "train config")?,
        None => {
            let method = args
                .method
                .as_deref()
                .ok_or_else(|| anyhow::anyhow!("--method is required without --config"))?;
            TrainConfig::new(method.parse::<Method>()?)
        }
    };
    if let Some(m) = &args.method {
        cfg.method = m.parse::<Method>()?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if cfg.method == Method::Sft {
        bail!("config error: method: use the sft subcommand for SFT training");
    }

    let init = load_snapshot(&args.init)?;
    let reference = args.reference.as_deref().map(load_snapshot).transpose()?;
    let dataset = load_jsonl(&args.dataset)?;
    let report = train_preference(&init, reference.as_ref(), &dataset, &cfg)?;
    std::fs::create_dir_all(&out)?;
    report.write_dir(&out)?;
    println!(
        "train[{}]: {} steps, final loss {:.4}, snapshot {} -> {}",
        cfg.method,
        report.loss_curve.len(),
        report.loss_curve.last().map_or(f64::NAN, |p| p.loss),
        report.final_snapshot.content_hash(),
        out.display()
    );
    Ok(())
}

fn cmd_pre_dpo(args: PreDpoArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "pre-dpo")?;
    let file: PreDpoFile = read_json(&args.config, "pre-dpo plan")?;
    let sft = load_snapshot(&file.sft)?;
    let dataset = load_jsonl(&file.dataset)?;

    let mut first = file.first;
    if let Some(m) = &args.first {
        first.method = m.parse::<Method>()?;
    }
    if let Some(seed) = args.seed {
        first.seed = seed;
    }
    let mut plan = PreDpoPlan::new(sft, first, dataset);
    if let Some(second) = file.second {
        plan.second_config = second;
    }

    let result = run_pre_dpo(&plan)?;
    let m = manifest(&plan, &result);

    std::fs::create_dir_all(out.join("snapshots"))?;
    std::fs::create_dir_all(out.join("csv"))?;
    #[derive(Serialize)]
    struct PlanEcho<'a> {
        sft: &'a Path,
        dataset: &'a Path,
        first: &'a TrainConfig,
        second: &'a TrainConfig,
    }
    let echo = PlanEcho {
        sft: &file.sft,
        dataset: &file.dataset,
        first: &plan.first_config,
        second: &plan.second_config,
    };
    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(&echo)?)?;
    std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&m)?)?;
    result.pi_guide.save(&out.join("snapshots/guide.snap"))?;
    result.pi_final.save(&out.join("snapshots/final.snap"))?;
    preflab_core::trainer::write_loss_curve_csv(
        &result.first_report.loss_curve,
        &out.join("csv/first_loss_curve.csv"),
    )?;
    preflab_core::telemetry::export_lambda_csv(
        &result.first_report.lambda_records,
        &out.join("csv/first_lambdas.csv"),
    )?;
    preflab_core::trainer::write_loss_curve_csv(
        &result.second_report.loss_curve,
        &out.join("csv/loss_curve.csv"),
    )?;
    preflab_core::telemetry::export_lambda_csv(
        &result.second_report.lambda_records,
        &out.join("csv/lambdas.csv"),
    )?;
    println!(
        "pre-dpo[first={}]: guide {} final {} -> {}",
        plan.first_config.method,
        m.guide_hash,
        m.final_hash,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let a = load_snapshot(&args.model_a)?;
    let b = load_snapshot(&args.model_b)?;
    let seed = args.seed.unwrap_or(0);
    let prompts = load_prompts(&args.prompts, args.synthetic_prompts, a.arch(), seed ^ 0x70)?;
    let decoding = GenerationConfig {
        n_samples: 1,
        temperature: args.temperature,
        top_p: args.top_p,
        max_len: args.max_len,
        seed,
    };
    let rubric: RubricConfig = match &args.oracle {
        Some(p) => read_json(p, "oracle config")?,
        None => RubricConfig::default(),
    };
    let oracle = RubricOracle::new(*a.arch().vocab_ref(), rubric);
    let report = pairwise_win_rate(&a, &b, &prompts, &oracle, &decoding)?;
    println!("{}", report.summary_line());
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_lambda_report(args: LambdaReportArgs) -> anyhow::Result<()> {
    let lambdas_path = args.run_dir.join("csv/lambdas.csv");
    let curve_path = args.run_dir.join("csv/loss_curve.csv");
    let records = import_lambda_csv::<f64>(&lambdas_path)
        .with_context(|| format!("reading {}", lambdas_path.display()))?;
    let total_steps = std::fs::read_to_string(&curve_path)
        .with_context(|| format!("reading {}", curve_path.display()))?
        .lines()
        .count()
        .saturating_sub(1);
    let (early, late) = phase_summary(&records, total_steps)?;
    print!("{}", phase_table(&early, &late));

    #[derive(Serialize)]
    struct Summary<'a> {
        total_steps: usize,
        early: &'a preflab_core::telemetry::PhaseStats,
        late: &'a preflab_core::telemetry::PhaseStats,
    }
    let json_path = args.json.unwrap_or_else(|| args.run_dir.join("phase_summary.json"));
    std::fs::write(
        &json_path,
        serde_json::to_vec_pretty(&Summary { total_steps, early: &early, late: &late })?,
    )?;
    println!("phase summary -> {}", json_path.display());
    Ok(())
}

fn cmd_search(args: SearchArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "search")?;
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring --jobs thread pool")?;
    }
    let file: SearchFile = read_json(&args.config, "search config")?;
    let sft = load_snapshot(&file.sft)?;
    let dataset = load_jsonl(&file.dataset)?;
    let mut space = file.space;
    if let Some(seed) = args.seed {
        space.base.seed = seed;
    }

    let opponent = match &file.opponent {
        Some(p) => load_snapshot(p)?,
        None => sft.clone(),
    };
    let prompts = load_prompts(&file.prompts, file.synthetic_prompts, sft.arch(), space.base.seed ^ 0x70)?;
    let rubric = file.oracle.unwrap_or_default();
    let oracle = RubricOracle::new(*sft.arch().vocab_ref(), rubric);
    let decoding = file.decoding.unwrap_or_else(GenerationConfig::eval_default);
    let objective =
        WinRateObjective { opponent: &opponent, prompts: &prompts, oracle: &oracle, decoding };

    let reference = if space.method.uses_reference() { Some(&sft) } else { None };
    let s1 = stage1(&space, &sft, reference, &dataset, &objective)?;
    let combined = stage2(&s1, &space, &sft, reference, &dataset, &objective)?;

    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(&space)?)?;
    std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&combined.result)?)?;
    combined.result.write_summary_csv(&out.join("summary.csv"))?;
    for (i, report) in combined.reports.iter().enumerate() {
        if let Some(report) = report {
            report.write_dir(&out.join(format!("runs/{i:03}")))?;
        }
    }
    match combined.result.best_outcome() {
        Some(best) => println!(
            "search[{}]: {} runs, best objective {:.4} at beta={} gamma={} lr={} -> {}",
            space.method,
            combined.result.runs.len(),
            best.objective.unwrap_or(f64::NAN),
            best.config.beta,
            best.config.gamma,
            best.config.learning_rate,
            out.display()
        ),
        None => println!(
            "search[{}]: {} runs, no successful run -> {}",
            space.method,
            combined.result.runs.len(),
            out.display()
        ),
    }
    Ok(())
}
