use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use serde::Serialize;

use hiclass::ablation::{build_default_plan, results_csv, run_plan, AblationInputs, AblationPlan};
use hiclass::datagen::{fingerprint, generate_dataset, Dataset, Split};
use hiclass::evaluation::{confusion_csv, evaluate, Decoding};
use hiclass::gradcheck::{gradcheck_seeds, GradcheckConfig, GradcheckDims};
use hiclass::model::{read_checkpoint, write_checkpoint, Aggregator, IntegrationMode, ModelConfig};
use hiclass::taxonomy::Taxonomy;
use hiclass::trainer::{train as run_training, write_log_csv, TrainConfig};
use hiclass::Exec;

use crate::config::RunConfig;
use crate::Failure;

type CmdResult = std::result::Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn exec_for(configured: Exec, sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        configured
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(usage),
        None => RunConfig::load_defaults().map_err(usage),
    }
}

fn output_dir(flag: Option<PathBuf>, config: &RunConfig) -> std::result::Result<PathBuf, Failure> {
    flag.or_else(|| config.output_dir.clone())
        .ok_or_else(|| usage(anyhow!("no output directory: pass --out or set `output_dir` in the config")))
}

fn create_dir(path: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::Runtime)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> std::result::Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Runtime)
}

fn open_dataset(data: &Path) -> std::result::Result<Dataset, Failure> {
    if !data.is_dir() {
        return Err(usage(anyhow!("data directory {} does not exist", data.display())));
    }
    Dataset::open(data)
        .with_context(|| format!("opening dataset {}", data.display()))
        .map_err(Failure::from)
}

/// A taxonomy named in the config must match the one stored with the data.
fn check_taxonomy(config: &RunConfig, data: &Taxonomy) -> std::result::Result<(), Failure> {
    match &config.taxonomy {
        Some(t) if t != data => Err(usage(anyhow!(
            "config taxonomy differs from the dataset's taxonomy.json"
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (defaults to the config's `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

pub fn gen(args: GenArgs) -> CmdResult {
    let config = load_config(args.config.as_deref())?;
    let out = output_dir(args.out, &config)?;
    let spec = config.dataset_spec().map_err(usage)?;
    generate_dataset(&spec, &out, exec_for(config.exec, args.sequential))
        .with_context(|| format!("generating dataset into {}", out.display()))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    selected_epoch: usize,
    steps: u64,
    train_bags: usize,
    val_bags: usize,
    train_sha256: String,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    loss: &'a hiclass::losses::LossConfig,
}

pub fn train(args: TrainArgs) -> CmdResult {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        config.train.epochs = e;
        config.train.validate().map_err(usage)?;
    }
    let out = output_dir(args.out, &config)?;
    let exec = exec_for(config.exec, args.sequential);
    let dataset = open_dataset(&args.data)?;
    check_taxonomy(&config, &dataset.taxonomy)?;
    let taxonomy = &dataset.taxonomy;
    let train_bags = dataset.load_split(Split::Train, exec)?;
    let val_bags = dataset.load_split(Split::Val, exec)?;
    let first = train_bags
        .first()
        .ok_or_else(|| Failure::Runtime(anyhow!("dataset has no training bags")))?;
    let model_cfg = ModelConfig::new(first.dim(), taxonomy, &config.model).map_err(usage)?;

    let outcome = run_training(&train_bags, &val_bags, taxonomy, &model_cfg, &config.loss, &config.train, exec)?;

    create_dir(&out)?;
    write_checkpoint(&outcome.params, &out.join("model.hckp"))?;
    for (epoch, params) in &outcome.snapshots {
        write_checkpoint(params, &out.join(format!("model_epoch_{epoch:03}.hckp")))?;
    }
    write_log_csv(&outcome.log, &out.join("train_log.csv"))?;
    let summary = TrainSummary {
        selected_epoch: outcome.selected_epoch,
        steps: outcome.steps,
        train_bags: train_bags.len(),
        val_bags: val_bags.len(),
        train_sha256: fingerprint(&train_bags),
        model: &model_cfg,
        train: &config.train,
        loss: &config.loss,
    };
    write_file(
        &out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    log::info!(
        "checkpoint from epoch {} written to {}",
        outcome.selected_epoch,
        out.display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: hiclass::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    /// Decode the fine class within the predicted coarse group.
    #[arg(long)]
    pub restricted: bool,
    #[arg(long)]
    pub sequential: bool,
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let exec = exec_for(Exec::Parallel, args.sequential);
    if !args.checkpoint.is_file() {
        return Err(usage(anyhow!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let params = read_checkpoint(&args.checkpoint)
        .with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    let dataset = open_dataset(&args.data)?;
    let bags = dataset.load_split(args.split, exec)?;
    let decoding = if args.restricted {
        Decoding::Restricted
    } else {
        Decoding::Unrestricted
    };
    let report = evaluate(&params, &bags, &dataset.taxonomy, decoding, exec)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("report.json"), report.to_json())?;
    write_file(
        &args.out.join("confusion_coarse.csv"),
        confusion_csv(&report.confusion_coarse, dataset.taxonomy.coarse_names())?,
    )?;
    write_file(
        &args.out.join("confusion_fine.csv"),
        confusion_csv(&report.confusion_fine, dataset.taxonomy.fine_names())?,
    )?;
    log::info!(
        "{} split: coarse acc {:.4}, fine acc {:.4}, consistency {:.4}",
        args.split.as_str(),
        report.acc_coarse,
        report.acc_fine,
        report.consistency_rate
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Plan JSON file.
    #[arg(long, conflicts_with = "default_plan", required_unless_present = "default_plan")]
    pub plan: Option<PathBuf>,
    /// Use the built-in 13-run grid.
    #[arg(long)]
    pub default_plan: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for the default plan (defaults to `train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.epochs` for every run.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub sequential: bool,
}

pub fn ablate(args: AblateArgs) -> CmdResult {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        config.train.epochs = e;
        config.train.validate().map_err(usage)?;
    }
    let out = output_dir(args.out, &config)?;
    let plan = match &args.plan {
        Some(p) => AblationPlan::load(p)
            .with_context(|| format!("loading plan {}", p.display()))
            .map_err(usage)?,
        None => build_default_plan(args.seed.unwrap_or(config.train.seed)),
    };
    let exec = exec_for(config.exec, args.sequential);
    let dataset = open_dataset(&args.data)?;
    check_taxonomy(&config, &dataset.taxonomy)?;
    let train_bags = dataset.load_split(Split::Train, exec)?;
    let val_bags = dataset.load_split(Split::Val, exec)?;
    let test_bags = dataset.load_split(Split::Test, exec)?;
    let inputs = AblationInputs {
        train: &train_bags,
        val: &val_bags,
        test: if test_bags.is_empty() { &val_bags } else { &test_bags },
        taxonomy: &dataset.taxonomy,
        model: &config.model,
        loss: &config.loss,
        train_config: &config.train,
    };
    let results = run_plan(&plan, &inputs, exec)?;
    create_dir(&out)?;
    write_file(&out.join("ablation_plan.json"), plan.to_json())?;
    write_file(&out.join("ablation_results.csv"), results_csv(&results)?)?;
    write_file(
        &out.join("ablation_results.json"),
        serde_json::to_string_pretty(&results).expect("results serialize") + "\n",
    )?;
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    log::info!("{} runs, {failed} failed; results in {}", results.len(), out.display());
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} ablation run(s) failed")));
    }
    Ok(())
}

fn parse_integration(s: &str) -> Result<IntegrationMode, String> {
    IntegrationMode::ALL
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("unknown integration mode `{s}`"))
}

fn parse_aggregator(s: &str) -> Result<Aggregator, String> {
    match s {
        "attention" => Ok(Aggregator::Attention),
        "max" => Ok(Aggregator::Max),
        "mean" => Ok(Aggregator::Mean),
        _ => Err(format!("unknown aggregator `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Model widths as D,H,S,P,A.
    #[arg(long, default_value = "8,8,4,4,4")]
    pub dims: String,
    #[arg(long, default_value = "bidirectional", value_parser = parse_integration)]
    pub integration: IntegrationMode,
    #[arg(long, default_value = "attention", value_parser = parse_aggregator)]
    pub aggregator: Aggregator,
    /// Debug: perturb this block's analytic gradient (the check must fail).
    #[arg(long)]
    pub corrupt_block: Option<String>,
    #[arg(long)]
    pub sequential: bool,
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let dims = GradcheckDims::parse(&args.dims).map_err(usage)?;
    if args.seeds == 0 {
        return Err(usage(anyhow!("--seeds must be ≥ 1")));
    }
    let config = GradcheckConfig {
        dims,
        integration: args.integration,
        aggregator: args.aggregator,
        corrupt_block: args.corrupt_block,
        ..GradcheckConfig::default()
    };
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let reports = gradcheck_seeds(&seeds, &config, exec_for(Exec::Parallel, args.sequential))?;
    let mut failed = Vec::new();
    println!("{:<6} {:<14} {:>6} {:>12} {:>12}  result", "seed", "block", "size", "max_rel", "max_abs");
    for r in &reports {
        for b in &r.blocks {
            println!(
                "{:<6} {:<14} {:>6} {:>12.3e} {:>12.3e}  {}",
                r.seed,
                b.name,
                b.len,
                b.max_rel_err,
                b.max_abs_err,
                if b.passed { "pass" } else { "FAIL" }
            );
            if !b.passed {
                failed.push(format!("seed {} block {}", r.seed, b.name));
            }
        }
    }
    if failed.is_empty() {
        println!("all blocks pass (tolerance {:e})", config.tolerance);
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("gradient check failed: {}", failed.join(", "))))
    }
}
