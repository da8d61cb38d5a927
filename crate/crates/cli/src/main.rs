use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use recprune::checkpoint::{self, CheckpointMeta};
use recprune::diagnostics::{observe, ProbePosition};
use recprune::evalmetrics::evaluate;
use recprune::pipeline::{
    build_base, compare_baselines, replay_stage, run_pipeline, run_stage1, run_stage2, run_stage3, PipelineConfig,
    StageOutcome, Strategy,
};
use recprune::prune::PruningPlan;
use recprune::recdata::{RecDataset, Split};
use recprune::{Result, TransformerModel};

#[derive(Parser)]
#[command(name = "recprune", version, about = "Prune-and-restore toolkit for a next-item transformer")]
struct Cli {
    /// Pipeline configuration file (flat key=value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory all outputs are written to.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum PositionArg {
    Last,
    Mean,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (dataset.tsv).
    GenData,
    /// Train the base model (base.ckpt, base_train.log).
    TrainBase {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Activation concentration report (observe.tsv).
    Observe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        position: Option<PositionArg>,
    },
    /// Head and hidden-dimension pruning, then restoration.
    Stage1(StageArgs),
    /// MLP intermediate pruning, then restoration.
    Stage2(StageArgs),
    /// Layer removal, then restoration.
    Stage3(StageArgs),
    /// Ranking metrics and perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Base training, all three stages and the final evaluation.
    Pipeline,
    /// Stage-I head pruning strategies compared over several seeds.
    CompareBaselines {
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', default_value = "prunerec,random,wanda,no_alpha,global_importance")]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Print a checkpoint's verified header.
    InspectCheckpoint { path: PathBuf },
}

#[derive(clap::Args)]
struct StageArgs {
    /// Model to prune.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Restoration teacher; defaults to the input model.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Replay this plan instead of scoring.
    #[arg(long)]
    plan: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Explicit path, else the configured path, else `dataset.tsv` in the output
/// directory if present, else a freshly generated dataset.
fn load_data(cfg: &PipelineConfig, out: &Path, explicit: Option<&Path>) -> Result<RecDataset> {
    if let Some(p) = explicit {
        return RecDataset::load(p);
    }
    if cfg.data_path.is_none() {
        let local = out.join("dataset.tsv");
        if local.exists() {
            return RecDataset::load(&local);
        }
    }
    cfg.dataset()
}

fn save_model(out: &Path, name: &str, model: &TransformerModel, stage: &str, cfg: &PipelineConfig) -> Result<()> {
    let meta = CheckpointMeta {
        stage: stage.to_string(),
        seed_lineage: cfg.seed_lineage(),
    };
    checkpoint::save(model, &meta, cfg.precision, &out.join(name))
}

fn run_stage(cli: &Cli, cfg: &PipelineConfig, stage: usize, args: &StageArgs) -> Result<()> {
    let data = load_data(cfg, &cli.out_dir, args.data.as_deref())?;
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let teacher = match &args.teacher {
        Some(p) => checkpoint::load(p)?.0,
        None => model.clone(),
    };
    let outcome: StageOutcome = match &args.plan {
        Some(p) => replay_stage(stage, &model, PruningPlan::load(p)?, &data, cfg, &teacher)?,
        None => match stage {
            1 => run_stage1(&model, &data, cfg, &teacher)?,
            2 => run_stage2(&model, &data, cfg, &teacher)?,
            _ => run_stage3(&model, &data, cfg, &teacher)?,
        },
    };
    for (name, text) in &outcome.reports {
        fs::write(cli.out_dir.join(name), text)?;
    }
    let label = format!("stage{stage}");
    save_model(&cli.out_dir, &format!("{label}.ckpt"), &outcome.model, &label, cfg)?;
    let report = evaluate(&outcome.model, &data, Split::Valid, &cfg.eval_k)?;
    println!("{label}: {} layers, {} non-embedding parameters", outcome.model.n_layers(), outcome.model.param_count(false));
    print!("{}", report.to_kv());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out_dir)?;
    let out = cli.out_dir.as_path();
    match &cli.cmd {
        Cmd::GenData => {
            let data = cfg.dataset()?;
            data.save(&out.join("dataset.tsv"))?;
            println!(
                "{} examples: train {}, valid {}, test {}",
                data.len(),
                data.train.len(),
                data.valid.len(),
                data.test.len()
            );
        }
        Cmd::TrainBase { data } => {
            let data = load_data(&cfg, out, data.as_deref())?;
            let (model, report) = build_base(&cfg, &data)?;
            if let Some(r) = report {
                fs::write(out.join("base_train.log"), r.log_lines())?;
            }
            save_model(out, "base.ckpt", &model, "base", &cfg)?;
            print!("{}", evaluate(&model, &data, Split::Valid, &cfg.eval_k)?.to_kv());
        }
        Cmd::Observe {
            checkpoint: ck,
            data,
            position,
        } => {
            let data = load_data(&cfg, out, data.as_deref())?;
            let (model, _) = checkpoint::load(ck)?;
            let pos = match position {
                Some(PositionArg::Last) => ProbePosition::LastToken,
                Some(PositionArg::Mean) => ProbePosition::MeanOverPositions,
                None => cfg.observe_position,
            };
            let rep = observe(
                &model,
                &data,
                cfg.observe_samples.min(data.train.len()),
                &cfg.observe_k_grid,
                cfg.observe_seed(),
                pos,
            )?;
            fs::write(out.join("observe.tsv"), rep.to_text())?;
            print!("{}", rep.to_text());
        }
        Cmd::Stage1(a) => run_stage(cli, &cfg, 1, a)?,
        Cmd::Stage2(a) => run_stage(cli, &cfg, 2, a)?,
        Cmd::Stage3(a) => run_stage(cli, &cfg, 3, a)?,
        Cmd::Eval {
            checkpoint: ck,
            data,
            split,
        } => {
            let data = load_data(&cfg, out, data.as_deref())?;
            let (model, _) = checkpoint::load(ck)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let rep = evaluate(&model, &data, split, &cfg.eval_k)?;
            fs::write(out.join(format!("eval_{}.txt", split.name())), rep.to_kv())?;
            print!("{}", rep.to_kv());
        }
        Cmd::Pipeline => {
            let r = run_pipeline(&cfg, Some(out))?;
            print!("{}", r.ledger.to_text());
            print!("{}", r.final_test.to_kv());
        }
        Cmd::CompareBaselines { strategies, seeds } => {
            let strategies: Vec<Strategy> = strategies.iter().map(|s| Strategy::parse(s)).collect::<Result<_>>()?;
            let table = compare_baselines(&cfg, &strategies, seeds)?;
            fs::write(out.join("comparison.tsv"), table.to_text())?;
            print!("{}", table.to_text());
        }
        Cmd::InspectCheckpoint { path } => print!("{}", checkpoint::inspect(path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_format() { 2 } else { 1 })
        }
    }
}
