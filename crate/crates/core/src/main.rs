use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use units_core::evalkit::{evaluate, CSV_HEADER};
use units_core::numcore::checkpoint;
use units_core::pipeline::data::write_all;
use units_core::pipeline::run::{io_err, run_dir, save_checkpoint};
use units_core::pipeline::train::{run_finetune, run_pretrain, run_units};
use units_core::pipeline::{
    derive_stage_plans, run_ablation, run_full, AblationKind, Datasets, ExperimentConfig, PipelineError, Split,
};
use units_core::units::{select_init, Strategy};

#[derive(Parser)]
#[command(name = "units", version, about = "Synthetic pre-training, unsupervised intermediate training and fine-tuning on toy text images")]
struct Cli {
    /// JSON experiment config; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyArg>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Sbss,
    Dbss,
    Dbds,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Sbss => Strategy::Sbss,
            StrategyArg::Dbss => Strategy::Dbss,
            StrategyArg::Dbds => Strategy::Dbds,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Units,
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Write every dataset split as PGM images with JSON annotations.
    GenData,
    /// Full pipeline for each seed: pretrain, UNITS, fine-tune both arms.
    Run,
    /// Run one stage from an optional initial checkpoint.
    Stage {
        #[arg(value_enum)]
        stage: StageArg,
        /// Initial checkpoint; required for units and finetune.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled split and print one CSV row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "real_test")]
        split: String,
    },
    /// Run a comparison study over the configured seeds.
    Ablate {
        /// strategies, augmentation, extended_baseline or direct_test
        which: String,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.strategy {
        cfg.units.strategy = s.into();
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join(&cfg.data.dir)
}

fn datasets(cfg: &ExperimentConfig) -> Result<Datasets, Failure> {
    let (data, warnings) = Datasets::resolve(&data_dir(cfg), &cfg.data)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(data)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<units_core::numcore::ParamSet, Failure> {
    checkpoint::load(path).map_err(|e| Failure::Runtime(e.to_string()))
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let out = PathBuf::from(&cfg.out_dir);
    match &cli.command {
        Command::ShowConfig => println!("{}", cfg.to_json()),
        Command::GenData => {
            let dir = data_dir(&cfg);
            write_all(&dir, &cfg.data)?;
            log::info!("wrote datasets to {}", dir.display());
        }
        Command::Run => {
            let data = datasets(&cfg)?;
            for &seed in &cfg.seeds {
                let dir = run_dir(&cfg, Some(&out), seed);
                let record = run_full(&cfg, &data, seed, cfg.units.strategy, &dir)?;
                print!("{}", record.metrics_csv());
            }
        }
        Command::Stage { stage, init } => {
            let data = datasets(&cfg)?;
            let (pre, units, ft) = derive_stage_plans(&cfg)?;
            let init = match (stage, init) {
                (StageArg::Pretrain, None) => None,
                (StageArg::Pretrain, Some(_)) => {
                    return Err(Failure::Config("pretrain starts from a fresh detector; drop --init".into()))
                }
                (_, None) => return Err(Failure::Config("--init is required for units and finetune".into())),
                (_, Some(p)) => Some(load_ckpt(p)?),
            };
            for &seed in &cfg.seeds {
                let (name, params, losses) = match (stage, &init) {
                    (StageArg::Pretrain, _) => {
                        let o = run_pretrain(&cfg, &pre, &data, seed)?;
                        ("pretrain", o.params, o.losses)
                    }
                    (StageArg::Units, Some(i)) => {
                        let s = cfg.units.strategy;
                        let hp = cfg.units_hyper(units.lr);
                        let o = run_units(&units, i, s, &hp, &cfg.units.aug, &data, seed, "units")?;
                        let chosen = select_init(s, &o.params).map_err(|e| Failure::Runtime(e.to_string()))?;
                        ("units", chosen.clone(), o.losses)
                    }
                    (StageArg::Finetune, Some(i)) => {
                        let o = run_finetune(&ft, i, &data, seed, "finetune")?;
                        ("finetune", o.params, o.losses)
                    }
                    _ => unreachable!("checked above"),
                };
                let dir = out.join(format!("stage-{name}-{seed}"));
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let hash = save_checkpoint(&params, &dir.join(format!("{name}.ckpt")))?;
                let mut csv = String::from("stage,epoch,mean_loss\n");
                for r in losses {
                    csv.push_str(&format!("{},{},{:.6}\n", r.stage, r.epoch, r.mean_loss));
                }
                write_text(&dir.join("losses.csv"), &csv)?;
                println!("{} {hash}", dir.join(format!("{name}.ckpt")).display());
            }
        }
        Command::Eval { checkpoint, split } => {
            let sp = Split::parse(split)
                .filter(|s| *s != Split::RealUnlabeled)
                .ok_or_else(|| Failure::Config(format!("unknown labeled split {split:?}")))?;
            let data = datasets(&cfg)?;
            let params = load_ckpt(checkpoint)?;
            let samples = data.labeled(sp).expect("labeled split");
            let report = evaluate(&params, samples, cfg.eval.iou_threshold).map_err(PipelineError::from)?;
            let run_id = checkpoint.file_stem().map_or("eval".into(), |s| s.to_string_lossy().into_owned());
            println!("{CSV_HEADER}");
            println!("{}", report.csv_row(&run_id, "eval", "none", sp.name()));
        }
        Command::Ablate { which } => {
            let kind: AblationKind = which.parse().map_err(Failure::Config)?;
            let data = datasets(&cfg)?;
            let table = run_ablation(&cfg, kind, &data)?;
            let csv = table.to_csv();
            write_text(&out.join(format!("ablation-{kind}.csv")), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
