use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dcc::metrics::PredictionDump;
use dcc::synthgen::{default_manifest, generate_benchmark, BenchmarkManifest, Split};
use dcc::trainer::{evaluate, train_dcc, train_pretrain, EvalMode, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "dcc", version, about = "Compositional zero-shot part segmentation with decompositional consensus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData {
        /// Benchmark manifest (TOML). The built-in benchmark when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the manifest's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the built-in manifest, for editing.
    DefaultManifest {
        #[arg(long)]
        out: PathBuf,
    },
    /// Segmentation pretraining.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Joint finetuning from a pretrained checkpoint.
    TrainDcc {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint. A training config evaluates that run's
    /// `best.ckpt` and writes into `<output>/eval_<mode>_<split>`.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Render a prediction dump.
    Report {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dcc,
    DirectSeg,
    Oracle,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dcc => EvalMode::Dcc,
            ModeArg::DirectSeg => EvalMode::DirectSeg,
            ModeArg::Oracle => EvalMode::Oracle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Svg,
    Json,
}

fn load_config(path: &Path, want: Stage) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if cfg.stage != want {
        bail!("{} has stage {:?}, expected {:?}", path.display(), cfg.stage, want);
    }
    Ok(cfg)
}

fn eval_config(path: &Path, mode: Option<ModeArg>, split: Option<SplitArg>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(m) = mode {
        cfg.eval_mode = m.into();
    }
    if let Some(s) = split {
        cfg.eval_split = match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        };
    }
    if cfg.stage != Stage::Eval {
        cfg.checkpoint = Some(cfg.output.join("best.ckpt"));
        cfg.output = cfg
            .output
            .join(format!("eval_{}_{}", cfg.eval_mode.name(), cfg.eval_split.name()));
        cfg.stage = Stage::Eval;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { manifest, out, seed } => {
            let mut m = match manifest {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    BenchmarkManifest::from_toml(&text)?
                }
                None => default_manifest(),
            };
            if let Some(s) = seed {
                m.seed = s;
            }
            let summary = generate_benchmark(&m, &out)?;
            for (split, counts) in &summary.counts {
                let total: usize = counts.values().sum();
                println!("{split}: {total} samples over {} classes", counts.len());
            }
            println!("fingerprint {}", summary.fingerprint);
        }
        Command::DefaultManifest { out } => {
            std::fs::write(&out, default_manifest().to_toml()).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Pretrain { config } => {
            let out = train_pretrain(&load_config(&config, Stage::Pretrain)?)?;
            println!("best epoch {} (val seg HM {:.2})", out.best.epoch, out.best.best_val_hm);
        }
        Command::TrainDcc { config } => {
            let out = train_dcc(&load_config(&config, Stage::Dcc)?)?;
            println!("best epoch {} (val seg HM {:.2})", out.best.epoch, out.best.best_val_hm);
        }
        Command::Eval { config, mode, split } => {
            let cfg = eval_config(&config, mode, split)?;
            let (report, _) = evaluate(&cfg)?;
            print!("{}", report.to_table());
            println!("outputs in {}", cfg.output.display());
        }
        Command::Report { dump, format } => {
            let report = PredictionDump::load(&dump)?.report()?;
            let text = match format {
                Format::Table => report.to_table(),
                Format::Csv => report.to_csv(),
                Format::Svg => report.to_svg(),
                Format::Json => report.to_json(),
            };
            print!("{text}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
