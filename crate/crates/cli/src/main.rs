use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use jointseg::ablate::{ablate, Grid, Table, PRESETS};
use jointseg::config::Config;
use jointseg::gradcheck::run_suite;
use jointseg::train::{evaluate, load_checkpoint, load_data, train, EvalReport, RunDir, RunRecord};
use jointseg::worldgen::{generate_dataset, write_dataset};

mod plot;

#[derive(Parser)]
#[command(name = "jointseg", version, about = "Joint semantic segmentation and stereo matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus `section.key=value` overrides, applied in order.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.alpha=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => Config::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic stereo scenes, one directory each.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; checkpoints, the run record and the config go to `--out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its own data settings or on `--data`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of sample directories as written by `gen`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable op and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every cell of a grid over several seeds.
    Ablate {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        grid: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Synthetic scenes to generate when `train.data` is unset.
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        /// Scenes held out for evaluation (taken from the end).
        #[arg(long, default_value_t = 16)]
        holdout: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render loss curves from run records and bar charts from ablation tables.
    Plot {
        /// `record.jsonl` files; all curves share one chart.
        #[arg(long = "record")]
        records: Vec<PathBuf>,
        /// Ablation tables written by `ablate --out`; each becomes `<stem>.svg`.
        #[arg(long = "table")]
        tables: Vec<PathBuf>,
        /// Output directory for the SVG files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_report(r: &EvalReport) {
    print!("{}{}", r.seg, r.stereo);
    println!("{:<6} {:8.4}", "disagr", r.disagreement);
    println!("{:<6} {:8}", "n", r.samples);
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { n, seed, out, cfg } => {
            let mut spec = cfg.resolve()?.data.scene;
            spec.seed = seed;
            let samples = generate_dataset(&spec, n)?;
            write_dataset(&samples, &out)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            let data = load_data(&cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut run = train(&cfg, &data, &RunDir(Some(out.clone())))?;
            print_report(&evaluate(&run.model, &mut run.store, &data, &cfg)?);
        }
        Command::Eval { checkpoint, data } => {
            let mut ck = load_checkpoint(&checkpoint)?;
            if data.is_some() {
                ck.config.train.data = data;
            }
            let samples = load_data(&ck.config)?;
            print_report(&evaluate(&ck.model, &mut ck.store, &samples, &ck.config)?);
        }
        Command::Gradcheck { seed } => {
            let results = run_suite(seed);
            let mut failed = 0;
            for r in &results {
                match &r.outcome {
                    Ok(rep) if r.passed() => println!("ok   {:<24} max rel err {:.2e}", r.name, rep.max_rel_err),
                    Ok(rep) => {
                        failed += 1;
                        println!("FAIL {:<24} max rel err {:.2e}", r.name, rep.max_rel_err);
                    }
                    Err(e) => {
                        failed += 1;
                        println!("FAIL {:<24} {e}", r.name);
                    }
                }
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate { grid, seeds, scenes, holdout, cfg, out } => {
            let cfg = cfg.resolve()?;
            let grid = Grid::preset(&grid)?;
            let data = match &cfg.train.data {
                Some(_) => load_data(&cfg)?,
                None => generate_dataset(&cfg.data.scene, scenes)?,
            };
            if holdout == 0 || holdout >= data.len() {
                bail!("--holdout must leave scenes on both sides of a {}-scene set", data.len());
            }
            let (train_set, eval_set) = data.split_at(data.len() - holdout);
            let table = ablate(&cfg, &grid, &seeds, train_set, eval_set)?;
            print!("{table}");
            if let Some(p) = out {
                write_json(&p, &table)?;
            }
        }
        Command::Plot { records, tables, out } => {
            if records.is_empty() && tables.is_empty() {
                bail!("nothing to plot: pass --record and/or --table");
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            if !records.is_empty() {
                let runs = records
                    .iter()
                    .map(|p| Ok((label(p), RunRecord::load(p)?)))
                    .collect::<Result<Vec<_>>>()?;
                let path = out.join("loss.svg");
                plot::loss_curves(&runs, &path)?;
                println!("{}", path.display());
            }
            for t in &tables {
                let text = std::fs::read_to_string(t).with_context(|| format!("reading {}", t.display()))?;
                let table: Table = serde_json::from_str(&text).with_context(|| format!("parsing {}", t.display()))?;
                let stem = t.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "table".into());
                let path = out.join(format!("{stem}.svg"));
                plot::ablation_bars(&table, &path)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Legend label for a record: its run directory, or the file stem.
fn label(p: &Path) -> String {
    p.parent()
        .and_then(|d| d.file_name())
        .or_else(|| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn write_json(path: &Path, table: &Table) -> Result<()> {
    let text = serde_json::to_string_pretty(table)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
