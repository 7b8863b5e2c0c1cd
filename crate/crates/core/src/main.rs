use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use h2g::config::RunConfig;
use h2g::pipeline::{self, Outcome, PipelineError, Workspace};

#[derive(Parser)]
#[command(name = "h2g", version, about = "Two-stage tumour segmentation for tiled slides")]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact
    #[arg(long, global = true, env = "H2G_WORKDIR")]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic slides and a manifest
    Generate {
        /// Inclusive range such as 1..20
        #[arg(long)]
        seeds: String,
        /// Output directory; the workdir when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patch indices and Otsu baseline masks
    Preprocess,
    /// Tissue-type clustering model
    FitCluster,
    /// Patch classifier
    TrainPatch,
    /// Heatmaps and patch-wise masks
    Infer,
    /// Built-in refiner
    RefineTrain,
    /// Refined masks
    Refine,
    /// Reports for every design found in the workdir
    Evaluate,
    /// Stage timings on one slide
    Bench,
}

fn parse_seeds(text: &str) -> Outcome<std::ops::RangeInclusive<u64>> {
    let bad = || PipelineError::Config(format!("--seeds expects a..b, got {text:?}"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

fn run(cli: Cli) -> Outcome<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(w) = &cli.workdir {
        cfg.workdir = Some(w.clone());
    }
    cfg.validate()?;
    println!("config-hash {}", cfg.hash());

    if let Cmd::Generate { seeds, out } = &cli.cmd {
        let out = out
            .clone()
            .or(cfg.workdir.clone())
            .ok_or_else(|| PipelineError::Config("generate needs --out or a workdir".into()))?;
        let m = pipeline::generate(parse_seeds(seeds)?, &out, &cfg)?;
        println!("wrote {} slides to {}", m.entries.len(), out.display());
        return Ok(());
    }

    let root = cfg
        .workdir
        .clone()
        .ok_or_else(|| PipelineError::Config("no workdir: pass --workdir or set H2G_WORKDIR".into()))?;
    let ws = Workspace::open(&root, cfg, cli.quiet)?;
    match cli.cmd {
        Cmd::Generate { .. } => unreachable!(),
        Cmd::Preprocess => pipeline::preprocess(&ws)?,
        Cmd::FitCluster => {
            pipeline::fit_cluster(&ws)?;
        }
        Cmd::TrainPatch => {
            let h = pipeline::train_patch(&ws)?;
            if let Some(best) = h.best_epoch {
                println!("best validation epoch {best} of {}", h.epochs.len());
            }
        }
        Cmd::Infer => pipeline::infer(&ws)?,
        Cmd::RefineTrain => {
            pipeline::refine_train(&ws)?;
        }
        Cmd::Refine => pipeline::refine(&ws)?,
        Cmd::Evaluate => {
            println!("design,slides,recall,precision,dsc");
            for r in pipeline::evaluate(&ws)? {
                let o = &r.overall;
                println!(
                    "{},{},{:.4}±{:.4},{:.4}±{:.4},{:.4}±{:.4}",
                    r.design,
                    o.count,
                    o.recall.mean,
                    o.recall.std,
                    o.precision.mean,
                    o.precision.std,
                    o.dsc.mean,
                    o.dsc.std
                );
            }
        }
        Cmd::Bench => print!("{}", pipeline::bench(&ws)?.to_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
