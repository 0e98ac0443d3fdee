//! `bilex`: command-line front end for the QE pipeline.
//!
//! Exit status is 0 on success, 1 for invalid input or configuration and 2
//! for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bilex_core::metrics::MetricReport;
use bilex_core::pipeline::{
    cmd_eval, cmd_label, cmd_pipeline, cmd_predict, cmd_synth, Pipeline, PredictRequest, RunConfig, RunLayout,
    StageRecord,
};
use bilex_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bilex", version, about = "Translation quality estimation with a bilingual expert")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory of the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task into the data directory.
    Synth,
    /// Compute HTER, word tags and gap tags from MT and post-edits.
    Label {
        #[arg(long)]
        mt: PathBuf,
        #[arg(long)]
        pe: PathBuf,
        /// Writes `<STEM>.hter`, `<STEM>.tags`, `<STEM>.gap_tags`.
        #[arg(long)]
        out_stem: PathBuf,
    },
    /// Combine corpora and pretrain the expert.
    Pretrain,
    /// Extract features for train, dev and test.
    Extract,
    /// Train the QE ensemble and tune thresholds on dev.
    TrainQe,
    /// Predict quality for source/MT files without references.
    Predict(PredictArgs),
    /// Score prediction files against gold labels.
    Eval {
        /// Prediction stem (`<STEM>.hter` etc).
        #[arg(long)]
        pred: PathBuf,
        /// Gold label stem.
        #[arg(long)]
        gold: PathBuf,
    },
    /// Run every stage, reusing fresh artifacts.
    Pipeline,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    mt: PathBuf,
    /// Defaults to the run's expert checkpoint.
    #[arg(long)]
    expert: Option<PathBuf>,
    /// Repeat for an ensemble. Defaults to the run's QE models.
    #[arg(long = "qe")]
    qe: Vec<PathBuf>,
    /// Defaults to the run's tuned thresholds.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Output file stem; defaults to `<out>/predictions/pred`.
    #[arg(long)]
    stem: Option<PathBuf>,
    /// Rejected: prediction never reads post-edits.
    #[arg(long)]
    pe: Option<PathBuf>,
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_stage(r: &StageRecord) {
    println!("{:<9} {:<8} {:>8.2}s", r.name, r.status.to_string(), r.seconds);
    for (k, v) in &r.notes {
        println!("    {k} = {v}");
    }
}

fn print_report(r: &MetricReport) {
    print!("{r}");
}

fn predict(cfg: &RunConfig, a: PredictArgs) -> Result<()> {
    let run = RunLayout::new(cfg);
    let stem = a.stem.unwrap_or_else(|| run.predictions_dir().join("pred"));
    let (out_dir, stem_name) = split_stem(&stem)?;
    let thresholds = match a.thresholds {
        Some(t) => Some(t),
        None => Some(run.thresholds_path()).filter(|p| p.is_file()),
    };
    let req = PredictRequest {
        expert: a.expert.unwrap_or_else(|| run.expert_path()),
        qe_models: if a.qe.is_empty() { run.qe_model_paths() } else { a.qe },
        thresholds,
        src: a.src,
        mt: a.mt,
        out_dir,
        stem: stem_name,
        threads: cfg.threads,
        reference: a.pe,
    };
    let out = cmd_predict(&req)?;
    println!("predicted {} sentences into {}", out.sentences, stem.display());
    for (p, h) in &out.inputs {
        log::info!("read {} ({h})", p.display());
    }
    Ok(())
}

fn split_stem(stem: &Path) -> Result<(PathBuf, String)> {
    let name = stem
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("invalid output stem {}", stem.display())))?;
    let dir = stem.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, name.to_string()))
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = run_config(&cli.global)?;
    match cli.command {
        Command::Synth => {
            let s = cmd_synth(&cfg)?;
            println!(
                "wrote {} parallel pairs and {}/{}/{} train/dev/test triplets to {}",
                s.parallel,
                s.train,
                s.dev,
                s.test,
                cfg.data_dir().display()
            );
        }
        Command::Label { mt, pe, out_stem } => {
            let n = cmd_label(&mt, &pe, &out_stem)?;
            println!("labelled {n} sentences");
        }
        Command::Pretrain => {
            let p = Pipeline::new(cfg)?;
            print_stage(&p.combine()?);
            print_stage(&p.pretrain()?);
        }
        Command::Extract => print_stage(&Pipeline::new(cfg)?.extract()?),
        Command::TrainQe => print_stage(&Pipeline::new(cfg)?.train_qe()?),
        Command::Predict(a) => predict(&cfg, a)?,
        Command::Eval { pred, gold } => print_report(&cmd_eval(&pred, &gold, cfg.tasks)?),
        Command::Pipeline => {
            let m = cmd_pipeline(&cfg)?;
            for r in &m.stages {
                print_stage(r);
            }
            print_report(&m.metrics);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
