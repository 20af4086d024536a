//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{DataSource, Method, RunConfig};
use crate::data;
use crate::error::{Error, Result};
use crate::metrics::{self, StepReport};
use crate::model::SegNet;
use crate::train::{self, CONFIG_FILE, CSV_FILE};

#[derive(Parser, Debug)]
#[command(name = "css", version, about = "Continual semantic segmentation on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the configured shapes dataset as `OUT/train` and `OUT/test`.
    Generate(Common),
    /// Train every step of the configured scenario into a run directory.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured method (plop, finetune, kd).
        #[arg(long)]
        method: Option<String>,
    },
    /// Recompute the metrics of one checkpoint.
    Eval {
        /// Checkpoint directory (a `step_N` directory of a run).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test dataset directory; defaults to the test set of the run's config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Summarize finished runs: initial / incremented / all / avg per method.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!("config file {} does not exist", path.display())));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out in the config".into()))
}

pub fn cmd_generate(common: &Common) -> Result<String> {
    let cfg = load_config(common)?;
    let DataSource::Shapes(shapes) = &cfg.data else {
        return Err(Error::Config("generate needs shapes.* settings, not data.train/data.test".into()));
    };
    let mut shapes = shapes.clone();
    if let Some(seed) = common.seed {
        shapes.seed = seed;
    }
    let out = out_dir(&cfg)?;
    let (train, test) = data::generate(&shapes)?;
    data::save_dataset(&train, &out.join("train"))?;
    data::save_dataset(&test, &out.join("test"))?;
    Ok(format!(
        "wrote {} train and {} test images to {}\n",
        train.len(),
        test.len(),
        out.display()
    ))
}

pub fn cmd_run(common: &Common, method: Option<&str>) -> Result<String> {
    let mut cfg = load_config(common)?;
    if let Some(m) = method {
        cfg.method = m.parse()?;
    }
    let out = out_dir(&cfg)?;
    let outcome = train::run_continual::<f64>(&cfg, Some(&out))?;
    let mut text = metrics::to_text(&outcome.reports);
    text.push_str(&format!("run written to {}\n", out.display()));
    Ok(text)
}

/// Metrics of the checkpoint in `dir` on `data` (or the run's test set).
pub fn eval_checkpoint(dir: &Path, data_dir: Option<&Path>) -> Result<StepReport> {
    let (model, meta) = SegNet::<f64>::load(dir)?;
    let test = match data_dir {
        Some(d) => data::load_dataset(d)?,
        None => {
            let cfg_path = dir.parent().map(|p| p.join(CONFIG_FILE)).unwrap_or_default();
            if !cfg_path.exists() {
                return Err(Error::Config(format!(
                    "no --data given and {} does not exist",
                    cfg_path.display()
                )));
            }
            train::load_data(&RunConfig::load(&cfg_path)?)?.1
        }
    };
    if test.n_classes + 1 < model.n_outputs() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model.n_outputs(),
            test.n_classes + 1
        )));
    }
    let mut report = train::report_for(meta.step, &model, &test.samples, &meta.initial_classes)?;
    report.avg_so_far = f64::NAN;
    report.loss_pseudo = f64::NAN;
    report.loss_distill = f64::NAN;
    report.seconds = f64::NAN;
    Ok(report)
}

pub fn cmd_eval(checkpoint: &Path, data_dir: Option<&Path>) -> Result<String> {
    let r = eval_checkpoint(checkpoint, data_dir)?;
    let mut text = format!(
        "step {}\nmiou_initial {}\nmiou_incremented {}\nmiou_all {}\n",
        r.step, r.miou_initial, r.miou_incremented, r.miou_all
    );
    for (id, v) in &r.per_class_iou {
        text.push_str(&format!("class {id} iou {}\n", v.unwrap_or(f64::NAN)));
    }
    Ok(text)
}

/// Final-step metrics of one finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run: PathBuf,
    pub method: Method,
    pub steps: usize,
    pub miou_initial: f64,
    pub miou_incremented: f64,
    pub miou_all: f64,
    pub avg: f64,
}

pub fn summarize(run: &Path) -> Result<RunSummary> {
    let cfg = RunConfig::load(&run.join(CONFIG_FILE))?;
    let csv_path = run.join(CSV_FILE);
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let rows = metrics::parse_csv(&text).map_err(|e| Error::data(&csv_path, e.to_string()))?;
    let last = rows.last().ok_or_else(|| Error::data(&csv_path, "report has no steps"))?;
    Ok(RunSummary {
        run: run.to_path_buf(),
        method: cfg.method,
        steps: last.step,
        miou_initial: last.miou_initial,
        miou_incremented: last.miou_incremented,
        miou_all: last.miou_all,
        avg: last.avg_so_far,
    })
}

pub fn cmd_report(runs: &[PathBuf]) -> Result<String> {
    let pct = |v: f64| if v.is_nan() { "n/a".to_string() } else { format!("{:.2}", 100.0 * v) };
    let mut text = format!(
        "{:<10} {:>5} {:>8} {:>12} {:>8} {:>8}  run\n",
        "method", "steps", "initial", "incremented", "all", "avg"
    );
    for run in runs {
        let s = summarize(run)?;
        text.push_str(&format!(
            "{:<10} {:>5} {:>8} {:>12} {:>8} {:>8}  {}\n",
            s.method.to_string(),
            s.steps,
            pct(s.miou_initial),
            pct(s.miou_incremented),
            pct(s.miou_all),
            pct(s.avg),
            s.run.display()
        ));
    }
    Ok(text)
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Generate(common) => cmd_generate(common),
        Command::Run { common, method } => cmd_run(common, method.as_deref()),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data.as_deref()),
        Command::Report { runs } => cmd_report(runs),
    }
}
