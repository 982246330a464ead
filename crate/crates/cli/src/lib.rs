//! The `gcdlab` command line: data generation, training, evaluation,
//! gradient checks and ablation sweeps.
//!
//! Configuration is resolved in order: defaults (or `--preset`), `--config`
//! file, `GCDLAB_*` environment variables, then `--seed` / `--dataset`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gcdlab_core::checkpoint::{load_model, save_model};
use gcdlab_core::checks::{run_gradchecks, GradcheckOptions};
use gcdlab_core::config::RunConfig;
use gcdlab_core::data::{save_dataset, DatasetSummary};
use gcdlab_core::eval::{evaluate, EvalReport, MetricsRecord};
use gcdlab_core::train::{prepare_dataset, run_ablation, train_with};
use gcdlab_core::AblationRow;

#[derive(Parser, Debug)]
#[command(name = "gcdlab", version, about = "Generalized category discovery on synthetic features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `section.key = value` file applied on top of the preset.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Starting point: easy, hard or label25 (default: built-in defaults).
    #[arg(long)]
    pub preset: Option<String>,
    /// Sets both train.seed and data.seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Read this GCDS file instead of generating data.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output GCDS file.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train one model and write metrics, curves and a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write eval.json here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "N", default_value_t = 20)]
        draws: usize,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
        /// Also write gradcheck.json here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train every (row, seed) pair of the ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "N,N,...", value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_name = "ROW,...", value_delimiter = ',', default_value = "a,b,c,d,e,f,g,h")]
        rows: Vec<AblationRow>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

/// Resolves the run configuration from flags and the process environment.
pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    resolve_config_with_env(args, std::env::vars())
}

pub fn resolve_config_with_env<I>(args: &ConfigArgs, env: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut c = match &args.preset {
        Some(p) => RunConfig::preset(p)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        c.merge_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
    }
    c.apply_env(env)?;
    if let Some(s) = args.seed {
        c.train.seed = s;
        c.data.seed = s;
    }
    if let Some(p) = &args.dataset {
        c.dataset = Some(p.clone());
    }
    c.validate()?;
    Ok(c)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Timing and bookkeeping; the only output that differs between identical runs.
#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub dataset: DatasetSummary,
    pub epochs: usize,
    pub wall_clock_secs: f64,
    pub warnings: std::collections::BTreeMap<String, usize>,
}

const CURVE_HEADER: [&str; 20] = [
    "epoch",
    "loss_total",
    "loss_cls",
    "loss_sup",
    "loss_sup_ce",
    "loss_supcon",
    "loss_self",
    "entropy",
    "loss_distill",
    "loss_aux",
    "loss_cdr_main",
    "loss_cdr_aux",
    "pseudo_base_frac",
    "acc_all",
    "acc_base",
    "acc_novel",
    "ob",
    "sup_ce",
    "cpd_rmse_base",
    "cpd_rmse_novel",
];

fn curve_row(m: &MetricsRecord) -> Vec<String> {
    let l = &m.losses;
    let mut row = vec![m.epoch.to_string()];
    row.extend(
        [
            l.total,
            l.cls,
            l.sup,
            l.sup_ce,
            l.supcon,
            l.self_consistency,
            l.entropy,
            l.distill,
            l.aux,
            l.cdr_main,
            l.cdr_aux,
            l.pseudo_base_frac,
            m.acc_all,
            m.acc_base,
            m.acc_novel,
            m.ob,
            m.sup_ce,
            m.cpd_rmse_base,
            m.cpd_rmse_novel,
        ]
        .iter()
        .map(|v| v.to_string()),
    );
    row
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<DatasetSummary> {
    if cfg.dataset.is_some() {
        bail!("gen writes a new dataset; drop --dataset / data.path");
    }
    let ds = prepare_dataset(cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_dataset(&ds, out)?;
    Ok(ds.summary())
}

/// Trains and writes `metrics.jsonl`, `curves.csv`, `final.json`,
/// `model.gcdm`, `config.txt` and `summary.json` into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<MetricsRecord> {
    create_dir(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let ds = prepare_dataset(cfg)?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut curves = csv::Writer::from_path(out.join("curves.csv"))?;
    curves.write_record(CURVE_HEADER)?;
    let mut io_err: Option<anyhow::Error> = None;
    let t0 = Instant::now();
    let outcome = train_with(cfg, &ds, |m| {
        if io_err.is_some() {
            return;
        }
        let r = (|| -> Result<()> {
            serde_json::to_writer(&mut metrics, m)?;
            metrics.write_all(b"\n")?;
            metrics.flush()?;
            curves.write_record(curve_row(m))?;
            curves.flush()?;
            Ok(())
        })();
        if let Err(e) = r {
            io_err = Some(e);
        }
    })?;
    let secs = t0.elapsed().as_secs_f64();
    if let Some(e) = io_err {
        return Err(e.context("writing metrics"));
    }
    let last = outcome.final_metrics().clone();
    write_json(&out.join("final.json"), &last)?;
    save_model(&outcome.model, &out.join("model.gcdm"))?;
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            dataset: ds.summary(),
            epochs: cfg.train.epochs,
            wall_clock_secs: secs,
            warnings: outcome.warnings,
        },
    )?;
    Ok(last)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let model = load_model(checkpoint)?;
    let ds = prepare_dataset(cfg)?;
    Ok(evaluate(&model, &ds, cfg.loss.tau_s)?)
}

fn parse_and_run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { cfg, out } => {
            let c = resolve_config(&cfg)?;
            let s = cmd_gen(&c, &out)?;
            println!(
                "wrote {}: N={} d_in={} K={} K_base={} labeled={} unlabeled={} (base {}, novel {})",
                out.display(),
                s.n,
                s.d_in,
                s.k_all,
                s.k_base,
                s.labeled,
                s.unlabeled,
                s.unlabeled_base,
                s.novel
            );
        }
        Command::Train { cfg, out } => {
            let c = resolve_config(&cfg)?;
            let m = cmd_train(&c, &out)?;
            println!(
                "epoch {}: All {:.4} Base {:.4} Novel {:.4} OB {:.4} SupCE {:.4} (outputs in {})",
                m.epoch,
                m.acc_all,
                m.acc_base,
                m.acc_novel,
                m.ob,
                m.sup_ce,
                out.display()
            );
        }
        Command::Eval { checkpoint, cfg, out } => {
            let c = resolve_config(&cfg)?;
            let r = cmd_eval(&c, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_json(&dir.join("eval.json"), &r)?;
            }
        }
        Command::Gradcheck {
            seed,
            draws,
            inject_sign_flip,
            out,
        } => {
            if draws == 0 {
                bail!("--draws must be at least 1");
            }
            let s = run_gradchecks(&GradcheckOptions {
                draws,
                seed,
                inject_sign_flip,
            })?;
            print!("{}", s.table());
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_json(&dir.join("gradcheck.json"), &s)?;
            }
            if !s.passed() {
                eprintln!("gradient check failed");
                return Ok(false);
            }
        }
        Command::Ablate { cfg, seeds, rows, out } => {
            if cfg.seed.is_some() {
                bail!("ablate takes --seeds, not --seed");
            }
            let c = resolve_config(&cfg)?;
            create_dir(&out)?;
            let t0 = Instant::now();
            let report = run_ablation(&c, &rows, &seeds)?;
            let runs = out.join("runs");
            create_dir(&runs)?;
            for r in &report.runs {
                write_json(&runs.join(format!("{}_{}.json", r.row.label(), r.seed)), &r.metrics)?;
            }
            write_json(&out.join("ablation.json"), &report)?;
            let mut table = report.table();
            for d in report.directions() {
                table.push_str(&format!("{d}\n"));
            }
            fs::write(out.join("ablation.txt"), &table)?;
            print!("{table}");
            println!("{} runs in {:.1}s", report.runs.len(), t0.elapsed().as_secs_f64());
        }
    }
    Ok(true)
}

/// Runs the CLI on `args` (including the program name); returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match parse_and_run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
