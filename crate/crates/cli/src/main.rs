//! `grouppose` command-line driver.
//!
//! Exit codes: 0 success, 1 domain error (bad data, non-finite loss, failed
//! check), 2 usage error.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use grouppose::gradcheck::{run_suite, Tolerance};
use grouppose::io::write_atomic;
use grouppose::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use grouppose::selector::harden;
use grouppose::synthdata::{
    generate_dataset, load_dataset, GeneratorConfig, PlantedGrouping, JOINT_NAMES,
};
use grouppose::training_eval::{
    default_thresholds, evaluate, threshold_range, train_with, MetricsReport, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "grouppose",
    version,
    about = "Grouped 3D hand-pose estimation on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        side: usize,
        /// Number of planted joint groups.
        #[arg(long, default_value_t = 3, value_parser = parse_planted)]
        groups_planted: usize,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with optional [model] and [train] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lr_selector: Option<f64>,
        #[arg(long)]
        lr_fusion: Option<f64>,
        #[arg(long)]
        lr_backbone: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Loss trace CSV (step, loss).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a metrics JSON document.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `start:end:step` in mm, or a comma-separated list.
        #[arg(long)]
        thresholds: Option<String>,
        /// Also report errors after similarity alignment.
        #[arg(long)]
        align: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the hardened joint groups of a checkpoint.
    Groups {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Export the PCK curve of a metrics document as CSV.
    PlotPck {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Check reverse-mode gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_planted(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(g @ (1 | 2 | 3 | 5)) => Ok(g),
        _ => Err("supported values are 1, 2, 3 and 5".into()),
    }
}

/// An invocation that parsed but cannot be honoured as written.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            out,
            samples,
            seed,
            side,
            groups_planted,
        } => cmd_gen(&out, samples, seed, side, groups_planted),
        Command::Train {
            data,
            out,
            config,
            k,
            steps,
            batch,
            beta,
            lr_selector,
            lr_fusion,
            lr_backbone,
            seed,
            trace,
        } => {
            let file = match &config {
                Some(p) => read_config(p)?,
                None => FileConfig::default(),
            };
            let overrides = TrainFlags {
                k,
                steps,
                batch,
                beta,
                lr_selector,
                lr_fusion,
                lr_backbone,
                seed,
            };
            cmd_train(&data, &out, trace.as_deref(), file, overrides)
        }
        Command::Eval {
            model,
            data,
            thresholds,
            align,
            out,
        } => {
            let thresholds = match thresholds {
                Some(s) => parse_thresholds(&s)?,
                None => default_thresholds(),
            };
            cmd_eval(&model, &data, &thresholds, align, &out)
        }
        Command::Groups { model, json } => cmd_groups(&model, json),
        Command::PlotPck { metrics, out_csv } => cmd_plot_pck(&metrics, &out_csv),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn cmd_gen(out: &Path, samples: usize, seed: u64, side: usize, groups: usize) -> Result<()> {
    if samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let mut config = GeneratorConfig::for_side(side).map_err(|e| usage(e.to_string()))?;
    config.planted = PlantedGrouping::new(groups)?;
    let header = generate_dataset(samples, seed, out, &config)?;
    eprintln!(
        "wrote {} samples ({}x{}) to {}",
        header.count,
        side,
        side,
        out.display()
    );
    Ok(())
}

/// Config-file layout: `[model]` mirrors the model configuration and
/// `[train]` the training configuration; both are optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<toml::Table>,
    train: Option<TrainConfig>,
}

fn read_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

struct TrainFlags {
    k: Option<usize>,
    steps: Option<usize>,
    batch: Option<usize>,
    beta: Option<f64>,
    lr_selector: Option<f64>,
    lr_fusion: Option<f64>,
    lr_backbone: Option<f64>,
    seed: Option<u64>,
}

fn cmd_train(
    data: &Path,
    out: &Path,
    trace: Option<&Path>,
    file: FileConfig,
    flags: TrainFlags,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let header = &dataset.header;

    let table = file.model.unwrap_or_default();
    for (key, found) in [("joints", header.joints), ("side", header.side)] {
        if let Some(v) = table.get(key) {
            if v.as_integer() != Some(found as i64) {
                return Err(usage(format!(
                    "config sets model.{key} = {v} but the data has {found}"
                )));
            }
        }
    }
    let mut model: ModelConfig = table
        .try_into()
        .map_err(|e| usage(format!("[model] section: {e}")))?;
    model.joints = header.joints;
    model.side = header.side;
    if let Some(k) = flags.k {
        model.groups = k;
    }
    model.validate().map_err(|e| usage(e.to_string()))?;

    let mut train = file.train.unwrap_or_default();
    if let Some(v) = flags.steps {
        train.steps = v;
    }
    if let Some(v) = flags.batch {
        train.batch = v;
    }
    if let Some(v) = flags.beta {
        train.beta = v;
    }
    if let Some(v) = flags.lr_selector {
        train.lr.selector = v;
    }
    if let Some(v) = flags.lr_fusion {
        train.lr.fusion = v;
    }
    if let Some(v) = flags.lr_backbone {
        train.lr.backbone = v;
    }
    if let Some(v) = flags.seed {
        train.seed = v;
    }
    train.validate().map_err(|e| usage(e.to_string()))?;

    let mut params = ModelParams::init(&model, train.seed)?;
    eprintln!(
        "training K={} on {} samples: {} parameters, {} steps",
        model.groups,
        dataset.len(),
        params.parameter_count(),
        train.steps
    );
    let outcome = train_with(&mut params, &dataset.samples, &train, |step, loss| {
        eprintln!("step {step:>7}  loss {loss:.4}");
    })?;
    save_checkpoint(&params, out)?;
    if let Some(path) = trace {
        write_atomic(path, |w| {
            let mut body = String::from("step,loss\n");
            for (step, loss) in &outcome.trace {
                body.push_str(&format!("{step},{loss}\n"));
            }
            w.write_all(body.as_bytes())
                .map_err(|e| grouppose::Error::io(path, e))
        })?;
    }
    eprintln!("wrote checkpoint {}", out.display());
    Ok(())
}

fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let bad = || {
        usage(format!(
            "cannot parse thresholds {spec:?}; use start:end:step or a comma list"
        ))
    };
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let [a, b, s] = parts[..] else {
            return Err(bad());
        };
        threshold_range(a, b, s).map_err(|e| usage(e.to_string()))?
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?
    };
    if values.is_empty() || values.windows(2).any(|w| !(w[1] > w[0])) || values[0] < 0.0 {
        return Err(usage(
            "thresholds must be non-negative and strictly increasing",
        ));
    }
    Ok(values)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| {
        w.write_all(text.as_bytes())
            .map_err(|e| grouppose::Error::io(path, e))
    })?;
    Ok(())
}

fn cmd_eval(model: &Path, data: &Path, thresholds: &[f64], align: bool, out: &Path) -> Result<()> {
    let params = load_checkpoint(model)?;
    let dataset = load_dataset(data)?;
    let h = &dataset.header;
    if h.joints != params.config.joints || h.side != params.config.side {
        bail!(
            "checkpoint expects {} joints at side {}, data has {} at side {}",
            params.config.joints,
            params.config.side,
            h.joints,
            h.side
        );
    }
    let report = evaluate(
        &params,
        &dataset.samples,
        h.planted.labels(),
        thresholds,
        align,
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    write_text(out, &(json + "\n"))?;
    println!(
        "mean EPE {:.3} mm  median {:.3} mm  AUC {:.4}  ARI {:.3}",
        report.mean_epe_mm, report.median_epe_mm, report.auc, report.ari
    );
    if let Some(a) = &report.aligned {
        println!(
            "aligned: mean EPE {:.3} mm  median {:.3} mm  AUC {:.4}",
            a.mean_epe_mm, a.median_epe_mm, a.auc
        );
    }
    Ok(())
}

fn joint_name(i: usize, joints: usize) -> String {
    if joints == JOINT_NAMES.len() {
        JOINT_NAMES[i].to_string()
    } else {
        format!("joint_{i}")
    }
}

fn cmd_groups(model: &Path, json: bool) -> Result<()> {
    let params = load_checkpoint(model)?;
    let selector = harden(&params.selector);
    let n = selector.joints();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if json {
        let joints: Vec<serde_json::Value> = selector
            .assignment()
            .iter()
            .enumerate()
            .map(|(i, &g)| serde_json::json!({ "index": i, "name": joint_name(i, n), "group": g }))
            .collect();
        let doc = serde_json::json!({
            "groups": selector.groups(),
            "joints": joints,
            "rosters": selector.partition(),
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    } else {
        writeln!(out, "{:>5}  {:<12}  group", "joint", "name")?;
        for (i, &g) in selector.assignment().iter().enumerate() {
            writeln!(out, "{i:>5}  {:<12}  {g}", joint_name(i, n))?;
        }
        for (g, members) in selector.partition().iter().enumerate() {
            let names: Vec<String> = members.iter().map(|&i| joint_name(i, n)).collect();
            writeln!(
                out,
                "group {g}: {}",
                if names.is_empty() {
                    "(empty)".into()
                } else {
                    names.join(", ")
                }
            )?;
        }
    }
    Ok(())
}

fn cmd_plot_pck(metrics: &Path, out_csv: &Path) -> Result<()> {
    let text = std::fs::read_to_string(metrics)
        .with_context(|| format!("cannot read {}", metrics.display()))?;
    let report: MetricsReport = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a metrics document", metrics.display()))?;
    let mut csv = String::from("threshold_mm,pck\n");
    for (t, p) in &report.pck {
        csv.push_str(&format!("{t},{p}\n"));
    }
    write_text(out_csv, &csv)
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let tol = Tolerance::default();
    let reports = run_suite(seed, 20, &tol)?;
    let mut failed = 0;
    println!(
        "{:<20} {:>9} {:>8}  worst rel. error",
        "operation", "instances", "failures"
    );
    for r in &reports {
        let worst = r.worst.map_or("-".to_string(), |w| format!("{w:.3e}"));
        println!(
            "{:<20} {:>9} {:>8}  {}",
            r.name, r.instances, r.failures, worst
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!("{failed} operation(s) failed the gradient check");
    }
    println!(
        "all {} operations agree with central differences (h={}, rel {}, abs {})",
        reports.len(),
        tol.step,
        tol.rel,
        tol.abs
    );
    Ok(())
}
