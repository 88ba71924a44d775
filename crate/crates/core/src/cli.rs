//! Command-line front end: `synth`, `noise`, `train`, `eval`, `report`.
//!
//! Failures print a single `error kind=<tag> msg=<json string>` line on
//! stderr. Usage problems (bad flags, paths, configs) exit with 2, runtime
//! failures with 1.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::datasets::{inject_idn_with, inject_symmetric, load_dataset, save_dataset, synth_shapes, IdnParams};
use crate::trainer::{
    deterministic_mode, evaluate, read_metrics, write_report, ReportRow, TrainConfig, Trainer, CONFIG_FILE,
    CONFIG_KEYS, METRICS_FILE,
};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "instancegm",
    version,
    about = "Train image classifiers on instance-dependent noisy labels"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Idn,
    Symmetric,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a clean synthetic shapes dataset.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt the labels of a dataset.
    Noise {
        #[arg(long, value_enum)]
        kind: NoiseArg,
        #[arg(long)]
        rate: f64,
        /// Spread of the per-example flip rate (idn only).
        #[arg(long, default_value_t = 0.1)]
        rate_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up and train a dual model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset with clean labels, evaluated every epoch.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON config file; keys not present keep the profile value.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key, e.g. `--set tau=0.6`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint directory instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print the test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Collect finished runs into a CSV table and optional SVG plots.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plots: Option<PathBuf>,
    },
}

/// `--help` epilogue of `train`: every config key with its default.
pub fn config_help() -> String {
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serialises");
    let mut s = String::from("Config keys (desk profile defaults):\n");
    for (key, note) in CONFIG_KEYS {
        let _ = writeln!(s, "  {key:<20} {:<8} {note}", defaults[*key].to_string());
    }
    s
}

fn command() -> clap::Command {
    Cli::command().mut_subcommand("train", |c| c.after_help(config_help()))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Param(_) | Error::Config(_) | Error::Format(_) | Error::Io { .. } | Error::Json(_) | Error::State(_) => {
            2
        }
        _ => 1,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match run(cli) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            0
        }
        Err(e) => {
            eprintln!(
                "error kind={} msg={}",
                e.kind(),
                serde_json::Value::String(e.to_string())
            );
            exit_code(&e)
        }
    }
}

/// Runs a parsed command and returns what it prints on success.
pub fn run(cli: Cli) -> Result<String> {
    deterministic_mode();
    match cli.command {
        Command::Synth {
            classes,
            per_class,
            side,
            seed,
            out,
        } => {
            let ds = synth_shapes(classes, per_class, side, seed)?;
            save_dataset(&ds, &out)?;
            Ok(format!("wrote {} examples to {}", ds.len(), out.display()))
        }
        Command::Noise {
            kind,
            rate,
            rate_std,
            seed,
            input,
            out,
        } => {
            let ds = load_dataset(&input)?;
            let noisy = match kind {
                NoiseArg::Idn => inject_idn_with(&ds, IdnParams { rate, rate_std }, seed)?,
                NoiseArg::Symmetric => inject_symmetric(&ds, rate, seed)?,
            };
            save_dataset(&noisy, &out)?;
            Ok(format!("flip_fraction={:.6}", noisy.flip_fraction()?))
        }
        Command::Train {
            data,
            test,
            out,
            config,
            profile,
            seed,
            overrides,
            resume,
        } => {
            let ds = load_dataset(&data)?;
            let test = test.map(load_dataset).transpose()?;
            let mut trainer = match resume {
                Some(ckpt) => Trainer::load_checkpoint(&ckpt)?,
                None => {
                    let cfg = resolve_config(config.as_deref(), &profile, seed, &overrides)?;
                    Trainer::for_dataset(cfg, &ds)?
                }
            };
            let outcome = trainer.run(&ds, test.as_ref(), Some(&out))?;
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "na".into());
            Ok(format!(
                "test_accuracy={} codivide_auc={}",
                fmt(outcome.test_accuracy),
                fmt(outcome.codivide_auc)
            ))
        }
        Command::Eval { ckpt, data } => {
            let trainer = Trainer::load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let acc = evaluate(trainer.final_classifier().as_ref(), &ds)?;
            Ok(format!("{acc:.6}"))
        }
        Command::Report { runs, out, plots } => {
            let mut rows = Vec::new();
            let mut curves = Vec::new();
            for dir in &runs {
                let cfg = TrainConfig::from_json_file(&dir.join(CONFIG_FILE))?;
                let records = read_metrics(&dir.join(METRICS_FILE))?;
                if records.is_empty() {
                    return Err(Error::Format(format!("{} has no metrics", dir.display())));
                }
                rows.push(ReportRow::from_parts(&cfg, records.last(), &dir.display().to_string()));
                curves.push((dir.display().to_string(), records));
            }
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_report(&out, &rows)?;
            if let Some(dir) = plots {
                write_plots(&dir, &curves)?;
            }
            Ok(format!("wrote {} rows to {}", rows.len(), out.display()))
        }
    }
}

/// Profile, then config file, then `--seed`, then `--set` overrides.
pub fn resolve_config(
    file: Option<&Path>,
    profile: &str,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::profile(profile)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config(format!("{} is not a JSON object", path.display())))?;
        for (k, v) in obj {
            cfg.set(k, &v.to_string())?;
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_lines(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<text x=\"{m}\" y=\"25\">{title} (y {y0:.3}..{y1:.3})</text>\n"
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{colour}\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" fill=\"{colour}\" font-size=\"11\">{name}</text>",
            path.join(" "),
            w - 2.0 * m,
            m + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_plots(dir: &Path, runs: &[(String, Vec<crate::trainer::MetricsRecord>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let series = |f: &dyn Fn(&crate::trainer::MetricsRecord) -> Option<f64>| -> Vec<(String, Vec<(f64, f64)>)> {
        runs.iter()
            .map(|(n, recs)| {
                (
                    n.clone(),
                    recs.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect(),
                )
            })
            .collect()
    };
    let write = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("loss.svg", svg_lines("train loss", &series(&|r| Some(r.train_loss))))?;
    write(
        "accuracy.svg",
        svg_lines("test accuracy", &series(&|r| r.test_accuracy)),
    )?;
    write("auc.svg", svg_lines("co-divide AUC", &series(&|r| r.codivide_auc)))?;
    // final clean-probability histogram of the first model, one polyline per run
    let hist = runs
        .iter()
        .map(|(n, recs)| {
            let h = recs
                .last()
                .and_then(|r| r.models.first())
                .map(|m| m.w_hist.clone())
                .unwrap_or_default();
            let pts = h
                .iter()
                .enumerate()
                .map(|(i, &c)| ((i as f64 + 0.5) / h.len() as f64, c as f64))
                .collect();
            (n.clone(), pts)
        })
        .collect::<Vec<_>>();
    write("w_hist.svg", svg_lines("clean-probability histogram", &hist))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_lists_every_key() {
        let h = config_help();
        for (k, _) in CONFIG_KEYS {
            assert!(h.contains(k), "{k}");
        }
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with_args(["instancegm", "frobnicate"]), 2);
        assert_eq!(main_with_args(["instancegm", "synth", "--classes", "4"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing");
        let out = dir.path().join("out");
        assert_eq!(
            main_with_args([
                "instancegm",
                "eval",
                "--ckpt",
                missing.to_str().unwrap(),
                "--data",
                out.to_str().unwrap()
            ]),
            2
        );
        assert_eq!(
            main_with_args([
                "instancegm",
                "synth",
                "--classes",
                "1",
                "--per-class",
                "3",
                "--out",
                out.to_str().unwrap()
            ]),
            2
        );
    }

    #[test]
    fn config_resolution_order() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        fs::write(&f, r#"{"tau": 0.6, "seed": 5, "epochs": 7}"#).unwrap();
        let cfg = resolve_config(Some(&f), "desk", Some(9), &["epochs=3".into()]).unwrap();
        assert_eq!((cfg.tau, cfg.seed, cfg.epochs), (0.6, 9, 3));
        assert!(resolve_config(None, "desk", None, &["bogus=1".into()]).is_err());
        assert!(resolve_config(None, "huge", None, &[]).is_err());
        fs::write(&f, r#"{"tau": 0.6, "extra": 1}"#).unwrap();
        assert!(matches!(
            resolve_config(Some(&f), "desk", None, &[]),
            Err(Error::Config(_))
        ));
    }
}
