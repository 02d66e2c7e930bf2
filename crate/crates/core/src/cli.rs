//! Command-line surface: dataset generation, training, evaluation, ablation
//! and reports.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::evaluator::{evaluate, Metrics};
use crate::netcore::{load_checkpoint, save_checkpoint};
use crate::pseudogen::{OamPredictor, PoolSnapshot, Rejection};
use crate::report::{line_chart, Series};
use crate::supervised::{DetectConfig, SupervisedPredictor};
use crate::synthworld::{generate_dataset, Dataset, DatasetConfig};
use crate::trainer::{evaluate_run, run_ablation_matrix, train, write_ablation_csv, write_telemetry_csv};
use crate::trainer::{AblationRow, EpochRecord, Flags, TrainConfig};

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "OAMDET_LOG";

#[derive(Debug, Parser)]
#[command(name = "oamdet", version, about = "Mixed-supervision detection on a synthetic world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset file from a world config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both branches and write checkpoint, telemetry and test metrics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config flags, e.g. `none` or `se+oam+bba`.
        #[arg(long)]
        flags: Option<Flags>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalBranch::Supervised)]
        branch: EvalBranch,
    },
    /// Train and evaluate every configured flag combination for every seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render charts and tables from a train, eval or ablate output directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalBranch {
    /// The deployed detector.
    Supervised,
    /// The annotation branch used as a detector.
    Oam,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(&config, seed, &out),
        Command::Train { data, config, out, seed, flags } => train_cmd(&data, &config, &out, seed, flags),
        Command::Eval { data, ckpt, out, branch } => eval_cmd(&data, &ckpt, &out, branch),
        Command::Ablate { data, config, seeds, out } => ablate_cmd(&data, &config, &seeds, &out),
        Command::Report { run, out } => report_cmd(&run, &out),
    }
}

/// Reads a JSON config, rejecting unknown keys.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn dataset_meta(path: &Path, d: &Dataset) -> Value {
    json!({ "path": path.display().to_string(), "seed": d.seed, "config": d.config })
}

fn gen_data(config: &Path, seed: u64, out: &Path) -> anyhow::Result<()> {
    let cfg: DatasetConfig = read_config(config)?;
    let dataset = generate_dataset(&cfg, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    dataset.save(out)?;
    let summary = dataset.summary();
    println!("{}", serde_json::to_string_pretty(&json!({ "seed": seed, "summary": summary }))?);
    Ok(())
}

fn train_cmd(data: &Path, config: &Path, out: &Path, seed: Option<u64>, flags: Option<Flags>) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = flags {
        cfg.flags = f;
    }
    let dataset = load_dataset(data)?;
    ensure_dir(out)?;
    let meta = json!({
        "command": "train",
        "seed": cfg.seed,
        "flags": cfg.flags.to_string(),
        "train_config": cfg,
        "dataset": dataset_meta(data, &dataset),
    });
    let result = train(&dataset, &cfg)?;
    let metrics = evaluate_run(&result.params, &dataset, &cfg.detect)?;

    save_checkpoint(&out.join("checkpoint.json"), &result.params, meta.clone())?;
    write_telemetry_csv(&result.telemetry, create(&out.join("telemetry.csv"))?)?;
    write_json(&out.join("telemetry.json"), &json!({ "meta": meta, "epochs": result.telemetry }))?;
    write_json(&out.join("pool_trajectory.json"), &json!({ "meta": meta, "snapshots": result.pool_trajectory }))?;
    write_json(&out.join("pool.json"), &json!({ "meta": meta, "entries": result.pool.entries().collect::<Vec<_>>() }))?;
    write_json(
        &out.join("metrics.json"),
        &json!({ "meta": meta, "branch": EvalBranch::Supervised, "metrics": metrics.supervised, "oam_metrics": metrics.oam }),
    )?;
    metrics.supervised.write_csv(create(&out.join("per_class.csv"))?)?;
    println!(
        "flags {} seed {}: mAP50 {:.4} AP50:95 {:.4} (annotation branch mAP50 {:.4}), final pool fraction {:.3}",
        cfg.flags,
        cfg.seed,
        metrics.supervised.map50,
        metrics.supervised.ap50_95,
        metrics.oam.map50,
        result.pool_trajectory.last().map_or(0.0, |s| s.fraction)
    );
    Ok(())
}

fn eval_cmd(data: &Path, ckpt: &Path, out: &Path, branch: EvalBranch) -> anyhow::Result<()> {
    let dataset = load_dataset(data)?;
    let (params, ckpt_meta) = load_checkpoint(ckpt)?;
    let world = &dataset.config.world;
    if params.config.classes != world.classes || params.config.channels != world.channels {
        bail!(
            "checkpoint expects {} classes over {} channels, dataset has {} over {}",
            params.config.classes,
            params.config.channels,
            world.classes,
            world.channels
        );
    }
    let detect: DetectConfig = match ckpt_meta.pointer("/train_config/detect") {
        Some(v) => serde_json::from_value(v.clone()).context("reading detect settings from checkpoint meta")?,
        None => DetectConfig::default(),
    };
    let metrics = match branch {
        EvalBranch::Supervised => evaluate(&SupervisedPredictor { params: &params }, &dataset.test, &detect)?,
        EvalBranch::Oam => evaluate(&OamPredictor { params: &params }, &dataset.test, &detect)?,
    };
    ensure_dir(out)?;
    let meta = json!({
        "command": "eval",
        "checkpoint": ckpt.display().to_string(),
        "checkpoint_meta": ckpt_meta,
        "seed": ckpt_meta.get("seed").cloned().unwrap_or(Value::Null),
        "branch": branch,
        "detect": detect,
        "dataset": dataset_meta(data, &dataset),
    });
    metrics.write_json(&out.join("metrics.json"), meta)?;
    metrics.write_csv(create(&out.join("per_class.csv"))?)?;
    println!("mAP50 {:.4} AP50:95 {:.4} over {} images", metrics.map50, metrics.ap50_95, metrics.images);
    Ok(())
}

/// Mean and sample standard deviation of mAP50 per flag combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub flags: String,
    pub seeds: usize,
    pub map50_mean: f64,
    pub map50_std: f64,
    pub map50_oam_mean: f64,
    pub final_pool_fraction_mean: f64,
}

pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.flags.as_str()) {
            order.push(&r.flags);
        }
    }
    order
        .into_iter()
        .map(|flags| {
            let group: Vec<&AblationRow> = rows.iter().filter(|r| r.flags == flags).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            let m = mean(|r| r.map50);
            let var = if group.len() > 1 {
                group.iter().map(|r| (r.map50 - m).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            AblationSummary {
                flags: flags.to_string(),
                seeds: group.len(),
                map50_mean: m,
                map50_std: var.sqrt(),
                map50_oam_mean: mean(|r| r.map50_oam),
                final_pool_fraction_mean: mean(|r| r.final_pool_fraction),
            }
        })
        .collect()
}

fn ablate_cmd(data: &Path, config: &Path, seeds: &[u64], out: &Path) -> anyhow::Result<()> {
    let cfg: TrainConfig = read_config(config)?;
    if cfg.ablation.is_empty() {
        bail!("config {} lists no ablation flag combinations", config.display());
    }
    let dataset = load_dataset(data)?;
    ensure_dir(out)?;
    let rows = run_ablation_matrix(&dataset, &cfg, seeds)?;
    let summary = summarize_ablation(&rows);
    write_ablation_csv(&rows, create(&out.join("ablation.csv"))?)?;
    let meta = json!({
        "command": "ablate",
        "seeds": seeds,
        "train_config": cfg,
        "dataset": dataset_meta(data, &dataset),
    });
    write_json(&out.join("ablation.json"), &json!({ "meta": meta, "rows": rows, "summary": summary }))?;
    println!("{:<12} {:>6} {:>10} {:>8}", "flags", "seeds", "mAP50", "std");
    for s in &summary {
        println!("{:<12} {:>6} {:>10.4} {:>8.4}", s.flags, s.seeds, s.map50_mean, s.map50_std);
    }
    Ok(())
}

fn read_json_if_exists(path: &Path) -> anyhow::Result<Option<Value>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn field<T: DeserializeOwned>(doc: &Value, key: &str, path: &Path) -> anyhow::Result<T> {
    let v = doc.get(key).with_context(|| format!("{}: missing `{key}`", path.display()))?;
    serde_json::from_value(v.clone()).with_context(|| format!("{}: malformed `{key}`", path.display()))
}

fn report_cmd(run: &Path, out: &Path) -> anyhow::Result<()> {
    if !run.is_dir() {
        bail!("run directory {} does not exist", run.display());
    }
    ensure_dir(out)?;
    let mut written = Vec::new();
    let mut meta = Value::Null;

    let pool_path = run.join("pool_trajectory.json");
    if let Some(doc) = read_json_if_exists(&pool_path)? {
        let snaps: Vec<PoolSnapshot> = field(&doc, "snapshots", &pool_path)?;
        meta = doc.get("meta").cloned().unwrap_or(Value::Null);
        let pts: Vec<(f64, f64)> = snaps.iter().map(|s| (s.epoch as f64, s.fraction)).collect();
        let rate: Vec<(f64, f64)> = snaps
            .iter()
            .filter(|s| s.attempts > 0)
            .map(|s| (s.epoch as f64, s.accepted as f64 / s.attempts as f64))
            .collect();
        let svg = line_chart(
            "Semi-strong pool",
            "epoch",
            "fraction of weak images",
            &[Series::new("pool fraction", pts), Series::new("acceptance rate", rate)],
            Some(0.0),
        );
        fs::write(out.join("pool_growth.svg"), svg)?;
        let mut w = csv::Writer::from_writer(create(&out.join("pool_growth.csv"))?);
        w.write_record(["epoch", "size", "fraction", "attempts", "accepted", "no_detections", "no_convergence", "class_mismatch"])?;
        for s in &snaps {
            let rej = |r: Rejection| s.rejected.get(&r).copied().unwrap_or(0);
            w.write_record([
                s.epoch.to_string(),
                s.size.to_string(),
                format!("{:.6}", s.fraction),
                s.attempts.to_string(),
                s.accepted.to_string(),
                rej(Rejection::NoDetections).to_string(),
                rej(Rejection::NoConvergence).to_string(),
                rej(Rejection::ClassMismatch).to_string(),
            ])?;
        }
        w.flush()?;
        written.extend(["pool_growth.svg", "pool_growth.csv"]);
    }

    let tele_path = run.join("telemetry.json");
    if let Some(doc) = read_json_if_exists(&tele_path)? {
        let epochs: Vec<EpochRecord> = field(&doc, "epochs", &tele_path)?;
        meta = doc.get("meta").cloned().unwrap_or(meta);
        let curve = |f: fn(&EpochRecord) -> f64| epochs.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
        let svg = line_chart(
            "Training losses",
            "epoch",
            "mean loss per iteration",
            &[
                Series::new("L_1B", curve(|r| r.l1b)),
                Series::new("L_1B second pass", curve(|r| r.l1b_second)),
                Series::new("L_2B", curve(|r| r.l2b)),
                Series::new("L_2B semi-strong", curve(|r| r.l2b_semi_cls)),
            ],
            Some(0.0),
        );
        fs::write(out.join("losses.svg"), svg)?;
        write_telemetry_csv(&epochs, create(&out.join("losses.csv"))?)?;
        written.extend(["losses.svg", "losses.csv"]);
    }

    let metrics_path = run.join("metrics.json");
    if let Some(doc) = read_json_if_exists(&metrics_path)? {
        let metrics: Metrics = field(&doc, "metrics", &metrics_path)?;
        let oam: Option<Metrics> = doc.get("oam_metrics").map(|v| serde_json::from_value(v.clone())).transpose()?;
        meta = doc.get("meta").cloned().unwrap_or(meta);
        let mut w = csv::Writer::from_writer(create(&out.join("ap_table.csv"))?);
        w.write_record(["branch", "class", "gt_count", "detections", "ap50", "ap50_95"])?;
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let branch = doc.get("branch").and_then(Value::as_str).unwrap_or("supervised").to_string();
        for (name, m) in std::iter::once((branch, &metrics)).chain(oam.iter().map(|m| ("oam".to_string(), m))) {
            for c in &m.per_class {
                w.write_record([
                    name.clone(),
                    c.class_id.to_string(),
                    c.gt_count.to_string(),
                    c.detections.to_string(),
                    fmt(c.ap50),
                    fmt(c.ap50_95),
                ])?;
            }
            w.write_record([name, "mean".into(), String::new(), String::new(), fmt(Some(m.map50)), fmt(Some(m.ap50_95))])?;
        }
        w.flush()?;
        written.push("ap_table.csv");
    }

    let ablation_path = run.join("ablation.json");
    if let Some(doc) = read_json_if_exists(&ablation_path)? {
        let rows: Vec<AblationRow> = field(&doc, "rows", &ablation_path)?;
        meta = doc.get("meta").cloned().unwrap_or(meta);
        let mut w = csv::Writer::from_writer(create(&out.join("ablation_table.csv"))?);
        for s in summarize_ablation(&rows) {
            w.serialize(s)?;
        }
        w.flush()?;
        written.push("ablation_table.csv");
    }

    if written.is_empty() {
        bail!("{} holds no train, eval or ablate outputs", run.display());
    }
    write_json(&out.join("report.json"), &json!({ "run": run.display().to_string(), "meta": meta, "files": written }))?;
    for f in &written {
        println!("{}", out.join(f).display());
    }
    Ok(())
}
