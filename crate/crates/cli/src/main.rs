//! `seqpretext` command-line driver.
//!
//! Artifacts go to the directory named by `SEQPRETEXT_OUT_DIR` (default:
//! the current directory); relative output paths are resolved against it.
//! Every successful command prints one JSON summary line on stdout. Failures
//! print one JSON line `{"error": {"kind": ..., "message": ...}}` on stderr
//! and exit with status 1 (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use seqpretext::data::{load_jsonl, save_jsonl, simulate_hawkes_dataset, split_dataset, Dataset, HawkesParams};
use seqpretext::downstream::Task;
use seqpretext::trainer::report::{csv_series, csv_to_markdown, line_chart_svg, parse_csv};
use seqpretext::trainer::run::{ablation_csv, median};
use seqpretext::trainer::{ablate, evaluate, finetune, pretrain, Init, TrainConfig, Trained};
use seqpretext::Error;

pub const OUT_DIR_ENV: &str = "SEQPRETEXT_OUT_DIR";

#[derive(Parser)]
#[command(name = "seqpretext", version, about = "Pretext training and fine-tuning for marked event sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a multivariate Hawkes dataset and write it as JSONL.
    GenData(GenData),
    /// Train the backbone on the pretext objectives.
    Pretrain(Pretrain),
    /// Fine-tune for a downstream task from scratch or a pretext checkpoint.
    Finetune(Finetune),
    /// Test metrics of a fine-tuned checkpoint.
    Evaluate(Evaluate),
    /// Scratch plus every non-empty subset of the pretext objectives.
    Ablate(Ablate),
    /// Render metric CSV files as markdown tables and SVG plots.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    num_types: usize,
    #[arg(long)]
    num_seqs: usize,
    #[arg(long)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base rate: one value for every type, or K comma-separated values.
    #[arg(long, default_value = "0.1")]
    mu: String,
    /// Excitation: one value for every pair, or K*K values row-major.
    #[arg(long, default_value = "0.1")]
    alpha: String,
    /// Decay: one value for every pair, or K*K values row-major.
    #[arg(long, default_value = "1.0")]
    beta: String,
    /// Excitation of a second regime; odd-indexed sequences use it and get label 1, the others label 0.
    #[arg(long)]
    alpha_alt: Option<String>,
    /// Rescale times so the largest one in the dataset equals this value.
    #[arg(long)]
    max_time: Option<f64>,
    /// Also write `<stem>.train/.dev/.test.jsonl` with these fractions, e.g. 0.8,0.1,0.1.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file of dotted keys or nested sections overriding the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after --config; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override {kv:?} is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Fraction of the training sequences used for pretext training.
    #[arg(long)]
    pretext_fraction: Option<f64>,
    /// Artifact name prefix.
    #[arg(long, default_value = "pretrain")]
    name: String,
}

#[derive(Args)]
struct Finetune {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    task: Option<Task>,
    /// Pretext checkpoint to start from; scratch when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    freeze_backbone: bool,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "finetune")]
    name: String,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "eval")]
    name: String,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    task: Option<Task>,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Number of seeds, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = "ablation")]
    name: String,
}

#[derive(Args)]
struct Report {
    /// Metric CSV files written by the other commands.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Column used as the x axis; guessed from the header when absent.
    #[arg(long)]
    x: Option<String>,
    /// Comma-separated columns to plot; every other numeric column when absent.
    #[arg(long)]
    y: Option<String>,
}

fn out_dir() -> Result<PathBuf, Error> {
    let dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn out_path(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<String, Error> {
    std::fs::write(path, contents)?;
    Ok(path.display().to_string())
}

fn write_json(path: &Path, v: &Value) -> Result<String, Error> {
    write(path, serde_json::to_string_pretty(v)? + "\n")
}

fn parse_list(raw: &str, what: &str) -> Result<Vec<f64>, Error> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("--{what}: {s:?} is not a number")))
        })
        .collect()
}

fn vector(raw: &str, k: usize, what: &str) -> Result<Vec<f64>, Error> {
    match parse_list(raw, what)?.as_slice() {
        [v] => Ok(vec![*v; k]),
        v if v.len() == k => Ok(v.to_vec()),
        v => Err(Error::InvalidConfig(format!("--{what}: expected 1 or {k} values, got {}", v.len()))),
    }
}

fn matrix(raw: &str, k: usize, what: &str) -> Result<Vec<Vec<f64>>, Error> {
    match parse_list(raw, what)?.as_slice() {
        [v] => Ok(vec![vec![*v; k]; k]),
        v if v.len() == k * k => Ok(v.chunks(k).map(<[f64]>::to_vec).collect()),
        v => Err(Error::InvalidConfig(format!("--{what}: expected 1 or {} values, got {}", k * k, v.len()))),
    }
}

fn gen_data(a: &GenData, dir: &Path) -> Result<Value, Error> {
    let k = a.num_types;
    if k == 0 {
        return Err(Error::InvalidConfig("--num-types must be positive".into()));
    }
    let mu = vector(&a.mu, k, "mu")?;
    let beta = matrix(&a.beta, k, "beta")?;
    let params = HawkesParams::new(mu.clone(), matrix(&a.alpha, k, "alpha")?, beta.clone())?;
    let mut ds = match &a.alpha_alt {
        None => simulate_hawkes_dataset(&params, a.horizon, a.num_seqs, a.seed)?,
        Some(alt) => {
            let alt = HawkesParams::new(mu, matrix(alt, k, "alpha-alt")?, beta)?;
            let base = simulate_hawkes_dataset(&params, a.horizon, a.num_seqs, a.seed)?;
            let other = simulate_hawkes_dataset(&alt, a.horizon, a.num_seqs, a.seed)?;
            let seqs = base
                .into_sequences()
                .into_iter()
                .zip(other.into_sequences())
                .enumerate()
                .map(|(i, (s0, s1))| if i % 2 == 0 { s0.with_label(Some(0)) } else { s1.with_label(Some(1)) })
                .collect();
            Dataset::new(seqs, k)?
        }
    };
    if let Some(m) = a.max_time {
        ds = ds.rescale_max_time(m)?;
    }
    let out = out_path(dir, &a.out);
    save_jsonl(&ds, &out)?;
    let mut files = vec![out.display().to_string()];
    if let Some(split) = &a.split {
        let f = parse_list(split, "split")?;
        let [tr, dv, te] = f[..] else {
            return Err(Error::InvalidConfig("--split needs three fractions".into()));
        };
        let (train, dev, test) = split_dataset(&ds, (tr, dv, te), a.seed)?;
        let stem = out.with_extension("");
        for (part, d) in [("train", &train), ("dev", &dev), ("test", &test)] {
            let p = PathBuf::from(format!("{}.{part}.jsonl", stem.display()));
            save_jsonl(d, &p)?;
            files.push(p.display().to_string());
        }
    }
    Ok(json!({
        "command": "gen-data",
        "sequences": ds.len(),
        "events": ds.total_events(),
        "files": files,
    }))
}

fn run_pretrain(a: &Pretrain, dir: &Path) -> Result<Value, Error> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(f) = a.pretext_fraction {
        cfg.train.pretext_fraction = f;
    }
    let data = load_jsonl(&a.data)?;
    let out = pretrain(&cfg, &data)?;
    let mut csv = String::from("epoch,rec,cl,align,total,steps,skipped_batches\n");
    for e in &out.epochs {
        let l = &e.loss;
        csv.push_str(&format!("{},{},{},{},{},{},{}\n", e.epoch, l.rec, l.cl, l.align, l.total, e.steps, e.skipped_batches));
    }
    let ckpt = dir.join(format!("{}.ckpt", a.name));
    out.model.save(&ckpt, "pretrain")?;
    let files = vec![
        ckpt.display().to_string(),
        write_json(&dir.join(format!("{}.manifest.json", a.name)), &out.manifest())?,
        write(&dir.join(format!("{}.losses.csv", a.name)), csv)?,
    ];
    Ok(json!({
        "command": "pretrain",
        "final_loss": out.epochs.last().map(|e| e.loss.total),
        "files": files,
    }))
}

fn run_finetune(a: &Finetune, dir: &Path) -> Result<Value, Error> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(t) = a.task {
        cfg.task = t;
    }
    if let Some(f) = a.train_fraction {
        cfg.train.train_fraction = f;
    }
    cfg.train.freeze_backbone |= a.freeze_backbone;
    let train = load_jsonl(&a.train)?;
    let dev = load_jsonl(&a.dev)?;
    let pre = a.init.as_ref().map(Trained::load).transpose()?;
    let init = pre.as_ref().map_or(Init::Scratch, Init::Pretrained);
    let out = finetune(&cfg, &train, &dev, init)?;
    let ckpt = dir.join(format!("{}.ckpt", a.name));
    out.model.save(&ckpt, "finetune")?;
    let files = vec![
        ckpt.display().to_string(),
        write(&dir.join(format!("{}.metrics.csv", a.name)), out.metrics_csv())?,
        write_json(&dir.join(format!("{}.manifest.json", a.name)), &out.manifest())?,
    ];
    Ok(json!({
        "command": "finetune",
        "task": cfg.task.name(),
        "best_epoch": out.best_epoch,
        "best_dev_metric": out.best_metric,
        "dev_metric": out.metric_name,
        "files": files,
    }))
}

fn run_evaluate(a: &Evaluate, dir: &Path) -> Result<Value, Error> {
    let model = Trained::load(&a.checkpoint)?;
    let data = load_jsonl(&a.data)?;
    let report = evaluate(&model, &data)?;
    let mut files = vec![write(&dir.join(format!("{}.csv", a.name)), report.csv())?];
    if !report.impute_table.is_empty() {
        files.push(write(&dir.join(format!("{}.impute.csv", a.name)), report.impute_csv())?);
    }
    let metrics: serde_json::Map<String, Value> = report.rows.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    Ok(json!({
        "command": "evaluate",
        "task": report.task.name(),
        "metrics": metrics,
        "files": files,
    }))
}

fn run_ablate(a: &Ablate, dir: &Path) -> Result<Value, Error> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(t) = a.task {
        cfg.task = t;
    }
    if a.seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be positive".into()));
    }
    let train = load_jsonl(&a.train)?;
    let dev = load_jsonl(&a.dev)?;
    let first = cfg.train.seed;
    let mut per_seed = String::from("seed,variant,rec,cl,align,metric,value\n");
    let mut by_variant: Vec<(String, Vec<f64>, String)> = Vec::new();
    for s in first..first + a.seeds {
        cfg.train.seed = s;
        let rows = ablate(&cfg, &train, &dev)?;
        for line in ablation_csv(&rows).lines().skip(1) {
            per_seed.push_str(&format!("{s},{line}\n"));
        }
        for r in rows {
            match by_variant.iter_mut().find(|v| v.0 == r.variant) {
                Some(v) => v.1.push(r.dev_metric),
                None => by_variant.push((r.variant, vec![r.dev_metric], r.metric)),
            }
        }
    }
    let mut summary = String::from("variant,metric,median,seeds\n");
    for (variant, values, metric) in &by_variant {
        summary.push_str(&format!("{variant},{metric},{},{}\n", median(values), values.len()));
    }
    let files = vec![
        write(&dir.join(format!("{}.csv", a.name)), per_seed)?,
        write(&dir.join(format!("{}.median.csv", a.name)), summary)?,
    ];
    Ok(json!({ "command": "ablate", "variants": by_variant.len(), "files": files }))
}

fn run_report(a: &Report, dir: &Path) -> Result<Value, Error> {
    let mut files = Vec::new();
    for input in &a.inputs {
        let text = std::fs::read_to_string(input)?;
        let (header, rows) = parse_csv(&text)?;
        let stem = input.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
        files.push(write(&dir.join(format!("{stem}.md")), csv_to_markdown(&text)?)?);

        let x = match &a.x {
            Some(x) => Some(x.clone()),
            None => ["epoch", "ratio"].iter().find(|c| header.iter().any(|h| h == *c)).map(|c| c.to_string()),
        };
        let Some(x) = x else { continue };
        let ys: Vec<String> = match &a.y {
            Some(y) => y.split(',').map(|s| s.trim().to_string()).collect(),
            None => header
                .iter()
                .enumerate()
                .filter(|(i, h)| **h != x && rows.iter().all(|r| r[*i].parse::<f64>().is_ok()) && !matches!(h.as_str(), "count" | "steps" | "skipped_batches"))
                .map(|(_, h)| h.clone())
                .collect(),
        };
        let refs: Vec<&str> = ys.iter().map(String::as_str).collect();
        let series = csv_series(&text, &x, &refs)?;
        files.push(write(&dir.join(format!("{stem}.svg")), line_chart_svg(&stem, &x, &series))?);
    }
    Ok(json!({ "command": "report", "files": files }))
}

fn run(cli: &Cli) -> Result<Value, Error> {
    let dir = out_dir()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a, &dir),
        Command::Pretrain(a) => run_pretrain(a, &dir),
        Command::Finetune(a) => run_finetune(a, &dir),
        Command::Evaluate(a) => run_evaluate(a, &dir),
        Command::Ablate(a) => run_ablate(a, &dir),
        Command::Report(a) => run_report(a, &dir),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_line("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
