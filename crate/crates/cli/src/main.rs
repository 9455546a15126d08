//! `feedloop` command-line driver.
//!
//! Exit codes: 0 success, 1 run failure, 2 configuration or input error.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use feedloop_core::controller::{simulate, write_trace_csv};
use feedloop_core::harness::{require_labels, synthetic_records, write_jsonl_manifest, Partitions};
use feedloop_core::metrics::render_table;
use feedloop_core::pipelines::evaluate_predictions;
use feedloop_core::{
    closed_loop_learn, evaluate_run, k_sweep, load_manifest, open_loop_infer, split, Config, Error,
    KnowledgeBase, MetricsReport, PidGains, RunTrace, Split,
};

#[derive(Parser)]
#[command(
    name = "feedloop",
    version,
    about = "Feedback-regulated prompting: learn, infer, evaluate"
)]
struct Cli {
    /// Print the full default configuration as TOML and exit.
    #[arg(long)]
    print_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Override a config key, e.g. `--set retrieval.top_k=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop learning over the train split; writes the KB and trace.
    Learn {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Open-loop inference over a split; writes a trace and, with labels, a report.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of neighbors to retrieve (overrides retrieval.top_k).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Trace output (default: `<paths.trace stem>.infer.jsonl`).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Re-score the final predictions of an inference trace.
    Eval {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// One inference run and report row per K.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Knowledge-base utilities.
    Kb {
        #[command(subcommand)]
        action: KbAction,
    },
    /// Offline PID step response as CSV.
    PidSim {
        /// Comma-separated errors, or a file of numbers.
        #[arg(long)]
        errors: String,
        /// `kp,ki,kd`.
        #[arg(long, default_value = "1.0,0.5,0.1")]
        gains: String,
        #[arg(long, default_value_t = feedloop_core::controller::DEFAULT_INTEGRAL_BOUND)]
        integral_bound: f64,
    },
    /// Check config, manifest and backend reachability without running.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a labelled synthetic manifest for offline runs.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KbAction {
    /// Size, dimension, split counts and norm percentiles.
    Stats {
        #[arg(long)]
        kb: PathBuf,
    },
    /// Print entries (without embeddings unless `--id` is given).
    Inspect {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = 20)]
        limit: usize,
    },
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<Config> {
    if !args.config.is_file() {
        return Err(
            Error::Config(format!("config file {} not found", args.config.display())).into(),
        );
    }
    Ok(Config::load(&args.config, &args.overrides)?)
}

fn partitions(cfg: &Config) -> anyhow::Result<Partitions> {
    let manifest = load_manifest(&cfg.paths.manifest)
        .with_context(|| format!("loading manifest {}", cfg.paths.manifest.display()))?;
    log::info!(
        "manifest {}: {} records, sha256 {}",
        manifest.source.display(),
        manifest.records.len(),
        manifest.checksum
    );
    Ok(split(&manifest.records, &cfg.split, cfg.run.seed)?)
}

/// An empty or missing KB path gives an empty store.
fn load_kb(path: &Path) -> anyhow::Result<KnowledgeBase> {
    if path.as_os_str().is_empty() || !path.exists() {
        log::warn!(
            "no knowledge base at `{}`; using an empty store",
            path.display()
        );
        return Ok(KnowledgeBase::new());
    }
    Ok(KnowledgeBase::load(path)?)
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    path.with_file_name(format!("{stem}.{tag}.jsonl"))
}

fn write_json(path: &Path, value: serde_json::Value) -> anyhow::Result<()> {
    if path.as_os_str().is_empty() {
        return Ok(());
    }
    let text = serde_json::to_string_pretty(&value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn learn(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let parts = partitions(&cfg)?;
    require_labels(&parts.train)?;
    let backends = cfg.build_backends()?;
    if cfg.paths.kb.as_os_str().is_empty() {
        return Err(Error::Config("paths.kb must be set for learning".into()).into());
    }
    let mut kb = KnowledgeBase::create(&cfg.paths.kb)?;
    let trace = closed_loop_learn(&parts.train, &mut kb, &cfg.run_config(), &backends)?;
    trace.write_jsonl(&cfg.paths.trace)?;
    let skipped = trace.records.iter().filter(|r| r.failure.is_some()).count();
    println!(
        "learned {} entries from {} train records ({skipped} skipped); kb {}, trace {}",
        kb.len(),
        parts.train.len(),
        cfg.paths.kb.display(),
        cfg.paths.trace.display()
    );
    Ok(())
}

fn infer(
    args: &ConfigArgs,
    k: Option<usize>,
    which: Split,
    trace_path: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let mut run = cfg.run_config();
    if let Some(k) = k {
        run.top_k = k;
    }
    run.validate()?;
    let parts = partitions(&cfg)?;
    let records = parts.get(which);
    let kb = load_kb(&cfg.paths.kb)?;
    let backends = cfg.build_backends()?;
    let (predictions, trace) = open_loop_infer(records, &kb, &run, &backends)?;
    let trace_path = trace_path.unwrap_or_else(|| sibling(&cfg.paths.trace, "infer"));
    trace.write_jsonl(&trace_path)?;
    let done = predictions.iter().filter(|p| p.is_some()).count();
    println!(
        "inferred {done}/{} {which} records with K={} over {} KB entries; trace {}",
        records.len(),
        run.top_k,
        kb.len(),
        trace_path.display()
    );
    if records.iter().all(|r| r.label.is_some()) && done > 0 {
        let mut report = evaluate_predictions(records, &predictions, run.threshold)?;
        report.k = Some(run.top_k);
        print!("{}", render_table(std::slice::from_ref(&report)));
        write_json(&cfg.paths.report, serde_json::to_value(&report)?)?;
    } else {
        log::warn!("unlabelled records present; no report written");
    }
    Ok(())
}

fn eval(trace: &Path, manifest: &Path, threshold: f64) -> anyhow::Result<()> {
    let trace = RunTrace::read_jsonl(trace)?;
    let manifest = load_manifest(manifest)?;
    let labels: HashMap<&str, &feedloop_core::MemeRecord> = manifest
        .records
        .iter()
        .map(|r| (r.id.as_str(), r))
        .collect();
    let scores = trace.final_scores();
    if scores.is_empty() {
        bail!("trace has no completed inference records");
    }
    let (mut ys, mut ss) = (Vec::new(), Vec::new());
    for (id, score) in scores {
        let record = labels
            .get(id)
            .ok_or_else(|| anyhow!("trace sample `{id}` is not in the manifest"))?;
        let label = record.label.ok_or_else(|| Error::MissingLabel {
            id: record.id.clone(),
            line: record.line,
        })?;
        ys.push(label);
        ss.push(score);
    }
    let report = evaluate_run(&ys, &ss, threshold)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn sweep(args: &ConfigArgs, ks: &[usize], which: Split) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    if ks.contains(&0) {
        return Err(Error::Config("K values must be positive".into()).into());
    }
    let parts = partitions(&cfg)?;
    let kb = load_kb(&cfg.paths.kb)?;
    let backends = cfg.build_backends()?;
    let reports: Vec<MetricsReport> =
        k_sweep(parts.get(which), &kb, &cfg.run_config(), &backends, ks)?;
    print!("{}", render_table(&reports));
    write_json(&cfg.paths.report, serde_json::to_value(&reports)?)?;
    Ok(())
}

fn kb_stats(path: &Path) -> anyhow::Result<()> {
    let kb = KnowledgeBase::load(path)?;
    println!("{}", serde_json::to_string_pretty(&kb.stats())?);
    Ok(())
}

fn kb_inspect(path: &Path, id: Option<&str>, limit: usize) -> anyhow::Result<()> {
    let kb = KnowledgeBase::load(path)?;
    let mut out = std::io::stdout().lock();
    if let Some(id) = id {
        let entry = kb
            .get(id)
            .ok_or_else(|| anyhow!("no entry `{id}` in {}", path.display()))?;
        writeln!(out, "{}", serde_json::to_string_pretty(entry)?)?;
        return Ok(());
    }
    for entry in kb.entries().iter().take(limit) {
        let summary = serde_json::json!({
            "id": entry.id,
            "dim": entry.emb.dim(),
            "norm": entry.emb.norm(),
            "reasoning": entry.reasoning,
            "feedback": entry.feedback,
            "meta": entry.meta,
        });
        writeln!(out, "{summary}")?;
    }
    if kb.len() > limit {
        writeln!(out, "... {} more", kb.len() - limit)?;
    }
    Ok(())
}

fn parse_numbers(text: &str, what: &str) -> anyhow::Result<Vec<f64>> {
    let mut values = Vec::new();
    for (i, token) in text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .enumerate()
    {
        match token.parse::<f64>() {
            Ok(v) => values.push(v),
            // tolerate a header row in files
            Err(_) if i == 0 && token.chars().all(|c| c.is_ascii_alphabetic() || c == '_') => {}
            Err(_) => return Err(Error::Config(format!("invalid {what} value `{token}`")).into()),
        }
    }
    Ok(values)
}

fn pid_sim(errors: &str, gains: &str, integral_bound: f64) -> anyhow::Result<()> {
    let text = if Path::new(errors).is_file() {
        std::fs::read_to_string(errors).with_context(|| format!("reading {errors}"))?
    } else {
        errors.to_string()
    };
    let errors = parse_numbers(&text, "error")?;
    let g = parse_numbers(gains, "gain")?;
    let [kp, ki, kd] = g[..] else {
        return Err(
            Error::Config(format!("--gains needs kp,ki,kd, got {} values", g.len())).into(),
        );
    };
    let rows = simulate(&errors, &PidGains::new(kp, ki, kd)?, integral_bound)?;
    write_trace_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}

fn validate(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    println!("config {} ok", args.config.display());
    let parts = partitions(&cfg)?;
    require_labels(&parts.train)?;
    println!(
        "manifest {} ok: train {}, val {}, test {}",
        cfg.paths.manifest.display(),
        parts.train.len(),
        parts.val.len(),
        parts.test.len()
    );
    for line in cfg.probe_backends()? {
        println!("{line}");
    }
    Ok(())
}

fn synth(n: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    write_jsonl_manifest(&synthetic_records(n, seed), out)?;
    println!("wrote {n} synthetic records to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.print_default_config {
        print!("{}", Config::default_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given (see --help)".into()).into());
    };
    match command {
        Command::Learn { cfg } => learn(&cfg),
        Command::Infer {
            cfg,
            k,
            split,
            trace,
        } => infer(&cfg, k, split, trace),
        Command::Eval {
            trace,
            manifest,
            threshold,
        } => eval(&trace, &manifest, threshold),
        Command::Sweep { cfg, ks, split } => sweep(&cfg, &ks, split),
        Command::Kb { action } => match action {
            KbAction::Stats { kb } => kb_stats(&kb),
            KbAction::Inspect { kb, id, limit } => kb_inspect(&kb, id.as_deref(), limit),
        },
        Command::PidSim {
            errors,
            gains,
            integral_bound,
        } => pid_sim(&errors, &gains, integral_bound),
        Command::Validate { cfg } => validate(&cfg),
        Command::Synth { n, seed, out } => synth(n, seed, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err
        .chain()
        .filter_map(|e| e.downcast_ref::<Error>())
        .any(Error::is_input_error);
    if input {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
