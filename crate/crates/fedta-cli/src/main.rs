//! Command-line driver: run experiments, compare methods, sweep knobs,
//! export features, and validate config files.

use std::fmt::Write as _;
use std::fs;
use std::io::{ErrorKind, Write as _};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedta::config::ExperimentConfig;
use fedta::experiment::{
    compare, export_client_features, resolve_output_root, run_experiment, sweep,
    ExperimentSummary, SweepParam,
};
use fedta::Method;

#[derive(Parser)]
#[command(
    name = "fedta",
    version,
    about = "Deterministic simulator of federated continual learning with \
             input-enhancement knowledge bases and tail anchors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in preset: desk, cifar, imagenet-r, paper-scale. Used when no
    /// --config is given (default: desk).
    #[arg(long)]
    preset: Option<String>,

    /// Override one config key, e.g. --set stage2.tau=0.2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Run this method instead of the configured one.
    #[arg(long)]
    method: Option<String>,

    /// Output root (overrides the config file and FEDTA_OUTPUT_ROOT).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment over all its seeds; write logs and a summary.
    Run(ConfigArgs),

    /// Run several methods on the same data layout and rank them.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated methods (default: all six).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },

    /// Rerun the experiment across values of one knob.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Knob to vary: anchor-pool, base-size, thr, lambda2, tau, mix-alpha.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },

    /// Run one seed to completion and dump a client's features as CSV.
    ExportFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seed to run (default: first seed in the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Client whose features to export.
        #[arg(long, default_value_t = 0)]
        client: usize,
        /// Output file (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Parse, overlay, and validate a config; print the resolved settings.
    ValidateConfig(ConfigArgs),
}

fn parse_method(name: &str) -> Result<Method> {
    for m in Method::ALL {
        if m.name() == name {
            return Ok(m);
        }
    }
    let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
    bail!("unknown method '{name}' (have: {})", names.join(", "));
}

/// Parse the right-hand side of --set as a TOML value, falling back to a
/// plain string so `--set name=desk2` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_set(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("--set '{spec}': expected KEY=VALUE"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("--set '{spec}': empty key segment");
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("--set '{spec}': '{part}' is not a table"))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut table: toml::Table = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            text.parse::<toml::Table>()
                .with_context(|| format!("parsing {}", path.display()))?
        }
        (None, preset) => {
            let name = preset.as_deref().unwrap_or("desk");
            let cfg = ExperimentConfig::preset(name)?;
            toml::Table::try_from(&cfg).context("serializing preset")?
        }
    };
    for spec in &args.set {
        apply_set(&mut table, spec)?;
    }
    let mut cfg: ExperimentConfig = table.try_into().context("invalid config")?;
    if let Some(name) = &args.method {
        cfg.method = parse_method(name)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summary_block(s: &ExperimentSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "experiment {} method {} seeds {:?}",
        s.name,
        s.method.name(),
        s.seeds
    );
    let _ = writeln!(out, "round  local_acc  global_acc  kr_t    kr_s");
    for r in &s.rounds {
        let _ = writeln!(
            out,
            "{:<5}  {:<9.4}  {:<10.4}  {:<6.4}  {:<6.4}",
            r.round, r.local_acc, r.global_acc, r.kr_t, r.kr_s
        );
    }
    let _ = writeln!(
        out,
        "mean_kr_t {:.4}  mean_kr_s {:.4}  final_global_acc {:.4}",
        s.mean_kr_t, s.mean_kr_s, s.final_global_acc
    );
    out
}

/// Print to stdout; a reader that hangs up (e.g. `| head`) ends the program
/// quietly instead of panicking.
fn emit(bytes: &[u8]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(bytes).and_then(|()| out.flush()) {
        Err(e) if e.kind() == ErrorKind::BrokenPipe => std::process::exit(0),
        r => Ok(r.context("writing stdout")?),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut report = String::new();
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let root = resolve_output_root(args.output_dir.as_deref(), &cfg);
            let summary = run_experiment(&cfg, &root)?;
            report.push_str(&summary_block(&summary));
            let _ = writeln!(
                report,
                "wrote {}",
                root.join(&cfg.name)
                    .join(cfg.method.name())
                    .join("summary.json")
                    .display()
            );
        }
        Command::Compare { cfg: args, methods } => {
            let cfg = load_config(&args)?;
            let methods = methods
                .iter()
                .map(|m| parse_method(m))
                .collect::<Result<Vec<_>>>()?;
            let root = resolve_output_root(args.output_dir.as_deref(), &cfg);
            let rows = compare(&cfg, &methods, &root)?;
            let _ = writeln!(
                report,
                "{:<14}  {:>9}  {:>9}  {:>10}  {:>10}  {:>16}",
                "method", "mean_kr_t", "mean_kr_s", "final_kr_t", "final_kr_s", "final_global_acc"
            );
            for s in &rows {
                let _ = writeln!(
                    report,
                    "{:<14}  {:>9.4}  {:>9.4}  {:>10.4}  {:>10.4}  {:>16.4}",
                    s.method.name(),
                    s.mean_kr_t,
                    s.mean_kr_s,
                    s.final_kr_t,
                    s.final_kr_s,
                    s.final_global_acc
                );
            }
            let _ = writeln!(
                report,
                "wrote {}",
                root.join(&cfg.name).join("compare.csv").display()
            );
        }
        Command::Sweep {
            cfg: args,
            param,
            values,
        } => {
            let cfg = load_config(&args)?;
            let param = SweepParam::parse(&param)?;
            let root = resolve_output_root(args.output_dir.as_deref(), &cfg);
            let points = sweep(&cfg, param, &values, &root)?;
            let _ = writeln!(
                report,
                "{:<10}  {:>9}  {:>9}  {:>16}",
                param.name(),
                "mean_kr_t",
                "mean_kr_s",
                "final_global_acc"
            );
            for p in &points {
                let _ = writeln!(
                    report,
                    "{:<10}  {:>9.4}  {:>9.4}  {:>16.4}",
                    p.value, p.summary.mean_kr_t, p.summary.mean_kr_s, p.summary.final_global_acc
                );
            }
            let _ = writeln!(
                report,
                "wrote {}",
                root.join(format!("{}-sweep-{}", cfg.name, param.name()))
                    .join("sweep.csv")
                    .display()
            );
        }
        Command::ExportFeatures {
            cfg: args,
            seed,
            client,
            out,
        } => {
            let cfg = load_config(&args)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            match out {
                Some(path) => {
                    let file = fs::File::create(&path)
                        .with_context(|| format!("creating {}", path.display()))?;
                    let n = export_client_features(&cfg, seed, client, file)?;
                    let _ = writeln!(report, "wrote {n} rows to {}", path.display());
                }
                None => {
                    let mut csv = Vec::new();
                    export_client_features(&cfg, seed, client, &mut csv)?;
                    emit(&csv)?;
                }
            }
        }
        Command::ValidateConfig(args) => {
            let cfg = load_config(&args)?;
            let _ = writeln!(
                report,
                "ok: {} rounds over {} seeds",
                cfg.partition.tasks_per_client * cfg.rounds_per_task,
                cfg.seeds.len()
            );
            report.push_str(&cfg.to_toml_string()?);
        }
    }
    emit(report.as_bytes())
}
