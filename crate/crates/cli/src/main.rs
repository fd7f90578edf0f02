//! `skillcast`: simulate, label, train, evaluate and reproduce from one binary.
//!
//! Every subcommand reads an optional TOML run config (`--config`), applies
//! `--set section.key=value` overrides and dedicated flags on top, and writes
//! the resolved config next to its outputs. Failures print a single line
//! `error: code=<code> msg=<message>` and exit with 1 (runtime) or 2 (usage).

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use skillcast::datasets::{
    extract_training_samples, read_checkpoint, read_matches, read_samples, write_checkpoint, write_csv,
    write_matches, write_samples, DatasetError,
};
use skillcast::metrics::{MetricsError, QuickSkillScores, ScoreSource, Scorer};
use skillcast::mmrnet::{train, Hyper, MmrNetError, ModelConfig, Predictor, Variant};
use skillcast::pipeline::{attention_heatmap, ksweep_ground_truth, run_repro, write_evaluation, PipelineError, ReproConfig};
use skillcast::simworld::{run_cold_start_cohort, MmrSource, SimConfig, SimError, Track};

/// Name of the resolved config written beside directory outputs.
const RESOLVED: &str = "run_config.toml";

#[derive(Parser)]
#[command(name = "skillcast", version, about = "Cold-start MMR prediction on a synthetic MOBA world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set sim.population_size=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Play a cohort and write its match stream plus manifest.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        matches: usize,
        #[arg(long, value_enum, default_value_t = SourceArg::Ts2)]
        mmr_source: SourceArg,
        /// Required for `--mmr-source quickskill`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Turn a match stream into labelled training samples.
    Label {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Match stream directory.
        #[arg(long)]
        matches: PathBuf,
        #[arg(long, value_enum, default_value_t = TrackArg::Ts2)]
        track: TrackArg,
        /// Label game; defaults to `sim.label_k`.
        #[arg(long)]
        k: Option<usize>,
        /// Cold-start window; defaults to `sim.cold_start_c`.
        #[arg(long)]
        c: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one network variant and write a checkpoint and its training curve.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value = "mmrnet", value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        /// Label game recorded in the checkpoint; defaults to `sim.label_k`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t = TrackArg::Ts2)]
        track: TrackArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Metric battery over a match stream.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        matches: PathBuf,
        #[arg(long, value_enum)]
        score: ScoreArg,
        /// Required for `--score quickskill`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Win rate of the ground-truth future MMR for several label games.
    Ksweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "12,15,18,21")]
        ks: Vec<usize>,
        /// Existing match stream; a fresh cohort is simulated when absent.
        #[arg(long)]
        matches: Option<PathBuf>,
        /// Size of the simulated cohort.
        #[arg(long, default_value_t = 50_000)]
        simulate: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-slice omni-attention weights of a checkpoint over a sample file.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The pinned acceptance pipeline; prints a pass/fail table.
    Repro {
        /// TOML repro config; defaults to the pinned configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Use the seconds-long smoke configuration as the base.
        #[arg(long)]
        smoke: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Ts,
    Ts2,
    Quickskill,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackArg {
    Ts,
    Ts2,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Ts,
    Ts2,
    Quickskill,
    Latent,
}

impl From<TrackArg> for Track {
    fn from(t: TrackArg) -> Self {
        match t {
            TrackArg::Ts => Track::Ts,
            TrackArg::Ts2 => Track::Ts2,
        }
    }
}

impl From<SourceArg> for MmrSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Ts => MmrSource::Ts,
            SourceArg::Ts2 => MmrSource::Ts2,
            SourceArg::Quickskill => MmrSource::QuickSkill,
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

/// Simulation, model and training settings of one run, plus the paths it
/// touched.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    sim: SimConfig,
    model: ModelConfig,
    hyper: Hyper,
    paths: std::collections::BTreeMap<String, String>,
}

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Config file could not be read or did not fit the schema.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug)]
struct AcceptanceFailed(Vec<u8>);

impl fmt::Display for AcceptanceFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "criteria {:?} failed", self.0)
    }
}

impl std::error::Error for AcceptanceFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn read_table(path: Option<&Path>) -> Result<toml::Table> {
    let Some(p) = path else { return Ok(toml::Table::new()) };
    let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
    Ok(text.parse::<toml::Table>().map_err(|e| ConfigError(format!("{}: {e}", p.display())))?)
}

/// Applies `section.key=value` overrides; values parse as TOML literals and
/// fall back to plain strings.
fn apply_sets(root: &mut toml::Table, set: &[String]) -> Result<()> {
    for kv in set {
        let (key, raw) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut *root;
        for p in parents {
            let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| usage(format!("`{p}` in `{key}` is not a table")))?;
        }
        table.insert(last.to_string(), value);
    }
    Ok(())
}

fn from_table<T: for<'de> Deserialize<'de>>(t: toml::Table) -> Result<T> {
    toml::Value::Table(t).try_into().map_err(|e: toml::de::Error| ConfigError(e.to_string()).into())
}

fn load_run(args: &ConfigArgs) -> Result<RunConfig> {
    let mut table = read_table(args.config.as_deref())?;
    apply_sets(&mut table, &args.set)?;
    let cfg: RunConfig = from_table(table)?;
    cfg.sim.validate()?;
    Ok(cfg)
}

fn write_resolved<T: Serialize>(path: &Path, cfg: &T) -> Result<()> {
    let text = toml::to_string_pretty(cfg).context("serializing the resolved config")?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `<dir>/<file name>.run_config.toml` for file outputs.
fn beside(file: &Path) -> PathBuf {
    let name = file.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    file.with_file_name(format!("{name}.{RESOLVED}"))
}

fn ensure_parent(file: &Path) -> Result<()> {
    if let Some(p) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { cfg, out, matches, mmr_source, checkpoint, seed } => {
            let source = MmrSource::from(mmr_source);
            if source == MmrSource::QuickSkill && checkpoint.is_none() {
                return Err(usage("--mmr-source quickskill requires --checkpoint"));
            }
            let mut rc = load_run(&cfg)?;
            if let Some(s) = seed {
                rc.sim.seed = s;
            }
            let ckpt = checkpoint.as_deref().map(|p| read_checkpoint(p).with_context(|| format!("reading {}", p.display()))).transpose()?;
            let (records, _) = run_cold_start_cohort(&rc.sim, matches, source, ckpt.as_ref())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let manifest = write_matches(&out, &records, &rc.sim)?;
            rc.paths.insert("out".into(), path_str(&out));
            if let Some(c) = &checkpoint {
                rc.paths.insert("checkpoint".into(), path_str(c));
            }
            write_resolved(&out.join(RESOLVED), &rc)?;
            println!("wrote {} matches to {}", manifest.record_count, out.display());
        }
        Cmd::Label { cfg, matches, track, k, c, out } => {
            let mut rc = load_run(&cfg)?;
            let k = k.unwrap_or(rc.sim.label_k);
            let c = c.unwrap_or(rc.sim.cold_start_c);
            if k == 0 || c == 0 {
                return Err(usage("--k and --c must be >= 1"));
            }
            let (_, records) = read_matches(&matches).with_context(|| format!("reading {}", matches.display()))?;
            let ex = extract_training_samples(&records, track.into(), k, c, &rc.sim.rating);
            ensure_parent(&out)?;
            write_samples(&out, &ex.samples)?;
            rc.sim.label_k = k;
            rc.sim.cold_start_c = c;
            rc.paths.insert("matches".into(), path_str(&matches));
            rc.paths.insert("out".into(), path_str(&out));
            write_resolved(&beside(&out), &rc)?;
            println!(
                "wrote {} samples to {}; {} players never reached game {k}",
                ex.samples.len(),
                out.display(),
                ex.insufficient.len()
            );
        }
        Cmd::Train { cfg, samples, variant, out, k, track, epochs, seed } => {
            let mut rc = load_run(&cfg)?;
            if let Some(e) = epochs {
                rc.hyper.epochs = e;
            }
            if let Some(s) = seed {
                rc.hyper.seed = s;
            }
            let data = read_samples(&samples).with_context(|| format!("reading {}", samples.display()))?;
            let Some(first) = data.first() else {
                return Err(MmrNetError::EmptyDataset.into());
            };
            rc.model.variant = variant;
            rc.model.features = first.snapshots.feature_count();
            rc.model.validate()?;
            let k = k.unwrap_or(rc.sim.label_k);
            let o = train(&data, rc.model.clone(), &rc.hyper, k, track.into())?;
            ensure_parent(&out)?;
            write_checkpoint(&out, &o.checkpoint)?;
            let curve = out.with_file_name(format!(
                "{}.curve.csv",
                out.file_name().map_or_else(|| "ckpt".into(), |n| n.to_string_lossy().into_owned())
            ));
            write_csv(&curve, &o.curve)?;
            rc.paths.insert("samples".into(), path_str(&samples));
            rc.paths.insert("out".into(), path_str(&out));
            rc.paths.insert("curve".into(), path_str(&curve));
            write_resolved(&beside(&out), &rc)?;
            println!(
                "trained {variant} on {} samples; best epoch {} (val mse {:.4}); wrote {}",
                data.len(),
                o.checkpoint.meta.best_epoch,
                o.checkpoint.meta.best_val_mse,
                out.display()
            );
        }
        Cmd::Evaluate { cfg, matches, score, checkpoint, out } => {
            if matches!(score, ScoreArg::Quickskill) && checkpoint.is_none() {
                return Err(usage("--score quickskill requires --checkpoint"));
            }
            let mut rc = load_run(&cfg)?;
            let (_, records) = read_matches(&matches).with_context(|| format!("reading {}", matches.display()))?;
            let rating = rc.sim.rating;
            let (name, scorer): (&str, Box<dyn Scorer>) = match score {
                ScoreArg::Ts => ("ts", Box::new(ScoreSource::Rating(Track::Ts, rating))),
                ScoreArg::Ts2 => ("ts2", Box::new(ScoreSource::Rating(Track::Ts2, rating))),
                ScoreArg::Latent => ("latent", Box::new(ScoreSource::Latent)),
                ScoreArg::Quickskill => {
                    let path = checkpoint.as_deref().expect("checked above");
                    let predictor = Predictor::new(read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?)?;
                    ("quickskill", Box::new(QuickSkillScores::replay(&records, &predictor, rc.sim.cold_start_c, rating)?))
                }
            };
            let summary = write_evaluation(&out, &records, name, scorer.as_ref(), rc.sim.phi_team)?;
            rc.paths.insert("matches".into(), path_str(&matches));
            rc.paths.insert("out".into(), path_str(&out));
            if let Some(c) = &checkpoint {
                rc.paths.insert("checkpoint".into(), path_str(c));
            }
            write_resolved(&out.join(RESOLVED), &rc)?;
            println!(
                "{name}: win_rate_h {} over {} decided of {} matches ({} ties); unfair fraction {}",
                summary.win_rate_h.map_or_else(|| "n/a".into(), |r| format!("{r:.4}")),
                summary.decided,
                summary.matches,
                summary.ties,
                summary.unfair_fraction.map_or_else(|| "n/a".into(), |r| format!("{r:.4}")),
            );
        }
        Cmd::Ksweep { cfg, ks, matches, simulate, out } => {
            if ks.contains(&0) {
                return Err(usage("--ks entries must be >= 1"));
            }
            let mut rc = load_run(&cfg)?;
            let records = match &matches {
                Some(d) => read_matches(d).with_context(|| format!("reading {}", d.display()))?.1,
                None => run_cold_start_cohort(&rc.sim, simulate, MmrSource::Ts2, None)?.0,
            };
            let (rows, common) = ksweep_ground_truth(&records, &ks, &[Track::Ts, Track::Ts2], &rc.sim.rating)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_csv(&out.join("ksweep.csv"), &rows)?;
            if let Some(d) = &matches {
                rc.paths.insert("matches".into(), path_str(d));
            }
            rc.paths.insert("out".into(), path_str(&out));
            write_resolved(&out.join(RESOLVED), &rc)?;
            println!("k-sweep over {common} matches written to {}", out.join("ksweep.csv").display());
        }
        Cmd::Heatmap { checkpoint, samples, out } => {
            let predictor = Predictor::new(read_checkpoint(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?)?;
            if !predictor.checkpoint().config().variant.has_omni() {
                return Err(usage(format!("{} has no omni attention", predictor.checkpoint().config().variant)));
            }
            let data = read_samples(&samples).with_context(|| format!("reading {}", samples.display()))?;
            let heat = attention_heatmap(&predictor, &data)?;
            ensure_parent(&out)?;
            write_csv(&out, &heat.rows)?;
            println!(
                "late slices outweigh early slices on {:.1}% of {} samples; wrote {}",
                100.0 * heat.late_share(),
                heat.samples,
                out.display()
            );
        }
        Cmd::Repro { config, set, smoke, out } => {
            let base = if smoke { ReproConfig::smoke() } else { ReproConfig::pinned() };
            let mut table = toml::Table::try_from(&base).context("serializing the base config")?;
            merge(&mut table, read_table(config.as_deref())?);
            apply_sets(&mut table, &set)?;
            let cfg: ReproConfig = from_table(table)?;
            cfg.validate()?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_resolved(&out.join(RESOLVED), &cfg)?;
            let report = run_repro(&cfg, &out, &mut |line| eprintln!("{line}"))?;
            print!("{}", report.table());
            let failed: Vec<u8> = report.criteria.iter().filter(|c| !c.passed).map(|c| c.id).collect();
            if !failed.is_empty() {
                return Err(AcceptanceFailed(failed).into());
            }
        }
    }
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Machine-readable code and exit status of a failure.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return ("usage", 2);
        }
        if cause.is::<ConfigError>() {
            return ("config", 1);
        }
        if cause.is::<AcceptanceFailed>() {
            return ("acceptance", 1);
        }
        if cause.is::<SimError>() {
            return ("simulation", 1);
        }
        if cause.is::<DatasetError>() {
            return ("dataset", 1);
        }
        if cause.is::<MmrNetError>() {
            return ("model", 1);
        }
        if cause.is::<MetricsError>() {
            return ("metrics", 1);
        }
        if cause.is::<PipelineError>() {
            return ("pipeline", 1);
        }
        if cause.is::<std::io::Error>() {
            return ("io", 1);
        }
    }
    ("runtime", 1)
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let m = cause.to_string();
        if !out.contains(&m) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&m);
        }
    }
    out
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error: code=usage msg={}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, status) = classify(&e);
            eprintln!("error: code={code} msg={}", one_line(&message(&e)));
            ExitCode::from(status)
        }
    }
}
