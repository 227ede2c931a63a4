//! Command-line driver.
//!
//! ```text
//! boxforge gen    --seed S --scenes N --out DIR [--config FILE]
//! boxforge train  --seed S --out DIR [--config FILE] [--scenes N] [--epochs E]
//!                 [--lr X] [--dnr on|off] [--assign NAME]
//! boxforge ablate --seed S --variants A,B,... --out DIR [--config FILE]
//!                 [--scenes N] [--epochs E]
//! boxforge oracle --seed S --out DIR [--config FILE] [--n K] [--trials T]
//!                 [--jitter X]
//! boxforge eval   --scenes DIR --detections FILE --out DIR [--config FILE]
//!                 [--iou X]
//! ```
//!
//! Config files are TOML with the same keys as the resolved `config.toml`
//! each command writes; flags override them. Exit codes: 0 success, 1 usage
//! or config error, 2 runtime error. `BOXFORGE_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::postproc::{
    evaluate_ap_with, pr_curve, pr_curve_csv, read_detections, write_detections, EvalParams, GtInstance,
};
use crate::simtrain::oracle::{run_oracle_study, OracleConfig};
use crate::simtrain::scene::{generate_suite, read_scenes, write_scenes};
use crate::simtrain::{parse_variant_list, run_variant_grid, train, TrainConfig};

pub const THREADS_ENV: &str = "BOXFORGE_THREADS";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "boxforge",
    version,
    about = "Boundary decomposition and recombination experiments on synthetic scenes"
)]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scene suite.
    Gen(GenArgs),
    /// Train one variant and evaluate it.
    Train(TrainArgs),
    /// Train several variants on one suite.
    Ablate(AblateArgs),
    /// Compare rank-0 recombination against exhaustive search.
    Oracle(OracleArgs),
    /// Score a detection file against scene files.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes.
    #[arg(long)]
    scenes: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    dnr: Option<Switch>,
    /// Assignment strategy: none, pn, pni, mean, c0.5, pn0.5, pni0.3/0.7.
    #[arg(long)]
    assign: Option<String>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated variant names, e.g. baseline,dnr,mean,dnr+mean.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Predictions per instance.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of scene files.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Detection file, one JSON object per line.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// IoU threshold of the emitted PR curve.
    #[arg(long)]
    iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<String>,
    pub base: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub scenes: PathBuf,
    pub detections: PathBuf,
    #[serde(default = "default_pr_iou")]
    pub iou: f64,
}

fn default_pr_iou() -> f64 {
    0.5
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

/// A fully validated command, ready to run.
enum Plan {
    Gen(TrainConfig),
    Train(TrainConfig),
    Ablate(AblateConfig),
    Oracle(OracleConfig),
    Eval(EvalConfig),
}

/// Parses `args` (program name first), runs the command and returns its
/// exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mode = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    };
    if let Some(n) = threads_from_env()? {
        exec::configure_threads(n);
    }
    let (out, plan) = resolve(cli.command)?;
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    execute(&out, plan, mode)?;
    Ok(())
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

fn load_table(path: Option<&Path>) -> Result<toml::Table, CliError> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn from_table<T: serde::de::DeserializeOwned>(table: toml::Table) -> Result<T, CliError> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| usage(Error::ConfigInvalid(e.to_string())))
}

fn has_key(table: &toml::Table, path: &[&str]) -> bool {
    let Some((last, parents)) = path.split_last() else {
        return false;
    };
    let mut t = table;
    for p in parents {
        match t.get(*p).and_then(toml::Value::as_table) {
            Some(inner) => t = inner,
            None => return false,
        }
    }
    t.contains_key(*last)
}

fn require_seed(flag: Option<u64>, table: &toml::Table, path: &[&str]) -> Result<(), CliError> {
    if flag.is_none() && !has_key(table, path) {
        return Err(usage("a seed is required: pass --seed or set it in the config file"));
    }
    Ok(())
}

fn resolve(command: Command) -> Result<(PathBuf, Plan), CliError> {
    match command {
        Command::Gen(a) => {
            let table = load_table(a.common.config.as_deref())?;
            require_seed(a.seed, &table, &["variant", "seed"])?;
            let mut cfg: TrainConfig = from_table(table)?;
            if let Some(s) = a.seed {
                cfg.variant.seed = s;
            }
            if let Some(n) = a.scenes {
                cfg.scenes = n;
            }
            cfg.validate().map_err(usage)?;
            Ok((a.common.out, Plan::Gen(cfg)))
        }
        Command::Train(a) => {
            let table = load_table(a.common.config.as_deref())?;
            require_seed(a.seed, &table, &["variant", "seed"])?;
            let mut cfg: TrainConfig = from_table(table)?;
            if let Some(s) = a.seed {
                cfg.variant.seed = s;
            }
            if let Some(n) = a.scenes {
                cfg.scenes = n;
            }
            if let Some(e) = a.epochs {
                cfg.variant.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.variant.lr = lr;
            }
            if let Some(d) = a.dnr {
                cfg.variant.dnr = matches!(d, Switch::On);
            }
            if let Some(s) = a.assign {
                cfg.variant.assignment = s.parse().map_err(usage)?;
            }
            cfg.validate().map_err(usage)?;
            Ok((a.common.out, Plan::Train(cfg)))
        }
        Command::Ablate(a) => {
            let mut table = load_table(a.common.config.as_deref())?;
            let listed = match table.remove("variants") {
                Some(v) => Some(
                    v.try_into::<Vec<String>>()
                        .map_err(|e| usage(Error::ConfigInvalid(format!("variants: {e}"))))?,
                ),
                None => None,
            };
            if let Some(base) = table.remove("base") {
                if !table.is_empty() {
                    return Err(usage(Error::ConfigInvalid(
                        "an ablation config holds only `variants` and `[base]`".into(),
                    )));
                }
                table = base
                    .try_into()
                    .map_err(|e| usage(Error::ConfigInvalid(format!("base: {e}"))))?;
            }
            require_seed(a.seed, &table, &["variant", "seed"])?;
            let mut base: TrainConfig = from_table(table)?;
            if let Some(s) = a.seed {
                base.variant.seed = s;
            }
            if let Some(n) = a.scenes {
                base.scenes = n;
            }
            if let Some(e) = a.epochs {
                base.variant.epochs = e;
            }
            base.validate().map_err(usage)?;
            let names = match (a.variants, listed) {
                (Some(flag), _) => flag,
                (None, Some(list)) => list.join(","),
                (None, None) => return Err(usage("--variants is required")),
            };
            let parsed = parse_variant_list(&names, &base.variant).map_err(usage)?;
            for (_, v) in &parsed {
                v.validate().map_err(usage)?;
            }
            let cfg = AblateConfig {
                variants: parsed.into_iter().map(|(n, _)| n).collect(),
                base,
            };
            Ok((a.common.out, Plan::Ablate(cfg)))
        }
        Command::Oracle(a) => {
            let table = load_table(a.common.config.as_deref())?;
            require_seed(a.seed, &table, &["seed"])?;
            let mut cfg: OracleConfig = from_table(table)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.n {
                cfg.n = n;
            }
            if let Some(t) = a.trials {
                cfg.trials = t;
            }
            if let Some(j) = a.jitter {
                cfg.jitter = j;
            }
            cfg.validate().map_err(usage)?;
            Ok((a.common.out, Plan::Oracle(cfg)))
        }
        Command::Eval(a) => {
            let mut table = load_table(a.common.config.as_deref())?;
            if let Some(s) = a.scenes {
                table.insert("scenes".into(), path_value(&s)?);
            }
            if let Some(d) = a.detections {
                table.insert("detections".into(), path_value(&d)?);
            }
            if let Some(x) = a.iou {
                table.insert("iou".into(), toml::Value::Float(x));
            }
            for key in ["scenes", "detections"] {
                if !table.contains_key(key) {
                    return Err(usage(format!("--{key} is required")));
                }
            }
            let cfg: EvalConfig = from_table(table)?;
            if !(cfg.iou > 0.0 && cfg.iou <= 1.0) {
                return Err(usage(Error::ConfigInvalid(format!(
                    "iou {} must lie in (0, 1]",
                    cfg.iou
                ))));
            }
            Ok((a.common.out, Plan::Eval(cfg)))
        }
    }
}

fn path_value(p: &Path) -> Result<toml::Value, CliError> {
    p.to_str()
        .map(|s| toml::Value::String(s.to_string()))
        .ok_or_else(|| usage(format!("path {} is not valid UTF-8", p.display())))
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(out.join(name), contents)?;
    Ok(())
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config serializes")
}

fn execute(out: &Path, plan: Plan, mode: ExecMode) -> Result<()> {
    match plan {
        Plan::Gen(cfg) => {
            write(out, CONFIG_FILE, cfg.to_toml())?;
            let scenes = generate_suite(cfg.variant.seed, cfg.scenes, &cfg.scene)?;
            write_scenes(out, &scenes)?;
        }
        Plan::Train(cfg) => {
            write(out, CONFIG_FILE, cfg.to_toml())?;
            let scenes = generate_suite(cfg.variant.seed, cfg.scenes, &cfg.scene)?;
            write_scenes(&out.join("scenes"), &scenes)?;
            let outcome = train(&cfg, mode)?;
            write(out, "metrics.csv", outcome.log.to_csv())?;
            write(out, "ap.csv", outcome.report.to_csv(cfg.scene.stride))?;
            let mut buf = Vec::new();
            write_detections(&mut buf, &outcome.detections)?;
            write(out, "detections.jsonl", buf)?;
        }
        Plan::Ablate(cfg) => {
            write(out, CONFIG_FILE, to_toml(&cfg))?;
            let variants = parse_variant_list(&cfg.variants.join(","), &cfg.base.variant)?;
            let table = run_variant_grid(&cfg.base, &variants, mode)?;
            write(out, "ablation.csv", table.to_csv())?;
        }
        Plan::Oracle(cfg) => {
            write(out, CONFIG_FILE, to_toml(&cfg))?;
            let study = run_oracle_study(&cfg, mode)?;
            write(out, "oracle.csv", study.to_csv())?;
            write(out, "oracle_summary.csv", study.summary_csv())?;
        }
        Plan::Eval(cfg) => {
            write(out, CONFIG_FILE, to_toml(&cfg))?;
            let scenes = read_scenes(&cfg.scenes)?;
            let file =
                File::open(&cfg.detections).map_err(|e| Error::Io(format!("{}: {e}", cfg.detections.display())))?;
            let dets = read_detections(BufReader::new(file))?;
            if let Some(d) = dets.iter().find(|d| d.scene >= scenes.len()) {
                return Err(Error::Parse(format!(
                    "detection refers to scene {} but only {} scenes were read",
                    d.scene,
                    scenes.len()
                )));
            }
            let gts: Vec<Vec<GtInstance>> = scenes.iter().map(|s| s.gt_instances()).collect();
            let stride = scenes[0].stride;
            let params = EvalParams {
                stride,
                ..EvalParams::default()
            };
            let report = evaluate_ap_with(&dets, &gts, &params, mode);
            write(out, "ap.csv", report.to_csv(stride))?;
            write(out, "pr.csv", pr_curve_csv(&pr_curve(&dets, &gts, cfg.iou, None)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_in(dir: &Path, args: &[&str]) -> i32 {
        let mut v: Vec<String> = vec!["boxforge".into()];
        v.extend(args.iter().map(|s| s.to_string()));
        v.push("--out".into());
        v.push(dir.to_str().unwrap().into());
        main_with_args(v)
    }

    #[test]
    fn gen_writes_scenes_and_config() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(run_in(d.path(), &["gen", "--seed", "0", "--scenes", "3"]), 0);
        assert_eq!(read_scenes(d.path()).unwrap().len(), 3);
        let cfg = TrainConfig::from_toml(&std::fs::read_to_string(d.path().join(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(cfg.scenes, 3);
    }

    #[test]
    fn usage_errors_write_nothing() {
        let d = tempfile::tempdir().unwrap();
        let out = d.path().join("o");
        for args in [
            vec!["gen", "--bogus"],
            vec!["gen", "--scenes", "2"],
            vec!["train", "--seed", "0", "--assign", "wat"],
            vec!["ablate", "--seed", "0", "--variants", "dnr,dnr"],
            vec!["ablate", "--seed", "0", "--variants", "dnr"],
            vec!["oracle", "--seed", "0", "--n", "9"],
            vec!["eval", "--scenes", "x"],
        ] {
            assert_eq!(run_in(&out, &args), 1, "{args:?}");
            assert!(!out.exists(), "{args:?}");
        }
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(main_with_args(["boxforge", "--help"]), 0);
        assert_eq!(main_with_args(["boxforge", "train", "--help"]), 0);
        assert_eq!(main_with_args(["boxforge"]), 1);
    }

    #[test]
    fn resolved_ablate_config_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let a = d.path().join("a");
        let b = d.path().join("b");
        let args = [
            "ablate",
            "--seed",
            "1",
            "--variants",
            "baseline,+dnr",
            "--scenes",
            "2",
            "--epochs",
            "2",
        ];
        assert_eq!(run_in(&a, &args), 0);
        let cfg = a.join(CONFIG_FILE);
        assert_eq!(run_in(&b, &["ablate", "--config", cfg.to_str().unwrap()]), 0);
        let read = |p: &Path, f: &str| std::fs::read(p.join(f)).unwrap();
        assert_eq!(read(&a, "ablation.csv"), read(&b, "ablation.csv"));
        assert_eq!(read(&a, CONFIG_FILE), read(&b, CONFIG_FILE));
    }

    #[test]
    fn missing_inputs_are_runtime_errors() {
        let d = tempfile::tempdir().unwrap();
        let out = d.path().join("o");
        let missing = d.path().join("none");
        let m = missing.to_str().unwrap();
        assert_eq!(run_in(&out, &["eval", "--scenes", m, "--detections", m]), 2);
    }
}
