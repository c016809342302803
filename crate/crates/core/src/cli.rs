//! Command-line front end: `sample`, `clt`, `mdp` and `rate`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{sample_fbm, HurstParam};
use crate::grid::TimeGrid;
use crate::mdp::{self, hex_digest, ExperimentConfig, ExperimentKind, CONFIG_VERSION};
use crate::rde::solve_base_ode;
use crate::roughpath::{default_alpha, join_index, lift_with_depth, Depth};
use crate::skeleton::{terminal_covariance, terminal_rate_from_covariance};

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "ROUGHMDP_LOG";

#[derive(Debug, Parser)]
#[command(name = "roughmdp", version, about = "Rough-path small-noise experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample fBm paths and dump them with their lifts.
    Sample(CommonArgs),
    /// Central-limit experiment (κ ≡ 1).
    Clt(CommonArgs),
    /// Moderate-deviation experiment.
    Mdp(CommonArgs),
    /// Print the limit rate of the configured terminal event.
    Rate(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; required by every subcommand except `rate`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Config of the `sample` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub version: u32,
    pub hurst: HurstParam,
    pub grid_level: u32,
    #[serde(default = "one")]
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

fn one() -> usize {
    1
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::validation("version", format!("expected {CONFIG_VERSION}")));
        }
        TimeGrid::new(self.grid_level)?;
        if self.dim == 0 {
            return Err(Error::validation("dim", "must be positive"));
        }
        if self.n_paths == 0 {
            return Err(Error::validation("n_paths", "must be positive"));
        }
        self.depth()?;
        Ok(())
    }

    pub fn depth(&self) -> Result<Depth> {
        let alpha = self.alpha.unwrap_or_else(|| default_alpha(self.hurst.value()));
        if alpha >= self.hurst.value() {
            return Err(Error::validation("alpha", "must be below hurst"));
        }
        Depth::for_alpha(alpha)
    }
}

/// Record of one run: what was asked for and what was written.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    pub config: serde_json::Value,
    pub output_dir: PathBuf,
    /// File name to SHA-256 (hex).
    pub artifacts: BTreeMap<String, String>,
    pub wall_time_seconds: f64,
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        if e.is_io() {
            Error::Json(e)
        } else {
            Error::validation("config", e.to_string())
        }
    })
}

fn require_out(args: &CommonArgs) -> Result<&Path> {
    args.out
        .as_deref()
        .ok_or_else(|| Error::validation("--out", "an output directory is required"))
}

/// Artifacts are rendered in memory first so that a failing run leaves no partial files.
fn write_artifacts(
    command: &str,
    args: &CommonArgs,
    config: serde_json::Value,
    files: Vec<(&str, Vec<u8>)>,
    started: Instant,
) -> Result<RunManifest> {
    let out = require_out(args)?;
    fs::create_dir_all(out)?;
    let mut artifacts = BTreeMap::new();
    for (name, bytes) in files {
        fs::write(out.join(name), &bytes)?;
        artifacts.insert(name.to_string(), hex_digest(&bytes));
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: args.config.clone(),
        config,
        output_dir: out.to_path_buf(),
        artifacts,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(out.join("manifest.json"), bytes)?;
    Ok(manifest)
}

pub fn cmd_sample(args: &CommonArgs) -> Result<RunManifest> {
    let started = Instant::now();
    let mut cfg: SampleConfig = parse_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    require_out(args)?;
    let grid = TimeGrid::new(cfg.grid_level)?;
    let depth = cfg.depth()?;
    let batch = sample_fbm(grid, cfg.hurst, cfg.dim, cfg.n_paths, cfg.seed)?;
    let mut fbm_csv = Vec::new();
    batch.write_csv(&mut fbm_csv)?;

    let mut lift_csv = csv::Writer::from_writer(Vec::new());
    lift_csv.write_record(["path", "interval", "level", "index", "value"])?;
    for (p, path) in batch.paths().iter().enumerate() {
        let lift = lift_with_depth(path, depth);
        for (i, k, idx, v) in lift.entries() {
            lift_csv.write_record([p.to_string(), i.to_string(), k.to_string(), join_index(&idx), v.to_string()])?;
        }
    }
    let lift_csv = lift_csv.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_artifacts(
        "sample",
        args,
        serde_json::to_value(&cfg)?,
        vec![("fbm.csv", fbm_csv), ("lift.csv", lift_csv)],
        started,
    )
}

fn load_experiment(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = parse_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_experiment(args: &CommonArgs, kind: ExperimentKind) -> Result<RunManifest> {
    let started = Instant::now();
    let cfg = load_experiment(args)?;
    require_out(args)?;
    let report = mdp::run_experiment(&cfg, kind)?;
    for r in report.records.iter().filter(|r| !r.is_reliable()) {
        log::warn!("eps = {}: flagged {:?}", r.eps, r.flags);
    }
    let (mut json, mut csv) = (Vec::new(), Vec::new());
    report.write_json(&mut json)?;
    report.write_csv(&mut csv)?;
    let name = match kind {
        ExperimentKind::Clt => "clt",
        ExperimentKind::Mdp => "mdp",
    };
    write_artifacts(
        name,
        args,
        serde_json::to_value(&cfg)?,
        vec![("report.json", json), ("report.csv", csv)],
        started,
    )
}

/// Limit rate `z²/(2v)` of the configured event.
pub fn compute_rate(cfg: &ExperimentConfig) -> Result<f64> {
    let field = cfg.coefficients.build()?;
    if cfg.initial.len() != field.state_dim() {
        return Err(Error::validation("initial", format!("needs length {}", field.state_dim())));
    }
    let y0 = solve_base_ode(field.as_ref(), &cfg.initial, cfg.grid())?;
    let cov = terminal_covariance(field.as_ref(), &y0, cfg.hurst)?;
    terminal_rate_from_covariance(&cov, &cfg.event.direction, cfg.event.threshold)
}

/// Twelve decimals with trailing zeros removed.
pub fn format_rate(rate: f64) -> String {
    let s = format!("{rate:.12}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

pub fn cmd_rate<W: Write>(args: &CommonArgs, mut stdout: W) -> Result<f64> {
    let cfg = load_experiment(args)?;
    let rate = compute_rate(&cfg)?;
    writeln!(stdout, "{}", format_rate(rate))?;
    Ok(rate)
}

pub fn run(cli: Cli) -> Result<()> {
    let args = match &cli.command {
        Command::Sample(a) | Command::Clt(a) | Command::Mdp(a) | Command::Rate(a) => a,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(Error::validation("--threads", "must be positive"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::validation("--threads", e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Sample(a) => cmd_sample(a).map(|_| ()),
        Command::Clt(a) => cmd_experiment(a, ExperimentKind::Clt).map(|_| ()),
        Command::Mdp(a) => cmd_experiment(a, ExperimentKind::Mdp).map(|_| ()),
        Command::Rate(a) => cmd_rate(a, std::io::stdout().lock()).map(|_| ()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(dir: &Path, config: &str, out: bool) -> CommonArgs {
        let path = dir.join("config.json");
        fs::write(&path, config).unwrap();
        CommonArgs {
            config: path,
            out: out.then(|| dir.join("out")),
            seed: None,
            threads: None,
        }
    }

    const SAMPLE: &str = r#"{"version": 1, "hurst": 0.5, "grid_level": 8, "n_paths": 10, "seed": 5}"#;

    const RATE: &str = r#"{
        "version": 1,
        "coefficients": {"name": "linear", "params": {"drift": [[0.0]], "diffusion": [[1.0]]}},
        "initial": [0.0], "hurst": 0.35, "grid_level": 6, "n_paths": 100,
        "event": {"direction": [1.0], "threshold": 1.0}, "seed": 1
    }"#;

    #[test]
    fn sample_writes_two_reproducible_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = args(dir.path(), SAMPLE, true);
        let first = cmd_sample(&a).unwrap();
        assert_eq!(first.artifacts.len(), 2);
        let second = cmd_sample(&a).unwrap();
        assert_eq!(first.artifacts, second.artifacts);
        let lift = fs::read_to_string(dir.path().join("out/lift.csv")).unwrap();
        assert!(lift.starts_with("path,interval,level,index,value\n0,0,1,0,"));
        // 10 paths × 256 intervals × (1 + 1) entries for d = 1, depth 2.
        assert_eq!(lift.lines().count(), 1 + 10 * 256 * 2);
    }

    #[test]
    fn sample_rejects_bad_hurst_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let a = args(dir.path(), &SAMPLE.replace("0.5", "0.6"), true);
        let err = cmd_sample(&a).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("hurst"), "{err}");
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = args(dir.path(), &SAMPLE.replace("\"seed\"", "\"sed\""), true);
        assert_eq!(cmd_sample(&a).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_config_is_io() {
        let a = CommonArgs {
            config: PathBuf::from("/nonexistent/config.json"),
            out: None,
            seed: None,
            threads: None,
        };
        assert_eq!(cmd_sample(&a).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn rate_prints_half_for_identity() {
        let dir = tempfile::tempdir().unwrap();
        let a = args(dir.path(), RATE, false);
        let mut out = Vec::new();
        cmd_rate(&a, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0.5\n");
    }

    #[test]
    fn rate_formatting() {
        assert_eq!(format_rate(0.5000000000000001), "0.5");
        assert_eq!(format_rate(2.0), "2");
        assert_eq!(format_rate(0.125), "0.125");
    }

    #[test]
    fn single_eps_gives_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RATE.replace("\"seed\": 1", "\"seed\": 1, \"eps\": [0.3]");
        let a = args(dir.path(), &cfg, true);
        cmd_experiment(&a, ExperimentKind::Clt).unwrap();
        let csv = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
}
