//! Monte Carlo harness for the central-limit and moderate-deviation regimes
//! of the rescaled deviation `Z^ε = (Y^ε - y⁰) / (εκ(ε))`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::coeff::{CoefficientField, CoefficientSpec, DerivativeSource};
use crate::error::{Error, Result};
use crate::fbm::{FbmSampler, HurstParam};
use crate::grid::TimeGrid;
use crate::rde::{phi_map, solve_base_ode, solve_rde, z_from_solutions, KappaSpec};
use crate::roughpath::{default_alpha, dilate, lift_with_depth, Depth};
use crate::skeleton::{directional_variance, terminal_covariance, terminal_rate_from_covariance};

pub const CONFIG_VERSION: u32 = 1;

/// Two-sided confidence level of the reported intervals.
pub const CONFIDENCE_LEVEL: f64 = 0.99;

/// Minimum expected number of hits `p̂·n` for an ε row to count as reliable.
pub const MIN_HITS: f64 = 20.0;

pub const MIN_PATHS: usize = 100;

pub const DEFAULT_EPS: [f64; 5] = [0.5, 0.35, 0.25, 0.18, 0.12];
pub const DEFAULT_THETA: f64 = 0.4;

/// Terminal half-space event `{⟨direction, Z_1⟩ ≥ threshold}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub direction: Vec<f64>,
    pub threshold: f64,
}

/// How `Z^ε` is computed from a driver.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZRoute {
    /// Difference quotient of two solves.
    #[default]
    Difference,
    /// The coupled system on the driver dilated by `1/κ(ε)`.
    Phi,
}

fn default_kappa() -> KappaSpec {
    KappaSpec::Power(DEFAULT_THETA)
}

fn default_eps() -> Vec<f64> {
    DEFAULT_EPS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub coefficients: CoefficientSpec,
    pub initial: Vec<f64>,
    pub hurst: HurstParam,
    pub grid_level: u32,
    #[serde(default = "default_kappa")]
    pub kappa: KappaSpec,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    pub n_paths: usize,
    pub event: EventSpec,
    pub seed: u64,
    #[serde(default)]
    pub z_route: ZRoute,
    /// Working roughness; defaults to [`default_alpha`] of `hurst`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Clt,
    Mdp,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks that do not depend on the experiment kind.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::validation(
                "version",
                format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        TimeGrid::new(self.grid_level)?;
        if self.eps.is_empty() {
            return Err(Error::validation("eps", "must not be empty"));
        }
        if let Some(e) = self.eps.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::validation("eps", format!("values must lie in (0, 1], got {e}")));
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::validation("eps", "values must be strictly decreasing"));
        }
        if self.n_paths < MIN_PATHS {
            return Err(Error::validation("n_paths", format!("must be at least {MIN_PATHS}")));
        }
        if !(self.event.threshold > 0.0 && self.event.threshold.is_finite()) {
            return Err(Error::validation("event.threshold", "must be positive and finite"));
        }
        if self.initial.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("initial", "must be finite"));
        }
        self.kappa.validate()?;
        self.depth()?;
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| default_alpha(self.hurst.value()))
    }

    /// Lift depth implied by the working roughness.
    pub fn depth(&self) -> Result<Depth> {
        let alpha = self.alpha();
        if alpha >= self.hurst.value() {
            return Err(Error::validation("alpha", format!("must be below H = {}", self.hurst.value())));
        }
        Depth::for_alpha(alpha).map_err(|e| match e {
            Error::Validation { message, .. } => Error::validation("alpha", message),
            other => other,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.grid_level).expect("validated grid level")
    }

    /// SHA-256 of the canonical JSON encoding, lowercase hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn ser_extended<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

/// Tail estimate for one sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailEstimate {
    pub hits: usize,
    pub p_hat: f64,
    /// `-ln p̂ / κ²`; `+∞` when no sample hits the event.
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub zero_hits: bool,
}

fn wilson_quantile() -> f64 {
    Normal::standard().inverse_cdf(0.5 + CONFIDENCE_LEVEL / 2.0)
}

/// Wilson score interval for a binomial proportion.
fn wilson(hits: usize, n: usize) -> (f64, f64) {
    let z = wilson_quantile();
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // The endpoints at p = 0 and p = 1 are exact; do not let rounding move them.
    let lo = if hits == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if p == 1.0 { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Empirical `P(X ≥ z)`, its normalised log `-ln p̂ / κ²`, and the Wilson
/// interval mapped through the same transformation.
pub fn estimate_tail_rate(samples: &[f64], z: f64, kappa_val: f64) -> Result<TailEstimate> {
    if !(kappa_val > 0.0 && kappa_val.is_finite()) {
        return Err(Error::validation("kappa", format!("must be positive, got {kappa_val}")));
    }
    if samples.is_empty() {
        return Err(Error::validation("samples", "must not be empty"));
    }
    let n = samples.len();
    let hits = samples.iter().filter(|&&x| x >= z).count();
    let p_hat = hits as f64 / n as f64;
    let k2 = kappa_val * kappa_val;
    let map = |p: f64| if p == 1.0 { 0.0 } else { -p.ln() / k2 };
    let (p_lo, p_hi) = wilson(hits, n);
    Ok(TailEstimate {
        hits,
        p_hat,
        rate: map(p_hat),
        ci_lo: map(p_hi),
        ci_hi: map(p_lo),
        zero_hits: hits == 0,
    })
}

/// `sup_x |F_n(x) - Φ(x / σ)|` for the empirical CDF `F_n` of `samples`.
pub fn ks_distance(samples: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::validation("sigma", format!("must be positive, got {sigma}")));
    }
    if samples.is_empty() {
        return Err(Error::validation("samples", "must not be empty"));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::validation("sigma", e.to_string()))?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal.cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpsRecord {
    pub eps: f64,
    pub kappa: f64,
    pub n: usize,
    pub p_hat: f64,
    #[serde(serialize_with = "ser_extended")]
    pub rate: f64,
    #[serde(serialize_with = "ser_extended")]
    pub ci_lo: f64,
    #[serde(serialize_with = "ser_extended")]
    pub ci_hi: f64,
    /// KS distance of `⟨direction, Z^ε_1⟩` to `N(0, v/κ²)`.
    pub ks: f64,
    /// Sample mean and variance of `⟨direction, Z^ε_1⟩`.
    pub mean: f64,
    pub var: f64,
    /// Sample mean vector and covariance (row-major) of `Z^ε_1`.
    pub mean_vector: Vec<f64>,
    pub covariance: Vec<f64>,
    pub flags: Vec<String>,
}

impl EpsRecord {
    pub fn is_reliable(&self) -> bool {
        !self.flags.iter().any(|f| f == "unreliable" || f == "zero_hits")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub z_route: ZRoute,
    pub depth: Depth,
    pub derivative_source: DerivativeSource,
    /// `dirᵀ Σ_1 dir` of the limit law.
    pub limit_variance: f64,
    /// Rate of the event under the limit law.
    pub reference_rate: f64,
    pub records: Vec<EpsRecord>,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "eps", "kappa", "n", "p_hat", "rate", "ci_lo", "ci_hi", "ks", "mean", "var", "flags",
];

impl ExperimentReport {
    pub fn write_json<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut writer, self)?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.records {
            w.write_record([
                r.eps.to_string(),
                r.kappa.to_string(),
                r.n.to_string(),
                r.p_hat.to_string(),
                r.rate.to_string(),
                r.ci_lo.to_string(),
                r.ci_hi.to_string(),
                r.ks.to_string(),
                r.mean.to_string(),
                r.var.to_string(),
                r.flags.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `κ ≡ 1` for the central-limit regime, the configured scaling otherwise.
fn effective_kappa(config: &ExperimentConfig, kind: ExperimentKind) -> Result<KappaSpec> {
    match kind {
        ExperimentKind::Clt => Ok(KappaSpec::unit()),
        ExperimentKind::Mdp => {
            config.kappa.check_moderate_scaling(&config.eps)?;
            Ok(config.kappa.clone())
        }
    }
}

pub fn run_clt_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment(config, ExperimentKind::Clt)
}

pub fn run_mdp_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment(config, ExperimentKind::Mdp)
}

pub fn run_experiment(config: &ExperimentConfig, kind: ExperimentKind) -> Result<ExperimentReport> {
    config.validate()?;
    let kappa = effective_kappa(config, kind)?;
    let field = config.coefficients.build()?;
    let field: &dyn CoefficientField = field.as_ref();
    let (e, d) = (field.state_dim(), field.noise_dim());
    if config.initial.len() != e {
        return Err(Error::validation("initial", format!("needs length {e}")));
    }
    if config.event.direction.len() != e {
        return Err(Error::validation("event.direction", format!("needs length {e}")));
    }
    let grid = config.grid();
    let depth = config.depth()?;
    let y0 = solve_base_ode(field, &config.initial, grid)?;
    let sigma_1 = terminal_covariance(field, &y0, config.hurst)?;
    let direction = &config.event.direction;
    let limit_variance = directional_variance(&sigma_1, direction).map_err(|e| match e {
        Error::Validation { message, .. } => Error::validation("event.direction", message),
        other => other,
    })?;
    let reference_rate = terminal_rate_from_covariance(&sigma_1, direction, config.event.threshold)
        .map_err(|e| match e {
            Error::Validation { message, .. } => Error::validation("event.direction", message),
            other => other,
        })?;
    let sampler = FbmSampler::new(grid, config.hurst)?;
    let derivative_source = field.derivative_source();

    let mut records = Vec::with_capacity(config.eps.len());
    for (k, &eps) in config.eps.iter().enumerate() {
        let kap = kappa.eval(eps)?;
        log::info!("{kind:?}: eps[{k}] = {eps}, kappa = {kap}, {} paths", config.n_paths);
        let terminals: Vec<Vec<f64>> = (0..config.n_paths)
            .into_par_iter()
            .map(|i| {
                let w = sampler.sample_path(config.seed, k as u64, i as u64, d);
                let x = lift_with_depth(&w, depth);
                let z = match config.z_route {
                    ZRoute::Difference => {
                        let y = solve_rde(field, &config.initial, &x, eps, grid)?;
                        z_from_solutions(&y, &y0, eps, &kappa)?
                    }
                    ZRoute::Phi => phi_map(field, &config.initial, eps, &dilate(&x, 1.0 / kap), &kappa, grid)?,
                };
                Ok(z.terminal().to_vec())
            })
            .collect::<Result<_>>()
            .map_err(|err: Error| match err {
                Error::Numeric { stage, message } => Error::numeric(
                    format!("{stage} (eps[{k}] = {eps}, seed {})", config.seed),
                    message,
                ),
                other => other,
            })?;
        records.push(summarize(
            &terminals,
            direction,
            config.event.threshold,
            eps,
            kap,
            limit_variance,
            derivative_source,
        )?);
    }
    Ok(ExperimentReport {
        kind,
        config_hash: config.hash(),
        z_route: config.z_route,
        depth,
        derivative_source,
        limit_variance,
        reference_rate,
        records,
    })
}

fn summarize(
    terminals: &[Vec<f64>],
    direction: &[f64],
    threshold: f64,
    eps: f64,
    kappa: f64,
    limit_variance: f64,
    source: DerivativeSource,
) -> Result<EpsRecord> {
    let n = terminals.len();
    let e = direction.len();
    let nf = n as f64;
    let proj: Vec<f64> = terminals
        .iter()
        .map(|z| z.iter().zip(direction).map(|(a, b)| a * b).sum())
        .collect();
    let tail = estimate_tail_rate(&proj, threshold, kappa)?;
    let ks = ks_distance(&proj, limit_variance.sqrt() / kappa)?;

    let mut mean_vector = vec![0.0; e];
    for z in terminals {
        for (m, v) in mean_vector.iter_mut().zip(z) {
            *m += v;
        }
    }
    mean_vector.iter_mut().for_each(|m| *m /= nf);
    let mut covariance = vec![0.0; e * e];
    for z in terminals {
        for i in 0..e {
            for j in 0..e {
                covariance[i * e + j] += (z[i] - mean_vector[i]) * (z[j] - mean_vector[j]);
            }
        }
    }
    covariance.iter_mut().for_each(|c| *c /= nf - 1.0);
    let mean = proj.iter().sum::<f64>() / nf;
    let var = proj.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (nf - 1.0);

    let mut flags = Vec::new();
    if tail.zero_hits {
        flags.push("zero_hits".to_string());
    }
    if tail.p_hat * nf < MIN_HITS {
        flags.push("unreliable".to_string());
    }
    if source == DerivativeSource::FiniteDifference {
        flags.push("finite_difference".to_string());
    }
    Ok(EpsRecord {
        eps,
        kappa,
        n,
        p_hat: tail.p_hat,
        rate: tail.rate,
        ci_lo: tail.ci_lo,
        ci_hi: tail.ci_hi,
        ks,
        mean,
        var,
        mean_vector,
        covariance,
        flags,
    })
}
