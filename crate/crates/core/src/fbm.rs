//! Fractional Brownian motion on dyadic grids.
//!
//! Paths are sampled exactly in distribution on the grid nodes. The stationary
//! increment sequence (fractional Gaussian noise) is embedded in a circulant
//! matrix whose spectrum is computed by FFT; a dense Cholesky factor of the
//! increment covariance is used instead when the embedding is not
//! non-negative definite.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlannerScalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::grid::{TimeGrid, Trajectory};
use crate::rng::substream;

/// Relative tolerance below which negative circulant eigenvalues are treated as rounding.
pub const SPECTRUM_TOLERANCE: f64 = 1e-10;

/// Largest grid level for which the dense Cholesky fallback is attempted.
const MAX_CHOLESKY_LEVEL: u32 = 12;

/// Hurst parameter restricted to `(1/4, 1/2]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct HurstParam(f64);

impl HurstParam {
    pub fn new(h: f64) -> Result<Self> {
        if h.is_finite() && h > 0.25 && h <= 0.5 {
            Ok(Self(h))
        } else {
            Err(Error::validation(
                "hurst",
                format!("must lie in (0.25, 0.5], got {h}"),
            ))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for HurstParam {
    type Error = Error;
    fn try_from(h: f64) -> Result<Self> {
        Self::new(h)
    }
}

impl From<HurstParam> for f64 {
    fn from(h: HurstParam) -> f64 {
        h.0
    }
}

fn check_unit_time(name: &str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::validation(name, format!("time must lie in [0, 1], got {t}")))
    }
}

/// The covariance formulas are well defined for any `H ∈ (0, 1)`, so they
/// take a plain exponent; a [`HurstParam`] converts into one.
fn check_exponent(hurst: f64) -> Result<f64> {
    if hurst > 0.0 && hurst < 1.0 {
        Ok(hurst)
    } else {
        Err(Error::validation("hurst", format!("covariance needs H ∈ (0, 1), got {hurst}")))
    }
}

/// `R(s,t) = (s^{2H} + t^{2H} - |t-s|^{2H}) / 2`.
pub fn fbm_covariance(s: f64, t: f64, hurst: impl Into<f64>) -> Result<f64> {
    let h = check_exponent(hurst.into())?;
    check_unit_time("s", s)?;
    check_unit_time("t", t)?;
    Ok(covariance_unchecked(s, t, h))
}

fn covariance_unchecked(s: f64, t: f64, h: f64) -> f64 {
    let p = 2.0 * h;
    // Written symmetrically so that R(s,t) == R(t,s) bit-for-bit.
    let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
    0.5 * (lo.powf(p) + hi.powf(p) - (hi - lo).powf(p))
}

/// Gram matrix `E[Δw_i Δw_j]` of one-dimensional increments over the grid intervals.
pub fn increment_covariance(grid: TimeGrid, hurst: impl Into<f64>) -> Result<DMatrix<f64>> {
    let n = grid.steps();
    let h = check_exponent(hurst.into())?;
    let r = |i: usize, j: usize| covariance_unchecked(grid.time(i), grid.time(j), h);
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = r(i + 1, j + 1) - r(i + 1, j) - r(i, j + 1) + r(i, j);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Autocovariance of fractional Gaussian noise with lag `k` on a grid of mesh `dt`.
pub(crate) fn fgn_autocovariance(k: usize, dt: f64, h: f64) -> f64 {
    let p = 2.0 * h;
    let k = k as f64;
    0.5 * dt.powf(p) * ((k + 1.0).powf(p) - 2.0 * k.powf(p) + (k - 1.0).abs().powf(p))
}

/// Spectrum of the minimal circulant embedding (size `2n`) of the increment covariance.
pub fn circulant_spectrum(grid: TimeGrid, hurst: HurstParam) -> Vec<f64> {
    let n = grid.steps();
    let dt = grid.mesh();
    let mut row: Vec<Complex64> = Vec::with_capacity(2 * n);
    for k in 0..=n {
        row.push(Complex64::new(fgn_autocovariance(k, dt, hurst.0), 0.0));
    }
    for k in (1..n).rev() {
        row.push(row[k]);
    }
    let fft = FftPlannerScalar::new().plan_fft_forward(row.len());
    fft.process(&mut row);
    row.into_iter().map(|c| c.re).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    CirculantEmbedding,
    Cholesky,
}

enum Factor {
    Circulant {
        /// `sqrt(λ_k / 2n)` for every embedding frequency.
        scale: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
    Cholesky(DMatrix<f64>),
}

/// Precomputed exact sampler of one-dimensional fBm increments on a grid.
pub struct FbmSampler {
    grid: TimeGrid,
    hurst: HurstParam,
    factor: Factor,
}

impl std::fmt::Debug for FbmSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FbmSampler")
            .field("grid", &self.grid)
            .field("hurst", &self.hurst)
            .field("method", &self.method())
            .finish()
    }
}

impl FbmSampler {
    /// Circulant embedding when its spectrum is non-negative (up to
    /// [`SPECTRUM_TOLERANCE`]), dense Cholesky otherwise.
    pub fn new(grid: TimeGrid, hurst: HurstParam) -> Result<Self> {
        let spectrum = circulant_spectrum(grid, hurst);
        let max = spectrum.iter().cloned().fold(0.0, f64::max);
        let min = spectrum.iter().cloned().fold(f64::INFINITY, f64::min);
        if min >= -SPECTRUM_TOLERANCE * max {
            let len = spectrum.len() as f64;
            let scale = spectrum
                .iter()
                .map(|&l| (l.max(0.0) / len).sqrt())
                .collect::<Vec<_>>();
            let fft = FftPlannerScalar::new().plan_fft_forward(spectrum.len());
            Ok(Self {
                grid,
                hurst,
                factor: Factor::Circulant { scale, fft },
            })
        } else {
            log::info!(
                "circulant embedding has negative eigenvalue {min:e}; using Cholesky fallback"
            );
            Self::with_cholesky(grid, hurst)
        }
    }

    /// Forces the dense Cholesky sampler.
    pub fn with_cholesky(grid: TimeGrid, hurst: HurstParam) -> Result<Self> {
        if grid.level() > MAX_CHOLESKY_LEVEL {
            return Err(Error::validation(
                "grid_level",
                format!(
                    "Cholesky sampling limited to level {MAX_CHOLESKY_LEVEL}, got {}",
                    grid.level()
                ),
            ));
        }
        let cov = increment_covariance(grid, hurst)?;
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::numeric("fbm", "increment covariance is not positive definite"))?;
        Ok(Self {
            grid,
            hurst,
            factor: Factor::Cholesky(chol.l()),
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    pub fn method(&self) -> SamplingMethod {
        match self.factor {
            Factor::Circulant { .. } => SamplingMethod::CirculantEmbedding,
            Factor::Cholesky(_) => SamplingMethod::Cholesky,
        }
    }

    /// Fills `out` (length `2^m`) with one draw of the increment sequence.
    pub fn sample_increments<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.grid.steps();
        assert_eq!(out.len(), n, "increment buffer has wrong length");
        match &self.factor {
            Factor::Circulant { scale, fft } => {
                let mut buf: Vec<Complex64> = scale
                    .iter()
                    .map(|&s| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex64::new(s * re, s * im)
                    })
                    .collect();
                fft.process(&mut buf);
                for (o, c) in out.iter_mut().zip(&buf) {
                    *o = c.re;
                }
            }
            Factor::Cholesky(l) => {
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
                }
            }
        }
    }

    /// Draws a `dim`-dimensional path with independent coordinates, each from
    /// substream `(seed, domain, path, coordinate)`.
    pub fn sample_path(&self, seed: u64, domain: u64, path: u64, dim: usize) -> Trajectory {
        let n = self.grid.steps();
        let mut values = vec![0.0; self.grid.nodes() * dim];
        let mut incr = vec![0.0; n];
        for c in 0..dim {
            let mut rng = substream(seed, domain, path, c as u32);
            self.sample_increments(&mut rng, &mut incr);
            let mut acc = 0.0;
            for (i, dx) in incr.iter().enumerate() {
                acc += dx;
                values[(i + 1) * dim + c] = acc;
            }
        }
        Trajectory::new(self.grid, dim, values).expect("sized by construction")
    }
}

/// A batch of independent `d`-dimensional fBm paths.
#[derive(Clone, Debug, PartialEq)]
pub struct FbmBatch {
    pub grid: TimeGrid,
    pub hurst: HurstParam,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub method: SamplingMethod,
    paths: Vec<Trajectory>,
}

impl FbmBatch {
    pub fn path(&self, i: usize) -> &Trajectory {
        &self.paths[i]
    }

    pub fn paths(&self) -> &[Trajectory] {
        &self.paths
    }

    /// One row per node; columns `t, p{path}_c{coord}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        for p in 0..self.n_paths {
            for c in 0..self.dim {
                header.push(format!("p{p}_c{c}"));
            }
        }
        out.write_record(&header)?;
        for i in 0..self.grid.nodes() {
            let mut row = Vec::with_capacity(header.len());
            row.push(self.grid.time(i).to_string());
            for path in &self.paths {
                row.extend(path.node(i).iter().map(|v| v.to_string()));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Domain tag for batches produced by [`sample_fbm`].
pub const BATCH_DOMAIN: u64 = 0;

pub fn sample_fbm(
    grid: TimeGrid,
    hurst: HurstParam,
    dim: usize,
    n_paths: usize,
    seed: u64,
) -> Result<FbmBatch> {
    let sampler = FbmSampler::new(grid, hurst)?;
    sample_batch_with(&sampler, dim, n_paths, seed)
}

pub fn sample_batch_with(
    sampler: &FbmSampler,
    dim: usize,
    n_paths: usize,
    seed: u64,
) -> Result<FbmBatch> {
    if n_paths == 0 {
        return Err(Error::validation("n_paths", "must be at least 1"));
    }
    if dim == 0 {
        return Err(Error::validation("dim", "must be at least 1"));
    }
    let paths: Vec<Trajectory> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| sampler.sample_path(seed, BATCH_DOMAIN, p, dim))
        .collect();
    Ok(FbmBatch {
        grid: sampler.grid(),
        hurst: sampler.hurst(),
        dim,
        n_paths,
        seed,
        method: sampler.method(),
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn h(v: f64) -> HurstParam {
        HurstParam::new(v).unwrap()
    }

    #[test]
    fn hurst_range() {
        assert!(HurstParam::new(0.25).is_err());
        assert!(HurstParam::new(0.6).is_err());
        assert!(HurstParam::new(f64::NAN).is_err());
        assert!(HurstParam::new(0.5).is_ok());
        let err = HurstParam::new(0.6).unwrap_err().to_string();
        assert!(err.contains("hurst"), "{err}");
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(fbm_covariance(0.5, 1.0, h(0.5)).unwrap(), 0.5);
        assert_eq!(fbm_covariance(0.0, 0.7, h(0.3)).unwrap(), 0.0);
        assert_abs_diff_eq!(
            fbm_covariance(0.5, 0.5, 0.25).unwrap(),
            0.7071067812,
            epsilon = 1e-10
        );
        assert!(fbm_covariance(1.5, 0.5, h(0.3)).is_err());
        assert!(fbm_covariance(0.5, -0.1, h(0.3)).is_err());
        assert!(fbm_covariance(0.5, 0.5, 1.0).is_err());
    }

    #[test]
    fn increment_covariance_examples() {
        let grid = TimeGrid::new(3).unwrap();
        let c = increment_covariance(grid, h(0.5)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 0.125 } else { 0.0 };
                assert_abs_diff_eq!(c[(i, j)], want, epsilon = 1e-15);
            }
        }
        let hp = h(0.35);
        let c = increment_covariance(grid, hp).unwrap();
        for i in 0..8 {
            assert_abs_diff_eq!(c[(i, i)], 0.125f64.powf(0.7), epsilon = 1e-14);
        }
        let grid1 = TimeGrid::new(1).unwrap();
        let c = increment_covariance(grid1, 0.25).unwrap();
        // Four-term formula evaluated by hand: R(.5,1) - R(.5,.5) - R(0,1) + R(0,.5).
        let oracle = 0.5 * (1.0 - 2.0 * 0.5f64.sqrt());
        assert_abs_diff_eq!(c[(0, 1)], oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(c[(0, 1)], -0.2071067812, epsilon = 1e-10);
    }

    #[test]
    fn increment_covariance_is_psd() {
        for &hv in &[0.26, 0.3, 0.4, 0.5] {
            let c = increment_covariance(TimeGrid::new(6).unwrap(), h(hv)).unwrap();
            let eig = c.symmetric_eigenvalues();
            let max = eig.max();
            assert!(eig.min() >= -1e-10 * max, "H={hv}: {}", eig.min());
        }
    }

    #[test]
    fn circulant_matches_toeplitz_row() {
        let grid = TimeGrid::new(4).unwrap();
        let c = increment_covariance(grid, h(0.3)).unwrap();
        for k in 0..grid.steps() {
            assert_abs_diff_eq!(
                fgn_autocovariance(k, grid.mesh(), 0.3),
                c[(0, k)],
                epsilon = 1e-14
            );
        }
        let spec = circulant_spectrum(grid, h(0.3));
        assert!(spec.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn default_sampler_is_circulant() {
        let s = FbmSampler::new(TimeGrid::new(5).unwrap(), h(0.3)).unwrap();
        assert_eq!(s.method(), SamplingMethod::CirculantEmbedding);
    }

    #[test]
    fn paths_start_at_zero_and_are_deterministic() {
        let grid = TimeGrid::new(4).unwrap();
        let a = sample_fbm(grid, h(0.4), 2, 5, 11).unwrap();
        let b = sample_fbm(grid, h(0.4), 2, 5, 11).unwrap();
        assert_eq!(a, b);
        for p in a.paths() {
            assert_eq!(p.initial(), &[0.0, 0.0]);
        }
        let c = sample_fbm(grid, h(0.4), 2, 5, 12).unwrap();
        assert_ne!(a.path(0), c.path(0));
    }

    #[test]
    fn batch_independent_of_thread_count() {
        let grid = TimeGrid::new(5).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_fbm(grid, h(0.3), 2, 64, 99).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn rejects_empty_batch() {
        assert!(sample_fbm(TimeGrid::new(2).unwrap(), h(0.4), 1, 0, 1).is_err());
    }

    #[test]
    fn csv_shape() {
        let batch = sample_fbm(TimeGrid::new(2).unwrap(), h(0.5), 2, 3, 1).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "t,p0_c0,p0_c1,p1_c0,p1_c1,p2_c0,p2_c1");
        assert_eq!(lines[1], "0,0,0,0,0,0,0");
    }
}
