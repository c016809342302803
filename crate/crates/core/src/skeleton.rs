//! Deterministic limit objects of the deviation process: the linearised
//! flow, the skeleton equation driven by a smooth path, the Gaussian limit
//! law and the rate of terminal half-space events.

use std::io::Write;

use nalgebra::DMatrix;

use crate::coeff::CoefficientField;
use crate::error::{Error, Result};
use crate::fbm::{circulant_spectrum, fgn_autocovariance, HurstParam, SPECTRUM_TOLERANCE};
use crate::grid::{TimeGrid, Trajectory};

/// Largest tolerated `‖M_t N_t - I‖_max` before the inverse is declared inconsistent.
pub const INVERSE_TOLERANCE: f64 = 1e-6;

/// Relative tolerance of the positive-semidefiniteness check.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Smallest terminal variance for which a rate is reported.
pub const MIN_EVENT_VARIANCE: f64 = 1e-12;

/// `M_t` solving `dM = ∇b(y⁰_t) M dt` and its inverse from `dN = -N ∇b(y⁰_t) dt`.
#[derive(Clone, Debug)]
pub struct FundamentalMatrix {
    grid: TimeGrid,
    m: Vec<DMatrix<f64>>,
    m_inv: Vec<DMatrix<f64>>,
}

impl FundamentalMatrix {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.m[0].nrows()
    }

    pub fn m(&self, node: usize) -> &DMatrix<f64> {
        &self.m[node]
    }

    pub fn m_inv(&self, node: usize) -> &DMatrix<f64> {
        &self.m_inv[node]
    }

    /// `max_t ‖M_t N_t - I‖_max`.
    pub fn inverse_defect(&self) -> f64 {
        let id = DMatrix::<f64>::identity(self.dim(), self.dim());
        self.m
            .iter()
            .zip(&self.m_inv)
            .map(|(m, n)| (m * n - &id).amax())
            .fold(0.0, f64::max)
    }
}

fn check_base<F: CoefficientField + ?Sized>(coeff: &F, y0: &Trajectory) -> Result<()> {
    if y0.dim() != coeff.state_dim() {
        return Err(Error::Shape(format!(
            "base trajectory has dimension {}, coefficients act on R^{}",
            y0.dim(),
            coeff.state_dim()
        )));
    }
    if y0.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("y0", "base trajectory must be finite"));
    }
    Ok(())
}

fn jacobian<F: CoefficientField + ?Sized>(coeff: &F, y: &[f64], buf: &mut [f64]) -> DMatrix<f64> {
    let e = coeff.state_dim();
    coeff.drift_jacobian(y, buf);
    DMatrix::from_row_slice(e, e, buf)
}

/// RK4 for `M` and `N` whose stage points repeat the base-flow RK4 stages
/// started from each stored node of `y0`.
pub fn solve_fundamental_matrix<F: CoefficientField + ?Sized>(
    coeff: &F,
    y0: &Trajectory,
) -> Result<FundamentalMatrix> {
    check_base(coeff, y0)?;
    let grid = y0.grid();
    let e = coeff.state_dim();
    let h = grid.mesh();
    let mut buf = vec![0.0; e * e];
    let mut k = vec![0.0; e];
    let mut stage = vec![0.0; e];

    let mut m = DMatrix::<f64>::identity(e, e);
    let mut n = DMatrix::<f64>::identity(e, e);
    let mut ms = vec![m.clone()];
    let mut ns = vec![n.clone()];
    for node in 0..grid.steps() {
        let y = y0.node(node);
        let mut a = Vec::with_capacity(4);
        a.push(jacobian(coeff, y, &mut buf));
        coeff.drift(y, &mut k);
        for frac in [0.5, 0.5, 1.0] {
            for i in 0..e {
                stage[i] = y[i] + frac * h * k[i];
            }
            a.push(jacobian(coeff, &stage, &mut buf));
            coeff.drift(&stage, &mut k);
        }
        let k1 = &a[0] * &m;
        let k2 = &a[1] * (&m + &k1 * (0.5 * h));
        let k3 = &a[2] * (&m + &k2 * (0.5 * h));
        let k4 = &a[3] * (&m + &k3 * h);
        m += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

        let l1 = -(&n * &a[0]);
        let l2 = -((&n + &l1 * (0.5 * h)) * &a[1]);
        let l3 = -((&n + &l2 * (0.5 * h)) * &a[2]);
        let l4 = -((&n + &l3 * h) * &a[3]);
        n += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);

        if m.iter().chain(n.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("fundamental matrix", format!("non-finite entry after interval {node}")));
        }
        ms.push(m.clone());
        ns.push(n.clone());
    }
    let fm = FundamentalMatrix { grid, m: ms, m_inv: ns };
    let defect = fm.inverse_defect();
    if defect > INVERSE_TOLERANCE {
        return Err(Error::numeric(
            "fundamental matrix",
            format!("adjoint solution is not an inverse: ‖MN - I‖ = {defect:e}"),
        ));
    }
    Ok(fm)
}

/// Trapezoidal weights `G_i = (N_i σ(y⁰_i) + N_{i+1} σ(y⁰_{i+1})) / 2`, one `e×d` matrix per interval.
fn interval_weights<F: CoefficientField + ?Sized>(
    coeff: &F,
    y0: &Trajectory,
    fm: &FundamentalMatrix,
) -> Vec<DMatrix<f64>> {
    let (e, d) = (coeff.state_dim(), coeff.noise_dim());
    let mut buf = vec![0.0; e * d];
    let nodes: Vec<DMatrix<f64>> = (0..y0.grid().nodes())
        .map(|i| {
            coeff.diffusion(y0.node(i), &mut buf);
            fm.m_inv(i) * DMatrix::from_row_slice(e, d, &buf)
        })
        .collect();
    nodes.windows(2).map(|w| (&w[0] + &w[1]) * 0.5).collect()
}

/// `Ξ^h` for a path `h` with `h_0 = 0`, by variation of constants
/// `Ξ_t = M_t ∫_0^t M_s^{-1} σ(y⁰_s) dh_s` with the trapezoidal rule.
pub fn solve_skeleton_ode<F: CoefficientField + ?Sized>(
    coeff: &F,
    y0: &Trajectory,
    h: &Trajectory,
) -> Result<Trajectory> {
    let fm = solve_fundamental_matrix(coeff, y0)?;
    skeleton_with(coeff, y0, &fm, h)
}

/// As [`solve_skeleton_ode`], reusing a precomputed fundamental matrix.
pub fn skeleton_with<F: CoefficientField + ?Sized>(
    coeff: &F,
    y0: &Trajectory,
    fm: &FundamentalMatrix,
    h: &Trajectory,
) -> Result<Trajectory> {
    check_base(coeff, y0)?;
    if h.grid() != y0.grid() || fm.grid() != y0.grid() {
        return Err(Error::Shape("skeleton inputs live on different grids".into()));
    }
    if h.dim() != coeff.noise_dim() {
        return Err(Error::Shape(format!(
            "driver has dimension {}, coefficients expect {}",
            h.dim(),
            coeff.noise_dim()
        )));
    }
    if h.initial().iter().any(|&v| v != 0.0) {
        return Err(Error::validation("h", "skeleton driver must start at 0"));
    }
    let e = coeff.state_dim();
    let g = interval_weights(coeff, y0, fm);
    let col = |i: usize| DMatrix::from_column_slice(h.dim(), 1, h.node(i));
    // Summation by parts: Σ_{i<n} G_i (h_{i+1} - h_i)
    //   = G_{n-1} h_n - Σ_{0<i<n} (G_i - G_{i-1}) h_i, using h_0 = 0.
    let mut tail = DMatrix::<f64>::zeros(e, 1);
    let mut values = vec![0.0; e];
    for n in 1..y0.grid().nodes() {
        if n > 1 {
            tail += (&g[n - 1] - &g[n - 2]) * col(n - 1);
        }
        let xi = fm.m(n) * (&g[n - 1] * col(n) - &tail);
        values.extend(xi.iter());
    }
    Trajectory::new(y0.grid(), e, values)
}

/// Law of the limiting Gaussian process on the grid nodes.
#[derive(Clone, Debug)]
pub struct LimitLaw {
    grid: TimeGrid,
    dim: usize,
    /// Node-major: entry `(n*e + i, m*e + k)` is `Cov(Ξ^i_{t_n}, Ξ^k_{t_m})`.
    covariance: DMatrix<f64>,
    terminal_covariance: DMatrix<f64>,
}

impl LimitLaw {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn terminal_covariance(&self) -> &DMatrix<f64> {
        &self.terminal_covariance
    }

    /// Per-node marginal variances, node-major.
    pub fn marginal_variances(&self) -> Trajectory {
        let values = self.covariance.diagonal().iter().copied().collect();
        Trajectory::new(self.grid, self.dim, values).expect("diagonal has nodes·e entries")
    }

    /// CSV with header `row,col,value`.
    pub fn write_terminal_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_matrix_csv(&self.terminal_covariance, writer)
    }

    /// CSV with header `node,t,x0,…` holding marginal variances.
    pub fn write_marginals_csv<W: Write>(&self, writer: W) -> Result<()> {
        self.marginal_variances().write_csv(writer)
    }
}

fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row", "col", "value"])?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_record([i.to_string(), j.to_string(), m[(i, j)].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Stationary increment autocovariance `γ(k)`, `k = 0..steps`.
fn autocovariance(grid: TimeGrid, hurst: HurstParam) -> Vec<f64> {
    (0..grid.steps())
        .map(|k| fgn_autocovariance(k, grid.mesh(), hurst.value()))
        .collect()
}

fn limit_inputs<F: CoefficientField + ?Sized>(
    coeff: &F,
    y0: &Trajectory,
    hurst: HurstParam,
) -> Result<(FundamentalMatrix, Vec<DMatrix<f64>>, Vec<f64>)> {
    let fm = solve_fundamental_matrix(coeff, y0)?;
    let g = interval_weights(coeff, y0, &fm);
    Ok((fm, g, autocovariance(y0.grid(), hurst)))
}

/// Covariance of `Ξ_1` alone, in `O(N²)` time and `O(N)` memory.
pub fn terminal_covariance<F: CoefficientField + ?Sized>(
    coeff: &F,
    y0: &Trajectory,
    hurst: HurstParam,
) -> Result<DMatrix<f64>> {
    let (fm, g, gamma) = limit_inputs(coeff, y0, hurst)?;
    let (e, d) = (coeff.state_dim(), coeff.noise_dim());
    let steps = y0.grid().steps();
    let mut p = DMatrix::<f64>::zeros(e, e);
    for i in 0..steps {
        let mut q = DMatrix::<f64>::zeros(e, d);
        for (j, gj) in g.iter().enumerate() {
            q += gj * gamma[i.abs_diff(j)];
        }
        p += &g[i] * q.transpose();
    }
    let m1 = fm.m(steps);
    let mut cov = m1 * p * m1.transpose();
    symmetrize(&mut cov);
    check_psd_small(&cov, "terminal covariance")?;
    Ok(cov)
}

fn check_psd_small(cov: &DMatrix<f64>, stage: &str) -> Result<()> {
    let scale = cov.amax();
    let min = cov.clone().symmetric_eigenvalues().min();
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::numeric(stage, format!("not positive semidefinite: eigenvalue {min:e}")));
    }
    Ok(())
}

/// Full node-by-node covariance of the limit `Ξ = Φ(0, w^H)`, driver
/// coordinates independent.
pub fn limit_covariance<F: CoefficientField + ?Sized>(
    coeff: &F,
    y0: &Trajectory,
    hurst: HurstParam,
) -> Result<LimitLaw> {
    let (fm, g, gamma) = limit_inputs(coeff, y0, hurst)?;
    let grid = y0.grid();
    let (e, d) = (coeff.state_dim(), coeff.noise_dim());
    let (steps, nodes) = (grid.steps(), grid.nodes());

    // acc[m] = Σ_{i<n, j<m} γ(|i-j|) G_i G_jᵀ for the current row n.
    let mut acc = vec![DMatrix::<f64>::zeros(e, e); nodes];
    let mt: Vec<DMatrix<f64>> = (0..nodes).map(|m| fm.m(m).transpose()).collect();
    let mut cov = DMatrix::<f64>::zeros(nodes * e, nodes * e);
    for n in 0..nodes {
        for m in 0..nodes {
            let block = fm.m(n) * &acc[m] * &mt[m];
            cov.view_mut((n * e, m * e), (e, e)).copy_from(&block);
        }
        if n < steps {
            let mut q = DMatrix::<f64>::zeros(e, d);
            for m in 0..nodes {
                acc[m] += &g[n] * q.transpose();
                if m < steps {
                    q += &g[m] * gamma[n.abs_diff(m)];
                }
            }
        }
    }
    symmetrize(&mut cov);
    let terminal = cov.view((steps * e, steps * e), (e, e)).into_owned();
    check_limit_psd(&cov, &terminal, grid, hurst)?;
    Ok(LimitLaw {
        grid,
        dim: e,
        covariance: cov,
        terminal_covariance: terminal,
    })
}

/// The covariance is `B C Bᵀ` with `C` the increment Gram matrix, so a
/// non-negative circulant spectrum of `C` certifies it; the full spectrum is
/// only computed when that certificate is unavailable.
fn check_limit_psd(cov: &DMatrix<f64>, terminal: &DMatrix<f64>, grid: TimeGrid, hurst: HurstParam) -> Result<()> {
    let scale = cov.amax();
    let tol = PSD_TOLERANCE * scale;
    if let Some(bad) = cov.diagonal().iter().find(|&&v| v < -tol) {
        return Err(Error::numeric("limit covariance", format!("negative variance {bad:e}")));
    }
    let spectrum = circulant_spectrum(grid, hurst);
    let max = spectrum.iter().cloned().fold(0.0, f64::max);
    let certified = spectrum.iter().all(|&l| l >= -SPECTRUM_TOLERANCE * max);
    if certified {
        check_psd_small(terminal, "limit covariance")
    } else {
        check_psd_small(cov, "limit covariance")
    }
}

/// Rate `z² / (2 v)` of `{⟨direction, ξ_1⟩ ≥ z}` with `v = dirᵀ Σ_1 dir`.
pub fn terminal_rate(limit: &LimitLaw, direction: &[f64], z: f64) -> Result<f64> {
    terminal_rate_from_covariance(&limit.terminal_covariance, direction, z)
}

/// `dirᵀ Σ dir` for a unit `direction`.
pub fn directional_variance(cov: &DMatrix<f64>, direction: &[f64]) -> Result<f64> {
    if direction.len() != cov.nrows() {
        return Err(Error::Shape(format!(
            "direction has length {}, state dimension is {}",
            direction.len(),
            cov.nrows()
        )));
    }
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= 1e-9) {
        return Err(Error::validation("direction", format!("must be a unit vector, norm is {norm}")));
    }
    let u = DMatrix::from_column_slice(direction.len(), 1, direction);
    Ok((u.transpose() * cov * &u)[(0, 0)])
}

pub fn terminal_rate_from_covariance(cov: &DMatrix<f64>, direction: &[f64], z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::validation("threshold", "must be finite"));
    }
    let v = directional_variance(cov, direction)?;
    if !(v > MIN_EVENT_VARIANCE) {
        return Err(Error::validation(
            "direction",
            format!("limit variance {v:e} along the event direction is degenerate"),
        ));
    }
    Ok(z * z / (2.0 * v))
}
