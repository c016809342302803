//! Solvers for the small-noise rough differential equation, its noiseless
//! flow and the coupled system for the rescaled deviation.
//!
//! All rough equations share one explicit one-step scheme. Over a grid
//! interval with lift increments `(x¹, x², x³)` and vector fields
//! `V_j = σ_{·j}`, `V_0 = b`, the update is
//!
//! ```text
//! Δy = RK4 drift increment
//!    + V_j x¹_j
//!    + (V_a·∇)V_b x²_ab
//!    + ½ Δt x¹_j [(V_0·∇)V_j + (V_j·∇)V_0]
//!    + (V_a·∇)(V_b·∇)V_c x³_abc            (depth 3 only)
//! ```
//!
//! The mixed time/space term uses the exact iterated integrals
//! `∫∫ dt dx = ∫∫ dx dt = ½ Δt x¹` of a linear segment.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::coeff::{CoefficientField, DerivativeSource};
use crate::error::{Error, Result};
use crate::grid::{TimeGrid, Trajectory};
use crate::roughpath::{Depth, Increment, RoughPathLift};

/// Eight-point Gauss–Legendre rule on `[0, 1]` as `(node, weight)` pairs.
const GAUSS_LEGENDRE_8: [(f64, f64); 8] = {
    const X: [f64; 4] = [
        0.183_434_642_495_649_8,
        0.525_532_409_916_329_0,
        0.796_666_477_413_626_7,
        0.960_289_856_497_536_3,
    ];
    const W: [f64; 4] = [
        0.362_683_783_378_362_0,
        0.313_706_645_877_887_3,
        0.222_381_034_453_374_5,
        0.101_228_536_290_376_3,
    ];
    [
        ((1.0 - X[3]) / 2.0, W[3] / 2.0),
        ((1.0 - X[2]) / 2.0, W[2] / 2.0),
        ((1.0 - X[1]) / 2.0, W[1] / 2.0),
        ((1.0 - X[0]) / 2.0, W[0] / 2.0),
        ((1.0 + X[0]) / 2.0, W[0] / 2.0),
        ((1.0 + X[1]) / 2.0, W[1] / 2.0),
        ((1.0 + X[2]) / 2.0, W[2] / 2.0),
        ((1.0 + X[3]) / 2.0, W[3] / 2.0),
    ]
};

/// The deviation scale `κ(ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KappaSpec {
    /// `κ(ε) = ε^{-θ}`, `θ ∈ (0, 1)`.
    Power(f64),
    /// Explicit `(ε, κ(ε))` pairs, linearly interpolated in between.
    Table(Vec<(f64, f64)>),
}

impl KappaSpec {
    /// `κ ≡ 1` on `(0, 1]`, the central-limit scaling.
    pub fn unit() -> Self {
        KappaSpec::Table(vec![(f64::MIN_POSITIVE, 1.0), (1.0, 1.0)])
    }

    /// Structural checks: `θ ∈ (0,1)`, or a table with distinct `ε ∈ (0,1]`
    /// and finite positive `κ` that is non-increasing in `ε`.
    pub fn validate(&self) -> Result<()> {
        match self {
            KappaSpec::Power(theta) => {
                if !(*theta > 0.0 && *theta < 1.0) {
                    return Err(Error::validation("kappa.power", format!("θ must lie in (0, 1), got {theta}")));
                }
            }
            KappaSpec::Table(rows) => {
                if rows.is_empty() {
                    return Err(Error::validation("kappa.table", "must not be empty"));
                }
                let mut sorted = rows.clone();
                sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
                for &(e, k) in &sorted {
                    if !(e > 0.0 && e <= 1.0) || !(k.is_finite() && k > 0.0) {
                        return Err(Error::validation(
                            "kappa.table",
                            format!("entry ({e}, {k}) needs ε ∈ (0, 1] and finite κ > 0"),
                        ));
                    }
                }
                for w in sorted.windows(2) {
                    if w[0].0 == w[1].0 {
                        return Err(Error::validation("kappa.table", format!("duplicate ε = {}", w[0].0)));
                    }
                    if w[1].1 > w[0].1 {
                        return Err(Error::validation("kappa.table", "κ must be non-increasing in ε"));
                    }
                }
            }
        }
        Ok(())
    }

    /// `κ(ε)` for `ε ∈ (0, 1]`.
    pub fn eval(&self, eps: f64) -> Result<f64> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::validation("eps", format!("κ(ε) needs ε ∈ (0, 1], got {eps}")));
        }
        match self {
            KappaSpec::Power(theta) => Ok(eps.powf(-theta)),
            KappaSpec::Table(rows) => {
                let mut sorted = rows.clone();
                sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
                if let Some(&(_, k)) = sorted.iter().find(|r| r.0 == eps) {
                    return Ok(k);
                }
                let hi = sorted.iter().position(|r| r.0 > eps);
                match hi {
                    Some(j) if j > 0 => {
                        let (e0, k0) = sorted[j - 1];
                        let (e1, k1) = sorted[j];
                        Ok(k0 + (k1 - k0) * (eps - e0) / (e1 - e0))
                    }
                    _ => Err(Error::validation(
                        "eps",
                        format!("ε = {eps} outside the κ table range"),
                    )),
                }
            }
        }
    }

    /// `εκ(ε)`, with the convention `0·κ(0) = 0`.
    pub fn eps_kappa(&self, eps: f64) -> Result<f64> {
        if eps == 0.0 {
            Ok(0.0)
        } else {
            Ok(eps * self.eval(eps)?)
        }
    }

    /// Checks, along a decreasing `ε` grid, that `κ` strictly increases and
    /// `εκ(ε)` strictly decreases, the discrete form of `κ → ∞`, `εκ → 0`.
    pub fn check_moderate_scaling(&self, eps_grid: &[f64]) -> Result<()> {
        let mut prev: Option<(f64, f64)> = None;
        for &eps in eps_grid {
            let k = self.eval(eps)?;
            if let Some((pk, pek)) = prev {
                if !(k > pk) {
                    return Err(Error::validation("kappa", format!("κ must grow as ε decreases (at ε = {eps})")));
                }
                if !(eps * k < pek) {
                    return Err(Error::validation("kappa", format!("εκ(ε) must shrink as ε decreases (at ε = {eps})")));
                }
            }
            prev = Some((k, eps * k));
        }
        Ok(())
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eps) {
        Ok(())
    } else {
        Err(Error::validation("eps", format!("must lie in [0, 1], got {eps}")))
    }
}

/// Scratch space for one-step updates of a field with state dim `e`, noise dim `d`.
struct Stepper<'a, F: ?Sized> {
    field: &'a F,
    e: usize,
    d: usize,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    delta: Vec<f64>,
    sigma: Vec<f64>,
    dsigma: Vec<f64>,
    d2sigma: Vec<f64>,
    dbdy: Vec<f64>,
    /// `(V_a·∇)V_b` at `(i*d + a)*d + b`.
    g: Vec<f64>,
}

impl<'a, F: CoefficientField + ?Sized> Stepper<'a, F> {
    fn new(field: &'a F) -> Self {
        let (e, d) = (field.state_dim(), field.noise_dim());
        Self {
            field,
            e,
            d,
            k: std::array::from_fn(|_| vec![0.0; e]),
            tmp: vec![0.0; e],
            delta: vec![0.0; e],
            sigma: vec![0.0; e * d],
            dsigma: vec![0.0; e * d * e],
            d2sigma: vec![0.0; e * d * e * e],
            dbdy: vec![0.0; e * e],
            g: vec![0.0; e * d * d],
        }
    }

    fn rk4_drift(&mut self, y: &[f64], dt: f64) {
        let f = self.field;
        f.drift(y, &mut self.k[0]);
        for (stage, h) in [(1, 0.5 * dt), (2, 0.5 * dt), (3, dt)] {
            for i in 0..self.e {
                self.tmp[i] = y[i] + h * self.k[stage - 1][i];
            }
            f.drift(&self.tmp, &mut self.k[stage]);
        }
        for i in 0..self.e {
            self.delta[i] =
                dt / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
        }
    }

    /// Advances `y` over one interval driven by `scale`-dilated `inc`.
    fn step(&mut self, y: &mut [f64], dt: f64, inc: &Increment, scale: f64) {
        let (e, d) = (self.e, self.d);
        self.rk4_drift(y, dt);
        if scale != 0.0 {
            let f = self.field;
            let x1 = inc.level(1);
            let x2 = inc.level(2);
            let (c1, c2) = (scale, scale * scale);
            f.diffusion(y, &mut self.sigma);
            f.diffusion_jacobian(y, &mut self.dsigma);
            f.drift_jacobian(y, &mut self.dbdy);
            let b = &self.k[0];
            for i in 0..e {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += self.sigma[i * d + j] * c1 * x1[j];
                }
                for a in 0..d {
                    for bb in 0..d {
                        let mut gv = 0.0;
                        for k in 0..e {
                            gv += self.sigma[k * d + a] * self.dsigma[(i * d + bb) * e + k];
                        }
                        self.g[(i * d + a) * d + bb] = gv;
                        acc += gv * c2 * x2[a * d + bb];
                    }
                }
                for j in 0..d {
                    let mut cross = 0.0;
                    for k in 0..e {
                        cross += b[k] * self.dsigma[(i * d + j) * e + k]
                            + self.dbdy[i * e + k] * self.sigma[k * d + j];
                    }
                    acc += 0.5 * dt * cross * c1 * x1[j];
                }
                self.delta[i] += acc;
            }
            if inc.depth() == Depth::Three {
                let x3 = inc.level(3);
                let c3 = c2 * scale;
                f.diffusion_hessian(y, &mut self.d2sigma);
                for i in 0..e {
                    let mut acc = 0.0;
                    for a in 0..d {
                        for bb in 0..d {
                            for c in 0..d {
                                let w = x3[(a * d + bb) * d + c];
                                if w == 0.0 {
                                    continue;
                                }
                                // (V_a·∇)((V_b·∇)V_c)^i
                                let mut t = 0.0;
                                for l in 0..e {
                                    let mut dg = 0.0;
                                    for k in 0..e {
                                        dg += self.dsigma[(k * d + bb) * e + l]
                                            * self.dsigma[(i * d + c) * e + k]
                                            + self.sigma[k * d + bb]
                                                * self.d2sigma[((i * d + c) * e + k) * e + l];
                                    }
                                    t += self.sigma[l * d + a] * dg;
                                }
                                acc += t * c3 * w;
                            }
                        }
                    }
                    self.delta[i] += acc;
                }
            }
        }
        for i in 0..e {
            y[i] += self.delta[i];
        }
    }
}

/// Integrates over the node range `nodes` starting from `init` at
/// `nodes.start`; returns the states at `nodes.start..=nodes.end`.
pub(crate) fn integrate<F: CoefficientField + ?Sized>(
    field: &F,
    init: &[f64],
    grid: TimeGrid,
    driver: Option<(&RoughPathLift, f64)>,
    nodes: Range<usize>,
    stage: &str,
) -> Result<Vec<f64>> {
    let e = field.state_dim();
    let dt = grid.mesh();
    let mut stepper = Stepper::new(field);
    let mut y = init.to_vec();
    let mut out = Vec::with_capacity((nodes.len() + 1) * e);
    out.extend_from_slice(&y);
    for n in nodes {
        match driver {
            Some((x, scale)) => stepper.step(&mut y, dt, x.interval(n), scale),
            None => {
                stepper.rk4_drift(&y, dt);
                for i in 0..e {
                    y[i] += stepper.delta[i];
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(stage, format!("non-finite state after interval {n}")));
        }
        out.extend_from_slice(&y);
    }
    Ok(out)
}

fn check_initial<F: CoefficientField + ?Sized>(coeff: &F, a: &[f64]) -> Result<()> {
    if a.len() != coeff.state_dim() {
        return Err(Error::Shape(format!(
            "initial point has length {}, coefficients act on R^{}",
            a.len(),
            coeff.state_dim()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("initial", "must be finite"));
    }
    Ok(())
}

fn check_driver<F: CoefficientField + ?Sized>(coeff: &F, x: &RoughPathLift, grid: TimeGrid) -> Result<()> {
    if x.grid() != grid {
        return Err(Error::Shape(format!(
            "driver lives on level {}, solver grid is level {}",
            x.grid().level(),
            grid.level()
        )));
    }
    if x.dim() != coeff.noise_dim() {
        return Err(Error::Shape(format!(
            "driver has dimension {}, coefficients expect {}",
            x.dim(),
            coeff.noise_dim()
        )));
    }
    Ok(())
}

/// Noiseless flow `dy = b(y) dt`, classical RK4 on the grid.
pub fn solve_base_ode<F: CoefficientField + ?Sized>(coeff: &F, a: &[f64], grid: TimeGrid) -> Result<Trajectory> {
    check_initial(coeff, a)?;
    let values = integrate(coeff, a, grid, None, 0..grid.steps(), "base ode")?;
    Trajectory::new(grid, a.len(), values)
}

/// `dy = b(y) dt + ε σ(y) dx`.
pub fn solve_rde<F: CoefficientField + ?Sized>(
    coeff: &F,
    a: &[f64],
    x: &RoughPathLift,
    eps: f64,
    grid: TimeGrid,
) -> Result<Trajectory> {
    check_eps(eps)?;
    check_initial(coeff, a)?;
    check_driver(coeff, x, grid)?;
    let values = integrate(coeff, a, grid, Some((x, eps)), 0..grid.steps(), "rde")?;
    Trajectory::new(grid, a.len(), values)
}

/// `∫₀¹ ∇b(y0 + θ u z)⟨z⟩ dθ` by eight-point Gauss–Legendre.
pub fn theta_drift<F: CoefficientField + ?Sized>(coeff: &F, y0: &[f64], z: &[f64], u: f64) -> Vec<f64> {
    let mut out = vec![0.0; coeff.state_dim()];
    let mut scratch = ThetaScratch::new(coeff.state_dim());
    theta_drift_into(coeff, y0, z, u, &mut scratch, &mut out);
    out
}

struct ThetaScratch {
    point: Vec<f64>,
    jac: Vec<f64>,
}

impl ThetaScratch {
    fn new(e: usize) -> Self {
        Self {
            point: vec![0.0; e],
            jac: vec![0.0; e * e],
        }
    }
}

fn theta_drift_into<F: CoefficientField + ?Sized>(
    coeff: &F,
    y0: &[f64],
    z: &[f64],
    u: f64,
    s: &mut ThetaScratch,
    out: &mut [f64],
) {
    let e = coeff.state_dim();
    out.fill(0.0);
    if u == 0.0 {
        coeff.drift_jacobian(y0, &mut s.jac);
        for i in 0..e {
            out[i] = (0..e).map(|k| s.jac[i * e + k] * z[k]).sum();
        }
        return;
    }
    for &(theta, w) in &GAUSS_LEGENDRE_8 {
        for k in 0..e {
            s.point[k] = y0[k] + theta * u * z[k];
        }
        coeff.drift_jacobian(&s.point, &mut s.jac);
        for i in 0..e {
            out[i] += w * (0..e).map(|k| s.jac[i * e + k] * z[k]).sum::<f64>();
        }
    }
}

/// The `(y, z) ∈ R^{e+e}` system with drift `(b(y), θ-averaged ∇b⟨z⟩)` and
/// diffusion `(0, σ(y + u z))`, `u = εκ(ε)`.
pub(crate) struct CoupledField<'a, F: ?Sized> {
    inner: &'a F,
    u: f64,
    e: usize,
    d: usize,
}

impl<'a, F: CoefficientField + ?Sized> CoupledField<'a, F> {
    pub(crate) fn new(inner: &'a F, u: f64) -> Self {
        Self {
            inner,
            u,
            e: inner.state_dim(),
            d: inner.noise_dim(),
        }
    }

    fn shifted(&self, yz: &[f64]) -> Vec<f64> {
        let (y, z) = yz.split_at(self.e);
        y.iter().zip(z).map(|(a, b)| a + self.u * b).collect()
    }

    /// Maps an order-`order` derivative tensor of `σ` at `y + uz` to the
    /// coupled field: rows `0..e` vanish, every derivative along a `z`
    /// coordinate picks up a factor `u`.
    fn lift_sigma_derivative(&self, inner: &[f64], order: usize, out: &mut [f64]) {
        let (e, d) = (self.e, self.d);
        let big = 2 * e;
        out.fill(0.0);
        let per_row = d * big.pow(order as u32);
        for i in 0..e {
            for j in 0..d {
                for combo in 0..big.pow(order as u32) {
                    let mut rest = combo;
                    let mut inner_idx = i * d + j;
                    let mut digits = vec![0; order];
                    for slot in digits.iter_mut().rev() {
                        *slot = rest % big;
                        rest /= big;
                    }
                    let mut factor = 1.0;
                    for &k in &digits {
                        let (kk, f) = if k < e { (k, 1.0) } else { (k - e, self.u) };
                        inner_idx = inner_idx * e + kk;
                        factor *= f;
                    }
                    out[(e + i) * per_row + j * big.pow(order as u32) + combo] = factor * inner[inner_idx];
                }
            }
        }
    }
}

impl<F: CoefficientField + ?Sized> CoefficientField for CoupledField<'_, F> {
    fn state_dim(&self) -> usize {
        2 * self.e
    }

    fn noise_dim(&self) -> usize {
        self.d
    }

    fn drift(&self, yz: &[f64], out: &mut [f64]) {
        let e = self.e;
        let (y, z) = yz.split_at(e);
        let (top, bottom) = out.split_at_mut(e);
        self.inner.drift(y, top);
        let mut scratch = ThetaScratch::new(e);
        theta_drift_into(self.inner, y, z, self.u, &mut scratch, bottom);
    }

    fn diffusion(&self, yz: &[f64], out: &mut [f64]) {
        let (e, d) = (self.e, self.d);
        out[..e * d].fill(0.0);
        self.inner.diffusion(&self.shifted(yz), &mut out[e * d..]);
    }

    fn derivative_source(&self) -> DerivativeSource {
        self.inner.derivative_source()
    }

    fn drift_jacobian(&self, yz: &[f64], out: &mut [f64]) {
        let e = self.e;
        let big = 2 * e;
        let (y, z) = yz.split_at(e);
        out.fill(0.0);
        let mut jac = vec![0.0; e * e];
        self.inner.drift_jacobian(y, &mut jac);
        for i in 0..e {
            out[i * big..i * big + e].copy_from_slice(&jac[i * e..(i + 1) * e]);
        }
        let mut hess = vec![0.0; e * e * e];
        let mut point = vec![0.0; e];
        let nodes: &[(f64, f64)] = if self.u == 0.0 { &[(0.0, 1.0)] } else { &GAUSS_LEGENDRE_8 };
        for &(theta, w) in nodes {
            for k in 0..e {
                point[k] = y[k] + theta * self.u * z[k];
            }
            self.inner.drift_jacobian(&point, &mut jac);
            self.inner.drift_hessian(&point, &mut hess);
            for i in 0..e {
                for l in 0..e {
                    // Σ_k ∂_l ∂_k b^i z_k
                    let hz: f64 = (0..e).map(|k| hess[(i * e + k) * e + l] * z[k]).sum();
                    out[(e + i) * big + l] += w * hz;
                    out[(e + i) * big + e + l] += w * (jac[i * e + l] + theta * self.u * hz);
                }
            }
        }
    }

    fn diffusion_jacobian(&self, yz: &[f64], out: &mut [f64]) {
        let (e, d) = (self.e, self.d);
        let mut inner = vec![0.0; e * d * e];
        self.inner.diffusion_jacobian(&self.shifted(yz), &mut inner);
        self.lift_sigma_derivative(&inner, 1, out);
    }

    fn diffusion_hessian(&self, yz: &[f64], out: &mut [f64]) {
        let (e, d) = (self.e, self.d);
        let mut inner = vec![0.0; e * d * e * e];
        self.inner.diffusion_hessian(&self.shifted(yz), &mut inner);
        self.lift_sigma_derivative(&inner, 2, out);
    }

    fn diffusion_third(&self, yz: &[f64], out: &mut [f64]) {
        let (e, d) = (self.e, self.d);
        let mut inner = vec![0.0; e * d * e * e * e];
        self.inner.diffusion_third(&self.shifted(yz), &mut inner);
        self.lift_sigma_derivative(&inner, 3, out);
    }
}

/// Solves the coupled system for `(y⁰, ẑ^ε)` driven by `x`; `ẑ^ε_0 = 0`.
pub fn solve_coupled_system<F: CoefficientField + ?Sized>(
    coeff: &F,
    a: &[f64],
    x: &RoughPathLift,
    eps: f64,
    kappa: &KappaSpec,
    grid: TimeGrid,
) -> Result<(Trajectory, Trajectory)> {
    check_eps(eps)?;
    check_initial(coeff, a)?;
    check_driver(coeff, x, grid)?;
    let u = kappa.eps_kappa(eps)?;
    let e = a.len();
    let field = CoupledField::new(coeff, u);
    let mut init = a.to_vec();
    init.resize(2 * e, 0.0);
    let values = integrate(&field, &init, grid, Some((x, 1.0)), 0..grid.steps(), "coupled system")?;
    let mut y0 = Vec::with_capacity(grid.nodes() * e);
    let mut z = Vec::with_capacity(grid.nodes() * e);
    for node in values.chunks_exact(2 * e) {
        y0.extend_from_slice(&node[..e]);
        z.extend_from_slice(&node[e..]);
    }
    Ok((Trajectory::new(grid, e, y0)?, Trajectory::new(grid, e, z)?))
}

/// `Φ(ε, x) = ẑ^ε`.
pub fn phi_map<F: CoefficientField + ?Sized>(
    coeff: &F,
    a: &[f64],
    eps: f64,
    x: &RoughPathLift,
    kappa: &KappaSpec,
    grid: TimeGrid,
) -> Result<Trajectory> {
    solve_coupled_system(coeff, a, x, eps, kappa, grid).map(|(_, z)| z)
}

/// `z^ε = (y^ε - y⁰) / (εκ(ε))`.
pub fn z_from_solutions(y_eps: &Trajectory, y_0: &Trajectory, eps: f64, kappa: &KappaSpec) -> Result<Trajectory> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::validation("eps", format!("must lie in (0, 1], got {eps}")));
    }
    y_eps.check_compatible(y_0)?;
    let u = kappa.eps_kappa(eps)?;
    let values = y_eps
        .values()
        .iter()
        .zip(y_0.values())
        .map(|(a, b)| (a - b) / u)
        .collect();
    Trajectory::new(y_eps.grid(), y_eps.dim(), values)
}

/// Field with drift `b̃^i = b^i - (ε²/2) Σ_{j,k} σ_kj ∂_k σ_ij` and the
/// original diffusion: the Stratonovich drift whose solution coincides with
/// the Itô equation with drift `b`.
#[derive(Clone, Debug)]
pub struct ItoCorrected<F> {
    inner: F,
    eps: f64,
}

pub fn ito_drift_correction<F: CoefficientField>(coeff: F, eps: f64) -> ItoCorrected<F> {
    ItoCorrected { inner: coeff, eps }
}

impl<F: CoefficientField> ItoCorrected<F> {
    fn half_eps2(&self) -> f64 {
        0.5 * self.eps * self.eps
    }

    fn tensors(&self, y: &[f64], order: usize) -> [Vec<f64>; 4] {
        let (e, d) = (self.inner.state_dim(), self.inner.noise_dim());
        let mut s = vec![0.0; e * d];
        let mut s1 = vec![0.0; e * d * e];
        let mut s2 = Vec::new();
        let mut s3 = Vec::new();
        self.inner.diffusion(y, &mut s);
        self.inner.diffusion_jacobian(y, &mut s1);
        if order >= 1 {
            s2 = vec![0.0; e * d * e * e];
            self.inner.diffusion_hessian(y, &mut s2);
        }
        if order >= 2 {
            s3 = vec![0.0; e * d * e * e * e];
            self.inner.diffusion_third(y, &mut s3);
        }
        [s, s1, s2, s3]
    }
}

impl<F: CoefficientField> CoefficientField for ItoCorrected<F> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }

    fn drift(&self, y: &[f64], out: &mut [f64]) {
        self.inner.drift(y, out);
        if self.eps == 0.0 {
            return;
        }
        let (e, d) = (self.state_dim(), self.noise_dim());
        let [s, s1, ..] = self.tensors(y, 0);
        for i in 0..e {
            let mut corr = 0.0;
            for j in 0..d {
                for k in 0..e {
                    corr += s[k * d + j] * s1[(i * d + j) * e + k];
                }
            }
            out[i] -= self.half_eps2() * corr;
        }
    }

    fn diffusion(&self, y: &[f64], out: &mut [f64]) {
        self.inner.diffusion(y, out)
    }

    fn derivative_source(&self) -> DerivativeSource {
        self.inner.derivative_source()
    }

    fn drift_jacobian(&self, y: &[f64], out: &mut [f64]) {
        self.inner.drift_jacobian(y, out);
        if self.eps == 0.0 {
            return;
        }
        let (e, d) = (self.state_dim(), self.noise_dim());
        let [s, s1, s2, _] = self.tensors(y, 1);
        for i in 0..e {
            for l in 0..e {
                let mut corr = 0.0;
                for j in 0..d {
                    for k in 0..e {
                        corr += s1[(k * d + j) * e + l] * s1[(i * d + j) * e + k]
                            + s[k * d + j] * s2[((i * d + j) * e + k) * e + l];
                    }
                }
                out[i * e + l] -= self.half_eps2() * corr;
            }
        }
    }

    fn drift_hessian(&self, y: &[f64], out: &mut [f64]) {
        self.inner.drift_hessian(y, out);
        if self.eps == 0.0 {
            return;
        }
        let (e, d) = (self.state_dim(), self.noise_dim());
        let [s, s1, s2, s3] = self.tensors(y, 2);
        for i in 0..e {
            for l in 0..e {
                for m in 0..e {
                    let mut corr = 0.0;
                    for j in 0..d {
                        for k in 0..e {
                            let ij = i * d + j;
                            let kj = k * d + j;
                            corr += s2[(kj * e + l) * e + m] * s1[ij * e + k]
                                + s1[kj * e + l] * s2[(ij * e + k) * e + m]
                                + s1[kj * e + m] * s2[(ij * e + k) * e + l]
                                + s[kj] * s3[((ij * e + k) * e + l) * e + m];
                        }
                    }
                    out[(i * e + l) * e + m] -= self.half_eps2() * corr;
                }
            }
        }
    }

    fn diffusion_jacobian(&self, y: &[f64], out: &mut [f64]) {
        self.inner.diffusion_jacobian(y, out)
    }

    fn diffusion_hessian(&self, y: &[f64], out: &mut [f64]) {
        self.inner.diffusion_hessian(y, out)
    }

    fn diffusion_third(&self, y: &[f64], out: &mut [f64]) {
        self.inner.diffusion_third(y, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{check_derivatives, AffineField, TanhField};
    use crate::roughpath::{dilate, lift_with_depth};
    use approx::assert_abs_diff_eq;

    fn scalar(drift: f64, offset: f64, sigma0: f64, sigma1: f64) -> AffineField {
        AffineField::new(
            vec![vec![drift]],
            Some(vec![offset]),
            vec![vec![sigma0]],
            vec![vec![vec![sigma1]]],
        )
        .unwrap()
    }

    fn rotation() -> AffineField {
        AffineField::new(
            vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
            None,
            vec![vec![0.0], vec![0.0]],
            Vec::new(),
        )
        .unwrap()
    }

    fn bilinear() -> AffineField {
        AffineField::new(
            vec![vec![-0.5, 0.3], vec![0.1, -0.2]],
            None,
            vec![vec![0.4, 0.1], vec![0.0, 0.3]],
            vec![
                vec![vec![0.3, 0.0], vec![0.1, -0.2]],
                vec![vec![0.0, 0.2], vec![-0.1, 0.25]],
            ],
        )
        .unwrap()
    }

    fn smooth_driver(level: u32, d: usize) -> Trajectory {
        Trajectory::from_fn(TimeGrid::new(level).unwrap(), d, |t, x| {
            for (k, v) in x.iter_mut().enumerate() {
                *v = ((k + 2) as f64 * t).sin() + 0.5 * t * t;
            }
        })
    }

    #[test]
    fn gauss_legendre_weights() {
        let total: f64 = GAUSS_LEGENDRE_8.iter().map(|p| p.1).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-15);
        // exact on θ^15
        let m: f64 = GAUSS_LEGENDRE_8.iter().map(|&(t, w)| w * t.powi(15)).sum();
        assert_abs_diff_eq!(m, 1.0 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn base_ode_examples() {
        let grid = TimeGrid::new(10).unwrap();
        let y = solve_base_ode(&scalar(-1.0, 0.0, 0.0, 0.0), &[1.0], grid).unwrap();
        assert_abs_diff_eq!(y.terminal()[0], (-1.0f64).exp(), epsilon = 1e-8);

        let y = solve_base_ode(&scalar(0.0, 0.0, 1.0, 0.0), &[2.5], grid).unwrap();
        assert!(y.values().iter().all(|&v| v == 2.5));

        let y = solve_base_ode(&rotation(), &[1.0, 0.0], grid).unwrap();
        for (i, node) in y.iter_nodes().enumerate() {
            let t = grid.time(i);
            assert_abs_diff_eq!(node[0], t.cos(), epsilon = 1e-6);
            assert_abs_diff_eq!(node[1], -t.sin(), epsilon = 1e-6);
        }
    }

    #[test]
    fn base_ode_reports_blow_up() {
        struct Explode;
        impl CoefficientField for Explode {
            fn state_dim(&self) -> usize {
                1
            }
            fn noise_dim(&self) -> usize {
                1
            }
            fn drift(&self, y: &[f64], out: &mut [f64]) {
                out[0] = y[0].powi(8);
            }
            fn diffusion(&self, _y: &[f64], out: &mut [f64]) {
                out[0] = 0.0;
            }
        }
        let err = solve_base_ode(&Explode, &[50.0], TimeGrid::new(4).unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn geometric_exponential_solution() {
        let grid = TimeGrid::new(10).unwrap();
        let x = lift_with_depth(&Trajectory::from_fn(grid, 1, |t, v| v[0] = t), Depth::Two);
        let y = solve_rde(&scalar(0.0, 0.0, 0.0, 1.0), &[1.5], &x, 1.0, grid).unwrap();
        assert_abs_diff_eq!(y.terminal()[0], 1.5 * std::f64::consts::E, epsilon = 1e-4);
    }

    #[test]
    fn noise_off_matches_base_ode() {
        let grid = TimeGrid::new(6).unwrap();
        let field = TanhField::new(0.8, 0.3, vec![vec![1.0, 0.5], vec![0.2, -0.7]]).unwrap();
        let x = lift_with_depth(&smooth_driver(6, 2), Depth::Three);
        let base = solve_base_ode(&field, &[0.3, -0.4], grid).unwrap();
        assert_eq!(solve_rde(&field, &[0.3, -0.4], &x, 0.0, grid).unwrap(), base);

        let no_sigma = AffineField::new(vec![vec![-1.0]], None, vec![vec![0.0]], Vec::new()).unwrap();
        let x1 = lift_with_depth(&smooth_driver(6, 1), Depth::Two);
        assert_eq!(
            solve_rde(&no_sigma, &[1.0], &x1, 0.7, grid).unwrap(),
            solve_base_ode(&no_sigma, &[1.0], grid).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let grid = TimeGrid::new(3).unwrap();
        let field = scalar(0.0, 0.0, 1.0, 0.0);
        let x = lift_with_depth(&smooth_driver(3, 1), Depth::Two);
        assert!(solve_rde(&field, &[0.0], &x, 1.5, grid).is_err());
        assert!(solve_rde(&field, &[0.0, 1.0], &x, 0.5, grid).is_err());
        assert!(solve_rde(&field, &[0.0], &x, 0.5, TimeGrid::new(4).unwrap()).is_err());
        let x2 = lift_with_depth(&smooth_driver(3, 2), Depth::Two);
        assert!(solve_rde(&field, &[0.0], &x2, 0.5, grid).is_err());
        assert!(solve_coupled_system(&field, &[0.0], &x, -0.1, &KappaSpec::Power(0.4), grid).is_err());
    }

    #[test]
    fn second_order_for_smooth_drivers() {
        // dy = -y dt + y dx with x_t = sin t: y_1 = exp(-1 + sin 1).
        let exact = (-1.0 + 1.0f64.sin()).exp();
        let field = scalar(-1.0, 0.0, 0.0, 1.0);
        let err = |m: u32| {
            let grid = TimeGrid::new(m).unwrap();
            let x = lift_with_depth(&Trajectory::from_fn(grid, 1, |t, v| v[0] = t.sin()), Depth::Two);
            (solve_rde(&field, &[1.0], &x, 1.0, grid).unwrap().terminal()[0] - exact).abs()
        };
        let (e6, e7, e8) = (err(6), err(7), err(8));
        assert!(e6 / e7 > 3.0 && e7 / e8 > 3.0, "{e6:e} {e7:e} {e8:e}");
    }

    #[test]
    fn flow_property() {
        let grid = TimeGrid::new(7).unwrap();
        let field = bilinear();
        let x = lift_with_depth(&smooth_driver(7, 2), Depth::Three);
        let n = grid.steps();
        let whole = integrate(&field, &[0.2, 1.0], grid, Some((&x, 0.8)), 0..n, "t").unwrap();
        let first = integrate(&field, &[0.2, 1.0], grid, Some((&x, 0.8)), 0..n / 2, "t").unwrap();
        let mid = &first[first.len() - 2..];
        let second = integrate(&field, mid, grid, Some((&x, 0.8)), n / 2..n, "t").unwrap();
        for (a, b) in whole[whole.len() - 2..].iter().zip(&second[second.len() - 2..]) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn theta_drift_examples() {
        let field = TanhField::new(1.0, 0.0, vec![vec![1.0]]).unwrap();
        let mut jac = [0.0];
        field.drift_jacobian(&[0.4], &mut jac);
        assert_eq!(theta_drift(&field, &[0.4], &[2.0], 0.0), vec![jac[0] * 2.0]);
        assert_eq!(theta_drift(&field, &[0.4], &[0.0], 0.7), vec![0.0]);

        // b(y) = y²/2, ∇b(y) = y: ∫₀¹ (1 + θ)·2 dθ = 3.
        struct HalfSquare;
        impl CoefficientField for HalfSquare {
            fn state_dim(&self) -> usize {
                1
            }
            fn noise_dim(&self) -> usize {
                1
            }
            fn drift(&self, y: &[f64], out: &mut [f64]) {
                out[0] = 0.5 * y[0] * y[0];
            }
            fn diffusion(&self, _y: &[f64], out: &mut [f64]) {
                out[0] = 1.0;
            }
            fn drift_jacobian(&self, y: &[f64], out: &mut [f64]) {
                out[0] = y[0];
            }
        }
        assert_abs_diff_eq!(theta_drift(&HalfSquare, &[1.0], &[2.0], 0.5)[0], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn coupled_field_derivatives_are_consistent() {
        let inner = TanhField::new(0.6, 0.4, vec![vec![1.0, 0.5], vec![-0.3, 0.8]]).unwrap();
        for u in [0.0, 0.35] {
            let field = CoupledField::new(&inner, u);
            check_derivatives(&field, &[vec![0.1, -0.3, 0.5, 0.2], vec![-1.0, 0.4, 0.0, -0.6]]).unwrap();
        }
    }

    #[test]
    fn coupled_system_with_smooth_driver_and_identity() {
        let grid = TimeGrid::new(8).unwrap();
        let id = AffineField::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            None,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Vec::new(),
        )
        .unwrap();
        let h = smooth_driver(8, 2);
        let x = lift_with_depth(&h, Depth::Two);
        let z = phi_map(&id, &[0.5, 0.5], 0.0, &x, &KappaSpec::Power(0.4), grid).unwrap();
        assert!(z.sup_distance(&h).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_driver_gives_zero_deviation() {
        let grid = TimeGrid::new(6).unwrap();
        let field = TanhField::new(0.6, 0.4, vec![vec![1.0], vec![-0.3]]).unwrap();
        let x = RoughPathLift::zero(grid, 1, Depth::Three);
        for eps in [0.0, 0.3, 1.0] {
            let z = phi_map(&field, &[0.2, 0.1], eps, &x, &KappaSpec::Power(0.4), grid).unwrap();
            assert_eq!(z.sup_norm(), 0.0);
        }
    }

    #[test]
    fn coupled_base_component_matches_base_ode() {
        let grid = TimeGrid::new(6).unwrap();
        let field = TanhField::new(0.6, 0.4, vec![vec![1.0], vec![-0.3]]).unwrap();
        let x = lift_with_depth(&smooth_driver(6, 1), Depth::Two);
        let (y0, _) = solve_coupled_system(&field, &[0.2, 0.1], &x, 0.4, &KappaSpec::Power(0.4), grid).unwrap();
        assert_eq!(y0, solve_base_ode(&field, &[0.2, 0.1], grid).unwrap());
    }

    #[test]
    fn difference_quotient_matches_dilated_phi() {
        let grid = TimeGrid::new(7).unwrap();
        let field = bilinear();
        let kappa = KappaSpec::Power(0.4);
        let eps = 0.3;
        let a = [0.3, -0.2];
        let x = lift_with_depth(&smooth_driver(7, 2), Depth::Three);
        let y_eps = solve_rde(&field, &a, &x, eps, grid).unwrap();
        let y0 = solve_base_ode(&field, &a, grid).unwrap();
        let z = z_from_solutions(&y_eps, &y0, eps, &kappa).unwrap();
        let k = kappa.eval(eps).unwrap();
        let phi = phi_map(&field, &a, eps, &dilate(&x, 1.0 / k), &kappa, grid).unwrap();
        assert!(z.sup_distance(&phi).unwrap() < 1e-10);
    }

    #[test]
    fn z_from_solutions_examples() {
        let grid = TimeGrid::new(2).unwrap();
        let y0 = Trajectory::from_fn(grid, 1, |t, v| v[0] = t);
        let kappa = KappaSpec::Power(0.4);
        assert_eq!(z_from_solutions(&y0, &y0, 0.5, &kappa).unwrap().sup_norm(), 0.0);
        let shifted = Trajectory::from_fn(grid, 1, |t, v| v[0] = t + 0.5);
        let unit = KappaSpec::Table(vec![(0.5, 1.0), (1.0, 1.0)]);
        let z = z_from_solutions(&shifted, &y0, 0.5, &unit).unwrap();
        assert!(z.values().iter().all(|&v| v == 1.0));
        assert!(z_from_solutions(&shifted, &y0, 0.0, &unit).is_err());
    }

    #[test]
    fn kappa_forms() {
        let p = KappaSpec::Power(0.4);
        p.validate().unwrap();
        assert_eq!(p.eps_kappa(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(p.eval(0.5).unwrap(), 0.5f64.powf(-0.4), epsilon = 1e-15);
        assert!(KappaSpec::Power(1.0).validate().is_err());
        assert!(KappaSpec::Power(0.0).validate().is_err());
        let t = KappaSpec::Table(vec![(0.5, 2.0), (0.25, 3.0), (1.0, 1.0)]);
        t.validate().unwrap();
        assert_eq!(t.eval(0.25).unwrap(), 3.0);
        assert_abs_diff_eq!(t.eval(0.375).unwrap(), 2.5, epsilon = 1e-15);
        assert!(t.eval(0.1).is_err());
        assert!(KappaSpec::Table(vec![(0.5, 1.0), (0.25, 0.5)]).validate().is_err());
        assert!(KappaSpec::Table(vec![(0.5, 1.0), (0.5, 2.0)]).validate().is_err());
        p.check_moderate_scaling(&[0.5, 0.35, 0.25, 0.18, 0.12]).unwrap();
        assert!(KappaSpec::unit().check_moderate_scaling(&[0.5, 0.25]).is_err());
        // κ(ε) = 1/ε makes εκ constant.
        let flat = KappaSpec::Table(vec![(0.25, 4.0), (0.5, 2.0)]);
        assert!(flat.check_moderate_scaling(&[0.5, 0.25]).is_err());
    }

    #[test]
    fn kappa_json_shape() {
        let p: KappaSpec = serde_json::from_str(r#"{"power":0.4}"#).unwrap();
        assert_eq!(p, KappaSpec::Power(0.4));
        let t: KappaSpec = serde_json::from_str(r#"{"table":[[0.5,1.2],[1.0,1.0]]}"#).unwrap();
        assert_eq!(t, KappaSpec::Table(vec![(0.5, 1.2), (1.0, 1.0)]));
    }

    #[test]
    fn ito_correction_examples() {
        // σ(y) = y, b = 0, ε = 1: b̃(y) = -y/2.
        let gbm = scalar(0.0, 0.0, 0.0, 1.0);
        let corrected = ito_drift_correction(&gbm, 1.0);
        let mut out = [0.0];
        corrected.drift(&[3.0], &mut out);
        assert_eq!(out[0], -1.5);

        let field = TanhField::new(0.6, 0.4, vec![vec![1.0, 0.5], vec![-0.3, 0.8]]).unwrap();
        let same = ito_drift_correction(&field, 0.0);
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        same.drift(&[0.3, 0.1], &mut a);
        field.drift(&[0.3, 0.1], &mut b);
        assert_eq!(a, b);

        let additive = scalar(-0.7, 0.2, 1.3, 0.0);
        let c = ito_drift_correction(&additive, 0.9);
        let (mut a, mut b) = ([0.0], [0.0]);
        c.drift(&[0.4], &mut a);
        additive.drift(&[0.4], &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn ito_correction_derivatives_are_consistent() {
        let field = TanhField::new(0.6, 0.4, vec![vec![1.0, 0.5], vec![-0.3, 0.8]]).unwrap();
        let c = ito_drift_correction(&field, 0.7);
        check_derivatives(&c, &[vec![0.2, -0.5], vec![1.1, 0.3]]).unwrap();
    }
}
