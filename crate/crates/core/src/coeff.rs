//! Drift and diffusion coefficients together with their derivatives.
//!
//! Tensor layouts (all row-major, `e` = state dimension, `d` = noise dimension):
//!
//! | quantity            | index of `∂…` entry                      |
//! |---------------------|------------------------------------------|
//! | `b^i`               | `i`                                      |
//! | `∂_k b^i`           | `i*e + k`                                |
//! | `∂_l ∂_k b^i`       | `(i*e + k)*e + l`                        |
//! | `σ_ij`              | `i*d + j`                                |
//! | `∂_k σ_ij`          | `(i*d + j)*e + k`                        |
//! | `∂_l ∂_k σ_ij`      | `((i*d + j)*e + k)*e + l`                |
//! | `∂_m ∂_l ∂_k σ_ij`  | `(((i*d + j)*e + k)*e + l)*e + m`        |

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Central finite-difference step used by the default derivative evaluators.
pub const FD_STEP: f64 = 1e-5;

/// Where the derivative evaluators of a field come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeSource {
    ClosedForm,
    FiniteDifference,
}

/// Coefficients `b: R^e -> R^e` and `σ: R^e -> R^{e×d}`.
///
/// Only `drift` and `diffusion` are required. The derivative methods default
/// to central differences of the level below with step [`FD_STEP`]; a field
/// that overrides all of them with exact formulas should report
/// [`DerivativeSource::ClosedForm`].
///
/// Evaluators must be safe for concurrent read-only use.
pub trait CoefficientField: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn drift(&self, y: &[f64], out: &mut [f64]);
    fn diffusion(&self, y: &[f64], out: &mut [f64]);

    fn derivative_source(&self) -> DerivativeSource {
        DerivativeSource::FiniteDifference
    }

    fn drift_jacobian(&self, y: &[f64], out: &mut [f64]) {
        let e = self.state_dim();
        central_difference(e, e, |p, o| self.drift(p, o), y, out);
    }

    fn drift_hessian(&self, y: &[f64], out: &mut [f64]) {
        let e = self.state_dim();
        central_difference(e, e * e, |p, o| self.drift_jacobian(p, o), y, out);
    }

    fn diffusion_jacobian(&self, y: &[f64], out: &mut [f64]) {
        let (e, d) = (self.state_dim(), self.noise_dim());
        central_difference(e, e * d, |p, o| self.diffusion(p, o), y, out);
    }

    fn diffusion_hessian(&self, y: &[f64], out: &mut [f64]) {
        let (e, d) = (self.state_dim(), self.noise_dim());
        central_difference(e, e * d * e, |p, o| self.diffusion_jacobian(p, o), y, out);
    }

    fn diffusion_third(&self, y: &[f64], out: &mut [f64]) {
        let (e, d) = (self.state_dim(), self.noise_dim());
        central_difference(e, e * d * e * e, |p, o| self.diffusion_hessian(p, o), y, out);
    }
}

/// `out[idx*e + k] = (f(y + h e_k)[idx] - f(y - h e_k)[idx]) / 2h`.
fn central_difference(
    e: usize,
    inner: usize,
    f: impl Fn(&[f64], &mut [f64]),
    y: &[f64],
    out: &mut [f64],
) {
    let mut p = y.to_vec();
    let mut plus = vec![0.0; inner];
    let mut minus = vec![0.0; inner];
    for k in 0..e {
        p[k] = y[k] + FD_STEP;
        f(&p, &mut plus);
        p[k] = y[k] - FD_STEP;
        f(&p, &mut minus);
        p[k] = y[k];
        for idx in 0..inner {
            out[idx * e + k] = (plus[idx] - minus[idx]) / (2.0 * FD_STEP);
        }
    }
}

macro_rules! forward_field {
    ($($ty:ty),*) => {$(
        impl<T: CoefficientField + ?Sized> CoefficientField for $ty {
            fn state_dim(&self) -> usize { (**self).state_dim() }
            fn noise_dim(&self) -> usize { (**self).noise_dim() }
            fn drift(&self, y: &[f64], out: &mut [f64]) { (**self).drift(y, out) }
            fn diffusion(&self, y: &[f64], out: &mut [f64]) { (**self).diffusion(y, out) }
            fn derivative_source(&self) -> DerivativeSource { (**self).derivative_source() }
            fn drift_jacobian(&self, y: &[f64], out: &mut [f64]) { (**self).drift_jacobian(y, out) }
            fn drift_hessian(&self, y: &[f64], out: &mut [f64]) { (**self).drift_hessian(y, out) }
            fn diffusion_jacobian(&self, y: &[f64], out: &mut [f64]) { (**self).diffusion_jacobian(y, out) }
            fn diffusion_hessian(&self, y: &[f64], out: &mut [f64]) { (**self).diffusion_hessian(y, out) }
            fn diffusion_third(&self, y: &[f64], out: &mut [f64]) { (**self).diffusion_third(y, out) }
        }
    )*};
}

forward_field!(&T, Box<T>, Arc<T>);

/// Compares every derivative evaluator against central differences of the
/// level below at the given probe points. Fails when the discrepancy exceeds
/// `1e-4` relative to the size of the tensor being checked.
pub fn check_derivatives<F: CoefficientField + ?Sized>(field: &F, probes: &[Vec<f64>]) -> Result<()> {
    let (e, d) = (field.state_dim(), field.noise_dim());
    for y in probes {
        if y.len() != e {
            return Err(Error::Shape(format!("probe has length {}, expected {e}", y.len())));
        }
        let checks: [(&str, usize, Box<dyn Fn(&[f64], &mut [f64]) + '_>, Box<dyn Fn(&[f64], &mut [f64]) + '_>); 5] = [
            ("drift_jacobian", e, Box::new(|p, o| field.drift(p, o)), Box::new(|p, o| field.drift_jacobian(p, o))),
            ("drift_hessian", e * e, Box::new(|p, o| field.drift_jacobian(p, o)), Box::new(|p, o| field.drift_hessian(p, o))),
            ("diffusion_jacobian", e * d, Box::new(|p, o| field.diffusion(p, o)), Box::new(|p, o| field.diffusion_jacobian(p, o))),
            ("diffusion_hessian", e * d * e, Box::new(|p, o| field.diffusion_jacobian(p, o)), Box::new(|p, o| field.diffusion_hessian(p, o))),
            ("diffusion_third", e * d * e * e, Box::new(|p, o| field.diffusion_hessian(p, o)), Box::new(|p, o| field.diffusion_third(p, o))),
        ];
        for (name, inner, below, exact) in checks.iter() {
            let mut fd = vec![0.0; inner * e];
            let mut ex = vec![0.0; inner * e];
            central_difference(e, *inner, below, y, &mut fd);
            exact(y, &mut ex);
            let scale = fd.iter().chain(&ex).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
            let worst = fd.iter().zip(&ex).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if worst > 1e-4 * scale || ex.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    "coefficient derivatives",
                    format!("{name} disagrees with finite differences at {y:?}: error {worst:e}, scale {scale:e}"),
                ));
            }
        }
    }
    Ok(())
}

/// `b(y) = A y + c`, `σ_{·j}(y) = D_{·j} + B_j y`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    e: usize,
    d: usize,
    drift_matrix: Vec<f64>,
    drift_offset: Vec<f64>,
    diffusion_offset: Vec<f64>,
    /// `B_j[i][k]` at `(j*e + i)*e + k`.
    diffusion_linear: Vec<f64>,
}

impl AffineField {
    /// `drift_matrix` is `e×e`, `diffusion_offset` is `e×d`; `diffusion_linear`
    /// holds one `e×e` matrix per noise coordinate (empty for additive noise).
    pub fn new(
        drift_matrix: Vec<Vec<f64>>,
        drift_offset: Option<Vec<f64>>,
        diffusion_offset: Vec<Vec<f64>>,
        diffusion_linear: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let e = drift_matrix.len();
        if e == 0 || drift_matrix.iter().any(|r| r.len() != e) {
            return Err(Error::validation("params.drift", "must be a non-empty square matrix"));
        }
        if diffusion_offset.len() != e {
            return Err(Error::validation("params.diffusion", format!("must have {e} rows")));
        }
        let d = diffusion_offset[0].len();
        if d == 0 || diffusion_offset.iter().any(|r| r.len() != d) {
            return Err(Error::validation("params.diffusion", "rows must share a positive length"));
        }
        let drift_offset = drift_offset.unwrap_or_else(|| vec![0.0; e]);
        if drift_offset.len() != e {
            return Err(Error::validation("params.drift_offset", format!("must have length {e}")));
        }
        let linear = if diffusion_linear.is_empty() {
            vec![0.0; d * e * e]
        } else {
            if diffusion_linear.len() != d
                || diffusion_linear
                    .iter()
                    .any(|m| m.len() != e || m.iter().any(|r| r.len() != e))
            {
                return Err(Error::validation(
                    "params.diffusion_linear",
                    format!("must hold {d} matrices of size {e}x{e}"),
                ));
            }
            diffusion_linear.into_iter().flatten().flatten().collect()
        };
        let all = drift_matrix
            .iter()
            .flatten()
            .chain(&drift_offset)
            .chain(diffusion_offset.iter().flatten())
            .chain(&linear);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::validation("params", "coefficients must be finite"));
        }
        Ok(Self {
            e,
            d,
            drift_matrix: drift_matrix.into_iter().flatten().collect(),
            drift_offset,
            diffusion_offset: diffusion_offset.into_iter().flatten().collect(),
            diffusion_linear: linear,
        })
    }
}

impl CoefficientField for AffineField {
    fn state_dim(&self) -> usize {
        self.e
    }

    fn noise_dim(&self) -> usize {
        self.d
    }

    fn drift(&self, y: &[f64], out: &mut [f64]) {
        let e = self.e;
        for i in 0..e {
            let row = &self.drift_matrix[i * e..(i + 1) * e];
            out[i] = self.drift_offset[i] + row.iter().zip(y).map(|(a, v)| a * v).sum::<f64>();
        }
    }

    fn diffusion(&self, y: &[f64], out: &mut [f64]) {
        let (e, d) = (self.e, self.d);
        for i in 0..e {
            for j in 0..d {
                let b = &self.diffusion_linear[(j * e + i) * e..(j * e + i + 1) * e];
                out[i * d + j] =
                    self.diffusion_offset[i * d + j] + b.iter().zip(y).map(|(a, v)| a * v).sum::<f64>();
            }
        }
    }

    fn derivative_source(&self) -> DerivativeSource {
        DerivativeSource::ClosedForm
    }

    fn drift_jacobian(&self, _y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.drift_matrix);
    }

    fn drift_hessian(&self, _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion_jacobian(&self, _y: &[f64], out: &mut [f64]) {
        let (e, d) = (self.e, self.d);
        for i in 0..e {
            for j in 0..d {
                for k in 0..e {
                    out[(i * d + j) * e + k] = self.diffusion_linear[(j * e + i) * e + k];
                }
            }
        }
    }

    fn diffusion_hessian(&self, _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion_third(&self, _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Bounded smooth coefficients: `b^i(y) = -λ tanh(y_i)`,
/// `σ_ij(y) = D_ij (1 + γ tanh(y_i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TanhField {
    e: usize,
    d: usize,
    rate: f64,
    modulation: f64,
    diffusion: Vec<f64>,
}

impl TanhField {
    pub fn new(rate: f64, modulation: f64, diffusion: Vec<Vec<f64>>) -> Result<Self> {
        let e = diffusion.len();
        let d = diffusion.first().map_or(0, Vec::len);
        if e == 0 || d == 0 || diffusion.iter().any(|r| r.len() != d) {
            return Err(Error::validation("params.diffusion", "must be a non-empty rectangular matrix"));
        }
        if !rate.is_finite() || !modulation.is_finite() || diffusion.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("params", "coefficients must be finite"));
        }
        Ok(Self {
            e,
            d,
            rate,
            modulation,
            diffusion: diffusion.into_iter().flatten().collect(),
        })
    }
}

/// `(tanh, tanh', tanh'', tanh''')` at `x`.
fn tanh_derivatives(x: f64) -> [f64; 4] {
    let th = x.tanh();
    let s = 1.0 - th * th;
    [th, s, -2.0 * th * s, s * (4.0 * th * th - 2.0 * s)]
}

impl CoefficientField for TanhField {
    fn state_dim(&self) -> usize {
        self.e
    }

    fn noise_dim(&self) -> usize {
        self.d
    }

    fn drift(&self, y: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(y) {
            *o = -self.rate * v.tanh();
        }
    }

    fn diffusion(&self, y: &[f64], out: &mut [f64]) {
        let d = self.d;
        for i in 0..self.e {
            let f = 1.0 + self.modulation * y[i].tanh();
            for j in 0..d {
                out[i * d + j] = self.diffusion[i * d + j] * f;
            }
        }
    }

    fn derivative_source(&self) -> DerivativeSource {
        DerivativeSource::ClosedForm
    }

    fn drift_jacobian(&self, y: &[f64], out: &mut [f64]) {
        let e = self.e;
        out.fill(0.0);
        for i in 0..e {
            out[i * e + i] = -self.rate * tanh_derivatives(y[i])[1];
        }
    }

    fn drift_hessian(&self, y: &[f64], out: &mut [f64]) {
        let e = self.e;
        out.fill(0.0);
        for i in 0..e {
            out[(i * e + i) * e + i] = -self.rate * tanh_derivatives(y[i])[2];
        }
    }

    fn diffusion_jacobian(&self, y: &[f64], out: &mut [f64]) {
        self.diagonal_derivative(y, 1, out);
    }

    fn diffusion_hessian(&self, y: &[f64], out: &mut [f64]) {
        self.diagonal_derivative(y, 2, out);
    }

    fn diffusion_third(&self, y: &[f64], out: &mut [f64]) {
        self.diagonal_derivative(y, 3, out);
    }
}

impl TanhField {
    /// `σ_ij` depends on `y_i` only, so its `order`-th derivative tensor is
    /// supported on the all-`i` multi-index.
    fn diagonal_derivative(&self, y: &[f64], order: usize, out: &mut [f64]) {
        let (e, d) = (self.e, self.d);
        out.fill(0.0);
        for i in 0..e {
            let g = self.modulation * tanh_derivatives(y[i])[order];
            for j in 0..d {
                let mut idx = i * d + j;
                for _ in 0..order {
                    idx = idx * e + i;
                }
                out[idx] = self.diffusion[i * d + j] * g;
            }
        }
    }
}

/// Built-in coefficient fields addressable by name in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// Linear drift with additive noise.
    Linear(LinearParams),
    /// Linear drift with affine (multiplicative) noise.
    Bilinear(BilinearParams),
    Tanh(TanhParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub drift: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_offset: Option<Vec<f64>>,
    pub diffusion: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilinearParams {
    pub drift: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_offset: Option<Vec<f64>>,
    pub diffusion: Vec<Vec<f64>>,
    /// One `e×e` matrix per noise coordinate.
    pub diffusion_linear: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TanhParams {
    pub rate: f64,
    #[serde(default)]
    pub modulation: f64,
    pub diffusion: Vec<Vec<f64>>,
}

impl CoefficientSpec {
    pub fn build(&self) -> Result<Arc<dyn CoefficientField>> {
        Ok(match self {
            CoefficientSpec::Linear(p) => Arc::new(AffineField::new(
                p.drift.clone(),
                p.drift_offset.clone(),
                p.diffusion.clone(),
                Vec::new(),
            )?),
            CoefficientSpec::Bilinear(p) => {
                if p.diffusion_linear.is_empty() {
                    return Err(Error::validation("params.diffusion_linear", "must not be empty"));
                }
                Arc::new(AffineField::new(
                    p.drift.clone(),
                    p.drift_offset.clone(),
                    p.diffusion.clone(),
                    p.diffusion_linear.clone(),
                )?)
            }
            CoefficientSpec::Tanh(p) => Arc::new(TanhField::new(p.rate, p.modulation, p.diffusion.clone())?),
        })
    }

    /// `b = 0`, `σ = Id_d`.
    pub fn identity(d: usize) -> Self {
        let eye = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        CoefficientSpec::Linear(LinearParams {
            drift: vec![vec![0.0; d]; d],
            drift_offset: None,
            diffusion: eye,
        })
    }
}
