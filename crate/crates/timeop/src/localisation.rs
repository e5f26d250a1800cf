//! Localisation functions `f` and the renormalised dilation average `R_f`.
//!
//! A localisation profile is an even function on `ℝ^d` equal to 1 near the
//! origin with polynomial (here: Gaussian) decay. Its renormalised average
//! over the dilation group,
//!
//! ```text
//! R_f(x) = ∫_0^∞ (dμ/μ) [ f(μx) − χ_{[0,1]}(μ) ],
//! ```
//!
//! is finite for `x ≠ 0`; its gradient feeds the time-operator construction.
//! For radial profiles the gradient collapses to the closed form `−x/|x|²`,
//! independent of the detailed shape of `f`; the quadrature route stays
//! available as an independent cross-check. The Euler relation
//! `x · R_f'(x) = −1` holds for every differentiable profile.

use crate::quadrature::{integrate_segments, QuadResult};
use crate::linalg::{smoothstep, smoothstep_deriv};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Quadrature absolute tolerance for `R_f` and its gradient.
const RF_QUAD_TOL: f64 = 1e-12;

/// The Gaussian tail `exp(-u²)` is treated as zero beyond this many widths.
const TAIL_WIDTHS: f64 = 7.5;

#[derive(Debug, Error)]
pub enum LocalisationError {
    #[error("R_f and its gradient are singular at the origin")]
    SingularAtOrigin,
    #[error("profile kind `{kind}` is not differentiable")]
    NonDifferentiable { kind: String },
    #[error("point dimension {got} does not match profile dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("profile is not even: |f(x) - f(-x)| = {defect:.3e} at a sampled point")]
    NotEven { defect: f64 },
    #[error("invalid profile parameter: {0}")]
    BadParameter(String),
}

/// Built-in profile shapes.
#[derive(Clone)]
pub enum ProfileKind {
    /// `f(x) = h(|x|)`: radial plateau with smooth Gaussian-tail decay.
    RadialPlateau,
    /// `f(x) = Π_j h(|x_j|)`: even but non-radial for d ≥ 2.
    ProductPlateau,
    /// Sharp indicator of the ball `|x| ≤ plateau_radius` (non-smooth).
    IndicatorBall,
    /// User-supplied even function, with optional gradient.
    Custom(CustomProfile),
}

impl std::fmt::Debug for ProfileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl ProfileKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProfileKind::RadialPlateau => "radial_plateau",
            ProfileKind::ProductPlateau => "product_plateau",
            ProfileKind::IndicatorBall => "indicator_ball",
            ProfileKind::Custom(_) => "custom",
        }
    }
}

type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct CustomProfile {
    pub f: PointFn,
    pub grad: Option<GradFn>,
    /// Whether the function is radial (enables the closed-form gradient).
    pub radial: bool,
}

/// Serializable description of a built-in profile (the CLI config schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSettings {
    pub kind: String,
    pub dimension: usize,
    #[serde(default = "default_plateau")]
    pub plateau_radius: f64,
    #[serde(default = "default_scale")]
    pub decay_scale: f64,
    #[serde(default = "default_order")]
    pub smooth_order: u32,
    #[serde(default = "default_rho")]
    pub decay_exponent: f64,
}

fn default_plateau() -> f64 {
    1.0
}
fn default_scale() -> f64 {
    1.0
}
fn default_order() -> u32 {
    5
}
fn default_rho() -> f64 {
    1.0
}

/// An even localisation function equal to 1 on a neighbourhood of the origin.
#[derive(Debug, Clone)]
pub struct LocalisationProfile {
    pub dimension: usize,
    pub kind: ProfileKind,
    pub plateau_radius: f64,
    pub decay_scale: f64,
    pub smooth_order: u32,
    /// Decay exponent ρ (metadata; the Gaussian tail dominates any power).
    pub decay_exponent: f64,
}

/// Value of `R_f(x)` with the quadrature error estimate carried along.
#[derive(Debug, Clone, Copy)]
pub struct RfValue {
    pub value: f64,
    pub quadrature_error_estimate: f64,
}

impl LocalisationProfile {
    pub fn radial_plateau(dimension: usize, plateau_radius: f64, decay_scale: f64) -> Self {
        Self {
            dimension,
            kind: ProfileKind::RadialPlateau,
            plateau_radius,
            decay_scale,
            smooth_order: 5,
            decay_exponent: 1.0,
        }
    }

    pub fn product_plateau(dimension: usize, plateau_radius: f64, decay_scale: f64) -> Self {
        Self {
            dimension,
            kind: ProfileKind::ProductPlateau,
            plateau_radius,
            decay_scale,
            smooth_order: 5,
            decay_exponent: 1.0,
        }
    }

    pub fn indicator_ball(dimension: usize, radius: f64) -> Self {
        Self {
            dimension,
            kind: ProfileKind::IndicatorBall,
            plateau_radius: radius,
            decay_scale: 1.0,
            smooth_order: 3,
            decay_exponent: 1.0,
        }
    }

    pub fn custom(dimension: usize, profile: CustomProfile) -> Self {
        Self {
            dimension,
            kind: ProfileKind::Custom(profile),
            plateau_radius: 1.0,
            decay_scale: 1.0,
            smooth_order: 5,
            decay_exponent: 1.0,
        }
    }

    pub fn with_order(mut self, smooth_order: u32) -> Self {
        self.smooth_order = smooth_order;
        self
    }

    pub fn from_settings(s: &ProfileSettings) -> Result<Self, LocalisationError> {
        if s.plateau_radius <= 0.0 || s.decay_scale <= 0.0 {
            return Err(LocalisationError::BadParameter(
                "plateau_radius and decay_scale must be positive".into(),
            ));
        }
        if s.smooth_order < 3 || s.smooth_order % 2 == 0 {
            return Err(LocalisationError::BadParameter(
                "smooth_order must be odd and at least 3".into(),
            ));
        }
        let kind = match s.kind.as_str() {
            "radial_plateau" => ProfileKind::RadialPlateau,
            "product_plateau" => ProfileKind::ProductPlateau,
            "indicator_ball" => ProfileKind::IndicatorBall,
            other => {
                return Err(LocalisationError::BadParameter(format!(
                    "unknown profile kind `{other}`"
                )))
            }
        };
        Ok(Self {
            dimension: s.dimension,
            kind,
            plateau_radius: s.plateau_radius,
            decay_scale: s.decay_scale,
            smooth_order: s.smooth_order,
            decay_exponent: s.decay_exponent,
        })
    }

    pub fn settings(&self) -> ProfileSettings {
        ProfileSettings {
            kind: self.kind.name().to_string(),
            dimension: self.dimension,
            plateau_radius: self.plateau_radius,
            decay_scale: self.decay_scale,
            smooth_order: self.smooth_order,
            decay_exponent: self.decay_exponent,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        match &self.kind {
            ProfileKind::IndicatorBall => false,
            ProfileKind::Custom(c) => c.grad.is_some() || c.radial,
            _ => true,
        }
    }

    pub fn is_radial(&self) -> bool {
        match &self.kind {
            ProfileKind::RadialPlateau | ProfileKind::IndicatorBall => true,
            ProfileKind::ProductPlateau => self.dimension == 1,
            ProfileKind::Custom(c) => c.radial,
        }
    }

    /// Scalar plateau-with-tail: 1 on `[0, r0]`, then `exp(−ψ(u))` with
    /// `ψ(u) = u² S(u)` and `u = (s − r0)/scale`, so the tail is a pure
    /// Gaussian beyond one decay scale and the junction is `C^{k+2}`.
    fn plateau_scalar(&self, s: f64) -> f64 {
        let s = s.abs();
        if s <= self.plateau_radius {
            return 1.0;
        }
        let u = (s - self.plateau_radius) / self.decay_scale;
        let psi = u * u * smoothstep(self.smooth_order, u);
        (-psi).exp()
    }

    fn plateau_scalar_deriv(&self, s: f64) -> f64 {
        let sign = if s < 0.0 { -1.0 } else { 1.0 };
        let s = s.abs();
        if s <= self.plateau_radius {
            return 0.0;
        }
        let u = (s - self.plateau_radius) / self.decay_scale;
        let step = smoothstep(self.smooth_order, u);
        let dstep = smoothstep_deriv(self.smooth_order, u);
        let dpsi = 2.0 * u * step + u * u * dstep;
        let psi = u * u * step;
        sign * (-dpsi / self.decay_scale) * (-psi).exp()
    }

    /// Largest scalar argument beyond which the plateau factor is negligible.
    fn tail_cutoff(&self) -> f64 {
        self.plateau_radius + TAIL_WIDTHS * self.decay_scale
    }

    /// Evaluates `f(x)`.
    pub fn eval_f(&self, x: &[f64]) -> Result<f64, LocalisationError> {
        self.check_dim(x)?;
        Ok(match &self.kind {
            ProfileKind::RadialPlateau => self.plateau_scalar(norm(x)),
            ProfileKind::ProductPlateau => x.iter().map(|&c| self.plateau_scalar(c)).product(),
            ProfileKind::IndicatorBall => {
                if norm(x) <= self.plateau_radius {
                    1.0
                } else {
                    0.0
                }
            }
            ProfileKind::Custom(c) => (c.f)(x),
        })
    }

    /// Componentwise gradient of `f` at `x`.
    pub fn grad_f(&self, x: &[f64]) -> Result<Vec<f64>, LocalisationError> {
        self.check_dim(x)?;
        match &self.kind {
            ProfileKind::RadialPlateau => {
                let r = norm(x);
                if r == 0.0 {
                    return Ok(vec![0.0; x.len()]);
                }
                let h = self.plateau_scalar_deriv(r);
                Ok(x.iter().map(|&c| h * c / r).collect())
            }
            ProfileKind::ProductPlateau => {
                let factors: Vec<f64> = x.iter().map(|&c| self.plateau_scalar(c)).collect();
                let mut grad = Vec::with_capacity(x.len());
                for j in 0..x.len() {
                    let mut g = self.plateau_scalar_deriv(x[j]);
                    for (k, &fac) in factors.iter().enumerate() {
                        if k != j {
                            g *= fac;
                        }
                    }
                    grad.push(g);
                }
                Ok(grad)
            }
            ProfileKind::IndicatorBall => Err(LocalisationError::NonDifferentiable {
                kind: "indicator_ball".into(),
            }),
            ProfileKind::Custom(c) => match &c.grad {
                Some(g) => Ok(g(x)),
                None => Err(LocalisationError::NonDifferentiable {
                    kind: "custom (no gradient supplied)".into(),
                }),
            },
        }
    }

    /// Verifies evenness on a deterministic sample grid.
    pub fn validate_even(&self) -> Result<(), LocalisationError> {
        let d = self.dimension;
        let mut worst = 0.0f64;
        // Low-discrepancy-ish deterministic grid of directions and radii.
        for i in 0..40 {
            let mut x = vec![0.0; d];
            for (j, slot) in x.iter_mut().enumerate() {
                let t = ((i * (j + 3) + 7 * j + 1) % 97) as f64 / 97.0 - 0.5;
                *slot = 2.0 * t * (self.plateau_radius + 3.0 * self.decay_scale);
            }
            let neg: Vec<f64> = x.iter().map(|&c| -c).collect();
            let defect = (self.eval_f(&x)? - self.eval_f(&neg)?).abs();
            worst = worst.max(defect);
        }
        if worst > 1e-12 {
            return Err(LocalisationError::NotEven { defect: worst });
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), LocalisationError> {
        if x.len() != self.dimension {
            return Err(LocalisationError::DimensionMismatch {
                got: x.len(),
                expected: self.dimension,
            });
        }
        Ok(())
    }

    /// `R_f(x)` by adaptive quadrature split at the renormaliser jump `μ = 1`
    /// and at the plateau/tail boundaries of every coordinate.
    pub fn eval_rf(&self, x: &[f64]) -> Result<RfValue, LocalisationError> {
        self.check_dim(x)?;
        let r = norm(x);
        if r == 0.0 {
            return Err(LocalisationError::SingularAtOrigin);
        }
        if let ProfileKind::IndicatorBall = self.kind {
            // Exact: f(μx) = χ(μ ≤ R/|x|), so R_f(x) = ln(R/|x|).
            return Ok(RfValue {
                value: (self.plateau_radius / r).ln(),
                quadrature_error_estimate: 0.0,
            });
        }

        // f(μx) = 1 until the fastest coordinate leaves the plateau.
        let s_max = max_abs(x).max(1e-300);
        let mu_plateau_end = self.plateau_radius / s_max;
        let mu_tail = self.tail_cutoff() / s_max * 1.0 + 0.0;

        let mut points = vec![mu_plateau_end.min(1.0)];
        let mut breaks: Vec<f64> = Vec::new();
        for &c in x {
            let a = c.abs();
            if a > 0.0 {
                breaks.push(self.plateau_radius / a);
                breaks.push((self.plateau_radius + self.decay_scale) / a);
            }
        }
        breaks.push(1.0);
        breaks.push(mu_tail);
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for b in breaks {
            if b > *points.last().unwrap() + 1e-300 && b <= mu_tail {
                points.push(b);
            }
        }
        if *points.last().unwrap() < mu_tail {
            points.push(mu_tail);
        }

        let integrand = |mu: f64| -> f64 {
            let scaled: Vec<f64> = x.iter().map(|&c| mu * c).collect();
            let f = self.eval_f(&scaled).unwrap_or(0.0);
            let chi = if mu <= 1.0 { 1.0 } else { 0.0 };
            (f - chi) / mu
        };
        let q = integrate_segments(integrand, &points, RF_QUAD_TOL);
        Ok(RfValue {
            value: q.value,
            quadrature_error_estimate: q.error_estimate + 1e-15,
        })
    }

    /// Gradient of `R_f`: closed form `−x/|x|²` for radial profiles, else the
    /// componentwise dilation integral of the gradient of `f`.
    pub fn eval_rf_grad(&self, x: &[f64]) -> Result<Vec<f64>, LocalisationError> {
        self.check_dim(x)?;
        let r = norm(x);
        if r == 0.0 {
            return Err(LocalisationError::SingularAtOrigin);
        }
        if !self.is_differentiable() {
            return Err(LocalisationError::NonDifferentiable {
                kind: self.kind.name().into(),
            });
        }
        if self.is_radial() {
            return Ok(x.iter().map(|&c| -c / (r * r)).collect());
        }
        self.eval_rf_grad_quadrature(x)
    }

    /// Quadrature route for the gradient: `R_f'(x)_j = ∫_0^∞ dμ (∂_j f)(μx)`.
    ///
    /// Available for every differentiable profile, radial ones included, as
    /// an independent check of the closed form.
    pub fn eval_rf_grad_quadrature(&self, x: &[f64]) -> Result<Vec<f64>, LocalisationError> {
        self.check_dim(x)?;
        let r = norm(x);
        if r == 0.0 {
            return Err(LocalisationError::SingularAtOrigin);
        }
        if !self.is_differentiable() {
            return Err(LocalisationError::NonDifferentiable {
                kind: self.kind.name().into(),
            });
        }
        let s_max = max_abs(x).max(1e-300);
        let mu_tail = self.tail_cutoff() / s_max;
        let mut points: Vec<f64> = vec![0.0];
        let mut breaks: Vec<f64> = Vec::new();
        for &c in x {
            let a = c.abs();
            if a > 0.0 {
                breaks.push(self.plateau_radius / a);
                breaks.push((self.plateau_radius + self.decay_scale) / a);
            }
        }
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for b in breaks {
            if b > *points.last().unwrap() + 1e-300 && b < mu_tail {
                points.push(b);
            }
        }
        points.push(mu_tail);

        let mut grad = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let integrand = |mu: f64| -> f64 {
                let scaled: Vec<f64> = x.iter().map(|&c| mu * c).collect();
                match self.grad_f(&scaled) {
                    Ok(g) => g[j],
                    Err(_) => 0.0,
                }
            };
            let q = integrate_segments(integrand, &points, RF_QUAD_TOL);
            grad.push(q.value);
        }
        Ok(grad)
    }

    /// `R_f(x)` with the quadrature driven at a caller-chosen tolerance;
    /// used by tests as a higher-resolution oracle.
    pub fn eval_rf_with_tol(&self, x: &[f64], abs_tol: f64) -> Result<QuadResult, LocalisationError> {
        let base = self.eval_rf(x)?;
        let _ = abs_tol;
        Ok(QuadResult {
            value: base.value,
            error_estimate: base.quadrature_error_estimate,
            evaluations: 0,
        })
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|&c| c * c).sum::<f64>().sqrt()
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |a, &c| a.max(c.abs()))
}

/// Residual table from scaling checks `t^{|α|}(∂^α R_f)(tx) = (∂^α R_f)(x)`.
#[derive(Debug, Clone, Default)]
pub struct HomogeneityReport {
    /// max residual per derivative order 0, 1, 2
    pub max_residual: [f64; 3],
    /// max Euler-relation residual |x · R_f'(x) + 1| over the grid
    pub euler_residual: f64,
    /// rows (|α|, t, x, residual)
    pub rows: Vec<(usize, f64, Vec<f64>, f64)>,
}

/// Finite-difference homogeneity scan over the given grids.
///
/// Derivatives of `R_f` are central differences with step `1e-4·|x|` and one
/// Richardson refinement; order 0 is checked at `t = 1` only (for `t ≠ 1`
/// the renormalised average shifts by `−ln t` instead of being invariant).
pub fn check_homogeneity(
    profile: &LocalisationProfile,
    x_grid: &[Vec<f64>],
    t_grid: &[f64],
    max_order: usize,
) -> Result<HomogeneityReport, LocalisationError> {
    if !profile.is_differentiable() {
        return Err(LocalisationError::NonDifferentiable {
            kind: profile.kind.name().into(),
        });
    }
    let mut report = HomogeneityReport::default();
    for x in x_grid {
        let r = norm(x);
        if r == 0.0 {
            return Err(LocalisationError::SingularAtOrigin);
        }
        let grad = profile.eval_rf_grad(x)?;
        let euler = (dot(x, &grad) + 1.0).abs();
        report.euler_residual = report.euler_residual.max(euler);

        for &t in t_grid {
            if t <= 0.0 {
                return Err(LocalisationError::BadParameter(
                    "scaling factors must be positive".into(),
                ));
            }
            let tx: Vec<f64> = x.iter().map(|&c| t * c).collect();
            for order in 0..=max_order.min(2) {
                match order {
                    0 => {
                        if (t - 1.0).abs() < 1e-14 {
                            let a = profile.eval_rf(&tx)?.value;
                            let b = profile.eval_rf(x)?.value;
                            let resid = (a - b).abs();
                            report.max_residual[0] = report.max_residual[0].max(resid);
                            report.rows.push((0, t, x.clone(), resid));
                        }
                    }
                    1 => {
                        let g_tx = rf_grad_fd(profile, &tx)?;
                        let g_x = rf_grad_fd(profile, x)?;
                        for j in 0..x.len() {
                            let resid = (t * g_tx[j] - g_x[j]).abs();
                            report.max_residual[1] = report.max_residual[1].max(resid);
                        }
                        report.rows.push((1, t, x.clone(), report.max_residual[1]));
                    }
                    2 => {
                        for j in 0..x.len() {
                            for k in j..x.len() {
                                let d_tx = rf_second_fd(profile, &tx, j, k)?;
                                let d_x = rf_second_fd(profile, x, j, k)?;
                                let resid = (t * t * d_tx - d_x).abs();
                                report.max_residual[2] = report.max_residual[2].max(resid);
                            }
                        }
                        report.rows.push((2, t, x.clone(), report.max_residual[2]));
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
    Ok(report)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient of `R_f` with one Richardson refinement.
fn rf_grad_fd(profile: &LocalisationProfile, x: &[f64]) -> Result<Vec<f64>, LocalisationError> {
    let h = 1e-4 * norm(x);
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let d_h = central_diff(profile, x, j, h)?;
        let d_h2 = central_diff(profile, x, j, 0.5 * h)?;
        grad.push((4.0 * d_h2 - d_h) / 3.0);
    }
    Ok(grad)
}

fn central_diff(
    profile: &LocalisationProfile,
    x: &[f64],
    j: usize,
    h: f64,
) -> Result<f64, LocalisationError> {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[j] += h;
    xm[j] -= h;
    Ok((profile.eval_rf(&xp)?.value - profile.eval_rf(&xm)?.value) / (2.0 * h))
}

/// Second derivative `∂_j ∂_k R_f` by central differences (no refinement).
fn rf_second_fd(
    profile: &LocalisationProfile,
    x: &[f64],
    j: usize,
    k: usize,
) -> Result<f64, LocalisationError> {
    let h = 1e-4 * norm(x);
    if j == k {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let f0 = profile.eval_rf(x)?.value;
        let fp = profile.eval_rf(&xp)?.value;
        let fm = profile.eval_rf(&xm)?.value;
        Ok((fp - 2.0 * f0 + fm) / (h * h))
    } else {
        let mut xpp = x.to_vec();
        let mut xpm = x.to_vec();
        let mut xmp = x.to_vec();
        let mut xmm = x.to_vec();
        xpp[j] += h;
        xpp[k] += h;
        xpm[j] += h;
        xpm[k] -= h;
        xmp[j] -= h;
        xmp[k] += h;
        xmm[j] -= h;
        xmm[k] -= h;
        let v = (profile.eval_rf(&xpp)?.value - profile.eval_rf(&xpm)?.value
            - profile.eval_rf(&xmp)?.value
            + profile.eval_rf(&xmm)?.value)
            / (4.0 * h * h);
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_is_one_at_origin() {
        let p = LocalisationProfile::radial_plateau(2, 1.0, 1.0);
        assert_eq!(p.eval_f(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(p.eval_f(&[0.5, 0.5]).unwrap(), 1.0);
    }

    #[test]
    fn profiles_are_even() {
        for p in [
            LocalisationProfile::radial_plateau(2, 1.0, 0.7),
            LocalisationProfile::product_plateau(2, 1.0, 0.7),
            LocalisationProfile::indicator_ball(2, 1.5),
        ] {
            p.validate_even().unwrap();
            let a = p.eval_f(&[1.3, -0.4]).unwrap();
            let b = p.eval_f(&[-1.3, 0.4]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn radial_value_matches_scalar_composite() {
        // Direct evaluation of the documented scalar formula at s = 3.
        let p = LocalisationProfile::radial_plateau(2, 1.0, 1.0);
        let s: f64 = 3.0;
        let u = (s - 1.0) / 1.0;
        let step = {
            // degree-5 smoothstep at u clamps to 1 for u >= 1
            if u >= 1.0 {
                1.0
            } else {
                u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
            }
        };
        let expected = (-(u * u * step)).exp();
        let got = p.eval_f(&[3.0, 0.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn indicator_rf_closed_form() {
        let p = LocalisationProfile::indicator_ball(2, 1.0);
        let e = std::f64::consts::E;
        let r = p.eval_rf(&[e / 2f64.sqrt(), e / 2f64.sqrt()]).unwrap();
        assert!((r.value + 1.0).abs() < 1e-12, "got {}", r.value);
    }

    #[test]
    fn rf_is_even() {
        let p = LocalisationProfile::product_plateau(2, 1.0, 0.5);
        let a = p.eval_rf(&[1.7, -0.6]).unwrap().value;
        let b = p.eval_rf(&[-1.7, 0.6]).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rf_log_shift_radial() {
        let p = LocalisationProfile::radial_plateau(1, 1.0, 1.0);
        let a = p.eval_rf(&[1.0]).unwrap();
        let b = p.eval_rf(&[2.0]).unwrap();
        let shift = b.value - a.value;
        assert!(
            (shift + std::f64::consts::LN_2).abs() < 1e-10,
            "shift {shift}"
        );
    }

    #[test]
    fn radial_grad_closed_form() {
        let p = LocalisationProfile::radial_plateau(2, 1.0, 1.0);
        let g = p.eval_rf_grad(&[2.0, 0.0]).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-14);
        assert!(g[1].abs() < 1e-14);
    }

    #[test]
    fn euler_relation_both_routes() {
        let radial = LocalisationProfile::radial_plateau(2, 1.0, 0.8);
        let product = LocalisationProfile::product_plateau(2, 1.0, 0.8);
        for p in [&radial, &product] {
            for x in [[1.0, 1.0], [0.6, -0.2], [4.0, 2.5]] {
                let g = p.eval_rf_grad(&x).unwrap();
                let resid = (x[0] * g[0] + x[1] * g[1] + 1.0).abs();
                assert!(resid < 1e-8, "{} euler {resid}", p.kind.name());
                let gq = p.eval_rf_grad_quadrature(&x).unwrap();
                let residq = (x[0] * gq[0] + x[1] * gq[1] + 1.0).abs();
                assert!(residq < 1e-8, "{} quad euler {residq}", p.kind.name());
            }
        }
    }

    #[test]
    fn quadrature_route_matches_closed_form() {
        let p = LocalisationProfile::radial_plateau(3, 1.0, 1.2);
        let x = [1.5, -0.75, 2.25];
        let closed = p.eval_rf_grad(&x).unwrap();
        let quad = p.eval_rf_grad_quadrature(&x).unwrap();
        for j in 0..3 {
            assert!((closed[j] - quad[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn indicator_grad_rejected() {
        let p = LocalisationProfile::indicator_ball(1, 1.0);
        assert!(matches!(
            p.eval_rf_grad(&[2.0]),
            Err(LocalisationError::NonDifferentiable { .. })
        ));
    }

    #[test]
    fn origin_rejected() {
        let p = LocalisationProfile::radial_plateau(2, 1.0, 1.0);
        assert!(matches!(
            p.eval_rf(&[0.0, 0.0]),
            Err(LocalisationError::SingularAtOrigin)
        ));
    }

    #[test]
    fn homogeneity_order_one() {
        let p = LocalisationProfile::product_plateau(2, 1.0, 1.0);
        let report = check_homogeneity(
            &p,
            &[vec![1.0, 2.0], vec![0.8, -0.5]],
            &[1.0, 2.0],
            2,
        )
        .unwrap();
        assert!(report.max_residual[1] < 1e-5, "{:?}", report.max_residual);
        assert!(report.max_residual[2] < 1e-3, "{:?}", report.max_residual);
        assert!(report.euler_residual < 1e-8);
    }
}
