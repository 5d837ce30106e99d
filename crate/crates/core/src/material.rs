//! Pointwise constitutive laws: the compressible Neo-Hookean energy, its
//! stresses, the Cauchy-Green dissipation distance and the linearized power
//! density.
//!
//! Viscosity scaling: the distance is `D_c(F, G) = sqrt(c) |F^T F - G^T G|`
//! and the potential `R_c(F, Fdot) = 2 c |sym(F^T Fdot)|^2`, so that
//! `R_c = lim D_c(F + eps Fdot, F)^2 / (2 eps^2)` holds exactly and the
//! assembled dissipation form carries a single factor `c`.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum MaterialError {
    #[error("deformation gradient has non-positive determinant {0:e}")]
    NonPositiveDeterminant(f64),
    #[error("invalid material parameters: {0}")]
    InvalidParams(String),
    #[error("matrix is not a proper rotation")]
    NotRotation,
    #[error("matrix is not skew-symmetric")]
    NotSkew,
}

/// Lamé moduli and viscosity scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialParams {
    pub mu: f64,
    pub lambda: f64,
    pub c: f64,
}

impl MaterialParams {
    pub fn new(mu: f64, lambda: f64, c: f64) -> Result<Self, MaterialError> {
        let p = Self { mu, lambda, c };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(MaterialError::InvalidParams(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(MaterialError::InvalidParams(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(MaterialError::InvalidParams(format!("c must be positive, got {}", self.c)));
        }
        Ok(())
    }
}

pub fn sym(a: &Mat3) -> Mat3 {
    0.5 * (a + a.transpose())
}

pub fn skew(a: &Mat3) -> Mat3 {
    0.5 * (a - a.transpose())
}

/// Frobenius inner product.
pub fn ddot(a: &Mat3, b: &Mat3) -> f64 {
    a.component_mul(b).sum()
}

fn inverse_transpose(f: &Mat3) -> Result<(f64, Mat3), MaterialError> {
    let det = f.determinant();
    if !(det > 0.0) {
        return Err(MaterialError::NonPositiveDeterminant(det));
    }
    let inv = f.try_inverse().ok_or(MaterialError::NonPositiveDeterminant(det))?;
    Ok((det, inv.transpose()))
}

/// Stored energy `mu/2 (|F|^2 - 3 - 2 log det F) + lambda/2 (det F - 1)^2`.
/// Returns `f64::INFINITY` when `det F <= 0`.
pub fn energy(f: &Mat3, p: &MaterialParams) -> f64 {
    let det = f.determinant();
    if !(det > 0.0) {
        return f64::INFINITY;
    }
    0.5 * p.mu * (f.norm_squared() - 3.0 - 2.0 * det.ln()) + 0.5 * p.lambda * (det - 1.0).powi(2)
}

pub fn is_admissible(f: &Mat3) -> bool {
    f.determinant() > 0.0
}

/// First Piola-Kirchhoff stress `mu (F - F^-T) + lambda (J - 1) J F^-T`.
pub fn stress_pk1(f: &Mat3, p: &MaterialParams) -> Result<Mat3, MaterialError> {
    let (j, fit) = inverse_transpose(f)?;
    Ok(p.mu * (f - fit) + (p.lambda * (j - 1.0) * j) * fit)
}

/// Second Piola-Kirchhoff stress `F^-1 dW/dF`.
pub fn stress_pk2(f: &Mat3, p: &MaterialParams) -> Result<Mat3, MaterialError> {
    let (_, fit) = inverse_transpose(f)?;
    Ok(fit.transpose() * stress_pk1(f, p)?)
}

/// Directional derivative of the first Piola-Kirchhoff stress, `d^2 W(F)[H]`.
pub fn stress_pk1_derivative(f: &Mat3, h: &Mat3, p: &MaterialParams) -> Result<Mat3, MaterialError> {
    let (j, fit) = inverse_transpose(f)?;
    let twisted = fit * h.transpose() * fit;
    let dj = j * ddot(&fit, h);
    Ok(p.mu * (h + twisted) + (p.lambda * (2.0 * j - 1.0) * dj) * fit - (p.lambda * (j - 1.0) * j) * twisted)
}

/// `sqrt(c) |F^T F - G^T G|`.
pub fn dissipation_distance(f: &Mat3, g: &Mat3, p: &MaterialParams) -> f64 {
    p.c.sqrt() * (f.transpose() * f - g.transpose() * g).norm()
}

/// `c |F^T F - G^T G|^2`, the squared distance without the square root.
pub fn dissipation_distance_sq(f: &Mat3, g: &Mat3, p: &MaterialParams) -> f64 {
    p.c * (f.transpose() * f - g.transpose() * g).norm_squared()
}

/// Dissipation potential `2 c |sym(F^T Fdot)|^2`.
pub fn dissipation_potential(f: &Mat3, fdot: &Mat3, p: &MaterialParams) -> f64 {
    2.0 * p.c * sym(&(f.transpose() * fdot)).norm_squared()
}

/// Viscous stress `d R / d Fdot = 4 c F sym(F^T Fdot)`.
pub fn viscous_stress(f: &Mat3, fdot: &Mat3, p: &MaterialParams) -> Mat3 {
    4.0 * p.c * f * sym(&(f.transpose() * fdot))
}

/// Linearized power density `f_Y(Z) = dW(Y) : Z + 2 c |sym(Y^T Z)|^2`.
pub fn power_density(y: &Mat3, z: &Mat3, p: &MaterialParams) -> Result<f64, MaterialError> {
    Ok(ddot(&stress_pk1(y, p)?, z) + dissipation_potential(y, z, p))
}

/// Canonical minimizer `-(1/(4c)) (Y Y^T)^-1 dW(Y)` of the power density.
/// Every `Z + Y^-T A` with `A` skew is also a minimizer.
pub fn power_density_minimizer(y: &Mat3, p: &MaterialParams) -> Result<Mat3, MaterialError> {
    let (_, yit) = inverse_transpose(y)?;
    Ok((-0.25 / p.c) * yit * yit.transpose() * stress_pk1(y, p)?)
}

/// Minimum value `-(1/(8c)) |Y^-1 dW(Y)|^2` of the power density.
pub fn power_density_minimum(y: &Mat3, p: &MaterialParams) -> Result<f64, MaterialError> {
    Ok(-stress_pk2(y, p)?.norm_squared() / (8.0 * p.c))
}

/// Checks `R(F, Fdot) = R(QF, Q(Fdot + A F))` to 1e-12 relative.
pub fn check_r_frame_indifference(
    f: &Mat3,
    fdot: &Mat3,
    q: &Mat3,
    a: &Mat3,
    p: &MaterialParams,
) -> Result<bool, MaterialError> {
    if !is_rotation(q) {
        return Err(MaterialError::NotRotation);
    }
    if (a + a.transpose()).norm() > 1e-12 * (1.0 + a.norm()) {
        return Err(MaterialError::NotSkew);
    }
    inverse_transpose(f)?;
    let lhs = dissipation_potential(f, fdot, p);
    let rhs = dissipation_potential(&(q * f), &(q * (fdot + a * f)), p);
    Ok((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE))
}

pub fn is_rotation(q: &Mat3) -> bool {
    (q.transpose() * q - Mat3::identity()).norm() < 1e-10 && (q.determinant() - 1.0).abs() < 1e-10
}

/// Rotation by `angle` about the (normalized) `axis`.
pub fn rotation(axis: &nalgebra::Vector3<f64>, angle: f64) -> Mat3 {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}
