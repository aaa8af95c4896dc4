//! Fung-type transversely isotropic strain energy in the fiber frame.
//!
//! `Q = Σ_ij B_ij E_ij²` over all nine components of the fiber-frame
//! Green–Lagrange strain, so each off-diagonal pair is counted twice.
//! `W = ½ C (e^Q − 1)`, `S_ij = C e^Q B_ij E_ij`.

use nalgebra::{Matrix3, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponents above this are treated as a non-physical state.
pub const Q_MAX: f64 = 700.0;

/// Fourth-order tangent stored as a 9×9 matrix, row `3i+j`, column `3k+l`.
pub type Tangent = SMatrix<f64, 9, 9>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Pa.
    pub c: f64,
    pub b_ff: f64,
    pub b_xx: f64,
    pub b_fx: f64,
    /// Pa; zero disables the volumetric penalty.
    pub kappa_vol: f64,
}

impl MaterialParams {
    pub const B_FF: f64 = 29.9;
    pub const B_XX: f64 = 13.3;
    pub const B_FX: f64 = 26.6;

    /// Fixed anisotropy coefficients with the default penalty `κ = 10·C`.
    pub fn with_stiffness(c: f64) -> Self {
        MaterialParams {
            c,
            b_ff: Self::B_FF,
            b_xx: Self::B_XX,
            b_fx: Self::B_FX,
            kappa_vol: 10.0 * c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.c > 0.0
            && self.b_ff > 0.0
            && self.b_xx > 0.0
            && self.b_fx > 0.0
            && self.kappa_vol >= 0.0
            && self.kappa_vol.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid material parameters {self:?}")))
        }
    }

    /// Coefficient matrix with index 0 = fiber, 1 = sheet, 2 = sheet-normal.
    pub fn b_matrix(&self) -> Matrix3<f64> {
        let (f, x, fx) = (self.b_ff, self.b_xx, self.b_fx);
        Matrix3::new(f, fx, fx, fx, x, x, fx, x, x)
    }
}

/// `½(FᵀF − I)`; fails if `det F ≤ 0`.
pub fn green_strain(f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let det = f.determinant();
    if !(det > 0.0) {
        return Err(Error::InvertedElement {
            element: usize::MAX,
            det_f: det,
        });
    }
    Ok(0.5 * (f.transpose() * f - Matrix3::identity()))
}

fn exponent(e: &Matrix3<f64>, b: &Matrix3<f64>) -> Result<f64> {
    let q = b.component_mul(&e.component_mul(e)).sum();
    if q > Q_MAX || !q.is_finite() {
        return Err(Error::Overflow(q));
    }
    Ok(q)
}

pub fn fung_energy(e: &Matrix3<f64>, mat: &MaterialParams) -> Result<f64> {
    let q = exponent(e, &mat.b_matrix())?;
    Ok(0.5 * mat.c * q.exp_m1())
}

pub fn pk2_stress(e: &Matrix3<f64>, mat: &MaterialParams) -> Result<Matrix3<f64>> {
    Ok(fung_response(e, mat, false)?.1)
}

pub fn material_tangent(e: &Matrix3<f64>, mat: &MaterialParams) -> Result<Tangent> {
    Ok(fung_response(e, mat, true)?.2.unwrap())
}

/// Energy, stress and optionally the tangent in one pass.
pub fn fung_response(
    e: &Matrix3<f64>,
    mat: &MaterialParams,
    with_tangent: bool,
) -> Result<(f64, Matrix3<f64>, Option<Tangent>)> {
    let b = mat.b_matrix();
    let q = exponent(e, &b)?;
    let eq = q.exp();
    let w = 0.5 * mat.c * q.exp_m1();
    let be = b.component_mul(e);
    let s = mat.c * eq * be;
    let tangent = with_tangent.then(|| {
        let ce = mat.c * eq;
        let mut t = Tangent::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let r = 3 * i + j;
                for k in 0..3 {
                    for l in 0..3 {
                        t[(r, 3 * k + l)] = 2.0 * ce * be[(i, j)] * be[(k, l)];
                    }
                }
                // Minor-symmetric identity part.
                t[(r, r)] += 0.5 * ce * b[(i, j)];
                t[(r, 3 * j + i)] += 0.5 * ce * b[(i, j)];
            }
        }
        t
    });
    Ok((w, s, tangent))
}

/// `½ κ (J − 1)²`.
pub fn volumetric_energy(f: &Matrix3<f64>, kappa_vol: f64) -> Result<f64> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(Error::InvertedElement {
            element: usize::MAX,
            det_f: j,
        });
    }
    Ok(0.5 * kappa_vol * (j - 1.0) * (j - 1.0))
}

/// Cofactor of `F` (`∂J/∂F`).
pub fn cofactor(f: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| f[(r0, c0)] * f[(r1, c1)] - f[(r0, c1)] * f[(r1, c0)];
    Matrix3::new(
        c(1, 1, 2, 2),
        -c(1, 0, 2, 2),
        c(1, 0, 2, 1),
        -c(0, 1, 2, 2),
        c(0, 0, 2, 2),
        -c(0, 0, 2, 1),
        c(0, 1, 1, 2),
        -c(0, 0, 1, 2),
        c(0, 0, 1, 1),
    )
}
