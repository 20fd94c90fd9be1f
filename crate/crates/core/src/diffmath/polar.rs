use nalgebra::Matrix3;

use crate::{Error, Result};

/// Orthogonal polar factor of a 3x3 matrix restricted to SO(3), with the
/// SVD kept for the adjoint.
///
/// With `M = U S V^T`, the rotation is `U D V^T` where `D` flips the axis of
/// the smallest singular value whenever `det(U V^T) < 0`. The flip is folded
/// into `u` and `sigma` so that `M = u diag(sigma) v^T` still holds.
#[derive(Clone, Debug)]
pub struct PolarFactor {
    pub u: Matrix3<f64>,
    pub sigma: [f64; 3],
    pub v: Matrix3<f64>,
}

/// Singular values at or below this are treated as rank loss.
const RANK_EPS: f64 = 1e-9;

pub fn polar_factor(m: &Matrix3<f64>) -> Result<PolarFactor> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::RankDeficient(f64::NAN));
    }
    let svd = m.svd(true, true);
    let mut u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let mut sigma = [
        svd.singular_values[0],
        svd.singular_values[1],
        svd.singular_values[2],
    ];
    let (min_idx, min_val) = sigma
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("three values");
    if min_val <= RANK_EPS {
        return Err(Error::RankDeficient(min_val));
    }
    if (u * v.transpose()).determinant() < 0.0 {
        for r in 0..3 {
            u[(r, min_idx)] = -u[(r, min_idx)];
        }
        sigma[min_idx] = -sigma[min_idx];
    }
    Ok(PolarFactor { u, sigma, v })
}

impl PolarFactor {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.u * self.v.transpose()
    }

    /// Pulls `dL/dR` back to `dL/dM`.
    ///
    /// `dR = U W V^T` with `W_ij = (P_ij - P_ji) / (s_i + s_j)` and
    /// `P = U^T dM V`, so `dL/dM = U K V^T` with
    /// `K_ij = (X_ij - X_ji) / (s_i + s_j)`, `X = U^T G V`.
    pub fn backward(&self, grad_rotation: &Matrix3<f64>) -> Matrix3<f64> {
        let x = self.u.transpose() * grad_rotation * self.v;
        let mut k = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let denom = self.sigma[i] + self.sigma[j];
                    if denom.abs() > 1e-300 {
                        k[(i, j)] = (x[(i, j)] - x[(j, i)]) / denom;
                    }
                }
            }
        }
        self.u * k * self.v.transpose()
    }
}
