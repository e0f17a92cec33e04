use crate::error::{Error, Result};
use crate::linalg::{is_positive_definite, DenseMatrix};

use super::{ProximityKind, ProximitySpec, MONTHS};

/// Number of months between `i` and `j` (0-based). With `circular`, December
/// and January are one month apart.
pub fn month_distance(i: usize, j: usize, circular: bool) -> usize {
    let d = i.abs_diff(j);
    if circular {
        d.min(MONTHS - d)
    } else {
        d
    }
}

/// 0/1 neighbourhood matrix linking months at most `order` apart.
pub fn build_w_neighborhood(order: usize, circular: bool) -> Result<DenseMatrix> {
    if !(1..=5).contains(&order) {
        return Err(Error::Config(format!("neighbor order must be in [1, 5], got {order}")));
    }
    Ok(DenseMatrix::from_fn(MONTHS, MONTHS, |i, j| {
        let d = month_distance(i, j, circular);
        if d >= 1 && d <= order {
            1.0
        } else {
            0.0
        }
    }))
}

/// Autoregressive weights `ρ^d_ij` off the diagonal, zero on it.
pub fn build_w_autoregressive(rho: f64, circular: bool) -> Result<DenseMatrix> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("rho must lie in (0, 1), got {rho}")));
    }
    Ok(DenseMatrix::from_fn(MONTHS, MONTHS, |i, j| {
        if i == j {
            0.0
        } else {
            rho.powi(month_distance(i, j, circular) as i32)
        }
    }))
}

/// The `W` selected by `spec`; `rho` is only read for the autoregressive kind.
pub fn proximity_matrix(spec: &ProximitySpec, rho: f64) -> Result<DenseMatrix> {
    match spec.kind {
        ProximityKind::Neighborhood => build_w_neighborhood(spec.neighbor_order, spec.circular),
        ProximityKind::Autoregressive => build_w_autoregressive(rho, spec.circular),
    }
}

/// `Ω = D − λW` with `D = diag(row sums of W)`.
pub fn build_omega(w: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    w.check_symmetric()?;
    if !(lambda >= 0.0 && lambda < 1.0) {
        return Err(Error::Config(format!("lambda must lie in [0, 1), got {lambda}")));
    }
    let d = w.row_sums();
    let omega = DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| {
        if i == j {
            d[i] - lambda * w[(i, i)]
        } else {
            -lambda * w[(i, j)]
        }
    });
    if !is_positive_definite(&omega)? {
        return Err(Error::NotPositiveDefinite { index: 0, pivot: f64::NAN });
    }
    Ok(omega)
}
