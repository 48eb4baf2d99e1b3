use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// First column of the symmetric PSD matrix `a` that is linearly dependent on
/// the columns before it, at relative threshold `tol`. Dependent columns are
/// pivoted out of the elimination as they are found.
pub fn first_dependent_column(a: &DMatrix<f64>, tol: f64) -> Option<usize> {
    let n = a.nrows();
    let scale: Vec<f64> = (0..n).map(|k| a[(k, k)]).collect();
    let max_diag = scale.iter().cloned().fold(0.0, f64::max);
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut kept: Vec<usize> = Vec::new();
    for k in 0..n {
        if scale[k] <= tol * max_diag.max(f64::MIN_POSITIVE) {
            return Some(k);
        }
        let mut row = vec![0.0; kept.len()];
        for (p, &c) in kept.iter().enumerate() {
            let mut s = a[(k, c)];
            for (r, v) in row.iter().enumerate().take(p) {
                s -= v * l[(p, r)];
            }
            row[p] = s / l[(p, p)];
        }
        let resid = scale[k] - row.iter().map(|v| v * v).sum::<f64>();
        if resid <= tol * scale[k] {
            return Some(k);
        }
        let p = kept.len();
        for (r, v) in row.into_iter().enumerate() {
            l[(p, r)] = v;
        }
        l[(p, p)] = resid.sqrt();
        kept.push(k);
    }
    None
}

/// Solve a symmetric positive definite system, falling back to LU.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::NotPositiveDefinite("normal equations".into()))
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.inverse());
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("information matrix".into()))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// A⁻¹ B A⁻ᵀ.
pub fn sandwich(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = a.clone().lu();
    let ainv = lu.try_inverse().ok_or(Error::SingularJacobian)?;
    if ainv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularJacobian);
    }
    let mut s = &ainv * b * ainv.transpose();
    symmetrize(&mut s);
    Ok(s)
}
