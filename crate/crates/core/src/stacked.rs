use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Central finite-difference Jacobian of `f` at `theta`, step
/// 1e-6·max(|θ_m|, 0.1) per coordinate.
pub(crate) fn numeric_jacobian<F>(theta: &[f64], f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let p = theta.len();
    let mut jac: Option<DMatrix<f64>> = None;
    let mut t = theta.to_vec();
    for m in 0..p {
        let h = 1e-6 * theta[m].abs().max(0.1);
        t[m] = theta[m] + h;
        let up = f(&t)?;
        t[m] = theta[m] - h;
        let dn = f(&t)?;
        t[m] = theta[m];
        let j = jac.get_or_insert_with(|| DMatrix::zeros(up.len(), p));
        if up.len() != j.nrows() {
            return Err(Error::Dimension {
                expected: j.nrows(),
                got: up.len(),
            });
        }
        j.set_column(m, &((up - dn) / (2.0 * h)));
    }
    Ok(jac.unwrap_or_else(|| DMatrix::zeros(0, 0)))
}
