//! Closed-form inverse and log-determinant of the nested-exchangeable
//! covariance restricted to the observed rows of a cluster,
//!
//! Σ = τ² 11ᵀ + κ² blockdiag(11ᵀ) + σ² I,
//!
//! with period blocks of sizes N_1..N_J. The inverse is
//! blockdiag{(1/σ²) I − b_j 11ᵀ} − c q qᵀ where q stacks q_j 1_{N_j}.
//! Nothing here materializes an M×M matrix except the oracle helpers.

use crate::error::{Error, Result};
use crate::Scalar;
use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents<T> {
    pub sigma2: T,
    pub tau2: T,
    pub kappa2: T,
}

impl<T: Scalar> VarianceComponents<T> {
    pub fn new(sigma2: T, tau2: T, kappa2: T) -> Result<Self> {
        if sigma2 <= T::zero() {
            return Err(Error::InvalidArgument("σ² must be positive".into()));
        }
        if tau2 < T::zero() || kappa2 < T::zero() {
            return Err(Error::InvalidArgument(
                "τ² and κ² must be nonnegative".into(),
            ));
        }
        Ok(Self {
            sigma2,
            tau2,
            kappa2,
        })
    }

    pub fn independence(sigma2: T) -> Result<Self> {
        Self::new(sigma2, T::zero(), T::zero())
    }

    pub fn total(&self) -> T {
        self.sigma2.clone() + self.tau2.clone() + self.kappa2.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuredInverse<T> {
    sizes: Vec<usize>,
    inv_sigma2: T,
    within: Vec<T>,
    loading: Vec<T>,
    global: T,
}

fn from_usize<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("size representable")
}

impl<T: Scalar> StructuredInverse<T> {
    pub fn new(sizes: &[usize], vc: &VarianceComponents<T>) -> Result<Self> {
        Self::from_parts(sizes, vc.sigma2.clone(), vc.tau2.clone(), vc.kappa2.clone())
    }

    /// Like [`StructuredInverse::new`] but allows negative τ² or κ² as long
    /// as the observed covariance stays positive definite. Used for working
    /// correlation matrices with negative moment estimates.
    pub fn from_parts(sizes: &[usize], sigma2: T, tau2: T, kappa2: T) -> Result<Self> {
        if sizes.iter().all(|&n| n == 0) {
            return Err(Error::InvalidArgument(
                "all cluster-period sizes are zero".into(),
            ));
        }
        if sigma2 <= T::zero() {
            return Err(Error::InvalidArgument("σ² must be positive".into()));
        }
        let mut within = Vec::with_capacity(sizes.len());
        let mut loading = Vec::with_capacity(sizes.len());
        let mut s = T::zero();
        for &n in sizes {
            let nt: T = from_usize(n);
            let block = sigma2.clone() + nt.clone() * kappa2.clone();
            if n > 0 && block <= T::zero() {
                return Err(Error::NotPositiveDefinite("within-period block".into()));
            }
            if n == 0 {
                within.push(T::zero());
                loading.push(T::zero());
                continue;
            }
            within.push(kappa2.clone() / (sigma2.clone() * block.clone()));
            let q = T::one() / block;
            s = s + nt * q.clone();
            loading.push(q);
        }
        let denom = T::one() + tau2.clone() * s;
        if denom <= T::zero() {
            return Err(Error::NotPositiveDefinite("cluster-level term".into()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            inv_sigma2: T::one() / sigma2,
            within,
            loading,
            global: tau2 / denom,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }
    /// Diagonal scalar 1/σ².
    pub fn a(&self) -> &T {
        &self.inv_sigma2
    }
    /// Within-period correction b_j.
    pub fn b(&self, j: usize) -> &T {
        &self.within[j]
    }
    /// Period loading q_j.
    pub fn q(&self, j: usize) -> &T {
        &self.loading[j]
    }
    /// Global rank-one weight c.
    pub fn c(&self) -> &T {
        &self.global
    }

    fn check_len(&self, n: usize) -> Result<()> {
        let m = self.dim();
        if n != m {
            return Err(Error::Dimension {
                expected: m,
                got: n,
            });
        }
        Ok(())
    }

    fn block_sums(&self, v: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for &n in &self.sizes {
            out.push(
                v[start..start + n]
                    .iter()
                    .cloned()
                    .fold(T::zero(), |a, b| a + b),
            );
            start += n;
        }
        out
    }

    fn loaded_total(&self, sums: &[T]) -> T {
        sums.iter()
            .zip(&self.loading)
            .fold(T::zero(), |acc, (s, q)| acc + s.clone() * q.clone())
    }

    /// V v for a vector ordered by period blocks.
    pub fn apply(&self, v: &[T]) -> Result<Vec<T>> {
        self.check_len(v.len())?;
        let sums = self.block_sums(v);
        let qbar = self.loaded_total(&sums);
        let mut out = Vec::with_capacity(v.len());
        let mut start = 0;
        for (j, &n) in self.sizes.iter().enumerate() {
            let shift = self.within[j].clone() * sums[j].clone()
                + self.global.clone() * self.loading[j].clone() * qbar.clone();
            for x in &v[start..start + n] {
                out.push(self.inv_sigma2.clone() * x.clone() - shift.clone());
            }
            start += n;
        }
        Ok(out)
    }

    /// uᵀ V v.
    pub fn quadratic_form(&self, u: &[T], v: &[T]) -> Result<T> {
        self.check_len(u.len())?;
        self.check_len(v.len())?;
        let su = self.block_sums(u);
        let sv = self.block_sums(v);
        let dot = u
            .iter()
            .zip(v)
            .fold(T::zero(), |a, (x, y)| a + x.clone() * y.clone());
        let within = su
            .iter()
            .zip(&sv)
            .zip(&self.within)
            .fold(T::zero(), |a, ((x, y), b)| {
                a + b.clone() * x.clone() * y.clone()
            });
        let global = self.global.clone() * self.loaded_total(&su) * self.loaded_total(&sv);
        Ok(self.inv_sigma2.clone() * dot - within - global)
    }

    /// 1_jᵀ V 1_l for period blocks j and l.
    pub fn block_form(&self, j: usize, l: usize) -> T {
        let nj: T = from_usize(self.sizes[j]);
        let nl: T = from_usize(self.sizes[l]);
        let cross = self.global.clone()
            * self.loading[j].clone()
            * self.loading[l].clone()
            * nj.clone()
            * nl;
        if j == l {
            nj.clone() * self.inv_sigma2.clone() - self.within[j].clone() * nj.clone() * nj - cross
        } else {
            T::zero() - cross
        }
    }

    /// Dense materialization, for tests and small oracles.
    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let m = self.dim();
        let period = period_of_rows(&self.sizes);
        (0..m)
            .map(|r| {
                (0..m)
                    .map(|c| {
                        let (j, l) = (period[r], period[c]);
                        let mut v = T::zero()
                            - self.global.clone()
                                * self.loading[j].clone()
                                * self.loading[l].clone();
                        if j == l {
                            v = v - self.within[j].clone();
                        }
                        if r == c {
                            v = v + self.inv_sigma2.clone();
                        }
                        v
                    })
                    .collect()
            })
            .collect()
    }
}

fn period_of_rows(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
        .collect()
}

pub fn invert_observed_cov<T: Scalar>(
    sizes: &[usize],
    vc: &VarianceComponents<T>,
) -> Result<StructuredInverse<T>> {
    StructuredInverse::new(sizes, vc)
}

/// log det of the observed covariance via the matrix-determinant lemma.
pub fn logdet_observed_cov<T: Scalar + Float>(
    sizes: &[usize],
    vc: &VarianceComponents<T>,
) -> Result<T> {
    logdet_from_parts(sizes, vc.sigma2, vc.tau2, vc.kappa2)
}

pub(crate) fn logdet_from_parts<T: Scalar + Float>(
    sizes: &[usize],
    sigma2: T,
    tau2: T,
    kappa2: T,
) -> Result<T> {
    if sizes.iter().all(|&n| n == 0) {
        return Err(Error::InvalidArgument(
            "all cluster-period sizes are zero".into(),
        ));
    }
    if sigma2 <= T::zero() {
        return Err(Error::InvalidArgument("σ² must be positive".into()));
    }
    let ln_s = sigma2.ln();
    let mut total = T::zero();
    let mut s = T::zero();
    for &n in sizes {
        if n == 0 {
            continue;
        }
        let nt: T = from_usize(n);
        let block = sigma2 + nt * kappa2;
        if block <= T::zero() {
            return Err(Error::NotPositiveDefinite("within-period block".into()));
        }
        total = total + (nt - T::one()) * ln_s + block.ln();
        s = s + nt / block;
    }
    let g = T::one() + tau2 * s;
    if g <= T::zero() {
        return Err(Error::NotPositiveDefinite("cluster-level term".into()));
    }
    Ok(total + g.ln())
}

/// Dense observed covariance, for oracles.
pub fn dense_observed_cov<T: Scalar>(sizes: &[usize], vc: &VarianceComponents<T>) -> Vec<Vec<T>> {
    let period = period_of_rows(sizes);
    let m = period.len();
    (0..m)
        .map(|r| {
            (0..m)
                .map(|c| {
                    let mut v = vc.tau2.clone();
                    if period[r] == period[c] {
                        v = v + vc.kappa2.clone();
                    }
                    if r == c {
                        v = v + vc.sigma2.clone();
                    }
                    v
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Exact;
    use num_traits::{One, Zero};

    fn vc(s: f64, t: f64, k: f64) -> VarianceComponents<f64> {
        VarianceComponents::new(s, t, k).unwrap()
    }

    #[test]
    fn independence_identity() {
        let inv = invert_observed_cov(&[2], &vc(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(inv.to_dense(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ones = [1.0; 2];
        assert_eq!(inv.quadratic_form(&ones, &ones).unwrap(), 2.0);
    }

    #[test]
    fn exchangeable_two_by_two_exact() {
        let one = Exact::one();
        let v = VarianceComponents::new(one.clone(), one.clone(), Exact::zero()).unwrap();
        let inv = StructuredInverse::new(&[2], &v).unwrap();
        let third = Exact::new(1.into(), 3.into());
        let two_thirds = Exact::new(2.into(), 3.into());
        let expected = vec![
            vec![two_thirds.clone(), -third.clone()],
            vec![-third.clone(), two_thirds.clone()],
        ];
        assert_eq!(inv.to_dense(), expected);
        let ones = [one.clone(), one];
        assert_eq!(inv.quadratic_form(&ones, &ones).unwrap(), two_thirds);
    }

    #[test]
    fn logdet_examples() {
        assert_eq!(logdet_observed_cov(&[1], &vc(1.0, 0.0, 0.0)).unwrap(), 0.0);
        let ld = logdet_observed_cov(&[2], &vc(1.0, 1.0, 0.0)).unwrap();
        assert!((ld - 3f64.ln()).abs() < 1e-15);
        let ld32 = logdet_observed_cov(
            &[2],
            &VarianceComponents::<f32>::new(1.0, 1.0, 0.0).unwrap(),
        )
        .unwrap();
        assert!((ld32 - 3f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        assert!(invert_observed_cov(&[0, 0], &vc(1.0, 0.1, 0.1)).is_err());
        assert!(VarianceComponents::new(0.0, 0.1, 0.1).is_err());
        assert!(invert_observed_cov(&[2], &vc(1.0, 0.0, 0.0))
            .unwrap()
            .apply(&[1.0])
            .is_err());
    }

    #[test]
    fn block_form_matches_quadratic_form() {
        let inv = invert_observed_cov(&[3, 0, 2], &vc(0.9, 0.1, 0.05)).unwrap();
        let ind = |j: usize| -> Vec<f64> {
            let mut v = vec![0.0; 5];
            let (s, n) = [(0, 3), (3, 0), (3, 2)][j];
            v[s..s + n].iter_mut().for_each(|x| *x = 1.0);
            v
        };
        for j in 0..3 {
            for l in 0..3 {
                let qf = inv.quadratic_form(&ind(j), &ind(l)).unwrap();
                assert!((qf - inv.block_form(j, l)).abs() < 1e-14);
            }
        }
    }
}
