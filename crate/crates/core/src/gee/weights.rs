//! Period weights λ_ij and duration weight matrices Λ_i(d).
//!
//! Both are written for the working correlation scaled to unit residual
//! variance, R̃ = I + ρ1 11ᵀ + ρ2 blockdiag(11ᵀ). A correlation matrix with
//! parameters (r1, r2) is proportional to R̃ with ρk = rk / (1 − r1 − r2)
//! (see [`unit_residual`]); the estimators are invariant to that scale.
//!
//! With G_l = N_l / (1 + N_l ρ2) and c = ρ1 / (1 + ρ1 Σ G_l), the collapsed
//! form of D R̃⁻¹ Dᵀ between period indicator blocks is W = diag(G) − c G 11ᵀ G.

use crate::Scalar;

/// (ρ1, ρ2) of a correlation matrix rescaled to unit residual variance.
pub fn unit_residual(r1: f64, r2: f64) -> (f64, f64) {
    let s = 1.0 - r1 - r2;
    (r1 / s, r2 / s)
}

fn cast<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("size representable")
}

struct Collapsed<T> {
    g: Vec<T>,
    c: T,
}

fn collapse<T: Scalar>(sizes: &[usize], rho1: &T, rho2: &T) -> Collapsed<T> {
    let g: Vec<T> = sizes
        .iter()
        .map(|&n| {
            let nt: T = cast(n);
            nt.clone() / (T::one() + nt * rho2.clone())
        })
        .collect();
    let total = g.iter().cloned().fold(T::zero(), |a, b| a + b);
    let c = rho1.clone() / (T::one() + rho1.clone() * total);
    Collapsed { g, c }
}

fn min_cum<T: Scalar>(cum: &[T], j: usize, l: usize) -> T {
    cum[j.min(l)].clone()
}

/// λ_ij for every period j of one cluster. `cum` holds π^s_1..π^s_J.
pub fn lambda_weights<T: Scalar>(sizes: &[usize], cum: &[T], rho1: T, rho2: T) -> Vec<T> {
    let Collapsed { g, c } = collapse(sizes, &rho1, &rho2);
    (0..sizes.len())
        .map(|j| {
            let pj = cum[j].clone();
            let lead = pj.clone() * (T::one() - pj.clone());
            let cov = (0..sizes.len()).fold(T::zero(), |acc, l| {
                acc + g[l].clone() * (min_cum(cum, j, l) - pj.clone() * cum[l].clone())
            });
            let nj: T = cast(sizes[j]);
            (lead - c.clone() * cov) / (T::one() + nj * rho2.clone())
        })
        .collect()
}

/// λ_ij for a single period `j` (0-based).
pub fn lambda_weight<T: Scalar>(sizes: &[usize], cum: &[T], rho1: T, rho2: T, j: usize) -> T {
    lambda_weights(sizes, cum, rho1, rho2).swap_remove(j)
}

/// Λ_i(d) = (H_Z − E[H_Z])ᵀ W Λ_Z^d, a J×J matrix (row-major nested vec).
/// `probs` holds π_1..π_J; `d` is 1-based.
pub fn duration_weight_matrix<T: Scalar>(
    z: usize,
    sizes: &[usize],
    probs: &[T],
    rho1: T,
    rho2: T,
    d: usize,
) -> Vec<Vec<T>> {
    let jn = sizes.len();
    let Collapsed { g, c } = collapse(sizes, &rho1, &rho2);
    // A = H_Z − E[H_Z]; entry (j, e) is I{z = j−e+1} − π_{j−e+1} for j ≥ e.
    let a = |j: usize, e: usize| -> T {
        if j < e {
            return T::zero();
        }
        let hit = if z + e == j + 1 { T::one() } else { T::zero() };
        hit - probs[j - e].clone()
    };
    // Only column j of Λ_Z^d with j ≥ d and z = j − d + 1 is nonzero.
    let mut out = vec![vec![T::zero(); jn]; jn];
    let col = z + d - 1;
    if d == 0 || col == 0 || col > jn {
        return out;
    }
    let jc = col - 1;
    let gsum_a: Vec<T> = (0..jn)
        .map(|e| (0..jn).fold(T::zero(), |acc, l| acc + a(l, e) * g[l].clone()))
        .collect();
    for (e, row) in out.iter_mut().enumerate() {
        let w_term = a(jc, e) * g[jc].clone() - c.clone() * gsum_a[e].clone() * g[jc].clone();
        row[jc] = w_term;
    }
    out
}
