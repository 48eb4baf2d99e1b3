//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a short summary on success and a description of the first
//! violation otherwise.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swedge::design_algebra::ClusterDesign;
use swedge::gee::{duration_weight_matrix, lambda_weights};
use swedge::lmm::{cluster_loglik, lmm_score};
use swedge::simulation::{generate, DesignKind, DgpParams};
use swedge::structured_cov::{dense_observed_cov, logdet_observed_cov};
use swedge::{
    estimate_estimands_gee, fit_gee, fit_lmm, Adjustment, CorrelationKind, CovStructure, Exact,
    GeeOptions, Link, LmmOptions, Scale, StructureKind, StructuredInverse, TreatmentEffectSpec,
    VarianceComponents, WorkingCorrelation,
};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dense(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows.len(), |r, c| rows[r][c])
}

fn random_sizes(r: &mut ChaCha8Rng, max_periods: usize, min_size: usize) -> Vec<usize> {
    let jn = r.random_range(1..=max_periods);
    loop {
        let s: Vec<usize> = (0..jn).map(|_| r.random_range(min_size..=12)).collect();
        if s.iter().any(|&n| n > 0) {
            return s;
        }
    }
}

fn random_vc(r: &mut ChaCha8Rng) -> VarianceComponents<f64> {
    VarianceComponents::new(
        r.random_range(0.2..3.0),
        r.random_range(0.0..2.0),
        r.random_range(0.0..2.0),
    )
    .unwrap()
}

/// Structured inverse and log-determinant against nalgebra on random draws.
pub fn structured_inverse(draws: usize) -> Check {
    let mut r = rng(1);
    let mut worst = (0.0f64, 0.0f64);
    for draw in 0..draws {
        let sizes = random_sizes(&mut r, 6, 0);
        let vc = random_vc(&mut r);
        let v = dense(&dense_observed_cov(&sizes, &vc));
        let inv = v.clone().try_inverse().ok_or("oracle inverse failed")?;
        let s = StructuredInverse::new(&sizes, &vc).map_err(|e| e.to_string())?;
        let got = dense(&s.to_dense());
        let err = (&got - &inv).amax();
        let ld = logdet_observed_cov(&sizes, &vc).map_err(|e| e.to_string())?;
        let ld_err = (ld - v.determinant().ln()).abs();
        worst = (worst.0.max(err), worst.1.max(ld_err));
        if err > 1e-10 || ld_err > 1e-10 {
            return Err(format!(
                "draw {draw} sizes {sizes:?}: inverse err {err:.2e}, logdet err {ld_err:.2e}"
            ));
        }
    }
    Ok(format!(
        "{draws} draws, max inverse err {:.1e}, max logdet err {:.1e}",
        worst.0, worst.1
    ))
}

fn random_cluster(r: &mut ChaCha8Rng, k: usize) -> ClusterDesign {
    let sizes = random_sizes(r, 4, 1);
    let period: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
        .collect();
    let m = period.len();
    ClusterDesign {
        id: "c".into(),
        adoption: 1,
        sizes,
        q: DMatrix::from_fn(m, k, |_, _| r.random_range(-1.0..1.0)),
        y: DVector::from_fn(m, |_, _| r.random_range(-3.0..3.0)),
        period,
    }
}

fn dense_loglik(c: &ClusterDesign, beta: &DVector<f64>, vc: &VarianceComponents<f64>) -> f64 {
    let v = dense(&dense_observed_cov(&c.sizes, vc));
    let resid = &c.y - &c.q * beta;
    let vi = v.clone().try_inverse().unwrap();
    let m = c.y.len() as f64;
    -0.5 * (m * (2.0 * std::f64::consts::PI).ln()
        + v.determinant().ln()
        + (resid.transpose() * vi * &resid)[(0, 0)])
}

/// Analytic score against central differences of the exact log-likelihood.
pub fn score_gradient(instances: usize) -> Check {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let k = r.random_range(1..=4);
        let c = random_cluster(&mut r, k);
        let vc = VarianceComponents::new(
            r.random_range(0.5..2.0),
            r.random_range(0.1..1.5),
            r.random_range(0.1..1.5),
        )
        .unwrap();
        let beta = DVector::from_fn(k, |_, _| r.random_range(-1.0..1.0));
        let ll = cluster_loglik(&c, &beta, &vc).map_err(|e| e.to_string())?;
        let ll_dense = dense_loglik(&c, &beta, &vc);
        if (ll - ll_dense).abs() > 1e-9 * (1.0 + ll.abs()) {
            return Err(format!("instance {inst}: loglik {ll} vs dense {ll_dense}"));
        }
        let analytic = lmm_score(&c, &beta, &vc, CovStructure::NestedExchangeable)
            .map_err(|e| e.to_string())?;
        let theta: Vec<f64> = beta
            .iter()
            .copied()
            .chain([vc.sigma2, vc.tau2, vc.kappa2])
            .collect();
        let eval = |t: &[f64]| {
            let b = DVector::from_column_slice(&t[..k]);
            let v = VarianceComponents::new(t[k], t[k + 1], t[k + 2]).unwrap();
            cluster_loglik(&c, &b, &v).unwrap()
        };
        let mut fd = vec![0.0; theta.len()];
        for (p, slot) in fd.iter_mut().enumerate() {
            let h = 1e-5 * theta[p].abs().max(1.0);
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[p] += h;
            dn[p] -= h;
            *slot = (eval(&up) - eval(&dn)) / (2.0 * h);
        }
        let scale = fd.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&fd)
            .map(|(a, f)| (a - f).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
        if err >= 1e-5 {
            return Err(format!(
                "instance {inst}: relative error {err:.2e}\n analytic {analytic:?}\n fd {fd:?}"
            ));
        }
    }
    Ok(format!(
        "{instances} instances, max relative error {worst:.1e}"
    ))
}

/// Identity-link GEE at the LMM's fitted correlation reproduces the LMM
/// fixed effects.
pub fn gee_lmm_equivalence(datasets: usize) -> Check {
    let structures = [
        StructureKind::Constant,
        StructureKind::Duration,
        StructureKind::Period,
        StructureKind::Saturated,
    ];
    let mut worst = 0.0f64;
    for s in 0..datasets {
        let mut p = DgpParams::new(DesignKind::A1, 10);
        p.size_min = 3;
        p.size_max = 8;
        let data = generate(&p, &mut rng(100 + s as u64)).map_err(|e| e.to_string())?;
        let kind = structures[s % structures.len()];
        let spec = TreatmentEffectSpec::new(kind, p.n_periods).unwrap();
        let adjustment = if s % 2 == 0 {
            Adjustment::All
        } else {
            Adjustment::None
        };
        let lmm = fit_lmm(
            &data,
            spec,
            CovStructure::NestedExchangeable,
            &LmmOptions {
                adjustment: adjustment.clone(),
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let total = lmm.vc.total();
        let corr = WorkingCorrelation::fixed(
            CorrelationKind::NestedExchangeable,
            lmm.vc.tau2 / total,
            lmm.vc.kappa2 / total,
        )
        .map_err(|e| e.to_string())?;
        let gee = fit_gee(
            &data,
            spec,
            corr,
            Link::Identity,
            &GeeOptions {
                adjustment,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let diff = (&gee.beta - &lmm.beta).amax();
        worst = worst.max(diff);
        if diff >= 1e-8 {
            return Err(format!(
                "dataset {s} ({}): max |Δβ| = {diff:.2e}",
                kind.name()
            ));
        }
    }
    Ok(format!("{datasets} datasets, max |Δβ| {worst:.1e}"))
}

fn ex(n: i64, d: i64) -> Exact {
    Exact::new(n.into(), d.into())
}

/// Random adoption probabilities as exact fractions and their cumulative sums.
fn random_probs(r: &mut ChaCha8Rng, jn: usize) -> (Vec<Exact>, Vec<Exact>) {
    let raw: Vec<i64> = (0..jn).map(|_| r.random_range(1..=9)).collect();
    let total: i64 = raw.iter().sum();
    let probs: Vec<Exact> = raw.iter().map(|&v| ex(v, total)).collect();
    let mut acc = ex(0, 1);
    let cum = probs
        .iter()
        .map(|p| {
            acc = acc.clone() + p.clone();
            acc.clone()
        })
        .collect();
    (probs, cum)
}

fn to_f64(v: &Exact) -> f64 {
    use num_traits::ToPrimitive;
    v.to_f64().unwrap()
}

/// R̃ = I + ρ1 11ᵀ + ρ2 blockdiag(11ᵀ) for the given block sizes.
fn unit_corr(sizes: &[usize], rho1: f64, rho2: f64) -> DMatrix<f64> {
    let period: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
        .collect();
    let m = period.len();
    DMatrix::from_fn(m, m, |a, b| {
        let mut v = rho1;
        if period[a] == period[b] {
            v += rho2;
        }
        if a == b {
            v += 1.0;
        }
        v
    })
}

/// Expand a J×K matrix to M×K by repeating row j N_j times.
fn expand_rows(a: &DMatrix<f64>, sizes: &[usize]) -> DMatrix<f64> {
    let rows: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
        .collect();
    DMatrix::from_fn(rows.len(), a.ncols(), |r, c| a[(rows[r], c)])
}

/// Period and duration weights: exact identities plus dense oracles.
pub fn weight_identities(draws: usize) -> Check {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let jn = r.random_range(2..=5);
        let sizes: Vec<usize> = (0..jn).map(|_| r.random_range(1..=6)).collect();
        let (probs, cum) = random_probs(&mut r, jn);

        let ind = lambda_weights(&sizes, &cum, ex(0, 1), ex(0, 1));
        for (j, w) in ind.iter().enumerate() {
            let want = cum[j].clone() * (ex(1, 1) - cum[j].clone());
            if *w != want {
                return Err(format!(
                    "draw {draw}: independence weight {j} is {w}, want {want}"
                ));
            }
        }
        let rho1 = ex(r.random_range(0..=30), 100);
        let rho2 = ex(r.random_range(0..=30), 100);
        let lam = lambda_weights(&sizes, &cum, rho1.clone(), rho2.clone());
        if lam[jn - 1] != ex(0, 1) {
            return Err(format!(
                "draw {draw}: last-period weight is {}",
                lam[jn - 1]
            ));
        }

        // N_j λ_j = Σ_z π_z ((a_z − π^s) ⊗ 1)ᵀ R̃⁻¹ (e_j a_zj ⊗ 1).
        let (r1, r2) = (to_f64(&rho1), to_f64(&rho2));
        let rinv = unit_corr(&sizes, r1, r2)
            .try_inverse()
            .ok_or("oracle inverse failed")?;
        let pf: Vec<f64> = probs.iter().map(to_f64).collect();
        let cf: Vec<f64> = cum.iter().map(to_f64).collect();
        for j in 0..jn {
            let mut acc = 0.0;
            for (z, pz) in pf.iter().enumerate() {
                let u = DMatrix::from_fn(jn, 1, |l, _| f64::from(u8::from(z <= l)) - cf[l]);
                let v = DMatrix::from_fn(jn, 1, |l, _| f64::from(u8::from(l == j && z <= j)));
                let (u, v) = (expand_rows(&u, &sizes), expand_rows(&v, &sizes));
                acc += pz * (u.transpose() * &rinv * v)[(0, 0)];
            }
            let got = to_f64(&lam[j]) * sizes[j] as f64;
            let err = (got - acc).abs();
            worst = worst.max(err);
            if err > 1e-10 {
                return Err(format!(
                    "draw {draw}: period weight {j}: {got} vs oracle {acc}"
                ));
            }
        }

        // Λ(d) = {(H_z − E H_Z) ⊗ 1}ᵀ R̃⁻¹ (Λ_z^d ⊗ 1).
        let eh = swedge::design_algebra::expected_duration_indicator(&pf);
        for z in 1..=jn {
            let a = expand_rows(
                &(swedge::design_algebra::duration_indicator(z, jn) - &eh),
                &sizes,
            );
            for d in 1..=jn {
                let l = expand_rows(&swedge::design_algebra::lambda_indicator(z, d, jn), &sizes);
                let oracle = a.transpose() * &rinv * l;
                let got = duration_weight_matrix(z, &sizes, &pf, r1, r2, d);
                for (e, row) in got.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        let err = (v - oracle[(e, c)]).abs();
                        worst = worst.max(err);
                        if err > 1e-10 {
                            return Err(format!(
                                "draw {draw}: duration weight z={z} d={d} ({e},{c}): {v} vs oracle {}",
                                oracle[(e, c)]
                            ));
                        }
                    }
                }
            }
        }
    }
    Ok(format!(
        "{draws} draws, exact identities hold, max oracle err {worst:.1e}"
    ))
}

/// Selection matrices: DᵀD = I and DDᵀ = diag(S).
pub fn selection_identities(draws: usize) -> Check {
    use swedge::design_algebra::SelectionStructure;
    let mut r = rng(4);
    for draw in 0..draws {
        let n = r.random_range(1..=8);
        let jn = r.random_range(1..=4);
        let enrolled: Vec<Vec<usize>> = (0..jn)
            .map(|_| {
                let k = r.random_range(0..=n);
                rand::seq::index::sample(&mut r, n, k).into_vec()
            })
            .collect();
        let sel = SelectionStructure::new(n, enrolled).map_err(|e| e.to_string())?;
        let d = sel.dense();
        let m = d.ncols();
        if d.transpose() * &d != DMatrix::identity(m, m) {
            return Err(format!("draw {draw}: DᵀD is not the identity"));
        }
        if &d * d.transpose() != DMatrix::from_diagonal(&sel.indicator()) {
            return Err(format!("draw {draw}: DDᵀ differs from diag(S)"));
        }
        if sel.sizes().iter().sum::<usize>() != m {
            return Err(format!(
                "draw {draw}: sizes do not add up to the column count"
            ));
        }
    }
    Ok(format!("{draws} draws"))
}

/// saturated_index and saturated_cell are mutually inverse over every cell.
pub fn saturated_bijection(max_periods: usize) -> Check {
    use swedge::{saturated_cell, saturated_index};
    for jn in 2..=max_periods {
        let mut next = 0;
        for j in 1..jn {
            for d in 1..=j {
                let k = saturated_index(j, d, jn).map_err(|e| e.to_string())?;
                if k != next || saturated_cell(k, jn).map_err(|e| e.to_string())? != (j, d) {
                    return Err(format!("J={jn}: cell ({j},{d}) maps to {k}"));
                }
                next += 1;
            }
        }
        if saturated_cell(next, jn).is_ok() || saturated_index(jn, 1, jn).is_ok() {
            return Err(format!("J={jn}: out-of-range cells accepted"));
        }
    }
    Ok(format!("J = 2..={max_periods}"))
}

/// With an identity link the g-computed differences equal the treatment
/// coefficients, whatever the covariates.
pub fn identity_collapse(datasets: usize) -> Check {
    let structures = [
        StructureKind::Constant,
        StructureKind::Duration,
        StructureKind::Period,
        StructureKind::Saturated,
    ];
    let mut worst = 0.0f64;
    for s in 0..datasets {
        let data = generate(
            &DgpParams::new(DesignKind::B1, 10),
            &mut rng(200 + s as u64),
        )
        .map_err(|e| e.to_string())?;
        let kind = structures[s % structures.len()];
        let spec = TreatmentEffectSpec::new(kind, 5).unwrap();
        let opts = GeeOptions {
            adjustment: Adjustment::All,
            ..Default::default()
        };
        let fit = fit_gee(
            &data,
            spec,
            WorkingCorrelation::estimated(CorrelationKind::NestedExchangeable),
            Link::Identity,
            &opts,
        )
        .map_err(|e| e.to_string())?;
        let est =
            estimate_estimands_gee(&fit, Scale::Difference, &[]).map_err(|e| e.to_string())?;
        let off = fit.layout.treatment_offset();
        for (c, v) in est.estimands().iter().enumerate() {
            let err = (v - fit.beta[off + c]).abs();
            worst = worst.max(err);
            if err > 1e-10 {
                return Err(format!(
                    "dataset {s} ({}): component {c}: {v} vs β {}",
                    kind.name(),
                    fit.beta[off + c]
                ));
            }
        }
        let psi = est.psi_total.amax() / fit.n_obs as f64;
        if psi > 1e-8 {
            return Err(format!(
                "dataset {s}: stacked equations not solved ({psi:.1e})"
            ));
        }
    }
    Ok(format!("{datasets} fits, max |Δ − β| {worst:.1e}"))
}

/// Study metric formulas on hand-computed inputs.
pub fn metric_formulas() -> Check {
    use swedge::simulation::{bias, coverage, ese, mean, relative_efficiency};
    let x = [1.0, 2.0, 3.0, 6.0];
    let checks = [
        ("mean", mean(&x), 3.0),
        ("bias", bias(&x, 2.5), 0.5),
        ("ese", ese(&x), (14.0f64 / 3.0).sqrt()),
        ("ese of one value", ese(&[4.0]), 0.0),
        ("coverage", coverage(&[true, false, true, true]), 0.75),
        (
            "relative efficiency",
            relative_efficiency(&[0.0, 2.0, 4.0], &[0.0, 1.0, 2.0]),
            4.0,
        ),
    ];
    for (name, got, want) in checks {
        if (got - want).abs() > 1e-14 {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    Ok("mean, bias, ESE, coverage, RE".into())
}
