mod common;

use proptest::prelude::*;
use swedge::structured_cov::{dense_observed_cov, logdet_observed_cov};
use swedge::{Exact, StructureKind, StructuredInverse, TreatmentEffectSpec, VarianceComponents};

fn ok(c: common::Check) {
    match c {
        Ok(msg) => eprintln!("{msg}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn structured_inverse_matches_dense() {
    ok(common::structured_inverse(200));
}

#[test]
fn structured_inverse_exact() {
    let ex = |n: i64, d: i64| Exact::new(n.into(), d.into());
    let sizes = [3, 1, 4];
    let vc = VarianceComponents::new(ex(3, 2), ex(1, 3), ex(2, 5)).unwrap();
    let inv = StructuredInverse::new(&sizes, &vc).unwrap().to_dense();
    let v = dense_observed_cov(&sizes, &vc);
    for (r, row) in v.iter().enumerate() {
        for c in 0..row.len() {
            let prod = row.iter().zip(&inv).fold(ex(0, 1), |acc, (a, b)| acc + a.clone() * b[c].clone());
            assert_eq!(prod, ex(i64::from(r == c), 1), "entry ({r},{c})");
        }
    }
}

#[test]
fn structured_inverse_single_precision() {
    let sizes = [5, 2, 7];
    let vc32 = VarianceComponents::new(1.3f32, 0.4, 0.6).unwrap();
    let vc64 = VarianceComponents::new(1.3f64, 0.4, 0.6).unwrap();
    let a = StructuredInverse::new(&sizes, &vc32).unwrap().to_dense();
    let b = StructuredInverse::new(&sizes, &vc64).unwrap().to_dense();
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((f64::from(*x) - y).abs() < 1e-5);
        }
    }
    let ld32 = logdet_observed_cov(&sizes, &vc32).unwrap();
    let ld64 = logdet_observed_cov(&sizes, &vc64).unwrap();
    assert!((f64::from(ld32) - ld64).abs() < 1e-4);
}

#[test]
fn score_matches_finite_differences() {
    ok(common::score_gradient(50));
}

#[test]
fn identity_gee_reproduces_lmm() {
    ok(common::gee_lmm_equivalence(20));
}

#[test]
fn weight_identities_and_oracles() {
    ok(common::weight_identities(40));
}

#[test]
fn selection_matrix_identities() {
    ok(common::selection_identities(100));
}

#[test]
fn saturated_index_round_trip() {
    ok(common::saturated_bijection(12));
}

#[test]
fn identity_link_g_computation_collapses() {
    ok(common::identity_collapse(8));
}

#[test]
fn metric_formulas() {
    ok(common::metric_formulas());
}

proptest! {
    #[test]
    fn treatment_rows_sum_to_indicator(jn in 2usize..9, z in 1usize..9, j in 1usize..9) {
        prop_assume!(z <= jn && j <= jn);
        let treated = f64::from(u8::from(j >= z));
        for kind in [StructureKind::Duration, StructureKind::Period, StructureKind::Saturated] {
            let spec = TreatmentEffectSpec::new(kind, jn).unwrap();
            if spec.drops_last_period() && j == jn {
                continue;
            }
            let row = spec.treatment_row(z, j).unwrap();
            prop_assert_eq!(row.iter().sum::<f64>(), treated);
            prop_assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        let constant = TreatmentEffectSpec::new(StructureKind::Constant, jn).unwrap();
        prop_assert_eq!(constant.treatment_row(z, j).unwrap(), vec![treated]);
    }

    #[test]
    fn saturated_cell_inverts_index(jn in 2usize..40, k in 0usize..800) {
        let total = jn * (jn - 1) / 2;
        prop_assume!(k < total);
        let (j, d) = swedge::saturated_cell(k, jn).unwrap();
        prop_assert!(1 <= d && d <= j && j < jn);
        prop_assert_eq!(swedge::saturated_index(j, d, jn).unwrap(), k);
    }
}
