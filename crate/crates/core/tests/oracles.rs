//! Fits on the fixture datasets against values frozen from independent
//! implementations (`tests/data/oracles.py`: dense-likelihood optimisation
//! with scipy and statsmodels GEE).

use swedge::data_model::load_trial_csv;
use swedge::{
    estimate_estimands_gee, fit_gee, fit_lmm, Adjustment, CovStructure, GeeOptions, Link,
    LmmOptions, Scale, StructureKind, TreatmentEffectSpec, TrialData, WorkingCorrelation,
};

fn fixture(name: &str) -> TrialData {
    let path = format!("{}/tests/data/{name}", env!("CARGO_MANIFEST_DIR"));
    load_trial_csv(path, &Default::default()).unwrap()
}

fn close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (k, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol * (1.0 + w.abs()),
            "{what}[{k}]: got {g}, want {w}"
        );
    }
}

#[test]
fn lmm_exchangeable_adjusted_matches_dense_ml() {
    let data = fixture("a1_small.csv");
    let spec = TreatmentEffectSpec::new(StructureKind::Constant, 5).unwrap();
    let opts = LmmOptions {
        adjustment: Adjustment::All,
        ..Default::default()
    };
    let fit = fit_lmm(&data, spec, CovStructure::Exchangeable, &opts).unwrap();
    assert!(fit.converged);
    let beta = [
        -0.919625462305012,
        0.13530134405314673,
        2.817820066103181,
        3.1558223228744797,
        5.357438296476239,
        1.4248311337515895,
        6.662838297532962,
        0.7537985206066941,
        2.775091937771594,
        0.7606304205378969,
    ];
    close(fit.beta.as_slice(), &beta, 1e-6, "beta");
    close(
        &[fit.vc.tau2, fit.vc.sigma2],
        &[0.03930801420468315, 15.460874773146342],
        1e-5,
        "vc",
    );
    assert!((fit.loglik - -1146.4028755666566).abs() < 1e-7);
}

#[test]
fn lmm_nested_duration_matches_dense_ml() {
    let data = fixture("a1_small.csv");
    let spec = TreatmentEffectSpec::new(StructureKind::Duration, 5).unwrap();
    let fit = fit_lmm(
        &data,
        spec,
        CovStructure::NestedExchangeable,
        &LmmOptions::default(),
    )
    .unwrap();
    // κ² sits on the boundary here, so compare the maximised likelihood and
    // the fixed effects rather than the component itself.
    assert!(
        (fit.loglik - -1285.3725207799341).abs() < 1e-5,
        "loglik {}",
        fit.loglik
    );
    let beta = [
        3.537546848717356,
        5.31026466355072,
        6.7149103609937635,
        6.908445077106161,
        8.864332093309383,
        1.4299772130339188,
        2.3613223106214196,
        3.8557358826759844,
        3.366424420247625,
        3.734395788688428,
    ];
    close(fit.beta.as_slice(), &beta, 1e-4, "beta");
    close(
        &[fit.vc.tau2, fit.vc.sigma2],
        &[0.600_336_656_387_567, 30.039221855496756],
        1e-3,
        "vc",
    );
    assert!(fit.vc.kappa2 < 1e-4);
}

#[test]
fn gee_logit_saturated_matches_statsmodels() {
    let data = fixture("c1_small.csv");
    let spec = TreatmentEffectSpec::new(StructureKind::Saturated, 3).unwrap();
    let fit = fit_gee(
        &data,
        spec,
        WorkingCorrelation::independence(),
        Link::Logit,
        &GeeOptions::default(),
    )
    .unwrap();
    assert!(fit.converged);
    let beta = [
        0.2728669866666405,
        0.36101334553733044,
        0.3332688169036751,
        0.598762498276563,
        0.6198159074743953,
    ];
    let se = [
        0.1606248674725843,
        0.2778505878562764,
        0.3202783599601573,
        0.3708118168859341,
        0.35070055564203756,
    ];
    close(fit.beta.as_slice(), &beta, 1e-8, "beta");
    let cov = &fit.sandwich_cov;
    let got_se: Vec<f64> = (0..5).map(|k| cov[(k, k)].sqrt()).collect();
    close(&got_se, &se, 1e-7, "robust se");

    // Without covariates the g-computed log odds ratio is the coefficient
    // itself, and the stacked sandwich reproduces its robust SE.
    let est = estimate_estimands_gee(&fit, Scale::OddsRatio, &[]).unwrap();
    let ecov = est.estimand_cov();
    close(&est.estimands(), &beta[2..], 1e-9, "log OR");
    let est_se: Vec<f64> = (0..3).map(|k| ecov[(k, k)].sqrt()).collect();
    close(&est_se, &se[2..], 1e-6, "log OR se");
}

#[test]
fn gee_logit_adjusted_g_computation_matches_statsmodels() {
    let data = fixture("c1_small.csv");
    let spec = TreatmentEffectSpec::new(StructureKind::Saturated, 3).unwrap();
    let opts = GeeOptions {
        adjustment: Adjustment::All,
        ..Default::default()
    };
    let fit = fit_gee(
        &data,
        spec,
        WorkingCorrelation::independence(),
        Link::Logit,
        &opts,
    )
    .unwrap();
    let beta = [
        0.2521181222907128,
        0.3335907929041389,
        0.3356234113387212,
        0.5798668686200398,
        0.6480329265050465,
        0.5809028256438954,
        -0.2594313383147803,
    ];
    close(fit.beta.as_slice(), &beta, 1e-8, "beta");
    let est = estimate_estimands_gee(&fit, Scale::OddsRatio, &[]).unwrap();
    let or: Vec<f64> = est.report.components.iter().map(|r| r.estimate).collect();
    close(
        &or,
        &[1.3963873503534798, 1.7808835743359375, 1.9059861394895905],
        1e-8,
        "odds ratios",
    );
}
