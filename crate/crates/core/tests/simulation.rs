use swedge::simulation::{
    generate, replicate_rng, run_study_with, DesignKind, DgpParams, SimulationConfig,
};

const SMALL: &str = r#"
design = "A1"
clusters = 10
replicates = 4
seed = 7

[[models]]
label = "lmm"
estimator = "lmm"
structure = "constant"

[[models]]
label = "gee"
estimator = "gee"
structure = "duration"
correlation = "nested"
"#;

#[test]
fn results_do_not_depend_on_thread_count() {
    let cfg = SimulationConfig::parse(SMALL).unwrap();
    let one = run_study_with(&cfg, Some(1), None).unwrap();
    let two = run_study_with(&cfg, Some(2), None).unwrap();
    assert_eq!(one.to_json(), two.to_json());
    assert_eq!(one.to_csv(), two.to_csv());
}

#[test]
fn seed_changes_results() {
    let a = SimulationConfig::parse(SMALL).unwrap();
    let mut b = a.clone();
    b.seed += 1;
    let ma = run_study_with(&a, Some(1), None).unwrap();
    let mb = run_study_with(&b, Some(1), None).unwrap();
    assert_ne!(
        ma.get("lmm", "Δ").unwrap().mean,
        mb.get("lmm", "Δ").unwrap().mean
    );
}

#[test]
fn noise_free_generator_gives_exact_estimates() {
    let mut cfg = SimulationConfig::parse(
        r#"
design = "A1"
clusters = 10
replicates = 3
seed = 1
noise_scale = 0.0
covariate_scale = 0.0

[[models]]
label = "gee"
estimator = "gee"
structure = "constant"
correlation = "independence"
"#,
    )
    .unwrap();
    cfg.constant_effect = true;
    let m = run_study_with(&cfg, Some(1), None).unwrap();
    let r = m.get("gee", "Δ").unwrap();
    assert_eq!(r.n_ok, 3);
    assert!(r.bias.unwrap().abs() < 1e-10, "bias {:?}", r.bias);
    assert!(r.ese < 1e-10);
}

#[test]
fn generated_covariates_have_design_moments() {
    let p = DgpParams::new(DesignKind::A1, 100);
    let data = generate(&p, &mut replicate_rng(11, 0)).unwrap();
    let n = data.records.len() as f64;
    let mean = |k: usize| data.records.iter().map(|r| r.x[k]).sum::<f64>() / n;
    assert!((mean(0) - 0.5).abs() < 0.03, "x1 mean {}", mean(0));
    assert!((mean(1) - 0.8).abs() < 0.03, "x2 mean {}", mean(1));
    assert!(mean(2).abs() < 0.1 && mean(3).abs() < 0.1);
    for c in data.clusters.values() {
        for &n in &c.period_sizes {
            assert!((p.size_min..=p.size_max).contains(&n));
        }
    }
}

#[test]
fn binary_design_study_runs_with_reduced_truth() {
    let cfg = SimulationConfig::parse(
        r#"
design = "C1"
clusters = 30
replicates = 2
seed = 3
truth_clusters = 2000

[[models]]
label = "gee"
estimator = "gee"
structure = "saturated"
correlation = "independence"
link = "logit"
scale = "or"
"#,
    )
    .unwrap();
    let m = run_study_with(&cfg, Some(1), None).unwrap();
    let r = m.get("gee", "Φ_1(1)").unwrap();
    let truth = r.truth.unwrap();
    assert!(truth > 1.5 && truth < 3.5, "truth {truth}");
    assert_eq!(r.n_ok + r.n_failed, 2);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        "design = \"A1\"\nclusters = 10\nreplicates = 0\nseed = 1\n[[models]]\nlabel = \"a\"\nestimator = \"lmm\"\nstructure = \"constant\"\n",
        "design = \"A1\"\nclusters = 10\nreplicates = 2\nseed = 1\n",
        "design = \"A1\"\nclusters = 10\nreplicates = 2\nseed = 1\n[[models]]\nlabel = \"a\"\nestimator = \"lmm\"\nstructure = \"saturated\"\nscale = \"or\"\n",
        "design = \"A1\"\nclusters = 10\nreplicates = 2\nseed = 1\nunknown = 3\n[[models]]\nlabel = \"a\"\nestimator = \"lmm\"\nstructure = \"constant\"\n",
    ] {
        let parsed = SimulationConfig::parse(bad).and_then(|c| c.validate().map(|_| c));
        assert!(parsed.is_err(), "accepted:\n{bad}");
    }
}
