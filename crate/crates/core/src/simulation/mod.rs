//! Monte Carlo studies over the benchmark designs.

pub mod dgp;
pub mod truth;

pub use dgp::{assign_adoption, generate, DesignKind, DgpParams};
pub use truth::{PotentialMeans, Truth};

use crate::data_model::TrialData;
use crate::design_algebra::{Adjustment, StructureKind, SummaryKind, TreatmentEffectSpec};
use crate::error::{Error, Result};
use crate::gee::{
    estimate_estimands_gee, fit_gee, lmm_g_estimands, CorrelationKind, GeeOptions, Link,
    WorkingCorrelation,
};
use crate::lmm::{extract_estimands, fit_lmm, lrt_fit, CovStructure, LmmOptions, SummaryRequest};
use crate::report::{EstimandReport, LrtResult, Scale};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Lmm,
    /// LMM fit mapped to marginal estimands by g-computation.
    #[serde(rename = "lmm-g", alias = "lmm_g")]
    LmmG,
    Gee,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentSet {
    #[default]
    None,
    Partial,
    Full,
}

impl AdjustmentSet {
    pub fn resolve(self, design: DesignKind) -> Result<Adjustment> {
        Ok(match self {
            Self::None => Adjustment::None,
            Self::Full => Adjustment::All,
            Self::Partial => {
                Adjustment::Covariates(design.partial_covariates().ok_or_else(|| {
                    Error::Config(format!("design {design:?} has no partial adjustment set"))
                })?)
            }
        })
    }
}

fn default_correlation() -> String {
    "exchangeable".into()
}
fn default_link() -> String {
    "identity".into()
}
fn default_scale() -> String {
    "difference".into()
}
fn one() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.05
}

/// One working model fitted to every replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub label: String,
    pub estimator: Estimator,
    pub structure: StructureKind,
    /// LMM covariance structure, or GEE working correlation.
    #[serde(default = "default_correlation")]
    pub correlation: String,
    #[serde(default)]
    pub adjustment: AdjustmentSet,
    #[serde(default = "default_link")]
    pub link: String,
    #[serde(default = "default_scale")]
    pub scale: String,
    /// Label of the model whose empirical variance is the numerator of RE.
    #[serde(default)]
    pub reference: Option<String>,
}

/// Structure test repeated on every replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrtConfig {
    pub restricted: StructureKind,
    pub general: StructureKind,
    #[serde(default = "default_correlation")]
    pub correlation: String,
    #[serde(default)]
    pub adjustment: AdjustmentSet,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub design: DesignKind,
    pub clusters: usize,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub n_periods: Option<usize>,
    #[serde(default)]
    pub size_min: Option<usize>,
    #[serde(default)]
    pub size_max: Option<usize>,
    #[serde(default)]
    pub source_size: Option<usize>,
    #[serde(default)]
    pub constant_effect: bool,
    #[serde(default = "one")]
    pub noise_scale: f64,
    #[serde(default = "one")]
    pub covariate_scale: f64,
    /// Clusters used for the binary design's Monte Carlo truth.
    #[serde(default)]
    pub truth_clusters: Option<usize>,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub lrt: Option<LrtConfig>,
}

impl SimulationConfig {
    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply the `SWEDGE_SEED` override, if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var("SWEDGE_SEED") {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("SWEDGE_SEED `{s}` is not an integer")))?;
        }
        Ok(self)
    }

    pub fn dgp_params(&self) -> DgpParams {
        let mut p = DgpParams::new(self.design, self.clusters);
        if let Some(j) = self.n_periods {
            p.n_periods = j;
        }
        if let Some(v) = self.size_min {
            p.size_min = v;
        }
        if let Some(v) = self.size_max {
            p.size_max = v;
        }
        if let Some(v) = self.source_size {
            p.source_size = v;
        }
        p.constant_effect = self.constant_effect;
        p.noise_scale = self.noise_scale;
        p.covariate_scale = self.covariate_scale;
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.models.is_empty() && self.lrt.is_none() {
            return Err(Error::Config("no models and no LRT configured".into()));
        }
        self.dgp_params().check()?;
        let mut labels = std::collections::BTreeSet::new();
        for m in &self.models {
            if !labels.insert(m.label.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate model label `{}`",
                    m.label
                )));
            }
            m.adjustment.resolve(self.design)?;
            let scale = Scale::parse(&m.scale).map_err(config)?;
            let link = Link::parse(&m.link).map_err(config)?;
            match m.estimator {
                Estimator::Lmm => {
                    CovStructure::parse(&m.correlation).map_err(config)?;
                    if scale.is_ratio() || link != Link::Identity {
                        return Err(Error::Config(format!(
                            "model `{}`: the lmm estimator reports differences; use lmm-g for ratio scales",
                            m.label
                        )));
                    }
                }
                Estimator::LmmG => {
                    CovStructure::parse(&m.correlation).map_err(config)?;
                }
                Estimator::Gee => {
                    CorrelationKind::parse(&m.correlation).map_err(config)?;
                }
            }
            if scale.is_ratio()
                && matches!(
                    m.structure,
                    StructureKind::Constant | StructureKind::Duration
                )
            {
                return Err(Error::Config(format!(
                    "model `{}`: ratio scales need the period or saturated structure",
                    m.label
                )));
            }
        }
        for m in &self.models {
            if let Some(r) = &m.reference {
                if !labels.contains(r.as_str()) {
                    return Err(Error::Config(format!(
                        "model `{}` references unknown model `{r}`",
                        m.label
                    )));
                }
            }
        }
        if let Some(l) = &self.lrt {
            CovStructure::parse(&l.correlation).map_err(config)?;
            l.adjustment.resolve(self.design)?;
            if !(0.0 < l.alpha && l.alpha < 1.0) {
                return Err(Error::Config("lrt alpha must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

fn config(e: Error) -> Error {
    Error::Config(e.to_string())
}

/// Fit one configured model and extract its estimands.
pub fn fit_model(m: &ModelConfig, design: DesignKind, data: &TrialData) -> Result<EstimandReport> {
    let spec = TreatmentEffectSpec::new(m.structure, data.n_periods)?;
    let adjustment = m.adjustment.resolve(design)?;
    let scale = Scale::parse(&m.scale)?;
    let summaries: Vec<SummaryRequest> = SummaryKind::default_for(m.structure)
        .map(SummaryRequest::Fixed)
        .into_iter()
        .collect();
    match m.estimator {
        Estimator::Lmm | Estimator::LmmG => {
            let opts = LmmOptions {
                adjustment,
                ..LmmOptions::default()
            };
            let fit = fit_lmm(data, spec, CovStructure::parse(&m.correlation)?, &opts)?;
            if m.estimator == Estimator::Lmm {
                extract_estimands(&fit, &summaries)
            } else {
                Ok(lmm_g_estimands(&fit, scale, &summaries)?.report)
            }
        }
        Estimator::Gee => {
            let opts = GeeOptions {
                adjustment,
                ..GeeOptions::default()
            };
            let corr = WorkingCorrelation::estimated(CorrelationKind::parse(&m.correlation)?);
            let fit = fit_gee(data, spec, corr, Link::parse(&m.link)?, &opts)?;
            if !fit.converged {
                return Err(Error::NonConvergence {
                    iterations: fit.iterations,
                    score_norm: f64::NAN,
                    last: Vec::new(),
                });
            }
            Ok(estimate_estimands_gee(&fit, scale, &summaries)?.report)
        }
    }
}

/// Everything recorded for one replicate.
#[derive(Clone, Debug)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    /// One entry per configured model, in order.
    pub fits: Vec<std::result::Result<EstimandReport, String>>,
    pub lrt: Option<std::result::Result<LrtResult, String>>,
}

/// RNG of replicate `r`: a distinct ChaCha stream under the master seed.
pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

pub fn run_replicate(
    cfg: &SimulationConfig,
    params: &DgpParams,
    replicate: usize,
) -> ReplicateOutcome {
    let mut rng = replicate_rng(cfg.seed, replicate);
    let data = match generate(params, &mut rng) {
        Ok(d) => d,
        Err(e) => {
            let msg = e.to_string();
            return ReplicateOutcome {
                replicate,
                fits: cfg.models.iter().map(|_| Err(msg.clone())).collect(),
                lrt: cfg.lrt.as_ref().map(|_| Err(msg.clone())),
            };
        }
    };
    let fits = cfg
        .models
        .iter()
        .map(|m| fit_model(m, cfg.design, &data).map_err(|e| e.to_string()))
        .collect();
    let lrt = cfg.lrt.as_ref().map(|l| {
        let run = || -> Result<LrtResult> {
            let opts = LmmOptions {
                adjustment: l.adjustment.resolve(cfg.design)?,
                ..LmmOptions::default()
            };
            let (_, _, r) = lrt_fit(
                &data,
                l.restricted,
                l.general,
                CovStructure::parse(&l.correlation)?,
                &opts,
            )?;
            Ok(r)
        };
        run().map_err(|e| e.to_string())
    });
    ReplicateOutcome {
        replicate,
        fits,
        lrt,
    }
}

/// Metrics of one estimand under one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimandMetrics {
    pub model: String,
    pub estimand: String,
    pub truth: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean: f64,
    pub bias: Option<f64>,
    pub ese: f64,
    pub ase_mb: Option<f64>,
    pub ase_rob: f64,
    pub ecp_mb: Option<f64>,
    pub ecp_rob: Option<f64>,
    pub re: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrtMetrics {
    pub restricted: StructureKind,
    pub general: StructureKind,
    pub alpha: f64,
    pub df: Option<usize>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub rejection_rate: f64,
    pub mean_statistic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub config: SimulationConfig,
    pub rows: Vec<EstimandMetrics>,
    pub lrt: Option<LrtMetrics>,
    /// First failure message per model, for diagnosis.
    pub failures: Vec<(String, String)>,
}

impl StudyMetrics {
    pub fn get(&self, model: &str, estimand: &str) -> Option<&EstimandMetrics> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.estimand == estimand)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "model", "estimand", "truth", "bias", "ese", "ase_mb", "ase_rob", "ecp_mb", "ecp_rob",
            "re", "n_ok", "n_failed",
        ])
        .expect("in-memory write");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into());
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.estimand.clone(),
                f(r.truth),
                f(r.bias),
                f(Some(r.ese)),
                f(r.ase_mb),
                f(Some(r.ase_rob)),
                f(r.ecp_mb),
                f(r.ecp_rob),
                f(r.re),
                r.n_ok.to_string(),
                r.n_failed.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn lrt_csv(&self) -> Option<String> {
        let l = self.lrt.as_ref()?;
        Some(format!(
            "restricted,general,df,alpha,rejection_rate,mean_statistic,n_ok,n_failed\n{},{},{},{},{:.4},{:.4},{},{}\n",
            l.restricted.name(),
            l.general.name(),
            l.df.map(|d| d.to_string()).unwrap_or_else(|| "NA".into()),
            l.alpha,
            l.rejection_rate,
            l.mean_statistic,
            l.n_ok,
            l.n_failed
        ))
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (n − 1 denominator); zero for fewer than two values.
pub fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Mean of estimate − truth.
pub fn bias(estimates: &[f64], truth: f64) -> f64 {
    mean(estimates) - truth
}

/// Empirical standard error: sample SD of the estimates.
pub fn ese(estimates: &[f64]) -> f64 {
    sample_variance(estimates).sqrt()
}

/// Fraction of `true` values.
pub fn coverage(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return f64::NAN;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Relative efficiency Var(reference) / Var(model).
pub fn relative_efficiency(reference: &[f64], model: &[f64]) -> f64 {
    sample_variance(reference) / sample_variance(model)
}

#[derive(Default)]
struct Acc {
    truth: Option<f64>,
    est: Vec<f64>,
    se_rob: Vec<f64>,
    se_mb: Vec<Option<f64>>,
    hit_rob: Vec<bool>,
    hit_mb: Vec<Option<bool>>,
}

/// Aggregate replicate outcomes into metrics.
pub fn summarize(
    cfg: &SimulationConfig,
    truth: &Truth,
    outcomes: &[ReplicateOutcome],
) -> Result<StudyMetrics> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut per_model: Vec<(String, Vec<f64>)> = Vec::new();
    let mut model_rows: Vec<Vec<(String, Acc)>> = Vec::new();
    for (mi, m) in cfg.models.iter().enumerate() {
        let scale = Scale::parse(&m.scale)?;
        let mut accs: Vec<(String, Acc)> = Vec::new();
        let mut n_failed = 0;
        for o in outcomes {
            let rep = match &o.fits[mi] {
                Ok(r) => r,
                Err(e) => {
                    if n_failed == 0 {
                        failures.push((m.label.clone(), e.clone()));
                    }
                    n_failed += 1;
                    continue;
                }
            };
            let spec = TreatmentEffectSpec::new(rep.structure, rep.provenance.n_periods)?;
            let retained = rep.provenance.retained_periods;
            let comp_truth = truth.components(&spec, retained, scale);
            let summ_truth: Vec<Option<f64>> = SummaryKind::default_for(spec.kind)
                .map(|k| truth.summary(&k, &spec, retained, scale))
                .into_iter()
                .collect();
            let rows_iter = rep
                .components
                .iter()
                .zip(comp_truth)
                .chain(rep.summaries.iter().zip(summ_truth));
            for (row, t) in rows_iter {
                let idx = match accs.iter().position(|(l, _)| *l == row.label) {
                    Some(i) => i,
                    None => {
                        accs.push((
                            row.label.clone(),
                            Acc {
                                truth: t,
                                ..Acc::default()
                            },
                        ));
                        accs.len() - 1
                    }
                };
                let a = &mut accs[idx].1;
                a.est.push(row.estimate);
                a.se_rob.push(row.se_robust);
                a.se_mb.push(row.se_model);
                if let Some(t) = t {
                    a.hit_rob.push(row.covers(t));
                    a.hit_mb.push(row.covers_model(t, scale));
                }
            }
        }
        for (label, a) in &accs {
            per_model.push((format!("{}\u{1f}{label}", m.label), a.est.clone()));
        }
        model_rows.push(accs);
        let _ = n_failed;
    }
    for (mi, m) in cfg.models.iter().enumerate() {
        let n_failed = outcomes.iter().filter(|o| o.fits[mi].is_err()).count();
        for (label, a) in &model_rows[mi] {
            let mb: Option<Vec<f64>> = a.se_mb.iter().copied().collect();
            let hit_mb: Option<Vec<bool>> = a.hit_mb.iter().copied().collect();
            let re = m.reference.as_ref().and_then(|r| {
                let key = format!("{r}\u{1f}{label}");
                per_model
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| relative_efficiency(v, &a.est))
            });
            rows.push(EstimandMetrics {
                model: m.label.clone(),
                estimand: label.clone(),
                truth: a.truth,
                n_ok: a.est.len(),
                n_failed,
                mean: mean(&a.est),
                bias: a.truth.map(|t| bias(&a.est, t)),
                ese: ese(&a.est),
                ase_mb: mb.as_deref().map(mean),
                ase_rob: mean(&a.se_rob),
                ecp_mb: a.truth.and(hit_mb).map(|h| coverage(&h)),
                ecp_rob: a.truth.map(|_| coverage(&a.hit_rob)),
                re,
            });
        }
    }
    let lrt = cfg.lrt.as_ref().map(|l| {
        let ok: Vec<&LrtResult> = outcomes
            .iter()
            .filter_map(|o| o.lrt.as_ref()?.as_ref().ok())
            .collect();
        if let Some(Err(e)) = outcomes
            .iter()
            .filter_map(|o| o.lrt.as_ref())
            .find(|r| r.is_err())
        {
            failures.push(("lrt".into(), e.clone()));
        }
        let hits: Vec<bool> = ok.iter().map(|r| r.p_value < l.alpha).collect();
        let stats: Vec<f64> = ok.iter().map(|r| r.statistic).collect();
        LrtMetrics {
            restricted: l.restricted,
            general: l.general,
            alpha: l.alpha,
            df: ok.first().map(|r| r.df),
            n_ok: ok.len(),
            n_failed: outcomes.len() - ok.len(),
            rejection_rate: coverage(&hits),
            mean_statistic: mean(&stats),
        }
    });
    Ok(StudyMetrics {
        config: cfg.clone(),
        rows,
        lrt,
        failures,
    })
}

/// Truth for a configuration, honouring `truth_clusters`.
pub fn study_truth(cfg: &SimulationConfig) -> Truth {
    let p = cfg.dgp_params();
    match cfg.truth_clusters {
        Some(n) if p.design.is_binary() => Truth::from_means(&p, truth::binary_means(&p, n)),
        _ => Truth::for_params(&p),
    }
}

/// Run every replicate and aggregate. `threads` sizes a dedicated pool;
/// `progress` receives the number of finished replicates.
pub fn run_study_with(
    cfg: &SimulationConfig,
    threads: Option<usize>,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<StudyMetrics> {
    cfg.validate()?;
    let params = cfg.dgp_params();
    let truth = study_truth(cfg);
    let done = AtomicUsize::new(0);
    let work = || -> Vec<ReplicateOutcome> {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let o = run_replicate(cfg, &params, r);
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                if let Some(p) = progress {
                    p(n, cfg.replicates);
                }
                o
            })
            .collect()
    };
    let outcomes = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    summarize(cfg, &truth, &outcomes)
}

pub fn run_study(cfg: &SimulationConfig) -> Result<StudyMetrics> {
    run_study_with(cfg, None, None)
}
