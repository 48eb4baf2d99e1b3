//! Marginal models fitted by generalized estimating equations with a
//! canonical link and a nested-exchangeable working correlation
//!
//! R = (1 − ρ1 − ρ2) I + ρ1 11ᵀ + ρ2 blockdiag(11ᵀ),
//!
//! whose inverse is applied with the same structured algebra as the mixed
//! model covariance. Estimands are then formed by g-computation; see
//! [`estimands`].

pub mod estimands;
pub mod weights;

pub use estimands::{estimate_estimands_gee, g_compute_mu, lmm_g_estimands, StackedEstimates};
pub use weights::{duration_weight_matrix, lambda_weight, lambda_weights, unit_residual};

use crate::data_model::TrialData;
use crate::design_algebra::{
    Adjustment, ClusterDesign, DesignLayout, ModelDesign, TreatmentEffectSpec,
};
use crate::error::{Error, Result};
use crate::linalg::{first_dependent_column, sandwich, spd_solve, symmetrize};
use crate::report::Provenance;
use crate::structured_cov::StructuredInverse;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
    Log,
}

impl Link {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Self::Identity),
            "logit" => Ok(Self::Logit),
            "log" => Ok(Self::Log),
            other => Err(Error::InvalidArgument(format!("unknown link `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Logit => "logit",
            Self::Log => "log",
        }
    }

    /// Name of the canonical variance function.
    pub fn variance_name(self) -> &'static str {
        match self {
            Self::Identity => "constant",
            Self::Logit => "bernoulli",
            Self::Log => "poisson",
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Self::Identity => eta,
            Self::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Self::Log => eta.exp(),
        }
    }

    pub fn apply(self, mu: f64) -> f64 {
        match self {
            Self::Identity => mu,
            Self::Logit => (mu / (1.0 - mu)).ln(),
            Self::Log => mu.ln(),
        }
    }

    /// Variance function v(μ); equals dμ/dη for canonical links.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Logit => mu * (1.0 - mu),
            Self::Log => mu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    Independence,
    NestedExchangeable,
    ExchangeableWithinPeriodOnly,
}

impl CorrelationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independence" | "ind" => Ok(Self::Independence),
            "nested" | "nested_exchangeable" => Ok(Self::NestedExchangeable),
            "within" | "within_period" | "exchangeable" => Ok(Self::ExchangeableWithinPeriodOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown correlation `{other}`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Independence => "independence",
            Self::NestedExchangeable => "nested",
            Self::ExchangeableWithinPeriodOnly => "within_period",
        }
    }
}

/// Working correlation: either fixed at (ρ1, ρ2) or re-estimated by moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkingCorrelation {
    pub kind: CorrelationKind,
    pub rho1: f64,
    pub rho2: f64,
    pub estimate: bool,
}

impl WorkingCorrelation {
    pub fn independence() -> Self {
        Self {
            kind: CorrelationKind::Independence,
            rho1: 0.0,
            rho2: 0.0,
            estimate: false,
        }
    }

    pub fn estimated(kind: CorrelationKind) -> Self {
        Self {
            kind,
            rho1: 0.0,
            rho2: 0.0,
            estimate: kind != CorrelationKind::Independence,
        }
    }

    pub fn fixed(kind: CorrelationKind, rho1: f64, rho2: f64) -> Result<Self> {
        let (rho1, rho2) = match kind {
            CorrelationKind::Independence => (0.0, 0.0),
            CorrelationKind::ExchangeableWithinPeriodOnly => (0.0, rho2),
            CorrelationKind::NestedExchangeable => (rho1, rho2),
        };
        if !(rho1.is_finite() && rho2.is_finite()) || rho1 + rho2 >= 1.0 {
            return Err(Error::InvalidArgument(
                "working correlation must satisfy ρ1 + ρ2 < 1".into(),
            ));
        }
        Ok(Self {
            kind,
            rho1,
            rho2,
            estimate: false,
        })
    }

    /// Number of estimated correlation parameters.
    fn n_free(&self) -> usize {
        if !self.estimate {
            return 0;
        }
        match self.kind {
            CorrelationKind::Independence => 0,
            CorrelationKind::ExchangeableWithinPeriodOnly => 1,
            CorrelationKind::NestedExchangeable => 2,
        }
    }
}

/// Which sufficient condition for robustness of the g-computation
/// estimators holds for a fitted configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustnessCondition {
    /// Working independence.
    Independence,
    /// Identity link with constant variance.
    IdentityLink,
    /// No between-period correlation and cluster-level covariates only.
    WithinPeriodClusterCovariates,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeeOptions {
    pub adjustment: Adjustment,
    pub retained: Option<usize>,
    /// Convergence threshold on the β change.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self {
            adjustment: Adjustment::None,
            retained: None,
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Pooled moment estimates of the working correlation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationEstimate {
    pub rho1: f64,
    pub rho2: f64,
    /// No cross-period pairs were available, so ρ1 was set to 0.
    pub no_cross_pairs: bool,
}

/// Pair sums of one cluster's Pearson residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct PairSums {
    pub cross: f64,
    pub n_cross: f64,
    pub within: f64,
    pub n_within: f64,
    pub ss: f64,
    pub m: f64,
}

impl PairSums {
    /// `blocks[j]` holds the residuals of period j.
    pub fn new<B: AsRef<[f64]>>(blocks: &[B]) -> Self {
        let mut out = Self::default();
        let mut total = 0.0;
        let mut sq_blocks = 0.0;
        let mut nn = 0.0;
        for b in blocks {
            let b = b.as_ref();
            let e: f64 = b.iter().sum();
            let ss: f64 = b.iter().map(|x| x * x).sum();
            let n = b.len() as f64;
            out.within += 0.5 * (e * e - ss);
            out.n_within += 0.5 * n * (n - 1.0);
            out.ss += ss;
            out.m += n;
            total += e;
            sq_blocks += e * e;
            nn += n * n;
        }
        out.cross = 0.5 * (total * total - sq_blocks);
        out.n_cross = 0.5 * (out.m * out.m - nn);
        out
    }

    fn add(&mut self, o: &Self) {
        self.cross += o.cross;
        self.n_cross += o.n_cross;
        self.within += o.within;
        self.n_within += o.n_within;
        self.ss += o.ss;
        self.m += o.m;
    }
}

/// Moment estimator of (ρ1, ρ2): ρ1 is the mean product over cross-period
/// pairs and ρ1 + ρ2 the mean product over distinct within-period pairs,
/// both pooled with equal weight per pair and divided by the dispersion.
/// `residuals[i][j]` are the Pearson residuals of cluster i in period j.
pub fn moment_correlations(residuals: &[Vec<Vec<f64>>], dispersion: f64) -> CorrelationEstimate {
    let mut acc = PairSums::default();
    for c in residuals {
        acc.add(&PairSums::new(c));
    }
    estimate_from_pairs(&acc, dispersion, CorrelationKind::NestedExchangeable)
}

fn estimate_from_pairs(acc: &PairSums, phi: f64, kind: CorrelationKind) -> CorrelationEstimate {
    let no_cross = acc.n_cross <= 0.0;
    let rho1 = if no_cross {
        0.0
    } else {
        acc.cross / acc.n_cross / phi
    };
    let total = if acc.n_within > 0.0 {
        acc.within / acc.n_within / phi
    } else {
        rho1
    };
    match kind {
        CorrelationKind::Independence => CorrelationEstimate {
            rho1: 0.0,
            rho2: 0.0,
            no_cross_pairs: no_cross,
        },
        CorrelationKind::ExchangeableWithinPeriodOnly => CorrelationEstimate {
            rho1: 0.0,
            rho2: total,
            no_cross_pairs: no_cross,
        },
        CorrelationKind::NestedExchangeable => CorrelationEstimate {
            rho1,
            rho2: total - rho1,
            no_cross_pairs: no_cross,
        },
    }
}

/// A converged GEE.
#[derive(Clone, Debug)]
pub struct GeeFit {
    pub layout: DesignLayout,
    pub link: Link,
    pub correlation: WorkingCorrelation,
    pub beta: DVector<f64>,
    /// (ρ̂1, ρ̂2) on the correlation scale.
    pub rho: (f64, f64),
    pub dispersion: f64,
    pub converged: bool,
    pub iterations: usize,
    pub condition: RobustnessCondition,
    pub warnings: Vec<String>,
    /// ρ̂ was shrunk toward 0 to keep R positive definite.
    pub rho_projected: bool,
    /// Per-cluster contributions of the model rows (β, ρ, φ) at the solution.
    pub scores: Vec<DVector<f64>>,
    pub jacobian: DMatrix<f64>,
    /// Sandwich covariance of the model parameters (β, ρ, φ).
    pub sandwich_cov: DMatrix<f64>,
    pub n_obs: usize,
    pub n_periods: usize,
    pub(crate) design: ModelDesign,
}

/// Score, optional information, fitted means and standardized residuals.
type BetaParts = (DVector<f64>, Option<DMatrix<f64>>, Vec<f64>, Vec<f64>);

/// Model-parameter layout: β, then free ρ's, then φ if estimated.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ParamLayout {
    pub k: usize,
    pub n_rho: usize,
    pub has_phi: bool,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.k + self.n_rho + usize::from(self.has_phi)
    }
}

pub(crate) struct Engine<'a> {
    pub clusters: &'a [ClusterDesign],
    pub link: Link,
    pub corr: WorkingCorrelation,
    pub params: ParamLayout,
}

impl Engine<'_> {
    /// (ρ1, ρ2, φ) encoded in a parameter vector.
    pub fn nuisance(&self, theta: &[f64]) -> (f64, f64, f64) {
        let k = self.params.k;
        let (r1, r2) = match (self.corr.kind, self.params.n_rho) {
            (_, 0) => (self.corr.rho1, self.corr.rho2),
            (CorrelationKind::ExchangeableWithinPeriodOnly, 1) => (0.0, theta[k]),
            _ => (theta[k], theta[k + 1]),
        };
        let phi = if self.params.has_phi {
            theta[k + self.params.n_rho]
        } else {
            1.0
        };
        (r1, r2, phi)
    }

    fn fitted(&self, c: &ClusterDesign, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let b = DVector::from_column_slice(beta);
        let eta = &c.q * b;
        let mu: Vec<f64> = eta.iter().map(|&e| self.link.inverse(e)).collect();
        let v: Vec<f64> = mu.iter().map(|&m| self.link.variance(m)).collect();
        (mu, v)
    }

    fn pearson_blocks(&self, c: &ClusterDesign, mu: &[f64], v: &[f64]) -> Vec<Vec<f64>> {
        let mut blocks = vec![Vec::new(); c.sizes.len()];
        for m in 0..mu.len() {
            blocks[c.period[m]].push((c.y[m] - mu[m]) / v[m].sqrt());
        }
        blocks
    }

    fn inverse(
        &self,
        c: &ClusterDesign,
        r1: f64,
        r2: f64,
    ) -> Result<Option<StructuredInverse<f64>>> {
        if r1 == 0.0 && r2 == 0.0 {
            return Ok(None);
        }
        StructuredInverse::from_parts(&c.sizes, 1.0 - r1 - r2, r1, r2).map(Some)
    }

    /// Score Qᵀ Z^{1/2} R⁻¹ Z^{-1/2} (Y − μ) and, optionally, the Fisher
    /// information Qᵀ Z^{1/2} R⁻¹ Z^{1/2} Q.
    fn beta_parts(
        &self,
        c: &ClusterDesign,
        beta: &[f64],
        r1: f64,
        r2: f64,
        with_info: bool,
    ) -> Result<BetaParts> {
        let (mu, v) = self.fitted(c, beta);
        let sd: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
        let e: Vec<f64> = (0..mu.len()).map(|m| (c.y[m] - mu[m]) / sd[m]).collect();
        let a = DMatrix::from_fn(c.q.nrows(), c.q.ncols(), |r, k| c.q[(r, k)] * sd[r]);
        let inv = self.inverse(c, r1, r2)?;
        let re = match &inv {
            Some(inv) => DVector::from_vec(inv.apply(&e)?),
            None => DVector::from_vec(e),
        };
        let score = a.tr_mul(&re);
        let info = if with_info {
            let mut m = a.tr_mul(&a);
            if let Some(inv) = &inv {
                m *= *inv.a();
                let k = a.ncols();
                let mut s = vec![DVector::zeros(k); c.sizes.len()];
                for r in 0..a.nrows() {
                    s[c.period[r]] += a.row(r).transpose();
                }
                let mut l = DVector::zeros(k);
                for (j, sj) in s.iter().enumerate() {
                    m.ger(-*inv.b(j), sj, sj, 1.0);
                    l.axpy(*inv.q(j), sj, 1.0);
                }
                m.ger(-*inv.c(), &l, &l, 1.0);
            }
            Some(m)
        } else {
            None
        };
        Ok((score, info, mu, v))
    }

    /// Model rows of the stacked estimating function for cluster `c`.
    pub fn cluster_psi(&self, c: &ClusterDesign, theta: &[f64], out: &mut [f64]) -> Result<()> {
        let k = self.params.k;
        let (r1, r2, phi) = self.nuisance(theta);
        let (score, _, mu, v) = self.beta_parts(c, &theta[..k], r1, r2, false)?;
        out[..k].copy_from_slice(score.as_slice());
        if self.params.n_rho > 0 || self.params.has_phi {
            let ps = PairSums::new(&self.pearson_blocks(c, &mu, &v));
            let mut at = k;
            if self.params.n_rho == 2 {
                out[at] = ps.cross - r1 * phi * ps.n_cross;
                at += 1;
            }
            if self.params.n_rho >= 1 {
                out[at] = ps.within - (r1 + r2) * phi * ps.n_within;
                at += 1;
            }
            if self.params.has_phi {
                out[at] = ps.ss - phi * ps.m;
            }
        }
        Ok(())
    }

    fn pooled_pairs(&self, beta: &[f64]) -> PairSums {
        let mut acc = PairSums::default();
        for c in self.clusters {
            let (mu, v) = self.fitted(c, beta);
            acc.add(&PairSums::new(&self.pearson_blocks(c, &mu, &v)));
        }
        acc
    }
}

fn check_condition(
    layout: &DesignLayout,
    design: &ModelDesign,
    link: Link,
    kind: CorrelationKind,
) -> RobustnessCondition {
    if kind == CorrelationKind::Independence {
        return RobustnessCondition::Independence;
    }
    if link == Link::Identity {
        return RobustnessCondition::IdentityLink;
    }
    let c0 = layout.covariate_offset();
    let cluster_level = design
        .clusters
        .iter()
        .all(|c| (c0..layout.n_cols()).all(|k| c.q.column(k).iter().all(|&v| v == c.q[(0, k)])));
    if kind == CorrelationKind::ExchangeableWithinPeriodOnly && cluster_level {
        return RobustnessCondition::WithinPeriodClusterCovariates;
    }
    RobustnessCondition::None
}

/// Shrink (ρ1, ρ2) toward zero until R is positive definite for every cluster.
fn project_pd(clusters: &[ClusterDesign], r1: f64, r2: f64) -> (f64, f64, bool) {
    let ok = |a: f64, b: f64| {
        a + b < 1.0
            && clusters
                .iter()
                .all(|c| StructuredInverse::from_parts(&c.sizes, 1.0 - a - b, a, b).is_ok())
    };
    let (mut a, mut b) = (r1, r2);
    let mut projected = false;
    let mut tries = 0;
    while !ok(a, b) && tries < 200 {
        a *= 0.9;
        b *= 0.9;
        projected = true;
        tries += 1;
    }
    if !ok(a, b) {
        return (0.0, 0.0, true);
    }
    (a, b, projected)
}

pub fn fit_gee(
    data: &TrialData,
    spec: TreatmentEffectSpec,
    corr: WorkingCorrelation,
    link: Link,
    opts: &GeeOptions,
) -> Result<GeeFit> {
    data.ensure_fittable()?;
    let design = ModelDesign::build(data, spec, &opts.adjustment, opts.retained)?;
    fit_gee_design(design, data.n_periods, corr, link, opts)
}

pub fn fit_gee_design(
    design: ModelDesign,
    n_periods: usize,
    corr: WorkingCorrelation,
    link: Link,
    opts: &GeeOptions,
) -> Result<GeeFit> {
    let layout = design.layout.clone();
    let k = layout.n_cols();
    if design.clusters.is_empty() {
        return Err(Error::InvalidArgument(
            "no clusters with retained records".into(),
        ));
    }
    let g_tot = design
        .clusters
        .iter()
        .fold(DMatrix::zeros(k, k), |a, c| a + c.q.tr_mul(&c.q));
    if let Some(col) = first_dependent_column(&g_tot, 1e-10) {
        return Err(Error::RankDeficient(layout.column_names()[col].clone()));
    }
    for c in &design.clusters {
        let bad = match link {
            Link::Identity => false,
            Link::Logit => c.y.iter().any(|&y| !(0.0..=1.0).contains(&y)),
            Link::Log => c.y.iter().any(|&y| y < 0.0),
        };
        if bad {
            return Err(Error::InvalidArgument(format!(
                "outcomes outside the support of the {} link",
                link.name()
            )));
        }
    }
    let condition = check_condition(&layout, &design, link, corr.kind);
    let mut warnings = Vec::new();
    if condition == RobustnessCondition::None {
        warnings.push(
            "none of the robustness conditions holds for this link, correlation and covariate set; \
             estimand consistency is not guaranteed"
                .to_string(),
        );
    }
    let params = ParamLayout {
        k,
        n_rho: corr.n_free(),
        has_phi: corr.estimate && corr.n_free() > 0 && link == Link::Identity,
    };
    let engine = Engine {
        clusters: &design.clusters,
        link,
        corr,
        params,
    };

    // Period intercepts start at the link of the period mean.
    let mut beta = vec![0.0; k];
    let n_obs = design.n_obs();
    for (j, b) in beta.iter_mut().enumerate().take(layout.retained) {
        let (mut s, mut n) = (0.0, 0.0);
        for c in &design.clusters {
            for (m, &p) in c.period.iter().enumerate() {
                if p == j {
                    s += c.y[m];
                    n += 1.0;
                }
            }
        }
        let mean = if n > 0.0 { s / n } else { 0.0 };
        *b = match link {
            Link::Identity => mean,
            Link::Logit => link.apply(mean.clamp(0.01, 0.99)),
            Link::Log => mean.max(0.01).ln(),
        };
    }

    let (mut r1, mut r2) = (corr.rho1, corr.rho2);
    let mut phi = 1.0;
    let mut projected = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        if params.n_rho > 0 {
            let acc = engine.pooled_pairs(&beta);
            if link == Link::Identity {
                phi = acc.ss / acc.m;
            }
            let est = estimate_from_pairs(&acc, phi, corr.kind);
            let (a, b, p) = project_pd(&design.clusters, est.rho1, est.rho2);
            r1 = a;
            r2 = b;
            projected = p;
        }
        let mut score = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        for c in &design.clusters {
            let (s, i, _, _) = engine.beta_parts(c, &beta, r1, r2, true)?;
            score += s;
            info += i.expect("requested");
        }
        symmetrize(&mut info);
        let step = spd_solve(&info, &score)?;
        let mut scale = 1.0;
        let big = step.amax();
        if link != Link::Identity && big > 5.0 {
            scale = 5.0 / big;
        }
        for (b, s) in beta.iter_mut().zip(step.iter()) {
            *b += scale * s;
        }
        last_change = scale * big;
        if !last_change.is_finite() {
            break;
        }
        if last_change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            score_norm: last_change,
            last: beta,
        });
    }
    let mut corr = corr;
    let mut params = params;
    if params.n_rho > 0 {
        let acc = engine.pooled_pairs(&beta);
        if link == Link::Identity {
            phi = acc.ss / acc.m;
        }
        let est = estimate_from_pairs(&acc, phi, corr.kind);
        let (a, b, p) = project_pd(&design.clusters, est.rho1, est.rho2);
        r1 = a;
        r2 = b;
        projected = p;
        if acc.n_cross <= 0.0 && corr.kind == CorrelationKind::NestedExchangeable {
            warnings.push("no cross-period pairs; ρ1 set to 0".into());
        }
        if projected {
            // The shrunk values no longer solve the moment equations, so
            // they are carried as fixed.
            warnings.push(
                "moment estimate of the working correlation was shrunk to keep R positive definite"
                    .into(),
            );
            corr = WorkingCorrelation {
                kind: corr.kind,
                rho1: r1,
                rho2: r2,
                estimate: false,
            };
            params = ParamLayout {
                k,
                n_rho: 0,
                has_phi: false,
            };
        }
    }
    let engine = Engine {
        clusters: &design.clusters,
        link,
        corr,
        params,
    };

    let mut theta = beta.clone();
    match params.n_rho {
        2 => theta.extend([r1, r2]),
        1 => theta.push(r2),
        _ => {}
    }
    if params.has_phi {
        theta.push(phi);
    }
    let p = params.len();
    let mut scores = Vec::with_capacity(design.clusters.len());
    let mut buf = vec![0.0; p];
    for c in &design.clusters {
        engine.cluster_psi(c, &theta, &mut buf)?;
        scores.push(DVector::from_column_slice(&buf));
    }
    let total = |t: &[f64]| -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(p);
        let mut tmp = vec![0.0; p];
        for c in engine.clusters {
            engine.cluster_psi(c, t, &mut tmp)?;
            acc += DVector::from_column_slice(&tmp);
        }
        Ok(acc)
    };
    let jacobian = crate::stacked::numeric_jacobian(&theta, total)?;
    let b = scores
        .iter()
        .fold(DMatrix::zeros(p, p), |a, s| a + s * s.transpose());
    let sandwich_cov = sandwich(&jacobian, &b)?;
    Ok(GeeFit {
        layout,
        link,
        correlation: corr,
        beta: DVector::from_vec(beta),
        rho: (r1, r2),
        dispersion: phi,
        converged,
        iterations,
        condition,
        warnings,
        rho_projected: projected,
        scores,
        jacobian,
        sandwich_cov,
        n_obs,
        n_periods,
        design,
    })
}

impl GeeFit {
    pub fn spec(&self) -> TreatmentEffectSpec {
        self.layout.spec
    }

    pub fn n_clusters(&self) -> usize {
        self.design.clusters.len()
    }

    pub(crate) fn param_layout(&self) -> ParamLayout {
        ParamLayout {
            k: self.layout.n_cols(),
            n_rho: self.correlation.n_free(),
            has_phi: self.correlation.estimate
                && self.correlation.n_free() > 0
                && self.link == Link::Identity,
        }
    }

    pub(crate) fn engine(&self) -> Engine<'_> {
        Engine {
            clusters: &self.design.clusters,
            link: self.link,
            corr: self.correlation,
            params: self.param_layout(),
        }
    }

    /// (β̂, free ρ̂, φ̂).
    pub fn theta(&self) -> DVector<f64> {
        let mut t: Vec<f64> = self.beta.iter().copied().collect();
        match self.correlation.n_free() {
            2 => t.extend([self.rho.0, self.rho.1]),
            1 => t.push(self.rho.1),
            _ => {}
        }
        if self.param_layout().has_phi {
            t.push(self.dispersion);
        }
        DVector::from_vec(t)
    }

    pub(crate) fn provenance(&self) -> Provenance {
        let mut notes = self.warnings.clone();
        if self.correlation.kind != CorrelationKind::Independence {
            notes.push(format!(
                "working correlation ρ1 = {:.4}, ρ2 = {:.4}",
                self.rho.0, self.rho.1
            ));
        }
        Provenance {
            estimator: "gee".into(),
            correlation: self.correlation.kind.name().into(),
            link: self.link.name().into(),
            covariates: self.layout.covariate_names.clone(),
            data_fingerprint: None,
            n_clusters: self.n_clusters(),
            n_obs: self.n_obs,
            n_periods: self.n_periods,
            retained_periods: self.layout.retained,
            converged: self.converged,
            boundary: self.rho_projected,
            notes,
        }
    }
}
