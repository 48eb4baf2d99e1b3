//! Working linear mixed model fitted by maximum likelihood.
//!
//! Every per-cluster quantity is computed from sufficient statistics
//! (QᵀQ, QᵀY, YᵀY and per-period column sums), so a likelihood or score
//! evaluation costs O(J·k²) per cluster regardless of cluster size.
//!
//! The parameter vector is θ = (β, free variance components), the free
//! components being σ² and, depending on the structure, τ² and κ².

use crate::data_model::{RandomizationSpec, TrialData};
use crate::design_algebra::{
    summary_weights_with, Adjustment, ClusterDesign, DesignLayout, ModelDesign, StructureKind,
    SummaryKind, TreatmentEffectSpec,
};
use crate::error::{Error, Result};
use crate::linalg::{first_dependent_column, sandwich, spd_inverse, spd_solve, symmetrize};
use crate::report::{weighted_row, EstimandReport, EstimateRow, LrtResult, Provenance, Scale};
use crate::structured_cov::{logdet_from_parts, StructuredInverse, VarianceComponents};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const VC_FLOOR: f64 = 1e-10;
const START_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovStructure {
    Independence,
    Exchangeable,
    NestedExchangeable,
}

impl CovStructure {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independence" | "ind" => Ok(Self::Independence),
            "exchangeable" | "exch" => Ok(Self::Exchangeable),
            "nested" | "nested_exchangeable" => Ok(Self::NestedExchangeable),
            other => Err(Error::InvalidArgument(format!(
                "unknown correlation `{other}`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Independence => "independence",
            Self::Exchangeable => "exchangeable",
            Self::NestedExchangeable => "nested",
        }
    }

    /// Number of free variance components.
    pub fn n_free(self) -> usize {
        match self {
            Self::Independence => 1,
            Self::Exchangeable => 2,
            Self::NestedExchangeable => 3,
        }
    }

    pub fn component_names(self) -> &'static [&'static str] {
        &["sigma2", "tau2", "kappa2"][..self.n_free()]
    }

    /// (σ², τ², κ²) from the free components, pinning the rest at 0.
    pub(crate) fn expand(self, free: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        out[..self.n_free()].copy_from_slice(&free[..self.n_free()]);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmmOptions {
    pub adjustment: Adjustment,
    /// Fit only periods 1..=retained (defaults to the structure's own choice).
    pub retained: Option<usize>,
    /// Convergence threshold on the scaled score.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LmmOptions {
    fn default() -> Self {
        Self {
            adjustment: Adjustment::None,
            retained: None,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Per-cluster sufficient statistics.
#[derive(Clone, Debug)]
pub(crate) struct ClusterStats {
    pub z: usize,
    pub n: Vec<usize>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub yy: f64,
    /// Column sums of Q over each period block.
    pub s: Vec<DVector<f64>>,
    /// Outcome sums over each period block.
    pub t: Vec<f64>,
}

impl ClusterStats {
    pub fn new(c: &ClusterDesign) -> Self {
        let k = c.q.ncols();
        let jn = c.sizes.len();
        let mut s = vec![DVector::zeros(k); jn];
        let mut t = vec![0.0; jn];
        for (m, &j) in c.period.iter().enumerate() {
            s[j] += c.q.row(m).transpose();
            t[j] += c.y[m];
        }
        Self {
            z: c.adoption,
            n: c.sizes.clone(),
            g: c.q.tr_mul(&c.q),
            h: c.q.tr_mul(&c.y),
            yy: c.y.dot(&c.y),
            s,
            t,
        }
    }

    pub fn m(&self) -> usize {
        self.n.iter().sum()
    }

    fn inverse(&self, vc: [f64; 3]) -> Result<StructuredInverse<f64>> {
        StructuredInverse::from_parts(&self.n, vc[0], vc[1], vc[2])
    }

    /// (Σ r², period residual sums R_j).
    fn residuals(&self, beta: &DVector<f64>) -> (f64, Vec<f64>) {
        let gb = &self.g * beta;
        let rr = self.yy - 2.0 * beta.dot(&self.h) + beta.dot(&gb);
        let r = self
            .s
            .iter()
            .zip(&self.t)
            .map(|(s, t)| t - s.dot(beta))
            .collect();
        (rr, r)
    }

    fn loaded_cols(&self, inv: &StructuredInverse<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.g.nrows());
        for (j, s) in self.s.iter().enumerate() {
            acc.axpy(*inv.q(j), s, 1.0);
        }
        acc
    }

    /// Qᵀ V Q.
    fn qvq(&self, inv: &StructuredInverse<f64>) -> DMatrix<f64> {
        let mut out = &self.g * *inv.a();
        for (j, s) in self.s.iter().enumerate() {
            let b = *inv.b(j);
            if b != 0.0 {
                out.ger(-b, s, s, 1.0);
            }
        }
        let c = *inv.c();
        if c != 0.0 {
            let l = self.loaded_cols(inv);
            out.ger(-c, &l, &l, 1.0);
        }
        out
    }

    /// Qᵀ V Y.
    fn qvy(&self, inv: &StructuredInverse<f64>) -> DVector<f64> {
        let mut out = &self.h * *inv.a();
        let mut qt = 0.0;
        for (j, s) in self.s.iter().enumerate() {
            out.axpy(-*inv.b(j) * self.t[j], s, 1.0);
            qt += inv.q(j) * self.t[j];
        }
        let c = *inv.c();
        if c != 0.0 {
            out.axpy(-c * qt, &self.loaded_cols(inv), 1.0);
        }
        out
    }

    /// Exact Gaussian log-likelihood contribution.
    pub fn loglik(&self, beta: &DVector<f64>, vc: [f64; 3]) -> Result<f64> {
        let inv = self.inverse(vc)?;
        let (rr, r) = self.residuals(beta);
        let qbar: f64 = r.iter().enumerate().map(|(j, x)| inv.q(j) * x).sum();
        let quad = rr * inv.a()
            - r.iter()
                .enumerate()
                .map(|(j, x)| x * (inv.b(j) * x + inv.c() * inv.q(j) * qbar))
                .sum::<f64>();
        let logdet = logdet_from_parts(&self.n, vc[0], vc[1], vc[2])?;
        Ok(-0.5 * (self.m() as f64 * LN_2PI + logdet + quad))
    }

    /// Score ψ_i = ∂ℓ_i/∂θ written into `out` (β block then free components).
    pub fn score(
        &self,
        beta: &DVector<f64>,
        vc: [f64; 3],
        n_free: usize,
        out: &mut [f64],
    ) -> Result<()> {
        let inv = self.inverse(vc)?;
        let k = beta.len();
        let (rr, r) = self.residuals(beta);
        let a0 = *inv.a();
        let c = *inv.c();
        let qbar: f64 = r.iter().enumerate().map(|(j, x)| inv.q(j) * x).sum();
        let aj: Vec<f64> = r
            .iter()
            .enumerate()
            .map(|(j, x)| inv.b(j) * x + c * inv.q(j) * qbar)
            .collect();
        let mut sb = (&self.h - &self.g * beta) * a0;
        for (j, s) in self.s.iter().enumerate() {
            sb.axpy(-aj[j], s, 1.0);
        }
        out[..k].copy_from_slice(sb.as_slice());

        let nf: Vec<f64> = self.n.iter().map(|&n| n as f64).collect();
        let ar: f64 = aj.iter().zip(&r).map(|(a, x)| a * x).sum();
        let na2: f64 = aj.iter().zip(&nf).map(|(a, n)| n * a * a).sum();
        let vr2 = rr * a0 * a0 - 2.0 * a0 * ar + na2;
        let tr_v: f64 = (0..nf.len())
            .map(|j| nf[j] * (a0 - inv.b(j) - c * inv.q(j) * inv.q(j)))
            .sum();
        out[k] = -0.5 * tr_v + 0.5 * vr2;
        if n_free >= 2 {
            let w: Vec<f64> = (0..nf.len()).map(|j| r[j] * a0 - nf[j] * aj[j]).collect();
            let sum_w: f64 = w.iter().sum();
            let jn = nf.len();
            let mut one_v_one = 0.0;
            let mut diag_blocks = 0.0;
            for j in 0..jn {
                for l in 0..jn {
                    let v = inv.block_form(j, l);
                    one_v_one += v;
                    if j == l {
                        diag_blocks += v;
                    }
                }
            }
            out[k + 1] = -0.5 * one_v_one + 0.5 * sum_w * sum_w;
            if n_free >= 3 {
                let w2: f64 = w.iter().map(|x| x * x).sum();
                out[k + 2] = -0.5 * diag_blocks + 0.5 * w2;
            }
        }
        Ok(())
    }

    /// Column sums of Q over all rows.
    pub fn col_total(&self) -> DVector<f64> {
        self.s
            .iter()
            .fold(DVector::zeros(self.g.nrows()), |a, s| a + s)
    }
}

/// Profile likelihood over log variance components.
struct Profile<'a> {
    stats: &'a [ClusterStats],
    structure: CovStructure,
}

struct ProfilePoint {
    loglik: f64,
    grad_eta: DVector<f64>,
    beta: DVector<f64>,
}

impl Profile<'_> {
    fn vc(&self, eta: &DVector<f64>) -> [f64; 3] {
        let free: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        self.structure.expand(&free)
    }

    fn gls(&self, vc: [f64; 3]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let k = self.stats[0].g.nrows();
        let mut info = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for st in self.stats {
            let inv = st.inverse(vc)?;
            info += st.qvq(&inv);
            rhs += st.qvy(&inv);
        }
        symmetrize(&mut info);
        Ok((spd_solve(&info, &rhs)?, info))
    }

    fn eval(&self, eta: &DVector<f64>) -> Result<ProfilePoint> {
        let vc = self.vc(eta);
        let (beta, _) = self.gls(vc)?;
        let k = beta.len();
        let nf = self.structure.n_free();
        let mut loglik = 0.0;
        let mut grad = DVector::<f64>::zeros(nf);
        let mut buf = vec![0.0; k + nf];
        for st in self.stats {
            loglik += st.loglik(&beta, vc)?;
            st.score(&beta, vc, nf, &mut buf)?;
            for m in 0..nf {
                grad[m] += buf[k + m];
            }
        }
        let grad_eta = DVector::from_fn(nf, |m, _| grad[m] * vc[m]);
        Ok(ProfilePoint {
            loglik,
            grad_eta,
            beta,
        })
    }
}

/// Moment estimates of (σ², τ², κ²) from residuals, pooled over all pairs.
fn moment_start(stats: &[ClusterStats], beta: &DVector<f64>, structure: CovStructure) -> Vec<f64> {
    let (mut ss, mut n) = (0.0, 0.0);
    let (mut cross, mut n_cross) = (0.0, 0.0);
    let (mut within, mut n_within) = (0.0, 0.0);
    for st in stats {
        let (rr, r) = st.residuals(beta);
        let m = st.m() as f64;
        ss += rr;
        n += m;
        let total: f64 = r.iter().sum();
        let sq_blocks: f64 = r.iter().map(|x| x * x).sum();
        let nn: f64 = st.n.iter().map(|&x| (x * x) as f64).sum();
        cross += total * total - sq_blocks;
        n_cross += m * m - nn;
        // Within-block distinct pairs need Σ r² per block; approximate the
        // block share of Σ r² by its size fraction.
        for (j, &nj) in st.n.iter().enumerate() {
            if nj > 1 && m > 0.0 {
                within += r[j] * r[j] - rr * nj as f64 / m;
                n_within += (nj * (nj - 1)) as f64;
            }
        }
    }
    let s2 = ss / n.max(1.0);
    let floor = (START_FLOOR * s2).max(VC_FLOOR);
    let tau = if n_cross > 0.0 { cross / n_cross } else { 0.0 };
    let tk = if n_within > 0.0 {
        within / n_within
    } else {
        tau
    };
    let mut out = match structure {
        CovStructure::Independence => vec![s2],
        CovStructure::Exchangeable => vec![s2 - tk.max(0.0), tk],
        CovStructure::NestedExchangeable => vec![s2 - tk.max(0.0), tau, tk - tau],
    };
    for v in &mut out {
        *v = v.max(floor);
    }
    out
}

/// A converged working LMM.
#[derive(Clone, Debug)]
pub struct LmmFit {
    pub structure: CovStructure,
    pub layout: DesignLayout,
    pub beta: DVector<f64>,
    pub vc: VarianceComponents<f64>,
    pub loglik: f64,
    /// Per-cluster score contributions at θ̂.
    pub scores: Vec<DVector<f64>>,
    /// Σ_i ∂ψ_i/∂θ.
    pub jacobian: DMatrix<f64>,
    pub model_based_cov: DMatrix<f64>,
    pub sandwich_cov: DMatrix<f64>,
    pub converged: bool,
    pub boundary: bool,
    pub iterations: usize,
    /// max |θ_k ψ_k| / n_obs over the free components at the solution.
    pub score_norm: f64,
    pub n_obs: usize,
    pub n_periods: usize,
    pub randomization: RandomizationSpec,
    pub(crate) stats: Vec<ClusterStats>,
}

impl LmmFit {
    pub fn n_clusters(&self) -> usize {
        self.stats.len()
    }

    pub fn spec(&self) -> TreatmentEffectSpec {
        self.layout.spec
    }

    /// θ̂ = (β̂, free components).
    pub fn theta(&self) -> DVector<f64> {
        let vc = [self.vc.sigma2, self.vc.tau2, self.vc.kappa2];
        let nf = self.structure.n_free();
        DVector::from_iterator(
            self.beta.len() + nf,
            self.beta.iter().copied().chain(vc[..nf].iter().copied()),
        )
    }

    pub fn treatment_range(&self) -> std::ops::Range<usize> {
        let t0 = self.layout.treatment_offset();
        t0..t0 + self.layout.n_treatment()
    }

    pub fn treatment_coefficients(&self) -> Vec<f64> {
        self.treatment_range().map(|k| self.beta[k]).collect()
    }

    fn block(m: &DMatrix<f64>, r: std::ops::Range<usize>) -> DMatrix<f64> {
        m.view((r.start, r.start), (r.len(), r.len())).into_owned()
    }

    pub fn treatment_sandwich_cov(&self) -> DMatrix<f64> {
        Self::block(&self.sandwich_cov, self.treatment_range())
    }

    pub fn treatment_model_cov(&self) -> DMatrix<f64> {
        Self::block(&self.model_based_cov, self.treatment_range())
    }

    /// Per-cluster ψ at an arbitrary θ; used by stacked estimators.
    pub(crate) fn cluster_score(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()> {
        let k = self.beta.len();
        let beta = DVector::from_column_slice(&theta[..k]);
        let vc = self.structure.expand(&theta[k..]);
        if vc[0] <= 0.0 {
            return Err(Error::InvalidArgument("σ² must be positive".into()));
        }
        self.stats[i].score(&beta, vc, self.structure.n_free(), out)
    }

    pub(crate) fn provenance(&self) -> Provenance {
        Provenance {
            estimator: "lmm".into(),
            correlation: self.structure.name().into(),
            link: "identity".into(),
            covariates: self.layout.covariate_names.clone(),
            data_fingerprint: None,
            n_clusters: self.n_clusters(),
            n_obs: self.n_obs,
            n_periods: self.n_periods,
            retained_periods: self.layout.retained,
            converged: self.converged,
            boundary: self.boundary,
            notes: if self.boundary {
                vec![
                    "a variance component is at the boundary; sandwich inference reported anyway"
                        .into(),
                ]
            } else {
                Vec::new()
            },
        }
    }
}

pub fn fit_lmm(
    data: &TrialData,
    spec: TreatmentEffectSpec,
    structure: CovStructure,
    opts: &LmmOptions,
) -> Result<LmmFit> {
    data.ensure_fittable()?;
    let design = ModelDesign::build(data, spec, &opts.adjustment, opts.retained)?;
    fit_lmm_design(&design, data.n_periods, structure, opts)
}

pub fn fit_lmm_design(
    design: &ModelDesign,
    n_periods: usize,
    structure: CovStructure,
    opts: &LmmOptions,
) -> Result<LmmFit> {
    let layout = design.layout.clone();
    let k = layout.n_cols();
    if design.clusters.is_empty() {
        return Err(Error::InvalidArgument(
            "no clusters with retained records".into(),
        ));
    }
    let stats: Vec<ClusterStats> = design.clusters.iter().map(ClusterStats::new).collect();
    let n_obs = design.n_obs();
    let g_tot = stats.iter().fold(DMatrix::zeros(k, k), |a, s| a + &s.g);
    if let Some(col) = first_dependent_column(&g_tot, 1e-10) {
        return Err(Error::RankDeficient(layout.column_names()[col].clone()));
    }
    let h_tot = stats.iter().fold(DVector::zeros(k), |a, s| a + &s.h);
    let ols = spd_solve(&g_tot, &h_tot)?;
    let start = moment_start(&stats, &ols, structure);
    let scale_floor = VC_FLOOR.ln();

    let prof = Profile {
        stats: &stats,
        structure,
    };
    let nf = structure.n_free();
    let mut eta = DVector::from_iterator(nf, start.iter().map(|v| v.ln()));
    let mut cur = prof.eval(&eta)?;
    let nobs = n_obs.max(1) as f64;
    let mut converged = false;
    let mut iterations = 0;
    let mut norm = f64::INFINITY;
    while iterations < opts.max_iter {
        let at_floor: Vec<bool> = (0..nf)
            .map(|m| eta[m] <= scale_floor + 1e-12 && cur.grad_eta[m] < 0.0)
            .collect();
        let pg = DVector::from_fn(nf, |m, _| if at_floor[m] { 0.0 } else { cur.grad_eta[m] });
        norm = pg.amax() / nobs;
        if norm < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let h = 1e-4;
        let mut hess = DMatrix::zeros(nf, nf);
        for m in 0..nf {
            let mut up = eta.clone();
            up[m] += h;
            let mut dn = eta.clone();
            dn[m] -= h;
            let gu = prof.eval(&up)?.grad_eta;
            let gd = prof.eval(&dn)?.grad_eta;
            hess.set_column(m, &((gu - gd) / (2.0 * h)));
        }
        symmetrize(&mut hess);
        let mut neg = -hess;
        for m in 0..nf {
            if at_floor[m] {
                for l in 0..nf {
                    neg[(m, l)] = 0.0;
                    neg[(l, m)] = 0.0;
                }
                neg[(m, m)] = 1.0;
            }
        }
        let mut shift = 0.0;
        let step = loop {
            let mut trial = neg.clone();
            for m in 0..nf {
                trial[(m, m)] += shift;
            }
            if let Some(ch) = trial.cholesky() {
                break ch.solve(&pg);
            }
            shift = if shift == 0.0 {
                1e-6 * (1.0 + neg.amax())
            } else {
                shift * 10.0
            };
            if !shift.is_finite() {
                return Err(Error::NonConvergence {
                    iterations,
                    score_norm: norm,
                    last: start.clone(),
                });
            }
        };
        let cap = step.amax();
        let step = if cap > 3.0 { step * (3.0 / cap) } else { step };
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-10 {
            let cand = DVector::from_fn(nf, |m, _| (eta[m] + t * step[m]).max(scale_floor));
            if let Ok(p) = prof.eval(&cand) {
                if p.loglik >= cur.loglik - 1e-10 * (1.0 + cur.loglik.abs()) {
                    eta = cand;
                    cur = p;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        let last: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        return Err(Error::NonConvergence {
            iterations,
            score_norm: norm,
            last,
        });
    }
    let vc = prof.vc(&eta);
    let beta = cur.beta.clone();
    let fit = Fitted {
        beta,
        vc,
        loglik: cur.loglik,
        iterations,
        score_norm: norm,
    };
    finish_fit(
        layout,
        n_periods,
        design.randomization.clone(),
        structure,
        stats,
        fit,
        n_obs,
    )
}

struct Fitted {
    beta: DVector<f64>,
    vc: [f64; 3],
    loglik: f64,
    iterations: usize,
    score_norm: f64,
}

fn finish_fit(
    layout: DesignLayout,
    n_periods: usize,
    randomization: RandomizationSpec,
    structure: CovStructure,
    stats: Vec<ClusterStats>,
    fitted: Fitted,
    n_obs: usize,
) -> Result<LmmFit> {
    let Fitted {
        beta,
        vc,
        loglik,
        iterations,
        score_norm,
    } = fitted;
    let k = beta.len();
    let nf = structure.n_free();
    let p = k + nf;
    let mut scores = Vec::with_capacity(stats.len());
    let mut buf = vec![0.0; p];
    let mut info = DMatrix::zeros(k, k);
    for st in &stats {
        st.score(&beta, vc, nf, &mut buf)?;
        scores.push(DVector::from_column_slice(&buf));
        info += st.qvq(&st.inverse(vc)?);
    }
    symmetrize(&mut info);

    let total_score = |b: &DVector<f64>, v: [f64; 3]| -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(p);
        let mut tmp = vec![0.0; p];
        for st in &stats {
            st.score(b, v, nf, &mut tmp)?;
            acc += DVector::from_column_slice(&tmp);
        }
        Ok(acc)
    };
    let mut jac = DMatrix::zeros(p, p);
    jac.view_mut((0, 0), (k, k)).copy_from(&(-&info));
    let total_var = vc[0] + vc[1] + vc[2];
    for m in 0..nf {
        let h = 1e-6 * vc[m].max(1e-2 * total_var);
        let mut up = vc;
        up[m] += h;
        let col = if vc[m] - h > 0.0 {
            let mut dn = vc;
            dn[m] -= h;
            (total_score(&beta, up)? - total_score(&beta, dn)?) / (2.0 * h)
        } else {
            (total_score(&beta, up)? - total_score(&beta, vc)?) / h
        };
        jac.set_column(k + m, &col);
    }
    for m in 0..nf {
        for c in 0..k {
            jac[(k + m, c)] = jac[(c, k + m)];
        }
    }
    let mut vv = jac.view((k, k), (nf, nf)).into_owned();
    symmetrize(&mut vv);
    jac.view_mut((k, k), (nf, nf)).copy_from(&vv);

    let b = scores
        .iter()
        .fold(DMatrix::zeros(p, p), |a, s| a + s * s.transpose());
    let sandwich_cov = sandwich(&jac, &b)?;
    let mut model_based_cov = DMatrix::zeros(p, p);
    model_based_cov
        .view_mut((0, 0), (k, k))
        .copy_from(&spd_inverse(&info)?);
    if let Ok(iv) = spd_inverse(&(-vv)) {
        model_based_cov.view_mut((k, k), (nf, nf)).copy_from(&iv);
    }
    let boundary = vc[1..nf].iter().any(|&v| v <= 1e-8 * total_var);
    Ok(LmmFit {
        structure,
        layout,
        beta,
        vc: VarianceComponents {
            sigma2: vc[0],
            tau2: vc[1],
            kappa2: vc[2],
        },
        loglik,
        scores,
        jacobian: jac,
        model_based_cov,
        sandwich_cov,
        converged: true,
        boundary,
        iterations,
        score_norm,
        n_obs,
        n_periods,
        randomization,
        stats,
    })
}

/// Exact log-likelihood of cluster design `c` at (β, vc); for oracles.
pub fn cluster_loglik(
    c: &ClusterDesign,
    beta: &DVector<f64>,
    vc: &VarianceComponents<f64>,
) -> Result<f64> {
    ClusterStats::new(c).loglik(beta, [vc.sigma2, vc.tau2, vc.kappa2])
}

/// Analytic score of cluster design `c` at (β, vc) for the given structure.
pub fn lmm_score(
    c: &ClusterDesign,
    beta: &DVector<f64>,
    vc: &VarianceComponents<f64>,
    structure: CovStructure,
) -> Result<DVector<f64>> {
    if beta.len() != c.q.ncols() {
        return Err(Error::Dimension {
            expected: c.q.ncols(),
            got: beta.len(),
        });
    }
    let nf = structure.n_free();
    let mut out = vec![0.0; beta.len() + nf];
    ClusterStats::new(c).score(beta, [vc.sigma2, vc.tau2, vc.kappa2], nf, &mut out)?;
    Ok(DVector::from_vec(out))
}

/// Which weighted summary to add to a report.
#[derive(Clone, Debug, PartialEq)]
pub enum SummaryRequest {
    Fixed(SummaryKind),
    /// Weights V⁻¹1 / 1ᵀV⁻¹1, the minimum-variance combination with Σw = 1.
    MinVariance,
    /// Eigenvector of the smallest eigenvalue of V, rescaled to Σw = 1.
    MinEigen,
}

impl SummaryRequest {
    pub fn weights(
        &self,
        spec: &TreatmentEffectSpec,
        retained: usize,
        cov: &DMatrix<f64>,
    ) -> Result<Vec<f64>> {
        match self {
            Self::Fixed(kind) => summary_weights_with(kind, spec, retained),
            Self::MinVariance => min_variance_weights(cov),
            Self::MinEigen => min_eigen_weights(cov),
        }
    }

    pub fn label(&self, symbol: &str) -> String {
        match self {
            Self::Fixed(k) => k.label(symbol),
            Self::MinVariance => format!("{symbol}^min-var"),
            Self::MinEigen => format!("{symbol}^min-eig"),
        }
    }
}

pub fn min_variance_weights(cov: &DMatrix<f64>) -> Result<Vec<f64>> {
    let ones = DVector::from_element(cov.nrows(), 1.0);
    let x = spd_solve(cov, &ones)?;
    let s = x.sum();
    Ok(x.iter().map(|v| v / s).collect())
}

pub fn min_eigen_weights(cov: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = cov.clone().symmetric_eigen();
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::InvalidArgument("empty covariance".into()))?;
    let v = eig.eigenvectors.column(idx);
    let s = v.sum();
    if s.abs() < 1e-12 {
        return Err(Error::InvalidArgument(
            "smallest eigenvector sums to zero".into(),
        ));
    }
    Ok(v.iter().map(|x| x / s).collect())
}

/// Treatment coefficients as difference-scale estimands plus summaries.
pub fn extract_estimands(fit: &LmmFit, summaries: &[SummaryRequest]) -> Result<EstimandReport> {
    let spec = fit.spec();
    let labels = spec.labels(fit.layout.retained, Scale::Difference.symbol());
    let est = fit.treatment_coefficients();
    let vr = fit.treatment_sandwich_cov();
    let vm = fit.treatment_model_cov();
    let mut report = EstimandReport::new(spec.kind, Scale::Difference, fit.provenance());
    for (t, label) in labels.into_iter().enumerate() {
        report.components.push(EstimateRow::linear(
            label,
            est[t],
            vr[(t, t)].max(0.0).sqrt(),
            Some(vm[(t, t)].max(0.0).sqrt()),
        ));
    }
    for req in summaries {
        let w = req.weights(&spec, fit.layout.retained, &vr)?;
        if w.len() != est.len() {
            return Err(Error::Dimension {
                expected: est.len(),
                got: w.len(),
            });
        }
        report.summaries.push(weighted_row(
            req.label(Scale::Difference.symbol()),
            Scale::Difference,
            &w,
            &est,
            &vr,
            Some(&vm),
        ));
    }
    Ok(report)
}

fn nested(restricted: StructureKind, general: StructureKind) -> bool {
    use StructureKind::*;
    restricted == general
        || restricted == Constant
        || (matches!(restricted, Duration | Period) && general == Saturated)
}

/// Likelihood-ratio test of a restricted treatment structure against a
/// more general one fitted to the same rows.
pub fn lrt_structures(restricted: &LmmFit, general: &LmmFit) -> Result<LrtResult> {
    let (rk, gk) = (restricted.spec().kind, general.spec().kind);
    if !nested(rk, gk) {
        return Err(Error::InvalidArgument(format!(
            "{} structure is not nested in {}",
            rk.name(),
            gk.name()
        )));
    }
    if restricted.layout.retained != general.layout.retained {
        return Err(Error::InvalidArgument(format!(
            "restricted model fitted on {} periods, general on {}; refit the restricted model on periods 1..{}",
            restricted.layout.retained, general.layout.retained, general.layout.retained
        )));
    }
    if restricted.structure != general.structure
        || restricted.layout.covariate_names != general.layout.covariate_names
        || restricted.n_obs != general.n_obs
    {
        return Err(Error::InvalidArgument(
            "models differ in correlation structure, covariates or data".into(),
        ));
    }
    let df = general
        .layout
        .n_treatment()
        .saturating_sub(restricted.layout.n_treatment());
    let statistic = (-2.0 * (restricted.loglik - general.loglik)).max(0.0);
    let p_value = if df == 0 {
        1.0
    } else {
        ChiSquared::new(df as f64)
            .expect("positive df")
            .sf(statistic)
    };
    Ok(LrtResult {
        restricted: rk,
        general: gk,
        statistic,
        df,
        p_value,
        retained_periods: general.layout.retained,
    })
}

/// Fit both structures on the general structure's retained periods and test.
pub fn lrt_fit(
    data: &TrialData,
    restricted: StructureKind,
    general: StructureKind,
    structure: CovStructure,
    opts: &LmmOptions,
) -> Result<(LmmFit, LmmFit, LrtResult)> {
    let j = data.n_periods;
    let g = fit_lmm(data, TreatmentEffectSpec::new(general, j)?, structure, opts)?;
    let ropts = LmmOptions {
        retained: Some(g.layout.retained),
        ..opts.clone()
    };
    let r = fit_lmm(
        data,
        TreatmentEffectSpec::new(restricted, j)?,
        structure,
        &ropts,
    )?;
    let lrt = lrt_structures(&r, &g)?;
    Ok((r, g, lrt))
}
