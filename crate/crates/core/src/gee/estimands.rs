//! g-computation estimands with joint sandwich inference.
//!
//! The stacked parameter is θ = (estimands, μ_j(b) means, model parameters)
//! and every cluster contributes one row per parameter:
//!
//! * model rows: the working model's own estimating function;
//! * mean rows: M_i μ − Σ_k g⁻¹(β_0j + b + β_Xᵀ x_ik), pooling the enrolled
//!   individuals of all retained periods;
//! * estimand rows: λ-weighted (constant), Λ(d)-weighted (duration) or plain
//!   contrasts Δ_c − f(μ_j(β_c), μ_j(0)) (period and saturated).
//!
//! Ratio estimands are carried on the log scale.

use super::weights::{duration_weight_matrix, lambda_weights};
use super::{unit_residual, GeeFit};
use crate::data_model::RandomizationSpec;
use crate::design_algebra::{DesignLayout, StructureKind};
use crate::error::{Error, Result};
use crate::linalg::sandwich;
use crate::lmm::{LmmFit, SummaryRequest};
use crate::report::{weighted_row, EstimandReport, EstimateRow, Provenance, Scale};
use crate::stacked::numeric_jacobian;
use nalgebra::{DMatrix, DVector};

/// What a working model must expose to be standardized.
pub(crate) trait WorkingModel {
    fn layout(&self) -> &DesignLayout;
    fn randomization(&self) -> &RandomizationSpec;
    fn model_params(&self) -> DVector<f64>;
    fn n_clusters(&self) -> usize;
    fn cluster_m(&self, i: usize) -> usize;
    fn cluster_sizes(&self, i: usize) -> &[usize];
    fn adoption(&self, i: usize) -> usize;
    fn model_psi(&self, i: usize, params: &[f64], out: &mut [f64]) -> Result<()>;
    /// out[m] = Σ_k g⁻¹(bases[m] + β_Xᵀ x_ik) over cluster i's rows.
    fn g_sum(&self, i: usize, beta: &[f64], bases: &[f64], out: &mut [f64]);
    /// Working correlation rescaled to unit residual variance.
    fn weight_correlation(&self, params: &[f64]) -> (f64, f64);
    fn provenance(&self) -> Provenance;
}

impl WorkingModel for GeeFit {
    fn layout(&self) -> &DesignLayout {
        &self.layout
    }
    fn randomization(&self) -> &RandomizationSpec {
        &self.design.randomization
    }
    fn model_params(&self) -> DVector<f64> {
        self.theta()
    }
    fn n_clusters(&self) -> usize {
        self.design.clusters.len()
    }
    fn cluster_m(&self, i: usize) -> usize {
        self.design.clusters[i].n_rows()
    }
    fn cluster_sizes(&self, i: usize) -> &[usize] {
        &self.design.clusters[i].sizes
    }
    fn adoption(&self, i: usize) -> usize {
        self.design.clusters[i].adoption
    }
    fn model_psi(&self, i: usize, params: &[f64], out: &mut [f64]) -> Result<()> {
        self.engine()
            .cluster_psi(&self.design.clusters[i], params, out)
    }
    fn g_sum(&self, i: usize, beta: &[f64], bases: &[f64], out: &mut [f64]) {
        let c = &self.design.clusters[i];
        let c0 = self.layout.covariate_offset();
        let k = self.layout.n_cols();
        out.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..c.n_rows() {
            let xb: f64 = (c0..k).map(|col| c.q[(r, col)] * beta[col]).sum();
            for (o, b) in out.iter_mut().zip(bases) {
                *o += self.link.inverse(b + xb);
            }
        }
    }
    fn weight_correlation(&self, params: &[f64]) -> (f64, f64) {
        let (r1, r2, _) = self.engine().nuisance(params);
        unit_residual(r1, r2)
    }
    fn provenance(&self) -> Provenance {
        GeeFit::provenance(self)
    }
}

impl WorkingModel for LmmFit {
    fn layout(&self) -> &DesignLayout {
        &self.layout
    }
    fn randomization(&self) -> &RandomizationSpec {
        &self.randomization
    }
    fn model_params(&self) -> DVector<f64> {
        self.theta()
    }
    fn n_clusters(&self) -> usize {
        self.stats.len()
    }
    fn cluster_m(&self, i: usize) -> usize {
        self.stats[i].m()
    }
    fn cluster_sizes(&self, i: usize) -> &[usize] {
        &self.stats[i].n
    }
    fn adoption(&self, i: usize) -> usize {
        self.stats[i].z
    }
    fn model_psi(&self, i: usize, params: &[f64], out: &mut [f64]) -> Result<()> {
        self.cluster_score(i, params, out)
    }
    fn g_sum(&self, i: usize, beta: &[f64], bases: &[f64], out: &mut [f64]) {
        let st = &self.stats[i];
        let c0 = self.layout.covariate_offset();
        let tot = st.col_total();
        let xb: f64 = (c0..self.layout.n_cols())
            .map(|col| tot[col] * beta[col])
            .sum();
        let m = st.m() as f64;
        for (o, b) in out.iter_mut().zip(bases) {
            *o = m * b + xb;
        }
    }
    fn weight_correlation(&self, params: &[f64]) -> (f64, f64) {
        let k = self.beta.len();
        let vc = self.structure.expand(&params[k..]);
        (vc[1] / vc[0], vc[2] / vc[0])
    }
    fn provenance(&self) -> Provenance {
        let mut p = LmmFit::provenance(self);
        p.estimator = "lmm-g".into();
        p
    }
}

/// A standardized mean μ_j(b): period `j` (0-based) with treatment
/// coefficient `coef` switched on, or none.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct MuKey {
    period: usize,
    coef: Option<usize>,
}

struct Stack<'a, M: WorkingModel> {
    model: &'a M,
    kind: StructureKind,
    scale: Scale,
    retained: usize,
    n_est: usize,
    keys: Vec<MuKey>,
    cum: Vec<f64>,
    probs: Vec<f64>,
}

impl<'a, M: WorkingModel> Stack<'a, M> {
    fn new(model: &'a M, scale: Scale) -> Result<Self> {
        let layout = model.layout();
        let kind = layout.spec.kind;
        let retained = layout.retained;
        if scale.is_ratio() && matches!(kind, StructureKind::Constant | StructureKind::Duration) {
            return Err(Error::Unsupported(format!(
                "ratio estimands are not defined for the {} structure; use the saturated structure",
                kind.name()
            )));
        }
        let n_est = layout.n_treatment();
        let mut keys = Vec::new();
        let mut push = |k: MuKey| {
            if !keys.contains(&k) {
                keys.push(k);
            }
        };
        match kind {
            StructureKind::Constant => {
                for j in 0..retained {
                    push(MuKey {
                        period: j,
                        coef: Some(0),
                    });
                    push(MuKey {
                        period: j,
                        coef: None,
                    });
                }
            }
            StructureKind::Duration => {
                for j in 0..retained {
                    for d in 0..=j {
                        push(MuKey {
                            period: j,
                            coef: Some(d),
                        });
                    }
                    push(MuKey {
                        period: j,
                        coef: None,
                    });
                }
            }
            StructureKind::Period | StructureKind::Saturated => {
                for c in 0..n_est {
                    let (j, _) = layout.spec.coefficient_cell(c, retained);
                    let j = j.expect("period cell") - 1;
                    push(MuKey {
                        period: j,
                        coef: Some(c),
                    });
                    push(MuKey {
                        period: j,
                        coef: None,
                    });
                }
            }
        }
        let rand = model.randomization();
        Ok(Self {
            model,
            kind,
            scale,
            retained,
            n_est,
            keys,
            cum: rand.cumulative[..retained].to_vec(),
            probs: rand.probs[..retained].to_vec(),
        })
    }

    fn n_mu(&self) -> usize {
        self.keys.len()
    }

    fn dim(&self) -> usize {
        self.n_est + self.n_mu() + self.model.model_params().len()
    }

    fn key_index(&self, period: usize, coef: Option<usize>) -> usize {
        self.keys
            .iter()
            .position(|k| k.period == period && k.coef == coef)
            .expect("registered mean")
    }

    fn bases(&self, beta: &[f64]) -> Vec<f64> {
        let t0 = self.model.layout().treatment_offset();
        self.keys
            .iter()
            .map(|k| beta[k.period] + k.coef.map_or(0.0, |c| beta[t0 + c]))
            .collect()
    }

    /// f(μ1, μ0) on the internal scale.
    fn contrast(&self, mu1: f64, mu0: f64) -> Result<f64> {
        match self.scale {
            Scale::Difference => Ok(mu1 - mu0),
            Scale::RiskRatio => {
                if mu0 <= 0.0 || mu1 <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "risk ratio needs positive standardized means".into(),
                    ));
                }
                Ok(mu1.ln() - mu0.ln())
            }
            Scale::OddsRatio => {
                let ok = |m: f64| m > 0.0 && m < 1.0;
                if !(ok(mu1) && ok(mu0)) {
                    return Err(Error::InvalidArgument(
                        "odds ratio needs standardized means inside (0, 1)".into(),
                    ));
                }
                Ok((mu1 / (1.0 - mu1)).ln() - (mu0 / (1.0 - mu0)).ln())
            }
        }
    }

    /// Standardized means at the given model parameters.
    fn means(&self, params: &[f64]) -> Vec<f64> {
        let k = self.model.layout().n_cols();
        let bases = self.bases(&params[..k]);
        let mut acc = vec![0.0; bases.len()];
        let mut buf = vec![0.0; bases.len()];
        let mut m_total = 0.0;
        for i in 0..self.model.n_clusters() {
            self.model.g_sum(i, &params[..k], &bases, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
            m_total += self.model.cluster_m(i) as f64;
        }
        acc.iter().map(|a| a / m_total).collect()
    }

    /// Column index z + d − 1 (0-based) hit by duration d in cluster i.
    fn duration_column(&self, z: usize, d: usize) -> Option<usize> {
        let col = z + d - 1;
        (col >= 1 && col <= self.retained).then(|| col - 1)
    }

    /// Closed-form estimands given the means.
    fn estimands(&self, params: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
        let diff =
            |j: usize, c: usize| mu[self.key_index(j, Some(c))] - mu[self.key_index(j, None)];
        match self.kind {
            StructureKind::Constant => {
                let (r1, r2) = self.model.weight_correlation(params);
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..self.model.n_clusters() {
                    let lam = lambda_weights(self.model.cluster_sizes(i), &self.cum, r1, r2);
                    for (j, l) in lam.iter().enumerate() {
                        num += l * diff(j, 0);
                        den += l;
                    }
                }
                if den.abs() < 1e-300 {
                    return Err(Error::InvalidArgument("period weights sum to zero".into()));
                }
                Ok(vec![num / den])
            }
            StructureKind::Duration => {
                let (r1, r2) = self.model.weight_correlation(params);
                let r = self.retained;
                let mut lhs = DMatrix::zeros(r, r);
                let mut rhs = DVector::zeros(r);
                for i in 0..self.model.n_clusters() {
                    let z = self.model.adoption(i);
                    let sizes = self.model.cluster_sizes(i);
                    for d in 1..=r {
                        let Some(jc) = self.duration_column(z, d) else {
                            continue;
                        };
                        let w = duration_weight_matrix(z, sizes, &self.probs, r1, r2, d);
                        let m = diff(jc, d - 1);
                        for e in 0..r {
                            lhs[(e, d - 1)] += w[e][jc];
                            rhs[e] += w[e][jc] * m;
                        }
                    }
                }
                let sol = lhs.lu().solve(&rhs).ok_or_else(|| {
                    Error::InvalidArgument("duration weight matrix is singular".into())
                })?;
                Ok(sol.iter().copied().collect())
            }
            StructureKind::Period | StructureKind::Saturated => (0..self.n_est)
                .map(|c| {
                    let j = self.keys[self.key_index_for_coef(c)].period;
                    self.contrast(mu[self.key_index(j, Some(c))], mu[self.key_index(j, None)])
                })
                .collect(),
        }
    }

    fn key_index_for_coef(&self, c: usize) -> usize {
        self.keys
            .iter()
            .position(|k| k.coef == Some(c))
            .expect("registered mean")
    }

    /// ψ_i(θ).
    fn psi(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()> {
        let ne = self.n_est;
        let nm = self.n_mu();
        let est = &theta[..ne];
        let mu = &theta[ne..ne + nm];
        let params = &theta[ne + nm..];
        self.model.model_psi(i, params, &mut out[ne + nm..])?;
        let k = self.model.layout().n_cols();
        let bases = self.bases(&params[..k]);
        let mut sums = vec![0.0; nm];
        self.model.g_sum(i, &params[..k], &bases, &mut sums);
        let m_i = self.model.cluster_m(i) as f64;
        for r in 0..nm {
            out[ne + r] = m_i * mu[r] - sums[r];
        }
        let diff =
            |j: usize, c: usize| mu[self.key_index(j, Some(c))] - mu[self.key_index(j, None)];
        match self.kind {
            StructureKind::Constant => {
                let (r1, r2) = self.model.weight_correlation(params);
                let lam = lambda_weights(self.model.cluster_sizes(i), &self.cum, r1, r2);
                out[0] = lam
                    .iter()
                    .enumerate()
                    .map(|(j, l)| l * (est[0] - diff(j, 0)))
                    .sum();
            }
            StructureKind::Duration => {
                let (r1, r2) = self.model.weight_correlation(params);
                let z = self.model.adoption(i);
                let sizes = self.model.cluster_sizes(i);
                out[..ne].iter_mut().for_each(|v| *v = 0.0);
                for d in 1..=self.retained {
                    let Some(jc) = self.duration_column(z, d) else {
                        continue;
                    };
                    let w = duration_weight_matrix(z, sizes, &self.probs, r1, r2, d);
                    let gap = est[d - 1] - diff(jc, d - 1);
                    for e in 0..ne {
                        out[e] += w[e][jc] * gap;
                    }
                }
            }
            StructureKind::Period | StructureKind::Saturated => {
                for c in 0..ne {
                    let j = self.keys[self.key_index_for_coef(c)].period;
                    let f =
                        self.contrast(mu[self.key_index(j, Some(c))], mu[self.key_index(j, None)])?;
                    out[c] = est[c] - f;
                }
            }
        }
        Ok(())
    }

    fn total(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let p = self.dim();
        let mut acc = DVector::zeros(p);
        let mut buf = vec![0.0; p];
        for i in 0..self.model.n_clusters() {
            self.psi(i, theta, &mut buf)?;
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        Ok(acc)
    }
}

/// Solved stacked estimator.
#[derive(Clone, Debug)]
pub struct StackedEstimates {
    pub report: EstimandReport,
    /// (estimands on the internal scale, means, model parameters).
    pub theta: DVector<f64>,
    /// Σ_i ψ_i(θ̂); zero up to the model's convergence tolerance.
    pub psi_total: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub n_estimands: usize,
    pub n_means: usize,
}

impl StackedEstimates {
    /// Internal-scale estimands (log for ratios).
    pub fn estimands(&self) -> Vec<f64> {
        self.theta.iter().take(self.n_estimands).copied().collect()
    }

    pub fn estimand_cov(&self) -> DMatrix<f64> {
        self.cov
            .view((0, 0), (self.n_estimands, self.n_estimands))
            .into_owned()
    }
}

fn run<M: WorkingModel>(
    model: &M,
    scale: Scale,
    summaries: &[SummaryRequest],
) -> Result<StackedEstimates> {
    let stack = Stack::new(model, scale)?;
    let params = model.model_params();
    let mu = stack.means(params.as_slice());
    let est = stack.estimands(params.as_slice(), &mu)?;
    let theta: Vec<f64> = est
        .iter()
        .chain(&mu)
        .chain(params.iter())
        .copied()
        .collect();
    let psi_total = stack.total(&theta)?;
    let p = theta.len();
    let jacobian = numeric_jacobian(&theta, |t| stack.total(t))?;
    let mut b = DMatrix::zeros(p, p);
    let mut buf = vec![0.0; p];
    for i in 0..model.n_clusters() {
        stack.psi(i, &theta, &mut buf)?;
        let v = DVector::from_column_slice(&buf);
        b.ger(1.0, &v, &v, 1.0);
    }
    let cov = sandwich(&jacobian, &b)?;

    let layout = model.layout();
    let ne = stack.n_est;
    let spec = layout.spec;
    let labels = spec.labels(layout.retained, scale.symbol());
    let est_cov = cov.view((0, 0), (ne, ne)).into_owned();
    let mut report = EstimandReport::new(spec.kind, scale, model.provenance());
    for (c, label) in labels.into_iter().enumerate() {
        let se = est_cov[(c, c)].max(0.0).sqrt();
        report.components.push(if scale.is_ratio() {
            EstimateRow::from_log(label, est[c], se, None)
        } else {
            EstimateRow::linear(label, est[c], se, None)
        });
    }
    for req in summaries {
        let w = req.weights(&spec, layout.retained, &est_cov)?;
        if w.len() != ne {
            return Err(Error::Dimension {
                expected: ne,
                got: w.len(),
            });
        }
        report.summaries.push(weighted_row(
            req.label(scale.symbol()),
            scale,
            &w,
            &est,
            &est_cov,
            None,
        ));
    }
    Ok(StackedEstimates {
        report,
        theta: DVector::from_vec(theta),
        psi_total,
        jacobian,
        cov,
        n_estimands: ne,
        n_means: stack.n_mu(),
    })
}

/// Estimands from a GEE by g-computation, with the joint sandwich.
pub fn estimate_estimands_gee(
    fit: &GeeFit,
    scale: Scale,
    summaries: &[SummaryRequest],
) -> Result<StackedEstimates> {
    run(fit, scale, summaries)
}

/// Estimands from a working LMM by g-computation (identity link).
pub fn lmm_g_estimands(
    fit: &LmmFit,
    scale: Scale,
    summaries: &[SummaryRequest],
) -> Result<StackedEstimates> {
    run(fit, scale, summaries)
}

/// μ̂_j(b) for 1-based period `j`: the average over all enrolled individuals
/// of the retained periods of g⁻¹(β̂_0j + b + β̂_Xᵀ x).
pub fn g_compute_mu(fit: &GeeFit, j: usize, b: f64) -> Result<f64> {
    if j == 0 || j > fit.layout.retained {
        return Err(Error::InvalidArgument(format!(
            "period {j} is not among the fitted periods"
        )));
    }
    let beta = fit.beta.as_slice();
    let base = [beta[j - 1] + b];
    let mut buf = [0.0];
    let (mut acc, mut m) = (0.0, 0.0);
    for i in 0..WorkingModel::n_clusters(fit) {
        fit.g_sum(i, beta, &base, &mut buf);
        acc += buf[0];
        m += fit.cluster_m(i) as f64;
    }
    Ok(acc / m)
}
