//! True marginal estimands of the benchmark designs.

use super::dgp::{beta_variance, expit, logit_c, DesignKind, DgpParams};
use crate::design_algebra::{
    summary_weights_with, StructureKind, SummaryKind, TreatmentEffectSpec,
};
use crate::report::Scale;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, ChiSquared, Distribution, Normal};
use rayon::prelude::*;
use std::sync::OnceLock;

const TRUTH_SEED: u64 = 0x5eed_c0de;
/// Clusters drawn for the binary design's plug-in truth.
pub const TRUTH_CLUSTERS: usize = 1_000_000;
/// Individuals drawn explicitly per cluster; the rest of the source
/// population enters only through its exact summary statistics.
const EXPLICIT: usize = 10;
const CHUNK: usize = 10_000;

/// Potential-outcome means E[Y_j(d)], indexed `[j − 1][d]` with d = 0 for
/// untreated.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialMeans(pub Vec<Vec<f64>>);

fn normal(var: f64) -> Normal<f64> {
    Normal::new(0.0, var.sqrt()).expect("valid variance")
}

fn chunk_sums(p: &DgpParams, chunk: usize, n_clusters: usize) -> Vec<Vec<f64>> {
    let jn = p.n_periods;
    let mut rng = ChaCha8Rng::seed_from_u64(TRUTH_SEED);
    rng.set_stream(chunk as u64 + 1);
    let mut acc: Vec<Vec<f64>> = (1..=jn).map(|j| vec![0.0; j + 1]).collect();
    let n_rest = p.source_size.saturating_sub(EXPLICIT);
    let n_exp = p.source_size.min(EXPLICIT);
    let f = normal(0.1);
    let bvar = if p.constant_effect {
        0.0
    } else {
        beta_variance(p.design)
    };
    let s = p.noise_scale;
    for _ in 0..n_clusters {
        let e2 = normal(0.025).sample(&mut rng);
        let alpha = s * normal(0.015).sample(&mut rng);
        let beta_i = s * normal(bvar).sample(&mut rng);
        let gamma: Vec<f64> = (0..jn).map(|_| s * normal(0.01).sample(&mut rng)).collect();
        let xs: Vec<[f64; 2]> = (0..n_exp)
            .map(|_| {
                [
                    f64::from(u8::from(rng.random::<f64>() < 0.05)),
                    e2 + f.sample(&mut rng),
                ]
            })
            .collect();
        let (mut sum1, mut sum2sq) = (0.0, 0.0);
        if n_rest > 0 {
            sum1 = Binomial::new(n_rest as u64, 0.05)
                .expect("p")
                .sample(&mut rng) as f64;
            let nr = n_rest as f64;
            let sf = normal(0.1 * nr).sample(&mut rng);
            let mut ssf = sf * sf / nr;
            if n_rest > 1 {
                ssf += 0.1 * ChiSquared::new(nr - 1.0).expect("df").sample(&mut rng);
            }
            sum2sq = nr * e2 * e2 + 2.0 * e2 * sf + ssf;
        }
        for x in &xs {
            sum1 += x[0];
            sum2sq += x[1] * x[1];
        }
        let means = [sum1 / p.source_size as f64, sum2sq / p.source_size as f64];
        for x in &xs {
            for (j, row) in (1..=jn).zip(acc.iter_mut()) {
                for (d, slot) in row.iter_mut().enumerate() {
                    *slot += expit(logit_c(
                        j,
                        jn,
                        d,
                        *x,
                        means,
                        alpha + gamma[j - 1],
                        beta_i,
                        p.covariate_scale,
                    ));
                }
            }
        }
    }
    acc
}

/// Plug-in Monte Carlo of the binary design's potential-outcome means.
pub fn binary_means(p: &DgpParams, n_clusters: usize) -> PotentialMeans {
    let n_chunks = n_clusters.div_ceil(CHUNK);
    let parts: Vec<Vec<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| chunk_sums(p, c, CHUNK.min(n_clusters - c * CHUNK)))
        .collect();
    let total = (n_clusters * p.source_size.min(EXPLICIT)) as f64;
    let mut acc: Vec<Vec<f64>> = (1..=p.n_periods).map(|j| vec![0.0; j + 1]).collect();
    for part in parts {
        for (a, b) in acc.iter_mut().zip(part) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    PotentialMeans(
        acc.into_iter()
            .map(|r| r.into_iter().map(|v| v / total).collect())
            .collect(),
    )
}

static C1_MEANS: OnceLock<PotentialMeans> = OnceLock::new();
static C2_MEANS: OnceLock<PotentialMeans> = OnceLock::new();

/// Cached means for the default binary designs; other settings are
/// computed afresh.
pub fn binary_means_cached(p: &DgpParams) -> PotentialMeans {
    let default = DgpParams {
        clusters: p.clusters,
        ..DgpParams::new(p.design, p.clusters)
    };
    if *p == default {
        let cell = match p.design {
            DesignKind::C1 => &C1_MEANS,
            DesignKind::C2 => &C2_MEANS,
            _ => return binary_means(p, TRUTH_CLUSTERS),
        };
        return cell.get_or_init(|| binary_means(p, TRUTH_CLUSTERS)).clone();
    }
    binary_means(p, TRUTH_CLUSTERS)
}

/// Truth lookup for a generated design.
#[derive(Clone, Debug)]
pub struct Truth {
    design: DesignKind,
    binary: Option<PotentialMeans>,
}

impl Truth {
    pub fn for_params(p: &DgpParams) -> Self {
        Self {
            design: p.design,
            binary: p.design.is_binary().then(|| binary_means_cached(p)),
        }
    }

    /// Truth for a binary design from precomputed means.
    pub fn from_means(p: &DgpParams, means: PotentialMeans) -> Self {
        Self {
            design: p.design,
            binary: Some(means),
        }
    }

    /// Δ(d) for the continuous designs (duration `d` ≥ 1).
    fn continuous_effect(&self, d: usize) -> f64 {
        match self.design {
            DesignKind::B1 | DesignKind::B2 => (1.0 + d as f64) / 2.0,
            _ => 2.0,
        }
    }

    /// Component estimand at cell (period j, duration d) on the internal
    /// scale (log for ratios).
    fn cell(&self, j: Option<usize>, d: Option<usize>, scale: Scale) -> Option<f64> {
        match &self.binary {
            None => {
                if scale.is_ratio() {
                    return None;
                }
                match (self.design, d) {
                    (DesignKind::A1 | DesignKind::A2, _) => Some(2.0),
                    (_, Some(d)) => Some(self.continuous_effect(d)),
                    _ => None,
                }
            }
            Some(m) => {
                let (j, d) = (j?, d?);
                let row = m.0.get(j - 1)?;
                let (m1, m0) = (*row.get(d)?, row[0]);
                Some(match scale {
                    Scale::Difference => m1 - m0,
                    Scale::RiskRatio => m1.ln() - m0.ln(),
                    Scale::OddsRatio => (m1 / (1.0 - m1)).ln() - (m0 / (1.0 - m0)).ln(),
                })
            }
        }
    }

    /// True value of every component on the reported scale.
    pub fn components(
        &self,
        spec: &TreatmentEffectSpec,
        retained: usize,
        scale: Scale,
    ) -> Vec<Option<f64>> {
        self.internal(spec, retained, scale)
            .into_iter()
            .map(|v| v.map(|x| if scale.is_ratio() { x.exp() } else { x }))
            .collect()
    }

    fn internal(
        &self,
        spec: &TreatmentEffectSpec,
        retained: usize,
        scale: Scale,
    ) -> Vec<Option<f64>> {
        let n = spec.n_treatment_with(retained);
        if spec.kind == StructureKind::Constant {
            // A constant working model on the continuous designs targets the
            // average effect, 2 in every scenario.
            return vec![if self.binary.is_none() && !scale.is_ratio() {
                Some(2.0)
            } else {
                None
            }];
        }
        (0..n)
            .map(|k| {
                let (j, d) = spec.coefficient_cell(k, retained);
                match spec.kind {
                    StructureKind::Period if self.binary.is_none() => match self.design {
                        DesignKind::A1 | DesignKind::A2 if !scale.is_ratio() => Some(2.0),
                        _ => None,
                    },
                    StructureKind::Period => None,
                    _ => self.cell(j, d, scale),
                }
            })
            .collect()
    }

    /// True value of a weighted summary on the reported scale.
    pub fn summary(
        &self,
        kind: &SummaryKind,
        spec: &TreatmentEffectSpec,
        retained: usize,
        scale: Scale,
    ) -> Option<f64> {
        let w = summary_weights_with(kind, spec, retained).ok()?;
        let comps = self.internal(spec, retained, scale);
        let mut total = 0.0;
        for (wk, c) in w.iter().zip(comps) {
            total += wk * c?;
        }
        Some(if scale.is_ratio() { total.exp() } else { total })
    }
}
