//! Data-generating processes for the benchmark designs.
//!
//! Every cluster owns a source population of `source_size` individuals with
//! fixed baseline covariates. In each period a simple random sample of
//! N_ij ~ U{size_min..size_max} of them is enrolled, their potential
//! outcomes are drawn, and the observed outcome is the one selected by the
//! cluster's adoption time.

use crate::data_model::{ObsRecord, TrialData};
use crate::error::{Error, Result};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignKind {
    A1,
    A2,
    B1,
    B2,
    C1,
    C2,
}

impl DesignKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A1" => Ok(Self::A1),
            "A2" => Ok(Self::A2),
            "B1" => Ok(Self::B1),
            "B2" => Ok(Self::B2),
            "C1" => Ok(Self::C1),
            "C2" => Ok(Self::C2),
            other => Err(Error::Config(format!("unknown design `{other}`"))),
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Self::C1 | Self::C2)
    }

    pub fn default_periods(self) -> usize {
        if self.is_binary() {
            3
        } else {
            5
        }
    }

    pub fn default_source_size(self) -> usize {
        if self.is_binary() {
            5000
        } else {
            1000
        }
    }

    pub fn covariate_names(self) -> Vec<String> {
        let n = if self.is_binary() { 2 } else { 4 };
        (1..=n).map(|k| format!("x{k}")).collect()
    }

    /// Covariates of the partial adjustment set, if the design has one.
    pub fn partial_covariates(self) -> Option<Vec<String>> {
        (!self.is_binary()).then(|| vec!["x1".to_string(), "x3".to_string()])
    }
}

/// Generator settings resolved from a study configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct DgpParams {
    pub design: DesignKind,
    pub clusters: usize,
    pub n_periods: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub source_size: usize,
    /// Remove covariate and cluster heterogeneity from the treatment effect.
    pub constant_effect: bool,
    /// Multiplier on every random term (cluster effects and errors).
    pub noise_scale: f64,
    /// Multiplier on the covariate terms of the outcome model.
    pub covariate_scale: f64,
}

impl DgpParams {
    pub fn new(design: DesignKind, clusters: usize) -> Self {
        Self {
            design,
            clusters,
            n_periods: design.default_periods(),
            size_min: 5,
            size_max: 50,
            source_size: design.default_source_size(),
            constant_effect: false,
            noise_scale: 1.0,
            covariate_scale: 1.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n_periods < 2 {
            return Err(Error::Config("need at least 2 periods".into()));
        }
        if self.clusters < self.n_periods {
            return Err(Error::Config(format!(
                "need at least one cluster per adoption time ({} clusters, {} periods)",
                self.clusters, self.n_periods
            )));
        }
        if !self.design.is_binary() && !self.clusters.is_multiple_of(self.n_periods) {
            return Err(Error::Config(format!(
                "design {:?} needs the number of clusters ({}) divisible by J = {}",
                self.design, self.clusters, self.n_periods
            )));
        }
        if self.size_min == 0 || self.size_min > self.size_max || self.size_max > self.source_size {
            return Err(Error::Config(
                "need 1 <= size_min <= size_max <= source_size".into(),
            ));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::Config(
                "noise_scale must be a nonnegative number".into(),
            ));
        }
        if !self.covariate_scale.is_finite() {
            return Err(Error::Config("covariate_scale must be finite".into()));
        }
        Ok(())
    }
}

fn normal(var: f64) -> Normal<f64> {
    Normal::new(0.0, var.sqrt()).expect("valid variance")
}

/// Adoption times with ⌈I/J⌉ or ⌊I/J⌋ clusters per period, earliest first,
/// randomly assigned to clusters.
pub fn assign_adoption<R: Rng>(clusters: usize, n_periods: usize, rng: &mut R) -> Vec<usize> {
    let mut z: Vec<usize> = (0..clusters)
        .map(|i| i * n_periods / clusters + 1)
        .collect();
    z.shuffle(rng);
    z
}

/// Mean-zero Gamma(1, √v) draw with variance `v`.
fn centered_gamma<R: Rng>(v: f64, rng: &mut R) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let scale = v.sqrt();
    Gamma::new(1.0, scale).expect("valid gamma").sample(rng) - scale
}

fn centered_poisson<R: Rng>(lambda: f64, rng: &mut R) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).expect("valid poisson").sample(rng) - lambda
}

/// One generated trial.
pub fn generate<R: Rng>(p: &DgpParams, rng: &mut R) -> Result<TrialData> {
    p.check()?;
    let z = assign_adoption(p.clusters, p.n_periods, rng);
    let names = p.design.covariate_names();
    let mut records = Vec::new();
    let mut adoption = BTreeMap::new();
    for (i, &zi) in z.iter().enumerate() {
        let id = format!("c{i:04}");
        adoption.insert(id.clone(), zi);
        if p.design.is_binary() {
            cluster_c(p, &id, zi, rng, &mut records);
        } else {
            cluster_ab(p, &id, zi, rng, &mut records);
        }
    }
    TrialData::from_records(records, names, &adoption, Some(p.n_periods))
}

fn enrolled<R: Rng>(p: &DgpParams, rng: &mut R) -> Vec<usize> {
    let n = rng.random_range(p.size_min..=p.size_max);
    let mut idx = index::sample(rng, p.source_size, n).into_vec();
    idx.sort_unstable();
    idx
}

fn cluster_ab<R: Rng>(p: &DgpParams, id: &str, z: usize, rng: &mut R, out: &mut Vec<ObsRecord>) {
    let n = p.source_size;
    let jn = p.n_periods as f64;
    let s = p.noise_scale;
    let cs = p.covariate_scale;
    let x1d = Bernoulli::new(0.5).expect("p");
    let x2d = Bernoulli::new(0.8).expect("p");
    let e3 = normal(0.1).sample(rng);
    let e4 = normal(0.1).sample(rng);
    let f3 = normal(0.4);
    let f4 = normal(0.9);
    let x: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            [
                f64::from(u8::from(x1d.sample(rng))),
                f64::from(u8::from(x2d.sample(rng))),
                e3 + f3.sample(rng),
                e4 + f4.sample(rng),
            ]
        })
        .collect();
    let mean1 = x.iter().map(|v| v[0]).sum::<f64>() / n as f64;
    let mean3c = x.iter().map(|v| v[2].powi(3)).sum::<f64>() / n as f64;
    let second = matches!(p.design, DesignKind::A2 | DesignKind::B2);
    let alpha = if second {
        s * centered_gamma(0.1, rng)
    } else {
        s * normal(0.1).sample(rng)
    };
    let beta_i = if second && !p.constant_effect {
        s * normal(0.25).sample(rng)
    } else {
        0.0
    };
    let eps = normal(0.9);
    let duration = matches!(p.design, DesignKind::B1 | DesignKind::B2);
    for j in 1..=p.n_periods {
        let jf = j as f64;
        let gamma_ij = if second {
            s * centered_gamma(0.1, rng)
        } else {
            0.0
        };
        let b0 = 0.25 + 0.004 * jf;
        for k in enrolled(p, rng) {
            let v = &x[k];
            let h1 = cs * (v[0] - mean1);
            let h3 = cs * (v[2].powi(3) - mean3c);
            let effect = if z > j {
                0.0
            } else if duration {
                let d = (j - z + 1) as f64;
                let het = if p.constant_effect {
                    0.0
                } else if second {
                    (jf + 1.0) * h1 / 8.0 + (jf + 1.0) * h3 / (4.0 * (jn + 1.0))
                } else {
                    h1 / 8.0 + h3 / 4.0
                };
                (1.0 + d) * (0.5 + het) + beta_i
            } else {
                let het = if p.constant_effect {
                    0.0
                } else if second {
                    (jf + 1.0) * h1 / 2.0 + (jf + 1.0) * h3 / (jn + 1.0)
                } else {
                    h1 / 2.0 + h3
                };
                2.0 + het + beta_i
            };
            let err = if second {
                s * centered_poisson(0.9, rng)
            } else {
                s * eps.sample(rng)
            };
            let cov =
                1.5 * (jf + 1.0) * v[0] + v[1] + 6.0 * (jf + 1.0) / (jn + 1.0) * v[2] * v[2] + v[3];
            let y = b0 + effect + cs * cov + alpha + gamma_ij + err;
            out.push(ObsRecord {
                cluster: id.to_string(),
                period: j,
                id: k.to_string(),
                y,
                x: v.to_vec(),
            });
        }
    }
}

/// Linear predictor of the binary design for duration `d` (0 = untreated).
#[allow(clippy::too_many_arguments)]
pub(crate) fn logit_c(
    j: usize,
    n_periods: usize,
    d: usize,
    x: [f64; 2],
    means: [f64; 2],
    cluster: f64,
    beta_i: f64,
    cs: f64,
) -> f64 {
    let jf = j as f64;
    let [x1, x2] = x;
    let mut eta = 0.08 + 0.02 * jf + cs * (x1 + jf / n_periods as f64 * x2 * x2) + cluster;
    if d > 0 {
        let df = d as f64;
        eta += 0.72
            + 0.18 * df
            + cs * (0.25 * (x1 - means[0]) + df / 10.0 * (x2 * x2 - means[1]))
            + beta_i;
    }
    eta
}

pub(crate) fn expit(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

pub(crate) fn beta_variance(design: DesignKind) -> f64 {
    if design == DesignKind::C1 {
        0.25
    } else {
        0.04
    }
}

fn cluster_c<R: Rng>(p: &DgpParams, id: &str, z: usize, rng: &mut R, out: &mut Vec<ObsRecord>) {
    let n = p.source_size;
    let s = p.noise_scale;
    let x1d = Bernoulli::new(0.05).expect("p");
    let e2 = normal(0.025).sample(rng);
    let f2 = normal(0.1);
    let x: Vec<[f64; 2]> = (0..n)
        .map(|_| [f64::from(u8::from(x1d.sample(rng))), e2 + f2.sample(rng)])
        .collect();
    let mean1 = x.iter().map(|v| v[0]).sum::<f64>() / n as f64;
    let mean2sq = x.iter().map(|v| v[1] * v[1]).sum::<f64>() / n as f64;
    let alpha = s * normal(0.015).sample(rng);
    let beta_i = if p.constant_effect {
        0.0
    } else {
        s * normal(beta_variance(p.design)).sample(rng)
    };
    for j in 1..=p.n_periods {
        let gamma = s * normal(0.01).sample(rng);
        let d = if z <= j { j - z + 1 } else { 0 };
        for k in enrolled(p, rng) {
            let v = &x[k];
            let eta = logit_c(
                j,
                p.n_periods,
                d,
                *v,
                [mean1, mean2sq],
                alpha + gamma,
                beta_i,
                p.covariate_scale,
            );
            let y = if rng.random::<f64>() < expit(eta) {
                1.0
            } else {
                0.0
            };
            out.push(ObsRecord {
                cluster: id.to_string(),
                period: j,
                id: k.to_string(),
                y,
                x: v.to_vec(),
            });
        }
    }
}
