//! Long-format trial data: records, per-cluster adoption times and the
//! randomization probabilities used by the period weights.
//!
//! A record exists exactly when an individual was enrolled and observed in a
//! cluster-period. Cluster-period sizes are always derived from the records.

use crate::error::{Error, Result};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

/// One enrolled individual in one cluster-period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub cluster: String,
    /// Calendar period, 1-based.
    pub period: usize,
    pub id: String,
    pub y: f64,
    pub x: Vec<f64>,
}

/// Per-cluster summary. `records` indexes into [`TrialData::records`] in
/// period order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterInfo {
    pub id: String,
    pub adoption_time: usize,
    pub period_sizes: Vec<usize>,
    pub records: Vec<usize>,
}

impl ClusterInfo {
    pub fn total(&self) -> usize {
        self.period_sizes.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilitySource {
    Design,
    Empirical,
}

/// Adoption-time probabilities π_j and their running sums π^s_j.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationSpec {
    pub probs: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub source: ProbabilitySource,
}

impl RandomizationSpec {
    /// Exact empirical adoption fractions I_j / I.
    pub fn exact_empirical(adoptions: &[usize], n_periods: usize) -> Result<Vec<Ratio<u64>>> {
        if adoptions.is_empty() {
            return Err(Error::InvalidArgument("no clusters".into()));
        }
        let mut counts = vec![0u64; n_periods];
        for &z in adoptions {
            if z == 0 || z > n_periods {
                return Err(Error::InvalidArgument(format!(
                    "adoption time {z} out of range"
                )));
            }
            counts[z - 1] += 1;
        }
        let total = adoptions.len() as u64;
        Ok(counts.into_iter().map(|c| Ratio::new(c, total)).collect())
    }

    pub fn empirical(adoptions: &[usize], n_periods: usize) -> Result<Self> {
        let exact = Self::exact_empirical(adoptions, n_periods)?;
        let probs = exact.iter().map(ratio_to_f64).collect();
        let mut acc = Ratio::new(0u64, 1);
        let cumulative = exact
            .iter()
            .map(|p| {
                acc += *p;
                ratio_to_f64(&acc)
            })
            .collect();
        Ok(Self {
            probs,
            cumulative,
            source: ProbabilitySource::Empirical,
        })
    }

    /// Design probabilities; they must be positive and sum to one within 1e-9.
    pub fn design(probs: &[f64]) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least two design probabilities".into(),
            ));
        }
        if probs
            .iter()
            .any(|p| !(p.is_finite() && *p > 0.0 && *p < 1.0))
        {
            return Err(Error::InvalidArgument(
                "design probabilities must lie in (0,1)".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "design probabilities sum to {total}, not 1"
            )));
        }
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc.min(1.0));
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(Self {
            probs,
            cumulative,
            source: ProbabilitySource::Design,
        })
    }

    pub fn n_periods(&self) -> usize {
        self.probs.len()
    }
}

fn ratio_to_f64(r: &Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Column names used when reading a trial CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub cluster: String,
    pub period: String,
    pub id: String,
    pub outcome: String,
    pub adoption: String,
    /// Covariate columns; `None` takes every remaining column in file order.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            cluster: "cluster".into(),
            period: "period".into(),
            id: "id".into(),
            outcome: "y".into(),
            adoption: "z".into(),
            covariates: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    fn error(message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            message: message.into(),
        }
    }
    fn warning(message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            message: message.into(),
        }
    }
}

/// Observed stepped-wedge data.
#[derive(Clone, Debug)]
pub struct TrialData {
    pub records: Vec<ObsRecord>,
    pub clusters: BTreeMap<String, ClusterInfo>,
    pub n_periods: usize,
    pub covariate_names: Vec<String>,
    pub randomization: RandomizationSpec,
}

impl TrialData {
    /// Assemble and index records. The number of periods defaults to the
    /// largest period or adoption time seen.
    pub fn from_records(
        records: Vec<ObsRecord>,
        covariate_names: Vec<String>,
        adoption: &BTreeMap<String, usize>,
        n_periods: Option<usize>,
    ) -> Result<Self> {
        let max_seen = records
            .iter()
            .map(|r| r.period)
            .chain(adoption.values().copied())
            .max()
            .unwrap_or(0);
        let n_periods = n_periods.unwrap_or(max_seen);
        if n_periods < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 periods, got {n_periods}"
            )));
        }
        let p = covariate_names.len();
        let mut clusters: BTreeMap<String, ClusterInfo> = BTreeMap::new();
        for (id, &z) in adoption {
            if z == 0 || z > n_periods {
                return Err(Error::AdoptionOutOfRange {
                    cluster: id.clone(),
                    z: z as i64,
                    n_periods,
                });
            }
            clusters.insert(
                id.clone(),
                ClusterInfo {
                    id: id.clone(),
                    adoption_time: z,
                    period_sizes: vec![0; n_periods],
                    records: Vec::new(),
                },
            );
        }
        for (row, r) in records.iter().enumerate() {
            if r.period == 0 || r.period > n_periods {
                return Err(Error::PeriodOutOfRange {
                    row: row + 1,
                    period: r.period as i64,
                });
            }
            if r.x.len() != p {
                return Err(Error::Dimension {
                    expected: p,
                    got: r.x.len(),
                });
            }
            if !r.y.is_finite() {
                return Err(Error::NonFinite {
                    row: row + 1,
                    column: "outcome".into(),
                });
            }
            if r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    row: row + 1,
                    column: "covariate".into(),
                });
            }
            let info = clusters.get_mut(&r.cluster).ok_or_else(|| {
                Error::InvalidArgument(format!("cluster `{}` has no adoption time", r.cluster))
            })?;
            info.period_sizes[r.period - 1] += 1;
            info.records.push(row);
        }
        for info in clusters.values_mut() {
            info.records.sort_by_key(|&k| (records[k].period, k));
        }
        let z: Vec<usize> = clusters.values().map(|c| c.adoption_time).collect();
        let randomization = RandomizationSpec::empirical(&z, n_periods)?;
        Ok(Self {
            records,
            clusters,
            n_periods,
            covariate_names,
            randomization,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Replace the empirical probabilities by design probabilities.
    pub fn with_design_probabilities(mut self, probs: &[f64]) -> Result<Self> {
        if probs.len() != self.n_periods {
            return Err(Error::Dimension {
                expected: self.n_periods,
                got: probs.len(),
            });
        }
        self.randomization = RandomizationSpec::design(probs)?;
        Ok(self)
    }

    pub fn cluster_records<'a>(
        &'a self,
        c: &'a ClusterInfo,
    ) -> impl Iterator<Item = &'a ObsRecord> + 'a {
        c.records.iter().map(move |&k| &self.records[k])
    }

    /// Hex SHA-256 of the canonical CSV rendering.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        write_trial_csv_to(self, &mut buf).expect("writing to memory");
        let digest = Sha256::digest(&buf);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Error unless [`validate`] reports no error-level diagnostics.
    pub fn ensure_fittable(&self) -> Result<()> {
        let errs: Vec<String> = validate(self)
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| d.message)
            .collect();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Every invariant violation and warning found in `data`.
pub fn validate(data: &TrialData) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let j_max = data.n_periods;
    let rand = &data.randomization;
    if rand.probs.len() != j_max {
        out.push(Diagnostic::error(
            "randomization length differs from number of periods",
        ));
    }
    if data.clusters.values().all(|c| c.adoption_time == 1) && !data.clusters.is_empty() {
        out.push(Diagnostic::error(
            "no untreated contrast; positivity violated",
        ));
    } else {
        for (j, p) in rand.probs.iter().enumerate() {
            if *p <= 0.0 {
                out.push(Diagnostic::error(format!(
                    "no cluster adopts at period {}; positivity violated",
                    j + 1
                )));
            }
        }
    }
    if data.clusters.len() < 2 {
        out.push(Diagnostic::warning("fewer than two clusters"));
    }
    for c in data.clusters.values() {
        if c.total() == 0 {
            out.push(Diagnostic::error(format!(
                "cluster `{}` has no records",
                c.id
            )));
        }
    }
    let mut seen: HashSet<(&str, usize, &str)> = HashSet::new();
    let mut baseline: HashMap<(&str, &str), &[f64]> = HashMap::new();
    let mut dup_reported = false;
    let mut cov_reported = false;
    for r in &data.records {
        if r.period == 0 || r.period > j_max {
            out.push(Diagnostic::error(format!(
                "period out of range ({})",
                r.period
            )));
        }
        if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
            out.push(Diagnostic::error(format!(
                "non-finite value for `{}`",
                r.id
            )));
        }
        if !seen.insert((&r.cluster, r.period, &r.id)) && !dup_reported {
            dup_reported = true;
            out.push(Diagnostic::error(format!(
                "duplicate individual key `{}` in cluster `{}` period {}",
                r.id, r.cluster, r.period
            )));
        }
        match baseline.get(&(r.cluster.as_str(), r.id.as_str())) {
            Some(prev) if *prev != r.x.as_slice() && !cov_reported => {
                cov_reported = true;
                out.push(Diagnostic::error(format!(
                    "non-baseline covariate for individual `{}` in cluster `{}`",
                    r.id, r.cluster
                )));
            }
            Some(_) => {}
            None => {
                baseline.insert((&r.cluster, &r.id), &r.x);
            }
        }
    }
    for j in 0..j_max {
        if data
            .clusters
            .values()
            .all(|c| c.period_sizes.get(j).copied().unwrap_or(0) == 0)
        {
            out.push(Diagnostic::warning(format!(
                "period {} has no records",
                j + 1
            )));
        }
    }
    out
}

fn parse_int(s: &str, row: usize, column: &str) -> Result<i64> {
    let t = s.trim();
    if let Ok(v) = t.parse::<i64>() {
        return Ok(v);
    }
    match t.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.is_finite() => Ok(v as i64),
        _ => Err(Error::NonNumeric {
            row,
            column: column.into(),
            value: s.into(),
        }),
    }
}

fn parse_real(s: &str, row: usize, column: &str) -> Result<f64> {
    let v = s.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
        row,
        column: column.into(),
        value: s.into(),
    })?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            row,
            column: column.into(),
        })
    }
}

pub fn load_trial_csv(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<TrialData> {
    let file = std::fs::File::open(path)?;
    load_trial_csv_from(file, schema)
}

pub fn load_trial_csv_from<R: Read>(reader: R, schema: &ColumnMap) -> Result<TrialData> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.into()))
    };
    let c_cluster = find(&schema.cluster)?;
    let c_period = find(&schema.period)?;
    let c_y = find(&schema.outcome)?;
    let c_z = find(&schema.adoption)?;
    let c_id = headers.iter().position(|h| h == schema.id);
    let cov_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => {
            let fixed = [c_cluster, c_period, c_y, c_z];
            headers
                .iter()
                .enumerate()
                .filter(|(k, _)| !fixed.contains(k) && Some(*k) != c_id)
                .map(|(_, h)| h.to_string())
                .collect()
        }
    };
    let cov_cols = cov_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut adoption: BTreeMap<String, usize> = BTreeMap::new();
    let mut raw_z: BTreeMap<String, i64> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let cluster = field(c_cluster).to_string();
        let period = parse_int(field(c_period), row, &schema.period)?;
        if period < 1 {
            return Err(Error::PeriodOutOfRange { row, period });
        }
        let y = parse_real(field(c_y), row, &schema.outcome)?;
        let z = parse_int(field(c_z), row, &schema.adoption)?;
        match raw_z.get(&cluster) {
            Some(&prev) if prev != z => return Err(Error::InconsistentAdoption { cluster }),
            Some(_) => {}
            None => {
                raw_z.insert(cluster.clone(), z);
            }
        }
        let x = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&c, name)| parse_real(field(c), row, name))
            .collect::<Result<Vec<_>>>()?;
        let id = match c_id {
            Some(c) => field(c).to_string(),
            None => row.to_string(),
        };
        records.push(ObsRecord {
            cluster,
            period: period as usize,
            id,
            y,
            x,
        });
    }
    let max_period = records.iter().map(|r| r.period).max().unwrap_or(0);
    let max_z = raw_z.values().copied().max().unwrap_or(0).max(0) as usize;
    let n_periods = max_period.max(max_z);
    for (cluster, z) in raw_z {
        if z < 1 || z as usize > n_periods {
            return Err(Error::AdoptionOutOfRange {
                cluster,
                z,
                n_periods,
            });
        }
        adoption.insert(cluster, z as usize);
    }
    TrialData::from_records(records, cov_names, &adoption, Some(n_periods))
}

pub fn write_trial_csv(data: &TrialData, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trial_csv_to(data, file)
}

/// Writes `cluster, period, id, y, z, covariates...` in cluster/period order.
pub fn write_trial_csv_to<W: Write>(data: &TrialData, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "cluster".to_string(),
        "period".into(),
        "id".into(),
        "y".into(),
        "z".into(),
    ];
    header.extend(data.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for c in data.clusters.values() {
        for r in data.cluster_records(c) {
            let mut row = vec![
                r.cluster.clone(),
                r.period.to_string(),
                r.id.clone(),
                r.y.to_string(),
                c.adoption_time.to_string(),
            ];
            row.extend(r.x.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str =
        "cluster,period,id,y,z\nA,1,1,1.0,1\nA,2,1,2.0,1\nB,1,1,0.5,2\nB,2,1,1.5,2\n";

    #[test]
    fn tiny_csv_counts() {
        let d = load_trial_csv_from(TINY.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!(d.n_periods, 2);
        for c in d.clusters.values() {
            assert_eq!(c.period_sizes, vec![1, 1]);
        }
        assert_eq!(d.randomization.probs, vec![0.5, 0.5]);
        assert_eq!(d.randomization.cumulative, vec![0.5, 1.0]);
        assert!(validate(&d).is_empty());
    }

    #[test]
    fn period_zero_rejected() {
        let csv = "cluster,period,id,y,z\nA,0,1,1.0,1\n";
        let err = load_trial_csv_from(csv.as_bytes(), &ColumnMap::default()).unwrap_err();
        assert!(err.to_string().contains("period out of range"));
    }

    #[test]
    fn load_errors() {
        let missing = "cluster,period,id,y\nA,1,1,1.0\n";
        assert!(matches!(
            load_trial_csv_from(missing.as_bytes(), &ColumnMap::default()),
            Err(Error::MissingColumn(_))
        ));
        let bad_y = "cluster,period,id,y,z\nA,1,1,abc,1\n";
        assert!(matches!(
            load_trial_csv_from(bad_y.as_bytes(), &ColumnMap::default()),
            Err(Error::NonNumeric { .. })
        ));
        let inconsistent = "cluster,period,id,y,z\nA,1,1,1,1\nA,2,1,1,2\n";
        assert!(matches!(
            load_trial_csv_from(inconsistent.as_bytes(), &ColumnMap::default()),
            Err(Error::InconsistentAdoption { .. })
        ));
        let z_bad = "cluster,period,id,y,z\nA,1,1,1,0\nB,2,1,1,2\n";
        assert!(matches!(
            load_trial_csv_from(z_bad.as_bytes(), &ColumnMap::default()),
            Err(Error::AdoptionOutOfRange { .. })
        ));
    }

    #[test]
    fn all_adopt_at_one() {
        let csv = "cluster,period,id,y,z\nA,1,1,1,1\nA,2,1,1,1\nB,1,1,1,1\nB,2,1,1,1\n";
        let d = load_trial_csv_from(csv.as_bytes(), &ColumnMap::default()).unwrap();
        let diags = validate(&d);
        assert!(diags
            .iter()
            .any(|d| d.message.contains("no untreated contrast")));
        assert!(d.ensure_fittable().is_err());
    }

    #[test]
    fn changing_covariate_flagged() {
        let csv =
            "cluster,period,id,y,z,x\nA,1,1,1,1,0.5\nA,2,1,1,1,0.7\nB,1,1,1,2,0\nB,2,1,1,2,0\n";
        let d = load_trial_csv_from(csv.as_bytes(), &ColumnMap::default()).unwrap();
        assert!(validate(&d)
            .iter()
            .any(|d| d.message.contains("non-baseline covariate")));
    }

    #[test]
    fn round_trip() {
        let csv = "cluster,period,id,y,z,x1,x2\nB,2,7,0.1,2,1,2.5\nA,1,1,1e-3,1,0,3\nA,2,1,-2.25,1,0,3\nB,1,9,4,2,1,1\n";
        let d = load_trial_csv_from(csv.as_bytes(), &ColumnMap::default()).unwrap();
        let mut buf = Vec::new();
        write_trial_csv_to(&d, &mut buf).unwrap();
        let d2 = load_trial_csv_from(buf.as_slice(), &ColumnMap::default()).unwrap();
        let key = |d: &TrialData| {
            let mut v: Vec<String> = d.records.iter().map(|r| format!("{r:?}")).collect();
            v.sort();
            v
        };
        assert_eq!(key(&d), key(&d2));
        assert_eq!(d.fingerprint(), d2.fingerprint());
    }

    #[test]
    fn exact_empirical_sums_to_one() {
        let z = [1, 2, 3, 3, 2, 1, 1];
        let p = RandomizationSpec::exact_empirical(&z, 3).unwrap();
        let total = p.iter().fold(Ratio::new(0u64, 1), |a, b| a + b);
        assert_eq!(total, Ratio::new(1, 1));
        let spec = RandomizationSpec::empirical(&z, 3).unwrap();
        assert_eq!(*spec.cumulative.last().unwrap(), 1.0);
    }
}
