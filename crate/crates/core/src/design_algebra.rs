//! Treatment-effect structures, design matrices and the indicator algebra
//! shared by both estimators.
//!
//! Columns are always ordered (period indicators, treatment, covariates).
//! Structures that cannot identify effects in the last period drop it during
//! design construction.

use crate::data_model::{ClusterInfo, RandomizationSpec, TrialData};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Constant,
    Duration,
    Period,
    Saturated,
}

impl StructureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Self::Constant),
            "duration" | "duration_specific" => Ok(Self::Duration),
            "period" | "period_specific" => Ok(Self::Period),
            "saturated" => Ok(Self::Saturated),
            other => Err(Error::InvalidArgument(format!(
                "unknown structure `{other}`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Duration => "duration",
            Self::Period => "period",
            Self::Saturated => "saturated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentEffectSpec {
    pub kind: StructureKind,
    pub n_periods: usize,
}

impl TreatmentEffectSpec {
    pub fn new(kind: StructureKind, n_periods: usize) -> Result<Self> {
        if n_periods < 2 {
            return Err(Error::InvalidArgument("need J >= 2".into()));
        }
        Ok(Self { kind, n_periods })
    }

    pub fn drops_last_period(&self) -> bool {
        matches!(self.kind, StructureKind::Period | StructureKind::Saturated)
    }

    /// Periods used for fitting by default.
    pub fn retained_periods(&self) -> usize {
        if self.drops_last_period() {
            self.n_periods - 1
        } else {
            self.n_periods
        }
    }

    pub fn n_treatment(&self) -> usize {
        self.n_treatment_with(self.retained_periods())
    }

    /// Coefficient count when only periods `1..=retained` are fitted.
    pub fn n_treatment_with(&self, retained: usize) -> usize {
        match self.kind {
            StructureKind::Constant => 1,
            StructureKind::Duration | StructureKind::Period => retained,
            StructureKind::Saturated => retained * (retained + 1) / 2,
        }
    }

    fn check_retained(&self, retained: usize) -> Result<()> {
        let max = self.retained_periods();
        if retained == 0 || retained > max {
            return Err(Error::InvalidArgument(format!(
                "{} structure cannot retain {retained} of {} periods",
                self.kind.name(),
                self.n_periods
            )));
        }
        Ok(())
    }

    /// Position of the single nonzero treatment entry, if any.
    pub fn treatment_position(&self, z: usize, j: usize, retained: usize) -> Result<Option<usize>> {
        if j == 0 || j > retained || z == 0 || z > self.n_periods {
            return Err(Error::InvalidArgument(format!(
                "period {j} / adoption {z} out of range for {} structure",
                self.kind.name()
            )));
        }
        if z > j {
            return Ok(None);
        }
        let d = j - z + 1;
        Ok(Some(match self.kind {
            StructureKind::Constant => 0,
            StructureKind::Duration => d - 1,
            StructureKind::Period => j - 1,
            StructureKind::Saturated => saturated_index(j, d, retained + 1)?,
        }))
    }

    /// Treatment block for adoption time `z` in period `j`.
    pub fn treatment_row(&self, z: usize, j: usize) -> Result<Vec<f64>> {
        let retained = self.retained_periods();
        let mut row = vec![0.0; self.n_treatment()];
        if let Some(k) = self.treatment_position(z, j, retained)? {
            row[k] = 1.0;
        }
        Ok(row)
    }

    /// Cell addressed by coefficient `k`: `(period, duration)`, with `None`
    /// where the coefficient spans all values.
    pub fn coefficient_cell(&self, k: usize, retained: usize) -> (Option<usize>, Option<usize>) {
        match self.kind {
            StructureKind::Constant => (None, None),
            StructureKind::Duration => (None, Some(k + 1)),
            StructureKind::Period => (Some(k + 1), None),
            StructureKind::Saturated => {
                let (j, d) = saturated_cell(k, retained + 1).expect("index in range");
                (Some(j), Some(d))
            }
        }
    }

    /// Labels such as `Δ`, `Δ(2)`, `Δ_3`, `Δ_2(1)` with the given symbol.
    pub fn labels(&self, retained: usize, symbol: &str) -> Vec<String> {
        (0..self.n_treatment_with(retained))
            .map(|k| match self.coefficient_cell(k, retained) {
                (None, None) => symbol.to_string(),
                (None, Some(d)) => format!("{symbol}({d})"),
                (Some(j), None) => format!("{symbol}_{j}"),
                (Some(j), Some(d)) => format!("{symbol}_{j}({d})"),
            })
            .collect()
    }
}

/// Flattened position of cell (j, d), 1 ≤ d ≤ j ≤ J−1, in the order
/// (1,1), (2,1), (2,2), (3,1), ...
pub fn saturated_index(j: usize, d: usize, n_periods: usize) -> Result<usize> {
    if d == 0 || d > j || j + 1 > n_periods {
        return Err(Error::InvalidArgument(format!(
            "saturated cell ({j},{d}) out of range for J={n_periods}"
        )));
    }
    Ok(j * (j - 1) / 2 + d - 1)
}

/// Inverse of [`saturated_index`].
pub fn saturated_cell(index: usize, n_periods: usize) -> Result<(usize, usize)> {
    let total = n_periods.saturating_sub(1) * n_periods / 2;
    if index >= total {
        return Err(Error::InvalidArgument(format!(
            "saturated index {index} out of range for J={n_periods}"
        )));
    }
    let mut j = 1;
    while j * (j + 1) / 2 <= index {
        j += 1;
    }
    Ok((j, index - j * (j - 1) / 2 + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    Davg,
    Pavg,
    Savg,
    Custom(Vec<f64>),
}

impl SummaryKind {
    pub fn label(&self, symbol: &str) -> String {
        match self {
            Self::Davg => format!("{symbol}^D-avg"),
            Self::Pavg => format!("{symbol}^P-avg"),
            Self::Savg => format!("{symbol}^S-avg"),
            Self::Custom(_) => format!("{symbol}^custom"),
        }
    }

    /// Default equal-weight summary for a structure, if it has one.
    pub fn default_for(kind: StructureKind) -> Option<Self> {
        match kind {
            StructureKind::Constant => None,
            StructureKind::Duration => Some(Self::Davg),
            StructureKind::Period => Some(Self::Pavg),
            StructureKind::Saturated => Some(Self::Savg),
        }
    }
}

/// Summary weights aligned with the coefficient order of `spec`.
pub fn summary_weights(kind: &SummaryKind, spec: &TreatmentEffectSpec) -> Result<Vec<f64>> {
    summary_weights_with(kind, spec, spec.retained_periods())
}

pub fn summary_weights_with(
    kind: &SummaryKind,
    spec: &TreatmentEffectSpec,
    retained: usize,
) -> Result<Vec<f64>> {
    let n = spec.n_treatment_with(retained);
    let expected = match kind {
        SummaryKind::Davg => Some(StructureKind::Duration),
        SummaryKind::Pavg => Some(StructureKind::Period),
        SummaryKind::Savg => Some(StructureKind::Saturated),
        SummaryKind::Custom(_) => None,
    };
    if let Some(k) = expected {
        if k != spec.kind {
            return Err(Error::InvalidArgument(format!(
                "summary {kind:?} needs the {} structure",
                k.name()
            )));
        }
        return Ok(vec![1.0 / n as f64; n]);
    }
    let SummaryKind::Custom(w) = kind else {
        unreachable!()
    };
    if w.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: w.len(),
        });
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "summary weights sum to {total}, not 1"
        )));
    }
    Ok(w.clone())
}

/// Covariates entering the working model linearly.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjustment {
    #[default]
    None,
    All,
    Covariates(Vec<String>),
}

impl Adjustment {
    pub fn resolve(&self, names: &[String]) -> Result<Vec<usize>> {
        match self {
            Self::None => Ok(Vec::new()),
            Self::All => Ok((0..names.len()).collect()),
            Self::Covariates(list) => {
                list.iter()
                    .map(|n| {
                        names.iter().position(|m| m == n).ok_or_else(|| {
                            Error::InvalidArgument(format!("unknown covariate `{n}`"))
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Column layout of a working-model design matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignLayout {
    pub spec: TreatmentEffectSpec,
    pub retained: usize,
    pub covariate_names: Vec<String>,
    /// Positions of the adjusted covariates in the data's covariate vector.
    pub covariate_source: Vec<usize>,
}

impl DesignLayout {
    pub fn n_treatment(&self) -> usize {
        self.spec.n_treatment_with(self.retained)
    }
    pub fn n_covariates(&self) -> usize {
        self.covariate_source.len()
    }
    pub fn n_cols(&self) -> usize {
        self.retained + self.n_treatment() + self.n_covariates()
    }
    pub fn treatment_offset(&self) -> usize {
        self.retained
    }
    pub fn covariate_offset(&self) -> usize {
        self.retained + self.n_treatment()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.retained).map(|j| format!("period_{j}")).collect();
        names.extend(self.spec.labels(self.retained, "trt"));
        names.extend(self.covariate_names.iter().cloned());
        names
    }
}

/// One cluster's fitted rows, sorted by period.
#[derive(Clone, Debug)]
pub struct ClusterDesign {
    pub id: String,
    pub adoption: usize,
    /// Sizes of the retained periods.
    pub sizes: Vec<usize>,
    pub q: DMatrix<f64>,
    pub y: DVector<f64>,
    /// 0-based period of each row.
    pub period: Vec<usize>,
}

impl ClusterDesign {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }
}

/// Design matrices for every cluster plus what the weights need.
#[derive(Clone, Debug)]
pub struct ModelDesign {
    pub layout: DesignLayout,
    pub clusters: Vec<ClusterDesign>,
    pub randomization: RandomizationSpec,
}

impl ModelDesign {
    pub fn build(
        data: &TrialData,
        spec: TreatmentEffectSpec,
        adjustment: &Adjustment,
        retained: Option<usize>,
    ) -> Result<Self> {
        if spec.n_periods != data.n_periods {
            return Err(Error::InvalidArgument(format!(
                "structure built for J={} but data has J={}",
                spec.n_periods, data.n_periods
            )));
        }
        let retained = retained.unwrap_or_else(|| spec.retained_periods());
        spec.check_retained(retained)?;
        let covariate_source = adjustment.resolve(&data.covariate_names)?;
        let layout = DesignLayout {
            spec,
            retained,
            covariate_names: covariate_source
                .iter()
                .map(|&k| data.covariate_names[k].clone())
                .collect(),
            covariate_source,
        };
        let clusters = data
            .clusters
            .values()
            .map(|c| build_cluster_design(data, c, &layout))
            .filter(|c| c.n_rows() > 0)
            .collect();
        Ok(Self {
            layout,
            clusters,
            randomization: data.randomization.clone(),
        })
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(|c| c.n_rows()).sum()
    }
}

/// Rows of Q_i for the enrolled individuals of the retained periods.
pub fn build_cluster_design(
    data: &TrialData,
    cluster: &ClusterInfo,
    layout: &DesignLayout,
) -> ClusterDesign {
    let rows: Vec<_> = data
        .cluster_records(cluster)
        .filter(|r| r.period <= layout.retained)
        .collect();
    let k = layout.n_cols();
    let mut q = DMatrix::zeros(rows.len(), k);
    let mut y = DVector::zeros(rows.len());
    let mut period = Vec::with_capacity(rows.len());
    let t0 = layout.treatment_offset();
    let c0 = layout.covariate_offset();
    for (m, r) in rows.iter().enumerate() {
        q[(m, r.period - 1)] = 1.0;
        if let Some(t) = layout
            .spec
            .treatment_position(cluster.adoption_time, r.period, layout.retained)
            .expect("validated period")
        {
            q[(m, t0 + t)] = 1.0;
        }
        for (c, &src) in layout.covariate_source.iter().enumerate() {
            q[(m, c0 + c)] = r.x[src];
        }
        y[m] = r.y;
        period.push(r.period - 1);
    }
    ClusterDesign {
        id: cluster.id.clone(),
        adoption: cluster.adoption_time,
        sizes: cluster.period_sizes[..layout.retained].to_vec(),
        q,
        y,
        period,
    }
}

/// Λ_Z^d: diagonal with entry j equal to I{Z = j − d + 1} for j ≥ d.
pub fn lambda_indicator(z: usize, d: usize, n_periods: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_periods, n_periods, |r, c| {
        let j = r + 1;
        if r == c && j >= d && z + d == j + 1 {
            1.0
        } else {
            0.0
        }
    })
}

/// Δ_Z = diag{I(Z ≤ j)}.
pub fn delta_indicator(z: usize, n_periods: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_periods, n_periods, |r, c| {
        if r == c && z <= r + 1 {
            1.0
        } else {
            0.0
        }
    })
}

/// H_Z with entry (j, d) equal to I{Z = j − d + 1}.
pub fn duration_indicator(z: usize, n_periods: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_periods, n_periods, |r, c| {
        if r >= c && z + c == r + 1 {
            1.0
        } else {
            0.0
        }
    })
}

/// E[H_Z] with entry (j, d) equal to π_{j−d+1}.
pub fn expected_duration_indicator(probs: &[f64]) -> DMatrix<f64> {
    let n = probs.len();
    DMatrix::from_fn(n, n, |r, c| if r >= c { probs[r - c] } else { 0.0 })
}

/// H_d: zero except for column d, which is all ones.
pub fn h_d(d: usize, n_periods: usize) -> DMatrix<f64> {
    DMatrix::from_fn(
        n_periods,
        n_periods,
        |_, c| if c + 1 == d { 1.0 } else { 0.0 },
    )
}

/// Enrollment of a cluster: for each period, the positions (out of a source
/// population of `n_source`) that were observed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionStructure {
    pub n_source: usize,
    pub enrolled: Vec<Vec<usize>>,
}

impl SelectionStructure {
    pub fn new(n_source: usize, enrolled: Vec<Vec<usize>>) -> Result<Self> {
        for per in &enrolled {
            let mut s = per.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != per.len() || s.last().is_some_and(|&m| m >= n_source) {
                return Err(Error::InvalidArgument(
                    "invalid enrollment positions".into(),
                ));
            }
        }
        Ok(Self { n_source, enrolled })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.enrolled.iter().map(|e| e.len()).collect()
    }

    /// Indicator vector S_i of length J·N.
    pub fn indicator(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.enrolled.len() * self.n_source);
        for (j, per) in self.enrolled.iter().enumerate() {
            for &k in per {
                s[j * self.n_source + k] = 1.0;
            }
        }
        s
    }

    /// Dense D_i (J·N × M_i): column m selects the m-th observed entry.
    pub fn dense(&self) -> DMatrix<f64> {
        let m_total: usize = self.sizes().iter().sum();
        let mut d = DMatrix::zeros(self.enrolled.len() * self.n_source, m_total);
        let mut m = 0;
        for (j, per) in self.enrolled.iter().enumerate() {
            let mut sorted = per.clone();
            sorted.sort_unstable();
            for k in sorted {
                d[(j * self.n_source + k, m)] = 1.0;
                m += 1;
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{load_trial_csv_from, ColumnMap};

    fn spec(kind: StructureKind, j: usize) -> TreatmentEffectSpec {
        TreatmentEffectSpec::new(kind, j).unwrap()
    }

    #[test]
    fn treatment_rows() {
        assert_eq!(
            spec(StructureKind::Constant, 3)
                .treatment_row(2, 1)
                .unwrap(),
            vec![0.0]
        );
        let r = spec(StructureKind::Duration, 5)
            .treatment_row(1, 3)
            .unwrap();
        assert_eq!(r, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let r = spec(StructureKind::Saturated, 4)
            .treatment_row(2, 3)
            .unwrap();
        assert_eq!(r.len(), 6);
        assert_eq!(r[saturated_index(3, 2, 4).unwrap()], 1.0);
        assert_eq!(r.iter().sum::<f64>(), 1.0);
        assert!(spec(StructureKind::Period, 3).treatment_row(1, 3).is_err());
    }

    #[test]
    fn saturated_order() {
        assert_eq!(saturated_index(1, 1, 5).unwrap(), 0);
        assert_eq!(saturated_index(2, 2, 5).unwrap(), 2);
        assert_eq!(saturated_cell(5, 5).unwrap(), (3, 3));
        assert!(saturated_index(5, 1, 5).is_err());
        assert!(saturated_index(2, 3, 5).is_err());
        assert!(saturated_cell(10, 5).is_err());
    }

    #[test]
    fn coefficient_counts() {
        for j in 2..8 {
            assert_eq!(spec(StructureKind::Constant, j).n_treatment(), 1);
            assert_eq!(spec(StructureKind::Duration, j).n_treatment(), j);
            assert_eq!(spec(StructureKind::Period, j).n_treatment(), j - 1);
            assert_eq!(
                spec(StructureKind::Saturated, j).n_treatment(),
                (j - 1) * j / 2
            );
        }
    }

    #[test]
    fn summary_weight_shapes() {
        assert_eq!(
            summary_weights(&SummaryKind::Davg, &spec(StructureKind::Duration, 5)).unwrap(),
            vec![0.2; 5]
        );
        assert_eq!(
            summary_weights(&SummaryKind::Savg, &spec(StructureKind::Saturated, 3)).unwrap(),
            vec![1.0 / 3.0; 3]
        );
        assert_eq!(
            summary_weights(&SummaryKind::Pavg, &spec(StructureKind::Period, 2)).unwrap(),
            vec![1.0]
        );
        let sat = spec(StructureKind::Saturated, 3);
        assert!(summary_weights(&SummaryKind::Custom(vec![0.5, 0.5]), &sat).is_err());
        assert!(summary_weights(&SummaryKind::Custom(vec![0.5, 0.5, 0.1]), &sat).is_err());
        assert!(summary_weights(&SummaryKind::Davg, &sat).is_err());
    }

    #[test]
    fn cluster_design_examples() {
        let csv = "cluster,period,id,y,z\nA,1,1,1.0,1\nA,2,1,2.0,1\nB,1,1,0.5,2\nB,2,1,1.5,2\n";
        let data = load_trial_csv_from(csv.as_bytes(), &ColumnMap::default()).unwrap();
        let c = &data.clusters["A"];
        let md = ModelDesign::build(
            &data,
            spec(StructureKind::Constant, 2),
            &Adjustment::None,
            None,
        )
        .unwrap();
        let q = build_cluster_design(&data, c, &md.layout).q;
        assert_eq!(
            q,
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0])
        );
        let md = ModelDesign::build(
            &data,
            spec(StructureKind::Period, 2),
            &Adjustment::None,
            None,
        )
        .unwrap();
        let q = build_cluster_design(&data, c, &md.layout).q;
        assert_eq!(q, DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
    }

    #[test]
    fn saturated_j3_layout() {
        let layout = DesignLayout {
            spec: spec(StructureKind::Saturated, 3),
            retained: 2,
            covariate_names: vec![],
            covariate_source: vec![],
        };
        assert_eq!(layout.n_cols(), 5);
        assert_eq!(
            layout.spec.labels(2, "Δ"),
            vec!["Δ_1(1)", "Δ_2(1)", "Δ_2(2)"]
        );
    }

    #[test]
    fn indicator_algebra() {
        let j = 5;
        for z in 1..=j {
            let sum = (1..=j).fold(DMatrix::zeros(j, j), |acc, d| {
                acc + lambda_indicator(z, d, j)
            });
            assert_eq!(sum, delta_indicator(z, j));
            let ones = DVector::from_element(j, 1.0);
            for d in 1..=j {
                // Λ_Z^d 1_J is column d of H_Z.
                assert_eq!(
                    lambda_indicator(z, d, j) * &ones,
                    duration_indicator(z, j).column(d - 1)
                );
            }
        }
    }
}
