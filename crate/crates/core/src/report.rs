//! Estimand reports and their table / JSON / CSV renderings.

use crate::design_algebra::StructureKind;
use crate::error::{Error, Result};
use crate::Z_975;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const SCHEMA: &str = "swedge-report/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Difference,
    RiskRatio,
    OddsRatio,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "difference" | "diff" => Ok(Self::Difference),
            "rr" | "risk_ratio" => Ok(Self::RiskRatio),
            "or" | "odds_ratio" => Ok(Self::OddsRatio),
            other => Err(Error::InvalidArgument(format!("unknown scale `{other}`"))),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Self::Difference => "Δ",
            Self::RiskRatio => "Ψ",
            Self::OddsRatio => "Φ",
        }
    }

    pub fn is_ratio(self) -> bool {
        self != Self::Difference
    }
}

/// One named estimate with its interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub label: String,
    pub estimate: f64,
    pub se_robust: f64,
    pub se_model: Option<f64>,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl EstimateRow {
    /// Estimate on its own scale with a symmetric normal interval.
    pub fn linear(
        label: impl Into<String>,
        estimate: f64,
        se_robust: f64,
        se_model: Option<f64>,
    ) -> Self {
        Self {
            label: label.into(),
            estimate,
            se_robust,
            se_model,
            ci_lo: estimate - Z_975 * se_robust,
            ci_hi: estimate + Z_975 * se_robust,
        }
    }

    /// Ratio reported from its log-scale estimate and standard errors: the
    /// interval is exponentiated and the SEs use the delta method.
    pub fn from_log(
        label: impl Into<String>,
        log_est: f64,
        log_se: f64,
        log_se_model: Option<f64>,
    ) -> Self {
        let estimate = log_est.exp();
        Self {
            label: label.into(),
            estimate,
            se_robust: estimate * log_se,
            se_model: log_se_model.map(|s| estimate * s),
            ci_lo: (log_est - Z_975 * log_se).exp(),
            ci_hi: (log_est + Z_975 * log_se).exp(),
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }

    /// Coverage of the model-based interval, built the same way as the robust one.
    pub fn covers_model(&self, truth: f64, scale: Scale) -> Option<bool> {
        let se = self.se_model?;
        if scale.is_ratio() {
            let l = self.estimate.ln();
            let s = se / self.estimate;
            Some((l - Z_975 * s).exp() <= truth && truth <= (l + Z_975 * s).exp())
        } else {
            Some((self.estimate - truth).abs() <= Z_975 * se)
        }
    }
}

/// Combination wᵀθ of estimates on the internal (linear or log) scale.
pub(crate) fn weighted_row(
    label: String,
    scale: Scale,
    w: &[f64],
    est: &[f64],
    cov_robust: &DMatrix<f64>,
    cov_model: Option<&DMatrix<f64>>,
) -> EstimateRow {
    let e: f64 = w.iter().zip(est).map(|(a, b)| a * b).sum();
    let quad = |m: &DMatrix<f64>| {
        let mut v = 0.0;
        for r in 0..w.len() {
            for c in 0..w.len() {
                v += w[r] * m[(r, c)] * w[c];
            }
        }
        v.max(0.0).sqrt()
    };
    let se = quad(cov_robust);
    let se_m = cov_model.map(quad);
    if scale.is_ratio() {
        EstimateRow::from_log(label, e, se, se_m)
    } else {
        EstimateRow::linear(label, e, se, se_m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub restricted: StructureKind,
    pub general: StructureKind,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub retained_periods: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub estimator: String,
    pub correlation: String,
    pub link: String,
    pub covariates: Vec<String>,
    pub data_fingerprint: Option<String>,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub n_periods: usize,
    pub retained_periods: usize,
    pub converged: bool,
    pub boundary: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimandReport {
    pub schema: String,
    pub structure: StructureKind,
    pub scale: Scale,
    pub components: Vec<EstimateRow>,
    pub summaries: Vec<EstimateRow>,
    pub provenance: Provenance,
    pub lrt: Option<LrtResult>,
}

impl EstimandReport {
    pub fn new(structure: StructureKind, scale: Scale, provenance: Provenance) -> Self {
        Self {
            schema: SCHEMA.into(),
            structure,
            scale,
            components: Vec::new(),
            summaries: Vec::new(),
            provenance,
            lrt: None,
        }
    }

    /// Find a component or summary by label.
    pub fn get(&self, label: &str) -> Option<&EstimateRow> {
        self.components
            .iter()
            .chain(&self.summaries)
            .find(|r| r.label == label)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        if r.schema != SCHEMA {
            return Err(Error::InvalidArgument(format!(
                "unsupported schema `{}`",
                r.schema
            )));
        }
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Table,
    Json,
    Csv,
}

pub fn render(report: &EstimandReport, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        Format::Csv => render_csv(report),
        Format::Table => render_table(report),
    }
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

fn render_table(r: &EstimandReport) -> String {
    let p = &r.provenance;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} | {} structure | {} scale | correlation {} | link {}",
        p.estimator,
        r.structure.name(),
        match r.scale {
            Scale::Difference => "difference",
            Scale::RiskRatio => "risk ratio",
            Scale::OddsRatio => "odds ratio",
        },
        p.correlation,
        p.link
    );
    let _ = writeln!(
        out,
        "clusters {} | observations {} | periods {} (fitted {})",
        p.n_clusters, p.n_obs, p.n_periods, p.retained_periods
    );
    let rows: Vec<&EstimateRow> = r.components.iter().chain(&r.summaries).collect();
    let width = rows
        .iter()
        .map(|x| x.label.chars().count())
        .max()
        .unwrap_or(8)
        .max(8);
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}",
        "estimand", "estimate", "se_rob", "se_model", "ci_lo", "ci_hi"
    );
    for x in rows {
        let pad = width - x.label.chars().count();
        let _ = writeln!(
            out,
            "{}{}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}",
            x.label,
            " ".repeat(pad),
            fmt3(x.estimate),
            fmt3(x.se_robust),
            x.se_model.map(fmt3).unwrap_or_else(|| "-".into()),
            fmt3(x.ci_lo),
            fmt3(x.ci_hi)
        );
    }
    if let Some(l) = &r.lrt {
        let _ = writeln!(
            out,
            "LRT {} vs {}: statistic {} on {} df, p = {} (both fitted on periods 1..{})",
            l.restricted.name(),
            l.general.name(),
            fmt3(l.statistic),
            l.df,
            fmt3(l.p_value),
            l.retained_periods
        );
    }
    for n in &p.notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

fn render_csv(r: &EstimandReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "kind",
        "label",
        "estimate",
        "se_robust",
        "se_model",
        "ci_lo",
        "ci_hi",
    ])
    .expect("in-memory csv");
    let kinds = r
        .components
        .iter()
        .map(|x| ("component", x))
        .chain(r.summaries.iter().map(|x| ("summary", x)));
    for (kind, x) in kinds {
        w.write_record([
            kind.to_string(),
            x.label.clone(),
            x.estimate.to_string(),
            x.se_robust.to_string(),
            x.se_model.map(|v| v.to_string()).unwrap_or_default(),
            x.ci_lo.to_string(),
            x.ci_hi.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> EstimandReport {
        let mut r = EstimandReport::new(
            StructureKind::Saturated,
            Scale::Difference,
            Provenance::default(),
        );
        for k in 0..n {
            r.components.push(EstimateRow::linear(
                format!("Δ_{k}"),
                0.1 * k as f64,
                0.05,
                Some(0.04),
            ));
        }
        r.summaries
            .push(EstimateRow::linear("Δ^S-avg", 0.2, 0.03, None));
        r
    }

    #[test]
    fn table_rows() {
        let t = render(&sample(3), Format::Table);
        // Two header lines, a column header, 3 components and one summary.
        assert_eq!(t.lines().count(), 7);
        assert!(t.contains("0.050"));
    }

    #[test]
    fn json_round_trip() {
        let r = sample(3);
        let back = EstimandReport::from_json(&render(&r, Format::Json)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ratio_interval_is_exponentiated() {
        let row = EstimateRow::from_log("Φ", 0.8, 0.1, None);
        assert!((row.ci_lo - (0.8 - Z_975 * 0.1f64).exp()).abs() < 1e-15);
        assert!((row.se_robust - 0.8f64.exp() * 0.1).abs() < 1e-15);
        assert!(row.ci_lo < row.estimate && row.estimate < row.ci_hi);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let c = render(&sample(2), Format::Csv);
        assert_eq!(c.lines().count(), 4);
    }
}
