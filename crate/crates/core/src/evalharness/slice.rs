use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::report::report_rows;
use super::{metric_report, EvalConfig, EvalError, EventLog, MetricReport, REPORT_HEADER};
use crate::corpus::{Dataset, MetroCode, SesBand, StudentId};

/// Per-student values a report can be broken down by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentAttributes {
    /// Interactions on record across both years.
    pub engagement: usize,
    pub metro: MetroCode,
    pub ses: SesBand,
    pub reading_score: f64,
}

impl StudentAttributes {
    pub fn from_dataset(full: &Dataset) -> HashMap<StudentId, Self> {
        full.students()
            .iter()
            .map(|s| {
                (
                    s.student_id,
                    Self {
                        engagement: s.interactions.len(),
                        metro: s.metadata.metro,
                        ses: s.metadata.ses,
                        reading_score: s.metadata.reading_score,
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceVariable {
    Engagement,
    Metro,
    Ses,
    ReadingScore,
}

impl SliceVariable {
    pub fn label(self) -> &'static str {
        match self {
            Self::Engagement => "engagement",
            Self::Metro => "metro",
            Self::Ses => "ses",
            Self::ReadingScore => "reading-score",
        }
    }
}

/// Numeric variables are cut at `edges` into `(-inf, e1)`, `[e1, e2)`, ...,
/// `[ek, inf)`; categorical ones get one bin per category and ignore edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub variable: SliceVariable,
    pub edges: Vec<f64>,
}

impl SliceSpec {
    pub fn engagement(edges: &[f64]) -> Self {
        Self {
            variable: SliceVariable::Engagement,
            edges: edges.to_vec(),
        }
    }

    pub fn categorical(variable: SliceVariable) -> Self {
        Self {
            variable,
            edges: Vec::new(),
        }
    }

    fn numeric(&self) -> bool {
        matches!(self.variable, SliceVariable::Engagement | SliceVariable::ReadingScore)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.numeric() && !self.edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(EvalError::Config("slice edges must be strictly increasing".into()));
        }
        if self.edges.iter().any(|e| !e.is_finite()) {
            return Err(EvalError::Config("slice edges must be finite".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        match self.variable {
            SliceVariable::Metro => MetroCode::ALL.iter().map(ToString::to_string).collect(),
            SliceVariable::Ses => SesBand::ALL.iter().map(ToString::to_string).collect(),
            _ => {
                let e = &self.edges;
                if e.is_empty() {
                    return vec!["all".into()];
                }
                let mut v = vec![format!("<{}", e[0])];
                v.extend(e.windows(2).map(|w| format!("[{}..{})", w[0], w[1])));
                v.push(format!(">={}", e[e.len() - 1]));
                v
            }
        }
    }

    pub fn bin_of(&self, a: &StudentAttributes) -> usize {
        let cut = |x: f64| self.edges.iter().filter(|&&e| x >= e).count();
        match self.variable {
            SliceVariable::Engagement => cut(a.engagement as f64),
            SliceVariable::ReadingScore => cut(a.reading_score),
            SliceVariable::Metro => MetroCode::ALL.iter().position(|&m| m == a.metro).unwrap(),
            SliceVariable::Ses => SesBand::ALL.iter().position(|&s| s == a.ses).unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceBin {
    pub label: String,
    /// Students with at least one ranked event in this bin.
    pub students: usize,
    pub report: MetricReport,
}

/// One report per bin. Students without attributes are left out.
pub fn slice(
    model: &str,
    log: &EventLog,
    spec: &SliceSpec,
    attributes: &HashMap<StudentId, StudentAttributes>,
    cfg: &EvalConfig,
) -> Result<Vec<SliceBin>, EvalError> {
    spec.validate()?;
    spec.labels()
        .into_iter()
        .enumerate()
        .map(|(b, label)| {
            let part = log.restrict(|s| attributes.get(&s).is_some_and(|a| spec.bin_of(a) == b));
            let report = metric_report(model, &part, cfg)?;
            Ok(SliceBin {
                label,
                students: part.students().len(),
                report,
            })
        })
        .collect()
}

/// CSV over several models' bins, prefixed by variable and bin label.
pub fn slice_csv(variable: SliceVariable, per_model: &[Vec<SliceBin>]) -> String {
    let mut out = format!("variable,bin,bin_students,{REPORT_HEADER}\n");
    for bins in per_model {
        for bin in bins {
            let mut rows = String::new();
            report_rows(&bin.report, &mut rows);
            for line in rows.lines() {
                let _ = writeln!(out, "{},{},{},{}", variable.label(), bin.label, bin.students, line);
            }
        }
    }
    out
}
