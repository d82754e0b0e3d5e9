use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{interval_from, per_student_rates, resample_indices};
use super::{EvalError, EventLog, Subset, CUTOFFS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub cutoffs: Vec<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resamples: 50,
            level: 0.95,
            seed: 0,
            cutoffs: CUTOFFS.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.resamples == 0 || !(0.0 < self.level && self.level < 1.0) {
            return Err(EvalError::Config("need at least one resample and a level in (0, 1)".into()));
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) || self.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::Config("cutoffs must be positive and strictly increasing".into()));
        }
        Ok(())
    }
}

/// Hits@n for one subset and cutoff. `mean` and the interval are `None`
/// when the subset is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subset: Subset,
    pub n: u32,
    pub mean: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub students: usize,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub rows: Vec<MetricRow>,
    pub oov_skipped: usize,
    pub failed: usize,
}

impl MetricReport {
    pub fn get(&self, subset: Subset, n: u32) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.subset == subset && r.n == n)
    }

    pub fn mean(&self, subset: Subset, n: u32) -> Option<f64> {
        self.get(subset, n).and_then(|r| r.mean)
    }
}

/// Per-subset, per-cutoff means with bootstrap intervals. Within a subset
/// every cutoff is bootstrapped over the same resampled students.
pub fn metric_report(model: &str, log: &EventLog, cfg: &EvalConfig) -> Result<MetricReport, EvalError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for subset in Subset::ALL {
        let events = log.events.iter().filter(|e| e.event.in_subset(subset)).count();
        let first = per_student_rates(&log.events, cfg.cutoffs[0], subset);
        let draws = resample_indices(first.len(), cfg.resamples, cfg.seed, subset.code());
        for &n in &cfg.cutoffs {
            let rates: Vec<f64> = per_student_rates(&log.events, n, subset).iter().map(|r| 100.0 * r.2).collect();
            let (mean, ci) = if rates.is_empty() {
                (None, None)
            } else {
                let mean = rates.iter().sum::<f64>() / rates.len() as f64;
                (Some(mean), Some(interval_from(&rates, &draws, cfg.level)))
            };
            rows.push(MetricRow {
                subset,
                n,
                mean,
                ci_low: ci.map(|c| c.0),
                ci_high: ci.map(|c| c.1),
                students: first.len(),
                events,
            });
        }
    }
    Ok(MetricReport {
        model: model.to_string(),
        rows,
        oov_skipped: log.oov_skipped,
        failed: log.failed,
    })
}

pub const REPORT_HEADER: &str = "model,subset,n,mean,ci_low,ci_high,students,events";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// CSV rows (without header) for one report.
pub(crate) fn report_rows(report: &MetricReport, out: &mut String) {
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            report.model,
            r.subset.label(),
            r.n,
            cell(r.mean),
            cell(r.ci_low),
            cell(r.ci_high),
            r.students,
            r.events
        );
    }
}

/// One CSV with a header row covering several models.
pub fn report_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        report_rows(r, &mut out);
    }
    out
}

/// Fixed-width table: one line per model, one column per subset and cutoff.
pub fn render_table(reports: &[MetricReport]) -> String {
    let Some(first) = reports.first() else { return String::new() };
    let cols: Vec<(Subset, u32)> = first.rows.iter().map(|r| (r.subset, r.n)).collect();
    let width = reports.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:width$}", "model");
    for (s, n) in &cols {
        let _ = write!(out, " {:>12}", format!("{}@{}", short(*s), n));
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:width$}", r.model);
        for &(s, n) in &cols {
            let v = r.mean(s, n).map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into());
            let _ = write!(out, " {v:>12}");
        }
        out.push('\n');
    }
    out
}

fn short(s: Subset) -> &'static str {
    match s {
        Subset::All => "all",
        Subset::NonContinuation => "noncont",
        Subset::Novel => "novel",
    }
}
