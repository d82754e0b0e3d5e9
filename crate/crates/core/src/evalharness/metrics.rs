use serde::{Deserialize, Serialize};

use super::RankedEvent;
use crate::corpus::StudentId;
use crate::rng;

pub const CUTOFFS: [u32; 5] = [1, 3, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    All,
    NonContinuation,
    Novel,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Self::All, Self::NonContinuation, Self::Novel];

    pub fn label(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::NonContinuation => "non-continuation",
            Self::Novel => "novel",
        }
    }

    pub(crate) fn code(self) -> u64 {
        self as u64
    }
}

/// `(student, subset events, hit fraction)` for every student with at least
/// one subset event, in the order students appear in `events`.
pub fn per_student_rates(events: &[RankedEvent], n: u32, subset: Subset) -> Vec<(StudentId, usize, f64)> {
    let mut out: Vec<(StudentId, usize, usize)> = Vec::new();
    for e in events.iter().filter(|e| e.event.in_subset(subset)) {
        let hit = (e.rank <= n) as usize;
        match out.last_mut() {
            Some(last) if last.0 == e.event.student_id => {
                last.1 += 1;
                last.2 += hit;
            }
            _ => out.push((e.event.student_id, 1, hit)),
        }
    }
    out.into_iter().map(|(s, c, h)| (s, c, h as f64 / c as f64)).collect()
}

/// Mean over students of the per-student hit percentage; `None` when no
/// student has a subset event.
pub fn hits_at_n(events: &[RankedEvent], n: u32, subset: Subset) -> Option<f64> {
    let rates = per_student_rates(events, n, subset);
    (!rates.is_empty()).then(|| 100.0 * rates.iter().map(|r| r.2).sum::<f64>() / rates.len() as f64)
}

/// Linear-interpolated empirical quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resample indices shared by every statistic bootstrapped over the same
/// students, so intervals for different cutoffs stay comparable.
pub(crate) fn resample_indices(students: usize, resamples: usize, seed: u64, salt: u64) -> Vec<Vec<usize>> {
    (0..resamples)
        .map(|b| {
            (0..students)
                .map(|k| {
                    let h = rng::mix(seed, &[rng::salt::BOOTSTRAP, salt, b as u64, k as u64]);
                    (rng::unit_interval(h) * students as f64) as usize % students.max(1)
                })
                .collect()
        })
        .collect()
}

pub(crate) fn interval_from(values: &[f64], draws: &[Vec<usize>], level: f64) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() == 1 || draws.is_empty() {
        return (mean, mean);
    }
    let mut means: Vec<f64> = draws
        .iter()
        .map(|idx| idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let (lo, hi) = (quantile(&means, tail), quantile(&means, 1.0 - tail));
    // a skewed resample distribution can leave the point estimate outside
    (lo.min(mean), hi.max(mean))
}

/// Percentile bootstrap interval of the mean of `values`, widened if
/// necessary so that it contains the mean. One value gives a zero-width
/// interval.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let draws = resample_indices(values.len(), resamples, seed, 0);
    Some(interval_from(values, &draws, level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::EvalEvent;

    fn ev(student: u64, rank: u32) -> RankedEvent {
        RankedEvent {
            event: EvalEvent {
                student_id: student,
                index: 0,
                target: 3,
                is_continuation: false,
                is_novel: true,
            },
            rank,
        }
    }

    #[test]
    fn per_student_examples() {
        let events = [ev(1, 1), ev(1, 3)];
        assert_eq!(hits_at_n(&events, 1, Subset::All), Some(50.0));
        assert_eq!(hits_at_n(&events, 3, Subset::All), Some(100.0));
        let mut events: Vec<_> = (0..100).map(|_| ev(1, 1)).collect();
        events.push(ev(2, 7));
        assert_eq!(hits_at_n(&events, 1, Subset::All), Some(50.0));
        assert_eq!(hits_at_n(&[], 1, Subset::All), None);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [0.0, 10.0, 20.0, 30.0];
        assert_eq!(quantile(&v, 0.5), 15.0);
        assert_eq!(quantile(&v, 0.0), 0.0);
        assert_eq!(quantile(&v, 1.0), 30.0);
    }

    #[test]
    fn degenerate_intervals() {
        assert_eq!(bootstrap_ci(&[42.0], 50, 0.95, 1), Some((42.0, 42.0)));
        assert_eq!(bootstrap_ci(&[7.0; 30], 50, 0.95, 1), Some((7.0, 7.0)));
        assert_eq!(bootstrap_ci(&[], 50, 0.95, 1), None);
    }
}
