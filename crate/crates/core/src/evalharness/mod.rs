//! Offline next-item evaluation.
//!
//! Every interaction of an evaluation student is an event. Each event is
//! ranked by a [`Recommender`] that sees only the student's (and, for the
//! joint model, the group's) interactions that precede it within the
//! evaluation split. A student's first event has no own context: the joint
//! model scores it from the predictions at earlier peer positions, and every
//! other model falls back to training popularity. Hits@n is computed per
//! student and then averaged over students.

mod metrics;
mod recommenders;
mod report;
mod slice;

pub use metrics::{bootstrap_ci, hits_at_n, per_student_rates, Subset, CUTOFFS};
pub use recommenders::{DecoderRecommender, KnnRecommender, Packing, PopularityRecommender, Recommender};
pub use report::{metric_report, render_table, report_csv, EvalConfig, MetricReport, MetricRow, REPORT_HEADER};
pub use slice::{slice, slice_csv, SliceBin, SliceSpec, SliceVariable, StudentAttributes};

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{StudentId, Token, TokenizedStudent, OOV};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("recommender: {0}")]
    Recommender(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One next-item prediction target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub student_id: StudentId,
    /// Position in the student's evaluation-split history.
    pub index: u32,
    pub target: Token,
    /// The target repeats the immediately preceding interaction.
    pub is_continuation: bool,
    /// The student has never interacted with the target before.
    pub is_novel: bool,
}

impl EvalEvent {
    pub fn in_subset(&self, subset: Subset) -> bool {
        match subset {
            Subset::All => true,
            Subset::NonContinuation => !self.is_continuation,
            Subset::Novel => self.is_novel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedEvent {
    pub event: EvalEvent,
    /// 1-based rank of the target among all rankable tokens.
    pub rank: u32,
}

/// Ranked events in (student, index) order plus what was left out.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    pub events: Vec<RankedEvent>,
    /// Events whose target is the out-of-vocabulary token.
    pub oov_skipped: usize,
    /// Events the recommender failed to rank.
    pub failed: usize,
}

impl EventLog {
    /// Keeps only the events of students accepted by `keep`.
    pub fn restrict(&self, keep: impl Fn(StudentId) -> bool) -> Self {
        Self {
            events: self.events.iter().filter(|e| keep(e.event.student_id)).copied().collect(),
            oov_skipped: self.oov_skipped,
            failed: self.failed,
        }
    }

    pub fn students(&self) -> Vec<StudentId> {
        let mut ids: Vec<StudentId> = self.events.iter().map(|e| e.event.student_id).collect();
        ids.dedup();
        ids
    }

    /// Number of ranked events per student.
    pub fn event_counts(&self) -> HashMap<StudentId, usize> {
        let mut m = HashMap::new();
        for e in &self.events {
            *m.entry(e.event.student_id).or_insert(0) += 1;
        }
        m
    }
}

/// Events of every evaluation student. `prior` holds earlier (training
/// split) histories used for novelty; students absent from it have none.
pub fn build_events(students: &[TokenizedStudent], prior: &[TokenizedStudent]) -> Vec<Vec<EvalEvent>> {
    let prior: HashMap<StudentId, &TokenizedStudent> = prior.iter().map(|s| (s.student_id, s)).collect();
    students
        .iter()
        .map(|s| {
            let mut seen: HashSet<Token> = prior.get(&s.student_id).map(|p| p.tokens.iter().copied().collect()).unwrap_or_default();
            s.tokens
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    let ev = EvalEvent {
                        student_id: s.student_id,
                        index: k as u32,
                        target: t,
                        is_continuation: k > 0 && s.tokens[k - 1] == t,
                        is_novel: !seen.contains(&t),
                    };
                    seen.insert(t);
                    ev
                })
                .collect()
        })
        .collect()
}

/// Teacher-forced ranking of every evaluation event.
///
/// `students` must be sorted by id; the log comes back in the same order.
pub fn collect_events<R: Recommender + ?Sized>(
    students: &[TokenizedStudent],
    prior: &[TokenizedStudent],
    recommender: &R,
) -> Result<EventLog, EvalError> {
    if students.windows(2).any(|w| w[0].student_id >= w[1].student_id) {
        return Err(EvalError::Config("evaluation students must be sorted by id without duplicates".into()));
    }
    let ranks = recommender.rank_all(students)?;
    if ranks.len() != students.len() || ranks.iter().zip(students).any(|(r, s)| r.len() != s.tokens.len()) {
        return Err(EvalError::Recommender(format!("{} returned misaligned ranks", recommender.name())));
    }
    let mut log = EventLog::default();
    for (events, ranks) in build_events(students, prior).into_iter().zip(ranks) {
        for (event, rank) in events.into_iter().zip(ranks) {
            if event.target == OOV {
                log.oov_skipped += 1;
                continue;
            }
            match rank {
                Some(rank) => log.events.push(RankedEvent { event, rank }),
                None => log.failed += 1,
            }
        }
    }
    Ok(log)
}
