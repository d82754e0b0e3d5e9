use std::collections::HashMap;

use rayon::prelude::*;

use super::EvalError;
use crate::corpus::{Popularity, StudentId, TokenizedStudent, OOV};
use crate::knnrec::{featurize, InvertedIndex};
use crate::model::{rank_of_target, Decoder};
use crate::numkernel::Tensor;
use crate::pipeline::{pack_epoch, window_all, DataPoint, PipelineConfig};

/// Ranks every interaction of every student given what precedes it.
pub trait Recommender: Sync {
    fn name(&self) -> &str;

    /// `out[s][k]` is the 1-based rank of `students[s].tokens[k]`, or `None`
    /// when it could not be ranked. Ranks of OOV targets are ignored.
    fn rank_all(&self, students: &[TokenizedStudent]) -> Result<Vec<Vec<Option<u32>>>, EvalError>;
}

fn popularity_rank(pop: &Popularity, target: u32) -> Option<u32> {
    pop.rank_of(target)
}

/// Training-set popularity; also the cold-start ranking of every model.
pub struct PopularityRecommender {
    pub popularity: Popularity,
}

impl Recommender for PopularityRecommender {
    fn name(&self) -> &str {
        "popularity"
    }

    fn rank_all(&self, students: &[TokenizedStudent]) -> Result<Vec<Vec<Option<u32>>>, EvalError> {
        Ok(students
            .iter()
            .map(|s| s.tokens.iter().map(|&t| popularity_rank(&self.popularity, t)).collect())
            .collect())
    }
}

pub struct KnnRecommender {
    pub index: InvertedIndex,
}

impl Recommender for KnnRecommender {
    fn name(&self) -> &str {
        "knn"
    }

    fn rank_all(&self, students: &[TokenizedStudent]) -> Result<Vec<Vec<Option<u32>>>, EvalError> {
        let h = self.index.config().history_len;
        let vocab = self.index.vocab_tokens() as u32;
        Ok(students
            .par_iter()
            .map(|s| {
                (0..s.tokens.len())
                    .map(|k| {
                        let t = s.tokens[k];
                        (t >= OOV && t < vocab).then(|| self.index.rank_of_target(&featurize(&s.tokens[..k], h), t))
                    })
                    .collect()
            })
            .collect())
    }
}

/// How evaluation histories are laid out for a decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Packing {
    /// Consecutive per-student windows of this many tokens.
    Windows(usize),
    /// Group-packed segments, as in training.
    Grouped(PipelineConfig),
}

/// A trained decoder read at each student's own positions.
///
/// The position holding history index `k` predicts event `k + 1`, whether
/// or not that event falls into the same datapoint. A student's first event
/// has no own position before it; it is scored by the mean predicted
/// distribution of the peers visible to it in its datapoint, and by
/// popularity when there are none.
pub struct DecoderRecommender<'a> {
    pub name: String,
    pub decoder: &'a Decoder,
    pub packing: Packing,
    pub popularity: Popularity,
}

impl DecoderRecommender<'_> {
    fn datapoints(&self, students: &[TokenizedStudent]) -> Result<Vec<DataPoint>, EvalError> {
        match self.packing {
            Packing::Windows(c) => Ok(window_all(students, c)),
            Packing::Grouped(cfg) => pack_epoch(students, &cfg, 0).map_err(|e| EvalError::Recommender(e.to_string())),
        }
    }
}

impl Recommender for DecoderRecommender<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn rank_all(&self, students: &[TokenizedStudent]) -> Result<Vec<Vec<Option<u32>>>, EvalError> {
        let slot: HashMap<StudentId, usize> = students.iter().enumerate().map(|(i, s)| (s.student_id, i)).collect();
        let mut out: Vec<Vec<Option<u32>>> = students
            .iter()
            .map(|s| {
                let mut r = vec![None; s.tokens.len()];
                if let Some(&t) = s.tokens.first() {
                    r[0] = popularity_rank(&self.popularity, t);
                }
                r
            })
            .collect();
        let vocab = self.decoder.config.vocab_size as u32;
        let datapoints = self.datapoints(students)?;
        let found: Vec<Vec<(usize, usize, u32)>> = datapoints
            .par_iter()
            .map(|dp| {
                let Ok(logits) = self.decoder.logits(dp) else {
                    log::warn!("{}: forward pass failed on a datapoint; its events are skipped", self.name);
                    return Vec::new();
                };
                let mut hits = Vec::new();
                for (q, &target) in dp.tokens.iter().enumerate() {
                    if dp.history_index[q] == Some(0) && target >= OOV && target < vocab {
                        let owner = dp.owners[q].expect("history positions have owners");
                        if let Some(scores) = peer_consensus(dp, &logits, q, owner) {
                            hits.push((slot[&owner], 0, rank_of_target(&scores, target)));
                        }
                    }
                }
                for k in 0..dp.len() {
                    let (Some(owner), Some(h)) = (dp.owners[k], dp.history_index[k]) else { continue };
                    let s = slot[&owner];
                    let next = h as usize + 1;
                    let Some(&target) = students[s].tokens.get(next) else { continue };
                    if target >= OOV && target < vocab {
                        hits.push((s, next, rank_of_target(logits.row(k), target)));
                    }
                }
                hits
            })
            .collect();
        for (s, k, r) in found.into_iter().flatten() {
            out[s][k] = Some(r);
        }
        Ok(out)
    }
}

/// Mean next-item distribution over the latest position of every other
/// student that precedes `q` in time, or `None` if no such student exists.
/// Each peer's distribution excludes the item the peer is currently on.
fn peer_consensus(dp: &DataPoint, logits: &Tensor, q: usize, owner: StudentId) -> Option<Vec<f32>> {
    let t0 = dp.timestamps[q];
    let mut latest: Vec<(StudentId, usize)> = Vec::new();
    for k in 0..dp.len() {
        let Some(peer) = dp.owners[k] else { continue };
        if peer == owner || dp.history_index[k].is_none() || dp.timestamps[k] >= t0 {
            continue;
        }
        match latest.iter_mut().find(|(p, _)| *p == peer) {
            Some(entry) => entry.1 = k,
            None => latest.push((peer, k)),
        }
    }
    if latest.is_empty() {
        return None;
    }
    let v = logits.last_dim();
    let mut mean = vec![0f64; v];
    for &(_, k) in &latest {
        // The peer's own current item is dropped: its mass is mostly the
        // peer continuing, which says nothing about a newcomer's first pick.
        let current = dp.tokens[k] as usize;
        let row = logits.row(k);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
        let mut p: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
        p[current] = 0.0;
        let z: f64 = p.iter().sum();
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / z;
        }
    }
    let n = latest.len() as f64;
    Some(mean.into_iter().map(|m| (m / n) as f32).collect())
}
