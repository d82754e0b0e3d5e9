use std::sync::Arc;

use super::{MaskMode, ModelError, Result};
use crate::corpus::StudentId;
use crate::pipeline::DataPoint;

/// Square attention permission matrix, row-major: entry `(i, j)` says
/// whether position `i` may attend to position `j`.
///
/// Padding positions (owner `None`) see only themselves and are seen by
/// nobody else, so every row has at least its diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    allow: Arc<[bool]>,
}

impl MaskMatrix {
    /// Standard causal mask over all non-padding positions.
    pub fn positional(owners: &[Option<StudentId>]) -> Self {
        let n = owners.len();
        let mut allow = vec![false; n * n];
        for i in 0..n {
            allow[i * n + i] = true;
            if owners[i].is_none() {
                continue;
            }
            for j in 0..i {
                allow[i * n + j] = owners[j].is_some();
            }
        }
        Self { n, allow: allow.into() }
    }

    /// Own earlier-or-equal positions, plus other students' positions with a
    /// strictly earlier timestamp.
    ///
    /// Within one student the timestamps must be non-decreasing in position;
    /// that makes the relation transitive, so stacking layers cannot route
    /// information around it.
    pub fn temporal(timestamps: &[i64], owners: &[Option<StudentId>]) -> Result<Self> {
        let n = owners.len();
        if timestamps.len() != n {
            return Err(ModelError::Contract(format!(
                "{} timestamps for {} positions",
                timestamps.len(),
                n
            )));
        }
        let mut last_seen: Vec<(StudentId, usize)> = Vec::new();
        for (k, o) in owners.iter().enumerate() {
            let Some(o) = *o else { continue };
            if let Some(&(_, prev)) = last_seen.iter().find(|(s, _)| *s == o) {
                if timestamps[prev] > timestamps[k] {
                    return Err(ModelError::Contract(format!(
                        "timestamps of student {o} decrease at position {k}"
                    )));
                }
                last_seen.retain(|(s, _)| *s != o);
            }
            last_seen.push((o, k));
        }
        let mut allow = vec![false; n * n];
        for i in 0..n {
            allow[i * n + i] = true;
            let Some(oi) = owners[i] else { continue };
            for j in 0..n {
                let Some(oj) = owners[j] else { continue };
                allow[i * n + j] |= if oi == oj { j <= i } else { timestamps[j] < timestamps[i] };
            }
        }
        Ok(Self { n, allow: allow.into() })
    }

    pub fn for_datapoint(dp: &DataPoint, mode: MaskMode) -> Result<Self> {
        match mode {
            MaskMode::Positional => Ok(Self::positional(&dp.owners)),
            MaskMode::Temporal => Self::temporal(&dp.timestamps, &dp.owners),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.n..(i + 1) * self.n]
    }

    pub fn as_shared(&self) -> Arc<[bool]> {
        Arc::clone(&self.allow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(m: &MaskMatrix) -> Vec<Vec<usize>> {
        (0..m.len()).map(|i| (0..m.len()).filter(|&j| m.allowed(i, j)).collect()).collect()
    }

    #[test]
    fn single_student_is_lower_triangular() {
        let owners = vec![Some(1); 4];
        let m = MaskMatrix::temporal(&[5, 6, 6, 9], &owners).unwrap();
        assert_eq!(m, MaskMatrix::positional(&owners));
        assert_eq!(sets(&m), vec![vec![0], vec![0, 1], vec![0, 1, 2], vec![0, 1, 2, 3]]);
    }

    #[test]
    fn interleaved_pair() {
        let owners = [Some(1), Some(1), Some(2), Some(2)];
        let m = MaskMatrix::temporal(&[1, 3, 2, 4], &owners).unwrap();
        assert_eq!(sets(&m), vec![vec![0], vec![0, 1, 2], vec![0, 2], vec![0, 1, 2, 3]]);
    }

    #[test]
    fn cross_student_ties_are_blocked() {
        let owners = [Some(1), Some(2)];
        let m = MaskMatrix::temporal(&[7, 7], &owners).unwrap();
        assert_eq!(sets(&m), vec![vec![0], vec![1]]);
    }

    #[test]
    fn padding_is_isolated() {
        let owners = [Some(1), None, Some(1), None];
        for m in [
            MaskMatrix::temporal(&[1, 0, 2, 0], &owners).unwrap(),
            MaskMatrix::positional(&owners),
        ] {
            assert_eq!(sets(&m), vec![vec![0], vec![1], vec![0, 2], vec![3]]);
        }
    }

    #[test]
    fn length_mismatch_and_decreasing_time_are_errors() {
        assert!(MaskMatrix::temporal(&[1], &[Some(1), Some(1)]).is_err());
        assert!(MaskMatrix::temporal(&[3, 2], &[Some(1), Some(1)]).is_err());
    }
}
