//! Students, interactions, group structure, the item vocabulary and the
//! temporal/user train-validation-test split.

mod io;
mod split;
mod vocab;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_VERSION};
pub use split::{split, SplitSpec, Splits};
pub use vocab::{build_vocab, Vocabulary};

pub type StudentId = u64;
pub type ItemId = u64;
pub type Token = u32;

pub const PAD: Token = 0;
pub const SEP: Token = 1;
pub const OOV: Token = 2;
/// First token id assigned to an in-vocabulary item.
pub const FIRST_ITEM: Token = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported dataset format: {0}")]
    Version(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub student_id: StudentId,
    pub item_id: ItemId,
    /// Seconds since the epoch.
    pub timestamp: i64,
    pub school_year: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetroCode {
    Urban,
    Suburban,
    Rural,
    Town,
}

impl MetroCode {
    pub const ALL: [MetroCode; 4] = [Self::Urban, Self::Suburban, Self::Rural, Self::Town];
}

/// Socio-economic band of the school, `A` (highest) to `E`, or unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SesBand {
    A,
    B,
    C,
    D,
    E,
    Unknown,
}

impl SesBand {
    pub const ALL: [SesBand; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::Unknown];
}

impl fmt::Display for MetroCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Urban => "urban",
            Self::Suburban => "suburban",
            Self::Rural => "rural",
            Self::Town => "town",
        })
    }
}

impl FromStr for MetroCode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown metro code {s:?}"))
    }
}

impl fmt::Display for SesBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::E => "E",
            Self::Unknown => "unknown",
        })
    }
}

impl FromStr for SesBand {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown socio-economic band {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentMetadata {
    pub metro: MetroCode,
    pub ses: SesBand,
    pub reading_score: f64,
}

impl Default for StudentMetadata {
    fn default() -> Self {
        Self {
            metro: MetroCode::Urban,
            ses: SesBand::Unknown,
            reading_score: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentRecord {
    pub student_id: StudentId,
    pub classroom_id: u64,
    pub school_id: u64,
    pub district_id: u64,
    pub grade_level: u8,
    pub metadata: StudentMetadata,
    /// Sorted by timestamp; ties keep input order.
    pub interactions: Vec<Interaction>,
}

impl StudentRecord {
    pub fn keys(&self) -> GroupKeys {
        GroupKeys {
            classroom_id: self.classroom_id,
            school_id: self.school_id,
            district_id: self.district_id,
            grade_level: self.grade_level,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        for it in &self.interactions {
            if it.student_id != self.student_id {
                return Err(CorpusError::Invalid(format!(
                    "interaction for student {} filed under student {}",
                    it.student_id, self.student_id
                )));
            }
            if it.timestamp <= 0 {
                return Err(CorpusError::Invalid(format!("non-positive timestamp {}", it.timestamp)));
            }
            if !(1..=2).contains(&it.school_year) {
                return Err(CorpusError::Invalid(format!("school year {} not in 1..=2", it.school_year)));
            }
        }
        Ok(())
    }
}

/// A collection of students ordered by `student_id`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    students: Vec<StudentRecord>,
}

impl Dataset {
    /// Validates records, sorts students by id and each history by time
    /// (stable, so equal timestamps keep their input order).
    pub fn new(mut students: Vec<StudentRecord>) -> Result<Self, CorpusError> {
        for s in &mut students {
            s.validate()?;
            s.interactions.sort_by_key(|i| i.timestamp);
        }
        students.sort_by_key(|s| s.student_id);
        if let Some(w) = students.windows(2).find(|w| w[0].student_id == w[1].student_id) {
            return Err(CorpusError::Invalid(format!("duplicate student {}", w[0].student_id)));
        }
        Ok(Self { students })
    }

    pub fn students(&self) -> &[StudentRecord] {
        &self.students
    }

    pub fn into_students(self) -> Vec<StudentRecord> {
        self.students
    }

    pub fn num_interactions(&self) -> usize {
        self.students.iter().map(|s| s.interactions.len()).sum()
    }

    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.students.iter().flat_map(|s| s.interactions.iter())
    }

    pub fn student(&self, id: StudentId) -> Option<&StudentRecord> {
        self.students
            .binary_search_by_key(&id, |s| s.student_id)
            .ok()
            .map(|i| &self.students[i])
    }

    /// Keeps only the given students (by id); order is preserved.
    pub fn retain_students(&self, keep: impl Fn(StudentId) -> bool) -> Dataset {
        Dataset {
            students: self.students.iter().filter(|s| keep(s.student_id)).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupKeys {
    pub classroom_id: u64,
    pub school_id: u64,
    pub district_id: u64,
    pub grade_level: u8,
}

/// A student history mapped to tokens, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedStudent {
    pub student_id: StudentId,
    pub keys: GroupKeys,
    /// School year of the first interaction.
    pub school_year: u8,
    pub tokens: Vec<Token>,
    pub timestamps: Vec<i64>,
}

/// Tokenizes every student with at least one interaction.
pub fn tokenize(dataset: &Dataset, vocab: &Vocabulary) -> Vec<TokenizedStudent> {
    dataset
        .students()
        .iter()
        .filter(|s| !s.interactions.is_empty())
        .map(|s| TokenizedStudent {
            student_id: s.student_id,
            keys: s.keys(),
            school_year: s.interactions[0].school_year,
            tokens: s.interactions.iter().map(|i| vocab.token_of(i.item_id)).collect(),
            timestamps: s.interactions.iter().map(|i| i.timestamp).collect(),
        })
        .collect()
}

/// Training-set token frequencies and the popularity ranking over every
/// rankable token (OOV and items). Ties rank the smaller token first.
#[derive(Debug, Clone, PartialEq)]
pub struct Popularity {
    counts: Vec<u64>,
    ranking: Vec<Token>,
    position: Vec<u32>,
}

impl Popularity {
    pub fn from_students(students: &[TokenizedStudent], vocab_tokens: usize) -> Self {
        let mut counts = vec![0u64; vocab_tokens];
        for s in students {
            for &t in &s.tokens {
                counts[t as usize] += 1;
            }
        }
        Self::from_counts(counts)
    }

    /// `counts[t]` is the frequency of token `t`; entries below OOV are
    /// ignored for ranking.
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let vocab_tokens = counts.len();
        let mut ranking: Vec<Token> = (OOV..vocab_tokens as Token).collect();
        ranking.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
        let mut position = vec![u32::MAX; vocab_tokens];
        for (i, &t) in ranking.iter().enumerate() {
            position[t as usize] = i as u32;
        }
        Self {
            counts,
            ranking,
            position,
        }
    }

    pub fn count(&self, token: Token) -> u64 {
        self.counts[token as usize]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Rankable tokens, most popular first.
    pub fn ranking(&self) -> &[Token] {
        &self.ranking
    }

    /// 1-based popularity rank of a rankable token.
    pub fn rank_of(&self, token: Token) -> Option<u32> {
        self.position
            .get(token as usize)
            .filter(|&&p| p != u32::MAX)
            .map(|p| p + 1)
    }

    pub fn vocab_tokens(&self) -> usize {
        self.counts.len()
    }
}

/// Per-student totals over a dataset, used for engagement slicing.
pub fn interaction_counts(dataset: &Dataset) -> HashMap<StudentId, usize> {
    dataset
        .students()
        .iter()
        .map(|s| (s.student_id, s.interactions.len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn student(id: u64, times: &[i64]) -> StudentRecord {
        StudentRecord {
            student_id: id,
            classroom_id: 1,
            school_id: 1,
            district_id: 1,
            grade_level: 3,
            metadata: StudentMetadata::default(),
            interactions: times
                .iter()
                .enumerate()
                .map(|(k, &t)| Interaction {
                    student_id: id,
                    item_id: k as u64,
                    timestamp: t,
                    school_year: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn histories_sort_stably_by_time() {
        let ds = Dataset::new(vec![student(2, &[5, 3, 3, 1]), student(1, &[1])]).unwrap();
        assert_eq!(ds.students()[0].student_id, 1);
        let items: Vec<u64> = ds.students()[1].interactions.iter().map(|i| i.item_id).collect();
        assert_eq!(items, vec![3, 1, 2, 0]);
    }

    #[test]
    fn rejects_mismatched_student_and_bad_values() {
        let mut s = student(1, &[1]);
        s.interactions[0].student_id = 9;
        assert!(Dataset::new(vec![s]).is_err());
        assert!(Dataset::new(vec![student(1, &[0])]).is_err());
        let mut s = student(1, &[4]);
        s.interactions[0].school_year = 3;
        assert!(Dataset::new(vec![s]).is_err());
        assert!(Dataset::new(vec![student(1, &[1]), student(1, &[2])]).is_err());
    }

    #[test]
    fn popularity_ranks_by_count_then_token() {
        let s = TokenizedStudent {
            student_id: 1,
            keys: student(1, &[]).keys(),
            school_year: 1,
            tokens: vec![4, 4, 3, 5, 5, 2],
            timestamps: vec![1, 2, 3, 4, 5, 6],
        };
        let pop = Popularity::from_students(&[s], 7);
        assert_eq!(pop.ranking(), &[4, 5, 2, 3, 6]);
        assert_eq!(pop.rank_of(6), Some(5));
        assert_eq!(pop.rank_of(SEP), None);
    }
}
