use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, StudentRecord};
use crate::rng;

/// Year 1 becomes the training set (temporal global split); year-2
/// students are divided whole into validation and test (user split).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_year: u8,
    pub eval_year: u8,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_year: 1,
            eval_year: 2,
            validation_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl SplitSpec {
    /// Whether a year-2 student lands in the validation set.
    pub fn is_validation(&self, student_id: u64) -> bool {
        rng::unit_interval(rng::mix(self.seed, &[rng::salt::SPLIT, student_id])) < self.validation_fraction
    }
}

fn restrict(s: &StudentRecord, year: u8) -> Option<StudentRecord> {
    let interactions: Vec<_> = s.interactions.iter().filter(|i| i.school_year == year).copied().collect();
    (!interactions.is_empty()).then(|| StudentRecord {
        interactions,
        ..s.clone()
    })
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits, CorpusError> {
    if !(0.0..=1.0).contains(&spec.validation_fraction) {
        return Err(CorpusError::Split(format!(
            "validation fraction {} outside [0, 1]",
            spec.validation_fraction
        )));
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for s in dataset.students() {
        if let Some(t) = restrict(s, spec.train_year) {
            train.push(t);
        }
        if let Some(e) = restrict(s, spec.eval_year) {
            if spec.is_validation(s.student_id) {
                validation.push(e);
            } else {
                test.push(e);
            }
        }
    }
    if train.is_empty() {
        return Err(CorpusError::Split(format!("no interactions in school year {}", spec.train_year)));
    }
    if validation.is_empty() && test.is_empty() {
        return Err(CorpusError::Split(format!("no interactions in school year {}", spec.eval_year)));
    }
    Ok(Splits {
        train: Dataset::new(train)?,
        validation: Dataset::new(validation)?,
        test: Dataset::new(test)?,
    })
}
