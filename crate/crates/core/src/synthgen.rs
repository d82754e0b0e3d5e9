//! Synthetic two-year classroom cohorts.
//!
//! Each classroom carries a topic vector and each student an individual one;
//! a student's preference is the mixture `g * classroom + (1 - g) * own`.
//! Items are drawn from Zipf-weighted per-topic distributions, and with
//! probability `repeat_probability` a student re-emits the current item.
//! Engagement counts are log-normal, clipped at `engagement_cap`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    CorpusError, Dataset, Interaction, MetroCode, SesBand, StudentMetadata, StudentRecord,
};
use crate::rng::{self, salt};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Start of the first school year (2021-08-16 UTC).
pub const YEAR_ONE_START: i64 = 1_629_072_000;
const YEAR_SECONDS: i64 = 365 * 86_400;
/// Length of the active part of a school year.
const TERM_SECONDS: i64 = 300 * 86_400;

/// Calibration targets for per-student interaction counts.
pub const TARGET_MEDIAN: f64 = 10.0;
pub const TARGET_SHORT_FRACTION: f64 = 0.85;
pub const SHORT_HISTORY: usize = 65;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub num_districts: usize,
    pub schools_per_district: usize,
    pub classrooms_per_school: usize,
    pub students_per_classroom: usize,
    pub catalog_size: usize,
    pub zipf_exponent: f64,
    pub num_topics: usize,
    /// Dirichlet concentration for classroom and student topic vectors.
    pub topic_concentration: f64,
    pub homophily: f64,
    pub repeat_probability: f64,
    /// Log-normal engagement: `ln(count) ~ N(mu, sigma)`.
    pub engagement_log_mean: f64,
    pub engagement_log_sd: f64,
    pub engagement_cap: usize,
    /// Weights over urban, suburban, rural, town.
    pub metro_weights: [f64; 4],
    /// Weights over A, B, C, D, E, unknown.
    pub ses_weights: [f64; 6],
    pub reading_score_mean: f64,
    pub reading_score_sd: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            num_districts: 10,
            schools_per_district: 10,
            classrooms_per_school: 5,
            students_per_classroom: 20,
            catalog_size: 1000,
            zipf_exponent: 1.1,
            num_topics: 8,
            topic_concentration: 0.3,
            homophily: 0.8,
            repeat_probability: 0.6,
            engagement_log_mean: TARGET_MEDIAN.ln(),
            engagement_log_sd: 1.58,
            engagement_cap: 300,
            metro_weights: [0.3, 0.35, 0.2, 0.15],
            ses_weights: [0.15, 0.2, 0.25, 0.2, 0.15, 0.05],
            reading_score_mean: 0.0,
            reading_score_sd: 1.0,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn num_classrooms(&self) -> usize {
        self.num_districts * self.schools_per_district * self.classrooms_per_school
    }

    pub fn num_students(&self) -> usize {
        self.num_classrooms() * self.students_per_classroom
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            ("num_districts", self.num_districts),
            ("schools_per_district", self.schools_per_district),
            ("classrooms_per_school", self.classrooms_per_school),
            ("students_per_classroom", self.students_per_classroom),
            ("catalog_size", self.catalog_size),
            ("num_topics", self.num_topics),
            ("engagement_cap", self.engagement_cap),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SynthError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return Err(SynthError::Config(format!("homophily {} outside [0, 1]", self.homophily)));
        }
        if !(0.0..=1.0).contains(&self.repeat_probability) {
            return Err(SynthError::Config(format!(
                "repeat probability {} outside [0, 1]",
                self.repeat_probability
            )));
        }
        let positive = [
            ("zipf_exponent", self.zipf_exponent),
            ("topic_concentration", self.topic_concentration),
            ("engagement_log_sd", self.engagement_log_sd),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.reading_score_sd >= 0.0) {
            return Err(SynthError::Config("reading_score_sd must be non-negative".into()));
        }
        for (name, w) in [("metro_weights", &self.metro_weights[..]), ("ses_weights", &self.ses_weights[..])] {
            if w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(SynthError::Config(format!("{name} must be non-negative with a positive sum")));
            }
        }
        Ok(())
    }

    /// Analytic median and short-history fraction of the engagement law,
    /// with a warning per missed target.
    pub fn calibration_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let median = self.engagement_log_mean.exp().round().clamp(1.0, self.engagement_cap as f64);
        if (median - TARGET_MEDIAN).abs() > 0.3 * TARGET_MEDIAN {
            warnings.push(format!(
                "median interaction count {median} is outside 30% of target {TARGET_MEDIAN}"
            ));
        }
        let z = ((SHORT_HISTORY as f64 + 0.5).ln() - self.engagement_log_mean) / self.engagement_log_sd;
        let short = normal_cdf(z);
        if short < TARGET_SHORT_FRACTION {
            warnings.push(format!(
                "expected fraction of students with <= {SHORT_HISTORY} interactions is {short:.3}, target {TARGET_SHORT_FRACTION}"
            ));
        }
        warnings
    }
}

fn normal_cdf(z: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 on erf
    let x = z / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = 1.0 - poly * (-x * x).exp();
    0.5 * (1.0 + if x >= 0.0 { erf } else { -erf })
}

/// Classroom topics, student mixtures and per-topic item laws.
#[derive(Debug, Clone)]
pub struct PreferenceModel {
    /// `topic_items[t][i]` is the probability of catalog item `i` under topic `t`.
    pub topic_items: Vec<Vec<f64>>,
    pub classroom_topics: Vec<Vec<f64>>,
    /// Indexed by global student index.
    pub student_mixtures: Vec<Vec<f64>>,
}

fn dirichlet(k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn topic_laws(cfg: &CohortConfig) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(cfg.seed, &[salt::TOPICS]);
    let zipf: Vec<f64> = (1..=cfg.catalog_size).map(|r| (r as f64).powf(-cfg.zipf_exponent)).collect();
    let z: f64 = zipf.iter().sum();
    (0..cfg.num_topics)
        .map(|_| {
            let mut order: Vec<usize> = (0..cfg.catalog_size).collect();
            order.shuffle(&mut rng);
            let mut law = vec![0.0; cfg.catalog_size];
            for (rank, &item) in order.iter().enumerate() {
                law[item] = zipf[rank] / z;
            }
            law
        })
        .collect()
}

struct ClassroomDraw {
    topic: Vec<f64>,
    grade: u8,
    students: Vec<(Vec<f64>, Vec<Interaction>)>,
}

fn generate_classroom(
    cfg: &CohortConfig,
    classroom: usize,
    topic_samplers: &[WeightedIndex<f64>],
) -> ClassroomDraw {
    let mut rng = rng::stream(cfg.seed, &[salt::CLASSROOM, classroom as u64]);
    let topic = dirichlet(cfg.num_topics, cfg.topic_concentration, &mut rng);
    let grade = rng.random_range(1..=12u8);
    let engagement = LogNormal::new(cfg.engagement_log_mean, cfg.engagement_log_sd).expect("valid log-normal");
    let g = cfg.homophily;
    let students = (0..cfg.students_per_classroom)
        .map(|k| {
            let student_id = (classroom * cfg.students_per_classroom + k) as u64 + 1;
            let own = dirichlet(cfg.num_topics, cfg.topic_concentration, &mut rng);
            let mixture: Vec<f64> = topic.iter().zip(&own).map(|(c, o)| g * c + (1.0 - g) * o).collect();
            let pick_topic = WeightedIndex::new(&mixture).expect("normalized mixture");
            let count = (engagement.sample(&mut rng).round() as usize).clamp(1, cfg.engagement_cap);

            let mut offsets: Vec<i64> = (0..count).map(|_| rng.random_range(0..2 * TERM_SECONDS)).collect();
            offsets.sort_unstable();
            let mut interactions = Vec::with_capacity(count);
            let mut current: Option<u64> = None;
            let mut last_ts = i64::MIN;
            for off in offsets {
                let (year, within) = if off < TERM_SECONDS { (1u8, off) } else { (2u8, off - TERM_SECONDS) };
                let mut ts = YEAR_ONE_START + (year as i64 - 1) * YEAR_SECONDS + within;
                if ts <= last_ts {
                    ts = last_ts + 1;
                }
                last_ts = ts;
                let item = match current {
                    Some(item) if rng.random::<f64>() < cfg.repeat_probability => item,
                    _ => {
                        let t = pick_topic.sample(&mut rng);
                        topic_samplers[t].sample(&mut rng) as u64 + 1
                    }
                };
                current = Some(item);
                interactions.push(Interaction {
                    student_id,
                    item_id: item,
                    timestamp: ts,
                    school_year: year,
                });
            }
            (mixture, interactions)
        })
        .collect();
    ClassroomDraw { topic, grade, students }
}

/// A generated cohort plus any calibration warnings.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub dataset: Dataset,
    pub preferences: PreferenceModel,
    pub warnings: Vec<String>,
}

/// Generates the cohort without slicing metadata (see [`emit_metadata`]).
pub fn generate(cfg: &CohortConfig) -> Result<Cohort, SynthError> {
    cfg.validate()?;
    let warnings = cfg.calibration_warnings();
    for w in &warnings {
        log::warn!("calibration: {w}");
    }
    let topic_items = topic_laws(cfg);
    let samplers: Vec<WeightedIndex<f64>> = topic_items
        .iter()
        .map(|law| WeightedIndex::new(law).expect("normalized topic law"))
        .collect();
    let draws: Vec<ClassroomDraw> = (0..cfg.num_classrooms())
        .into_par_iter()
        .map(|c| generate_classroom(cfg, c, &samplers))
        .collect();

    let per_school = cfg.classrooms_per_school;
    let per_district = cfg.schools_per_district * per_school;
    let mut students = Vec::with_capacity(cfg.num_students());
    let mut classroom_topics = Vec::with_capacity(draws.len());
    let mut student_mixtures = Vec::with_capacity(cfg.num_students());
    for (c, draw) in draws.into_iter().enumerate() {
        classroom_topics.push(draw.topic);
        for (k, (mixture, interactions)) in draw.students.into_iter().enumerate() {
            student_mixtures.push(mixture);
            students.push(StudentRecord {
                student_id: (c * cfg.students_per_classroom + k) as u64 + 1,
                classroom_id: c as u64 + 1,
                school_id: (c / per_school) as u64 + 1,
                district_id: (c / per_district) as u64 + 1,
                grade_level: draw.grade,
                metadata: StudentMetadata::default(),
                interactions,
            });
        }
    }
    Ok(Cohort {
        dataset: Dataset::new(students)?,
        preferences: PreferenceModel {
            topic_items,
            classroom_topics,
            student_mixtures,
        },
        warnings,
    })
}

/// Splits `n` units into category quotas by largest remainder, then
/// shuffles the assignment.
fn stratified<T: Copy>(categories: &[T], weights: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut missing = n - quota.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if weights[i] > 0.0 {
            quota[i] += 1;
            missing -= 1;
        }
    }
    let mut out: Vec<T> = quota
        .iter()
        .enumerate()
        .flat_map(|(i, &q)| std::iter::repeat_n(categories[i], q))
        .collect();
    out.shuffle(rng);
    out
}

/// Assigns metro code and socio-economic band per school and a reading
/// score per classroom.
pub fn emit_metadata(cfg: &CohortConfig, dataset: &Dataset) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[salt::METADATA]);
    let mut schools: Vec<u64> = dataset.students().iter().map(|s| s.school_id).collect();
    schools.sort_unstable();
    schools.dedup();
    let mut classrooms: Vec<u64> = dataset.students().iter().map(|s| s.classroom_id).collect();
    classrooms.sort_unstable();
    classrooms.dedup();

    let metro = stratified(&MetroCode::ALL, &cfg.metro_weights, schools.len(), &mut rng);
    let ses = stratified(&SesBand::ALL, &cfg.ses_weights, schools.len(), &mut rng);
    let normal = Normal::new(cfg.reading_score_mean, cfg.reading_score_sd)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    let scores: Vec<f64> = classrooms.iter().map(|_| normal.sample(&mut rng)).collect();

    let students = dataset
        .students()
        .iter()
        .map(|s| {
            let si = schools.binary_search(&s.school_id).expect("school listed");
            let ci = classrooms.binary_search(&s.classroom_id).expect("classroom listed");
            StudentRecord {
                metadata: StudentMetadata {
                    metro: metro[si],
                    ses: ses[si],
                    reading_score: scores[ci],
                },
                ..s.clone()
            }
        })
        .collect();
    Ok(Dataset::new(students)?)
}

/// `generate` followed by `emit_metadata`.
pub fn generate_with_metadata(cfg: &CohortConfig) -> Result<Cohort, SynthError> {
    let mut cohort = generate(cfg)?;
    cohort.dataset = emit_metadata(cfg, &cohort.dataset)?;
    Ok(cohort)
}
