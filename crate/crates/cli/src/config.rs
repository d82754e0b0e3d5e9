use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use study_core::corpus::SplitSpec;
use study_core::evalharness::{EvalConfig, SliceSpec, SliceVariable};
use study_core::knnrec::KnnConfig;
use study_core::model::{DecoderConfig, TrainConfig};
use study_core::numkernel::ScheduleConfig;
use study_core::pipeline::PipelineConfig;
use study_core::synthgen::CohortConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Directory holding every artifact of one experiment.
    pub stage_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            stage_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    /// Number of item tokens kept; rarer items map to OOV.
    pub size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { size: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    #[serde(flatten)]
    pub metrics: EvalConfig,
    /// Students with fewer evaluation interactions than this form the
    /// short-history group.
    pub short_history: usize,
    /// Engagement bin edges for the engagement slice.
    pub engagement_edges: Vec<f64>,
    /// Reading-score bin edges for the reading-score slice.
    pub reading_score_edges: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            metrics: EvalConfig::default(),
            short_history: 10,
            engagement_edges: vec![10.0, 35.0, 65.0],
            reading_score_edges: vec![-1.0, 0.0, 1.0],
        }
    }
}

impl EvalSettings {
    pub fn slices(&self) -> Vec<SliceSpec> {
        vec![
            SliceSpec::engagement(&self.engagement_edges),
            SliceSpec::categorical(SliceVariable::Metro),
            SliceSpec::categorical(SliceVariable::Ses),
            SliceSpec {
                variable: SliceVariable::ReadingScore,
                edges: self.reading_score_edges.clone(),
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Segment length of the Force Mix variant.
    pub force_mix_segment: usize,
    /// Fractions of training students kept by the tapering ablation.
    pub taper_fractions: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            force_mix_segment: 20,
            taper_fractions: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Everything one experiment needs. Component seeds are not read from the
/// file: [`ExperimentConfig::resolved`] derives all of them from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub cohort: CohortConfig,
    pub split: SplitSpec,
    pub vocab: VocabConfig,
    pub pipeline: PipelineConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub knn: KnnConfig,
    pub eval: EvalSettings,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            cohort: CohortConfig::default(),
            split: SplitSpec::default(),
            vocab: VocabConfig::default(),
            pipeline: PipelineConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig {
                steps: 3500,
                batch_size: 64,
                schedule: ScheduleConfig {
                    peak_rate: 0.01,
                    warmup_steps: 1000,
                    total_steps: 3500,
                },
                clip_norm: Some(1.0),
                ..TrainConfig::default()
            },
            knn: KnnConfig::default(),
            eval: EvalSettings::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copies the global seed into every component and ties the decoder's
    /// sequence length and vocabulary to the pipeline and vocabulary.
    pub fn resolved(mut self) -> Self {
        let seed = self.seed;
        self.cohort.seed = seed;
        self.split.seed = seed;
        self.pipeline.seed = seed;
        self.train.seed = seed;
        self.eval.metrics.seed = seed;
        self.decoder.max_len = self.pipeline.context_len;
        self.decoder.vocab_size = self.vocab.size + 3;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: String| Err(CliError::Config(e));
        if let Err(e) = self.cohort.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.pipeline.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.decoder.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.train.schedule.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.eval.metrics.validate() {
            return bad(e.to_string());
        }
        for s in self.eval.slices() {
            if let Err(e) = s.validate() {
                return bad(e.to_string());
            }
        }
        if self.vocab.size == 0 {
            return bad("vocabulary size must be positive".into());
        }
        if self.ablation.force_mix_segment == 0 || self.ablation.force_mix_segment > self.pipeline.context_len {
            return bad("force-mix segment length must lie in 1..=context_len".into());
        }
        if self.ablation.taper_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("taper fractions must lie in (0, 1]".into());
        }
        if self.paths.stage_dir.as_os_str().is_empty() {
            return bad("stage_dir is empty".into());
        }
        Ok(())
    }

    /// A 2,000-student cohort with a small decoder, for quick end-to-end runs.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.cohort.num_districts = 2;
        cfg.cohort.schools_per_district = 5;
        cfg.cohort.classrooms_per_school = 10;
        cfg.cohort.catalog_size = 300;
        cfg.vocab.size = 300;
        cfg.decoder = DecoderConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 16,
            d_k: 8,
            ff_width: 32,
            dropout: 0.0,
            ..DecoderConfig::default()
        };
        cfg.train.steps = 30;
        cfg.train.batch_size = 16;
        cfg.train.schedule = ScheduleConfig {
            peak_rate: 0.01,
            warmup_steps: 5,
            total_steps: 30,
        };
        cfg.eval.metrics.resamples = 20;
        cfg.resolved()
    }
}
