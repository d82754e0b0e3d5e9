//! In-memory experiment steps shared by the stage runners and the
//! acceptance suite.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use study_core::corpus::{build_vocab, split, tokenize, Dataset, Popularity, Splits, StudentId, TokenizedStudent, Vocabulary};
use study_core::evalharness::{
    collect_events, metric_report, DecoderRecommender, EventLog, KnnRecommender, MetricReport, Packing,
    PopularityRecommender, Recommender,
};
use study_core::knnrec::{build_index, InvertedIndex};
use study_core::model::{train, Decoder, DecoderConfig, MaskMode, TrainOutcome};
use study_core::pipeline::{pack_epoch, window_all, Grouping, PipelineConfig};
use study_core::rng::{mix, salt};
use study_core::synthgen::generate_with_metadata;

use crate::{CliError, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Study,
    Individual,
    Knn,
    Popularity,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::Study, Self::Individual, Self::Knn, Self::Popularity];

    pub fn label(self) -> &'static str {
        match self {
            Self::Study => "study",
            Self::Individual => "individual",
            Self::Knn => "knn",
            Self::Popularity => "popularity",
        }
    }

    pub fn is_decoder(self) -> bool {
        matches!(self, Self::Study | Self::Individual)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| format!("unknown model {s:?}; expected study, individual, knn or popularity"))
    }
}

/// How a decoder sees its data: the mask it attends under and the layout
/// of its datapoints. `grouping: None` means per-student windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderVariant {
    pub mask_mode: MaskMode,
    pub grouping: Option<Grouping>,
    pub context_len: usize,
    pub segment_len: usize,
}

impl DecoderVariant {
    /// The joint model as configured.
    pub fn study(cfg: &ExperimentConfig) -> Self {
        Self {
            mask_mode: cfg.decoder.mask_mode,
            grouping: Some(cfg.pipeline.grouping),
            context_len: cfg.pipeline.context_len,
            segment_len: cfg.pipeline.segment_len,
        }
    }

    /// Per-student windows under the positional mask.
    pub fn individual(cfg: &ExperimentConfig) -> Self {
        Self {
            mask_mode: MaskMode::Positional,
            grouping: None,
            context_len: cfg.pipeline.context_len,
            segment_len: cfg.pipeline.context_len,
        }
    }

    pub fn pipeline(&self, seed: u64) -> Option<PipelineConfig> {
        self.grouping.map(|grouping| PipelineConfig {
            context_len: self.context_len,
            segment_len: self.segment_len,
            grouping,
            seed,
        })
    }

    pub fn packing(&self, seed: u64) -> Packing {
        match self.pipeline(seed) {
            Some(p) => Packing::Grouped(p),
            None => Packing::Windows(self.context_len),
        }
    }
}

/// A cohort split, tokenized against a training-only vocabulary.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub splits: Splits,
    pub vocab: Vocabulary,
    pub train: Vec<TokenizedStudent>,
    pub test: Vec<TokenizedStudent>,
    pub popularity: Popularity,
}

impl Prepared {
    pub fn vocab_tokens(&self) -> usize {
        self.vocab.num_tokens()
    }

    /// The same preparation restricted to a subset of training students;
    /// the vocabulary and test set are kept.
    pub fn with_train_students(&self, keep: &HashSet<StudentId>) -> Self {
        let train_ds = self.splits.train.retain_students(|s| keep.contains(&s));
        let train = tokenize(&train_ds, &self.vocab);
        let popularity = Popularity::from_students(&train, self.vocab.num_tokens());
        Self {
            dataset: self.dataset.clone(),
            splits: Splits {
                train: train_ds,
                validation: self.splits.validation.clone(),
                test: self.splits.test.clone(),
            },
            vocab: self.vocab.clone(),
            train,
            test: self.test.clone(),
            popularity,
        }
    }
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let cohort = generate_with_metadata(&cfg.cohort)?;
    for w in &cohort.warnings {
        log::warn!("cohort calibration: {w}");
    }
    Ok(cohort.dataset)
}

pub fn prepare(dataset: Dataset, cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let splits = split(&dataset, &cfg.split)?;
    let vocab = build_vocab(splits.train.interactions(), cfg.vocab.size)?;
    Ok(prepare_with(dataset, splits, vocab))
}

pub fn prepare_with(dataset: Dataset, splits: Splits, vocab: Vocabulary) -> Prepared {
    let train = tokenize(&splits.train, &vocab);
    let test = tokenize(&splits.test, &vocab);
    let popularity = Popularity::from_students(&train, vocab.num_tokens());
    Prepared {
        dataset,
        splits,
        vocab,
        train,
        test,
        popularity,
    }
}

pub fn decoder_config(cfg: &ExperimentConfig, variant: &DecoderVariant, vocab_tokens: usize) -> DecoderConfig {
    DecoderConfig {
        vocab_size: vocab_tokens,
        max_len: variant.context_len,
        mask_mode: variant.mask_mode,
        ..cfg.decoder
    }
}

/// Trains a fresh decoder on `train`. Grouped variants repack every epoch;
/// windowed ones reuse the same windows under a new shuffle.
pub fn train_decoder(
    train_set: &[TokenizedStudent],
    vocab_tokens: usize,
    cfg: &ExperimentConfig,
    variant: &DecoderVariant,
) -> Result<(Decoder, TrainOutcome), CliError> {
    let dcfg = decoder_config(cfg, variant, vocab_tokens);
    let mut decoder = Decoder::init(dcfg, cfg.seed)?;
    let outcome = match variant.pipeline(cfg.seed) {
        Some(p) => train(&mut decoder, &cfg.train, |e| pack_epoch(train_set, &p, e).map_err(|x| x.to_string()))?,
        None => {
            let windows = window_all(train_set, variant.context_len);
            train(&mut decoder, &cfg.train, |_| Ok(windows.clone()))?
        }
    };
    Ok((decoder, outcome))
}

pub fn knn_index(prepared: &Prepared, cfg: &ExperimentConfig) -> Result<InvertedIndex, CliError> {
    Ok(build_index(&prepared.train, cfg.knn, prepared.vocab_tokens())?)
}

/// Ranks every test event with `recommender` and summarizes it.
pub fn evaluate(
    name: &str,
    recommender: &dyn Recommender,
    prepared: &Prepared,
    cfg: &ExperimentConfig,
) -> Result<(EventLog, MetricReport), CliError> {
    let log = collect_events(&prepared.test, &prepared.train, recommender)?;
    if log.failed > 0 {
        log::warn!("{name}: {} events could not be ranked", log.failed);
    }
    let report = metric_report(name, &log, &cfg.eval.metrics)?;
    Ok((log, report))
}

pub fn evaluate_decoder(
    name: &str,
    decoder: &Decoder,
    variant: &DecoderVariant,
    prepared: &Prepared,
    cfg: &ExperimentConfig,
) -> Result<(EventLog, MetricReport), CliError> {
    let rec = DecoderRecommender {
        name: name.to_string(),
        decoder,
        packing: variant.packing(cfg.seed),
        popularity: prepared.popularity.clone(),
    };
    evaluate(name, &rec, prepared, cfg)
}

pub fn evaluate_popularity(prepared: &Prepared, cfg: &ExperimentConfig) -> Result<(EventLog, MetricReport), CliError> {
    let rec = PopularityRecommender {
        popularity: prepared.popularity.clone(),
    };
    evaluate("popularity", &rec, prepared, cfg)
}

pub fn evaluate_knn(index: InvertedIndex, prepared: &Prepared, cfg: &ExperimentConfig) -> Result<(EventLog, MetricReport), CliError> {
    let rec = KnnRecommender { index };
    evaluate("knn", &rec, prepared, cfg)
}

/// Test students with fewer than `threshold` evaluation interactions.
pub fn short_history_students(test: &[TokenizedStudent], threshold: usize) -> HashSet<StudentId> {
    test.iter().filter(|s| s.tokens.len() < threshold).map(|s| s.student_id).collect()
}

/// Keeps the first `ceil(fraction * n)` training students under a seeded
/// order, so smaller fractions are always subsets of larger ones.
pub fn taper_students(train: &[TokenizedStudent], fraction: f64, seed: u64) -> HashSet<StudentId> {
    let mut ids: Vec<StudentId> = train.iter().map(|s| s.student_id).collect();
    ids.sort_by_key(|&id| (mix(seed, &[salt::TAPER, id]), id));
    let keep = ((fraction * ids.len() as f64).ceil() as usize).min(ids.len());
    ids.truncate(keep);
    ids.into_iter().collect()
}
