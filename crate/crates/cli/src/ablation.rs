use std::fmt;
use std::str::FromStr;

use study_core::evalharness::{metric_report, report_csv, DecoderRecommender, EventLog, MetricReport, REPORT_HEADER};
use study_core::pipeline::Grouping;

use crate::experiment::{evaluate, short_history_students, taper_students, train_decoder, DecoderVariant, Prepared};
use crate::{CliError, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    /// Segment length below the context length, so long histories share
    /// their context with peers.
    ForceMix,
    Grouping,
    /// Nested student-level subsets of the training split.
    Tapering,
}

impl AblationKind {
    pub const ALL: [AblationKind; 3] = [Self::ForceMix, Self::Grouping, Self::Tapering];

    pub fn label(self) -> &'static str {
        match self {
            Self::ForceMix => "force-mix",
            Self::Grouping => "grouping",
            Self::Tapering => "tapering",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected force-mix, grouping or tapering"))
    }
}

/// One trained-and-evaluated variant.
#[derive(Debug, Clone)]
pub struct AblationSetting {
    pub setting: String,
    pub log: EventLog,
    /// Over all test students.
    pub all: MetricReport,
    /// Over test students with a short evaluation history.
    pub short: MetricReport,
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub kind: AblationKind,
    pub settings: Vec<AblationSetting>,
}

impl AblationRun {
    pub fn setting(&self, name: &str) -> Option<&AblationSetting> {
        self.settings.iter().find(|s| s.setting == name)
    }

    pub fn csv(&self) -> String {
        let mut out = format!("setting,students,{REPORT_HEADER}\n");
        for s in &self.settings {
            for (group, report) in [("all", &s.all), ("short", &s.short)] {
                for line in report_csv(std::slice::from_ref(report)).lines().skip(1) {
                    out.push_str(&format!("{},{group},{line}\n", s.setting));
                }
            }
        }
        out
    }
}

fn variants(kind: AblationKind, cfg: &ExperimentConfig) -> Vec<(String, &'static str, DecoderVariant, f64)> {
    let study = DecoderVariant::study(cfg);
    match kind {
        AblationKind::ForceMix => {
            let c = cfg.pipeline.context_len;
            let s = cfg.ablation.force_mix_segment;
            vec![
                (format!("segment-{c}"), "study", DecoderVariant { segment_len: c, ..study }, 1.0),
                (format!("segment-{s}"), "study", DecoderVariant { segment_len: s, ..study }, 1.0),
            ]
        }
        AblationKind::Grouping => [Grouping::Classroom, Grouping::DistrictYear, Grouping::SingleGroup, Grouping::Individual]
            .into_iter()
            .map(|g| {
                (
                    g.to_string(),
                    "study",
                    DecoderVariant {
                        grouping: Some(g),
                        ..study
                    },
                    1.0,
                )
            })
            .collect(),
        AblationKind::Tapering => cfg
            .ablation
            .taper_fractions
            .iter()
            .flat_map(|&f| {
                let pct = (f * 100.0).round() as u32;
                [
                    (format!("taper-{pct}"), "study", study, f),
                    (format!("taper-{pct}"), "individual", DecoderVariant::individual(cfg), f),
                ]
            })
            .collect(),
    }
}

/// Trains and evaluates every variant of `kind`. Tapered models train on a
/// subset of students and keep that subset's popularity for cold starts;
/// all variants are scored on the full test set with the same novelty
/// reference.
pub fn run_ablation_in_memory(kind: AblationKind, prepared: &Prepared, cfg: &ExperimentConfig) -> Result<AblationRun, CliError> {
    let short = short_history_students(&prepared.test, cfg.eval.short_history);
    let mut settings = Vec::new();
    for (setting, model, variant, fraction) in variants(kind, cfg) {
        log::info!("ablation {kind}: training {model} for {setting}");
        let subset;
        let data = if fraction < 1.0 {
            subset = prepared.with_train_students(&taper_students(&prepared.train, fraction, cfg.seed));
            &subset
        } else {
            prepared
        };
        let (decoder, _) = train_decoder(&data.train, prepared.vocab_tokens(), cfg, &variant)?;
        let rec = DecoderRecommender {
            name: model.to_string(),
            decoder: &decoder,
            packing: variant.packing(cfg.seed),
            popularity: data.popularity.clone(),
        };
        let (log, all) = evaluate(model, &rec, prepared, cfg)?;
        let short_report = metric_report(model, &log.restrict(|s| short.contains(&s)), &cfg.eval.metrics)?;
        settings.push(AblationSetting {
            setting,
            log,
            all,
            short: short_report,
        });
    }
    Ok(AblationRun { kind, settings })
}
