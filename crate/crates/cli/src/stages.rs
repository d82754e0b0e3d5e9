use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use study_core::corpus::{load_dataset, write_dataset, Dataset, Splits, Vocabulary};
use study_core::evalharness::{
    metric_report, render_table, report_csv, slice, slice_csv, EvalEvent, EventLog, MetricReport, RankedEvent,
    StudentAttributes,
};
use study_core::knnrec::{read_index, write_index};
use study_core::model::{write_decoder, Decoder, DecoderConfig};
use study_core::pipeline::{pack_epoch, write_packed};

use crate::ablation::{run_ablation_in_memory, AblationKind};
use crate::experiment::{
    evaluate_decoder, evaluate_knn, evaluate_popularity, generate_dataset, knn_index, prepare, prepare_with,
    train_decoder, DecoderVariant, ModelKind, Prepared,
};
use crate::manifest::{append_manifest, file_sha256, sha256_hex, up_to_date, versions, write_atomic, write_atomic_bytes, RunManifest};
use crate::{CliError, ExperimentConfig};

pub const DATASET: &str = "dataset.tsv";
pub const VOCAB: &str = "prep/vocab.tsv";
pub const TRAIN_SPLIT: &str = "prep/train.tsv";
pub const VALIDATION_SPLIT: &str = "prep/validation.tsv";
pub const TEST_SPLIT: &str = "prep/test.tsv";
pub const PACKED_EPOCH0: &str = "prep/packed-epoch0.bin";
pub const KNN_INDEX: &str = "models/knn.index";
pub const FROZEN_CONFIG: &str = "config.toml";

/// Note carried by every emitted metric table.
const SCALE_NOTE: &str = "# desk-scale run: batch size and model width are scaled down from the published setting";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Inputs and config unchanged since the last run; nothing was written.
    UpToDate,
}

/// What a decoder checkpoint was trained as, stored next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    model: ModelKind,
    variant: DecoderVariant,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct LogTotals {
    oov_skipped: usize,
    failed: usize,
}

pub struct StageDir {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config sections serialize")
}

impl StageDir {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let dir = cfg.paths.stage_dir.clone();
        Ok(Self { cfg, dir })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Hash of the resolved config without its paths, so the same
    /// experiment in two directories hashes alike.
    pub fn config_hash(&self) -> String {
        let mut c = self.cfg.clone();
        c.paths = Default::default();
        sha256_hex(c.to_toml().as_bytes())
    }

    fn checksum(&self, rel: &str) -> Result<String, CliError> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(CliError::MissingArtifact(p));
        }
        file_sha256(&p)
    }

    /// Runs `body` unless the last run of `stage` had the same fingerprint
    /// and left its artifacts untouched. `body` returns the relative paths it
    /// wrote and an optional step count.
    fn run(
        &self,
        stage: &str,
        inputs: &[&str],
        sections: &[String],
        body: impl FnOnce() -> Result<(Vec<String>, Option<u64>), CliError>,
    ) -> Result<StageOutcome, CliError> {
        let mut fp = format!("{stage}\n");
        for rel in inputs {
            let _ = writeln!(fp, "{rel}={}", self.checksum(rel)?);
        }
        for s in sections {
            fp.push_str(s);
            fp.push('\n');
        }
        let fingerprint = sha256_hex(fp.as_bytes());
        if up_to_date(&self.dir, stage, &fingerprint)?.is_some() {
            log::info!("{stage}: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        write_atomic_bytes(&self.path(FROZEN_CONFIG), self.cfg.to_toml().as_bytes())?;
        let started = Instant::now();
        let (written, steps) = body()?;
        let mut artifacts = std::collections::BTreeMap::new();
        for rel in written {
            let sum = self.checksum(&rel)?;
            artifacts.insert(rel, sum);
        }
        append_manifest(
            &self.dir,
            &RunManifest {
                stage: stage.to_string(),
                config_hash: self.config_hash(),
                fingerprint,
                artifacts,
                wall_clock_secs: started.elapsed().as_secs_f64(),
                steps,
                versions: versions(),
            },
        )?;
        log::info!("{stage}: done in {:.1}s", started.elapsed().as_secs_f64());
        Ok(StageOutcome::Ran)
    }

    pub fn generate(&self) -> Result<StageOutcome, CliError> {
        let cfg = &self.cfg;
        self.run("generate", &[], &[json(&cfg.seed), json(&cfg.cohort)], || {
            let ds = generate_dataset(cfg)?;
            save(&self.path(DATASET), &ds)?;
            Ok((vec![DATASET.to_string()], None))
        })
    }

    pub fn preprocess(&self) -> Result<StageOutcome, CliError> {
        let cfg = &self.cfg;
        let sections = [json(&cfg.split), json(&cfg.vocab), json(&cfg.pipeline)];
        self.run("preprocess", &[DATASET], &sections, || {
            let prepared = prepare(load(&self.path(DATASET))?, cfg)?;
            if let Some((have, asked)) = prepared.vocab.shrunk() {
                log::warn!("vocabulary holds {have} items, {asked} requested");
            }
            write_atomic(&self.path(VOCAB), |w| prepared.vocab.write(w))?;
            save(&self.path(TRAIN_SPLIT), &prepared.splits.train)?;
            save(&self.path(VALIDATION_SPLIT), &prepared.splits.validation)?;
            save(&self.path(TEST_SPLIT), &prepared.splits.test)?;
            let packed = pack_epoch(&prepared.train, &cfg.pipeline, 0)?;
            write_atomic(&self.path(PACKED_EPOCH0), |w| write_packed(w, &packed))?;
            let written = [VOCAB, TRAIN_SPLIT, VALIDATION_SPLIT, TEST_SPLIT, PACKED_EPOCH0];
            Ok((written.map(String::from).to_vec(), None))
        })
    }

    /// Reassembles the preprocessed splits.
    pub fn load_prepared(&self) -> Result<Prepared, CliError> {
        let vocab_path = self.path(VOCAB);
        let f = std::fs::File::open(&vocab_path).map_err(|_| CliError::MissingArtifact(vocab_path.clone()))?;
        let vocab = Vocabulary::read(std::io::BufReader::new(f))?;
        let splits = Splits {
            train: load(&self.path(TRAIN_SPLIT))?,
            validation: load(&self.path(VALIDATION_SPLIT))?,
            test: load(&self.path(TEST_SPLIT))?,
        };
        Ok(prepare_with(load(&self.path(DATASET))?, splits, vocab))
    }

    fn model_files(model: ModelKind) -> [String; 4] {
        let m = model.label();
        [
            format!("models/{m}.ckpt"),
            format!("models/{m}.cfg"),
            format!("models/{m}.json"),
            format!("models/{m}-loss.csv"),
        ]
    }

    /// The decoder variant `model` trains as under the current config.
    pub fn variant(&self, model: ModelKind) -> Result<DecoderVariant, CliError> {
        match model {
            ModelKind::Study => Ok(DecoderVariant::study(&self.cfg)),
            ModelKind::Individual => Ok(DecoderVariant::individual(&self.cfg)),
            _ => Err(CliError::Config(format!("{model} is not a decoder"))),
        }
    }

    pub fn train(&self, model: ModelKind) -> Result<StageOutcome, CliError> {
        let cfg = &self.cfg;
        let stage = format!("train:{model}");
        match model {
            ModelKind::Popularity => Err(CliError::Config("the popularity baseline has nothing to train".into())),
            ModelKind::Knn => self.run(&stage, &[VOCAB, TRAIN_SPLIT], &[json(&cfg.knn)], || {
                let prepared = self.load_prepared()?;
                let index = knn_index(&prepared, cfg)?;
                write_atomic(&self.path(KNN_INDEX), |w| write_index(w, &index))?;
                Ok((vec![KNN_INDEX.to_string()], None))
            }),
            ModelKind::Study | ModelKind::Individual => {
                let variant = self.variant(model)?;
                let sections = [json(&variant), json(&cfg.decoder), json(&cfg.train), json(&cfg.seed)];
                self.run(&stage, &[VOCAB, TRAIN_SPLIT], &sections, || {
                    let prepared = self.load_prepared()?;
                    let (decoder, outcome) = train_decoder(&prepared.train, prepared.vocab_tokens(), cfg, &variant)?;
                    let files = Self::model_files(model);
                    let mut ckpt = Vec::new();
                    write_decoder(&mut ckpt, &decoder)?;
                    write_atomic_bytes(&self.path(&files[0]), &ckpt)?;
                    write_atomic_bytes(&self.path(&files[1]), decoder.config.to_sidecar().as_bytes())?;
                    let meta = serde_json::to_string_pretty(&ModelMeta { model, variant }).expect("meta serializes");
                    write_atomic_bytes(&self.path(&files[2]), meta.as_bytes())?;
                    write_atomic_bytes(&self.path(&files[3]), outcome.trace_csv().as_bytes())?;
                    Ok((files.to_vec(), Some(cfg.train.steps)))
                })
            }
        }
    }

    fn load_decoder(&self, model: ModelKind) -> Result<(Decoder, DecoderVariant), CliError> {
        let files = Self::model_files(model);
        for f in &files[..3] {
            if !self.path(f).exists() {
                return Err(CliError::MissingArtifact(self.path(f)));
            }
        }
        let config = DecoderConfig::from_sidecar(&std::fs::read_to_string(self.path(&files[1]))?)?;
        let decoder = study_core::model::read_decoder(std::io::BufReader::new(std::fs::File::open(self.path(&files[0]))?), config)?;
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(self.path(&files[2]))?)
            .map_err(|e| CliError::Stage(format!("{}: {e}", files[2])))?;
        Ok((decoder, meta.variant))
    }

    fn events_file(model: ModelKind) -> (String, String, String) {
        let m = model.label();
        (
            format!("reports/events-{m}.csv"),
            format!("reports/events-{m}.json"),
            format!("reports/metrics-{m}.csv"),
        )
    }

    /// Ranks every test event with `model`.
    pub fn eval(&self, model: ModelKind) -> Result<StageOutcome, CliError> {
        let cfg = &self.cfg;
        let stage = format!("eval:{model}");
        let mut inputs = vec![VOCAB, TRAIN_SPLIT, TEST_SPLIT];
        let files = Self::model_files(model);
        match model {
            ModelKind::Study | ModelKind::Individual => inputs.extend(files[..3].iter().map(String::as_str)),
            ModelKind::Knn => inputs.push(KNN_INDEX),
            ModelKind::Popularity => {}
        }
        self.run(&stage, &inputs, &[json(&cfg.eval), json(&cfg.seed)], || {
            let prepared = self.load_prepared()?;
            let (log, report) = match model {
                ModelKind::Popularity => evaluate_popularity(&prepared, cfg)?,
                ModelKind::Knn => {
                    let f = std::fs::File::open(self.path(KNN_INDEX))?;
                    evaluate_knn(read_index(std::io::BufReader::new(f))?, &prepared, cfg)?
                }
                _ => {
                    let (decoder, variant) = self.load_decoder(model)?;
                    evaluate_decoder(model.label(), &decoder, &variant, &prepared, cfg)?
                }
            };
            let (events, totals, metrics) = Self::events_file(model);
            write_atomic(&self.path(&events), |w| write_events(w, &log))?;
            let t = LogTotals {
                oov_skipped: log.oov_skipped,
                failed: log.failed,
            };
            write_atomic_bytes(&self.path(&totals), json(&t).as_bytes())?;
            write_atomic_bytes(&self.path(&metrics), report_csv(&[report]).as_bytes())?;
            Ok((vec![events, totals, metrics], None))
        })
    }

    fn load_events(&self, model: ModelKind) -> Result<EventLog, CliError> {
        let (events, totals, _) = Self::events_file(model);
        let f = std::fs::File::open(self.path(&events)).map_err(|_| CliError::MissingArtifact(self.path(&events)))?;
        let mut log = read_events(std::io::BufReader::new(f))?;
        let t: LogTotals = serde_json::from_str(&std::fs::read_to_string(self.path(&totals))?)
            .map_err(|e| CliError::Stage(format!("{totals}: {e}")))?;
        log.oov_skipped = t.oov_skipped;
        log.failed = t.failed;
        Ok(log)
    }

    /// Models with an event log on disk, in canonical order.
    pub fn evaluated_models(&self) -> Vec<ModelKind> {
        ModelKind::ALL
            .into_iter()
            .filter(|&m| self.path(&Self::events_file(m).0).exists())
            .collect()
    }

    /// Aggregates every evaluated model into the metric CSVs, the text
    /// table and one slice CSV per variable.
    pub fn report(&self) -> Result<StageOutcome, CliError> {
        let cfg = &self.cfg;
        let models = self.evaluated_models();
        if models.is_empty() {
            return Err(CliError::MissingArtifact(self.path("reports/events-<model>.csv")));
        }
        let event_files: Vec<(String, String)> = models.iter().map(|&m| {
            let (e, t, _) = Self::events_file(m);
            (e, t)
        }).collect();
        let mut inputs: Vec<&str> = vec![DATASET, TEST_SPLIT];
        for (e, t) in &event_files {
            inputs.push(e);
            inputs.push(t);
        }
        self.run("report", &inputs, &[json(&cfg.eval), json(&cfg.seed)], || {
            let dataset = load(&self.path(DATASET))?;
            let test = load(&self.path(TEST_SPLIT))?;
            let short: HashSet<u64> = test
                .students()
                .iter()
                .filter(|s| s.interactions.len() < cfg.eval.short_history)
                .map(|s| s.student_id)
                .collect();
            let attributes = StudentAttributes::from_dataset(&dataset);
            let mut all = Vec::new();
            let mut short_reports = Vec::new();
            let mut per_slice: Vec<Vec<Vec<_>>> = vec![Vec::new(); cfg.eval.slices().len()];
            for &m in &models {
                let log = self.load_events(m)?;
                all.push(metric_report(m.label(), &log, &cfg.eval.metrics)?);
                let restricted = log.restrict(|s| short.contains(&s));
                short_reports.push(metric_report(m.label(), &restricted, &cfg.eval.metrics)?);
                for (i, spec) in cfg.eval.slices().iter().enumerate() {
                    per_slice[i].push(slice(m.label(), &log, spec, &attributes, &cfg.eval.metrics)?);
                }
            }
            let mut written = vec![
                "reports/metrics.csv".to_string(),
                "reports/metrics-short.csv".to_string(),
                "reports/table.txt".to_string(),
            ];
            write_atomic_bytes(&self.path(&written[0]), report_csv(&all).as_bytes())?;
            write_atomic_bytes(&self.path(&written[1]), report_csv(&short_reports).as_bytes())?;
            write_atomic_bytes(&self.path(&written[2]), table_text(&all, &short_reports, cfg.eval.short_history).as_bytes())?;
            for (spec, bins) in cfg.eval.slices().iter().zip(&per_slice) {
                let rel = format!("reports/slice-{}.csv", spec.variable.label());
                write_atomic_bytes(&self.path(&rel), slice_csv(spec.variable, bins).as_bytes())?;
                written.push(rel);
            }
            Ok((written, None))
        })
    }

    pub fn ablate(&self, kind: AblationKind) -> Result<StageOutcome, CliError> {
        let cfg = &self.cfg;
        let stage = format!("ablate:{kind}");
        let mut whole = cfg.clone();
        whole.paths = Default::default();
        self.run(&stage, &[VOCAB, TRAIN_SPLIT, TEST_SPLIT], &[whole.to_toml()], || {
            let prepared = self.load_prepared()?;
            let run = run_ablation_in_memory(kind, &prepared, cfg)?;
            let rel = format!("ablations/{kind}.csv");
            write_atomic_bytes(&self.path(&rel), run.csv().as_bytes())?;
            Ok((vec![rel], Some(cfg.train.steps * run.settings.len() as u64)))
        })
    }

    /// Every stage in order: generate, preprocess, train and evaluate all
    /// four models, report.
    pub fn run_all(&self) -> Result<(), CliError> {
        self.generate()?;
        self.preprocess()?;
        for m in [ModelKind::Study, ModelKind::Individual, ModelKind::Knn] {
            self.train(m)?;
        }
        for m in ModelKind::ALL {
            self.eval(m)?;
        }
        self.report()?;
        Ok(())
    }
}

fn save(path: &Path, ds: &Dataset) -> Result<(), CliError> {
    write_atomic(path, |w| write_dataset(ds, w))
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    Ok(load_dataset(path)?)
}

fn table_text(all: &[MetricReport], short: &[MetricReport], threshold: usize) -> String {
    format!(
        "{SCALE_NOTE}\n\nhits@n (%), all test students\n{}\nhits@n (%), students with fewer than {threshold} evaluation interactions\n{}",
        render_table(all),
        render_table(short)
    )
}

const EVENTS_HEADER: &str = "student_id,index,target,is_continuation,is_novel,rank";

fn write_events(out: &mut dyn Write, log: &EventLog) -> std::io::Result<()> {
    writeln!(out, "{EVENTS_HEADER}")?;
    for e in &log.events {
        let ev = &e.event;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            ev.student_id, ev.index, ev.target, ev.is_continuation as u8, ev.is_novel as u8, e.rank
        )?;
    }
    Ok(())
}

fn read_events<R: BufRead>(input: R) -> Result<EventLog, CliError> {
    let bad = |line: usize| CliError::Stage(format!("malformed event log at line {line}"));
    let mut lines = input.lines();
    if lines.next().transpose()?.as_deref() != Some(EVENTS_HEADER) {
        return Err(bad(1));
    }
    let mut log = EventLog::default();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i + 2));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(i + 2));
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(i + 2)),
        };
        log.events.push(RankedEvent {
            event: EvalEvent {
                student_id: num(f[0])?,
                index: num(f[1])? as u32,
                target: num(f[2])? as u32,
                is_continuation: flag(f[3])?,
                is_novel: flag(f[4])?,
            },
            rank: num(f[5])? as u32,
        });
    }
    Ok(log)
}
