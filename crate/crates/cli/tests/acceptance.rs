//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=1,8` restricts the run to
//! the listed criteria.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use study_cli::experiment::{evaluate_decoder, generate_dataset, prepare, short_history_students, train_decoder};
use study_cli::{DecoderVariant, ExperimentConfig, StageDir};
use study_core::corpus::{build_vocab, tokenize, GroupKeys, Popularity, Token, TokenizedStudent};
use study_core::evalharness::{
    bootstrap_ci, collect_events, hits_at_n, metric_report, EvalConfig, EvalError, EvalEvent, EventLog, MetricReport,
    RankedEvent, Recommender, Subset, CUTOFFS,
};
use study_core::knnrec::{InvertedIndex, KnnConfig, SparseCounts};
use study_core::model::{gradient_check, leakage_audit, Decoder, DecoderConfig, MaskMode};
use study_core::numkernel::{lr_schedule, ScheduleConfig};
use study_core::pipeline::{pack_epoch, window_all, DataPoint, Grouping, PipelineConfig};
use study_core::synthgen::{generate, CohortConfig};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64, what: &str) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_secs as f64 {
        Ok(())
    } else {
        Err(format!("{what} took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()))
    }
}

/// Tokenized training students of a generated cohort.
fn cohort_students(cfg: &CohortConfig, vocab_size: usize) -> (Vec<TokenizedStudent>, usize) {
    let dataset = generate(cfg).expect("cohort").dataset;
    let vocab = build_vocab(dataset.interactions(), vocab_size).expect("vocab");
    (tokenize(&dataset, &vocab), vocab.num_tokens())
}

fn small_cohort(seed: u64) -> CohortConfig {
    CohortConfig {
        num_districts: 1,
        schools_per_district: 4,
        classrooms_per_school: 5,
        students_per_classroom: 20,
        catalog_size: 400,
        seed,
        ..CohortConfig::default()
    }
}

fn leakage() -> Verdict {
    let start = Instant::now();
    let (students, tokens) = cohort_students(&small_cohort(11), 400);
    let cfg = DecoderConfig {
        vocab_size: tokens,
        ..DecoderConfig::default()
    };
    let pcfg = PipelineConfig {
        context_len: cfg.max_len,
        segment_len: 20,
        grouping: Grouping::Classroom,
        seed: 11,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut datapoints: Vec<DataPoint> = pack_epoch(&students, &pcfg, 0).expect("pack");
    datapoints.retain(|dp| dp.owners.iter().flatten().collect::<HashSet<_>>().len() > 1);
    let picked = rand::seq::index::sample(&mut rng, datapoints.len(), 120.min(datapoints.len()));
    let mut total = study_core::model::LeakageReport::default();
    for (n, i) in picked.into_iter().enumerate() {
        let decoder = Decoder::init(cfg, n as u64).expect("init");
        let mut dp = datapoints[i].clone();
        if n % 4 == 0 {
            dp.pad_to(cfg.max_len);
        }
        total.merge(&leakage_audit(&decoder, &dp, &mut rng).expect("audit"));
    }
    within(start.elapsed(), 120, "leakage suite")?;
    check(
        total.clean() && total.rows_checked > 0 && total.grads_checked > 0,
        format!(
            "120 multi-student datapoints, {} rows compared, {} changed; {} hidden embedding rows, {} with nonzero gradient; {:.1}s",
            total.rows_checked,
            total.rows_changed,
            total.grads_checked,
            total.grads_nonzero,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn bits(x: &[f32]) -> Vec<u32> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn student(id: u64, tokens: Vec<Token>, timestamps: Vec<i64>) -> TokenizedStudent {
    TokenizedStudent {
        student_id: id,
        keys: GroupKeys {
            classroom_id: 1,
            school_id: 1,
            district_id: 1,
            grade_level: 4,
        },
        school_year: 1,
        tokens,
        timestamps,
    }
}

fn equivalence() -> Verdict {
    let (students, tokens) = cohort_students(&small_cohort(12), 400);
    let temporal = Decoder::init(
        DecoderConfig {
            vocab_size: tokens,
            dropout: 0.0,
            init_std: 0.2,
            ..DecoderConfig::default()
        },
        12,
    )
    .expect("init");
    let positional = Decoder {
        config: DecoderConfig {
            mask_mode: MaskMode::Positional,
            ..temporal.config
        },
        params: temporal.params.clone(),
    };
    let windows = window_all(&students, temporal.config.max_len);
    let mut mismatched = 0;
    for dp in windows.iter().take(300) {
        let (a, b) = (temporal.logits(dp).expect("fwd"), positional.logits(dp).expect("fwd"));
        if bits(a.data()) != bits(b.data()) {
            mismatched += 1;
        }
    }

    // the peer's first interaction at t=20 precedes student 1's second at t=30
    let pair = |peer: Token| {
        let a = student(1, vec![5, 6, 7], vec![10, 30, 50]);
        let b = student(2, vec![peer, 8, 9], vec![20, 40, 60]);
        let pcfg = PipelineConfig {
            context_len: 40,
            segment_len: 10,
            grouping: Grouping::SingleGroup,
            seed: 0,
        };
        pack_epoch(&[a, b], &pcfg, 0).expect("pack").remove(0)
    };
    let (x, y) = (pair(11), pair(12));
    let k = (0..x.len()).find(|&k| x.owners[k] == Some(1) && x.timestamps[k] == 30).expect("position");
    let (lx, ly) = (temporal.logits(&x).expect("fwd"), temporal.logits(&y).expect("fwd"));
    let influence: f32 = lx.row(k).iter().zip(ly.row(k)).map(|(a, b)| (a - b).abs()).sum();
    check(
        mismatched == 0 && influence > 0.0,
        format!(
            "{} single-student windows, {mismatched} differ between masks; peer influence on a later position {influence:.3e}",
            windows.len().min(300)
        ),
    )
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let cfg = DecoderConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 8,
        d_k: 4,
        ff_width: 16,
        vocab_size: 14,
        max_len: 12,
        dropout: 0.0,
        init_std: 0.5,
        ..DecoderConfig::default()
    };
    let pcfg = PipelineConfig {
        context_len: 12,
        segment_len: 4,
        grouping: Grouping::SingleGroup,
        seed: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (0.0f64, String::new());
    let mut tensors = 0;
    for seed in 0..4 {
        let a = student(1, (0..4).map(|_| rng.random_range(3..14)).collect(), vec![1, 4, 6, 9]);
        let b = student(2, (0..3).map(|_| rng.random_range(3..14)).collect(), vec![2, 5, 7]);
        let dp = pack_epoch(&[a, b], &pcfg, seed).expect("pack").remove(0);
        let decoder = Decoder::init(cfg, seed).expect("init");
        for c in gradient_check(&decoder, &dp, 1e-3, 1e-2, 16, &mut rng).expect("fd") {
            tensors += 1;
            if c.max_rel_error > worst.0 {
                worst = (c.max_rel_error, c.name);
            }
        }
    }
    within(start.elapsed(), 300, "gradient check")?;
    check(
        worst.0 <= 1e-3,
        format!(
            "{tensors} tensor checks, worst relative error {:.2e} in {}; {:.1}s",
            worst.0,
            worst.1,
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Brute-force cosine over a dense matrix: max similarity per target item,
/// ties broken by popularity then token id.
fn dense_ranking(rows: &[(Vec<u64>, Token)], pop: &Popularity, q: &[u64]) -> Vec<Token> {
    let v = q.len();
    let nq: u64 = q.iter().map(|c| c * c).sum();
    let mut best = vec![0.0f64; v];
    for (x, target) in rows {
        let dot: u64 = q.iter().zip(x).map(|(a, b)| a * b).sum();
        let nx: u64 = x.iter().map(|c| c * c).sum();
        let sim = if dot == 0 { 0.0 } else { dot as f64 / ((nq as f64) * (nx as f64)).sqrt() };
        best[*target as usize] = best[*target as usize].max(sim);
    }
    let mut tokens: Vec<Token> = (2..v as Token).collect();
    tokens.sort_by(|&a, &b| {
        best[b as usize]
            .partial_cmp(&best[a as usize])
            .unwrap()
            .then(pop.count(b).cmp(&pop.count(a)))
            .then(a.cmp(&b))
    });
    tokens
}

fn random_counts(rng: &mut ChaCha8Rng, vocab: usize, min: usize) -> SparseCounts {
    let k = rng.random_range(min..6);
    // few distinct values so that ties are common
    SparseCounts::from_entries((0..k).map(|_| (rng.random_range(2..vocab as Token), rng.random_range(1..3))).collect())
}

fn knn_oracle() -> Verdict {
    let vocab = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = vec![0u64; vocab];
    let pairs: Vec<(SparseCounts, Token)> = (0..5000)
        .map(|_| {
            let target = rng.random_range(2..vocab as Token);
            counts[target as usize] += rng.random_range(0..3);
            (random_counts(&mut rng, vocab, 1), target)
        })
        .collect();
    let dense = |x: &SparseCounts| (0..vocab as Token).map(|t| x.get(t) as u64).collect::<Vec<u64>>();
    let rows: Vec<(Vec<u64>, Token)> = pairs.iter().map(|(x, t)| (dense(x), *t)).collect();
    let index = InvertedIndex::from_vectors(KnnConfig::default(), pairs, Popularity::from_counts(counts)).expect("index");
    let queries: Vec<SparseCounts> = (0..1000).map(|_| random_counts(&mut rng, vocab, 0)).collect();

    let start = Instant::now();
    let ranked: Vec<Vec<Token>> = queries.iter().map(|q| index.rank(q)).collect();
    let elapsed = start.elapsed();
    let mismatched = queries
        .iter()
        .zip(&ranked)
        .filter(|(q, r)| **r != dense_ranking(&rows, index.popularity(), &dense(q)))
        .count();
    within(elapsed, 60, "1,000 index queries")?;
    check(
        mismatched == 0,
        format!(
            "1000 queries over 5000 vectors, {mismatched} rankings differ from the dense oracle; index time {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Monotone in the cutoff and nested across subsets.
fn report_properties(report: &MetricReport, log: &EventLog) -> Result<(), String> {
    for subset in Subset::ALL {
        let means: Vec<f64> = CUTOFFS.iter().filter_map(|&n| report.mean(subset, n)).collect();
        if means.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("{}: hits@n not monotone on {}", report.model, subset.label()));
        }
    }
    if log.events.iter().any(|e| e.event.is_novel && e.event.is_continuation) {
        return Err(format!("{}: a novel event is a continuation", report.model));
    }
    let count = |s: Subset| log.events.iter().filter(|e| e.event.in_subset(s)).count();
    if !(count(Subset::Novel) <= count(Subset::NonContinuation) && count(Subset::NonContinuation) <= count(Subset::All)) {
        return Err(format!("{}: subsets are not nested", report.model));
    }
    Ok(())
}

struct Random(u64);

impl Recommender for Random {
    fn name(&self) -> &str {
        "random"
    }

    fn rank_all(&self, students: &[TokenizedStudent]) -> Result<Vec<Vec<Option<u32>>>, EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        Ok(students
            .iter()
            .map(|s| s.tokens.iter().map(|_| Some(rng.random_range(1..25))).collect())
            .collect())
    }
}

fn metric_properties() -> Verdict {
    let ranked = |student, rank| RankedEvent {
        event: EvalEvent {
            student_id: student,
            index: 0,
            target: 5,
            is_continuation: false,
            is_novel: false,
        },
        rank,
    };
    let mut events: Vec<RankedEvent> = (0..100).map(|_| ranked(1, 1)).collect();
    events.push(ranked(2, 7));
    let weighted = hits_at_n(&events, 1, Subset::All);
    if weighted != Some(50.0) {
        return Err(format!("100-event and 1-event students give {weighted:?}, expected 50.0"));
    }

    let values: Vec<f64> = (0..200).map(|i| ((i * 37) % 100) as f64).collect();
    if bootstrap_ci(&values, 200, 0.95, 9) != bootstrap_ci(&values, 200, 0.95, 9) {
        return Err("bootstrap differs under the same seed".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..50u64 {
        let students: Vec<TokenizedStudent> = (0..40)
            .map(|i| {
                let n = rng.random_range(1..15);
                student(i, (0..n).map(|_| rng.random_range(2..12)).collect(), (0..n as i64).collect())
            })
            .collect();
        let prior: Vec<TokenizedStudent> = (0..40).step_by(2).map(|i| student(i, vec![3, 4, 5], vec![0, 1, 2])).collect();
        let log = collect_events(&students, &prior, &Random(seed)).map_err(|e| e.to_string())?;
        let cfg = EvalConfig {
            seed,
            ..EvalConfig::default()
        };
        let report = metric_report("random", &log, &cfg).map_err(|e| e.to_string())?;
        if report != metric_report("random", &log, &cfg).map_err(|e| e.to_string())? {
            return Err(format!("report for seed {seed} is not deterministic"));
        }
        report_properties(&report, &log)?;
    }
    Ok("weighting example gives 50.0; bootstrap repeatable; 50 random logs monotone and nested".into())
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct SeedResult {
    seed: u64,
    /// Hits@1 over students with short evaluation histories.
    study_short: (f64, f64, f64),
    individual_short: (f64, f64, f64),
    /// Hits@1 over all test students.
    classroom_all: f64,
    single_all: f64,
    individual_all: (f64, f64, f64),
}

fn hits1(report: &MetricReport) -> Result<(f64, f64, f64), String> {
    let row = report.get(Subset::All, 1).ok_or("no hits@1 row")?;
    match (row.mean, row.ci_low, row.ci_high) {
        (Some(m), Some(lo), Some(hi)) => Ok((m, lo, hi)),
        _ => Err(format!("{}: empty subset", report.model)),
    }
}

fn social_seed(base: &ExperimentConfig, seed: u64) -> Result<SeedResult, String> {
    let err = |e: study_cli::CliError| e.to_string();
    let cfg = base.clone().with_seed(seed);
    let prepared = prepare(generate_dataset(&cfg).map_err(err)?, &cfg).map_err(err)?;
    let short = short_history_students(&prepared.test, cfg.eval.short_history);
    let classroom = DecoderVariant::study(&cfg);
    let single = DecoderVariant {
        grouping: Some(Grouping::SingleGroup),
        ..classroom
    };
    let mut out = Vec::new();
    for (name, variant) in [
        ("study", classroom),
        ("individual", DecoderVariant::individual(&cfg)),
        ("single", single),
    ] {
        let start = Instant::now();
        let (decoder, _) = train_decoder(&prepared.train, prepared.vocab_tokens(), &cfg, &variant).map_err(err)?;
        let (log, all) = evaluate_decoder(name, &decoder, &variant, &prepared, &cfg).map_err(err)?;
        report_properties(&all, &log)?;
        let short_report = metric_report(name, &log.restrict(|s| short.contains(&s)), &cfg.eval.metrics).map_err(|e| e.to_string())?;
        let (a, s) = (hits1(&all)?, hits1(&short_report)?);
        println!(
            "  seed {seed} {name:<10} all {:.2} [{:.2}, {:.2}]  short {:.2} [{:.2}, {:.2}] ({} students)  {:.0}s",
            a.0,
            a.1,
            a.2,
            s.0,
            s.1,
            s.2,
            short_report.get(Subset::All, 1).map_or(0, |r| r.students),
            start.elapsed().as_secs_f64()
        );
        out.push((a, s));
    }
    Ok(SeedResult {
        seed,
        study_short: out[0].1,
        individual_short: out[1].1,
        classroom_all: out[0].0 .0,
        single_all: out[2].0 .0,
        individual_all: out[1].0,
    })
}

fn social_runs() -> Result<(Vec<SeedResult>, Duration), String> {
    let path = workspace_root().join("configs/social.toml");
    let base = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    let c = &base.cohort;
    if c.num_classrooms() < 200 || c.students_per_classroom != 20 || c.homophily != 0.8 || c.repeat_probability != 0.6 {
        return Err("configs/social.toml does not describe the required cohort".into());
    }
    let start = Instant::now();
    let results = (0..3).map(|seed| social_seed(&base, seed)).collect::<Result<Vec<_>, _>>()?;
    Ok((results, start.elapsed()))
}

fn social_gain(results: &[SeedResult], elapsed: Duration) -> Verdict {
    within(elapsed, 3600, "three seeds of training and evaluation")?;
    let wins: Vec<u64> = results
        .iter()
        .filter(|r| r.study_short.0 > r.individual_short.0 && r.study_short.1 >= r.individual_short.2)
        .map(|r| r.seed)
        .collect();
    let cis: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "seed {}: study {:.2} [{:.2}, {:.2}] vs individual {:.2} [{:.2}, {:.2}]",
                r.seed, r.study_short.0, r.study_short.1, r.study_short.2, r.individual_short.0, r.individual_short.1, r.individual_short.2
            )
        })
        .collect();
    check(
        wins.len() >= 2,
        format!(
            "short-history hits@1, {} of 3 seeds ahead with non-overlapping CIs; {}; {:.0}s",
            wins.len(),
            cis.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn grouping(results: &[SeedResult]) -> Verdict {
    let ok = results.iter().all(|r| {
        let (_, lo, hi) = r.individual_all;
        r.classroom_all >= r.single_all && lo <= r.single_all && r.single_all <= hi
    });
    let detail: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "seed {}: classroom {:.2}, single {:.2}, individual [{:.2}, {:.2}]",
                r.seed, r.classroom_all, r.single_all, r.individual_all.1, r.individual_all.2
            )
        })
        .collect();
    check(ok, format!("overall hits@1; {}", detail.join("; ")))
}

fn schedule() -> Verdict {
    let cfg = ScheduleConfig {
        peak_rate: 0.1024,
        warmup_steps: 1000,
        total_steps: 3500,
    };
    let mut detail = Vec::new();
    let mut ok = true;
    for (step, expected) in [(500, 0.0512), (1000, 0.1024), (3500, 0.002048)] {
        let lr = lr_schedule(step, &cfg).map_err(|e| e.to_string())?;
        ok &= (lr - expected).abs() <= 1e-9;
        detail.push(format!("step {step}: {lr}"));
    }
    check(ok, detail.join(", "))
}

fn calibration() -> Verdict {
    let cohort = generate(&CohortConfig::default()).map_err(|e| e.to_string())?;
    let mut counts: Vec<usize> = cohort.dataset.students().iter().map(|s| s.interactions.len()).collect();
    counts.sort_unstable();
    let median = if counts.len() % 2 == 1 {
        counts[counts.len() / 2] as f64
    } else {
        (counts[counts.len() / 2 - 1] + counts[counts.len() / 2]) as f64 / 2.0
    };
    let short = counts.iter().filter(|&&c| c <= 65).count() as f64 / counts.len() as f64;
    check(
        (7.0..=13.0).contains(&median) && short >= 0.85,
        format!("{} students, median {median}, {:.1}% with at most 65", counts.len(), 100.0 * short),
    )
}

fn reproducibility() -> Verdict {
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for dir in &dirs {
        let mut cfg = ExperimentConfig::load(&workspace_root().join("configs/smoke.toml")).map_err(|e| e.to_string())?;
        cfg.paths.stage_dir = dir.path().to_path_buf();
        StageDir::new(cfg.resolved()).and_then(|s| s.run_all()).map_err(|e| e.to_string())?;
    }
    let mut compared = Vec::new();
    for rel in ["dataset.tsv", "prep/packed-epoch0.bin"] {
        compared.push(PathBuf::from(rel));
    }
    for sub in ["models", "reports"] {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dirs[0].path().join(sub))
            .map_err(|e| e.to_string())?
            .map(|e| e.map(|e| Path::new(sub).join(e.file_name())))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        names.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ckpt" | "csv")));
        names.sort();
        compared.extend(names);
    }
    let mut differing = Vec::new();
    for rel in &compared {
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(rel)).map_err(|e| format!("{}: {e}", rel.display()));
        if read(&dirs[0])? != read(&dirs[1])? {
            differing.push(rel.display().to_string());
        }
    }
    let ckpts = compared.iter().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
    check(
        differing.is_empty() && ckpts >= 2,
        format!("{} artifacts compared ({ckpts} checkpoints), differing: {differing:?}", compared.len()),
    )
}

fn main() -> ExitCode {
    let only: Option<HashSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));

    let mut verdicts: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &dyn Fn() -> Verdict| {
        if wanted(n) {
            let v = f();
            print_verdict(n, name, &v);
            verdicts.push((n, name, v));
        }
    };
    run(1, "leakage", &leakage);
    run(2, "mask equivalence", &equivalence);
    run(3, "gradient fidelity", &gradients);
    run(4, "knn oracle", &knn_oracle);
    run(5, "metric properties", &metric_properties);
    if wanted(6) || wanted(7) {
        let social = social_runs();
        let pair: [(u32, &'static str, Box<dyn Fn() -> Verdict>); 2] = [
            (6, "social gain", Box::new(|| social.as_ref().map_err(Clone::clone).and_then(|(r, t)| social_gain(r, *t)))),
            (7, "grouping direction", Box::new(|| social.as_ref().map_err(Clone::clone).and_then(|(r, _)| grouping(r)))),
        ];
        for (n, name, f) in pair {
            run(n, name, &*f);
        }
    }
    run(8, "schedule", &schedule);
    run(9, "generator calibration", &calibration);
    run(10, "reproducibility", &reproducibility);

    let failed = verdicts.iter().filter(|(_, _, v)| v.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn print_verdict(n: u32, name: &str, v: &Verdict) {
    match v {
        Ok(d) => println!("criterion {n} {name}: PASS ({d})"),
        Err(d) => println!("criterion {n} {name}: FAIL ({d})"),
    }
}
