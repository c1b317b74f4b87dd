use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use nl2sql_po::benchgen::{self, AugmentEvent, AugmentOptions};
use nl2sql_po::dataset::load_corpus;
use nl2sql_po::optimizers::{self, Method, ObjectiveMode, OptimizationOutcome};
use nl2sql_po::report::{self, MethodSummary};
use nl2sql_po::sqlharness::{measure_latency_samples, score_prompt, LatencyOptions, ScoreOptions};
use nl2sql_po::{Corpus, EvalReport, LatencyStats, OptimizationConfig, Prompt};

use crate::backend::{BackendKind, BackendSpec};
use crate::config::FileConfig;
use crate::{AugmentArgs, BackendArgs, DataArgs, EvalArgs, OptimizeArgs, ReportArgs, UsageError};

pub const PROMPT_FILE: &str = "prompt.json";
pub const STUDY_FILE: &str = "study.json";
pub const FINAL_REPORT_FILE: &str = "final_report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const GT_LATENCY_FILE: &str = "gt_latency.json";
pub const RUN_LOG_FILE: &str = "run.log";
pub const REPORTS_DIR: &str = "reports";

fn load_data(file: &FileConfig, args: &DataArgs) -> anyhow::Result<Corpus> {
    let manifest = args
        .manifest
        .clone()
        .or_else(|| file.manifest.clone())
        .ok_or_else(|| UsageError("--manifest is required".into()))?;
    let db_root = args
        .db_root
        .clone()
        .or_else(|| file.db_root.clone())
        .ok_or_else(|| UsageError("--db-root is required".into()))?;
    Ok(load_corpus(&manifest, &db_root)?)
}

fn backend_spec(
    file: &FileConfig,
    args: &BackendArgs,
    min_exemplars: usize,
) -> anyhow::Result<BackendSpec> {
    let name = args
        .backend
        .clone()
        .or_else(|| file.backend.clone())
        .ok_or_else(|| UsageError("--backend is required".into()))?;
    Ok(BackendSpec {
        kind: name.parse::<BackendKind>()?,
        cache: args.cache.clone().or_else(|| file.cache.clone()),
        record: args.record.clone().or_else(|| file.record.clone()),
        endpoint: args.endpoint.clone().or_else(|| file.endpoint.clone()),
        rpm: args.rpm.or(file.rpm),
        min_exemplars,
    })
}

/// Applies model, worker, timeout and seed settings from the file and flags.
fn apply_common(file: &FileConfig, args: &BackendArgs, cfg: &mut OptimizationConfig) {
    if let Some(m) = args.model.clone().or_else(|| file.model.clone()) {
        cfg.eval.model_id = m;
    }
    if let Some(m) = args
        .proposer_model
        .clone()
        .or_else(|| file.proposer_model.clone())
    {
        cfg.proposer_model_id = m;
    }
    if let Some(w) = args.workers.or(file.workers) {
        cfg.eval.workers = w.max(1);
    }
    if let Some(t) = args.timeout.or(file.timeout) {
        cfg.eval.timeout_secs = t;
    }
    if let Some(s) = args.seed.or(file.seed) {
        cfg.seed = s;
    }
}

fn usage_parse<T: std::str::FromStr>(flag: &str, value: &str) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| UsageError(format!("--{flag} {value}: {e}")).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing artifact")?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn prepare_out_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        UsageError(format!(
            "artifacts directory {} is not writable: {e}",
            dir.display()
        ))
        .into()
    })
}

fn display_name(method: Method, mode: ObjectiveMode) -> String {
    let base = match method {
        Method::Res => "RES",
        Method::Ores => "ORES",
        Method::Joint => "Joint",
        Method::Ipo => "IPO",
    };
    match mode {
        ObjectiveMode::AccuracyOnly => base.to_owned(),
        ObjectiveMode::AccuracyLatency => format!("{base} + Lat."),
    }
}

pub fn ingest(file: &FileConfig, args: &DataArgs) -> anyhow::Result<()> {
    let corpus = load_data(file, args)?;
    println!("{} items", corpus.len());
    for (difficulty, n) in corpus.difficulty_counts() {
        println!("  {difficulty}: {n}");
    }
    Ok(())
}

fn optimization_config(
    file: &FileConfig,
    args: &OptimizeArgs,
) -> anyhow::Result<OptimizationConfig> {
    let mut cfg = file.optimization.clone().unwrap_or_default();
    apply_common(file, &args.backend, &mut cfg);
    if let Some(m) = &args.method {
        cfg.method = usage_parse("method", m)?;
    }
    if let Some(o) = &args.objective {
        cfg.objective.mode = usage_parse("objective", o)?;
    }
    if let Some(w) = args.latency_weight {
        cfg.objective.latency_weight = w;
    }
    if let Some(n) = args.latency_normalizer {
        cfg.objective.latency_normalizer = n;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = args.$flag { cfg.$field = v; })*
        };
    }
    set!(
        trials => num_trials,
        iterations => num_iterations,
        k => k_fixed,
        restarts => res_restarts,
        valid_fraction => valid_fraction,
        valid_sample => valid_sample_size,
        min_exemplars => min_proposed_exemplars,
        pairs => joint_pairs,
    );
    if args.k_max.is_some() {
        cfg.k_max = args.k_max;
    }
    Ok(cfg)
}

/// Configuration recorded next to the artifacts. Paths and credentials are
/// left out so two runs of the same command compare equal.
#[derive(Serialize)]
struct RecordedConfig<'a> {
    backend: &'a str,
    optimization: &'a OptimizationConfig,
}

fn write_run_artifacts(
    out: &Path,
    name: &str,
    outcome: &OptimizationOutcome,
) -> anyhow::Result<()> {
    write_json(&out.join(PROMPT_FILE), &outcome.prompt)?;
    if let Some(study) = &outcome.study {
        write_json(&out.join(STUDY_FILE), study)?;
    }
    let reports = out.join(REPORTS_DIR);
    std::fs::create_dir_all(&reports).with_context(|| format!("creating {}", reports.display()))?;
    let mut log = String::new();
    for rec in &outcome.iterations {
        write_json(
            &reports.join(format!("iteration-{:03}.json", rec.index)),
            rec,
        )?;
        let _ = write!(log, "iteration {}:", rec.index);
        for (k, v) in &rec.params {
            let _ = write!(log, " {k}={v}");
        }
        if let (Some(acc), Some(score)) = (rec.accuracy, rec.score) {
            let _ = write!(log, " accuracy={acc:.4} score={score:.4}");
        }
        if rec.accepted {
            log.push_str(" best");
        }
        if let Some(note) = &rec.note {
            let _ = write!(log, " ({note})");
        }
        log.push('\n');
    }
    let _ = writeln!(
        log,
        "final: {} exemplars, accuracy={:.4}",
        outcome.prompt.exemplars.len(),
        outcome.report.accuracy
    );
    std::fs::write(out.join(RUN_LOG_FILE), log).context("writing run log")?;
    write_json(&out.join(FINAL_REPORT_FILE), &outcome.report)?;
    write_json(
        &out.join(SUMMARY_FILE),
        &MethodSummary::from_report(name, &outcome.report, outcome.wall_time),
    )
}

pub fn optimize(file: &FileConfig, args: &OptimizeArgs) -> anyhow::Result<()> {
    let cfg = optimization_config(file, args)?;
    let corpus = load_data(file, &args.data)?;
    let spec = backend_spec(file, &args.backend, cfg.min_proposed_exemplars)?;
    let llm = spec.build(&corpus.items)?;
    prepare_out_dir(&args.out)?;
    write_json(
        &args.out.join(CONFIG_FILE),
        &RecordedConfig {
            backend: spec.kind.as_str(),
            optimization: &cfg,
        },
    )?;

    let outcome = optimizers::optimize(&corpus, &llm, &llm, &cfg)?;
    let name = display_name(cfg.method, cfg.objective.mode);
    write_run_artifacts(&args.out, &name, &outcome)?;
    println!(
        "{name}: {} exemplars, validation accuracy {:.2}%, best score {:.4}",
        outcome.prompt.exemplars.len(),
        100.0 * outcome.report.accuracy,
        outcome.prompt.metadata.best_score.unwrap_or(0.0),
    );
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

fn load_prompt(path: &Path) -> anyhow::Result<Prompt> {
    let file = if path.is_dir() {
        path.join(PROMPT_FILE)
    } else {
        path.to_path_buf()
    };
    if !file.is_file() {
        return Err(UsageError(format!("prompt artifact {} not found", file.display())).into());
    }
    read_json(&file).map_err(|e| UsageError(format!("{e:#}")).into())
}

/// Pooled latency of every gold query in the corpus.
fn gold_latency(corpus: &Corpus, lat: LatencyOptions, timeout: f64) -> Option<LatencyStats> {
    let mut pooled = Vec::new();
    for item in &corpus.items {
        match measure_latency_samples(
            &corpus.db_path(&item.db_id),
            &item.gold_sql,
            lat.warmups,
            lat.repeats,
            timeout,
        ) {
            Ok(samples) => pooled.extend(samples),
            Err(e) => log::warn!("gold query {} not timed: {e}", item.question_id),
        }
    }
    LatencyStats::from_samples(&pooled)
}

pub fn eval(file: &FileConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let prompt = load_prompt(&args.prompt)?;
    let corpus = load_data(file, &args.data)?;
    let mut cfg = file.optimization.clone().unwrap_or_default();
    apply_common(file, &args.backend, &mut cfg);
    let spec = backend_spec(file, &args.backend, cfg.min_proposed_exemplars)?;
    let llm = spec.build(&corpus.items)?;
    if corpus.is_empty() {
        return Err(UsageError("dataset has no items".into()).into());
    }
    let lat = LatencyOptions {
        warmups: args.warmups,
        repeats: args.repeats,
    };
    let opts = ScoreOptions {
        latency: args.latency.then_some(lat),
        ..cfg.eval.clone()
    };
    let report = score_prompt(&llm, &prompt, &corpus, &opts)?;
    let name = if prompt.metadata.method.is_empty() {
        "prompt".to_owned()
    } else {
        prompt.metadata.method.to_uppercase()
    };
    let summary = MethodSummary::from_report(&name, &report, 0.0);
    println!(
        "accuracy: {:.2}% ({}/{})",
        100.0 * report.accuracy,
        report.correct(),
        report.per_item.len()
    );
    println!();
    print!(
        "{}",
        report::accuracy_table(std::slice::from_ref(&summary)).to_text()
    );

    let gt = if args.latency {
        gold_latency(&corpus, lat, opts.timeout_secs)
    } else {
        None
    };
    if let Some(gt) = &gt {
        println!();
        print!(
            "{}",
            report::latency_table(gt, &[(name.clone(), report.clone())]).to_text()
        );
    }
    if let Some(out) = &args.out {
        prepare_out_dir(out)?;
        write_json(&out.join(EVAL_REPORT_FILE), &report)?;
        write_json(&out.join(SUMMARY_FILE), &summary)?;
        if let Some(gt) = &gt {
            write_json(&out.join(GT_LATENCY_FILE), gt)?;
        }
    }
    Ok(())
}

pub fn augment(file: &FileConfig, args: &AugmentArgs) -> anyhow::Result<()> {
    let corpus = load_data(file, &args.data)?;
    let spec = backend_spec(file, &args.backend, 0)?;
    let llm = spec.build(&corpus.items)?;
    if args.variants == 0 {
        return Err(UsageError("--variants must be at least 1".into()).into());
    }
    let mut opts = AugmentOptions {
        n_variants: args.variants,
        warmups: args.warmups,
        repeats: args.repeats.max(1),
        ..AugmentOptions::default()
    };
    if let Some(m) = args.backend.model.clone().or_else(|| file.model.clone()) {
        opts.model_id = m;
    }
    if let Some(t) = args.backend.timeout.or(file.timeout) {
        opts.timeout_secs = t;
    }
    prepare_out_dir(&args.out)?;
    let outcome = benchgen::augment_to_dir(&corpus, &llm, &opts, &args.out)?;
    let rejected = outcome
        .log
        .iter()
        .filter(|l| l.rejection_reason().is_some())
        .count();
    let empty = outcome
        .log
        .iter()
        .filter(|l| {
            matches!(
                l.event,
                AugmentEvent::NoSurvivors
                    | AugmentEvent::GoldFailed
                    | AugmentEvent::GenerationFailed
            )
        })
        .count();
    let variants: usize = outcome.records.iter().map(|r| r.variants.len()).sum();
    println!(
        "{} records with {variants} variants; {rejected} candidates rejected; {empty} items without a record",
        outcome.records.len()
    );
    println!(
        "written to {}",
        args.out.join(benchgen::RECORDS_FILE).display()
    );
    Ok(())
}

struct RunDir {
    summary: MethodSummary,
    report: Option<EvalReport>,
    gt: Option<LatencyStats>,
}

fn load_run(dir: &Path) -> anyhow::Result<RunDir> {
    let summary_path = dir.join(SUMMARY_FILE);
    if !summary_path.is_file() {
        return Err(UsageError(format!("{} has no {SUMMARY_FILE}", dir.display())).into());
    }
    let report_path = [FINAL_REPORT_FILE, EVAL_REPORT_FILE]
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file());
    let gt_path = dir.join(GT_LATENCY_FILE);
    Ok(RunDir {
        summary: read_json(&summary_path)?,
        report: report_path.map(|p| read_json(&p)).transpose()?,
        gt: gt_path.is_file().then(|| read_json(&gt_path)).transpose()?,
    })
}

pub fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let runs: Vec<RunDir> = args
        .runs
        .iter()
        .map(|d| load_run(d))
        .collect::<anyhow::Result<_>>()?;
    let summaries: Vec<MethodSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let mut tables = vec![
        report::accuracy_table(&summaries),
        report::cost_table(&summaries),
    ];
    let timed: Vec<(String, EvalReport)> = runs
        .iter()
        .filter_map(|r| {
            let rep = r.report.as_ref()?;
            rep.latency.map(|_| (r.summary.method.clone(), rep.clone()))
        })
        .collect();
    if let Some(gt) = runs.iter().find_map(|r| r.gt) {
        if !timed.is_empty() {
            tables.push(report::latency_table(&gt, &timed));
        }
    }
    let text: Vec<String> = tables.iter().map(|t| t.to_text()).collect();
    println!("{}", text.join("\n"));
    if let Some(out) = &args.out {
        prepare_out_dir(out)?;
        let json: Vec<serde_json::Value> = tables.iter().map(|t| t.to_json()).collect();
        write_json(&out.join("tables.json"), &json)?;
        std::fs::write(out.join("tables.md"), text.join("\n")).context("writing tables.md")?;
    }
    Ok(())
}
