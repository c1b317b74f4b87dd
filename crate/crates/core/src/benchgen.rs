//! Augments a corpus with result-equivalent SQL variants and their timings.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Exemplar};
use crate::llmclient::{CompletionRequest, LlmClient, LlmError, GENERATOR_TEMPERATURE};
use crate::prompts::render_variant_request;
use crate::sqlharness::{
    execution_match, extract_sql, measure_latency, ExecStatus, Executor, HarnessError,
    LatencyStats, DEFAULT_TIMEOUT_SECS,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchgenError {
    #[error("no parseable SQL variant in the model answer")]
    NoCandidates,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("progress manifest {path} is malformed: {message}")]
    Progress { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    SqlError,
    Timeout,
    ResultMismatch,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub sql: String,
    pub latency: LatencyStats,
    pub matches_gold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiVariantRecord {
    pub question_id: String,
    pub db_id: String,
    pub nlq: String,
    pub evidence: String,
    pub variants: Vec<Variant>,
    pub gold_sql: String,
    pub gold_latency: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AugmentEvent {
    Rejected {
        reason: RejectionReason,
    },
    /// Kept: the candidate is textually the gold query.
    DuplicateOfGold,
    NoSurvivors,
    GoldFailed,
    GenerationFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub question_id: String,
    #[serde(flatten)]
    pub event: AugmentEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl LogEntry {
    fn item(question_id: &str, event: AugmentEvent, message: Option<String>) -> Self {
        Self {
            question_id: question_id.to_owned(),
            event,
            candidate: None,
            sql: None,
            message,
        }
    }

    pub fn rejection_reason(&self) -> Option<RejectionReason> {
        match self.event {
            AugmentEvent::Rejected { reason } => Some(reason),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub n_variants: usize,
    pub timeout_secs: f64,
    pub warmups: usize,
    pub repeats: usize,
    pub model_id: String,
    pub max_output_tokens: u32,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            n_variants: 2,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            warmups: 1,
            repeats: 3,
            model_id: "o3".into(),
            max_output_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentOutcome {
    pub records: Vec<MultiVariantRecord>,
    pub log: Vec<LogEntry>,
}

/// Splits a numbered answer (`1. ...`, `2) ...`) into at most `n` SQL
/// strings. Unnumbered lines continue the current entry; fences and `SQL:`
/// labels are removed; empty entries are dropped.
pub fn parse_numbered_list(text: &str, n: usize) -> Vec<String> {
    let mut entries: Vec<String> = Vec::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with("```") {
            continue;
        }
        if let Some(rest) = numbered(trimmed) {
            entries.extend(current.take());
            current = Some(rest.to_owned());
        } else if let Some(cur) = current.as_mut() {
            if !trimmed.is_empty() {
                if !cur.is_empty() {
                    cur.push('\n');
                }
                cur.push_str(trimmed);
            }
        }
    }
    entries.extend(current);
    entries
        .into_iter()
        .map(|e| extract_sql(&e))
        .filter(|e| !e.is_empty())
        .take(n)
        .collect()
}

fn numbered(line: &str) -> Option<&str> {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    Some(rest.trim_start())
}

pub fn generate_variants(
    llm: &LlmClient,
    exemplar: &Exemplar,
    opts: &AugmentOptions,
) -> Result<Vec<String>, BenchgenError> {
    let n = opts.n_variants.max(1);
    let text = render_variant_request(&exemplar.nlq, &exemplar.schema_text, &exemplar.gold_sql, n);
    let req = CompletionRequest {
        prompt_text: text,
        temperature: GENERATOR_TEMPERATURE,
        max_output_tokens: opts.max_output_tokens,
        model_id: opts.model_id.clone(),
        tag: "variants".into(),
    };
    let answer = llm.complete(&req)?;
    let candidates = parse_numbered_list(&answer.text, n);
    if candidates.is_empty() {
        return Err(BenchgenError::NoCandidates);
    }
    if candidates.len() < n {
        log::warn!(
            "{}: asked for {n} variants, parsed {}",
            exemplar.question_id,
            candidates.len()
        );
    }
    Ok(candidates)
}

pub fn normalize_whitespace(sql: &str) -> String {
    sql.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn reason_for(status: ExecStatus) -> RejectionReason {
    match status {
        ExecStatus::Timeout => RejectionReason::Timeout,
        _ => RejectionReason::SqlError,
    }
}

/// Validates and times `candidates` for one item. Returns the record, if any
/// candidate survives, and the item's log entries.
pub fn validate_item(
    item: &Exemplar,
    corpus: &Corpus,
    candidates: &[String],
    opts: &AugmentOptions,
    exec: &mut Executor,
) -> (Option<MultiVariantRecord>, Vec<LogEntry>) {
    let qid = item.question_id.as_str();
    let db = corpus.db_path(&item.db_id);
    let mut log = Vec::new();
    let gold = exec.execute(&db, &item.gold_sql, opts.timeout_secs);
    let Some(gold_rows) = gold.result else {
        log.push(LogEntry::item(qid, AugmentEvent::GoldFailed, gold.message));
        return (None, log);
    };
    let gold_norm = normalize_whitespace(&item.gold_sql);
    let reject = |log: &mut Vec<LogEntry>, i: usize, sql: &str, reason, message| {
        log.push(LogEntry {
            question_id: qid.to_owned(),
            event: AugmentEvent::Rejected { reason },
            candidate: Some(i),
            sql: Some(sql.to_owned()),
            message,
        })
    };

    let mut seen = BTreeSet::new();
    let mut survivors: Vec<(usize, &str)> = Vec::new();
    for (i, sql) in candidates.iter().enumerate() {
        if !seen.insert(normalize_whitespace(sql)) {
            reject(&mut log, i, sql, RejectionReason::Duplicate, None);
            continue;
        }
        let out = exec.execute(&db, sql, opts.timeout_secs);
        match out.result {
            None => reject(&mut log, i, sql, reason_for(out.status), out.message),
            Some(rows) if !execution_match(&rows, &gold_rows) => {
                reject(&mut log, i, sql, RejectionReason::ResultMismatch, None)
            }
            Some(_) => survivors.push((i, sql)),
        }
    }

    let time = |sql: &str| measure_latency(&db, sql, opts.warmups, opts.repeats, opts.timeout_secs);
    let mut variants = Vec::new();
    for (i, sql) in survivors {
        match time(sql) {
            Ok(latency) => {
                if normalize_whitespace(sql) == gold_norm {
                    log.push(LogEntry {
                        question_id: qid.to_owned(),
                        event: AugmentEvent::DuplicateOfGold,
                        candidate: Some(i),
                        sql: Some(sql.to_owned()),
                        message: None,
                    });
                }
                variants.push(Variant {
                    sql: sql.to_owned(),
                    latency,
                    matches_gold: true,
                });
            }
            Err(HarnessError::LatencyRun {
                status, message, ..
            }) => reject(&mut log, i, sql, reason_for(status), Some(message)),
            Err(e) => reject(
                &mut log,
                i,
                sql,
                RejectionReason::SqlError,
                Some(e.to_string()),
            ),
        }
    }
    if variants.is_empty() {
        log.push(LogEntry::item(qid, AugmentEvent::NoSurvivors, None));
        return (None, log);
    }
    let gold_latency = match time(&item.gold_sql) {
        Ok(l) => l,
        Err(e) => {
            log.push(LogEntry::item(
                qid,
                AugmentEvent::GoldFailed,
                Some(e.to_string()),
            ));
            return (None, log);
        }
    };
    let record = MultiVariantRecord {
        question_id: item.question_id.clone(),
        db_id: item.db_id.clone(),
        nlq: item.nlq.clone(),
        evidence: item.evidence.clone(),
        variants,
        gold_sql: item.gold_sql.clone(),
        gold_latency,
    };
    (Some(record), log)
}

fn augment_item(
    item: &Exemplar,
    corpus: &Corpus,
    llm: &LlmClient,
    opts: &AugmentOptions,
    exec: &mut Executor,
) -> (Option<MultiVariantRecord>, Vec<LogEntry>) {
    match generate_variants(llm, item, opts) {
        Ok(candidates) => validate_item(item, corpus, &candidates, opts, exec),
        Err(e) => (
            None,
            vec![LogEntry::item(
                &item.question_id,
                AugmentEvent::GenerationFailed,
                Some(e.to_string()),
            )],
        ),
    }
}

/// Augments every item in corpus order. Per-item failures are logged.
pub fn augment(corpus: &Corpus, llm: &LlmClient, opts: &AugmentOptions) -> AugmentOutcome {
    let mut exec = Executor::new();
    let mut out = AugmentOutcome::default();
    for item in &corpus.items {
        let (record, log) = augment_item(item, corpus, llm, opts, &mut exec);
        out.records.extend(record);
        out.log.extend(log);
    }
    out
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Progress {
    done: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchgenError + '_ {
    move |source| BenchgenError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn append_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), BenchgenError> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut buf = String::new();
    for r in rows {
        buf.push_str(&serde_json::to_string(r).expect("row serializes"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(io_err(path))
}

/// Paths written by [`augment_to_dir`].
pub const RECORDS_FILE: &str = "bird_multi.jsonl";
pub const REJECTIONS_FILE: &str = "rejections.jsonl";
pub const PROGRESS_FILE: &str = "progress.json";

/// Streams records and log entries to JSONL files in `out_dir`. Items listed
/// in the progress manifest are skipped, so an interrupted run resumes
/// where it stopped. Returns the outcome of the items processed now.
pub fn augment_to_dir(
    corpus: &Corpus,
    llm: &LlmClient,
    opts: &AugmentOptions,
    out_dir: &Path,
) -> Result<AugmentOutcome, BenchgenError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let records_path = out_dir.join(RECORDS_FILE);
    let log_path = out_dir.join(REJECTIONS_FILE);
    let progress_path = out_dir.join(PROGRESS_FILE);
    let mut progress: Progress = match std::fs::read_to_string(&progress_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| BenchgenError::Progress {
            path: progress_path.display().to_string(),
            message: e.to_string(),
        })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Progress::default(),
        Err(e) => return Err(io_err(&progress_path)(e)),
    };
    let done: BTreeSet<String> = progress.done.iter().cloned().collect();
    let mut exec = Executor::new();
    let mut out = AugmentOutcome::default();
    for item in corpus
        .items
        .iter()
        .filter(|i| !done.contains(&i.question_id))
    {
        let (record, log) = augment_item(item, corpus, llm, opts, &mut exec);
        append_jsonl(&records_path, record.as_slice())?;
        append_jsonl(&log_path, &log)?;
        progress.done.push(item.question_id.clone());
        let tmp = progress_path.with_extension("json.tmp");
        std::fs::write(
            &tmp,
            serde_json::to_string_pretty(&progress).expect("progress serializes"),
        )
        .map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &progress_path).map_err(io_err(&progress_path))?;
        out.records.extend(record);
        out.log.extend(log);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<MultiVariantRecord>, BenchgenError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| BenchgenError::Progress {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}
