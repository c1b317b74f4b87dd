//! Executes SQL against read-only SQLite databases, decides execution
//! matches, measures latency and scores prompts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Difficulty, Exemplar};
use crate::llmclient::{CompletionRequest, LlmClient, LlmError, GENERATOR_TEMPERATURE};
use crate::prompts::{render_nl2sql, strip_code_fence, Prompt};

/// Absolute tolerance for numeric cell comparison.
pub const NUMERIC_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_TIMEOUT_SECS: f64 = 30.0;

/// Execution of harness statements holds this shared; latency measurement
/// holds it exclusively so timings never overlap other harness work.
static HARNESS_LANE: RwLock<()> = RwLock::new(());

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("LLM call for question {question_id} failed: {source}")]
    Llm {
        question_id: String,
        #[source]
        source: LlmError,
    },
    #[error("latency run {run} failed ({status:?}): {message}")]
    LatencyRun {
        run: usize,
        status: ExecStatus,
        message: String,
    },
    #[error("repeats must be at least 1")]
    NoRepeats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Value {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Self::Null,
            ValueRef::Integer(i) => Self::Integer(i),
            ValueRef::Real(r) => Self::Real(r),
            ValueRef::Text(t) => Self::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Self::Blob(b.to_vec()),
        }
    }

    fn class(&self) -> u8 {
        match self {
            Self::Null => 0,
            Self::Integer(_) | Self::Real(_) => 1,
            Self::Text(_) => 2,
            Self::Blob(_) => 3,
        }
    }

    fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Integer(i) => Some(*i as f64),
            Self::Real(r) => Some(*r),
            _ => None,
        }
    }

    /// Cell equality: numbers cross-compare within [`NUMERIC_TOLERANCE`],
    /// text and blobs byte-exact, NULL equals NULL.
    pub fn matches(&self, other: &Value) -> bool {
        match (self, other) {
            (Self::Null, Self::Null) => true,
            (Self::Integer(a), Self::Integer(b)) => a == b,
            (Self::Text(a), Self::Text(b)) => a == b,
            (Self::Blob(a), Self::Blob(b)) => a == b,
            (a, b) => match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => (x - y).abs() <= NUMERIC_TOLERANCE,
                _ => false,
            },
        }
    }

    fn canonical_cmp(&self, other: &Value) -> Ordering {
        self.class()
            .cmp(&other.class())
            .then_with(|| match (self, other) {
                (Self::Text(a), Self::Text(b)) => a.as_bytes().cmp(b.as_bytes()),
                (Self::Blob(a), Self::Blob(b)) => a.cmp(b),
                (a, b) => match (a.as_f64(), b.as_f64()) {
                    (Some(x), Some(y)) => x.total_cmp(&y),
                    _ => Ordering::Equal,
                },
            })
    }
}

/// A multiset of rows; row order carries no meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<Vec<Value>>,
    pub column_count: usize,
}

impl ResultTable {
    pub fn new(column_count: usize, rows: Vec<Vec<Value>>) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == column_count));
        Self { rows, column_count }
    }
}

fn rows_match(a: &[Value], b: &[Value]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.matches(y))
}

fn row_cmp(a: &[Value], b: &[Value]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.canonical_cmp(y);
        if o != Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Largest table for which the exact bipartite fallback is attempted.
const MATCHING_LIMIT: usize = 5_000;

/// True iff the two row multisets are equal under [`Value::matches`].
///
/// Sorted pairwise comparison settles almost every case; when it fails a
/// perfect bipartite matching is searched, since values within tolerance
/// can sort into different positions.
pub fn execution_match(pred: &ResultTable, gold: &ResultTable) -> bool {
    if pred.rows.len() != gold.rows.len() {
        return false;
    }
    if pred.rows.is_empty() {
        return true;
    }
    if pred.column_count != gold.column_count {
        return false;
    }
    let mut a: Vec<&[Value]> = pred.rows.iter().map(Vec::as_slice).collect();
    let mut b: Vec<&[Value]> = gold.rows.iter().map(Vec::as_slice).collect();
    a.sort_by(|x, y| row_cmp(x, y));
    b.sort_by(|x, y| row_cmp(x, y));
    if a.iter().zip(&b).all(|(x, y)| rows_match(x, y)) {
        return true;
    }
    if a.len() > MATCHING_LIMIT {
        return false;
    }
    perfect_matching(&a, &b)
}

/// Kuhn's augmenting-path matching between rows of `a` and `b`.
fn perfect_matching(a: &[&[Value]], b: &[&[Value]]) -> bool {
    let n = a.len();
    let adj: Vec<Vec<usize>> = a
        .iter()
        .map(|ra| (0..n).filter(|&j| rows_match(ra, b[j])).collect())
        .collect();
    if adj.iter().any(Vec::is_empty) {
        return false;
    }
    let mut owner: Vec<Option<usize>> = vec![None; n];
    fn augment(
        u: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    for u in 0..n {
        let mut seen = vec![false; n];
        if !augment(u, &adj, &mut seen, &mut owner) {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    SqlError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    pub result: Option<ResultTable>,
    /// Seconds from statement start to last row.
    pub elapsed: f64,
    pub message: Option<String>,
}

impl ExecOutcome {
    fn failure(status: ExecStatus, elapsed: f64, message: String) -> Self {
        Self {
            status,
            result: None,
            elapsed,
            message: Some(message),
        }
    }
}

fn open_read_only(path: &Path) -> rusqlite::Result<Connection> {
    if !path.is_file() {
        return Err(rusqlite::Error::SqliteFailure(
            rusqlite::ffi::Error::new(rusqlite::ffi::SQLITE_CANTOPEN),
            Some(format!("no database file at {}", path.display())),
        ));
    }
    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;
    conn.pragma_update(None, "query_only", true)?;
    Ok(conn)
}

fn run_statement(conn: &Connection, sql: &str, timeout: Duration) -> ExecOutcome {
    let start = Instant::now();
    let deadline = start + timeout;
    if let Err(e) = conn.progress_handler(1_000, Some(move || Instant::now() >= deadline)) {
        return ExecOutcome::failure(ExecStatus::SqlError, 0.0, e.to_string());
    }
    let classify = |e: rusqlite::Error, start: Instant| {
        let elapsed = start.elapsed().as_secs_f64();
        match e.sqlite_error_code() {
            Some(ErrorCode::OperationInterrupted) => ExecOutcome::failure(
                ExecStatus::Timeout,
                elapsed,
                format!("interrupted after {:.3}s", timeout.as_secs_f64()),
            ),
            _ => ExecOutcome::failure(ExecStatus::SqlError, elapsed, e.to_string()),
        }
    };
    let mut stmt = match conn.prepare(sql) {
        Ok(s) => s,
        Err(e) => return classify(e, start),
    };
    let column_count = stmt.column_count();
    let mut rows_out = Vec::new();
    let mut rows = match stmt.query([]) {
        Ok(r) => r,
        Err(e) => return classify(e, start),
    };
    loop {
        match rows.next() {
            Ok(Some(row)) => {
                let mut values = Vec::with_capacity(column_count);
                for i in 0..column_count {
                    match row.get_ref(i) {
                        Ok(v) => values.push(Value::from_ref(v)),
                        Err(e) => return classify(e, start),
                    }
                }
                rows_out.push(values);
            }
            Ok(None) => break,
            Err(e) => return classify(e, start),
        }
    }
    ExecOutcome {
        status: ExecStatus::Ok,
        result: Some(ResultTable::new(column_count, rows_out)),
        elapsed: start.elapsed().as_secs_f64(),
        message: None,
    }
}

/// Holds one read-only connection per database file.
#[derive(Default)]
pub struct Executor {
    connections: HashMap<PathBuf, Connection>,
}

impl Executor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn execute(&mut self, db_path: &Path, sql: &str, timeout_secs: f64) -> ExecOutcome {
        let conn = match self.connections.entry(db_path.to_path_buf()) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => match open_read_only(db_path) {
                Ok(c) => v.insert(c),
                Err(e) => return ExecOutcome::failure(ExecStatus::SqlError, 0.0, e.to_string()),
            },
        };
        let _lane = HARNESS_LANE.read().unwrap_or_else(|p| p.into_inner());
        run_statement(conn, sql, Duration::from_secs_f64(timeout_secs.max(0.0)))
    }
}

/// Runs one statement on a fresh read-only connection. Never fails: errors
/// and timeouts are reported through [`ExecOutcome::status`].
pub fn execute(db_path: &Path, sql: &str, timeout_secs: f64) -> ExecOutcome {
    Executor::new().execute(db_path, sql, timeout_secs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub runs: usize,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = (samples.iter().sum::<f64>() / n).clamp(min, max);
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            min,
            max,
            mean,
            stddev: if samples.len() == 1 { 0.0 } else { var.sqrt() },
            runs: samples.len(),
        })
    }
}

/// Recorded run times in seconds, after `warmups` unrecorded runs, on one
/// dedicated connection with the timing lane held exclusively.
pub fn measure_latency_samples(
    db_path: &Path,
    sql: &str,
    warmups: usize,
    repeats: usize,
    timeout_secs: f64,
) -> Result<Vec<f64>, HarnessError> {
    if repeats == 0 {
        return Err(HarnessError::NoRepeats);
    }
    let conn = open_read_only(db_path).map_err(|e| HarnessError::LatencyRun {
        run: 0,
        status: ExecStatus::SqlError,
        message: e.to_string(),
    })?;
    let _lane = HARNESS_LANE.write().unwrap_or_else(|p| p.into_inner());
    let timeout = Duration::from_secs_f64(timeout_secs.max(0.0));
    let mut samples = Vec::with_capacity(repeats);
    for run in 0..warmups + repeats {
        let out = run_statement(&conn, sql, timeout);
        if out.status != ExecStatus::Ok {
            return Err(HarnessError::LatencyRun {
                run,
                status: out.status,
                message: out.message.unwrap_or_default(),
            });
        }
        if run >= warmups {
            samples.push(out.elapsed);
        }
    }
    Ok(samples)
}

pub fn measure_latency(
    db_path: &Path,
    sql: &str,
    warmups: usize,
    repeats: usize,
    timeout_secs: f64,
) -> Result<LatencyStats, HarnessError> {
    let samples = measure_latency_samples(db_path, sql, warmups, repeats, timeout_secs)?;
    Ok(LatencyStats::from_samples(&samples).expect("repeats >= 1"))
}

/// Pulls the SQL out of a model answer: unwraps a Markdown fence and drops
/// leading `SQL:` labels. Trailing semicolons are kept.
pub fn extract_sql(text: &str) -> String {
    let mut body = text.trim();
    if !body.starts_with("```") {
        if let Some(start) = body.find("```") {
            body = &body[start..];
        }
    }
    let mut s = strip_code_fence(body).trim();
    if let Some(end) = s.find("```") {
        s = s[..end].trim();
    }
    loop {
        let lower = s.get(..4).map(str::to_ascii_lowercase);
        if lower.as_deref() == Some("sql:") {
            s = s[4..].trim_start();
        } else {
            break;
        }
    }
    s.trim().to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyOptions {
    pub warmups: usize,
    pub repeats: usize,
}

impl Default for LatencyOptions {
    fn default() -> Self {
        Self {
            warmups: 1,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_secs: f64,
    pub workers: usize,
    /// When set, correct predictions are timed after generation.
    pub latency: Option<LatencyOptions>,
    /// Per-item latency charged to incorrect predictions in
    /// [`EvalReport::latency_objective_mean`].
    pub latency_cap: f64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            model_id: "gpt-4o".into(),
            temperature: GENERATOR_TEMPERATURE,
            max_output_tokens: 1024,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            workers: default_workers(),
            latency: None,
            latency_cap: 10.0,
        }
    }
}

/// Available parallelism, capped at 8.
pub fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub question_id: String,
    pub difficulty: Difficulty,
    pub verdict: bool,
    pub predicted_sql: String,
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub latency_samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_item: Vec<ItemVerdict>,
    pub wrong_examples: Vec<Exemplar>,
    pub correct_examples: Vec<Exemplar>,
    /// Pooled over the recorded samples of correct predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    /// Mean over items of the per-item mean latency, with incorrect items
    /// charged the latency cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_objective_mean: Option<f64>,
    pub gen_wall_time: f64,
    pub qps: f64,
    pub prompt_tokens: usize,
}

impl EvalReport {
    pub fn correct(&self) -> usize {
        self.per_item.iter().filter(|v| v.verdict).count()
    }

    /// `(correct, total)` per difficulty.
    pub fn counts_by_difficulty(&self) -> BTreeMap<Difficulty, (usize, usize)> {
        let mut out = BTreeMap::new();
        for v in &self.per_item {
            let e = out.entry(v.difficulty).or_insert((0, 0));
            e.0 += usize::from(v.verdict);
            e.1 += 1;
        }
        out
    }

    /// Every recorded latency sample of the run.
    pub fn latency_samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_item
            .iter()
            .flat_map(|v| v.latency_samples.iter().copied())
    }
}

struct ItemOutcome {
    verdict: bool,
    predicted_sql: String,
    status: ExecStatus,
}

pub fn score_prompt(
    llm: &LlmClient,
    prompt: &Prompt,
    eval_set: &Corpus,
    opts: &ScoreOptions,
) -> Result<EvalReport, HarnessError> {
    if eval_set.is_empty() {
        return Err(HarnessError::EmptyEvalSet);
    }
    let items = &eval_set.items;
    let start = Instant::now();
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ItemOutcome, HarnessError>>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    let workers = opts.workers.clamp(1, items.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut exec = Executor::new();
                loop {
                    let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                    let Some(item) = items.get(i) else { break };
                    let outcome = score_item(llm, prompt, item, eval_set, opts, &mut exec);
                    let failed = outcome.is_err();
                    *slots[i].lock().expect("slot poisoned") = Some(outcome);
                    if failed {
                        // Stop handing out work; the first error is reported below.
                        next.store(items.len(), AtomicOrdering::Relaxed);
                    }
                }
            });
        }
    });
    let gen_wall_time = start.elapsed().as_secs_f64().max(1e-9);

    let mut per_item = Vec::with_capacity(items.len());
    let (mut wrong, mut correct) = (Vec::new(), Vec::new());
    for (item, slot) in items.iter().zip(slots) {
        let outcome = match slot.into_inner().expect("slot poisoned") {
            Some(r) => r?,
            // Skipped after a failure; the failing slot is still ahead.
            None => continue,
        };
        if outcome.verdict {
            correct.push(item.clone());
        } else {
            wrong.push(item.clone());
        }
        per_item.push(ItemVerdict {
            question_id: item.question_id.clone(),
            difficulty: item.difficulty,
            verdict: outcome.verdict,
            predicted_sql: outcome.predicted_sql,
            status: outcome.status,
            latency_samples: Vec::new(),
        });
    }

    let (mut latency, mut latency_objective_mean) = (None, None);
    if let Some(lat) = opts.latency {
        let mut per_item_means = Vec::with_capacity(per_item.len());
        for (v, item) in per_item.iter_mut().zip(items) {
            if !v.verdict {
                per_item_means.push(opts.latency_cap);
                continue;
            }
            match measure_latency_samples(
                &eval_set.db_path(&item.db_id),
                &v.predicted_sql,
                lat.warmups,
                lat.repeats,
                opts.timeout_secs,
            ) {
                Ok(samples) => {
                    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
                    per_item_means.push(mean.min(opts.latency_cap));
                    v.latency_samples = samples;
                }
                Err(e) => {
                    log::warn!("latency of {} not measured: {e}", v.question_id);
                    per_item_means.push(opts.latency_cap);
                }
            }
        }
        let pooled: Vec<f64> = per_item
            .iter()
            .flat_map(|v| v.latency_samples.iter().copied())
            .collect();
        latency = LatencyStats::from_samples(&pooled);
        latency_objective_mean =
            Some(per_item_means.iter().sum::<f64>() / per_item_means.len().max(1) as f64);
    }

    let total = per_item.len();
    Ok(EvalReport {
        accuracy: correct.len() as f64 / total as f64,
        qps: total as f64 / gen_wall_time,
        per_item,
        wrong_examples: wrong,
        correct_examples: correct,
        latency,
        latency_objective_mean,
        gen_wall_time,
        prompt_tokens: prompt.est_tokens(),
    })
}

fn score_item(
    llm: &LlmClient,
    prompt: &Prompt,
    item: &Exemplar,
    corpus: &Corpus,
    opts: &ScoreOptions,
    exec: &mut Executor,
) -> Result<ItemOutcome, HarnessError> {
    let text = render_nl2sql(prompt, item);
    let req = CompletionRequest {
        prompt_text: text,
        temperature: opts.temperature,
        max_output_tokens: opts.max_output_tokens,
        model_id: opts.model_id.clone(),
        tag: "generator".into(),
    };
    let answer = llm.complete(&req).map_err(|source| HarnessError::Llm {
        question_id: item.question_id.clone(),
        source,
    })?;
    let predicted_sql = extract_sql(&answer.text);
    let db = corpus.db_path(&item.db_id);
    let pred = exec.execute(&db, &predicted_sql, opts.timeout_secs);
    let gold = exec.execute(&db, &item.gold_sql, opts.timeout_secs);
    if gold.status != ExecStatus::Ok {
        log::warn!(
            "gold SQL of {} failed: {}",
            item.question_id,
            gold.message.as_deref().unwrap_or("?")
        );
    }
    let verdict = match (&pred.result, &gold.result) {
        (Some(p), Some(g)) => execution_match(p, g),
        _ => false,
    };
    Ok(ItemOutcome {
        verdict,
        predicted_sql,
        status: pred.status,
    })
}
