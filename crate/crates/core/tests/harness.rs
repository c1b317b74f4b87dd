use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use nl2sql_po::fixtures::{self, SHOP_DB};
use nl2sql_po::llmclient::oracle::{AnswerTable, GoldLookup, WRONG_SQL};
use nl2sql_po::llmclient::{
    estimate_tokens, Backend, HttpBackend, HttpConfig, LlmError, ReplayCache, Source, Transport,
    TransportError,
};
use nl2sql_po::sqlharness::{self, execution_match, score_prompt, ExecStatus, ScoreOptions, Value};
use nl2sql_po::{CompletionRequest, Corpus, LatencyStats, LlmClient, Prompt, ResultTable};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn opts() -> ScoreOptions {
    ScoreOptions {
        workers: 3,
        timeout_secs: 5.0,
        ..ScoreOptions::default()
    }
}

#[test]
fn select_one() {
    let dir = tempfile::tempdir().unwrap();
    let db = fixtures::numbers(dir.path()).unwrap();
    let out = sqlharness::execute(&db, "SELECT 1", 1.0);
    assert_eq!(out.status, ExecStatus::Ok, "{out:?}");
    assert_eq!(
        out.result.unwrap(),
        ResultTable::new(1, vec![vec![Value::Integer(1)]])
    );
}

#[test]
fn syntax_error_keeps_engine_message() {
    let dir = tempfile::tempdir().unwrap();
    let db = fixtures::numbers(dir.path()).unwrap();
    let out = sqlharness::execute(&db, "SELEC 1", 1.0);
    assert_eq!(out.status, ExecStatus::SqlError);
    assert!(out.message.unwrap().contains("syntax error"));
}

#[test]
fn slow_cross_join_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let db = fixtures::numbers(dir.path()).unwrap();
    let out = sqlharness::execute(&db, fixtures::RUNAWAY_SQL, 0.05);
    assert_eq!(out.status, ExecStatus::Timeout);
    assert!(out.elapsed < 2.0, "interrupt took {}s", out.elapsed);
}

fn file_digest(path: &std::path::Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn execution_is_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let db = fixtures::shop(dir.path()).unwrap();
    let before = file_digest(&db);
    for sql in [
        "DELETE FROM orders",
        "DROP TABLE customers",
        "INSERT INTO products VALUES (99, 'x', 1.0)",
        "UPDATE customers SET city = 'Nowhere'",
        "CREATE TABLE extra (a integer)",
    ] {
        let out = sqlharness::execute(&db, sql, 1.0);
        assert_eq!(out.status, ExecStatus::SqlError, "{sql} was allowed");
    }
    let out = sqlharness::execute(&db, "SELECT COUNT(*) FROM customers", 1.0);
    assert_eq!(
        out.result.unwrap().rows,
        vec![vec![Value::Integer(fixtures::SHOP_CUSTOMERS as i64)]]
    );
    assert_eq!(before, file_digest(&db));
}

#[test]
fn subquery_and_join_avatar_queries_match() {
    let dir = tempfile::tempdir().unwrap();
    let db = fixtures::movie_platform(dir.path()).unwrap();
    let gt = sqlharness::execute(&db, fixtures::AVATAR_SUBQUERY_SQL, 5.0);
    let gen = sqlharness::execute(&db, fixtures::AVATAR_JOIN_SQL, 5.0);
    let (gt, gen) = (gt.result.unwrap(), gen.result.unwrap());
    assert_eq!(gt.rows.len(), 2);
    assert_eq!(gt.rows[0], gt.rows[1]);
    assert!(execution_match(&gen, &gt));
}

#[test]
fn latency_samples_hold_order_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let db = fixtures::shop(dir.path()).unwrap();
    let sql = "SELECT c.city, SUM(o.quantity) FROM orders AS o JOIN customers AS c \
               ON o.customer_id = c.customer_id GROUP BY c.city";
    let samples = sqlharness::measure_latency_samples(&db, sql, 1, 5, 5.0).unwrap();
    assert_eq!(samples.len(), 5);
    let stats = LatencyStats::from_samples(&samples).unwrap();
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(0.0, f64::max);
    assert_eq!((stats.min, stats.max), (min, max));
    assert!(stats.min <= stats.mean && stats.mean <= stats.max);

    let one = sqlharness::measure_latency(&db, sql, 0, 1, 5.0).unwrap();
    assert_eq!(one.stddev, 0.0);
    assert_eq!((one.min, one.max), (one.mean, one.mean));
    assert!(sqlharness::measure_latency(&db, sql, 0, 0, 5.0).is_err());
}

#[test]
fn gold_lookup_accuracy_tracks_tag_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let items = fixtures::shop_items(dir.path(), 10).unwrap();
    let corpus = Corpus::new(items.clone(), dir.path()).unwrap();
    let llm = LlmClient::scripted(GoldLookup::new(&items));

    let join_only = Prompt::new(Prompt::base().instruction, vec![items[0].clone()]);
    let report = score_prompt(&llm, &join_only, &corpus, &opts()).unwrap();
    let joins = items
        .iter()
        .filter(|e| e.question_id.starts_with("join"))
        .count();
    assert_eq!(report.correct(), joins);
    assert_eq!(report.accuracy, joins as f64 / items.len() as f64);

    let all = Prompt::new(Prompt::base().instruction, items[..3].to_vec());
    assert_eq!(
        score_prompt(&llm, &all, &corpus, &opts()).unwrap().accuracy,
        1.0
    );

    let none = Prompt::base();
    let report = score_prompt(&llm, &none, &corpus, &opts()).unwrap();
    assert_eq!(report.accuracy, 0.0);
    assert!(report.per_item.iter().all(|v| v.predicted_sql == WRONG_SQL));
    assert_eq!(report.wrong_examples.len(), items.len());
}

#[test]
fn accuracy_is_mean_of_verdicts_and_buckets_add_up() {
    let dir = tempfile::tempdir().unwrap();
    let items = fixtures::shop_items(dir.path(), 7).unwrap();
    let corpus = Corpus::new(items.clone(), dir.path()).unwrap();
    // Right for every other item, wrong otherwise.
    let answers = items.iter().enumerate().map(|(i, e)| {
        let sql = if i % 2 == 0 {
            e.gold_sql.clone()
        } else {
            WRONG_SQL.to_owned()
        };
        (e.nlq.clone(), sql)
    });
    let llm = LlmClient::scripted(AnswerTable::new(answers));
    let report = score_prompt(&llm, &Prompt::base(), &corpus, &opts()).unwrap();

    let verdicts: Vec<bool> = report.per_item.iter().map(|v| v.verdict).collect();
    let expected: Vec<bool> = (0..items.len()).map(|i| i % 2 == 0).collect();
    assert_eq!(verdicts, expected);
    let mean = verdicts.iter().filter(|v| **v).count() as f64 / verdicts.len() as f64;
    assert_eq!(report.accuracy, mean);

    let buckets = report.counts_by_difficulty();
    let (c, t) = buckets
        .values()
        .fold((0, 0), |acc, (c, t)| (acc.0 + c, acc.1 + t));
    assert_eq!((c, t), (report.correct(), items.len()));
    let weighted: f64 = buckets
        .values()
        .map(|(c, t)| (*t as f64 / items.len() as f64) * (*c as f64 / *t as f64))
        .sum();
    assert!((weighted - report.accuracy).abs() < 1e-12);
}

#[test]
fn unknown_database_is_a_wrong_prediction_not_a_crash() {
    let dir = tempfile::tempdir().unwrap();
    let mut items = fixtures::shop_items(dir.path(), 1).unwrap();
    items.truncate(1);
    let corpus = Corpus::new(items.clone(), dir.path()).unwrap();
    let llm = LlmClient::scripted(AnswerTable::new([(
        items[0].nlq.clone(),
        "SELECT * FROM no_such_table".to_owned(),
    )]));
    let report = score_prompt(&llm, &Prompt::base(), &corpus, &opts()).unwrap();
    assert_eq!(report.accuracy, 0.0);
    assert_eq!(report.per_item[0].status, ExecStatus::SqlError);
    assert_eq!(items[0].db_id, SHOP_DB);
}

#[test]
fn replay_is_content_addressed() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ReplayCache::open(dir.path().join("cache")).unwrap();
    let recorder = LlmClient::scripted(nl2sql_po::llmclient::oracle::Sequence::new([
        "SELECT 1", "SELECT 2", "SELECT 3",
    ]))
    .with_recorder(cache.clone());
    let reqs: Vec<CompletionRequest> = ["Q1", "Q2", "Q3"]
        .iter()
        .map(|q| CompletionRequest::new("m", format!("#Query\nNLQ: {q}")))
        .collect();
    let recorded: Vec<String> = reqs
        .iter()
        .map(|r| recorder.complete(r).unwrap().text)
        .collect();
    assert_eq!(cache.len().unwrap(), 3);

    let replay = LlmClient::replay(cache);
    for i in [2, 0, 1, 2] {
        let out = replay.complete(&reqs[i]).unwrap();
        assert_eq!(out.text, recorded[i]);
        assert_eq!(out.source, Source::Replay);
    }
    let miss = CompletionRequest::new("m", "#Query\nNLQ: Q1").with_temperature(0.7);
    assert!(matches!(
        replay.complete(&miss),
        Err(LlmError::ReplayMiss { .. })
    ));
    assert_eq!(replay.live_calls(), 0);
}

#[test]
fn scripted_marker_lookup() {
    let llm = LlmClient::scripted(AnswerTable::new([("Q1".to_owned(), "SELECT 1".to_owned())]));
    let out = llm
        .complete(&CompletionRequest::new("m", "#Query\nNLQ: Q1\nSQL:"))
        .unwrap();
    assert_eq!(out.text, "SELECT 1");
    assert_eq!(out.source, Source::Scripted);
}

/// Counts contacts and always fails.
struct Tripwire(Arc<AtomicUsize>);

impl Transport for Tripwire {
    fn post_json(
        &self,
        _url: &str,
        _bearer: Option<&str>,
        _body: &serde_json::Value,
    ) -> Result<serde_json::Value, TransportError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Err(TransportError::Fatal("network contacted".into()))
    }
}

#[test]
fn only_the_http_backend_touches_the_transport() {
    let dir = tempfile::tempdir().unwrap();
    let items = fixtures::shop_items(dir.path(), 2).unwrap();
    let corpus = Corpus::new(items.clone(), dir.path()).unwrap();
    let contacts = Arc::new(AtomicUsize::new(0));

    let scripted = LlmClient::scripted(GoldLookup::new(&items));
    score_prompt(&scripted, &Prompt::base(), &corpus, &opts()).unwrap();
    assert_eq!(scripted.live_calls(), 0);

    let config = HttpConfig {
        endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
        api_key: Some("test".into()),
        max_retries: 0,
        base_backoff: Duration::ZERO,
        max_backoff: Duration::ZERO,
        requests_per_minute: None,
    };
    let live = LlmClient::new(Backend::Http(HttpBackend::new(
        config,
        Arc::new(Tripwire(contacts.clone())),
    )));
    assert!(live.complete(&CompletionRequest::new("m", "hi")).is_err());
    assert_eq!(contacts.load(Ordering::SeqCst), 1);
}

#[test]
fn token_estimate_examples() {
    assert_eq!(estimate_tokens(""), 0);
    assert_eq!(estimate_tokens("abcdefgh"), 2);
    assert_eq!(estimate_tokens("abcdefghi"), 3);
}

fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        (-5i64..5).prop_map(Value::Integer),
        (-5i64..5).prop_map(|i| Value::Real(i as f64 + 0.25)),
        "[ab]{0,2}".prop_map(Value::Text),
        prop::collection::vec(0u8..3, 0..2).prop_map(Value::Blob),
    ]
}

fn table(cols: usize, max_rows: usize) -> impl Strategy<Value = ResultTable> {
    prop::collection::vec(prop::collection::vec(value(), cols), 0..max_rows)
        .prop_map(move |rows| ResultTable::new(cols, rows))
}

fn table_pair() -> impl Strategy<Value = (ResultTable, ResultTable)> {
    (1usize..3).prop_flat_map(|c| (table(c, 6), table(c, 6)))
}

proptest! {
    #[test]
    fn match_is_reflexive(t in (1usize..4).prop_flat_map(|c| table(c, 8))) {
        prop_assert!(execution_match(&t, &t));
    }

    #[test]
    fn match_is_symmetric((a, b) in table_pair()) {
        prop_assert_eq!(execution_match(&a, &b), execution_match(&b, &a));
    }

    #[test]
    fn match_ignores_row_order(
        t in (1usize..4).prop_flat_map(|c| table(c, 8)),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = t.clone();
        shuffled.rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(execution_match(&shuffled, &t));
    }

    #[test]
    fn dropping_a_row_breaks_the_match(t in (1usize..4).prop_flat_map(|c| table(c, 8))) {
        prop_assume!(!t.rows.is_empty());
        let mut fewer = t.clone();
        fewer.rows.pop();
        prop_assert!(!execution_match(&fewer, &t));
    }

    #[test]
    fn latency_stats_invariants(samples in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let s = LatencyStats::from_samples(&samples).unwrap();
        prop_assert!(s.min <= s.mean && s.mean <= s.max);
        prop_assert!(s.stddev >= 0.0 && s.stddev.is_finite());
        prop_assert_eq!(s.runs, samples.len());
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        prop_assert!((s.mean - mean).abs() < 1e-9);
        prop_assert!((s.stddev - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn token_estimate_is_monotone_under_prefixes(text in ".{0,200}", cut in 0usize..200) {
        let cut = text.char_indices().map(|(i, _)| i).nth(cut).unwrap_or(text.len());
        prop_assert!(estimate_tokens(&text[..cut]) <= estimate_tokens(&text));
        prop_assert_eq!(estimate_tokens(&text), text.len().div_ceil(4));
    }

    #[test]
    fn replay_returns_identical_text(prompt in "[ -~]{1,80}", answer in "[ -~]{0,80}") {
        let dir = tempfile::tempdir().unwrap();
        let cache = ReplayCache::open(dir.path()).unwrap();
        let req = CompletionRequest::new("m", prompt.clone());
        let recorded = LlmClient::scripted(
            nl2sql_po::llmclient::oracle::FixedResponse::new(answer),
        )
        .with_recorder(cache.clone())
        .complete(&req)
        .unwrap()
        .text;
        let replayed = LlmClient::replay(cache).complete(&req).unwrap().text;
        prop_assert_eq!(recorded, replayed);
    }
}
