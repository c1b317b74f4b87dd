use std::collections::BTreeSet;

use nl2sql_po::benchgen::{
    augment_to_dir, generate_variants, normalize_whitespace, read_records, validate_item,
    AugmentEvent, AugmentOptions, RejectionReason, RECORDS_FILE,
};
use nl2sql_po::fixtures::{self, RENTAL_DB};
use nl2sql_po::llmclient::oracle::{FixedResponse, VariantEcho};
use nl2sql_po::llmclient::ReplayCache;
use nl2sql_po::sqlharness::Executor;
use nl2sql_po::{Corpus, Difficulty, Exemplar, LlmClient};
use proptest::prelude::*;

fn opts(n: usize) -> AugmentOptions {
    AugmentOptions {
        n_variants: n,
        timeout_secs: 2.0,
        warmups: 0,
        repeats: 1,
        ..AugmentOptions::default()
    }
}

fn rental(root: &std::path::Path) -> (Exemplar, Corpus) {
    fixtures::film_rental(root).unwrap();
    let item = fixtures::item(
        RENTAL_DB,
        &fixtures::schema_text(root, RENTAL_DB).unwrap(),
        "rental-0",
        fixtures::RENTAL_NLQ,
        "",
        fixtures::RENTAL_ORDER_BY_SQL,
        Difficulty::Moderate,
    );
    let corpus = Corpus::new(vec![item.clone()], root).unwrap();
    (item, corpus)
}

#[test]
fn numbered_answer_yields_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let (item, _) = rental(dir.path());
    let llm = LlmClient::scripted(FixedResponse::new("1. SELECT 1\n2. SELECT 2"));
    assert_eq!(
        generate_variants(&llm, &item, &opts(2)).unwrap(),
        ["SELECT 1", "SELECT 2"]
    );
    assert_eq!(generate_variants(&llm, &item, &opts(3)).unwrap().len(), 2);
    let empty = LlmClient::scripted(FixedResponse::new("no list here"));
    assert!(generate_variants(&empty, &item, &opts(2)).is_err());
}

#[test]
fn rental_order_by_and_max_variants_both_match_gold() {
    let dir = tempfile::tempdir().unwrap();
    let (item, corpus) = rental(dir.path());
    let candidates = vec![
        fixtures::RENTAL_ORDER_BY_SQL.to_owned(),
        fixtures::RENTAL_MAX_SQL.to_owned(),
    ];
    let (record, log) = validate_item(&item, &corpus, &candidates, &opts(2), &mut Executor::new());
    let record = record.unwrap();
    let sqls: Vec<&str> = record.variants.iter().map(|v| v.sql.as_str()).collect();
    assert_eq!(
        sqls,
        [fixtures::RENTAL_ORDER_BY_SQL, fixtures::RENTAL_MAX_SQL]
    );
    assert!(record.variants.iter().all(|v| v.matches_gold));
    // The ORDER BY candidate is the gold query itself: kept, but flagged.
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].event, AugmentEvent::DuplicateOfGold);
    assert_eq!(log[0].candidate, Some(0));
}

#[test]
fn broken_candidates_are_rejected_with_reasons() {
    let dir = tempfile::tempdir().unwrap();
    let (item, corpus) = rental(dir.path());
    let candidates = vec![
        "SELEC first_name FROM actor".to_owned(),
        "SELECT first_name FROM actor".to_owned(),
        fixtures::RENTAL_MAX_SQL.to_owned(),
        format!("  {}  ", fixtures::RENTAL_MAX_SQL.replace(' ', "\n")),
    ];
    let (record, log) = validate_item(&item, &corpus, &candidates, &opts(4), &mut Executor::new());
    let reasons: Vec<_> = log
        .iter()
        .map(|e| (e.candidate, e.rejection_reason()))
        .collect();
    assert_eq!(
        reasons,
        [
            (Some(0), Some(RejectionReason::SqlError)),
            (Some(1), Some(RejectionReason::ResultMismatch)),
            (Some(3), Some(RejectionReason::Duplicate)),
        ]
    );
    assert!(log[0].message.as_deref().unwrap().contains("syntax error"));
    assert_eq!(record.unwrap().variants.len(), 1);
}

#[test]
fn augment_to_dir_resumes_without_new_calls() {
    let dir = tempfile::tempdir().unwrap();
    let items = fixtures::shop_items(dir.path(), 2).unwrap();
    let corpus = Corpus::new(items, dir.path()).unwrap();
    let out = dir.path().join("bench");
    let first = augment_to_dir(&corpus, &LlmClient::scripted(VariantEcho), &opts(2), &out).unwrap();
    assert_eq!(first.records.len(), corpus.len());
    assert!(first.records.iter().all(|r| r.variants.len() == 2));

    // An empty replay cache fails on any call.
    let cache = ReplayCache::open(dir.path().join("empty-cache")).unwrap();
    let second = augment_to_dir(&corpus, &LlmClient::replay(cache), &opts(2), &out).unwrap();
    assert!(second.records.is_empty() && second.log.is_empty());

    let on_disk = read_records(&out.join(RECORDS_FILE)).unwrap();
    let ids: Vec<_> = on_disk.iter().map(|r| r.question_id.clone()).collect();
    let expected: Vec<_> = corpus.items.iter().map(|e| e.question_id.clone()).collect();
    assert_eq!(ids, expected);
}

fn candidate_pool() -> Vec<String> {
    vec![
        fixtures::RENTAL_ORDER_BY_SQL.to_owned(),
        fixtures::RENTAL_MAX_SQL.to_owned(),
        fixtures::RENTAL_MAX_SQL.replace(' ', "  "),
        "SELECT first_name, last_name FROM actor".to_owned(),
        "SELEC 1".to_owned(),
        "SELECT a.first_name, a.last_name FROM actor AS a WHERE a.actor_id = \
         (SELECT fa.actor_id FROM film_actor AS fa JOIN film AS f ON fa.film_id = f.film_id \
         ORDER BY f.rental_rate DESC LIMIT 1)"
            .to_owned(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn surviving_set_ignores_candidate_order(
        picks in prop::sample::subsequence(candidate_pool(), 1..=6),
        order in Just(()).prop_perturb(|_, mut rng| rng.next_u64()),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let dir = tempfile::tempdir().unwrap();
        let (item, corpus) = rental(dir.path());
        let mut shuffled = picks.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(order));

        let summarize = |cands: &[String]| {
            let (record, log) =
                validate_item(&item, &corpus, cands, &opts(cands.len()), &mut Executor::new());
            let kept: BTreeSet<String> = record
                .map(|r| r.variants.iter().map(|v| normalize_whitespace(&v.sql)).collect())
                .unwrap_or_default();
            let mut reasons: Vec<_> = log.iter().filter_map(|e| e.rejection_reason()).collect();
            reasons.sort();
            (kept, reasons)
        };
        prop_assert_eq!(summarize(&picks), summarize(&shuffled));
    }
}
