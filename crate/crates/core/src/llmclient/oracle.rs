//! Scripted backends: deterministic stand-ins for a frontier model.
//!
//! Every policy is a pure function of the prompt text. They read prompts
//! through the same section markers the renderer writes, so a policy sees
//! exactly what a real model would.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Exemplar;
use crate::prompts::{self, Prompt};

/// Answer given when the gold-lookup policy decides to fail a query. It
/// returns one text row no fixture gold query produces.
pub const WRONG_SQL: &str = "SELECT 'no-matching-exemplar'";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("prompt has no parseable #Query block")]
    NoQueryBlock,
    #[error("oracle has no answer for query {0:?}")]
    UnknownQuery(String),
    #[error("prompt is not a proposer prompt (no #Current Prompt section)")]
    NotAProposerPrompt,
}

pub trait OraclePolicy: Send + Sync {
    fn respond(&self, prompt: &str) -> Result<String, OracleError>;
}

/// Coarse SQL construct class used by the coverage-based policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstructTag {
    Join,
    Aggregate,
    Filter,
}

impl ConstructTag {
    pub const ALL: [ConstructTag; 3] = [Self::Join, Self::Aggregate, Self::Filter];

    /// `join` if the query joins tables, else `aggregate` if it aggregates,
    /// else `filter`.
    pub fn classify(sql: &str) -> Self {
        let upper = sql.to_ascii_uppercase();
        if upper.contains(" JOIN ") {
            Self::Join
        } else if ["COUNT(", "SUM(", "AVG(", "MAX(", "MIN(", "GROUP BY"]
            .iter()
            .any(|k| upper.contains(k))
        {
            Self::Aggregate
        } else {
            Self::Filter
        }
    }
}

/// Always answers the same text.
#[derive(Debug, Clone)]
pub struct FixedResponse(String);

impl FixedResponse {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }
}

impl OraclePolicy for FixedResponse {
    fn respond(&self, _prompt: &str) -> Result<String, OracleError> {
        Ok(self.0.clone())
    }
}

fn query_nlq(prompt: &str) -> Result<String, OracleError> {
    prompts::query_block(prompt)
        .map(|b| b.nlq)
        .filter(|n| !n.is_empty())
        .ok_or(OracleError::NoQueryBlock)
}

/// Answers from a fixed NLQ → SQL table, regardless of exemplars.
#[derive(Debug, Clone, Default)]
pub struct AnswerTable {
    answers: HashMap<String, String>,
}

impl AnswerTable {
    pub fn new(answers: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            answers: answers.into_iter().collect(),
        }
    }

    pub fn from_gold(items: &[Exemplar]) -> Self {
        Self::new(items.iter().map(|e| (e.nlq.clone(), e.gold_sql.clone())))
    }

    fn lookup(&self, nlq: &str) -> Result<&str, OracleError> {
        self.answers
            .get(nlq)
            .map(String::as_str)
            .ok_or_else(|| OracleError::UnknownQuery(nlq.to_owned()))
    }
}

impl OraclePolicy for AnswerTable {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        Ok(self.lookup(&query_nlq(prompt)?)?.to_owned())
    }
}

/// Answers the gold SQL iff some exemplar in the prompt shares the query's
/// construct tag; otherwise answers [`WRONG_SQL`].
#[derive(Debug, Clone)]
pub struct GoldLookup {
    gold: AnswerTable,
}

impl GoldLookup {
    pub fn new(items: &[Exemplar]) -> Self {
        Self {
            gold: AnswerTable::from_gold(items),
        }
    }
}

impl OraclePolicy for GoldLookup {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        let gold = self.gold.lookup(&query_nlq(prompt)?)?;
        let wanted = ConstructTag::classify(gold);
        let covered = prompts::exemplar_blocks(prompt)
            .iter()
            .any(|b| ConstructTag::classify(&b.sql) == wanted);
        Ok(if covered { gold } else { WRONG_SQL }.to_owned())
    }
}

/// Accuracy surface peaked at a chosen exemplar count.
///
/// With `n` exemplars in the prompt the target accuracy is
/// `max(0, 1 - |n - optimum| / width)`. A query answers correctly iff its
/// stable hash in `[0, 1)` falls below that target, so at `n = optimum`
/// every query is answered correctly.
#[derive(Debug, Clone)]
pub struct KDependent {
    gold: AnswerTable,
    pub optimum: usize,
    pub width: f64,
}

impl KDependent {
    pub fn new(items: &[Exemplar], optimum: usize, width: f64) -> Self {
        Self {
            gold: AnswerTable::from_gold(items),
            optimum,
            width,
        }
    }

    pub fn target_accuracy(&self, n: usize) -> f64 {
        (1.0 - (n as f64 - self.optimum as f64).abs() / self.width).max(0.0)
    }
}

/// Stable hash of `text` mapped into `[0, 1)`.
pub fn unit_hash(text: &str) -> f64 {
    let d = Sha256::digest(text.as_bytes());
    let v = u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64
}

impl OraclePolicy for KDependent {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        let nlq = query_nlq(prompt)?;
        let gold = self.gold.lookup(&nlq)?;
        let n = prompts::exemplar_blocks(prompt).len();
        Ok(if unit_hash(&nlq) < self.target_accuracy(n) {
            gold.to_owned()
        } else {
            WRONG_SQL.to_owned()
        })
    }
}

/// Routes to the first policy whose marker occurs in the prompt's
/// instruction, else to the fallback.
pub struct InstructionDispatch {
    routes: Vec<(String, Box<dyn OraclePolicy>)>,
    fallback: Box<dyn OraclePolicy>,
}

impl InstructionDispatch {
    pub fn new(fallback: impl OraclePolicy + 'static) -> Self {
        Self {
            routes: Vec::new(),
            fallback: Box::new(fallback),
        }
    }

    pub fn route(mut self, marker: impl Into<String>, policy: impl OraclePolicy + 'static) -> Self {
        self.routes.push((marker.into(), Box::new(policy)));
        self
    }
}

impl OraclePolicy for InstructionDispatch {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        let instruction = prompt.split("\n#Exemplars").next().unwrap_or(prompt);
        for (marker, policy) in &self.routes {
            if instruction.contains(marker.as_str()) {
                return policy.respond(prompt);
            }
        }
        self.fallback.respond(prompt)
    }
}

/// Scripted proposer: reads the current prompt from a proposer prompt, adds
/// one exemplar for the first construct tag not yet covered, and pads with
/// copies of the first exemplar up to `min_exemplars`.
#[derive(Debug, Clone)]
pub struct TagCoverageProposer {
    bank: Vec<Exemplar>,
    pub instruction: String,
    pub min_exemplars: usize,
}

impl TagCoverageProposer {
    /// `bank` supplies candidate exemplars; the first one per tag is used.
    pub fn new(bank: &[Exemplar], min_exemplars: usize) -> Self {
        Self {
            bank: bank.to_vec(),
            instruction: prompts::DEFAULT_INSTRUCTION.to_owned(),
            min_exemplars,
        }
    }

    pub fn propose(&self, current: &[prompts::ExemplarBlock]) -> Prompt {
        let mut exemplars: Vec<Exemplar> = current
            .iter()
            .enumerate()
            .map(|(i, b)| Exemplar {
                question_id: format!("current-{i}"),
                db_id: String::new(),
                nlq: b.nlq.clone(),
                evidence: b.evidence.clone(),
                gold_sql: b.sql.clone(),
                difficulty: crate::dataset::Difficulty::Unknown,
                schema_text: b.schema.clone(),
            })
            .collect();
        let covered: BTreeSet<ConstructTag> = exemplars
            .iter()
            .map(|e| ConstructTag::classify(&e.gold_sql))
            .collect();
        let missing = ConstructTag::ALL
            .into_iter()
            .find(|t| !covered.contains(t))
            .and_then(|t| {
                self.bank
                    .iter()
                    .find(|e| ConstructTag::classify(&e.gold_sql) == t)
            });
        if let Some(e) = missing {
            exemplars.push(e.clone());
        }
        if let Some(first) = exemplars.first().cloned() {
            while exemplars.len() < self.min_exemplars {
                exemplars.push(first.clone());
            }
        }
        Prompt::new(self.instruction.clone(), exemplars)
    }
}

impl OraclePolicy for TagCoverageProposer {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        let current =
            prompts::proposer_current_prompt(prompt).ok_or(OracleError::NotAProposerPrompt)?;
        let blocks = prompts::parse_exemplar_blocks(current);
        Ok(prompts::proposal_json(&self.propose(&blocks)).to_string())
    }
}

/// Variant generator stand-in: answers the gold query of a variant request
/// wrapped once and twice in `SELECT * FROM (...)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct VariantEcho;

/// Gold SQL of a rendered variant request.
pub fn variant_request_gold(prompt: &str) -> Option<&str> {
    let start = prompt.find("#Ground Truth SQL:\n")? + "#Ground Truth SQL:\n".len();
    let end = prompt[start..].find("\n\n#SQL Variants:")? + start;
    Some(prompt[start..end].trim())
}

impl OraclePolicy for VariantEcho {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        let gold = variant_request_gold(prompt).ok_or(OracleError::NoQueryBlock)?;
        let inner = gold.trim_end_matches(';').trim_end();
        Ok(format!(
            "1. SELECT * FROM ({inner})\n2. SELECT * FROM (SELECT * FROM ({inner}))"
        ))
    }
}

/// Replays a fixed sequence of answers, one per call, repeating the last.
/// Useful for proposers whose behaviour is defined by call order.
pub struct Sequence {
    answers: Vec<String>,
    next: std::sync::atomic::AtomicUsize,
}

impl Sequence {
    pub fn new(answers: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            answers: answers.into_iter().map(Into::into).collect(),
            next: std::sync::atomic::AtomicUsize::new(0),
        }
    }
}

impl OraclePolicy for Sequence {
    fn respond(&self, _prompt: &str) -> Result<String, OracleError> {
        let i = self.next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(self
            .answers
            .get(i)
            .or(self.answers.last())
            .cloned()
            .unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Difficulty;
    use crate::prompts::{render_nl2sql, Prompt};

    fn ex(nlq: &str, sql: &str) -> Exemplar {
        Exemplar {
            question_id: nlq.into(),
            db_id: "shop".into(),
            nlq: nlq.into(),
            evidence: String::new(),
            gold_sql: sql.into(),
            difficulty: Difficulty::Simple,
            schema_text: "Database Name: shop\nTables: []\n#Columns:".into(),
        }
    }

    #[test]
    fn classify_tags() {
        assert_eq!(
            ConstructTag::classify("SELECT a FROM x AS t JOIN y ON t.id = y.id"),
            ConstructTag::Join
        );
        assert_eq!(
            ConstructTag::classify("SELECT COUNT(*) FROM x"),
            ConstructTag::Aggregate
        );
        assert_eq!(
            ConstructTag::classify("SELECT a FROM x WHERE b = 1"),
            ConstructTag::Filter
        );
    }

    #[test]
    fn gold_lookup_requires_matching_tag() {
        let q = ex("how many orders", "SELECT COUNT(*) FROM orders");
        let policy = GoldLookup::new(std::slice::from_ref(&q));
        let with = Prompt::new("i", vec![ex("other", "SELECT MAX(x) FROM t")]);
        let without = Prompt::new("i", vec![ex("other", "SELECT x FROM t WHERE y = 1")]);
        assert_eq!(
            policy.respond(&render_nl2sql(&with, &q)).unwrap(),
            q.gold_sql
        );
        assert_eq!(
            policy.respond(&render_nl2sql(&without, &q)).unwrap(),
            WRONG_SQL
        );
    }

    #[test]
    fn unparseable_prompt_is_structured_error() {
        let policy = GoldLookup::new(&[]);
        assert_eq!(policy.respond("hello"), Err(OracleError::NoQueryBlock));
        let q = ex("unknown", "SELECT 1");
        assert!(matches!(
            policy.respond(&render_nl2sql(&Prompt::base(), &q)),
            Err(OracleError::UnknownQuery(_))
        ));
    }

    #[test]
    fn scripted_lookup_by_marker() {
        let q = ex("Q1", "SELECT 1");
        let policy = AnswerTable::from_gold(std::slice::from_ref(&q));
        assert_eq!(
            policy.respond(&render_nl2sql(&Prompt::base(), &q)).unwrap(),
            "SELECT 1"
        );
    }

    #[test]
    fn k_dependent_target_peaks_at_optimum() {
        let p = KDependent::new(&[], 5, 5.0);
        assert_eq!(p.target_accuracy(5), 1.0);
        assert!((p.target_accuracy(4) - 0.8).abs() < 1e-12);
        assert_eq!(p.target_accuracy(12), 0.0);
    }

    #[test]
    fn unit_hash_in_range() {
        for s in ["", "a", "question 17"] {
            let u = unit_hash(s);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
