//! BIRD-format corpus ingestion, schema introspection and rendering,
//! train/validation splitting and exemplar sampling.
//!
//! Databases are expected at `<db_root>/<db_id>/<db_id>.sqlite`; the
//! manifest is a JSON array using the BIRD dev key names (`question`,
//! `evidence`, `SQL`, `difficulty`).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read manifest {path}: {source}")]
    ManifestIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} is not a JSON array of records: {message}")]
    ManifestFormat { path: PathBuf, message: String },
    #[error("record {index}: key `{key}` {problem}")]
    MalformedRecord {
        index: usize,
        key: &'static str,
        problem: String,
    },
    #[error("database for db_id `{db_id}` not found at {path}")]
    MissingDatabase { db_id: String, path: PathBuf },
    #[error("cannot read database {path}: {message}")]
    UnreadableDatabase { path: PathBuf, message: String },
    #[error("duplicate question_id `{0}`")]
    DuplicateQuestionId(String),
    #[error("table filter names unknown table `{0}`")]
    UnknownTable(String),
    #[error("corpus of {size} items is too small to split (need at least 2)")]
    CorpusTooSmall { size: usize },
    #[error("valid_fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("cannot draw {k} exemplars from a corpus of {available} without replacement")]
    SampleTooLarge { k: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
    Unknown,
}

impl Difficulty {
    /// The three labelled strata, in presentation order.
    pub const LABELLED: [Difficulty; 3] = [
        Difficulty::Simple,
        Difficulty::Moderate,
        Difficulty::Challenging,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "simple" => Some(Self::Simple),
            "moderate" => Some(Self::Moderate),
            "challenging" => Some(Self::Challenging),
            "unknown" | "" => Some(Self::Unknown),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Simple => "simple",
            Self::Moderate => "moderate",
            Self::Challenging => "challenging",
            Self::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training item: question, schema, optional evidence and gold SQL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question_id: String,
    pub db_id: String,
    pub nlq: String,
    #[serde(default)]
    pub evidence: String,
    pub gold_sql: String,
    pub difficulty: Difficulty,
    pub schema_text: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub items: Vec<Exemplar>,
    pub db_root: PathBuf,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate question ids.
    pub fn new(items: Vec<Exemplar>, db_root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.question_id.as_str()) {
                return Err(DatasetError::DuplicateQuestionId(item.question_id.clone()));
            }
        }
        Ok(Self {
            items,
            db_root: db_root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn db_path(&self, db_id: &str) -> PathBuf {
        database_path(&self.db_root, db_id)
    }

    /// Item counts per difficulty, including `unknown`.
    pub fn difficulty_counts(&self) -> BTreeMap<Difficulty, usize> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            *counts.entry(item.difficulty).or_insert(0) += 1;
        }
        counts
    }

    pub fn with_items(&self, items: Vec<Exemplar>) -> Corpus {
        Corpus {
            items,
            db_root: self.db_root.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Corpus,
    pub valid: Corpus,
    pub seed: u64,
}

/// Tables with their columns in declaration order, plus foreign keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    pub db_name: String,
    pub tables: Vec<TableSchema>,
    pub foreign_keys: Vec<ForeignKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    /// `(column_name, declared_type)`; the type is lower-cased.
    pub columns: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from: ColumnRef,
    pub to: ColumnRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

pub fn database_path(db_root: &Path, db_id: &str) -> PathBuf {
    db_root.join(db_id).join(format!("{db_id}.sqlite"))
}

pub fn load_corpus(manifest_path: &Path, db_root: &Path) -> Result<Corpus, DatasetError> {
    let raw =
        std::fs::read_to_string(manifest_path).map_err(|source| DatasetError::ManifestIo {
            path: manifest_path.to_path_buf(),
            source,
        })?;
    let records: Vec<Value> =
        serde_json::from_str(&raw).map_err(|e| DatasetError::ManifestFormat {
            path: manifest_path.to_path_buf(),
            message: e.to_string(),
        })?;

    let mut schemas: BTreeMap<String, String> = BTreeMap::new();
    let mut items = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        let obj = record.as_object().ok_or(DatasetError::MalformedRecord {
            index,
            key: "<record>",
            problem: "is not a JSON object".into(),
        })?;
        let question_id = match obj.get("question_id") {
            None | Some(Value::Null) => index.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(_) => {
                return Err(DatasetError::MalformedRecord {
                    index,
                    key: "question_id",
                    problem: "must be a string or number".into(),
                })
            }
        };
        let db_id = required_str(obj, index, "db_id")?;
        let nlq = required_str(obj, index, "question")?;
        let gold_sql = required_str(obj, index, "SQL")?;
        let evidence = match obj.get("evidence") {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                return Err(DatasetError::MalformedRecord {
                    index,
                    key: "evidence",
                    problem: "must be a string".into(),
                })
            }
        };
        let difficulty = match obj.get("difficulty") {
            None | Some(Value::Null) => Difficulty::Unknown,
            Some(Value::String(s)) => {
                Difficulty::parse(s).ok_or_else(|| DatasetError::MalformedRecord {
                    index,
                    key: "difficulty",
                    problem: format!("has unrecognised value {s:?}"),
                })?
            }
            Some(_) => {
                return Err(DatasetError::MalformedRecord {
                    index,
                    key: "difficulty",
                    problem: "must be a string".into(),
                })
            }
        };

        let schema_text = match schemas.get(&db_id) {
            Some(text) => text.clone(),
            None => {
                let path = database_path(db_root, &db_id);
                if !path.is_file() {
                    return Err(DatasetError::MissingDatabase { db_id, path });
                }
                let text = render_schema(&introspect_schema(&path)?, None)?;
                schemas.insert(db_id.clone(), text.clone());
                text
            }
        };

        items.push(Exemplar {
            question_id,
            db_id,
            nlq,
            evidence,
            gold_sql,
            difficulty,
            schema_text,
        });
    }
    Corpus::new(items, db_root)
}

fn required_str(
    obj: &serde_json::Map<String, Value>,
    index: usize,
    key: &'static str,
) -> Result<String, DatasetError> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(DatasetError::MalformedRecord {
            index,
            key,
            problem: "is empty".into(),
        }),
        Some(_) => Err(DatasetError::MalformedRecord {
            index,
            key,
            problem: "must be a string".into(),
        }),
        None => Err(DatasetError::MalformedRecord {
            index,
            key,
            problem: "is missing".into(),
        }),
    }
}

/// Reads user tables (catalog order), columns (declaration order) and
/// foreign keys from a SQLite file.
pub fn introspect_schema(db_path: &Path) -> Result<SchemaDescriptor, DatasetError> {
    let unreadable = |e: rusqlite::Error| DatasetError::UnreadableDatabase {
        path: db_path.to_path_buf(),
        message: e.to_string(),
    };
    if !db_path.is_file() {
        return Err(DatasetError::UnreadableDatabase {
            path: db_path.to_path_buf(),
            message: "no such file".into(),
        });
    }
    let conn = Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(unreadable)?;

    let table_names: Vec<String> = {
        let mut stmt = conn
            .prepare(
                "SELECT name FROM sqlite_master \
                 WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
            )
            .map_err(unreadable)?;
        let rows = stmt
            .query_map([], |row| row.get::<_, String>(0))
            .map_err(unreadable)?;
        rows.collect::<Result<_, _>>().map_err(unreadable)?
    };

    let mut tables = Vec::with_capacity(table_names.len());
    let mut pending_fks = Vec::new();
    for name in &table_names {
        let mut stmt = conn
            .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")
            .map_err(unreadable)?;
        let cols: Vec<(String, String, i64)> = stmt
            .query_map([name], |row| Ok((row.get(0)?, row.get(1)?, row.get(2)?)))
            .map_err(unreadable)?
            .collect::<Result<_, _>>()
            .map_err(unreadable)?;
        tables.push(TableSchema {
            name: name.clone(),
            columns: cols
                .iter()
                .map(|(c, t, _)| (c.clone(), t.to_ascii_lowercase()))
                .collect(),
        });

        let mut stmt = conn
            .prepare(
                "SELECT \"table\", \"from\", \"to\" FROM pragma_foreign_key_list(?1) ORDER BY id, seq",
            )
            .map_err(unreadable)?;
        let fks: Vec<(String, String, Option<String>)> = stmt
            .query_map([name], |row| Ok((row.get(0)?, row.get(1)?, row.get(2)?)))
            .map_err(unreadable)?
            .collect::<Result<_, _>>()
            .map_err(unreadable)?;
        for (target, from, to) in fks {
            pending_fks.push((name.clone(), from, target, to));
        }
    }

    // A foreign key without an explicit target column refers to the target's primary key.
    let mut foreign_keys = Vec::with_capacity(pending_fks.len());
    for (table, from, target, to) in pending_fks {
        let column = match to {
            Some(c) => c,
            None => {
                let mut stmt = conn
                    .prepare("SELECT name FROM pragma_table_info(?1) WHERE pk > 0 ORDER BY pk")
                    .map_err(unreadable)?;
                stmt.query_row([&target], |row| row.get::<_, String>(0))
                    .unwrap_or_default()
            }
        };
        foreign_keys.push(ForeignKey {
            from: ColumnRef {
                table,
                column: from,
            },
            to: ColumnRef {
                table: target,
                column,
            },
        });
    }

    let db_name = db_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SchemaDescriptor {
        db_name,
        tables,
        foreign_keys,
    })
}

/// Renders a schema in the prompt layout:
///
/// ```text
/// Database Name: movie_3
/// Tables: ['film']
/// #Columns:
/// film: [film_id:integer, title:text, rating:text]
/// ```
pub fn render_schema(
    desc: &SchemaDescriptor,
    table_filter: Option<&BTreeSet<String>>,
) -> Result<String, DatasetError> {
    if let Some(filter) = table_filter {
        for name in filter {
            if !desc.tables.iter().any(|t| &t.name == name) {
                return Err(DatasetError::UnknownTable(name.clone()));
            }
        }
    }
    let kept: Vec<&TableSchema> = desc
        .tables
        .iter()
        .filter(|t| table_filter.is_none_or(|f| f.contains(&t.name)))
        .collect();

    let quoted: Vec<String> = kept.iter().map(|t| format!("'{}'", t.name)).collect();
    let mut out = format!(
        "Database Name: {}\nTables: [{}]\n#Columns:",
        desc.db_name,
        quoted.join(", ")
    );
    for table in kept {
        let cols: Vec<String> = table
            .columns
            .iter()
            .map(|(c, t)| format!("{c}:{t}"))
            .collect();
        out.push_str(&format!("\n{}: [{}]", table.name, cols.join(", ")));
    }
    Ok(out)
}

/// Number of validation items for a corpus of `n`: `ceil(n * fraction)`,
/// kept within `[1, n - 1]` so neither side is empty.
pub fn valid_size(n: usize, valid_fraction: f64) -> usize {
    // The epsilon absorbs representation error such as 0.7 * 10 = 7.000000000000001.
    let raw = (n as f64 * valid_fraction - 1e-9).ceil().max(1.0) as usize;
    raw.min(n.saturating_sub(1))
}

pub fn split(corpus: &Corpus, valid_fraction: f64, seed: u64) -> Result<Split, DatasetError> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(DatasetError::BadFraction(valid_fraction));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(DatasetError::CorpusTooSmall { size: n });
    }
    let n_valid = valid_size(n, valid_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, "dataset.split"));
    let valid_idx: BTreeSet<usize> = order[..n_valid].iter().copied().collect();

    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, item) in corpus.items.iter().enumerate() {
        if valid_idx.contains(&i) {
            valid.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok(Split {
        train: corpus.with_items(train),
        valid: corpus.with_items(valid),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Uniform,
    WithReplacement,
    Stratified,
}

/// Largest-remainder allocation of `k` slots proportional to `counts`.
///
/// Ties on the fractional remainder go to the earlier stratum.
pub fn stratified_allocation(counts: &[usize], k: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut alloc: Vec<usize> = counts.iter().map(|&c| k * c / total).collect();
    let mut remainders: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| ((k * c) % total, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = alloc.iter().sum();
    for &(_, i) in remainders.iter().take(k - assigned) {
        alloc[i] += 1;
    }
    alloc
}

pub fn sample_exemplars(
    corpus: &Corpus,
    k: usize,
    seed: u64,
    mode: SampleMode,
) -> Result<Vec<Exemplar>, DatasetError> {
    sample_items(&corpus.items, k, seed, mode)
}

/// Slice form of [`sample_exemplars`].
pub fn sample_items(
    items: &[Exemplar],
    k: usize,
    seed: u64,
    mode: SampleMode,
) -> Result<Vec<Exemplar>, DatasetError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if items.is_empty() {
        return Err(DatasetError::SampleTooLarge { k, available: 0 });
    }
    let mut rng = rng::substream(seed, "dataset.sample");
    match mode {
        SampleMode::Uniform => {
            if k > items.len() {
                return Err(DatasetError::SampleTooLarge {
                    k,
                    available: items.len(),
                });
            }
            Ok(rand::seq::index::sample(&mut rng, items.len(), k)
                .into_iter()
                .map(|i| items[i].clone())
                .collect())
        }
        SampleMode::WithReplacement => Ok((0..k)
            .map(|_| items[rng.gen_range(0..items.len())].clone())
            .collect()),
        SampleMode::Stratified => {
            let strata: Vec<Vec<&Exemplar>> = Difficulty::LABELLED
                .iter()
                .map(|d| items.iter().filter(|e| e.difficulty == *d).collect())
                .collect();
            let counts: Vec<usize> = strata.iter().map(Vec::len).collect();
            let available: usize = counts.iter().sum();
            if k > available {
                return Err(DatasetError::SampleTooLarge { k, available });
            }
            let alloc = stratified_allocation(&counts, k);
            let mut out = Vec::with_capacity(k);
            for (stratum, take) in strata.iter().zip(alloc) {
                for i in rand::seq::index::sample(&mut rng, stratum.len(), take) {
                    out.push(stratum[i].clone());
                }
            }
            out.shuffle(&mut rng);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: usize, difficulty: Difficulty) -> Exemplar {
        Exemplar {
            question_id: id.to_string(),
            db_id: "db".into(),
            nlq: format!("question {id}"),
            evidence: String::new(),
            gold_sql: "SELECT 1".into(),
            difficulty,
            schema_text: "Database Name: db\nTables: []\n#Columns:".into(),
        }
    }

    fn corpus(n: usize) -> Corpus {
        Corpus::new(
            (0..n).map(|i| item(i, Difficulty::Simple)).collect(),
            "/tmp",
        )
        .unwrap()
    }

    #[test]
    fn split_sizes_follow_ceiling_rule() {
        let s = split(&corpus(10), 0.2, 7).unwrap();
        assert_eq!((s.valid.len(), s.train.len()), (2, 8));
        let s = split(&corpus(5), 0.5, 7).unwrap();
        assert_eq!((s.valid.len(), s.train.len()), (3, 2));
        assert_eq!(valid_size(10, 0.7), 7);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let c = corpus(10);
        let a = split(&c, 0.2, 7).unwrap();
        let b = split(&c, 0.2, 7).unwrap();
        assert_eq!(a.valid.items, b.valid.items);
        let train: HashSet<_> = a.train.items.iter().map(|e| &e.question_id).collect();
        assert!(a
            .valid
            .items
            .iter()
            .all(|e| !train.contains(&e.question_id)));
    }

    #[test]
    fn split_rejects_tiny_corpus_and_bad_fraction() {
        assert!(matches!(
            split(&corpus(1), 0.2, 0),
            Err(DatasetError::CorpusTooSmall { size: 1 })
        ));
        assert!(matches!(
            split(&corpus(4), 1.0, 0),
            Err(DatasetError::BadFraction(_))
        ));
    }

    #[test]
    fn sampling_edge_cases() {
        let c = corpus(6);
        assert!(sample_exemplars(&c, 0, 1, SampleMode::Uniform)
            .unwrap()
            .is_empty());
        let all = sample_exemplars(&c, 6, 1, SampleMode::Uniform).unwrap();
        let mut ids: Vec<_> = all.iter().map(|e| e.question_id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = c.items.iter().map(|e| e.question_id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
        assert!(matches!(
            sample_exemplars(&c, 7, 1, SampleMode::Uniform),
            Err(DatasetError::SampleTooLarge { k: 7, available: 6 })
        ));
        assert_eq!(
            sample_exemplars(&c, 20, 1, SampleMode::WithReplacement)
                .unwrap()
                .len(),
            20
        );
        let empty = corpus(0);
        assert!(sample_exemplars(&empty, 1, 1, SampleMode::WithReplacement).is_err());
    }

    #[test]
    fn largest_remainder_allocation() {
        // 6/3/3 corpus, k = 4: exact quotas 2, 1, 1.
        assert_eq!(stratified_allocation(&[6, 3, 3], 4), vec![2, 1, 1]);
        // 5/3/2, k = 4: quotas 2.0, 1.2, 0.8 -> floors 2,1,0, remainder to the 0.8.
        assert_eq!(stratified_allocation(&[5, 3, 2], 4), vec![2, 1, 1]);
        assert_eq!(stratified_allocation(&[1, 1, 1], 2), vec![1, 1, 0]);
    }

    #[test]
    fn stratified_sampling_matches_allocation_and_skips_unknown() {
        let mut items = Vec::new();
        let mut id = 0;
        for (d, n) in [
            (Difficulty::Simple, 6),
            (Difficulty::Moderate, 3),
            (Difficulty::Challenging, 3),
            (Difficulty::Unknown, 5),
        ] {
            for _ in 0..n {
                items.push(item(id, d));
                id += 1;
            }
        }
        let c = Corpus::new(items, "/tmp").unwrap();
        let s = sample_exemplars(&c, 4, 3, SampleMode::Stratified).unwrap();
        let count = |d| s.iter().filter(|e| e.difficulty == d).count();
        assert_eq!(
            (
                count(Difficulty::Simple),
                count(Difficulty::Moderate),
                count(Difficulty::Challenging),
                count(Difficulty::Unknown)
            ),
            (2, 1, 1, 0)
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let items = vec![item(1, Difficulty::Simple), item(1, Difficulty::Moderate)];
        assert!(matches!(
            Corpus::new(items, "/tmp"),
            Err(DatasetError::DuplicateQuestionId(_))
        ));
    }

    #[test]
    fn difficulty_parsing() {
        assert_eq!(Difficulty::parse("moderate"), Some(Difficulty::Moderate));
        assert_eq!(
            Difficulty::parse("Challenging"),
            Some(Difficulty::Challenging)
        );
        assert_eq!(Difficulty::parse("hard"), None);
    }
}
