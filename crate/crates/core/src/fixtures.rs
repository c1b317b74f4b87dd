//! Small hand-built SQLite databases and corpora for tests, benches and
//! offline demos.
//!
//! Every builder writes `<root>/<db_id>/<db_id>.sqlite`, replacing any file
//! already there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde_json::json;

use crate::dataset::{
    database_path, introspect_schema, render_schema, DatasetError, Difficulty, Exemplar,
};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Sqlite(#[from] rusqlite::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn build_db(root: &Path, db_id: &str, script: &str) -> Result<PathBuf, FixtureError> {
    let path = database_path(root, db_id);
    std::fs::create_dir_all(path.parent().expect("database path has a parent"))?;
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    let conn = Connection::open(&path)?;
    conn.execute_batch(script)?;
    Ok(path)
}

/// Full (unfiltered) schema text of a fixture database.
pub fn schema_text(root: &Path, db_id: &str) -> Result<String, FixtureError> {
    Ok(render_schema(
        &introspect_schema(&database_path(root, db_id))?,
        None,
    )?)
}

pub fn item(
    db_id: &str,
    schema: &str,
    question_id: impl Into<String>,
    nlq: impl Into<String>,
    evidence: impl Into<String>,
    sql: impl Into<String>,
    difficulty: Difficulty,
) -> Exemplar {
    Exemplar {
        question_id: question_id.into(),
        db_id: db_id.into(),
        nlq: nlq.into(),
        evidence: evidence.into(),
        gold_sql: sql.into(),
        difficulty,
        schema_text: schema.into(),
    }
}

/// Writes items as a BIRD-style JSON manifest.
pub fn write_manifest(path: &Path, items: &[Exemplar]) -> Result<(), FixtureError> {
    let records: Vec<_> = items
        .iter()
        .map(|e| {
            let mut r = json!({
                "question_id": e.question_id,
                "db_id": e.db_id,
                "question": e.nlq,
                "evidence": e.evidence,
                "SQL": e.gold_sql,
            });
            if e.difficulty != Difficulty::Unknown {
                r["difficulty"] = json!(e.difficulty.as_str());
            }
            r
        })
        .collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(
        path,
        serde_json::to_string_pretty(&records).expect("manifest serializes"),
    )?;
    Ok(())
}

pub const MOVIE_DB: &str = "movie_3";

pub fn movie_3(root: &Path) -> Result<PathBuf, FixtureError> {
    build_db(
        root,
        MOVIE_DB,
        "CREATE TABLE film (film_id integer PRIMARY KEY, title text, rating text);
         CREATE TABLE actor (actor_id integer PRIMARY KEY, first_name text, last_name text);
         CREATE TABLE film_actor (
             actor_id integer REFERENCES actor(actor_id),
             film_id integer,
             FOREIGN KEY (film_id) REFERENCES film(film_id)
         );
         INSERT INTO film VALUES
             (1, 'ACADEMY DINOSAUR', 'PG'), (2, 'ACE GOLDFINGER', 'G'),
             (3, 'ADAPTATION HOLES', 'NC-17'), (4, 'AFFAIR PREJUDICE', 'G'),
             (5, 'AGENT TRUMAN', 'PG'), (6, 'AIRPLANE SIERRA', 'PG-13'),
             (7, 'AIRPORT POLLOCK', 'R'), (8, 'ALABAMA DEVIL', 'PG-13');
         INSERT INTO actor VALUES
             (1, 'PENELOPE', 'GUINESS'), (2, 'NICK', 'WAHLBERG'), (3, 'ED', 'CHASE');
         INSERT INTO film_actor VALUES (1, 1), (1, 6), (2, 3), (2, 8), (3, 6), (3, 7);",
    )
}

pub const FIG3_NLQ: &str = "List all the films that are rated as PG-13.";
pub const FIG3_EVIDENCE: &str = "film refers to title; rated as PG-13 refers to rating = 'PG-13'.";
pub const FIG3_SQL: &str = "SELECT title FROM film WHERE rating = 'PG-13';";
pub const FIG3_SCHEMA: &str = "Database Name: movie_3\nTables: ['film']\n#Columns:\nfilm: [film_id:integer, title:text, rating:text]";

/// The PG-13 exemplar with its schema pruned to the `film` table.
pub fn fig3_exemplar() -> Exemplar {
    item(
        MOVIE_DB,
        FIG3_SCHEMA,
        "movie-pg13",
        FIG3_NLQ,
        FIG3_EVIDENCE,
        FIG3_SQL,
        Difficulty::Simple,
    )
}

/// Builds `movie_3` and three questions over it.
pub fn movie_items(root: &Path) -> Result<Vec<Exemplar>, FixtureError> {
    movie_3(root)?;
    let schema = schema_text(root, MOVIE_DB)?;
    Ok(vec![
        item(
            MOVIE_DB,
            &schema,
            "0",
            FIG3_NLQ,
            FIG3_EVIDENCE,
            FIG3_SQL,
            Difficulty::Simple,
        ),
        item(
            MOVIE_DB,
            &schema,
            "1",
            "How many films are rated G?",
            "rated G refers to rating = 'G'",
            "SELECT COUNT(*) FROM film WHERE rating = 'G'",
            Difficulty::Moderate,
        ),
        item(
            MOVIE_DB,
            &schema,
            "2",
            "Which films star Penelope Guiness?",
            "",
            "SELECT f.title FROM film AS f JOIN film_actor AS fa ON f.film_id = fa.film_id \
             JOIN actor AS a ON a.actor_id = fa.actor_id \
             WHERE a.first_name = 'PENELOPE' AND a.last_name = 'GUINESS'",
            Difficulty::Challenging,
        ),
    ])
}

pub const RENTAL_DB: &str = "film_rental";
pub const RENTAL_NLQ: &str = "Give the full name of the actor with the highest rental rate.";
pub const RENTAL_ORDER_BY_SQL: &str = "SELECT a.first_name, a.last_name FROM actor AS a JOIN film_actor AS fa ON a.actor_id = fa.actor_id JOIN film AS f ON fa.film_id = f.film_id ORDER BY f.rental_rate DESC LIMIT 1;";
pub const RENTAL_MAX_SQL: &str = "SELECT a.first_name, a.last_name FROM actor a JOIN film_actor fa ON a.actor_id = fa.actor_id JOIN film f ON fa.film_id = f.film_id WHERE f.rental_rate = (SELECT MAX(rental_rate) FROM film) LIMIT 1;";

/// One film holds the unique highest rental rate and has a single actor.
pub fn film_rental(root: &Path) -> Result<PathBuf, FixtureError> {
    build_db(
        root,
        RENTAL_DB,
        "CREATE TABLE actor (actor_id integer PRIMARY KEY, first_name text, last_name text);
         CREATE TABLE film (film_id integer PRIMARY KEY, title text, rental_rate real);
         CREATE TABLE film_actor (actor_id integer, film_id integer);
         INSERT INTO actor VALUES (1, 'PENELOPE', 'GUINESS'), (2, 'NICK', 'WAHLBERG'), (3, 'ED', 'CHASE');
         INSERT INTO film VALUES (1, 'ACADEMY DINOSAUR', 0.99), (2, 'ACE GOLDFINGER', 4.99), (3, 'ADAPTATION HOLES', 2.99);
         INSERT INTO film_actor VALUES (1, 1), (2, 2), (3, 3), (3, 1);",
    )
}

pub const PLATFORM_DB: &str = "movie_platform";
pub const AVATAR_NLQ: &str =
    "Show the avatar of the user who gave the rating at 2019/10/17 1:36:36.";
pub const AVATAR_SUBQUERY_SQL: &str = "SELECT user_avatar_image_url FROM lists_users WHERE user_id = (SELECT user_id FROM ratings WHERE rating_timestamp_utc LIKE '2019-10-17 01:36:36')";
pub const AVATAR_JOIN_SQL: &str = "SELECT T2.user_avatar_image_url FROM ratings AS T1 INNER JOIN lists_users AS T2 ON T1.user_id = T2.user_id WHERE T1.rating_timestamp_utc LIKE '2019-10-17 01:36:36'";

/// Exactly one rating carries the probed timestamp; its user owns two lists
/// with the same avatar, so both query forms return two identical rows.
pub fn movie_platform(root: &Path) -> Result<PathBuf, FixtureError> {
    build_db(
        root,
        PLATFORM_DB,
        "CREATE TABLE ratings (movie_id integer, rating_id integer, rating_score integer,
                               rating_timestamp_utc text, user_id integer);
         CREATE TABLE lists_users (user_id integer, list_id integer, user_avatar_image_url text);
         INSERT INTO ratings VALUES
             (10, 1, 3, '2019-10-16 22:01:02', 41),
             (11, 2, 5, '2019-10-17 01:36:36', 42),
             (12, 3, 4, '2019-10-18 09:00:00', 43);
         INSERT INTO lists_users VALUES
             (41, 100, 'https://img.example/41.jpg'),
             (42, 101, 'https://img.example/42.jpg'),
             (42, 102, 'https://img.example/42.jpg'),
             (43, 103, 'https://img.example/43.jpg');",
    )
}

pub const SHOP_DB: &str = "shop";
pub const SHOP_CUSTOMERS: usize = 200;
const SHOP_PRODUCTS: usize = 17;

pub fn shop(root: &Path) -> Result<PathBuf, FixtureError> {
    let mut script = String::from(
        "CREATE TABLE customers (customer_id integer PRIMARY KEY, name text, city text);
         CREATE TABLE products (product_id integer PRIMARY KEY, name text, price real);
         CREATE TABLE orders (
             order_id integer PRIMARY KEY,
             customer_id integer REFERENCES customers(customer_id),
             product_id integer REFERENCES products(product_id),
             quantity integer
         );
         BEGIN;\n",
    );
    let cities = ["Lisbon", "Oslo", "Quito", "Accra", "Hanoi"];
    for p in 1..=SHOP_PRODUCTS {
        writeln!(
            script,
            "INSERT INTO products VALUES ({p}, 'product-{p}', {}.5);",
            p * 3
        )
        .unwrap();
    }
    let mut order_id = 1;
    for c in 1..=SHOP_CUSTOMERS {
        writeln!(
            script,
            "INSERT INTO customers VALUES ({c}, 'customer-{c}', '{}');",
            cities[c % cities.len()]
        )
        .unwrap();
        for j in 0..(c % 3) + 1 {
            let product = (c * 7 + j * 5) % SHOP_PRODUCTS + 1;
            writeln!(
                script,
                "INSERT INTO orders VALUES ({order_id}, {c}, {product}, {});",
                j + 1
            )
            .unwrap();
            order_id += 1;
        }
    }
    script.push_str("COMMIT;");
    build_db(root, SHOP_DB, &script)
}

/// Builds `shop` and `per_tag` questions for each construct class (join,
/// aggregate, filter), interleaved join/aggregate/filter. Joins are labelled
/// challenging, aggregates moderate and filters simple.
pub fn shop_items(root: &Path, per_tag: usize) -> Result<Vec<Exemplar>, FixtureError> {
    assert!(
        per_tag <= SHOP_CUSTOMERS,
        "at most {SHOP_CUSTOMERS} questions per tag"
    );
    shop(root)?;
    let schema = schema_text(root, SHOP_DB)?;
    let mut items = Vec::with_capacity(per_tag * 3);
    for i in 1..=per_tag {
        items.push(item(
            SHOP_DB,
            &schema,
            format!("join-{i}"),
            format!("Which products did customer-{i} order?"),
            format!("customer-{i} refers to name = 'customer-{i}'"),
            format!(
                "SELECT p.name FROM orders AS o JOIN customers AS c ON o.customer_id = c.customer_id \
                 JOIN products AS p ON o.product_id = p.product_id WHERE c.name = 'customer-{i}'"
            ),
            Difficulty::Challenging,
        ));
        items.push(item(
            SHOP_DB,
            &schema,
            format!("aggregate-{i}"),
            format!("How many items in total has customer {i} ordered?"),
            "",
            format!("SELECT SUM(quantity) FROM orders WHERE customer_id = {i}"),
            Difficulty::Moderate,
        ));
        items.push(item(
            SHOP_DB,
            &schema,
            format!("filter-{i}"),
            format!("In which city does customer {i} live?"),
            "",
            format!("SELECT city FROM customers WHERE customer_id = {i}"),
            Difficulty::Simple,
        ));
    }
    Ok(items)
}

pub const NUMBERS_DB: &str = "numbers";
pub const NUMBERS_ROWS: usize = 1000;

pub fn numbers(root: &Path) -> Result<PathBuf, FixtureError> {
    build_db(
        root,
        NUMBERS_DB,
        &format!(
            "CREATE TABLE numbers (n integer);
             WITH RECURSIVE seq(x) AS (SELECT 0 UNION ALL SELECT x + 1 FROM seq WHERE x + 1 < {NUMBERS_ROWS})
             INSERT INTO numbers SELECT x FROM seq;"
        ),
    )
}

pub fn fast_count_sql(i: usize) -> String {
    format!("SELECT COUNT(*) FROM numbers WHERE n < {i}")
}

/// Same result as [`fast_count_sql`], plus an always-true predicate over a
/// self cross join of `numbers`.
pub fn slow_count_sql(i: usize) -> String {
    format!(
        "SELECT COUNT(*) FROM numbers WHERE n < {i} \
         AND (SELECT COUNT(*) FROM numbers AS a, numbers AS b WHERE a.n < b.n) >= 0"
    )
}

/// Runs far past any sub-second timeout.
pub const RUNAWAY_SQL: &str = "SELECT COUNT(*) FROM numbers AS a, numbers AS b, numbers AS c";

pub fn numbers_items(root: &Path, count: usize) -> Result<Vec<Exemplar>, FixtureError> {
    numbers(root)?;
    let schema = schema_text(root, NUMBERS_DB)?;
    Ok((0..count)
        .map(|i| {
            let bound = 10 + i * 37;
            item(
                NUMBERS_DB,
                &schema,
                format!("count-{i}"),
                format!("How many numbers are smaller than {bound}?"),
                "",
                fast_count_sql(bound),
                Difficulty::Simple,
            )
        })
        .collect())
}

/// Directory of the golden prompt renders.
pub const GOLDEN_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden");

fn rated_g_exemplar() -> Exemplar {
    item(
        MOVIE_DB,
        FIG3_SCHEMA,
        "movie-g",
        "How many films are rated G?",
        "rated G refers to rating = 'G'",
        "SELECT COUNT(*) FROM film WHERE rating = 'G'",
        Difficulty::Moderate,
    )
}

fn customer_city(label: &str, i: usize) -> Exemplar {
    item(
        SHOP_DB,
        "Database Name: shop\nTables: ['customers']\n#Columns:\ncustomers: [customer_id:integer, name:text, city:text]",
        format!("{label}-{i}"),
        format!("{label} question {i}"),
        "",
        format!("SELECT city FROM customers WHERE customer_id = {i}"),
        Difficulty::Simple,
    )
}

/// `(file name, freshly rendered text)` for every golden file. Builds the
/// `movie_3` and `film_rental` databases under `root`.
pub fn golden_cases(root: &Path) -> Result<Vec<(&'static str, String)>, FixtureError> {
    use crate::prompts::{self, Prompt, ProposerContext, DEFAULT_INSTRUCTION};

    let movie = movie_items(root)?;
    film_rental(root)?;
    let movie_full = schema_text(root, MOVIE_DB)?;
    let film_only = render_schema(
        &introspect_schema(&database_path(root, MOVIE_DB))?,
        Some(&["film".to_owned()].into_iter().collect()),
    )?;
    let rental_full = schema_text(root, RENTAL_DB)?;

    let res = Prompt::new(
        DEFAULT_INSTRUCTION,
        vec![fig3_exemplar(), rated_g_exemplar()],
    );
    let best = Prompt::new(DEFAULT_INSTRUCTION, vec![fig3_exemplar()]);
    let current = Prompt::new("Write one SQLite query.", vec![rated_g_exemplar()]);
    let wrong: Vec<Exemplar> = (1..=3).map(|i| customer_city("wrong", i)).collect();
    let correct: Vec<Exemplar> = (4..=5).map(|i| customer_city("correct", i)).collect();
    let ctx = ProposerContext::new((&best, 0.5924), (&current, 0.4), &wrong, &correct, 5);

    Ok(vec![
        (
            "res_two_exemplars.txt",
            prompts::render_nl2sql(&res, &movie[2]),
        ),
        (
            "proposer_three_wrong_two_correct.txt",
            prompts::render_proposer(&ctx),
        ),
        (
            "variant_request_two.txt",
            prompts::render_variant_request(RENTAL_NLQ, &rental_full, RENTAL_ORDER_BY_SQL, 2),
        ),
        ("movie_3_full.txt", movie_full),
        ("movie_3_film_only.txt", film_only),
        ("film_rental_full.txt", rental_full),
    ])
}
