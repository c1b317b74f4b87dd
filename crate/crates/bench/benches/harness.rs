use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use nl2sql_po::fixtures;
use nl2sql_po::prompts::render_nl2sql;
use nl2sql_po::sqlharness::{self, execution_match, Executor, Value};
use nl2sql_po::{Prompt, ResultTable};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn table(rows: usize, rng: &mut ChaCha8Rng) -> ResultTable {
    let rows = (0..rows)
        .map(|i| {
            vec![
                Value::Integer(i as i64),
                Value::Real(rng.gen_range(0.0..100.0)),
                Value::Text(format!("row-{}", rng.gen_range(0..50))),
            ]
        })
        .collect();
    ResultTable::new(3, rows)
}

fn bench_match(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("execution_match");
    for n in [10, 1_000, 10_000] {
        let gold = table(n, &mut rng);
        let mut pred = gold.clone();
        pred.rows.shuffle(&mut rng);
        group.bench_function(format!("permuted/{n}"), |b| {
            b.iter(|| execution_match(black_box(&pred), black_box(&gold)))
        });
    }
    // Values within tolerance that sort apart force the matching fallback.
    let gold = ResultTable::new(
        1,
        (0..200)
            .map(|i| vec![Value::Real(i as f64 * 1e-7)])
            .collect(),
    );
    let pred = ResultTable::new(
        1,
        (0..200)
            .rev()
            .map(|i| vec![Value::Real(i as f64 * 1e-7 + 4e-7)])
            .collect(),
    );
    group.bench_function("tolerance/200", |b| {
        b.iter(|| execution_match(black_box(&pred), black_box(&gold)))
    });
    group.finish();
}

fn bench_execute(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let shop = fixtures::shop(dir.path()).unwrap();
    let sql = "SELECT c.city, SUM(o.quantity) FROM orders AS o JOIN customers AS c \
               ON o.customer_id = c.customer_id GROUP BY c.city";
    let mut group = c.benchmark_group("execute");
    group.bench_function("shared_executor", |b| {
        let mut exec = Executor::new();
        b.iter(|| exec.execute(&shop, black_box(sql), 5.0))
    });
    group.bench_function("fresh_connection", |b| {
        b.iter(|| sqlharness::execute(&shop, black_box(sql), 5.0))
    });
    group.finish();
}

fn bench_render(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let items = fixtures::shop_items(dir.path(), 40).unwrap();
    let query = items[0].clone();
    let mut group = c.benchmark_group("render_nl2sql");
    for k in [0, 10, 100] {
        let prompt = Prompt::new(Prompt::base().instruction, items[..k].to_vec());
        group.bench_function(format!("exemplars/{k}"), |b| {
            b.iter_batched(
                || prompt.clone(),
                |p| render_nl2sql(&p, black_box(&query)),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_match, bench_execute, bench_render);
criterion_main!(benches);
