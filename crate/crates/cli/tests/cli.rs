use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nl2sql_po::fixtures;
use nl2sql_po::prompts::DEFAULT_INSTRUCTION;
use nl2sql_po::Prompt;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nl2sql-po"))
        .args(args)
        .env_remove("NL2SQL_PO_API_KEY")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
    manifest: PathBuf,
}

impl Fixture {
    fn movie() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let items = fixtures::movie_items(dir.path()).unwrap();
        Self::with_items(dir, &items)
    }

    fn shop(per_tag: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let items = fixtures::shop_items(dir.path(), per_tag).unwrap();
        Self::with_items(dir, &items)
    }

    fn with_items(dir: TempDir, items: &[nl2sql_po::Exemplar]) -> Self {
        let manifest = dir.path().join("dev.json");
        fixtures::write_manifest(&manifest, items).unwrap();
        Self { dir, manifest }
    }

    fn root(&self) -> &str {
        self.dir.path().to_str().unwrap()
    }

    fn manifest(&self) -> &str {
        self.manifest.to_str().unwrap()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data_args(&self) -> Vec<String> {
        vec![
            "--manifest".into(),
            self.manifest().into(),
            "--db-root".into(),
            self.root().into(),
        ]
    }

    fn optimize(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec!["optimize".into()];
        args.extend(self.data_args());
        args.extend(["--out".into(), out.to_str().unwrap().into()]);
        args.extend(extra.iter().map(|s| s.to_string()));
        run(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn eval(&self, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec!["eval".into()];
        args.extend(self.data_args());
        args.extend(extra.iter().map(|s| s.to_string()));
        run(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

fn read_prompt(dir: &Path) -> Prompt {
    serde_json::from_str(&std::fs::read_to_string(dir.join("prompt.json")).unwrap()).unwrap()
}

#[test]
fn ingest_counts_items() {
    let f = Fixture::movie();
    let o = run(&["ingest", "--manifest", f.manifest(), "--db-root", f.root()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("3 items\n"), "{out}");
    assert!(out.contains("simple: 1"), "{out}");
    assert!(out.contains("challenging: 1"), "{out}");
}

#[test]
fn ingest_missing_database_is_usage_error() {
    let f = Fixture::movie();
    std::fs::remove_file(f.path("movie_3/movie_3.sqlite")).unwrap();
    let o = run(&["ingest", "--manifest", f.manifest(), "--db-root", f.root()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("movie_3"), "{}", stderr(&o));
}

#[test]
fn ingest_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.json");
    std::fs::write(&manifest, "[]").unwrap();
    let o = run(&[
        "ingest",
        "--manifest",
        manifest.to_str().unwrap(),
        "--db-root",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("0 items"));
}

#[test]
fn ores_without_trials_returns_base_prompt() {
    let f = Fixture::shop(4);
    let out = f.path("run");
    let o = f.optimize(
        &out,
        &[
            "--backend",
            "oracle:gold",
            "--method",
            "ores",
            "--trials",
            "0",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let prompt = read_prompt(&out);
    assert!(prompt.exemplars.is_empty());
    assert_eq!(prompt.instruction, DEFAULT_INSTRUCTION);
    for name in [
        "study.json",
        "final_report.json",
        "summary.json",
        "config.json",
        "run.log",
    ] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
}

#[test]
fn ores_writes_one_report_per_trial() {
    let f = Fixture::shop(8);
    let out = f.path("run");
    let o = f.optimize(
        &out,
        &[
            "--backend",
            "oracle:kdep",
            "--method",
            "ores",
            "--trials",
            "20",
            "--k-max",
            "20",
            "--seed",
            "3",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reports: Vec<_> = std::fs::read_dir(out.join("reports")).unwrap().collect();
    assert_eq!(reports.len(), 20);
    let study: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("study.json")).unwrap()).unwrap();
    assert_eq!(study["trials"].as_array().unwrap().len(), 20);
}

#[test]
fn ipo_runs_five_iterations() {
    let f = Fixture::shop(10);
    let out = f.path("run");
    let o = f.optimize(
        &out,
        &[
            "--backend",
            "oracle:coverage",
            "--method",
            "ipo",
            "--iterations",
            "5",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let prompt = read_prompt(&out);
    assert_eq!(prompt.metadata.method, "ipo");
    assert_eq!(prompt.metadata.iterations, Some(5));
    assert!(prompt.exemplars.len() >= 5);
}

#[test]
fn eval_with_all_correct_oracle() {
    let f = Fixture::shop(3);
    let prompt_path = f.path("prompt.json");
    std::fs::write(
        &prompt_path,
        serde_json::to_string(&Prompt::base()).unwrap(),
    )
    .unwrap();
    let o = f.eval(&[
        "--backend",
        "oracle:gold",
        "--prompt",
        prompt_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("accuracy: 100.00% (9/9)"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn eval_missing_artifact_is_usage_error() {
    let f = Fixture::shop(1);
    let o = f.eval(&[
        "--backend",
        "oracle:gold",
        "--prompt",
        "/nonexistent/prompt.json",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn saved_ipo_prompt_reevaluates_identically_under_replay() {
    let f = Fixture::shop(6);
    let run_dir = f.path("run");
    let o = f.optimize(
        &run_dir,
        &["--backend", "oracle:coverage", "--method", "ipo"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cache = f.path("cache");
    let recorded = f.eval(&[
        "--backend",
        "oracle:coverage",
        "--record",
        cache.to_str().unwrap(),
        "--prompt",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(recorded.status.code(), Some(0), "{}", stderr(&recorded));
    let replayed = f.eval(&[
        "--backend",
        "replay",
        "--cache",
        cache.to_str().unwrap(),
        "--prompt",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(replayed.status.code(), Some(0), "{}", stderr(&replayed));
    let first_line = |o: &Output| stdout(o).lines().next().unwrap().to_owned();
    assert_eq!(first_line(&recorded), first_line(&replayed));
}

#[test]
fn eval_latency_writes_gold_profile() {
    let f = Fixture::shop(2);
    let prompt_path = f.path("prompt.json");
    std::fs::write(
        &prompt_path,
        serde_json::to_string(&Prompt::base()).unwrap(),
    )
    .unwrap();
    let out = f.path("eval");
    let o = f.eval(&[
        "--backend",
        "oracle:gold",
        "--prompt",
        prompt_path.to_str().unwrap(),
        "--latency",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("| GT "), "{}", stdout(&o));
    for name in ["eval_report.json", "summary.json", "gt_latency.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
}

#[test]
fn replay_miss_is_runtime_failure() {
    let f = Fixture::shop(2);
    let prompt_path = f.path("prompt.json");
    std::fs::write(
        &prompt_path,
        serde_json::to_string(&Prompt::base()).unwrap(),
    )
    .unwrap();
    let cache = f.path("empty-cache");
    std::fs::create_dir(&cache).unwrap();
    let o = f.eval(&[
        "--backend",
        "replay",
        "--cache",
        cache.to_str().unwrap(),
        "--prompt",
        prompt_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("no replay entry"), "{}", stderr(&o));
}

#[test]
fn augment_writes_validated_records() {
    let f = Fixture::shop(2);
    let out = f.path("bird_multi");
    let mut args = vec!["augment".to_owned()];
    args.extend(f.data_args());
    args.extend(
        [
            "--backend",
            "oracle:gold",
            "--repeats",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]
        .map(String::from),
    );
    let o = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let records = nl2sql_po::benchgen::read_records(&out.join("bird_multi.jsonl")).unwrap();
    assert_eq!(records.len(), 6);
    assert!(records
        .iter()
        .all(|r| r.variants.len() == 2 && r.variants.iter().all(|v| v.matches_gold)));
    assert!(out.join("progress.json").is_file());
}

#[test]
fn report_renders_one_row_per_run() {
    let f = Fixture::shop(4);
    let mut dirs = Vec::new();
    for method in ["res", "ores", "joint", "ipo"] {
        let out = f.path(method);
        let o = f.optimize(
            &out,
            &[
                "--backend",
                "oracle:coverage",
                "--method",
                method,
                "--trials",
                "4",
                "--iterations",
                "2",
                "--restarts",
                "2",
                "--pairs",
                "2",
                "--k",
                "3",
            ],
        );
        assert_eq!(o.status.code(), Some(0), "{method}: {}", stderr(&o));
        dirs.push(out);
    }
    let one = run(&["report", "--runs", dirs[0].to_str().unwrap()]);
    assert_eq!(one.status.code(), Some(0), "{}", stderr(&one));
    let text = stdout(&one);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("| RES")).count(),
        2,
        "{text}"
    );

    let tables = f.path("tables");
    let mut args = vec![
        "report".to_owned(),
        "--out".to_owned(),
        tables.to_str().unwrap().to_owned(),
        "--runs".to_owned(),
    ];
    args.extend(dirs.iter().map(|d| d.to_str().unwrap().to_owned()));
    let all = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(all.status.code(), Some(0), "{}", stderr(&all));
    let text = stdout(&all);
    assert!(text.contains("| Method | Simple"), "{text}");
    for name in ["RES", "ORES", "Joint", "IPO"] {
        assert!(
            text.contains(&format!("| {name} ")),
            "{name} missing: {text}"
        );
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tables.join("tables.json")).unwrap())
            .unwrap();
    assert_eq!(json[0]["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn report_on_empty_dir_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--runs", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let f = Fixture::shop(3);
    let cfg = f.path("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "manifest = {:?}\ndb_root = {:?}\nbackend = \"oracle:gold\"\nseed = 11\n[optimization]\nnum_trials = 2\n",
            f.manifest(),
            f.root()
        ),
    )
    .unwrap();
    let out = f.path("run");
    let o = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "optimize",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "12",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let recorded: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(recorded["optimization"]["seed"], 12);
    assert_eq!(recorded["optimization"]["num_trials"], 2);
    assert_eq!(recorded["backend"], "oracle:gold");
}

#[test]
fn config_file_with_credentials_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "api_key = \"sk-secret\"\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "report", "--runs", "."]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("NL2SQL_PO_API_KEY"));
    assert!(!stderr(&o).contains("sk-secret"));
}

#[test]
fn bad_backend_and_missing_cache_are_usage_errors() {
    let f = Fixture::shop(2);
    let out = f.path("run");
    let o = f.optimize(&out, &["--backend", "oracle:nope"]);
    assert_eq!(o.status.code(), Some(2));
    let o = f.optimize(&out, &["--backend", "replay"]);
    assert_eq!(o.status.code(), Some(2));
    let o = f.optimize(
        &out,
        &["--backend", "live", "--endpoint", "http://127.0.0.1:9/v1"],
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "live without a key must not start"
    );
    let o = f.optimize(&out, &["--backend", "oracle:gold", "--method", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}
