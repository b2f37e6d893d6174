use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
deterministic = true
jobs = 1
[data]
samples = 64
[teacher]
iterations = 20
batch_size = 4
[prune]
k = 2
n_gen = 2
conditions = [0, 1]
[kd]
iterations = 5
batch_size = 2
[scheduler]
num_inference_steps = 4
[eval]
samples_per_condition = 2
latency = false
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("exp.toml"), config).unwrap();
        Self { dir }
    }

    fn tiny() -> Self {
        Self::new(TINY)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ldprune"))
            .current_dir(self.dir.path())
            .env_remove("LDPRUNE_CACHE_DIR")
            .args(["--config", "exp.toml"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// The single run directory under `runs/`.
    fn run_dir(&self) -> PathBuf {
        let mut dirs: Vec<PathBuf> = fs::read_dir(self.dir.path().join("runs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap() != "cache")
            .collect();
        assert_eq!(dirs.len(), 1, "{dirs:?}");
        dirs.pop().unwrap()
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.run_dir().join(rel)).unwrap()
    }
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

/// CSV rows after the `# config_hash:` line and the header.
fn csv_rows(bytes: &[u8]) -> Vec<Vec<String>> {
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash: "));
    lines.next().unwrap();
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    let s = Sandbox::tiny();
    let help = s.run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("train-teacher"));
    assert_eq!(s.run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(s.run(&["prune", "--combinator", "median"]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_one_with_location() {
    let s = Sandbox::new("[prune]\nk = \"ten\"\n");
    let out = s.run(&["train-teacher"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("exp.toml") && err.contains("line 2"), "{err}");

    let s = Sandbox::new("[kd]\nlr = -1.0\n");
    assert_eq!(s.run(&["train-teacher"]).status.code(), Some(1));
}

#[test]
fn missing_upstream_stage_is_a_runtime_error() {
    let s = Sandbox::tiny();
    let out = s.run(&["prune"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-teacher"));
}

#[test]
fn flags_override_the_file() {
    let s = Sandbox::tiny();
    s.ok(&["train-teacher"]);
    s.ok(&["prune", "--k", "3", "--seed", "3"]);
    let dirs: Vec<PathBuf> = fs::read_dir(s.dir.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("reports/prune.json").exists())
        .collect();
    assert_eq!(dirs.len(), 1);
    let report = json(&fs::read(dirs[0].join("reports/prune.json")).unwrap());
    assert_eq!(report["k"], 3);
    assert_eq!(report["chosen"].as_array().unwrap().len(), 3);
    let resolved = fs::read_to_string(dirs[0].join("config.toml")).unwrap();
    assert!(resolved.contains("k = 3"), "{resolved}");
    assert!(resolved.contains("n_gen = 2"), "{resolved}");
}

#[test]
fn zero_iterations_writes_the_initial_weights() {
    let s = Sandbox::new(&TINY.replace("iterations = 20", "iterations = 0"));
    s.ok(&["train-teacher"]);
    assert!(s.read("checkpoints/teacher.ldpr").starts_with(b"LDPR"));
    let log = s.run_dir().join("logs/teacher.jsonl");
    assert!(!log.exists() || fs::read(&log).unwrap().is_empty());
}

#[test]
fn full_pipeline_embeds_the_config_hash_everywhere() {
    let s = Sandbox::tiny();
    s.ok(&["train-teacher"]);
    s.ok(&["score"]);
    s.ok(&["prune"]);
    s.ok(&["finetune"]);
    s.ok(&["finetune", "--scratch"]);
    s.ok(&["eval"]);
    s.ok(&["report"]);
    let hash = s.run_dir().file_name().unwrap().to_string_lossy().into_owned();

    for rel in [
        "reports/scores.json",
        "reports/prune.json",
        "eval/finetuned-vs-teacher.json",
    ] {
        assert_eq!(json(&s.read(rel))["config_hash"], hash.as_str(), "{rel}");
    }
    for rel in [
        "reports/scores.csv",
        "reports/prune.csv",
        "reports/rank_by_block.csv",
        "reports/rank_by_kind.csv",
    ] {
        let text = String::from_utf8(s.read(rel)).unwrap();
        assert!(text.starts_with(&format!("# config_hash: {hash}\n")), "{rel}");
    }
    let manifest = json(&s.read("manifest.json"));
    for name in ["teacher", "pruned", "finetuned", "scratch", "prune_report", "scores"] {
        assert!(manifest["artifacts"][name]["stage_hash"].is_string(), "{name}");
    }
    let lines = String::from_utf8(s.read("logs/finetuned.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5);
}

#[test]
fn reports_rank_every_candidate_once() {
    let s = Sandbox::tiny();
    s.ok(&["train-teacher"]);
    s.ok(&["prune"]);
    s.ok(&["report"]);
    let m = json(&s.read("reports/prune.json"))["m"].as_u64().unwrap() as usize;
    for rel in ["reports/rank_by_block.csv", "reports/rank_by_kind.csv"] {
        let rows = csv_rows(&s.read(rel));
        assert_eq!(rows.len(), m, "{rel}");
        let mut global: Vec<usize> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
        global.sort();
        assert_eq!(global, (1..=m).collect::<Vec<_>>(), "{rel}");
        assert_eq!(rows.iter().filter(|r| r[5] == "true").count(), 2, "{rel}");
        // Group ranks restart at 1 and count up inside each group.
        let mut last: Option<(&str, usize)> = None;
        for r in &rows {
            let rank: usize = r[2].parse().unwrap();
            match last {
                Some((g, prev)) if g == r[0] => assert_eq!(rank, prev + 1),
                _ => assert_eq!(rank, 1),
            }
            last = Some((&r[0], rank));
        }
    }
    let prune_rows = csv_rows(&s.read("reports/prune.csv"));
    assert_eq!(prune_rows.len(), m);
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let a = Sandbox::tiny();
    let b = Sandbox::tiny();
    for s in [&a, &b] {
        s.ok(&["train-teacher"]);
        s.ok(&["prune"]);
        s.ok(&["finetune"]);
    }
    for rel in [
        "checkpoints/teacher.ldpr",
        "checkpoints/pruned.ldpr",
        "checkpoints/finetuned.ldpr",
        "reports/prune.json",
        "reports/prune.csv",
        "logs/finetuned.jsonl",
    ] {
        assert!(a.read(rel) == b.read(rel), "{rel} differs");
    }
    // Rerunning in place changes nothing either; the cached scores are reused.
    let before = a.read("reports/prune.json");
    a.ok(&["prune"]);
    a.ok(&["finetune"]);
    assert!(a.read("reports/prune.json") == before);
    assert_eq!(
        String::from_utf8(a.read("logs/finetuned.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}

#[test]
fn scoring_cache_honours_the_environment() {
    let s = Sandbox::tiny();
    s.ok(&["train-teacher"]);
    let cache = s.dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_ldprune"))
        .current_dir(s.dir.path())
        .env("LDPRUNE_CACHE_DIR", &cache)
        .args(["--config", "exp.toml", "score"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
    assert!(!s.dir.path().join("runs/cache").exists());
}

#[test]
fn eval_of_a_model_against_itself_is_zero() {
    let s = Sandbox::tiny();
    s.ok(&["train-teacher"]);
    s.ok(&["eval", "--model", "teacher", "--baseline", "teacher"]);
    let e = json(&s.read("eval/teacher-vs-teacher.json"));
    assert!(e["frechet"]["distance"].as_f64().unwrap() < 1e-9);
    assert!(e["params"].as_u64().unwrap() > 0);
    assert!(e["latency"].is_null());
}

#[test]
fn latency_and_speedup_are_reported_when_enabled() {
    let cfg = TINY.replace(
        "latency = false",
        "latency = true\nlatency_warmup = 1\nlatency_measured = 3",
    );
    let s = Sandbox::new(&cfg);
    s.ok(&["train-teacher"]);
    s.ok(&["prune"]);
    s.ok(&["eval", "--model", "pruned"]);
    let e = json(&s.read("eval/pruned-vs-teacher.json"));
    assert_eq!(e["latency"]["n_measured"], 3);
    assert!(e["speedup_vs_baseline"].is_f64());
}

#[test]
fn foreign_checkpoints_need_force() {
    let s = Sandbox::tiny();
    s.ok(&["train-teacher"]);
    let teacher = s.run_dir().join("checkpoints/teacher.ldpr");
    let foreign = teacher.to_string_lossy().into_owned();
    let out = s.run(&["--seed", "9", "prune", "--teacher", &foreign]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    let out = s.run(&["--seed", "9", "--force", "prune", "--teacher", &foreign]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_writes_one_row_per_k() {
    let s = Sandbox::tiny();
    s.ok(&["train-teacher"]);
    s.ok(&["sweep", "--k-values", "1,3"]);
    let rows = csv_rows(&s.read("reports/sweep.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "3"]);
    let params: Vec<u64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(params[1] < params[0]);
    assert!(rows.iter().all(|r| r[2].is_empty()));
    assert_eq!(s.run(&["sweep", "--k-values", "3,1"]).status.code(), Some(1));
}
