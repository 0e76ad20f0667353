use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const RUN: &str = r#"
seed = 9

[workload]
num_requests = 30
size_model = { kind = "normal", mean_in = 400, var_in = 2500, mean_out = 16, var_out = 16 }
arrival_model = { kind = "poisson", rate = 5.0 }

[models.m]
preset = "llama-3.1-8b"

[clusters.a]
sku = "a100"

[[clients]]
name = "llm"
count = 2
cluster = "a"
model = "m"
capabilities = ["prefill", "decode"]
scheduler = { kind = "llm", batching = { kind = "continuous" }, limits = { max_batched_tokens = 4096, max_batch_size = 32 } }

[metrics]
slo = { ttft_p50 = 0.5, ttft_p90 = 2.0 }
"#;

const SWEEP: &str = r#"
seed = 4

[workload]
num_requests = 40
size_model = { kind = "normal", mean_in = 600, var_in = 10000, mean_out = 32, var_out = 64 }
arrival_model = { kind = "poisson", rate = 8.0 }

[sweep]
model = "llama-3.1-8b"
skus = ["a100", "h100"]
device_budget = 2
tensor_parallel = [1, 2]
batching = ["continuous", "chunked"]
chunk_sizes = [512]
limits = { max_batched_tokens = 4096, max_batch_size = 32 }
"#;

fn stagesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagesim"))
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_report_csv_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", RUN);
    let out = dir.path().join("out");
    let o = stagesim(&["run", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "requests.csv", "trace.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join("requests.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
    assert!(trace["traceEvents"].as_array().is_some_and(|e| !e.is_empty()));
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", RUN);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        assert!(stagesim(&["run", s(&cfg), "--seed", "7", "--out", s(out)])
            .status
            .success());
    }
    assert!(stagesim(&["run", s(&cfg), "--seed", "8", "--out", s(&c)])
        .status
        .success());
    for f in ["report.json", "requests.csv", "trace.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        fs::read(a.join("requests.csv")).unwrap(),
        fs::read(c.join("requests.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &RUN.replace("cluster = \"a\"", "cluster = \"nope\""),
    );
    let o = stagesim(&["run", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("clients[0].cluster"), "{err}");

    let cfg = write(dir.path(), "d.toml", &format!("{RUN}\nbogus = 1\n"));
    assert_eq!(stagesim(&["run", s(&cfg)]).status.code(), Some(2));
    assert_eq!(
        stagesim(&["run", s(&dir.path().join("absent.toml"))]).status.code(),
        Some(2)
    );
}

#[test]
fn sweep_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SWEEP);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = stagesim(&["sweep", s(&cfg), "--workers", "1", "--out", s(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stagesim(&["sweep", s(&cfg), "--workers", "8", "--out", s(&b)])
        .status
        .success());
    assert_eq!(
        fs::read(a.join("sweep.json")).unwrap(),
        fs::read(b.join("sweep.json")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("sweep.csv")).unwrap(),
        fs::read(b.join("sweep.csv")).unwrap()
    );
    // 2 SKUs x 2 TP x (continuous + chunked at one chunk size)
    assert_eq!(fs::read_to_string(a.join("sweep.csv")).unwrap().lines().count(), 9);

    assert_eq!(stagesim(&["sweep", s(&cfg), "--workers", "0"]).status.code(), Some(2));
    let no_sweep = write(dir.path(), "r.toml", RUN);
    assert_eq!(stagesim(&["sweep", s(&no_sweep)]).status.code(), Some(2));
}

#[test]
fn report_reprints_saved_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", RUN);
    let out = dir.path().join("out");
    assert!(stagesim(&["run", s(&cfg), "--out", s(&out)]).status.success());

    let text = stagesim(&["report", s(&out)]);
    assert!(text.status.success());
    assert!(!text.stdout.is_empty());
    let csv = stagesim(&["report", s(&out), "--format", "csv"]);
    assert_eq!(csv.stdout, fs::read(out.join("requests.csv")).unwrap());
    let json = stagesim(&["report", s(&out), "--format", "json"]);
    assert_eq!(json.stdout, fs::read(out.join("report.json")).unwrap());

    let sweep_cfg = write(dir.path(), "s.toml", SWEEP);
    let sweep_out = dir.path().join("sweep");
    assert!(stagesim(&["sweep", s(&sweep_cfg), "--out", s(&sweep_out)])
        .status
        .success());
    let csv = stagesim(&["report", s(&sweep_out), "--format", "csv"]);
    assert_eq!(csv.stdout, fs::read(sweep_out.join("sweep.csv")).unwrap());
    assert!(stagesim(&["report", s(&sweep_out)]).status.success());

    assert_eq!(stagesim(&["report", s(dir.path())]).status.code(), Some(2));
}

#[test]
fn shipped_configs_parse_and_run() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let o = stagesim(&["run", s(&root.join("quickstart.toml")), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = stagesim(&["run", s(&root.join("multistage.toml")), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
