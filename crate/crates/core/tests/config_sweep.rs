use std::fs;

use stagesim::config::{load_config, parse_config};
use stagesim::run;
use stagesim::sweep::{PointOutcome, Sweep};
use stagesim::workload::{generate_trace, write_trace, TraceConfig};

const BASE: &str = r#"
seed = 5

[workload]
num_requests = 40
size_model = { kind = "normal", mean_in = 512, var_in = 4096, mean_out = 32, var_out = 64 }
arrival_model = { kind = "poisson", rate = 4.0 }

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
"#;

#[test]
fn trace_path_resolves_against_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let workload: TraceConfig = toml::from_str(
        r#"
num_requests = 25
size_model = { kind = "normal", mean_in = 300, var_in = 0, mean_out = 20, var_out = 0 }
arrival_model = { kind = "uniform", rate = 5.0 }
"#,
    )
    .unwrap();
    let requests = generate_trace(&workload).unwrap();
    fs::create_dir(dir.path().join("traces")).unwrap();
    write_trace(&requests, fs::File::create(dir.path().join("traces/t.jsonl")).unwrap()).unwrap();

    let text = BASE.replace(
        "[workload]\nnum_requests = 40\nsize_model = { kind = \"normal\", mean_in = 512, var_in = 4096, mean_out = 32, var_out = 64 }\narrival_model = { kind = \"poisson\", rate = 4.0 }\n",
        "trace = \"traces/t.jsonl\"\n",
    );
    assert!(text.contains("trace ="));
    fs::write(dir.path().join("c.toml"), text).unwrap();

    let cfg = load_config(dir.path().join("c.toml")).unwrap();
    let sim = cfg.simulation(None).unwrap();
    assert_eq!(sim.requests, requests);
    let report = run(sim).unwrap();
    assert_eq!(report.summary.serviced, 25);
    assert_eq!(report.summary.tokens_generated, 25 * 20);
}

#[test]
fn missing_trace_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "trace = \"absent.jsonl\"\n{}",
        &BASE[BASE.find("[models.m]").unwrap()..]
    );
    let cfg = parse_config(&text, dir.path()).unwrap();
    let err = cfg.simulation(None).unwrap_err();
    assert!(err.is_config(), "{err}");
    assert!(err.to_string().contains("absent.jsonl"));
}

#[test]
fn unattainable_slo_still_reports() {
    let text = format!("{BASE}\n[metrics]\nslo = {{ ttft_p50 = 1e-9, ttft_p90 = 1e-9 }}\n");
    let cfg = parse_config(&text, ".").unwrap();
    let report = run(cfg.simulation(None).unwrap()).unwrap();
    assert_eq!(report.summary.slo_met, Some(false));
    assert_eq!(report.summary.goodput_rps, Some(0.0));
    assert_eq!(report.summary.serviced, 40);

    let text = text.replace("[metrics]", "[metrics]\ngoodput_mode = \"per_request\"");
    let report = run(parse_config(&text, ".").unwrap().simulation(None).unwrap()).unwrap();
    assert_eq!(report.summary.goodput_rps, Some(0.0));
    let mut csv = Vec::new();
    report.write_requests_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 41);
}

const SWEEP: &str = r#"
seed = 3

[workload]
num_requests = 60
size_model = { kind = "normal", mean_in = 768, var_in = 16384, mean_out = 64, var_out = 256 }
arrival_model = { kind = "poisson", rate = 10.0 }

[metrics]
slo = { ttft_p50 = 0.5, ttft_p90 = 2.0 }

[sweep]
model = "llama-3.1-8b"
skus = ["a100"]
device_budget = 4
tensor_parallel = [1, 2]
batching = ["chunked"]
chunk_sizes = [256, 1024]
limits = { max_batched_tokens = 8192, max_batch_size = 64 }
"#;

#[test]
fn small_sweep_enumerates_and_matches_standalone_runs() {
    let cfg = parse_config(SWEEP, ".").unwrap();
    let sweep = Sweep::new(&cfg, None).unwrap();
    assert_eq!(sweep.points.len(), 4);
    let result = sweep.run(Some(2)).unwrap();
    assert_eq!(result.evaluated, 4);
    assert_eq!(result.ranking.len(), 4);

    let mut cost = 0.0;
    for (i, p) in result.points.iter().enumerate() {
        let PointOutcome::Evaluated { summary, .. } = &p.outcome else {
            panic!("point {i} not evaluated: {:?}", p.outcome);
        };
        let standalone = run(sweep.point_simulation(i).unwrap().unwrap()).unwrap();
        assert_eq!(&standalone.summary, summary.as_ref());
        cost += summary.cost_usd;
    }
    assert!((result.search_cost_usd - cost).abs() <= 1e-9 * cost.max(1.0));

    let best = result.best();
    assert_eq!(best.point.index, result.ranking[0]);
}

#[test]
fn sweep_seed_override_changes_the_workload() {
    let cfg = parse_config(SWEEP, ".").unwrap();
    let a = Sweep::new(&cfg, None).unwrap().run(Some(1)).unwrap();
    let b = Sweep::new(&cfg, Some(99)).unwrap().run(Some(1)).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, Sweep::new(&cfg, None).unwrap().run(Some(3)).unwrap());
}

#[test]
fn sweep_files_round_trip() {
    let cfg = parse_config(SWEEP, ".").unwrap();
    let result = Sweep::new(&cfg, None).unwrap().run(None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    result.write_files(dir.path()).unwrap();
    let back: stagesim::sweep::SweepResult =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(back, result);
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
