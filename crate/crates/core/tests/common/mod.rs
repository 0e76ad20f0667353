//! Scenario builders shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stagesim::clients::{
    BatchingStrategy, Client, DisaggRole, KvMode, KvRetrievalConfig, LlmLimits, Packing, PrePostCoeffs, SchedulerKind,
};
use stagesim::hardware::{Cluster, HardwareSku, LinkClass, MemoryHierarchy, MemoryLevel, ModelSpec, Terminal};
use stagesim::metrics::{RequestStatus, SimulationReport};
use stagesim::workload::{OpClass, Request, StageKind, StageSpec};
use stagesim::{RouterPolicy, Simulation};

pub const NVLINK: LinkClass = LinkClass {
    bandwidth: 450e9,
    latency: 2e-6,
};

pub fn small_model() -> ModelSpec {
    ModelSpec::preset("llama-2-7b").unwrap()
}

pub fn a100() -> Cluster {
    Cluster::analytical(HardwareSku::preset("a100").unwrap(), 1, 1, 1)
}

pub fn llm_kind(batching: BatchingStrategy, limits: LlmLimits) -> SchedulerKind {
    SchedulerKind::Llm {
        batching,
        packing: Packing::Fcfs,
        limits,
        kv_capacity: None,
    }
}

pub fn llm_client(id: usize, batching: BatchingStrategy, limits: LlmLimits) -> Client {
    let caps: Vec<StageKind> = match batching {
        BatchingStrategy::Disaggregated {
            role: DisaggRole::PrefillSide,
            ..
        } => vec![StageKind::Prefill],
        BatchingStrategy::Disaggregated {
            role: DisaggRole::DecodeSide,
            ..
        } => vec![StageKind::Reason, StageKind::Decode],
        _ => vec![StageKind::Prefill, StageKind::Reason, StageKind::Decode],
    };
    Client::new(
        id,
        format!("llm{id}"),
        caps,
        Some(small_model()),
        a100(),
        llm_kind(batching, limits),
        0,
    )
    .unwrap()
}

pub fn chat(id: u64, arrival: f64, input: u64, output: u64) -> Request {
    Request::new(
        id,
        arrival,
        vec![
            StageSpec::Prefill { input_tokens: input },
            StageSpec::Decode { output_tokens: output },
        ],
    )
}

pub const STAGGERED_LIMITS: LlmLimits = LlmLimits {
    max_batched_tokens: 4096,
    max_batch_size: 8,
    chunk_size: None,
};

/// Three staggered requests: request 1 arrives alone, requests 2 and 3
/// arrive together just after request 1's prefill has finished, while its
/// first decode step is running.
pub fn staggered_requests() -> Vec<Request> {
    let prefill =
        stagesim::hardware::llm_step_runtime(&a100(), &small_model(), &stagesim::hardware::BatchProfile::prefill(512))
            .unwrap();
    let t = prefill + 1e-6;
    vec![chat(1, 0.0, 512, 4), chat(2, t, 512, 4), chat(3, t, 512, 4)]
}

pub fn staggered_simulation(batching: BatchingStrategy) -> Simulation {
    let limits = if batching.uses_chunks() {
        LlmLimits {
            chunk_size: Some(256),
            ..STAGGERED_LIMITS
        }
    } else {
        STAGGERED_LIMITS
    };
    Simulation::new(
        staggered_requests(),
        vec![llm_client(0, batching, limits)],
        RouterPolicy::RoundRobin,
        NVLINK,
    )
}

/// `label p<prefill tokens> d<decode tokens> [request ids]` per step.
pub fn step_log(report: &SimulationReport) -> Vec<String> {
    report
        .steps
        .iter()
        .map(|s| {
            let ids: Vec<String> = s.requests.iter().map(u64::to_string).collect();
            format!(
                "{} p{} d{} [{}]",
                s.label,
                s.prefill_tokens,
                s.decode_tokens,
                ids.join(",")
            )
        })
        .collect()
}

pub fn batching_strategies() -> Vec<&'static str> {
    vec!["static", "continuous", "chunked", "mixed", "disaggregated"]
}

/// Every routing policy shape, including a locality-weighted load-based one.
pub fn router_shapes(heavy_pool: &[usize]) -> Vec<RouterPolicy> {
    let mut out = RouterPolicy::enumerate(1500.0, heavy_pool);
    out.push(RouterPolicy::LoadBased {
        metric: stagesim::LoadMetric::InputContextLen,
        locality_weight: 10.0,
    });
    out
}

/// A random multi-stage workload and a matching client set: one
/// pre/post client, one RAG + KV client and LLM clients using `batching`.
pub fn random_scenario(seed: u64, n_requests: usize, batching: &str, router_index: usize) -> Simulation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_model();
    let cpu = Cluster::analytical(HardwareSku::preset("cpu").unwrap(), 1, 1, 1);
    let mut clients = vec![Client::new(
        0,
        "prepost",
        [StageKind::Preprocess, StageKind::Postprocess],
        None,
        cpu.clone(),
        SchedulerKind::Sequential {
            cores: rng.random_range(1..=4),
            ops: PrePostCoeffs::default(),
        },
        seed,
    )
    .unwrap()];
    let kv_mode = [KvMode::Expected, KvMode::Sampled, KvMode::Capacity][rng.random_range(0..3)];
    let hierarchy = MemoryHierarchy {
        levels: vec![
            MemoryLevel {
                name: Some("dram".into()),
                capacity: 2e10,
                lookup_latency: 1e-6,
                bandwidth: 1e11,
                hit_rate: 0.7,
            },
            MemoryLevel {
                name: Some("ssd".into()),
                capacity: 2e11,
                lookup_latency: 1e-4,
                bandwidth: 5e9,
                hit_rate: 0.5,
            },
        ],
        terminal: Terminal::Recompute,
    };
    clients.push(
        Client::new(
            1,
            "retrieval",
            [StageKind::Rag, StageKind::KvRetrieval],
            Some(model.clone()),
            a100(),
            SchedulerKind::Batched {
                rag: Some(Default::default()),
                kv: Some(KvRetrievalConfig {
                    hierarchy,
                    mode: kv_mode,
                }),
            },
            seed,
        )
        .unwrap(),
    );
    let limits = LlmLimits {
        max_batched_tokens: 4096,
        max_batch_size: rng.random_range(4..=32),
        chunk_size: None,
    };
    let chunked = LlmLimits {
        chunk_size: Some([256, 512, 1024][rng.random_range(0..3)]),
        ..limits
    };
    match batching {
        "static" | "continuous" => {
            let b = if batching == "static" {
                BatchingStrategy::Static
            } else {
                BatchingStrategy::Continuous
            };
            for id in 2..5 {
                clients.push(llm_client(id, b, limits));
            }
        }
        "chunked" | "mixed" => {
            let b = if batching == "chunked" {
                BatchingStrategy::Chunked
            } else {
                BatchingStrategy::Mixed
            };
            for id in 2..5 {
                clients.push(llm_client(id, b, chunked));
            }
        }
        "disaggregated" => {
            for (id, peer) in [(2, 4), (3, 5)] {
                clients.push(llm_client(
                    id,
                    BatchingStrategy::Disaggregated {
                        role: DisaggRole::PrefillSide,
                        peer,
                    },
                    limits,
                ));
            }
            for (id, peer) in [(4, 2), (5, 3)] {
                clients.push(llm_client(
                    id,
                    BatchingStrategy::Disaggregated {
                        role: DisaggRole::DecodeSide,
                        peer,
                    },
                    limits,
                ));
            }
        }
        other => panic!("unknown batching {other}"),
    }
    let router = router_shapes(&[2]).swap_remove(router_index);

    let rate = rng.random_range(2.0..40.0);
    let mut t = 0.0;
    let mut requests = Vec::with_capacity(n_requests);
    for id in 0..n_requests as u64 {
        t += -(1.0 - rng.random::<f64>()).ln() / rate;
        requests.push(Request::new(id, t, random_pipeline(&mut rng)));
    }
    let mut sim = Simulation::new(requests, clients, router, NVLINK);
    let n = sim.clients.len();
    sim.topology.placement = (0..n)
        .map(|id| {
            (
                id,
                stagesim::hardware::Location {
                    rack: (id % 2) as u32,
                    platform: 0,
                },
            )
        })
        .collect::<BTreeMap<_, _>>();
    sim.topology.intra_rack = LinkClass {
        bandwidth: 50e9,
        latency: 1e-5,
    };
    sim.topology.inter_rack = LinkClass {
        bandwidth: 12.5e9,
        latency: 1e-3,
    };
    sim
}

fn random_pipeline(rng: &mut ChaCha8Rng) -> Vec<StageSpec> {
    let input = rng.random_range(16..3000);
    let output = rng.random_range(1..200);
    let mut p = Vec::new();
    let shape = rng.random_range(0..5);
    if shape == 1 || shape == 4 {
        p.push(StageSpec::Preprocess {
            op_class: [OpClass::LinearText, OpClass::FixedLatency][rng.random_range(0..2)],
            length_tokens: input,
        });
    }
    if shape == 2 || shape == 4 {
        p.push(StageSpec::Rag {
            query_tokens: rng.random_range(8..128),
            docs_retrieved: rng.random_range(0..4),
            doc_tokens: rng.random_range(32..256),
        });
    }
    if shape == 3 || shape == 4 {
        p.push(StageSpec::KvRetrieval {
            cached_tokens: rng.random_range(0..=input),
            prefix_id: Some(rng.random_range(0..16)),
        });
    }
    p.push(StageSpec::Prefill { input_tokens: input });
    if rng.random_bool(0.2) {
        p.push(StageSpec::Reason {
            steps: rng.random_range(1..4),
            tokens_per_step: rng.random_range(1..16),
            width: rng.random_range(1..3),
        });
    }
    p.push(StageSpec::Decode { output_tokens: output });
    if shape == 1 || shape == 4 {
        p.push(StageSpec::Postprocess {
            op_class: OpClass::LinearText,
            length_tokens: output,
        });
    }
    p
}

/// Checks conservation, causality and non-preemption on a finished run.
pub fn check_invariants(report: &SimulationReport, requests: &[Request]) -> Result<(), String> {
    let s = &report.summary;
    let serviced = report
        .requests
        .iter()
        .filter(|r| r.status == RequestStatus::Serviced)
        .count();
    let accepted = requests.len() - s.rejected;
    if serviced != s.serviced || serviced != accepted || s.serviced + s.rejected != s.requests {
        return Err(format!(
            "conservation: serviced {serviced}/{} accepted {accepted} rejected {}",
            s.serviced, s.rejected
        ));
    }
    const EPS: f64 = 1e-9;
    for (r, req) in report.requests.iter().zip(requests) {
        if r.id != req.id {
            return Err(format!("request order changed at {}", r.id));
        }
        if r.status == RequestStatus::Rejected {
            continue;
        }
        let mut prev_end = r.arrival_s;
        for (i, st) in r.stages.iter().enumerate() {
            let (Some(a), Some(b), Some(e)) = (st.assigned_s, st.started_s, st.ended_s) else {
                return Err(format!("request {} stage {i} missing timestamps", r.id));
            };
            if !(prev_end <= a + EPS && a <= b + EPS && b <= e + EPS) {
                return Err(format!(
                    "causality: request {} stage {i} prev_end {prev_end} assigned {a} started {b} ended {e}",
                    r.id
                ));
            }
            prev_end = e;
        }
        let want: u64 = req.pipeline.iter().map(StageSpec::generated_tokens).sum();
        if r.generated_tokens != want || r.token_times.len() as u64 != want {
            return Err(format!(
                "request {} generated {} of {want} tokens",
                r.id, r.generated_tokens
            ));
        }
        for w in r.token_times.windows(2) {
            if w[1].0 + EPS < w[0].1 {
                return Err(format!("request {} tokens overlap", r.id));
            }
        }
        if let Some(ttft) = r.ttft_s {
            if ttft < 0.0 {
                return Err(format!("request {} negative ttft", r.id));
            }
        }
    }
    // Non-preemption: a client runs one step at a time, and a request is in
    // at most one step at a time.
    let mut per_client: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    let mut per_request: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for st in &report.steps {
        if st.end_s + EPS < st.start_s {
            return Err("step ends before it starts".into());
        }
        per_client.entry(st.client).or_default().push((st.start_s, st.end_s));
        for &id in &st.requests {
            per_request.entry(id).or_default().push((st.start_s, st.end_s));
        }
    }
    for (c, spans) in per_client {
        for w in spans.windows(2) {
            if w[1].0 + EPS < w[0].1 {
                return Err(format!("client {c} steps overlap: {:?} then {:?}", w[0], w[1]));
            }
        }
    }
    for (id, mut spans) in per_request {
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            if w[1].0 + EPS < w[0].1 {
                return Err(format!("request {id} in two steps at once"));
            }
        }
    }
    for t in &report.transfers {
        if !(t.issued_s <= t.start_s + EPS && t.start_s <= t.ready_s + EPS) {
            return Err(format!("transfer for request {} out of order", t.request_id));
        }
    }
    Ok(())
}
