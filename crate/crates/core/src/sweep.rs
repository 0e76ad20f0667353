//! Configuration sweeps: evaluate a cross product of hardware, parallelism,
//! serving mode, batching and routing choices against one workload and rank
//! the results.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{BatchingStrategy, Client, DisaggRole, LlmLimits, Packing, SchedulerKind};
use crate::config::Config;
use crate::engine::{run, Simulation};
use crate::error::{Result, SimError};
use crate::hardware::{Cluster, Location};
use crate::metrics::Summary;
use crate::routing::RouterPolicy;
use crate::workload::{Request, StageKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchingChoice {
    Static,
    Continuous,
    Chunked,
    Mixed,
}

impl BatchingChoice {
    pub fn strategy(self) -> BatchingStrategy {
        match self {
            BatchingChoice::Static => BatchingStrategy::Static,
            BatchingChoice::Continuous => BatchingStrategy::Continuous,
            BatchingChoice::Chunked => BatchingStrategy::Chunked,
            BatchingChoice::Mixed => BatchingStrategy::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServingMode {
    /// Identical replicas that each run every LLM stage.
    Aggregated,
    /// Groups of `prefill` prefill-side and `decode` decode-side replicas.
    Disaggregated { prefill: u64, decode: u64 },
}

impl ServingMode {
    pub fn label(&self) -> String {
        match self {
            ServingMode::Aggregated => "aggregated".into(),
            ServingMode::Disaggregated { prefill, decode } => format!("disaggregated_{prefill}p{decode}d"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    TokensPerDollar,
    Goodput,
    GoodputPerDollar,
}

fn default_parallel() -> Vec<u64> {
    vec![1]
}

fn default_serving() -> Vec<ServingMode> {
    vec![ServingMode::Aggregated]
}

fn default_batching() -> Vec<BatchingChoice> {
    vec![BatchingChoice::Continuous]
}

/// The `[sweep]` section of a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Key in the `models` table, or a model preset name.
    pub model: String,
    /// Keys in the `skus` table, or SKU preset names.
    pub skus: Vec<String>,
    /// Devices available to LLM replicas at every point.
    pub device_budget: u64,
    #[serde(default = "default_parallel")]
    pub tensor_parallel: Vec<u64>,
    #[serde(default = "default_parallel")]
    pub pipeline_parallel: Vec<u64>,
    #[serde(default = "default_serving")]
    pub serving: Vec<ServingMode>,
    #[serde(default = "default_batching")]
    pub batching: Vec<BatchingChoice>,
    /// Crossed only with chunked and mixed batching, where it also sets
    /// the per-step token budget.
    #[serde(default)]
    pub chunk_sizes: Vec<u64>,
    /// Defaults to the config's router.
    #[serde(default)]
    pub routers: Vec<RouterPolicy>,
    pub limits: LlmLimits,
    #[serde(default)]
    pub packing: Packing,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub workers: Option<usize>,
}

/// One configuration in the cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub sku: String,
    pub tensor_parallel: u64,
    pub pipeline_parallel: u64,
    pub serving: ServingMode,
    /// `None` for disaggregated serving, whose replicas batch continuously.
    pub batching: Option<BatchingChoice>,
    pub chunk_size: Option<u64>,
    pub router: RouterPolicy,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        let mut s = format!(
            "{} tp{} pp{} {}",
            self.sku,
            self.tensor_parallel,
            self.pipeline_parallel,
            self.serving.label()
        );
        if let Some(b) = self.batching {
            s.push(' ');
            s.push_str(b.strategy().label());
        }
        if let Some(c) = self.chunk_size {
            s.push_str(&format!(" chunk{c}"));
        }
        s.push(' ');
        s.push_str(&self.router.label());
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PointOutcome {
    Evaluated {
        summary: Box<Summary>,
        objective: Option<f64>,
    },
    Infeasible {
        reason: String,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub point: SweepPoint,
    pub outcome: PointOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub objective: Objective,
    pub points: Vec<PointResult>,
    /// Indices of evaluated points, best first: SLO-feasible points before
    /// the rest, then by objective (higher is better), then by index.
    pub ranking: Vec<usize>,
    pub evaluated: usize,
    pub infeasible: usize,
    pub failed: usize,
    /// Total dollar cost of running every evaluated point's deployment for
    /// its simulated makespan.
    pub search_cost_usd: f64,
}

/// A sweep bound to its config and workload.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub spec: SweepSpec,
    pub points: Vec<SweepPoint>,
    config: Config,
    seed: u64,
    requests: Vec<Request>,
}

impl Sweep {
    pub fn new(config: &Config, seed_override: Option<u64>) -> Result<Sweep> {
        let spec = config
            .doc
            .sweep
            .clone()
            .ok_or_else(|| SimError::config("sweep", "config has no [sweep] section"))?;
        validate_spec(&spec, config)?;
        let seed = config.effective_seed(seed_override);
        let requests = config.requests(seed_override)?;
        let points = enumerate_points(&spec, &config.doc.router);
        Ok(Sweep {
            spec,
            points,
            config: config.clone(),
            seed,
            requests,
        })
    }

    /// Builds the simulation for one point. `Ok(Err(reason))` marks an
    /// infeasible point.
    pub fn point_simulation(&self, index: usize) -> Result<std::result::Result<Simulation, String>> {
        let p = &self.points[index];
        let spec = &self.spec;
        let devices = p.tensor_parallel * p.pipeline_parallel;
        if devices > spec.device_budget {
            return Ok(Err(format!(
                "tp {} x pp {} needs {devices} devices, budget is {}",
                p.tensor_parallel, p.pipeline_parallel, spec.device_budget
            )));
        }
        let units = spec.device_budget / devices;
        let sku = self.config.sku(&p.sku, "sweep.skus")?;
        let model = self.config.model(&spec.model, "sweep.model")?;
        let cluster = Cluster::analytical(sku, devices, p.tensor_parallel, p.pipeline_parallel);

        let (mut clients, mut placement) = self.config.expand_clients(self.seed, false)?;
        let base = clients.len();
        let llm_caps = [StageKind::Prefill, StageKind::Reason, StageKind::Decode];
        // (capabilities, batching, limits) per generated replica.
        let mut replicas: Vec<(Vec<StageKind>, BatchingStrategy, LlmLimits)> = Vec::new();
        match p.serving {
            ServingMode::Aggregated => {
                let batching = p
                    .batching
                    .expect("aggregated points carry a batching choice")
                    .strategy();
                let limits = match p.chunk_size {
                    Some(c) => LlmLimits {
                        max_batched_tokens: c,
                        max_batch_size: spec.limits.max_batch_size,
                        chunk_size: Some(c),
                    },
                    None => LlmLimits {
                        chunk_size: None,
                        ..spec.limits
                    },
                };
                for _ in 0..units {
                    replicas.push((llm_caps.to_vec(), batching, limits));
                }
            }
            ServingMode::Disaggregated { prefill, decode } => {
                let groups = units / (prefill + decode);
                if groups == 0 {
                    return Ok(Err(format!(
                        "{}:{} split needs {} devices, budget is {}",
                        prefill,
                        decode,
                        (prefill + decode) * devices,
                        spec.device_budget
                    )));
                }
                let (np, nd) = ((prefill * groups) as usize, (decode * groups) as usize);
                let limits = LlmLimits {
                    chunk_size: None,
                    ..spec.limits
                };
                for i in 0..np {
                    let peer = base + np + i % nd;
                    replicas.push((
                        vec![StageKind::Prefill],
                        BatchingStrategy::Disaggregated {
                            role: DisaggRole::PrefillSide,
                            peer,
                        },
                        limits,
                    ));
                }
                for j in 0..nd {
                    let peer = base + j % np;
                    replicas.push((
                        vec![StageKind::Reason, StageKind::Decode],
                        BatchingStrategy::Disaggregated {
                            role: DisaggRole::DecodeSide,
                            peer,
                        },
                        limits,
                    ));
                }
            }
        }
        for (caps, batching, limits) in replicas {
            let id = clients.len();
            let kind = SchedulerKind::Llm {
                batching,
                packing: spec.packing,
                limits,
                kv_capacity: None,
            };
            match Client::new(
                id,
                format!("replica{}", id - base),
                caps,
                Some(model.clone()),
                cluster.clone(),
                kind,
                self.seed,
            ) {
                Ok(c) => clients.push(c),
                Err(SimError::Config { field, message }) => return Ok(Err(format!("{field}: {message}"))),
                Err(e) => return Err(e),
            }
            placement.insert(id, Location { rack: 0, platform: 0 });
        }
        let doc = &self.config.doc;
        Ok(Ok(Simulation {
            requests: self.requests.clone(),
            clients,
            router: p.router.clone(),
            topology: self.config.topology(placement),
            granularity: doc.topology.granularity,
            layerwise_slices: doc.topology.layerwise_slices,
            metrics: doc.metrics.clone(),
        }))
    }

    pub fn evaluate_point(&self, index: usize) -> Result<PointOutcome> {
        let sim = match self.point_simulation(index)? {
            Ok(sim) => sim,
            Err(reason) => return Ok(PointOutcome::Infeasible { reason }),
        };
        Ok(match run(sim) {
            Ok(report) => {
                let objective = objective_value(self.spec.objective, &report.summary);
                PointOutcome::Evaluated {
                    summary: Box::new(report.summary),
                    objective,
                }
            }
            Err(SimError::Config { field, message }) => PointOutcome::Infeasible {
                reason: format!("{field}: {message}"),
            },
            Err(e) => PointOutcome::Failed { error: e.to_string() },
        })
    }

    /// Evaluates every point on `workers` threads. Results do not depend on
    /// the worker count.
    pub fn run(&self, workers: Option<usize>) -> Result<SweepResult> {
        let workers = workers
            .or(self.spec.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SimError::config("workers", e.to_string()))?;
        let outcomes: Vec<Result<PointOutcome>> = pool.install(|| {
            (0..self.points.len())
                .into_par_iter()
                .map(|i| self.evaluate_point(i))
                .collect()
        });
        let mut points = Vec::with_capacity(outcomes.len());
        for (p, o) in self.points.iter().zip(outcomes) {
            points.push(PointResult {
                point: p.clone(),
                outcome: o?,
            });
        }
        summarize(self.spec.objective, points)
    }
}

fn validate_spec(spec: &SweepSpec, config: &Config) -> Result<()> {
    let nonempty = |field: &str, len: usize| {
        if len == 0 {
            Err(SimError::config(format!("sweep.{field}"), "must not be empty"))
        } else {
            Ok(())
        }
    };
    nonempty("skus", spec.skus.len())?;
    nonempty("tensor_parallel", spec.tensor_parallel.len())?;
    nonempty("pipeline_parallel", spec.pipeline_parallel.len())?;
    nonempty("serving", spec.serving.len())?;
    nonempty("batching", spec.batching.len())?;
    if spec.device_budget == 0 {
        return Err(SimError::config("sweep.device_budget", "must be >= 1"));
    }
    if spec.tensor_parallel.contains(&0) || spec.pipeline_parallel.contains(&0) {
        return Err(SimError::config(
            "sweep.tensor_parallel",
            "parallel degrees must be >= 1",
        ));
    }
    for s in &spec.serving {
        if let ServingMode::Disaggregated { prefill, decode } = s {
            if *prefill == 0 || *decode == 0 {
                return Err(SimError::config(
                    "sweep.serving",
                    "prefill and decode counts must be >= 1",
                ));
            }
        }
    }
    if spec.batching.iter().any(|b| b.strategy().uses_chunks()) {
        if spec.chunk_sizes.is_empty() {
            return Err(SimError::config(
                "sweep.chunk_sizes",
                "required for chunked or mixed batching",
            ));
        }
        if spec.chunk_sizes.contains(&0) {
            return Err(SimError::config("sweep.chunk_sizes", "must be > 0"));
        }
    }
    if spec.limits.max_batched_tokens == 0 || spec.limits.max_batch_size == 0 {
        return Err(SimError::config("sweep.limits", "limits must be > 0"));
    }
    if spec.workers == Some(0) {
        return Err(SimError::config("sweep.workers", "must be >= 1"));
    }
    for r in &spec.routers {
        r.validate()?;
    }
    if matches!(spec.objective, Objective::Goodput | Objective::GoodputPerDollar) && config.doc.metrics.slo.is_none() {
        return Err(SimError::config(
            "sweep.objective",
            "goodput objectives need metrics.slo",
        ));
    }
    for (i, s) in spec.skus.iter().enumerate() {
        config.sku(s, &format!("sweep.skus[{i}]"))?;
    }
    config.model(&spec.model, "sweep.model")?;
    Ok(())
}

pub fn enumerate_points(spec: &SweepSpec, default_router: &RouterPolicy) -> Vec<SweepPoint> {
    let routers = if spec.routers.is_empty() {
        vec![default_router.clone()]
    } else {
        spec.routers.clone()
    };
    let mut points = Vec::new();
    for sku in &spec.skus {
        for &tp in &spec.tensor_parallel {
            for &pp in &spec.pipeline_parallel {
                for serving in &spec.serving {
                    let mut shapes: Vec<(Option<BatchingChoice>, Option<u64>)> = Vec::new();
                    match serving {
                        ServingMode::Aggregated => {
                            for &b in &spec.batching {
                                if b.strategy().uses_chunks() {
                                    shapes.extend(spec.chunk_sizes.iter().map(|&c| (Some(b), Some(c))));
                                } else {
                                    shapes.push((Some(b), None));
                                }
                            }
                        }
                        ServingMode::Disaggregated { .. } => shapes.push((None, None)),
                    }
                    for (batching, chunk_size) in shapes {
                        for router in &routers {
                            points.push(SweepPoint {
                                index: points.len(),
                                sku: sku.clone(),
                                tensor_parallel: tp,
                                pipeline_parallel: pp,
                                serving: *serving,
                                batching,
                                chunk_size,
                                router: router.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    points
}

pub fn objective_value(objective: Objective, s: &Summary) -> Option<f64> {
    match objective {
        Objective::TokensPerDollar => s.tokens_per_dollar,
        Objective::Goodput => s.goodput_rps,
        Objective::GoodputPerDollar => match s.goodput_rps {
            // Requests per second per dollar-per-second of deployment.
            Some(g) if s.cost_usd > 0.0 && s.makespan_s > 0.0 => Some(g / (s.cost_usd / s.makespan_s)),
            _ => None,
        },
    }
}

fn summarize(objective: Objective, points: Vec<PointResult>) -> Result<SweepResult> {
    let mut ranking = Vec::new();
    let (mut infeasible, mut failed) = (0, 0);
    let mut search_cost_usd = 0.0;
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for r in &points {
        match &r.outcome {
            PointOutcome::Evaluated { summary, .. } => {
                ranking.push(r.point.index);
                search_cost_usd += summary.cost_usd;
            }
            PointOutcome::Infeasible { reason } => {
                infeasible += 1;
                *reasons.entry(reason.clone()).or_default() += 1;
            }
            PointOutcome::Failed { error } => {
                failed += 1;
                *reasons.entry(error.clone()).or_default() += 1;
            }
        }
    }
    if ranking.is_empty() {
        let list: Vec<String> = reasons.iter().map(|(r, n)| format!("{r} ({n} points)")).collect();
        return Err(SimError::config(
            "sweep",
            format!("no valid configuration; reasons: {}", list.join("; ")),
        ));
    }
    let key = |i: usize| match &points[i].outcome {
        PointOutcome::Evaluated { summary, objective } => {
            (summary.slo_met != Some(false), objective.unwrap_or(f64::NEG_INFINITY))
        }
        _ => unreachable!("ranking holds evaluated points"),
    };
    ranking.sort_by(|&a, &b| {
        let (fa, oa) = key(a);
        let (fb, ob) = key(b);
        fb.cmp(&fa).then(ob.total_cmp(&oa)).then(a.cmp(&b))
    });
    Ok(SweepResult {
        objective,
        evaluated: ranking.len(),
        points,
        ranking,
        infeasible,
        failed,
        search_cost_usd,
    })
}

impl SweepResult {
    pub fn best(&self) -> &PointResult {
        &self.points[self.ranking[0]]
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| SimError::Metrics(e.to_string()))
    }

    /// One row per point, in ranking order followed by non-evaluated points.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| SimError::Metrics(e.to_string());
        wr.write_record([
            "rank",
            "index",
            "sku",
            "tensor_parallel",
            "pipeline_parallel",
            "serving",
            "batching",
            "chunk_size",
            "router",
            "status",
            "objective",
            "slo_met",
            "tokens_per_dollar",
            "goodput_rps",
            "ttft_p50_s",
            "ttft_p90_s",
            "tbt_p99_s",
            "throughput_tokens_per_s",
            "cost_usd",
            "reason",
        ])
        .map_err(err)?;
        let mut order: Vec<(Option<usize>, usize)> = self
            .ranking
            .iter()
            .enumerate()
            .map(|(rank, &i)| (Some(rank + 1), i))
            .collect();
        order.extend(
            self.points
                .iter()
                .filter(|r| !matches!(r.outcome, PointOutcome::Evaluated { .. }))
                .map(|r| (None, r.point.index)),
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (rank, i) in order {
            let r = &self.points[i];
            let p = &r.point;
            let mut row = vec![
                rank.map(|x| x.to_string()).unwrap_or_default(),
                p.index.to_string(),
                p.sku.clone(),
                p.tensor_parallel.to_string(),
                p.pipeline_parallel.to_string(),
                p.serving.label(),
                p.batching.map(|b| b.strategy().label().to_string()).unwrap_or_default(),
                p.chunk_size.map(|c| c.to_string()).unwrap_or_default(),
                p.router.label(),
            ];
            match &r.outcome {
                PointOutcome::Evaluated { summary: s, objective } => row.extend([
                    "evaluated".into(),
                    opt(*objective),
                    s.slo_met.map(|b| b.to_string()).unwrap_or_default(),
                    opt(s.tokens_per_dollar),
                    opt(s.goodput_rps),
                    opt(s.ttft.map(|t| t.p50)),
                    opt(s.ttft.map(|t| t.p90)),
                    opt(s.tbt.map(|t| t.p99)),
                    s.throughput_tokens_per_s.to_string(),
                    s.cost_usd.to_string(),
                    String::new(),
                ]),
                PointOutcome::Infeasible { reason } | PointOutcome::Failed { error: reason } => {
                    let status = if matches!(r.outcome, PointOutcome::Infeasible { .. }) {
                        "infeasible"
                    } else {
                        "failed"
                    };
                    row.push(status.into());
                    row.extend(std::iter::repeat_n(String::new(), 9));
                    row.push(reason.clone());
                }
            }
            wr.write_record(&row).map_err(err)?;
        }
        wr.flush().map_err(|e| SimError::Metrics(e.to_string()))?;
        Ok(())
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
        let json = dir.join("sweep.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| SimError::io(&json, e))?;
        let csv_path = dir.join("sweep.csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| SimError::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn render_text(&self, top: usize) -> String {
        let mut out = format!(
            "{} points: {} evaluated, {} infeasible, {} failed; search cost ${:.2}\n",
            self.points.len(),
            self.evaluated,
            self.infeasible,
            self.failed,
            self.search_cost_usd
        );
        for (rank, &i) in self.ranking.iter().take(top).enumerate() {
            let r = &self.points[i];
            if let PointOutcome::Evaluated { summary, objective } = &r.outcome {
                out.push_str(&format!(
                    "{:>3}. {:<60} objective {:>12} slo {}\n",
                    rank + 1,
                    r.point.label(),
                    objective.map_or("-".into(), |v| format!("{v:.4}")),
                    summary.slo_met.map_or("-", |b| if b { "met" } else { "missed" }),
                ));
            }
        }
        out
    }
}
