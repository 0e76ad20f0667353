//! TOML configuration documents.
//!
//! ```toml
//! seed = 7
//!
//! [workload]                  # or: trace = "requests.jsonl"
//! num_requests = 100
//! size_model = { kind = "normal", mean_in = 512, var_in = 0, mean_out = 64, var_out = 0 }
//! arrival_model = { kind = "poisson", rate = 4.0 }
//!
//! [models.llama]
//! preset = "llama-3.1-8b"
//!
//! [skus.gpu]
//! preset = "a100"
//!
//! [clusters.one]
//! sku = "gpu"
//! n_nodes = 1
//!
//! [[clients]]
//! name = "llm"
//! cluster = "one"
//! model = "llama"
//! capabilities = ["prefill", "decode"]
//! scheduler = { kind = "llm", batching = { kind = "continuous" }, limits = { max_batched_tokens = 8192, max_batch_size = 64 } }
//! ```
//!
//! Relative paths are resolved against the directory holding the config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clients::{Client, SchedulerKind};
use crate::engine::Simulation;
use crate::error::{Result, SimError};
use crate::hardware::{
    Cluster, EmpiricalTable, HardwareSku, LinkClass, Location, ModelSpec, RuntimeSource, Topology, TransferGranularity,
};
use crate::metrics::MetricsConfig;
use crate::routing::RouterPolicy;
use crate::sweep::SweepSpec;
use crate::workload::{generate_trace, load_trace, Request, StageKind, TraceConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub n_params: Option<f64>,
    #[serde(default)]
    pub n_layers: Option<u64>,
    #[serde(default)]
    pub n_kv_heads: Option<u64>,
    #[serde(default)]
    pub head_dim: Option<u64>,
    #[serde(default)]
    pub dtype_bytes: Option<u64>,
    #[serde(default)]
    pub hidden_dim: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkuEntry {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub peak_flops: Option<f64>,
    #[serde(default)]
    pub mem_bandwidth: Option<f64>,
    #[serde(default)]
    pub mem_capacity: Option<f64>,
    #[serde(default)]
    pub flops_efficiency: Option<f64>,
    #[serde(default)]
    pub bw_efficiency: Option<f64>,
    #[serde(default)]
    pub fixed_step_overhead: Option<f64>,
    #[serde(default)]
    pub intra_node_bandwidth: Option<f64>,
    #[serde(default)]
    pub intra_node_latency: Option<f64>,
    #[serde(default)]
    pub hourly_cost: Option<f64>,
    #[serde(default)]
    pub tdp_watts: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeEntry {
    Analytical,
    EmpiricalTable(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterEntry {
    #[serde(default)]
    pub sku: Option<String>,
    #[serde(default = "one")]
    pub n_nodes: u64,
    #[serde(default = "one")]
    pub devices_per_node: u64,
    #[serde(default = "one")]
    pub tensor_parallel: u64,
    #[serde(default = "one")]
    pub pipeline_parallel: u64,
    #[serde(default)]
    pub runtime: Option<RuntimeEntry>,
}

fn one() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEntry {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    pub capabilities: Vec<StageKind>,
    pub scheduler: SchedulerKind,
    #[serde(default)]
    pub location: Option<Location>,
    /// Number of identical clients this entry expands to.
    #[serde(default = "one_usize")]
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinksEntry {
    pub intra_platform: LinkClass,
    #[serde(default)]
    pub intra_rack: Option<LinkClass>,
    #[serde(default)]
    pub inter_rack: Option<LinkClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyEntry {
    #[serde(default)]
    pub links: LinksEntry,
    #[serde(default)]
    pub granularity: TransferGranularity,
    #[serde(default)]
    pub layerwise_slices: Option<u64>,
}

impl Default for LinksEntry {
    fn default() -> Self {
        // NVLink-class platform fabric, 400 Gb/s-class rack fabric, and a
        // datacenter network with millisecond-scale latency.
        LinksEntry {
            intra_platform: LinkClass {
                bandwidth: 450e9,
                latency: 2e-6,
            },
            intra_rack: Some(LinkClass {
                bandwidth: 50e9,
                latency: 10e-6,
            }),
            inter_rack: Some(LinkClass {
                bandwidth: 128e9,
                latency: 20e-3,
            }),
        }
    }
}

impl Default for TopologyEntry {
    fn default() -> Self {
        TopologyEntry {
            links: LinksEntry::default(),
            granularity: TransferGranularity::FullCache,
            layerwise_slices: None,
        }
    }
}

/// A parsed configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub workload: Option<TraceConfig>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub models: BTreeMap<String, ModelEntry>,
    #[serde(default)]
    pub skus: BTreeMap<String, SkuEntry>,
    #[serde(default)]
    pub clusters: BTreeMap<String, ClusterEntry>,
    #[serde(default)]
    pub clients: Vec<ClientEntry>,
    #[serde(default)]
    pub router: RouterPolicy,
    #[serde(default)]
    pub topology: TopologyEntry,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub doc: ConfigDoc,
    pub base_dir: PathBuf,
}

pub fn parse_config(text: &str, base_dir: impl Into<PathBuf>) -> Result<Config> {
    let doc: ConfigDoc = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let field = msg
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "document".into());
        SimError::config(field, e.to_string().trim().to_string())
    })?;
    Ok(Config {
        doc,
        base_dir: base_dir.into(),
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, base)
}

pub fn resolve_model(key: &str, e: &ModelEntry) -> Result<ModelSpec> {
    let field = |f: &str| format!("models.{key}.{f}");
    let base = match &e.preset {
        Some(p) => Some(
            ModelSpec::preset(p)
                .ok_or_else(|| SimError::config(field("preset"), format!("unknown model preset `{p}`")))?,
        ),
        None => None,
    };
    let pick_u = |v: Option<u64>, b: Option<u64>, f: &str| v.or(b).ok_or_else(missing_owned(field(f)));
    let m = ModelSpec {
        name: e
            .name
            .clone()
            .or_else(|| base.as_ref().map(|b| b.name.clone()))
            .unwrap_or_else(|| key.to_string()),
        n_params: e
            .n_params
            .or(base.as_ref().map(|b| b.n_params))
            .ok_or_else(missing_owned(field("n_params")))?,
        n_layers: pick_u(e.n_layers, base.as_ref().map(|b| b.n_layers), "n_layers")?,
        n_kv_heads: pick_u(e.n_kv_heads, base.as_ref().map(|b| b.n_kv_heads), "n_kv_heads")?,
        head_dim: pick_u(e.head_dim, base.as_ref().map(|b| b.head_dim), "head_dim")?,
        dtype_bytes: pick_u(e.dtype_bytes, base.as_ref().map(|b| b.dtype_bytes), "dtype_bytes")?,
        hidden_dim: pick_u(e.hidden_dim, base.as_ref().map(|b| b.hidden_dim), "hidden_dim")?,
    };
    m.validate().map_err(|(f, msg)| SimError::config(field(&f), msg))?;
    Ok(m)
}

fn missing_owned(field: String) -> impl Fn() -> SimError {
    move || SimError::config(field.clone(), "missing required value")
}

pub fn resolve_sku(key: &str, e: &SkuEntry) -> Result<HardwareSku> {
    let field = |f: &str| format!("skus.{key}.{f}");
    let base = match &e.preset {
        Some(p) => Some(
            HardwareSku::preset(p)
                .ok_or_else(|| SimError::config(field("preset"), format!("unknown sku preset `{p}`")))?,
        ),
        None => None,
    };
    let b = base.as_ref();
    let req = |v: Option<f64>, bv: Option<f64>, f: &str| v.or(bv).ok_or_else(missing_owned(field(f)));
    let sku = HardwareSku {
        name: e
            .name
            .clone()
            .or_else(|| b.map(|b| b.name.clone()))
            .unwrap_or_else(|| key.to_string()),
        peak_flops: req(e.peak_flops, b.map(|b| b.peak_flops), "peak_flops")?,
        mem_bandwidth: req(e.mem_bandwidth, b.map(|b| b.mem_bandwidth), "mem_bandwidth")?,
        mem_capacity: req(e.mem_capacity, b.map(|b| b.mem_capacity), "mem_capacity")?,
        flops_efficiency: e.flops_efficiency.or(b.map(|b| b.flops_efficiency)).unwrap_or(0.5),
        bw_efficiency: e.bw_efficiency.or(b.map(|b| b.bw_efficiency)).unwrap_or(0.8),
        fixed_step_overhead: e
            .fixed_step_overhead
            .or(b.map(|b| b.fixed_step_overhead))
            .unwrap_or(0.0),
        intra_node_bandwidth: req(
            e.intra_node_bandwidth,
            b.map(|b| b.intra_node_bandwidth),
            "intra_node_bandwidth",
        )?,
        intra_node_latency: e.intra_node_latency.or(b.map(|b| b.intra_node_latency)).unwrap_or(0.0),
        hourly_cost: req(e.hourly_cost, b.map(|b| b.hourly_cost), "hourly_cost")?,
        tdp_watts: e.tdp_watts.or(b.map(|b| b.tdp_watts)).unwrap_or(0.0),
    };
    sku.validate().map_err(|(f, msg)| SimError::config(field(&f), msg))?;
    Ok(sku)
}

fn prefix_config_error(prefix: &str, e: SimError) -> SimError {
    match e {
        SimError::Config { field, message } => SimError::config(format!("{prefix}.{field}"), message),
        other => other,
    }
}

impl Config {
    /// Seed used for this run: the override if given, else the document's.
    pub fn effective_seed(&self, seed_override: Option<u64>) -> u64 {
        seed_override
            .or(self.doc.seed)
            .or(self.doc.workload.as_ref().map(|w| w.seed))
            .unwrap_or(0)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn models(&self) -> Result<BTreeMap<String, ModelSpec>> {
        self.doc
            .models
            .iter()
            .map(|(k, e)| Ok((k.clone(), resolve_model(k, e)?)))
            .collect()
    }

    pub fn skus(&self) -> Result<BTreeMap<String, HardwareSku>> {
        let mut out = BTreeMap::new();
        for (k, e) in &self.doc.skus {
            out.insert(k.clone(), resolve_sku(k, e)?);
        }
        Ok(out)
    }

    /// Looks up a SKU by table key, falling back to the built-in presets.
    pub fn sku(&self, key: &str, field: &str) -> Result<HardwareSku> {
        match self.doc.skus.get(key) {
            Some(e) => resolve_sku(key, e),
            None => HardwareSku::preset(key).ok_or_else(|| SimError::config(field, format!("unknown sku `{key}`"))),
        }
    }

    /// Looks up a model by table key, falling back to the built-in presets.
    pub fn model(&self, key: &str, field: &str) -> Result<ModelSpec> {
        match self.doc.models.get(key) {
            Some(e) => resolve_model(key, e),
            None => ModelSpec::preset(key).ok_or_else(|| SimError::config(field, format!("unknown model `{key}`"))),
        }
    }

    pub fn requests(&self, seed_override: Option<u64>) -> Result<Vec<Request>> {
        match (&self.doc.workload, &self.doc.trace) {
            (Some(_), Some(_)) => Err(SimError::config("trace", "give either `workload` or `trace`, not both")),
            (None, None) => Err(SimError::config("workload", "missing workload or trace")),
            (None, Some(path)) => load_trace(self.resolve_path(path)),
            (Some(w), None) => {
                let mut w = w.clone();
                if seed_override.is_some() || self.doc.seed.is_some() {
                    w.seed = self.effective_seed(seed_override);
                }
                if let crate::workload::SizeModel::TraceFile { path } = &mut w.size_model {
                    *path = self.resolve_path(path);
                }
                generate_trace(&w).map_err(|e| prefix_config_error("workload", e))
            }
        }
    }

    fn cluster(&self, key: &str, field: &str, skus: &BTreeMap<String, HardwareSku>) -> Result<Cluster> {
        let e = self
            .doc
            .clusters
            .get(key)
            .ok_or_else(|| SimError::config(field, format!("unknown cluster `{key}`")))?;
        let cfield = |f: &str| format!("clusters.{key}.{f}");
        let sku_key = e.sku.as_deref().ok_or_else(missing_owned(cfield("sku")))?;
        let sku = match skus.get(sku_key) {
            Some(s) => s.clone(),
            None => HardwareSku::preset(sku_key)
                .ok_or_else(|| SimError::config(cfield("sku"), format!("unknown sku `{sku_key}`")))?,
        };
        let runtime = match &e.runtime {
            None | Some(RuntimeEntry::Analytical) => RuntimeSource::Analytical,
            Some(RuntimeEntry::EmpiricalTable(p)) => {
                RuntimeSource::EmpiricalTable(Arc::new(EmpiricalTable::load(self.resolve_path(p))?))
            }
        };
        Ok(Cluster {
            sku,
            n_nodes: e.n_nodes,
            devices_per_node: e.devices_per_node,
            tensor_parallel: e.tensor_parallel,
            pipeline_parallel: e.pipeline_parallel,
            runtime,
        })
    }

    /// Expands client entries into clients plus their placements.
    pub fn clients(&self, seed: u64) -> Result<(Vec<Client>, BTreeMap<usize, Location>)> {
        let (clients, placement) = self.expand_clients(seed, true)?;
        if clients.is_empty() {
            return Err(SimError::config("clients", "at least one client is required"));
        }
        Ok((clients, placement))
    }

    /// Expands client entries, optionally skipping LLM clients (sweeps
    /// generate those themselves).
    pub fn expand_clients(&self, seed: u64, include_llm: bool) -> Result<(Vec<Client>, BTreeMap<usize, Location>)> {
        let models = self.models()?;
        let skus = self.skus()?;
        let mut clients = Vec::new();
        let mut placement = BTreeMap::new();
        for (i, e) in self.doc.clients.iter().enumerate() {
            if !include_llm && matches!(e.scheduler, SchedulerKind::Llm { .. }) {
                continue;
            }
            let field = |f: &str| format!("clients[{i}].{f}");
            let cluster_key = e
                .cluster
                .as_deref()
                .ok_or_else(|| SimError::config(field("cluster"), "missing cluster reference"))?;
            let cluster = self.cluster(cluster_key, &field("cluster"), &skus)?;
            let model = match &e.model {
                Some(m) => Some(
                    models
                        .get(m)
                        .cloned()
                        .or_else(|| ModelSpec::preset(m))
                        .ok_or_else(|| SimError::config(field("model"), format!("unknown model `{m}`")))?,
                ),
                None => None,
            };
            if e.count == 0 {
                return Err(SimError::config(field("count"), "must be >= 1"));
            }
            for r in 0..e.count {
                let id = clients.len();
                let base = e.name.clone().unwrap_or_else(|| format!("client{i}"));
                let name = if e.count > 1 { format!("{base}-{r}") } else { base };
                let client = Client::new(
                    id,
                    name,
                    e.capabilities.iter().copied(),
                    model.clone(),
                    cluster.clone(),
                    e.scheduler.clone(),
                    seed,
                )
                .map_err(|err| prefix_config_error(&format!("clients[{i}]"), err))?;
                clients.push(client);
                placement.insert(id, e.location.unwrap_or(Location { rack: 0, platform: 0 }));
            }
        }
        Ok((clients, placement))
    }

    pub fn topology(&self, placement: BTreeMap<usize, Location>) -> Topology {
        let l = &self.doc.topology.links;
        let intra_rack = l.intra_rack.unwrap_or(l.intra_platform);
        Topology {
            intra_platform: l.intra_platform,
            intra_rack,
            inter_rack: l.inter_rack.unwrap_or(intra_rack),
            placement,
        }
    }

    /// Builds a ready-to-run simulation.
    pub fn simulation(&self, seed_override: Option<u64>) -> Result<Simulation> {
        let seed = self.effective_seed(seed_override);
        let requests = self.requests(seed_override)?;
        let (clients, placement) = self.clients(seed)?;
        if let Some(slo) = &self.doc.metrics.slo {
            slo.validate().map_err(|e| prefix_config_error("metrics", e))?;
        }
        Ok(Simulation {
            requests,
            clients,
            router: self.doc.router.clone(),
            topology: self.topology(placement),
            granularity: self.doc.topology.granularity,
            layerwise_slices: self.doc.topology.layerwise_slices,
            metrics: self.doc.metrics.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[workload]
num_requests = 10
size_model = { kind = "normal", mean_in = 128, var_in = 0, mean_out = 8, var_out = 0 }
arrival_model = { kind = "poisson", rate = 5.0 }

[models.small]
preset = "llama-3.1-8b"

[clusters.one]
sku = "a100"

[[clients]]
name = "llm"
cluster = "one"
model = "small"
capabilities = ["prefill", "decode"]
scheduler = { kind = "llm", batching = { kind = "continuous" }, limits = { max_batched_tokens = 4096, max_batch_size = 16 } }
"#;

    #[test]
    fn minimal_config_runs() {
        let cfg = parse_config(MINIMAL, ".").unwrap();
        let sim = cfg.simulation(None).unwrap();
        assert_eq!(sim.requests.len(), 10);
        let rep = crate::engine::run(sim).unwrap();
        assert_eq!(rep.summary.serviced, 10);
    }

    #[test]
    fn missing_cluster_names_key() {
        let text = MINIMAL.replace("cluster = \"one\"\n", "");
        let err = parse_config(&text, ".").unwrap().simulation(None).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("clients[0].cluster"), "{err}");
        let text = MINIMAL.replace("cluster = \"one\"", "cluster = \"two\"");
        let err = parse_config(&text, ".").unwrap().simulation(None).unwrap_err();
        assert!(err.to_string().contains("clients[0].cluster"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("seed = 3", "seed = 3\nbogus = 1");
        let err = parse_config(&text, ".").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn bad_rate_names_workload_field() {
        let text = MINIMAL.replace("rate = 5.0", "rate = -1.0");
        let err = parse_config(&text, ".").unwrap().simulation(None).unwrap_err();
        assert!(err.to_string().contains("workload.arrival_model.rate"), "{err}");
    }

    #[test]
    fn seed_override_changes_trace() {
        let cfg = parse_config(MINIMAL, ".").unwrap();
        let a = cfg.requests(Some(1)).unwrap();
        let b = cfg.requests(Some(2)).unwrap();
        let c = cfg.requests(Some(1)).unwrap();
        assert_eq!(a, c);
        assert_ne!(a, b);
    }
}
