//! Device, model, and cluster descriptions plus the analytical step-time
//! model for LLM forward passes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::empirical::EmpiricalTable;
use crate::error::{Result, SimError};

fn default_flops_eff() -> f64 {
    0.5
}

fn default_bw_eff() -> f64 {
    0.8
}

/// A hardware device type.
///
/// `flops_efficiency` and `bw_efficiency` default to 0.5 and 0.8. These are
/// calibration placeholders, not measured values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSku {
    pub name: String,
    /// FLOP/s per device.
    pub peak_flops: f64,
    /// Bytes/s of device memory bandwidth.
    pub mem_bandwidth: f64,
    /// Device memory in bytes.
    pub mem_capacity: f64,
    #[serde(default = "default_flops_eff")]
    pub flops_efficiency: f64,
    #[serde(default = "default_bw_eff")]
    pub bw_efficiency: f64,
    /// Seconds added to every forward pass (launch and scheduling overhead).
    #[serde(default)]
    pub fixed_step_overhead: f64,
    /// Bytes/s of the device-to-device link used for tensor parallelism.
    pub intra_node_bandwidth: f64,
    #[serde(default)]
    pub intra_node_latency: f64,
    /// Rental price in $/hour per device.
    pub hourly_cost: f64,
    /// Board power in watts, for the coarse power estimate.
    #[serde(default)]
    pub tdp_watts: f64,
}

impl HardwareSku {
    /// Built-in device descriptions. Figures are public datasheet values
    /// and on-demand cloud prices, rounded; treat them as illustrative.
    pub fn preset(name: &str) -> Option<HardwareSku> {
        let sku = |name: &str,
                   peak_flops: f64,
                   mem_bandwidth: f64,
                   mem_capacity: f64,
                   link: f64,
                   hourly_cost: f64,
                   tdp_watts: f64| HardwareSku {
            name: name.to_string(),
            peak_flops,
            mem_bandwidth,
            mem_capacity,
            flops_efficiency: default_flops_eff(),
            bw_efficiency: default_bw_eff(),
            fixed_step_overhead: 2e-3,
            intra_node_bandwidth: link,
            intra_node_latency: 2e-6,
            hourly_cost,
            tdp_watts,
        };
        match name {
            "h100" => Some(sku("h100", 989e12, 3.35e12, 80e9, 450e9, 12.29, 700.0)),
            "a100" => Some(sku("a100", 312e12, 2.039e12, 80e9, 300e9, 5.12, 400.0)),
            "l40s" => Some(sku("l40s", 362e12, 864e9, 48e9, 32e9, 2.62, 350.0)),
            "cpu" => Some(sku("cpu", 4e12, 200e9, 512e9, 100e9, 2.86, 350.0)),
            _ => None,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let pos = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err((field.to_string(), format!("must be finite and > 0, got {v}")))
            }
        };
        pos("peak_flops", self.peak_flops)?;
        pos("mem_bandwidth", self.mem_bandwidth)?;
        pos("mem_capacity", self.mem_capacity)?;
        pos("intra_node_bandwidth", self.intra_node_bandwidth)?;
        pos("hourly_cost", self.hourly_cost)?;
        for (field, v) in [
            ("flops_efficiency", self.flops_efficiency),
            ("bw_efficiency", self.bw_efficiency),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err((field.to_string(), format!("must be in (0, 1], got {v}")));
            }
        }
        for (field, v) in [
            ("fixed_step_overhead", self.fixed_step_overhead),
            ("intra_node_latency", self.intra_node_latency),
            ("tdp_watts", self.tdp_watts),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err((field.to_string(), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Transformer shape parameters needed by the runtime and KV models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub n_params: f64,
    pub n_layers: u64,
    pub n_kv_heads: u64,
    pub head_dim: u64,
    pub dtype_bytes: u64,
    pub hidden_dim: u64,
}

impl ModelSpec {
    pub fn preset(name: &str) -> Option<ModelSpec> {
        let m = |name: &str, n_params: f64, n_layers, n_kv_heads, head_dim, hidden_dim| ModelSpec {
            name: name.to_string(),
            n_params,
            n_layers,
            n_kv_heads,
            head_dim,
            dtype_bytes: 2,
            hidden_dim,
        };
        match name {
            "llama-3.1-70b" => Some(m("llama-3.1-70b", 70.6e9, 80, 8, 128, 8192)),
            "llama-3.1-8b" => Some(m("llama-3.1-8b", 8.03e9, 32, 8, 128, 4096)),
            "llama-2-7b" => Some(m("llama-2-7b", 6.74e9, 32, 32, 128, 4096)),
            "qwen3-4b" => Some(m("qwen3-4b", 4.02e9, 36, 8, 128, 2560)),
            _ => None,
        }
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.n_layers * self.n_kv_heads * self.head_dim * self.dtype_bytes
    }

    pub fn weight_bytes(&self) -> f64 {
        self.n_params * self.dtype_bytes as f64
    }

    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if !(self.n_params.is_finite() && self.n_params > 0.0) {
            return Err(("n_params".into(), "must be finite and > 0".into()));
        }
        for (field, v) in [
            ("n_layers", self.n_layers),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("dtype_bytes", self.dtype_bytes),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err((field.into(), "must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Bytes of KV cache held for `tokens` tokens of context.
pub fn kv_bytes(model: &ModelSpec, tokens: u64) -> u64 {
    model.kv_bytes_per_token() * tokens
}

/// Which runtime model a cluster uses.
#[derive(Debug, Clone)]
pub enum RuntimeSource {
    Analytical,
    EmpiricalTable(Arc<EmpiricalTable>),
}

/// A logical group of devices that executes one client's steps.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub sku: HardwareSku,
    pub n_nodes: u64,
    pub devices_per_node: u64,
    pub tensor_parallel: u64,
    pub pipeline_parallel: u64,
    pub runtime: RuntimeSource,
}

impl Cluster {
    pub fn analytical(sku: HardwareSku, n_nodes: u64, tp: u64, pp: u64) -> Self {
        Cluster {
            sku,
            n_nodes,
            devices_per_node: 1,
            tensor_parallel: tp,
            pipeline_parallel: pp,
            runtime: RuntimeSource::Analytical,
        }
    }

    pub fn n_devices(&self) -> u64 {
        self.n_nodes * self.devices_per_node
    }

    /// Dollars per hour for the whole cluster.
    pub fn hourly_cost(&self) -> f64 {
        self.n_devices() as f64 * self.sku.hourly_cost
    }

    pub fn validate(&self, model: Option<&ModelSpec>) -> std::result::Result<(), (String, String)> {
        self.sku.validate().map_err(|(f, m)| (format!("sku.{f}"), m))?;
        if self.n_nodes == 0 || self.devices_per_node == 0 {
            return Err(("n_nodes".into(), "cluster needs at least one device".into()));
        }
        if self.tensor_parallel == 0 || self.pipeline_parallel == 0 {
            return Err(("tensor_parallel".into(), "parallel degrees must be >= 1".into()));
        }
        if self.tensor_parallel * self.pipeline_parallel > self.n_devices() {
            return Err((
                "tensor_parallel".into(),
                format!(
                    "tp {} x pp {} exceeds {} devices",
                    self.tensor_parallel,
                    self.pipeline_parallel,
                    self.n_devices()
                ),
            ));
        }
        if let Some(model) = model {
            if model.n_kv_heads % self.tensor_parallel != 0 {
                return Err((
                    "tensor_parallel".into(),
                    format!(
                        "tp {} does not divide {} kv heads of {}",
                        self.tensor_parallel, model.n_kv_heads, model.name
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Which kinds of work a step mixes; selects the empirical table slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPhase {
    Prefill,
    Decode,
    Mixed,
}

/// Shape of one forward pass as seen by the runtime models.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchProfile {
    /// Token count of each prefill item in the step.
    pub prefill_tokens: Vec<u64>,
    /// Context length (after the step) of each prefill item.
    pub prefill_contexts: Vec<u64>,
    /// Context length of each decode item.
    pub decode_contexts: Vec<u64>,
}

impl BatchProfile {
    pub fn prefill(tokens: u64) -> Self {
        BatchProfile {
            prefill_tokens: vec![tokens],
            prefill_contexts: vec![tokens],
            decode_contexts: Vec::new(),
        }
    }

    pub fn decode(contexts: Vec<u64>) -> Self {
        BatchProfile {
            decode_contexts: contexts,
            ..BatchProfile::default()
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.prefill_tokens.iter().sum::<u64>() + self.decode_contexts.len() as u64
    }

    pub fn batch_size(&self) -> u64 {
        (self.prefill_tokens.len() + self.decode_contexts.len()) as u64
    }

    pub fn max_context(&self) -> u64 {
        self.prefill_contexts
            .iter()
            .chain(self.decode_contexts.iter())
            .copied()
            .max()
            .unwrap_or(0)
    }

    pub fn phase(&self) -> StepPhase {
        match (self.prefill_tokens.is_empty(), self.decode_contexts.is_empty()) {
            (false, true) => StepPhase::Prefill,
            (true, false) => StepPhase::Decode,
            _ => StepPhase::Mixed,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.total_tokens() == 0
    }
}

/// Roofline step time for one forward pass.
///
/// With `pp` pipeline stages, each stage holds `1/pp` of the layers and
/// weights; the batch crosses the stages one after another, so the step
/// takes one micro-step plus `pp - 1` bubble micro-steps.
pub fn analytical_step_runtime(
    sku: &HardwareSku,
    model: &ModelSpec,
    tp: u64,
    pp: u64,
    batch: &BatchProfile,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(SimError::Hardware("cannot time an empty batch".into()));
    }
    let tp_f = tp as f64;
    let pp_f = pp as f64;
    let total_tokens = batch.total_tokens() as f64;

    let compute_time = 2.0 * model.n_params * total_tokens / (sku.peak_flops * sku.flops_efficiency * tp_f) / pp_f;

    let kv_read: f64 = batch
        .decode_contexts
        .iter()
        .map(|&ctx| kv_bytes(model, ctx) as f64)
        .sum();
    let memory_time = (model.weight_bytes() / tp_f + kv_read / tp_f) / pp_f / (sku.mem_bandwidth * sku.bw_efficiency);

    let tp_comm_time = if tp > 1 {
        let activation_bytes = total_tokens * model.hidden_dim as f64 * model.dtype_bytes as f64;
        2.0 * (tp_f - 1.0) / tp_f * activation_bytes * (model.n_layers as f64 / pp_f) / sku.intra_node_bandwidth
    } else {
        0.0
    };

    let micro_step = compute_time.max(memory_time) + tp_comm_time + sku.fixed_step_overhead;
    Ok(micro_step + (pp_f - 1.0) * micro_step)
}

/// Step time for a forward pass on `cluster`, using its runtime source.
pub fn llm_step_runtime(cluster: &Cluster, model: &ModelSpec, batch: &BatchProfile) -> Result<f64> {
    let runtime = match &cluster.runtime {
        RuntimeSource::Analytical => analytical_step_runtime(
            &cluster.sku,
            model,
            cluster.tensor_parallel,
            cluster.pipeline_parallel,
            batch,
        )?,
        RuntimeSource::EmpiricalTable(table) => {
            if batch.is_empty() {
                return Err(SimError::Hardware("cannot time an empty batch".into()));
            }
            table.lookup(
                &model.name,
                &cluster.sku.name,
                cluster.tensor_parallel,
                cluster.pipeline_parallel,
                batch.phase(),
                batch.total_tokens(),
                batch.batch_size(),
                batch.max_context(),
            )?
        }
    };
    if !runtime.is_finite() || runtime < 0.0 {
        return Err(SimError::Hardware(format!(
            "step runtime {runtime} is not a finite non-negative time"
        )));
    }
    Ok(runtime)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sku() -> HardwareSku {
        HardwareSku {
            name: "toy".into(),
            peak_flops: 1e15,
            mem_bandwidth: 2e12,
            mem_capacity: 80e9,
            flops_efficiency: 0.5,
            bw_efficiency: 1.0,
            fixed_step_overhead: 0.0,
            intra_node_bandwidth: 400e9,
            intra_node_latency: 0.0,
            hourly_cost: 1.0,
            tdp_watts: 0.0,
        }
    }

    fn seven_b() -> ModelSpec {
        ModelSpec {
            name: "7b".into(),
            n_params: 7e9,
            n_layers: 32,
            n_kv_heads: 32,
            head_dim: 128,
            dtype_bytes: 2,
            hidden_dim: 4096,
        }
    }

    #[test]
    fn kv_bytes_examples() {
        let m = ModelSpec {
            n_layers: 80,
            n_kv_heads: 8,
            head_dim: 128,
            dtype_bytes: 2,
            ..seven_b()
        };
        assert_eq!(kv_bytes(&m, 0), 0);
        assert_eq!(kv_bytes(&m, 1), 327_680);
        assert_eq!(kv_bytes(&m, 2000), 2 * kv_bytes(&m, 1000));
    }

    #[test]
    fn prefill_is_compute_bound_at_hand_value() {
        let t = analytical_step_runtime(&toy_sku(), &seven_b(), 1, 1, &BatchProfile::prefill(4096)).unwrap();
        let expected = 2.0 * 7e9 * 4096.0 / 5e14;
        assert!((t - expected).abs() < 1e-12, "{t} vs {expected}");
        assert!((t - 0.1146880).abs() < 1e-6);

        let mut sku = toy_sku();
        sku.fixed_step_overhead = 0.003;
        let t2 = analytical_step_runtime(&sku, &seven_b(), 1, 1, &BatchProfile::prefill(4096)).unwrap();
        assert!((t2 - expected - 0.003).abs() < 1e-12);
    }

    #[test]
    fn single_decode_is_memory_bound() {
        let t = analytical_step_runtime(&toy_sku(), &seven_b(), 1, 1, &BatchProfile::decode(vec![0])).unwrap();
        // 14 GB of weights over 2 TB/s.
        assert!(t >= 7e-3 - 1e-15, "{t}");
        assert!((t - 7e-3).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_errors() {
        assert!(analytical_step_runtime(&toy_sku(), &seven_b(), 1, 1, &BatchProfile::default()).is_err());
    }

    #[test]
    fn tensor_parallel_adds_comm_and_splits_work() {
        let b = BatchProfile::prefill(4096);
        let t1 = analytical_step_runtime(&toy_sku(), &seven_b(), 1, 1, &b).unwrap();
        let t2 = analytical_step_runtime(&toy_sku(), &seven_b(), 2, 1, &b).unwrap();
        let comm = 2.0 * 0.5 * (4096.0 * 4096.0 * 2.0) * 32.0 / 400e9;
        assert!((t2 - (t1 / 2.0 + comm)).abs() < 1e-12);
    }

    #[test]
    fn pipeline_parallel_adds_bubbles() {
        let mut sku = toy_sku();
        sku.fixed_step_overhead = 0.001;
        let b = BatchProfile::prefill(1024);
        let t1 = analytical_step_runtime(&sku, &seven_b(), 1, 1, &b).unwrap();
        let t2 = analytical_step_runtime(&sku, &seven_b(), 1, 2, &b).unwrap();
        // Two half-size micro-steps, each paying the fixed overhead.
        assert!((t2 - (t1 + 0.001)).abs() < 1e-12);
    }

    #[test]
    fn cluster_validation() {
        let c = Cluster::analytical(toy_sku(), 2, 4, 1);
        assert!(c.validate(None).is_err());
        let c = Cluster::analytical(toy_sku(), 4, 3, 1);
        assert!(c.validate(Some(&seven_b())).is_err());
        let c = Cluster::analytical(toy_sku(), 4, 2, 2);
        assert!(c.validate(Some(&seven_b())).is_ok());
        assert_eq!(c.hourly_cost(), 4.0);
    }

    #[test]
    fn presets_validate() {
        for name in ["h100", "a100", "l40s", "cpu"] {
            HardwareSku::preset(name).unwrap().validate().unwrap();
        }
        for name in ["llama-3.1-70b", "llama-3.1-8b", "llama-2-7b", "qwen3-4b"] {
            ModelSpec::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(
            ModelSpec::preset("llama-3.1-70b").unwrap().kv_bytes_per_token(),
            327_680
        );
    }
}
