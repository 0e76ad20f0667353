//! Clients: a scheduler paired with a modeled hardware cluster.
//!
//! Three scheduler families exist. LLM clients run prefill, reason and
//! decode stages under one of the batching strategies. Batched clients run
//! RAG and KV-retrieval stages, serving every queued item in one step.
//! Sequential clients run pre/post-processing tasks on a pool of cores.
//!
//! A client step has two halves: [`Client::start_step`] forms the work and
//! prices it, [`Client::complete_step`] applies its effects when the step's
//! time has elapsed.

mod batched;
mod llm;
mod sequential;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use batched::{Affine, KvMode, KvRetrievalConfig, RagCoeffs};
pub use llm::{
    admit, form_batch_chunked, form_batch_continuous, form_batch_mixed, form_batch_static, pack, Admission,
    BatchingStrategy, DisaggRole, LlmItem, LlmLimits, Packing, QueueEntry, StepBatch,
};
pub use sequential::{task_latency, PrePostCoeffs};

use crate::error::{Result, SimError};
use crate::hardware::{Cluster, ModelSpec};
use crate::workload::{Request, StageKind, DEFAULT_MODEL_ID};

/// Fraction of device memory usable for weights plus KV cache.
pub const DEFAULT_MEMORY_UTILIZATION: f64 = 0.9;

/// Scheduler configuration of a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerKind {
    Sequential {
        cores: usize,
        #[serde(default)]
        ops: PrePostCoeffs,
    },
    Batched {
        #[serde(default)]
        rag: Option<RagCoeffs>,
        #[serde(default)]
        kv: Option<KvRetrievalConfig>,
    },
    Llm {
        batching: BatchingStrategy,
        #[serde(default)]
        packing: Packing,
        limits: LlmLimits,
        /// KV budget in bytes. Defaults to the usable memory of the
        /// model-parallel group minus one copy of the weights.
        #[serde(default)]
        kv_capacity: Option<f64>,
    },
}

/// What a client will do in the step it just started.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub duration: f64,
    pub label: String,
    /// Request slots taking part in the step.
    pub items: Vec<usize>,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
}

/// Effects of a completed step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Completion {
    /// Slots whose current stage finished.
    pub finished: Vec<usize>,
    /// Slots that produced one generated token.
    pub decode_tokens: Vec<usize>,
    pub prefill_chunks: Vec<(usize, u64)>,
}

#[derive(Debug, Clone)]
enum SchedulerState {
    Llm(llm::LlmScheduler),
    Batched(batched::BatchedScheduler),
    Sequential(sequential::SequentialScheduler),
}

#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub name: String,
    pub capabilities: BTreeSet<StageKind>,
    pub model: Option<ModelSpec>,
    pub cluster: Cluster,
    pub kind: SchedulerKind,
    state: SchedulerState,
}

fn cfg_err((field, message): (String, String)) -> SimError {
    SimError::config(field, message)
}

impl Client {
    /// Builds and validates a client. `seed` drives per-request sampling in
    /// KV-retrieval clients.
    pub fn new(
        id: usize,
        name: impl Into<String>,
        capabilities: impl IntoIterator<Item = StageKind>,
        model: Option<ModelSpec>,
        cluster: Cluster,
        kind: SchedulerKind,
        seed: u64,
    ) -> Result<Client> {
        let capabilities: BTreeSet<StageKind> = capabilities.into_iter().collect();
        if capabilities.is_empty() {
            return Err(SimError::config("capabilities", "client serves no stage kind"));
        }
        if let Some(m) = &model {
            m.validate()
                .map_err(|(f, m)| SimError::config(format!("model.{f}"), m))?;
        }
        cluster
            .validate(model.as_ref().filter(|_| matches!(kind, SchedulerKind::Llm { .. })))
            .map_err(|(f, m)| SimError::config(format!("cluster.{f}"), m))?;

        let allow = |allowed: &[StageKind], family: &str| -> Result<()> {
            match capabilities.iter().find(|k| !allowed.contains(k)) {
                Some(k) => Err(SimError::config(
                    "capabilities",
                    format!("{family} client cannot serve {k} stages"),
                )),
                None => Ok(()),
            }
        };

        let state = match &kind {
            SchedulerKind::Llm {
                batching,
                packing,
                limits,
                kv_capacity,
            } => {
                allow(&[StageKind::Prefill, StageKind::Reason, StageKind::Decode], "llm")?;
                let model = model
                    .as_ref()
                    .ok_or_else(|| SimError::config("model", "llm client needs a model"))?;
                limits
                    .validate(batching)
                    .map_err(|(f, m)| SimError::config(format!("limits.{f}"), m))?;
                if let BatchingStrategy::Disaggregated { role, peer } = batching {
                    if *peer == id {
                        return Err(SimError::config("batching.peer", "peer must be another client"));
                    }
                    let bad = match role {
                        DisaggRole::PrefillSide => capabilities.iter().any(|k| k.is_generation()),
                        DisaggRole::DecodeSide => capabilities.contains(&StageKind::Prefill),
                    };
                    if bad {
                        return Err(SimError::config(
                            "capabilities",
                            "prefill-side clients serve only prefill; decode-side clients never prefill",
                        ));
                    }
                }
                let capacity = match kv_capacity {
                    Some(c) if c.is_finite() && *c > 0.0 => *c,
                    Some(_) => return Err(SimError::config("kv_capacity", "must be finite and > 0")),
                    None => {
                        let devices = (cluster.tensor_parallel * cluster.pipeline_parallel) as f64;
                        let usable =
                            devices * cluster.sku.mem_capacity * DEFAULT_MEMORY_UTILIZATION - model.weight_bytes();
                        if usable <= 0.0 {
                            return Err(SimError::config(
                                "model",
                                format!(
                                    "{} weights ({:.1} GB) do not fit on tp {} x pp {} {}",
                                    model.name,
                                    model.weight_bytes() / 1e9,
                                    cluster.tensor_parallel,
                                    cluster.pipeline_parallel,
                                    cluster.sku.name
                                ),
                            ));
                        }
                        usable
                    }
                };
                SchedulerState::Llm(llm::LlmScheduler::new(*batching, *packing, *limits, capacity as u64))
            }
            SchedulerKind::Batched { rag, kv } => {
                allow(&[StageKind::Rag, StageKind::KvRetrieval], "batched")?;
                let rag = if capabilities.contains(&StageKind::Rag) {
                    let r = rag.unwrap_or_default();
                    r.validate().map_err(cfg_err)?;
                    Some(r)
                } else {
                    None
                };
                if capabilities.contains(&StageKind::KvRetrieval) {
                    let k = kv
                        .as_ref()
                        .ok_or_else(|| SimError::config("kv", "kv_retrieval capability needs a memory hierarchy"))?;
                    k.hierarchy.validate().map_err(|e| match e {
                        SimError::Config { field, message } => {
                            SimError::config(format!("kv.hierarchy.{field}"), message)
                        }
                        other => other,
                    })?;
                    if model.is_none() {
                        return Err(SimError::config(
                            "model",
                            "kv_retrieval client needs the model whose KV it serves",
                        ));
                    }
                }
                SchedulerState::Batched(batched::BatchedScheduler::new(rag, kv.clone(), seed))
            }
            SchedulerKind::Sequential { cores, ops } => {
                allow(&[StageKind::Preprocess, StageKind::Postprocess], "sequential")?;
                if *cores == 0 {
                    return Err(SimError::config("cores", "must be >= 1"));
                }
                ops.validate().map_err(cfg_err)?;
                SchedulerState::Sequential(sequential::SequentialScheduler::new(*cores, *ops))
            }
        };

        Ok(Client {
            id,
            name: name.into(),
            capabilities,
            model,
            cluster,
            kind,
            state,
        })
    }

    pub fn can_serve(&self, kind: StageKind) -> bool {
        self.capabilities.contains(&kind)
    }

    /// True if the client can run stages of requests targeting `model_id`.
    pub fn serves_model(&self, model_id: &str) -> bool {
        model_id == DEFAULT_MODEL_ID
            || !matches!(self.kind, SchedulerKind::Llm { .. })
            || self.model.as_ref().is_some_and(|m| m.name == model_id)
    }

    pub fn batching(&self) -> Option<&BatchingStrategy> {
        match &self.kind {
            SchedulerKind::Llm { batching, .. } => Some(batching),
            _ => None,
        }
    }

    /// Decode-side peer of a prefill-side client.
    pub fn decode_peer(&self) -> Option<usize> {
        match self.batching() {
            Some(BatchingStrategy::Disaggregated {
                role: DisaggRole::PrefillSide,
                peer,
            }) => Some(*peer),
            _ => None,
        }
    }

    pub fn kv_capacity(&self) -> Option<u64> {
        match &self.state {
            SchedulerState::Llm(s) => Some(s.kv_capacity),
            _ => None,
        }
    }

    pub fn kv_used(&self) -> u64 {
        match &self.state {
            SchedulerState::Llm(s) => s.kv_used(),
            _ => 0,
        }
    }

    /// Hands a request's current stage to the client. A request the client
    /// still holds from its previous stage is resumed in place.
    pub fn enqueue(&mut self, slot: usize, now: f64) {
        match &mut self.state {
            SchedulerState::Llm(s) => s.enqueue(slot, now),
            SchedulerState::Batched(s) => s.enqueue(slot),
            SchedulerState::Sequential(s) => s.enqueue(slot),
        }
    }

    /// Drops a request that moved on to another client, freeing its KV.
    pub fn release(&mut self, slot: usize) {
        if let SchedulerState::Llm(s) = &mut self.state {
            s.release(slot);
        }
    }

    pub fn has_work(&self) -> bool {
        match &self.state {
            SchedulerState::Llm(s) => s.has_work(),
            SchedulerState::Batched(s) => s.has_work(),
            SchedulerState::Sequential(s) => s.has_work(),
        }
    }

    /// Requests waiting at the client and not yet in service.
    pub fn queue_len(&self) -> usize {
        match &self.state {
            SchedulerState::Llm(s) => s.queue_len(),
            SchedulerState::Batched(s) => s.queue_len(),
            SchedulerState::Sequential(s) => s.queue_len(),
        }
    }

    /// Forms and prices the next step. Also returns requests rejected by
    /// admission control while forming it.
    pub fn start_step(&mut self, now: f64, reqs: &[Request]) -> Result<(Option<StepPlan>, Vec<(usize, String)>)> {
        let model = self.model.as_ref();
        match &mut self.state {
            SchedulerState::Llm(s) => s.start_step(reqs, &self.cluster, model.expect("validated")),
            SchedulerState::Batched(s) => Ok((s.start_step(reqs, &self.cluster, model)?, Vec::new())),
            SchedulerState::Sequential(s) => Ok((s.start_step(now, reqs, &self.cluster, model)?, Vec::new())),
        }
    }

    pub fn complete_step(&mut self, reqs: &mut [Request]) -> Result<Completion> {
        let model = self.model.as_ref();
        match &mut self.state {
            SchedulerState::Llm(s) => s.complete_step(reqs, model.expect("validated")),
            SchedulerState::Batched(s) => Ok(s.complete_step(reqs, model)),
            SchedulerState::Sequential(s) => Ok(s.complete_step()),
        }
    }
}
