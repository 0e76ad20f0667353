//! Batched scheduler for RAG and KV-retrieval stages: each step serves
//! every active item at once and lasts as long as the slowest item.

use serde::{Deserialize, Serialize};

use super::{Completion, StepPlan};
use crate::error::{Result, SimError};
use crate::hardware::{
    kv_bytes, llm_step_runtime, retrieval_latency, sample_hit_level, BatchProfile, Cluster, HitOutcome,
    MemoryHierarchy, ModelSpec, PrefixCache, Terminal,
};
use crate::workload::{Request, StageSpec};

/// `a * x + b` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Affine {
    pub fn eval(&self, x: u64) -> f64 {
        self.a * x as f64 + self.b
    }

    fn validate(&self, field: &str) -> std::result::Result<(), (String, String)> {
        if self.a.is_finite() && self.b.is_finite() && self.a >= 0.0 && self.b >= 0.0 {
            Ok(())
        } else {
            Err((field.to_string(), "coefficients must be finite and >= 0".into()))
        }
    }
}

/// Latency models of the three RAG sub-steps. Defaults are calibration
/// placeholders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RagCoeffs {
    /// Keyed on query tokens.
    #[serde(default = "default_embed")]
    pub embed: Affine,
    /// Keyed on documents retrieved.
    #[serde(default = "default_rerank")]
    pub rerank: Affine,
    /// Keyed on documents × tokens per document.
    #[serde(default = "default_retrieve")]
    pub retrieve: Affine,
}

fn default_embed() -> Affine {
    Affine { a: 2e-5, b: 5e-3 }
}

fn default_rerank() -> Affine {
    Affine { a: 2e-3, b: 5e-3 }
}

fn default_retrieve() -> Affine {
    Affine { a: 2e-7, b: 1e-3 }
}

impl Default for RagCoeffs {
    fn default() -> Self {
        RagCoeffs {
            embed: default_embed(),
            rerank: default_rerank(),
            retrieve: default_retrieve(),
        }
    }
}

impl RagCoeffs {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        self.embed.validate("rag.embed")?;
        self.rerank.validate("rag.rerank")?;
        self.retrieve.validate("rag.retrieve")
    }

    /// Latency of sub-step `sub` (0 embed, 1 rerank, 2 retrieve).
    pub fn sub_step_latency(&self, sub: u8, query_tokens: u64, docs: u64, doc_tokens: u64) -> f64 {
        match sub {
            0 => self.embed.eval(query_tokens),
            1 if docs == 0 => 0.0,
            1 => self.rerank.eval(docs),
            _ if docs == 0 => 0.0,
            _ => self.retrieve.eval(docs * doc_tokens),
        }
    }
}

/// How a KV-retrieval client turns the hierarchy into stage latencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    /// Every request pays the expected latency of the hierarchy.
    #[default]
    Expected,
    /// Each request draws its serving level from the hit rates.
    Sampled,
    /// Hits follow LRU residency of prefixes under level capacities.
    Capacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvRetrievalConfig {
    pub hierarchy: MemoryHierarchy,
    #[serde(default)]
    pub mode: KvMode,
}

#[derive(Debug, Clone)]
enum ItemWork {
    RagSubStep,
    Kv { fetched: u64 },
}

#[derive(Debug, Clone)]
pub(crate) struct BatchedScheduler {
    pub rag: Option<RagCoeffs>,
    pub kv: Option<KvRetrievalConfig>,
    cache: Option<PrefixCache>,
    seed: u64,
    queue: Vec<usize>,
    in_flight: Vec<(usize, ItemWork)>,
}

/// Seed for a request's hit-level draw, decorrelated across request ids.
fn request_seed(seed: u64, request_id: u64) -> u64 {
    seed ^ request_id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn recompute_probability(h: &MemoryHierarchy) -> f64 {
    if h.terminal == Terminal::AssumeHit {
        return 0.0;
    }
    (0..h.levels.len()).map(|n| 1.0 - h.effective_hit_rate(n)).product()
}

impl BatchedScheduler {
    pub fn new(rag: Option<RagCoeffs>, kv: Option<KvRetrievalConfig>, seed: u64) -> Self {
        let cache = kv
            .as_ref()
            .filter(|k| k.mode == KvMode::Capacity)
            .map(|k| PrefixCache::new(&k.hierarchy));
        BatchedScheduler {
            rag,
            kv,
            cache,
            seed,
            queue: Vec::new(),
            in_flight: Vec::new(),
        }
    }

    pub fn enqueue(&mut self, slot: usize) {
        self.queue.push(slot);
    }

    pub fn has_work(&self) -> bool {
        !self.queue.is_empty()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn start_step(
        &mut self,
        reqs: &[Request],
        cluster: &Cluster,
        model: Option<&ModelSpec>,
    ) -> Result<Option<StepPlan>> {
        if self.queue.is_empty() {
            return Ok(None);
        }
        let items = std::mem::take(&mut self.queue);
        let mut longest: f64 = 0.0;
        let mut recompute = BatchProfile::default();
        let mut has_rag = false;
        let mut has_kv = false;
        for &slot in &items {
            let req = &reqs[slot];
            match *req.current_stage().expect("queued request has a stage") {
                StageSpec::Rag {
                    query_tokens,
                    docs_retrieved,
                    doc_tokens,
                } => {
                    has_rag = true;
                    let coeffs = self
                        .rag
                        .as_ref()
                        .ok_or_else(|| SimError::Scheduling("RAG stage on a client without RAG coefficients".into()))?;
                    let lat = coeffs.sub_step_latency(req.state.sub_step, query_tokens, docs_retrieved, doc_tokens);
                    longest = longest.max(lat);
                    self.in_flight.push((slot, ItemWork::RagSubStep));
                }
                StageSpec::KvRetrieval {
                    cached_tokens,
                    prefix_id,
                } => {
                    has_kv = true;
                    let kv = self
                        .kv
                        .as_ref()
                        .ok_or_else(|| SimError::Scheduling("KV retrieval on a client without a hierarchy".into()))?;
                    let model = model.ok_or_else(|| SimError::Scheduling("KV retrieval client has no model".into()))?;
                    if cached_tokens == 0 {
                        self.in_flight.push((slot, ItemWork::Kv { fetched: 0 }));
                        continue;
                    }
                    let bytes = kv_bytes(model, cached_tokens);
                    let size = bytes as f64;
                    let outcome = match kv.mode {
                        KvMode::Expected => {
                            let recompute_cost =
                                llm_step_runtime(cluster, model, &BatchProfile::prefill(cached_tokens))?;
                            let lat = retrieval_latency(&kv.hierarchy, size, recompute_cost)?;
                            longest = longest.max(lat);
                            let fetched = (size * (1.0 - recompute_probability(&kv.hierarchy))).round() as u64;
                            self.in_flight.push((slot, ItemWork::Kv { fetched }));
                            continue;
                        }
                        KvMode::Sampled => sample_hit_level(&kv.hierarchy, request_seed(self.seed, req.id)),
                        KvMode::Capacity => self
                            .cache
                            .as_mut()
                            .expect("capacity mode has a cache")
                            .access(prefix_id, size),
                    };
                    let fetched = match outcome {
                        HitOutcome::Level(n) => {
                            longest = longest.max(kv.hierarchy.levels[n].hit_latency(size));
                            bytes
                        }
                        HitOutcome::Recompute => {
                            recompute.prefill_tokens.push(cached_tokens);
                            recompute.prefill_contexts.push(cached_tokens);
                            0
                        }
                    };
                    self.in_flight.push((slot, ItemWork::Kv { fetched }));
                }
                ref other => {
                    return Err(SimError::Scheduling(format!(
                        "batched client cannot run a {} stage",
                        other.kind()
                    )))
                }
            }
        }
        if !recompute.is_empty() {
            let model = model.expect("checked above");
            longest = longest.max(llm_step_runtime(cluster, model, &recompute)?);
        }
        let label = match (has_rag, has_kv) {
            (true, false) => "rag",
            (false, true) => "kv_retrieval",
            _ => "batched",
        };
        Ok(Some(StepPlan {
            duration: longest,
            label: label.to_string(),
            items,
            prefill_tokens: recompute.prefill_tokens.iter().sum(),
            decode_tokens: 0,
        }))
    }

    pub fn complete_step(&mut self, reqs: &mut [Request], model: Option<&ModelSpec>) -> Completion {
        let mut done = Completion::default();
        for (slot, work) in std::mem::take(&mut self.in_flight) {
            let req = &mut reqs[slot];
            match work {
                ItemWork::RagSubStep => {
                    req.state.sub_step += 1;
                    if req.state.sub_step >= 3 {
                        req.state.sub_step = 0;
                        if let Some(StageSpec::Rag {
                            docs_retrieved,
                            doc_tokens,
                            ..
                        }) = req.current_stage()
                        {
                            req.state.rag_tokens += docs_retrieved * doc_tokens;
                        }
                        done.finished.push(slot);
                    } else {
                        self.queue.push(slot);
                    }
                }
                ItemWork::Kv { fetched } => {
                    if let Some(&StageSpec::KvRetrieval { cached_tokens, .. }) = req.current_stage() {
                        req.state.reused_prefix_tokens = cached_tokens;
                        if let Some(model) = model {
                            req.state.kv_bytes_resident = kv_bytes(model, cached_tokens);
                        }
                        req.state.kv_fetched_bytes = fetched;
                    }
                    done.finished.push(slot);
                }
            }
        }
        done
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rag_sub_steps() {
        let c = RagCoeffs {
            embed: Affine { a: 1e-3, b: 0.0 },
            rerank: Affine { a: 1e-2, b: 1.0 },
            retrieve: Affine { a: 1e-4, b: 2.0 },
        };
        assert_eq!(c.sub_step_latency(0, 10, 5, 500), 0.01);
        assert_eq!(c.sub_step_latency(1, 10, 5, 500), 1.05);
        assert!((c.sub_step_latency(2, 10, 5, 500) - 2.25).abs() < 1e-12);
        assert_eq!(c.sub_step_latency(2, 10, 0, 500), 0.0);
    }

    #[test]
    fn recompute_probability_of_hierarchy() {
        let level = |h| crate::hardware::MemoryLevel {
            name: None,
            capacity: 0.0,
            lookup_latency: 0.0,
            bandwidth: 1.0,
            hit_rate: h,
        };
        let h = MemoryHierarchy {
            levels: vec![level(0.5), level(0.5)],
            terminal: Terminal::Recompute,
        };
        assert_eq!(recompute_probability(&h), 0.25);
        let h = MemoryHierarchy {
            levels: vec![level(0.5), level(0.0)],
            terminal: Terminal::AssumeHit,
        };
        assert_eq!(recompute_probability(&h), 0.0);
    }
}
