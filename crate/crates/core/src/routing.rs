//! Stage-to-client routing policies and the request load metrics they use.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::workload::{Request, StageKind};

/// Request attribute used as "load" by the load-aware policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMetric {
    /// Prompt tokens, including documents appended by preceding RAG stages.
    InputContextLen,
    /// Bytes of KV cache currently materialized for the request.
    KvCacheSize,
    /// Generation budget not yet produced.
    TokensRemaining,
}

impl LoadMetric {
    pub const ALL: [LoadMetric; 3] = [
        LoadMetric::InputContextLen,
        LoadMetric::KvCacheSize,
        LoadMetric::TokensRemaining,
    ];
}

pub fn load_metric(req: &Request, metric: LoadMetric) -> f64 {
    match metric {
        LoadMetric::InputContextLen => req.input_context_tokens() as f64,
        LoadMetric::KvCacheSize => req.state.kv_bytes_resident as f64,
        LoadMetric::TokensRemaining => req.decode_budget_or_zero().saturating_sub(req.state.tokens_decoded) as f64,
    }
}

fn default_locality_weight() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouterPolicy {
    RoundRobin,
    LeastOutstanding,
    /// Picks the candidate with the smallest summed metric over the
    /// requests currently assigned to it. With a non-zero
    /// `locality_weight`, `weight * estimated_transfer_seconds` is added to
    /// each candidate's score so nearby clients are preferred.
    LoadBased {
        metric: LoadMetric,
        #[serde(default = "default_locality_weight")]
        locality_weight: f64,
    },
    /// Requests whose metric exceeds `threshold` go to `heavy_pool`, the
    /// rest to the other candidates; round-robin inside each pool.
    HeavyLightSplit {
        metric: LoadMetric,
        threshold: f64,
        heavy_pool: Vec<usize>,
    },
}

impl Default for RouterPolicy {
    fn default() -> Self {
        RouterPolicy::RoundRobin
    }
}

impl RouterPolicy {
    /// Every policy shape over the three metrics, with `heavy_pool` and
    /// `threshold` supplied by the caller for the split policies.
    pub fn enumerate(threshold: f64, heavy_pool: &[usize]) -> Vec<RouterPolicy> {
        let mut out = vec![RouterPolicy::RoundRobin, RouterPolicy::LeastOutstanding];
        for metric in LoadMetric::ALL {
            out.push(RouterPolicy::LoadBased {
                metric,
                locality_weight: 0.0,
            });
        }
        for metric in LoadMetric::ALL {
            out.push(RouterPolicy::HeavyLightSplit {
                metric,
                threshold,
                heavy_pool: heavy_pool.to_vec(),
            });
        }
        out
    }

    pub fn metric(&self) -> Option<LoadMetric> {
        match self {
            RouterPolicy::LoadBased { metric, .. } | RouterPolicy::HeavyLightSplit { metric, .. } => Some(*metric),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            RouterPolicy::RoundRobin => "round_robin".into(),
            RouterPolicy::LeastOutstanding => "least_outstanding".into(),
            RouterPolicy::LoadBased { metric, .. } => format!("load_based:{}", metric_name(*metric)),
            RouterPolicy::HeavyLightSplit { metric, .. } => {
                format!("heavy_light:{}", metric_name(*metric))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RouterPolicy::HeavyLightSplit { threshold, .. } if !(*threshold > 0.0) => {
                Err(SimError::config("router.threshold", "must be > 0"))
            }
            RouterPolicy::LoadBased { locality_weight, .. }
                if !(locality_weight.is_finite() && *locality_weight >= 0.0) =>
            {
                Err(SimError::config("router.locality_weight", "must be finite and >= 0"))
            }
            _ => Ok(()),
        }
    }
}

fn metric_name(m: LoadMetric) -> &'static str {
    match m {
        LoadMetric::InputContextLen => "input_context_len",
        LoadMetric::KvCacheSize => "kv_cache_size",
        LoadMetric::TokensRemaining => "tokens_remaining",
    }
}

/// What the router sees of one candidate client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientView {
    pub id: usize,
    /// Requests currently assigned to the client.
    pub outstanding: usize,
    /// Summed policy metric over the assigned requests.
    pub load: f64,
    /// Estimated seconds to move the request's state to this client.
    pub transfer_estimate: f64,
}

impl ClientView {
    pub fn new(id: usize) -> Self {
        ClientView {
            id,
            outstanding: 0,
            load: 0.0,
            transfer_estimate: 0.0,
        }
    }
}

/// Router state: the policy plus its round-robin counters.
#[derive(Debug, Clone, Default)]
pub struct Router {
    policy: RouterPolicy,
    counters: BTreeMap<(StageKind, u8), usize>,
}

impl Router {
    pub fn new(policy: RouterPolicy) -> Self {
        Router {
            policy,
            counters: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> &RouterPolicy {
        &self.policy
    }

    fn next_rr(&mut self, stage: StageKind, pool: u8, ids: &[usize]) -> usize {
        let counter = self.counters.entry((stage, pool)).or_insert(0);
        let pick = ids[*counter % ids.len()];
        *counter += 1;
        pick
    }

    /// Chooses a client for `stage` of `req`. Candidates may be given in any
    /// order; ties resolve to the lowest client id.
    pub fn route(&mut self, req: &Request, stage: StageKind, candidates: &[ClientView]) -> Result<usize> {
        if candidates.is_empty() {
            return Err(SimError::Routing(format!(
                "no candidate client for {stage} stage of request {}",
                req.id
            )));
        }
        let mut sorted: Vec<&ClientView> = candidates.iter().collect();
        sorted.sort_by_key(|c| c.id);

        let argmin = |score: &dyn Fn(&ClientView) -> f64| -> usize {
            let mut best = sorted[0];
            let mut best_score = score(best);
            for &c in &sorted[1..] {
                let s = score(c);
                if s < best_score {
                    best = c;
                    best_score = s;
                }
            }
            best.id
        };

        match &self.policy {
            RouterPolicy::RoundRobin => {
                let ids: Vec<usize> = sorted.iter().map(|c| c.id).collect();
                Ok(self.next_rr(stage, 0, &ids))
            }
            RouterPolicy::LeastOutstanding => Ok(argmin(&|c| c.outstanding as f64)),
            RouterPolicy::LoadBased { locality_weight, .. } => {
                let w = *locality_weight;
                Ok(argmin(&|c| {
                    if w > 0.0 {
                        c.load + w * c.transfer_estimate
                    } else {
                        c.load
                    }
                }))
            }
            RouterPolicy::HeavyLightSplit {
                metric,
                threshold,
                heavy_pool,
            } => {
                let heavy = load_metric(req, *metric) > *threshold;
                let pool: Vec<usize> = sorted
                    .iter()
                    .map(|c| c.id)
                    .filter(|id| heavy_pool.contains(id) == heavy)
                    .collect();
                let ids = if pool.is_empty() {
                    sorted.iter().map(|c| c.id).collect()
                } else {
                    pool
                };
                Ok(self.next_rr(stage, heavy as u8, &ids))
            }
        }
    }
}
