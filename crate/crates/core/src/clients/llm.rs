//! LLM scheduler: admission under a KV budget, queue packing, and the
//! batch formers for each batching strategy.

use serde::{Deserialize, Serialize};

use super::{Completion, StepPlan};
use crate::error::{Result, SimError};
use crate::hardware::{kv_bytes, llm_step_runtime, BatchProfile, Cluster, ModelSpec};
use crate::workload::{Request, StageKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisaggRole {
    PrefillSide,
    DecodeSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchingStrategy {
    /// Run-to-completion batches: members are admitted together, prefilled,
    /// then decoded in lockstep; nothing new joins until all have left.
    Static,
    /// Waiting prefills take priority; otherwise every active decode runs.
    Continuous,
    /// Decode-first budget fill, then prefill chunks.
    Chunked,
    /// Prefill-first budget fill, then decodes in the remaining slots.
    Mixed,
    /// One side of a prefill/decode split; steps use continuous batching.
    Disaggregated { role: DisaggRole, peer: usize },
}

impl BatchingStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            BatchingStrategy::Static => "static",
            BatchingStrategy::Continuous => "continuous",
            BatchingStrategy::Chunked => "chunked",
            BatchingStrategy::Mixed => "mixed",
            BatchingStrategy::Disaggregated {
                role: DisaggRole::PrefillSide,
                ..
            } => "disaggregated_prefill",
            BatchingStrategy::Disaggregated {
                role: DisaggRole::DecodeSide,
                ..
            } => "disaggregated_decode",
        }
    }

    pub fn uses_chunks(&self) -> bool {
        matches!(self, BatchingStrategy::Chunked | BatchingStrategy::Mixed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Packing {
    #[default]
    Fcfs,
    LeastWorkLeft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmLimits {
    pub max_batched_tokens: u64,
    pub max_batch_size: usize,
    #[serde(default)]
    pub chunk_size: Option<u64>,
}

impl LlmLimits {
    pub fn validate(&self, batching: &BatchingStrategy) -> std::result::Result<(), (String, String)> {
        if self.max_batched_tokens == 0 {
            return Err(("max_batched_tokens".into(), "must be > 0".into()));
        }
        if self.max_batch_size == 0 {
            return Err(("max_batch_size".into(), "must be > 0".into()));
        }
        match (batching.uses_chunks(), self.chunk_size) {
            (true, None) => Err((
                "chunk_size".into(),
                format!("required for {} batching", batching.label()),
            )),
            (false, Some(_)) => Err((
                "chunk_size".into(),
                format!("only valid for chunked or mixed batching, not {}", batching.label()),
            )),
            (true, Some(0)) => Err(("chunk_size".into(), "must be > 0".into())),
            (true, Some(c)) if c > self.max_batched_tokens => Err((
                "chunk_size".into(),
                format!("{c} exceeds max_batched_tokens {}", self.max_batched_tokens),
            )),
            _ => Ok(()),
        }
    }
}

/// Work in one forward pass, keyed by caller-chosen item ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBatch {
    pub prefill_items: Vec<(usize, u64)>,
    /// Each decode item produces one token.
    pub decode_items: Vec<usize>,
}

impl StepBatch {
    pub fn total_tokens(&self) -> u64 {
        self.prefill_items.iter().map(|&(_, n)| n).sum::<u64>() + self.decode_items.len() as u64
    }

    pub fn len(&self) -> usize {
        self.prefill_items.len() + self.decode_items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefill_items.is_empty() && self.decode_items.is_empty()
    }

    pub fn fits(&self, limits: &LlmLimits) -> bool {
        self.total_tokens() <= limits.max_batched_tokens && self.len() <= limits.max_batch_size
    }
}

/// Scheduler-visible state of one admitted request, in admission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LlmItem {
    pub key: usize,
    /// Prompt tokens still to compute; zero once prefill is done.
    pub remaining_prefill: u64,
    /// True when the request is in a token-generating stage.
    pub generating: bool,
}

/// Full prefills first (as many as fit), otherwise every decode.
pub fn form_batch_continuous(items: &[LlmItem], limits: &LlmLimits) -> StepBatch {
    let mut batch = StepBatch::default();
    let mut tokens = 0;
    for item in items.iter().filter(|i| i.remaining_prefill > 0) {
        if batch.len() >= limits.max_batch_size {
            break;
        }
        if tokens + item.remaining_prefill > limits.max_batched_tokens {
            break;
        }
        tokens += item.remaining_prefill;
        batch.prefill_items.push((item.key, item.remaining_prefill));
    }
    if !batch.is_empty() {
        return batch;
    }
    let cap = decode_cap(limits);
    batch.decode_items = items.iter().filter(|i| i.generating).take(cap).map(|i| i.key).collect();
    batch
}

/// Static batches step like continuous ones; the difference lies in
/// admission, which only happens when the previous batch has drained.
pub fn form_batch_static(items: &[LlmItem], limits: &LlmLimits) -> StepBatch {
    form_batch_continuous(items, limits)
}

/// Every active decode first, then prefill chunks in the leftover budget.
pub fn form_batch_chunked(items: &[LlmItem], limits: &LlmLimits, chunk_size: u64) -> StepBatch {
    let mut batch = StepBatch::default();
    batch.decode_items = items
        .iter()
        .filter(|i| i.generating)
        .take(decode_cap(limits))
        .map(|i| i.key)
        .collect();
    let mut budget = limits.max_batched_tokens - batch.decode_items.len() as u64;
    for item in items.iter().filter(|i| i.remaining_prefill > 0) {
        if budget == 0 || batch.len() >= limits.max_batch_size {
            break;
        }
        let chunk = chunk_size.min(item.remaining_prefill).min(budget);
        budget -= chunk;
        batch.prefill_items.push((item.key, chunk));
    }
    batch
}

/// Prefill chunks first, then decodes in the remaining slots; prefill
/// chunks are trimmed from the back so the decodes fit the token budget.
pub fn form_batch_mixed(items: &[LlmItem], limits: &LlmLimits, chunk_size: u64) -> StepBatch {
    let mut batch = StepBatch::default();
    let mut budget = limits.max_batched_tokens;
    for item in items.iter().filter(|i| i.remaining_prefill > 0) {
        if budget == 0 || batch.len() >= limits.max_batch_size {
            break;
        }
        let chunk = chunk_size.min(item.remaining_prefill).min(budget);
        budget -= chunk;
        batch.prefill_items.push((item.key, chunk));
    }
    let slots = limits.max_batch_size - batch.len();
    // Every prefill item keeps at least one token.
    let token_room = limits.max_batched_tokens as usize - batch.prefill_items.len();
    batch.decode_items = items
        .iter()
        .filter(|i| i.generating)
        .take(slots.min(token_room))
        .map(|i| i.key)
        .collect();
    let mut excess = batch.total_tokens().saturating_sub(limits.max_batched_tokens);
    for (_, chunk) in batch.prefill_items.iter_mut().rev() {
        if excess == 0 {
            break;
        }
        let cut = excess.min(*chunk - 1);
        *chunk -= cut;
        excess -= cut;
    }
    batch
}

fn decode_cap(limits: &LlmLimits) -> usize {
    limits
        .max_batch_size
        .min(usize::try_from(limits.max_batched_tokens).unwrap_or(usize::MAX))
}

/// One entry of a client queue as seen by [`pack`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueEntry {
    pub key: usize,
    pub request_id: u64,
    /// When the request reached this client.
    pub arrived: f64,
    /// Unprefilled tokens plus tokens remaining to generate.
    pub work: u64,
}

/// Orders a queue for admission. Ties resolve by request id.
pub fn pack(queue: &mut [QueueEntry], policy: Packing) {
    match policy {
        Packing::Fcfs => queue.sort_by(|a, b| a.arrived.total_cmp(&b.arrived).then(a.request_id.cmp(&b.request_id))),
        Packing::LeastWorkLeft => queue.sort_by(|a, b| a.work.cmp(&b.work).then(a.request_id.cmp(&b.request_id))),
    }
}

/// Outcome of an admission check against the KV budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    Deferred,
    Rejected(String),
}

/// Admits `projected` bytes iff they fit next to `used` within `capacity`;
/// a footprint larger than the whole capacity can never be admitted.
pub fn admit(used: u64, capacity: u64, projected: u64) -> Admission {
    if projected > capacity {
        Admission::Rejected(format!(
            "projected KV {projected} B exceeds client capacity {capacity} B"
        ))
    } else if used + projected <= capacity {
        Admission::Admitted
    } else {
        Admission::Deferred
    }
}

#[derive(Debug, Clone)]
struct Waiting {
    slot: usize,
    arrived: f64,
}

#[derive(Debug, Clone)]
struct Running {
    slot: usize,
    reserved: u64,
    /// False between finishing one stage and being handed the next.
    active: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct LlmScheduler {
    pub batching: BatchingStrategy,
    pub packing: Packing,
    pub limits: LlmLimits,
    pub kv_capacity: u64,
    kv_used: u64,
    waiting: Vec<Waiting>,
    running: Vec<Running>,
    in_flight: Option<StepBatch>,
}

fn in_prefill(req: &Request) -> bool {
    req.current_kind() == Some(StageKind::Prefill)
}

impl LlmScheduler {
    pub fn new(batching: BatchingStrategy, packing: Packing, limits: LlmLimits, kv_capacity: u64) -> Self {
        LlmScheduler {
            batching,
            packing,
            limits,
            kv_capacity,
            kv_used: 0,
            waiting: Vec::new(),
            running: Vec::new(),
            in_flight: None,
        }
    }

    pub fn kv_used(&self) -> u64 {
        self.kv_used
    }

    pub fn enqueue(&mut self, slot: usize, now: f64) {
        if let Some(r) = self.running.iter_mut().find(|r| r.slot == slot) {
            r.active = true;
        } else {
            self.waiting.push(Waiting { slot, arrived: now });
        }
    }

    pub fn release(&mut self, slot: usize) {
        if let Some(pos) = self.running.iter().position(|r| r.slot == slot) {
            let r = self.running.remove(pos);
            self.kv_used -= r.reserved;
        }
    }

    pub fn has_work(&self) -> bool {
        !self.waiting.is_empty() || self.running.iter().any(|r| r.active)
    }

    pub fn queue_len(&self) -> usize {
        self.waiting.len()
    }

    fn projected_kv(&self, model: &ModelSpec, req: &Request) -> u64 {
        let input = req.effective_input_tokens();
        match self.batching {
            BatchingStrategy::Disaggregated {
                role: DisaggRole::PrefillSide,
                ..
            } => kv_bytes(model, input),
            _ => kv_bytes(model, input + req.decode_budget_or_zero()),
        }
    }

    fn admit_waiting(&mut self, model: &ModelSpec, reqs: &[Request]) -> Vec<(usize, String)> {
        let mut rejected = Vec::new();
        let is_static = self.batching == BatchingStrategy::Static;
        if self.waiting.is_empty() || (is_static && !self.running.is_empty()) {
            return rejected;
        }
        let mut order: Vec<QueueEntry> = self
            .waiting
            .iter()
            .map(|w| {
                let req = &reqs[w.slot];
                let prefill = if in_prefill(req) { req.remaining_prefill() } else { 0 };
                QueueEntry {
                    key: w.slot,
                    request_id: req.id,
                    arrived: w.arrived,
                    work: prefill + req.decode_budget_or_zero().saturating_sub(req.state.tokens_decoded),
                }
            })
            .collect();
        pack(&mut order, self.packing);

        let mut taken = Vec::new();
        let mut static_tokens = 0;
        for entry in &order {
            let req = &reqs[entry.key];
            if !self.batching.uses_chunks()
                && in_prefill(req)
                && req.prefill_compute_target() > self.limits.max_batched_tokens
            {
                rejected.push((
                    entry.key,
                    format!(
                        "prefill of {} tokens exceeds max_batched_tokens {} under {} batching",
                        req.prefill_compute_target(),
                        self.limits.max_batched_tokens,
                        self.batching.label()
                    ),
                ));
                taken.push(entry.key);
                continue;
            }
            if self.running.len() >= self.limits.max_batch_size {
                break;
            }
            if is_static && in_prefill(req) {
                let t = req.remaining_prefill();
                if static_tokens + t > self.limits.max_batched_tokens {
                    break;
                }
                static_tokens += t;
            }
            let projected = self.projected_kv(model, req);
            match admit(self.kv_used, self.kv_capacity, projected) {
                Admission::Admitted => {
                    self.kv_used += projected;
                    self.running.push(Running {
                        slot: entry.key,
                        reserved: projected,
                        active: true,
                    });
                    taken.push(entry.key);
                }
                Admission::Rejected(msg) => {
                    rejected.push((entry.key, msg));
                    taken.push(entry.key);
                }
                Admission::Deferred => break,
            }
        }
        self.waiting.retain(|w| !taken.contains(&w.slot));
        rejected
    }

    fn form(&self, reqs: &[Request]) -> StepBatch {
        let items: Vec<LlmItem> = self
            .running
            .iter()
            .filter(|r| r.active)
            .map(|r| {
                let req = &reqs[r.slot];
                let kind = req.current_kind();
                LlmItem {
                    key: r.slot,
                    remaining_prefill: if kind == Some(StageKind::Prefill) {
                        req.remaining_prefill()
                    } else {
                        0
                    },
                    generating: kind.is_some_and(StageKind::is_generation),
                }
            })
            .collect();
        match self.batching {
            BatchingStrategy::Static => form_batch_static(&items, &self.limits),
            BatchingStrategy::Continuous | BatchingStrategy::Disaggregated { .. } => {
                form_batch_continuous(&items, &self.limits)
            }
            BatchingStrategy::Chunked => {
                form_batch_chunked(&items, &self.limits, self.limits.chunk_size.unwrap_or(u64::MAX))
            }
            BatchingStrategy::Mixed => {
                form_batch_mixed(&items, &self.limits, self.limits.chunk_size.unwrap_or(u64::MAX))
            }
        }
    }

    pub fn start_step(
        &mut self,
        reqs: &[Request],
        cluster: &Cluster,
        model: &ModelSpec,
    ) -> Result<(Option<StepPlan>, Vec<(usize, String)>)> {
        let rejected = self.admit_waiting(model, reqs);
        let batch = self.form(reqs);
        if batch.is_empty() {
            return Ok((None, rejected));
        }
        debug_assert!(batch.fits(&self.limits));
        let mut profile = BatchProfile::default();
        for &(slot, n) in &batch.prefill_items {
            let req = &reqs[slot];
            profile.prefill_tokens.push(n);
            profile
                .prefill_contexts
                .push(req.state.reused_prefix_tokens + req.state.tokens_prefilled + n);
        }
        for &slot in &batch.decode_items {
            profile.decode_contexts.push(reqs[slot].context_tokens());
        }
        let duration = llm_step_runtime(cluster, model, &profile)?;
        let label = match profile.phase() {
            crate::hardware::StepPhase::Prefill => "prefill",
            crate::hardware::StepPhase::Decode => "decode",
            crate::hardware::StepPhase::Mixed => "mixed",
        };
        let plan = StepPlan {
            duration,
            label: label.to_string(),
            items: batch
                .prefill_items
                .iter()
                .map(|&(s, _)| s)
                .chain(batch.decode_items.iter().copied())
                .collect(),
            prefill_tokens: batch.prefill_items.iter().map(|&(_, n)| n).sum(),
            decode_tokens: batch.decode_items.len() as u64,
        };
        self.in_flight = Some(batch);
        Ok((Some(plan), rejected))
    }

    pub fn complete_step(&mut self, reqs: &mut [Request], model: &ModelSpec) -> Result<Completion> {
        let batch = self
            .in_flight
            .take()
            .ok_or_else(|| SimError::Scheduling("completing a step that was never started".into()))?;
        let mut done = Completion::default();
        for &(slot, n) in &batch.prefill_items {
            let req = &mut reqs[slot];
            req.state.tokens_prefilled += n;
            req.state.kv_bytes_resident = kv_bytes(model, req.state.reused_prefix_tokens + req.state.tokens_prefilled);
            done.prefill_chunks.push((slot, n));
            if req.remaining_prefill() == 0 {
                done.finished.push(slot);
            }
        }
        for &slot in &batch.decode_items {
            let req = &mut reqs[slot];
            req.state.tokens_decoded += 1;
            req.state.kv_bytes_resident = kv_bytes(model, req.context_tokens());
            done.decode_tokens.push(slot);
            if req.state.tokens_decoded >= req.generation_target_through(req.state.current_stage) {
                done.finished.push(slot);
            }
        }
        for r in self.running.iter_mut() {
            if done.finished.contains(&r.slot) {
                r.active = false;
            }
        }
        Ok(done)
    }
}
