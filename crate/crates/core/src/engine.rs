//! The coordinator: a deterministic discrete-event loop over stage pushes,
//! client steps and inter-client transfers.
//!
//! A `ClientStep` event both completes the client's in-flight step (if any)
//! and starts the next one, so a step's effects land at its end time.
//! Events at equal times run in insertion order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::clients::{Client, StepPlan};
use crate::error::{Result, SimError};
use crate::hardware::{kv_bytes, transfer_timing, LinkClass, Topology, TransferGranularity};
use crate::metrics::{
    build_report, EventKindLabel, EventRecord, Ledger, MetricsConfig, SimulationReport, StepRecord, TransferRecord,
};
use crate::routing::{load_metric, ClientView, Router, RouterPolicy};
use crate::workload::{Request, StageKind, StageSpec};

/// Bytes per token of plain text moved between non-LLM stages.
pub const TEXT_BYTES_PER_TOKEN: u64 = 4;

/// Everything needed for one simulation run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub requests: Vec<Request>,
    pub clients: Vec<Client>,
    pub router: RouterPolicy,
    pub topology: Topology,
    pub granularity: TransferGranularity,
    /// Slices per layerwise transfer; defaults to the source model's layer
    /// count.
    pub layerwise_slices: Option<u64>,
    pub metrics: MetricsConfig,
}

impl Simulation {
    /// Single-platform topology with a uniform link between all clients.
    pub fn new(requests: Vec<Request>, clients: Vec<Client>, router: RouterPolicy, link: LinkClass) -> Self {
        let n = clients.len();
        Simulation {
            requests,
            clients,
            router,
            topology: Topology::single_platform(n, link),
            granularity: TransferGranularity::FullCache,
            layerwise_slices: None,
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    StagePush {
        slot: usize,
    },
    ClientStep {
        client: usize,
    },
    ClientTransfer {
        slot: usize,
        src: usize,
        dst: usize,
        bytes: u64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Coordinator {
    clock: f64,
    seq: u64,
    queue: BinaryHeap<Event>,
    reqs: Vec<Request>,
    clients: Vec<Client>,
    router: Router,
    topology: Topology,
    granularity: TransferGranularity,
    layerwise_slices: Option<u64>,
    /// A ClientStep is queued or a step is in flight.
    step_pending: Vec<bool>,
    in_flight: Vec<Option<(f64, StepPlan, usize)>>,
    assigned: Vec<BTreeSet<usize>>,
    link_free: BTreeMap<(usize, usize), f64>,
    /// Capable clients per stage kind, in id order.
    capable: BTreeMap<StageKind, Vec<usize>>,
    accepted: usize,
    serviced: usize,
    ledger: Ledger,
}

/// Runs a simulation to completion.
pub fn run(sim: Simulation) -> Result<SimulationReport> {
    let Simulation {
        requests,
        clients,
        router,
        topology,
        granularity,
        layerwise_slices,
        metrics,
    } = sim;
    validate(&requests, &clients, &router, &topology)?;

    let mut capable: BTreeMap<StageKind, Vec<usize>> = BTreeMap::new();
    for kind in StageKind::ALL {
        capable.insert(
            kind,
            clients.iter().filter(|c| c.can_serve(kind)).map(|c| c.id).collect(),
        );
    }
    let n = requests.len();
    let n_clients = clients.len();
    let mut co = Coordinator {
        clock: 0.0,
        seq: 0,
        queue: BinaryHeap::new(),
        reqs: requests,
        clients,
        router: Router::new(router),
        topology,
        granularity,
        layerwise_slices,
        step_pending: vec![false; n_clients],
        in_flight: vec![None; n_clients],
        assigned: vec![BTreeSet::new(); n_clients],
        link_free: BTreeMap::new(),
        capable,
        accepted: n,
        serviced: 0,
        ledger: Ledger::new(n),
    };
    for slot in 0..n {
        let t = co.reqs[slot].arrival_time;
        co.push(t, EventKind::StagePush { slot });
    }
    co.event_loop()?;
    let Coordinator {
        reqs, clients, ledger, ..
    } = co;
    build_report(&reqs, ledger, &clients, &metrics)
}

fn validate(requests: &[Request], clients: &[Client], router: &RouterPolicy, topology: &Topology) -> Result<()> {
    router.validate()?;
    topology.validate()?;
    for (i, c) in clients.iter().enumerate() {
        if c.id != i {
            return Err(SimError::config(
                format!("clients[{i}].id"),
                format!("client ids must equal their position, found {}", c.id),
            ));
        }
        if !topology.placement.contains_key(&i) {
            return Err(SimError::config(
                "topology.placement",
                format!("client {i} is not placed"),
            ));
        }
        if let Some(crate::clients::BatchingStrategy::Disaggregated { peer, .. }) = c.batching() {
            if *peer >= clients.len() {
                return Err(SimError::config(
                    format!("clients[{i}].batching.peer"),
                    format!("unknown client {peer}"),
                ));
            }
        }
    }
    if let RouterPolicy::HeavyLightSplit { heavy_pool, .. } = router {
        if let Some(bad) = heavy_pool.iter().find(|&&c| c >= clients.len()) {
            return Err(SimError::config("router.heavy_pool", format!("unknown client {bad}")));
        }
    }
    let mut prev = f64::NEG_INFINITY;
    let mut seen = BTreeSet::new();
    for r in requests {
        if !(r.arrival_time.is_finite() && r.arrival_time >= 0.0) || r.arrival_time < prev {
            return Err(SimError::config(
                "requests",
                format!(
                    "request {} arrival {} is negative or out of order",
                    r.id, r.arrival_time
                ),
            ));
        }
        prev = r.arrival_time;
        if !seen.insert(r.id) {
            return Err(SimError::config("requests", format!("duplicate request id {}", r.id)));
        }
        crate::workload::validate_pipeline(&r.pipeline)
            .map_err(|(f, m)| SimError::config(format!("request {} {f}", r.id), m))?;
        for spec in &r.pipeline {
            let kind = spec.kind();
            if !clients.iter().any(|c| c.can_serve(kind) && c.serves_model(&r.model_id)) {
                return Err(SimError::config(
                    "clients",
                    format!(
                        "no client serves {kind} stages for model `{}` (request {})",
                        r.model_id, r.id
                    ),
                ));
            }
        }
    }
    Ok(())
}

impl Coordinator {
    fn push(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time >= self.clock);
        self.queue.push(Event {
            time,
            seq: self.seq,
            kind,
        });
        self.seq += 1;
    }

    fn log(&mut self, kind: EventKindLabel, slot: Option<usize>, client: Option<usize>, bytes: Option<u64>) {
        self.ledger.events.push(EventRecord {
            time_s: self.clock,
            kind,
            request_id: slot.map(|s| self.reqs[s].id),
            client_id: client,
            bytes,
        });
    }

    fn event_loop(&mut self) -> Result<()> {
        while let Some(ev) = self.queue.pop() {
            self.clock = ev.time;
            match ev.kind {
                EventKind::StagePush { slot } => {
                    self.log(EventKindLabel::StagePush, Some(slot), None, None);
                    self.handle_stage_push(slot)?;
                }
                EventKind::ClientStep { client } => {
                    self.log(EventKindLabel::ClientStep, None, Some(client), None);
                    self.handle_client_step(client)?;
                }
                EventKind::ClientTransfer { slot, src, dst, bytes } => {
                    self.log(EventKindLabel::ClientTransfer, Some(slot), Some(dst), Some(bytes));
                    self.handle_client_transfer(slot, src, dst, bytes)?;
                }
            }
        }
        if self.serviced != self.accepted {
            let stuck = self
                .reqs
                .iter()
                .enumerate()
                .filter(|(slot, r)| !r.is_complete() && self.ledger.rejected[*slot].is_none())
                .map(|(_, r)| r.id)
                .collect();
            return Err(SimError::Deadlock { stuck });
        }
        Ok(())
    }

    fn transfer_bytes(&self, slot: usize, from_client: usize, finished: &StageSpec) -> u64 {
        let req = &self.reqs[slot];
        match *finished {
            StageSpec::Prefill { .. } | StageSpec::Reason { .. } | StageSpec::Decode { .. } => self.clients
                [from_client]
                .model
                .as_ref()
                .map(|m| kv_bytes(m, req.context_tokens()))
                .unwrap_or(0),
            StageSpec::KvRetrieval { .. } => req.state.kv_fetched_bytes,
            StageSpec::Rag {
                query_tokens,
                docs_retrieved,
                doc_tokens,
            } => (query_tokens + docs_retrieved * doc_tokens) * TEXT_BYTES_PER_TOKEN,
            StageSpec::Preprocess { length_tokens, .. } | StageSpec::Postprocess { length_tokens, .. } => {
                length_tokens * TEXT_BYTES_PER_TOKEN
            }
        }
    }

    fn route(&mut self, slot: usize, from: Option<(usize, u64)>) -> Result<usize> {
        let req = &self.reqs[slot];
        let kind = req.current_kind().expect("routing a finished request");
        let metric = self.router.policy().metric();
        let mut views = Vec::new();
        for &c in &self.capable[&kind] {
            if !self.clients[c].serves_model(&req.model_id) {
                continue;
            }
            let mut view = ClientView::new(c);
            view.outstanding = self.assigned[c].len();
            if let Some(metric) = metric {
                view.load = self.assigned[c]
                    .iter()
                    .map(|&s| load_metric(&self.reqs[s], metric))
                    .sum();
            }
            if let Some((src, bytes)) = from {
                let link = self.topology.link_params(src, c)?;
                let t = transfer_timing(link, bytes, 0.0, TransferGranularity::FullCache, 1);
                view.transfer_estimate = t.ready;
            }
            views.push(view);
        }
        let choice = self.router.route(req, kind, &views)?;
        if !views.iter().any(|v| v.id == choice) {
            return Err(SimError::Routing(format!(
                "router picked client {choice}, which cannot serve {kind} for request {}",
                req.id
            )));
        }
        Ok(choice)
    }

    fn assign(&mut self, slot: usize, client: usize) {
        self.assigned[client].insert(slot);
        let req = &mut self.reqs[slot];
        let idx = req.state.current_stage;
        req.state.stage_times[idx].client = Some(client);
    }

    fn handle_stage_push(&mut self, slot: usize) -> Result<()> {
        let target = match self.reqs[slot].state.pinned_client.take() {
            Some(c) => c,
            None => {
                let c = self.route(slot, None)?;
                self.assign(slot, c);
                c
            }
        };
        self.deliver(slot, target);
        if !self.step_pending[target] {
            self.step_pending[target] = true;
            self.push(self.clock, EventKind::ClientStep { client: target });
        }
        Ok(())
    }

    fn deliver(&mut self, slot: usize, client: usize) {
        let req = &mut self.reqs[slot];
        let idx = req.state.current_stage;
        req.state.stage_times[idx].assigned = Some(self.clock);
        self.clients[client].enqueue(slot, self.clock);
    }

    fn handle_client_step(&mut self, c: usize) -> Result<()> {
        if let Some((start, _plan, step_idx)) = self.in_flight[c].take() {
            let done = self.clients[c].complete_step(&mut self.reqs)?;
            let end = self.clock;
            for &slot in &done.decode_tokens {
                self.ledger.decode_tokens[slot].push((start, end));
            }
            for &(slot, n) in &done.prefill_chunks {
                self.ledger.prefill_chunks[slot].push((start, end, n));
            }
            self.ledger.steps[step_idx].end_s = end;
            for slot in done.finished {
                self.finish_stage(slot, c)?;
            }
        }

        if !self.clients[c].has_work() {
            self.step_pending[c] = false;
            return Ok(());
        }
        let (plan, rejected) = self.clients[c].start_step(self.clock, &self.reqs)?;
        for (slot, reason) in rejected {
            self.assigned[c].remove(&slot);
            self.ledger.rejected[slot] = Some(reason);
            self.accepted -= 1;
        }
        let Some(plan) = plan else {
            self.step_pending[c] = false;
            return Ok(());
        };
        if !(plan.duration.is_finite() && plan.duration >= 0.0) {
            return Err(SimError::Hardware(format!(
                "client {c} step runtime {} is not a finite non-negative time",
                plan.duration
            )));
        }
        for &slot in &plan.items {
            let req = &mut self.reqs[slot];
            let idx = req.state.current_stage;
            req.state.stage_times[idx].started.get_or_insert(self.clock);
        }
        self.ledger.steps.push(StepRecord {
            client: c,
            start_s: self.clock,
            end_s: self.clock,
            label: plan.label.clone(),
            items: plan.items.len(),
            prefill_tokens: plan.prefill_tokens,
            decode_tokens: plan.decode_tokens,
            queue_len: self.clients[c].queue_len(),
            requests: plan.items.iter().map(|&s| self.reqs[s].id).collect(),
        });
        let end = self.clock + plan.duration;
        let step_idx = self.ledger.steps.len() - 1;
        self.in_flight[c] = Some((self.clock, plan, step_idx));
        self.push(end, EventKind::ClientStep { client: c });
        Ok(())
    }

    fn finish_stage(&mut self, slot: usize, c: usize) -> Result<()> {
        let finished_spec = {
            let req = &mut self.reqs[slot];
            let idx = req.state.current_stage;
            req.state.stage_times[idx].ended = Some(self.clock);
            req.state.current_stage += 1;
            req.pipeline[idx].clone()
        };
        self.assigned[c].remove(&slot);
        if self.reqs[slot].is_complete() {
            self.clients[c].release(slot);
            self.serviced += 1;
            return Ok(());
        }
        let prev_kind = finished_spec.kind();
        let next_kind = self.reqs[slot].current_kind().expect("not complete");
        let bytes = self.transfer_bytes(slot, c, &finished_spec);

        let mut target = None;
        if prev_kind.is_llm() && next_kind.is_llm() {
            if self.clients[c].can_serve(next_kind) {
                target = Some(c);
            } else if let Some(peer) = self.clients[c].decode_peer() {
                if self.clients[peer].can_serve(next_kind) {
                    target = Some(peer);
                }
            }
        }
        let target = match target {
            Some(t) => t,
            None => self.route(slot, Some((c, bytes)))?,
        };
        self.assign(slot, target);

        if target == c {
            // Zero-cost hand-off to the same client, before its next step forms.
            self.log(EventKindLabel::StagePush, Some(slot), Some(c), None);
            self.deliver(slot, c);
            return Ok(());
        }
        self.clients[c].release(slot);
        self.reqs[slot].state.pinned_client = Some(target);
        let link = self.topology.link_params(c, target)?;
        if bytes == 0 || link.bandwidth.is_infinite() {
            self.push(self.clock, EventKind::StagePush { slot });
        } else {
            self.push(
                self.clock,
                EventKind::ClientTransfer {
                    slot,
                    src: c,
                    dst: target,
                    bytes,
                },
            );
        }
        Ok(())
    }

    fn handle_client_transfer(&mut self, slot: usize, src: usize, dst: usize, bytes: u64) -> Result<()> {
        let link = self.topology.link_params(src, dst)?;
        let free = self.link_free.get(&(src, dst)).copied().unwrap_or(0.0);
        let start = self.clock.max(free);
        let slices = self
            .layerwise_slices
            .or_else(|| self.clients[src].model.as_ref().map(|m| m.n_layers))
            .unwrap_or(1);
        let timing = transfer_timing(link, bytes, start, self.granularity, slices);
        self.link_free.insert((src, dst), timing.link_free);
        self.ledger.transfers.push(TransferRecord {
            request_id: self.reqs[slot].id,
            src,
            dst,
            bytes,
            issued_s: self.clock,
            start_s: start,
            ready_s: timing.ready,
        });
        self.push(timing.ready, EventKind::StagePush { slot });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{BatchingStrategy, LlmLimits, Packing, SchedulerKind};
    use crate::hardware::{Cluster, HardwareSku, ModelSpec};

    fn llm_client(id: usize) -> Client {
        Client::new(
            id,
            format!("llm{id}"),
            [StageKind::Prefill, StageKind::Decode],
            ModelSpec::preset("llama-3.1-8b"),
            Cluster::analytical(HardwareSku::preset("a100").unwrap(), 1, 1, 1),
            SchedulerKind::Llm {
                batching: BatchingStrategy::Continuous,
                packing: Packing::Fcfs,
                limits: LlmLimits {
                    max_batched_tokens: 8192,
                    max_batch_size: 32,
                    chunk_size: None,
                },
                kv_capacity: None,
            },
            0,
        )
        .unwrap()
    }

    fn req(id: u64, t: f64, input: u64, output: u64) -> Request {
        Request::new(
            id,
            t,
            vec![
                StageSpec::Prefill { input_tokens: input },
                StageSpec::Decode { output_tokens: output },
            ],
        )
    }

    fn link() -> LinkClass {
        LinkClass {
            bandwidth: 100e9,
            latency: 1e-5,
        }
    }

    #[test]
    fn single_request() {
        let sim = Simulation::new(
            vec![req(0, 0.0, 10, 5)],
            vec![llm_client(0)],
            RouterPolicy::RoundRobin,
            link(),
        );
        let rep = run(sim).unwrap();
        assert_eq!(rep.summary.serviced, 1);
        assert!(rep.requests[0].ttft_s.unwrap() > 0.0);
        assert_eq!(rep.requests[0].generated_tokens, 5);
    }

    #[test]
    fn empty_run() {
        let sim = Simulation::new(Vec::new(), vec![llm_client(0)], RouterPolicy::RoundRobin, link());
        let rep = run(sim).unwrap();
        assert_eq!(rep.summary.serviced, 0);
        assert!(rep.events.is_empty());
    }

    #[test]
    fn round_robin_assignment_sequence() {
        let reqs = (0..3).map(|i| req(i, i as f64 * 10.0, 10, 2)).collect();
        let sim = Simulation::new(
            reqs,
            vec![llm_client(0), llm_client(1)],
            RouterPolicy::RoundRobin,
            link(),
        );
        let rep = run(sim).unwrap();
        let clients: Vec<usize> = rep.requests.iter().map(|r| r.stages[0].client.unwrap()).collect();
        assert_eq!(clients, vec![0, 1, 0]);
    }

    #[test]
    fn missing_capability_is_config_error() {
        let r = Request::new(
            0,
            0.0,
            vec![
                StageSpec::Rag {
                    query_tokens: 10,
                    docs_retrieved: 1,
                    doc_tokens: 10,
                },
                StageSpec::Prefill { input_tokens: 10 },
                StageSpec::Decode { output_tokens: 1 },
            ],
        );
        let sim = Simulation::new(vec![r], vec![llm_client(0)], RouterPolicy::RoundRobin, link());
        assert!(run(sim).unwrap_err().is_config());
    }

    #[test]
    fn event_order_is_time_then_seq() {
        let mut heap = BinaryHeap::new();
        let ev = |time, seq| Event {
            time,
            seq,
            kind: EventKind::ClientStep { client: 0 },
        };
        heap.push(ev(1.0, 0));
        heap.push(ev(0.5, 2));
        heap.push(ev(0.5, 1));
        let order: Vec<(f64, u64)> = std::iter::from_fn(|| heap.pop().map(|e| (e.time, e.seq))).collect();
        assert_eq!(order, vec![(0.5, 1), (0.5, 2), (1.0, 0)]);
    }
}
