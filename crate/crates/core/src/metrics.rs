//! Run statistics: per-request timings, latency summaries, goodput and cost
//! figures, plus CSV and Chrome-trace exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clients::Client;
use crate::error::{Result, SimError};
use crate::workload::{Request, StageKind};

/// Nearest-rank percentile: the sorted sample at 1-based rank `ceil(p * n)`.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(SimError::Metrics("percentile of an empty sample".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(SimError::Metrics(format!("percentile rank {p} outside (0, 1]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // The small offset keeps products such as 0.9 * 10 from rounding up.
    let rank = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Option<LatencyStats> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(LatencyStats {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: percentile_sorted(&sorted, 0.5),
            p90: percentile_sorted(&sorted, 0.9),
            p99: percentile_sorted(&sorted, 0.99),
            max: sorted[sorted.len() - 1],
        })
    }
}

/// Latency objectives. Thresholds are in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSpec {
    pub ttft_p50: f64,
    pub ttft_p90: f64,
    #[serde(default)]
    pub tbt_p99: Option<f64>,
}

impl SloSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ttft_p50 > 0.0 && self.ttft_p90 > 0.0) {
            return Err(SimError::config("slo", "thresholds must be > 0"));
        }
        if self.ttft_p50 > self.ttft_p90 {
            return Err(SimError::config("slo.ttft_p50", "must not exceed ttft_p90"));
        }
        if let Some(t) = self.tbt_p99 {
            if !(t > 0.0) {
                return Err(SimError::config("slo.tbt_p99", "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoodputMode {
    /// All serviced requests count iff the population percentiles meet the
    /// objectives.
    #[default]
    Population,
    /// Requests count individually when their own TTFT is within the P90
    /// threshold (and their own TBT P99 within its threshold, if set).
    PerRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default)]
    pub slo: Option<SloSpec>,
    #[serde(default)]
    pub goodput_mode: GoodputMode,
    /// Number of buckets in per-client time series.
    #[serde(default = "default_buckets")]
    pub series_buckets: usize,
}

fn default_buckets() -> usize {
    20
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            slo: None,
            goodput_mode: GoodputMode::Population,
            series_buckets: default_buckets(),
        }
    }
}

/// Per-request inputs to [`goodput`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    pub ttft: Option<f64>,
    pub tbt: Vec<f64>,
}

/// Requests per second meeting `slo` over `horizon` seconds.
pub fn goodput(samples: &[LatencySample], slo: &SloSpec, mode: GoodputMode, horizon: f64) -> f64 {
    if !(horizon > 0.0) || samples.is_empty() {
        return 0.0;
    }
    let count = match mode {
        GoodputMode::Population => {
            let ttfts: Vec<f64> = samples.iter().filter_map(|s| s.ttft).collect();
            let tbts: Vec<f64> = samples.iter().flat_map(|s| s.tbt.iter().copied()).collect();
            let ttft_ok = ttfts.is_empty()
                || (percentile(&ttfts, 0.5).unwrap() <= slo.ttft_p50
                    && percentile(&ttfts, 0.9).unwrap() <= slo.ttft_p90);
            let tbt_ok = match slo.tbt_p99 {
                Some(limit) if !tbts.is_empty() => percentile(&tbts, 0.99).unwrap() <= limit,
                _ => true,
            };
            if ttft_ok && tbt_ok {
                samples.len()
            } else {
                0
            }
        }
        GoodputMode::PerRequest => samples
            .iter()
            .filter(|s| {
                let ttft_ok = s.ttft.is_none_or(|t| t <= slo.ttft_p90);
                let tbt_ok = match slo.tbt_p99 {
                    Some(limit) if !s.tbt.is_empty() => percentile(&s.tbt, 0.99).unwrap() <= limit,
                    _ => true,
                };
                ttft_ok && tbt_ok
            })
            .count(),
    };
    count as f64 / horizon
}

/// Tokens per dollar given each client's device count and hourly device
/// price.
pub fn tokens_per_dollar(tokens: u64, clients: &[(u64, f64)], makespan: f64) -> Result<f64> {
    if !(makespan > 0.0) {
        return Err(SimError::Metrics("tokens per dollar needs a positive makespan".into()));
    }
    let cost: f64 = clients
        .iter()
        .map(|&(devices, hourly)| devices as f64 * hourly * makespan / 3600.0)
        .sum();
    if !(cost > 0.0) {
        return Err(SimError::Metrics("tokens per dollar is undefined at zero cost".into()));
    }
    Ok(tokens as f64 / cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKindLabel {
    StagePush,
    ClientStep,
    ClientTransfer,
}

/// One processed coordinator event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time_s: f64,
    pub kind: EventKindLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub client: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
    pub items: usize,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    /// Requests waiting at the client when the step started.
    pub queue_len: usize,
    /// Request ids in the step.
    pub requests: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub request_id: u64,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    /// When the transfer was requested.
    pub issued_s: f64,
    /// When it got the link.
    pub start_s: f64,
    /// When the next stage could start.
    pub ready_s: f64,
}

/// Everything the engine records while running.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    pub decode_tokens: Vec<Vec<(f64, f64)>>,
    pub prefill_chunks: Vec<Vec<(f64, f64, u64)>>,
    pub rejected: Vec<Option<String>>,
    pub steps: Vec<StepRecord>,
    pub transfers: Vec<TransferRecord>,
    pub events: Vec<EventRecord>,
}

impl Ledger {
    pub fn new(n_requests: usize) -> Self {
        Ledger {
            decode_tokens: vec![Vec::new(); n_requests],
            prefill_chunks: vec![Vec::new(); n_requests],
            rejected: vec![None; n_requests],
            ..Ledger::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub kind: StageKind,
    pub client: Option<usize>,
    pub assigned_s: Option<f64>,
    pub started_s: Option<f64>,
    pub ended_s: Option<f64>,
    /// Gap between the previous stage's end (or arrival) and assignment.
    pub transfer_s: Option<f64>,
    pub queueing_s: Option<f64>,
    pub service_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Serviced,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub arrival_s: f64,
    pub model_id: String,
    pub status: RequestStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejection: Option<String>,
    pub stages: Vec<StageMetrics>,
    pub ttft_s: Option<f64>,
    pub e2e_s: Option<f64>,
    pub tbt_s: Vec<f64>,
    pub generated_tokens: u64,
    /// (start, end) of every generated token.
    pub token_times: Vec<(f64, f64)>,
    /// (start, end, tokens) of every prefill chunk.
    pub prefill_chunks: Vec<(f64, f64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t_s: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub id: usize,
    pub name: String,
    pub steps: usize,
    pub busy_s: f64,
    pub utilization: f64,
    pub stages_completed: usize,
    pub tokens_generated: u64,
    pub devices: u64,
    pub cost_usd: f64,
    /// Mean queue length observed at step starts, per bucket.
    pub queue_length: Vec<SeriesPoint>,
    /// Stages completed per second, per bucket.
    pub service_rate: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub count: usize,
    pub mean_transfer_s: f64,
    pub mean_queueing_s: f64,
    pub mean_service_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunicationTotals {
    pub transfers: usize,
    pub bytes: u64,
    pub mean_transfer_s: f64,
    pub link_queueing_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub serviced: usize,
    pub rejected: usize,
    pub makespan_s: f64,
    pub ttft: Option<LatencyStats>,
    pub tbt: Option<LatencyStats>,
    pub e2e: Option<LatencyStats>,
    pub stages: BTreeMap<StageKind, StageBreakdown>,
    pub communication: CommunicationTotals,
    pub tokens_generated: u64,
    pub throughput_tokens_per_s: f64,
    pub cost_usd: f64,
    pub tokens_per_dollar: Option<f64>,
    pub slo: Option<SloSpec>,
    pub goodput_mode: GoodputMode,
    pub goodput_rps: Option<f64>,
    pub slo_met: Option<bool>,
    /// Device count × TDP × busy fraction, averaged over the makespan.
    /// Coarse estimate.
    pub approx_power_w: f64,
    pub events_processed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub summary: Summary,
    pub requests: Vec<RequestMetrics>,
    pub clients: Vec<ClientMetrics>,
    pub steps: Vec<StepRecord>,
    pub transfers: Vec<TransferRecord>,
    pub events: Vec<EventRecord>,
    /// SHA-256 over the event log, one JSON record per line.
    pub event_digest: String,
}

/// Serialized form of the report written to `report.json`.
#[derive(Debug, Serialize)]
struct ReportDocument<'a> {
    summary: &'a Summary,
    clients: &'a [ClientMetrics],
    event_digest: &'a str,
}

fn request_metrics(req: &Request, ledger: &Ledger, slot: usize) -> RequestMetrics {
    let mut prev_end = req.arrival_time;
    let stages = req
        .pipeline
        .iter()
        .zip(&req.state.stage_times)
        .map(|(spec, t)| {
            let m = StageMetrics {
                kind: spec.kind(),
                client: t.client,
                assigned_s: t.assigned,
                started_s: t.started,
                ended_s: t.ended,
                transfer_s: t.assigned.map(|a| a - prev_end),
                queueing_s: t.assigned.zip(t.started).map(|(a, s)| s - a),
                service_s: t.started.zip(t.ended).map(|(s, e)| e - s),
            };
            if let Some(e) = t.ended {
                prev_end = e;
            }
            m
        })
        .collect::<Vec<_>>();
    let tokens = &ledger.decode_tokens[slot];
    let rejection = ledger.rejected[slot].clone();
    let serviced = rejection.is_none() && req.is_complete();
    RequestMetrics {
        id: req.id,
        arrival_s: req.arrival_time,
        model_id: req.model_id.clone(),
        status: if serviced {
            RequestStatus::Serviced
        } else {
            RequestStatus::Rejected
        },
        rejection,
        ttft_s: tokens.first().map(|&(_, e)| e - req.arrival_time),
        e2e_s: if serviced {
            stages.last().and_then(|s| s.ended_s).map(|e| e - req.arrival_time)
        } else {
            None
        },
        tbt_s: tokens.windows(2).map(|w| w[1].1 - w[0].1).collect(),
        generated_tokens: tokens.len() as u64,
        token_times: tokens.clone(),
        prefill_chunks: ledger.prefill_chunks[slot].clone(),
        stages,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Assembles the report from the final request states and the ledger.
pub fn build_report(
    reqs: &[Request],
    ledger: Ledger,
    clients: &[Client],
    cfg: &MetricsConfig,
) -> Result<SimulationReport> {
    let requests: Vec<RequestMetrics> = reqs
        .iter()
        .enumerate()
        .map(|(slot, r)| request_metrics(r, &ledger, slot))
        .collect();
    let serviced: Vec<&RequestMetrics> = requests
        .iter()
        .filter(|r| r.status == RequestStatus::Serviced)
        .collect();

    let first_arrival = reqs.iter().map(|r| r.arrival_time).fold(f64::INFINITY, f64::min);
    let last_end = serviced
        .iter()
        .filter_map(|r| r.e2e_s.map(|e| e + r.arrival_s))
        .fold(f64::NEG_INFINITY, f64::max);
    let makespan = if serviced.is_empty() {
        0.0
    } else {
        (last_end - first_arrival).max(0.0)
    };

    let ttfts: Vec<f64> = serviced.iter().filter_map(|r| r.ttft_s).collect();
    let tbts: Vec<f64> = serviced.iter().flat_map(|r| r.tbt_s.iter().copied()).collect();
    let e2es: Vec<f64> = serviced.iter().filter_map(|r| r.e2e_s).collect();

    let mut stages: BTreeMap<StageKind, Vec<&StageMetrics>> = BTreeMap::new();
    for r in &serviced {
        for s in &r.stages {
            stages.entry(s.kind).or_default().push(s);
        }
    }
    let stages = stages
        .into_iter()
        .map(|(k, v)| {
            (
                k,
                StageBreakdown {
                    count: v.len(),
                    mean_transfer_s: mean(v.iter().filter_map(|s| s.transfer_s)),
                    mean_queueing_s: mean(v.iter().filter_map(|s| s.queueing_s)),
                    mean_service_s: mean(v.iter().filter_map(|s| s.service_s)),
                },
            )
        })
        .collect();

    let communication = CommunicationTotals {
        transfers: ledger.transfers.len(),
        bytes: ledger.transfers.iter().map(|t| t.bytes).sum(),
        mean_transfer_s: mean(ledger.transfers.iter().map(|t| t.ready_s - t.issued_s)),
        link_queueing_s: ledger.transfers.iter().map(|t| t.start_s - t.issued_s).sum(),
    };

    let tokens_generated: u64 = requests.iter().map(|r| r.generated_tokens).sum();
    let cost_usd: f64 = clients
        .iter()
        .map(|c| c.cluster.hourly_cost() * makespan / 3600.0)
        .sum();
    let device_prices: Vec<(u64, f64)> = clients
        .iter()
        .map(|c| (c.cluster.n_devices(), c.cluster.sku.hourly_cost))
        .collect();
    let tpd = tokens_per_dollar(tokens_generated, &device_prices, makespan).ok();

    let samples: Vec<LatencySample> = serviced
        .iter()
        .map(|r| LatencySample {
            ttft: r.ttft_s,
            tbt: r.tbt_s.clone(),
        })
        .collect();
    let goodput_rps = cfg.slo.map(|slo| goodput(&samples, &slo, cfg.goodput_mode, makespan));
    let slo_met = cfg
        .slo
        .map(|slo| goodput(&samples, &slo, GoodputMode::Population, 1.0) > 0.0 || samples.is_empty());

    let client_metrics = client_metrics(clients, &ledger, &requests, first_arrival, makespan, cfg.series_buckets);
    let approx_power_w = if makespan > 0.0 {
        clients
            .iter()
            .zip(&client_metrics)
            .map(|(c, m)| c.cluster.n_devices() as f64 * c.cluster.sku.tdp_watts * m.busy_s / makespan)
            .sum()
    } else {
        0.0
    };

    let event_digest = digest_events(&ledger.events)?;
    let summary = Summary {
        requests: reqs.len(),
        serviced: serviced.len(),
        rejected: requests.len() - serviced.len(),
        makespan_s: makespan,
        ttft: LatencyStats::from_samples(&ttfts),
        tbt: LatencyStats::from_samples(&tbts),
        e2e: LatencyStats::from_samples(&e2es),
        stages,
        communication,
        tokens_generated,
        throughput_tokens_per_s: if makespan > 0.0 {
            tokens_generated as f64 / makespan
        } else {
            0.0
        },
        cost_usd,
        tokens_per_dollar: tpd,
        slo: cfg.slo,
        goodput_mode: cfg.goodput_mode,
        goodput_rps,
        slo_met,
        approx_power_w,
        events_processed: ledger.events.len(),
    };
    Ok(SimulationReport {
        summary,
        requests,
        clients: client_metrics,
        steps: ledger.steps,
        transfers: ledger.transfers,
        events: ledger.events,
        event_digest,
    })
}

fn client_metrics(
    clients: &[Client],
    ledger: &Ledger,
    requests: &[RequestMetrics],
    t0: f64,
    makespan: f64,
    buckets: usize,
) -> Vec<ClientMetrics> {
    let buckets = buckets.max(1);
    let width = if makespan > 0.0 { makespan / buckets as f64 } else { 1.0 };
    let bucket_of = |t: f64| (((t - t0) / width).floor().max(0.0) as usize).min(buckets - 1);
    let mut out: Vec<ClientMetrics> = clients
        .iter()
        .map(|c| ClientMetrics {
            id: c.id,
            name: c.name.clone(),
            steps: 0,
            busy_s: 0.0,
            utilization: 0.0,
            stages_completed: 0,
            tokens_generated: 0,
            devices: c.cluster.n_devices(),
            cost_usd: c.cluster.hourly_cost() * makespan / 3600.0,
            queue_length: Vec::new(),
            service_rate: Vec::new(),
        })
        .collect();
    let mut queue_sum = vec![vec![(0.0, 0usize); buckets]; clients.len()];
    let mut served = vec![vec![0usize; buckets]; clients.len()];
    for s in &ledger.steps {
        let m = &mut out[s.client];
        m.steps += 1;
        m.busy_s += s.end_s - s.start_s;
        m.tokens_generated += s.decode_tokens;
        let q = &mut queue_sum[s.client][bucket_of(s.start_s)];
        q.0 += s.queue_len as f64;
        q.1 += 1;
    }
    for r in requests {
        for st in &r.stages {
            if let (Some(c), Some(end)) = (st.client, st.ended_s) {
                out[c].stages_completed += 1;
                served[c][bucket_of(end)] += 1;
            }
        }
    }
    for (c, m) in out.iter_mut().enumerate() {
        m.utilization = if makespan > 0.0 { m.busy_s / makespan } else { 0.0 };
        for b in 0..buckets {
            let t = t0 + b as f64 * width;
            let (sum, n) = queue_sum[c][b];
            m.queue_length.push(SeriesPoint {
                t_s: t,
                value: if n == 0 { 0.0 } else { sum / n as f64 },
            });
            m.service_rate.push(SeriesPoint {
                t_s: t,
                value: served[c][b] as f64 / width,
            });
        }
    }
    out
}

/// SHA-256 over the event log serialized one JSON record per line.
pub fn digest_events(events: &[EventRecord]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for e in events {
        let line = serde_json::to_string(e).map_err(|e| SimError::Metrics(e.to_string()))?;
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hasher.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

impl SimulationReport {
    /// The summary document: summary, per-client metrics and event digest,
    /// with stable key order.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ReportDocument {
            summary: &self.summary,
            clients: &self.clients,
            event_digest: &self.event_digest,
        })
        .map_err(|e| SimError::Metrics(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text + "\n").map_err(|e| SimError::io(path, e))
    }

    /// One row per request.
    pub fn write_requests_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| SimError::Metrics(e.to_string());
        w.write_record([
            "id",
            "arrival_s",
            "status",
            "ttft_s",
            "e2e_s",
            "mean_tbt_s",
            "max_tbt_s",
            "generated_tokens",
            "queueing_s",
            "transfer_s",
            "clients",
        ])
        .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.requests {
            let mean_tbt = if r.tbt_s.is_empty() {
                None
            } else {
                Some(r.tbt_s.iter().sum::<f64>() / r.tbt_s.len() as f64)
            };
            let max_tbt = r.tbt_s.iter().copied().reduce(f64::max);
            let clients = r
                .stages
                .iter()
                .map(|s| s.client.map(|c| c.to_string()).unwrap_or_else(|| "-".into()))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                r.id.to_string(),
                r.arrival_s.to_string(),
                match r.status {
                    RequestStatus::Serviced => "serviced".into(),
                    RequestStatus::Rejected => "rejected".into(),
                },
                opt(r.ttft_s),
                opt(r.e2e_s),
                opt(mean_tbt),
                opt(max_tbt),
                r.generated_tokens.to_string(),
                r.stages.iter().filter_map(|s| s.queueing_s).sum::<f64>().to_string(),
                r.stages.iter().filter_map(|s| s.transfer_s).sum::<f64>().to_string(),
                clients,
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| SimError::Metrics(e.to_string()))
    }

    pub fn write_requests_csv_file(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SimError::io(path, e))?;
        self.write_requests_csv(BufWriter::new(file))
    }

    /// Trace Event Format document: one complete event per stage
    /// (`pid` = client, `tid` = request id) and per client step
    /// (`tid` = -1), plus process-name metadata.
    pub fn chrome_trace(&self) -> ChromeTrace {
        let us = |t: f64| (t * 1e6).round() as i64;
        let mut events = Vec::new();
        for c in &self.clients {
            events.push(TraceEvent {
                name: "process_name".into(),
                cat: None,
                ph: "M".into(),
                ts: 0,
                dur: None,
                pid: c.id as i64,
                tid: 0,
                args: Some(serde_json::json!({ "name": format!("client {} ({})", c.id, c.name) })),
            });
        }
        for r in &self.requests {
            for s in &r.stages {
                if let (Some(c), Some(start), Some(end)) = (s.client, s.started_s, s.ended_s) {
                    let ts = us(start);
                    events.push(TraceEvent {
                        name: s.kind.as_str().into(),
                        cat: Some("stage".into()),
                        ph: "X".into(),
                        ts,
                        dur: Some(us(end) - ts),
                        pid: c as i64,
                        tid: r.id as i64,
                        args: Some(serde_json::json!({ "request": r.id })),
                    });
                }
            }
        }
        for s in &self.steps {
            let ts = us(s.start_s);
            events.push(TraceEvent {
                name: s.label.clone(),
                cat: Some("step".into()),
                ph: "X".into(),
                ts,
                dur: Some(us(s.end_s) - ts),
                pid: s.client as i64,
                tid: -1,
                args: Some(serde_json::json!({
                    "items": s.items,
                    "prefill_tokens": s.prefill_tokens,
                    "decode_tokens": s.decode_tokens,
                })),
            });
        }
        ChromeTrace {
            trace_events: events,
            display_time_unit: "ms".into(),
        }
    }

    pub fn write_chrome_trace(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SimError::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &self.chrome_trace()).map_err(|e| SimError::Metrics(e.to_string()))?;
        w.flush().map_err(|e| SimError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cat: Option<String>,
    pub ph: String,
    pub ts: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dur: Option<i64>,
    pub pid: i64,
    pub tid: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub args: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChromeTrace {
    #[serde(rename = "traceEvents")]
    pub trace_events: Vec<TraceEvent>,
    #[serde(rename = "displayTimeUnit")]
    pub display_time_unit: String,
}

/// Human-readable summary.
pub fn render_text(summary: &Summary) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "requests {}  serviced {}  rejected {}  makespan {:.3} s",
        summary.requests, summary.serviced, summary.rejected, summary.makespan_s
    );
    for (name, stats) in [("ttft", &summary.ttft), ("tbt", &summary.tbt), ("e2e", &summary.e2e)] {
        match stats {
            Some(st) => {
                let _ = writeln!(
                    s,
                    "{name:<5} mean {:.4}  p50 {:.4}  p90 {:.4}  p99 {:.4}  max {:.4}",
                    st.mean, st.p50, st.p90, st.p99, st.max
                );
            }
            None => {
                let _ = writeln!(s, "{name:<5} n/a");
            }
        }
    }
    let _ = writeln!(
        s,
        "tokens {}  throughput {:.1} tok/s  cost ${:.4}  tokens/$ {}",
        summary.tokens_generated,
        summary.throughput_tokens_per_s,
        summary.cost_usd,
        summary
            .tokens_per_dollar
            .map(|v| format!("{v:.1}"))
            .unwrap_or_else(|| "n/a".into())
    );
    if let Some(g) = summary.goodput_rps {
        let _ = writeln!(s, "goodput {g:.3} req/s ({:?} mode)", summary.goodput_mode);
    }
    let _ = writeln!(
        s,
        "transfers {}  bytes {}  mean transfer {:.4} s",
        summary.communication.transfers, summary.communication.bytes, summary.communication.mean_transfer_s
    );
    s
}
