//! Requests, stage pipelines, and trace ingestion/generation.
//!
//! A [`Request`] is an ordered pipeline of [`StageSpec`]s. Each stage variant
//! carries its own parameters, so a stage's kind and its parameters can never
//! disagree. Traces are line-delimited JSON records; synthetic traces are
//! produced by [`generate_trace`] from a [`TraceConfig`].

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub type RequestId = u64;

pub const DEFAULT_MODEL_ID: &str = "default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Preprocess,
    Rag,
    KvRetrieval,
    Prefill,
    Reason,
    Decode,
    Postprocess,
}

impl StageKind {
    pub const ALL: [StageKind; 7] = [
        StageKind::Preprocess,
        StageKind::Rag,
        StageKind::KvRetrieval,
        StageKind::Prefill,
        StageKind::Reason,
        StageKind::Decode,
        StageKind::Postprocess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Preprocess => "preprocess",
            StageKind::Rag => "rag",
            StageKind::KvRetrieval => "kv_retrieval",
            StageKind::Prefill => "prefill",
            StageKind::Reason => "reason",
            StageKind::Decode => "decode",
            StageKind::Postprocess => "postprocess",
        }
    }

    /// Stages executed by an LLM scheduler.
    pub fn is_llm(self) -> bool {
        matches!(self, StageKind::Prefill | StageKind::Reason | StageKind::Decode)
    }

    /// Token-generating stages.
    pub fn is_generation(self) -> bool {
        matches!(self, StageKind::Reason | StageKind::Decode)
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Latency bucket of a pre/post-processing stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    LinearText,
    FixedLatency,
    SmallModelPass,
}

/// One stage of a request pipeline together with its parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageSpec {
    Preprocess {
        op_class: OpClass,
        length_tokens: u64,
    },
    Rag {
        query_tokens: u64,
        docs_retrieved: u64,
        doc_tokens: u64,
    },
    KvRetrieval {
        cached_tokens: u64,
        /// Identity of the cached prefix, used by the capacity-based cache
        /// mode. Requests without one never share a prefix.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prefix_id: Option<u64>,
    },
    Prefill {
        input_tokens: u64,
    },
    Reason {
        steps: u64,
        tokens_per_step: u64,
        width: u64,
    },
    Decode {
        output_tokens: u64,
    },
    Postprocess {
        op_class: OpClass,
        length_tokens: u64,
    },
}

impl StageSpec {
    pub fn kind(&self) -> StageKind {
        match self {
            StageSpec::Preprocess { .. } => StageKind::Preprocess,
            StageSpec::Rag { .. } => StageKind::Rag,
            StageSpec::KvRetrieval { .. } => StageKind::KvRetrieval,
            StageSpec::Prefill { .. } => StageKind::Prefill,
            StageSpec::Reason { .. } => StageKind::Reason,
            StageSpec::Decode { .. } => StageKind::Decode,
            StageSpec::Postprocess { .. } => StageKind::Postprocess,
        }
    }

    /// Tokens generated by this stage (zero for non-generation stages).
    pub fn generated_tokens(&self) -> u64 {
        match *self {
            StageSpec::Reason {
                steps,
                tokens_per_step,
                width,
            } => steps * tokens_per_step * width,
            StageSpec::Decode { output_tokens } => output_tokens,
            _ => 0,
        }
    }

    /// Checks kind-specific positivity. Returns the offending field.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = |field: &'static str, v: u64| {
            if v == 0 {
                Err((field, format!("{field} must be > 0")))
            } else {
                Ok(())
            }
        };
        match *self {
            StageSpec::Prefill { input_tokens } => positive("input_tokens", input_tokens),
            StageSpec::Decode { output_tokens } => positive("output_tokens", output_tokens),
            StageSpec::Reason {
                steps,
                tokens_per_step,
                width,
            } => {
                positive("steps", steps)?;
                positive("tokens_per_step", tokens_per_step)?;
                positive("width", width)
            }
            _ => Ok(()),
        }
    }
}

/// Validates the structural rules of a pipeline.
pub fn validate_pipeline(pipeline: &[StageSpec]) -> std::result::Result<(), (String, String)> {
    if pipeline.is_empty() {
        return Err(("stages".into(), "pipeline must contain at least one stage".into()));
    }
    for (i, stage) in pipeline.iter().enumerate() {
        stage
            .validate()
            .map_err(|(field, msg)| (format!("stages[{i}].{field}"), msg))?;
    }
    for kind in [StageKind::Prefill, StageKind::Decode] {
        if pipeline.iter().filter(|s| s.kind() == kind).count() > 1 {
            return Err(("stages".into(), format!("at most one {kind} stage per pipeline")));
        }
    }
    let first_prefill = pipeline.iter().position(|s| s.kind() == StageKind::Prefill);
    for (i, stage) in pipeline.iter().enumerate() {
        match stage.kind() {
            StageKind::Decode => {
                if !matches!(first_prefill, Some(p) if p < i) {
                    return Err((
                        format!("stages[{i}]"),
                        "decode requires an earlier prefill stage".into(),
                    ));
                }
            }
            StageKind::Reason => {
                let prefill_before = matches!(first_prefill, Some(p) if p < i);
                let decode_after = pipeline[i + 1..].iter().any(|s| s.kind() == StageKind::Decode);
                if !prefill_before || !decode_after {
                    return Err((
                        format!("stages[{i}]"),
                        "reason must sit between prefill and decode".into(),
                    ));
                }
            }
            StageKind::KvRetrieval => {
                let StageSpec::KvRetrieval { cached_tokens, .. } = *stage else {
                    unreachable!()
                };
                let next_prefill = pipeline[i + 1..].iter().find_map(|s| match *s {
                    StageSpec::Prefill { input_tokens } => Some(input_tokens),
                    _ => None,
                });
                match next_prefill {
                    None => {
                        return Err((
                            format!("stages[{i}]"),
                            "kv_retrieval must be followed by a prefill stage".into(),
                        ))
                    }
                    Some(input) if cached_tokens > input => {
                        return Err((
                            format!("stages[{i}].cached_tokens"),
                            format!("cached_tokens {cached_tokens} exceeds prefill input_tokens {input}"),
                        ))
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Timestamps of one stage of one request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub client: Option<usize>,
    pub assigned: Option<f64>,
    pub started: Option<f64>,
    pub ended: Option<f64>,
}

/// Mutable progress of a request through its pipeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestState {
    /// Index of the stage being serviced; equals the pipeline length once done.
    pub current_stage: usize,
    /// Prefill tokens actually computed (excludes reused prefix tokens).
    pub tokens_prefilled: u64,
    /// Tokens generated across reason and decode stages.
    pub tokens_decoded: u64,
    /// Bytes of KV cache currently materialized for this request.
    pub kv_bytes_resident: u64,
    /// Document tokens appended to the prompt by completed RAG stages.
    pub rag_tokens: u64,
    /// Prefix tokens whose KV was supplied by a retrieval stage.
    pub reused_prefix_tokens: u64,
    /// KV bytes a retrieval stage fetched that must reach the consumer.
    /// Zero when the prefix was recomputed instead.
    pub kv_fetched_bytes: u64,
    /// Sub-step progress within a multi-step stage (RAG).
    pub sub_step: u8,
    /// Client pinned for the upcoming stage, bypassing the router.
    pub pinned_client: Option<usize>,
    pub stage_times: Vec<StageTimes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival_time: f64,
    pub pipeline: Vec<StageSpec>,
    pub model_id: String,
    pub state: RequestState,
}

impl Request {
    pub fn new(id: RequestId, arrival_time: f64, pipeline: Vec<StageSpec>) -> Self {
        let stage_times = vec![StageTimes::default(); pipeline.len()];
        Request {
            id,
            arrival_time,
            pipeline,
            model_id: DEFAULT_MODEL_ID.to_string(),
            state: RequestState {
                stage_times,
                ..RequestState::default()
            },
        }
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn is_complete(&self) -> bool {
        self.state.current_stage >= self.pipeline.len()
    }

    pub fn current_stage(&self) -> Option<&StageSpec> {
        self.pipeline.get(self.state.current_stage)
    }

    pub fn current_kind(&self) -> Option<StageKind> {
        self.current_stage().map(StageSpec::kind)
    }

    pub fn next_stage(&self) -> Option<&StageSpec> {
        self.pipeline.get(self.state.current_stage + 1)
    }

    /// Declared prompt length of the first prefill stage (zero if none).
    pub fn prefill_input_tokens(&self) -> u64 {
        self.pipeline
            .iter()
            .find_map(|s| match *s {
                StageSpec::Prefill { input_tokens } => Some(input_tokens),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Prompt length including documents appended by RAG stages that precede
    /// the prefill. Computed from declared parameters, so it is defined
    /// before the RAG stage runs.
    pub fn input_context_tokens(&self) -> u64 {
        let Some(prefill_idx) = self.pipeline.iter().position(|s| s.kind() == StageKind::Prefill) else {
            return 0;
        };
        let rag: u64 = self.pipeline[..prefill_idx]
            .iter()
            .map(|s| match *s {
                StageSpec::Rag {
                    docs_retrieved,
                    doc_tokens,
                    ..
                } => docs_retrieved * doc_tokens,
                _ => 0,
            })
            .sum();
        self.prefill_input_tokens() + rag
    }

    /// Prompt length as currently known: declared input plus documents
    /// already appended.
    pub fn effective_input_tokens(&self) -> u64 {
        self.prefill_input_tokens() + self.state.rag_tokens
    }

    /// Prefill tokens that still have to be computed in total. A full
    /// prefix hit still recomputes the final prompt token.
    pub fn prefill_compute_target(&self) -> u64 {
        self.effective_input_tokens()
            .saturating_sub(self.state.reused_prefix_tokens)
            .max(1)
    }

    pub fn remaining_prefill(&self) -> u64 {
        self.prefill_compute_target()
            .saturating_sub(self.state.tokens_prefilled)
    }

    /// Tokens in the KV context: prompt plus everything generated so far.
    pub fn context_tokens(&self) -> u64 {
        self.effective_input_tokens() + self.state.tokens_decoded
    }

    /// Generated-token count at which the stage at `stage_idx` completes.
    pub fn generation_target_through(&self, stage_idx: usize) -> u64 {
        self.pipeline[..=stage_idx]
            .iter()
            .map(StageSpec::generated_tokens)
            .sum()
    }

    /// Total generation budget, or zero when the pipeline has no decode.
    pub fn decode_budget_or_zero(&self) -> u64 {
        total_decode_budget(self).unwrap_or(0)
    }
}

/// Decode output tokens plus the tokens of every reason stage.
pub fn total_decode_budget(req: &Request) -> Result<u64> {
    if !req.pipeline.iter().any(|s| s.kind() == StageKind::Decode) {
        return Err(SimError::Scheduling(format!(
            "request {} has no decode stage; decode budget undefined",
            req.id
        )));
    }
    Ok(req.pipeline.iter().map(StageSpec::generated_tokens).sum())
}

/// Token-size model for synthetic traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeModel {
    /// Reuse the stage lists of an existing trace file, cycling through its
    /// records in order.
    TraceFile { path: PathBuf },
    Normal {
        mean_in: f64,
        var_in: f64,
        mean_out: f64,
        var_out: f64,
    },
}

/// Inter-arrival model for synthetic traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalModel {
    /// Evenly spaced arrivals, `1/rate` apart.
    Uniform { rate: f64 },
    /// Exponential inter-arrival times with mean `1/rate`.
    Poisson { rate: f64 },
    /// Normally distributed inter-arrival times with mean `1/rate`,
    /// clamped at zero.
    Normal { rate: f64, var: f64 },
    /// Bursts of `burst_size` simultaneous arrivals separated by exponential
    /// gaps with mean `burst_gap`. When `burst_gap` is omitted it is set to
    /// `burst_size / rate`, so the long-run rate equals `rate`.
    Bursty {
        rate: f64,
        burst_size: u64,
        #[serde(default)]
        burst_gap: Option<f64>,
    },
}

fn default_model_id() -> String {
    DEFAULT_MODEL_ID.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub num_requests: usize,
    pub size_model: SizeModel,
    pub arrival_model: ArrivalModel,
    #[serde(default)]
    pub seed: u64,
    /// Stage template for normal-size traces. Sampled values overwrite the
    /// prefill `input_tokens` and decode `output_tokens`. Defaults to
    /// `[prefill, decode]`.
    #[serde(default)]
    pub stages: Option<Vec<StageSpec>>,
    #[serde(default = "default_model_id")]
    pub model_id: String,
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_pos = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SimError::config(field, format!("must be finite and > 0, got {v}")))
            }
        };
        let finite_nonneg = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(SimError::config(field, format!("must be finite and >= 0, got {v}")))
            }
        };
        match &self.size_model {
            SizeModel::Normal {
                mean_in,
                var_in,
                mean_out,
                var_out,
            } => {
                finite_pos("size_model.mean_in", *mean_in)?;
                finite_pos("size_model.mean_out", *mean_out)?;
                finite_nonneg("size_model.var_in", *var_in)?;
                finite_nonneg("size_model.var_out", *var_out)?;
            }
            SizeModel::TraceFile { .. } => {}
        }
        match self.arrival_model {
            ArrivalModel::Uniform { rate } | ArrivalModel::Poisson { rate } => finite_pos("arrival_model.rate", rate)?,
            ArrivalModel::Normal { rate, var } => {
                finite_pos("arrival_model.rate", rate)?;
                finite_nonneg("arrival_model.var", var)?;
            }
            ArrivalModel::Bursty {
                rate,
                burst_size,
                burst_gap,
            } => {
                finite_pos("arrival_model.rate", rate)?;
                if burst_size == 0 {
                    return Err(SimError::config("arrival_model.burst_size", "must be >= 1"));
                }
                if let Some(gap) = burst_gap {
                    finite_pos("arrival_model.burst_gap", gap)?;
                }
            }
        }
        if let Some(stages) = &self.stages {
            validate_pipeline(stages).map_err(|(field, msg)| SimError::config(field, msg))?;
        }
        Ok(())
    }
}

fn sample_tokens(rng: &mut ChaCha8Rng, mean: f64, var: f64) -> u64 {
    let value = if var == 0.0 {
        mean
    } else {
        Normal::new(mean, var.sqrt())
            .expect("validated normal parameters")
            .sample(rng)
    };
    value.round().max(1.0) as u64
}

fn arrival_times(model: &ArrivalModel, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut times = Vec::with_capacity(n);
    let mut t = 0.0_f64;
    match *model {
        ArrivalModel::Uniform { rate } => {
            for i in 0..n {
                times.push(i as f64 / rate);
            }
        }
        ArrivalModel::Poisson { rate } => {
            let exp = Exp::new(rate).expect("validated rate");
            for i in 0..n {
                if i > 0 {
                    t += exp.sample(rng);
                }
                times.push(t);
            }
        }
        ArrivalModel::Normal { rate, var } => {
            let normal = Normal::new(1.0 / rate, var.sqrt()).expect("validated normal");
            for i in 0..n {
                if i > 0 {
                    t += normal.sample(rng).max(0.0);
                }
                times.push(t);
            }
        }
        ArrivalModel::Bursty {
            rate,
            burst_size,
            burst_gap,
        } => {
            let gap = burst_gap.unwrap_or(burst_size as f64 / rate);
            let exp = Exp::new(1.0 / gap).expect("validated gap");
            for i in 0..n {
                if i > 0 && i as u64 % burst_size == 0 {
                    t += exp.sample(rng);
                }
                times.push(t);
            }
        }
    }
    times
}

/// Produces a deterministic synthetic trace sorted by arrival time.
pub fn generate_trace(cfg: &TraceConfig) -> Result<Vec<Request>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arrivals = arrival_times(&cfg.arrival_model, cfg.num_requests, &mut rng);
    if cfg.num_requests == 0 {
        return Ok(Vec::new());
    }

    let mut requests = Vec::with_capacity(cfg.num_requests);
    match &cfg.size_model {
        SizeModel::TraceFile { path } => {
            let source = load_trace(path)?;
            if source.is_empty() {
                return Err(SimError::config(
                    "size_model.path",
                    format!("trace file {} has no records", path.display()),
                ));
            }
            for (i, &arrival) in arrivals.iter().enumerate() {
                let template = &source[i % source.len()];
                requests.push(
                    Request::new(i as u64, arrival, template.pipeline.clone()).with_model(template.model_id.clone()),
                );
            }
        }
        SizeModel::Normal {
            mean_in,
            var_in,
            mean_out,
            var_out,
        } => {
            let template = cfg.stages.clone().unwrap_or_else(|| {
                vec![
                    StageSpec::Prefill { input_tokens: 1 },
                    StageSpec::Decode { output_tokens: 1 },
                ]
            });
            for (i, &arrival) in arrivals.iter().enumerate() {
                let input = sample_tokens(&mut rng, *mean_in, *var_in);
                let output = sample_tokens(&mut rng, *mean_out, *var_out);
                let cached_floor = template
                    .iter()
                    .map(|s| match *s {
                        StageSpec::KvRetrieval { cached_tokens, .. } => cached_tokens,
                        _ => 0,
                    })
                    .max()
                    .unwrap_or(0);
                let pipeline = template
                    .iter()
                    .map(|s| match s {
                        StageSpec::Prefill { .. } => StageSpec::Prefill {
                            input_tokens: input.max(cached_floor),
                        },
                        StageSpec::Decode { .. } => StageSpec::Decode { output_tokens: output },
                        other => other.clone(),
                    })
                    .collect();
                requests.push(Request::new(i as u64, arrival, pipeline).with_model(cfg.model_id.clone()));
            }
        }
    }
    Ok(requests)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    arrival_s: f64,
    stages: Vec<StageSpec>,
    #[serde(default = "default_model_id")]
    model_id: String,
}

/// Parses line-delimited trace records. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn parse_trace<R: Read>(reader: R) -> Result<Vec<Request>> {
    let mut requests: Vec<Request> = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| SimError::Trace {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| SimError::Trace {
            line: line_no,
            message: e.to_string(),
        })?;
        if !record.arrival_s.is_finite() || record.arrival_s < 0.0 {
            return Err(SimError::Trace {
                line: line_no,
                message: format!("arrival_s must be finite and >= 0, got {}", record.arrival_s),
            });
        }
        if let Some(prev) = requests.last() {
            if record.arrival_s < prev.arrival_time {
                return Err(SimError::Trace {
                    line: line_no,
                    message: format!(
                        "non-monotone arrival_s {} after {}",
                        record.arrival_s, prev.arrival_time
                    ),
                });
            }
        }
        validate_pipeline(&record.stages).map_err(|(field, msg)| SimError::Trace {
            line: line_no,
            message: format!("{field}: {msg}"),
        })?;
        let id = record.id.unwrap_or(requests.len() as u64);
        requests.push(Request::new(id, record.arrival_s, record.stages).with_model(record.model_id));
    }
    Ok(requests)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    parse_trace(file)
}

/// Writes requests in the trace format accepted by [`parse_trace`].
pub fn write_trace<W: Write>(requests: &[Request], mut writer: W) -> std::io::Result<()> {
    for req in requests {
        let record = TraceRecord {
            id: Some(req.id),
            arrival_s: req.arrival_time,
            stages: req.pipeline.clone(),
            model_id: req.model_id.clone(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
