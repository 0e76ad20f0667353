//! Discrete-event simulator for multi-stage LLM inference serving.
//!
//! Requests are pipelines of stages (pre-processing, RAG, KV retrieval,
//! prefill, reasoning, decode, post-processing). A coordinator routes each
//! stage to a client; every client pairs a scheduler with a modeled hardware
//! cluster and executes work one step at a time. The run produces
//! per-request timings, percentile summaries, goodput and cost figures, and
//! a Chrome trace.
//!
//! ```text
//!   trace ──▶ engine (event queue) ──▶ router ──▶ clients ──▶ hardware models
//!                  │                                  │
//!                  └────────────── metrics ◀──────────┘
//! ```

pub mod clients;
pub mod config;
pub mod engine;
pub mod error;
pub mod hardware;
pub mod metrics;
pub mod routing;
pub mod sweep;
pub mod workload;

pub use clients::{BatchingStrategy, Client, LlmLimits, Packing, SchedulerKind, StepBatch};
pub use engine::{run, Simulation};
pub use error::{Result, SimError};
pub use metrics::SimulationReport;
pub use routing::{LoadMetric, RouterPolicy};
pub use workload::{generate_trace, load_trace, Request, StageKind, StageSpec, TraceConfig};
