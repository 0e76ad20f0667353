//! Hardware models: step runtimes, KV accounting, memory hierarchies, and
//! inter-client links.

pub mod empirical;
pub mod memory;
pub mod roofline;
pub mod topology;

pub use empirical::{EmpiricalTable, RuntimeRecord};
pub use memory::{
    retrieval_latency, sample_hit_level, sample_hit_level_with, HitOutcome, MemoryHierarchy, MemoryLevel, PrefixCache,
    Terminal,
};
pub use roofline::{
    analytical_step_runtime, kv_bytes, llm_step_runtime, BatchProfile, Cluster, HardwareSku, ModelSpec, RuntimeSource,
    StepPhase,
};
pub use topology::{transfer_timing, LinkClass, Location, Topology, TransferGranularity, TransferTiming};
