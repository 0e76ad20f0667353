//! Sequential scheduler for pre/post-processing: independent tasks run on
//! a fixed number of cores; each step lasts until the earliest in-service
//! task finishes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::batched::Affine;
use super::{Completion, StepPlan};
use crate::error::{Result, SimError};
use crate::hardware::{llm_step_runtime, BatchProfile, Cluster, ModelSpec};
use crate::workload::{OpClass, Request, StageSpec};

/// Latency models for pre/post-processing op classes. Defaults are
/// calibration placeholders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrePostCoeffs {
    /// `a * length_tokens + b` for `linear_text`.
    #[serde(default = "default_linear")]
    pub linear: Affine,
    /// Seconds for `fixed_latency`.
    #[serde(default = "default_fixed")]
    pub fixed_latency: f64,
}

fn default_linear() -> Affine {
    Affine { a: 1e-6, b: 1e-4 }
}

fn default_fixed() -> f64 {
    5e-3
}

impl Default for PrePostCoeffs {
    fn default() -> Self {
        PrePostCoeffs {
            linear: default_linear(),
            fixed_latency: default_fixed(),
        }
    }
}

impl PrePostCoeffs {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.linear.a) && ok(self.linear.b)) {
            return Err(("ops.linear".into(), "coefficients must be finite and >= 0".into()));
        }
        if !ok(self.fixed_latency) {
            return Err(("ops.fixed_latency".into(), "must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Latency of one pre/post task.
pub fn task_latency(
    coeffs: &PrePostCoeffs,
    op: OpClass,
    length_tokens: u64,
    cluster: &Cluster,
    model: Option<&ModelSpec>,
) -> Result<f64> {
    match op {
        OpClass::LinearText => Ok(coeffs.linear.eval(length_tokens)),
        OpClass::FixedLatency => Ok(coeffs.fixed_latency),
        OpClass::SmallModelPass => {
            let model =
                model.ok_or_else(|| SimError::Scheduling("small_model_pass needs a model on the client".into()))?;
            llm_step_runtime(cluster, model, &BatchProfile::prefill(length_tokens.max(1)))
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SequentialScheduler {
    pub cores: usize,
    pub coeffs: PrePostCoeffs,
    queue: VecDeque<usize>,
    in_service: Vec<(usize, f64)>,
    step_end: Option<f64>,
}

impl SequentialScheduler {
    pub fn new(cores: usize, coeffs: PrePostCoeffs) -> Self {
        SequentialScheduler {
            cores,
            coeffs,
            queue: VecDeque::new(),
            in_service: Vec::new(),
            step_end: None,
        }
    }

    pub fn enqueue(&mut self, slot: usize) {
        self.queue.push_back(slot);
    }

    pub fn has_work(&self) -> bool {
        !self.queue.is_empty() || !self.in_service.is_empty()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn start_step(
        &mut self,
        now: f64,
        reqs: &[Request],
        cluster: &Cluster,
        model: Option<&ModelSpec>,
    ) -> Result<Option<StepPlan>> {
        while self.in_service.len() < self.cores {
            let Some(slot) = self.queue.pop_front() else {
                break;
            };
            let (op, len) = match *reqs[slot].current_stage().expect("queued request has a stage") {
                StageSpec::Preprocess {
                    op_class,
                    length_tokens,
                }
                | StageSpec::Postprocess {
                    op_class,
                    length_tokens,
                } => (op_class, length_tokens),
                ref other => {
                    return Err(SimError::Scheduling(format!(
                        "sequential client cannot run a {} stage",
                        other.kind()
                    )))
                }
            };
            let lat = task_latency(&self.coeffs, op, len, cluster, model)?;
            self.in_service.push((slot, now + lat));
        }
        let Some(end) = self.in_service.iter().map(|&(_, e)| e).min_by(f64::total_cmp) else {
            return Ok(None);
        };
        self.step_end = Some(end);
        Ok(Some(StepPlan {
            duration: end - now,
            label: "pre_post".to_string(),
            items: self.in_service.iter().map(|&(s, _)| s).collect(),
            prefill_tokens: 0,
            decode_tokens: 0,
        }))
    }

    pub fn complete_step(&mut self) -> Completion {
        let end = self.step_end.take().unwrap_or(f64::NEG_INFINITY);
        let mut done = Completion::default();
        self.in_service.retain(|&(slot, e)| {
            if e <= end {
                done.finished.push(slot);
                false
            } else {
                true
            }
        });
        done
    }
}
