//! Empirical step-runtime tables with multilinear interpolation.
//!
//! Records are grouped by `(model, sku, tp, pp, phase)`. Within a group the
//! records must form a full grid over `(total_tokens, batch_size,
//! max_context)`; queries inside the grid interpolate between the
//! surrounding corners, and queries on grid points return the stored value
//! unchanged.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::roofline::StepPhase;
use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeRecord {
    pub model: String,
    pub sku: String,
    pub tp: u64,
    pub pp: u64,
    pub phase: StepPhase,
    pub total_tokens: u64,
    pub batch_size: u64,
    pub max_context: u64,
    pub runtime_s: f64,
}

type GroupKey = (String, String, u64, u64, StepPhase);
type Point = (u64, u64, u64);

#[derive(Debug, Clone, Default)]
struct Grid {
    axes: [Vec<u64>; 3],
    values: BTreeMap<Point, f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EmpiricalTable {
    groups: BTreeMap<GroupKey, Grid>,
}

const AXIS_NAMES: [&str; 3] = ["total_tokens", "batch_size", "max_context"];

/// Interpolation support along one axis: one or two grid values and weights.
fn bracket(axis: &[u64], q: u64) -> Option<Vec<(u64, f64)>> {
    match axis.binary_search(&q) {
        Ok(_) => Some(vec![(q, 1.0)]),
        Err(pos) => {
            if pos == 0 || pos == axis.len() {
                return None;
            }
            let (lo, hi) = (axis[pos - 1], axis[pos]);
            let w = (q - lo) as f64 / (hi - lo) as f64;
            Some(vec![(lo, 1.0 - w), (hi, w)])
        }
    }
}

impl EmpiricalTable {
    pub fn from_records(records: impl IntoIterator<Item = RuntimeRecord>) -> Result<Self> {
        let mut groups: BTreeMap<GroupKey, Grid> = BTreeMap::new();
        for r in records {
            if !r.runtime_s.is_finite() || r.runtime_s < 0.0 {
                return Err(SimError::Hardware(format!(
                    "runtime table value {} is not a finite non-negative time",
                    r.runtime_s
                )));
            }
            let grid = groups.entry((r.model, r.sku, r.tp, r.pp, r.phase)).or_default();
            grid.values
                .insert((r.total_tokens, r.batch_size, r.max_context), r.runtime_s);
        }
        for grid in groups.values_mut() {
            for (i, axis) in grid.axes.iter_mut().enumerate() {
                let mut vals: Vec<u64> = grid.values.keys().map(|p| [p.0, p.1, p.2][i]).collect();
                vals.sort_unstable();
                vals.dedup();
                *axis = vals;
            }
        }
        Ok(EmpiricalTable { groups })
    }

    pub fn parse<R: Read>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| SimError::Trace {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RuntimeRecord = serde_json::from_str(&line).map_err(|e| SimError::Trace {
                line: idx + 1,
                message: format!("runtime table: {e}"),
            })?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| SimError::io(path, e))?;
        Self::parse(file)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn lookup(
        &self,
        model: &str,
        sku: &str,
        tp: u64,
        pp: u64,
        phase: StepPhase,
        total_tokens: u64,
        batch_size: u64,
        max_context: u64,
    ) -> Result<f64> {
        let key = (model.to_string(), sku.to_string(), tp, pp, phase);
        let describe = || format!("model={model} sku={sku} tp={tp} pp={pp} phase={phase:?}");
        let grid = self
            .groups
            .get(&key)
            .ok_or_else(|| SimError::Hardware(format!("no runtime table entries for {}", describe())))?;

        let query = [total_tokens, batch_size, max_context];
        let mut supports = Vec::with_capacity(3);
        for (i, &q) in query.iter().enumerate() {
            let axis = &grid.axes[i];
            let support = bracket(axis, q).ok_or_else(|| {
                SimError::Hardware(format!(
                    "runtime table extrapolation: {}={} outside [{}, {}] for {}",
                    AXIS_NAMES[i],
                    q,
                    axis.first().copied().unwrap_or(0),
                    axis.last().copied().unwrap_or(0),
                    describe()
                ))
            })?;
            supports.push(support);
        }

        let mut value = 0.0;
        for &(a, wa) in &supports[0] {
            for &(b, wb) in &supports[1] {
                for &(c, wc) in &supports[2] {
                    let v = grid.values.get(&(a, b, c)).ok_or_else(|| {
                        SimError::Hardware(format!(
                            "runtime table grid incomplete: missing corner \
                             (total_tokens={a}, batch_size={b}, max_context={c}) for {}",
                            describe()
                        ))
                    })?;
                    value += wa * wb * wc * v;
                }
            }
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: u64, b: u64, c: u64, v: f64) -> RuntimeRecord {
        RuntimeRecord {
            model: "m".into(),
            sku: "s".into(),
            tp: 1,
            pp: 1,
            phase: StepPhase::Prefill,
            total_tokens: t,
            batch_size: b,
            max_context: c,
            runtime_s: v,
        }
    }

    fn affine(t: u64, b: u64, c: u64) -> f64 {
        0.001 + 2e-6 * t as f64 + 3e-4 * b as f64 + 5e-7 * c as f64
    }

    fn table() -> EmpiricalTable {
        let mut recs = Vec::new();
        for t in [128, 512, 2048] {
            for b in [1, 8] {
                for c in [1024, 8192] {
                    recs.push(rec(t, b, c, affine(t, b, c)));
                }
            }
        }
        EmpiricalTable::from_records(recs).unwrap()
    }

    #[test]
    fn exact_keys_are_bit_exact() {
        let tbl = table();
        for t in [128, 512, 2048] {
            for b in [1, 8] {
                for c in [1024, 8192] {
                    let v = tbl.lookup("m", "s", 1, 1, StepPhase::Prefill, t, b, c).unwrap();
                    assert_eq!(v.to_bits(), affine(t, b, c).to_bits());
                }
            }
        }
    }

    #[test]
    fn multilinear_reproduces_affine_functions() {
        let tbl = table();
        let v = tbl.lookup("m", "s", 1, 1, StepPhase::Prefill, 1000, 3, 5000).unwrap();
        assert!((v - affine(1000, 3, 5000)).abs() < 1e-12);
    }

    #[test]
    fn extrapolation_names_key() {
        let tbl = table();
        let err = tbl
            .lookup("m", "s", 1, 1, StepPhase::Prefill, 4096, 1, 1024)
            .unwrap_err()
            .to_string();
        assert!(err.contains("total_tokens=4096"), "{err}");
        let err = tbl
            .lookup("m", "s", 2, 1, StepPhase::Prefill, 512, 1, 1024)
            .unwrap_err()
            .to_string();
        assert!(err.contains("tp=2"), "{err}");
    }

    #[test]
    fn parse_jsonl() {
        let text = r#"{"model":"m","sku":"s","tp":1,"pp":1,"phase":"decode","total_tokens":4,"batch_size":4,"max_context":100,"runtime_s":0.01}"#;
        let tbl = EmpiricalTable::parse(text.as_bytes()).unwrap();
        assert_eq!(tbl.lookup("m", "s", 1, 1, StepPhase::Decode, 4, 4, 100).unwrap(), 0.01);
    }
}
