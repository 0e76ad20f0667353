//! Multi-level KV-cache hierarchy: expected retrieval latency, per-request
//! outcome sampling, and a capacity-driven LRU realization.
//!
//! Level `n` serves a lookup with probability `H_n` given that every faster
//! level missed. A hit at level `n` costs `T_n + size / BW_n`. Misses that
//! fall through every level are resolved by the terminal: either the last
//! level is assumed to hold everything, or the context is recomputed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryLevel {
    #[serde(default)]
    pub name: Option<String>,
    /// Bytes; only consulted by the capacity-driven cache.
    #[serde(default)]
    pub capacity: f64,
    /// Seconds per lookup.
    pub lookup_latency: f64,
    /// Bytes/s.
    pub bandwidth: f64,
    #[serde(default)]
    pub hit_rate: f64,
}

impl MemoryLevel {
    pub fn hit_latency(&self, size_kv: f64) -> f64 {
        self.lookup_latency + size_kv / self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    /// The last level resolves every residual miss (its hit rate is 1).
    AssumeHit,
    /// Residual misses recompute the context as a prefill on the serving
    /// client's cluster.
    Recompute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryHierarchy {
    #[serde(default)]
    pub levels: Vec<MemoryLevel>,
    pub terminal: Terminal,
}

/// Where a lookup was served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitOutcome {
    /// Zero-based level index.
    Level(usize),
    Recompute,
}

impl MemoryHierarchy {
    pub fn recompute_only() -> Self {
        MemoryHierarchy {
            levels: Vec::new(),
            terminal: Terminal::Recompute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, level) in self.levels.iter().enumerate() {
            let field = |f: &str| format!("levels[{i}].{f}");
            if !(0.0..=1.0).contains(&level.hit_rate) {
                return Err(SimError::config(field("hit_rate"), "must be in [0, 1]"));
            }
            if !(level.bandwidth.is_finite() && level.bandwidth > 0.0) {
                return Err(SimError::config(field("bandwidth"), "must be finite and > 0"));
            }
            if !(level.lookup_latency.is_finite() && level.lookup_latency >= 0.0) {
                return Err(SimError::config(field("lookup_latency"), "must be finite and >= 0"));
            }
            if !(level.capacity.is_finite() && level.capacity >= 0.0) {
                return Err(SimError::config(field("capacity"), "must be finite and >= 0"));
            }
        }
        if self.terminal == Terminal::AssumeHit {
            if self.levels.is_empty() {
                return Err(SimError::config(
                    "levels",
                    "assume_hit terminal needs at least one level",
                ));
            }
            if self.levels.iter().all(|l| l.hit_rate == 0.0) {
                return Err(SimError::config(
                    "levels",
                    "invalid hierarchy: every hit rate is zero under an assume_hit terminal",
                ));
            }
        }
        Ok(())
    }

    /// Hit rate used by the model for level `n`, after applying the terminal.
    pub fn effective_hit_rate(&self, n: usize) -> f64 {
        if self.terminal == Terminal::AssumeHit && n + 1 == self.levels.len() {
            1.0
        } else {
            self.levels[n].hit_rate
        }
    }

    fn expected_from(&self, n: usize, size_kv: f64, recompute_cost: f64) -> f64 {
        if n == self.levels.len() {
            return match self.terminal {
                Terminal::Recompute => recompute_cost,
                // Unreachable with weight: the last level's effective hit rate is 1.
                Terminal::AssumeHit => 0.0,
            };
        }
        let h = self.effective_hit_rate(n);
        let hit = h * self.levels[n].hit_latency(size_kv);
        if h == 1.0 {
            return hit;
        }
        hit + (1.0 - h) * self.expected_from(n + 1, size_kv, recompute_cost)
    }
}

/// Expected latency to obtain `size_kv` bytes of KV from the hierarchy.
pub fn retrieval_latency(h: &MemoryHierarchy, size_kv: f64, recompute_cost: f64) -> Result<f64> {
    h.validate()?;
    if !(size_kv.is_finite() && size_kv >= 0.0) {
        return Err(SimError::Hardware(format!("KV size {size_kv} must be finite and >= 0")));
    }
    if h.levels.is_empty() && h.terminal == Terminal::AssumeHit {
        return Err(SimError::Hardware("empty hierarchy".into()));
    }
    Ok(h.expected_from(0, size_kv, recompute_cost))
}

/// Draws the serving level using a caller-owned random source.
pub fn sample_hit_level_with<R: Rng>(h: &MemoryHierarchy, rng: &mut R) -> HitOutcome {
    for n in 0..h.levels.len() {
        let p = h.effective_hit_rate(n);
        if p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p) {
            return HitOutcome::Level(n);
        }
    }
    HitOutcome::Recompute
}

/// Draws the serving level deterministically from `seed`.
pub fn sample_hit_level(h: &MemoryHierarchy, seed: u64) -> HitOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_hit_level_with(h, &mut rng)
}

#[derive(Debug, Clone, Default)]
struct LruLevel {
    capacity: f64,
    used: f64,
    entries: BTreeMap<u64, (f64, u64)>,
    by_use: BTreeMap<u64, u64>,
}

impl LruLevel {
    fn touch(&mut self, key: u64, tick: u64) -> bool {
        if let Some(entry) = self.entries.get_mut(&key) {
            self.by_use.remove(&entry.1);
            entry.1 = tick;
            self.by_use.insert(tick, key);
            true
        } else {
            false
        }
    }

    fn insert(&mut self, key: u64, bytes: f64, tick: u64) {
        if self.touch(key, tick) || bytes > self.capacity {
            return;
        }
        while self.used + bytes > self.capacity {
            let Some((_, victim)) = self.by_use.pop_first() else {
                break;
            };
            if let Some((size, _)) = self.entries.remove(&victim) {
                self.used -= size;
            }
        }
        self.entries.insert(key, (bytes, tick));
        self.by_use.insert(tick, key);
        self.used += bytes;
    }
}

/// Capacity-driven realization of a hierarchy: a prefix hits at the first
/// level where it is still resident under LRU replacement. After each
/// lookup the prefix is installed in every level it fits in.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    levels: Vec<LruLevel>,
    terminal: Terminal,
    tick: u64,
}

impl PrefixCache {
    pub fn new(h: &MemoryHierarchy) -> Self {
        PrefixCache {
            levels: h
                .levels
                .iter()
                .map(|l| LruLevel {
                    capacity: l.capacity,
                    ..LruLevel::default()
                })
                .collect(),
            terminal: h.terminal,
            tick: 0,
        }
    }

    /// Looks up a prefix. `None` keys are never shared and always miss.
    pub fn access(&mut self, key: Option<u64>, bytes: f64) -> HitOutcome {
        self.tick += 1;
        let tick = self.tick;
        let mut outcome = None;
        if let Some(key) = key {
            for (n, level) in self.levels.iter_mut().enumerate() {
                if level.touch(key, tick) {
                    outcome = Some(HitOutcome::Level(n));
                    break;
                }
            }
            for level in &mut self.levels {
                level.insert(key, bytes, tick);
            }
        }
        match (outcome, self.terminal) {
            (Some(o), _) => o,
            (None, Terminal::AssumeHit) if !self.levels.is_empty() => HitOutcome::Level(self.levels.len() - 1),
            _ => HitOutcome::Recompute,
        }
    }
}
