//! Client placement and the analytical inter-client link model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkClass {
    /// Bytes/s.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
}

impl LinkClass {
    /// Sentinel for "no transfer needed".
    pub const LOCAL: LinkClass = LinkClass {
        bandwidth: f64::INFINITY,
        latency: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Location {
    pub rack: u32,
    pub platform: u32,
}

/// Hierarchical network: clients on the same platform talk over the
/// platform fabric, clients in the same rack over the rack fabric, and
/// everything else over the datacenter network.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub intra_platform: LinkClass,
    pub intra_rack: LinkClass,
    pub inter_rack: LinkClass,
    pub placement: BTreeMap<usize, Location>,
}

impl Topology {
    /// Every client on one platform.
    pub fn single_platform(n_clients: usize, link: LinkClass) -> Self {
        Topology {
            intra_platform: link,
            intra_rack: link,
            inter_rack: link,
            placement: (0..n_clients).map(|c| (c, Location { rack: 0, platform: 0 })).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, link) in [
            ("intra_platform", self.intra_platform),
            ("intra_rack", self.intra_rack),
            ("inter_rack", self.inter_rack),
        ] {
            if !(link.bandwidth > 0.0) || !(link.latency.is_finite() && link.latency >= 0.0) {
                return Err(SimError::config(
                    format!("topology.links.{name}"),
                    "bandwidth must be > 0 and latency finite and >= 0",
                ));
            }
        }
        Ok(())
    }

    fn location(&self, client: usize) -> Result<Location> {
        self.placement
            .get(&client)
            .copied()
            .ok_or_else(|| SimError::Topology(format!("client {client} is not placed in the topology")))
    }

    /// Bandwidth and latency of the slowest link class crossed between two
    /// clients. `src == dst` yields [`LinkClass::LOCAL`].
    pub fn link_params(&self, src: usize, dst: usize) -> Result<LinkClass> {
        let a = self.location(src)?;
        let b = self.location(dst)?;
        if src == dst {
            return Ok(LinkClass::LOCAL);
        }
        Ok(if a == b {
            self.intra_platform
        } else if a.rack == b.rack {
            self.intra_rack
        } else {
            self.inter_rack
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferGranularity {
    /// The whole payload lands before the next stage may start.
    #[default]
    FullCache,
    /// The payload moves in equal slices; the next stage starts after the
    /// first slice while the remainder keeps the link busy.
    Layerwise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferTiming {
    /// When the receiving stage may start.
    pub ready: f64,
    /// When the link becomes free for the next transfer.
    pub link_free: f64,
}

/// Timing of a transfer that starts on the link at `start`.
pub fn transfer_timing(
    link: LinkClass,
    bytes: u64,
    start: f64,
    granularity: TransferGranularity,
    slices: u64,
) -> TransferTiming {
    if bytes == 0 || link.bandwidth.is_infinite() {
        return TransferTiming {
            ready: start,
            link_free: start,
        };
    }
    let full = start + link.latency + bytes as f64 / link.bandwidth;
    match granularity {
        TransferGranularity::FullCache => TransferTiming {
            ready: full,
            link_free: full,
        },
        TransferGranularity::Layerwise => TransferTiming {
            ready: start + link.latency + bytes as f64 / (slices.max(1) as f64 * link.bandwidth),
            link_free: full,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> Topology {
        let mut placement = BTreeMap::new();
        placement.insert(0, Location { rack: 0, platform: 0 });
        placement.insert(1, Location { rack: 0, platform: 0 });
        placement.insert(2, Location { rack: 0, platform: 1 });
        placement.insert(3, Location { rack: 1, platform: 0 });
        Topology {
            intra_platform: LinkClass {
                bandwidth: 900e9,
                latency: 1e-6,
            },
            intra_rack: LinkClass {
                bandwidth: 400e9,
                latency: 5e-6,
            },
            inter_rack: LinkClass {
                bandwidth: 128e9,
                latency: 0.020,
            },
            placement,
        }
    }

    #[test]
    fn link_classes() {
        let t = topo();
        assert_eq!(t.link_params(0, 1).unwrap(), t.intra_platform);
        assert_eq!(t.link_params(0, 2).unwrap(), t.intra_rack);
        let dcn = t.link_params(0, 3).unwrap();
        assert_eq!((dcn.bandwidth, dcn.latency), (128e9, 0.020));
        assert_eq!(t.link_params(2, 2).unwrap(), LinkClass::LOCAL);
        assert!(matches!(t.link_params(0, 9), Err(SimError::Topology(_))));
    }

    #[test]
    fn full_cache_transfer() {
        let link = LinkClass {
            bandwidth: 128e9,
            latency: 0.020,
        };
        let t = transfer_timing(link, 8_000_000_000, 0.0, TransferGranularity::FullCache, 1);
        assert!((t.ready - 0.0825).abs() < 1e-12);
        assert_eq!(t.ready, t.link_free);
    }

    #[test]
    fn empty_and_local_transfers_are_free() {
        let link = LinkClass {
            bandwidth: 1e9,
            latency: 0.5,
        };
        let t = transfer_timing(link, 0, 3.0, TransferGranularity::FullCache, 1);
        assert_eq!(t.ready, 3.0);
        let t = transfer_timing(LinkClass::LOCAL, 1 << 30, 3.0, TransferGranularity::FullCache, 1);
        assert_eq!(t.ready, 3.0);
    }

    #[test]
    fn layerwise_unblocks_after_first_slice() {
        let link = LinkClass {
            bandwidth: 1e9,
            latency: 0.01,
        };
        let t = transfer_timing(link, 8_000_000_000, 1.0, TransferGranularity::Layerwise, 80);
        assert!((t.ready - (1.0 + 0.01 + 0.1)).abs() < 1e-12);
        assert!((t.link_free - (1.0 + 0.01 + 8.0)).abs() < 1e-12);
    }
}
