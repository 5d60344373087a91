//! Sparse store of recent one-way delay observations per node pair.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::overlay::NodeId;
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub delay_ms: f64,
    pub t: SimTime,
}

#[derive(Debug, Clone)]
pub struct PairEntry {
    pub u: NodeId,
    pub v: NodeId,
    /// Oldest first.
    pub obs: Vec<Observation>,
}

impl PairEntry {
    /// Minimum of the stored observations, the delay estimate used by the
    /// embedding.
    pub fn estimate(&self) -> Option<f64> {
        self.obs.iter().map(|o| o.delay_ms).reduce(f64::min)
    }
}

/// Unordered node pair to observations (both directions pooled).
#[derive(Debug, Clone)]
pub struct LatencyMatrix {
    k: usize,
    index: HashMap<(u32, u32), usize>,
    pairs: Vec<PairEntry>,
}

/// Receipt for one ingested observation, used to undo it.
#[derive(Debug, Clone, Copy)]
pub struct Ingested {
    pub pair: usize,
    evicted: Option<Observation>,
}

fn key(u: NodeId, v: NodeId) -> (u32, u32) {
    (u.0.min(v.0), u.0.max(v.0))
}

impl LatencyMatrix {
    pub fn new(k: usize) -> Self {
        LatencyMatrix {
            k: k.max(1),
            index: HashMap::new(),
            pairs: Vec::new(),
        }
    }

    pub fn capacity_per_pair(&self) -> usize {
        self.k
    }

    /// Appends an observation, evicting the oldest once the pair holds `k`.
    pub fn ingest(&mut self, u: NodeId, v: NodeId, delay_ms: f64, t: SimTime) -> Result<Ingested> {
        if !(delay_ms >= 0.0) || !delay_ms.is_finite() {
            return Err(Error::NegativeDelay(u, v, delay_ms));
        }
        let k = key(u, v);
        let next = self.pairs.len();
        let pair = *self.index.entry(k).or_insert(next);
        if pair == next {
            self.pairs.push(PairEntry {
                u: NodeId(k.0),
                v: NodeId(k.1),
                obs: Vec::with_capacity(self.k),
            });
        }
        let entry = &mut self.pairs[pair];
        let evicted = if entry.obs.len() >= self.k {
            Some(entry.obs.remove(0))
        } else {
            None
        };
        entry.obs.push(Observation { delay_ms, t });
        Ok(Ingested { pair, evicted })
    }

    /// Reverts an ingest. Undo receipts must be applied newest first.
    pub fn undo(&mut self, r: Ingested) {
        let entry = &mut self.pairs[r.pair];
        entry.obs.pop();
        if let Some(o) = r.evicted {
            entry.obs.insert(0, o);
        }
    }

    /// Drops observations taken before `cutoff`.
    pub fn evict_older_than(&mut self, cutoff: SimTime) {
        for p in &mut self.pairs {
            p.obs.retain(|o| o.t >= cutoff);
        }
    }

    pub fn get(&self, u: NodeId, v: NodeId) -> Option<&PairEntry> {
        self.index.get(&key(u, v)).map(|&i| &self.pairs[i])
    }

    pub fn estimate(&self, u: NodeId, v: NodeId) -> Option<f64> {
        self.get(u, v).and_then(PairEntry::estimate)
    }

    /// Pairs with at least one observation, as `(u, v, estimate)`.
    pub fn measured(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.pairs
            .iter()
            .filter_map(|p| p.estimate().map(|l| (p.u, p.v, l)))
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().filter(|p| !p.obs.is_empty()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_count() == 0
    }
}
