//! UCB peer scoring: explore every peer round-robin during warm-up, then
//! keep the best-scoring peers and swap out the weakest once per epoch.

use serde::{Deserialize, Serialize};

use crate::overlay::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerigeeParams {
    pub fanout: usize,
    pub warmup_rounds: u64,
    pub epoch_rounds: u64,
    pub ucb_c: f64,
    /// Interval of the connectivity check over all subscriptions.
    pub repair_interval_ms: f64,
    /// Delay after a node's first receipt at which it ranks the sources
    /// that announced the transaction.
    pub score_delay_ms: f64,
}

impl Default for PerigeeParams {
    fn default() -> Self {
        PerigeeParams {
            fanout: 8,
            warmup_rounds: 64,
            epoch_rounds: 16,
            ucb_c: 1.0,
            repair_interval_ms: 2000.0,
            score_delay_ms: 1000.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerigeeScore {
    params: PerigeeParams,
    peers: Vec<NodeId>,
    sums: Vec<f64>,
    counts: Vec<u32>,
    round: u64,
    list: Vec<usize>,
}

impl PerigeeScore {
    pub fn new(peers: &[NodeId], params: PerigeeParams) -> Self {
        let mut sorted = peers.to_vec();
        sorted.sort_unstable();
        let mut s = PerigeeScore {
            params,
            peers: sorted,
            sums: vec![0.0; peers.len()],
            counts: vec![0; peers.len()],
            round: 0,
            list: Vec::new(),
        };
        s.list = s.exploration_set(0);
        s
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn in_warmup(&self) -> bool {
        self.round < self.params.warmup_rounds
    }

    fn exploration_set(&self, round: u64) -> Vec<usize> {
        let d = self.peers.len();
        let k = self.params.fanout.min(d);
        if d == 0 {
            return Vec::new();
        }
        let start = (round as usize * k) % d;
        (0..k).map(|i| (start + i) % d).collect()
    }

    /// Mean observed usefulness plus the exploration bonus; unexplored peers
    /// score infinity.
    pub fn ucb(&self, i: usize) -> f64 {
        if self.counts[i] == 0 {
            return f64::INFINITY;
        }
        let mean = self.sums[i] / self.counts[i] as f64;
        let n_total = self.round.max(1) as f64;
        mean + self.params.ucb_c * (n_total.ln().max(0.0) / self.counts[i] as f64).sqrt()
    }

    fn by_score_desc(&self, a: usize, b: usize) -> std::cmp::Ordering {
        self.ucb(b).total_cmp(&self.ucb(a)).then(self.peers[a].cmp(&self.peers[b]))
    }

    /// Current relay list.
    pub fn current(&self) -> Vec<NodeId> {
        self.list.iter().map(|&i| self.peers[i]).collect()
    }

    /// Advances to the next round and returns the list to use in it.
    pub fn next_round(&mut self) -> Vec<NodeId> {
        let r = self.round;
        self.round += 1;
        let warm = self.params.warmup_rounds;
        if r < warm {
            self.list = self.exploration_set(r);
        } else if r == warm {
            let mut idx: Vec<usize> = (0..self.peers.len()).collect();
            idx.sort_by(|&a, &b| self.by_score_desc(a, b));
            idx.truncate(self.params.fanout.min(self.peers.len()));
            self.list = idx;
        } else if self.params.epoch_rounds > 0 && (r - warm) % self.params.epoch_rounds == 0 {
            self.reselect();
        }
        self.current()
    }

    fn reselect(&mut self) {
        if self.list.is_empty() {
            return;
        }
        let worst_pos = (0..self.list.len())
            .max_by(|&a, &b| self.by_score_desc(self.list[a], self.list[b]))
            .expect("non-empty");
        let best_out = (0..self.peers.len())
            .filter(|i| !self.list.contains(i))
            .min_by(|&a, &b| self.by_score_desc(a, b));
        if let Some(b) = best_out {
            if self.ucb(b) > self.ucb(self.list[worst_pos]) {
                self.list[worst_pos] = b;
            }
        }
    }

    /// Replaces the relay list; entries that are not peers are ignored.
    pub fn set_list(&mut self, list: &[NodeId]) {
        self.list = list.iter().filter_map(|p| self.peers.binary_search(p).ok()).collect();
    }

    /// Records a reward in `[0, 1]` for a send to `peer`.
    pub fn observe(&mut self, peer: NodeId, reward: f64) {
        if let Ok(i) = self.peers.binary_search(&peer) {
            self.sums[i] += reward;
            self.counts[i] += 1;
        }
    }
}

/// Reward for a send that completed as the `rank`-th (0-based) of `targets`
/// sends in its round: `1 - rank / targets` when it delivered first, else 0.
pub fn rank_reward(useful: bool, rank: usize, targets: usize) -> f64 {
    if !useful || targets == 0 {
        0.0
    } else {
        1.0 - rank as f64 / targets as f64
    }
}
