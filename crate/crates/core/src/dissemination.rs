//! Per-node relay state: batching, early outburst, cluster kick-off and the
//! controller-silence fallback.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;

use crate::auth::{AuthKey, AuthTag};
use crate::cluster::RelayTable;
use crate::overlay::NodeId;
use crate::rng;
use crate::sim::SimTime;

pub const NO_TIME: SimTime = SimTime::MAX;
pub const NO_NODE: u32 = u32::MAX;

/// Controller-signed token attached to a transaction's outburst sends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutburstNonce {
    pub window: u64,
    pub origin_cluster: u16,
    pub tag: AuthTag,
}

impl OutburstNonce {
    fn payload(tx: u32, origin_cluster: u16) -> [u8; 6] {
        let mut b = [0u8; 6];
        b[..4].copy_from_slice(&tx.to_be_bytes());
        b[4..].copy_from_slice(&origin_cluster.to_be_bytes());
        b
    }

    pub fn mint(key: &AuthKey, tx: u32, window: u64, origin_cluster: u16) -> Self {
        OutburstNonce {
            window,
            origin_cluster,
            tag: key.tag("outburst", window, &Self::payload(tx, origin_cluster)),
        }
    }

    pub fn verify(&self, key: &AuthKey, tx: u32) -> bool {
        key.verify("outburst", self.window, &Self::payload(tx, self.origin_cluster), &self.tag)
    }
}

/// A transaction and its propagation record.
#[derive(Debug, Clone)]
pub struct TxRecord {
    pub id: u32,
    pub origin: NodeId,
    pub t0: SimTime,
    pub digest_size: u64,
    pub body_size: u64,
    pub measured: bool,
    /// First-receipt time per node, `NO_TIME` if never received.
    pub first_receipt: Vec<SimTime>,
    /// Peer that delivered the first copy, `NO_NODE` for the origin and for
    /// nodes not reached.
    pub first_sender: Vec<u32>,
    pub depth: Vec<u16>,
    pub relayed: Vec<bool>,
    pub outburst_nonce: Option<OutburstNonce>,
}

impl TxRecord {
    pub fn new(id: u32, origin: NodeId, t0: SimTime, n: usize, digest_size: u64, body_size: u64) -> Self {
        let mut r = TxRecord {
            id,
            origin,
            t0,
            digest_size,
            body_size,
            measured: true,
            first_receipt: vec![NO_TIME; n],
            first_sender: vec![NO_NODE; n],
            depth: vec![0; n],
            relayed: vec![false; n],
            outburst_nonce: None,
        };
        r.first_receipt[origin.idx()] = t0;
        r
    }

    pub fn has(&self, v: NodeId, t: SimTime) -> bool {
        self.first_receipt[v.idx()] <= t
    }

    pub fn received(&self, v: NodeId) -> bool {
        self.first_receipt[v.idx()] != NO_TIME
    }

    /// Every reached node's first-sender chain ends at the origin.
    pub fn tree_is_rooted(&self) -> bool {
        let n = self.first_receipt.len();
        (0..n).filter(|&v| self.first_receipt[v] != NO_TIME).all(|v| {
            let mut cur = v;
            for _ in 0..=n {
                if cur == self.origin.idx() {
                    return true;
                }
                let s = self.first_sender[cur];
                if s == NO_NODE || self.first_receipt[s as usize] > self.first_receipt[cur] {
                    return false;
                }
                cur = s as usize;
            }
            false
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ControllerGuided,
    Fallback,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub table: Option<RelayTable>,
    pub last_good_table: Option<RelayTable>,
    pub last_controller_contact: SimTime,
    pub pending: VecDeque<u32>,
    pub mode: Mode,
    pub fallback_list: Vec<NodeId>,
    /// Offset of this node's batch clock within `[0, delta)`.
    pub batch_phase: SimTime,
    pub tick_scheduled: bool,
}

impl NodeState {
    pub fn new(id: NodeId, peers: &[NodeId], d_max: usize, batch_phase: SimTime, seed: u64) -> Self {
        let mut r = rng::stream(seed, "dissemination.fallback", id.0 as u64);
        NodeState {
            id,
            table: None,
            last_good_table: None,
            last_controller_contact: 0,
            pending: VecDeque::new(),
            mode: Mode::Fallback,
            fallback_list: peers.choose_multiple(&mut r, d_max.min(peers.len())).copied().collect(),
            batch_phase,
            tick_scheduled: false,
        }
    }

    /// Accepts an authenticated controller message at `t`.
    pub fn on_controller_message(&mut self, t: SimTime, table: Option<RelayTable>, key: &AuthKey) {
        self.last_controller_contact = t;
        if let Some(tab) = table {
            if tab.verify(key) {
                self.last_good_table = Some(tab.clone());
                self.table = Some(tab);
            } else {
                log::debug!("{}: dropped table with a bad tag", self.id);
            }
        }
        self.mode = if self.table.is_some() {
            Mode::ControllerGuided
        } else {
            Mode::Fallback
        };
    }

    /// Falls back to random gossip once the controller has been silent for
    /// longer than `timeout`.
    pub fn fallback_check(&mut self, t: SimTime, timeout: SimTime) {
        let silent = t.saturating_sub(self.last_controller_contact) > timeout;
        self.mode = if silent || self.table.is_none() {
            Mode::Fallback
        } else {
            Mode::ControllerGuided
        };
    }

    pub fn relay_list(&self) -> &[NodeId] {
        match (&self.mode, &self.table) {
            (Mode::ControllerGuided, Some(t)) => &t.entries,
            _ => &self.fallback_list,
        }
    }

    pub fn cluster_id(&self) -> Option<u16> {
        match (&self.mode, &self.table) {
            (Mode::ControllerGuided, Some(t)) => Some(t.cluster_id),
            _ => None,
        }
    }

    /// Dequeues up to `b_max` pending digests.
    pub fn batch_cycle(&mut self, b_max: usize) -> Vec<u32> {
        let k = b_max.min(self.pending.len());
        self.pending.drain(..k).collect()
    }

    /// First batch boundary at or after `t`.
    pub fn next_tick(&self, t: SimTime, delta: SimTime) -> SimTime {
        if delta == 0 {
            return t;
        }
        if t <= self.batch_phase {
            return self.batch_phase;
        }
        let k = (t - self.batch_phase).div_ceil(delta);
        self.batch_phase + k * delta
    }
}

/// Outburst targets: all peers except congested links, capped. If every
/// link is congested the full peer set is used rather than dropping the
/// outburst.
pub fn outburst_targets(peers: &[NodeId], congested: impl Fn(NodeId) -> bool, cap: usize) -> Vec<NodeId> {
    let mut l: Vec<NodeId> = peers.iter().copied().filter(|p| !congested(*p)).collect();
    if l.is_empty() && !peers.is_empty() {
        log::debug!("all outburst links congested; using every peer");
        l = peers.to_vec();
    }
    l.truncate(cap);
    l
}

/// A nonce-tagged receipt from another cluster triggers the kick-off.
pub fn should_kickoff(nonce_valid: bool, origin_cluster: u16, own_cluster: Option<u16>) -> bool {
    nonce_valid && own_cluster.is_some_and(|c| c != origin_cluster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::TAG_LEN;

    fn node() -> NodeState {
        let peers: Vec<NodeId> = (1..=40).map(NodeId).collect();
        NodeState::new(NodeId(0), &peers, 10, 0, 1)
    }

    #[test]
    fn batch_sizes() {
        let mut s = node();
        s.pending.extend([1, 2, 3]);
        assert_eq!(s.batch_cycle(8), vec![1, 2, 3]);
        s.pending.extend(0..20);
        assert_eq!(s.batch_cycle(8).len(), 8);
        assert_eq!(s.pending.len(), 12);
        assert!(s.batch_cycle(8).len() == 8 && s.pending.len() == 4);
    }

    #[test]
    fn batch_ticks_are_delta_apart() {
        let mut s = node();
        s.batch_phase = 150;
        let t1 = s.next_tick(1_000, 400_000);
        assert_eq!(t1, 150 + 400_000);
        assert_eq!(s.next_tick(t1 + 1, 400_000), t1 + 400_000);
        assert_eq!(s.next_tick(t1, 400_000), t1);
        assert_eq!(s.next_tick(77, 0), 77);
    }

    #[test]
    fn outburst_excludes_congested() {
        let peers: Vec<NodeId> = (0..64).map(NodeId).collect();
        let l = outburst_targets(&peers, |p| p.0 < 4, 128);
        assert_eq!(l.len(), 60);
        assert_eq!(outburst_targets(&peers, |_| false, 128).len(), 64);
        assert_eq!(outburst_targets(&peers, |_| true, 128).len(), 64);
        let many: Vec<NodeId> = (0..200).map(NodeId).collect();
        assert_eq!(outburst_targets(&many, |_| false, 128).len(), 128);
    }

    fn table(key: &AuthKey) -> RelayTable {
        let mut t = RelayTable {
            owner: NodeId(0),
            cluster_id: 2,
            entries: (1..=10).map(NodeId).collect(),
            near_count: 6,
            priorities: [0, 0],
            version: 1,
            tag: [0; TAG_LEN],
        };
        t.sign(key);
        t
    }

    #[test]
    fn fallback_after_silence() {
        let key = AuthKey::from_seed(3);
        let mut s = node();
        s.on_controller_message(0, Some(table(&key)), &key);
        assert_eq!(s.mode, Mode::ControllerGuided);
        let sec = 1_000_000;
        s.fallback_check(29 * sec, 30 * sec);
        assert_eq!(s.mode, Mode::ControllerGuided);
        s.fallback_check(31 * sec, 30 * sec);
        assert_eq!(s.mode, Mode::Fallback);
        assert_eq!(s.relay_list().len(), 10);
        assert_ne!(s.relay_list(), &table(&key).entries[..]);
        s.on_controller_message(32 * sec, None, &key);
        assert_eq!(s.mode, Mode::ControllerGuided);
        assert_eq!(s.relay_list(), &table(&key).entries[..]);
    }

    #[test]
    fn forged_table_ignored() {
        let key = AuthKey::from_seed(3);
        let mut s = node();
        let mut t = table(&key);
        t.entries[0] = NodeId(39);
        s.on_controller_message(0, Some(t), &key);
        assert!(s.table.is_none());
        assert_eq!(s.mode, Mode::Fallback);
    }

    #[test]
    fn kickoff_rule() {
        assert!(should_kickoff(true, 1, Some(2)));
        assert!(!should_kickoff(true, 2, Some(2)));
        assert!(!should_kickoff(false, 1, Some(2)));
        assert!(!should_kickoff(true, 1, None));
    }

    #[test]
    fn nonce_round_trip() {
        let key = AuthKey::from_seed(1);
        let n = OutburstNonce::mint(&key, 42, 7, 3);
        assert!(n.verify(&key, 42));
        assert!(!n.verify(&key, 43));
        assert!(!n.verify(&AuthKey::from_seed(2), 42));
    }

    #[test]
    fn tree_rootedness() {
        let mut r = TxRecord::new(0, NodeId(0), 0, 3, 36, 300);
        r.first_receipt[1] = 10;
        r.first_sender[1] = 0;
        r.first_receipt[2] = 20;
        r.first_sender[2] = 1;
        assert!(r.tree_is_rooted());
        r.first_sender[1] = 2;
        assert!(!r.tree_is_rooted());
    }
}
