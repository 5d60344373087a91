use rand::seq::IndexedRandom;
use rand::Rng;

use crate::overlay::{NodeId, Overlay};
use crate::rng;

/// Uniform sample of `min(fanout, |peers|)` distinct peers.
pub fn random_relay_list<R: Rng + ?Sized>(peers: &[NodeId], fanout: usize, rng: &mut R) -> Vec<NodeId> {
    peers.choose_multiple(rng, fanout.min(peers.len())).copied().collect()
}

/// One static random list per node, drawn from a per-node stream.
pub fn random_lists(overlay: &Overlay, fanout: usize, seed: u64, purpose: &str) -> Vec<Vec<NodeId>> {
    overlay
        .nodes()
        .map(|v| random_relay_list(overlay.peers(v), fanout, &mut rng::stream(seed, purpose, v.0 as u64)))
        .collect()
}
