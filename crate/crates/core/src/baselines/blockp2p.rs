use crate::overlay::{LatencyField, NodeId, Overlay};

/// The `fanout` peers with the smallest measured delay, ties by id.
pub fn lowest_delay_list(peers: &[NodeId], fanout: usize, delay: impl Fn(NodeId) -> f64) -> Vec<NodeId> {
    let mut scored: Vec<(f64, NodeId)> = peers.iter().map(|&p| (delay(p), p)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(fanout).map(|(_, p)| p).collect()
}

/// Lists fixed at start-up from propagation delays.
pub fn blockp2p_relay_list(v: NodeId, overlay: &Overlay, field: &LatencyField, fanout: usize) -> Vec<NodeId> {
    lowest_delay_list(overlay.peers(v), fanout, |p| field.prop(v, p).expect("peer is an edge"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::Jitter;
    use crate::rng;
    use rand::seq::SliceRandom;

    #[test]
    fn bottom_eight_matches_sort_oracle() {
        let edges: Vec<(u32, u32)> = (1..=20).map(|i| (0, i)).collect();
        let o = Overlay::from_edges(21, 64, &edges).unwrap();
        let mut props: Vec<f64> = (0..20).map(|i| 10.0 + 3.0 * i as f64).collect();
        props.shuffle(&mut rng::stream(3, "t", 0));
        let f = LatencyField::from_props(&o, props.clone(), vec![0; 21], Jitter::NONE, 1.0).unwrap();
        let got = blockp2p_relay_list(NodeId(0), &o, &f, 8);
        let mut oracle: Vec<(f64, u32)> = (1..=20u32).map(|p| (f.prop(NodeId(0), NodeId(p)).unwrap(), p)).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<NodeId> = oracle.iter().take(8).map(|x| NodeId(x.1)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn short_pool_and_ties() {
        let peers = [NodeId(5), NodeId(2), NodeId(9)];
        assert_eq!(lowest_delay_list(&peers, 8, |_| 1.0), vec![NodeId(2), NodeId(5), NodeId(9)]);
    }

    #[test]
    fn forged_measurements_lock_in() {
        let peers: Vec<NodeId> = (1..=10).map(NodeId).collect();
        // node 10 is far away but claims to be closest
        let l = lowest_delay_list(&peers, 3, |p| if p == NodeId(10) { 1.0 } else { 10.0 * p.0 as f64 });
        assert_eq!(l[0], NodeId(10));
    }
}
