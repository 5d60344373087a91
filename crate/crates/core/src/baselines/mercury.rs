//! Decentralized coordinates with peer-side clustering and a source
//! outburst.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vivaldi::{mercury_vivaldi_step, VivaldiCoord, VivaldiParams};
use super::RelayPolicy;
use crate::cluster::{default_k, kmeans_cluster};
use crate::geom::Vec3;
use crate::overlay::{NodeId, Overlay};
use crate::reach::repair_reachability;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MercuryParams {
    pub near: usize,
    pub far: usize,
    pub outburst_cap: usize,
    pub probe_interval_ms: f64,
    pub recluster_ms: f64,
    /// A node switches to its clustered list once its local error is below
    /// this value.
    pub converged_error: f64,
    pub k_clusters: Option<usize>,
    pub probe_bytes: u64,
    pub vivaldi: VivaldiParams,
}

impl Default for MercuryParams {
    fn default() -> Self {
        MercuryParams {
            near: 6,
            far: 2,
            outburst_cap: 128,
            probe_interval_ms: 1000.0,
            recluster_ms: 10_000.0,
            converged_error: 0.5,
            k_clusters: None,
            probe_bytes: 48,
            vivaldi: VivaldiParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mercury {
    pub params: MercuryParams,
    pub coords: Vec<VivaldiCoord>,
    /// Per node, the coordinate each peer last claimed during a probe
    /// exchange, aligned with `overlay.peers(v)`.
    known: Vec<Vec<Option<Vec3>>>,
    /// Lists in use: the clustered list for nodes that had converged at the
    /// last re-clustering, the cold-start list otherwise.
    active: Vec<Vec<NodeId>>,
    clustered: Vec<bool>,
    fallback: Vec<Vec<NodeId>>,
    seed: u64,
}

impl Mercury {
    pub fn new(overlay: &Overlay, params: MercuryParams, seed: u64) -> Self {
        let mut fallback = super::random::random_lists(overlay, params.near + params.far, seed, "mercury.coldstart");
        repair_reachability(&mut fallback, overlay, params.near + params.far, |_| 0);
        Mercury {
            coords: vec![VivaldiCoord::origin(&params.vivaldi); overlay.n()],
            known: overlay.nodes().map(|v| vec![None; overlay.degree(v)]).collect(),
            active: fallback.clone(),
            clustered: vec![false; overlay.n()],
            fallback,
            params,
            seed,
        }
    }

    /// Whether `v` relays over its clustered list.
    pub fn converged(&self, v: NodeId) -> bool {
        self.clustered[v.idx()]
    }

    /// Number of peers whose coordinate `v` has heard.
    pub fn known_peers(&self, v: NodeId) -> usize {
        self.known[v.idx()].iter().filter(|c| c.is_some()).count()
    }

    /// Every node probes one random peer. `measure(u, v)` returns the delay
    /// `u` observes to `v`, `report(v)` the coordinate `v` claims. Both ends
    /// of a probe learn the other's claimed coordinate. Returns the number of
    /// probes sent.
    pub fn probe_round<R: Rng + ?Sized>(
        &mut self,
        overlay: &Overlay,
        rng: &mut R,
        mut measure: impl FnMut(NodeId, NodeId, &mut R) -> f64,
        report: impl Fn(NodeId, VivaldiCoord) -> VivaldiCoord,
    ) -> usize {
        let mut probes = 0;
        for v in overlay.nodes() {
            let peers = overlay.peers(v);
            if peers.is_empty() {
                continue;
            }
            let j = rng.random_range(0..peers.len());
            let p = peers[j];
            let rtt = measure(v, p, rng);
            let claimed = report(p, self.coords[p.idx()]);
            let mine = report(v, self.coords[v.idx()]);
            self.known[v.idx()][j] = Some(claimed.x);
            if let Some(i) = overlay.peers(p).iter().position(|&q| q == v) {
                self.known[p.idx()][i] = Some(mine.x);
            }
            self.coords[v.idx()] = mercury_vivaldi_step(self.coords[v.idx()], claimed, rtt, &self.params.vivaldi, rng);
            probes += 1;
        }
        probes
    }

    /// Every node re-clusters its own view: its coordinate plus the
    /// coordinates its peers last claimed. Nodes whose local error is below
    /// the convergence threshold switch to the resulting list; the mix of
    /// clustered and cold-start lists is then repaired as a whole.
    pub fn recluster(&mut self, overlay: &Overlay) {
        let n = overlay.n();
        let this = &*self;
        let tables: Vec<Option<(Vec<NodeId>, usize)>> = crate::par::map_range(n, |i| {
            let v = NodeId(i as u32);
            if this.coords[i].err >= this.params.converged_error {
                return None;
            }
            this.local_list(v, overlay)
        });
        let mut protected = vec![0; n];
        for (i, t) in tables.into_iter().enumerate() {
            self.clustered[i] = t.is_some();
            match t {
                Some((entries, near_count)) => {
                    self.active[i] = entries;
                    protected[i] = near_count;
                }
                None => self.active[i] = self.fallback[i].clone(),
            }
        }
        let cap = self.params.near + self.params.far;
        repair_reachability(&mut self.active, overlay, cap, |v| protected[v.idx()]);
    }

    /// K-means over `v`'s local view, then the `near` closest known peers in
    /// `v`'s cluster and `far` random peers outside it. Peers whose
    /// coordinate `v` has never heard count as outside. Short pools backfill
    /// from each other.
    fn local_list(&self, v: NodeId, overlay: &Overlay) -> Option<(Vec<NodeId>, usize)> {
        let peers = overlay.peers(v);
        let own = self.coords[v.idx()].x;
        let mut points = vec![own];
        let mut seen = Vec::new();
        for (p, c) in peers.iter().zip(&self.known[v.idx()]) {
            if let Some(c) = c {
                points.push(*c);
                seen.push(*p);
            }
        }
        if seen.is_empty() {
            return None;
        }
        let k = self.params.k_clusters.unwrap_or_else(|| default_k(points.len())).clamp(1, points.len());
        let a = kmeans_cluster(&points, k, self.seed ^ ((v.0 as u64) << 20)).ok()?;
        let mine = a.labels[0];
        let dist = |i: usize| (points[i + 1] - own).norm_squared();
        let mut inside: Vec<usize> = (0..seen.len()).filter(|&i| a.labels[i + 1] == mine).collect();
        inside.sort_by(|&x, &y| dist(x).total_cmp(&dist(y)).then(seen[x].cmp(&seen[y])));

        let want = (self.params.near + self.params.far).min(peers.len());
        let mut entries: Vec<NodeId> = inside.iter().take(self.params.near).map(|&i| seen[i]).collect();
        let mut outside: Vec<NodeId> = peers.iter().copied().filter(|p| !inside.iter().any(|&i| seen[i] == *p)).collect();
        outside.shuffle(&mut rng::stream(self.seed, "mercury.far", v.0 as u64));
        let far_room = want.saturating_sub(entries.len()).min(outside.len());
        let mut near_count = entries.len();
        let extra_near = want.saturating_sub(entries.len() + far_room);
        let more: Vec<NodeId> = inside.iter().skip(entries.len()).take(extra_near).map(|&i| seen[i]).collect();
        near_count += more.len();
        entries.extend(more);
        entries.extend(outside.into_iter().take(far_room));
        Some((entries, near_count))
    }

    pub fn outburst_fanout(&self, overlay: &Overlay, v: NodeId) -> usize {
        overlay.degree(v).min(self.params.outburst_cap)
    }
}

impl RelayPolicy for Mercury {
    fn relay_list(&self, v: NodeId) -> &[NodeId] {
        &self.active[v.idx()]
    }
}
