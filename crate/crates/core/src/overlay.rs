//! Overlay graph and the per-packet latency model.
//!
//! One-way latency on an overlay edge is `prop(u,v) + q(u,v,t) + n(t)`: a fixed
//! symmetric propagation delay, a scripted queueing delay, and Gaussian
//! jitter, clamped to a positive floor.

use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng::{self, SimRng};
use crate::sim::{ms_to_us, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Undirected peer graph. Adjacency lists are sorted by id.
#[derive(Debug, Clone)]
pub struct Overlay {
    degree_cap: usize,
    adj: Vec<Vec<NodeId>>,
    /// Undirected edge id for each adjacency slot.
    adj_edge: Vec<Vec<u32>>,
    edges: Vec<(NodeId, NodeId)>,
}

impl Overlay {
    /// Builds an overlay from an explicit edge list. Duplicate edges are merged.
    pub fn from_edges(n: usize, degree_cap: usize, edges: &[(u32, u32)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Overlay("empty overlay".into()));
        }
        let mut adj: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        let mut seen = HashSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Overlay(format!("self-loop on n{a}")));
            }
            if a as usize >= n || b as usize >= n {
                return Err(Error::Overlay(format!("edge ({a},{b}) out of range")));
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                adj[a as usize].push(NodeId(b));
                adj[b as usize].push(NodeId(a));
            }
        }
        if let Some((v, l)) = adj.iter().enumerate().find(|(_, l)| l.len() > degree_cap) {
            return Err(Error::Overlay(format!(
                "n{v} has degree {} above cap {degree_cap}",
                l.len()
            )));
        }
        Ok(Self::from_adjacency(degree_cap, adj))
    }

    fn from_adjacency(degree_cap: usize, mut adj: Vec<Vec<NodeId>>) -> Self {
        for l in adj.iter_mut() {
            l.sort_unstable();
        }
        let mut edges = Vec::new();
        for (u, l) in adj.iter().enumerate() {
            for &v in l {
                if (u as u32) < v.0 {
                    edges.push((NodeId(u as u32), v));
                }
            }
        }
        let adj_edge = adj
            .iter()
            .enumerate()
            .map(|(u, l)| {
                l.iter()
                    .map(|&v| {
                        let key = (NodeId(u as u32).min(v), NodeId(u as u32).max(v));
                        edges.binary_search(&key).expect("edge indexed") as u32
                    })
                    .collect()
            })
            .collect();
        Overlay {
            degree_cap,
            adj,
            adj_edge,
            edges,
        }
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn degree_cap(&self) -> usize {
        self.degree_cap
    }

    pub fn peers(&self, v: NodeId) -> &[NodeId] {
        &self.adj[v.idx()]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adj[v.idx()].len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.n() as u32).map(NodeId)
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn edge_id(&self, u: NodeId, v: NodeId) -> Option<u32> {
        let l = self.adj.get(u.idx())?;
        l.binary_search(&v).ok().map(|i| self.adj_edge[u.idx()][i])
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.edge_id(u, v).is_some()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in &self.adj[u] {
                if !seen[v.idx()] {
                    seen[v.idx()] = true;
                    count += 1;
                    stack.push(v.idx());
                }
            }
        }
        count == n
    }
}

/// Seeded random overlay: a random spanning tree (keeps the graph connected)
/// topped up with random links until every node reaches `degree_cap` or no
/// eligible partner remains.
pub fn build_overlay(n: usize, degree_cap: usize, seed: u64) -> Result<Overlay> {
    if n < 2 {
        return Err(Error::Overlay(format!("need at least 2 nodes, got {n}")));
    }
    if degree_cap < 2 {
        return Err(Error::Overlay(format!(
            "degree cap must be at least 2, got {degree_cap}"
        )));
    }
    let mut rng = rng::stream(seed, "overlay.build", 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut adj: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    let mut links: HashSet<(usize, usize)> = HashSet::new();
    let link = |adj: &mut Vec<Vec<NodeId>>, links: &mut HashSet<(usize, usize)>, a: usize, b: usize| {
        links.insert((a.min(b), a.max(b)));
        adj[a].push(NodeId(b as u32));
        adj[b].push(NodeId(a as u32));
    };

    // spanning tree over the shuffled order
    for i in 1..n {
        let v = order[i];
        let mut parent = None;
        for _ in 0..32 {
            let u = order[rng.random_range(0..i)];
            if adj[u].len() < degree_cap {
                parent = Some(u);
                break;
            }
        }
        let u = parent.unwrap_or_else(|| {
            *order[..i]
                .iter()
                .find(|&&u| adj[u].len() < degree_cap)
                .expect("a tree with cap >= 2 always has an unsaturated node")
        });
        link(&mut adj, &mut links, u, v);
    }

    // top up towards the cap
    for &v in &order {
        while adj[v].len() < degree_cap {
            let mut partner = None;
            for _ in 0..64 {
                let u = rng.random_range(0..n);
                if u != v && adj[u].len() < degree_cap && !links.contains(&(u.min(v), u.max(v))) {
                    partner = Some(u);
                    break;
                }
            }
            if partner.is_none() {
                let start = rng.random_range(0..n);
                partner = (0..n).map(|i| (start + i) % n).find(|&u| {
                    u != v && adj[u].len() < degree_cap && !links.contains(&(u.min(v), u.max(v)))
                });
            }
            match partner {
                Some(u) => link(&mut adj, &mut links, u, v),
                None => break,
            }
        }
    }
    Ok(Overlay::from_adjacency(degree_cap, adj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub mu_ms: f64,
    pub sigma_ms: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        mu_ms: 0.0,
        sigma_ms: 0.0,
    };
}

/// Extra queueing delay on one edge during `[start, start + duration)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CongestionEpisode {
    pub u: u32,
    pub v: u32,
    pub start_ms: f64,
    pub duration_ms: f64,
    pub added_ms: f64,
}

#[derive(Debug, Clone)]
pub struct GeoParams {
    pub k_continents: usize,
    pub intra_range_ms: (f64, f64),
    pub inter_multiplier: (f64, f64),
    pub jitter: Jitter,
    pub floor_ms: f64,
}

impl Default for GeoParams {
    fn default() -> Self {
        GeoParams {
            k_continents: 3,
            intra_range_ms: (10.0, 60.0),
            inter_multiplier: (2.0, 5.0),
            jitter: Jitter {
                mu_ms: 0.0,
                sigma_ms: 5.0,
            },
            floor_ms: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Episode {
    start: SimTime,
    end: SimTime,
    added_ms: f64,
}

/// Link delays over a fixed overlay.
#[derive(Debug, Clone)]
pub struct LatencyField {
    adj: Vec<Vec<NodeId>>,
    adj_edge: Vec<Vec<u32>>,
    prop_ms: Vec<f64>,
    labels: Vec<u16>,
    positions: Vec<Vec3>,
    jitter: Jitter,
    floor_ms: f64,
    noise: Option<Normal<f64>>,
    episodes: Vec<Vec<Episode>>,
}

/// Rounds to whole microseconds so deterministic delays are exact in sim time.
fn quantize(ms: f64) -> f64 {
    (ms * 1000.0).round() / 1000.0
}

impl LatencyField {
    /// Field with explicit per-edge propagation delays, indexed like
    /// `overlay.edges()`.
    pub fn from_props(
        overlay: &Overlay,
        prop_ms: Vec<f64>,
        labels: Vec<u16>,
        jitter: Jitter,
        floor_ms: f64,
    ) -> Result<Self> {
        if prop_ms.len() != overlay.edges().len() {
            return Err(Error::Latency(format!(
                "{} delays for {} edges",
                prop_ms.len(),
                overlay.edges().len()
            )));
        }
        if let Some(p) = prop_ms.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
            return Err(Error::Latency(format!("propagation delay {p} must be positive")));
        }
        if labels.len() != overlay.n() {
            return Err(Error::Latency("one label per node required".into()));
        }
        if jitter.sigma_ms < 0.0 || !jitter.sigma_ms.is_finite() || !jitter.mu_ms.is_finite() {
            return Err(Error::Latency(format!("invalid jitter {jitter:?}")));
        }
        let noise = (jitter.sigma_ms > 0.0)
            .then(|| Normal::new(jitter.mu_ms, jitter.sigma_ms).expect("sigma checked"));
        Ok(LatencyField {
            adj: overlay.adj.clone(),
            adj_edge: overlay.adj_edge.clone(),
            prop_ms: prop_ms.into_iter().map(quantize).collect(),
            labels,
            positions: vec![Vec3::zeros(); overlay.n()],
            jitter,
            floor_ms,
            noise,
            episodes: vec![Vec::new(); overlay.edges().len()],
        })
    }

    /// Every edge gets the same delay; handy for hand-checkable scenarios.
    pub fn uniform(overlay: &Overlay, prop_ms: f64, jitter: Jitter) -> Result<Self> {
        Self::from_props(
            overlay,
            vec![prop_ms; overlay.edges().len()],
            vec![0; overlay.n()],
            jitter,
            1.0,
        )
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn edge_id(&self, u: NodeId, v: NodeId) -> Option<u32> {
        let l = self.adj.get(u.idx())?;
        l.binary_search(&v).ok().map(|i| self.adj_edge[u.idx()][i])
    }

    pub fn prop(&self, u: NodeId, v: NodeId) -> Result<f64> {
        self.edge_id(u, v)
            .map(|e| self.prop_ms[e as usize])
            .ok_or(Error::NotAnEdge(u, v))
    }

    pub fn prop_by_edge(&self, edge: u32) -> f64 {
        self.prop_ms[edge as usize]
    }

    /// Ground-truth continent label used by the generator.
    pub fn cluster_of(&self, v: NodeId) -> u16 {
        self.labels[v.idx()]
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Hidden geographic position the generator derived delays from.
    pub fn position(&self, v: NodeId) -> Vec3 {
        self.positions[v.idx()]
    }

    pub fn jitter(&self) -> Jitter {
        self.jitter
    }

    pub fn floor_ms(&self) -> f64 {
        self.floor_ms
    }

    pub fn add_episode(&mut self, ep: &CongestionEpisode) -> Result<()> {
        let (u, v) = (NodeId(ep.u), NodeId(ep.v));
        let e = self.edge_id(u, v).ok_or(Error::NotAnEdge(u, v))?;
        if ep.duration_ms < 0.0 || ep.added_ms < 0.0 || ep.start_ms < 0.0 {
            return Err(Error::Latency(format!("invalid congestion episode {ep:?}")));
        }
        let start = ms_to_us(ep.start_ms);
        self.episodes[e as usize].push(Episode {
            start,
            end: start + ms_to_us(ep.duration_ms),
            added_ms: ep.added_ms,
        });
        Ok(())
    }

    /// Scripted queueing delay on an edge at time `t`.
    pub fn queue_delay_by_edge(&self, edge: u32, t: SimTime) -> f64 {
        self.episodes[edge as usize]
            .iter()
            .filter(|e| e.start <= t && t < e.end)
            .map(|e| e.added_ms)
            .sum()
    }

    pub fn queue_delay(&self, u: NodeId, v: NodeId, t: SimTime) -> Result<f64> {
        let e = self.edge_id(u, v).ok_or(Error::NotAnEdge(u, v))?;
        Ok(self.queue_delay_by_edge(e, t))
    }

    /// One-way delay of a packet sent from `u` to `v` at time `t`.
    pub fn sample_latency<R: Rng + ?Sized>(
        &self,
        u: NodeId,
        v: NodeId,
        t: SimTime,
        rng: &mut R,
    ) -> Result<f64> {
        let e = self.edge_id(u, v).ok_or(Error::NotAnEdge(u, v))?;
        Ok(self.sample_edge(e, t, rng))
    }

    #[inline]
    pub fn sample_edge<R: Rng + ?Sized>(&self, edge: u32, t: SimTime, rng: &mut R) -> f64 {
        let noise = match &self.noise {
            Some(d) => d.sample(rng),
            None => self.jitter.mu_ms,
        };
        let q = if self.episodes[edge as usize].is_empty() {
            0.0
        } else {
            self.queue_delay_by_edge(edge, t)
        };
        (self.prop_ms[edge as usize] + q + noise).max(self.floor_ms)
    }

    /// Full digest/bitmap/body exchange: three independent one-way delays, or
    /// a single one when the body is pushed directly.
    pub fn tx_transfer_time<R: Rng + ?Sized>(
        &self,
        u: NodeId,
        v: NodeId,
        t: SimTime,
        body_direct: bool,
        rng: &mut R,
    ) -> Result<f64> {
        let e = self.edge_id(u, v).ok_or(Error::NotAnEdge(u, v))?;
        let legs = if body_direct { 1 } else { 3 };
        Ok((0..legs).map(|_| self.sample_edge(e, t, rng)).sum())
    }
}

/// Synthetic geo-distributed delays.
///
/// Nodes are split evenly into `k_continents` groups. Each node gets a
/// position in a unit disk around its continent's center, and
/// `prop(u,v) = lo + kappa * |pos_u - pos_v|` with `kappa = (hi - lo) / 2`, so
/// same-continent delays stay inside `intra_range_ms`. Continent centers are
/// placed so that the mean delay between continents `a` and `b` is a factor
/// `m_ab` drawn from `inter_multiplier` times the mean intra-continent delay.
pub fn generate_geo_latency(overlay: &Overlay, params: &GeoParams, seed: u64) -> Result<LatencyField> {
    let (lo, hi) = params.intra_range_ms;
    let (m_lo, m_hi) = params.inter_multiplier;
    if params.k_continents == 0 {
        return Err(Error::Latency("need at least one continent".into()));
    }
    if !(lo > 0.0) || !(hi >= lo) {
        return Err(Error::Latency(format!("invalid intra range ({lo}, {hi})")));
    }
    if !(m_lo >= 1.0) || !(m_hi >= m_lo) {
        return Err(Error::Latency(format!(
            "inter multiplier ({m_lo}, {m_hi}) must satisfy 1 <= lo <= hi"
        )));
    }
    let n = overlay.n();
    let k = params.k_continents.min(n);
    let mut rng = rng::stream(seed, "latency.geo", 0);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![0u16; n];
    for (i, &v) in order.iter().enumerate() {
        labels[v] = (i % k) as u16;
    }

    let kappa = (hi - lo) / 2.0;
    // mean distance between two uniform points of the unit disk
    let mean_disk_dist = 128.0 / (45.0 * std::f64::consts::PI);
    let mean_intra = lo + kappa * mean_disk_dist;
    let centers = place_centers(k, &mut rng, |rng| {
        let m = if m_hi > m_lo {
            rng.random_range(m_lo..=m_hi)
        } else {
            m_lo
        };
        if kappa > 0.0 {
            (m * mean_intra - lo) / kappa
        } else {
            0.0
        }
    });

    let positions: Vec<Vec3> = (0..n)
        .map(|v| {
            let (x, y) = loop {
                let x: f64 = rng.random_range(-1.0..=1.0);
                let y: f64 = rng.random_range(-1.0..=1.0);
                if x * x + y * y <= 1.0 {
                    break (x, y);
                }
            };
            centers[labels[v] as usize] + Vec3::new(x, y, 0.0)
        })
        .collect();

    let props: Vec<f64> = overlay
        .edges()
        .iter()
        .map(|&(u, v)| {
            let d = (positions[u.idx()] - positions[v.idx()]).norm();
            let p = lo + kappa * d;
            if labels[u.idx()] == labels[v.idx()] {
                p.min(hi)
            } else {
                p
            }
        })
        .collect();

    let mut field = LatencyField::from_props(overlay, props, labels, params.jitter, params.floor_ms)?;
    field.positions = positions;
    Ok(field)
}

/// Places `k` continent centers in 3-D whose pairwise distances follow the
/// drawn targets. Targets that violate the triangle inequality are redrawn; if
/// no realizable set turns up, classical MDS gives the closest 3-D layout.
fn place_centers(k: usize, rng: &mut SimRng, mut target: impl FnMut(&mut SimRng) -> f64) -> Vec<Vec3> {
    if k == 1 {
        return vec![Vec3::zeros()];
    }
    let draw = |rng: &mut SimRng, target: &mut dyn FnMut(&mut SimRng) -> f64| {
        let mut d = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in (a + 1)..k {
                let s = target(rng);
                d[(a, b)] = s;
                d[(b, a)] = s;
            }
        }
        d
    };
    let mut best = None;
    for _ in 0..200 {
        let d = draw(rng, &mut target);
        let (coords, residual) = classical_mds3(&d);
        if residual < 1e-9 {
            return coords;
        }
        if best.as_ref().is_none_or(|(_, r)| residual < *r) {
            best = Some((coords, residual));
        }
    }
    best.expect("at least one draw").0
}

/// Classical MDS into three dimensions. Returns the coordinates and the
/// largest relative distance error.
fn classical_mds3(d: &DMatrix<f64>) -> (Vec<Vec3>, f64) {
    let k = d.nrows();
    let d2 = d.map(|x| x * x);
    let j = DMatrix::<f64>::identity(k, k) - DMatrix::<f64>::from_element(k, k, 1.0 / k as f64);
    let b = -0.5 * &j * d2 * &j;
    let eig = SymmetricEigen::new(b);
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let coords: Vec<Vec3> = (0..k)
        .map(|row| {
            let mut p = Vec3::zeros();
            for (dim, &col) in idx.iter().take(3).enumerate() {
                let lambda = eig.eigenvalues[col].max(0.0);
                p[dim] = eig.eigenvectors[(row, col)] * lambda.sqrt();
            }
            p
        })
        .collect();
    let mut residual: f64 = 0.0;
    for a in 0..k {
        for b in (a + 1)..k {
            let got = (coords[a] - coords[b]).norm();
            let want = d[(a, b)];
            if want > 0.0 {
                residual = residual.max((got - want).abs() / want);
            }
        }
    }
    (coords, residual)
}
