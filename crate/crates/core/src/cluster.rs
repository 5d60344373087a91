//! K-means over coordinates and per-node relay tables.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::auth::{AuthKey, AuthTag, TAG_LEN};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::overlay::{NodeId, Overlay};
use crate::par;
use crate::rng;

pub const MAX_ITERATIONS: usize = 100;
pub const D_MAX: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<u16>,
    pub centroids: Vec<Vec3>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn label(&self, v: NodeId) -> u16 {
        self.labels[v.idx()]
    }

    /// Within-cluster sum of squared distances.
    pub fn wcss(&self, x: &[Vec3]) -> f64 {
        wcss(x, &self.labels, &self.centroids)
    }
}

/// Default cluster count `ceil(sqrt(n))`.
pub fn default_k(n: usize) -> usize {
    let mut k = (n as f64).sqrt().ceil() as usize;
    while k * k < n {
        k += 1;
    }
    while k > 1 && (k - 1) * (k - 1) >= n {
        k -= 1;
    }
    k.max(1)
}

fn wcss(x: &[Vec3], labels: &[u16], centroids: &[Vec3]) -> f64 {
    x.iter()
        .zip(labels)
        .map(|(p, &l)| (p - centroids[l as usize]).norm_squared())
        .sum()
}

fn nearest(p: &Vec3, centroids: &[Vec3]) -> u16 {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best as u16
}

fn kmeanspp<R: Rng + ?Sized>(x: &[Vec3], k: usize, rng: &mut R) -> Vec<Vec3> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(x[rng.random_range(0..x.len())]);
    let mut d2: Vec<f64> = x.iter().map(|p| (p - centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = x.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..x.len())
        };
        let c = x[pick];
        centroids.push(c);
        for (d, p) in d2.iter_mut().zip(x) {
            *d = d.min((p - c).norm_squared());
        }
    }
    centroids
}

/// Seeded k-means++ followed by Lloyd iterations.
pub fn kmeans_cluster(x: &[Vec3], k: usize, seed: u64) -> Result<ClusterAssignment> {
    if k == 0 {
        return Err(Error::Cluster("k must be at least 1".into()));
    }
    if x.len() < k {
        return Err(Error::Cluster(format!("{} points for {k} clusters", x.len())));
    }
    let mut rng = rng::stream(seed, "cluster.kmeanspp", 0);
    let init = kmeanspp(x, k, &mut rng);
    Ok(lloyd(x, init))
}

/// Lloyd iterations from the given centroids (used to warm-start from the
/// previous window's clustering).
pub fn kmeans_from(x: &[Vec3], centroids: &[Vec3]) -> Result<ClusterAssignment> {
    if centroids.is_empty() || x.len() < centroids.len() {
        return Err(Error::Cluster(format!(
            "{} points for {} clusters",
            x.len(),
            centroids.len()
        )));
    }
    Ok(lloyd(x, centroids.to_vec()))
}

fn lloyd(x: &[Vec3], mut centroids: Vec<Vec3>) -> ClusterAssignment {
    let k = centroids.len();
    let mut labels: Vec<u16> = par::map(x, |p| nearest(p, &centroids));
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![Vec3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (p, &l) in x.iter().zip(&labels) {
            sums[l as usize] += p;
            counts[l as usize] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        // empty clusters take the point farthest from its centroid; ties by index
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..x.len())
                    .filter(|&i| counts[labels[i] as usize] > 1)
                    .max_by(|&a, &b| {
                        let da = (x[a] - centroids[labels[a] as usize]).norm_squared();
                        let db = (x[b] - centroids[labels[b] as usize]).norm_squared();
                        da.total_cmp(&db).then(b.cmp(&a))
                    });
                if let Some(i) = far {
                    counts[labels[i] as usize] -= 1;
                    labels[i] = c as u16;
                    counts[c] = 1;
                    centroids[c] = x[i];
                }
            }
        }
        let next: Vec<u16> = par::map(x, |p| nearest(p, &centroids));
        if next == labels {
            break;
        }
        labels = next;
    }
    ClusterAssignment {
        k,
        labels,
        centroids,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayTable {
    pub owner: NodeId,
    pub cluster_id: u16,
    /// In-cluster entries first, then out-of-cluster entries.
    pub entries: Vec<NodeId>,
    pub near_count: u8,
    pub priorities: [u16; 2],
    pub version: u32,
    pub tag: AuthTag,
}

impl RelayTable {
    pub fn near(&self) -> &[NodeId] {
        &self.entries[..self.near_count as usize]
    }

    pub fn far(&self) -> &[NodeId] {
        &self.entries[self.near_count as usize..]
    }

    /// Bytes covered by the authenticity tag.
    pub fn signed_payload(&self) -> Vec<u8> {
        let mut b = encode_body(self);
        b.extend_from_slice(&self.owner.0.to_le_bytes());
        b
    }

    pub fn sign(&mut self, key: &AuthKey) {
        self.tag = key.tag("relay-table", self.version as u64, &self.signed_payload());
    }

    pub fn verify(&self, key: &AuthKey) -> bool {
        key.verify("relay-table", self.version as u64, &self.signed_payload(), &self.tag)
    }

    pub fn same_routing(&self, other: &RelayTable) -> bool {
        self.cluster_id == other.cluster_id
            && self.entries == other.entries
            && self.near_count == other.near_count
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len(self.entries.len())
    }
}

pub const fn encoded_len(entries: usize) -> usize {
    4 + 2 + 1 + 4 * entries + 4 + TAG_LEN
}

fn encode_body(t: &RelayTable) -> Vec<u8> {
    let mut b = Vec::with_capacity(t.encoded_len());
    b.extend_from_slice(&t.version.to_be_bytes());
    b.extend_from_slice(&t.cluster_id.to_be_bytes());
    b.push((t.near_count << 4) | t.entries.len() as u8);
    for e in &t.entries {
        b.extend_from_slice(&e.0.to_be_bytes());
    }
    for p in t.priorities {
        b.extend_from_slice(&p.to_be_bytes());
    }
    b
}

/// `version(4) | cluster(2) | count(1) | ids(4 each) | priorities(2x2) | tag(32)`.
/// The count byte carries the near-entry count in its high nibble and the
/// total entry count in its low nibble.
pub fn encode_relay_table(t: &RelayTable) -> Vec<u8> {
    debug_assert!(t.entries.len() <= D_MAX && t.near_count as usize <= t.entries.len());
    let mut b = encode_body(t);
    b.extend_from_slice(&t.tag);
    b
}

/// Inverse of [`encode_relay_table`]; the owner is not on the wire.
pub fn decode_relay_table(owner: NodeId, bytes: &[u8]) -> Result<RelayTable> {
    if bytes.len() < encoded_len(0) {
        return Err(Error::Decode(format!("{} bytes is too short", bytes.len())));
    }
    let version = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let cluster_id = u16::from_be_bytes(bytes[4..6].try_into().unwrap());
    let count = bytes[6];
    let total = (count & 0x0f) as usize;
    let near_count = count >> 4;
    if total > D_MAX || near_count as usize > total {
        return Err(Error::Decode(format!("bad count byte {count:#04x}")));
    }
    if bytes.len() != encoded_len(total) {
        return Err(Error::Decode(format!(
            "expected {} bytes for {total} entries, got {}",
            encoded_len(total),
            bytes.len()
        )));
    }
    let mut at = 7;
    let entries = (0..total)
        .map(|_| {
            let id = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
            at += 4;
            NodeId(id)
        })
        .collect();
    let p0 = u16::from_be_bytes(bytes[at..at + 2].try_into().unwrap());
    let p1 = u16::from_be_bytes(bytes[at + 2..at + 4].try_into().unwrap());
    at += 4;
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&bytes[at..]);
    Ok(RelayTable {
        owner,
        cluster_id,
        entries,
        near_count,
        priorities: [p0, p1],
        version,
        tag,
    })
}

/// Relay table for `v`: the `d_near` in-cluster peers closest in coordinate
/// space (ties by id) and `d_far` out-of-cluster peers in a per-node random
/// order fixed by `seed`. A short in-cluster pool is topped up with the
/// closest remaining out-of-cluster peers, a short out-of-cluster pool with
/// the next closest in-cluster peers. The table is unsigned (version 0).
pub fn build_relay_table(
    v: NodeId,
    assignment: &ClusterAssignment,
    x: &[Vec3],
    overlay: &Overlay,
    d_near: usize,
    d_far: usize,
    seed: u64,
) -> Result<RelayTable> {
    if d_near + d_far > D_MAX {
        return Err(Error::RelayTable(
            v,
            format!("d_near + d_far = {} exceeds {D_MAX}", d_near + d_far),
        ));
    }
    let peers = overlay.peers(v);
    if peers.is_empty() {
        return Err(Error::RelayTable(v, "node has no peers".into()));
    }
    let own = assignment.label(v);
    let xv = x[v.idx()];
    let by_distance = |a: &NodeId, b: &NodeId| {
        let da = (x[a.idx()] - xv).norm_squared();
        let db = (x[b.idx()] - xv).norm_squared();
        da.total_cmp(&db).then(a.cmp(b))
    };
    let mut inside: Vec<NodeId> = peers
        .iter()
        .copied()
        .filter(|p| assignment.label(*p) == own)
        .collect();
    inside.sort_by(by_distance);

    let mut order = peers.to_vec();
    order.shuffle(&mut rng::stream(seed, "relay.far", v.0 as u64));
    let outside_random: Vec<NodeId> = order
        .into_iter()
        .filter(|p| assignment.label(*p) != own)
        .collect();

    let want = (d_near + d_far).min(peers.len());
    let near: Vec<NodeId> = inside.iter().take(d_near).copied().collect();
    let mut far: Vec<NodeId> = outside_random.iter().take(d_far).copied().collect();

    let mut entries = near.clone();
    let short_near = d_near - near.len();
    if short_near > 0 {
        let mut rest: Vec<NodeId> = outside_random
            .iter()
            .filter(|p| !far.contains(p))
            .copied()
            .collect();
        rest.sort_by(by_distance);
        far.extend(rest.into_iter().take(short_near));
    }
    let mut near_count = near.len();
    let room = want.saturating_sub(near.len() + far.len());
    if room > 0 {
        let extra: Vec<NodeId> = inside.iter().skip(near.len()).take(room).copied().collect();
        near_count += extra.len();
        entries.extend(extra);
    }
    entries.extend(far);
    Ok(RelayTable {
        owner: v,
        cluster_id: own,
        entries,
        near_count: near_count as u8,
        priorities: [0, 0],
        version: 0,
        tag: [0; TAG_LEN],
    })
}
