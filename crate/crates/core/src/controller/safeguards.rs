//! Filters that keep forged delay reports from dragging the embedding.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::geom::Vec3;
use crate::overlay::NodeId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeguardParams {
    pub f_max_ms: f64,
    pub mad_k: f64,
    pub window: usize,
    /// History length below which the deviation test is not applied.
    pub min_history: usize,
    pub e_stable: f64,
    pub f_c_ms: f64,
    pub t_drift_ms: f64,
    pub rho: f64,
}

impl Default for SafeguardParams {
    fn default() -> Self {
        SafeguardParams {
            f_max_ms: 100.0,
            mad_k: 8.0,
            window: 32,
            min_history: 4,
            e_stable: 0.30,
            f_c_ms: 75.0,
            t_drift_ms: 50.0,
            rho: 500.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForceVerdict {
    Accept(Vec3),
    Reject,
}

/// Clip a force to magnitude `f_max`. Rounding can leave a clipped force a
/// few ulps above `f_max`; such forces count as already clipped.
pub fn clip_force(force: Vec3, f_max: f64) -> Vec3 {
    let m = force.norm();
    if m > f_max * (1.0 + 4.0 * f64::EPSILON) {
        force * (f_max / m)
    } else {
        force
    }
}

#[derive(Debug, Clone)]
enum Undo {
    Pushed { key: (u32, u32), popped: Option<f64> },
    Flagged(u32),
}

/// Sliding windows of accepted force magnitudes per directed pair, plus the
/// flag counts and blacklist.
#[derive(Debug, Clone, Default)]
pub struct ForceHistory {
    windows: HashMap<(u32, u32), VecDeque<f64>>,
    pub flags: HashMap<NodeId, u32>,
    pub blacklist: HashSet<NodeId>,
    journal: Vec<Undo>,
}

impl ForceHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn window(&self, node: NodeId, neighbor: NodeId) -> Option<&VecDeque<f64>> {
        self.windows.get(&(node.0, neighbor.0))
    }

    pub fn flag(&mut self, v: NodeId) {
        *self.flags.entry(v).or_default() += 1;
        self.journal.push(Undo::Flagged(v.0));
    }

    pub fn flag_count(&self, v: NodeId) -> u32 {
        self.flags.get(&v).copied().unwrap_or(0)
    }

    /// Starts recording changes so they can be rolled back.
    pub fn begin(&mut self) {
        self.journal.clear();
    }

    /// Reverts every change since [`ForceHistory::begin`].
    pub fn rollback(&mut self) {
        while let Some(u) = self.journal.pop() {
            match u {
                Undo::Pushed { key, popped } => {
                    if let Some(w) = self.windows.get_mut(&key) {
                        w.pop_back();
                        if let Some(p) = popped {
                            w.push_front(p);
                        }
                    }
                }
                Undo::Flagged(v) => {
                    let v = NodeId(v);
                    if let Some(c) = self.flags.get_mut(&v) {
                        *c -= 1;
                        if *c == 0 {
                            self.flags.remove(&v);
                        }
                    }
                }
            }
        }
    }

    pub fn commit(&mut self) {
        self.journal.clear();
    }
}

/// Force sanity filter: clip to `f_max`, then reject when the clipped
/// magnitude exceeds `median + mad_k * MAD` of the pair's recent accepted
/// magnitudes. Rejections flag the neighbor; accepted magnitudes join the
/// window.
pub fn filter_force(
    history: &mut ForceHistory,
    params: &SafeguardParams,
    node: NodeId,
    neighbor: NodeId,
    force: Vec3,
) -> ForceVerdict {
    let clipped = clip_force(force, params.f_max_ms);
    let mag = clipped.norm();
    let key = (node.0, neighbor.0);
    if let Some(w) = history.windows.get(&key) {
        if w.len() >= params.min_history {
            let vals: Vec<f64> = w.iter().copied().collect();
            let (med, mad) = crate::stats::median_mad(&vals).expect("non-empty window");
            if mag > med + params.mad_k * mad {
                history.flag(neighbor);
                return ForceVerdict::Reject;
            }
        }
    }
    let w = history.windows.entry(key).or_default();
    w.push_back(mag);
    let popped = if w.len() > params.window { w.pop_front() } else { None };
    history.journal.push(Undo::Pushed { key, popped });
    ForceVerdict::Accept(clipped)
}

/// Stability cap: once a node's error estimate is below `e_stable`, a shift
/// longer than `f_c` is refused. Returns the allowed shift and whether it was
/// refused.
pub fn apply_stability_cap(err_estimate: f64, shift: Vec3, params: &SafeguardParams) -> (Vec3, bool) {
    if err_estimate < params.e_stable && shift.norm() > params.f_c_ms {
        (Vec3::zeros(), true)
    } else {
        (shift, false)
    }
}

/// Restoring strength `(|x| / rho)^2`.
pub fn gravity_term(x: &Vec3, rho: f64) -> f64 {
    let r = x.norm() / rho;
    r * r
}

/// Moves `x` towards the origin by its gravity term (in ms).
pub fn apply_gravity(x: &Vec3, rho: f64) -> Vec3 {
    let g = gravity_term(x, rho);
    match crate::geom::unit(x) {
        Some(u) => {
            let pull = g.min(x.norm());
            x - u * pull
        }
        None => *x,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftVerdict {
    Ok,
    /// Centroid beyond the threshold; the culprit is the candidate whose
    /// force points most along the drift (none if no candidates were given).
    Blacklist { centroid: Vec3, culprit: Option<NodeId> },
}

/// Centroid check over a coordinate sample. `candidates` pairs each suspect
/// with the aggregate force it exerted this window.
pub fn centroid_drift_check(sample: &[Vec3], candidates: &[(NodeId, Vec3)], t_drift_ms: f64) -> DriftVerdict {
    if sample.is_empty() {
        return DriftVerdict::Ok;
    }
    let c = crate::geom::centroid(sample);
    if c.norm() <= t_drift_ms {
        return DriftVerdict::Ok;
    }
    let dir = c / c.norm();
    let culprit = candidates
        .iter()
        .filter(|(_, f)| f.dot(&dir) > 0.0)
        .max_by(|a, b| a.1.dot(&dir).total_cmp(&b.1.dot(&dir)).then(b.0.cmp(&a.0)))
        .map(|(v, _)| *v);
    DriftVerdict::Blacklist { centroid: c, culprit }
}
