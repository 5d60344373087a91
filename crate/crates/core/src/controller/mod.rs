//! The logically centralized controller.
//!
//! Every window it ingests one-way delay telemetry, filters implausible
//! samples, updates the global embedding, re-clusters, and emits signed
//! coordinate deltas and relay tables.

pub mod bootstrap;
pub mod embedding;
pub mod matrix;
pub mod safeguards;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::auth::AuthKey;
use crate::cluster::{build_relay_table, D_MAX, kmeans_cluster, kmeans_from, ClusterAssignment, RelayTable};
use crate::error::Result;
use crate::geom::{random_in_ball, Vec3};
use crate::overlay::{NodeId, Overlay};
use crate::reach::repair_reachability;
use crate::rng::{self, SimRng};
use crate::sim::{ms_to_us, SimTime};

pub use embedding::{centralized_vivaldi_update, embedding_objective, Coordinate, SignedDelta};
pub use matrix::LatencyMatrix;
pub use safeguards::{
    apply_stability_cap, centroid_drift_check, filter_force, gravity_term, DriftVerdict, ForceHistory,
    ForceVerdict, SafeguardParams,
};

use embedding::{cg_steps, deltas_between, node_errors, pairs_of, Pair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CongestionRule {
    /// Queueing delay above the window's percentile of edge queueing delays.
    #[default]
    Percentile,
    /// Queueing share `q / (q + prop)` above the utilization threshold.
    Utilization,
}

#[derive(Debug, Clone)]
pub struct ControllerParams {
    pub theta_ms: f64,
    pub epsilon_ms: f64,
    pub k_observations: usize,
    pub safeguards: SafeguardParams,
    pub window_reject_fraction: f64,
    pub k_clusters: usize,
    pub d_near: usize,
    pub d_far: usize,
    pub cg_iterations: usize,
    pub bootstrap: bool,
    pub landmarks: usize,
    pub bootstrap_refine: usize,
    pub centroid_sample: usize,
    pub congestion_rule: CongestionRule,
    pub congestion_percentile: f64,
    pub utilization_threshold: f64,
}

impl ControllerParams {
    pub fn defaults_for(n: usize) -> Self {
        ControllerParams {
            theta_ms: 2000.0,
            epsilon_ms: 5.0,
            k_observations: 8,
            safeguards: SafeguardParams::default(),
            window_reject_fraction: 0.30,
            k_clusters: crate::cluster::default_k(n),
            d_near: 6,
            d_far: 4,
            cg_iterations: 2,
            bootstrap: true,
            landmarks: 24,
            bootstrap_refine: 50,
            centroid_sample: 128,
            congestion_rule: CongestionRule::Percentile,
            congestion_percentile: 70.0,
            utilization_threshold: 0.70,
        }
    }
}

/// One telemetry sample: delay of a packet from `u` to `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Telemetry {
    pub u: NodeId,
    pub v: NodeId,
    pub delay_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TickOutput {
    pub window: u64,
    pub discarded: bool,
    pub samples: usize,
    pub rejected: usize,
    pub malformed: usize,
    pub deltas: Vec<SignedDelta>,
    /// Tables whose routing changed this window, already signed.
    pub tables: Vec<RelayTable>,
    pub capped: usize,
    pub blacklisted: Option<NodeId>,
}

/// Edges flagged congested: queueing delay strictly above the given
/// percentile of all edge queueing delays, or (utilization rule) queueing
/// share above the threshold.
pub fn mark_congested(queue_ms: &[f64], prop_ms: &[f64], rule: CongestionRule, percentile: f64, threshold: f64) -> Vec<bool> {
    if queue_ms.is_empty() {
        return Vec::new();
    }
    match rule {
        CongestionRule::Percentile => {
            let cut = crate::stats::percentile(queue_ms, percentile).expect("non-empty");
            queue_ms.iter().map(|&q| q > cut).collect()
        }
        CongestionRule::Utilization => queue_ms
            .iter()
            .zip(prop_ms)
            .map(|(&q, &p)| q > 0.0 && q / (q + p) > threshold)
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct Controller {
    params: ControllerParams,
    seed: u64,
    key: AuthKey,
    window: u64,
    x: Vec<Vec3>,
    err: Vec<f64>,
    published: Vec<Vec3>,
    matrix: LatencyMatrix,
    history: ForceHistory,
    assignment: Option<ClusterAssignment>,
    tables: Vec<Option<RelayTable>>,
    congested: Vec<bool>,
    bootstrapped: bool,
    rng: SimRng,
}

impl Controller {
    pub fn new(n: usize, params: ControllerParams, seed: u64) -> Self {
        let mut r = rng::stream(seed, "controller.init", 0);
        let x: Vec<Vec3> = (0..n).map(|_| random_in_ball(&mut r, 1.0)).collect();
        Controller {
            key: AuthKey::from_seed(seed),
            matrix: LatencyMatrix::new(params.k_observations),
            params,
            seed,
            window: 0,
            published: x.clone(),
            err: vec![f64::INFINITY; n],
            x,
            history: ForceHistory::new(),
            assignment: None,
            tables: vec![None; n],
            congested: Vec::new(),
            bootstrapped: false,
            rng: rng::stream(seed, "controller.sample", 0),
        }
    }

    pub fn key(&self) -> &AuthKey {
        &self.key
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.x
    }

    pub fn coordinate(&self, v: NodeId) -> Coordinate {
        Coordinate::new(self.x[v.idx()], self.err[v.idx()])
    }

    pub fn table(&self, v: NodeId) -> Option<&RelayTable> {
        self.tables[v.idx()].as_ref()
    }

    pub fn assignment(&self) -> Option<&ClusterAssignment> {
        self.assignment.as_ref()
    }

    pub fn matrix(&self) -> &LatencyMatrix {
        &self.matrix
    }

    pub fn history(&self) -> &ForceHistory {
        &self.history
    }

    pub fn is_congested(&self, edge: u32) -> bool {
        self.congested.get(edge as usize).copied().unwrap_or(false)
    }

    pub fn congested(&self) -> &[bool] {
        &self.congested
    }

    /// Replaces the congestion flags from a snapshot of true per-edge
    /// queueing delays.
    pub fn observe_queues(&mut self, queue_ms: &[f64], prop_ms: &[f64]) {
        self.congested = mark_congested(
            queue_ms,
            prop_ms,
            self.params.congestion_rule,
            self.params.congestion_percentile,
            self.params.utilization_threshold,
        );
    }

    fn usable_pairs(&self) -> Result<Vec<Pair>> {
        let bl = &self.history.blacklist;
        Ok(pairs_of(&self.matrix, self.x.len())?
            .into_iter()
            .filter(|p| !bl.contains(&NodeId(p.u)) && !bl.contains(&NodeId(p.v)))
            .collect())
    }

    /// One controller window.
    pub fn tick(&mut self, t: SimTime, samples: &[Telemetry], overlay: &Overlay) -> Result<TickOutput> {
        self.window += 1;
        let mut out = TickOutput {
            window: self.window,
            ..TickOutput::default()
        };
        let n = self.x.len();

        if !self.bootstrapped && !samples.is_empty() {
            for s in samples {
                if self.matrix.ingest(s.u, s.v, s.delay_ms, t).is_err() {
                    out.malformed += 1;
                }
            }
            out.samples = samples.len();
            let pairs = self.usable_pairs()?;
            if self.params.bootstrap {
                self.x = bootstrap::bootstrap_coordinates(
                    n,
                    &pairs,
                    self.params.landmarks,
                    self.params.bootstrap_refine,
                    self.seed,
                );
            } else {
                cg_steps(&mut self.x, &pairs, self.params.cg_iterations);
            }
            self.err = node_errors(&self.x, &pairs);
            self.bootstrapped = true;
            // seed the force windows with residuals under the new placement
            for s in samples {
                if s.delay_ms >= 0.0 && s.delay_ms.is_finite() {
                    let f = self.force(s);
                    filter_force(&mut self.history, &self.params.safeguards, s.u, s.v, f);
                }
            }
            self.history.commit();
            self.finish_window(&mut out, overlay)?;
            return Ok(out);
        }

        // sanity filter, then ingest what survived
        self.history.begin();
        let mut receipts = Vec::with_capacity(samples.len());
        let mut exerted = vec![Vec3::zeros(); n];
        let mut strongest: Vec<Option<(NodeId, f64)>> = vec![None; n];
        for s in samples {
            out.samples += 1;
            if !(s.delay_ms >= 0.0) || !s.delay_ms.is_finite() {
                out.malformed += 1;
                continue;
            }
            if self.history.blacklist.contains(&s.u) || self.history.blacklist.contains(&s.v) {
                continue;
            }
            let f = self.force(s);
            match filter_force(&mut self.history, &self.params.safeguards, s.u, s.v, f) {
                ForceVerdict::Reject => out.rejected += 1,
                ForceVerdict::Accept(fc) => {
                    exerted[s.v.idx()] += fc;
                    let m = fc.norm();
                    if strongest[s.u.idx()].is_none_or(|(_, b)| m > b) {
                        strongest[s.u.idx()] = Some((s.v, m));
                    }
                    receipts.push(self.matrix.ingest(s.u, s.v, s.delay_ms, t)?);
                }
            }
        }
        let judged = out.samples - out.malformed;
        if judged > 0 && out.rejected as f64 > self.params.window_reject_fraction * judged as f64 {
            for r in receipts.into_iter().rev() {
                self.matrix.undo(r);
            }
            self.history.rollback();
            out.discarded = true;
            return Ok(out);
        }
        self.history.commit();

        let horizon = ms_to_us(3.0 * self.params.theta_ms);
        self.matrix.evict_older_than(t.saturating_sub(horizon));
        let pairs = self.usable_pairs()?;
        if pairs.is_empty() {
            self.finish_window(&mut out, overlay)?;
            return Ok(out);
        }
        self.err = node_errors(&self.x, &pairs);
        let before = self.x.clone();
        cg_steps(&mut self.x, &pairs, self.params.cg_iterations);

        let sg = self.params.safeguards;
        for i in 0..n {
            let shift = self.x[i] - before[i];
            let (allowed, capped) = apply_stability_cap(self.err[i], shift, &sg);
            if capped {
                out.capped += 1;
                if let Some((peer, _)) = strongest[i] {
                    self.history.flag(peer);
                }
            }
            self.x[i] = safeguards::apply_gravity(&(before[i] + allowed), sg.rho);
        }
        self.history.commit();

        let m = self.params.centroid_sample.min(n);
        if m > 0 {
            let idx = sample(&mut self.rng, n, m);
            let pts: Vec<Vec3> = idx.iter().map(|i| self.x[i]).collect();
            let cands: Vec<(NodeId, Vec3)> = idx.iter().map(|i| (NodeId(i as u32), exerted[i])).collect();
            if let DriftVerdict::Blacklist { culprit: Some(v), .. } = centroid_drift_check(&pts, &cands, sg.t_drift_ms) {
                self.history.blacklist.insert(v);
                out.blacklisted = Some(v);
            }
        }
        self.finish_window(&mut out, overlay)?;
        Ok(out)
    }

    fn force(&self, s: &Telemetry) -> Vec3 {
        let diff = self.x[s.u.idx()] - self.x[s.v.idx()];
        let d = diff.norm();
        match crate::geom::unit(&diff) {
            Some(dir) => dir * (s.delay_ms - d),
            None => Vec3::new(s.delay_ms - d, 0.0, 0.0),
        }
    }

    fn finish_window(&mut self, out: &mut TickOutput, overlay: &Overlay) -> Result<()> {
        out.deltas = deltas_between(&self.published, &self.x, self.params.epsilon_ms, self.window, &self.key);
        for d in &out.deltas {
            self.published[d.node.idx()] += d.delta;
        }
        let n = self.x.len();
        let k = self.params.k_clusters.clamp(1, n);
        let assignment = match &self.assignment {
            Some(prev) if prev.k == k => kmeans_from(&self.x, &prev.centroids)?,
            _ => kmeans_cluster(&self.x, k, self.seed)?,
        };
        let (d_near, d_far, seed) = (self.params.d_near, self.params.d_far, self.seed);
        let x = &self.x;
        let built: Vec<Option<RelayTable>> = crate::par::map_range(n, |i| {
            build_relay_table(NodeId(i as u32), &assignment, x, overlay, d_near, d_far, seed)
                .map_err(|e| log::debug!("no relay table for n{i}: {e}"))
                .ok()
        });
        // the controller sees every table, so it can guarantee that the
        // tables jointly reach every node; only far entries are rewritten
        let mut lists: Vec<Vec<NodeId>> = built.iter().map(|t| t.as_ref().map_or(Vec::new(), |t| t.entries.clone())).collect();
        let near: Vec<usize> = built.iter().map(|t| t.as_ref().map_or(0, |t| t.near_count as usize)).collect();
        repair_reachability(&mut lists, overlay, D_MAX, |v| near[v.idx()]);
        for (i, (t, entries)) in built.into_iter().zip(lists).enumerate() {
            let Some(mut t) = t else { continue };
            t.entries = entries;
            let changed = self.tables[i].as_ref().is_none_or(|old| !old.same_routing(&t));
            if changed {
                t.version = self.window as u32;
                t.sign(&self.key);
                out.tables.push(t.clone());
                self.tables[i] = Some(t);
            }
        }
        self.assignment = Some(assignment);
        Ok(())
    }
}
