use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::metrics::{ByteCounters, RunMetrics, TxMetrics, METRICS_VERSION};
use super::{ms_to_us, us_to_ms, EventQueue, SchemeId, SimTime};
use crate::adversary::{blackhole_filter, compromised_set, forge_coordinate, forge_delay, AdversaryConfig};
use crate::baselines::blockp2p::blockp2p_relay_list;
use crate::baselines::mercury::Mercury;
use crate::baselines::perigee::{rank_reward, PerigeeParams, PerigeeScore};
use crate::baselines::random::random_lists;
use crate::baselines::vivaldi::VivaldiCoord;
use crate::baselines::RelayPolicy;
use crate::cluster::{encoded_len, RelayTable};
use crate::config::ScenarioConfig;
use crate::controller::{Controller, Telemetry, TickOutput};
use crate::dissemination::{outburst_targets, should_kickoff, NodeState, OutburstNonce, TxRecord, NO_NODE, NO_TIME};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::overlay::{build_overlay, generate_geo_latency, LatencyField, NodeId, Overlay};
use crate::reach::{repair_reachability, strongly_connected};
use crate::rng::{self, SimRng};

/// Controller heartbeat: window id plus authentication tag.
const HEARTBEAT_BYTES: u64 = 4 + crate::auth::TAG_LEN as u64;

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep every node's first-receipt time for every measured transaction.
    pub keep_receipts: bool,
}

#[derive(Debug)]
enum Ev {
    Inject(u32),
    /// Digest leg arrived; `rest` is the request plus body legs.
    Digest { tx: u32, from: u32, to: u32, rest: SimTime, nonce: bool },
    Complete { tx: u32, from: u32, to: u32, nonce: bool, direct: bool },
    Batch(u32),
    CtrlTick,
    CtrlDeliver,
    Probe,
    Recluster,
    Repair,
    Score { tx: u32, v: u32 },
}

enum Policy {
    Static(Vec<Vec<NodeId>>),
    Perigee(PerigeeState),
    Mercury(Box<Mercury>),
    Vcs { ctrl: Box<Controller>, full: bool },
    Flood,
}

/// Each node scores the peers it hears transactions from and subscribes to
/// the best ones; a node relays to its subscribers plus any bridge entries
/// the connectivity check added.
struct PerigeeState {
    params: PerigeeParams,
    scores: Vec<PerigeeScore>,
    subscribers: Vec<Vec<NodeId>>,
    bridges: Vec<Vec<NodeId>>,
}

impl PerigeeState {
    fn out_list(&self, u: usize) -> Vec<NodeId> {
        let mut l = self.subscribers[u].clone();
        l.extend(self.bridges[u].iter().filter(|b| !self.subscribers[u].contains(b)));
        l
    }
}

struct TxAux {
    /// Peers each node knows to hold the transaction.
    known: Vec<Vec<u32>>,
    honest_reached: usize,
    coverage: Option<SimTime>,
}

/// Builds the overlay and latency field for a run. A fixed
/// `topology.seed` keeps them constant across run seeds.
pub fn build_topology(cfg: &ScenarioConfig, seed: u64) -> Result<(Overlay, LatencyField)> {
    let t = &cfg.topology;
    let tseed = t.seed.unwrap_or(seed);
    let overlay = build_overlay(t.n, t.degree_cap, tseed)?;
    let mut field = generate_geo_latency(&overlay, &t.geo_params(), tseed)?;
    for ep in &t.congestion_episodes {
        field.add_episode(ep)?;
    }
    Ok((overlay, field))
}

/// One window of switch telemetry: every node reports sampled delays on up
/// to `links` of its links, drawn afresh each window.
pub fn sample_telemetry(overlay: &Overlay, field: &LatencyField, links: usize, seed: u64, window: u64, t: SimTime) -> Vec<Telemetry> {
    let mut r = rng::stream(seed, "telemetry", window);
    let mut out = Vec::with_capacity(overlay.n() * links);
    for u in overlay.nodes() {
        let peers = overlay.peers(u);
        let k = links.min(peers.len());
        for i in sample(&mut r, peers.len(), k) {
            let v = peers[i];
            let e = overlay.edge_id(u, v).expect("peer");
            out.push(Telemetry {
                u,
                v,
                delay_ms: field.sample_edge(e, t, &mut r),
            });
        }
    }
    out
}

/// Runs the first configured scheme on the first seed.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let scheme = *cfg.scheme.ids.first().ok_or_else(|| Error::config("scheme.ids", "empty"))?;
    let seed = *cfg.seeds.to_vec().first().ok_or_else(|| Error::config("seeds", "empty"))?;
    run_single(cfg, scheme, seed, RunOptions::default())
}

pub fn run_single(cfg: &ScenarioConfig, scheme: SchemeId, seed: u64, opts: RunOptions) -> Result<RunMetrics> {
    let (overlay, field) = build_topology(cfg, seed)?;
    run_on(cfg, scheme, seed, &overlay, &field, opts)
}

/// Runs one scheme on a caller-supplied overlay and latency field.
pub fn run_on(
    cfg: &ScenarioConfig,
    scheme: SchemeId,
    seed: u64,
    overlay: &Overlay,
    field: &LatencyField,
    opts: RunOptions,
) -> Result<RunMetrics> {
    if field.n() != overlay.n() {
        return Err(Error::Latency(format!("field has {} nodes, overlay {}", field.n(), overlay.n())));
    }
    let mut e = Engine::new(cfg, scheme, seed, overlay, field)?;
    e.run()?;
    Ok(e.finish(opts))
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    scheme: SchemeId,
    seed: u64,
    overlay: &'a Overlay,
    field: &'a LatencyField,
    q: EventQueue<Ev>,
    nodes: Vec<NodeState>,
    txs: Vec<TxRecord>,
    aux: Vec<TxAux>,
    policy: Policy,
    adv: AdversaryConfig,
    compromised: Vec<bool>,
    honest: usize,
    rng_link: SimRng,
    rng_drop: SimRng,
    rng_probe: SimRng,
    bytes: ByteCounters,
    /// Data-plane bytes put on the wire for measured transactions.
    sent: u64,
    control_from: SimTime,
    horizon: SimTime,
    measured: usize,
    covered: usize,
    injected: usize,
    quiet: bool,
    windows: u64,
    discarded: u64,
    blacklisted: Vec<u32>,
    fanout_hist: Vec<u64>,
    pending_ctrl: VecDeque<TickOutput>,
    delta: SimTime,
    timeout: SimTime,
    memory: SimTime,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig, scheme: SchemeId, seed: u64, overlay: &'a Overlay, field: &'a LatencyField) -> Result<Self> {
        let n = overlay.n();
        let mut adv = cfg.adversary.clone();
        adv.seed = adv.seed ^ seed.rotate_left(32);
        let compromised = compromised_set(&adv, n);
        let honest = compromised.iter().filter(|c| !**c).count();
        let d = &cfg.dissemination;
        let c = &cfg.controller;
        let delta = ms_to_us(d.delta_ms);
        let mut r_phase = rng::stream(seed, "dissemination.phase", 0);
        let mut nodes: Vec<NodeState> = overlay
            .nodes()
            .map(|v| {
                let phase = if delta == 0 { 0 } else { r_phase.random_range(0..delta) };
                NodeState::new(v, overlay.peers(v), c.d_max, phase, seed)
            })
            .collect();

        let s = &cfg.scheme;
        let policy = match scheme {
            SchemeId::Random8 => {
                let mut l = random_lists(overlay, s.random_fanout, seed, "random8");
                repair_reachability(&mut l, overlay, s.random_fanout, |_| 0);
                Policy::Static(l)
            }
            SchemeId::BlockP2P8 => {
                let mut l: Vec<Vec<NodeId>> = crate::par::map_range(n, |i| {
                    blockp2p_relay_list(NodeId(i as u32), overlay, field, s.blockp2p_fanout)
                });
                repair_reachability(&mut l, overlay, s.blockp2p_fanout, |_| 0);
                Policy::Static(l)
            }
            SchemeId::Perigee8 => {
                let mut p = s.perigee;
                p.fanout = p.fanout.max(1);
                let scores: Vec<PerigeeScore> = overlay.nodes().map(|v| PerigeeScore::new(overlay.peers(v), p)).collect();
                let mut subscribers = vec![Vec::new(); n];
                for (v, sc) in scores.iter().enumerate() {
                    for u in sc.current() {
                        subscribers[u.idx()].push(NodeId(v as u32));
                    }
                }
                Policy::Perigee(PerigeeState {
                    params: p,
                    scores,
                    subscribers,
                    bridges: vec![Vec::new(); n],
                })
            }
            SchemeId::Mercury => Policy::Mercury(Box::new(Mercury::new(overlay, s.mercury, seed))),
            SchemeId::BlockSdnNoBurst | SchemeId::BlockSdnFull => {
                let mut lists: Vec<Vec<NodeId>> = nodes.iter().map(|s| s.fallback_list.clone()).collect();
                repair_reachability(&mut lists, overlay, c.d_max, |_| 0);
                for (st, l) in nodes.iter_mut().zip(lists) {
                    st.fallback_list = l;
                }
                Policy::Vcs {
                    ctrl: Box::new(Controller::new(n, c.params(n), seed)),
                    full: scheme == SchemeId::BlockSdnFull,
                }
            }
            SchemeId::Flood => Policy::Flood,
        };

        let mut e = Engine {
            cfg,
            scheme,
            seed,
            overlay,
            field,
            q: EventQueue::new(),
            nodes,
            txs: Vec::new(),
            aux: Vec::new(),
            policy,
            adv,
            compromised,
            honest,
            rng_link: rng::stream(seed, "engine.link", 0),
            rng_drop: rng::stream(seed, "engine.drop", 0),
            rng_probe: rng::stream(seed, "mercury.probe", 0),
            bytes: ByteCounters::default(),
            sent: 0,
            control_from: NO_TIME,
            horizon: 0,
            measured: 0,
            covered: 0,
            injected: 0,
            quiet: false,
            windows: 0,
            discarded: 0,
            blacklisted: Vec::new(),
            fanout_hist: Vec::new(),
            pending_ctrl: VecDeque::new(),
            delta,
            timeout: ms_to_us(d.t_timeout_s * 1000.0),
            memory: ms_to_us(d.relay_memory_ms),
        };
        e.schedule_workload();
        match &e.policy {
            Policy::Vcs { .. } => e.q.schedule(ms_to_us(c.theta_ms), Ev::CtrlTick),
            Policy::Mercury(m) => {
                let (p, r) = (m.params.probe_interval_ms, m.params.recluster_ms);
                e.q.schedule(ms_to_us(p), Ev::Probe);
                e.q.schedule(ms_to_us(r), Ev::Recluster);
            }
            Policy::Perigee(_) => e.q.schedule(ms_to_us(s.perigee.repair_interval_ms), Ev::Repair),
            _ => {}
        }
        Ok(e)
    }

    fn schedule_workload(&mut self) {
        let w = &self.cfg.workload;
        let d = &self.cfg.dissemination;
        let n = self.overlay.n();
        let honest_ids: Vec<u32> = (0..n as u32).filter(|&v| !self.compromised[v as usize]).collect();
        let mut r = rng::stream(self.seed, "workload", 0);
        let start = ms_to_us(w.start_ms);
        let gap = 1.0e6 / w.rate_per_s;
        let mut times: Vec<(SimTime, bool)> = Vec::new();
        if self.scheme == SchemeId::Perigee8 {
            let k = w.warmup_txs as u64;
            for i in 0..k {
                let back = ((k - i) as f64 * gap).round() as u64;
                times.push((start.saturating_sub(back), false));
            }
        }
        let exp = Exp::new(w.rate_per_s / 1.0e6).expect("positive rate");
        let mut t = start;
        for i in 0..w.txs {
            if i > 0 {
                t += exp.sample(&mut r).round() as SimTime;
            }
            times.push((t, true));
        }
        // origins come from a separate stream so the warm-up does not shift
        // the measured workload between schemes
        let mut ro = rng::stream(self.seed, "workload.origin", 0);
        let mut rw = rng::stream(self.seed, "workload.warmup", 0);
        for (t, measured) in times {
            let pool = &honest_ids;
            let origin = if measured {
                pool[ro.random_range(0..pool.len())]
            } else {
                pool[rw.random_range(0..pool.len())]
            };
            let id = self.txs.len() as u32;
            let mut rec = TxRecord::new(id, NodeId(origin), t, n, d.digest_bytes, d.body_bytes);
            rec.first_receipt[origin as usize] = NO_TIME;
            rec.measured = measured;
            self.txs.push(rec);
            self.aux.push(TxAux {
                known: Vec::new(),
                honest_reached: 0,
                coverage: None,
            });
            if measured {
                self.measured += 1;
                self.control_from = self.control_from.min(t);
                self.horizon = self.horizon.max(t + ms_to_us(w.drain_ms));
            }
            self.q.schedule(t, Ev::Inject(id));
        }
        if self.measured == 0 {
            self.horizon = ms_to_us(w.start_ms + w.drain_ms);
        }
    }

    fn tx_bytes(&self) -> u64 {
        let d = &self.cfg.dissemination;
        d.digest_bytes + d.bitmap_bytes + d.body_bytes
    }

    fn attack_on(&self, t: SimTime) -> bool {
        self.adv.is_active() && t >= ms_to_us(self.adv.onset_ms)
    }

    fn run(&mut self) -> Result<()> {
        while let Some((t, ev)) = self.q.pop() {
            if t > self.horizon {
                break;
            }
            match ev {
                Ev::Inject(tx) => self.on_inject(t, tx),
                Ev::Digest { tx, from, to, rest, nonce } => self.on_digest(t, tx, from, to, rest, nonce),
                Ev::Complete { tx, from, to, nonce, direct } => self.on_complete(t, tx, from, to, nonce, direct),
                Ev::Batch(v) => self.on_batch(t, v),
                Ev::CtrlTick => self.on_ctrl_tick(t)?,
                Ev::CtrlDeliver => self.on_ctrl_deliver(t),
                Ev::Probe => self.on_probe(t),
                Ev::Recluster => self.on_recluster(t),
                Ev::Score { tx, v } => self.on_score(t, tx, v),
                Ev::Repair => {
                    self.perigee_repair(t);
                    let next = t + ms_to_us(self.cfg.scheme.perigee.repair_interval_ms);
                    self.periodic(next, Ev::Repair);
                }
            }
        }
        Ok(())
    }

    fn update_quiet(&mut self) {
        if !self.quiet && self.injected == self.txs.len() && self.covered == self.measured {
            self.quiet = true;
        }
    }

    fn mark_reached(&mut self, t: SimTime, tx: u32, v: u32) {
        let rec = &self.txs[tx as usize];
        if self.compromised[v as usize] {
            return;
        }
        let a = &mut self.aux[tx as usize];
        a.honest_reached += 1;
        if a.honest_reached == self.honest && a.coverage.is_none() {
            a.coverage = Some(t - rec.t0);
            if rec.measured {
                self.covered += 1;
                self.update_quiet();
            }
        }
    }

    fn on_inject(&mut self, t: SimTime, tx: u32) {
        let n = self.overlay.n();
        let o = self.txs[tx as usize].origin;
        {
            let rec = &mut self.txs[tx as usize];
            rec.first_receipt[o.idx()] = t;
            let a = &mut self.aux[tx as usize];
            a.known = vec![Vec::new(); n];
        }
        self.injected += 1;
        self.mark_reached(t, tx, o.0);
        self.update_quiet();
        let cfg: &'a ScenarioConfig = self.cfg;
        let cap = cfg.dissemination.outburst_cap;
        let direct = cfg.dissemination.body_direct;
        let overlay = self.overlay;
        let burst: Option<(Vec<NodeId>, bool, bool)> = match &self.policy {
            Policy::Flood => Some((overlay.peers(o).to_vec(), false, false)),
            Policy::Mercury(m) => {
                let k = m.outburst_fanout(overlay, o);
                Some((overlay.peers(o).iter().take(k).copied().collect(), false, false))
            }
            Policy::Vcs { full: true, .. } => {
                let timeout = self.timeout;
                self.update_node(t, o.0, |s| s.fallback_check(t, timeout));
                let Policy::Vcs { ctrl, .. } = &self.policy else { unreachable!() };
                self.nodes[o.idx()].cluster_id().map(|cl| {
                    self.txs[tx as usize].outburst_nonce = Some(OutburstNonce::mint(ctrl.key(), tx, ctrl.window(), cl));
                    let targets = outburst_targets(
                        overlay.peers(o),
                        |p| overlay.edge_id(o, p).is_some_and(|e| ctrl.is_congested(e)),
                        cap,
                    );
                    (targets, true, direct)
                })
            }
            _ => None,
        };
        match burst {
            Some((targets, nonce, direct)) => self.relay(t, o.0, tx, &targets, nonce, direct, true),
            None => self.enqueue(t, o.0, tx),
        }
    }

    fn enqueue(&mut self, t: SimTime, v: u32, tx: u32) {
        let st = &mut self.nodes[v as usize];
        st.pending.push_back(tx);
        if !st.tick_scheduled {
            st.tick_scheduled = true;
            let at = st.next_tick(t, self.delta);
            self.q.schedule(at, Ev::Batch(v));
        }
    }

    fn on_batch(&mut self, t: SimTime, v: u32) {
        self.nodes[v as usize].tick_scheduled = false;
        if matches!(self.policy, Policy::Vcs { .. }) {
            let timeout = self.timeout;
            self.update_node(t, v, |s| s.fallback_check(t, timeout));
        }
        let batch = self.nodes[v as usize].batch_cycle(self.cfg.dissemination.b_max.max(1));
        for tx in batch {
            if self.txs[tx as usize].relayed[v as usize] {
                continue;
            }
            let own = self.txs[tx as usize].origin.0 == v;
            let list = self.relay_list(v);
            self.relay(t, v, tx, &list, false, false, own);
        }
        let st = &mut self.nodes[v as usize];
        if !st.pending.is_empty() {
            st.tick_scheduled = true;
            let at = if self.delta == 0 { t } else { t + self.delta };
            self.q.schedule(at, Ev::Batch(v));
        }
    }

    fn relay_list(&mut self, v: u32) -> Vec<NodeId> {
        let nv = NodeId(v);
        match &mut self.policy {
            Policy::Static(l) => l[v as usize].clone(),
            Policy::Perigee(p) => p.out_list(v as usize),
            Policy::Mercury(m) => m.relay_list(nv).to_vec(),
            Policy::Vcs { .. } => self.nodes[v as usize].relay_list().to_vec(),
            Policy::Flood => self.overlay.peers(nv).to_vec(),
        }
    }

    /// One relay action: sends to every target except the first sender and
    /// peers known to hold the transaction.
    #[allow(clippy::too_many_arguments)]
    fn relay(&mut self, t: SimTime, v: u32, tx: u32, targets: &[NodeId], nonce: bool, direct: bool, own: bool) {
        let first_sender = self.txs[tx as usize].first_sender[v as usize];
        let mut count = 0usize;
        for &p in targets {
            if p.0 == first_sender || p.0 == v || self.aux[tx as usize].known[v as usize].contains(&p.0) {
                continue;
            }
            count += 1;
            self.send(t, v, p.0, tx, nonce, direct, own);
        }
        self.txs[tx as usize].relayed[v as usize] = true;
        if self.fanout_hist.len() <= count {
            self.fanout_hist.resize(count + 1, 0);
        }
        if self.txs[tx as usize].measured {
            self.fanout_hist[count] += 1;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn send(&mut self, t: SimTime, from: u32, to: u32, tx: u32, nonce: bool, direct: bool, own: bool) {
        if self.compromised[from as usize] && self.attack_on(t) && blackhole_filter(&self.adv, own, &mut self.rng_drop) {
            return;
        }
        let e = self.overlay.edge_id(NodeId(from), NodeId(to)).expect("relay targets are peers");
        let mut leg = || ms_to_us(self.field.sample_edge(e, t, &mut self.rng_link));
        let l1 = leg();
        if direct {
            self.q.schedule(t + l1, Ev::Complete { tx, from, to, nonce, direct });
        } else {
            let rest = leg() + leg();
            self.q.schedule(t + l1, Ev::Digest { tx, from, to, rest, nonce });
        }
        if self.txs[tx as usize].measured {
            let d = &self.cfg.dissemination;
            self.sent += if direct { d.digest_bytes + d.body_bytes } else { d.digest_bytes };
        }
    }

    /// Announces recently relayed transactions to peers that just entered
    /// `v`'s relay list, so a list change never strands a transaction that
    /// is still spreading.
    fn catch_up(&mut self, t: SimTime, v: u32, before: &[NodeId], after: &[NodeId]) {
        let added: Vec<NodeId> = after.iter().filter(|p| !before.contains(p)).copied().collect();
        if added.is_empty() {
            return;
        }
        let since = t.saturating_sub(self.memory);
        let from = self.txs.partition_point(|r| r.t0 < since);
        for tx in from as u32..self.injected_upto(t) {
            if !self.txs[tx as usize].relayed[v as usize] {
                continue;
            }
            let own = self.txs[tx as usize].origin.0 == v;
            let first_sender = self.txs[tx as usize].first_sender[v as usize];
            for &p in &added {
                if p.0 == first_sender || p.0 == v || self.aux[tx as usize].known[v as usize].contains(&p.0) {
                    continue;
                }
                self.send(t, v, p.0, tx, false, false, own);
            }
        }
    }

    /// Adds bridge entries until the relay digraph is strongly connected
    /// again. Bridges stay in place once added.
    fn perigee_repair(&mut self, t: SimTime) {
        let Policy::Perigee(p) = &mut self.policy else { return };
        let n = p.subscribers.len();
        let before: Vec<Vec<NodeId>> = (0..n).map(|u| p.out_list(u)).collect();
        let mut lists = before.clone();
        if strongly_connected(&lists) {
            return;
        }
        repair_reachability(&mut lists, self.overlay, usize::MAX, |_| 0);
        for (u, l) in lists.iter().enumerate() {
            p.bridges[u] = l.iter().filter(|x| !p.subscribers[u].contains(x)).copied().collect();
        }
        let after: Vec<Vec<NodeId>> = (0..n).map(|u| p.out_list(u)).collect();
        for (u, (b, a)) in before.iter().zip(&after).enumerate() {
            if a != b {
                self.catch_up(t, u as u32, b, a);
            }
        }
    }

    /// Closes `v`'s scoring round for `tx`: its subscribed sources are
    /// ranked by the order their announcements arrived, and sources that
    /// never announced score zero. A changed subscription set moves `v`
    /// between the sources' relay lists.
    fn on_score(&mut self, t: SimTime, tx: u32, v: u32) {
        let Policy::Perigee(p) = &mut self.policy else { return };
        let sc = &mut p.scores[v as usize];
        let sources = sc.current();
        let heard: Vec<NodeId> = self.aux[tx as usize].known[v as usize]
            .iter()
            .map(|&u| NodeId(u))
            .filter(|u| sources.contains(u))
            .collect();
        for &u in &sources {
            let r = heard.iter().position(|h| *h == u);
            sc.observe(u, rank_reward(r.is_some(), r.unwrap_or(0), sources.len()));
        }
        let after = sc.next_round();
        if after == sources {
            return;
        }
        let mut changed = Vec::new();
        for u in sources.iter().filter(|u| !after.contains(u)) {
            let b = p.out_list(u.idx());
            p.subscribers[u.idx()].retain(|x| x.0 != v);
            changed.push((u.0, b));
        }
        for u in after.iter().filter(|u| !sources.contains(u)) {
            let b = p.out_list(u.idx());
            p.subscribers[u.idx()].push(NodeId(v));
            changed.push((u.0, b));
        }
        let changed: Vec<(u32, Vec<NodeId>, Vec<NodeId>)> =
            changed.into_iter().map(|(u, b)| (u, b, p.out_list(u as usize))).collect();
        for (u, b, a) in changed {
            self.catch_up(t, u, &b, &a);
        }
    }

    /// One past the last transaction injected by `t`.
    fn injected_upto(&self, t: SimTime) -> u32 {
        self.txs.partition_point(|r| r.t0 <= t) as u32
    }

    /// Applies a mode or table change to `v` and catches up on the entries it
    /// adds to `v`'s relay list.
    fn update_node(&mut self, t: SimTime, v: u32, f: impl FnOnce(&mut NodeState)) {
        let before = self.nodes[v as usize].relay_list().to_vec();
        f(&mut self.nodes[v as usize]);
        if self.nodes[v as usize].relay_list() != before.as_slice() {
            let after = self.nodes[v as usize].relay_list().to_vec();
            self.catch_up(t, v, &before, &after);
        }
    }

    fn learn_holder(&mut self, tx: u32, at: u32, holder: u32) {
        let k = &mut self.aux[tx as usize].known[at as usize];
        if !k.contains(&holder) {
            k.push(holder);
        }
    }

    fn on_digest(&mut self, t: SimTime, tx: u32, from: u32, to: u32, rest: SimTime, nonce: bool) {
        self.learn_holder(tx, to, from);
        if self.txs[tx as usize].has(NodeId(to), t) {
            if self.txs[tx as usize].measured {
                self.bytes.duplicate += self.cfg.dissemination.digest_bytes;
            }
            return;
        }
        if self.txs[tx as usize].measured {
            let d = &self.cfg.dissemination;
            self.sent += d.bitmap_bytes + d.body_bytes;
        }
        self.q.schedule(t + rest, Ev::Complete { tx, from, to, nonce, direct: false });
    }

    fn on_complete(&mut self, t: SimTime, tx: u32, from: u32, to: u32, nonce: bool, direct: bool) {
        self.learn_holder(tx, to, from);
        let d = &self.cfg.dissemination;
        let bytes = if direct { d.digest_bytes + d.body_bytes } else { self.tx_bytes() };
        let measured = self.txs[tx as usize].measured;
        if self.txs[tx as usize].has(NodeId(to), t) {
            if measured {
                self.bytes.duplicate += bytes;
            }
            return;
        }
        {
            let rec = &mut self.txs[tx as usize];
            rec.first_receipt[to as usize] = t;
            rec.first_sender[to as usize] = from;
            rec.depth[to as usize] = rec.depth[from as usize].saturating_add(1);
        }
        if measured {
            self.bytes.data += bytes;
        }
        self.mark_reached(t, tx, to);
        if let Policy::Perigee(p) = &self.policy {
            self.q.schedule(t + ms_to_us(p.params.score_delay_ms), Ev::Score { tx, v: to });
        }

        if nonce && matches!(self.policy, Policy::Vcs { full: true, .. }) {
            let timeout = self.timeout;
            self.update_node(t, to, |s| s.fallback_check(t, timeout));
        }
        let kick = match &self.policy {
            Policy::Flood => Some(self.overlay.peers(NodeId(to)).to_vec()),
            Policy::Vcs { ctrl, full: true } if nonce => {
                let own = self.nodes[to as usize].cluster_id();
                let valid = self.txs[tx as usize]
                    .outburst_nonce
                    .is_some_and(|n| should_kickoff(n.verify(ctrl.key(), tx), n.origin_cluster, own));
                valid.then(|| self.nodes[to as usize].relay_list().to_vec())
            }
            _ => None,
        };
        match kick {
            Some(targets) => self.relay(t, to, tx, &targets, false, false, false),
            None => self.enqueue(t, to, tx),
        }
    }

    fn count_control(&mut self, t: SimTime, b: u64) {
        if t >= self.control_from {
            self.bytes.control += b;
        }
    }

    fn periodic(&mut self, at: SimTime, ev: Ev) {
        if !self.quiet && at <= self.horizon {
            self.q.schedule(at, ev);
        }
    }

    fn telemetry(&mut self, t: SimTime, window: u64) -> Vec<Telemetry> {
        let mut out = sample_telemetry(self.overlay, self.field, self.cfg.controller.telemetry_links, self.seed, window, t);
        if self.attack_on(t) && self.adv.forges_delays() {
            let floor = self.field.floor_ms();
            for s in out.iter_mut().filter(|s| self.compromised[s.u.idx()]) {
                s.delay_ms = forge_delay(&self.adv, s.delay_ms, window, floor);
            }
        }
        out
    }

    fn on_ctrl_tick(&mut self, t: SimTime) -> Result<()> {
        let cfg: &'a ScenarioConfig = self.cfg;
        let c = &cfg.controller;
        if c.halt_at_ms.is_some_and(|h| t >= ms_to_us(h)) {
            return Ok(());
        }
        let window = match &self.policy {
            Policy::Vcs { ctrl, .. } => ctrl.window() + 1,
            _ => return Ok(()),
        };
        let samples = self.telemetry(t, window);
        let edges = self.overlay.edges().len();
        let queue: Vec<f64> = (0..edges as u32).map(|e| self.field.queue_delay_by_edge(e, t)).collect();
        let prop: Vec<f64> = (0..edges as u32).map(|e| self.field.prop_by_edge(e)).collect();
        let Policy::Vcs { ctrl, .. } = &mut self.policy else { unreachable!() };
        ctrl.observe_queues(&queue, &prop);
        let out = ctrl.tick(t, &samples, self.overlay)?;
        self.windows += 1;
        if out.discarded {
            self.discarded += 1;
        }
        if let Some(b) = out.blacklisted {
            self.blacklisted.push(b.0);
        }
        self.pending_ctrl.push_back(out);
        self.q.schedule(t + ms_to_us(c.control_latency_ms), Ev::CtrlDeliver);
        self.periodic(t + ms_to_us(c.theta_ms), Ev::CtrlTick);
        Ok(())
    }

    fn on_ctrl_deliver(&mut self, t: SimTime) {
        let Some(out) = self.pending_ctrl.pop_front() else { return };
        let Policy::Vcs { ctrl, .. } = &self.policy else { return };
        let key = ctrl.key().clone();
        let n = self.overlay.n();
        let mut tables: Vec<Option<RelayTable>> = vec![None; n];
        let mut b = n as u64 * HEARTBEAT_BYTES + (out.deltas.len() * crate::controller::embedding::DELTA_BYTES) as u64;
        for tab in out.tables {
            b += encoded_len(tab.entries.len()) as u64;
            let i = tab.owner.idx();
            tables[i] = Some(tab);
        }
        for (v, tab) in tables.into_iter().enumerate() {
            self.update_node(t, v as u32, |s| s.on_controller_message(t, tab, &key));
        }
        self.count_control(t, b);
    }

    fn reported_coord(&self, m: &Mercury, v: NodeId, t: SimTime) -> Vec3 {
        let x = m.coords[v.idx()].x;
        if self.compromised[v.idx()] && self.attack_on(t) && self.adv.forges_coordinates() {
            let w = t / ms_to_us(self.cfg.controller.theta_ms).max(1);
            forge_coordinate(&self.adv, true, v, w, x).unwrap_or(x)
        } else {
            x
        }
    }

    fn on_probe(&mut self, t: SimTime) {
        let reported: Vec<Vec3> = match &self.policy {
            Policy::Mercury(m) => (0..self.overlay.n()).map(|i| self.reported_coord(m, NodeId(i as u32), t)).collect(),
            _ => return,
        };
        let (field, overlay) = (self.field, self.overlay);
        let window = t / ms_to_us(self.cfg.controller.theta_ms).max(1);
        let forge = self.attack_on(t) && self.adv.forges_delays();
        let floor = field.floor_ms();
        let (comp, adv) = (&self.compromised, &self.adv);
        let Policy::Mercury(m) = &mut self.policy else { return };
        let probes = m.probe_round(
            overlay,
            &mut self.rng_probe,
            |u, p, r| {
                let e = overlay.edge_id(u, p).expect("peer");
                let d = (field.sample_edge(e, t, r) + field.sample_edge(e, t, r)) / 2.0;
                if forge && comp[p.idx()] {
                    forge_delay(adv, d, window, floor)
                } else {
                    d
                }
            },
            |v, c| VivaldiCoord { x: reported[v.idx()], err: c.err },
        );
        let bytes = probes as u64 * m.params.probe_bytes;
        let next = t + ms_to_us(m.params.probe_interval_ms);
        self.count_control(t, bytes);
        self.periodic(next, Ev::Probe);
    }

    fn on_recluster(&mut self, t: SimTime) {
        let Policy::Mercury(m) = &mut self.policy else { return };
        let before: Vec<Vec<NodeId>> = self.overlay.nodes().map(|v| m.relay_list(v).to_vec()).collect();
        m.recluster(self.overlay);
        let after: Vec<Vec<NodeId>> = self.overlay.nodes().map(|v| m.relay_list(v).to_vec()).collect();
        let next = t + ms_to_us(m.params.recluster_ms);
        for (v, (b, a)) in before.iter().zip(&after).enumerate() {
            if a != b {
                self.catch_up(t, v as u32, b, a);
            }
        }
        self.periodic(next, Ev::Recluster);
    }

    fn finish(self, opts: RunOptions) -> RunMetrics {
        let n = self.overlay.n();
        let mut txs = Vec::with_capacity(self.measured);
        let mut depth_hist: Vec<u64> = Vec::new();
        let mut receipts = opts.keep_receipts.then(Vec::new);
        let mut honest_deliveries = 0u64;
        for (rec, a) in self.txs.iter().zip(&self.aux) {
            if !rec.measured {
                continue;
            }
            let mut max_depth = 0;
            for v in 0..n {
                if self.compromised[v] || rec.first_receipt[v] == NO_TIME {
                    continue;
                }
                let dd = rec.depth[v] as usize;
                max_depth = max_depth.max(rec.depth[v]);
                if depth_hist.len() <= dd {
                    depth_hist.resize(dd + 1, 0);
                }
                depth_hist[dd] += 1;
                if rec.first_sender[v] != NO_NODE {
                    honest_deliveries += 1;
                }
            }
            txs.push(TxMetrics {
                id: rec.id,
                origin: rec.origin.0,
                t0_ms: us_to_ms(rec.t0),
                coverage_ms: a.coverage.map(us_to_ms),
                missing_honest: self.honest - a.honest_reached,
                max_depth,
            });
            if let Some(r) = receipts.as_mut() {
                r.push(
                    rec.first_receipt
                        .iter()
                        .map(|&x| (x != NO_TIME).then(|| us_to_ms(x - rec.t0)))
                        .collect(),
                );
            }
        }
        let undelivered = txs.iter().filter(|t| t.coverage_ms.is_none()).count();
        RunMetrics {
            version: METRICS_VERSION,
            scheme: self.scheme,
            seed: self.seed,
            n,
            honest: self.honest,
            tx_bytes: self.tx_bytes(),
            txs,
            bytes: self.bytes,
            data_plane_sent: self.sent,
            honest_deliveries,
            windows: self.windows,
            discarded_windows: self.discarded,
            blacklisted: self.blacklisted,
            fanout_hist: self.fanout_hist,
            depth_hist,
            partial: undelivered > 0,
            undelivered,
            end_ms: us_to_ms(self.q.now()),
            first_receipt_ms: receipts,
        }
    }
}
