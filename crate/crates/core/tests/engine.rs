use std::cmp::Reverse;
use std::collections::BinaryHeap;

use blocksdn::overlay::Jitter;
use blocksdn::sim::{ms_to_us, run_on, run_single, RunOptions, SimTime};
use blocksdn::{LatencyField, Overlay, RunMetrics, ScenarioConfig, SchemeId};
use proptest::prelude::*;

fn one_tx(txs: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.workload.txs = txs;
    cfg.workload.drain_ms = 60_000.0;
    cfg
}

/// Plain Dijkstra over whole microseconds, every hop costing three legs.
fn shortest_3l(overlay: &Overlay, props_us: &[SimTime], src: usize) -> Vec<Option<SimTime>> {
    let n = overlay.n();
    let mut adj = vec![Vec::new(); n];
    for (i, &(a, b)) in overlay.edges().iter().enumerate() {
        adj[a.idx()].push((b.idx(), 3 * props_us[i]));
        adj[b.idx()].push((a.idx(), 3 * props_us[i]));
    }
    let mut dist = vec![None; n];
    let mut heap = BinaryHeap::from([Reverse((0u64, src))]);
    while let Some(Reverse((d, u))) = heap.pop() {
        if dist[u].is_some() {
            continue;
        }
        dist[u] = Some(d);
        for &(v, w) in &adj[u] {
            if dist[v].is_none() {
                heap.push(Reverse((d + w, v)));
            }
        }
    }
    dist
}

fn flood(overlay: &Overlay, props: Vec<f64>, seed: u64) -> RunMetrics {
    let field = LatencyField::from_props(overlay, props, vec![0; overlay.n()], Jitter::NONE, 0.001).unwrap();
    run_on(&one_tx(1), SchemeId::Flood, seed, overlay, &field, RunOptions { keep_receipts: true }).unwrap()
}

fn connected_graph() -> impl Strategy<Value = (usize, Vec<(u32, u32)>, Vec<u32>)> {
    (1usize..=50).prop_flat_map(|n| {
        let parents = proptest::collection::vec(any::<prop::sample::Index>(), n - 1);
        let extra = proptest::collection::vec((0..n as u32, 0..n as u32), 0..2 * n);
        (Just(n), parents, extra).prop_flat_map(|(n, parents, extra)| {
            let mut edges: Vec<(u32, u32)> = parents
                .iter()
                .enumerate()
                .map(|(i, p)| (p.index(i + 1) as u32, i as u32 + 1))
                .collect();
            for (a, b) in extra {
                let e = (a.min(b), a.max(b));
                if a != b && !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == e) {
                    edges.push(e);
                }
            }
            let m = edges.len();
            (Just(n), Just(edges), proptest::collection::vec(1u32..200_000, m))
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flooding_matches_shortest_paths((n, edges, delays) in connected_graph(), seed in 0u64..1000) {
        let overlay = Overlay::from_edges(n, n.max(1), &edges).unwrap();
        // edge order inside the overlay may differ from the input order
        let props_us: Vec<SimTime> = overlay
            .edges()
            .iter()
            .map(|&(a, b)| {
                let i = edges.iter().position(|&(x, y)| (x.min(y), x.max(y)) == (a.0.min(b.0), a.0.max(b.0))).unwrap();
                delays[i] as SimTime
            })
            .collect();
        let props_ms: Vec<f64> = props_us.iter().map(|&u| u as f64 / 1000.0).collect();
        let m = flood(&overlay, props_ms, seed);
        let origin = m.txs[0].origin as usize;
        let want = shortest_3l(&overlay, &props_us, origin);
        let got = &m.first_receipt_ms.as_ref().unwrap()[0];
        for v in 0..n {
            let g = got[v].map(ms_to_us);
            prop_assert_eq!(g, want[v], "node {} from origin {}", v, origin);
        }
        prop_assert!(!m.partial);
    }
}

#[test]
fn line_of_four_takes_nine_hundred_ms_end_to_end() {
    let overlay = Overlay::from_edges(4, 2, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    for seed in 0..20 {
        let m = flood(&overlay, vec![100.0; 3], seed);
        let r = &m.first_receipt_ms.as_ref().unwrap()[0];
        let o = m.txs[0].origin as i64;
        for (v, t) in r.iter().enumerate() {
            assert_eq!(t.unwrap(), 300.0 * (v as i64 - o).abs() as f64);
        }
        if o == 0 || o == 3 {
            assert_eq!(m.txs[0].coverage_ms, Some(900.0));
        }
    }
}

#[test]
fn tiny_overlays() {
    let single = Overlay::from_edges(1, 1, &[]).unwrap();
    let m = flood(&single, vec![], 1);
    assert_eq!(m.txs[0].coverage_ms, Some(0.0));

    let pair = Overlay::from_edges(2, 1, &[(0, 1)]).unwrap();
    let m = flood(&pair, vec![100.0], 1);
    assert_eq!(m.txs[0].coverage_ms, Some(300.0));
}

fn small(n: usize) -> ScenarioConfig {
    let mut cfg = one_tx(40);
    cfg.topology.n = n;
    cfg.topology.degree_cap = 12;
    cfg.workload.rate_per_s = 10.0;
    cfg
}

#[test]
fn every_scheme_conserves_data_plane_bytes() {
    let cfg = small(80);
    for scheme in SchemeId::TABLE.into_iter().chain([SchemeId::Flood]) {
        let m = run_single(&cfg, scheme, 5, RunOptions::default()).unwrap();
        assert!(!m.partial, "{scheme:?}");
        assert_eq!(m.bytes.data + m.bytes.duplicate, m.data_plane_sent, "{scheme:?}");
        assert_eq!(m.honest_deliveries, (m.honest as u64 - 1) * m.txs.len() as u64, "{scheme:?}");
    }
}

#[test]
fn runs_are_deterministic() {
    let cfg = small(80);
    for scheme in [SchemeId::BlockSdnFull, SchemeId::Mercury, SchemeId::Perigee8] {
        let a = run_single(&cfg, scheme, 9, RunOptions { keep_receipts: true }).unwrap();
        let b = run_single(&cfg, scheme, 9, RunOptions { keep_receipts: true }).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = run_single(&cfg, scheme, 10, RunOptions::default()).unwrap();
        assert_ne!(a.txs[0].coverage_ms, None);
        assert_ne!(serde_json::to_string(&a.txs).unwrap(), serde_json::to_string(&c.txs).unwrap());
    }
}

#[test]
fn silenced_controller_still_covers_everyone() {
    let mut cfg = small(120);
    cfg.controller.halt_at_ms = Some(10_000.0);
    cfg.workload.txs = 200;
    cfg.workload.rate_per_s = 3.0;
    for seed in 0..5 {
        let m = run_single(&cfg, SchemeId::BlockSdnFull, seed, RunOptions::default()).unwrap();
        assert!(!m.partial, "seed {seed}: {} undelivered", m.undelivered);
        let last = m.txs.iter().map(|t| t.t0_ms).fold(0.0, f64::max);
        assert!(last > 40_000.0, "workload reaches past the fallback timeout");
    }
}
