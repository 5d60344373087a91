//! Strong connectivity of relay-list digraphs.
//!
//! A relay list only pushes to a subset of peers, so a node that appears in
//! no neighbor's list never hears of anything. `repair_reachability` swaps
//! the fewest list entries needed for every node to reach every other one.

use std::collections::VecDeque;

use crate::overlay::{NodeId, Overlay};

/// Adjacency in compressed rows.
struct Csr {
    off: Vec<u32>,
    adj: Vec<u32>,
}

impl Csr {
    fn forward(lists: &[Vec<NodeId>]) -> Self {
        let mut off = Vec::with_capacity(lists.len() + 1);
        let mut adj = Vec::new();
        off.push(0);
        for l in lists {
            adj.extend(l.iter().map(|p| p.0));
            off.push(adj.len() as u32);
        }
        Csr { off, adj }
    }

    fn backward(lists: &[Vec<NodeId>]) -> Self {
        let n = lists.len();
        let mut off = vec![0u32; n + 1];
        for p in lists.iter().flatten() {
            off[p.idx() + 1] += 1;
        }
        for i in 0..n {
            off[i + 1] += off[i];
        }
        let mut fill = off.clone();
        let mut adj = vec![0u32; off[n] as usize];
        for (u, l) in lists.iter().enumerate() {
            for p in l {
                adj[fill[p.idx()] as usize] = u as u32;
                fill[p.idx()] += 1;
            }
        }
        Csr { off, adj }
    }

    fn row(&self, u: usize) -> &[u32] {
        &self.adj[self.off[u] as usize..self.off[u + 1] as usize]
    }
}

fn bfs(n: usize, g: &Csr) -> Vec<bool> {
    let mut seen = vec![false; n];
    if n == 0 {
        return seen;
    }
    seen[0] = true;
    let mut q = VecDeque::from([0usize]);
    while let Some(u) = q.pop_front() {
        for &w in g.row(u) {
            if !seen[w as usize] {
                seen[w as usize] = true;
                q.push_back(w as usize);
            }
        }
    }
    seen
}

fn forward(lists: &[Vec<NodeId>]) -> Csr {
    Csr::forward(lists)
}

fn backward(lists: &[Vec<NodeId>]) -> Csr {
    Csr::backward(lists)
}

pub fn strongly_connected(lists: &[Vec<NodeId>]) -> bool {
    let n = lists.len();
    bfs(n, &forward(lists)).iter().all(|&s| s) && bfs(n, &backward(lists)).iter().all(|&s| s)
}

fn count(seen: &[bool]) -> usize {
    seen.iter().filter(|&&s| s).count()
}

/// Reach counts from and to node 0.
fn coverage(lists: &[Vec<NodeId>]) -> (usize, usize) {
    let n = lists.len();
    (count(&bfs(n, &forward(lists))), count(&bfs(n, &backward(lists))))
}

/// Adds the edge `u -> target`, appending below `cap` or else overwriting a
/// slot (unprotected slots first). Only an edit that strictly improves the
/// coverage without shrinking either direction is kept.
fn try_edge(lists: &mut [Vec<NodeId>], before: (usize, usize), u: NodeId, target: NodeId, protected: usize, cap: usize) -> bool {
    let better = |c: (usize, usize)| c.0 >= before.0 && c.1 >= before.1 && c != before;
    if lists[u.idx()].len() < cap {
        lists[u.idx()].push(target);
        if better(coverage(lists)) {
            return true;
        }
        lists[u.idx()].pop();
        return false;
    }
    // overwrite the best-covered targets first; they are the likeliest to
    // stay reachable without this edge
    let mut indeg = vec![0u32; lists.len()];
    for p in lists.iter().flatten() {
        indeg[p.idx()] += 1;
    }
    let len = lists[u.idx()].len();
    let p = protected.min(len);
    let by_cover = |r: std::ops::Range<usize>| {
        let mut v: Vec<usize> = r.collect();
        v.sort_by_key(|&i| (std::cmp::Reverse(indeg[lists[u.idx()][i].idx()]), i));
        v
    };
    let slots = by_cover(p..len).into_iter().chain(by_cover(0..p));
    for i in slots {
        let old = std::mem::replace(&mut lists[u.idx()][i], target);
        if better(coverage(lists)) {
            return true;
        }
        lists[u.idx()][i] = old;
    }
    false
}

/// Makes the relay digraph strongly connected on a connected overlay by
/// overwriting or adding list entries with overlay neighbors. The first
/// `protected(v)` entries of `v`'s list are overwritten only as a last
/// resort and no list grows beyond `cap`. Returns the number of edits.
pub fn repair_reachability(
    lists: &mut [Vec<NodeId>],
    overlay: &Overlay,
    cap: usize,
    protected: impl Fn(NodeId) -> usize,
) -> usize {
    let n = lists.len();
    let cap = cap.max(1);
    let mut edits = 0;
    loop {
        let reached = bfs(n, &forward(lists));
        let reaches = bfs(n, &backward(lists));
        if reached.iter().all(|&r| r) && reaches.iter().all(|&r| r) {
            return edits;
        }
        // an unreached node gains an in-edge from a reached neighbor, and a
        // node that cannot reach the root points at a neighbor that can
        let before = (count(&reached), count(&reaches));
        let mut progress = false;
        'search: for v in (0..n).map(|v| NodeId(v as u32)) {
            if !reached[v.idx()] {
                for &u in overlay.peers(v).iter().filter(|u| reached[u.idx()]) {
                    if try_edge(lists, before, u, v, protected(u), cap) {
                        progress = true;
                        break 'search;
                    }
                }
            }
            if !reaches[v.idx()] {
                for &w in overlay.peers(v).iter().filter(|w| reaches[w.idx()]) {
                    if try_edge(lists, before, v, w, protected(v), cap) {
                        progress = true;
                        break 'search;
                    }
                }
            }
        }
        if !progress {
            log::warn!("relay lists still not strongly connected after {edits} edits");
            return edits;
        }
        edits += 1;
    }
}
