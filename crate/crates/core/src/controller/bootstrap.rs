//! First-window placement: landmark MDS over shortest-path delays, then a
//! longer CG refinement on the measured pairs.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, SymmetricEigen};

use super::embedding::{cg_steps, Pair};
use crate::geom::{random_in_ball, Vec3};
use crate::rng;

fn dijkstra(adj: &[Vec<(u32, f64)>], src: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    // distances as integer nanoseconds keep the heap totally ordered
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Reverse((0u64, src)));
    while let Some(Reverse((d, u))) = heap.pop() {
        let du = d as f64 * 1e-6;
        if du > dist[u] + 1e-9 {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = dist[u] + w;
            if nd < dist[v as usize] {
                dist[v as usize] = nd;
                heap.push(Reverse(((nd * 1e6) as u64, v as usize)));
            }
        }
    }
    dist
}

/// Landmark MDS in three dimensions followed by `refine` CG steps. Nodes the
/// measured graph does not reach get a small random position.
pub fn bootstrap_coordinates(n: usize, pairs: &[Pair], landmarks: usize, refine: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng::stream(seed, "controller.bootstrap", 0);
    let mut x: Vec<Vec3> = (0..n).map(|_| random_in_ball(&mut r, 1.0)).collect();
    if pairs.is_empty() || n < 2 {
        return x;
    }
    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for p in pairs {
        adj[p.u as usize].push((p.v, p.l));
        adj[p.v as usize].push((p.u, p.l));
    }
    let start = (0..n).max_by_key(|&i| (adj[i].len(), Reverse(i))).unwrap_or(0);

    // farthest-point landmark selection
    let want = landmarks.clamp(4, n);
    let mut chosen = Vec::with_capacity(want);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(want);
    let mut nearest = vec![f64::INFINITY; n];
    let mut next = start;
    while chosen.len() < want {
        let d = dijkstra(&adj, next);
        for i in 0..n {
            nearest[i] = nearest[i].min(d[i]);
        }
        chosen.push(next);
        rows.push(d);
        let cand = (0..n)
            .filter(|i| nearest[*i].is_finite() && !chosen.contains(i))
            .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)));
        match cand {
            Some(c) if nearest[c] > 0.0 => next = c,
            _ => break,
        }
    }
    let k = chosen.len();
    if k < 4 {
        return x;
    }
    let mut d2 = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let v = 0.5 * (rows[a][chosen[b]] + rows[b][chosen[a]]);
            d2[(a, b)] = v * v;
        }
    }
    let j = DMatrix::<f64>::identity(k, k) - DMatrix::<f64>::from_element(k, k, 1.0 / k as f64);
    let b = -0.5 * &j * &d2 * &j;
    let eig = SymmetricEigen::new(b);
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top: Vec<usize> = idx
        .into_iter()
        .take(3)
        .filter(|&c| eig.eigenvalues[c] > 1e-9)
        .collect();
    let col_mean: Vec<f64> = (0..k).map(|b| (0..k).map(|a| d2[(a, b)]).sum::<f64>() / k as f64).collect();

    for i in 0..n {
        if !(0..k).all(|a| rows[a][i].is_finite()) {
            continue;
        }
        let mut p = Vec3::zeros();
        for (dim, &c) in top.iter().enumerate() {
            let lambda = eig.eigenvalues[c];
            let mut s = 0.0;
            for a in 0..k {
                let da = rows[a][i];
                s += eig.eigenvectors[(a, c)] * (col_mean[a] - da * da);
            }
            p[dim] = 0.5 * s / lambda.sqrt();
        }
        x[i] = p + random_in_ball(&mut r, 1e-3);
    }
    let c = crate::geom::centroid(&x);
    for p in &mut x {
        *p -= c;
    }
    cg_steps(&mut x, pairs, refine);
    x
}
