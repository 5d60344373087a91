//! Weighted least-squares embedding of measured delays into R^3.
//!
//! The objective is `sum over measured pairs of (|x_u - x_v| - l)^2 / l^2`,
//! minimized with a few nonlinear conjugate-gradient steps per window.

use nalgebra::Matrix3;
use serde::Serialize;

use super::matrix::LatencyMatrix;
use crate::auth::{AuthKey, AuthTag};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::overlay::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coordinate {
    pub x: [f64; 3],
    pub err_estimate: f64,
}

impl Coordinate {
    pub fn new(x: Vec3, err_estimate: f64) -> Self {
        Coordinate {
            x: [x[0], x[1], x[2]],
            err_estimate,
        }
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x[0], self.x[1], self.x[2])
    }
}

/// A measured pair with its delay estimate, indexed by dense node position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub u: u32,
    pub v: u32,
    pub l: f64,
}

/// Pairs of `m` usable in the objective. Zero-delay pairs would get infinite
/// weight and are skipped.
pub fn pairs_of(m: &LatencyMatrix, n: usize) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(m.pair_count());
    let mut zero = 0usize;
    for (u, v, l) in m.measured() {
        if u.idx() >= n || v.idx() >= n {
            return Err(Error::Embedding(format!("pair ({u}, {v}) outside {n} coordinates")));
        }
        if l > 0.0 {
            out.push(Pair { u: u.0, v: v.0, l });
        } else {
            zero += 1;
        }
    }
    if zero > 0 {
        log::debug!("skipped {zero} zero-delay pairs in the embedding objective");
    }
    Ok(out)
}

pub fn objective(x: &[Vec3], pairs: &[Pair]) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let d = (x[p.u as usize] - x[p.v as usize]).norm();
            let r = d - p.l;
            r * r / (p.l * p.l)
        })
        .sum()
}

/// Embedding objective over a latency matrix.
pub fn embedding_objective(x: &[Vec3], m: &LatencyMatrix) -> Result<f64> {
    Ok(objective(x, &pairs_of(m, x.len())?))
}

pub fn gradient(x: &[Vec3], pairs: &[Pair]) -> Vec<Vec3> {
    let mut g = vec![Vec3::zeros(); x.len()];
    gradient_into(x, pairs, &mut g);
    g
}

fn gradient_into(x: &[Vec3], pairs: &[Pair], g: &mut [Vec3]) {
    g.iter_mut().for_each(|v| *v = Vec3::zeros());
    for p in pairs {
        let diff = x[p.u as usize] - x[p.v as usize];
        let d = diff.norm();
        if d <= 0.0 {
            continue;
        }
        let c = 2.0 * (d - p.l) / (p.l * p.l * d);
        let f = diff * c;
        g[p.u as usize] += f;
        g[p.v as usize] -= f;
    }
}

fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Root-mean-square coordinate norm, at least 1.
pub fn scale_of(x: &[Vec3]) -> f64 {
    if x.is_empty() {
        return 1.0;
    }
    (x.iter().map(|v| v.norm_squared()).sum::<f64>() / x.len() as f64)
        .sqrt()
        .max(1.0)
}

/// Hessian-vector product by forward differencing of the gradient along `p`.
pub fn hessian_vec(x: &[Vec3], pairs: &[Pair], g: &[Vec3], p: &[Vec3]) -> Vec<Vec3> {
    let pn = (dot(p, p) / p.len().max(1) as f64).sqrt();
    if pn == 0.0 {
        return vec![Vec3::zeros(); x.len()];
    }
    let h = 1e-4 * scale_of(x) / pn;
    let shifted: Vec<Vec3> = x.iter().zip(p).map(|(a, b)| a + b * h).collect();
    let g2 = gradient(&shifted, pairs);
    g2.iter().zip(g).map(|(a, b)| (a - b) / h).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub fallback_steps: usize,
    pub objective_before: f64,
    pub objective_after: f64,
}

/// Symmetric block Gauss-Seidel preconditioner built from the Gauss-Newton
/// approximation of the Hessian: pair `(u, v)` contributes `m = 2 u u^T / l^2`
/// to both diagonal blocks and `-m` to the coupling block.
struct Preconditioner {
    diag_inv: Vec<Matrix3<f64>>,
    /// Per node: coupled node and coupling block `m`.
    links: Vec<Vec<(u32, Matrix3<f64>)>>,
}

impl Preconditioner {
    fn new(x: &[Vec3], pairs: &[Pair]) -> Self {
        let n = x.len();
        let mut diag = vec![Matrix3::zeros(); n];
        let mut links: Vec<Vec<(u32, Matrix3<f64>)>> = vec![Vec::new(); n];
        for p in pairs {
            let diff = x[p.u as usize] - x[p.v as usize];
            let Some(u) = crate::geom::unit(&diff) else { continue };
            let m = u * u.transpose() * (2.0 / (p.l * p.l));
            diag[p.u as usize] += m;
            diag[p.v as usize] += m;
            links[p.u as usize].push((p.v, m));
            links[p.v as usize].push((p.u, m));
        }
        let diag_inv = diag
            .into_iter()
            .map(|m| {
                // damping keeps blocks of nodes with coplanar or no pairs invertible
                let damp = 1e-3 * m.trace() / 3.0 + 1e-12;
                (m + Matrix3::identity() * damp).try_inverse().unwrap_or_else(Matrix3::identity)
            })
            .collect();
        Preconditioner { diag_inv, links }
    }

    /// Forward then backward block sweep. Nodes are visited in order of
    /// decreasing gradient norm, so the worst-placed nodes are solved first
    /// and their neighbors only absorb what is left.
    fn apply(&self, g: &[Vec3]) -> Vec<Vec3> {
        let n = g.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| g[b].norm_squared().total_cmp(&g[a].norm_squared()).then(a.cmp(&b)));
        let mut rank = vec![0usize; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let mut y = vec![Vec3::zeros(); n];
        for &i in &order {
            let mut r = g[i];
            for (j, m) in &self.links[i] {
                if rank[*j as usize] < rank[i] {
                    r += m * y[*j as usize];
                }
            }
            y[i] = self.diag_inv[i] * r;
        }
        let mut z = y.clone();
        for &i in order.iter().rev() {
            let mut r = Vec3::zeros();
            for (j, m) in &self.links[i] {
                if rank[*j as usize] > rank[i] {
                    r += m * z[*j as usize];
                }
            }
            z[i] = y[i] + self.diag_inv[i] * r;
        }
        z
    }
}

/// Gauss-Newton curvature `p^T J^T J p`, never negative.
fn gn_curvature(x: &[Vec3], pairs: &[Pair], p: &[Vec3]) -> f64 {
    pairs
        .iter()
        .filter_map(|q| {
            let u = crate::geom::unit(&(x[q.u as usize] - x[q.v as usize]))?;
            let s = u.dot(&(p[q.u as usize] - p[q.v as usize]));
            Some(2.0 * s * s / (q.l * q.l))
        })
        .sum()
}

/// Derivative of `f(x + a p)` with respect to `a`.
fn slope(x: &[Vec3], pairs: &[Pair], p: &[Vec3], a: f64, trial: &mut [Vec3]) -> f64 {
    for i in 0..x.len() {
        trial[i] = x[i] + p[i] * a;
    }
    dot(&gradient(trial, pairs), p)
}

/// A few secant steps on the directional derivative, starting from the
/// quadratic-model step `a0`.
fn refine_step(x: &[Vec3], pairs: &[Pair], p: &[Vec3], a0: f64, trial: &mut [Vec3]) -> f64 {
    let (mut a_prev, mut s_prev) = (0.0, slope(x, pairs, p, 0.0, trial));
    let mut a = a0;
    for _ in 0..LINE_SEARCH_STEPS {
        let s = slope(x, pairs, p, a, trial);
        if s == s_prev || !s.is_finite() {
            break;
        }
        let next = a - s * (a - a_prev) / (s - s_prev);
        if !next.is_finite() || next <= 0.0 {
            break;
        }
        (a_prev, s_prev, a) = (a, s, next);
    }
    a
}

const LINE_SEARCH_STEPS: usize = 3;

/// Runs `iters` preconditioned nonlinear CG steps in place. Directions are
/// preconditioned with each node's inverted Gauss-Newton block. The step
/// length along direction `p` starts from `-(g.p) / (p.Hp)`, or from the
/// Gauss-Newton curvature when `p.Hp` is not positive, and is refined by a
/// few secant steps. Each step is halved until the
/// objective does not increase, so the result is never worse than the input.
pub fn cg_steps(x: &mut [Vec3], pairs: &[Pair], iters: usize) -> SolveStats {
    let mut stats = SolveStats {
        objective_before: objective(x, pairs),
        ..SolveStats::default()
    };
    let mut f0 = stats.objective_before;
    let mut g = gradient(x, pairs);
    let mut z = Preconditioner::new(x, pairs).apply(&g);
    let mut p: Vec<Vec3> = z.iter().map(|v| -v).collect();
    let mut trial = x.to_vec();
    for _ in 0..iters {
        let gz = dot(&g, &z);
        if !(gz > 0.0) || !gz.is_finite() {
            break;
        }
        stats.iterations += 1;
        let hp = hessian_vec(x, pairs, &g, &p);
        let php = dot(&p, &hp);
        let mut alpha = if php > 0.0 && php.is_finite() {
            -dot(&g, &p) / php
        } else {
            stats.fallback_steps += 1;
            log::debug!("non-positive curvature {php}; using the Gauss-Newton model");
            let gn = gn_curvature(x, pairs, &p);
            if gn > 0.0 {
                -dot(&g, &p) / gn
            } else {
                let pmax = p.iter().map(|v| v.norm()).fold(0.0, f64::max);
                1.0 / pmax.max(1e-12)
            }
        };
        alpha = refine_step(x, pairs, &p, alpha, &mut trial);
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..x.len() {
                trial[i] = x[i] + p[i] * alpha;
            }
            let f1 = objective(&trial, pairs);
            if f1 <= f0 {
                x.copy_from_slice(&trial);
                f0 = f1;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        let g_new = gradient(x, pairs);
        let z_new = Preconditioner::new(x, pairs).apply(&g_new);
        // Polak-Ribiere with restart
        let beta = ((dot(&g_new, &z_new) - dot(&g_new, &z)) / gz).max(0.0);
        for i in 0..p.len() {
            p[i] = -z_new[i] + p[i] * beta;
        }
        if dot(&g_new, &p) >= 0.0 {
            for i in 0..p.len() {
                p[i] = -z_new[i];
            }
        }
        g = g_new;
        z = z_new;
    }
    stats.objective_after = f0;
    stats
}

/// Median relative error `| |x_u - x_v| - l | / l` over each node's pairs.
/// Nodes without pairs get `f64::INFINITY`.
pub fn node_errors(x: &[Vec3], pairs: &[Pair]) -> Vec<f64> {
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); x.len()];
    for p in pairs {
        let d = (x[p.u as usize] - x[p.v as usize]).norm();
        let e = (d - p.l).abs() / p.l;
        per[p.u as usize].push(e);
        per[p.v as usize].push(e);
    }
    per.iter()
        .map(|v| crate::stats::median(v).unwrap_or(f64::INFINITY))
        .collect()
}

/// Median relative error over all pairs.
pub fn median_pair_error(x: &[Vec3], pairs: &[Pair]) -> f64 {
    let errs: Vec<f64> = pairs
        .iter()
        .map(|p| ((x[p.u as usize] - x[p.v as usize]).norm() - p.l).abs() / p.l)
        .collect();
    crate::stats::median(&errs).unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignedDelta {
    pub node: NodeId,
    pub delta: Vec3,
    pub window_id: u64,
    pub tag: AuthTag,
}

/// Wire size of one delta inside a controller message: node id plus three
/// 32-bit components.
pub const DELTA_BYTES: usize = 16;

impl SignedDelta {
    pub fn payload(node: NodeId, delta: &Vec3) -> Vec<u8> {
        let mut b = Vec::with_capacity(DELTA_BYTES);
        b.extend_from_slice(&node.0.to_be_bytes());
        for c in delta.iter() {
            b.extend_from_slice(&(*c as f32).to_be_bytes());
        }
        b
    }

    pub fn new(node: NodeId, delta: Vec3, window_id: u64, key: &AuthKey) -> Self {
        let tag = key.tag("coord-delta", window_id, &Self::payload(node, &delta));
        SignedDelta {
            node,
            delta,
            window_id,
            tag,
        }
    }

    pub fn verify(&self, key: &AuthKey) -> bool {
        key.verify(
            "coord-delta",
            self.window_id,
            &Self::payload(self.node, &self.delta),
            &self.tag,
        )
    }
}

/// Deltas for every node that moved strictly more than `epsilon_ms`.
pub fn deltas_between(
    before: &[Vec3],
    after: &[Vec3],
    epsilon_ms: f64,
    window_id: u64,
    key: &AuthKey,
) -> Vec<SignedDelta> {
    before
        .iter()
        .zip(after)
        .enumerate()
        .filter_map(|(i, (a, b))| {
            let d = b - a;
            (d.norm() > epsilon_ms).then(|| SignedDelta::new(NodeId(i as u32), d, window_id, key))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub x: Vec<Vec3>,
    pub deltas: Vec<SignedDelta>,
    pub stats: SolveStats,
}

/// Two CG steps on the embedding objective followed by thresholded delta
/// emission.
pub fn centralized_vivaldi_update(
    x_prev: &[Vec3],
    m: &LatencyMatrix,
    epsilon_ms: f64,
    window_id: u64,
    key: &AuthKey,
) -> Result<UpdateOutcome> {
    if m.is_empty() {
        return Err(Error::Embedding("latency matrix is empty".into()));
    }
    let pairs = pairs_of(m, x_prev.len())?;
    let mut x = x_prev.to_vec();
    let stats = cg_steps(&mut x, &pairs, 2);
    let deltas = deltas_between(x_prev, &x, epsilon_ms, window_id, key);
    Ok(UpdateOutcome { x, deltas, stats })
}
