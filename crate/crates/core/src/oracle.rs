//! Brute-force reference implementations used to verify [`crate::geometry`].
//!
//! These build the full distance matrix and sort whole candidate lists. They
//! share nothing with the production paths except the distance formula and
//! are meant for small inputs (a few hundred tokens).

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;

use crate::geometry::{squared_distance, ClusterAssignment, Neighbor, NeighborIndex, TokenSet};

/// Full `N x N` squared distance matrix.
pub fn distance_matrix(points: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let n = points.len() / dim;
    (0..n)
        .map(|i| (0..n).map(|j| squared_distance(&points[i * dim..(i + 1) * dim], &points[j * dim..(j + 1) * dim])).collect())
        .collect()
}

/// Exhaustive inter-view KNN: every anchor's candidates from all other views
/// are fully sorted by (view, distance, token) and the first `k` of each view
/// kept.
pub fn knn_oracle(tokens: &TokenSet, k: usize) -> NeighborIndex {
    let (n, t) = (tokens.views(), tokens.tokens_per_view());
    let dm = distance_matrix(tokens.values(), tokens.dim());
    let mut entries = Vec::new();
    for a in 0..n * t {
        let av = a / t;
        let mut cand: Vec<(usize, f64, usize)> =
            (0..n * t).filter(|&b| b / t != av).map(|b| (b / t, dm[a][b], b % t)).collect();
        cand.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.partial_cmp(&y.1).unwrap()).then(x.2.cmp(&y.2)));
        for view in (0..n).filter(|&w| w != av) {
            entries.extend(
                cand.iter().filter(|c| c.0 == view).take(k).map(|&(view, dist2, token)| Neighbor { view, token, dist2 }),
            );
        }
    }
    NeighborIndex { views: n, tokens_per_view: t, k, entries }
}

/// Direct DPC-KNN: density from fully sorted rows, separation by scanning all
/// tokens, centers by sorting the plain product `rho * delta`.
pub fn dpc_oracle(points: &[f64], dim: usize, k_dpc: usize, g: usize, importance: &[f64]) -> ClusterAssignment {
    let n = points.len() / dim;
    let dm = distance_matrix(points, dim);
    let rho: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dm[i][j]).collect();
            row.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut s = 0.0;
            for d in &row[..k_dpc] {
                s += d;
            }
            (-(s / k_dpc as f64)).exp()
        })
        .collect();
    let delta: Vec<f64> = (0..n)
        .map(|i| {
            let higher: Vec<usize> = (0..n).filter(|&j| rho[j] > rho[i] || (rho[j] == rho[i] && j < i)).collect();
            if higher.is_empty() {
                (0..n).map(|j| dm[i][j]).fold(0.0, f64::max).sqrt()
            } else {
                higher.iter().map(|&j| dm[i][j]).fold(f64::INFINITY, f64::min).sqrt()
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| (rho[b] * delta[b]).partial_cmp(&(rho[a] * delta[a])).unwrap().then(a.cmp(&b)));
    let centers: Vec<usize> = order[..g].to_vec();
    let assignment = (0..n)
        .map(|i| {
            if let Some(gid) = centers.iter().position(|&c| c == i) {
                return gid;
            }
            let mut best: Option<(f64, usize, usize)> = None;
            for (gid, &c) in centers.iter().enumerate() {
                let cand = (dm[i][c], c, gid);
                best = match best {
                    Some(b) if (b.0, b.1) <= (cand.0, cand.1) => Some(b),
                    _ => Some(cand),
                };
            }
            best.unwrap().2
        })
        .collect();
    ClusterAssignment { g, assignment, centers, rho, delta, importance: importance.to_vec() }
}
