//! Token similarity: inter-view nearest neighbours and DPC-KNN clustering.
//!
//! Both operations work on plain `f64` token values and are pure functions of
//! their inputs. Distances are squared Euclidean internally; separation values
//! are reported as true Euclidean distances. Ties are always broken toward
//! the lower flat index, which makes every result reproducible bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{contract, Result};

/// Default neighbours per other view.
pub const DEFAULT_K: usize = 5;
/// Default neighbourhood size for the DPC-KNN density.
pub const DEFAULT_K_DPC: usize = 15;
/// Default group count for multi-view input.
pub const DEFAULT_GROUPS: usize = 196;
/// Group count used for single-view input.
pub const SINGLE_VIEW_GROUPS: usize = 32;

/// `views x tokens_per_view x dim` block of token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    views: usize,
    tokens_per_view: usize,
    dim: usize,
    values: Vec<f64>,
}

impl TokenSet {
    pub fn new(views: usize, tokens_per_view: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if views == 0 || tokens_per_view == 0 || dim == 0 {
            return Err(contract(format!("empty token set {views}x{tokens_per_view}x{dim}")));
        }
        if values.len() != views * tokens_per_view * dim {
            return Err(contract(format!(
                "token set {views}x{tokens_per_view}x{dim} needs {} values, got {}",
                views * tokens_per_view * dim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(contract(format!("token value {i} is not finite")));
        }
        Ok(Self { views, tokens_per_view, dim, values })
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn tokens_per_view(&self) -> usize {
        self.tokens_per_view
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.views * self.tokens_per_view
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn token(&self, view: usize, token: usize) -> &[f64] {
        self.flat(view * self.tokens_per_view + token)
    }

    pub fn flat(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Reorders views: view `i` of the result is view `order[i]` of `self`.
    pub fn permute_views(&self, order: &[usize]) -> Self {
        let block = self.tokens_per_view * self.dim;
        let values = order.iter().flat_map(|&v| self.values[v * block..(v + 1) * block].iter().copied()).collect();
        Self { values, ..*self }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { values: self.values.iter().map(|x| x * c).collect(), ..*self }
    }
}

/// Squared Euclidean distance, summed in coordinate order.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub view: usize,
    pub token: usize,
    /// Squared Euclidean distance to the anchor.
    pub dist2: f64,
}

/// For every anchor token, its `k` nearest tokens in each other view.
///
/// Neighbours of one anchor are stored view by view in ascending view order;
/// within a view they are sorted by distance, then token index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub views: usize,
    pub tokens_per_view: usize,
    pub k: usize,
    pub entries: Vec<Neighbor>,
}

impl NeighborIndex {
    pub fn per_anchor(&self) -> usize {
        self.k * (self.views - 1)
    }

    pub fn neighbors(&self, view: usize, token: usize) -> &[Neighbor] {
        let m = self.per_anchor();
        let a = view * self.tokens_per_view + token;
        &self.entries[a * m..(a + 1) * m]
    }

    /// Flat token index (`view * T + token`) of every neighbour, anchor-major.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|n| n.view * self.tokens_per_view + n.token).collect()
    }
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Matches every token with its `k` nearest tokens from each other view.
pub fn inter_view_knn(tokens: &TokenSet, k: usize) -> Result<NeighborIndex> {
    let (n, t) = (tokens.views, tokens.tokens_per_view);
    if n < 2 {
        return Err(contract(format!("inter-view KNN needs at least 2 views, got {n}")));
    }
    if k == 0 || k > t {
        return Err(contract(format!("k = {k} must be in 1..={t}")));
    }
    let mut entries = Vec::with_capacity(n * t * k * (n - 1));
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(t);
    for v in 0..n {
        for a in 0..t {
            let anchor = tokens.token(v, a);
            for w in (0..n).filter(|&w| w != v) {
                cand.clear();
                cand.extend((0..t).map(|b| (squared_distance(anchor, tokens.token(w, b)), b)));
                if k < t {
                    cand.select_nth_unstable_by(k - 1, by_distance_then_index);
                }
                let best = &mut cand[..k];
                best.sort_unstable_by(by_distance_then_index);
                entries.extend(best.iter().map(|&(dist2, token)| Neighbor { view: w, token, dist2 }));
            }
        }
    }
    Ok(NeighborIndex { views: n, tokens_per_view: t, k, entries })
}

/// Partition of tokens into density-peak groups.
///
/// Groups are numbered by center rank: group 0 is the center with the largest
/// `rho * delta`. The numbering depends only on token content, not on the
/// order tokens were supplied in (absent ties).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub g: usize,
    /// Group id of every token.
    pub assignment: Vec<usize>,
    /// Token index of each group's center.
    pub centers: Vec<usize>,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub importance: Vec<f64>,
}

impl ClusterAssignment {
    /// Token indices of every group, ascending within each group.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.g];
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

/// DPC-KNN clustering of `points` (row-major, `dim` columns) into `g` groups.
///
/// * density `rho_i = exp(-(1/k) sum of the k smallest squared distances to
///   other tokens)`, the k distances summed in ascending order;
/// * separation `delta_i` = Euclidean distance to the nearest token of higher
///   density, where equal densities are ordered by lower index; the densest
///   token takes its largest distance to any token;
/// * the `g` tokens with the largest `rho * delta` become centers (ties: lower
///   index) and every other token joins its nearest center (ties: lower center
///   token index).
///
/// Ranking uses `ln rho + ln delta`, which orders identically to the product
/// but does not underflow when distances are large.
pub fn dpc_knn_cluster(points: &[f64], dim: usize, k_dpc: usize, g: usize, importance: &[f64]) -> Result<ClusterAssignment> {
    if dim == 0 || points.len() % dim != 0 || points.is_empty() {
        return Err(contract(format!("{} values do not form rows of width {dim}", points.len())));
    }
    let n = points.len() / dim;
    if g == 0 || g > n {
        return Err(contract(format!("group count {g} must be in 1..={n}")));
    }
    if k_dpc == 0 || k_dpc > n - 1 {
        return Err(contract(format!("k_dpc = {k_dpc} must be in 1..={}", n.saturating_sub(1))));
    }
    if importance.len() != n {
        return Err(contract(format!("importance has {} entries for {n} tokens", importance.len())));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(row(i), row(j));
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }

    let mut log_rho = vec![0.0; n];
    let mut buf: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        buf.clear();
        buf.extend((0..n).filter(|&j| j != i).map(|j| (d2[i * n + j], j)));
        if k_dpc < buf.len() {
            buf.select_nth_unstable_by(k_dpc - 1, by_distance_then_index);
        }
        let nearest = &mut buf[..k_dpc];
        nearest.sort_unstable_by(by_distance_then_index);
        let s: f64 = nearest.iter().fold(0.0, |acc, &(d, _)| acc + d);
        log_rho[i] = -(s / k_dpc as f64);
    }
    let rho: Vec<f64> = log_rho.iter().map(|l| l.exp()).collect();

    let denser = |j: usize, i: usize| log_rho[j] > log_rho[i] || (log_rho[j] == log_rho[i] && j < i);
    let mut delta = vec![0.0; n];
    for i in 0..n {
        let mut best: Option<f64> = None;
        let mut far = 0.0f64;
        for j in 0..n {
            let d = d2[i * n + j];
            far = far.max(d);
            if denser(j, i) && best.map_or(true, |b| d < b) {
                best = Some(d);
            }
        }
        delta[i] = best.unwrap_or(far).sqrt();
    }

    let score: Vec<f64> = (0..n).map(|i| log_rho[i] + delta[i].ln()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let centers: Vec<usize> = order[..g].to_vec();

    let mut assignment = vec![usize::MAX; n];
    for (gid, &c) in centers.iter().enumerate() {
        assignment[c] = gid;
    }
    let mut by_token: Vec<(usize, usize)> = centers.iter().enumerate().map(|(gid, &c)| (c, gid)).collect();
    by_token.sort_unstable();
    for i in 0..n {
        if assignment[i] != usize::MAX {
            continue;
        }
        let mut best = (f64::INFINITY, 0usize);
        for &(c, gid) in &by_token {
            let d = d2[i * n + c];
            if d < best.0 {
                best = (d, gid);
            }
        }
        assignment[i] = best.1;
    }
    Ok(ClusterAssignment { g, assignment, centers, rho, delta, importance: importance.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tokens(seed: u64, n: usize, t: usize, d: usize) -> TokenSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TokenSet::new(n, t, d, v).unwrap()
    }

    #[test]
    fn identical_single_tokens_match_at_zero_distance() {
        let ts = TokenSet::new(2, 1, 3, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap();
        let idx = inter_view_knn(&ts, 1).unwrap();
        assert_eq!(idx.neighbors(0, 0), &[Neighbor { view: 1, token: 0, dist2: 0.0 }]);
        assert_eq!(idx.neighbors(1, 0), &[Neighbor { view: 0, token: 0, dist2: 0.0 }]);
    }

    #[test]
    fn knn_contract_errors() {
        let ts = random_tokens(1, 1, 4, 2);
        assert!(inter_view_knn(&ts, 1).is_err());
        let ts = random_tokens(1, 2, 4, 2);
        assert!(inter_view_knn(&ts, 5).is_err());
        assert!(inter_view_knn(&ts, 4).is_ok());
    }

    #[test]
    fn knn_matches_oracle_on_random_sets() {
        for seed in 0..100 {
            let ts = random_tokens(seed, 3, 10, 8);
            assert_eq!(inter_view_knn(&ts, 5).unwrap(), oracle::knn_oracle(&ts, 5), "seed {seed}");
        }
    }

    #[test]
    fn knn_ties_prefer_lower_token() {
        // view 1 has two copies of the same token; the lower index must win.
        let ts = TokenSet::new(2, 2, 1, vec![0.0, 5.0, 1.0, 1.0]).unwrap();
        let idx = inter_view_knn(&ts, 1).unwrap();
        assert_eq!(idx.neighbors(0, 0)[0].token, 0);
        assert_eq!(idx.neighbors(0, 1)[0].token, 0);
    }

    #[test]
    fn every_token_its_own_center_when_g_equals_n() {
        let ts = random_tokens(3, 2, 5, 4);
        let c = dpc_knn_cluster(ts.values(), 4, 3, 10, &[0.0; 10]).unwrap();
        let mut centers = c.centers.clone();
        centers.sort_unstable();
        assert_eq!(centers, (0..10).collect::<Vec<_>>());
        for (i, &a) in c.assignment.iter().enumerate() {
            assert_eq!(c.centers[a], i);
        }
    }

    #[test]
    fn identical_tokens_pick_lowest_indices() {
        let pts = vec![0.25; 6 * 3];
        let c = dpc_knn_cluster(&pts, 3, 2, 3, &[0.0; 6]).unwrap();
        assert_eq!(c.centers, vec![0, 1, 2]);
        assert!(c.rho.iter().all(|&r| r == 1.0));
        assert_eq!(c.assignment, vec![0, 1, 2, 0, 0, 0]);
    }

    #[test]
    fn two_blobs_split_by_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts = Vec::new();
        for i in 0..20 {
            let centre = if i < 10 { -5.0 } else { 5.0 };
            for _ in 0..2 {
                pts.push(centre + rng.gen_range(-0.3..0.3));
            }
        }
        let c = dpc_knn_cluster(&pts, 2, 4, 2, &[0.0; 20]).unwrap();
        let first = c.assignment[0];
        assert!(c.assignment[..10].iter().all(|&a| a == first));
        assert!(c.assignment[10..].iter().all(|&a| a != first));
        assert_eq!(c, oracle::dpc_oracle(&pts, 2, 4, 2, &[0.0; 20]));
    }

    #[test]
    fn cluster_contract_errors() {
        let pts = vec![0.0; 8];
        assert!(dpc_knn_cluster(&pts, 2, 1, 5, &[0.0; 4]).is_err());
        assert!(dpc_knn_cluster(&pts, 2, 4, 2, &[0.0; 4]).is_err());
        assert!(dpc_knn_cluster(&pts, 2, 1, 2, &[0.0; 3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn clustering_is_a_partition(seed in 0u64..10_000, n in 2usize..40, g in 1usize..10) {
            let g = g.min(n);
            let ts = random_tokens(seed, 1, n, 3);
            let c = dpc_knn_cluster(ts.values(), 3, (n - 1).min(5), g, &vec![0.0; n]).unwrap();
            prop_assert_eq!(c.assignment.len(), n);
            let groups = c.groups();
            prop_assert_eq!(groups.len(), g);
            for (gid, members) in groups.iter().enumerate() {
                prop_assert!(!members.is_empty());
                prop_assert!(members.contains(&c.centers[gid]));
            }
        }

        #[test]
        fn knn_is_view_permutation_equivariant(seed in 0u64..10_000, n in 2usize..5, t in 1usize..8) {
            let ts = random_tokens(seed, n, t, 4);
            let k = t.min(3);
            let mut order: Vec<usize> = (0..n).collect();
            order.rotate_left(seed as usize % n);
            let permuted = ts.permute_views(&order);
            let a = inter_view_knn(&ts, k).unwrap();
            let b = inter_view_knn(&permuted, k).unwrap();
            // view i of `permuted` is view order[i] of `ts`
            for (pv, &v) in order.iter().enumerate() {
                for tok in 0..t {
                    let mut lhs: Vec<(usize, usize)> = a.neighbors(v, tok).iter().map(|x| (x.view, x.token)).collect();
                    let mut rhs: Vec<(usize, usize)> = b.neighbors(pv, tok).iter().map(|x| (order[x.view], x.token)).collect();
                    lhs.sort_unstable();
                    rhs.sort_unstable();
                    prop_assert_eq!(lhs, rhs);
                }
            }
        }

        #[test]
        fn knn_invariant_under_positive_scaling(seed in 0u64..10_000, c in 0.1f64..10.0) {
            let ts = random_tokens(seed, 3, 6, 4);
            let a = inter_view_knn(&ts, 2).unwrap();
            let b = inter_view_knn(&ts.scaled(c), 2).unwrap();
            let ia: Vec<_> = a.entries.iter().map(|x| (x.view, x.token)).collect();
            let ib: Vec<_> = b.entries.iter().map(|x| (x.view, x.token)).collect();
            prop_assert_eq!(ia, ib);
        }

        /// Scaling by c preserves density order and scales separation by c;
        /// with centers held fixed, nearest-center assignment is unchanged.
        #[test]
        fn clustering_structure_under_positive_scaling(seed in 0u64..10_000, c in 0.2f64..5.0) {
            let ts = random_tokens(seed, 2, 8, 3);
            let a = dpc_knn_cluster(ts.values(), 3, 4, 4, &[0.0; 16]).unwrap();
            let scaled = ts.scaled(c);
            let b = dpc_knn_cluster(scaled.values(), 3, 4, 4, &[0.0; 16]).unwrap();
            let mut oa: Vec<usize> = (0..16).collect();
            oa.sort_by(|&i, &j| a.rho[j].total_cmp(&a.rho[i]));
            let mut ob: Vec<usize> = (0..16).collect();
            ob.sort_by(|&i, &j| b.rho[j].total_cmp(&b.rho[i]));
            prop_assert_eq!(oa, ob);
            for i in 0..16 {
                prop_assert!((b.delta[i] - c * a.delta[i]).abs() <= 1e-9 * (1.0 + b.delta[i]));
            }
            for i in 0..16 {
                let near = |pts: &[f64]| {
                    let mut best = (f64::INFINITY, 0);
                    for (gid, &ctr) in a.centers.iter().enumerate() {
                        let d = squared_distance(&pts[i * 3..i * 3 + 3], &pts[ctr * 3..ctr * 3 + 3]);
                        if d < best.0 { best = (d, gid); }
                    }
                    best.1
                };
                prop_assert_eq!(near(ts.values()), near(scaled.values()));
            }
        }
    }
}
