//! HDBSCAN over geographic points with haversine distances.
//!
//! Core distances count the point itself, so `min_samples = 1` clusters on
//! raw distances. The single-linkage hierarchy is built from an exact Prim
//! MST of the mutual-reachability graph; merges at equal distance are
//! grouped into one multi-way node, which makes the condensed tree
//! independent of MST tie-breaking. The root takes part in excess-of-mass
//! selection; when it wins, only points that persist to its final lambda are
//! labelled (the usual single-cluster rule).

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{haversine_m, validity::dbcv, GeoError};
use crate::model::GeoPoint;

pub const MIN_SAMPLES_CANDIDATES: [usize; 3] = [1, 10, 100];
pub const MIN_CLUSTER_SIZE_GRID: [usize; 7] = [2, 3, 5, 8, 13, 21, 34];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterParams {
    pub min_samples: usize,
    pub min_cluster_size: usize,
}

impl ClusterParams {
    pub fn new(min_samples: usize, min_cluster_size: usize) -> Result<Self, GeoError> {
        let p = ClusterParams {
            min_samples,
            min_cluster_size,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), GeoError> {
        if self.min_samples == 0 {
            return Err(GeoError::MinSamples);
        }
        if self.min_cluster_size < 2 {
            return Err(GeoError::ClusterSize(self.min_cluster_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster id per input point, `None` for noise. Ids are dense and
    /// ordered by each cluster's lowest point index.
    pub labels: Vec<Option<usize>>,
    pub params: ClusterParams,
    pub validity: f64,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn is_all_noise(&self) -> bool {
        self.labels.iter().all(Option::is_none)
    }

    fn all_noise(n: usize, params: ClusterParams) -> Self {
        Clustering {
            labels: vec![None; n],
            params,
            validity: -1.0,
        }
    }
}

/// One cluster of the condensed tree.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedCluster {
    pub parent: Option<usize>,
    pub birth_lambda: f64,
    pub size: usize,
    pub children: Vec<usize>,
    /// Points leaving this cluster directly, with their lambda.
    pub fallen: Vec<(usize, f64)>,
    pub stability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondensedTree {
    /// Index 0 is the root; children always have larger indices.
    pub clusters: Vec<CondensedCluster>,
    pub selected: Vec<bool>,
}

// lambda differences where both ends may be infinite (zero distances)
fn lambda_gap(later: f64, earlier: f64) -> f64 {
    if later == earlier {
        0.0
    } else {
        later - earlier
    }
}

fn lambda_of(w: f64) -> f64 {
    if w > 0.0 {
        1.0 / w
    } else {
        f64::INFINITY
    }
}

fn core_distances(points: &[GeoPoint], min_samples: usize) -> Vec<f64> {
    points
        .par_iter()
        .map(|&p| {
            let mut row: Vec<f64> = points.iter().map(|&q| haversine_m(p, q)).collect();
            let k = min_samples - 1;
            let (_, kth, _) = row.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
            *kth
        })
        .collect()
}

/// Exact Prim MST over mutual-reachability distances; O(n^2) time, O(n) memory.
fn mst_edges(points: &[GeoPoint], core: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = points.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = haversine_m(points[current], points[j])
                .max(core[current])
                .max(core[j]);
            if d < best[j] {
                best[j] = d;
                from[j] = current;
            }
            if best[j] < next_w || next == usize::MAX {
                next_w = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next], next, next_w));
        current = next;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

struct DendroNode {
    children: Vec<usize>,
    size: usize,
    weight: f64,
}

/// Multi-way single-linkage hierarchy; nodes `0..n` are the points and the
/// last node is the root.
fn dendrogram(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<DendroNode> {
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut nodes: Vec<DendroNode> = (0..n)
        .map(|_| DendroNode {
            children: Vec::new(),
            size: 1,
            weight: 0.0,
        })
        .collect();
    let mut uf = UnionFind::new(n);
    let mut node_of: Vec<usize> = (0..n).collect();

    let mut i = 0;
    while i < edges.len() {
        let w = edges[i].2;
        let mut j = i;
        while j < edges.len() && edges[j].2 == w {
            j += 1;
        }
        let mut old_roots: Vec<usize> = Vec::new();
        for &(a, b, _) in &edges[i..j] {
            old_roots.push(uf.find(a));
            old_roots.push(uf.find(b));
        }
        old_roots.sort_unstable();
        old_roots.dedup();
        for &(a, b, _) in &edges[i..j] {
            uf.union(a, b);
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for r in old_roots {
            let nr = uf.find(r);
            groups.entry(nr).or_default().push(r);
        }
        let mut keys: Vec<usize> = groups.keys().copied().collect();
        keys.sort_unstable();
        for new_root in keys {
            let members = &groups[&new_root];
            if members.len() < 2 {
                continue;
            }
            let children: Vec<usize> = members.iter().map(|&r| node_of[r]).collect();
            let size = children.iter().map(|&c| nodes[c].size).sum();
            nodes.push(DendroNode {
                children,
                size,
                weight: w,
            });
            node_of[new_root] = nodes.len() - 1;
        }
        i = j;
    }
    nodes
}

fn leaves_under(nodes: &[DendroNode], node: usize, n_points: usize, out: &mut Vec<usize>) {
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n_points {
            out.push(x);
        } else {
            stack.extend(nodes[x].children.iter().copied());
        }
    }
}

fn condense(nodes: &[DendroNode], n_points: usize, min_cluster_size: usize) -> Vec<CondensedCluster> {
    let root = nodes.len() - 1;
    let mut clusters = vec![CondensedCluster {
        parent: None,
        birth_lambda: 0.0,
        size: nodes[root].size,
        children: Vec::new(),
        fallen: Vec::new(),
        stability: 0.0,
    }];
    let mut stack = vec![(root, 0usize)];
    let mut scratch = Vec::new();
    while let Some((node, cid)) = stack.pop() {
        let lambda = lambda_of(nodes[node].weight);
        let (big, small): (Vec<usize>, Vec<usize>) = nodes[node]
            .children
            .iter()
            .partition(|&&c| nodes[c].size >= min_cluster_size);
        for c in small {
            scratch.clear();
            leaves_under(nodes, c, n_points, &mut scratch);
            for &p in &scratch {
                clusters[cid].fallen.push((p, lambda));
            }
        }
        match big.len() {
            0 => {}
            1 => stack.push((big[0], cid)),
            _ => {
                for c in big {
                    let child_id = clusters.len();
                    clusters.push(CondensedCluster {
                        parent: Some(cid),
                        birth_lambda: lambda,
                        size: nodes[c].size,
                        children: Vec::new(),
                        fallen: Vec::new(),
                        stability: 0.0,
                    });
                    clusters[cid].children.push(child_id);
                    stack.push((c, child_id));
                }
            }
        }
    }
    for cid in 0..clusters.len() {
        let birth = clusters[cid].birth_lambda;
        let mut s: f64 = clusters[cid]
            .fallen
            .iter()
            .map(|&(_, l)| lambda_gap(l, birth))
            .sum();
        for &ch in &clusters[cid].children {
            s += clusters[ch].size as f64 * lambda_gap(clusters[ch].birth_lambda, birth);
        }
        clusters[cid].stability = s;
    }
    clusters
}

fn select(clusters: &[CondensedCluster]) -> Vec<bool> {
    let m = clusters.len();
    let mut selected = vec![false; m];
    let mut best = vec![0.0f64; m];
    for cid in (0..m).rev() {
        let c = &clusters[cid];
        if c.children.is_empty() {
            selected[cid] = true;
            best[cid] = c.stability;
            continue;
        }
        let child_sum: f64 = c.children.iter().map(|&ch| best[ch]).sum();
        if c.stability >= child_sum {
            selected[cid] = true;
            best[cid] = c.stability;
            let mut stack = c.children.clone();
            while let Some(d) = stack.pop() {
                selected[d] = false;
                stack.extend(clusters[d].children.iter().copied());
            }
        } else {
            best[cid] = child_sum;
        }
    }
    selected
}

fn label(clusters: &[CondensedCluster], selected: &[bool], n: usize) -> Vec<Option<usize>> {
    let mut raw: Vec<Option<usize>> = vec![None; n];
    let root_last_lambda = clusters[0]
        .fallen
        .iter()
        .map(|&(_, l)| l)
        .chain(clusters[0].children.iter().map(|&c| clusters[c].birth_lambda))
        .fold(f64::NEG_INFINITY, f64::max);
    for (cid, c) in clusters.iter().enumerate() {
        for &(p, l) in &c.fallen {
            let mut cur = Some(cid);
            while let Some(x) = cur {
                if selected[x] {
                    break;
                }
                cur = clusters[x].parent;
            }
            raw[p] = match cur {
                Some(0) if l < root_last_lambda => None,
                other => other,
            };
        }
    }
    // dense ids ordered by first member
    let mut remap: HashMap<usize, usize> = HashMap::new();
    raw.iter()
        .map(|l| {
            l.map(|c| {
                let next = remap.len();
                *remap.entry(c).or_insert(next)
            })
        })
        .collect()
}

struct Hierarchy {
    nodes: Vec<DendroNode>,
    n: usize,
}

fn hierarchy(points: &[GeoPoint], min_samples: usize) -> Option<Hierarchy> {
    let n = points.len();
    if n < 2 || min_samples > n {
        return None;
    }
    let core = core_distances(points, min_samples);
    let edges = mst_edges(points, &core);
    Some(Hierarchy {
        nodes: dendrogram(n, edges),
        n,
    })
}

fn cluster_from(h: &Hierarchy, points: &[GeoPoint], params: ClusterParams) -> Clustering {
    if h.n < params.min_cluster_size {
        return Clustering::all_noise(h.n, params);
    }
    let clusters = condense(&h.nodes, h.n, params.min_cluster_size);
    let selected = select(&clusters);
    let labels = label(&clusters, &selected, h.n);
    let validity = dbcv(points, &labels);
    Clustering {
        labels,
        params,
        validity,
    }
}

/// Builds the condensed tree and its excess-of-mass selection.
pub fn condensed_tree(points: &[GeoPoint], params: ClusterParams) -> Result<Option<CondensedTree>, GeoError> {
    params.validate()?;
    let Some(h) = hierarchy(points, params.min_samples) else {
        return Ok(None);
    };
    if h.n < params.min_cluster_size {
        return Ok(None);
    }
    let clusters = condense(&h.nodes, h.n, params.min_cluster_size);
    let selected = select(&clusters);
    Ok(Some(CondensedTree { clusters, selected }))
}

/// Clusters points; too few points for the parameters yields all noise.
pub fn hdbscan(points: &[GeoPoint], params: ClusterParams) -> Result<Clustering, GeoError> {
    params.validate()?;
    match hierarchy(points, params.min_samples) {
        Some(h) => Ok(cluster_from(&h, points, params)),
        None => Ok(Clustering::all_noise(points.len(), params)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub params: ClusterParams,
    pub n_clusters: usize,
    pub noise: usize,
    pub validity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSearch {
    pub params: ClusterParams,
    pub clustering: Clustering,
    /// Every configuration produced only noise.
    pub all_noise: bool,
    pub trials: Vec<SearchTrial>,
}

fn size_grid(n: usize) -> Vec<usize> {
    let cap = n / 2;
    let grid: Vec<usize> = MIN_CLUSTER_SIZE_GRID
        .iter()
        .copied()
        .filter(|&m| m <= cap)
        .collect();
    if grid.is_empty() {
        vec![2]
    } else {
        grid
    }
}

/// Runs every min_samples candidate over the min_cluster_size grid and keeps
/// the most valid clustering. Ties go to the larger min_cluster_size, then
/// the smaller min_samples; all-noise results never beat a real clustering.
pub fn search_cluster_params(points: &[GeoPoint]) -> ParamSearch {
    let sizes = size_grid(points.len());
    let per_ms: Vec<Vec<Clustering>> = MIN_SAMPLES_CANDIDATES
        .par_iter()
        .map(|&ms| {
            let h = hierarchy(points, ms);
            sizes
                .iter()
                .map(|&mcs| {
                    let params = ClusterParams {
                        min_samples: ms,
                        min_cluster_size: mcs,
                    };
                    match &h {
                        Some(h) => cluster_from(h, points, params),
                        None => Clustering::all_noise(points.len(), params),
                    }
                })
                .collect()
        })
        .collect();

    let all: Vec<Clustering> = per_ms.into_iter().flatten().collect();
    let trials = all
        .iter()
        .map(|c| SearchTrial {
            params: c.params,
            n_clusters: c.n_clusters(),
            noise: c.noise_count(),
            validity: c.validity,
        })
        .collect();

    let better = |a: &Clustering, b: &Clustering| -> bool {
        let key = |c: &Clustering| (!c.is_all_noise(), c.validity);
        let (ka, kb) = (key(a), key(b));
        if ka.0 != kb.0 {
            return ka.0;
        }
        match ka.1.total_cmp(&kb.1) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => {
                if a.params.min_cluster_size != b.params.min_cluster_size {
                    a.params.min_cluster_size > b.params.min_cluster_size
                } else {
                    a.params.min_samples < b.params.min_samples
                }
            }
        }
    };
    let mut best = &all[0];
    for c in &all[1..] {
        if better(c, best) {
            best = c;
        }
    }
    ParamSearch {
        params: best.params,
        clustering: best.clone(),
        all_noise: best.is_all_noise(),
        trials,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint { lat, lon }
    }

    fn params(ms: usize, mcs: usize) -> ClusterParams {
        ClusterParams::new(ms, mcs).unwrap()
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![p(38.7, -9.1); 6];
        let c = hdbscan(&pts, params(1, 3)).unwrap();
        assert_eq!(c.n_clusters(), 1);
        assert_eq!(c.noise_count(), 0);
    }

    #[test]
    fn two_groups_and_an_outlier() {
        // two 5-point groups ~10 km apart plus one isolated point
        let mut pts = Vec::new();
        for i in 0..5 {
            pts.push(p(38.70 + 0.0001 * i as f64, -9.10));
            pts.push(p(38.79 + 0.0001 * i as f64, -9.10));
        }
        pts.push(p(38.75, -9.30));
        let c = hdbscan(&pts, params(1, 3)).unwrap();
        assert_eq!(c.n_clusters(), 2);
        assert_eq!(c.noise_count(), 1);
        assert_eq!(c.labels[10], None);
        assert_ne!(c.labels[0], c.labels[1]);
        assert_eq!(c.labels[0], c.labels[2]);
    }

    #[test]
    fn too_few_points_is_noise_not_error() {
        let pts = vec![p(0.0, 0.0), p(0.0, 0.001)];
        assert!(hdbscan(&pts, params(1, 3)).unwrap().is_all_noise());
        assert!(hdbscan(&pts, params(10, 2)).unwrap().is_all_noise());
        assert!(hdbscan(&[], params(1, 2)).unwrap().is_all_noise());
        assert!(ClusterParams::new(1, 1).is_err());
        assert!(ClusterParams::new(0, 2).is_err());
    }

    #[test]
    fn selected_clusters_dominate_their_children() {
        let mut pts = Vec::new();
        for g in 0..4 {
            for i in 0..6 {
                pts.push(p(38.0 + 0.05 * g as f64 + 0.0002 * i as f64, -9.0 + 0.0001 * (i * i) as f64));
            }
        }
        let tree = condensed_tree(&pts, params(2, 3)).unwrap().unwrap();
        for (cid, c) in tree.clusters.iter().enumerate() {
            if tree.selected[cid] {
                let sum: f64 = c.children.iter().map(|&ch| tree.clusters[ch].stability).sum();
                assert!(c.stability >= sum);
            }
        }
    }

    #[test]
    fn search_prefers_real_clusters_over_noise() {
        let mut pts = Vec::new();
        for i in 0..12 {
            let d = 0.0003 * (i % 4) as f64;
            pts.push(p(40.0 + d, -8.0 + 0.0002 * (i / 4) as f64));
            pts.push(p(40.2 + d, -8.0 + 0.0002 * (i / 4) as f64));
        }
        let s = search_cluster_params(&pts);
        assert!(!s.all_noise);
        assert_eq!(s.clustering.n_clusters(), 2);
        // min_samples = 100 cannot run on 24 points
        for t in s.trials.iter().filter(|t| t.params.min_samples == 100) {
            assert_eq!(t.n_clusters, 0);
        }
        assert_ne!(s.params.min_samples, 100);
    }

    #[test]
    fn size_grid_is_capped() {
        assert_eq!(size_grid(3), vec![2]);
        assert_eq!(size_grid(10), vec![2, 3, 5]);
        assert_eq!(size_grid(1000), MIN_CLUSTER_SIZE_GRID.to_vec());
    }
}
