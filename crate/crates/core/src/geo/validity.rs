//! Density-based cluster validity (DBCV) on haversine distances.
//!
//! Each cluster scores `(separation - sparseness) / max(separation,
//! sparseness)` where sparseness is the largest internal edge of its
//! all-points mutual-reachability MST and separation the smallest
//! mutual-reachability distance to another cluster. The index is the
//! size-weighted sum over clusters divided by all points (noise included),
//! so unlabelled points pull the score toward zero. A lone cluster has no
//! separation and scores 0; all noise scores -1.

use super::haversine_m;
use crate::model::GeoPoint;

const DIM: f64 = 2.0;

fn all_points_core(points: &[GeoPoint], members: &[usize]) -> Vec<f64> {
    let m = members.len();
    members
        .iter()
        .map(|&i| {
            if m < 2 {
                return 0.0;
            }
            let mut acc = 0.0;
            for &j in members {
                if i == j {
                    continue;
                }
                let d = haversine_m(points[i], points[j]);
                if d == 0.0 {
                    return 0.0;
                }
                acc += d.powf(-DIM);
            }
            (acc / (m - 1) as f64).powf(-1.0 / DIM)
        })
        .collect()
}

struct ClusterShape {
    members: Vec<usize>,
    core: Vec<f64>,
    internal: Vec<usize>,
    sparseness: f64,
}

fn shape(points: &[GeoPoint], members: Vec<usize>) -> ClusterShape {
    let core = all_points_core(points, &members);
    let m = members.len();
    let mrd = |a: usize, b: usize| {
        haversine_m(points[members[a]], points[members[b]])
            .max(core[a])
            .max(core[b])
    };
    // Prim over the cluster
    let mut edges = Vec::with_capacity(m.saturating_sub(1));
    if m > 1 {
        let mut in_tree = vec![false; m];
        let mut best = vec![f64::INFINITY; m];
        let mut from = vec![0usize; m];
        let mut cur = 0;
        in_tree[0] = true;
        for _ in 1..m {
            let mut next = usize::MAX;
            for j in 0..m {
                if in_tree[j] {
                    continue;
                }
                let d = mrd(cur, j);
                if d < best[j] {
                    best[j] = d;
                    from[j] = cur;
                }
                if next == usize::MAX || best[j] < best[next] {
                    next = j;
                }
            }
            in_tree[next] = true;
            edges.push((from[next], next, best[next]));
            cur = next;
        }
    }
    let mut degree = vec![0usize; m];
    for &(a, b, _) in &edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut internal: Vec<usize> = (0..m).filter(|&i| degree[i] > 1).collect();
    let internal_edges: Vec<f64> = edges
        .iter()
        .filter(|&&(a, b, _)| degree[a] > 1 && degree[b] > 1)
        .map(|e| e.2)
        .collect();
    let sparseness = if internal_edges.is_empty() {
        edges.iter().map(|e| e.2).fold(0.0, f64::max)
    } else {
        internal_edges.into_iter().fold(0.0, f64::max)
    };
    if internal.is_empty() {
        internal = (0..m).collect();
    }
    ClusterShape {
        members,
        core,
        internal,
        sparseness,
    }
}

pub fn dbcv(points: &[GeoPoint], labels: &[Option<usize>]) -> f64 {
    let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
    if k == 0 {
        return -1.0;
    }
    if k == 1 {
        return 0.0;
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            groups[*c].push(i);
        }
    }
    let shapes: Vec<ClusterShape> = groups.into_iter().map(|g| shape(points, g)).collect();

    let separation = |a: &ClusterShape, b: &ClusterShape| {
        let mut best = f64::INFINITY;
        for &i in &a.internal {
            for &j in &b.internal {
                let d = haversine_m(points[a.members[i]], points[b.members[j]])
                    .max(a.core[i])
                    .max(b.core[j]);
                best = best.min(d);
            }
        }
        best
    };

    let n = labels.len() as f64;
    let mut total = 0.0;
    for (ci, a) in shapes.iter().enumerate() {
        let sep = shapes
            .iter()
            .enumerate()
            .filter(|&(cj, _)| cj != ci)
            .map(|(_, b)| separation(a, b))
            .fold(f64::INFINITY, f64::min);
        let denom = sep.max(a.sparseness);
        let v = if denom > 0.0 {
            (sep - a.sparseness) / denom
        } else {
            0.0
        };
        total += a.members.len() as f64 / n * v;
    }
    total
}
