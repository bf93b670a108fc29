//! Independent reference implementations used by the integration tests and
//! the acceptance harness. Each one is written for clarity over speed and
//! shares no code with the library beyond public types.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use valence_core::geo::haversine_m;
use valence_core::learn::{Node, Tree};
use valence_core::model::{GeoPoint, Reading, SensorSample};
use valence_core::store::{Journal, MemStorage, MemoryPeer, RetryState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap()
}

// ---------------------------------------------------------------------------
// HDBSCAN by threshold recursion on the full mutual-reachability matrix.

struct OCluster {
    parent: Option<usize>,
    birth: f64,
    children: Vec<usize>,
    size: usize,
    fallen: Vec<(usize, f64)>,
}

fn lambda(w: f64) -> f64 {
    if w > 0.0 {
        1.0 / w
    } else {
        f64::INFINITY
    }
}

fn gap(later: f64, earlier: f64) -> f64 {
    if later == earlier {
        0.0
    } else {
        later - earlier
    }
}

/// Connected components of `members` using edges accepted by `keep`.
fn components(members: &[usize], mr: &[Vec<f64>], keep: impl Fn(f64) -> bool) -> Vec<Vec<usize>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &s in members {
        if !seen.insert(s) {
            continue;
        }
        let mut comp = vec![s];
        let mut i = 0;
        while i < comp.len() {
            let a = comp[i];
            for &b in members {
                if !seen.contains(&b) && keep(mr[a][b]) {
                    seen.insert(b);
                    comp.push(b);
                }
            }
            i += 1;
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Smallest weight at which `members` become connected.
fn connect_weight(members: &[usize], mr: &[Vec<f64>]) -> f64 {
    let mut ws: Vec<f64> = Vec::new();
    for (i, &a) in members.iter().enumerate() {
        for &b in &members[i + 1..] {
            ws.push(mr[a][b]);
        }
    }
    ws.sort_by(|a, b| a.total_cmp(b));
    ws.dedup();
    for w in ws {
        if components(members, mr, |d| d <= w).len() == 1 {
            return w;
        }
    }
    0.0
}

fn grow(clusters: &mut Vec<OCluster>, cid: usize, members: Vec<usize>, mr: &[Vec<f64>], mcs: usize) {
    let mut cur = members;
    loop {
        let w = connect_weight(&cur, mr);
        let lam = lambda(w);
        let comps = components(&cur, mr, |d| d < w);
        let (big, small): (Vec<_>, Vec<_>) = comps.into_iter().partition(|c| c.len() >= mcs);
        for c in small {
            for p in c {
                clusters[cid].fallen.push((p, lam));
            }
        }
        match big.len() {
            0 => return,
            1 => cur = big.into_iter().next().unwrap(),
            _ => {
                for c in big {
                    let id = clusters.len();
                    clusters.push(OCluster {
                        parent: Some(cid),
                        birth: lam,
                        children: Vec::new(),
                        size: c.len(),
                        fallen: Vec::new(),
                    });
                    clusters[cid].children.push(id);
                    grow(clusters, id, c, mr, mcs);
                }
                return;
            }
        }
    }
}

fn stability(clusters: &[OCluster], c: usize) -> f64 {
    let b = clusters[c].birth;
    let own: f64 = clusters[c].fallen.iter().map(|&(_, l)| gap(l, b)).sum();
    let kids: f64 = clusters[c]
        .children
        .iter()
        .map(|&k| clusters[k].size as f64 * gap(clusters[k].birth, b))
        .sum();
    own + kids
}

fn choose(clusters: &[OCluster], c: usize, selected: &mut Vec<bool>) -> f64 {
    let s = stability(clusters, c);
    if clusters[c].children.is_empty() {
        selected[c] = true;
        return s;
    }
    let sum: f64 = clusters[c].children.iter().map(|&k| choose(clusters, k, selected)).sum();
    if s >= sum {
        let mut stack = clusters[c].children.clone();
        while let Some(d) = stack.pop() {
            selected[d] = false;
            stack.extend(clusters[d].children.iter().copied());
        }
        selected[c] = true;
        s
    } else {
        sum
    }
}

/// Cluster labels with dense ids ordered by first member.
pub fn hdbscan_oracle(points: &[GeoPoint], min_samples: usize, mcs: usize) -> Vec<Option<usize>> {
    let n = points.len();
    if n < 2 || min_samples > n || n < mcs {
        return vec![None; n];
    }
    let d: Vec<Vec<f64>> = points
        .iter()
        .map(|&p| points.iter().map(|&q| haversine_m(p, q)).collect())
        .collect();
    let core: Vec<f64> = d
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(|a, b| a.total_cmp(b));
            r[min_samples - 1]
        })
        .collect();
    let mr: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| d[i][j].max(core[i]).max(core[j])).collect())
        .collect();

    let mut clusters = vec![OCluster {
        parent: None,
        birth: 0.0,
        children: Vec::new(),
        size: n,
        fallen: Vec::new(),
    }];
    grow(&mut clusters, 0, (0..n).collect(), &mr, mcs);
    let mut selected = vec![false; clusters.len()];
    choose(&clusters, 0, &mut selected);

    let root_last = clusters[0]
        .fallen
        .iter()
        .map(|&(_, l)| l)
        .chain(clusters[0].children.iter().map(|&k| clusters[k].birth))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut raw = vec![None; n];
    for (cid, c) in clusters.iter().enumerate() {
        for &(p, l) in &c.fallen {
            let mut at = Some(cid);
            while let Some(x) = at {
                if selected[x] {
                    break;
                }
                at = clusters[x].parent;
            }
            raw[p] = match at {
                Some(0) if l < root_last => None,
                other => other,
            };
        }
    }
    let mut ids: HashMap<usize, usize> = HashMap::new();
    raw.into_iter()
        .map(|r| {
            r.map(|c| {
                let next = ids.len();
                *ids.entry(c).or_insert(next)
            })
        })
        .collect()
}

/// Small point sets: a few tight blobs, sometimes on an exact grid along the
/// equator so equal distances are common.
pub fn random_point_set(r: &mut ChaCha8Rng) -> Vec<GeoPoint> {
    let n = r.gen_range(1..=10);
    if r.gen_bool(0.3) {
        return (0..n)
            .map(|_| GeoPoint {
                lat: 0.0,
                lon: r.gen_range(0..10) as f64 * 0.25,
            })
            .collect();
    }
    let blobs = r.gen_range(1..=3);
    let centres: Vec<(f64, f64)> = (0..blobs)
        .map(|_| (r.gen_range(-60.0..60.0), r.gen_range(-170.0..170.0)))
        .collect();
    let (lat0, lon0) = centres[0];
    (0..n)
        .map(|_| {
            let (dlat, dlon) = centres[r.gen_range(0..blobs)];
            let spread = r.gen_range(0.0005..0.01);
            GeoPoint {
                lat: lat0 + (dlat - lat0) * 0.001 + r.gen_range(-spread..spread),
                lon: lon0 + (dlon - lon0) * 0.001 + r.gen_range(-spread..spread),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Shapley values by subset enumeration over the cover-weighted expectation.

fn expectation_given(tree: &Tree, node: usize, x: &[f64], known: u32) -> f64 {
    match tree.nodes[node] {
        Node::Leaf { value, .. } => value,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            if known & (1 << feature) != 0 {
                let next = if x[feature] < threshold { left } else { right };
                expectation_given(tree, next, x, known)
            } else {
                let (cl, cr) = (tree.nodes[left].cover(), tree.nodes[right].cover());
                (cl * expectation_given(tree, left, x, known) + cr * expectation_given(tree, right, x, known)) / cover
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

pub fn brute_shap(tree: &Tree, x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        for s in 0u32..(1 << m) {
            if s & (1 << i) != 0 {
                continue;
            }
            let size = s.count_ones() as usize;
            let w = factorial(size) * factorial(m - size - 1) / factorial(m);
            *p += w * (expectation_given(tree, 0, x, s | (1 << i)) - expectation_given(tree, 0, x, s));
        }
    }
    phi
}

/// Random tree of depth at most `max_depth` over `n_features`, with covers
/// that add up from the leaves.
pub fn random_tree(r: &mut ChaCha8Rng, n_features: usize, max_depth: usize) -> Tree {
    fn build(r: &mut ChaCha8Rng, nodes: &mut Vec<Node>, nf: usize, depth_left: usize, cover: f64) -> usize {
        let id = nodes.len();
        if depth_left == 0 || cover < 2.0 || r.gen_bool(0.2) {
            nodes.push(Node::Leaf {
                value: r.gen_range(-2.0..2.0),
                cover,
            });
            return id;
        }
        nodes.push(Node::Leaf { value: 0.0, cover });
        let lc = r.gen_range(1..cover as u64) as f64;
        let left = build(r, nodes, nf, depth_left - 1, lc);
        let right = build(r, nodes, nf, depth_left - 1, cover - lc);
        nodes[id] = Node::Split {
            feature: r.gen_range(0..nf),
            threshold: r.gen_range(0.0..1.0),
            left,
            right,
            cover,
        };
        id
    }
    let mut nodes = Vec::new();
    let cover = r.gen_range(20..200) as f64;
    build(r, &mut nodes, n_features, max_depth, cover);
    Tree { nodes }
}

// ---------------------------------------------------------------------------
// Mann-Whitney p-value by enumerating every split of the pooled sample.

pub fn u_pairs(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Two-sided exact p for tie-free samples.
pub fn mann_whitney_enumerated(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let u_obs = u_pairs(a, b);
    let (mut total, mut le, mut ge) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (mut ga, mut gb) = (Vec::new(), Vec::new());
        for (i, &v) in pooled.iter().enumerate() {
            if mask & (1 << i) != 0 {
                ga.push(v);
            } else {
                gb.push(v);
            }
        }
        let u = u_pairs(&ga, &gb);
        total += 1;
        if u <= u_obs {
            le += 1;
        }
        if u >= u_obs {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

// ---------------------------------------------------------------------------
// Imbalance: farthest distribution by exhaustive search on a rational grid.

/// Integer compositions of `total` into `k` parts.
fn compositions(k: usize, total: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k - 1 {
            cur.push(left);
            f(cur);
            cur.pop();
            return;
        }
        for v in 0..=left {
            cur.push(v);
            rec(k, left - v, cur, f);
            cur.pop();
        }
    }
    rec(k, total, &mut Vec::new(), f);
}

/// Largest distance to uniform over the closure of the distributions with
/// exactly `m` minority classes, searched on the grid `i / steps`. `steps`
/// must be a multiple of `k`.
pub fn farthest_distance_grid(k: usize, m: usize, steps: usize) -> f64 {
    let u = steps / k;
    let mut best = 0.0f64;
    compositions(k, steps, &mut |c| {
        if c[..m].iter().all(|&v| v <= u) && c[m..].iter().all(|&v| v >= u) {
            let d: f64 = c
                .iter()
                .map(|&v| (v as f64 / steps as f64 - 1.0 / k as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.max(d);
        }
    });
    best
}

/// Degree from raw counts, using exact integer minority tests.
pub fn imbalance_oracle(counts: &[u64], farthest: &dyn Fn(usize, usize) -> f64) -> f64 {
    let k = counts.len();
    let total: u64 = counts.iter().sum();
    let m = counts.iter().filter(|&&c| c * (k as u64) < total).count();
    if m == 0 {
        return 0.0;
    }
    let d: f64 = counts
        .iter()
        .map(|&c| (c as f64 / total as f64 - 1.0 / k as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    (m - 1) as f64 + d / farthest(k, m)
}

// ---------------------------------------------------------------------------
// Sensor streams for the economy round trip.

pub fn random_walk_stream(r: &mut ChaCha8Rng) -> Vec<SensorSample> {
    let n = r.gen_range(1..300);
    let mut at = t0() + Duration::seconds(r.gen_range(0..86_400));
    let (mut lat, mut lon) = (r.gen_range(-70.0..70.0), r.gen_range(-179.0..179.0));
    let labels = ["still", "walking", "in_vehicle"];
    let mut label = 0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        at += Duration::seconds(if r.gen_bool(0.05) {
            r.gen_range(900..10_800)
        } else {
            r.gen_range(1..600)
        });
        let reading = if r.gen_bool(0.3) {
            if r.gen_bool(0.2) {
                label = r.gen_range(0..labels.len());
            }
            Reading::Activity(labels[label].to_string())
        } else {
            let step_m = if r.gen_bool(0.6) {
                r.gen_range(0.0..3.0)
            } else {
                r.gen_range(5.0..200.0)
            };
            let bearing: f64 = r.gen_range(0.0..std::f64::consts::TAU);
            lat += step_m * bearing.cos() / 111_195.0;
            lon += step_m * bearing.sin() / (111_195.0 * lat.to_radians().cos());
            Reading::Location(GeoPoint { lat, lon })
        };
        out.push(SensorSample {
            entity_id: "walker".into(),
            at,
            reading,
            accuracy_m: 5.0,
            synthetic: false,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Bayesian optimisation fixtures (maximised).

pub fn quadratic_1d(x: &[f64]) -> f64 {
    -(x[0] - 0.37).powi(2)
}

pub fn neg_branin(x: &[f64]) -> f64 {
    let (a, b, c) = (1.0, 5.1 / (4.0 * std::f64::consts::PI.powi(2)), 5.0 / std::f64::consts::PI);
    let (r, s, t) = (6.0, 10.0, 1.0 / (8.0 * std::f64::consts::PI));
    -(a * (x[1] - b * x[0] * x[0] + c * x[0] - r).powi(2) + s * (1.0 - t) * x[0].cos() + s)
}

/// Best and worst value on a regular grid over the box.
pub fn grid_extremes(f: fn(&[f64]) -> f64, bounds: &[(f64, f64)], per_dim: usize) -> (f64, f64) {
    let total = per_dim.pow(bounds.len() as u32);
    let (mut best, mut worst) = (f64::NEG_INFINITY, f64::INFINITY);
    for idx in 0..total {
        let mut rest = idx;
        let x: Vec<f64> = bounds
            .iter()
            .map(|&(lo, hi)| {
                let i = rest % per_dim;
                rest /= per_dim;
                lo + (hi - lo) * i as f64 / (per_dim - 1) as f64
            })
            .collect();
        let v = f(&x);
        best = best.max(v);
        worst = worst.min(v);
    }
    (best, worst)
}

// ---------------------------------------------------------------------------
// Journal crash injection.

/// One seeded workload against a store that dies after a random number of
/// bytes. Returns whether the store died, or the first violated guarantee.
pub fn journal_crash_trial(seed: u64) -> Result<bool, String> {
    let mut r = rng(seed);
    let storage = MemStorage::new();
    let mut journal = Journal::open(storage.clone()).map_err(|e| e.to_string())?;
    storage.crash_after(r.gen_range(0..6_000));

    let mut peer = MemoryPeer::default();
    let mut retry = RetryState::default();
    let mut now = t0();
    let retention = Duration::days(28);
    let mut visible: BTreeMap<u64, String> = BTreeMap::new();
    let mut removed: BTreeSet<u64> = BTreeSet::new();
    let mut issued_max: Option<u64> = None;

    for step in 0..80 {
        now += Duration::hours(r.gen_range(1..24 * 8));
        let op = r.gen_range(0..10);
        if op < 6 {
            let payload = format!("{{\"trial\":{seed},\"step\":{step}}}");
            match journal.append(&payload, now) {
                Ok(seq) => {
                    if issued_max.is_some_and(|m| seq <= m) {
                        return Err(format!("seq {seq} reused"));
                    }
                    issued_max = Some(seq);
                    visible.insert(seq, payload);
                }
                Err(_) => break,
            }
        } else if op < 9 {
            peer.fail_after = if r.gen_bool(0.3) { Some(r.gen_range(0..3)) } else { None };
            let report = journal.sync_cycle(&mut peer, now, &mut retry);
            if report.error.is_some() && storage.crashed() {
                break;
            }
        } else {
            let before: BTreeSet<u64> = journal.entries().map(|e| e.seq).collect();
            match journal.compact(retention, now) {
                Ok(_) => {
                    let after: BTreeSet<u64> = journal.entries().map(|e| e.seq).collect();
                    removed.extend(before.difference(&after));
                }
                Err(_) => break,
            }
        }
    }

    let reopened = Journal::open(MemStorage::from_bytes(storage.image())).map_err(|e| format!("reopen: {e}"))?;
    let local: BTreeMap<u64, &str> = reopened.entries().map(|e| (e.seq, e.payload.as_str())).collect();
    for (seq, payload) in &visible {
        let here = local.get(seq).copied() == Some(payload.as_str());
        let there = peer.received.get(seq) == Some(payload);
        if !here && !there {
            return Err(format!("payload {seq} lost"));
        }
    }
    for seq in &removed {
        if local.contains_key(seq) {
            return Err(format!("compacted seq {seq} came back"));
        }
    }
    for e in reopened.entries() {
        if visible.get(&e.seq) != Some(&e.payload) {
            return Err(format!("seq {} was never appended", e.seq));
        }
        if e.synced && !peer.received.contains_key(&e.seq) {
            return Err(format!("seq {} marked synced without an ack", e.seq));
        }
    }
    if issued_max.is_some_and(|m| reopened.next_seq() <= m) {
        return Err("next seq would reuse an issued number".into());
    }
    Ok(storage.crashed())
}
