//! Exact Shapley attributions for boosted trees and the population ranking
//! of the most influential feature family.
//!
//! Attributions use the path-dependent tree algorithm: the value of a
//! feature subset is the tree output with absent features integrated out
//! according to node covers. One pass per tree keeps the permutation
//! weights of the current root-to-node path and unwinds them when a
//! feature repeats.

use serde::{Deserialize, Serialize};

use crate::learn::features::family;
use crate::learn::{GbdtModel, Node, Tree};
use crate::model::ValenceClass;

const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub classes: Vec<ValenceClass>,
    /// Expected margin per class.
    pub base: Vec<f64>,
    /// `phi[class][feature]`.
    pub phi: Vec<Vec<f64>>,
}

impl Attribution {
    /// `base + sum(phi)` per class; equals the model margin.
    pub fn reconstructed(&self) -> Vec<f64> {
        self.base
            .iter()
            .zip(&self.phi)
            .map(|(b, p)| b + p.iter().sum::<f64>())
            .collect()
    }
}

#[derive(Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
    let l = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if l == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..l).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / (l + 1) as f64;
        path[i].weight = zero * path[i].weight * (l - i) as f64 / (l + 1) as f64;
    }
}

fn unwind(path: &mut Vec<PathElem>, i: usize) {
    let l = path.len() - 1;
    let (one, zero) = (path[i].one, path[i].zero);
    let mut n = path[l].weight;
    for j in (0..l).rev() {
        if one != 0.0 {
            let t = path[j].weight;
            path[j].weight = n * (l + 1) as f64 / ((j + 1) as f64 * one);
            n = t - path[j].weight * zero * (l - j) as f64 / (l + 1) as f64;
        } else {
            path[j].weight = path[j].weight * (l + 1) as f64 / (zero * (l - j) as f64);
        }
    }
    for j in i..l {
        path[j].feature = path[j + 1].feature;
        path[j].zero = path[j + 1].zero;
        path[j].one = path[j + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElem], i: usize) -> f64 {
    let l = path.len() - 1;
    let (one, zero) = (path[i].one, path[i].zero);
    let mut total = 0.0;
    if one != 0.0 {
        let mut n = path[l].weight;
        for j in (0..l).rev() {
            let t = n * (l + 1) as f64 / ((j + 1) as f64 * one);
            total += t;
            n = path[j].weight - t * zero * (l - j) as f64 / (l + 1) as f64;
        }
    } else {
        for j in (0..l).rev() {
            total += path[j].weight * (l + 1) as f64 / (zero * (l - j) as f64);
        }
    }
    total
}

fn child_shares(tree: &Tree, parent: usize, left: usize, right: usize) -> (f64, f64) {
    let c = tree.nodes[parent].cover();
    let (l, r) = (tree.nodes[left].cover(), tree.nodes[right].cover());
    if c > 0.0 && l + r > 0.0 {
        (l / c, r / c)
    } else {
        (0.5, 0.5)
    }
}

fn recurse(
    tree: &Tree,
    x: &[f64],
    node: usize,
    mut path: Vec<PathElem>,
    zero: f64,
    one: f64,
    feature: Option<usize>,
    phi: &mut [f64],
) {
    extend(&mut path, zero, one, feature);
    match tree.nodes[node] {
        Node::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let e = path[i];
                if let Some(f) = e.feature {
                    phi[f] += w * (e.one - e.zero) * value;
                }
            }
        }
        Node::Split {
            feature: f,
            threshold,
            left,
            right,
            ..
        } => {
            let v = x.get(f).copied().unwrap_or(0.0);
            let (hot, cold) = if v < threshold { (left, right) } else { (right, left) };
            let (ls, rs) = child_shares(tree, node, left, right);
            let (hot_share, cold_share) = if hot == left { (ls, rs) } else { (rs, ls) };
            let (mut iz, mut io) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(f)) {
                iz = path[k].zero;
                io = path[k].one;
                unwind(&mut path, k);
            }
            recurse(tree, x, hot, path.clone(), iz * hot_share, io, Some(f), phi);
            recurse(tree, x, cold, path, iz * cold_share, 0.0, Some(f), phi);
        }
    }
}

/// Cover-weighted mean leaf value.
pub fn tree_expectation(tree: &Tree) -> f64 {
    fn walk(t: &Tree, i: usize) -> f64 {
        match t.nodes[i] {
            Node::Leaf { value, .. } => value,
            Node::Split { left, right, .. } => {
                let (ls, rs) = child_shares(t, i, left, right);
                ls * walk(t, left) + rs * walk(t, right)
            }
        }
    }
    walk(tree, 0)
}

/// Adds the attribution of one tree for `x` into `phi`.
pub fn tree_shap(tree: &Tree, x: &[f64], phi: &mut [f64]) {
    recurse(tree, x, 0, Vec::new(), 1.0, 1.0, None, phi);
}

pub fn shap_attribution(model: &GbdtModel, x: &[f64]) -> Attribution {
    let nc = model.classes.len();
    let nf = model.feature_names.len();
    let mut base = model.base_score.clone();
    let mut phi = vec![vec![0.0; nf]; nc];
    for round in &model.rounds {
        for (c, tree) in round.iter().enumerate() {
            base[c] += tree_expectation(tree);
            tree_shap(tree, x, &mut phi[c]);
        }
    }
    Attribution {
        classes: model.classes.clone(),
        base,
        phi,
    }
}

/// Mean over rows of class-summed |phi| per feature.
pub fn mean_abs_attribution(model: &GbdtModel, rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; model.feature_names.len()];
    for x in rows {
        let a = shap_attribution(model, x);
        for class_phi in &a.phi {
            for (s, v) in acc.iter_mut().zip(class_phi) {
                *s += v.abs();
            }
        }
    }
    let n = rows.len().max(1) as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRanking {
    pub entity_id: String,
    pub top_feature: String,
    pub family: String,
    /// Several features shared the top score; the first in table order won.
    pub tie: bool,
    pub importance: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyShare {
    pub family: String,
    pub entities: usize,
    pub percent: f64,
    /// Mean over ranked entities of the family's summed importance.
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub entities: Vec<EntityRanking>,
    /// Entities whose attributions are all zero.
    pub unranked: Vec<String>,
    pub families: Vec<FamilyShare>,
}

pub const FAMILIES: [&str; 3] = ["moment_dow", "moment_hour", "mgrs_*"];

/// Ranks features per entity by mean |phi| over its evaluation rows and
/// tallies which family comes first across entities.
pub fn rank_features(entities: &[(String, &GbdtModel, &[Vec<f64>])]) -> FeatureRanking {
    let mut ranked = Vec::new();
    let mut unranked = Vec::new();
    for (id, model, rows) in entities {
        let imp = mean_abs_attribution(model, rows);
        let top = imp.iter().copied().fold(0.0, f64::max);
        if top <= 0.0 {
            unranked.push(id.clone());
            continue;
        }
        let winners: Vec<usize> = (0..imp.len())
            .filter(|&i| top - imp[i] <= TIE_EPS * top)
            .collect();
        let first = winners[0];
        let name = model.feature_names[first].clone();
        ranked.push(EntityRanking {
            entity_id: id.clone(),
            family: family(&name).to_string(),
            top_feature: name,
            tie: winners.len() > 1,
            importance: model.feature_names.iter().cloned().zip(imp).collect(),
        });
    }
    let n = ranked.len();
    let families = FAMILIES
        .iter()
        .map(|&fam| {
            let count = ranked.iter().filter(|r| r.family == fam).count();
            let mean_abs = if n == 0 {
                0.0
            } else {
                ranked
                    .iter()
                    .map(|r| {
                        r.importance
                            .iter()
                            .filter(|(f, _)| family(f) == fam)
                            .map(|(_, v)| v)
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / n as f64
            };
            FamilyShare {
                family: fam.to_string(),
                entities: count,
                percent: if n == 0 { 0.0 } else { 100.0 * count as f64 / n as f64 },
                mean_abs,
            }
        })
        .collect();
    FeatureRanking {
        entities: ranked,
        unranked,
        families,
    }
}

/// `family,share_percent,mean_abs` rows for a bar chart.
pub fn influence_csv(ranking: &FeatureRanking) -> String {
    let mut out = String::from("family,share_percent,mean_abs\n");
    for f in &ranking.families {
        out.push_str(&format!("{},{:.4},{:.6}\n", f.family, f.percent, f.mean_abs));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::{train_gbdt, Hyperparams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Value of subset `s` (bitmask): features in `s` follow `x`, the others
    /// are averaged by cover.
    fn subset_value(t: &Tree, i: usize, x: &[f64], s: u32) -> f64 {
        match t.nodes[i] {
            Node::Leaf { value, .. } => value,
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                if s & (1 << feature) != 0 {
                    let next = if x[feature] < threshold { left } else { right };
                    subset_value(t, next, x, s)
                } else {
                    let (ls, rs) = child_shares(t, i, left, right);
                    ls * subset_value(t, left, x, s) + rs * subset_value(t, right, x, s)
                }
            }
        }
    }

    fn brute_shapley(t: &Tree, x: &[f64], m: usize) -> Vec<f64> {
        let fact = |n: usize| (1..=n).map(|v| v as f64).product::<f64>();
        let mut phi = vec![0.0; m];
        for (i, p) in phi.iter_mut().enumerate() {
            for s in 0u32..(1 << m) {
                if s & (1 << i) != 0 {
                    continue;
                }
                let k = s.count_ones() as usize;
                let w = fact(k) * fact(m - k - 1) / fact(m);
                *p += w * (subset_value(t, 0, x, s | (1 << i)) - subset_value(t, 0, x, s));
            }
        }
        phi
    }

    /// Random tree over `m` features with consistent covers.
    fn random_tree(rng: &mut ChaCha8Rng, m: usize, depth: usize) -> Tree {
        fn build(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, m: usize, depth: usize, cover: f64) -> usize {
            let id = nodes.len();
            if depth == 0 || cover < 2.0 || rng.gen_bool(0.2) {
                nodes.push(Node::Leaf { value: rng.gen_range(-1.0..1.0), cover });
                return id;
            }
            nodes.push(Node::Leaf { value: 0.0, cover });
            let lc = rng.gen_range(1..cover as u32) as f64;
            let left = build(rng, nodes, m, depth - 1, lc);
            let right = build(rng, nodes, m, depth - 1, cover - lc);
            nodes[id] = Node::Split {
                feature: rng.gen_range(0..m),
                threshold: rng.gen_range(0..4) as f64 + 0.5,
                left,
                right,
                cover,
            };
            id
        }
        let mut nodes = Vec::new();
        build(rng, &mut nodes, m, depth, 100.0);
        Tree { nodes }
    }

    #[test]
    fn stump_gives_everything_to_its_feature() {
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 1, threshold: 0.5, left: 1, right: 2, cover: 10.0 },
                Node::Leaf { value: -1.0, cover: 4.0 },
                Node::Leaf { value: 2.0, cover: 6.0 },
            ],
        };
        let x = [5.0, 1.0, 3.0];
        let mut phi = vec![0.0; 3];
        tree_shap(&t, &x, &mut phi);
        let base = tree_expectation(&t);
        assert!((base - (0.4 * -1.0 + 0.6 * 2.0)).abs() < 1e-15);
        assert!((phi[1] - (2.0 - base)).abs() < 1e-12);
        assert_eq!(phi[0], 0.0);
        assert_eq!(phi[2], 0.0);
    }

    #[test]
    fn depth_two_matches_brute_force() {
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2, cover: 10.0 },
                Node::Split { feature: 1, threshold: 0.5, left: 3, right: 4, cover: 6.0 },
                Node::Split { feature: 1, threshold: 0.5, left: 5, right: 6, cover: 4.0 },
                Node::Leaf { value: 1.0, cover: 2.0 },
                Node::Leaf { value: 3.0, cover: 4.0 },
                Node::Leaf { value: -2.0, cover: 1.0 },
                Node::Leaf { value: 5.0, cover: 3.0 },
            ],
        };
        for x in [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]] {
            let mut phi = vec![0.0; 2];
            tree_shap(&t, &x, &mut phi);
            let want = brute_shapley(&t, &x, 2);
            for (a, b) in phi.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{phi:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn random_trees_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let m = rng.gen_range(1..=5);
            let depth = rng.gen_range(1..=5);
            let t = random_tree(&mut rng, m, depth);
            let x: Vec<f64> = (0..m).map(|_| rng.gen_range(0..5) as f64).collect();
            let mut phi = vec![0.0; m];
            tree_shap(&t, &x, &mut phi);
            let want = brute_shapley(&t, &x, m);
            for (a, b) in phi.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "{phi:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn symmetric_features_share_equally() {
        // f0 and f1 play mirrored roles
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2, cover: 4.0 },
                Node::Split { feature: 1, threshold: 0.5, left: 3, right: 4, cover: 2.0 },
                Node::Split { feature: 1, threshold: 0.5, left: 5, right: 6, cover: 2.0 },
                Node::Leaf { value: 0.0, cover: 1.0 },
                Node::Leaf { value: 1.0, cover: 1.0 },
                Node::Leaf { value: 1.0, cover: 1.0 },
                Node::Leaf { value: 2.0, cover: 1.0 },
            ],
        };
        let mut phi = vec![0.0; 3];
        tree_shap(&t, &[1.0, 1.0, 7.0], &mut phi);
        assert!((phi[0] - phi[1]).abs() < 1e-12);
        assert_eq!(phi[2], 0.0);
    }

    fn trained(seed: u64) -> (GbdtModel, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..120)
            .map(|_| vec![rng.gen_range(0..7) as f64, rng.gen_range(0..24) as f64, rng.gen_range(0..2) as f64])
            .collect();
        let labels: Vec<ValenceClass> = rows
            .iter()
            .map(|r| ValenceClass::from_index(if r[0] < 2.0 { 0 } else if r[0] < 5.0 { 1 } else { 2 }).unwrap())
            .collect();
        let names = vec!["moment_dow".into(), "moment_hour".into(), "mgrs_31NAA6600".into()];
        let hp = Hyperparams { n_rounds: 15, max_depth: 3, ..Hyperparams::default() };
        (train_gbdt(&rows, &labels, &names, &hp, seed).unwrap(), rows)
    }

    #[test]
    fn ensemble_is_additive_and_locally_accurate() {
        let (model, rows) = trained(3);
        for x in rows.iter().take(30) {
            let a = shap_attribution(&model, x);
            for (r, m) in a.reconstructed().iter().zip(model.margins(x)) {
                assert!((r - m).abs() <= 1e-9);
            }
        }
        // two-tree model equals the sum of its trees
        let x = &rows[0];
        let mut m2 = model.clone();
        m2.rounds.truncate(2);
        let both = shap_attribution(&m2, x);
        let mut sum = vec![0.0; 3];
        for round in &m2.rounds {
            tree_shap(&round[0], x, &mut sum);
        }
        for (a, b) in both.phi[0].iter().zip(&sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weekday_driven_entity_ranks_weekday_first() {
        let (model, rows) = trained(5);
        let r = rank_features(&[("e1".to_string(), &model, rows.as_slice())]);
        assert_eq!(r.entities[0].top_feature, "moment_dow");
        assert_eq!(r.families[0].percent, 100.0);
        let total: f64 = r.families.iter().map(|f| f.percent).sum();
        assert!((total - 100.0).abs() < 1e-9);
        assert!(influence_csv(&r).starts_with("family,share_percent,mean_abs\nmoment_dow,100.0000,"));
    }

    #[test]
    fn ties_break_by_table_order_and_are_flagged() {
        let names: Vec<String> = vec!["moment_dow".into(), "moment_hour".into()];
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2, cover: 4.0 },
                Node::Split { feature: 1, threshold: 0.5, left: 3, right: 4, cover: 2.0 },
                Node::Split { feature: 1, threshold: 0.5, left: 5, right: 6, cover: 2.0 },
                Node::Leaf { value: 0.0, cover: 1.0 },
                Node::Leaf { value: 1.0, cover: 1.0 },
                Node::Leaf { value: 1.0, cover: 1.0 },
                Node::Leaf { value: 2.0, cover: 1.0 },
            ],
        };
        let mut m = GbdtModel::constant(vec![ValenceClass::Negative, ValenceClass::Positive], names.clone());
        m.rounds = vec![vec![t.clone(), t]];
        let rows = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
        let empty = GbdtModel::constant(vec![ValenceClass::Negative, ValenceClass::Positive], names);
        let r = rank_features(&[("a".into(), &m, rows.as_slice()), ("b".into(), &empty, rows.as_slice())]);
        assert_eq!(r.entities.len(), 1);
        assert!(r.entities[0].tie);
        assert_eq!(r.entities[0].top_feature, "moment_dow");
        assert_eq!(r.unranked, vec!["b".to_string()]);
    }

    proptest! {
        #[test]
        fn local_accuracy_and_dummy(seed: u64, m in 1usize..6, depth in 1usize..6, xs in proptest::collection::vec(0u8..5, 6)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(&mut rng, m, depth);
            // one extra feature no split uses
            let x: Vec<f64> = xs.iter().take(m + 1).map(|&v| v as f64).collect();
            let mut phi = vec![0.0; m + 1];
            tree_shap(&t, &x, &mut phi);
            let total = tree_expectation(&t) + phi.iter().sum::<f64>();
            prop_assert!((total - t.predict(&x)).abs() <= 1e-9);
            prop_assert_eq!(phi[m], 0.0);
        }
    }
}
