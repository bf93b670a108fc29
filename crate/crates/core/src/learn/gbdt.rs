//! Multi-class gradient-boosted regression trees under softmax
//! cross-entropy, one tree per class per round.
//!
//! Splits are exact: every distinct training value of a feature is a
//! candidate cut. Each row stores only its non-zero features, so a tree
//! level costs one pass over the non-zeros plus one scan of the value
//! bins; the zero bin of a feature is recovered as node total minus the
//! rest.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::{encode, Instance};
use super::LearnError;
use crate::model::ValenceClass;

const MIN_GAIN: f64 = 1e-12;
const MIN_HESSIAN: f64 = 1e-16;
const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub n_rounds: u32,
    pub max_depth: u32,
    pub learning_rate: f64,
    pub min_child_weight: f64,
    pub l2_lambda: f64,
    pub subsample: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            n_rounds: 100,
            max_depth: 3,
            learning_rate: 0.1,
            min_child_weight: 1.0,
            l2_lambda: 1.0,
            subsample: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::Hyperparams(m.to_string()));
        if self.n_rounds < 1 {
            return bad("n_rounds must be at least 1");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return bad("min_child_weight must be >= 0");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be >= 0");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must be in (0, 1]");
        }
        Ok(())
    }
}

/// Flat tree node; node 0 is the root. Rows with `x[feature] < threshold`
/// go left. `cover` is the number of training rows that reached the node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        value: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match *self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => cover,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let v = x.get(feature).copied().unwrap_or(0.0);
                    i = if v < threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub fold_k: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub classes: Vec<ValenceClass>,
    pub base_score: Vec<f64>,
    /// `rounds[r][c]` is the tree for class `c` in round `r`.
    pub rounds: Vec<Vec<Tree>>,
    pub feature_names: Vec<String>,
    pub meta: TrainingMeta,
}

pub fn softmax(margins: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; margins.len()];
    softmax_into(margins, &mut out);
    out
}

fn softmax_into(margins: &[f64], out: &mut [f64]) {
    let m = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, z) in out.iter_mut().zip(margins) {
        *o = (z - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|v| *v /= s);
}

impl GbdtModel {
    /// A model with no trees: predicts the base score only.
    pub fn constant(classes: Vec<ValenceClass>, feature_names: Vec<String>) -> Self {
        GbdtModel {
            base_score: vec![0.0; classes.len()],
            classes,
            rounds: Vec::new(),
            feature_names,
            meta: TrainingMeta {
                seed: 0,
                hyperparams: Hyperparams::default(),
                fold_k: None,
            },
        }
    }

    pub fn n_trees(&self) -> usize {
        self.rounds.iter().map(Vec::len).sum()
    }

    pub fn encode(&self, instance: &Instance) -> Vec<f64> {
        encode(&self.feature_names, instance)
    }

    /// Raw class margins: base score plus the leaves reached.
    pub fn margins(&self, x: &[f64]) -> Vec<f64> {
        let mut m = self.base_score.clone();
        for round in &self.rounds {
            for (c, tree) in round.iter().enumerate() {
                m[c] += tree.predict(x);
            }
        }
        m
    }

    /// Probabilities aligned with `classes`.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.margins(x))
    }

    /// Probabilities indexed by [`ValenceClass::index`]; classes the model
    /// never saw get zero.
    pub fn proba_by_class(&self, x: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, p) in self.classes.iter().zip(self.predict_proba(x)) {
            out[c.index()] = p;
        }
        out
    }

    /// Most probable class; ties go to the first class in `classes`.
    pub fn predict(&self, x: &[f64]) -> ValenceClass {
        let p = self.predict_proba(x);
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        self.classes[best]
    }
}

/// Training diagnostics.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    /// Gain of every accepted split.
    pub split_gains: Vec<f64>,
    /// Mean training log-loss before the first round and after each round.
    pub log_loss: Vec<f64>,
}

struct Binned {
    /// Distinct sorted values per feature.
    values: Vec<Vec<f64>>,
    offset: Vec<usize>,
    zero_bin: Vec<Option<usize>>,
    /// Global bin index of every non-zero entry, per row.
    entries: Vec<Vec<(usize, usize)>>,
    total_bins: usize,
}

fn bin_rows(rows: &[Vec<f64>], n_features: usize) -> Binned {
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n_features];
    for row in rows {
        for (f, &v) in row.iter().enumerate() {
            values[f].push(v);
        }
    }
    for v in &mut values {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let mut offset = Vec::with_capacity(n_features);
    let mut total_bins = 0;
    for v in &values {
        offset.push(total_bins);
        total_bins += v.len();
    }
    let zero_bin = values
        .iter()
        .map(|v| v.binary_search_by(|x| x.total_cmp(&0.0)).ok())
        .collect();
    let entries = rows
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|&(_, &v)| v != 0.0)
                .map(|(f, v)| {
                    let b = values[f]
                        .binary_search_by(|x| x.total_cmp(v))
                        .expect("value seen while binning");
                    (f, offset[f] + b)
                })
                .collect()
        })
        .collect();
    Binned {
        values,
        offset,
        zero_bin,
        entries,
        total_bins,
    }
}

#[derive(Clone, Copy, Default)]
struct Stat {
    g: f64,
    h: f64,
    n: f64,
}

impl Stat {
    fn add(&mut self, g: f64, h: f64) {
        self.g += g;
        self.h += h;
        self.n += 1.0;
    }
    fn minus(self, o: Stat) -> Stat {
        Stat {
            g: self.g - o.g,
            h: self.h - o.h,
            n: self.n - o.n,
        }
    }
    fn plus(self, o: Stat) -> Stat {
        Stat {
            g: self.g + o.g,
            h: self.h + o.h,
            n: self.n + o.n,
        }
    }
}

fn score(s: Stat, lambda: f64) -> f64 {
    let d = s.h + lambda;
    if d > 0.0 {
        s.g * s.g / d
    } else {
        0.0
    }
}

fn leaf_value(s: Stat, hp: &Hyperparams) -> f64 {
    let d = s.h + hp.l2_lambda;
    if d > 0.0 {
        -s.g / d * hp.learning_rate
    } else {
        0.0
    }
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn best_split(bins: &Binned, hist: &[Stat], total: Stat, hp: &Hyperparams) -> Option<SplitChoice> {
    let parent = score(total, hp.l2_lambda);
    let mut best: Option<SplitChoice> = None;
    for f in 0..bins.values.len() {
        let nb = bins.values[f].len();
        if nb < 2 {
            continue;
        }
        let off = bins.offset[f];
        let mut stats = hist[off..off + nb].to_vec();
        if let Some(z) = bins.zero_bin[f] {
            let others = stats.iter().fold(Stat::default(), |acc, s| acc.plus(*s));
            stats[z] = total.minus(others);
        }
        let mut left = Stat::default();
        for b in 0..nb - 1 {
            left = left.plus(stats[b]);
            let right = total.minus(left);
            if left.n < 0.5 || right.n < 0.5 {
                continue;
            }
            if left.h < hp.min_child_weight || right.h < hp.min_child_weight {
                continue;
            }
            let gain = 0.5 * (score(left, hp.l2_lambda) + score(right, hp.l2_lambda) - parent);
            if gain > MIN_GAIN && best.as_ref().map_or(true, |s| gain > s.gain) {
                let (lo, hi) = (bins.values[f][b], bins.values[f][b + 1]);
                best = Some(SplitChoice {
                    feature: f,
                    threshold: lo + (hi - lo) / 2.0,
                    gain,
                });
            }
        }
    }
    best
}

fn grow_tree(
    rows: &[Vec<f64>],
    bins: &Binned,
    sampled: &[usize],
    grad: &[f64],
    hess: &[f64],
    hp: &Hyperparams,
    gains: &mut Vec<f64>,
) -> Tree {
    let mut nodes: Vec<Node> = vec![Node::Leaf {
        value: 0.0,
        cover: 0.0,
    }];
    // node id each sampled row currently sits in
    let mut node_of: Vec<usize> = vec![0; sampled.len()];
    let mut frontier = vec![0usize];
    for depth in 0..=hp.max_depth {
        if frontier.is_empty() {
            break;
        }
        // frontier slot of each node id, NONE for settled nodes
        let mut slot = vec![NONE; nodes.len()];
        for (s, &n) in frontier.iter().enumerate() {
            slot[n] = s;
        }
        let mut totals = vec![Stat::default(); frontier.len()];
        let mut hists = vec![vec![Stat::default(); bins.total_bins]; frontier.len()];
        for (k, &r) in sampled.iter().enumerate() {
            let s = slot[node_of[k]];
            if s == NONE {
                continue;
            }
            totals[s].add(grad[r], hess[r]);
            for &(_, b) in &bins.entries[r] {
                hists[s][b].add(grad[r], hess[r]);
            }
        }
        let mut next = Vec::new();
        let mut routes: Vec<Option<(usize, f64, usize, usize)>> = vec![None; frontier.len()];
        for (s, &id) in frontier.iter().enumerate() {
            let total = totals[s];
            let choice = if depth < hp.max_depth {
                best_split(bins, &hists[s], total, hp)
            } else {
                None
            };
            match choice {
                Some(c) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
                    nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
                    nodes[id] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right: left + 1,
                        cover: total.n,
                    };
                    gains.push(c.gain);
                    routes[s] = Some((c.feature, c.threshold, left, left + 1));
                    next.push(left);
                    next.push(left + 1);
                }
                None => {
                    nodes[id] = Node::Leaf {
                        value: leaf_value(total, hp),
                        cover: total.n,
                    };
                }
            }
        }
        for (k, &r) in sampled.iter().enumerate() {
            let s = slot[node_of[k]];
            if s == NONE {
                continue;
            }
            if let Some((f, thr, l, rt)) = routes[s] {
                node_of[k] = if rows[r][f] < thr { l } else { rt };
            }
        }
        frontier = next;
    }
    Tree { nodes }
}

fn mean_log_loss(margins: &[Vec<f64>], y: &[usize]) -> f64 {
    let mut acc = 0.0;
    for (m, &c) in margins.iter().zip(y) {
        let p = softmax(m)[c].max(1e-300);
        acc -= p.ln();
    }
    acc / y.len() as f64
}

pub fn train_gbdt(
    rows: &[Vec<f64>],
    labels: &[ValenceClass],
    feature_names: &[String],
    hp: &Hyperparams,
    seed: u64,
) -> Result<GbdtModel, LearnError> {
    train(rows, labels, feature_names, hp, seed, false).map(|(m, _)| m)
}

/// Like [`train_gbdt`], also recording split gains and per-round log loss.
pub fn train_gbdt_traced(
    rows: &[Vec<f64>],
    labels: &[ValenceClass],
    feature_names: &[String],
    hp: &Hyperparams,
    seed: u64,
) -> Result<(GbdtModel, TrainTrace), LearnError> {
    train(rows, labels, feature_names, hp, seed, true)
}

fn train(
    rows: &[Vec<f64>],
    labels: &[ValenceClass],
    feature_names: &[String],
    hp: &Hyperparams,
    seed: u64,
    traced: bool,
) -> Result<(GbdtModel, TrainTrace), LearnError> {
    hp.validate()?;
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LearnError::NonFinite);
    }
    let mut classes: Vec<ValenceClass> = labels.to_vec();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(LearnError::SingleClass(classes.len()));
    }
    let n_features = feature_names.len();
    if rows.iter().any(|r| r.len() != n_features) {
        return Err(LearnError::Format("row width differs from feature table".into()));
    }
    let n_classes = classes.len();
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("class listed"))
        .collect();
    let n = rows.len();
    let bins = bin_rows(rows, n_features);
    let base_score = vec![0.0; n_classes];
    let mut margins: Vec<Vec<f64>> = vec![base_score.clone(); n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = TrainTrace {
        split_gains: Vec::new(),
        log_loss: vec![mean_log_loss(&margins, &y)],
    };
    let mut rounds = Vec::with_capacity(hp.n_rounds as usize);
    let mut grad = vec![vec![0.0; n]; n_classes];
    let mut hess = vec![vec![0.0; n]; n_classes];

    for _ in 0..hp.n_rounds {
        let mut sampled: Vec<usize> = if hp.subsample < 1.0 {
            (0..n).filter(|_| rng.gen::<f64>() < hp.subsample).collect()
        } else {
            (0..n).collect()
        };
        if sampled.is_empty() {
            sampled = (0..n).collect();
        }
        let mut p = vec![0.0; n_classes];
        for i in 0..n {
            softmax_into(&margins[i], &mut p);
            for c in 0..n_classes {
                let target = if y[i] == c { 1.0 } else { 0.0 };
                grad[c][i] = p[c] - target;
                hess[c][i] = (p[c] * (1.0 - p[c])).max(MIN_HESSIAN);
            }
        }
        let mut round = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let tree = grow_tree(rows, &bins, &sampled, &grad[c], &hess[c], hp, &mut trace.split_gains);
            round.push(tree);
        }
        for (i, m) in margins.iter_mut().enumerate() {
            for (c, tree) in round.iter().enumerate() {
                m[c] += tree.predict(&rows[i]);
            }
        }
        if traced {
            trace.log_loss.push(mean_log_loss(&margins, &y));
        }
        rounds.push(round);
    }

    let model = GbdtModel {
        classes,
        base_score,
        rounds,
        feature_names: feature_names.to_vec(),
        meta: TrainingMeta {
            seed,
            hyperparams: *hp,
            fold_k: None,
        },
    };
    Ok((model, trace))
}
