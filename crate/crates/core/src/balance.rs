//! Class-distribution gating.
//!
//! The imbalance degree of a class distribution `ζ` with `m` minority
//! classes (share below `1/K`) is `(m - 1) + d(ζ, e) / d(ι_m, e)`, where `e`
//! is the uniform distribution and `ι_m` the distribution with exactly `m`
//! minority classes that lies farthest from `e`. Distances are Euclidean.

use serde::{Deserialize, Serialize};

use crate::model::ValenceClass;

const SHARE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BalanceError {
    #[error("class counts are all zero")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub negative: u64,
    pub neutral: u64,
    pub positive: u64,
}

impl ClassCounts {
    pub fn new(negative: u64, neutral: u64, positive: u64) -> Self {
        ClassCounts {
            negative,
            neutral,
            positive,
        }
    }

    pub fn from_classes<'a>(classes: impl IntoIterator<Item = &'a ValenceClass>) -> Self {
        let mut c = ClassCounts::default();
        for &class in classes {
            c.add(class);
        }
        c
    }

    pub fn add(&mut self, class: ValenceClass) {
        match class {
            ValenceClass::Negative => self.negative += 1,
            ValenceClass::Neutral => self.neutral += 1,
            ValenceClass::Positive => self.positive += 1,
        }
    }

    pub fn get(&self, class: ValenceClass) -> u64 {
        self.as_array()[class.index()]
    }

    pub fn as_array(&self) -> [u64; 3] {
        [self.negative, self.neutral, self.positive]
    }

    pub fn total(&self) -> u64 {
        self.negative + self.neutral + self.positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearningMode {
    ThreeClass,
    TwoClass,
    Ineligible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalancePlan {
    pub counts: ClassCounts,
    pub degree: f64,
    pub present_classes: Vec<ValenceClass>,
    pub mode: LearningMode,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceThresholds {
    pub min_reports_per_class: u64,
    pub max_degree: f64,
}

impl Default for BalanceThresholds {
    fn default() -> Self {
        BalanceThresholds {
            min_reports_per_class: 5,
            max_degree: 1.8,
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Number of classes whose share is strictly below `1/k`.
pub fn minority_count(shares: &[f64]) -> usize {
    let k = shares.len() as f64;
    shares.iter().filter(|&&p| p < 1.0 / k - SHARE_EPS).count()
}

/// The distribution with `m` minority classes farthest from uniform, over
/// `k` classes.
///
/// Distance to `e` is convex, so its maximum over the (closed) feasible
/// polytope sits at a vertex. Vertices put every minority share at 0 or
/// `1/k`, every majority share at `1/k` except at most one that absorbs the
/// remainder; all such points are enumerated.
pub fn farthest_with_minorities(k: usize, m: usize) -> Vec<f64> {
    assert!(m < k, "at least one class must be a majority");
    let u = 1.0 / k as f64;
    let e = vec![u; k];
    let mut best = e.clone();
    let mut best_d = 0.0;
    // minority j in 0..m takes 0 if bit j of mask is clear, else 1/k
    for mask in 0u32..(1 << m) {
        let mut p = vec![u; k];
        for (j, share) in p.iter_mut().enumerate().take(m) {
            *share = if mask & (1 << j) != 0 { u } else { 0.0 };
        }
        for free in m..k {
            let mut q = p.clone();
            let others: f64 = q.iter().enumerate().filter(|&(i, _)| i != free).map(|(_, v)| v).sum();
            q[free] = 1.0 - others;
            if q[free] < u - SHARE_EPS {
                continue;
            }
            let d = distance(&q, &e);
            if d > best_d {
                best_d = d;
                best = q;
            }
        }
    }
    best
}

pub fn imbalance_degree(counts: &ClassCounts) -> Result<f64, BalanceError> {
    let total = counts.total();
    if total == 0 {
        return Err(BalanceError::Empty);
    }
    let shares: Vec<f64> = counts
        .as_array()
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    Ok(imbalance_degree_of_shares(&shares))
}

/// Degree for an arbitrary distribution (shares summing to one).
pub fn imbalance_degree_of_shares(shares: &[f64]) -> f64 {
    let k = shares.len();
    let m = minority_count(shares);
    if m == 0 {
        return 0.0;
    }
    let e = vec![1.0 / k as f64; k];
    let iota = farthest_with_minorities(k, m);
    (m - 1) as f64 + distance(shares, &e) / distance(&iota, &e)
}

pub fn verify_classes(counts: &ClassCounts, thresholds: &BalanceThresholds) -> ImbalancePlan {
    let qualifying: Vec<ValenceClass> = ValenceClass::ALL
        .into_iter()
        .filter(|&c| counts.get(c) >= thresholds.min_reports_per_class)
        .collect();
    let degree = match imbalance_degree(counts) {
        Ok(d) => d,
        Err(_) => {
            return ImbalancePlan {
                counts: *counts,
                degree: 0.0,
                present_classes: Vec::new(),
                mode: LearningMode::Ineligible,
                reason: "no reports".into(),
            }
        }
    };
    let (mode, reason) = match qualifying.len() {
        3 if degree <= thresholds.max_degree => (LearningMode::ThreeClass, String::new()),
        3 => (
            LearningMode::Ineligible,
            format!(
                "imbalance degree {degree:.3} above {:.3}",
                thresholds.max_degree
            ),
        ),
        2 => {
            let missing = ValenceClass::ALL
                .into_iter()
                .find(|c| !qualifying.contains(c))
                .expect("one class left out");
            (
                LearningMode::TwoClass,
                format!(
                    "{missing} has {} reports, below {}",
                    counts.get(missing),
                    thresholds.min_reports_per_class
                ),
            )
        }
        n => (
            LearningMode::Ineligible,
            format!(
                "only {n} class(es) with at least {} reports",
                thresholds.min_reports_per_class
            ),
        ),
    };
    ImbalancePlan {
        counts: *counts,
        degree,
        present_classes: qualifying,
        mode,
        reason,
    }
}
