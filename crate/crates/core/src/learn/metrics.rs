//! F1 scoring and K-fold cross-validation.

use serde::{Deserialize, Serialize};

use super::folds::FoldPlan;
use super::gbdt::{train_gbdt, Hyperparams};
use super::LearnError;
use crate::model::ValenceClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over present classes.
    #[default]
    Macro,
    /// Mean weighted by true-class support.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub f1_per_class: Vec<(ValenceClass, f64)>,
    /// `confusion[true][predicted]`, indexed by [`ValenceClass::index`].
    pub confusion: [[u64; 3]; 3],
    pub accuracy: f64,
    /// Per-fold score under the chosen averaging; empty for a single split.
    pub fold_scores: Vec<f64>,
}

impl EvalReport {
    pub fn score(&self, averaging: Averaging) -> f64 {
        match averaging {
            Averaging::Macro => self.f1_macro,
            Averaging::Weighted => self.f1_weighted,
        }
    }
}

fn confusion(truth: &[ValenceClass], pred: &[ValenceClass]) -> [[u64; 3]; 3] {
    let mut m = [[0u64; 3]; 3];
    for (t, p) in truth.iter().zip(pred) {
        m[t.index()][p.index()] += 1;
    }
    m
}

/// Per-class F1 over classes present in either the truth or predictions.
fn per_class(m: &[[u64; 3]; 3]) -> Vec<(ValenceClass, f64, u64)> {
    let mut out = Vec::new();
    for c in ValenceClass::ALL {
        let i = c.index();
        let tp = m[i][i] as f64;
        let support: u64 = m[i].iter().sum();
        let predicted: u64 = (0..3).map(|r| m[r][i]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        let denom = support as f64 + predicted as f64;
        let f1 = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        out.push((c, f1, support));
    }
    out
}

/// Scores one set of predictions.
pub fn evaluate(truth: &[ValenceClass], pred: &[ValenceClass]) -> EvalReport {
    let m = confusion(truth, pred);
    let pc = per_class(&m);
    let n = truth.len().max(1) as f64;
    let macro_f1 = if pc.is_empty() {
        0.0
    } else {
        pc.iter().map(|x| x.1).sum::<f64>() / pc.len() as f64
    };
    let weighted = pc.iter().map(|x| x.1 * x.2 as f64).sum::<f64>() / n;
    let correct: u64 = (0..3).map(|i| m[i][i]).sum();
    EvalReport {
        f1_macro: macro_f1,
        f1_weighted: weighted,
        f1_per_class: pc.into_iter().map(|(c, f, _)| (c, f)).collect(),
        confusion: m,
        accuracy: correct as f64 / n,
        fold_scores: Vec::new(),
    }
}

/// Trains on each fold's complement and scores the held-out fold.
///
/// Per-class F1 is averaged over folds, `f1_macro` is the mean of those
/// (equal to the mean fold macro-F1 when every fold holds every class) and
/// the confusion matrix pools all held-out predictions.
pub fn cross_validate(
    rows: &[Vec<f64>],
    labels: &[ValenceClass],
    feature_names: &[String],
    hp: &Hyperparams,
    plan: &FoldPlan,
    seed: u64,
    averaging: Averaging,
) -> Result<EvalReport, LearnError> {
    let mut pooled = [[0u64; 3]; 3];
    let mut class_sum = [0.0f64; 3];
    let mut class_folds = [0usize; 3];
    let mut fold_scores = Vec::with_capacity(plan.k);
    let mut weighted = Vec::with_capacity(plan.k);
    for f in 0..plan.k {
        let (train, test) = plan.split(f);
        let tr_rows: Vec<Vec<f64>> = train.iter().map(|&i| rows[i].clone()).collect();
        let tr_labels: Vec<ValenceClass> = train.iter().map(|&i| labels[i]).collect();
        let model = train_gbdt(&tr_rows, &tr_labels, feature_names, hp, seed.wrapping_add(f as u64))?;
        let truth: Vec<ValenceClass> = test.iter().map(|&i| labels[i]).collect();
        let pred: Vec<ValenceClass> = test.iter().map(|&i| model.predict(&rows[i])).collect();
        let rep = evaluate(&truth, &pred);
        for (c, v) in &rep.f1_per_class {
            class_sum[c.index()] += v;
            class_folds[c.index()] += 1;
        }
        for (acc, row) in pooled.iter_mut().zip(rep.confusion) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        fold_scores.push(rep.score(averaging));
        weighted.push(rep.f1_weighted);
    }
    let f1_per_class: Vec<(ValenceClass, f64)> = ValenceClass::ALL
        .into_iter()
        .filter(|c| class_folds[c.index()] > 0)
        .map(|c| (c, class_sum[c.index()] / class_folds[c.index()] as f64))
        .collect();
    let f1_macro = if f1_per_class.is_empty() {
        0.0
    } else {
        f1_per_class.iter().map(|x| x.1).sum::<f64>() / f1_per_class.len() as f64
    };
    let n: u64 = pooled.iter().flatten().sum();
    let correct: u64 = (0..3).map(|i| pooled[i][i]).sum();
    Ok(EvalReport {
        f1_macro,
        f1_weighted: weighted.iter().sum::<f64>() / weighted.len().max(1) as f64,
        f1_per_class,
        confusion: pooled,
        accuracy: correct as f64 / n.max(1) as f64,
        fold_scores,
    })
}

/// Population F1 bins: at most 0.6, then (0.6, 0.7], (0.7, 0.8],
/// (0.8, 0.9], (0.9, 1.0].
pub const F1_BINS: [&str; 5] = ["<=0.6", "(0.6,0.7]", "(0.7,0.8]", "(0.8,0.9]", "(0.9,1.0]"];

pub fn f1_bin(score: f64) -> usize {
    // drop float noise so 0.1 + 0.6 lands in (0.6, 0.7]
    let s = (score * 1e9).round() / 1e9;
    match s {
        s if s <= 0.6 => 0,
        s if s <= 0.7 => 1,
        s if s <= 0.8 => 2,
        s if s <= 0.9 => 3,
        _ => 4,
    }
}

pub fn f1_histogram(scores: &[f64]) -> [usize; 5] {
    let mut h = [0; 5];
    for &s in scores {
        h[f1_bin(s)] += 1;
    }
    h
}
