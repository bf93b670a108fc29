//! Sequential model-based search: a shifted Halton design to start, then a
//! Gaussian-process surrogate (Matérn 5/2, one lengthscale per dimension)
//! and expected improvement to pick each next trial.
//!
//! Everything happens in the unit cube; dimensions map to their declared
//! range linearly or logarithmically and integer dimensions are snapped
//! before evaluation so the surrogate sees the point actually tried.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::folds::FoldPlan;
use super::gbdt::Hyperparams;
use super::metrics::{cross_validate, Averaging};
use super::LearnError;
use crate::model::ValenceClass;

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
const XI: f64 = 0.01;
const HYPER_CANDIDATES: usize = 48;
const RANDOM_CANDIDATES: usize = 768;
const LOCAL_CANDIDATES: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
    pub integer: bool,
}

impl Dim {
    pub fn new(name: &str, lo: f64, hi: f64, scale: Scale, integer: bool) -> Self {
        Dim {
            name: name.into(),
            lo,
            hi,
            scale,
            integer,
        }
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let v = match self.scale {
            Scale::Linear => self.lo + u * (self.hi - self.lo),
            Scale::Log => (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp(),
        };
        let v = if self.integer { v.round() } else { v };
        v.clamp(self.lo, self.hi)
    }

    pub fn to_unit(&self, v: f64) -> f64 {
        let u = match self.scale {
            Scale::Linear => (v - self.lo) / (self.hi - self.lo),
            Scale::Log => (v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln()),
        };
        if u.is_finite() {
            u.clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi && (!self.integer || v.fract() == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dim>,
}

impl SearchSpace {
    /// Boosting search space: rounds, depth, learning rate (log), child
    /// weight, L2 and row subsample.
    pub fn hyperparams() -> Self {
        SearchSpace {
            dims: vec![
                Dim::new("n_rounds", 20.0, 300.0, Scale::Linear, true),
                Dim::new("max_depth", 1.0, 6.0, Scale::Linear, true),
                Dim::new("learning_rate", 0.01, 0.5, Scale::Log, false),
                Dim::new("min_child_weight", 0.0, 10.0, Scale::Linear, false),
                Dim::new("l2_lambda", 0.0, 10.0, Scale::Linear, false),
                Dim::new("subsample", 0.5, 1.0, Scale::Linear, false),
            ],
        }
    }

    pub fn values(&self, unit: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(unit).map(|(d, &u)| d.from_unit(u)).collect()
    }

    pub fn unit(&self, values: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(values).map(|(d, &v)| d.to_unit(v)).collect()
    }

    fn snap(&self, unit: &[f64]) -> Vec<f64> {
        self.unit(&self.values(unit))
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.dims.len() && self.dims.iter().zip(values).all(|(d, &v)| d.contains(v))
    }

    /// Reads a point of [`SearchSpace::hyperparams`]; unnamed fields keep
    /// their defaults.
    pub fn to_hyperparams(&self, values: &[f64]) -> Hyperparams {
        let mut hp = Hyperparams::default();
        for (d, &v) in self.dims.iter().zip(values) {
            match d.name.as_str() {
                "n_rounds" => hp.n_rounds = v as u32,
                "max_depth" => hp.max_depth = v as u32,
                "learning_rate" => hp.learning_rate = v,
                "min_child_weight" => hp.min_child_weight = v,
                "l2_lambda" => hp.l2_lambda = v,
                "subsample" => hp.subsample = v,
                _ => {}
            }
        }
        hp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    Design,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub phase: TrialPhase,
    pub values: Vec<f64>,
    /// `None` when the objective was not finite.
    pub objective: Option<f64>,
    /// Best objective so far, including this trial.
    pub incumbent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesOutcome {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub trials: Vec<Trial>,
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn matern52(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    let r = (5.0 * r2).sqrt();
    (1.0 + r + r * r / 3.0) * (-r).exp()
}

struct Gp {
    x: Vec<Vec<f64>>,
    ls: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    mean: f64,
    std: f64,
}

fn factor(x: &[Vec<f64>], ls: &[f64], noise: f64) -> Option<Cholesky<f64, Dyn>> {
    let n = x.len();
    let mut jitter = noise.max(1e-10);
    for _ in 0..6 {
        let k = DMatrix::from_fn(n, n, |i, j| {
            matern52(&x[i], &x[j], ls) + if i == j { jitter } else { 0.0 }
        });
        if let Some(c) = Cholesky::new(k) {
            return Some(c);
        }
        jitter *= 10.0;
    }
    None
}

fn log_marginal(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> f64 {
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * y.dot(&alpha) - log_det - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

impl Gp {
    fn fit(x: &[Vec<f64>], y: &[f64], rng: &mut ChaCha8Rng) -> Option<Gp> {
        let d = x[0].len();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - mean) / std));

        let mut best: Option<(f64, Vec<f64>, Cholesky<f64, Dyn>)> = None;
        let mut consider = |ls: Vec<f64>, noise: f64| {
            if let Some(c) = factor(x, &ls, noise) {
                let lml = log_marginal(&c, &ys);
                if lml.is_finite() && best.as_ref().map_or(true, |b| lml > b.0) {
                    best = Some((lml, ls, c));
                }
            }
        };
        for iso in [0.1, 0.25, 0.5, 1.0] {
            consider(vec![iso; d], 1e-6);
        }
        for _ in 0..HYPER_CANDIDATES {
            let ls: Vec<f64> = (0..d).map(|_| (rng.gen_range(0.03f64.ln()..3.0f64.ln())).exp()).collect();
            let noise = rng.gen_range(1e-6f64.ln()..1e-1f64.ln()).exp();
            consider(ls, noise);
        }
        let (_, ls, chol) = best?;
        let alpha = chol.solve(&ys);
        Some(Gp {
            x: x.to_vec(),
            ls,
            chol,
            alpha,
            mean,
            std,
        })
    }

    /// Posterior mean and standard deviation, in standardized units.
    fn predict(&self, p: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| matern52(xi, p, &self.ls)));
        let mu = ks.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&ks).unwrap_or_else(|| ks.clone());
        let var = (1.0 - v.dot(&v)).max(1e-12);
        (mu, var.sqrt())
    }
}

fn expected_improvement(mu: f64, sigma: f64, best: f64, normal: &Normal) -> f64 {
    let imp = mu - best - XI;
    let z = imp / sigma;
    imp * normal.cdf(z) + sigma * normal.pdf(z)
}

/// Maximizes `objective` over `space` with `budget` evaluations.
/// `n_init` defaults to `max(5, dims + 1)` capped at the budget.
pub fn bayes_opt<F: FnMut(&[f64]) -> f64>(
    mut objective: F,
    space: &SearchSpace,
    budget: usize,
    n_init: Option<usize>,
    seed: u64,
) -> Result<BayesOutcome, LearnError> {
    if budget == 0 {
        return Err(LearnError::EmptyBudget);
    }
    let d = space.dims.len();
    let n_init = n_init.unwrap_or(5.max(d + 1)).clamp(1, budget);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");

    let mut trials: Vec<Trial> = Vec::with_capacity(budget);
    let mut seen: Vec<Vec<f64>> = Vec::new();
    let mut obs_x: Vec<Vec<f64>> = Vec::new();
    let mut obs_y: Vec<f64> = Vec::new();
    let mut incumbent: Option<(f64, Vec<f64>)> = None;

    for t in 0..budget {
        let (unit, phase) = if t < n_init || obs_y.len() < 2 {
            let u: Vec<f64> = (0..d)
                .map(|j| (radical_inverse(t as u64 + 1, PRIMES[j % PRIMES.len()] as u64) + shift[j]).fract())
                .collect();
            (space.snap(&u), TrialPhase::Design)
        } else {
            (propose(space, &obs_x, &obs_y, &seen, &mut rng, &normal), TrialPhase::Model)
        };
        let values = space.values(&unit);
        let y = objective(&values);
        let objective_value = y.is_finite().then_some(y);
        if let Some(v) = objective_value {
            obs_x.push(unit.clone());
            obs_y.push(v);
            if incumbent.as_ref().map_or(true, |b| v > b.0) {
                incumbent = Some((v, values.clone()));
            }
        }
        seen.push(unit);
        trials.push(Trial {
            index: t,
            phase,
            values,
            objective: objective_value,
            incumbent: incumbent.as_ref().map(|b| b.0),
        });
    }
    let (best_value, best) = incumbent.ok_or(LearnError::AllTrialsFailed)?;
    Ok(BayesOutcome {
        best,
        best_value,
        trials,
    })
}

fn propose(
    space: &SearchSpace,
    x: &[Vec<f64>],
    y: &[f64],
    seen: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    normal: &Normal,
) -> Vec<f64> {
    let d = space.dims.len();
    let random_point = |rng: &mut ChaCha8Rng| space.snap(&(0..d).map(|_| rng.gen()).collect::<Vec<f64>>());
    let Some(gp) = Gp::fit(x, y, rng) else {
        return random_point(rng);
    };
    let best = y.iter().map(|v| (v - gp.mean) / gp.std).fold(f64::NEG_INFINITY, f64::max);

    let mut candidates: Vec<Vec<f64>> = (0..RANDOM_CANDIDATES).map(|_| random_point(rng)).collect();
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[b].total_cmp(&y[a]));
    for &i in order.iter().take(3) {
        for _ in 0..LOCAL_CANDIDATES {
            let p: Vec<f64> = x[i]
                .iter()
                .map(|&v| (v + 0.08 * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
                .collect();
            candidates.push(space.snap(&p));
        }
    }

    let is_seen = |c: &[f64]| {
        seen.iter()
            .any(|s| s.iter().zip(c).all(|(a, b)| (a - b).abs() < 1e-12))
    };
    let mut pick: Option<(f64, usize)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if is_seen(c) {
            continue;
        }
        let (mu, sigma) = gp.predict(c);
        let ei = expected_improvement(mu, sigma, best, normal);
        if pick.map_or(true, |p| ei > p.0) {
            pick = Some((ei, i));
        }
    }
    match pick {
        Some((_, i)) => candidates.swap_remove(i),
        None => random_point(rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuned {
    pub hyperparams: Hyperparams,
    pub cv_score: f64,
    pub search: BayesOutcome,
}

/// Picks boosting hyperparameters by cross-validated F1.
#[allow(clippy::too_many_arguments)]
pub fn tune_hyperparams(
    rows: &[Vec<f64>],
    labels: &[ValenceClass],
    feature_names: &[String],
    plan: &FoldPlan,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    averaging: Averaging,
) -> Result<Tuned, LearnError> {
    let objective = |v: &[f64]| {
        let hp = space.to_hyperparams(v);
        match cross_validate(rows, labels, feature_names, &hp, plan, seed, averaging) {
            Ok(r) => r.fold_scores.iter().sum::<f64>() / r.fold_scores.len().max(1) as f64,
            Err(_) => f64::NAN,
        }
    };
    let search = bayes_opt(objective, space, budget, None, seed)?;
    Ok(Tuned {
        hyperparams: space.to_hyperparams(&search.best),
        cv_score: search.best_value,
        search,
    })
}
