//! Mann-Whitney U test and age/gender group comparisons.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::model::{EntityProfile, Gender, ValenceClass, ValenceReport};

pub const EXACT_MAX_TOTAL: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("both samples need at least one value")]
    Empty,
    #[error("non-finite value in sample")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// U of the first sample.
    pub u_statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub alpha: f64,
    pub h0_rejected: bool,
}

/// Midranks (1-based) of `values`, plus the tie-group sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// Number of rank arrangements giving each U value, for sizes `n1`, `n2`
/// without ties. Index is U, length `n1 * n2 + 1`.
fn u_counts(n1: usize, n2: usize) -> Vec<f64> {
    // f[i][j][u]: arrangements of i firsts and j seconds with U = u, where
    // U counts (first, second) pairs with the first sample above.
    let mut prev: Vec<Vec<f64>> = vec![vec![1.0]; n2 + 1];
    for i in 1..=n1 {
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(n2 + 1);
        for j in 0..=n2 {
            let mut v = vec![0.0; i * j + 1];
            // largest element from sample 1: beats all j seconds
            for (u, c) in prev[j].iter().enumerate() {
                v[u + j] += c;
            }
            if j > 0 {
                for (u, c) in cur[j - 1].iter().enumerate() {
                    v[u] += c;
                }
            }
            cur.push(v);
        }
        prev = cur;
    }
    prev.pop().unwrap_or_else(|| vec![1.0])
}

pub fn mann_whitney_u(a: &[f64], b: &[f64], alpha: f64) -> Result<TestResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let has_ties = ties.iter().any(|&t| t > 1);
    let nn = (n1 * n2) as f64;

    let (p, method) = if n1 + n2 <= EXACT_MAX_TOTAL && !has_ties {
        let counts = u_counts(n1, n2);
        let total: f64 = counts.iter().sum();
        let ui = u.round() as usize;
        let lower: f64 = counts[..=ui].iter().sum::<f64>() / total;
        let upper: f64 = counts[ui..].iter().sum::<f64>() / total;
        ((2.0 * lower.min(upper)).min(1.0), TestMethod::Exact)
    } else {
        let n = (n1 + n2) as f64;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
        let var = nn / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((u - nn / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (2.0 * (1.0 - normal.cdf(z))).min(1.0)
        };
        (p, TestMethod::NormalApprox)
    };
    Ok(TestResult {
        u_statistic: u,
        p_value: p,
        method,
        alpha,
        h0_rejected: p < alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measurement {
    /// Each entity contributes its negative/neutral/positive report shares.
    #[default]
    ClassProportions,
    /// Each report contributes -1, 0 or +1.
    ReportCoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupSpec {
    /// Young means `age <= age_split`; `None` uses the median age.
    pub age_split: Option<u32>,
    pub measurement: Measurement,
    pub alpha: f64,
}

impl Default for GroupSpec {
    fn default() -> Self {
        GroupSpec {
            age_split: None,
            measurement: Measurement::ClassProportions,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub group_a: String,
    pub group_b: String,
    pub entities_a: usize,
    pub entities_b: usize,
    pub result: Option<TestResult>,
    /// Per-class results when measuring class proportions.
    pub classwise: Vec<(ValenceClass, TestResult)>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub entities: usize,
    pub reports: usize,
    /// Percentage of reports per class, negative/neutral/positive.
    pub percent: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub age_split: u32,
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<GroupSummary>,
    /// Entities with reports but no age or gender on file.
    pub excluded_missing_profile: usize,
}

struct Member<'a> {
    age: u32,
    gender: Gender,
    reports: Vec<&'a ValenceReport>,
}

fn shares(reports: &[&ValenceReport]) -> [f64; 3] {
    let mut c = [0usize; 3];
    for r in reports {
        c[r.class.index()] += 1;
    }
    let n = reports.len().max(1) as f64;
    [c[0] as f64 / n, c[1] as f64 / n, c[2] as f64 / n]
}

fn lower_median(mut ages: Vec<u32>) -> u32 {
    ages.sort_unstable();
    let n = ages.len();
    if n == 0 {
        return 0;
    }
    if n % 2 == 1 {
        ages[n / 2]
    } else {
        (ages[n / 2 - 1] + ages[n / 2]) / 2
    }
}

pub fn compare_groups(
    reports: &[ValenceReport],
    profiles: &[EntityProfile],
    spec: &GroupSpec,
) -> GroupComparison {
    let mut by_entity: BTreeMap<&str, Vec<&ValenceReport>> = BTreeMap::new();
    for r in reports {
        by_entity.entry(r.entity_id.as_str()).or_default().push(r);
    }
    let profile_of: HashMap<&str, &EntityProfile> =
        profiles.iter().map(|p| (p.entity_id.as_str(), p)).collect();

    let mut members = Vec::new();
    let mut excluded = 0;
    for (id, reps) in by_entity {
        match profile_of.get(id) {
            Some(EntityProfile {
                age_years: Some(age),
                gender: Some(gender),
                ..
            }) => members.push(Member {
                age: *age,
                gender: *gender,
                reports: reps,
            }),
            _ => excluded += 1,
        }
    }

    let split = spec
        .age_split
        .unwrap_or_else(|| lower_median(members.iter().map(|m| m.age).collect()));
    let young = |m: &Member| m.age <= split;
    let young_label = format!("age<={split}");
    let old_label = format!("age>{split}");

    type Pred<'p> = Box<dyn Fn(&Member) -> bool + 'p>;
    let female = |m: &Member| m.gender == Gender::Female;
    let male = |m: &Member| m.gender == Gender::Male;
    let rows_spec: Vec<(String, String, Pred, String, Pred)> = vec![
        (
            "age".into(),
            young_label.clone(),
            Box::new(young),
            old_label.clone(),
            Box::new(move |m: &Member| !young(m)),
        ),
        (
            "female by age".into(),
            format!("F {young_label}"),
            Box::new(move |m: &Member| female(m) && young(m)),
            format!("F {old_label}"),
            Box::new(move |m: &Member| female(m) && !young(m)),
        ),
        (
            "male by age".into(),
            format!("M {young_label}"),
            Box::new(move |m: &Member| male(m) && young(m)),
            format!("M {old_label}"),
            Box::new(move |m: &Member| male(m) && !young(m)),
        ),
        (
            format!("gender {young_label}"),
            format!("F {young_label}"),
            Box::new(move |m: &Member| female(m) && young(m)),
            format!("M {young_label}"),
            Box::new(move |m: &Member| male(m) && young(m)),
        ),
        (
            format!("gender {old_label}"),
            format!("F {old_label}"),
            Box::new(move |m: &Member| female(m) && !young(m)),
            format!("M {old_label}"),
            Box::new(move |m: &Member| male(m) && !young(m)),
        ),
    ];

    let mut rows = Vec::new();
    for (label, name_a, pa, name_b, pb) in &rows_spec {
        let ga: Vec<&Member> = members.iter().filter(|m| pa(m)).collect();
        let gb: Vec<&Member> = members.iter().filter(|m| pb(m)).collect();
        let mut row = ComparisonRow {
            label: label.clone(),
            group_a: name_a.clone(),
            group_b: name_b.clone(),
            entities_a: ga.len(),
            entities_b: gb.len(),
            result: None,
            classwise: Vec::new(),
            skipped: None,
        };
        if ga.is_empty() || gb.is_empty() {
            let which = if ga.is_empty() { name_a } else { name_b };
            row.skipped = Some(format!("group {which} has no entities"));
            rows.push(row);
            continue;
        }
        match spec.measurement {
            Measurement::ClassProportions => {
                let sa: Vec<[f64; 3]> = ga.iter().map(|m| shares(&m.reports)).collect();
                let sb: Vec<[f64; 3]> = gb.iter().map(|m| shares(&m.reports)).collect();
                for class in ValenceClass::ALL {
                    let i = class.index();
                    let xa: Vec<f64> = sa.iter().map(|s| s[i]).collect();
                    let xb: Vec<f64> = sb.iter().map(|s| s[i]).collect();
                    if let Ok(r) = mann_whitney_u(&xa, &xb, spec.alpha) {
                        row.classwise.push((class, r));
                    }
                }
                let xa: Vec<f64> = sa.iter().flatten().copied().collect();
                let xb: Vec<f64> = sb.iter().flatten().copied().collect();
                row.result = mann_whitney_u(&xa, &xb, spec.alpha).ok();
            }
            Measurement::ReportCoding => {
                let code = |g: &[&Member]| -> Vec<f64> {
                    g.iter()
                        .flat_map(|m| m.reports.iter().map(|r| r.class.signed()))
                        .collect()
                };
                row.result = mann_whitney_u(&code(&ga), &code(&gb), spec.alpha).ok();
            }
        }
        rows.push(row);
    }

    let mut summary = Vec::new();
    for (name, pred) in [
        (format!("F {young_label}"), Box::new(move |m: &Member| female(m) && young(m)) as Pred),
        (format!("F {old_label}"), Box::new(move |m: &Member| female(m) && !young(m))),
        (format!("M {young_label}"), Box::new(move |m: &Member| male(m) && young(m))),
        (format!("M {old_label}"), Box::new(move |m: &Member| male(m) && !young(m))),
    ] {
        let g: Vec<&Member> = members.iter().filter(|m| pred(m)).collect();
        let all: Vec<&ValenceReport> = g.iter().flat_map(|m| m.reports.iter().copied()).collect();
        let s = shares(&all);
        summary.push(GroupSummary {
            group: name,
            entities: g.len(),
            reports: all.len(),
            percent: [s[0] * 100.0, s[1] * 100.0, s[2] * 100.0],
        });
    }

    GroupComparison {
        age_split: split,
        rows,
        summary,
        excluded_missing_profile: excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-sided exact p by listing every split of the pooled ranks.
    fn brute_p(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = pooled.len();
        let n1 = a.len();
        let u_of = |mask: u32| -> f64 {
            let mut u = 0.0;
            for i in 0..n {
                if mask & (1 << i) == 0 {
                    continue;
                }
                for j in 0..n {
                    if mask & (1 << j) == 0 && pooled[i] > pooled[j] {
                        u += 1.0;
                    }
                }
            }
            u
        };
        let observed = u_of((1 << n1) - 1);
        let (mut le, mut ge, mut total) = (0.0f64, 0.0f64, 0.0f64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let u = u_of(mask);
            total += 1.0;
            if u <= observed {
                le += 1.0;
            }
            if u >= observed {
                ge += 1.0;
            }
        }
        (2.0 * (le / total).min(ge / total)).min(1.0)
    }

    #[test]
    fn spec_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 0.05).unwrap();
        assert_eq!(r.method, TestMethod::Exact);
        assert_eq!(r.u_statistic, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-15);
        assert!(!r.h0_rejected);

        let a = [3.0, 1.0, 4.0, 1.0, 5.0];
        let r = mann_whitney_u(&a, &a, 0.05).unwrap();
        assert_eq!(r.u_statistic, 12.5);

        assert!(mann_whitney_u(&[], &[1.0], 0.05).is_err());
    }

    #[test]
    fn disjoint_ten_by_ten_rejects() {
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..10).map(|i| 100.0 + i as f64).collect();
        let r = mann_whitney_u(&a, &b, 0.05).unwrap();
        assert_eq!(r.method, TestMethod::NormalApprox);
        assert!(r.h0_rejected);
        // only the two extreme splits out of C(20, 10) are this far out
        let exact = 2.0 / 184_756.0;
        assert!(exact < 0.05 && r.p_value < 1e-3);
    }

    #[test]
    fn exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n1 = rng.gen_range(1..=6);
            let n2 = rng.gen_range(1..=6);
            let mut vals: Vec<f64> = (0..n1 + n2).map(|i| i as f64).collect();
            for i in (1..vals.len()).rev() {
                vals.swap(i, rng.gen_range(0..=i));
            }
            let (a, b) = vals.split_at(n1);
            let r = mann_whitney_u(a, b, 0.05).unwrap();
            assert_eq!(r.method, TestMethod::Exact);
            assert!((r.p_value - brute_p(a, b)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_and_normal_agree_at_eight_by_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let a: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() + 0.2).collect();
            let exact = mann_whitney_u(&a, &b, 0.05).unwrap();
            assert_eq!(exact.method, TestMethod::Exact);
            // tie-free normal approximation at 8 + 8
            let n = 16.0;
            let var = 64.0 / 12.0 * (n + 1.0);
            let z = ((exact.u_statistic - 32.0).abs() - 0.5).max(0.0) / f64::sqrt(var);
            let approx = (2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(z))).min(1.0);
            assert!((exact.p_value - approx).abs() < 0.02, "{} {}", exact.p_value, approx);
        }
    }

    fn report(entity: &str, class: ValenceClass) -> ValenceReport {
        ValenceReport {
            entity_id: entity.into(),
            at: chrono::DateTime::from_timestamp(0, 0).unwrap(),
            tz: crate::model::Zone::utc(),
            class,
            origin: crate::model::ReportOrigin::Button,
        }
    }

    fn population(rng: &mut ChaCha8Rng, shift_old: f64) -> (Vec<ValenceReport>, Vec<EntityProfile>) {
        let mut reports = Vec::new();
        let mut profiles = Vec::new();
        for e in 0..40 {
            let id = format!("e{e}");
            let age = 20 + (e * 7 % 30) as u32;
            let gender = if e % 2 == 0 { Gender::Female } else { Gender::Male };
            profiles.push(EntityProfile {
                entity_id: id.clone(),
                age_years: Some(age),
                gender: Some(gender),
            });
            let p_pos = if age > 34 { 0.3 + shift_old } else { 0.3 };
            for _ in 0..30 {
                let x: f64 = rng.gen();
                let class = if x < p_pos {
                    ValenceClass::Positive
                } else if x < p_pos + 0.4 {
                    ValenceClass::Neutral
                } else {
                    ValenceClass::Negative
                };
                reports.push(report(&id, class));
            }
        }
        // no profile at all
        reports.push(report("ghost", ValenceClass::Neutral));
        (reports, profiles)
    }

    #[test]
    fn null_population_rarely_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = GroupSpec {
            measurement: Measurement::ReportCoding,
            ..GroupSpec::default()
        };
        let runs = 100;
        let mut clean = 0;
        for _ in 0..runs {
            let (reports, profiles) = population(&mut rng, 0.0);
            let cmp = compare_groups(&reports, &profiles, &spec);
            assert_eq!(cmp.rows.len(), 5);
            assert_eq!(cmp.excluded_missing_profile, 1);
            if !cmp.rows[0].result.as_ref().unwrap().h0_rejected {
                clean += 1;
            }
        }
        assert!(clean as f64 >= 0.95 * runs as f64 - 2.0, "{clean}");
    }

    #[test]
    fn shifted_population_and_summary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (reports, profiles) = population(&mut rng, 0.4);
        let cmp = compare_groups(&reports, &profiles, &GroupSpec::default());
        assert_eq!(cmp.age_split, 34);
        let age_row = &cmp.rows[0];
        let positive = &age_row.classwise[ValenceClass::Positive.index()].1;
        assert!(positive.h0_rejected);
        let total: f64 = cmp.summary[0].percent.iter().sum();
        assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_group_is_skipped() {
        let reports = vec![report("a", ValenceClass::Positive), report("b", ValenceClass::Negative)];
        let profiles = vec![
            EntityProfile { entity_id: "a".into(), age_years: Some(20), gender: Some(Gender::Female) },
            EntityProfile { entity_id: "b".into(), age_years: Some(50), gender: Some(Gender::Female) },
        ];
        let cmp = compare_groups(&reports, &profiles, &GroupSpec { age_split: Some(30), ..Default::default() });
        assert!(cmp.rows[0].result.is_some());
        assert!(cmp.rows[2].skipped.is_some());
    }

    proptest! {
        #[test]
        fn swap_maps_u(a in proptest::collection::vec(-50i32..50, 1..9), b in proptest::collection::vec(-50i32..50, 1..9)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let ab = mann_whitney_u(&a, &b, 0.05).unwrap();
            let ba = mann_whitney_u(&b, &a, 0.05).unwrap();
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            prop_assert!((ba.u_statistic - ((a.len() * b.len()) as f64 - ab.u_statistic)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
            prop_assert_eq!(ab.h0_rejected, ab.p_value < 0.05);
        }

        #[test]
        fn monotone_transform_invariant(a in proptest::collection::vec(-5.0f64..5.0, 1..10), b in proptest::collection::vec(-5.0f64..5.0, 1..10)) {
            let f = |v: &Vec<f64>| v.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
            let r1 = mann_whitney_u(&a, &b, 0.05).unwrap();
            let r2 = mann_whitney_u(&f(&a), &f(&b), 0.05).unwrap();
            prop_assert_eq!(r1.u_statistic, r2.u_statistic);
        }
    }
}
