//! Per-entity AutoML run and the population driver around it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{verify_classes, ClassCounts, ImbalancePlan, LearningMode};
use crate::config::Config;
use crate::economy::economize_and_reconstruct;
use crate::explain::{rank_features, EntityRanking, FamilyShare, FeatureRanking};
use crate::geo::{search_cluster_params, ClusterParams};
use crate::learn::{
    build_features, cross_validate, f1_histogram, persist_model, select_k, train_gbdt,
    tune_hyperparams, Dataset, EvalReport, GbdtModel, Hyperparams, SearchSpace, Trial, F1_BINS,
};
use crate::model::{debounce_reports, GeoPoint, Ingested, SensorSample, ValenceReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Ineligible,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub reports: usize,
    pub reports_debounced: usize,
    pub samples: usize,
    pub samples_reconstructed: usize,
    pub instances: usize,
    pub unjoined_reports: usize,
    pub features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub params: ClusterParams,
    pub n_clusters: usize,
    pub noise: usize,
    pub validity: f64,
    pub all_noise: bool,
    pub points_used: usize,
    pub points_available: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub k: usize,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub entity_id: String,
    pub status: RunStatus,
    pub seed: u64,
    pub entity_seed: u64,
    pub config: Config,
    pub counts: StageCounts,
    pub plan: Option<ImbalancePlan>,
    pub clusters: Option<ClusterSummary>,
    pub folds: Option<FoldSummary>,
    pub hyperparams: Option<Hyperparams>,
    pub trials: Vec<Trial>,
    pub eval: Option<EvalReport>,
    pub ranking: Option<EntityRanking>,
    /// Relative to the output directory.
    pub model_file: Option<String>,
    pub error: Option<StageError>,
    /// Milliseconds per stage; present only when timing is enabled.
    pub timing_ms: Option<BTreeMap<String, u64>>,
}

/// A finished entity: its report plus what the population step needs.
pub struct EntityRun {
    pub report: RunReport,
    pub model: Option<GbdtModel>,
    pub rows: Vec<Vec<f64>>,
}

/// Stable per-entity seed.
pub fn entity_seed(seed: u64, entity_id: &str) -> u64 {
    let h = crc32fast::hash(entity_id.as_bytes()) as u64;
    seed ^ h.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn model_file_name(entity_id: &str) -> String {
    let safe: String = entity_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.sxpm")
}

/// Evenly strided subset of at most `cap` points.
fn thin(points: &[GeoPoint], cap: usize) -> Vec<GeoPoint> {
    if points.len() <= cap {
        return points.to_vec();
    }
    (0..cap).map(|i| points[i * points.len() / cap]).collect()
}

struct Timer {
    enabled: bool,
    last: Instant,
    laps: BTreeMap<String, u64>,
}

impl Timer {
    fn lap(&mut self, stage: &str) {
        if self.enabled {
            let now = Instant::now();
            self.laps.insert(stage.to_string(), (now - self.last).as_millis() as u64);
            self.last = now;
        }
    }
}

/// Runs every stage for one entity. Stage failures end up in the report;
/// later stages are skipped. With `out_dir` set the model is written to
/// `out_dir/models/`.
pub fn run_entity(
    entity_id: &str,
    reports: &[ValenceReport],
    samples: &[SensorSample],
    config: &Config,
    seed: u64,
    out_dir: Option<&Path>,
) -> EntityRun {
    let eseed = entity_seed(seed, entity_id);
    let mut report = RunReport {
        entity_id: entity_id.to_string(),
        status: RunStatus::Failed,
        seed,
        entity_seed: eseed,
        config: config.clone(),
        counts: StageCounts {
            reports: reports.len(),
            samples: samples.len(),
            ..Default::default()
        },
        plan: None,
        clusters: None,
        folds: None,
        hyperparams: None,
        trials: Vec::new(),
        eval: None,
        ranking: None,
        model_file: None,
        error: None,
        timing_ms: None,
    };
    let mut timer = Timer {
        enabled: config.pipeline.timing,
        last: Instant::now(),
        laps: BTreeMap::new(),
    };
    let mut run = EntityRun {
        report: report.clone(),
        model: None,
        rows: Vec::new(),
    };
    let outcome = stages(&mut report, &mut run, reports, samples, config, eseed, out_dir, &mut timer);
    if let Err((stage, message)) = outcome {
        report.status = RunStatus::Failed;
        report.error = Some(StageError {
            stage: stage.to_string(),
            message,
        });
    }
    if timer.enabled {
        report.timing_ms = Some(timer.laps);
    }
    run.report = report;
    run
}

type StageResult = Result<(), (&'static str, String)>;

fn fail<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> (&'static str, String) {
    move |e| (stage, e.to_string())
}

/// Feature table of one entity after debounce, reconstruction and the
/// report-to-location join.
pub fn prepare_entity(
    reports: &[ValenceReport],
    samples: &[SensorSample],
    config: &Config,
) -> Result<Dataset, StageError> {
    let mut scratch = StageCounts::default();
    let mut timer = Timer {
        enabled: false,
        last: Instant::now(),
        laps: BTreeMap::new(),
    };
    prepare(&mut scratch, reports, samples, config, &mut timer).map_err(|(stage, message)| StageError {
        stage: stage.to_string(),
        message,
    })
}

fn prepare(
    counts: &mut StageCounts,
    reports: &[ValenceReport],
    samples: &[SensorSample],
    config: &Config,
    timer: &mut Timer,
) -> Result<Dataset, (&'static str, String)> {
    let mut reports = reports.to_vec();
    reports.sort_by_key(|r| r.at);
    let window = std::time::Duration::from_secs_f64(config.model.debounce_window_s);
    let reports = debounce_reports(&reports, window).map_err(fail("debounce"))?;
    counts.reports_debounced = reports.len();
    timer.lap("debounce");

    let mut samples = samples.to_vec();
    samples.sort_by_key(|s| s.at);
    let stream = economize_and_reconstruct(&samples, &config.economy).map_err(fail("reconstruct"))?;
    counts.samples_reconstructed = stream.len();
    timer.lap("reconstruct");

    let join = chrono::Duration::seconds(config.learn.join_window_s);
    let data = match build_features(&reports, &stream, join) {
        Ok(d) => d,
        Err(crate::learn::LearnError::NoJoinableInstances) => Dataset {
            feature_names: Vec::new(),
            instances: Vec::new(),
            rows: Vec::new(),
            labels: Vec::new(),
            dropped: reports.len(),
        },
        Err(e) => return Err(("features", e.to_string())),
    };
    counts.instances = data.len();
    counts.unjoined_reports = data.dropped;
    counts.features = data.feature_names.len();
    timer.lap("features");

    Ok(data)
}

#[allow(clippy::too_many_arguments)]
fn stages(
    report: &mut RunReport,
    run: &mut EntityRun,
    reports: &[ValenceReport],
    samples: &[SensorSample],
    config: &Config,
    seed: u64,
    out_dir: Option<&Path>,
    timer: &mut Timer,
) -> StageResult {
    let data = prepare(&mut report.counts, reports, samples, config, timer)?;

    let plan = verify_classes(&ClassCounts::from_classes(&data.labels), &config.balance);
    let mode = plan.mode;
    let present = plan.present_classes.clone();
    report.plan = Some(plan);
    if mode == LearningMode::Ineligible {
        report.status = RunStatus::Ineligible;
        return Ok(());
    }
    let data = if mode == LearningMode::TwoClass {
        let keep: Vec<usize> = (0..data.len()).filter(|&i| present.contains(&data.labels[i])).collect();
        data.subset(&keep)
    } else {
        data
    };
    timer.lap("verify_classes");

    // reported only, never fed to the model
    let points: Vec<GeoPoint> = samples.iter().filter_map(|s| s.location()).collect();
    if points.len() >= 2 {
        let used = thin(&points, config.geo.max_cluster_points);
        let search = search_cluster_params(&used);
        report.clusters = Some(ClusterSummary {
            params: search.params,
            n_clusters: search.clustering.n_clusters(),
            noise: search.clustering.noise_count(),
            validity: search.clustering.validity,
            all_noise: search.all_noise,
            points_used: used.len(),
            points_available: points.len(),
        });
    }
    timer.lap("clusters");

    let plan = select_k(&data.labels, config.learn.k_max, seed).map_err(fail("select_k"))?;
    report.folds = Some(FoldSummary {
        k: plan.k,
        sizes: plan.fold_sizes(),
    });
    timer.lap("select_k");

    let space = SearchSpace::hyperparams();
    let tuned = tune_hyperparams(
        &data.rows,
        &data.labels,
        &data.feature_names,
        &plan,
        &space,
        config.learn.budget,
        seed,
        config.learn.averaging,
    )
    .map_err(fail("tune"))?;
    report.trials = tuned.search.trials.clone();
    report.hyperparams = Some(tuned.hyperparams);
    let eval = cross_validate(
        &data.rows,
        &data.labels,
        &data.feature_names,
        &tuned.hyperparams,
        &plan,
        seed,
        config.learn.averaging,
    )
    .map_err(fail("evaluate"))?;
    report.eval = Some(eval);
    timer.lap("tune");

    let mut model = train_gbdt(&data.rows, &data.labels, &data.feature_names, &tuned.hyperparams, seed)
        .map_err(fail("refit"))?;
    model.meta.fold_k = Some(plan.k as u32);
    timer.lap("refit");

    if let Some(dir) = out_dir {
        let name = model_file_name(&report.entity_id);
        let path: PathBuf = dir.join("models").join(&name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(fail("persist"))?;
        }
        persist_model(&model, &path).map_err(fail("persist"))?;
        report.model_file = Some(format!("models/{name}"));
    }
    timer.lap("persist");

    let ranking = rank_features(&[(report.entity_id.clone(), &model, &data.rows)]);
    report.ranking = ranking.entities.into_iter().next();
    timer.lap("explain");

    report.status = RunStatus::Completed;
    run.model = Some(model);
    run.rows = data.rows;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub seed: u64,
    pub total: usize,
    pub completed: usize,
    pub ineligible: usize,
    pub failed: usize,
    pub f1_bins: Vec<String>,
    pub f1_histogram: Vec<usize>,
    pub families: Vec<FamilyShare>,
    pub unranked: Vec<String>,
    pub warnings: Vec<String>,
}

pub struct PopulationRun {
    pub summary: PopulationSummary,
    pub reports: Vec<RunReport>,
    pub models: BTreeMap<String, GbdtModel>,
    pub ranking: FeatureRanking,
}

/// Runs every entity that has at least one report or sample. Entities run
/// concurrently on `config.pipeline.workers` threads; the summary is built
/// afterwards in entity-id order.
pub fn run_population(data: &Ingested, config: &Config, seed: u64, out_dir: Option<&Path>) -> PopulationRun {
    let mut by_entity: BTreeMap<&str, (Vec<ValenceReport>, Vec<SensorSample>)> = BTreeMap::new();
    for r in &data.reports {
        by_entity.entry(&r.entity_id).or_default().0.push(r.clone());
    }
    for s in &data.samples {
        by_entity.entry(&s.entity_id).or_default().1.push(s.clone());
    }
    let jobs: Vec<(&str, (Vec<ValenceReport>, Vec<SensorSample>))> = by_entity.into_iter().collect();

    let work = || -> Vec<EntityRun> {
        jobs.par_iter()
            .map(|(id, (reports, samples))| run_entity(id, reports, samples, config, seed, out_dir))
            .collect()
    };
    let runs = match rayon::ThreadPoolBuilder::new().num_threads(config.pipeline.workers).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    };

    let mut warnings = Vec::new();
    if runs.is_empty() {
        warnings.push("dataset has no entities with reports or samples".to_string());
    }
    let count = |s: RunStatus| runs.iter().filter(|r| r.report.status == s).count();
    let scores: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.report.eval.as_ref().map(|e| e.f1_macro))
        .collect();
    let ranked: Vec<(String, &GbdtModel, &[Vec<f64>])> = runs
        .iter()
        .filter_map(|r| r.model.as_ref().map(|m| (r.report.entity_id.clone(), m, r.rows.as_slice())))
        .collect();
    let ranking = rank_features(&ranked);
    let summary = PopulationSummary {
        seed,
        total: runs.len(),
        completed: count(RunStatus::Completed),
        ineligible: count(RunStatus::Ineligible),
        failed: count(RunStatus::Failed),
        f1_bins: F1_BINS.iter().map(|s| s.to_string()).collect(),
        f1_histogram: f1_histogram(&scores).to_vec(),
        families: ranking.families.clone(),
        unranked: ranking.unranked.clone(),
        warnings,
    };
    let mut models = BTreeMap::new();
    let mut reports = Vec::with_capacity(runs.len());
    for r in runs {
        if let Some(m) = r.model {
            models.insert(r.report.entity_id.clone(), m);
        }
        reports.push(r.report);
    }
    PopulationRun {
        summary,
        reports,
        models,
        ranking,
    }
}
