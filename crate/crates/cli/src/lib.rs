//! `sxp` command-line front end.

pub mod map;

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Duration, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use valence_core::config::Config;
use valence_core::economy::{economy_filter, reconstruct};
use valence_core::empathy::{replay, EmpathyEvent};
use valence_core::explain::{influence_csv, mean_abs_attribution, rank_features, shap_attribution};
use valence_core::geo::GridCell;
use valence_core::learn::{evaluate, load_model, GbdtModel, Instance};
use valence_core::model::{
    debounce_reports, ingest_events, sample_line, Ingested, SensorSample, ValenceReport,
};
use valence_core::pipeline::{model_file_name, prepare_entity, run_population};
use valence_core::sentiment::{Lexicon, Scorer};
use valence_core::stats::{compare_groups, GroupSpec, Measurement};
use valence_core::store::{FileDropPeer, Journal};

use map::{export_map, parse_weekday, predict_context, DEFAULT_TOP_N};

#[derive(Debug, Parser)]
#[command(
    name = "sxp",
    version,
    about = "Learn and explain contextual emotional valence from per-person event logs",
    after_help = "Exit status: 0 success, 1 domain error, 2 usage error.\n\
                  Event logs are newline-delimited JSON records of type report, sample or profile."
)]
pub struct Cli {
    /// TOML config file; every key is optional.
    #[arg(long, global = true, env = "SXP_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse an event log and summarize it as JSON.
    Ingest(InputArgs),
    /// Economize then reconstruct sensor samples on the sustain grid.
    Reconstruct {
        #[command(flatten)]
        input: InputArgs,
        /// Output event log; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score text lines from stdin, one JSON result per line.
    ScoreText {
        /// Extra tab-separated lexicon, used as the primary language.
        #[arg(long, value_name = "PATH")]
        lexicon: Vec<PathBuf>,
        /// Primary bundled language.
        #[arg(long, default_value = "en")]
        primary: String,
    },
    /// Run the full pipeline for every entity and write models and reports.
    Train {
        #[command(flatten)]
        input: InputArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model against the labelled reports of an event log.
    Evaluate {
        #[command(flatten)]
        model: ModelInput,
    },
    /// Class probabilities for one weekday, hour and MGRS cell.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        when: When,
        /// 1 km MGRS cell, e.g. 29SMC8785.
        #[arg(long)]
        cell: String,
    },
    /// Per-instance SHAP attributions and the feature ranking.
    Explain {
        #[command(flatten)]
        model: ModelInput,
        /// Instances listed in the output.
        #[arg(long, default_value_t = 20)]
        limit: usize,
        /// Also write the family influence table as CSV.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Mann-Whitney comparison of age and gender groups.
    Compare {
        #[command(flatten)]
        input: InputArgs,
        /// Young means age <= split; median age when omitted.
        #[arg(long)]
        age_split: Option<u32>,
        #[arg(long, value_enum, default_value_t = MeasurementArg::ClassProportions)]
        measurement: MeasurementArg,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Replay an entity's reports and print the empathy score as CSV.
    Empathy {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        entity: Option<String>,
        /// Add a tick row this often between events.
        #[arg(long, value_name = "SECONDS")]
        tick_s: Option<i64>,
        #[arg(long, default_value_t = 0.0)]
        initial: f64,
        /// Paused interval as START,END in RFC 3339; repeatable.
        #[arg(long, value_name = "START,END")]
        pause: Vec<String>,
    },
    /// Write a GeoJSON and HTML prediction map of the most influential cells.
    Map {
        #[command(flatten)]
        model: ModelInput,
        #[command(flatten)]
        when: When,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top_n: usize,
        /// Directory for map.geojson and map.html.
        #[arg(long)]
        out: PathBuf,
    },
    /// Append to, list, sync or compact an event journal.
    Journal {
        #[arg(long)]
        journal: PathBuf,
        #[command(subcommand)]
        action: JournalAction,
    },
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Event log path, `-` for stdin.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelInput {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// Entity to use; may be omitted when the log holds one entity.
    #[arg(long)]
    pub entity: Option<String>,
}

#[derive(Debug, Args)]
pub struct When {
    /// Weekday name, abbreviation or number (Monday = 0).
    #[arg(long)]
    pub weekday: String,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..24))]
    pub hour: u8,
}

#[derive(Debug, Subcommand)]
pub enum JournalAction {
    /// Append a payload, or each stdin line when --payload is absent.
    Append {
        #[arg(long)]
        payload: Option<String>,
    },
    /// Print entries as JSON lines.
    List,
    /// Deliver unsynced entries to a drop directory.
    Sync {
        #[arg(long)]
        peer_dir: PathBuf,
    },
    /// Remove synced entries older than the retention period.
    Compact {
        /// Reference time, RFC 3339; now when omitted.
        #[arg(long)]
        now: Option<DateTime<Utc>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MeasurementArg {
    ClassProportions,
    ReportCoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Parses `args` and runs the command; returns the exit status.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn read_events(path: &Path, err: &mut dyn Write) -> Result<Ingested> {
    let data = if path == Path::new("-") {
        ingest_events(io::stdin().lock())?
    } else {
        let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        ingest_events(BufReader::new(f))?
    };
    for d in &data.diagnostics {
        writeln!(err, "warning: {}:{}: {}", path.display(), d.line, d.message)?;
    }
    Ok(data)
}

fn pick_entity(data: &Ingested, entity: Option<&str>) -> Result<String> {
    let ids = data.entity_ids();
    match entity {
        Some(e) if ids.iter().any(|i| i == e) => Ok(e.to_string()),
        Some(e) => bail!("entity {e} not found in input"),
        None if ids.len() == 1 => Ok(ids[0].clone()),
        None if ids.is_empty() => bail!("input holds no entities"),
        None => bail!("input holds {} entities; choose one with --entity", ids.len()),
    }
}

fn entity_slice(data: &Ingested, id: &str) -> (Vec<ValenceReport>, Vec<SensorSample>) {
    (
        data.reports.iter().filter(|r| r.entity_id == id).cloned().collect(),
        data.samples.iter().filter(|s| s.entity_id == id).cloned().collect(),
    )
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Model, its entity's rows re-encoded against the model's feature table,
/// and the matching instances and labels.
struct Loaded {
    entity: String,
    model: GbdtModel,
    rows: Vec<Vec<f64>>,
    instances: Vec<Instance>,
    labels: Vec<valence_core::model::ValenceClass>,
}

fn load_with_rows(m: &ModelInput, config: &Config, err: &mut dyn Write) -> Result<Loaded> {
    let model = load_model(&m.model)?;
    let data = read_events(&m.input.input, err)?;
    let entity = pick_entity(&data, m.entity.as_deref())?;
    let (reports, samples) = entity_slice(&data, &entity);
    let ds = prepare_entity(&reports, &samples, config).map_err(|e| anyhow!("{}: {}", e.stage, e.message))?;
    let rows = ds.instances.iter().map(|i| model.encode(i)).collect();
    Ok(Loaded {
        entity,
        model,
        rows,
        instances: ds.instances,
        labels: ds.labels,
    })
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(input) => {
            let data = read_events(&input.input, err)?;
            let summary = json!({
                "records": data.record_count(),
                "reports": data.reports.len(),
                "samples": data.samples.len(),
                "profiles": data.profiles.len(),
                "entities": data.entity_ids(),
                "diagnostics": data.diagnostics,
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
        }
        Command::Reconstruct { input, out: dest } => {
            let data = read_events(&input.input, err)?;
            let mut samples = data.samples.clone();
            samples.sort_by(|a, b| a.entity_id.cmp(&b.entity_id).then(a.at.cmp(&b.at)));
            let filtered = economy_filter(&samples, &config.economy)?;
            let horizon = samples.iter().map(|s| s.at).max().unwrap_or(DateTime::UNIX_EPOCH);
            let rebuilt = reconstruct(&filtered, &config.economy, horizon)?;
            let synthetic = rebuilt.iter().filter(|s| s.synthetic).count();
            let mut text = String::new();
            text += &format!("# source: {}\n", input.input.display());
            text += &format!("# rhythm: {}\n", serde_json::to_string(&config.economy)?);
            text += &format!(
                "# observed {}, retained {}, synthetic {}\n",
                samples.len(),
                filtered.samples.len(),
                synthetic
            );
            for s in &rebuilt {
                text += &sample_line(s);
                text.push('\n');
            }
            match dest {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?,
                None => out.write_all(text.as_bytes())?,
            }
        }
        Command::ScoreText { lexicon, primary } => {
            let mut lexicons = Vec::new();
            for p in &lexicon {
                lexicons.push(Lexicon::load(p)?);
            }
            let mut bundled = Lexicon::bundled();
            bundled.sort_by_key(|l| l.language != primary);
            if lexicon.is_empty() && bundled.first().map(|l| l.language != primary).unwrap_or(true) {
                bail!("no bundled lexicon for language {primary}");
            }
            lexicons.extend(bundled);
            let mut scorer = Scorer::new(lexicons)?;
            scorer.alpha = config.sentiment.alpha;
            scorer.theta = config.sentiment.theta;
            let mut text = String::new();
            io::stdin().read_to_string(&mut text)?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r = scorer.score(line);
                writeln!(out, "{}", json!({"text": line, "score": r.score, "class": r.class, "path": r.path, "language": r.language_used}))?;
            }
        }
        Command::Train { input, out: dir } => {
            let data = read_events(&input.input, err)?;
            std::fs::create_dir_all(dir.join("reports")).with_context(|| format!("cannot create {}", dir.display()))?;
            let run = run_population(&data, &config, cli.seed, Some(&dir));
            for r in &run.reports {
                let name = model_file_name(&r.entity_id).replace(".sxpm", ".json");
                write_json(&dir.join("reports").join(name), r)?;
            }
            write_json(&dir.join("population.json"), &run.summary)?;
            std::fs::write(dir.join("influence.csv"), influence_csv(&run.ranking))?;
            for w in &run.summary.warnings {
                writeln!(err, "warning: {w}")?;
            }
            writeln!(out, "{}", serde_json::to_string_pretty(&run.summary)?)?;
        }
        Command::Evaluate { model } => {
            let l = load_with_rows(&model, &config, err)?;
            if l.rows.is_empty() {
                bail!("entity {} has no labelled instances", l.entity);
            }
            let pred: Vec<_> = l.rows.iter().map(|r| l.model.predict(r)).collect();
            let report = evaluate(&l.labels, &pred);
            writeln!(out, "{}", serde_json::to_string_pretty(&json!({"entity": l.entity, "instances": l.rows.len(), "eval": report}))?)?;
        }
        Command::Predict { model, when, cell } => {
            let model = load_model(&model)?;
            let weekday = parse_weekday(&when.weekday).ok_or_else(|| anyhow!("unknown weekday {}", when.weekday))?;
            let cell: GridCell = cell.parse().map_err(|e| anyhow!("bad cell {cell}: {e}"))?;
            let p = predict_context(&model, weekday, when.hour, cell);
            let known = model.feature_names.contains(&cell.feature_name());
            if !known {
                writeln!(err, "warning: cell {cell} was never seen in training")?;
            }
            writeln!(out, "{}", json!({"negative": p[0], "neutral": p[1], "positive": p[2]}))?;
        }
        Command::Explain { model, limit, csv } => {
            let l = load_with_rows(&model, &config, err)?;
            let names = &l.model.feature_names;
            let instances: Vec<_> = l
                .rows
                .iter()
                .zip(&l.instances)
                .take(limit)
                .map(|(row, inst)| {
                    let a = shap_attribution(&l.model, row);
                    let phi: serde_json::Map<String, serde_json::Value> = names
                        .iter()
                        .enumerate()
                        .map(|(f, n)| (n.clone(), json!(a.phi.iter().map(|c| c[f]).collect::<Vec<_>>())))
                        .collect();
                    json!({
                        "at": inst.at,
                        "weekday": inst.moment.weekday,
                        "hour": inst.moment.hour,
                        "cell": inst.cell,
                        "classes": a.classes,
                        "base": a.base,
                        "phi": phi,
                    })
                })
                .collect();
            let ranking = rank_features(&[(l.entity.clone(), &l.model, &l.rows)]);
            if let Some(p) = csv {
                std::fs::write(&p, influence_csv(&ranking)).with_context(|| format!("cannot write {}", p.display()))?;
            }
            writeln!(out, "{}", serde_json::to_string_pretty(&json!({"entity": l.entity, "instances": instances, "ranking": ranking}))?)?;
        }
        Command::Compare {
            input,
            age_split,
            measurement,
            format,
        } => {
            let data = read_events(&input.input, err)?;
            let spec = GroupSpec {
                age_split,
                measurement: match measurement {
                    MeasurementArg::ClassProportions => Measurement::ClassProportions,
                    MeasurementArg::ReportCoding => Measurement::ReportCoding,
                },
                alpha: config.stats.alpha,
            };
            let table = compare_groups(&data.reports, &data.profiles, &spec);
            match format {
                Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&table)?)?,
                Format::Csv => {
                    writeln!(out, "comparison,group_a,group_b,entities_a,entities_b,u,p_value,method,h0_rejected,skipped")?;
                    for r in &table.rows {
                        let (u, p, m, rej) = match &r.result {
                            Some(t) => (
                                t.u_statistic.to_string(),
                                t.p_value.to_string(),
                                format!("{:?}", t.method),
                                t.h0_rejected.to_string(),
                            ),
                            None => Default::default(),
                        };
                        writeln!(
                            out,
                            "{},{},{},{},{},{u},{p},{m},{rej},{}",
                            r.label,
                            r.group_a,
                            r.group_b,
                            r.entities_a,
                            r.entities_b,
                            r.skipped.as_deref().unwrap_or("")
                        )?;
                    }
                }
            }
        }
        Command::Empathy {
            input,
            entity,
            tick_s,
            initial,
            pause,
        } => {
            let data = read_events(&input.input, err)?;
            let id = pick_entity(&data, entity.as_deref())?;
            let (mut reports, _) = entity_slice(&data, &id);
            reports.sort_by_key(|r| r.at);
            let window = std::time::Duration::from_secs_f64(config.model.debounce_window_s);
            let reports = debounce_reports(&reports, window)?;
            let mut events: Vec<(DateTime<Utc>, EmpathyEvent)> =
                reports.iter().map(|r| (r.at, EmpathyEvent::Report)).collect();
            for p in &pause {
                let (a, b) = p.split_once(',').ok_or_else(|| anyhow!("pause must be START,END"))?;
                let a: DateTime<Utc> = a.trim().parse().with_context(|| format!("bad pause start {a}"))?;
                let b: DateTime<Utc> = b.trim().parse().with_context(|| format!("bad pause end {b}"))?;
                if b < a {
                    bail!("pause ends before it starts: {p}");
                }
                events.push((a, EmpathyEvent::Pause));
                events.push((b, EmpathyEvent::Resume));
            }
            events.sort_by_key(|e| e.0);
            let Some(start) = events.first().map(|e| e.0) else {
                bail!("entity {id} has no reports");
            };
            let tick = match tick_s {
                Some(s) if s <= 0 => bail!("--tick-s must be positive"),
                Some(s) => Some(Duration::seconds(s)),
                None => None,
            };
            let traj = replay(start, initial, &config.empathy, &events, tick)?;
            writeln!(out, "at,event,score")?;
            for p in traj {
                let ev = serde_json::to_value(p.event)?;
                writeln!(out, "{},{},{}", p.at.to_rfc3339(), ev.as_str().unwrap_or(""), p.score)?;
            }
        }
        Command::Map {
            model,
            when,
            top_n,
            out: dir,
        } => {
            let weekday = parse_weekday(&when.weekday).ok_or_else(|| anyhow!("unknown weekday {}", when.weekday))?;
            let l = load_with_rows(&model, &config, err)?;
            let imp = mean_abs_attribution(&l.model, &l.rows);
            let importance: Vec<(String, f64)> = l.model.feature_names.iter().cloned().zip(imp).collect();
            let doc = export_map(&l.model, &importance, weekday, when.hour, top_n);
            for w in &doc.warnings {
                writeln!(err, "warning: {w}")?;
            }
            std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write_json(&dir.join("map.geojson"), &doc.to_geojson())?;
            std::fs::write(dir.join("map.html"), doc.to_html())?;
            writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
        }
        Command::Journal { journal, action } => {
            let mut j = Journal::open_path(&journal)?;
            if j.recovered_tail > 0 {
                writeln!(err, "warning: dropped {} bytes of torn tail", j.recovered_tail)?;
            }
            match action {
                JournalAction::Append { payload } => {
                    let lines: Vec<String> = match payload {
                        Some(p) => vec![p],
                        None => io::stdin().lock().lines().collect::<io::Result<_>>()?,
                    };
                    for line in lines.iter().filter(|l| !l.trim().is_empty()) {
                        let seq = j.append(line, Utc::now())?;
                        writeln!(out, "{seq}")?;
                    }
                }
                JournalAction::List => {
                    for e in j.entries() {
                        writeln!(out, "{}", serde_json::to_string(e)?)?;
                    }
                }
                JournalAction::Sync { peer_dir } => {
                    let mut peer = FileDropPeer { dir: peer_dir };
                    let mut retry = config.store.retry_state();
                    let report = j.sync_cycle(&mut peer, Utc::now(), &mut retry);
                    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
                    if let Some(e) = report.error {
                        bail!("sync incomplete: {e}");
                    }
                }
                JournalAction::Compact { now } => {
                    let now = now.unwrap_or_else(Utc::now);
                    let removed = j.compact(Duration::days(config.store.retention_days), now)?;
                    writeln!(out, "{}", json!({"removed": removed, "remaining": j.len()}))?;
                }
            }
        }
    }
    Ok(())
}
