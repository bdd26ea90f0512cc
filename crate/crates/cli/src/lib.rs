//! `voi-twin` command-line runner.
//!
//! Every subcommand writes its artifacts plus a `manifest.json` listing the
//! resolved configuration, the seed and a SHA-256 of each output file.
//! Outputs carry no timestamps, so a rerun with the same seed reproduces
//! them byte for byte.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use voi_twin::estimator::write_belief_trace;
use voi_twin::gnn::{self, Aggregation, GnnModel, ModelMeta, StarGraph, TrainConfig, Widths};
use voi_twin::harness::{self, GnnLocalizer, ScenarioConfig};
use voi_twin::scheduler::write_schedule_trace;
use voi_twin::sensing::{read_imu_csv, read_uwb_csv, write_imu_csv, write_uwb_csv};
use voi_twin::{seed, SchedulerKind};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    /// Unknown subcommand or flag, or a flag value that does not parse.
    pub const USAGE: i32 = 2;
    pub const BAD_CONFIG: i32 = 3;
    pub const MISSING_FILE: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] voi_twin::Error),
    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use voi_twin::Error as E;
        match self {
            CliError::Missing(_) => exit::MISSING_FILE,
            CliError::Output { .. } => exit::FAILURE,
            CliError::Core(e) => match e.root() {
                E::Config(_) | E::Json(_) | E::ModelFormat(_) => exit::BAD_CONFIG,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => exit::MISSING_FILE,
                _ => exit::FAILURE,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "voi-twin", version, about = "Digital-twin AGV tracking with VoI anchor scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Scenario {
    /// Scenario JSON; the built-in reference room when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the scenario's.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scheduler {
    Voi,
    Greedy,
    Gnn,
}

impl From<Scheduler> for SchedulerKind {
    fn from(s: Scheduler) -> Self {
        match s {
            Scheduler::Voi => SchedulerKind::Voi,
            Scheduler::Greedy => SchedulerKind::Greedy,
            Scheduler::Gnn => SchedulerKind::Gnn,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggregationArg {
    Mean,
    Sum,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one episode and write its traces.
    Simulate {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum)]
        scheduler: Option<Scheduler>,
        /// Trained model for the gnn scheduler.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Format of the summary file.
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// VoI scheduling over a list of positioning requirements.
    Sweep {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Positioning requirements in metres, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        thresholds: Vec<f64>,
        /// Episodes per requirement.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// VoI against greedy-all (and the GNN when a model is given).
    Compare {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Train the GNN localizer on a dataset CSV.
    GnnTrain {
        #[arg(long)]
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Scenario whose room normalizes the features.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
        max_epochs: usize,
        #[arg(long, default_value_t = TrainConfig::default().batch_size)]
        batch_size: usize,
        #[arg(long, default_value_t = TrainConfig::default().step_size)]
        step_size: f64,
        #[arg(long, default_value_t = TrainConfig::default().tolerance)]
        tolerance: f64,
        #[arg(long, value_enum, default_value = "mean")]
        aggregation: AggregationArg,
    },
    /// Report RMSE of a trained model on a dataset CSV.
    GnnEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labeled dataset for the GNN.
    DatasetGen {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        samples: usize,
        /// Dataset CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run estimation and scheduling over recorded measurements.
    Replay {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Range CSV with columns qi, anchor_id, range.
        #[arg(long)]
        uwb: PathBuf,
        /// IMU CSV with columns qi, ax_local, ay_local, yaw.
        #[arg(long)]
        imu: Option<PathBuf>,
        #[arg(long, value_enum)]
        scheduler: Option<Scheduler>,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("VOI_TWIN_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match run(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn load_scenario(s: &Scenario) -> CliResult<ScenarioConfig> {
    let mut cfg = match &s.config {
        Some(path) => {
            require(path)?;
            ScenarioConfig::from_json_file(path)?
        }
        None => ScenarioConfig::reference(),
    };
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::Output { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(voi_twin::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(voi_twin::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(voi_twin::Error::from)?;
    }
    w.flush().map_err(|source| CliError::Output { path: path.to_path_buf(), source })
}

fn write_table<T: Serialize>(path_stem: &Path, rows: &[T], format: Format) -> CliResult<PathBuf> {
    let path = match format {
        Format::Csv => path_stem.with_extension("csv"),
        Format::Json => path_stem.with_extension("json"),
    };
    match format {
        Format::Csv => write_rows(&path, rows)?,
        Format::Json => write_json(&path, &rows)?,
    }
    Ok(path)
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// File name to hex SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_manifest(
    manifest_path: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    artifacts: &[PathBuf],
) -> CliResult<()> {
    let output_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut hashes = BTreeMap::new();
    for a in artifacts {
        let name = a.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let hash = sha256_file(a).map_err(|source| CliError::Output { path: a.clone(), source })?;
        hashes.insert(name, hash);
    }
    let manifest = RunManifest {
        command: command.into(),
        config,
        seed,
        output_dir,
        artifacts: hashes,
    };
    write_json(manifest_path, &manifest)
}

fn config_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn episode_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| seed::derive_seed(master, "episode", &[i])).collect()
}

fn localizer_for(model: Option<&PathBuf>, cfg: &ScenarioConfig) -> CliResult<Option<GnnLocalizer>> {
    match model.or(cfg.gnn_model.as_ref()) {
        Some(path) => {
            require(path)?;
            Ok(Some(GnnLocalizer::load(path, &cfg.room)?))
        }
        None => Ok(None),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate { scenario, out, scheduler, model, format } => {
            let mut cfg = load_scenario(&scenario)?;
            if let Some(s) = scheduler {
                cfg.scheduler = s.into();
            }
            let localizer = if cfg.scheduler == SchedulerKind::Gnn { localizer_for(model.as_ref(), &cfg)? } else { None };
            let trace = harness::simulate(&cfg, localizer.as_ref())?;
            let summary = harness::summarize(&trace.metrics)?;
            log::info!("simulate: rmse {:.4} m, {} uplink slots", summary.rmse, summary.total_uplink_slots);

            create_dir(&out)?;
            let files = [
                out.join("metrics.csv"),
                out.join("beliefs.csv"),
                out.join("schedules.csv"),
                out.join("uwb.csv"),
                out.join("imu.csv"),
            ];
            harness::write_metrics_csv(&files[0], &trace.metrics)?;
            write_belief_trace(&files[1], &trace.beliefs)?;
            write_schedule_trace(&files[2], &trace.schedules)?;
            write_uwb_csv(&files[3], &trace.uwb)?;
            write_imu_csv(&files[4], &trace.imu)?;
            let mut artifacts = files.to_vec();
            artifacts.push(write_table(&out.join("summary"), &[summary], format)?);
            write_manifest(&out.join("manifest.json"), "simulate", config_value(&cfg), cfg.seed, &artifacts)
        }
        Command::Sweep { scenario, out, thresholds, episodes, format } => {
            let cfg = load_scenario(&scenario)?;
            if thresholds.iter().any(|t| !(*t > 0.0)) {
                return Err(voi_twin::Error::Config("thresholds must be > 0".into()).into());
            }
            let rows = harness::sweep(&cfg, &thresholds, &episode_seeds(cfg.seed, episodes))?;
            create_dir(&out)?;
            let table = write_table(&out.join("sweep"), &rows, format)?;
            write_manifest(&out.join("manifest.json"), "sweep", config_value(&cfg), cfg.seed, &[table])
        }
        Command::Compare { scenario, out, episodes, model, format } => {
            let cfg = load_scenario(&scenario)?;
            let localizer = localizer_for(model.as_ref(), &cfg)?;
            let results = harness::compare(&cfg, &episode_seeds(cfg.seed, episodes), localizer.as_ref())?;

            #[derive(Serialize)]
            struct Row<'a> {
                scheme: SchedulerKind,
                #[serde(flatten)]
                summary: &'a harness::Summary,
            }
            #[derive(Serialize)]
            struct CdfRow {
                scheme: SchedulerKind,
                squared_error: f64,
                fraction: f64,
            }
            let rows: Vec<Row> = results.iter().map(|r| Row { scheme: r.scheme, summary: &r.summary }).collect();
            let mut cdf = Vec::new();
            for r in &results {
                for (v, f) in harness::empirical_cdf(&r.squared_errors)? {
                    cdf.push(CdfRow { scheme: r.scheme, squared_error: v, fraction: f });
                }
            }
            create_dir(&out)?;
            let cdf_path = out.join("cdf.csv");
            // flattened structs only serialize through the JSON writer
            let table = match format {
                Format::Json => write_table(&out.join("compare"), &rows, format)?,
                Format::Csv => {
                    let path = out.join("compare.csv");
                    let mut w = csv::Writer::from_path(&path).map_err(voi_twin::Error::from)?;
                    w.write_record(["scheme", "n_qis", "mse", "rmse", "predicted_rmse", "mean_n_selected", "total_uplink_slots", "mean_nees", "mean_latency"])
                        .map_err(voi_twin::Error::from)?;
                    for r in &results {
                        let s = &r.summary;
                        let scheme = serde_json::to_value(r.scheme).map_err(voi_twin::Error::from)?;
                        w.write_record([
                            scheme.as_str().unwrap_or_default().to_string(),
                            s.n_qis.to_string(),
                            s.mse.to_string(),
                            s.rmse.to_string(),
                            s.predicted_rmse.to_string(),
                            s.mean_n_selected.to_string(),
                            s.total_uplink_slots.to_string(),
                            s.mean_nees.to_string(),
                            s.mean_latency.to_string(),
                        ])
                        .map_err(voi_twin::Error::from)?;
                    }
                    w.flush().map_err(|source| CliError::Output { path: path.clone(), source })?;
                    path
                }
            };
            write_rows(&cdf_path, &cdf)?;
            write_manifest(&out.join("manifest.json"), "compare", config_value(&cfg), cfg.seed, &[table, cdf_path])
        }
        Command::DatasetGen { scenario, samples, out } => {
            let cfg = load_scenario(&scenario)?;
            let data = harness::generate_gnn_dataset(&cfg, samples)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            gnn::write_dataset(&out, &data)?;
            write_manifest(&sibling(&out, ".manifest.json"), "dataset-gen", config_value(&cfg), cfg.seed, &[out])
        }
        Command::GnnTrain { data, out, config, seed, max_epochs, batch_size, step_size, tolerance, aggregation } => {
            require(&data)?;
            let room = load_scenario(&Scenario { config, seed: None })?.room;
            let samples = gnn::read_dataset(&data)?;
            let graphs = samples.iter().map(|s| s.to_graph(&room)).collect::<voi_twin::Result<Vec<StarGraph>>>()?;
            let cfg = TrainConfig { batch_size, step_size, tolerance, max_epochs, seed };
            let agg = match aggregation {
                AggregationArg::Mean => Aggregation::Mean,
                AggregationArg::Sum => Aggregation::Sum,
            };
            let init = GnnModel::init(Widths::standard(), agg, seed::derive_seed(seed, "gnn-init", &[]))?;
            let (model, history) = gnn::train(init, &graphs, &room, &cfg)?;
            let last = history.last().cloned();
            if let Some(l) = &last {
                log::info!("gnn-train: {} epochs, train rmse {:.4} m, val rmse {:.4} m", l.epoch, l.train_rmse_m, l.val_rmse_m);
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let meta = ModelMeta { room: Some(room.clone()), train_seed: Some(seed), train_samples: Some(graphs.len()) };
            gnn::save_model(&out, &model, &meta)?;
            let history_path = sibling(&out, ".history.csv");
            write_rows(&history_path, &history.epochs)?;
            let report = serde_json::json!({
                "epochs": history.epochs.len(),
                "steps": history.steps,
                "converged": history.converged,
                "train_rmse_m": last.as_ref().map(|l| l.train_rmse_m),
                "val_rmse_m": last.as_ref().map(|l| l.val_rmse_m),
            });
            println!("{report}");
            let resolved = serde_json::json!({ "train": cfg, "room": room, "aggregation": agg, "data": data });
            write_manifest(&sibling(&out, ".manifest.json"), "gnn-train", resolved, seed, &[out, history_path])
        }
        Command::GnnEval { model, data, out } => {
            require(&model)?;
            require(&data)?;
            let (net, meta) = gnn::load_model(&model)?;
            let room = meta.room.clone().unwrap_or_else(|| ScenarioConfig::reference().room);
            let samples = gnn::read_dataset(&data)?;
            let graphs = samples.iter().map(|s| s.to_graph(&room)).collect::<voi_twin::Result<Vec<StarGraph>>>()?;
            let all: Vec<&StarGraph> = graphs.iter().collect();
            let mut report = serde_json::json!({
                "samples": graphs.len(),
                "rmse_m": gnn::evaluate(&net, &all, &room)?.rmse_m,
            });
            // The recorded split is only meaningful on the training dataset.
            if let (Some(seed), Some(n)) = (meta.train_seed, meta.train_samples) {
                if n == graphs.len() {
                    let (train, val) = gnn::train::split_indices(n, seed);
                    let pick = |idx: &[usize]| idx.iter().map(|&i| &graphs[i]).collect::<Vec<_>>();
                    report["train_rmse_m"] = gnn::evaluate(&net, &pick(&train), &room)?.rmse_m.into();
                    report["val_rmse_m"] = gnn::evaluate(&net, &pick(&val), &room)?.rmse_m.into();
                }
            }
            println!("{report}");
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            Ok(())
        }
        Command::Replay { scenario, out, uwb, imu, scheduler } => {
            let mut cfg = load_scenario(&scenario)?;
            if let Some(s) = scheduler {
                cfg.scheduler = s.into();
            }
            require(&uwb)?;
            let ranges = read_uwb_csv(&uwb)?;
            let imu_obs = match &imu {
                Some(path) => {
                    require(path)?;
                    let cov = cfg.imu.as_ref().map(|c| c.cov()).ok_or_else(|| {
                        voi_twin::Error::Config("replaying IMU data needs an imu section in the scenario".into())
                    })?;
                    read_imu_csv(path, cov)?
                }
                None => Vec::new(),
            };
            let trace = harness::replay(&cfg, &ranges, &imu_obs)?;
            create_dir(&out)?;
            let beliefs = out.join("beliefs.csv");
            let schedules = out.join("schedules.csv");
            write_belief_trace(&beliefs, &trace.beliefs)?;
            write_schedule_trace(&schedules, &trace.schedules)?;
            write_manifest(&out.join("manifest.json"), "replay", config_value(&cfg), cfg.seed, &[beliefs, schedules])
        }
    }
}
