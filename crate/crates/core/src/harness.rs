//! Per-QI simulation loop, metrics, and the experiment drivers built on it.
//!
//! Each QI runs: truth step, IMU-driven prediction, availability from the
//! estimated position, scheduling, sensing by the scheduled anchors only, and
//! the EKF update. Random draws come from streams keyed by
//! `(seed, subsystem, anchor, qi)`, so changing the schedule never shifts
//! another anchor's noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix4, Vector2, Vector3, Vector4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    ekf_update, measured_range_jacobian, predict, range_jacobian, Belief, JacobianMode, ObservationRow, QualityTargets,
};
use crate::gnn::{self, GnnModel, Sample};
use crate::linalg;
use crate::scheduler::{join_ids, schedule_greedy_all, schedule_voi, Schedule, SchedulerKind};
use crate::seed;
use crate::sensing::{
    available_agents, rotate_imu, sample_imu, sample_uwb, true_range, ImuObservation, NlosPolicy, RangeObservation,
    SensingAgent,
};
use crate::world::{self, generate_trajectory, los_blocked, step_truth, ProcessModel, Room, StateVec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub waypoints: Vec<[f64; 2]>,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessConfig {
    /// Seconds per QI.
    pub dt: f64,
    /// White acceleration noise driving the truth and assumed by the twin.
    pub accel_noise_std: f64,
    pub noise_mean: [f64; 4],
}

impl Default for ProcessConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            accel_noise_std: 0.3,
            noise_mean: [0.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuConfig {
    /// Per-axis accelerometer noise, m/s².
    pub noise_std: f64,
}

impl ImuConfig {
    pub fn cov(&self) -> Matrix2<f64> {
        Matrix2::identity() * self.noise_std * self.noise_std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialConfig {
    pub pos_std: f64,
    pub vel_std: f64,
    /// Fixed initial mean; when absent the mean is drawn around the truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f64; 4]>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            pos_std: 0.3,
            vel_std: 0.1,
            mean: None,
        }
    }
}

impl InitialConfig {
    pub fn cov(&self) -> Matrix4<f64> {
        let p = self.pos_std * self.pos_std;
        let v = self.vel_std * self.vel_std;
        Matrix4::from_diagonal(&Vector4::new(p, v, p, v))
    }
}

/// Slot durations in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlotTiming {
    pub sensing: f64,
    pub uplink_per_slot: f64,
    pub t_config: f64,
    pub downlink: f64,
}

impl Default for SlotTiming {
    fn default() -> Self {
        Self {
            sensing: 0.004,
            uplink_per_slot: 0.002,
            t_config: 0.005,
            downlink: 0.002,
        }
    }
}

impl SlotTiming {
    pub fn qi_latency(&self, n_selected: usize) -> f64 {
        self.sensing + n_selected as f64 * self.uplink_per_slot + self.t_config + self.downlink
    }
}

/// PD gains of the ground-truth path follower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        Self { kp: 2.0, kd: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSampling {
    #[default]
    Uniform,
    Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DatasetConfig {
    pub sampling: DatasetSampling,
}

fn default_z_tag() -> f64 {
    0.3
}

fn default_imu() -> Option<ImuConfig> {
    Some(ImuConfig { noise_std: 0.05 })
}

fn default_nlos_noise_factor() -> f64 {
    3.0
}

/// Everything needed to run one episode. Loaded from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub room: Room,
    pub anchors: Vec<SensingAgent>,
    pub trajectory: TrajectoryConfig,
    #[serde(default = "default_z_tag")]
    pub z_tag: f64,
    #[serde(default)]
    pub process: ProcessConfig,
    #[serde(default = "default_imu")]
    pub imu: Option<ImuConfig>,
    #[serde(default)]
    pub initial: InitialConfig,
    pub targets: QualityTargets,
    pub budget: usize,
    pub n_qis: usize,
    #[serde(default)]
    pub timing: SlotTiming,
    #[serde(default)]
    pub scheduler: SchedulerKind,
    /// Anchors farther than this from the estimate are unavailable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_range: Option<f64>,
    #[serde(default)]
    pub nlos: NlosPolicy,
    /// Noise multiplier for a range whose true path is blocked.
    #[serde(default = "default_nlos_noise_factor")]
    pub nlos_noise_factor: f64,
    #[serde(default)]
    pub jacobian: JacobianMode,
    /// Apply each schedule one QI after it was computed.
    #[serde(default)]
    pub actuation_delay: bool,
    #[serde(default)]
    pub tracking: TrackingGains,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gnn_model: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    /// 11 × 8.5 × 3.3 m room, six anchors on the walls at 2.5 m, rectangular
    /// path at 0.5 m/s, 0.1 m ranging noise.
    pub fn reference() -> Self {
        let anchors = [(0.0, 0.0), (5.5, 0.0), (11.0, 0.0), (11.0, 8.5), (5.5, 8.5), (0.0, 8.5)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| SensingAgent::new(i as u32, Vector3::new(x, y, 2.5)))
            .collect();
        Self {
            room: Room::new(11.0, 8.5, 3.3),
            anchors,
            trajectory: TrajectoryConfig {
                waypoints: vec![[1.5, 1.5], [9.5, 1.5], [9.5, 7.0], [1.5, 7.0]],
                speed: 0.5,
            },
            z_tag: default_z_tag(),
            process: ProcessConfig::default(),
            imu: default_imu(),
            initial: InitialConfig::default(),
            targets: QualityTargets::position(0.2).expect("positive threshold"),
            budget: 6,
            n_qis: 300,
            timing: SlotTiming::default(),
            scheduler: SchedulerKind::Voi,
            max_range: None,
            nlos: NlosPolicy::Exclude,
            nlos_noise_factor: default_nlos_noise_factor(),
            jacobian: JacobianMode::Predicted,
            actuation_delay: false,
            tracking: TrackingGains::default(),
            gnn_model: None,
            dataset: DatasetConfig::default(),
            seed: 0,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        if self.anchors.is_empty() {
            return Err(Error::Config("scenario has no anchors".into()));
        }
        let mut ids: Vec<u32> = self.anchors.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("anchor ids must be unique".into()));
        }
        if self.anchors.iter().any(|a| !(a.noise_var >= 0.0) || a.position.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("anchor noise variance must be >= 0 and positions finite".into()));
        }
        QualityTargets::new(self.targets.xi)?;
        if self.n_qis == 0 {
            return Err(Error::Config("n_qis must be >= 1".into()));
        }
        let t = &self.timing;
        if [t.sensing, t.uplink_per_slot, t.t_config, t.downlink].iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::Config("slot durations must be >= 0".into()));
        }
        if let Some(imu) = &self.imu {
            if !(imu.noise_std >= 0.0) {
                return Err(Error::Config("IMU noise std must be >= 0".into()));
            }
        }
        if !(self.initial.pos_std > 0.0 && self.initial.vel_std > 0.0) {
            return Err(Error::Config("initial standard deviations must be > 0".into()));
        }
        if let NlosPolicy::Inflate { factor } = self.nlos {
            if !(factor >= 1.0) {
                return Err(Error::Config("NLoS inflation factor must be >= 1".into()));
            }
        }
        self.process_model()?;
        self.waypoints().iter().try_for_each(|p| {
            if self.room.contains(p) {
                Ok(())
            } else {
                Err(Error::Config(format!("waypoint ({}, {}) outside the room", p.x, p.y)))
            }
        })?;
        Ok(())
    }

    pub fn process_model(&self) -> Result<ProcessModel> {
        let p = &self.process;
        Ok(ProcessModel::constant_velocity(p.dt, p.accel_noise_std)?.with_noise_mean(Vector4::from(p.noise_mean)))
    }

    pub fn waypoints(&self) -> Vec<Vector2<f64>> {
        self.trajectory.waypoints.iter().map(|p| Vector2::new(p[0], p[1])).collect()
    }

    pub fn max_range(&self) -> f64 {
        self.max_range.unwrap_or(f64::INFINITY)
    }

    /// Positional requirement split over x and y, velocities unconstrained.
    pub fn with_position_threshold(mut self, threshold: f64) -> Result<Self> {
        self.targets = QualityTargets::position(threshold)?;
        Ok(self)
    }
}

/// A trained network together with the room its features were normalized by.
#[derive(Debug, Clone)]
pub struct GnnLocalizer {
    pub model: GnnModel,
    pub room: Room,
}

impl GnnLocalizer {
    pub fn load(path: &Path, fallback_room: &Room) -> Result<Self> {
        let (model, meta) = gnn::load_model(path)?;
        Ok(Self {
            model,
            room: meta.room.unwrap_or_else(|| fallback_room.clone()),
        })
    }

    pub fn locate(&self, selected: &[(SensingAgent, RangeObservation)]) -> Result<Vector2<f64>> {
        let g = gnn::build_star_graph(selected, &self.room, None)?;
        Ok(gnn::graph::denormalize_position(&self.model.forward(&g)?, &self.room))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QiMetrics {
    pub qi: usize,
    pub truth: StateVec,
    pub estimate: StateVec,
    pub position_error: f64,
    /// `Ψ₁₁ + Ψ₃₃` of the posterior.
    pub predicted_position_variance: f64,
    pub nees: f64,
    pub n_selected: usize,
    pub selected: Vec<u32>,
    pub objective: f64,
    pub qi_latency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub metrics: Vec<QiMetrics>,
    pub beliefs: Vec<Belief>,
    pub schedules: Vec<Schedule>,
    /// Ids the twin considered available at each QI.
    pub available: Vec<Vec<u32>>,
    pub uwb: Vec<RangeObservation>,
    pub imu: Vec<ImuObservation>,
}

fn heading(v: &Vector2<f64>) -> f64 {
    if v.norm() > 1e-9 {
        v.y.atan2(v.x)
    } else {
        0.0
    }
}

fn initial_belief(cfg: &ScenarioConfig, truth0: &StateVec) -> Belief {
    let cov = cfg.initial.cov();
    let mean = match cfg.initial.mean {
        Some(m) => Vector4::from(m),
        None => {
            let mut rng = seed::stream(cfg.seed, "initial-belief", &[]);
            let std = cov.diagonal().map(f64::sqrt);
            truth0 + std.map(|s| s * rng.sample::<f64, _>(rand_distr::StandardNormal))
        }
    };
    Belief::new(mean, cov, 0)
}

/// Chooses anchors for one QI according to `kind`.
fn schedule_for(kind: SchedulerKind, prior: &Belief, available: &[SensingAgent], cfg: &ScenarioConfig) -> Result<Schedule> {
    match kind {
        SchedulerKind::Voi => schedule_voi(prior, available, cfg.budget, &cfg.targets, cfg.z_tag),
        SchedulerKind::Greedy | SchedulerKind::Gnn => {
            schedule_greedy_all(prior, available, cfg.budget, &cfg.targets, cfg.z_tag)
        }
    }
}

fn measurement_rows(
    prior: &Belief,
    reports: &[(SensingAgent, RangeObservation)],
    z_tag: f64,
    mode: JacobianMode,
) -> Result<Vec<ObservationRow>> {
    reports
        .iter()
        .map(|(agent, obs)| {
            let (row, d) = match mode {
                JacobianMode::Predicted => range_jacobian(&prior.mean, agent, z_tag)?,
                JacobianMode::Measured => measured_range_jacobian(&prior.mean, agent, z_tag, obs.range)?,
            };
            Ok(ObservationRow::new(row, d, obs.range, agent))
        })
        .collect()
}

/// Runs one episode and keeps every intermediate trace.
pub fn simulate(cfg: &ScenarioConfig, localizer: Option<&GnnLocalizer>) -> Result<EpisodeTrace> {
    cfg.validate()?;
    if cfg.scheduler == SchedulerKind::Gnn && localizer.is_none() {
        return Err(Error::Config("the gnn scheduler needs a trained model (gnn_model)".into()));
    }
    let model = cfg.process_model()?;
    let nominal = generate_trajectory(&cfg.waypoints(), cfg.trajectory.speed, &model, cfg.n_qis + 1)?;
    let imu_cov = cfg.imu.as_ref().map(ImuConfig::cov);
    let by_id: BTreeMap<u32, &SensingAgent> = cfg.anchors.iter().map(|a| (a.id, a)).collect();

    let mut truth = nominal[0];
    let mut belief = initial_belief(cfg, &truth);
    let mut pending: Option<Vec<u32>> = None;
    let mut trace = EpisodeTrace {
        metrics: Vec::with_capacity(cfg.n_qis),
        beliefs: Vec::with_capacity(cfg.n_qis),
        schedules: Vec::with_capacity(cfg.n_qis),
        available: Vec::with_capacity(cfg.n_qis),
        uwb: Vec::new(),
        imu: Vec::new(),
    };

    for qi in 1..=cfg.n_qis {
        let mut step = || -> Result<()> {
            // Ground truth: PD tracking of the nominal path plus process noise.
            let target = nominal[qi];
            let a_cmd = (world::position(&target) - world::position(&truth)) * cfg.tracking.kp
                + (world::velocity(&target) - world::velocity(&truth)) * cfg.tracking.kd;
            let yaw = heading(&world::velocity(&truth));
            truth = step_truth(&truth, &a_cmd, &model, &mut seed::stream(cfg.seed, "process", &[qi as u64]));

            // Prediction with the IMU as control input.
            let imu_obs = match &imu_cov {
                Some(c) => {
                    let obs = sample_imu(&a_cmd, c, yaw, qi, &mut seed::stream(cfg.seed, "imu", &[qi as u64]))?;
                    trace.imu.push(obs.clone());
                    Some(obs)
                }
                None => None,
            };
            let a_global = imu_obs.as_ref().map(|o| rotate_imu(&o.accel_local, o.yaw));
            let prior = predict(&belief, &model, a_global.as_ref(), imu_cov.as_ref());

            // Availability is judged from the estimate, not the truth.
            let est_pos = world::position(&prior.mean);
            let available = available_agents(&est_pos, &cfg.anchors, &cfg.room, cfg.max_range(), cfg.z_tag, cfg.nlos);
            let computed = schedule_for(cfg.scheduler, &prior, &available, cfg)?;
            let selected: Vec<u32> = if cfg.actuation_delay {
                let applied = pending.take().unwrap_or_default();
                pending = Some(computed.selected.clone());
                applied.into_iter().filter(|id| available.iter().any(|a| a.id == *id)).collect()
            } else {
                computed.selected.clone()
            };

            // Sensing and uplink for the scheduled anchors only.
            let truth_3d = Vector3::new(truth[0], truth[2], cfg.z_tag);
            let truth_pos = world::position(&truth);
            let mut reports = Vec::with_capacity(selected.len());
            for id in &selected {
                let model_agent = available.iter().find(|a| a.id == *id).cloned().expect("selected from available");
                let mut physical = (*by_id[id]).clone();
                if los_blocked(&truth_pos, &physical.floor_position(), &cfg.room) {
                    let factor = match cfg.nlos {
                        NlosPolicy::Inflate { factor } => factor,
                        NlosPolicy::Exclude => cfg.nlos_noise_factor,
                    };
                    physical.noise_var *= factor * factor;
                }
                let mut rng = seed::stream(cfg.seed, "uwb", &[*id as u64, qi as u64]);
                let obs = sample_uwb(true_range(&truth_3d, &physical), &physical, qi, &mut rng)?;
                trace.uwb.push(obs);
                reports.push((model_agent, obs));
            }

            let rows = measurement_rows(&prior, &reports, cfg.z_tag, cfg.jacobian)?;
            belief = ekf_update(&prior, &rows)?;

            let mut estimate = belief.mean;
            if let (SchedulerKind::Gnn, Some(loc), false) = (cfg.scheduler, localizer, reports.is_empty()) {
                let p = loc.locate(&reports)?;
                estimate[0] = p.x;
                estimate[2] = p.y;
            }
            let schedule = Schedule {
                selected: selected.clone(),
                ..computed
            };
            trace.metrics.push(QiMetrics {
                qi,
                truth,
                estimate,
                position_error: (world::position(&truth) - world::position(&estimate)).norm(),
                predicted_position_variance: belief.position_variance(),
                nees: compute_nees(&truth, &belief)?,
                n_selected: selected.len(),
                selected,
                objective: schedule.objective,
                qi_latency: cfg.timing.qi_latency(schedule.selected.len()),
            });
            trace.schedules.push(schedule);
            trace.available.push(available.iter().map(|a| a.id).collect());
            trace.beliefs.push(belief.clone());
            Ok(())
        };
        step().map_err(|e| e.at_qi(qi))?;
    }
    Ok(trace)
}

/// Metrics of one episode. Loads the GNN from `cfg.gnn_model` when the gnn
/// scheduler is selected.
pub fn run_episode(cfg: &ScenarioConfig) -> Result<Vec<QiMetrics>> {
    let localizer = match (&cfg.gnn_model, cfg.scheduler) {
        (Some(path), SchedulerKind::Gnn) => Some(GnnLocalizer::load(path, &cfg.room)?),
        _ => None,
    };
    Ok(simulate(cfg, localizer.as_ref())?.metrics)
}

/// Mean squared planar position error.
pub fn compute_mse(metrics: &[QiMetrics]) -> Result<f64> {
    if metrics.is_empty() {
        return Err(Error::Contract("no metrics to average".into()));
    }
    Ok(metrics.iter().map(|m| m.position_error * m.position_error).sum::<f64>() / metrics.len() as f64)
}

pub fn compute_rmse(metrics: &[QiMetrics]) -> Result<f64> {
    compute_mse(metrics).map(f64::sqrt)
}

/// Eigenvalue floor applied before inverting the covariance for NEES.
pub const NEES_EIGEN_FLOOR: f64 = 1e-12;

/// `eᵀ Ψ⁻¹ e` with `e = truth - mean`.
pub fn compute_nees(truth: &StateVec, belief: &Belief) -> Result<f64> {
    let e = truth - belief.mean;
    let eig = linalg::symmetrize(&belief.cov).symmetric_eigen();
    let mut total = 0.0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let lambda = lambda.max(NEES_EIGEN_FLOOR);
        let proj = eig.eigenvectors.column(i).dot(&e);
        total += proj * proj / lambda;
    }
    if total.is_finite() {
        Ok(total)
    } else {
        let cov = nalgebra::DMatrix::from_column_slice(4, 4, belief.cov.as_slice());
        Err(Error::Numerical {
            what: "NEES covariance inverse",
            condition: linalg::condition_number(&cov),
        })
    }
}

/// Step function of the empirical CDF: `(value, #errors <= value / N)` at
/// each distinct value, ascending.
pub fn empirical_cdf(errors: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::Contract("empirical CDF of an empty sample".into()));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::Contract("NaN in CDF sample".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    Ok(out)
}

/// Evaluates a step CDF from [`empirical_cdf`] at `value`.
pub fn cdf_at(cdf: &[(f64, f64)], value: f64) -> f64 {
    cdf.iter().take_while(|(v, _)| *v <= value).last().map_or(0.0, |p| p.1)
}

/// Labeled samples from every anchor in line of sight of random AGV
/// positions.
pub fn generate_gnn_dataset(cfg: &ScenarioConfig, n_samples: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    let model = cfg.process_model()?;
    let nominal = match cfg.dataset.sampling {
        DatasetSampling::Trajectory => generate_trajectory(&cfg.waypoints(), cfg.trajectory.speed, &model, cfg.n_qis)?,
        DatasetSampling::Uniform => Vec::new(),
    };
    let mut out = Vec::with_capacity(n_samples);
    for id in 0..n_samples {
        let mut rng = seed::stream(cfg.seed, "dataset", &[id as u64]);
        let mut accepted = None;
        for _ in 0..1000 {
            let p = match cfg.dataset.sampling {
                DatasetSampling::Uniform => {
                    Vector2::new(rng.random_range(0.0..cfg.room.width), rng.random_range(0.0..cfg.room.depth))
                }
                DatasetSampling::Trajectory => world::position(&nominal[rng.random_range(0..nominal.len())]),
            };
            if cfg.room.obstacles.iter().any(|o| o.contains(&p)) {
                continue;
            }
            let visible = available_agents(&p, &cfg.anchors, &cfg.room, cfg.max_range(), cfg.z_tag, NlosPolicy::Exclude);
            if !visible.is_empty() {
                accepted = Some((p, visible));
                break;
            }
        }
        let (p, visible) = accepted
            .ok_or_else(|| Error::Config("could not place a sample with any anchor in line of sight".into()))?;
        let p3 = Vector3::new(p.x, p.y, cfg.z_tag);
        let anchors = visible
            .iter()
            .map(|a| Ok([a.position.x, a.position.y, sample_uwb(true_range(&p3, a), a, 0, &mut rng)?.range]))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample { id, anchors, label: Some([p.x, p.y]) });
    }
    Ok(out)
}

/// Aggregate of one or more episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_qis: usize,
    pub mse: f64,
    pub rmse: f64,
    /// Root of the mean posterior position variance.
    pub predicted_rmse: f64,
    pub mean_n_selected: f64,
    pub total_uplink_slots: usize,
    pub mean_nees: f64,
    pub mean_latency: f64,
}

pub fn summarize(metrics: &[QiMetrics]) -> Result<Summary> {
    let mse = compute_mse(metrics)?;
    let n = metrics.len() as f64;
    let slots: usize = metrics.iter().map(|m| m.n_selected).sum();
    Ok(Summary {
        n_qis: metrics.len(),
        mse,
        rmse: mse.sqrt(),
        predicted_rmse: (metrics.iter().map(|m| m.predicted_position_variance).sum::<f64>() / n).sqrt(),
        mean_n_selected: slots as f64 / n,
        total_uplink_slots: slots,
        mean_nees: metrics.iter().map(|m| m.nees).sum::<f64>() / n,
        mean_latency: metrics.iter().map(|m| m.qi_latency).sum::<f64>() / n,
    })
}

#[derive(Debug, Serialize)]
struct MetricsRecord<'a> {
    qi: usize,
    truth_x: f64,
    truth_vx: f64,
    truth_y: f64,
    truth_vy: f64,
    est_x: f64,
    est_vx: f64,
    est_y: f64,
    est_vy: f64,
    position_error: f64,
    predicted_position_variance: f64,
    nees: f64,
    n_selected: usize,
    selected_ids: &'a str,
    objective: f64,
    qi_latency: f64,
}

pub fn write_metrics_csv(path: &Path, metrics: &[QiMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        let ids = join_ids(&m.selected);
        w.serialize(MetricsRecord {
            qi: m.qi,
            truth_x: m.truth[0],
            truth_vx: m.truth[1],
            truth_y: m.truth[2],
            truth_vy: m.truth[3],
            est_x: m.estimate[0],
            est_vx: m.estimate[1],
            est_y: m.estimate[2],
            est_vy: m.estimate[3],
            position_error: m.position_error,
            predicted_position_variance: m.predicted_position_variance,
            nees: m.nees,
            n_selected: m.n_selected,
            selected_ids: &ids,
            objective: m.objective,
            qi_latency: m.qi_latency,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// One point of the requirement sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub episodes: usize,
    pub measured_rmse: f64,
    pub predicted_rmse: f64,
    pub mse: f64,
    pub mean_n_selected: f64,
}

fn pooled(runs: &[Vec<QiMetrics>]) -> Result<Summary> {
    let all: Vec<QiMetrics> = runs.iter().flatten().cloned().collect();
    summarize(&all)
}

fn run_seeds(cfg: &ScenarioConfig, seeds: &[u64], localizer: Option<&GnnLocalizer>) -> Result<Vec<Vec<QiMetrics>>> {
    seeds
        .par_iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            simulate(&c, localizer).map(|t| t.metrics)
        })
        .collect()
}

/// VoI scheduling at each positioning requirement, pooled over `seeds`.
pub fn sweep(cfg: &ScenarioConfig, thresholds: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    thresholds
        .iter()
        .map(|&threshold| {
            let mut c = cfg.clone().with_position_threshold(threshold)?;
            c.scheduler = SchedulerKind::Voi;
            let s = pooled(&run_seeds(&c, seeds, None)?)?;
            Ok(SweepRow {
                threshold,
                episodes: seeds.len(),
                measured_rmse: s.rmse,
                predicted_rmse: s.predicted_rmse,
                mse: s.mse,
                mean_n_selected: s.mean_n_selected,
            })
        })
        .collect()
}

/// Per-scheme results of [`compare`].
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeResult {
    pub scheme: SchedulerKind,
    pub summary: Summary,
    /// Squared position error of every QI of every episode.
    pub squared_errors: Vec<f64>,
}

/// VoI against greedy-all (and the GNN when a localizer is given) on the
/// same seeds.
pub fn compare(cfg: &ScenarioConfig, seeds: &[u64], localizer: Option<&GnnLocalizer>) -> Result<Vec<SchemeResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let mut schemes = vec![SchedulerKind::Voi, SchedulerKind::Greedy];
    if localizer.is_some() {
        schemes.push(SchedulerKind::Gnn);
    }
    schemes
        .into_iter()
        .map(|scheme| {
            let mut c = cfg.clone();
            c.scheduler = scheme;
            let runs = run_seeds(&c, seeds, localizer)?;
            Ok(SchemeResult {
                scheme,
                summary: pooled(&runs)?,
                squared_errors: runs.iter().flatten().map(|m| m.position_error * m.position_error).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTrace {
    pub beliefs: Vec<Belief>,
    pub schedules: Vec<Schedule>,
}

/// Re-runs estimation and scheduling over recorded observations. An anchor
/// can only be scheduled at a QI where the recording holds its range.
pub fn replay(cfg: &ScenarioConfig, uwb: &[RangeObservation], imu: &[ImuObservation]) -> Result<ReplayTrace> {
    cfg.validate()?;
    let model = cfg.process_model()?;
    let imu_cov = cfg.imu.as_ref().map(ImuConfig::cov);
    let last_qi = uwb.iter().map(|o| o.qi).chain(imu.iter().map(|o| o.qi)).max().unwrap_or(0);
    let start = generate_trajectory(&cfg.waypoints(), cfg.trajectory.speed, &model, 1)?[0];
    let mut belief = initial_belief(cfg, &start);
    let mut ranges: BTreeMap<usize, BTreeMap<u32, RangeObservation>> = BTreeMap::new();
    for o in uwb {
        ranges.entry(o.qi).or_default().insert(o.anchor_id, *o);
    }
    let imu_by_qi: BTreeMap<usize, &ImuObservation> = imu.iter().map(|o| (o.qi, o)).collect();
    let kind = match cfg.scheduler {
        SchedulerKind::Gnn => SchedulerKind::Greedy,
        k => k,
    };

    let mut out = ReplayTrace { beliefs: Vec::new(), schedules: Vec::new() };
    let empty = BTreeMap::new();
    for qi in 1..=last_qi {
        let mut step = || -> Result<()> {
            let a_global = imu_by_qi.get(&qi).map(|o| o.accel_global());
            let prior = predict(&belief, &model, a_global.as_ref(), imu_cov.filter(|_| a_global.is_some()).as_ref());
            let recorded = ranges.get(&qi).unwrap_or(&empty);
            let available: Vec<SensingAgent> =
                available_agents(&world::position(&prior.mean), &cfg.anchors, &cfg.room, cfg.max_range(), cfg.z_tag, cfg.nlos)
                    .into_iter()
                    .filter(|a| recorded.contains_key(&a.id))
                    .collect();
            let schedule = schedule_for(kind, &prior, &available, cfg)?;
            let reports: Vec<(SensingAgent, RangeObservation)> = schedule
                .selected
                .iter()
                .map(|id| (available.iter().find(|a| a.id == *id).cloned().expect("scheduled"), recorded[id]))
                .collect();
            belief = ekf_update(&prior, &measurement_rows(&prior, &reports, cfg.z_tag, cfg.jacobian)?)?;
            out.beliefs.push(belief.clone());
            out.schedules.push(schedule);
            Ok(())
        };
        step().map_err(|e| e.at_qi(qi))?;
    }
    Ok(out)
}
