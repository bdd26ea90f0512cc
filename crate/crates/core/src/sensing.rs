//! UWB range and IMU acceleration measurement models.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::world::{los_blocked, Room};

/// A UWB anchor that can be scheduled to report a range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingAgent {
    pub id: u32,
    pub position: Vector3<f64>,
    #[serde(default)]
    pub noise_mean: f64,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    #[serde(default = "default_true")]
    pub active: bool,
}

/// 0.1 m ranging standard deviation.
fn default_noise_var() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

impl SensingAgent {
    pub fn new(id: u32, position: Vector3<f64>) -> Self {
        Self {
            id,
            position,
            noise_mean: 0.0,
            noise_var: default_noise_var(),
            active: true,
        }
    }

    pub fn with_noise(mut self, mean: f64, var: f64) -> Self {
        self.noise_mean = mean;
        self.noise_var = var;
        self
    }

    pub fn inactive(mut self) -> Self {
        self.active = false;
        self
    }

    pub fn floor_position(&self) -> Vector2<f64> {
        self.position.xy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeObservation {
    pub qi: usize,
    pub anchor_id: u32,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuObservation {
    pub qi: usize,
    /// Acceleration in the sensor frame.
    pub accel_local: Vector2<f64>,
    pub yaw: f64,
    pub noise_cov: Matrix2<f64>,
}

impl ImuObservation {
    /// Acceleration mapped into the room frame.
    pub fn accel_global(&self) -> Vector2<f64> {
        rotate_imu(&self.accel_local, self.yaw)
    }
}

pub fn true_range(p_agv: &Vector3<f64>, anchor: &SensingAgent) -> f64 {
    (p_agv - anchor.position).norm()
}

/// Noisy range `max(0, d + w)` with `w ~ N(noise_mean, noise_var)`.
pub fn sample_uwb<R: Rng + ?Sized>(
    d: f64,
    agent: &SensingAgent,
    qi: usize,
    rng: &mut R,
) -> Result<RangeObservation> {
    if !agent.active {
        return Err(Error::UnavailableSensor { id: agent.id });
    }
    let z: f64 = rng.sample(StandardNormal);
    let w = agent.noise_mean + agent.noise_var.max(0.0).sqrt() * z;
    Ok(RangeObservation {
        qi,
        anchor_id: agent.id,
        range: (d + w).max(0.0),
    })
}

/// Maps sensor-frame acceleration to the room frame:
/// `[ax, ay]_g = [[cos ψ, sin ψ], [-sin ψ, cos ψ]] · [ax, ay]_l`.
pub fn rotate_imu(a_local: &Vector2<f64>, yaw: f64) -> Vector2<f64> {
    let (s, c) = yaw.sin_cos();
    Vector2::new(c * a_local.x + s * a_local.y, -s * a_local.x + c * a_local.y)
}

/// Adds a draw from `N(0, cov)` to the true room-frame acceleration and
/// reports it in the sensor frame for heading `yaw`.
pub fn sample_imu<R: Rng + ?Sized>(
    a_global_true: &Vector2<f64>,
    cov: &Matrix2<f64>,
    yaw: f64,
    qi: usize,
    rng: &mut R,
) -> Result<ImuObservation> {
    let factor = linalg::psd_factor(&DMatrix::from_column_slice(2, 2, cov.as_slice()), "IMU noise")?;
    let w = linalg::gaussian_draw(&factor, rng);
    let noisy = a_global_true + Vector2::new(w[0], w[1]);
    Ok(ImuObservation {
        qi,
        accel_local: rotate_imu(&noisy, -yaw),
        yaw,
        noise_cov: *cov,
    })
}

/// How anchors without line of sight are treated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NlosPolicy {
    /// Blocked anchors leave the available set.
    #[default]
    Exclude,
    /// Blocked anchors stay available with their standard deviation scaled.
    Inflate { factor: f64 },
}

fn range_3d(belief_position: &Vector2<f64>, z_tag: f64, agent: &SensingAgent) -> f64 {
    true_range(&Vector3::new(belief_position.x, belief_position.y, z_tag), agent)
}

/// Ids of active anchors that are in line of sight of the estimated position
/// and within `max_range` of it.
pub fn compute_available_set(
    belief_position: &Vector2<f64>,
    agents: &[SensingAgent],
    room: &Room,
    max_range: f64,
    z_tag: f64,
) -> BTreeSet<u32> {
    available_agents(belief_position, agents, room, max_range, z_tag, NlosPolicy::Exclude)
        .into_iter()
        .map(|a| a.id)
        .collect()
}

/// Anchors the twin may schedule, with noise adjusted under `policy`.
pub fn available_agents(
    belief_position: &Vector2<f64>,
    agents: &[SensingAgent],
    room: &Room,
    max_range: f64,
    z_tag: f64,
    policy: NlosPolicy,
) -> Vec<SensingAgent> {
    agents
        .iter()
        .filter(|a| a.active && range_3d(belief_position, z_tag, a) <= max_range)
        .filter_map(|a| {
            let blocked = los_blocked(belief_position, &a.floor_position(), room);
            match (blocked, policy) {
                (false, _) => Some(a.clone()),
                (true, NlosPolicy::Exclude) => None,
                (true, NlosPolicy::Inflate { factor }) => {
                    Some(a.clone().with_noise(a.noise_mean, a.noise_var * factor * factor))
                }
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRecord {
    qi: usize,
    ax_local: f64,
    ay_local: f64,
    yaw: f64,
}

pub fn write_uwb_csv(path: &Path, obs: &[RangeObservation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for o in obs {
        w.serialize(o)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_uwb_csv(path: &Path) -> Result<Vec<RangeObservation>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_imu_csv(path: &Path, obs: &[ImuObservation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for o in obs {
        w.serialize(ImuRecord {
            qi: o.qi,
            ax_local: o.accel_local.x,
            ay_local: o.accel_local.y,
            yaw: o.yaw,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads IMU records; the noise covariance is not part of the file and is
/// filled from `noise_cov`.
pub fn read_imu_csv(path: &Path, noise_cov: Matrix2<f64>) -> Result<Vec<ImuObservation>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| {
            let rec: ImuRecord = row?;
            Ok(ImuObservation {
                qi: rec.qi,
                accel_local: Vector2::new(rec.ax_local, rec.ay_local),
                yaw: rec.yaw,
                noise_cov,
            })
        })
        .collect()
}
