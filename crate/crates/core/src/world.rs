//! Ground-truth AGV motion, trajectories and line-of-sight geometry.

use nalgebra::{DMatrix, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// AGV state ordered `[x, vx, y, vy]` (metres, metres per second).
pub type StateVec = Vector4<f64>;

pub const STATE_DIM: usize = 4;
/// Indices of the position components inside [`StateVec`].
pub const POS_X: usize = 0;
pub const POS_Y: usize = 2;

pub fn position(s: &StateVec) -> Vector2<f64> {
    Vector2::new(s[POS_X], s[POS_Y])
}

pub fn velocity(s: &StateVec) -> Vector2<f64> {
    Vector2::new(s[1], s[3])
}

pub fn state(pos: Vector2<f64>, vel: Vector2<f64>) -> StateVec {
    StateVec::new(pos.x, vel.x, pos.y, vel.y)
}

/// Linear state evolution `s' = F s + G a + u`, `u ~ N(mu_u, Cu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessModel {
    dt: f64,
    transition: Matrix4<f64>,
    input: Matrix4x2<f64>,
    noise_cov: Matrix4<f64>,
    noise_mean: Vector4<f64>,
    noise_factor: Matrix4<f64>,
}

impl ProcessModel {
    pub fn new(
        dt: f64,
        transition: Matrix4<f64>,
        input: Matrix4x2<f64>,
        noise_cov: Matrix4<f64>,
        noise_mean: Vector4<f64>,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("process model: dt must be > 0, got {dt}")));
        }
        if transition.iter().chain(input.iter()).chain(noise_mean.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("process model: non-finite matrix entries".into()));
        }
        let cov = DMatrix::from_column_slice(4, 4, noise_cov.as_slice());
        let factor = linalg::psd_factor(&cov, "process noise Cu")?;
        Ok(Self {
            dt,
            transition,
            input,
            noise_cov: linalg::symmetrize(&noise_cov),
            noise_mean,
            noise_factor: Matrix4::from_column_slice(factor.as_slice()),
        })
    }

    /// Constant-velocity kinematics driven by white acceleration noise of
    /// standard deviation `accel_std` (m/s²) on each axis.
    pub fn constant_velocity(dt: f64, accel_std: f64) -> Result<Self> {
        if !(accel_std >= 0.0) {
            return Err(Error::Config(format!("accel noise std must be >= 0, got {accel_std}")));
        }
        let transition = cv_transition(dt);
        let input = cv_input(dt);
        let noise_cov = input * input.transpose() * (accel_std * accel_std);
        Self::new(dt, transition, input, noise_cov, Vector4::zeros())
    }

    pub fn with_noise_mean(mut self, mean: Vector4<f64>) -> Self {
        self.noise_mean = mean;
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn transition(&self) -> &Matrix4<f64> {
        &self.transition
    }

    pub fn input(&self) -> &Matrix4x2<f64> {
        &self.input
    }

    pub fn noise_cov(&self) -> &Matrix4<f64> {
        &self.noise_cov
    }

    pub fn noise_mean(&self) -> &Vector4<f64> {
        &self.noise_mean
    }

    /// Deterministic part `F s + G a`.
    pub fn propagate(&self, s: &StateVec, accel: &Vector2<f64>) -> StateVec {
        self.transition * s + self.input * accel
    }
}

pub fn cv_transition(dt: f64) -> Matrix4<f64> {
    Matrix4::new(
        1.0, dt, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, dt, //
        0.0, 0.0, 0.0, 1.0,
    )
}

pub fn cv_input(dt: f64) -> Matrix4x2<f64> {
    let h = 0.5 * dt * dt;
    Matrix4x2::new(
        h, 0.0, //
        dt, 0.0, //
        0.0, h, //
        0.0, dt,
    )
}

/// One ground-truth step: `F s + G a_cmd + u` with `u ~ N(mu_u, Cu)`.
///
/// Always consumes four standard-normal draws so that streams stay aligned
/// regardless of the noise level.
pub fn step_truth<R: Rng + ?Sized>(
    s: &StateVec,
    a_cmd: &Vector2<f64>,
    model: &ProcessModel,
    rng: &mut R,
) -> StateVec {
    let z = Vector4::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    model.propagate(s, a_cmd) + model.noise_factor * z + model.noise_mean
}

/// Axis-aligned obstacle footprint in the floor plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Obstacle {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    /// Strict interior test.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x > self.xmin && p.x < self.xmax && p.y > self.ymin && p.y < self.ymax
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

impl Room {
    pub fn new(width: f64, depth: f64, height: f64) -> Self {
        Self { width, depth, height, obstacles: Vec::new() }
    }

    pub fn with_obstacle(mut self, o: Obstacle) -> Self {
        self.obstacles.push(o);
        self
    }

    /// Length of the room's space diagonal.
    pub fn diagonal(&self) -> f64 {
        (self.width * self.width + self.depth * self.depth + self.height * self.height).sqrt()
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.depth
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("width", self.width), ("depth", self.depth), ("height", self.height)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("room {name} must be > 0, got {v}")));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            let ordered = o.xmin < o.xmax && o.ymin < o.ymax;
            let inside = o.xmin >= 0.0 && o.ymin >= 0.0 && o.xmax <= self.width && o.ymax <= self.depth;
            if !ordered || !inside {
                return Err(Error::Config(format!("obstacle {i} is degenerate or outside the room")));
            }
        }
        Ok(())
    }
}

/// True iff the open segment between the two points passes through the
/// interior of an obstacle. Touching a boundary does not block.
pub fn los_blocked(p_agv: &Vector2<f64>, p_anchor: &Vector2<f64>, room: &Room) -> bool {
    // Canonical ordering makes the test exactly symmetric in floating point.
    let (a, b) = if (p_agv.x, p_agv.y) <= (p_anchor.x, p_anchor.y) {
        (p_agv, p_anchor)
    } else {
        (p_anchor, p_agv)
    };
    room.obstacles.iter().any(|o| segment_hits_interior(a, b, o))
}

fn segment_hits_interior(a: &Vector2<f64>, b: &Vector2<f64>, o: &Obstacle) -> bool {
    let d = b - a;
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    for (start, dir, min, max) in [(a.x, d.x, o.xmin, o.xmax), (a.y, d.y, o.ymin, o.ymax)] {
        if dir == 0.0 {
            if !(start > min && start < max) {
                return false;
            }
        } else {
            let t0 = (min - start) / dir;
            let t1 = (max - start) / dir;
            lo = lo.max(t0.min(t1));
            hi = hi.min(t0.max(t1));
        }
    }
    lo < hi
}

/// Piecewise-constant-velocity path through `waypoints`, closing back to the
/// first waypoint and cycling. Sample `k` lies at arc length `k · speed · dt`.
pub fn generate_trajectory(
    waypoints: &[Vector2<f64>],
    speed: f64,
    model: &ProcessModel,
    n_qis: usize,
) -> Result<Vec<StateVec>> {
    if waypoints.len() < 2 {
        return Err(Error::Config("trajectory needs at least two waypoints".into()));
    }
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(Error::Config(format!("trajectory speed must be > 0, got {speed}")));
    }
    let mut points: Vec<Vector2<f64>> = waypoints.to_vec();
    if points.len() > 2 && points.first() == points.last() {
        points.pop();
    }
    let n = points.len();
    let segments: Vec<(Vector2<f64>, Vector2<f64>, f64)> = (0..n)
        .map(|i| {
            let from = points[i];
            let to = points[(i + 1) % n];
            (from, to, (to - from).norm())
        })
        .collect();
    if let Some(i) = segments.iter().position(|s| s.2 == 0.0) {
        return Err(Error::Config(format!("waypoints {i} and {} coincide", (i + 1) % n)));
    }
    let lap: f64 = segments.iter().map(|s| s.2).sum();

    let mut out = Vec::with_capacity(n_qis);
    for k in 0..n_qis {
        let mut s = (k as f64 * speed * model.dt()) % lap;
        let mut idx = 0;
        while idx + 1 < n && s >= segments[idx].2 {
            s -= segments[idx].2;
            idx += 1;
        }
        let (from, to, len) = segments[idx];
        let dir = (to - from) / len;
        out.push(state(from + dir * s.min(len), dir * speed));
    }
    Ok(out)
}
