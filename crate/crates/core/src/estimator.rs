//! Extended Kalman filter over the AGV state.
//!
//! The filter is split into the same steps the scheduler needs to evaluate
//! hypothetical schedules: [`predict`] produces the prior, [`range_jacobian`]
//! linearizes one anchor, [`stack`] assembles the scheduled rows,
//! [`kalman_gain`] and [`posterior_update`] apply them.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, RowVector4, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sensing::SensingAgent;
use crate::world::{ProcessModel, StateVec, POS_X, POS_Y, STATE_DIM};

/// Predicted ranges at or below this are treated as degenerate geometry.
pub const RANGE_EPSILON: f64 = 1e-6;

/// Stand-in standard deviation for features without a requirement.
pub const UNCONSTRAINED: f64 = 1e6;

/// Gaussian belief `N(mean, cov)` over the AGV state at one QI.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mean: StateVec,
    pub cov: Matrix4<f64>,
    pub qi: usize,
}

impl Belief {
    /// Builds a belief, symmetrizing the covariance and flooring its spectrum
    /// at zero.
    pub fn new(mean: StateVec, cov: Matrix4<f64>, qi: usize) -> Self {
        Self {
            mean,
            cov: linalg::project_psd(&cov),
            qi,
        }
    }

    pub fn position_variance(&self) -> f64 {
        self.cov[(POS_X, POS_X)] + self.cov[(POS_Y, POS_Y)]
    }
}

/// Per-feature maximum acceptable standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityTargets {
    pub xi: [f64; STATE_DIM],
}

impl QualityTargets {
    pub fn new(xi: [f64; STATE_DIM]) -> Result<Self> {
        if xi.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Config(format!("quality targets must be > 0, got {xi:?}")));
        }
        Ok(Self { xi })
    }

    pub fn unconstrained() -> Self {
        Self { xi: [UNCONSTRAINED; STATE_DIM] }
    }

    /// Splits a planar positioning requirement evenly over x and y; velocities
    /// stay unconstrained.
    pub fn position(threshold: f64) -> Result<Self> {
        let per_axis = threshold / std::f64::consts::SQRT_2;
        Self::new([per_axis, UNCONSTRAINED, per_axis, UNCONSTRAINED])
    }

    pub fn variance_bound(&self, k: usize) -> f64 {
        self.xi[k] * self.xi[k]
    }
}

/// Checks `[cov]_kk <= xi_k²` for every feature; returns the zero-based
/// indices of the features that fail.
pub fn meets_targets(cov: &Matrix4<f64>, targets: &QualityTargets) -> (bool, Vec<usize>) {
    let violating: Vec<usize> = (0..STATE_DIM)
        .filter(|&k| cov[(k, k)] > targets.variance_bound(k))
        .collect();
    (violating.is_empty(), violating)
}

/// Time update. With an acceleration input the prior mean is
/// `F ŝ + G a + mu_u`; IMU noise, when given, is folded into the process
/// noise as `G C_imu Gᵀ`.
pub fn predict(
    b: &Belief,
    model: &ProcessModel,
    a_global: Option<&Vector2<f64>>,
    imu_cov: Option<&Matrix2<f64>>,
) -> Belief {
    let f = model.transition();
    let g = model.input();
    let accel = a_global.copied().unwrap_or_else(Vector2::zeros);
    let mean = f * b.mean + g * accel + model.noise_mean();
    let mut q = *model.noise_cov();
    if let Some(c) = imu_cov {
        q += g * c * g.transpose();
    }
    Belief::new(mean, f * b.cov * f.transpose() + q, b.qi + 1)
}

/// Which range divides the Jacobian row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Range predicted from the prior mean (standard EKF linearization).
    #[default]
    Predicted,
    /// The measured range, as written in the original formulation.
    Measured,
}

fn planar_range(prior_mean: &StateVec, anchor: &SensingAgent, z_tag: f64) -> (f64, f64, f64) {
    let dx = prior_mean[POS_X] - anchor.position.x;
    let dy = prior_mean[POS_Y] - anchor.position.y;
    let dz = z_tag - anchor.position.z;
    (dx, dy, (dx * dx + dy * dy + dz * dz).sqrt())
}

/// Linearized range row `[(x̂-x_m)/d̂, 0, (ŷ-y_m)/d̂, 0]` and the predicted 3D
/// range `d̂` from the prior mean.
pub fn range_jacobian(
    prior_mean: &StateVec,
    anchor: &SensingAgent,
    z_tag: f64,
) -> Result<(RowVector4<f64>, f64)> {
    let (dx, dy, d) = planar_range(prior_mean, anchor, z_tag);
    if d <= RANGE_EPSILON {
        return Err(Error::DegenerateGeometry { anchor_id: anchor.id, range: d });
    }
    Ok((RowVector4::new(dx / d, 0.0, dy / d, 0.0), d))
}

/// Row divided by the measured range instead of the predicted one.
pub fn measured_range_jacobian(
    prior_mean: &StateVec,
    anchor: &SensingAgent,
    z_tag: f64,
    measured: f64,
) -> Result<(RowVector4<f64>, f64)> {
    let (dx, dy, d) = planar_range(prior_mean, anchor, z_tag);
    if measured <= RANGE_EPSILON || d <= RANGE_EPSILON {
        return Err(Error::DegenerateGeometry { anchor_id: anchor.id, range: measured.min(d) });
    }
    Ok((RowVector4::new(dx / measured, 0.0, dy / measured, 0.0), d))
}

/// One scheduled observation ready for stacking.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub anchor_id: u32,
    pub row: RowVector4<f64>,
    /// Noise-free prediction of the measurement at the prior mean.
    pub predicted: f64,
    pub measurement: f64,
    pub noise_var: f64,
    pub noise_mean: f64,
}

impl ObservationRow {
    pub fn new(row: RowVector4<f64>, predicted: f64, measurement: f64, agent: &SensingAgent) -> Self {
        Self {
            anchor_id: agent.id,
            row,
            predicted,
            measurement,
            noise_var: agent.noise_var,
            noise_mean: agent.noise_mean,
        }
    }
}

/// Stacked observation model for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedObservation {
    pub h: DMatrix<f64>,
    pub cw: DMatrix<f64>,
    pub o: DVector<f64>,
    pub mu_w: DVector<f64>,
    pub predicted: DVector<f64>,
}

impl StackedObservation {
    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Measurements shifted onto the linearization point:
    /// `o - h(ŝ) + H ŝ`, so that the linear update's innovation
    /// `o_lin - mu_w - H ŝ` equals `o - mu_w - h(ŝ)`.
    pub fn linearized(&self, prior_mean: &StateVec) -> DVector<f64> {
        let hs = &self.h * DVector::from_column_slice(prior_mean.as_slice());
        &self.o - &self.predicted + hs
    }
}

pub fn stack(rows: &[ObservationRow]) -> Result<StackedObservation> {
    if rows.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let r = rows.len();
    Ok(StackedObservation {
        h: DMatrix::from_fn(r, STATE_DIM, |i, j| rows[i].row[j]),
        cw: DMatrix::from_diagonal(&DVector::from_iterator(r, rows.iter().map(|x| x.noise_var))),
        o: DVector::from_iterator(r, rows.iter().map(|x| x.measurement)),
        mu_w: DVector::from_iterator(r, rows.iter().map(|x| x.noise_mean)),
        predicted: DVector::from_iterator(r, rows.iter().map(|x| x.predicted)),
    })
}

fn to_dmatrix(m: &Matrix4<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(STATE_DIM, STATE_DIM, m.as_slice())
}

/// `K = Ψ Hᵀ (Cw + H Ψ Hᵀ)⁻¹`, solved through a Cholesky factorization of
/// the innovation covariance.
pub fn kalman_gain(prior_cov: &Matrix4<f64>, h: &DMatrix<f64>, cw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = h.nrows();
    if h.ncols() != STATE_DIM || cw.shape() != (r, r) {
        return Err(Error::Contract(format!(
            "gain shapes: H is {:?}, Cw is {:?}",
            h.shape(),
            cw.shape()
        )));
    }
    let p = to_dmatrix(prior_cov);
    let ph_t = &p * h.transpose();
    let innovation = linalg::symmetrize(&(cw + h * &ph_t));
    let chol = innovation.clone().cholesky().ok_or_else(|| Error::Numerical {
        what: "innovation covariance factorization",
        condition: linalg::condition_number(&innovation),
    })?;
    // S Kᵀ = H Ψ  (S and Ψ symmetric)
    let k_t = chol.solve(&ph_t.transpose());
    if k_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            what: "Kalman gain solve",
            condition: linalg::condition_number(&innovation),
        });
    }
    Ok(k_t.transpose())
}

/// Measurement update: `ŝ + K (o - mu_w - H ŝ)` and `(I - K H) Ψ`, the latter
/// symmetrized and projected onto the PSD cone.
pub fn posterior_update(
    prior: &Belief,
    k: &DMatrix<f64>,
    h: &DMatrix<f64>,
    cw: &DMatrix<f64>,
    o: &DVector<f64>,
    mu_w: &DVector<f64>,
) -> Result<Belief> {
    let r = h.nrows();
    if h.ncols() != STATE_DIM
        || k.shape() != (STATE_DIM, r)
        || cw.shape() != (r, r)
        || o.len() != r
        || mu_w.len() != r
    {
        return Err(Error::Contract(format!(
            "update shapes: K {:?}, H {:?}, Cw {:?}, o {}, mu_w {}",
            k.shape(),
            h.shape(),
            cw.shape(),
            o.len(),
            mu_w.len()
        )));
    }
    let s = DVector::from_column_slice(prior.mean.as_slice());
    let innovation = o - mu_w - h * &s;
    let mean = s + k * innovation;
    let kh = k * h;
    let cov = (DMatrix::identity(STATE_DIM, STATE_DIM) - kh) * to_dmatrix(&prior.cov);
    Ok(Belief::new(
        StateVec::from_column_slice(mean.as_slice()),
        Matrix4::from_column_slice(cov.as_slice()),
        prior.qi,
    ))
}

/// Covariance the posterior would have after stacking `h`/`cw`, without
/// needing measurements.
pub fn predicted_posterior_cov(prior_cov: &Matrix4<f64>, h: &DMatrix<f64>, cw: &DMatrix<f64>) -> Result<Matrix4<f64>> {
    let k = kalman_gain(prior_cov, h, cw)?;
    let cov = (DMatrix::identity(STATE_DIM, STATE_DIM) - k * h) * to_dmatrix(prior_cov);
    Ok(linalg::project_psd(&Matrix4::from_column_slice(cov.as_slice())))
}

/// Full EKF measurement step over already-linearized rows. Returns the prior
/// unchanged when `rows` is empty.
pub fn ekf_update(prior: &Belief, rows: &[ObservationRow]) -> Result<Belief> {
    if rows.is_empty() {
        return Ok(prior.clone());
    }
    let st = stack(rows)?;
    let k = kalman_gain(&prior.cov, &st.h, &st.cw)?;
    posterior_update(prior, &k, &st.h, &st.cw, &st.linearized(&prior.mean), &st.mu_w)
}

#[derive(Debug, Serialize)]
struct BeliefRecord {
    qi: usize,
    x: f64,
    vx: f64,
    y: f64,
    vy: f64,
    psi_11: f64,
    psi_22: f64,
    psi_33: f64,
    psi_44: f64,
}

pub fn write_belief_trace(path: &Path, beliefs: &[Belief]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for b in beliefs {
        w.serialize(BeliefRecord {
            qi: b.qi,
            x: b.mean[0],
            vx: b.mean[1],
            y: b.mean[2],
            vy: b.mean[3],
            psi_11: b.cov[(0, 0)],
            psi_22: b.cov[(1, 1)],
            psi_33: b.cov[(2, 2)],
            psi_44: b.cov[(3, 3)],
        })?;
    }
    w.flush()?;
    Ok(())
}
