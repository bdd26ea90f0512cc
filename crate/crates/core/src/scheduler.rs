//! Value-of-information anchor scheduling and the greedy-all baseline.
//!
//! [`schedule_voi`] grows the schedule one anchor at a time, always taking the
//! nearest remaining anchor to the predicted position, and stops as soon as
//! the budget is spent, every certainty target holds, or no anchor is left.
//! Covariances are predicted without measurements so the schedule can be
//! issued before any uplink happens.

use std::path::Path;

use nalgebra::{Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimator::{meets_targets, predicted_posterior_cov, range_jacobian, stack, Belief, ObservationRow, QualityTargets};
use crate::sensing::{true_range, SensingAgent};
use crate::world::{POS_X, POS_Y, STATE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    Voi,
    Greedy,
    Gnn,
}

/// State of the schedule after one anchor was appended.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleStep {
    pub anchor_id: u32,
    pub diag: Vector4<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub qi: usize,
    pub selected: Vec<u32>,
    pub predicted_cov: Matrix4<f64>,
    pub objective: f64,
    /// Loop iterations executed; never exceeds the budget.
    pub iterations: usize,
    pub steps: Vec<ScheduleStep>,
}

impl Schedule {
    fn empty(prior: &Belief, targets: &QualityTargets) -> Self {
        Self {
            qi: prior.qi,
            selected: Vec::new(),
            predicted_cov: prior.cov,
            objective: voi_objective(&prior.cov, targets),
            iterations: 0,
            steps: Vec::new(),
        }
    }

    pub fn predicted_rmse(&self) -> f64 {
        (self.predicted_cov[(POS_X, POS_X)] + self.predicted_cov[(POS_Y, POS_Y)]).sqrt()
    }
}

/// `Σ_k max([Ψ]_kk / ξ_k² - 1, 0)`.
pub fn voi_objective(cov: &Matrix4<f64>, targets: &QualityTargets) -> f64 {
    (0..STATE_DIM)
        .map(|k| (cov[(k, k)] / targets.variance_bound(k) - 1.0).max(0.0))
        .sum()
}

fn predicted_distance(prior_position: &nalgebra::Vector2<f64>, z_tag: f64, agent: &SensingAgent) -> f64 {
    true_range(&Vector3::new(prior_position.x, prior_position.y, z_tag), agent)
}

/// Orders by predicted distance, ties by id.
fn closer(d_a: f64, id_a: u32, d_b: f64, id_b: u32) -> bool {
    d_a.total_cmp(&d_b).then(id_a.cmp(&id_b)).is_lt()
}

/// Anchor with the smallest predicted 3D distance; ties go to the lowest id.
pub fn nearest_available<'a>(
    prior_position: &nalgebra::Vector2<f64>,
    available: &'a [SensingAgent],
    z_tag: f64,
) -> Option<&'a SensingAgent> {
    let mut best: Option<(&SensingAgent, f64)> = None;
    for a in available {
        let d = predicted_distance(prior_position, z_tag, a);
        match best {
            Some((b, bd)) if !closer(d, a.id, bd, b.id) => {}
            _ => best = Some((a, d)),
        }
    }
    best.map(|(a, _)| a)
}

fn rows_for(prior: &Belief, chosen: &[&SensingAgent], z_tag: f64) -> Result<Vec<ObservationRow>> {
    chosen
        .iter()
        .map(|a| {
            let (row, d) = range_jacobian(&prior.mean, a, z_tag)?;
            Ok(ObservationRow::new(row, d, d, a))
        })
        .collect()
}

/// Predicted posterior covariance if exactly `chosen` report this QI.
pub fn predicted_cov_for(prior: &Belief, chosen: &[&SensingAgent], z_tag: f64) -> Result<Matrix4<f64>> {
    if chosen.is_empty() {
        return Ok(prior.cov);
    }
    let st = stack(&rows_for(prior, chosen, z_tag)?)?;
    predicted_posterior_cov(&prior.cov, &st.h, &st.cw)
}

/// Greedy nearest-first scheduling under budget `budget` and certainty
/// `targets`.
pub fn schedule_voi(
    prior: &Belief,
    available: &[SensingAgent],
    budget: usize,
    targets: &QualityTargets,
    z_tag: f64,
) -> Result<Schedule> {
    if meets_targets(&prior.cov, targets).0 {
        return Ok(Schedule::empty(prior, targets));
    }
    let position = nalgebra::Vector2::new(prior.mean[POS_X], prior.mean[POS_Y]);
    let mut pool: Vec<SensingAgent> = available.to_vec();
    let mut chosen: Vec<SensingAgent> = Vec::new();
    let mut schedule = Schedule::empty(prior, targets);

    while chosen.len() < budget && !meets_targets(&schedule.predicted_cov, targets).0 {
        let Some(next) = nearest_available(&position, &pool, z_tag) else {
            break;
        };
        let idx = pool.iter().position(|a| a.id == next.id).expect("candidate comes from the pool");
        chosen.push(pool.swap_remove(idx));

        let refs: Vec<&SensingAgent> = chosen.iter().collect();
        let cov = predicted_cov_for(prior, &refs, z_tag)?;
        let objective = voi_objective(&cov, targets);
        schedule.iterations += 1;
        schedule.steps.push(ScheduleStep {
            anchor_id: chosen.last().map(|a| a.id).unwrap_or_default(),
            diag: cov.diagonal(),
            objective,
        });
        schedule.predicted_cov = cov;
        schedule.objective = objective;
    }
    debug_assert!(schedule.iterations <= budget);
    schedule.selected = chosen.iter().map(|a| a.id).collect();
    Ok(schedule)
}

/// Baseline: the `budget` nearest available anchors, or all of them.
pub fn schedule_greedy_all(
    prior: &Belief,
    available: &[SensingAgent],
    budget: usize,
    targets: &QualityTargets,
    z_tag: f64,
) -> Result<Schedule> {
    let position = nalgebra::Vector2::new(prior.mean[POS_X], prior.mean[POS_Y]);
    let mut ranked: Vec<(f64, &SensingAgent)> = available
        .iter()
        .map(|a| (predicted_distance(&position, z_tag, a), a))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    ranked.truncate(budget);
    let chosen: Vec<&SensingAgent> = ranked.into_iter().map(|(_, a)| a).collect();
    let cov = predicted_cov_for(prior, &chosen, z_tag)?;
    Ok(Schedule {
        qi: prior.qi,
        selected: chosen.iter().map(|a| a.id).collect(),
        predicted_cov: cov,
        objective: voi_objective(&cov, targets),
        iterations: chosen.len(),
        steps: Vec::new(),
    })
}

#[derive(Debug, Serialize)]
struct ScheduleRecord {
    qi: usize,
    n_selected: usize,
    ids: String,
    objective: f64,
    predicted_rmse: f64,
}

pub fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(";")
}

pub fn write_schedule_trace(path: &Path, schedules: &[Schedule]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in schedules {
        w.serialize(ScheduleRecord {
            qi: s.qi,
            n_selected: s.selected.len(),
            ids: join_ids(&s.selected),
            objective: s.objective,
            predicted_rmse: s.predicted_rmse(),
        })?;
    }
    w.flush()?;
    Ok(())
}
