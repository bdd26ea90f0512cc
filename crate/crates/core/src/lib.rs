//! Digital-twin estimation loop for a UWB/IMU-tracked AGV.
//!
//! The twin keeps an EKF [`Belief`] over `[x, vx, y, vy]`, decides each query
//! interval which anchors should report ([`scheduler`]), and folds the
//! returned ranges back in. A small message-passing network ([`gnn`]) offers
//! a learned alternative localizer, and [`harness`] ties everything into
//! simulated episodes.

pub mod error;
pub mod estimator;
pub mod gnn;
pub mod harness;
pub mod linalg;
pub mod scheduler;
pub mod seed;
pub mod sensing;
pub mod world;

pub use error::{Error, Result};
pub use estimator::{Belief, JacobianMode, QualityTargets};
pub use harness::{QiMetrics, ScenarioConfig, Summary};
pub use scheduler::{Schedule, SchedulerKind};
pub use sensing::{NlosPolicy, RangeObservation, SensingAgent};
pub use world::{ProcessModel, Room, StateVec};
