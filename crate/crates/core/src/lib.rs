//! Occupancy-prediction navigation stack for a small car-like robot:
//! mapping from depth scans, map extrapolation, sampling-based path
//! planning, trajectory optimization, feedback tracking and a closed-loop
//! simulator.

pub mod gridmap;
pub mod planner;
pub mod predictor;
pub mod sensorsim;
pub mod simharness;
pub mod trajopt;
pub mod tvlqr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grid(#[from] gridmap::GridError),
    #[error(transparent)]
    Environment(#[from] sensorsim::EnvironmentError),
    #[error(transparent)]
    Trajectory(#[from] trajopt::TrajError),
    #[error(transparent)]
    Predict(#[from] predictor::PredictError),
    #[error(transparent)]
    Scenario(#[from] simharness::ScenarioError),
}
