//! Time-varying LQR tracking of an optimized trajectory.

use std::fmt::Write as _;

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::trajopt::{
    integrate_rk4, wrap_angle, ControlInput, Limits, RobotState, Trajectory, VehicleParams,
};

pub type StateMatrix = SMatrix<f64, 5, 5>;
pub type InputMatrix = SMatrix<f64, 5, 2>;
pub type GainMatrix = SMatrix<f64, 2, 5>;

/// Finite-difference step used for the discrete Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TvlqrError {
    #[error("R + B'SB is not positive definite at interval {0}")]
    SingularInnerMatrix(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrices<const NX: usize, const NU: usize> {
    pub q: SMatrix<f64, NX, NX>,
    pub q_f: SMatrix<f64, NX, NX>,
    pub r: SMatrix<f64, NU, NU>,
}

impl Default for CostMatrices<5, 2> {
    fn default() -> Self {
        Self {
            q: StateMatrix::from_diagonal(&SVector::from([10.0; 5])),
            q_f: StateMatrix::from_diagonal(&SVector::from([1.0, 1.0, 5.0, 1.0, 1.0])),
            r: SMatrix::<f64, 2, 2>::identity(),
        }
    }
}

/// Gains `K_k` for each interval and cost-to-go matrices `S_0..S_{N-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Riccati<const NX: usize, const NU: usize> {
    pub gains: Vec<SMatrix<f64, NU, NX>>,
    pub cost_to_go: Vec<SMatrix<f64, NX, NX>>,
}

/// Discrete Jacobians of one RK4 step at every interval of `traj`, by
/// central differences.
pub fn linearize(traj: &Trajectory, p: &VehicleParams) -> Vec<(StateMatrix, InputMatrix)> {
    let h = JACOBIAN_STEP;
    traj.inputs
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let x = traj.states[k].to_vec();
            let u = u.to_vec();
            let mut a = StateMatrix::zeros();
            let mut b = InputMatrix::zeros();
            for c in 0..5 {
                let mut e = SVector::<f64, 5>::zeros();
                e[c] = h;
                let d = (integrate_rk4(&(x + e), &u, traj.dt, p)
                    - integrate_rk4(&(x - e), &u, traj.dt, p))
                    / (2.0 * h);
                a.set_column(c, &d);
            }
            for c in 0..2 {
                let mut e = SVector::<f64, 2>::zeros();
                e[c] = h;
                let d = (integrate_rk4(&x, &(u + e), traj.dt, p)
                    - integrate_rk4(&x, &(u - e), traj.dt, p))
                    / (2.0 * h);
                b.set_column(c, &d);
            }
            (a, b)
        })
        .collect()
}

/// Backward Riccati recursion from `S_{N-1} = Q_f`. Each `S_k` is
/// symmetrized after the update.
pub fn riccati_backward<const NX: usize, const NU: usize>(
    ab: &[(SMatrix<f64, NX, NX>, SMatrix<f64, NX, NU>)],
    cost: &CostMatrices<NX, NU>,
) -> Result<Riccati<NX, NU>, TvlqrError> {
    let n = ab.len();
    let mut s = cost.q_f;
    let mut cost_to_go = vec![s; n + 1];
    let mut gains = vec![SMatrix::<f64, NU, NX>::zeros(); n];
    for k in (0..n).rev() {
        let (a, b) = &ab[k];
        let bts = b.transpose() * s;
        let inner = cost.r + bts * b;
        let chol = inner.cholesky().ok_or(TvlqrError::SingularInnerMatrix(k))?;
        let gain = chol.solve(&(bts * a));
        let next = cost.q + a.transpose() * s * a - a.transpose() * s * b * gain;
        s = (next + next.transpose()) * 0.5;
        gains[k] = gain;
        cost_to_go[k] = s;
    }
    Ok(Riccati { gains, cost_to_go })
}

/// Feedback schedule around a nominal trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct GainSchedule {
    pub nominal: Trajectory,
    pub gains: Vec<GainMatrix>,
    pub vehicle: VehicleParams,
    pub limits: Limits,
}

impl GainSchedule {
    pub fn new(
        nominal: Trajectory,
        cost: &CostMatrices<5, 2>,
        vehicle: VehicleParams,
        limits: Limits,
    ) -> Result<Self, TvlqrError> {
        let ab = linearize(&nominal, &vehicle);
        let gains = riccati_backward(&ab, cost)?.gains;
        Ok(Self {
            nominal,
            gains,
            vehicle,
            limits,
        })
    }

    pub fn knot_times(&self) -> Vec<f64> {
        (0..self.nominal.states.len())
            .map(|k| k as f64 * self.nominal.dt)
            .collect()
    }

    pub fn duration(&self) -> f64 {
        self.nominal.duration()
    }

    /// `u = u_k - K_k (x - x_0(t))`, with `K` and `u_k` held over each
    /// interval, angle errors wrapped and the result clamped to the input
    /// limits. `t` is time since the schedule start, clamped to its span.
    pub fn apply_control(&self, x: &RobotState, t: f64) -> ControlInput {
        if self.gains.is_empty() {
            return ControlInput::default();
        }
        let (k, x0) = self.nominal.nominal_at(t, &self.vehicle);
        let mut err = x.to_vec() - x0.to_vec();
        err[3] = wrap_angle(err[3]);
        err[4] = wrap_angle(err[4]);
        let u = self.nominal.inputs[k].to_vec() - self.gains[k] * err;
        self.limits.clamp_input(ControlInput::from_vec(&u))
    }

    /// One row per interval: `k, t` and the ten gain entries row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,t");
        for r in 0..2 {
            for c in 0..5 {
                let _ = write!(out, ",k{r}{c}");
            }
        }
        out.push('\n');
        for (k, g) in self.gains.iter().enumerate() {
            let _ = write!(out, "{k},{}", k as f64 * self.nominal.dt);
            for r in 0..2 {
                for c in 0..5 {
                    let _ = write!(out, ",{}", g[(r, c)]);
                }
            }
            out.push('\n');
        }
        out
    }
}
