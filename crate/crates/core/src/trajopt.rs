//! Bicycle dynamics and the variable-`dt` direct-transcription problem that
//! turns a horizon point into a dynamically feasible trajectory.
//!
//! Decision variables are the free knot states `x_1..x_{N-1}`, the inputs
//! `u_0..u_{N-2}` and one shared interval `dt`. State, input, terminal-box
//! and `dt` limits are simple bounds and are enforced by projection; RK4
//! defects and obstacle clearance go through an augmented Lagrangian whose
//! inner problem is solved by projected Gauss-Newton with backtracking.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::{PlanningMap, Point};

pub type StateVec = SVector<f64, 5>;
pub type InputVec = SVector<f64, 2>;

/// Vehicle state `[x, y, v, theta, delta]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
    pub delta: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, v: f64, theta: f64, delta: f64) -> Self {
        Self {
            x,
            y,
            v,
            theta,
            delta,
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn to_vec(&self) -> StateVec {
        StateVec::new(self.x, self.y, self.v, self.theta, self.delta)
    }

    pub fn from_vec(v: &StateVec) -> Self {
        Self {
            x: v[0],
            y: v[1],
            v: v[2],
            theta: v[3],
            delta: v[4],
        }
    }
}

/// `[u0, u1]`: longitudinal acceleration and steering rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
    pub steer_rate: f64,
}

impl ControlInput {
    pub fn new(accel: f64, steer_rate: f64) -> Self {
        Self { accel, steer_rate }
    }

    pub fn to_vec(&self) -> InputVec {
        InputVec::new(self.accel, self.steer_rate)
    }

    pub fn from_vec(v: &InputVec) -> Self {
        Self {
            accel: v[0],
            steer_rate: v[1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Wheelbase, m.
    pub wheelbase: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { wheelbase: 0.33 }
    }
}

/// State and input limits of the optimized trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub v_min: f64,
    pub v_max: f64,
    pub delta_max: f64,
    pub accel_max: f64,
    pub steer_rate_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            v_min: 0.5,
            v_max: f64::INFINITY,
            delta_max: 0.3,
            accel_max: 2.5,
            steer_rate_max: 1.5,
        }
    }
}

impl Limits {
    pub fn clamp_input(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            accel: u.accel.clamp(-self.accel_max, self.accel_max),
            steer_rate: u
                .steer_rate
                .clamp(-self.steer_rate_max, self.steer_rate_max),
        }
    }

    fn state_ok(&self, s: &RobotState, tol: f64) -> bool {
        s.v >= self.v_min - tol && s.v <= self.v_max + tol && s.delta.abs() <= self.delta_max + tol
    }

    fn input_ok(&self, u: &ControlInput, tol: f64) -> bool {
        u.accel.abs() <= self.accel_max + tol && u.steer_rate.abs() <= self.steer_rate_max + tol
    }
}

/// Per-component half-widths of the terminal box around the horizon state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalBox(pub [f64; 5]);

impl Default for TerminalBox {
    fn default() -> Self {
        TerminalBox([0.1, 0.1, 0.1, 0.25, 100.0])
    }
}

/// Continuous-time bicycle model: `[v cos th, v sin th, u0, v tan(delta) / L, u1]`.
pub fn dynamics(x: &StateVec, u: &InputVec, p: &VehicleParams) -> StateVec {
    let (v, th, d) = (x[2], x[3], x[4]);
    StateVec::new(
        v * th.cos(),
        v * th.sin(),
        u[0],
        v * d.tan() / p.wheelbase,
        u[1],
    )
}

/// One classical RK4 step with `u` held constant.
pub fn integrate_rk4(x: &StateVec, u: &InputVec, dt: f64, p: &VehicleParams) -> StateVec {
    let k1 = dynamics(x, u, p);
    let k2 = dynamics(&(x + k1 * (dt / 2.0)), u, p);
    let k3 = dynamics(&(x + k2 * (dt / 2.0)), u, p);
    let k4 = dynamics(&(x + k3 * dt), u, p);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// `N` knot states, `N - 1` inputs, and a uniform knot interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<RobotState>,
    pub inputs: Vec<ControlInput>,
    pub dt: f64,
}

impl Trajectory {
    pub fn knot_count(&self) -> usize {
        self.states.len()
    }

    pub fn duration(&self) -> f64 {
        self.inputs.len() as f64 * self.dt
    }

    /// Nominal state at time `t` from the start, integrating from the
    /// preceding knot under its held input. Clamped to `[0, duration]`.
    pub fn nominal_at(&self, t: f64, p: &VehicleParams) -> (usize, RobotState) {
        if self.inputs.is_empty() {
            return (0, self.states[0]);
        }
        let t = t.clamp(0.0, self.duration());
        let k = ((t / self.dt).floor() as usize).min(self.inputs.len() - 1);
        let tau = t - k as f64 * self.dt;
        if tau <= 0.0 {
            return (k, self.states[k]);
        }
        let x = integrate_rk4(&self.states[k].to_vec(), &self.inputs[k].to_vec(), tau, p);
        (k, RobotState::from_vec(&x))
    }

    /// Re-simulates from knot 0 with the stored inputs; returns the largest
    /// per-component deviation from the stored knots.
    pub fn rollout_defect(&self, p: &VehicleParams) -> f64 {
        let mut x = self.states[0].to_vec();
        let mut worst: f64 = 0.0;
        for (k, u) in self.inputs.iter().enumerate() {
            x = integrate_rk4(&x, &u.to_vec(), self.dt, p);
            worst = worst.max((x - self.states[k + 1].to_vec()).amax());
        }
        worst
    }

    /// `(k, t, x, y, v, theta, delta, u0, u1, dt)` rows; the final knot
    /// carries no input.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,t,x,y,v,theta,delta,u0,u1,dt\n");
        for (k, s) in self.states.iter().enumerate() {
            let (u0, u1) = self
                .inputs
                .get(k)
                .map_or((String::new(), String::new()), |u| {
                    (u.accel.to_string(), u.steer_rate.to_string())
                });
            let _ = writeln!(
                out,
                "{k},{},{},{},{},{},{},{u0},{u1},{}",
                k as f64 * self.dt,
                s.x,
                s.y,
                s.v,
                s.theta,
                s.delta,
                self.dt
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionConfig {
    pub knots: usize,
    /// Time budget of the whole trajectory, s; bounds `dt` by `horizon / (knots - 1)`.
    pub horizon: f64,
    pub dt_min: f64,
    /// Diagonal of the input weight matrix.
    pub input_weight: [f64; 2],
    pub obstacle_radius: f64,
    /// Extra clearance the solver aims for beyond `obstacle_radius`.
    pub obstacle_margin: f64,
    /// Points checked per interval in addition to the knots.
    pub interior_samples: usize,
    pub terminal_box: TerminalBox,
    pub limits: Limits,
    pub vehicle: VehicleParams,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Largest defect accepted by the solver (the certified bound is 1e-4).
    pub defect_tolerance: f64,
}

impl Default for TranscriptionConfig {
    fn default() -> Self {
        Self {
            knots: 10,
            horizon: 2.0,
            dt_min: 0.01,
            input_weight: [0.1, 0.1],
            obstacle_radius: 0.35,
            obstacle_margin: 0.01,
            interior_samples: 3,
            terminal_box: TerminalBox::default(),
            limits: Limits::default(),
            vehicle: VehicleParams::default(),
            max_outer_iterations: 14,
            max_inner_iterations: 40,
            defect_tolerance: 1e-7,
        }
    }
}

impl TranscriptionConfig {
    pub fn dt_max(&self) -> f64 {
        self.horizon / (self.knots - 1) as f64
    }
}

/// Certification threshold on rollout defects of returned trajectories.
pub const DEFECT_CERTIFICATE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajError {
    #[error("start state violates the state bounds")]
    InfeasibleStart,
    #[error("no feasible trajectory (defect {max_defect:.2e}, constraint violation {max_violation:.3e})")]
    Infeasible { max_defect: f64, max_violation: f64 },
    #[error("bad transcription config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterIteration {
    pub cost: f64,
    pub max_defect: f64,
    pub max_violation: f64,
    pub penalty: f64,
    /// Feasible and no worse than every earlier accepted iterate.
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveLog {
    pub outer: Vec<OuterIteration>,
    pub inner_iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub log: SolveLog,
}

/// `sum_k u_k' R u_k + dt` over the `N - 1` inputs.
pub fn objective(traj: &Trajectory, weight: &[f64; 2]) -> f64 {
    traj.inputs
        .iter()
        .map(|u| weight[0] * u.accel * u.accel + weight[1] * u.steer_rate * u.steer_rate)
        .sum::<f64>()
        + traj.dt
}

/// Sample points per interval used by both the solver and the checks:
/// fractions `j / (samples + 1)` of the interval, `j = 1..=samples`.
fn interior_point(
    x: &StateVec,
    u: &InputVec,
    dt: f64,
    frac: f64,
    p: &VehicleParams,
) -> Vector2<f64> {
    let s = integrate_rk4(x, u, dt * frac, p);
    Vector2::new(s[0], s[1])
}

/// True iff some point of `traj`, sampled at the knots and at 20 points per
/// interval, has clearance below `radius`.
pub fn check_collision(
    traj: &Trajectory,
    map: &PlanningMap,
    radius: f64,
    p: &VehicleParams,
) -> bool {
    check_collision_sampled(traj, map, radius, 20, p)
}

pub fn check_collision_sampled(
    traj: &Trajectory,
    map: &PlanningMap,
    radius: f64,
    per_interval: usize,
    p: &VehicleParams,
) -> bool {
    if traj
        .states
        .iter()
        .any(|s| !map.is_clear(&s.position(), radius))
    {
        return true;
    }
    for (k, u) in traj.inputs.iter().enumerate() {
        let x = traj.states[k].to_vec();
        for j in 1..per_interval {
            let q = interior_point(&x, &u.to_vec(), traj.dt, j as f64 / per_interval as f64, p);
            if !map.is_clear(&Point::new(q.x, q.y), radius) {
                return true;
            }
        }
    }
    false
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

struct Layout {
    m: usize,
}

impl Layout {
    fn n(&self) -> usize {
        7 * self.m + 1
    }
    fn state(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.m);
        5 * (k - 1)
    }
    fn input(&self, k: usize) -> usize {
        5 * self.m + 2 * k
    }
    fn dt(&self) -> usize {
        7 * self.m
    }
}

struct Problem<'a> {
    start: StateVec,
    map: &'a PlanningMap,
    cfg: &'a TranscriptionConfig,
    lay: Layout,
    lower: DVector<f64>,
    upper: DVector<f64>,
    /// Distance beyond which obstacle terms are inactive.
    cap: f64,
}

struct Eval {
    defects: DVector<f64>,
    /// `g_j = r - clearance <= 0` for every sample point.
    ineq: DVector<f64>,
    /// Gradient of each `g_j` with respect to `z`, as sparse (index, value) rows.
    ineq_grad: Vec<Vec<(usize, f64)>>,
    /// Defect Jacobian.
    defect_jac: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    fn state_at(&self, z: &DVector<f64>, k: usize) -> StateVec {
        if k == 0 {
            self.start
        } else {
            let i = self.lay.state(k);
            StateVec::from_iterator(z.rows(i, 5).iter().copied())
        }
    }

    fn input_at(&self, z: &DVector<f64>, k: usize) -> InputVec {
        let i = self.lay.input(k);
        InputVec::new(z[i], z[i + 1])
    }

    fn project(&self, z: &mut DVector<f64>) {
        for i in 0..z.len() {
            z[i] = z[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    fn radius(&self) -> f64 {
        self.cfg.obstacle_radius + self.cfg.obstacle_margin
    }

    /// Constraint values only (no derivatives).
    fn constraints(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.lay.m;
        let p = &self.cfg.vehicle;
        let dt = z[self.lay.dt()];
        let mut defects = DVector::zeros(5 * m);
        let samples = self.cfg.interior_samples;
        let mut ineq = DVector::zeros(m * (samples + 1));
        let mut j = 0;
        for k in 0..m {
            let xk = self.state_at(z, k);
            let uk = self.input_at(z, k);
            let next = self.state_at(z, k + 1);
            defects
                .rows_mut(5 * k, 5)
                .copy_from(&(next - integrate_rk4(&xk, &uk, dt, p)));
            for s in 1..=samples {
                let q = interior_point(&xk, &uk, dt, s as f64 / (samples + 1) as f64, p);
                ineq[j] = self.radius() - self.clearance(&Point::new(q.x, q.y)).0;
                j += 1;
            }
            ineq[j] = self.radius() - self.clearance(&Point::new(next[0], next[1])).0;
            j += 1;
        }
        (defects, ineq)
    }

    /// Clearance capped at `cap`, with its gradient in the plane.
    fn clearance(&self, q: &Point) -> (f64, Vector2<f64>) {
        match self.map.nearest_occupied_approx(q, self.cap) {
            Some((o, d)) if d > 1e-12 => (d, (q - o) / d),
            Some(_) => (0.0, Vector2::zeros()),
            None => (self.cap, Vector2::zeros()),
        }
    }

    fn evaluate(&self, z: &DVector<f64>) -> Eval {
        let m = self.lay.m;
        let n = self.lay.n();
        let p = &self.cfg.vehicle;
        let dt_i = self.lay.dt();
        let dt = z[dt_i];
        let samples = self.cfg.interior_samples;
        let mut defects = DVector::zeros(5 * m);
        let mut defect_jac = DMatrix::zeros(5 * m, n);
        let mut ineq = DVector::zeros(m * (samples + 1));
        let mut ineq_grad = Vec::with_capacity(m * (samples + 1));
        let h = 1e-6;
        for k in 0..m {
            let xk = self.state_at(z, k);
            let uk = self.input_at(z, k);
            let next = self.state_at(z, k + 1);
            let f0 = integrate_rk4(&xk, &uk, dt, p);
            defects.rows_mut(5 * k, 5).copy_from(&(next - f0));
            // Columns of the step map: x_k (if free), u_k, dt.
            let mut cols: Vec<(usize, StateVec)> = Vec::with_capacity(8);
            if k >= 1 {
                for c in 0..5 {
                    let mut e = StateVec::zeros();
                    e[c] = h;
                    let d = (integrate_rk4(&(xk + e), &uk, dt, p)
                        - integrate_rk4(&(xk - e), &uk, dt, p))
                        / (2.0 * h);
                    cols.push((self.lay.state(k) + c, d));
                }
            }
            for c in 0..2 {
                let mut e = InputVec::zeros();
                e[c] = h;
                let d = (integrate_rk4(&xk, &(uk + e), dt, p)
                    - integrate_rk4(&xk, &(uk - e), dt, p))
                    / (2.0 * h);
                cols.push((self.lay.input(k) + c, d));
            }
            let d = (integrate_rk4(&xk, &uk, dt + h, p) - integrate_rk4(&xk, &uk, dt - h, p))
                / (2.0 * h);
            cols.push((dt_i, d));
            for (col, d) in &cols {
                for r in 0..5 {
                    defect_jac[(5 * k + r, *col)] -= d[r];
                }
            }
            let ns = self.lay.state(k + 1);
            for r in 0..5 {
                defect_jac[(5 * k + r, ns + r)] += 1.0;
            }

            for s in 1..=samples {
                let frac = s as f64 / (samples + 1) as f64;
                let q = interior_point(&xk, &uk, dt, frac, p);
                let (c, n_hat) = self.clearance(&Point::new(q.x, q.y));
                ineq_grad.push(Vec::new());
                let j = ineq_grad.len() - 1;
                ineq[j] = self.radius() - c;
                if n_hat != Vector2::zeros() {
                    let mut row = Vec::with_capacity(8);
                    let mut fd = |col: usize, plus: Vector2<f64>, minus: Vector2<f64>| {
                        let g = -n_hat.dot(&((plus - minus) / (2.0 * h)));
                        if g != 0.0 {
                            row.push((col, g));
                        }
                    };
                    if k >= 1 {
                        for cc in 0..5 {
                            let mut e = StateVec::zeros();
                            e[cc] = h;
                            fd(
                                self.lay.state(k) + cc,
                                interior_point(&(xk + e), &uk, dt, frac, p),
                                interior_point(&(xk - e), &uk, dt, frac, p),
                            );
                        }
                    }
                    for cc in 0..2 {
                        let mut e = InputVec::zeros();
                        e[cc] = h;
                        fd(
                            self.lay.input(k) + cc,
                            interior_point(&xk, &(uk + e), dt, frac, p),
                            interior_point(&xk, &(uk - e), dt, frac, p),
                        );
                    }
                    fd(
                        dt_i,
                        interior_point(&xk, &uk, dt + h, frac, p),
                        interior_point(&xk, &uk, dt - h, frac, p),
                    );
                    ineq_grad[j] = row;
                }
            }
            let (c, n_hat) = self.clearance(&Point::new(next[0], next[1]));
            ineq_grad.push(Vec::new());
            let j = ineq_grad.len() - 1;
            ineq[j] = self.radius() - c;
            if n_hat != Vector2::zeros() {
                ineq_grad[j] = vec![(ns, -n_hat.x), (ns + 1, -n_hat.y)];
            }
        }
        Eval {
            defects,
            ineq,
            ineq_grad,
            defect_jac,
        }
    }

    fn cost(&self, z: &DVector<f64>) -> f64 {
        let w = self.cfg.input_weight;
        (0..self.lay.m)
            .map(|k| {
                let u = self.input_at(z, k);
                w[0] * u[0] * u[0] + w[1] * u[1] * u[1]
            })
            .sum::<f64>()
            + z[self.lay.dt()]
    }

    fn merit(&self, z: &DVector<f64>, lam: &DVector<f64>, mu: &DVector<f64>, rho: f64) -> f64 {
        let (c, g) = self.constraints(z);
        let mut phi = self.cost(z);
        for i in 0..c.len() {
            let s = c[i] + lam[i] / rho;
            phi += 0.5 * rho * s * s;
        }
        for j in 0..g.len() {
            let s = (g[j] + mu[j] / rho).max(0.0);
            phi += 0.5 * rho * s * s;
        }
        phi
    }

    fn to_trajectory(&self, z: &DVector<f64>) -> Trajectory {
        let m = self.lay.m;
        Trajectory {
            states: (0..=m)
                .map(|k| RobotState::from_vec(&self.state_at(z, k)))
                .collect(),
            inputs: (0..m)
                .map(|k| ControlInput::from_vec(&self.input_at(z, k)))
                .collect(),
            dt: z[self.lay.dt()],
        }
    }
}

/// Solves the transcription problem from `start` to the box around `target`.
///
/// Deterministic: the same inputs give bitwise-identical results.
pub fn solve_transcription(
    start: &RobotState,
    target: &RobotState,
    map: &PlanningMap,
    cfg: &TranscriptionConfig,
) -> Result<Solution, TrajError> {
    solve_transcription_from(start, target, map, cfg, None)
}

/// As [`solve_transcription`], optionally warm-started from `guess`: one
/// state per knot (the first is ignored) at the uniform interval `dt`. Inputs
/// start at the finite differences of `v` and `delta`.
pub fn solve_transcription_from(
    start: &RobotState,
    target: &RobotState,
    map: &PlanningMap,
    cfg: &TranscriptionConfig,
    guess: Option<(&[RobotState], f64)>,
) -> Result<Solution, TrajError> {
    if cfg.knots < 2 {
        return Err(TrajError::Config("need at least two knots".into()));
    }
    if !(cfg.dt_min > 0.0 && cfg.dt_min <= cfg.dt_max()) {
        return Err(TrajError::Config(format!(
            "dt range [{}, {}]",
            cfg.dt_min,
            cfg.dt_max()
        )));
    }
    let lim = &cfg.limits;
    if !lim.state_ok(start, 1e-9) {
        return Err(TrajError::InfeasibleStart);
    }
    let m = cfg.knots - 1;
    let lay = Layout { m };
    let n = lay.n();
    let mut target = *target;
    target.theta = start.theta + wrap_angle(target.theta - start.theta);
    let tb = cfg.terminal_box.0;

    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for k in 1..=m {
        let i = lay.state(k);
        lower[i + 2] = lim.v_min;
        upper[i + 2] = lim.v_max;
        lower[i + 4] = -lim.delta_max;
        upper[i + 4] = lim.delta_max;
    }
    let t = target.to_vec();
    let ti = lay.state(m);
    for c in 0..5 {
        lower[ti + c] = lower[ti + c].max(t[c] - tb[c]);
        upper[ti + c] = upper[ti + c].min(t[c] + tb[c]);
    }
    for k in 0..m {
        let i = lay.input(k);
        lower[i] = -lim.accel_max;
        upper[i] = lim.accel_max;
        lower[i + 1] = -lim.steer_rate_max;
        upper[i + 1] = lim.steer_rate_max;
    }
    lower[lay.dt()] = cfg.dt_min;
    upper[lay.dt()] = cfg.dt_max();
    let infeasible = |viol: f64| TrajError::Infeasible {
        max_defect: f64::INFINITY,
        max_violation: viol,
    };
    if (0..n).any(|i| lower[i] > upper[i]) {
        return Err(infeasible(f64::INFINITY));
    }
    let radius = cfg.obstacle_radius + cfg.obstacle_margin;
    let problem = Problem {
        start: start.to_vec(),
        map,
        cfg,
        lay,
        lower,
        upper,
        cap: radius + 0.5,
    };
    // The terminal box must leave room for the obstacle radius.
    if !map.is_clear(&target.position(), cfg.obstacle_radius) {
        let viol = map
            .nearest_occupied(&target.position(), cfg.obstacle_radius)
            .map_or(0.0, |(_, d)| cfg.obstacle_radius - d);
        if !box_has_clear_point(map, &target, &tb, cfg.obstacle_radius) {
            return Err(infeasible(viol));
        }
    }

    // Warm start: straight-line interpolation, linear v ramp, zero input.
    let mut z = DVector::zeros(n);
    let s0 = start.to_vec();
    for k in 1..=m {
        let a = k as f64 / m as f64;
        let mut x = s0 + (t - s0) * a;
        x[4] = 0.0;
        z.rows_mut(problem.lay.state(k), 5).copy_from(&x);
    }
    z[problem.lay.dt()] = cfg.dt_max();
    if let Some((g, dt)) = guess.filter(|(g, dt)| g.len() == cfg.knots && *dt > 0.0) {
        let mut prev = start.to_vec();
        #[allow(clippy::needless_range_loop)]
        for k in 1..=m {
            let mut x = g[k].to_vec();
            x[3] = prev[3] + wrap_angle(x[3] - prev[3]);
            z.rows_mut(problem.lay.state(k), 5).copy_from(&x);
            let i = problem.lay.input(k - 1);
            z[i] = (x[2] - prev[2]) / dt;
            z[i + 1] = (x[4] - prev[4]) / dt;
            prev = x;
        }
        z[problem.lay.dt()] = dt;
    }
    problem.project(&mut z);

    let (c0, g0) = problem.constraints(&z);
    let mut lam = DVector::zeros(c0.len());
    let mut mu = DVector::zeros(g0.len());
    let mut rho = 10.0;
    let mut log = SolveLog::default();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut prev_viol = f64::INFINITY;

    for _outer in 0..cfg.max_outer_iterations {
        log.inner_iterations +=
            inner_solve(&problem, &mut z, &lam, &mu, rho, cfg.max_inner_iterations);
        let (c, g) = problem.constraints(&z);
        let max_defect = c.amax();
        let max_violation = g.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)).max(0.0);
        let cost = problem.cost(&z);
        let feasible = max_defect <= cfg.defect_tolerance && max_violation <= 1e-9;
        let accepted = feasible && best.as_ref().is_none_or(|(bc, _)| cost <= *bc);
        log.outer.push(OuterIteration {
            cost,
            max_defect,
            max_violation,
            penalty: rho,
            accepted,
        });
        if accepted {
            best = Some((cost, z.clone()));
        }
        if feasible {
            break;
        }
        lam += &c * rho;
        for j in 0..mu.len() {
            mu[j] = (mu[j] + rho * g[j]).max(0.0);
        }
        let viol = max_defect.max(max_violation);
        if viol > 0.25 * prev_viol {
            rho = (rho * 10.0).min(1e9);
        }
        prev_viol = viol;
    }

    let Some((cost, z)) = best else {
        let last = log.outer.last();
        return Err(TrajError::Infeasible {
            max_defect: last.map_or(f64::INFINITY, |o| o.max_defect),
            max_violation: last.map_or(f64::INFINITY, |o| o.max_violation),
        });
    };
    let trajectory = problem.to_trajectory(&z);
    certify(&trajectory, &target, map, cfg)?;
    Ok(Solution {
        trajectory,
        cost,
        log,
    })
}

fn box_has_clear_point(map: &PlanningMap, target: &RobotState, tb: &[f64; 5], r: f64) -> bool {
    let steps = 4;
    for i in 0..=steps {
        for j in 0..=steps {
            let q = Point::new(
                target.x - tb[0] + 2.0 * tb[0] * i as f64 / steps as f64,
                target.y - tb[1] + 2.0 * tb[1] * j as f64 / steps as f64,
            );
            if map.is_clear(&q, r) {
                return true;
            }
        }
    }
    false
}

/// Independent a-posteriori checks on a solver output.
fn certify(
    traj: &Trajectory,
    target: &RobotState,
    map: &PlanningMap,
    cfg: &TranscriptionConfig,
) -> Result<(), TrajError> {
    let p = &cfg.vehicle;
    let defect = traj.rollout_defect(p);
    let lim = &cfg.limits;
    let fail = |v: f64| {
        Err(TrajError::Infeasible {
            max_defect: defect,
            max_violation: v,
        })
    };
    if defect > DEFECT_CERTIFICATE {
        return fail(0.0);
    }
    if !traj.states[1..].iter().all(|s| lim.state_ok(s, 1e-8))
        || !traj.inputs.iter().all(|u| lim.input_ok(u, 1e-8))
    {
        return fail(f64::INFINITY);
    }
    let last = traj.states.last().expect("at least two knots").to_vec();
    let miss = last - target.to_vec();
    if (0..5).any(|c| miss[c].abs() > cfg.terminal_box.0[c] + 1e-8) {
        return fail(f64::INFINITY);
    }
    if check_collision_sampled(traj, map, cfg.obstacle_radius, cfg.interior_samples + 1, p) {
        return fail(f64::INFINITY);
    }
    Ok(())
}

/// Projected Gauss-Newton on the augmented Lagrangian; returns iterations used.
fn inner_solve(
    pb: &Problem<'_>,
    z: &mut DVector<f64>,
    lam: &DVector<f64>,
    mu: &DVector<f64>,
    rho: f64,
    max_iter: usize,
) -> usize {
    let n = pb.lay.n();
    let m = pb.lay.m;
    let w = pb.cfg.input_weight;
    let mut damping = 1e-6;
    let mut phi = pb.merit(z, lam, mu, rho);
    for it in 0..max_iter {
        let ev = pb.evaluate(z);
        // Gradient and Gauss-Newton Hessian of the merit.
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for k in 0..m {
            let i = pb.lay.input(k);
            for c in 0..2 {
                grad[i + c] += 2.0 * w[c] * z[i + c];
                hess[(i + c, i + c)] += 2.0 * w[c];
            }
        }
        grad[pb.lay.dt()] += 1.0;
        let shifted = &ev.defects + lam / rho;
        grad += ev.defect_jac.tr_mul(&shifted) * rho;
        hess += ev.defect_jac.tr_mul(&ev.defect_jac) * rho;
        for (j, row) in ev.ineq_grad.iter().enumerate() {
            let s = ev.ineq[j] + mu[j] / rho;
            if s <= 0.0 {
                continue;
            }
            for &(a, ga) in row {
                grad[a] += rho * s * ga;
                for &(b, gb) in row {
                    hess[(a, b)] += rho * ga * gb;
                }
            }
        }
        // Variables pinned at a bound with the gradient pushing outward.
        let eps = 1e-12;
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = z[i] <= pb.lower[i] + eps && grad[i] > 0.0;
                let at_hi = z[i] >= pb.upper[i] - eps && grad[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let pg = {
            let mut t = z.clone() - &grad;
            pb.project(&mut t);
            (t - &*z).amax()
        };
        if pg < 1e-10 {
            return it;
        }
        let nf = free.len();
        let mut improved = false;
        for _attempt in 0..8 {
            let mut dir = DVector::zeros(n);
            if nf > 0 {
                let mut hf = DMatrix::zeros(nf, nf);
                let mut gf = DVector::zeros(nf);
                for (a, &ia) in free.iter().enumerate() {
                    gf[a] = grad[ia];
                    for (b, &ib) in free.iter().enumerate() {
                        hf[(a, b)] = hess[(ia, ib)];
                    }
                    hf[(a, a)] += damping * (1.0 + hess[(ia, ia)]);
                }
                let step = match hf.cholesky() {
                    Some(ch) => ch.solve(&(-gf)),
                    None => {
                        damping *= 10.0;
                        continue;
                    }
                };
                for (a, &ia) in free.iter().enumerate() {
                    dir[ia] = step[a];
                }
            }
            let mut alpha = 1.0;
            for _ls in 0..20 {
                let mut cand = &*z + &dir * alpha;
                pb.project(&mut cand);
                let phi_c = pb.merit(&cand, lam, mu, rho);
                let decrease = grad.dot(&(&cand - &*z));
                if phi_c <= phi + 1e-4 * decrease.min(0.0) && phi_c < phi {
                    *z = cand;
                    phi = phi_c;
                    improved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if improved {
                damping = (damping * 0.3).max(1e-9);
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            return it + 1;
        }
    }
    max_iter
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::{Cell, OccupancyGrid};

    fn p() -> VehicleParams {
        VehicleParams::default()
    }

    fn free_map() -> PlanningMap {
        PlanningMap::from_observed(
            OccupancyGrid::new(200, 200, 0.05, Point::new(-2.0, -5.0), Cell::Free).unwrap(),
        )
    }

    #[test]
    fn dynamics_cases() {
        let f = dynamics(
            &StateVec::new(0.0, 0.0, 1.0, 0.0, 0.0),
            &InputVec::zeros(),
            &p(),
        );
        assert_eq!(f, StateVec::new(1.0, 0.0, 0.0, 0.0, 0.0));
        let f = dynamics(
            &StateVec::new(0.0, 0.0, 2.0, std::f64::consts::FRAC_PI_2, 0.0),
            &InputVec::zeros(),
            &p(),
        );
        assert!(f[0].abs() < 1e-15 && (f[1] - 2.0).abs() < 1e-15);
        let f = dynamics(
            &StateVec::new(0.0, 0.0, 1.0, 0.0, 0.1),
            &InputVec::zeros(),
            &p(),
        );
        assert!((f[3] - 0.30405).abs() < 1e-4);
        assert_eq!(f[3], 0.1f64.tan() / 0.33);
    }

    #[test]
    fn rk4_constant_velocity() {
        let x = integrate_rk4(
            &StateVec::new(0.0, 0.0, 1.0, 0.0, 0.0),
            &InputVec::zeros(),
            1.0,
            &p(),
        );
        assert_eq!(x, StateVec::new(1.0, 0.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn rk4_error_order() {
        // One-step error against the closed-form circle with fixed delta.
        let delta: f64 = 0.2;
        let radius = 0.33 / delta.tan();
        let exact = |t: f64| {
            let a = t / radius;
            Vector2::new(radius * a.sin(), radius * (1.0 - a.cos()))
        };
        let err = |h: f64| {
            let x = integrate_rk4(
                &StateVec::new(0.0, 0.0, 1.0, 0.0, delta),
                &InputVec::zeros(),
                h,
                &p(),
            );
            (Vector2::new(x[0], x[1]) - exact(h)).norm()
        };
        // Local error is O(h^5): halving gives about 32x, far beyond the
        // 16x global-order check.
        let ratio = err(0.2) / err(0.1);
        assert!(ratio > 16.0, "ratio {ratio}");
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert!((wrap_angle(2.0 * PI - 0.1) + 0.1).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn straight_solve_is_certified() {
        let start = RobotState::new(0.0, 0.0, 0.5, 0.0, 0.0);
        let target = RobotState::new(4.0, 0.0, 3.0, 0.0, 0.0);
        let cfg = TranscriptionConfig::default();
        let sol = solve_transcription(&start, &target, &free_map(), &cfg).unwrap();
        let tr = &sol.trajectory;
        assert_eq!(tr.knot_count(), 10);
        assert!(tr.rollout_defect(&cfg.vehicle) <= 1e-4);
        let end = tr.states.last().unwrap();
        assert!((end.x - 4.0).abs() <= 0.1 + 1e-9 && end.y.abs() <= 0.1 + 1e-9);
        assert!(tr.dt >= 0.01 && tr.dt <= 2.0 / 9.0 + 1e-12);
        let again = solve_transcription(&start, &target, &free_map(), &cfg).unwrap();
        assert_eq!(sol, again);
        let accepted: Vec<f64> = sol
            .log
            .outer
            .iter()
            .filter(|o| o.accepted)
            .map(|o| o.cost)
            .collect();
        assert!(!accepted.is_empty());
        assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn horizon_inside_obstacle_is_infeasible() {
        let mut g = OccupancyGrid::new(200, 200, 0.05, Point::new(-2.0, -5.0), Cell::Free).unwrap();
        for r in 90..110 {
            for c in 110..130 {
                g.set(c, r, Cell::Occupied);
            }
        }
        let map = PlanningMap::from_observed(g);
        let start = RobotState::new(0.0, 0.0, 0.5, 0.0, 0.0);
        let target = RobotState::new(4.0, 0.0, 2.0, 0.0, 0.0);
        assert!(matches!(
            solve_transcription(&start, &target, &map, &TranscriptionConfig::default()),
            Err(TrajError::Infeasible { .. })
        ));
    }

    #[test]
    fn bad_start_is_rejected() {
        let start = RobotState::new(0.0, 0.0, 0.1, 0.0, 0.0);
        let target = RobotState::new(4.0, 0.0, 2.0, 0.0, 0.0);
        assert_eq!(
            solve_transcription(
                &start,
                &target,
                &free_map(),
                &TranscriptionConfig::default()
            ),
            Err(TrajError::InfeasibleStart)
        );
    }

    #[test]
    fn collision_check_cases() {
        let tr = Trajectory {
            states: vec![
                RobotState::new(0.0, 0.0, 1.0, 0.0, 0.0),
                RobotState::new(1.0, 0.0, 1.0, 0.0, 0.0),
            ],
            inputs: vec![ControlInput::default()],
            dt: 1.0,
        };
        assert!(!check_collision(&tr, &free_map(), 0.35, &p()));
        // Thin wall at x = 0.5 crossed only between the knots.
        let mut g = OccupancyGrid::new(200, 200, 0.05, Point::new(-2.0, -5.0), Cell::Free).unwrap();
        for r in 0..200 {
            g.set(50, r, Cell::Occupied);
        }
        let map = PlanningMap::from_observed(g);
        assert!(check_collision(&tr, &map, 0.1, &p()));
        let on = Trajectory {
            states: vec![RobotState::new(0.52, 0.0, 1.0, 0.0, 0.0)],
            inputs: vec![],
            dt: 0.1,
        };
        assert!(check_collision(&on, &map, 0.03, &p()));
    }

    #[test]
    fn csv_has_one_row_per_knot() {
        let tr = Trajectory {
            states: vec![RobotState::default(); 3],
            inputs: vec![ControlInput::new(1.0, -0.5); 2],
            dt: 0.2,
        };
        let csv = tr.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("1,0.2,"));
        assert!(csv.lines().nth(3).unwrap().ends_with(",,,0.2"));
    }
}
