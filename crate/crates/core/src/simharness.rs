//! Closed-loop simulation: procedural corridor worlds, the fixed-rate
//! episode loop, experiment suites, plots and training-pair collection.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::{fuse, Cell, OccupancyGrid, PlanningMap, Point, DEFAULT_RESOLUTION};
use crate::planner::{
    prune, push_corners, rrt_plan, smooth_g2cbs_checked, time_parameterize, velocity_profile,
    AccelLimitedSpeed, PathPolyline, PlannerConfig,
};
use crate::predictor::{
    load_weights, postprocess, BaselinePredictor, NetworkPredictor, PredictError, Predictor,
    PredictorInput, INPUT_CELLS, OUTPUT_CELLS,
};
use crate::sensorsim::{
    gradient_filter, integrate_scan_in_place, render_depth, render_depth_noisy, Bounds,
    Environment, EnvironmentError, Segment, SensorConfig, DEFAULT_FREE_FRACTION,
};
use crate::trajopt::{
    integrate_rk4, solve_transcription_from, wrap_angle, ControlInput, RobotState,
    TranscriptionConfig,
};
use crate::tvlqr::{CostMatrices, GainSchedule};

pub const SCENARIO_SCHEMA: &str = "occnav.scenario/1";
pub const SUITE_SCHEMA: &str = "occnav.suite/1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Weights(#[from] PredictError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Corridor worlds
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorridorKind {
    Straight,
    L,
    T,
}

/// Axis-aligned rectangle `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            min: Point::new(x0.min(x1), y0.min(y1)),
            max: Point::new(x0.max(x1), y0.max(y1)),
        }
    }

    fn contains(&self, p: &Point) -> bool {
        p.x > self.min.x && p.x < self.max.x && p.y > self.min.y && p.y < self.max.y
    }
}

/// Boundary of a union of rectangles as maximal wall segments.
pub fn union_walls(rects: &[Rect]) -> Vec<Segment> {
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r.min.x, r.max.x]).collect();
    let mut ys: Vec<f64> = rects.iter().flat_map(|r| [r.min.y, r.max.y]).collect();
    for v in [&mut xs, &mut ys] {
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup();
    }
    let (nx, ny) = (xs.len().saturating_sub(1), ys.len().saturating_sub(1));
    let inside = |i: i64, j: i64| -> bool {
        if i < 0 || j < 0 || i >= nx as i64 || j >= ny as i64 {
            return false;
        }
        let c = Point::new(
            (xs[i as usize] + xs[i as usize + 1]) / 2.0,
            (ys[j as usize] + ys[j as usize + 1]) / 2.0,
        );
        rects.iter().any(|r| r.contains(&c))
    };
    let mut walls = Vec::new();
    for i in 0..=nx as i64 {
        let mut run: Option<usize> = None;
        for j in 0..=ny {
            let edge = j < ny && inside(i - 1, j as i64) != inside(i, j as i64);
            match (edge, run) {
                (true, None) => run = Some(j),
                (false, Some(s)) => {
                    let x = xs[i as usize];
                    walls.push(Segment::new(x, ys[s], x, ys[j]));
                    run = None;
                }
                _ => {}
            }
        }
    }
    for j in 0..=ny as i64 {
        let mut run: Option<usize> = None;
        for i in 0..=nx {
            let edge = i < nx && inside(i as i64, j - 1) != inside(i as i64, j);
            match (edge, run) {
                (true, None) => run = Some(i),
                (false, Some(s)) => {
                    let y = ys[j as usize];
                    walls.push(Segment::new(xs[s], y, xs[i], y));
                    run = None;
                }
                _ => {}
            }
        }
    }
    walls
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorridorWorld {
    pub kind: CorridorKind,
    pub env: Environment,
    pub start: RobotState,
    pub goal: Point,
}

/// Corridor widths are drawn from this range, m.
pub const CORRIDOR_WIDTHS: (f64, f64) = (1.5, 2.5);

/// Procedural corridor world. The robot starts near the west end of an
/// eastbound corridor; L and T worlds turn north or south into a second
/// corridor holding the goal.
pub fn corridor_world(seed: u64, kind: Option<CorridorKind>) -> CorridorWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kind.unwrap_or(match rng.random_range(0..3) {
        0 => CorridorKind::Straight,
        1 => CorridorKind::L,
        _ => CorridorKind::T,
    });
    let w1 = rng.random_range(CORRIDOR_WIDTHS.0..=CORRIDOR_WIDTHS.1);
    let w2 = rng.random_range(CORRIDOR_WIDTHS.0..=CORRIDOR_WIDTHS.1);
    let a_len = rng.random_range(9.0..13.0);
    let b_len = rng.random_range(7.0..10.0);
    let turn = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let h1 = w1 / 2.0;
    let start = RobotState::new(1.0, 0.0, 0.5, 0.0, 0.0);
    let (rects, goal) = match kind {
        CorridorKind::Straight => {
            let len = a_len + b_len;
            (
                vec![Rect::new(0.0, -h1, len, h1)],
                Point::new(len - 1.0, 0.0),
            )
        }
        CorridorKind::L => {
            let x0 = a_len - w2;
            (
                vec![
                    Rect::new(0.0, -h1, a_len, h1),
                    Rect::new(x0, -h1 * turn, a_len, turn * (h1 + b_len)),
                ],
                Point::new(a_len - w2 / 2.0, turn * (h1 + b_len - 1.0)),
            )
        }
        CorridorKind::T => {
            let x0 = a_len - w2;
            (
                vec![
                    Rect::new(0.0, -h1, a_len, h1),
                    Rect::new(x0, -(h1 + b_len), a_len, h1 + b_len),
                ],
                Point::new(a_len - w2 / 2.0, turn * (h1 + b_len - 1.0)),
            )
        }
    };
    let walls = union_walls(&rects);
    let (mut lo, mut hi) = (
        Point::new(f64::MAX, f64::MAX),
        Point::new(f64::MIN, f64::MIN),
    );
    for r in &rects {
        lo = lo.inf(&r.min);
        hi = hi.sup(&r.max);
    }
    let margin = Vector2::repeat(0.5);
    let env = Environment::new(
        walls,
        Bounds {
            min: lo - margin,
            max: hi + margin,
        },
    )
    .expect("generated world is valid");
    CorridorWorld {
        kind,
        env,
        start,
        goal,
    }
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PredictionMode {
    None,
    Baseline,
    Learned { weights: PathBuf },
}

impl PredictionMode {
    pub fn label(&self) -> &'static str {
        match self {
            PredictionMode::None => "none",
            PredictionMode::Baseline => "baseline",
            PredictionMode::Learned { .. } => "learned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum EnvironmentSource {
    File {
        path: PathBuf,
    },
    Corridor {
        seed: u64,
        kind: Option<CorridorKind>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub tick_hz: u32,
    pub map_hz: u32,
    pub plan_hz: u32,
    pub control_hz: u32,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            tick_hz: 600,
            map_hz: 3,
            plan_hz: 5,
            control_hz: 50,
        }
    }
}

impl Rates {
    /// Ticks between map, plan and control updates.
    pub fn periods(&self) -> Result<(u64, u64, u64), ScenarioError> {
        let per = |hz: u32, what: &str| {
            if hz == 0 || !self.tick_hz.is_multiple_of(hz) {
                Err(ScenarioError::Invalid(format!(
                    "{what} rate {hz} Hz does not divide {} Hz",
                    self.tick_hz
                )))
            } else {
                Ok((self.tick_hz / hz) as u64)
            }
        };
        Ok((
            per(self.map_hz, "map")?,
            per(self.plan_hz, "plan")?,
            per(self.control_hz, "control")?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    #[serde(default = "default_start_speed")]
    pub v: f64,
}

fn default_start_speed() -> f64 {
    0.5
}

fn default_timeout() -> f64 {
    60.0
}

fn default_body_radius() -> f64 {
    0.2
}

fn default_goal_tolerance() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema: String,
    pub name: String,
    pub environment: EnvironmentSource,
    /// Defaults to the generated start for corridor worlds.
    #[serde(default)]
    pub start: Option<StartPose>,
    #[serde(default)]
    pub goal: Option<[f64; 2]>,
    pub v_max: f64,
    pub prediction: PredictionMode,
    pub seed: u64,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default)]
    pub sensor_noise: f64,
    #[serde(default = "default_body_radius")]
    pub body_radius: f64,
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
}

impl ScenarioConfig {
    pub fn corridor(
        name: &str,
        world_seed: u64,
        v_max: f64,
        prediction: PredictionMode,
        seed: u64,
    ) -> Self {
        Self {
            schema: SCENARIO_SCHEMA.into(),
            name: name.into(),
            environment: EnvironmentSource::Corridor {
                seed: world_seed,
                kind: None,
            },
            start: None,
            goal: None,
            v_max,
            prediction,
            seed,
            rates: Rates::default(),
            timeout: default_timeout(),
            sensor_noise: 0.0,
            body_radius: default_body_radius(),
            goal_tolerance: default_goal_tolerance(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let sc: Self = serde_json::from_str(text)?;
        if sc.schema != SCENARIO_SCHEMA {
            return Err(ScenarioError::Invalid(format!(
                "unknown schema {:?}",
                sc.schema
            )));
        }
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Environment, start state and goal after defaults and validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn resolve(
        &self,
        base_dir: Option<&Path>,
    ) -> Result<(Environment, RobotState, Point), ScenarioError> {
        let (env, start, goal) = match &self.environment {
            EnvironmentSource::File { path } => {
                let p = base_dir.map_or(path.clone(), |d| d.join(path));
                let env = Environment::from_json(&std::fs::read_to_string(p)?)?;
                let start = self
                    .start
                    .ok_or_else(|| ScenarioError::Invalid("file scenarios need a start".into()))?;
                let goal = self
                    .goal
                    .ok_or_else(|| ScenarioError::Invalid("file scenarios need a goal".into()))?;
                (
                    env,
                    RobotState::new(start.x, start.y, start.v, start.theta, 0.0),
                    Point::new(goal[0], goal[1]),
                )
            }
            EnvironmentSource::Corridor { seed, kind } => {
                let w = corridor_world(*seed, *kind);
                let start = self
                    .start
                    .map_or(w.start, |s| RobotState::new(s.x, s.y, s.v, s.theta, 0.0));
                let goal = self.goal.map_or(w.goal, |g| Point::new(g[0], g[1]));
                (w.env, start, goal)
            }
        };
        let invalid = |m: &str| Err(ScenarioError::Invalid(m.into()));
        self.rates.periods()?;
        if !(self.v_max > 0.5 && self.v_max.is_finite()) {
            return invalid("v_max must exceed the 0.5 m/s minimum speed");
        }
        if !(self.timeout > 0.0) || !(self.sensor_noise >= 0.0) || !(self.body_radius > 0.0) {
            return invalid("timeout, noise and body radius must be positive");
        }
        if !env.bounds.contains(&start.position()) || !env.bounds.contains(&goal) {
            return invalid("start and goal must lie inside the environment bounds");
        }
        if env.distance_to_walls(&start.position()) < self.body_radius {
            return invalid("start is inside a wall");
        }
        if !(0.5..=self.v_max).contains(&start.v) {
            return invalid("start speed outside [0.5, v_max]");
        }
        Ok((env, start, goal))
    }
}

// ---------------------------------------------------------------------------
// Episode loop
// ---------------------------------------------------------------------------

/// Tuning of the receding-horizon controller stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    pub planner: PlannerConfig,
    pub transcription: TranscriptionConfig,
    pub cost: CostMatrices<5, 2>,
    /// Smoothing deviation bound, m.
    pub max_deviation: f64,
    /// Largest outward move of a path corner before smoothing, m.
    pub corner_push: f64,
    /// Horizon scales tried in order when the transcription fails.
    pub horizon_backoff: Vec<f64>,
    /// Smallest obstacle radius used when the robot already sits closer.
    pub min_radius: f64,
    pub submap_side: f64,
    /// Clearance the previous schedule must keep in the current map to be
    /// reused when planning fails; otherwise the robot brakes.
    pub fallback_radius: f64,
    /// Pure-pursuit lookahead of the fallback path follower, m.
    pub lookahead: f64,
    /// Scans at evenly spaced headings taken at the start pose, so the
    /// robot knows its immediate surroundings before the first plan.
    pub initial_scans: usize,
    /// Share of the acceleration limit the speed profile may use.
    pub accel_fraction: f64,
}

impl ControllerConfig {
    pub fn new(v_max: f64, seed: u64) -> Self {
        let mut transcription = TranscriptionConfig::default();
        transcription.limits.v_max = v_max;
        Self {
            planner: PlannerConfig {
                max_time: None,
                v_max,
                seed,
                ..PlannerConfig::default()
            },
            transcription,
            cost: CostMatrices::default(),
            max_deviation: 0.6,
            corner_push: 0.6,
            horizon_backoff: vec![1.0, 0.75, 0.5, 0.3],
            min_radius: 0.2,
            submap_side: INPUT_CELLS as f64 * DEFAULT_RESOLUTION,
            accel_fraction: 0.8,
            initial_scans: 5,
            fallback_radius: 0.25,
            lookahead: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub success: bool,
    pub collision: bool,
    pub timeout: bool,
    pub time_to_goal: Option<f64>,
    pub peak_speed: f64,
    pub min_clearance: f64,
    pub replan_count: usize,
    pub distance_traveled: f64,
    pub failed_plans: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
    pub delta: f64,
    pub u0: f64,
    pub u1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub t: f64,
    /// Horizon point handed to the transcription (after any backoff).
    pub horizon: Option<[f64; 2]>,
    /// Whether the horizon point lies in Unknown space of the observed map.
    pub horizon_unknown: bool,
    pub horizon_scale: Option<f64>,
    pub solved: bool,
    pub note: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPose {
    pub tick: u64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scenario: String,
    pub mode: String,
    pub v_max: f64,
    pub seed: u64,
    pub goal: [f64; 2],
    /// `[min_x, min_y, max_x, max_y]` of the world.
    pub bounds: [f64; 4],
    /// Ground-truth walls as `[x1, y1, x2, y2]`.
    pub walls: Vec<[f64; 4]>,
    pub metrics: RunMetrics,
    pub samples: Vec<Sample>,
    pub plans: Vec<PlanRecord>,
    pub map_poses: Vec<MapPose>,
}

impl EpisodeLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// The ground-truth world the episode ran in.
    pub fn environment(&self) -> Result<Environment, EnvironmentError> {
        let [x0, y0, x1, y1] = self.bounds;
        let walls = self
            .walls
            .iter()
            .map(|w| Segment::new(w[0], w[1], w[2], w[3]))
            .collect();
        Environment::new(
            walls,
            Bounds {
                min: Point::new(x0, y0),
                max: Point::new(x1, y1),
            },
        )
    }

    /// Plan ticks whose horizon point lay in observed-Unknown space.
    pub fn unknown_horizon_count(&self) -> usize {
        self.plans.iter().filter(|p| p.horizon_unknown).count()
    }
}

fn scan_rng(seed: u64, scan: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ scan.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Global mapping state shared by the episode loop and dataset replay.
struct Mapper {
    sensor: SensorConfig,
    observed: OccupancyGrid,
    noise_seed: u64,
    scans: u64,
}

impl Mapper {
    fn new(env: &Environment, sensor: SensorConfig, noise_seed: u64) -> Self {
        Self {
            observed: env.blank_grid(DEFAULT_RESOLUTION),
            sensor,
            noise_seed,
            scans: 0,
        }
    }

    fn scan(&mut self, env: &Environment, pose: &RobotState) {
        let raw = if self.sensor.depth_noise_sigma > 0.0 {
            render_depth_noisy(
                env,
                pose,
                &self.sensor,
                &mut scan_rng(self.noise_seed, self.scans),
            )
        } else {
            render_depth(env, pose, &self.sensor)
        };
        self.scans += 1;
        let filtered = gradient_filter(&raw);
        // The pose is inside the bounds, which the blank grid covers.
        let _ = integrate_scan_in_place(&mut self.observed, pose, &filtered, DEFAULT_FREE_FRACTION);
    }
}

fn planning_map(
    observed: &OccupancyGrid,
    pose: &Point,
    predictor: Option<&dyn Predictor>,
    side: f64,
) -> Result<PlanningMap, ScenarioError> {
    let Some(pred) = predictor else {
        return Ok(PlanningMap::from_observed(observed.clone()));
    };
    let sub = observed.extract_submap(pose, side);
    let out = pred.predict(&PredictorInput::new(sub)?)?;
    let closed = postprocess(&out);
    fuse(observed, &closed).map_err(|e| ScenarioError::Invalid(e.to_string()))
}

/// The receding-horizon controller: plans on the 5 Hz tick, tracks on the
/// 50 Hz tick.
struct Navigator {
    cfg: ControllerConfig,
    goal: Point,
    prev_path: Option<PathPolyline>,
    schedule: Option<(f64, GainSchedule)>,
    /// Latest smoothed path sampled every 0.1 m, followed while no valid
    /// schedule exists.
    guide: Option<Vec<Point>>,
    plans: usize,
}

impl Navigator {
    fn plan(
        &mut self,
        t: f64,
        state: &RobotState,
        map: &PlanningMap,
        observed: &OccupancyGrid,
    ) -> PlanRecord {
        let mut rec = self.try_plan(t, state, map, observed);
        if rec.solved {
            return rec;
        }
        if let Some((t0, gs)) = &self.schedule {
            let span = gs.duration();
            let steps = (span / 0.05).ceil() as usize;
            let expired = t - t0 >= span;
            let unsafe_ahead = (0..=steps).any(|i| {
                let tau = (t - t0 + i as f64 * 0.05).min(span);
                let (_, x) = gs.nominal.nominal_at(tau, &gs.vehicle);
                !map.is_clear(&x.position(), self.cfg.fallback_radius)
            });
            if expired || unsafe_ahead {
                self.schedule = None;
            }
        }
        if let Some(g) = &self.guide {
            let i = nearest_index(g, &state.position());
            if !g[i..]
                .iter()
                .all(|p| map.is_clear(p, self.cfg.fallback_radius))
            {
                self.guide = None;
            }
        }
        if self.schedule.is_none() {
            rec.note.push_str(if self.guide.is_some() {
                "; crawling"
            } else {
                "; braking"
            });
        }
        rec
    }

    fn try_plan(
        &mut self,
        t: f64,
        state: &RobotState,
        map: &PlanningMap,
        observed: &OccupancyGrid,
    ) -> PlanRecord {
        self.plans += 1;
        let mut rec = PlanRecord {
            t,
            horizon: None,
            horizon_unknown: false,
            horizon_scale: None,
            solved: false,
            note: String::new(),
        };
        let pos = state.position();
        let clearance = map.clearance(&pos).unwrap_or(0.0);
        let mut pcfg = self.cfg.planner.clone();
        pcfg.seed = self
            .cfg
            .planner
            .seed
            .wrapping_mul(0x2545_F491_4F6C_DD1D)
            .wrapping_add(self.plans as u64);
        if clearance < pcfg.obstacle_radius {
            pcfg.obstacle_radius = (clearance - 0.01).max(self.cfg.min_radius);
        }
        let rrt = match rrt_plan(map, &pos, &self.goal, self.prev_path.as_ref(), &pcfg) {
            Ok(r) => r,
            Err(e) => {
                rec.note = e.to_string();
                return rec;
            }
        };
        self.prev_path = Some(rrt.path.clone());
        let pruned = prune(&rrt.path, map, pcfg.obstacle_radius);
        let pushed = push_corners(
            &pruned,
            map,
            pcfg.obstacle_radius,
            self.cfg.corner_push,
            0.05,
        );
        let smooth =
            smooth_g2cbs_checked(&pushed, self.cfg.max_deviation, map, pcfg.obstacle_radius);
        self.guide = Some(
            smooth
                .sample_arclengths(0.1)
                .into_iter()
                .map(|s| smooth.position(s))
                .collect(),
        );
        let lim = &self.cfg.transcription.limits;
        let profile = AccelLimitedSpeed::new(
            &smooth,
            velocity_profile(pcfg.v_max, pcfg.v_min),
            state.v,
            self.cfg.accel_fraction * lim.accel_max,
            0.05,
        );
        let timed = time_parameterize(&smooth, std::sync::Arc::new(profile));

        let start = RobotState {
            v: state.v.clamp(lim.v_min, lim.v_max),
            delta: state.delta.clamp(-lim.delta_max, lim.delta_max),
            ..*state
        };
        let mut tcfg = self.cfg.transcription.clone();
        if clearance < tcfg.obstacle_radius + tcfg.obstacle_margin {
            tcfg.obstacle_radius =
                (clearance - 2.0 * tcfg.obstacle_margin).max(self.cfg.min_radius);
        }
        let base_horizon = tcfg.horizon;
        for &scale in &self.cfg.horizon_backoff {
            let h = base_horizon * scale;
            let hp = timed.horizon_point(0.0, h);
            if rec.horizon.is_none() {
                rec.horizon = Some([hp.position.x, hp.position.y]);
                rec.horizon_unknown = observed.cell_at(&hp.position) == Some(Cell::Unknown);
            }
            let target = RobotState::new(hp.position.x, hp.position.y, hp.speed, hp.heading, 0.0);
            tcfg.horizon = h;
            let dt = tcfg.dt_max();
            let guess: Vec<RobotState> = (0..tcfg.knots)
                .map(|k| {
                    let s = timed.s_at(k as f64 * dt);
                    let p = timed.path.position(s);
                    let kappa = timed.path.curvature(s).unwrap_or(0.0);
                    let delta = (kappa * tcfg.vehicle.wheelbase)
                        .atan()
                        .clamp(-lim.delta_max, lim.delta_max);
                    RobotState::new(p.x, p.y, timed.speed_at(s), timed.path.heading(s), delta)
                })
                .collect();
            match solve_transcription_from(&start, &target, map, &tcfg, Some((&guess, dt))) {
                Ok(sol) => {
                    match GainSchedule::new(
                        sol.trajectory,
                        &self.cfg.cost,
                        tcfg.vehicle,
                        tcfg.limits,
                    ) {
                        Ok(gs) => {
                            self.schedule = Some((t, gs));
                            rec.horizon = Some([hp.position.x, hp.position.y]);
                            rec.horizon_unknown =
                                observed.cell_at(&hp.position) == Some(Cell::Unknown);
                            rec.horizon_scale = Some(scale);
                            rec.solved = true;
                        }
                        Err(e) => rec.note = e.to_string(),
                    }
                    return rec;
                }
                Err(e) => rec.note = e.to_string(),
            }
        }
        rec
    }

    fn control(&self, t: f64, state: &RobotState, dt_control: f64) -> ControlInput {
        if let Some((t0, gs)) = &self.schedule {
            return gs.apply_control(state, t - t0);
        }
        let lim = &self.cfg.transcription.limits;
        let (v_target, delta_target) = match &self.guide {
            Some(g) => {
                let pos = state.position();
                let i = nearest_index(g, &pos);
                let look = self.cfg.lookahead;
                let p = g[i..]
                    .iter()
                    .find(|p| (*p - pos).norm() >= look)
                    .unwrap_or(&g[g.len() - 1]);
                let d = p - pos;
                let alpha = wrap_angle(d.y.atan2(d.x) - state.theta);
                let kappa = 2.0 * alpha.sin() / d.norm().max(1e-6);
                (
                    lim.v_min,
                    (kappa * self.cfg.transcription.vehicle.wheelbase).atan(),
                )
            }
            None => (0.0, 0.0),
        };
        let delta_target = delta_target.clamp(-lim.delta_max, lim.delta_max);
        lim.clamp_input(ControlInput::new(
            (v_target - state.v) / dt_control,
            (delta_target - state.delta) / dt_control,
        ))
    }
}

fn nearest_index(points: &[Point], p: &Point) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, q) in points.iter().enumerate() {
        let d = (q - p).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Runs one episode of `sc`; relative environment paths resolve against
/// `base_dir`.
pub fn run_episode(sc: &ScenarioConfig) -> Result<EpisodeLog, ScenarioError> {
    run_episode_from(sc, None)
}

pub fn run_episode_from(
    sc: &ScenarioConfig,
    base_dir: Option<&Path>,
) -> Result<EpisodeLog, ScenarioError> {
    let (env, start, goal) = sc.resolve(base_dir)?;
    let predictor: Option<Box<dyn Predictor>> = match &sc.prediction {
        PredictionMode::None => None,
        PredictionMode::Baseline => Some(Box::new(BaselinePredictor)),
        PredictionMode::Learned { weights } => {
            let p = base_dir.map_or(weights.clone(), |d| d.join(weights));
            Some(Box::new(NetworkPredictor::new(load_weights(&p)?)?))
        }
    };
    run_episode_with(
        sc,
        &env,
        start,
        goal,
        predictor.as_deref(),
        &ControllerConfig::new(sc.v_max, sc.seed),
    )
}

/// Episode loop with an explicit world, predictor and controller tuning.
pub fn run_episode_with(
    sc: &ScenarioConfig,
    env: &Environment,
    start: RobotState,
    goal: Point,
    predictor: Option<&dyn Predictor>,
    ctrl: &ControllerConfig,
) -> Result<EpisodeLog, ScenarioError> {
    let (map_every, plan_every, control_every) = sc.rates.periods()?;
    let dt = 1.0 / sc.rates.tick_hz as f64;
    let sensor = SensorConfig {
        depth_noise_sigma: sc.sensor_noise,
        ..SensorConfig::default()
    };
    let mut mapper = Mapper::new(env, sensor, sc.seed);
    let mut nav = Navigator {
        cfg: ctrl.clone(),
        goal,
        prev_path: None,
        schedule: None,
        guide: None,
        plans: 0,
    };
    let vehicle = ctrl.transcription.vehicle;
    let delta_max = ctrl.transcription.limits.delta_max;
    let mut state = start;
    let mut u = ControlInput::default();
    let mut map: Option<PlanningMap> = None;
    let mut log = EpisodeLog {
        scenario: sc.name.clone(),
        mode: sc.prediction.label().into(),
        v_max: sc.v_max,
        seed: sc.seed,
        goal: [goal.x, goal.y],
        bounds: [
            env.bounds.min.x,
            env.bounds.min.y,
            env.bounds.max.x,
            env.bounds.max.y,
        ],
        walls: env
            .walls
            .iter()
            .map(|w| [w.a.x, w.a.y, w.b.x, w.b.y])
            .collect(),
        metrics: RunMetrics {
            min_clearance: env.distance_to_walls(&start.position()),
            ..RunMetrics::default()
        },
        samples: Vec::new(),
        plans: Vec::new(),
        map_poses: Vec::new(),
    };
    let max_ticks = (sc.timeout * sc.rates.tick_hz as f64).round() as u64;
    let mut tick = 0u64;
    loop {
        let t = tick as f64 * dt;
        if tick == 0 {
            for k in 1..ctrl.initial_scans {
                let look = RobotState {
                    theta: state.theta + TAU * k as f64 / ctrl.initial_scans as f64,
                    ..state
                };
                mapper.scan(env, &look);
                log.map_poses.push(MapPose {
                    tick,
                    x: look.x,
                    y: look.y,
                    theta: look.theta,
                });
            }
        }
        if tick.is_multiple_of(map_every) {
            mapper.scan(env, &state);
            log.map_poses.push(MapPose {
                tick,
                x: state.x,
                y: state.y,
                theta: state.theta,
            });
            map = Some(planning_map(
                &mapper.observed,
                &state.position(),
                predictor,
                ctrl.submap_side,
            )?);
        }
        if tick.is_multiple_of(plan_every) {
            let m = map.as_ref().expect("mapped on tick 0");
            let rec = nav.plan(t, &state, m, &mapper.observed);
            if rec.solved {
                log.metrics.replan_count += 1;
            } else {
                log.metrics.failed_plans += 1;
            }
            log.plans.push(rec);
        }
        if tick.is_multiple_of(control_every) {
            u = nav.control(t, &state, control_every as f64 * dt);
            log.samples.push(Sample {
                t,
                x: state.x,
                y: state.y,
                v: state.v,
                theta: state.theta,
                delta: state.delta,
                u0: u.accel,
                u1: u.steer_rate,
            });
        }
        let before = state.position();
        let mut next =
            RobotState::from_vec(&integrate_rk4(&state.to_vec(), &u.to_vec(), dt, &vehicle));
        next.v = next.v.max(0.0);
        next.delta = next.delta.clamp(-delta_max, delta_max);
        state = next;
        tick += 1;
        let m = &mut log.metrics;
        m.distance_traveled += (state.position() - before).norm();
        m.peak_speed = m.peak_speed.max(state.v);
        let clearance = env.distance_to_walls(&state.position());
        m.min_clearance = m.min_clearance.min(clearance);
        if clearance < sc.body_radius {
            m.collision = true;
            break;
        }
        if (state.position() - goal).norm() <= sc.goal_tolerance {
            m.success = true;
            m.time_to_goal = Some(tick as f64 * dt);
            break;
        }
        if tick >= max_ticks {
            m.timeout = true;
            break;
        }
    }
    log.samples.push(Sample {
        t: tick as f64 * dt,
        x: state.x,
        y: state.y,
        v: state.v,
        theta: state.theta,
        delta: state.delta,
        u0: u.accel,
        u1: u.steer_rate,
    });
    Ok(log)
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    /// Label of the row in the results table.
    pub algorithm: String,
    pub scenario: ScenarioConfig,
}

/// Each row runs `repetitions` times; repetition `r` adds `r` to the
/// scenario seed and, for corridor worlds, to the world seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub schema: String,
    pub rows: Vec<SuiteRow>,
    pub repetitions: usize,
}

impl Suite {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_str(text)?;
        if s.schema != SUITE_SCHEMA {
            return Err(ScenarioError::Invalid(format!(
                "unknown schema {:?}",
                s.schema
            )));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes")
    }

    /// The comparison of the with/without-prediction study.
    pub fn comparison(repetitions: usize, first_world: u64) -> Self {
        let row = |algorithm: &str, v_max: f64, prediction: PredictionMode| SuiteRow {
            algorithm: algorithm.into(),
            scenario: ScenarioConfig::corridor(
                algorithm,
                first_world,
                v_max,
                prediction,
                first_world,
            ),
        };
        Self {
            schema: SUITE_SCHEMA.into(),
            rows: vec![
                row("Without Map Prediction", 3.0, PredictionMode::None),
                row("Without Map Prediction", 4.0, PredictionMode::None),
                row(
                    "With Map Prediction (baseline)",
                    4.0,
                    PredictionMode::Baseline,
                ),
            ],
            repetitions,
        }
    }

    pub fn expand(&self, row: usize, rep: usize) -> ScenarioConfig {
        let mut sc = self.rows[row].scenario.clone();
        sc.seed = sc.seed.wrapping_add(rep as u64);
        if let EnvironmentSource::Corridor { seed, .. } = &mut sc.environment {
            *seed = seed.wrapping_add(rep as u64);
        }
        sc.name = format!("{}#{rep}", self.rows[row].algorithm);
        sc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub algorithm: String,
    pub mode: String,
    pub v_max: f64,
    pub runs: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub errors: Vec<String>,
    pub mean_time_to_goal: Option<f64>,
    pub mean_peak_speed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<RowResult>,
    /// Logs per row, in repetition order; `None` where the episode errored.
    pub logs: Vec<Vec<Option<EpisodeLog>>>,
}

/// Runs every row of `suite`; episodes run in parallel and results are
/// gathered in order. Episode errors are recorded per row.
pub fn run_experiment(
    suite: &Suite,
    base_dir: Option<&Path>,
) -> Result<ExperimentResult, ScenarioError> {
    if suite.rows.is_empty() || suite.repetitions == 0 {
        return Err(ScenarioError::Invalid("empty suite".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..suite.rows.len())
        .flat_map(|r| (0..suite.repetitions).map(move |k| (r, k)))
        .collect();
    let outcomes: Vec<Result<EpisodeLog, String>> = jobs
        .par_iter()
        .map(|&(r, k)| run_episode_from(&suite.expand(r, k), base_dir).map_err(|e| e.to_string()))
        .collect();
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for (r, row) in suite.rows.iter().enumerate() {
        let chunk = &outcomes[r * suite.repetitions..(r + 1) * suite.repetitions];
        let ok: Vec<&EpisodeLog> = chunk.iter().filter_map(|o| o.as_ref().ok()).collect();
        let times: Vec<f64> = ok.iter().filter_map(|l| l.metrics.time_to_goal).collect();
        rows.push(RowResult {
            algorithm: row.algorithm.clone(),
            mode: row.scenario.prediction.label().into(),
            v_max: row.scenario.v_max,
            runs: suite.repetitions,
            successes: ok.iter().filter(|l| l.metrics.success).count(),
            collisions: ok.iter().filter(|l| l.metrics.collision).count(),
            timeouts: ok.iter().filter(|l| l.metrics.timeout).count(),
            errors: chunk
                .iter()
                .filter_map(|o| o.as_ref().err().cloned())
                .collect(),
            mean_time_to_goal: (!times.is_empty())
                .then(|| times.iter().sum::<f64>() / times.len() as f64),
            mean_peak_speed: if ok.is_empty() {
                0.0
            } else {
                ok.iter().map(|l| l.metrics.peak_speed).sum::<f64>() / ok.len() as f64
            },
        });
        logs.push(chunk.iter().map(|o| o.as_ref().ok().cloned()).collect());
    }
    Ok(ExperimentResult { rows, logs })
}

impl ExperimentResult {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("algorithm,mode,max_speed,successes,runs,collisions,timeouts,errors,mean_time_to_goal,mean_peak_speed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.algorithm,
                r.mode,
                r.v_max,
                r.successes,
                r.runs,
                r.collisions,
                r.timeouts,
                r.errors.len(),
                r.mean_time_to_goal
                    .map_or(String::new(), |t| format!("{t:.3}")),
                r.mean_peak_speed
            );
        }
        out
    }

    /// Aligned text table with the columns Algorithm, Max Speed, Success Rate.
    pub fn to_table(&self) -> String {
        let head = ["Algorithm", "Max Speed", "Success Rate"];
        let cells: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.algorithm.clone(),
                    format!("{} m/s", r.v_max),
                    format!("{}/{}", r.successes, r.runs),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..3)
            .map(|c| {
                cells
                    .iter()
                    .map(|row| row[c].len())
                    .chain([head[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: [&str; 3]| {
            let text = format!(
                "{:<w0$}  {:<w1$}  {}",
                row[0],
                row[1],
                row[2],
                w0 = widths[0],
                w1 = widths[1]
            );
            let _ = writeln!(out, "{}", text.trim_end());
        };
        line(&mut out, head);
        let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 4));
        for row in &cells {
            line(
                &mut out,
                [row[0].as_str(), row[1].as_str(), row[2].as_str()],
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Overlaid trajectories on the wall outline plus a speed-versus-time panel
/// (SVG), and the samples of every log as CSV
/// `(t, x, y, v, theta, delta, u0, u1, mode)`.
pub fn emit_plots(logs: &[EpisodeLog], env: &Environment) -> (String, String) {
    let b = env.bounds;
    let (w_world, h_world) = (b.max.x - b.min.x, b.max.y - b.min.y);
    let scale = 560.0 / w_world.max(h_world);
    let (map_w, map_h) = (w_world * scale + 40.0, h_world * scale + 40.0);
    let to_px = |x: f64, y: f64| (20.0 + (x - b.min.x) * scale, 20.0 + (b.max.y - y) * scale);
    let speed_h = 220.0;
    let width = map_w.max(600.0);
    let height = map_h + speed_h + 60.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for wall in &env.walls {
        let (x1, y1) = to_px(wall.a.x, wall.a.y);
        let (x2, y2) = to_px(wall.b.x, wall.b.y);
        let _ = writeln!(
            svg,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="black" stroke-width="2"/>"#
        );
    }
    let t_max = logs
        .iter()
        .filter_map(|l| l.samples.last())
        .map(|s| s.t)
        .fold(1e-9, f64::max);
    let v_max = logs
        .iter()
        .flat_map(|l| &l.samples)
        .map(|s| s.v)
        .fold(1e-9, f64::max);
    let top = map_h + 30.0;
    let _ = writeln!(
        svg,
        r#"<rect x="40" y="{top:.1}" width="{:.1}" height="{speed_h:.1}" fill="none" stroke="gray"/>"#,
        width - 60.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="40" y="{:.1}" font-size="12">speed [m/s] vs time [s]</text>"#,
        top - 6.0
    );
    for (i, log) in logs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let label = format!("{} @ {} m/s", log.mode, log.v_max);
        let moved = log
            .samples
            .windows(2)
            .any(|w| (w[0].x - w[1].x).abs() + (w[0].y - w[1].y).abs() > 1e-9);
        if moved {
            let pts: Vec<String> = log
                .samples
                .iter()
                .map(|s| {
                    let (x, y) = to_px(s.x, s.y);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{label}</title></polyline>"#,
                pts.join(" ")
            );
        } else if let Some(s) = log.samples.first() {
            let (x, y) = to_px(s.x, s.y);
            let _ = writeln!(
                svg,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"><title>{label}</title></circle>"#
            );
        }
        let pts: Vec<String> = log
            .samples
            .iter()
            .map(|s| {
                format!(
                    "{:.2},{:.2}",
                    40.0 + s.t / t_max * (width - 60.0),
                    top + speed_h - s.v / v_max * speed_h
                )
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1"/>"#,
            pts.join(" ")
        );
        let ly = 20.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}" font-size="12">{label}</text>"#,
            width - 180.0,
            ly - 9.0,
            width - 165.0,
            ly
        );
    }
    svg.push_str("</svg>\n");
    let mut csv = String::from("t,x,y,v,theta,delta,u0,u1,mode\n");
    for log in logs {
        for s in &log.samples {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                s.t, s.x, s.y, s.v, s.theta, s.delta, s.u0, s.u1, log.mode
            );
        }
    }
    (svg, csv)
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// Observed 120 x 120 submap.
    pub input: OccupancyGrid,
    /// Ground truth over the co-centred 150 x 150 window.
    pub target: OccupancyGrid,
}

/// Replays the scans of `log` in `env` and, every `stride` map updates,
/// pairs the observed submap with the ground truth rendered from the
/// environment (walls Occupied, space reachable from the pose Free, the
/// rest Unknown).
pub fn collect_training_pairs(
    log: &EpisodeLog,
    env: &Environment,
    stride: usize,
    sensor_noise: f64,
) -> Vec<TrainingPair> {
    let sensor = SensorConfig {
        depth_noise_sigma: sensor_noise,
        ..SensorConfig::default()
    };
    let mut mapper = Mapper::new(env, sensor, log.seed);
    let side = INPUT_CELLS as f64 * DEFAULT_RESOLUTION;
    let mut out = Vec::new();
    for (k, mp) in log.map_poses.iter().enumerate() {
        let pose = RobotState::new(mp.x, mp.y, 0.0, mp.theta, 0.0);
        mapper.scan(env, &pose);
        if k % stride.max(1) != 0 {
            continue;
        }
        let input = mapper.observed.extract_submap(&pose.position(), side);
        let pad = ((OUTPUT_CELLS - INPUT_CELLS) / 2) as f64 * DEFAULT_RESOLUTION;
        let template = OccupancyGrid::new(
            OUTPUT_CELLS,
            OUTPUT_CELLS,
            DEFAULT_RESOLUTION,
            input.origin() - Vector2::repeat(pad),
            Cell::Unknown,
        )
        .expect("valid template");
        let target = env.rasterize(&template, &pose.position());
        out.push(TrainingPair { input, target });
    }
    out
}
