//! Global path stage: warm-started RRT, greedy pruning, G2 cubic Bézier
//! spiral corner smoothing, curvature-based speed profile and time
//! parameterization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::{unit, PlanningMap, Point};

/// Sampling step for edge and path collision checks, m.
pub const COLLISION_STEP: f64 = 0.02;
/// Curvature reported around a corner that could not be smoothed, 1/m.
pub const KINK_CURVATURE: f64 = 2.0;
/// Half-length of the capped-curvature zone around a raw corner, m.
pub const KINK_ZONE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("start is within the obstacle radius")]
    StartInCollision,
    #[error("no path found after {iterations} iterations")]
    NoPathFound { iterations: usize },
    #[error("arclength {s} outside [0, {length}]")]
    OutOfRange { s: f64, length: f64 },
    #[error("path needs at least two distinct waypoints")]
    DegeneratePath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPolyline {
    pub waypoints: Vec<Point>,
}

impl PathPolyline {
    /// Drops consecutive duplicates; fails if fewer than two points remain.
    pub fn new(points: Vec<Point>) -> Result<Self, PlanError> {
        let mut waypoints: Vec<Point> = Vec::with_capacity(points.len());
        for p in points {
            if waypoints.last().is_none_or(|q| (p - q).norm() > 1e-12) {
                waypoints.push(p);
            }
        }
        if waypoints.len() < 2 {
            return Err(PlanError::DegeneratePath);
        }
        Ok(Self { waypoints })
    }

    pub fn length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .sum()
    }

    pub fn is_clear(&self, map: &PlanningMap, radius: f64) -> bool {
        self.waypoints
            .windows(2)
            .all(|w| map.segment_clear(&w[0], &w[1], radius, COLLISION_STEP))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Wall-clock budget; `None` bounds the search by iterations only.
    pub max_time: Option<f64>,
    pub max_iterations: usize,
    pub obstacle_radius: f64,
    pub v_max: f64,
    pub v_min: f64,
    pub goal_tolerance: f64,
    pub goal_bias: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            max_time: Some(0.05),
            max_iterations: 20_000,
            obstacle_radius: 0.4,
            v_max: 3.0,
            v_min: 0.5,
            goal_tolerance: 0.25,
            goal_bias: 0.05,
            step: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeNode {
    pub point: Point,
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RrtResult {
    pub path: PathPolyline,
    pub tree: Vec<TreeNode>,
    /// Tree nodes `1..=seeded` came from the previous path.
    pub seeded: usize,
    pub iterations: usize,
}

/// Uniform bucket grid for nearest-node queries.
struct NodeIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    max_ring: i64,
}

impl NodeIndex {
    fn new(cell: f64, extent: f64) -> Self {
        Self {
            cell,
            buckets: HashMap::new(),
            max_ring: (extent / cell).ceil() as i64 + 2,
        }
    }

    fn key(&self, p: &Point) -> (i64, i64) {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
        )
    }

    fn insert(&mut self, p: &Point, id: usize) {
        self.buckets.entry(self.key(p)).or_default().push(id);
    }

    /// Nearest node; ties go to the lowest id.
    fn nearest(&self, p: &Point, nodes: &[TreeNode]) -> usize {
        let (kx, ky) = self.key(p);
        let mut best = (f64::INFINITY, usize::MAX);
        for r in 0..=self.max_ring {
            if best.1 != usize::MAX && best.0.sqrt() <= (r as f64 - 1.0).max(0.0) * self.cell {
                break;
            }
            let mut visit = |bx: i64, by: i64| {
                if let Some(ids) = self.buckets.get(&(bx, by)) {
                    for &id in ids {
                        let d = (nodes[id].point - p).norm_squared();
                        if d < best.0 || (d == best.0 && id < best.1) {
                            best = (d, id);
                        }
                    }
                }
            };
            if r == 0 {
                visit(kx, ky);
                continue;
            }
            for bx in (kx - r)..=(kx + r) {
                visit(bx, ky - r);
                visit(bx, ky + r);
            }
            for by in (ky - r + 1)..=(ky + r - 1) {
                visit(kx - r, by);
                visit(kx + r, by);
            }
        }
        best.1
    }
}

struct Tree {
    nodes: Vec<TreeNode>,
    index: NodeIndex,
}

impl Tree {
    fn add(&mut self, point: Point, parent: Option<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode { point, parent });
        self.index.insert(&point, id);
        id
    }

    fn path_to(&self, mut id: usize) -> Vec<Point> {
        let mut out = vec![self.nodes[id].point];
        while let Some(p) = self.nodes[id].parent {
            out.push(self.nodes[p].point);
            id = p;
        }
        out.reverse();
        out
    }
}

/// Keeps the prefix of `prev` before its first colliding edge, then the
/// part after the edge closest to `start`.
fn warm_start_vertices(
    prev: &PathPolyline,
    start: &Point,
    map: &PlanningMap,
    radius: f64,
) -> Vec<Point> {
    let w = &prev.waypoints;
    let mut end = w.len();
    for i in 0..w.len() - 1 {
        if !map.segment_clear(&w[i], &w[i + 1], radius, COLLISION_STEP) {
            end = i + 1;
            break;
        }
    }
    let w = &w[..end];
    if w.len() < 2 {
        return w.to_vec();
    }
    let mut best = (f64::INFINITY, 0);
    for i in 0..w.len() - 1 {
        let d = point_segment_distance(start, &w[i], &w[i + 1]);
        if d < best.0 {
            best = (d, i);
        }
    }
    w[best.1 + 1..].to_vec()
}

fn point_segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let ab = b - a;
    let l2 = ab.norm_squared();
    let t = if l2 > 0.0 {
        ((p - a).dot(&ab) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// RRT from `start` to `goal` on `map`; every edge keeps `obstacle_radius`
/// clearance. A previous path, if given, is truncated at its first collision,
/// re-rooted at `start` and its vertices seed the tree.
pub fn rrt_plan(
    map: &PlanningMap,
    start: &Point,
    goal: &Point,
    prev: Option<&PathPolyline>,
    cfg: &PlannerConfig,
) -> Result<RrtResult, PlanError> {
    let radius = cfg.obstacle_radius;
    if !map.is_clear(start, radius) {
        return Err(PlanError::StartInCollision);
    }
    let g = map.grid();
    let (lo, hi) = (g.origin(), g.max_corner());
    let mut tree = Tree {
        nodes: Vec::new(),
        index: NodeIndex::new(cfg.step.max(0.1), (hi - lo).amax()),
    };
    tree.add(*start, None);
    let reached = |p: &Point| (p - goal).norm() <= cfg.goal_tolerance;
    let try_goal = |tree: &mut Tree, id: usize| -> Option<usize> {
        let p = tree.nodes[id].point;
        if (p - goal).norm() <= cfg.step && map.segment_clear(&p, goal, radius, COLLISION_STEP) {
            if (p - goal).norm() > 1e-12 {
                return Some(tree.add(*goal, Some(id)));
            }
            return Some(id);
        }
        reached(&p).then_some(id)
    };
    let finish = |tree: Tree, id: usize, seeded: usize, iterations: usize| {
        let path = PathPolyline::new(tree.path_to(id)).unwrap_or_else(|_| PathPolyline {
            waypoints: vec![*start, *start + Vector2::new(1e-9, 0.0)],
        });
        Ok(RrtResult {
            path,
            tree: tree.nodes,
            seeded,
            iterations,
        })
    };
    if let Some(id) = try_goal(&mut tree, 0) {
        if id != 0 {
            return finish(tree, id, 0, 0);
        }
    }

    let mut seeded = 0;
    if let Some(prev) = prev {
        let verts = warm_start_vertices(prev, start, map, radius);
        if let Some(first) = verts
            .iter()
            .position(|v| map.segment_clear(start, v, radius, COLLISION_STEP))
        {
            let mut parent = 0;
            for v in &verts[first..] {
                if (v - tree.nodes[parent].point).norm() <= 1e-12 {
                    continue;
                }
                parent = tree.add(*v, Some(parent));
                seeded += 1;
                if let Some(id) = try_goal(&mut tree, parent) {
                    return finish(tree, id, seeded, 0);
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t0 = Instant::now();
    let budget = cfg.max_time.map(Duration::from_secs_f64);
    for it in 0..cfg.max_iterations {
        if let Some(b) = budget {
            if it % 32 == 0 && t0.elapsed() > b {
                return Err(PlanError::NoPathFound { iterations: it });
            }
        }
        let sample = if rng.random::<f64>() < cfg.goal_bias {
            *goal
        } else {
            Point::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y))
        };
        let near = tree.index.nearest(&sample, &tree.nodes);
        let from = tree.nodes[near].point;
        let delta = sample - from;
        let dist = delta.norm();
        if dist < 1e-9 {
            continue;
        }
        let to = if dist > cfg.step {
            from + delta * (cfg.step / dist)
        } else {
            sample
        };
        if !map.segment_clear(&from, &to, radius, COLLISION_STEP) {
            continue;
        }
        let id = tree.add(to, Some(near));
        if let Some(goal_id) = try_goal(&mut tree, id) {
            return finish(tree, goal_id, seeded, it + 1);
        }
    }
    Err(PlanError::NoPathFound {
        iterations: cfg.max_iterations,
    })
}

/// Greedy shortcutting: from each kept vertex jump to the farthest later
/// vertex reachable by a clear straight segment.
pub fn prune(p: &PathPolyline, map: &PlanningMap, radius: f64) -> PathPolyline {
    let w = &p.waypoints;
    let mut out = vec![w[0]];
    let mut i = 0;
    while i + 1 < w.len() {
        let mut j = w.len() - 1;
        while j > i + 1 && !map.segment_clear(&w[i], &w[j], radius, COLLISION_STEP) {
            j -= 1;
        }
        out.push(w[j]);
        i = j;
    }
    PathPolyline { waypoints: out }
}

/// Moves each interior vertex away from the inside of its turn, along the
/// corner bisector, by the largest multiple of `step` up to `max_push` that
/// keeps both adjacent segments clear at `radius`. Wider corners leave room
/// for fillets the vehicle can follow. Endpoints never move.
pub fn push_corners(
    p: &PathPolyline,
    map: &PlanningMap,
    radius: f64,
    max_push: f64,
    step: f64,
) -> PathPolyline {
    let mut w = p.waypoints.clone();
    if step <= 0.0 {
        return p.clone();
    }
    for i in 1..w.len().saturating_sub(1) {
        let (a, b) = (unit(w[i] - w[i - 1]), unit(w[i + 1] - w[i]));
        let inward = unit(b - a);
        if inward == Vector2::zeros() {
            continue;
        }
        let steps = (max_push / step).floor() as usize;
        for k in (1..=steps).rev() {
            let q = w[i] - inward * (k as f64 * step);
            if map.is_clear(&q, radius)
                && map.segment_clear(&w[i - 1], &q, radius, COLLISION_STEP)
                && map.segment_clear(&q, &w[i + 1], radius, COLLISION_STEP)
            {
                w[i] = q;
                break;
            }
        }
    }
    PathPolyline { waypoints: w }
}

// ---------------------------------------------------------------------------
// Smooth paths
// ---------------------------------------------------------------------------

/// 16-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 8] = [
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.755404408355003,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL_WEIGHTS: [f64; 8] = [
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

fn gauss_legendre(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (m, h) = ((a + b) / 2.0, (b - a) / 2.0);
    let mut acc = 0.0;
    for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        acc += w * (f(m + h * x) + f(m - h * x));
    }
    acc * h
}

const BEZIER_TABLE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Bezier {
    pub ctrl: [Point; 4],
    /// Cumulative arclength at `t = i / BEZIER_TABLE`.
    table: Vec<f64>,
}

impl Bezier {
    pub fn new(ctrl: [Point; 4]) -> Self {
        let mut b = Self {
            ctrl,
            table: vec![0.0; BEZIER_TABLE + 1],
        };
        for i in 0..BEZIER_TABLE {
            let (t0, t1) = (
                i as f64 / BEZIER_TABLE as f64,
                (i + 1) as f64 / BEZIER_TABLE as f64,
            );
            b.table[i + 1] = b.table[i] + gauss_legendre(t0, t1, |t| b.d1(t).norm());
        }
        b
    }

    pub fn point(&self, t: f64) -> Point {
        let [p0, p1, p2, p3] = self.ctrl;
        let s = 1.0 - t;
        Point::from(
            p0.coords * (s * s * s)
                + p1.coords * (3.0 * s * s * t)
                + p2.coords * (3.0 * s * t * t)
                + p3.coords * (t * t * t),
        )
    }

    pub fn d1(&self, t: f64) -> Vector2<f64> {
        let [p0, p1, p2, p3] = self.ctrl;
        let s = 1.0 - t;
        ((p1 - p0) * (s * s) + (p2 - p1) * (2.0 * s * t) + (p3 - p2) * (t * t)) * 3.0
    }

    pub fn d2(&self, t: f64) -> Vector2<f64> {
        let [p0, p1, p2, p3] = self.ctrl;
        ((p2 - p1 * 2.0 + p0.coords) * (1.0 - t) + (p3 - p2 * 2.0 + p1.coords) * t) * 6.0
    }

    pub fn length(&self) -> f64 {
        self.table[BEZIER_TABLE]
    }

    /// Parameter at arclength `s`, by table lookup and Newton steps.
    pub fn param_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        let i = match self
            .table
            .binary_search_by(|v| v.partial_cmp(&s).expect("finite"))
        {
            Ok(i) => return i as f64 / BEZIER_TABLE as f64,
            Err(i) => i - 1,
        };
        let (t0, t1) = (
            i as f64 / BEZIER_TABLE as f64,
            (i + 1) as f64 / BEZIER_TABLE as f64,
        );
        let (s0, s1) = (self.table[i], self.table[i + 1]);
        let mut t = t0 + (t1 - t0) * (s - s0) / (s1 - s0);
        for _ in 0..8 {
            let f = s0 + gauss_legendre(t0, t, |u| self.d1(u).norm()) - s;
            let speed = self.d1(t).norm();
            if speed < 1e-12 {
                break;
            }
            let next = (t - f / speed).clamp(t0, t1);
            if (next - t).abs() < 1e-15 {
                t = next;
                break;
            }
            t = next;
        }
        t
    }

    fn signed_curvature(&self, t: f64) -> f64 {
        let (a, b) = (self.d1(t), self.d2(t));
        let n = a.norm();
        if n < 1e-12 {
            return 0.0;
        }
        (a.x * b.y - a.y * b.x) / (n * n * n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PathSegment {
    Line {
        a: Point,
        b: Point,
    },
    Bezier(Bezier),
    /// Circular arc; `sweep > 0` turns counter-clockwise.
    Arc {
        center: Point,
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl PathSegment {
    pub fn length(&self) -> f64 {
        match self {
            PathSegment::Line { a, b } => (b - a).norm(),
            PathSegment::Bezier(bz) => bz.length(),
            PathSegment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Position, unit tangent and signed curvature at local arclength `s`.
    fn eval(&self, s: f64) -> (Point, Vector2<f64>, f64) {
        match self {
            PathSegment::Line { a, b } => {
                let d = b - a;
                let l = d.norm();
                (a + d * (s / l), d / l, 0.0)
            }
            PathSegment::Bezier(bz) => {
                let t = bz.param_at(s);
                (bz.point(t), unit(bz.d1(t)), bz.signed_curvature(t))
            }
            PathSegment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let dir = sweep.signum();
                let ang = start_angle + dir * s / radius;
                let p = center + Vector2::new(ang.cos(), ang.sin()) * *radius;
                let tangent = Vector2::new(-ang.sin(), ang.cos()) * dir;
                (p, tangent, dir / radius)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CornerKind {
    /// Full-size fillet at the deviation limit.
    Smoothed,
    /// Fillet limited by segment length or by a collision check.
    Shrunk,
    /// No fillet fits; the raw corner is kept with a curvature cap.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothPath {
    segments: Vec<PathSegment>,
    starts: Vec<f64>,
    length: f64,
    corners: Vec<CornerKind>,
    /// Arclength positions of raw corners.
    kinks: Vec<f64>,
}

impl SmoothPath {
    pub fn from_segments(segments: Vec<PathSegment>) -> Result<Self, PlanError> {
        Self::assemble(segments, Vec::new(), Vec::new())
    }

    fn assemble(
        segments: Vec<PathSegment>,
        corners: Vec<CornerKind>,
        kinks: Vec<f64>,
    ) -> Result<Self, PlanError> {
        let segments: Vec<PathSegment> = segments
            .into_iter()
            .filter(|s| s.length() > 1e-12)
            .collect();
        if segments.is_empty() {
            return Err(PlanError::DegeneratePath);
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for s in &segments {
            starts.push(acc);
            acc += s.length();
        }
        Ok(Self {
            segments,
            starts,
            length: acc,
            corners,
            kinks,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn segments(&self) -> &[PathSegment] {
        &self.segments
    }

    pub fn corners(&self) -> &[CornerKind] {
        &self.corners
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length);
        let i = self.starts.partition_point(|&a| a <= s).saturating_sub(1);
        (i, (s - self.starts[i]).min(self.segments[i].length()))
    }

    fn eval(&self, s: f64) -> (Point, Vector2<f64>, f64) {
        let (i, local) = self.locate(s);
        self.segments[i].eval(local)
    }

    /// Position at arclength `s`, clamped to `[0, L]`.
    pub fn position(&self, s: f64) -> Point {
        self.eval(s).0
    }

    pub fn tangent(&self, s: f64) -> Vector2<f64> {
        self.eval(s).1
    }

    pub fn heading(&self, s: f64) -> f64 {
        let t = self.tangent(s);
        t.y.atan2(t.x)
    }

    /// Curvature magnitude from the parametric formula of the segment at `s`.
    pub fn curvature(&self, s: f64) -> Result<f64, PlanError> {
        if !(-1e-9..=self.length + 1e-9).contains(&s) {
            return Err(PlanError::OutOfRange {
                s,
                length: self.length,
            });
        }
        let k = self.eval(s).2.abs();
        if self.kinks.iter().any(|&c| (c - s).abs() <= KINK_ZONE) {
            return Ok(k.max(KINK_CURVATURE));
        }
        Ok(k)
    }

    /// Samples at most `step` apart, both ends included.
    pub fn sample_arclengths(&self, step: f64) -> Vec<f64> {
        let n = (self.length / step).ceil().max(1.0) as usize;
        (0..=n).map(|i| self.length * i as f64 / n as f64).collect()
    }

    pub fn is_clear(&self, map: &PlanningMap, radius: f64) -> bool {
        self.sample_arclengths(COLLISION_STEP)
            .into_iter()
            .all(|s| map.is_clear(&self.position(s), radius))
    }
}

const C1: f64 = 7.2364;

fn g2cbs_constants() -> (f64, f64, f64) {
    let c2 = 0.4 * (6f64.sqrt() - 1.0);
    let c3 = (c2 + 4.0) / (C1 + 6.0);
    let c4 = 1.0 - c3 * (c2 + 1.0);
    (c2, c3, c4)
}

/// Deflections closer than this to a full reversal keep the raw corner.
const REVERSAL_MARGIN: f64 = 1e-3;

struct Corner {
    d: f64,
    kind: CornerKind,
}

fn deflection(u_in: &Vector2<f64>, u_out: &Vector2<f64>) -> f64 {
    u_in.dot(u_out).clamp(-1.0, 1.0).acos()
}

/// Removes interior waypoints where the path does not turn.
fn drop_collinear(w: &[Point]) -> Vec<Point> {
    let mut out = vec![w[0]];
    for i in 1..w.len() - 1 {
        let a = unit(w[i] - out[out.len() - 1]);
        let b = unit(w[i + 1] - w[i]);
        if deflection(&a, &b) > 1e-9 {
            out.push(w[i]);
        }
    }
    out.push(w[w.len() - 1]);
    out
}

/// G2CBS smoothing with each fillet's lateral deviation at most
/// `min(0.4 x shorter adjacent segment, max_deviation)`.
pub fn smooth_g2cbs(p: &PathPolyline, max_deviation: f64) -> SmoothPath {
    let w = drop_collinear(&p.waypoints);
    let corners = plan_corners(&w, max_deviation);
    build_smooth(&w, &corners)
}

fn plan_corners(w: &[Point], max_deviation: f64) -> Vec<Corner> {
    let (_, _, c4) = g2cbs_constants();
    let n = w.len();
    (1..n - 1)
        .map(|i| {
            let (l_in, l_out) = ((w[i] - w[i - 1]).norm(), (w[i + 1] - w[i]).norm());
            let gamma = deflection(&unit(w[i] - w[i - 1]), &unit(w[i + 1] - w[i]));
            if gamma > std::f64::consts::PI - REVERSAL_MARGIN {
                return Corner {
                    d: 0.0,
                    kind: CornerKind::Raw,
                };
            }
            let beta = gamma / 2.0;
            let dev_max = (0.4 * l_in.min(l_out)).min(max_deviation);
            let d_dev = dev_max / (c4 * beta.sin() * beta.cos());
            let cap_in = if i == 1 { l_in } else { l_in / 2.0 };
            let cap_out = if i == n - 2 { l_out } else { l_out / 2.0 };
            let d_len = cap_in.min(cap_out);
            if d_dev <= d_len {
                Corner {
                    d: d_dev,
                    kind: CornerKind::Smoothed,
                }
            } else {
                Corner {
                    d: d_len,
                    kind: CornerKind::Shrunk,
                }
            }
        })
        .collect()
}

fn build_smooth(w: &[Point], corners: &[Corner]) -> SmoothPath {
    let (c2, c3, _) = g2cbs_constants();
    let mut segments = Vec::new();
    let mut kinds = Vec::new();
    let mut kinks = Vec::new();
    let mut cursor = w[0];
    let mut s_acc = 0.0;
    let push = |seg: PathSegment, segments: &mut Vec<PathSegment>, s_acc: &mut f64| {
        *s_acc += seg.length();
        segments.push(seg);
    };
    for (k, corner) in corners.iter().enumerate() {
        let w2 = w[k + 1];
        let u1 = unit(w[k] - w2);
        let u2 = unit(w[k + 2] - w2);
        kinds.push(corner.kind);
        if corner.kind == CornerKind::Raw || corner.d <= 1e-9 {
            push(
                PathSegment::Line { a: cursor, b: w2 },
                &mut segments,
                &mut s_acc,
            );
            kinks.push(s_acc);
            cursor = w2;
            if corner.kind != CornerKind::Raw {
                *kinds.last_mut().expect("pushed") = CornerKind::Raw;
            }
            continue;
        }
        let d = corner.d;
        let b0 = w2 + u1 * d;
        let b1 = b0 - u1 * (c2 * c3 * d);
        let b2 = b1 - u1 * (c3 * d);
        let e0 = w2 + u2 * d;
        let e1 = e0 - u2 * (c2 * c3 * d);
        let e2 = e1 - u2 * (c3 * d);
        let b3 = Point::from((b2.coords + e2.coords) / 2.0);
        push(
            PathSegment::Line { a: cursor, b: b0 },
            &mut segments,
            &mut s_acc,
        );
        push(
            PathSegment::Bezier(Bezier::new([b0, b1, b2, b3])),
            &mut segments,
            &mut s_acc,
        );
        push(
            PathSegment::Bezier(Bezier::new([b3, e2, e1, e0])),
            &mut segments,
            &mut s_acc,
        );
        cursor = e0;
    }
    push(
        PathSegment::Line {
            a: cursor,
            b: w[w.len() - 1],
        },
        &mut segments,
        &mut s_acc,
    );
    SmoothPath::assemble(segments, kinds, kinks).expect("polyline has positive length")
}

/// Smoothing that halves any fillet whose samples lose `radius` clearance,
/// falling back to the raw corner.
pub fn smooth_g2cbs_checked(
    p: &PathPolyline,
    max_deviation: f64,
    map: &PlanningMap,
    radius: f64,
) -> SmoothPath {
    let w = drop_collinear(&p.waypoints);
    let mut corners = plan_corners(&w, max_deviation);
    for _round in 0..6 {
        let sp = build_smooth(&w, &corners);
        let mut bad = vec![false; corners.len()];
        // Each filleted corner contributes two consecutive Bézier segments.
        let mut owners = corners
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind != CornerKind::Raw && c.d > 1e-9)
            .flat_map(|(k, _)| [k, k]);
        let seg_corner: Vec<Option<usize>> = sp
            .segments()
            .iter()
            .map(|seg| {
                matches!(seg, PathSegment::Bezier(_))
                    .then(|| owners.next().expect("two per fillet"))
            })
            .collect();
        for s in sp.sample_arclengths(COLLISION_STEP) {
            if !map.is_clear(&sp.position(s), radius) {
                if let Some(c) = seg_corner[sp.locate(s).0] {
                    bad[c] = true;
                }
            }
        }
        if !bad.iter().any(|&b| b) {
            return sp;
        }
        for (c, b) in corners.iter_mut().zip(bad) {
            if b {
                c.d /= 2.0;
                c.kind = CornerKind::Shrunk;
                if c.d < 0.02 {
                    c.kind = CornerKind::Raw;
                }
            }
        }
    }
    for c in corners.iter_mut() {
        if c.kind == CornerKind::Shrunk {
            c.kind = CornerKind::Raw;
        }
    }
    build_smooth(&w, &corners)
}

// ---------------------------------------------------------------------------
// Speed and time
// ---------------------------------------------------------------------------

/// `v = v_max - clamp(|kappa|, 0, 2) (v_max - v_min) / 2`.
pub fn speed_for_curvature(kappa: f64, v_max: f64, v_min: f64) -> f64 {
    let k = kappa.abs().clamp(0.0, 2.0);
    if k == 2.0 {
        return v_min;
    }
    v_max - k * (v_max - v_min) / 2.0
}

pub trait SpeedProfile: Send + Sync {
    fn speed(&self, path: &SmoothPath, s: f64) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvatureSpeed {
    pub v_max: f64,
    pub v_min: f64,
}

impl SpeedProfile for CurvatureSpeed {
    fn speed(&self, path: &SmoothPath, s: f64) -> f64 {
        speed_for_curvature(
            path.curvature(s.clamp(0.0, path.length())).unwrap_or(0.0),
            self.v_max,
            self.v_min,
        )
    }
}

impl<F: Fn(f64) -> f64 + Send + Sync> SpeedProfile for F {
    fn speed(&self, _path: &SmoothPath, s: f64) -> f64 {
        self(s)
    }
}

/// Curvature speed further capped by `accel` (m/s^2) from `v_start` at
/// `s = 0` and by braking at `accel` ahead of slower sections. Tabulated
/// every `step` metres and interpolated linearly.
#[derive(Clone, Debug, PartialEq)]
pub struct AccelLimitedSpeed {
    step: f64,
    table: Vec<f64>,
}

impl AccelLimitedSpeed {
    pub fn new(
        path: &SmoothPath,
        curvature: CurvatureSpeed,
        v_start: f64,
        accel: f64,
        step: f64,
    ) -> Self {
        let len = path.length();
        let n = (len / step).ceil().max(1.0) as usize;
        let step = len / n as f64;
        let mut table: Vec<f64> = (0..=n)
            .map(|i| curvature.speed(path, i as f64 * step))
            .collect();
        table[0] = table[0].min(v_start.max(curvature.v_min));
        for i in 1..=n {
            table[i] = table[i].min((table[i - 1] * table[i - 1] + 2.0 * accel * step).sqrt());
        }
        for i in (0..n).rev() {
            table[i] = table[i].min((table[i + 1] * table[i + 1] + 2.0 * accel * step).sqrt());
        }
        Self { step, table }
    }
}

impl SpeedProfile for AccelLimitedSpeed {
    fn speed(&self, _path: &SmoothPath, s: f64) -> f64 {
        let last = self.table.len() - 1;
        if self.step <= 0.0 || last == 0 {
            return self.table[0];
        }
        let x = (s / self.step).clamp(0.0, last as f64);
        let i = (x.floor() as usize).min(last - 1);
        let f = x - i as f64;
        self.table[i] * (1.0 - f) + self.table[i + 1] * f
    }
}

pub fn velocity_profile(v_max: f64, v_min: f64) -> CurvatureSpeed {
    CurvatureSpeed { v_max, v_min }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = (a + b) / 2.0;
        let (lm, rm) = ((a + m) / 2.0, (m + b) / 2.0);
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f((a + b) / 2.0));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Quadrature tolerance of the total path time, s.
pub const TIME_TOLERANCE: f64 = 1e-6;
/// Spacing of the stored `t(s)` knots, m.
const TIME_KNOT_SPACING: f64 = 0.05;

#[derive(Clone)]
pub struct TimedPath {
    pub path: SmoothPath,
    profile: Arc<dyn SpeedProfile>,
    knots_s: Vec<f64>,
    knots_t: Vec<f64>,
}

impl std::fmt::Debug for TimedPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TimedPath")
            .field("length", &self.path.length())
            .field("duration", &self.duration())
            .finish()
    }
}

/// `t(s) = integral of 1 / v` by adaptive Simpson between knots at most
/// 5 cm apart (and at segment joints).
pub fn time_parameterize(sp: &SmoothPath, profile: Arc<dyn SpeedProfile>) -> TimedPath {
    let mut knots_s = Vec::new();
    for (i, seg) in sp.segments.iter().enumerate() {
        let (a, len) = (sp.starts[i], seg.length());
        let n = (len / TIME_KNOT_SPACING).ceil().max(1.0) as usize;
        for j in 0..n {
            knots_s.push(a + len * j as f64 / n as f64);
        }
    }
    knots_s.push(sp.length());
    let tol = TIME_TOLERANCE * 0.1 / knots_s.len() as f64;
    let inv = |s: f64| 1.0 / profile.speed(sp, s);
    let mut knots_t = vec![0.0];
    for w in knots_s.windows(2) {
        let dt = adaptive_simpson(&inv, w[0], w[1], tol);
        knots_t.push(knots_t.last().expect("seeded") + dt);
    }
    TimedPath {
        path: sp.clone(),
        profile,
        knots_s,
        knots_t,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonPoint {
    pub position: Point,
    pub heading: f64,
    pub speed: f64,
    pub s: f64,
}

impl TimedPath {
    pub fn duration(&self) -> f64 {
        *self.knots_t.last().expect("non-empty")
    }

    pub fn speed_at(&self, s: f64) -> f64 {
        self.profile.speed(&self.path, s)
    }

    pub fn time_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.path.length());
        let i = self
            .knots_s
            .partition_point(|&a| a <= s)
            .saturating_sub(1)
            .min(self.knots_s.len() - 2);
        let inv = |x: f64| 1.0 / self.profile.speed(&self.path, x);
        self.knots_t[i] + adaptive_simpson(&inv, self.knots_s[i], s, 1e-10)
    }

    /// Inverse of [`TimedPath::time_at`], clamped to the path.
    pub fn s_at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= self.duration() {
            return self.path.length();
        }
        let i = self
            .knots_t
            .partition_point(|&a| a <= t)
            .saturating_sub(1)
            .min(self.knots_t.len() - 2);
        let (s0, s1, t0, t1) = (
            self.knots_s[i],
            self.knots_s[i + 1],
            self.knots_t[i],
            self.knots_t[i + 1],
        );
        let (mut lo, mut hi) = (s0, s1);
        let mut s = s0 + (s1 - s0) * (t - t0) / (t1 - t0);
        for _ in 0..30 {
            let err = self.time_at(s) - t;
            if err.abs() <= 1e-12 {
                break;
            }
            if err > 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            let next = s - err * self.speed_at(s);
            s = if next > lo && next < hi {
                next
            } else {
                (lo + hi) / 2.0
            };
        }
        s
    }

    /// The path state `horizon` seconds after `current_s`, clamped to the end.
    pub fn horizon_point(&self, current_s: f64, horizon: f64) -> HorizonPoint {
        let t = self.time_at(current_s) + horizon;
        let s = if horizon == 0.0 {
            current_s.clamp(0.0, self.path.length())
        } else {
            self.s_at(t)
        };
        HorizonPoint {
            position: self.path.position(s),
            heading: self.path.heading(s),
            speed: self.speed_at(s),
            s,
        }
    }

    /// `(s, x, y, kappa, v, t)` rows at most `step` apart.
    pub fn to_csv(&self, step: f64) -> String {
        let mut out = String::from("s,x,y,kappa,v,t\n");
        for s in self.path.sample_arclengths(step) {
            let p = self.path.position(s);
            let k = self.path.curvature(s).unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{s},{},{},{k},{},{}",
                p.x,
                p.y,
                self.speed_at(s),
                self.time_at(s)
            );
        }
        out
    }
}

pub fn horizon_point(tp: &TimedPath, current_s: f64, horizon: f64) -> HorizonPoint {
    tp.horizon_point(current_s, horizon)
}
