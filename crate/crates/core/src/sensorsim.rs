//! Simulated depth sensing and mapping.
//!
//! A planar ray caster stands in for the depth camera. Scans go through a
//! gradient filter that discards rays whose depth gradient exceeds twice the
//! median, then get integrated into an occupancy grid (free along each ray,
//! occupied at the return, unknown elsewhere).

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::{Cell, GridError, OccupancyGrid, Point};
use crate::trajopt::RobotState;

pub const ENVIRONMENT_SCHEMA: &str = "occnav.environment/1";

/// Angular derivative-of-smoothing kernel applied across neighbouring rays.
pub const SOBEL_TAPS: [f64; 5] = [-1.0 / 8.0, -2.0 / 8.0, 0.0, 2.0 / 8.0, 1.0 / 8.0];

#[derive(Debug, Error)]
pub enum EnvironmentError {
    #[error("environment JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported environment schema `{0}`")]
    Schema(String),
    #[error("invalid environment: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            a: Point::new(x1, y1),
            b: Point::new(x2, y2),
        }
    }

    pub fn distance_to(&self, p: &Point) -> f64 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (self.a + ab * t - p).norm()
    }

    /// Distance along the ray `origin + t * dir` (unit `dir`) to this
    /// segment, if hit at `t > 0`.
    pub fn ray_hit(&self, origin: &Point, dir: &Vector2<f64>) -> Option<f64> {
        let e = self.b - self.a;
        let denom = cross(dir, &e);
        if denom.abs() < 1e-15 {
            return None;
        }
        let w = self.a - origin;
        let t = cross(&w, &e) / denom;
        let s = cross(&w, dir) / denom;
        (t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s)).then_some(t)
    }
}

#[inline]
fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

/// Static 2-D world made of wall segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub walls: Vec<Segment>,
    pub bounds: Bounds,
}

#[derive(Serialize, Deserialize)]
struct EnvironmentFile {
    schema: String,
    /// `[min_x, min_y, max_x, max_y]`
    bounds: [f64; 4],
    walls: Vec<[f64; 4]>,
}

impl Environment {
    pub fn new(walls: Vec<Segment>, bounds: Bounds) -> Result<Self, EnvironmentError> {
        let env = Self { walls, bounds };
        env.validate()?;
        Ok(env)
    }

    fn validate(&self) -> Result<(), EnvironmentError> {
        let b = &self.bounds;
        let finite = |p: &Point| p.x.is_finite() && p.y.is_finite();
        if !(finite(&b.min) && finite(&b.max)) || b.min.x >= b.max.x || b.min.y >= b.max.y {
            return Err(EnvironmentError::Invalid("degenerate bounds".into()));
        }
        let tol = Bounds {
            min: b.min - Vector2::repeat(1e-9),
            max: b.max + Vector2::repeat(1e-9),
        };
        for (i, w) in self.walls.iter().enumerate() {
            if !(finite(&w.a) && finite(&w.b)) {
                return Err(EnvironmentError::Invalid(format!("wall {i} is not finite")));
            }
            if !(tol.contains(&w.a) && tol.contains(&w.b)) {
                return Err(EnvironmentError::Invalid(format!(
                    "wall {i} leaves the bounds"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, EnvironmentError> {
        let file: EnvironmentFile = serde_json::from_str(text)?;
        if file.schema != ENVIRONMENT_SCHEMA {
            return Err(EnvironmentError::Schema(file.schema));
        }
        let [x0, y0, x1, y1] = file.bounds;
        let walls = file
            .walls
            .iter()
            .map(|w| Segment::new(w[0], w[1], w[2], w[3]))
            .collect();
        Self::new(
            walls,
            Bounds {
                min: Point::new(x0, y0),
                max: Point::new(x1, y1),
            },
        )
    }

    pub fn to_json(&self) -> String {
        let file = EnvironmentFile {
            schema: ENVIRONMENT_SCHEMA.to_string(),
            bounds: [
                self.bounds.min.x,
                self.bounds.min.y,
                self.bounds.max.x,
                self.bounds.max.y,
            ],
            walls: self
                .walls
                .iter()
                .map(|w| [w.a.x, w.a.y, w.b.x, w.b.y])
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("environment serializes")
    }

    /// Distance from `p` to the nearest wall, `+inf` for an empty world.
    pub fn distance_to_walls(&self, p: &Point) -> f64 {
        self.walls
            .iter()
            .map(|w| w.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Nearest wall hit along a ray.
    pub fn cast(&self, origin: &Point, dir: &Vector2<f64>) -> Option<f64> {
        self.walls
            .iter()
            .filter_map(|w| w.ray_hit(origin, dir))
            .fold(None, |best: Option<f64>, t| {
                Some(best.map_or(t, |b| b.min(t)))
            })
    }

    /// Empty (all-Unknown) grid covering the bounds at `resolution`.
    pub fn blank_grid(&self, resolution: f64) -> OccupancyGrid {
        let w = ((self.bounds.max.x - self.bounds.min.x) / resolution).ceil() as usize;
        let h = ((self.bounds.max.y - self.bounds.min.y) / resolution).ceil() as usize;
        OccupancyGrid::new(
            w.max(1),
            h.max(1),
            resolution,
            self.bounds.min,
            Cell::Unknown,
        )
        .expect("bounds validated")
    }

    /// Ground-truth occupancy on `template`'s lattice: cells crossed by a
    /// wall are Occupied, cells reachable from `seed` without crossing a wall
    /// are Free, everything else stays Unknown.
    pub fn rasterize(&self, template: &OccupancyGrid, seed: &Point) -> OccupancyGrid {
        let mut g = OccupancyGrid::new(
            template.width(),
            template.height(),
            template.resolution(),
            template.origin(),
            Cell::Unknown,
        )
        .expect("template geometry is valid");
        for w in &self.walls {
            traverse(&g.clone(), &w.a, &w.b, |c, r| g.set(c, r, Cell::Occupied));
        }
        let Ok((sc, sr)) = g.world_to_cell(seed) else {
            return g;
        };
        if g.get(sc, sr) != Cell::Unknown {
            return g;
        }
        let mut stack = vec![(sc, sr)];
        g.set(sc, sr, Cell::Free);
        while let Some((c, r)) = stack.pop() {
            let neighbours = [
                (c as i64 - 1, r as i64),
                (c as i64 + 1, r as i64),
                (c as i64, r as i64 - 1),
                (c as i64, r as i64 + 1),
            ];
            for (nc, nr) in neighbours {
                if g.in_bounds(nc, nr) && g.get(nc as usize, nr as usize) == Cell::Unknown {
                    g.set(nc as usize, nr as usize, Cell::Free);
                    stack.push((nc as usize, nr as usize));
                }
            }
        }
        g
    }

    /// Rotates the whole world by `angle` about the coordinate origin.
    pub fn rotated(&self, angle: f64) -> Environment {
        let rot = nalgebra::Rotation2::new(angle);
        let walls = self
            .walls
            .iter()
            .map(|w| Segment {
                a: rot * w.a,
                b: rot * w.b,
            })
            .collect();
        let corners = [
            self.bounds.min,
            self.bounds.max,
            Point::new(self.bounds.min.x, self.bounds.max.y),
            Point::new(self.bounds.max.x, self.bounds.min.y),
        ]
        .map(|p| rot * p);
        let min = corners
            .iter()
            .fold(Point::new(f64::INFINITY, f64::INFINITY), |m, p| {
                Point::new(m.x.min(p.x), m.y.min(p.y))
            });
        let max = corners
            .iter()
            .fold(Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |m, p| {
                Point::new(m.x.max(p.x), m.y.max(p.y))
            });
        Environment {
            walls,
            bounds: Bounds { min, max },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RayStatus {
    /// Return within range.
    Valid,
    /// Nothing within `max_range`.
    NoReturn,
    /// Discarded by the gradient filter.
    Rejected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthScan {
    /// Ray angles relative to the heading, radians.
    pub angles: Vec<f64>,
    /// Depth per ray; `max_range` for rays without a return.
    pub depths: Vec<f64>,
    pub status: Vec<RayStatus>,
    pub max_range: f64,
}

impl DepthScan {
    pub fn valid_count(&self) -> usize {
        self.status
            .iter()
            .filter(|&&s| s == RayStatus::Valid)
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub fov: f64,
    pub ray_count: usize,
    pub max_range: f64,
    pub depth_noise_sigma: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            fov: 1.5,
            ray_count: 128,
            max_range: 3.0,
            depth_noise_sigma: 0.0,
        }
    }
}

impl SensorConfig {
    pub fn ray_angles(&self) -> Vec<f64> {
        let n = self.ray_count;
        if n == 1 {
            return vec![0.0];
        }
        (0..n)
            .map(|i| -self.fov / 2.0 + self.fov * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Noise-free depth scan from `pose`.
pub fn render_depth(env: &Environment, pose: &RobotState, cfg: &SensorConfig) -> DepthScan {
    render_inner(env, pose, cfg, |_| 0.0)
}

/// Depth scan with additive Gaussian depth noise of `cfg.depth_noise_sigma`.
pub fn render_depth_noisy<R: Rng>(
    env: &Environment,
    pose: &RobotState,
    cfg: &SensorConfig,
    rng: &mut R,
) -> DepthScan {
    if cfg.depth_noise_sigma <= 0.0 {
        return render_depth(env, pose, cfg);
    }
    let normal = Normal::new(0.0, cfg.depth_noise_sigma).expect("finite sigma");
    render_inner(env, pose, cfg, |_| normal.sample(rng))
}

fn render_inner(
    env: &Environment,
    pose: &RobotState,
    cfg: &SensorConfig,
    mut noise: impl FnMut(usize) -> f64,
) -> DepthScan {
    let origin = pose.position();
    let angles = cfg.ray_angles();
    let mut depths = Vec::with_capacity(angles.len());
    let mut status = Vec::with_capacity(angles.len());
    for (i, a) in angles.iter().enumerate() {
        let heading = pose.theta + a;
        let dir = Vector2::new(heading.cos(), heading.sin());
        match env.cast(&origin, &dir) {
            Some(t) if t <= cfg.max_range => {
                let d = (t + noise(i)).max(1e-6);
                if d <= cfg.max_range {
                    depths.push(d);
                    status.push(RayStatus::Valid);
                } else {
                    depths.push(cfg.max_range);
                    status.push(RayStatus::NoReturn);
                }
            }
            _ => {
                depths.push(cfg.max_range);
                status.push(RayStatus::NoReturn);
            }
        }
    }
    DepthScan {
        angles,
        depths,
        status,
        max_range: cfg.max_range,
    }
}

/// Per-ray gradient magnitude `|SOBEL_TAPS * depth|` across the angular axis.
/// Taps past either end replicate the end ray; rays without a return read as
/// `max_range`.
pub fn gradient_magnitudes(scan: &DepthScan) -> Vec<f64> {
    let n = scan.depths.len();
    let value = |i: i64| {
        let i = i.clamp(0, n as i64 - 1) as usize;
        match scan.status[i] {
            RayStatus::NoReturn => scan.max_range,
            _ => scan.depths[i],
        }
    };
    (0..n as i64)
        .map(|i| {
            // Antisymmetric taps as paired differences: exact zero on flat spans.
            let near = value(i + 1) - value(i - 1);
            let far = value(i + 2) - value(i - 2);
            (SOBEL_TAPS[3] * near + SOBEL_TAPS[4] * far).abs()
        })
        .collect()
}

/// Rejects valid rays whose gradient magnitude exceeds twice the median
/// magnitude over valid rays. Scans with fewer than five rays pass through.
pub fn gradient_filter(scan: &DepthScan) -> DepthScan {
    let mut out = scan.clone();
    if scan.depths.len() < SOBEL_TAPS.len() {
        return out;
    }
    let mags = gradient_magnitudes(scan);
    let mut valid: Vec<f64> = mags
        .iter()
        .zip(&scan.status)
        .filter(|(_, &s)| s == RayStatus::Valid)
        .map(|(&m, _)| m)
        .collect();
    if valid.is_empty() {
        return out;
    }
    valid.sort_by(f64::total_cmp);
    let mid = valid.len() / 2;
    let median = if valid.len() % 2 == 1 {
        valid[mid]
    } else {
        0.5 * (valid[mid - 1] + valid[mid])
    };
    for (s, m) in out.status.iter_mut().zip(&mags) {
        if *s == RayStatus::Valid && *m > 2.0 * median {
            *s = RayStatus::Rejected;
        }
    }
    out
}

/// Visits the cells crossed by the segment `from -> to` in order (grid
/// traversal after Amanatides & Woo), clipped to the grid.
pub fn traverse(g: &OccupancyGrid, from: &Point, to: &Point, mut visit: impl FnMut(usize, usize)) {
    let res = g.resolution();
    let (mut c, mut r) = g.cell_coords(from);
    let (ec, er) = g.cell_coords(to);
    let d = to - from;
    let step_c: i64 = if d.x > 0.0 {
        1
    } else if d.x < 0.0 {
        -1
    } else {
        0
    };
    let step_r: i64 = if d.y > 0.0 {
        1
    } else if d.y < 0.0 {
        -1
    } else {
        0
    };
    let o = g.origin();
    let boundary =
        |cell: i64, step: i64, origin: f64| origin + (cell + (step > 0) as i64) as f64 * res;
    let mut t_max_c = if step_c != 0 {
        (boundary(c, step_c, o.x) - from.x) / d.x
    } else {
        f64::INFINITY
    };
    let mut t_max_r = if step_r != 0 {
        (boundary(r, step_r, o.y) - from.y) / d.y
    } else {
        f64::INFINITY
    };
    let t_delta_c = if step_c != 0 {
        res / d.x.abs()
    } else {
        f64::INFINITY
    };
    let t_delta_r = if step_r != 0 {
        res / d.y.abs()
    } else {
        f64::INFINITY
    };
    let max_steps = (ec - c).abs() + (er - r).abs() + 1;
    for _ in 0..=max_steps {
        if g.in_bounds(c, r) {
            visit(c as usize, r as usize);
        }
        if c == ec && r == er {
            break;
        }
        if t_max_c < t_max_r {
            if t_max_c > 1.0 {
                break;
            }
            c += step_c;
            t_max_c += t_delta_c;
        } else {
            if t_max_r > 1.0 {
                break;
            }
            r += step_r;
            t_max_r += t_delta_r;
        }
    }
}

/// Fraction of `max_range` cleared along rays without a return.
pub const DEFAULT_FREE_FRACTION: f64 = 0.9;

/// Integrates a scan taken at `pose` into a copy of `g`.
pub fn integrate_scan(
    g: &OccupancyGrid,
    pose: &RobotState,
    scan: &DepthScan,
    free_fraction: f64,
) -> Result<OccupancyGrid, GridError> {
    let mut out = g.clone();
    integrate_scan_in_place(&mut out, pose, scan, free_fraction)?;
    Ok(out)
}

/// In-place form of [`integrate_scan`]. Valid rays clear the cells before
/// the return and mark the return cell Occupied; rays without a return clear
/// up to `free_fraction * max_range`; rejected rays change nothing. Occupied
/// cells are never cleared.
pub fn integrate_scan_in_place(
    g: &mut OccupancyGrid,
    pose: &RobotState,
    scan: &DepthScan,
    free_fraction: f64,
) -> Result<(), GridError> {
    let origin = pose.position();
    g.world_to_cell(&origin)?;
    let mut hits = Vec::new();
    for ((&a, &d), &s) in scan.angles.iter().zip(&scan.depths).zip(&scan.status) {
        let heading = pose.theta + a;
        let dir = Vector2::new(heading.cos(), heading.sin());
        let reach = match s {
            RayStatus::Valid => d,
            RayStatus::NoReturn => free_fraction * scan.max_range,
            RayStatus::Rejected => continue,
        };
        if reach <= 0.0 {
            continue;
        }
        let end = origin + dir * reach;
        let end_cell = g.cell_coords(&end);
        let mut cleared = Vec::new();
        traverse(g, &origin, &end, |c, r| cleared.push((c, r)));
        if s == RayStatus::Valid {
            if let Some(&last) = cleared.last() {
                if (last.0 as i64, last.1 as i64) == end_cell {
                    cleared.pop();
                    hits.push(last);
                }
            }
        }
        for (c, r) in cleared {
            if g.get(c, r) != Cell::Occupied {
                g.set(c, r, Cell::Free);
            }
        }
    }
    for (c, r) in hits {
        g.set(c, r, Cell::Occupied);
    }
    Ok(())
}
