//! Trinary occupancy grids, post-processing of predicted maps, fusion of
//! observed and predicted maps, and clearance queries.
//!
//! Cells are addressed as `(col, row)`: `col` grows along world +x, `row`
//! along world +y, and storage is row-major (`index = row * width + col`).
//! Cell `(0, 0)` has its lower-left corner at `origin`. Cell intervals are
//! half-open, so a point on a shared edge belongs to the higher-index cell.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// World-frame point in metres.
pub type Point = Point2<f64>;

/// Default map resolution, metres per cell.
pub const DEFAULT_RESOLUTION: f64 = 0.05;

/// Magic line of the grid file format.
pub const GRID_MAGIC: &str = "OGRID 1";

/// Largest grid edge accepted by the file parser.
pub const MAX_GRID_EDGE: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("point ({x:.3}, {y:.3}) lies outside the grid extent")]
    OutOfBounds { x: f64, y: f64 },
    #[error("grids are not co-registered: {0}")]
    GridMismatch(String),
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("malformed grid file: {0}")]
    Parse(String),
}

/// Occupancy state of one cell. The discriminant is the on-disk byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Cell {
    Free = 0,
    Occupied = 1,
    Unknown = 2,
}

impl Cell {
    pub const ALL: [Cell; 3] = [Cell::Free, Cell::Occupied, Cell::Unknown];

    pub fn from_byte(b: u8) -> Option<Cell> {
        match b {
            0 => Some(Cell::Free),
            1 => Some(Cell::Occupied),
            2 => Some(Cell::Unknown),
            _ => None,
        }
    }

    pub fn to_byte(self) -> u8 {
        self as u8
    }

    /// Class index used by the predictor channels (same as the byte value).
    pub fn class_index(self) -> usize {
        self as usize
    }
}

/// Where a planning-map cell's value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Observed,
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    resolution: f64,
    origin: Point,
    width: usize,
    height: usize,
    cells: Vec<Cell>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Point,
        fill: Cell,
    ) -> Result<Self, GridError> {
        Self::from_cells(
            width,
            height,
            resolution,
            origin,
            vec![fill; width * height],
        )
    }

    pub fn from_cells(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Point,
        cells: Vec<Cell>,
    ) -> Result<Self, GridError> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(GridError::InvalidGeometry(format!(
                "resolution {resolution}"
            )));
        }
        if !(origin.x.is_finite() && origin.y.is_finite()) {
            return Err(GridError::InvalidGeometry("non-finite origin".into()));
        }
        if width.checked_mul(height) != Some(cells.len()) {
            return Err(GridError::InvalidGeometry(format!(
                "{} cells for a {width}x{height} grid",
                cells.len()
            )));
        }
        Ok(Self {
            resolution,
            origin,
            width,
            height,
            cells,
        })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Upper-right corner of the grid extent.
    pub fn max_corner(&self) -> Point {
        Point::new(
            self.origin.x + self.width as f64 * self.resolution,
            self.origin.y + self.height as f64 * self.resolution,
        )
    }

    /// World position of the grid centre.
    pub fn center(&self) -> Point {
        nalgebra::center(&self.origin, &self.max_corner())
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        debug_assert!(col < self.width && row < self.height);
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> Cell {
        self.cells[self.index(col, row)]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, cell: Cell) {
        let i = self.index(col, row);
        self.cells[i] = cell;
    }

    /// Signed cell coordinates of `p`; may lie outside the grid.
    #[inline]
    pub fn cell_coords(&self, p: &Point) -> (i64, i64) {
        (
            ((p.x - self.origin.x) / self.resolution).floor() as i64,
            ((p.y - self.origin.y) / self.resolution).floor() as i64,
        )
    }

    #[inline]
    pub fn in_bounds(&self, col: i64, row: i64) -> bool {
        col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height
    }

    pub fn contains(&self, p: &Point) -> bool {
        let (c, r) = self.cell_coords(p);
        self.in_bounds(c, r)
    }

    /// Cell containing `p`, using floor on half-open cell intervals.
    pub fn world_to_cell(&self, p: &Point) -> Result<(usize, usize), GridError> {
        let (c, r) = self.cell_coords(p);
        if self.in_bounds(c, r) {
            Ok((c as usize, r as usize))
        } else {
            Err(GridError::OutOfBounds { x: p.x, y: p.y })
        }
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Point {
        Point::new(
            self.origin.x + (col as f64 + 0.5) * self.resolution,
            self.origin.y + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Value at `p`, `None` outside the extent.
    pub fn cell_at(&self, p: &Point) -> Option<Cell> {
        self.world_to_cell(p).ok().map(|(c, r)| self.get(c, r))
    }

    pub fn count(&self, cell: Cell) -> usize {
        self.cells.iter().filter(|&&c| c == cell).count()
    }

    /// Integer cell offset of `other`'s origin relative to `self`'s origin,
    /// or `None` when the two lattices are not aligned.
    pub fn lattice_offset(&self, other: &OccupancyGrid) -> Option<(i64, i64)> {
        if (self.resolution - other.resolution).abs() > 1e-12 * self.resolution.max(1.0) {
            return None;
        }
        let dx = (other.origin.x - self.origin.x) / self.resolution;
        let dy = (other.origin.y - self.origin.y) / self.resolution;
        let (rx, ry) = (dx.round(), dy.round());
        if (dx - rx).abs() > 1e-6 || (dy - ry).abs() > 1e-6 {
            return None;
        }
        Some((rx as i64, ry as i64))
    }

    /// Distance from `p` to the nearest Occupied cell centre, `+inf` when the
    /// grid holds no obstacle. Unknown cells are not obstacles.
    pub fn clearance(&self, p: &Point) -> Result<f64, GridError> {
        self.world_to_cell(p)?;
        Ok(ring_search(self, p))
    }

    /// Square submap of `ceil(side / resolution)` cells per edge around
    /// `center`, lattice-aligned with `self` (the origin snaps to the nearest
    /// source cell corner). Cells beyond the source extent are Unknown.
    pub fn extract_submap(&self, center: &Point, side: f64) -> OccupancyGrid {
        assert!(side > 0.0, "submap side must be positive");
        let n = cells_for_length(side, self.resolution);
        let half = n as f64 * self.resolution / 2.0;
        let off_x = ((center.x - half - self.origin.x) / self.resolution).round() as i64;
        let off_y = ((center.y - half - self.origin.y) / self.resolution).round() as i64;
        let origin = Point::new(
            self.origin.x + off_x as f64 * self.resolution,
            self.origin.y + off_y as f64 * self.resolution,
        );
        let mut cells = Vec::with_capacity(n * n);
        for row in 0..n as i64 {
            for col in 0..n as i64 {
                let (sc, sr) = (col + off_x, row + off_y);
                cells.push(if self.in_bounds(sc, sr) {
                    self.get(sc as usize, sr as usize)
                } else {
                    Cell::Unknown
                });
            }
        }
        OccupancyGrid {
            resolution: self.resolution,
            origin,
            width: n,
            height: n,
            cells,
        }
    }

    /// Occupied mask as booleans.
    pub fn occupied_mask(&self) -> Vec<bool> {
        self.cells.iter().map(|&c| c == Cell::Occupied).collect()
    }
}

/// Number of cells needed to span `length` metres.
pub fn cells_for_length(length: f64, resolution: f64) -> usize {
    // Guards against 6.0 / 0.05 landing a hair above 120.
    ((length / resolution) - 1e-9).ceil().max(1.0) as usize
}

/// Exact nearest-occupied-centre distance by expanding square rings.
fn ring_search(g: &OccupancyGrid, p: &Point) -> f64 {
    let (pc, pr) = g.cell_coords(p);
    let mut best = f64::INFINITY;
    let max_ring = g.width.max(g.height) as i64 + pc.unsigned_abs().max(pr.unsigned_abs()) as i64;
    for k in 0..=max_ring {
        // Every centre in ring k is at least (k - 1/2) cells away.
        if best <= (k as f64 - 0.5) * g.resolution {
            break;
        }
        let mut visit = |c: i64, r: i64| {
            if g.in_bounds(c, r) && g.get(c as usize, r as usize) == Cell::Occupied {
                let d = (g.cell_center(c as usize, r as usize) - p).norm();
                if d < best {
                    best = d;
                }
            }
        };
        if k == 0 {
            visit(pc, pr);
            continue;
        }
        for c in (pc - k)..=(pc + k) {
            visit(c, pr - k);
            visit(c, pr + k);
        }
        for r in (pr - k + 1)..=(pr + k - 1) {
            visit(pc - k, r);
            visit(pc + k, r);
        }
    }
    best
}

/// Closing (dilate then erode) of the Occupied class with a `kernel x kernel`
/// square structuring element. Cells that become Occupied overwrite
/// Free/Unknown; all other cells keep their value.
///
/// The closing is computed as if the grid were embedded in an unbounded
/// plane of non-occupied cells, which keeps it extensive and idempotent.
///
/// # Panics
/// If `kernel` is even or zero.
pub fn morphological_close(g: &OccupancyGrid, kernel: usize) -> OccupancyGrid {
    assert!(kernel % 2 == 1, "closing kernel must be odd, got {kernel}");
    let r = kernel / 2;
    if r == 0 {
        return g.clone();
    }
    let (w, h) = (g.width, g.height);
    let mask = g.occupied_mask();
    // Dilation on a domain padded by r on each side.
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let mut padded = vec![false; pw * ph];
    for row in 0..h {
        for col in 0..w {
            padded[(row + r) * pw + col + r] = mask[row * w + col];
        }
    }
    let dilated = separable_filter(&padded, pw, ph, r, false, false);
    let eroded = separable_filter(&dilated, pw, ph, r, true, false);
    let mut out = g.clone();
    for row in 0..h {
        for col in 0..w {
            if eroded[(row + r) * pw + col + r] {
                out.cells[row * w + col] = Cell::Occupied;
            }
        }
    }
    out
}

/// Square max (`erode == false`) or min filter of radius `r`; samples outside
/// the domain read as `outside`.
fn separable_filter(
    src: &[bool],
    w: usize,
    h: usize,
    r: usize,
    erode: bool,
    outside: bool,
) -> Vec<bool> {
    let combine = |acc: bool, v: bool| if erode { acc && v } else { acc || v };
    let r = r as i64;
    let mut tmp = vec![false; w * h];
    for row in 0..h {
        for col in 0..w as i64 {
            let mut acc = erode;
            for dc in -r..=r {
                let c = col + dc;
                let v = if c < 0 || c >= w as i64 {
                    outside
                } else {
                    src[row * w + c as usize]
                };
                acc = combine(acc, v);
            }
            tmp[row * w + col as usize] = acc;
        }
    }
    let mut out = vec![false; w * h];
    for row in 0..h as i64 {
        for col in 0..w {
            let mut acc = erode;
            for dr in -r..=r {
                let rr = row + dr;
                let v = if rr < 0 || rr >= h as i64 {
                    outside
                } else {
                    tmp[rr as usize * w + col]
                };
                acc = combine(acc, v);
            }
            out[row as usize * w + col] = acc;
        }
    }
    out
}

/// Observed map with Unknown cells filled from a prediction; the map the
/// planners consume. Immutable once built.
pub struct PlanningMap {
    grid: OccupancyGrid,
    provenance: Vec<Provenance>,
    field: OnceLock<ClearanceField>,
}

impl Clone for PlanningMap {
    fn clone(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            provenance: self.provenance.clone(),
            field: OnceLock::new(),
        }
    }
}

impl fmt::Debug for PlanningMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlanningMap")
            .field("width", &self.grid.width)
            .field("height", &self.grid.height)
            .field("origin", &self.grid.origin)
            .finish()
    }
}

impl PlanningMap {
    /// Planning map made only of observations.
    pub fn from_observed(grid: OccupancyGrid) -> Self {
        let provenance = vec![Provenance::Observed; grid.cells.len()];
        Self {
            grid,
            provenance,
            field: OnceLock::new(),
        }
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn provenance_at(&self, col: usize, row: usize) -> Provenance {
        self.provenance[self.grid.index(col, row)]
    }

    fn field(&self) -> &ClearanceField {
        self.field.get_or_init(|| ClearanceField::new(&self.grid))
    }

    /// Same contract as [`OccupancyGrid::clearance`].
    pub fn clearance(&self, p: &Point) -> Result<f64, GridError> {
        self.grid.world_to_cell(p)?;
        Ok(self
            .nearest_occupied(p, f64::INFINITY)
            .map_or(f64::INFINITY, |(_, d)| d))
    }

    /// True when `p` lies inside the extent and no Occupied centre is closer
    /// than `radius`.
    pub fn is_clear(&self, p: &Point, radius: f64) -> bool {
        if !self.grid.contains(p) {
            return false;
        }
        self.field().is_clear(&self.grid, p, radius)
    }

    /// Nearest Occupied cell centre to `p` if one lies within `cap`. Works for
    /// points outside the extent too.
    pub fn nearest_occupied(&self, p: &Point, cap: f64) -> Option<(Point, f64)> {
        self.field().nearest(&self.grid, p, cap)
    }

    /// Constant-time variant of [`Self::nearest_occupied`]; see
    /// [`ClearanceField::nearest_approx`].
    pub fn nearest_occupied_approx(&self, p: &Point, cap: f64) -> Option<(Point, f64)> {
        self.field().nearest_approx(&self.grid, p, cap)
    }

    /// True when the straight segment `a -> b` keeps `radius` clearance,
    /// sampled at most `step` apart (endpoints included).
    pub fn segment_clear(&self, a: &Point, b: &Point, radius: f64, step: f64) -> bool {
        let len = (b - a).norm();
        let n = (len / step).ceil().max(1.0) as usize;
        (0..=n).all(|i| self.is_clear(&(a + (b - a) * (i as f64 / n as f64)), radius))
    }
}

/// Fuses an observed grid with a prediction on the same lattice. Observed
/// non-Unknown cells pass through; observed-Unknown cells covered by the
/// prediction take the predicted value with `Predicted` provenance. The
/// output spans the union of both extents.
pub fn fuse(observed: &OccupancyGrid, predicted: &OccupancyGrid) -> Result<PlanningMap, GridError> {
    let (px, py) = observed.lattice_offset(predicted).ok_or_else(|| {
        GridError::GridMismatch(format!(
            "resolution {} vs {}, origins {:?} vs {:?}",
            observed.resolution, predicted.resolution, observed.origin, predicted.origin
        ))
    })?;
    let min_c = 0.min(px);
    let min_r = 0.min(py);
    let max_c = (observed.width as i64).max(px + predicted.width as i64);
    let max_r = (observed.height as i64).max(py + predicted.height as i64);
    let (w, h) = ((max_c - min_c) as usize, (max_r - min_r) as usize);
    let origin = Point::new(
        observed.origin.x + min_c as f64 * observed.resolution,
        observed.origin.y + min_r as f64 * observed.resolution,
    );
    let mut cells = Vec::with_capacity(w * h);
    let mut provenance = Vec::with_capacity(w * h);
    for row in min_r..max_r {
        for col in min_c..max_c {
            let obs = if observed.in_bounds(col, row) {
                observed.get(col as usize, row as usize)
            } else {
                Cell::Unknown
            };
            let (pc, pr) = (col - px, row - py);
            if obs == Cell::Unknown && predicted.in_bounds(pc, pr) {
                cells.push(predicted.get(pc as usize, pr as usize));
                provenance.push(Provenance::Predicted);
            } else {
                cells.push(obs);
                provenance.push(Provenance::Observed);
            }
        }
    }
    let grid = OccupancyGrid {
        resolution: observed.resolution,
        origin,
        width: w,
        height: h,
        cells,
    };
    Ok(PlanningMap {
        grid,
        provenance,
        field: OnceLock::new(),
    })
}

/// Exact Euclidean distance transform over cell centres (Felzenszwalb &
/// Huttenlocher lower envelope), used to answer clearance queries quickly.
#[derive(Clone, Debug)]
pub struct ClearanceField {
    /// Distance in metres from each cell centre to the nearest occupied centre.
    dist: Vec<f64>,
    /// Index of that nearest occupied cell.
    site: Vec<u32>,
    any_occupied: bool,
}

impl ClearanceField {
    pub fn new(g: &OccupancyGrid) -> Self {
        let (w, h) = (g.width, g.height);
        let inf = 1e20;
        let mut f: Vec<f64> = g
            .cells
            .iter()
            .map(|&c| if c == Cell::Occupied { 0.0 } else { inf })
            .collect();
        let any_occupied = f.contains(&0.0);
        // Row of the nearest occupied cell within each column, then the
        // full site after the row pass.
        let mut near_row = vec![0u32; w * h];
        let mut site = vec![0u32; w * h];
        let n = w.max(h);
        let (mut buf_in, mut buf_out, mut arg) = (vec![0.0; n], vec![0.0; n], vec![0usize; n]);
        for col in 0..w {
            for row in 0..h {
                buf_in[row] = f[row * w + col];
            }
            edt_1d(&buf_in[..h], &mut buf_out[..h], &mut arg[..h]);
            for row in 0..h {
                f[row * w + col] = buf_out[row];
                near_row[row * w + col] = arg[row] as u32;
            }
        }
        for row in 0..h {
            buf_in[..w].copy_from_slice(&f[row * w..(row + 1) * w]);
            edt_1d(&buf_in[..w], &mut buf_out[..w], &mut arg[..w]);
            f[row * w..(row + 1) * w].copy_from_slice(&buf_out[..w]);
            for col in 0..w {
                let c = arg[col];
                site[row * w + col] = near_row[row * w + c] * w as u32 + c as u32;
            }
        }
        let dist = f
            .into_iter()
            .map(|d2| {
                if d2 >= inf * 0.5 {
                    f64::INFINITY
                } else {
                    d2.sqrt() * g.resolution
                }
            })
            .collect();
        Self {
            dist,
            site,
            any_occupied,
        }
    }

    /// Nearest occupied centre among the nearest sites of the (up to) four
    /// cells whose centres surround `p`. Exact at cell centres and within
    /// about one cell width elsewhere; `None` beyond `cap`.
    pub fn nearest_approx(&self, g: &OccupancyGrid, p: &Point, cap: f64) -> Option<(Point, f64)> {
        if !self.any_occupied {
            return None;
        }
        let fx = (p.x - g.origin.x) / g.resolution - 0.5;
        let fy = (p.y - g.origin.y) / g.resolution - 0.5;
        let (c0, r0) = (fx.floor() as i64, fy.floor() as i64);
        let mut best: Option<(Point, f64)> = None;
        for (dc, dr) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let c = (c0 + dc).clamp(0, g.width as i64 - 1) as usize;
            let r = (r0 + dr).clamp(0, g.height as i64 - 1) as usize;
            let i = g.index(c, r);
            if !self.dist[i].is_finite() {
                continue;
            }
            let s = self.site[i] as usize;
            let q = g.cell_center(s % g.width, s / g.width);
            let d = (q - p).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((q, d));
            }
        }
        best.filter(|&(_, d)| d <= cap)
    }

    pub fn at_cell(&self, g: &OccupancyGrid, col: usize, row: usize) -> f64 {
        self.dist[g.index(col, row)]
    }

    fn anchor(&self, g: &OccupancyGrid, p: &Point) -> (f64, f64) {
        let (c, r) = g.cell_coords(p);
        let c = c.clamp(0, g.width as i64 - 1) as usize;
        let r = r.clamp(0, g.height as i64 - 1) as usize;
        (self.dist[g.index(c, r)], (g.cell_center(c, r) - p).norm())
    }

    fn is_clear(&self, g: &OccupancyGrid, p: &Point, radius: f64) -> bool {
        if !self.any_occupied {
            return true;
        }
        let (d0, off) = self.anchor(g, p);
        if d0 - off >= radius {
            return true;
        }
        if d0 + off < radius {
            return false;
        }
        exact_nearest(g, p, radius).is_none_or(|(_, d)| d >= radius)
    }

    fn nearest(&self, g: &OccupancyGrid, p: &Point, cap: f64) -> Option<(Point, f64)> {
        if !self.any_occupied {
            return None;
        }
        let (d0, off) = self.anchor(g, p);
        if d0 - off > cap {
            return None;
        }
        exact_nearest(g, p, cap.min(d0 + off)).filter(|&(_, d)| d <= cap)
    }
}

/// Brute-force nearest occupied centre among cells whose centres could lie
/// within `radius` of `p`.
fn exact_nearest(g: &OccupancyGrid, p: &Point, radius: f64) -> Option<(Point, f64)> {
    let res = g.resolution;
    let lo_c = (((p.x - radius - g.origin.x) / res).floor() as i64 - 1).max(0);
    let hi_c = (((p.x + radius - g.origin.x) / res).floor() as i64 + 1).min(g.width as i64 - 1);
    let lo_r = (((p.y - radius - g.origin.y) / res).floor() as i64 - 1).max(0);
    let hi_r = (((p.y + radius - g.origin.y) / res).floor() as i64 + 1).min(g.height as i64 - 1);
    let mut best: Option<(Point, f64)> = None;
    for row in lo_r..=hi_r {
        for col in lo_c..=hi_c {
            let (c, r) = (col as usize, row as usize);
            if g.get(c, r) != Cell::Occupied {
                continue;
            }
            let q = g.cell_center(c, r);
            let d = (q - p).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((q, d));
            }
        }
    }
    best
}

/// 1-D squared distance transform of a sampled function; `arg` receives
/// the minimizing sample of each output.
fn edt_1d(f: &[f64], d: &mut [f64], arg: &mut [usize]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = dq * dq + f[v[k]];
        arg[q] = v[k];
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

/// Serializes a grid: three ASCII header lines
/// (`OGRID 1`, `<width> <height>`, `<resolution> <origin_x> <origin_y>`)
/// followed by `width * height` row-major cell bytes {0, 1, 2}.
pub fn encode_grid(g: &OccupancyGrid) -> Vec<u8> {
    let header = format!(
        "{GRID_MAGIC}\n{} {}\n{} {} {}\n",
        g.width, g.height, g.resolution, g.origin.x, g.origin.y
    );
    let mut out = Vec::with_capacity(header.len() + g.cells.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(g.cells.iter().map(|c| c.to_byte()));
    out
}

/// Parses the format written by [`encode_grid`].
pub fn decode_grid(bytes: &[u8]) -> Result<OccupancyGrid, GridError> {
    let mut rest = bytes;
    let mut next_line = || -> Result<&str, GridError> {
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GridError::Parse("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| GridError::Parse("header is not UTF-8".into()))?;
        rest = &rest[nl + 1..];
        Ok(line)
    };
    if next_line()? != GRID_MAGIC {
        return Err(GridError::Parse("bad magic line".into()));
    }
    let dims: Vec<&str> = next_line()?.split_ascii_whitespace().collect();
    let [w, h] = dims[..] else {
        return Err(GridError::Parse("expected `<width> <height>`".into()));
    };
    let parse_dim = |s: &str| -> Result<usize, GridError> {
        let v: usize = s
            .parse()
            .map_err(|_| GridError::Parse(format!("bad dimension `{s}`")))?;
        if v == 0 || v > MAX_GRID_EDGE {
            return Err(GridError::Parse(format!("dimension {v} out of range")));
        }
        Ok(v)
    };
    let (width, height) = (parse_dim(w)?, parse_dim(h)?);
    let geo: Vec<&str> = next_line()?.split_ascii_whitespace().collect();
    let [res, ox, oy] = geo[..] else {
        return Err(GridError::Parse(
            "expected `<resolution> <origin_x> <origin_y>`".into(),
        ));
    };
    let parse_f = |s: &str| -> Result<f64, GridError> {
        s.parse()
            .map_err(|_| GridError::Parse(format!("bad number `{s}`")))
    };
    let (resolution, ox, oy) = (parse_f(res)?, parse_f(ox)?, parse_f(oy)?);
    let body = rest;
    if body.len() != width * height {
        return Err(GridError::Parse(format!(
            "expected {} cell bytes, found {}",
            width * height,
            body.len()
        )));
    }
    let cells = body
        .iter()
        .map(|&b| Cell::from_byte(b).ok_or_else(|| GridError::Parse(format!("bad cell byte {b}"))))
        .collect::<Result<Vec<_>, _>>()?;
    OccupancyGrid::from_cells(width, height, resolution, Point::new(ox, oy), cells)
        .map_err(|e| GridError::Parse(e.to_string()))
}

pub fn save_grid(g: &OccupancyGrid, path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, encode_grid(g))
}

pub fn load_grid(path: &std::path::Path) -> Result<OccupancyGrid, crate::Error> {
    let bytes = std::fs::read(path)?;
    Ok(decode_grid(&bytes)?)
}

/// Unit vector helper shared by the planners.
pub(crate) fn unit(v: Vector2<f64>) -> Vector2<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector2::zeros()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize, fill: Cell) -> OccupancyGrid {
        OccupancyGrid::new(w, h, 0.05, Point::new(0.0, 0.0), fill).unwrap()
    }

    fn brute_clearance(g: &OccupancyGrid, p: &Point) -> f64 {
        let mut best = f64::INFINITY;
        for row in 0..g.height() {
            for col in 0..g.width() {
                if g.get(col, row) == Cell::Occupied {
                    best = best.min((g.cell_center(col, row) - p).norm());
                }
            }
        }
        best
    }

    /// Set-based closing written independently of the separable filters.
    fn naive_close(g: &OccupancyGrid, k: usize) -> Vec<bool> {
        let r = (k / 2) as i64;
        let (w, h) = (g.width() as i64, g.height() as i64);
        let occ = |c: i64, r_: i64| {
            c >= 0 && r_ >= 0 && c < w && r_ < h && g.get(c as usize, r_ as usize) == Cell::Occupied
        };
        let dil = |c: i64, rr: i64| (-r..=r).any(|dc| (-r..=r).any(|dr| occ(c + dc, rr + dr)));
        let mut out = vec![false; (w * h) as usize];
        for rr in 0..h {
            for c in 0..w {
                out[(rr * w + c) as usize] =
                    (-r..=r).all(|dc| (-r..=r).all(|dr| dil(c + dc, rr + dr)));
            }
        }
        out
    }

    #[test]
    fn world_to_cell_floor_and_bounds() {
        let g = OccupancyGrid::new(10, 10, 0.05, Point::new(1.0, -2.0), Cell::Free).unwrap();
        assert_eq!(g.world_to_cell(&Point::new(1.0, -2.0)).unwrap(), (0, 0));
        assert_eq!(g.world_to_cell(&Point::new(1.07, -1.88)).unwrap(), (1, 2));
        assert!(matches!(
            g.world_to_cell(&Point::new(0.99, -2.0)),
            Err(GridError::OutOfBounds { .. })
        ));
        // Upper edge is exclusive.
        assert!(g.world_to_cell(&Point::new(1.5, -1.9)).is_err());
    }

    #[test]
    fn submap_sizes_and_clipping() {
        let g = grid(400, 400, Cell::Free);
        let sub = g.extract_submap(&Point::new(10.0, 10.0), 6.0);
        assert_eq!((sub.width(), sub.height()), (120, 120));
        assert!(sub.cells().iter().all(|&c| c == Cell::Free));
        let far = g.extract_submap(&Point::new(100.0, 100.0), 6.0);
        assert!(far.cells().iter().all(|&c| c == Cell::Unknown));
        let out = g.extract_submap(&Point::new(10.0, 10.0), 7.5);
        assert_eq!(out.width(), 150);
        // Lattice stays aligned with the source.
        assert!(g.lattice_offset(&sub).is_some());
    }

    #[test]
    fn close_leaves_free_grid_and_solid_block() {
        let g = grid(30, 30, Cell::Free);
        assert_eq!(morphological_close(&g, 5), g);
        let mut b = grid(30, 30, Cell::Unknown);
        for r in 10..20 {
            for c in 10..20 {
                b.set(c, r, Cell::Occupied);
            }
        }
        assert_eq!(morphological_close(&b, 5), b);
    }

    #[test]
    fn close_fills_gap_between_parallel_walls() {
        let mut g = grid(20, 14, Cell::Free);
        for c in 2..=12 {
            g.set(c, 5, Cell::Occupied);
            g.set(c, 8, Cell::Occupied);
        }
        let closed = morphological_close(&g, 5);
        // Hand-applied closing: the rows between the walls fill wherever the
        // full 5x5 window around the cell stays within the dilated walls,
        // i.e. columns 2..=12 (dilation spans columns 0..=14).
        for c in 2..=12 {
            assert_eq!(closed.get(c, 6), Cell::Occupied, "col {c}");
            assert_eq!(closed.get(c, 7), Cell::Occupied, "col {c}");
        }
        assert_eq!(closed.get(1, 6), Cell::Free);
        assert_eq!(closed.get(13, 7), Cell::Free);
        let oracle = naive_close(&g, 5);
        assert_eq!(closed.occupied_mask(), oracle);
    }

    #[test]
    fn fusion_rules() {
        let mut obs = grid(4, 4, Cell::Unknown);
        obs.set(0, 0, Cell::Free);
        obs.set(1, 0, Cell::Occupied);
        let mut pred =
            OccupancyGrid::new(6, 6, 0.05, Point::new(-0.05, -0.05), Cell::Occupied).unwrap();
        pred.set(3, 3, Cell::Unknown); // observed (2, 2)
        let pm = fuse(&obs, &pred).unwrap();
        assert_eq!(pm.grid().width(), 6);
        let at = |c, r| (pm.grid().get(c, r), pm.provenance_at(c, r));
        assert_eq!(at(1, 1), (Cell::Free, Provenance::Observed));
        assert_eq!(at(2, 1), (Cell::Occupied, Provenance::Observed));
        assert_eq!(at(2, 2), (Cell::Occupied, Provenance::Predicted));
        assert_eq!(at(3, 3), (Cell::Unknown, Provenance::Predicted));
        assert_eq!(at(0, 0), (Cell::Occupied, Provenance::Predicted));

        let skewed =
            OccupancyGrid::new(6, 6, 0.05, Point::new(-0.07, -0.05), Cell::Occupied).unwrap();
        assert!(matches!(
            fuse(&obs, &skewed),
            Err(GridError::GridMismatch(_))
        ));
        let coarse = OccupancyGrid::new(6, 6, 0.1, Point::new(0.0, 0.0), Cell::Free).unwrap();
        assert!(fuse(&obs, &coarse).is_err());
    }

    #[test]
    fn clearance_cases() {
        let mut g = grid(64, 64, Cell::Free);
        let p = g.cell_center(10, 10);
        assert_eq!(g.clearance(&p).unwrap(), f64::INFINITY);
        g.set(30, 10, Cell::Occupied);
        assert!((g.clearance(&p).unwrap() - 1.0).abs() <= 0.05);
        assert!(g.clearance(&Point::new(-1.0, 0.0)).is_err());
        let pm = PlanningMap::from_observed(g.clone());
        assert!((pm.clearance(&p).unwrap() - 1.0).abs() < 1e-12);
        assert!(pm.is_clear(&p, 0.99));
        assert!(!pm.is_clear(&p, 1.01));
    }

    #[test]
    fn wall_adjacent_clearance_matches_scan() {
        let mut g = grid(64, 64, Cell::Free);
        for r in 0..64 {
            g.set(40, r, Cell::Occupied);
        }
        let pm = PlanningMap::from_observed(g.clone());
        for &(x, y) in &[(1.93, 0.51), (2.04, 3.1), (1.999, 1.25), (0.0, 0.0)] {
            let p = Point::new(x, y);
            let b = brute_clearance(&g, &p);
            assert_eq!(g.clearance(&p).unwrap(), b);
            assert_eq!(pm.clearance(&p).unwrap(), b);
        }
    }

    #[test]
    fn grid_file_round_trip_and_errors() {
        let mut g = OccupancyGrid::new(
            7,
            3,
            0.05,
            Point::new(-1.234567890123, 0.1 + 0.2),
            Cell::Free,
        )
        .unwrap();
        g.set(3, 1, Cell::Occupied);
        g.set(6, 2, Cell::Unknown);
        let bytes = encode_grid(&g);
        let back = decode_grid(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(encode_grid(&back), bytes);
        assert!(decode_grid(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 7;
        assert!(decode_grid(&bad).is_err());
        assert!(decode_grid(b"OGRID 2\n1 1\n0.05 0 0\n\0").is_err());
    }

    fn arb_grid(max: usize) -> impl Strategy<Value = OccupancyGrid> {
        (2..max, 2..max).prop_flat_map(|(w, h)| {
            proptest::collection::vec(
                prop_oneof![4 => Just(Cell::Free), 2 => Just(Cell::Occupied), 1 => Just(Cell::Unknown)],
                w * h,
            )
            .prop_map(move |cells| {
                OccupancyGrid::from_cells(w, h, 0.05, Point::new(0.3, -0.2), cells).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn close_is_idempotent_and_extensive(g in arb_grid(24)) {
            let once = morphological_close(&g, 5);
            let twice = morphological_close(&once, 5);
            prop_assert_eq!(once.occupied_mask(), twice.occupied_mask());
            for (a, b) in g.cells().iter().zip(once.cells()) {
                if *a == Cell::Occupied { prop_assert_eq!(*b, Cell::Occupied); }
                if *b != Cell::Occupied { prop_assert_eq!(a, b); }
            }
            prop_assert_eq!(once.occupied_mask(), naive_close(&g, 5));
        }

        #[test]
        fn fuse_preserves_observed(obs in arb_grid(20), pred in arb_grid(26), dx in -3i64..3, dy in -3i64..3) {
            let pred = OccupancyGrid::from_cells(
                pred.width(), pred.height(), 0.05,
                Point::new(0.3 + dx as f64 * 0.05, -0.2 + dy as f64 * 0.05),
                pred.cells().to_vec()).unwrap();
            let pm = fuse(&obs, &pred).unwrap();
            let (ox, oy) = pm.grid().lattice_offset(&obs).unwrap();
            for r in 0..obs.height() {
                for c in 0..obs.width() {
                    let (fc, fr) = ((c as i64 + ox) as usize, (r as i64 + oy) as usize);
                    let o = obs.get(c, r);
                    if o != Cell::Unknown {
                        prop_assert_eq!(pm.grid().get(fc, fr), o);
                        prop_assert_eq!(pm.provenance_at(fc, fr), Provenance::Observed);
                    }
                }
            }
            for r in 0..pm.grid().height() {
                for c in 0..pm.grid().width() {
                    if pm.provenance_at(c, r) == Provenance::Predicted {
                        let p = pm.grid().cell_center(c, r);
                        prop_assert!(obs.cell_at(&p).is_none_or(|o| o == Cell::Unknown));
                    }
                }
            }
        }

        #[test]
        fn clearance_matches_exhaustive_scan(g in arb_grid(64), fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let max = g.max_corner();
            let p = Point::new(
                g.origin().x + fx * (max.x - g.origin().x) * 0.999_999,
                g.origin().y + fy * (max.y - g.origin().y) * 0.999_999,
            );
            let b = brute_clearance(&g, &p);
            prop_assert_eq!(g.clearance(&p).unwrap(), b);
            let pm = PlanningMap::from_observed(g.clone());
            prop_assert_eq!(pm.clearance(&p).unwrap(), b);
        }

        #[test]
        fn cell_center_round_trips(w in 1usize..80, h in 1usize..80, ox in -50.0f64..50.0, oy in -50.0f64..50.0) {
            let g = OccupancyGrid::new(w, h, 0.05, Point::new(ox, oy), Cell::Free).unwrap();
            for r in 0..h {
                for c in 0..w {
                    prop_assert_eq!(g.world_to_cell(&g.cell_center(c, r)).unwrap(), (c, r));
                }
            }
        }
    }
}
