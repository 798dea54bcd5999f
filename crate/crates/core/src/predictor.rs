//! Map prediction: a geometric wall extrapolator and the forward pass of the
//! convolutional encoder-decoder, plus the binary weight format.
//!
//! Shape chain of the network for a 120-cell input (4x4 kernels, stride 2):
//!
//! | stage | encoder out | decoder out (before crop) | after crop |
//! |-------|-------------|---------------------------|------------|
//! | 1     | 60          | 2                         | 2          |
//! | 2     | 30          | 4                         | 4          |
//! | 3     | 15          | 8                         | 8          |
//! | 4     | 8           | 16                        | 15         |
//! | 5     | 4           | 30                        | 30         |
//! | 6     | 2           | 60                        | 60         |
//! | 7     | 1           | 120                       | 120        |
//!
//! Convolutions pad one cell on the low side and `1 + (size % 2)` on the high
//! side, so an odd input of size `n` yields `ceil(n / 2)`. Transposed
//! convolutions (padding 1) double the size; the result is cropped on the
//! high side to the mirrored encoder size before skip concatenation.
//! The score field is then bilinearly resized to 150 (half-pixel centres)
//! and reduced by argmax with ties going to the lower class index
//! (Free < Occupied < Unknown).

use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gridmap::{morphological_close, Cell, OccupancyGrid, Point};

pub const INPUT_CELLS: usize = 120;
pub const OUTPUT_CELLS: usize = 150;
pub const CLASSES: usize = 3;
pub const KERNEL: usize = 4;
pub const BN_EPS: f32 = 1e-5;
pub const ENCODER_FILTERS: [usize; 7] = [64, 128, 256, 512, 512, 512, 512];
pub const DECODER_FILTERS: [usize; 7] = [512, 1024, 1024, 1024, 512, 256, 128];
pub const WEIGHT_MAGIC: &[u8; 4] = b"OMPW";
pub const WEIGHT_VERSION: u32 = 1;
/// Closing kernel applied to predictions.
pub const POSTPROCESS_KERNEL: usize = 5;
/// Width of the Free band beside an extrapolated wall, m.
pub const BASELINE_FREE_BAND: f64 = 0.4;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("expected a {expected}x{expected} grid, got {width}x{height}")]
    DimensionMismatch {
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight format version {0}")]
    UnsupportedVersion(u32),
    #[error("weight shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weight file truncated")]
    TruncatedFile,
    #[error("weight file contains non-finite values")]
    NonFiniteWeights,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Robot-centred 120 x 120 observed submap.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorInput {
    grid: OccupancyGrid,
}

impl PredictorInput {
    pub fn new(grid: OccupancyGrid) -> Result<Self, PredictError> {
        if grid.width() != INPUT_CELLS || grid.height() != INPUT_CELLS {
            return Err(PredictError::DimensionMismatch {
                expected: INPUT_CELLS,
                width: grid.width(),
                height: grid.height(),
            });
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    /// Channel-major one-hot encoding, `3 x 120 x 120`.
    pub fn one_hot(&self) -> Vec<f32> {
        let n = INPUT_CELLS * INPUT_CELLS;
        let mut out = vec![0.0; CLASSES * n];
        for (i, c) in self.grid.cells().iter().enumerate() {
            out[c.class_index() * n + i] = 1.0;
        }
        out
    }

    /// Origin of the co-centred 150 x 150 output grid.
    pub fn output_origin(&self) -> Point {
        let pad = ((OUTPUT_CELLS - INPUT_CELLS) / 2) as f64 * self.grid.resolution();
        self.grid.origin() - Vector2::repeat(pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorOutput {
    /// Channel-major `3 x 150 x 150` class scores.
    pub scores: Vec<f32>,
    pub grid: OccupancyGrid,
}

impl PredictorOutput {
    fn from_scores(scores: Vec<f32>, origin: Point, resolution: f64) -> Self {
        let n = OUTPUT_CELLS * OUTPUT_CELLS;
        let cells = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..CLASSES {
                    if scores[c * n + i] > scores[best * n + i] {
                        best = c;
                    }
                }
                [Cell::Free, Cell::Occupied, Cell::Unknown][best]
            })
            .collect();
        let grid = OccupancyGrid::from_cells(OUTPUT_CELLS, OUTPUT_CELLS, resolution, origin, cells)
            .expect("valid output geometry");
        Self { scores, grid }
    }

    fn from_grid(grid: OccupancyGrid) -> Self {
        let n = OUTPUT_CELLS * OUTPUT_CELLS;
        let mut scores = vec![0.0; CLASSES * n];
        for (i, c) in grid.cells().iter().enumerate() {
            scores[c.class_index() * n + i] = 1.0;
        }
        Self { scores, grid }
    }
}

/// Map predictors are pure: the same input always gives the same output.
pub trait Predictor: Send + Sync {
    fn predict(&self, input: &PredictorInput) -> Result<PredictorOutput, PredictError>;
}

/// Closes the argmax grid with the 5 x 5 kernel.
pub fn postprocess(out: &PredictorOutput) -> OccupancyGrid {
    morphological_close(&out.grid, POSTPROCESS_KERNEL)
}

// ---------------------------------------------------------------------------
// Baseline
// ---------------------------------------------------------------------------

/// Extends observed walls straight into Unknown space.
#[derive(Clone, Copy, Debug, Default)]
pub struct BaselinePredictor;

impl Predictor for BaselinePredictor {
    fn predict(&self, input: &PredictorInput) -> Result<PredictorOutput, PredictError> {
        Ok(baseline_extrapolate(input))
    }
}

const PCA_HALF: i64 = 3;
const PCA_MIN_POINTS: usize = 4;
/// Minor-to-major eigenvalue ratio above which a neighbourhood is not a line.
const PCA_MAX_ANISOTROPY: f64 = 0.1;

struct Extension {
    cells: Vec<(i64, i64)>,
    /// Unit normal pointing to the known-Free side, or zero if undecided.
    free_side: Vector2<f64>,
}

/// Wall extrapolation: each Occupied cell touching Unknown whose 7 x 7
/// Occupied neighbourhood is line-like, and which is the extreme end of that
/// line, is marched along the line through Unknown cells until a known cell
/// or the border. A band of 0.4 m beside each extension on the side observed
/// Free is marked Free. Remaining cells stay Unknown.
pub fn baseline_extrapolate(input: &PredictorInput) -> PredictorOutput {
    let g = input.grid();
    let off = ((OUTPUT_CELLS - INPUT_CELLS) / 2) as i64;
    let mut out = OccupancyGrid::new(
        OUTPUT_CELLS,
        OUTPUT_CELLS,
        g.resolution(),
        input.output_origin(),
        Cell::Unknown,
    )
    .expect("valid output geometry");
    for row in 0..INPUT_CELLS {
        for col in 0..INPUT_CELLS {
            out.set(col + off as usize, row + off as usize, g.get(col, row));
        }
    }
    let known = out.clone();
    let at = |c: i64, r: i64| -> Cell {
        if known.in_bounds(c, r) {
            known.get(c as usize, r as usize)
        } else {
            Cell::Unknown
        }
    };
    let mut extensions = Vec::new();
    for r in off..off + INPUT_CELLS as i64 {
        for c in off..off + INPUT_CELLS as i64 {
            if at(c, r) != Cell::Occupied {
                continue;
            }
            let touches_unknown =
                (-1..=1).any(|dr| (-1..=1).any(|dc| at(c + dc, r + dr) == Cell::Unknown));
            if !touches_unknown {
                continue;
            }
            if let Some(ext) = extend_from(c, r, &at, &known) {
                extensions.push(ext);
            }
        }
    }
    for ext in &extensions {
        for &(c, r) in &ext.cells {
            out.set(c as usize, r as usize, Cell::Occupied);
        }
    }
    let band = (BASELINE_FREE_BAND / g.resolution()).round() as i64;
    for ext in &extensions {
        if ext.free_side == Vector2::zeros() {
            continue;
        }
        for &(c, r) in &ext.cells {
            for k in 1..=band {
                let q = Vector2::new(c as f64, r as f64) + ext.free_side * k as f64;
                let (qc, qr) = (q.x.round() as i64, q.y.round() as i64);
                if out.in_bounds(qc, qr) && out.get(qc as usize, qr as usize) == Cell::Unknown {
                    out.set(qc as usize, qr as usize, Cell::Free);
                }
            }
        }
    }
    PredictorOutput::from_grid(out)
}

fn extend_from(
    c: i64,
    r: i64,
    at: &impl Fn(i64, i64) -> Cell,
    known: &OccupancyGrid,
) -> Option<Extension> {
    let mut pts = Vec::new();
    for dr in -PCA_HALF..=PCA_HALF {
        for dc in -PCA_HALF..=PCA_HALF {
            if at(c + dc, r + dr) == Cell::Occupied {
                pts.push(Vector2::new((c + dc) as f64, (r + dr) as f64));
            }
        }
    }
    if pts.len() < PCA_MIN_POINTS {
        return None;
    }
    let mean = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
    let cov = pts.iter().fold(Matrix2::zeros(), |acc, p| {
        acc + (p - mean) * (p - mean).transpose()
    }) / pts.len() as f64;
    let eig = cov.symmetric_eigen();
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    if eig.eigenvalues[major] <= 0.0
        || eig.eigenvalues[minor] > PCA_MAX_ANISOTROPY * eig.eigenvalues[major]
    {
        return None;
    }
    let axis: Vector2<f64> = eig.eigenvectors.column(major).into_owned();
    let here = Vector2::new(c as f64, r as f64);
    // Extend only from the extreme end along the axis, away from the rest.
    let proj = |p: &Vector2<f64>| (p - here).dot(&axis);
    let (lo, hi) = pts.iter().fold((0.0f64, 0.0f64), |(lo, hi), p| {
        (lo.min(proj(p)), hi.max(proj(p)))
    });
    let dir = if hi <= 0.5 && lo < -0.5 {
        axis
    } else if lo >= -0.5 && hi > 0.5 {
        -axis
    } else {
        return None;
    };
    let mut cells = Vec::new();
    let mut t = 1.0;
    loop {
        let q = here + dir * t;
        let (qc, qr) = (q.x.round() as i64, q.y.round() as i64);
        if !known.in_bounds(qc, qr) || at(qc, qr) != Cell::Unknown {
            break;
        }
        if cells.last() != Some(&(qc, qr)) {
            cells.push((qc, qr));
        }
        t += 0.5;
    }
    if cells.is_empty() {
        return None;
    }
    // Free side: whichever side of the wall shows more Free cells nearby.
    let normal = Vector2::new(-dir.y, dir.x);
    let mut balance = 0i64;
    for dr in -PCA_HALF..=PCA_HALF {
        for dc in -PCA_HALF..=PCA_HALF {
            if at(c + dc, r + dr) == Cell::Free {
                let side = normal.dot(&Vector2::new(dc as f64, dr as f64));
                if side > 0.5 {
                    balance += 1;
                } else if side < -0.5 {
                    balance -= 1;
                }
            }
        }
    }
    let free_side = match balance.signum() {
        1 => normal,
        -1 => -normal,
        _ => Vector2::zeros(),
    };
    Some(Extension { cells, free_side })
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkMeta {
    pub input_size: usize,
    pub output_size: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub encoder: Vec<usize>,
    /// Input width of each transposed convolution.
    pub decoder: Vec<usize>,
}

impl Default for NetworkMeta {
    fn default() -> Self {
        Self {
            input_size: INPUT_CELLS,
            output_size: OUTPUT_CELLS,
            classes: CLASSES,
            in_channels: CLASSES,
            encoder: ENCODER_FILTERS.to_vec(),
            decoder: DECODER_FILTERS.to_vec(),
        }
    }
}

impl NetworkMeta {
    /// Output width of decoder stage `j`.
    pub fn decoder_out(&self, j: usize) -> usize {
        let n = self.encoder.len();
        if j + 1 == n {
            self.classes
        } else {
            self.decoder[j + 1] - self.encoder[n - 2 - j]
        }
    }

    fn validate(&self) -> Result<(), PredictError> {
        let bad = |m: String| Err(PredictError::ShapeMismatch(m));
        let n = self.encoder.len();
        if n == 0 || self.decoder.len() != n {
            return bad(format!(
                "{} encoder vs {} decoder stages",
                n,
                self.decoder.len()
            ));
        }
        if self.input_size != INPUT_CELLS || self.output_size != OUTPUT_CELLS {
            return bad(format!("sizes {} -> {}", self.input_size, self.output_size));
        }
        if self.classes != CLASSES || self.in_channels != CLASSES {
            return bad(format!(
                "{} classes, {} input channels",
                self.classes, self.in_channels
            ));
        }
        if spatial_chain(self.input_size, n).last() != Some(&1) {
            return bad(format!("{n} stages do not reduce {} to 1", self.input_size));
        }
        if self
            .encoder
            .iter()
            .chain(&self.decoder)
            .any(|&f| f == 0 || f > 1 << 16)
        {
            return bad("filter count out of range".into());
        }
        if self.decoder[0] != self.encoder[n - 1] {
            return bad("first decoder width must equal the bottleneck".into());
        }
        for j in 0..n - 1 {
            if self.decoder[j + 1] <= self.encoder[n - 2 - j] {
                return bad(format!("decoder stage {} narrower than its skip", j + 1));
            }
        }
        Ok(())
    }

    /// Layer records the metadata implies, in file order.
    pub fn expected_records(&self) -> Vec<(LayerKind, Vec<usize>)> {
        let n = self.encoder.len();
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for &f in &self.encoder {
            out.push((LayerKind::Conv, vec![f, cin, KERNEL, KERNEL]));
            out.push((LayerKind::BatchNorm, vec![f]));
            cin = f;
        }
        for j in 0..n {
            let o = self.decoder_out(j);
            out.push((
                LayerKind::ConvTranspose,
                vec![self.decoder[j], o, KERNEL, KERNEL],
            ));
            if j + 1 < n {
                out.push((LayerKind::BatchNorm, vec![o]));
            }
        }
        out
    }
}

/// Spatial sizes from the input through each encoder stage.
pub fn spatial_chain(input: usize, stages: usize) -> Vec<usize> {
    let mut v = vec![input];
    for _ in 0..stages {
        let s = *v.last().expect("seeded");
        v.push(s.div_ceil(2));
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv = 0,
    ConvTranspose = 1,
    BatchNorm = 2,
}

impl LayerKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Conv),
            1 => Some(Self::ConvTranspose),
            2 => Some(Self::BatchNorm),
            _ => None,
        }
    }
}

/// One layer's parameters. Conv weights are `[out, in, k, k]`, transposed
/// conv weights `[in, out, k, k]`; batch norm holds `[mean, var, scale,
/// shift]` concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerRecord {
    fn payload_len(kind: LayerKind, shape: &[usize]) -> Option<usize> {
        match kind {
            LayerKind::Conv => shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))?
                .checked_add(shape[0]),
            LayerKind::ConvTranspose => shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))?
                .checked_add(shape[1]),
            LayerKind::BatchNorm => shape[0].checked_mul(4),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    pub meta: NetworkMeta,
    pub layers: Vec<LayerRecord>,
}

impl WeightBundle {
    /// Bundle with the given fill for conv weights and biases and identity
    /// batch norm (mean 0, var 1, scale 1, shift 0).
    pub fn constant(meta: NetworkMeta, value: f32) -> Result<Self, PredictError> {
        meta.validate()?;
        let layers = meta
            .expected_records()
            .into_iter()
            .map(|(kind, shape)| match kind {
                LayerKind::BatchNorm => {
                    let c = shape[0];
                    let mut w = vec![0.0; c];
                    w.extend(std::iter::repeat_n(1.0, 2 * c));
                    w.extend(std::iter::repeat_n(0.0, c));
                    LayerRecord {
                        kind,
                        shape,
                        weight: w,
                        bias: Vec::new(),
                    }
                }
                _ => {
                    let n: usize = shape.iter().product();
                    let nb = if kind == LayerKind::Conv {
                        shape[0]
                    } else {
                        shape[1]
                    };
                    LayerRecord {
                        kind,
                        shape,
                        weight: vec![value; n],
                        bias: vec![value; nb],
                    }
                }
            })
            .collect();
        Ok(Self { meta, layers })
    }

    /// Seeded He-style uniform initialization with randomized batch-norm
    /// statistics; for tests and benchmarks.
    pub fn random(meta: NetworkMeta, seed: u64) -> Result<Self, PredictError> {
        let mut b = Self::constant(meta, 0.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut b.layers {
            match l.kind {
                LayerKind::BatchNorm => {
                    let c = l.shape[0];
                    for i in 0..c {
                        l.weight[i] = rng.random_range(-0.1..0.1);
                        l.weight[c + i] = rng.random_range(0.5..1.5);
                        l.weight[2 * c + i] = rng.random_range(0.5..1.5);
                        l.weight[3 * c + i] = rng.random_range(-0.1..0.1);
                    }
                }
                _ => {
                    let fan_in = (l.shape[1] * KERNEL * KERNEL) as f32;
                    let a = (6.0 / fan_in).sqrt();
                    l.weight
                        .iter_mut()
                        .for_each(|w| *w = rng.random_range(-a..a));
                    l.bias
                        .iter_mut()
                        .for_each(|w| *w = rng.random_range(-0.1..0.1));
                }
            }
        }
        Ok(b)
    }

    pub fn has_reference_widths(&self) -> bool {
        self.meta.encoder == ENCODER_FILTERS && self.meta.decoder == DECODER_FILTERS
    }

    /// Encoder stages and decoder stages.
    pub fn stage_counts(&self) -> (usize, usize) {
        let count = |k| self.layers.iter().filter(|l| l.kind == k).count();
        (count(LayerKind::Conv), count(LayerKind::ConvTranspose))
    }

    fn validate(&self) -> Result<(), PredictError> {
        self.meta.validate()?;
        let expected = self.meta.expected_records();
        if expected.len() != self.layers.len() {
            return Err(PredictError::ShapeMismatch(format!(
                "{} records, metadata implies {}",
                self.layers.len(),
                expected.len()
            )));
        }
        for (i, ((kind, shape), l)) in expected.iter().zip(&self.layers).enumerate() {
            if *kind != l.kind || *shape != l.shape {
                return Err(PredictError::ShapeMismatch(format!(
                    "record {i}: {:?}{:?}, expected {kind:?}{shape:?}",
                    l.kind, l.shape
                )));
            }
            let total = LayerRecord::payload_len(l.kind, &l.shape).expect("validated shape");
            if l.weight.len() + l.bias.len() != total {
                return Err(PredictError::ShapeMismatch(format!(
                    "record {i}: wrong parameter count"
                )));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(PredictError::NonFiniteWeights);
            }
        }
        Ok(())
    }
}

/// Serializes a bundle:
///
/// ```text
/// "OMPW" | version u32 | input u32 | output u32 | classes u32 | channels u32
/// | n_enc u32 | enc u32 x n_enc | n_dec u32 | dec u32 x n_dec
/// | n_records u32 | (kind u8 | rank u8 | dims u32 x rank) x n_records
/// | payload_bytes u64 | payload f32 | crc32(payload) u32
/// ```
///
/// All integers and floats are little-endian. The payload holds each
/// record's weights followed by its biases, in record order.
pub fn encode_weights(b: &WeightBundle) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let m = &b.meta;
    for v in [m.input_size, m.output_size, m.classes, m.in_channels] {
        u32le(&mut out, v);
    }
    for list in [&m.encoder, &m.decoder] {
        u32le(&mut out, list.len());
        for &f in list.iter() {
            u32le(&mut out, f);
        }
    }
    u32le(&mut out, b.layers.len());
    for l in &b.layers {
        out.push(l.kind as u8);
        out.push(l.shape.len() as u8);
        for &d in &l.shape {
            u32le(&mut out, d);
        }
    }
    let mut payload = Vec::new();
    for l in &b.layers {
        for v in l.weight.iter().chain(&l.bias) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PredictError> {
        let end = self.pos.checked_add(n).ok_or(PredictError::TruncatedFile)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(PredictError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, PredictError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, PredictError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, PredictError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize_list(&mut self, limit: usize) -> Result<Vec<usize>, PredictError> {
        let n = self.u32()? as usize;
        if n > limit {
            return Err(PredictError::ShapeMismatch(format!("list of {n} entries")));
        }
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }
}

/// Parses and validates a weight file image.
pub fn decode_weights(bytes: &[u8]) -> Result<WeightBundle, PredictError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHT_MAGIC {
        return Err(PredictError::BadMagic);
    }
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(PredictError::UnsupportedVersion(version));
    }
    let mut head = [0usize; 4];
    for h in &mut head {
        *h = r.u32()? as usize;
    }
    let encoder = r.usize_list(64)?;
    let decoder = r.usize_list(64)?;
    let meta = NetworkMeta {
        input_size: head[0],
        output_size: head[1],
        classes: head[2],
        in_channels: head[3],
        encoder,
        decoder,
    };
    let n_records = r.u32()? as usize;
    if n_records > 1024 {
        return Err(PredictError::ShapeMismatch(format!("{n_records} records")));
    }
    let mut headers = Vec::with_capacity(n_records);
    let mut total = 0usize;
    for i in 0..n_records {
        let kind = LayerKind::from_byte(r.u8()?)
            .ok_or_else(|| PredictError::ShapeMismatch(format!("record {i}: unknown kind")))?;
        let rank = r.u8()? as usize;
        let want = if kind == LayerKind::BatchNorm { 1 } else { 4 };
        if rank != want {
            return Err(PredictError::ShapeMismatch(format!(
                "record {i}: rank {rank}"
            )));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_, _>>()?;
        let n = LayerRecord::payload_len(kind, &shape)
            .ok_or_else(|| PredictError::ShapeMismatch(format!("record {i}: size overflow")))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| PredictError::ShapeMismatch("size overflow".into()))?;
        headers.push((kind, shape, n));
    }
    let payload_bytes = r.u64()?;
    if Some(payload_bytes) != (total as u64).checked_mul(4) {
        return Err(PredictError::ShapeMismatch(format!(
            "payload of {payload_bytes} bytes, records need {}",
            total.saturating_mul(4)
        )));
    }
    let payload = r.take(total * 4)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(PredictError::ChecksumMismatch { stored, computed });
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut layers = Vec::with_capacity(n_records);
    for (kind, shape, n) in headers {
        let nb = match kind {
            LayerKind::Conv => shape[0],
            LayerKind::ConvTranspose => shape[1],
            LayerKind::BatchNorm => 0,
        };
        let weight: Vec<f32> = floats.by_ref().take(n - nb).collect();
        let bias: Vec<f32> = floats.by_ref().take(nb).collect();
        layers.push(LayerRecord {
            kind,
            shape,
            weight,
            bias,
        });
    }
    let bundle = WeightBundle { meta, layers };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_weights(b: &WeightBundle, path: &Path) -> Result<(), PredictError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_weights(b))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightBundle, PredictError> {
    decode_weights(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Channel-major feature map.
#[derive(Clone, Debug)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }
}

/// 4x4 stride-2 convolution, padding 1 low and `1 + size % 2` high.
fn conv_down(x: &Tensor, l: &LayerRecord) -> Tensor {
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let co = l.shape[0];
    let mut y = Tensor::zeros(co, oh, ow);
    let plane = oh * ow;
    for o in 0..co {
        let out = &mut y.data[o * plane..(o + 1) * plane];
        out.iter_mut().for_each(|v| *v = l.bias[o]);
        for i in 0..x.c {
            let src = &x.data[i * x.h * x.w..(i + 1) * x.h * x.w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wv = l.weight[((o * x.c + i) * KERNEL + ky) * KERNEL + kx];
                    for oy in 0..oh {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let orow = &mut out[oy * ow..(oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < x.w {
                                *ov += wv * srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// 4x4 stride-2 transposed convolution with padding 1, cropped on the high
/// side to `th x tw`.
fn conv_up(x: &Tensor, l: &LayerRecord, th: usize, tw: usize) -> Tensor {
    let co = l.shape[1];
    let mut y = Tensor::zeros(co, th, tw);
    let plane = th * tw;
    for o in 0..co {
        let out = &mut y.data[o * plane..(o + 1) * plane];
        out.iter_mut().for_each(|v| *v = l.bias[o]);
        for i in 0..x.c {
            let src = &x.data[i * x.h * x.w..(i + 1) * x.h * x.w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wv = l.weight[((i * co + o) * KERNEL + ky) * KERNEL + kx];
                    for iy in 0..x.h {
                        let oy = (2 * iy + ky) as isize - 1;
                        if oy < 0 || oy >= th as isize {
                            continue;
                        }
                        let srow = &src[iy * x.w..(iy + 1) * x.w];
                        let orow = &mut out[oy as usize * tw..(oy as usize + 1) * tw];
                        for (ix, sv) in srow.iter().enumerate() {
                            let ox = (2 * ix + kx) as isize - 1;
                            if ox >= 0 && (ox as usize) < tw {
                                orow[ox as usize] += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn batch_norm_relu(x: &mut Tensor, l: &LayerRecord) {
    let c = x.c;
    let plane = x.h * x.w;
    for ch in 0..c {
        let (mean, var, scale, shift) = (
            l.weight[ch],
            l.weight[c + ch],
            l.weight[2 * c + ch],
            l.weight[3 * c + ch],
        );
        let inv = scale / (var + BN_EPS).sqrt();
        for v in &mut x.data[ch * plane..(ch + 1) * plane] {
            *v = ((*v - mean) * inv + shift).max(0.0);
        }
    }
}

fn concat(a: Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut data = a.data;
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f32], channels: usize, from: usize, to: usize) -> Vec<f32> {
    let scale = from as f32 / to as f32;
    let coord = |d: usize| {
        let s = ((d as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(from - 1);
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f32)
    };
    let taps: Vec<(usize, usize, f32)> = (0..to).map(coord).collect();
    let mut out = vec![0.0; channels * to * to];
    for c in 0..channels {
        let s = &src[c * from * from..(c + 1) * from * from];
        for (y, &(y0, y1, fy)) in taps.iter().enumerate() {
            for (x, &(x0, x1, fx)) in taps.iter().enumerate() {
                let top = s[y0 * from + x0] * (1.0 - fx) + s[y0 * from + x1] * fx;
                let bot = s[y1 * from + x0] * (1.0 - fx) + s[y1 * from + x1] * fx;
                out[(c * to + y) * to + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Raw `3 x 120 x 120` scores of the network.
pub fn network_scores(input: &PredictorInput, w: &WeightBundle) -> Vec<f32> {
    let n = w.meta.encoder.len();
    let mut x = Tensor {
        c: CLASSES,
        h: INPUT_CELLS,
        w: INPUT_CELLS,
        data: input.one_hot(),
    };
    let mut layers = w.layers.iter();
    let mut skips = Vec::with_capacity(n);
    for _ in 0..n {
        let conv = layers.next().expect("validated");
        let bn = layers.next().expect("validated");
        let mut y = conv_down(&x, conv);
        batch_norm_relu(&mut y, bn);
        skips.push(x);
        x = y;
    }
    for j in 0..n {
        let up = layers.next().expect("validated");
        let target = &skips[n - 1 - j];
        let mut y = conv_up(&x, up, target.h, target.w);
        if j + 1 < n {
            batch_norm_relu(&mut y, layers.next().expect("validated"));
            x = concat(y, &skips[n - 1 - j]);
        } else {
            x = y;
        }
    }
    x.data
}

/// Network forward pass followed by the 120 -> 150 score resize and argmax.
pub fn conv_forward(
    input: &PredictorInput,
    w: &WeightBundle,
) -> Result<PredictorOutput, PredictError> {
    w.validate()?;
    let raw = network_scores(input, w);
    let scores = resize_bilinear(&raw, CLASSES, INPUT_CELLS, OUTPUT_CELLS);
    Ok(PredictorOutput::from_scores(
        scores,
        input.output_origin(),
        input.grid().resolution(),
    ))
}

/// The learned predictor: a validated, frozen weight bundle.
#[derive(Clone, Debug)]
pub struct NetworkPredictor {
    weights: WeightBundle,
}

impl NetworkPredictor {
    pub fn new(weights: WeightBundle) -> Result<Self, PredictError> {
        weights.validate()?;
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &WeightBundle {
        &self.weights
    }
}

impl Predictor for NetworkPredictor {
    fn predict(&self, input: &PredictorInput) -> Result<PredictorOutput, PredictError> {
        let raw = network_scores(input, &self.weights);
        let scores = resize_bilinear(&raw, CLASSES, INPUT_CELLS, OUTPUT_CELLS);
        Ok(PredictorOutput::from_scores(
            scores,
            input.output_origin(),
            input.grid().resolution(),
        ))
    }
}
