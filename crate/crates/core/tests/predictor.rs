use occnav::gridmap::{Cell, OccupancyGrid, Point};
use occnav::predictor::{
    baseline_extrapolate, conv_forward, decode_weights, encode_weights, load_weights, postprocess,
    save_weights, spatial_chain, BaselinePredictor, LayerKind, NetworkMeta, NetworkPredictor,
    PredictError, Predictor, PredictorInput, WeightBundle, BN_EPS, DECODER_FILTERS,
    ENCODER_FILTERS, INPUT_CELLS, OUTPUT_CELLS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OFF: usize = (OUTPUT_CELLS - INPUT_CELLS) / 2;

fn small_meta() -> NetworkMeta {
    NetworkMeta {
        encoder: vec![4, 6, 8, 8, 8, 8, 8],
        decoder: vec![8, 12, 12, 12, 12, 10, 6],
        ..NetworkMeta::default()
    }
}

fn input_with(f: impl Fn(usize, usize) -> Cell) -> PredictorInput {
    let cells = (0..INPUT_CELLS * INPUT_CELLS)
        .map(|i| f(i % INPUT_CELLS, i / INPUT_CELLS))
        .collect();
    PredictorInput::new(
        OccupancyGrid::from_cells(
            INPUT_CELLS,
            INPUT_CELLS,
            0.05,
            Point::new(-3.0, -3.0),
            cells,
        )
        .unwrap(),
    )
    .unwrap()
}

fn random_input(seed: u64) -> PredictorInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<Cell> = (0..INPUT_CELLS * INPUT_CELLS)
        .map(|_| Cell::ALL[rng.random_range(0..3)])
        .collect();
    input_with(|c, r| cells[r * INPUT_CELLS + c])
}

// Plain f64 reference network: gather-form convolutions, no shared code.

struct Fm {
    c: usize,
    n: usize,
    d: Vec<f64>,
}

impl Fm {
    fn at(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.n as isize || x >= self.n as isize {
            0.0
        } else {
            self.d[(c * self.n + y as usize) * self.n + x as usize]
        }
    }
}

fn ref_down(x: &Fm, w: &[f32], b: &[f32], co: usize) -> Fm {
    let n = x.n.div_ceil(2);
    let mut d = vec![0.0; co * n * n];
    for o in 0..co {
        for oy in 0..n {
            for ox in 0..n {
                let mut acc = b[o] as f64;
                for i in 0..x.c {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let wv = w[((o * x.c + i) * 4 + ky) * 4 + kx] as f64;
                            acc += wv
                                * x.at(i, (2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                        }
                    }
                }
                d[(o * n + oy) * n + ox] = acc;
            }
        }
    }
    Fm { c: co, n, d }
}

fn ref_up(x: &Fm, w: &[f32], b: &[f32], co: usize, n: usize) -> Fm {
    let mut d = vec![0.0; co * n * n];
    for o in 0..co {
        for oy in 0..n {
            for ox in 0..n {
                let mut acc = b[o] as f64;
                for i in 0..x.c {
                    for iy in 0..x.n {
                        let ky = oy as isize + 1 - 2 * iy as isize;
                        if !(0..4).contains(&ky) {
                            continue;
                        }
                        for ix in 0..x.n {
                            let kx = ox as isize + 1 - 2 * ix as isize;
                            if !(0..4).contains(&kx) {
                                continue;
                            }
                            let wv = w[((i * co + o) * 4 + ky as usize) * 4 + kx as usize] as f64;
                            acc += wv * x.d[(i * x.n + iy) * x.n + ix];
                        }
                    }
                }
                d[(o * n + oy) * n + ox] = acc;
            }
        }
    }
    Fm { c: co, n, d }
}

fn ref_bn_relu(x: &mut Fm, p: &[f32]) {
    let plane = x.n * x.n;
    for ch in 0..x.c {
        let (m, v, s, t) = (
            p[ch] as f64,
            p[x.c + ch] as f64,
            p[2 * x.c + ch] as f64,
            p[3 * x.c + ch] as f64,
        );
        for val in &mut x.d[ch * plane..(ch + 1) * plane] {
            *val = ((*val - m) * s / (v + BN_EPS as f64).sqrt() + t).max(0.0);
        }
    }
}

fn ref_resize(src: &[f64], from: usize, to: usize) -> Vec<f64> {
    let scale = from as f64 / to as f64;
    let tap = |d: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(from - 1);
        (i0, (i0 + 1).min(from - 1), s - i0 as f64)
    };
    let mut out = vec![0.0; 3 * to * to];
    for c in 0..3 {
        for y in 0..to {
            let (y0, y1, fy) = tap(y);
            for x in 0..to {
                let (x0, x1, fx) = tap(x);
                let v = |yy: usize, xx: usize| src[(c * from + yy) * from + xx];
                out[(c * to + y) * to + x] = (v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx) * (1.0 - fy)
                    + (v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx) * fy;
            }
        }
    }
    out
}

fn reference_scores(input: &PredictorInput, w: &WeightBundle) -> Vec<f64> {
    let mut x = Fm {
        c: 3,
        n: INPUT_CELLS,
        d: input.one_hot().iter().map(|&v| v as f64).collect(),
    };
    let stages = w.meta.encoder.len();
    let mut recs = w.layers.iter();
    let mut skips = Vec::new();
    for &f in &w.meta.encoder {
        let conv = recs.next().unwrap();
        let bn = recs.next().unwrap();
        let mut y = ref_down(&x, &conv.weight, &conv.bias, f);
        ref_bn_relu(&mut y, &bn.weight);
        skips.push(x);
        x = y;
    }
    for j in 0..stages {
        let up = recs.next().unwrap();
        let skip = &skips[stages - 1 - j];
        let mut y = ref_up(&x, &up.weight, &up.bias, up.shape[1], skip.n);
        if j + 1 < stages {
            ref_bn_relu(&mut y, &recs.next().unwrap().weight);
            y.d.extend_from_slice(&skip.d);
            y.c += skip.c;
        }
        x = y;
    }
    ref_resize(&x.d, INPUT_CELLS, OUTPUT_CELLS)
}

#[test]
fn forward_matches_reference_on_random_inputs() {
    let w = WeightBundle::random(small_meta(), 7).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let input = random_input(seed);
        let out = conv_forward(&input, &w).unwrap();
        let reference = reference_scores(&input, &w);
        for (a, b) in out.scores.iter().zip(&reference) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    assert!(worst <= 1e-4, "max score difference {worst}");
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let w = WeightBundle::random(small_meta(), 3).unwrap();
    let p = NetworkPredictor::new(w).unwrap();
    let input = random_input(11);
    let a = p.predict(&input).unwrap();
    let b = p.predict(&input).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.grid.width(), a.grid.height()), (150, 150));
    assert_eq!(a.scores.len(), 3 * 150 * 150);
    assert!((a.grid.center() - input.grid().center()).norm() < 1e-12);
}

#[test]
fn zero_network_ties_to_first_class() {
    let w = WeightBundle::constant(small_meta(), 0.0).unwrap();
    let out = conv_forward(&random_input(1), &w).unwrap();
    assert!(out.scores.iter().all(|&s| s == 0.0));
    assert_eq!(out.grid.count(Cell::Free), 150 * 150);
}

#[test]
fn one_hot_channels_sum_to_one() {
    let input = random_input(5);
    let v = input.one_hot();
    let n = INPUT_CELLS * INPUT_CELLS;
    assert!((0..n).all(|i| v[i] + v[n + i] + v[2 * n + i] == 1.0));
}

#[test]
fn reference_widths_and_stage_chain() {
    assert_eq!(spatial_chain(120, 7), vec![120, 60, 30, 15, 8, 4, 2, 1]);
    let w = WeightBundle::constant(NetworkMeta::default(), 0.0).unwrap();
    assert!(w.has_reference_widths());
    assert_eq!(w.stage_counts(), (7, 7));
    let convs: Vec<usize> = w
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Conv)
        .map(|l| l.shape[0])
        .collect();
    assert_eq!(convs, ENCODER_FILTERS);
    let ups: Vec<usize> = w
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::ConvTranspose)
        .map(|l| l.shape[0])
        .collect();
    assert_eq!(ups, DECODER_FILTERS);
}

#[test]
fn weight_file_round_trip_and_corruption() {
    let w = WeightBundle::random(small_meta(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ompw");
    save_weights(&w, &path).unwrap();
    assert_eq!(load_weights(&path).unwrap(), w);

    let bytes = encode_weights(&w);
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(matches!(
        decode_weights(&magic),
        Err(PredictError::BadMagic)
    ));
    assert!(matches!(
        decode_weights(&bytes[..bytes.len() / 2]),
        Err(PredictError::TruncatedFile)
    ));
    // A flipped payload byte must be caught by the checksum or the shape checks.
    for pos in [bytes.len() - 5, bytes.len() - 100, bytes.len() / 2] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        assert!(matches!(
            decode_weights(&bad),
            Err(PredictError::ChecksumMismatch { .. })
        ));
    }
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(
        decode_weights(&version),
        Err(PredictError::UnsupportedVersion(9))
    ));
    assert!(decode_weights(&[]).is_err());
}

#[test]
fn every_single_byte_corruption_is_detected() {
    let w = WeightBundle::random(
        NetworkMeta {
            encoder: vec![1, 1, 1, 1, 1, 1, 1],
            decoder: vec![1, 2, 2, 2, 2, 2, 2],
            ..NetworkMeta::default()
        },
        2,
    )
    .unwrap();
    let bytes = encode_weights(&w);
    for pos in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[pos] = bad[pos].wrapping_add(1);
        assert!(decode_weights(&bad).is_err(), "byte {pos}");
    }
}

#[test]
fn dimension_mismatch() {
    let g = OccupancyGrid::new(100, 120, 0.05, Point::origin(), Cell::Free).unwrap();
    assert!(matches!(
        PredictorInput::new(g),
        Err(PredictError::DimensionMismatch { .. })
    ));
}

#[test]
fn baseline_all_unknown_stays_unknown() {
    let out = BaselinePredictor
        .predict(&input_with(|_, _| Cell::Unknown))
        .unwrap();
    assert_eq!((out.grid.width(), out.grid.height()), (150, 150));
    assert_eq!(out.grid.count(Cell::Unknown), 150 * 150);
}

#[test]
fn baseline_without_walls_copies_the_center() {
    let input = input_with(|c, r| {
        if (c / 7 + r / 5) % 3 == 0 {
            Cell::Unknown
        } else {
            Cell::Free
        }
    });
    let out = baseline_extrapolate(&input);
    for r in 0..150 {
        for c in 0..150 {
            let inner = (OFF..OFF + 120).contains(&c) && (OFF..OFF + 120).contains(&r);
            let expect = if inner {
                input.grid().get(c - OFF, r - OFF)
            } else {
                Cell::Unknown
            };
            assert_eq!(out.grid.get(c, r), expect);
        }
    }
}

#[test]
fn baseline_continues_a_straight_wall() {
    // Vertical wall at column 50 for rows 0..60, Free to its right, Unknown beyond row 60.
    let input = input_with(|c, r| {
        if r >= 60 {
            Cell::Unknown
        } else if c == 50 {
            Cell::Occupied
        } else if c > 50 && c < 80 {
            Cell::Free
        } else {
            Cell::Unknown
        }
    });
    let out = baseline_extrapolate(&input);
    for r in (OFF + 60)..150 {
        assert_eq!(out.grid.get(OFF + 50, r), Cell::Occupied, "row {r}");
    }
    // Known input cells are kept.
    for r in 0..120 {
        for c in 0..120 {
            let v = input.grid().get(c, r);
            if v != Cell::Unknown {
                assert_eq!(out.grid.get(c + OFF, r + OFF), v);
            }
        }
    }
}

#[test]
fn baseline_adds_nothing_to_a_closed_corner() {
    // L-shaped corner whose walls are bounded by Free on both sides.
    let input = input_with(|c, r| {
        if (c == 60 && (20..=60).contains(&r)) || (r == 60 && (20..=60).contains(&c)) {
            Cell::Occupied
        } else {
            Cell::Free
        }
    });
    let out = baseline_extrapolate(&input);
    let occupied_in = input.grid().count(Cell::Occupied);
    assert_eq!(out.grid.count(Cell::Occupied), occupied_in);
    for r in 0..120 {
        for c in 0..120 {
            assert_eq!(out.grid.get(c + OFF, r + OFF), input.grid().get(c, r));
        }
    }
}

#[test]
fn postprocess_fills_gaps_and_keeps_clean_maps() {
    let mut g = OccupancyGrid::new(150, 150, 0.05, Point::origin(), Cell::Free).unwrap();
    for c in 20..120 {
        g.set(c, 40, Cell::Occupied);
        g.set(c, 43, Cell::Occupied);
    }
    let out = BaselinePredictor
        .predict(&PredictorInput::new(g.extract_submap(&g.center(), 6.0)).unwrap())
        .unwrap();
    let closed = postprocess(&out);
    let row = |r: usize| closed.get(75, r);
    assert_eq!(
        (row(41 - 15 + OFF), row(42 - 15 + OFF)),
        (Cell::Occupied, Cell::Occupied)
    );
    assert_eq!(postprocess(&out.clone()), closed);

    let blank = BaselinePredictor
        .predict(&input_with(|_, _| Cell::Unknown))
        .unwrap();
    assert_eq!(postprocess(&blank), blank.grid);
}
