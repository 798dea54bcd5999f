use std::f64::consts::PI;

use occnav::gridmap::{Cell, OccupancyGrid, Point};
use occnav::sensorsim::{
    gradient_filter, gradient_magnitudes, integrate_scan, render_depth, Bounds, DepthScan,
    Environment, RayStatus, Segment, SensorConfig,
};
use occnav::trajopt::RobotState;
use proptest::prelude::*;

fn pose(x: f64, y: f64, theta: f64) -> RobotState {
    RobotState::new(x, y, 0.0, theta, 0.0)
}

fn env(walls: Vec<Segment>) -> Environment {
    Environment::new(
        walls,
        Bounds {
            min: Point::new(-10.0, -10.0),
            max: Point::new(10.0, 10.0),
        },
    )
    .unwrap()
}

fn scan_of(depths: &[f64]) -> DepthScan {
    DepthScan {
        angles: (0..depths.len()).map(|i| i as f64 * 0.01).collect(),
        depths: depths.to_vec(),
        status: vec![RayStatus::Valid; depths.len()],
        max_range: 3.0,
    }
}

fn odd_rays() -> SensorConfig {
    SensorConfig {
        ray_count: 129,
        ..SensorConfig::default()
    }
}

#[test]
fn empty_environment_has_no_returns() {
    let s = render_depth(&env(vec![]), &pose(0.0, 0.0, 0.3), &SensorConfig::default());
    assert_eq!(s.depths.len(), 128);
    assert!(s.status.iter().all(|&st| st == RayStatus::NoReturn));
}

#[test]
fn perpendicular_wall_depths() {
    // Wall x = 1 spanning y in [-2, 2]: a ray at angle a hits at 1 / cos(a).
    let e = env(vec![Segment::new(1.0, -2.0, 1.0, 2.0)]);
    let cfg = odd_rays();
    let s = render_depth(&e, &pose(0.0, 0.0, 0.0), &cfg);
    assert_eq!(s.angles[64], 0.0);
    assert_eq!(s.status[64], RayStatus::Valid);
    assert!((s.depths[64] - 1.0).abs() < 1e-12);
    for (a, (d, st)) in s.angles.iter().zip(s.depths.iter().zip(&s.status)) {
        assert_eq!(*st, RayStatus::Valid);
        assert!((d - 1.0 / a.cos()).abs() < 1e-9);
    }
    let far = env(vec![Segment::new(5.0, -2.0, 5.0, 2.0)]);
    let s = render_depth(&far, &pose(0.0, 0.0, 0.0), &cfg);
    assert_eq!(s.status[64], RayStatus::NoReturn);
}

#[test]
fn uniform_scan_is_unchanged() {
    let s = scan_of(&[1.7; 16]);
    assert!(gradient_magnitudes(&s).iter().all(|&m| m == 0.0));
    assert_eq!(gradient_filter(&s), s);
}

#[test]
fn linear_ramp_is_unchanged() {
    let depths: Vec<f64> = (0..32).map(|i| 1.0 + 0.05 * i as f64).collect();
    let s = scan_of(&depths);
    // Interior response of [-1,-2,0,2,1]/8 on a ramp of slope 0.05 is (2 + 2 + 2 + 2) / 8 * 0.05.
    let m = gradient_magnitudes(&s);
    for &g in &m[2..30] {
        assert!((g - 0.05).abs() < 1e-12);
    }
    assert_eq!(gradient_filter(&s), s);
}

#[test]
fn depth_step_rejects_straddling_rays() {
    let mut depths = vec![1.0; 8];
    depths.extend(vec![2.5; 8]);
    let s = gradient_filter(&scan_of(&depths));
    // Responses at rays 6..=9 are 1.5/8, 4.5/8, 4.5/8, 1.5/8; all others are 0, so the median is 0.
    let rejected: Vec<usize> = (0..16)
        .filter(|&i| s.status[i] == RayStatus::Rejected)
        .collect();
    assert_eq!(rejected, vec![6, 7, 8, 9]);
}

#[test]
fn single_ray_integration() {
    let g = OccupancyGrid::new(100, 100, 0.05, Point::new(-2.5, -2.5), Cell::Unknown).unwrap();
    let p = pose(0.025, 0.025, 0.0);
    let scan = DepthScan {
        angles: vec![0.0],
        depths: vec![1.0],
        status: vec![RayStatus::Valid],
        max_range: 3.0,
    };
    let out = integrate_scan(&g, &p, &scan, 0.9).unwrap();
    let (c0, r0) = g.world_to_cell(&p.position()).unwrap();
    let (ch, _) = g.world_to_cell(&Point::new(1.025, 0.025)).unwrap();
    assert_eq!(out.get(ch, r0), Cell::Occupied);
    for c in c0..ch {
        assert_eq!(out.get(c, r0), Cell::Free);
    }
    assert_eq!(ch - c0, 20);
    assert_eq!(out.count(Cell::Free), 20);
    assert_eq!(out.count(Cell::Occupied), 1);
}

#[test]
fn invalid_scan_with_zero_free_fraction_changes_nothing() {
    let g = OccupancyGrid::new(50, 50, 0.05, Point::new(-1.25, -1.25), Cell::Unknown).unwrap();
    let scan = DepthScan {
        angles: vec![-0.2, 0.0, 0.2],
        depths: vec![3.0; 3],
        status: vec![
            RayStatus::NoReturn,
            RayStatus::Rejected,
            RayStatus::NoReturn,
        ],
        max_range: 3.0,
    };
    assert_eq!(
        integrate_scan(&g, &pose(0.0, 0.0, 0.0), &scan, 0.0).unwrap(),
        g
    );
}

#[test]
fn two_scans_compose() {
    let e = env(vec![Segment::new(2.0, -3.0, 2.0, 3.0)]);
    let g = OccupancyGrid::new(160, 160, 0.05, Point::new(-4.0, -4.0), Cell::Unknown).unwrap();
    let cfg = SensorConfig::default();
    let (pa, pb) = (pose(0.0, -0.5, 0.0), pose(0.0, 0.5, 0.0));
    let sa = render_depth(&e, &pa, &cfg);
    let sb = render_depth(&e, &pb, &cfg);
    let a = integrate_scan(&g, &pa, &sa, 0.0).unwrap();
    let b = integrate_scan(&g, &pb, &sb, 0.0).unwrap();
    let both = integrate_scan(&a, &pb, &sb, 0.0).unwrap();
    for i in 0..both.cells().len() {
        let (x, y, z) = (a.cells()[i], b.cells()[i], both.cells()[i]);
        let expect = if x == Cell::Occupied || y == Cell::Occupied {
            Cell::Occupied
        } else if x == Cell::Free || y == Cell::Free {
            Cell::Free
        } else {
            Cell::Unknown
        };
        assert_eq!(z, expect);
    }
    // Every return lies on the wall column.
    let wall_col = g.world_to_cell(&Point::new(2.0, 0.0)).unwrap().0;
    for row in 0..160 {
        for col in 0..160 {
            if both.get(col, row) == Cell::Occupied {
                assert!(col == wall_col || col + 1 == wall_col, "{col}");
            }
        }
    }
    assert!(both.count(Cell::Free) > a.count(Cell::Free));
}

#[test]
fn environment_json_round_trip_and_errors() {
    let e = env(vec![
        Segment::new(0.0, 0.0, 1.0, 1.0),
        Segment::new(-1.0, 2.0, 3.0, 2.0),
    ]);
    assert_eq!(Environment::from_json(&e.to_json()).unwrap(), e);
    assert!(Environment::from_json("{").is_err());
    assert!(Environment::from_json(
        r#"{"schema":"occnav.environment/1","bounds":[0,0,1,1],"walls":[[0,0,5,5]]}"#
    )
    .is_err());
    assert!(
        Environment::from_json(r#"{"schema":"other/9","bounds":[0,0,1,1],"walls":[]}"#).is_err()
    );
    assert!(Environment::from_json(
        r#"{"schema":"occnav.environment/1","bounds":[1,0,1,1],"walls":[]}"#
    )
    .is_err());
}

fn arb_walls() -> impl Strategy<Value = Vec<Segment>> {
    prop::collection::vec(
        (-4.0f64..4.0, -4.0f64..4.0, -4.0f64..4.0, -4.0f64..4.0)
            .prop_map(|(a, b, c, d)| Segment::new(a, b, c, d)),
        0..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rendering_is_rotation_equivariant(walls in arb_walls(), x in -1.0f64..1.0, y in -1.0f64..1.0, th in -PI..PI, rot in -PI..PI) {
        let e = env(walls);
        let p = pose(x, y, th);
        let cfg = SensorConfig::default();
        let s = render_depth(&e, &p, &cfg);
        prop_assert_eq!(&s, &render_depth(&e, &p, &cfg));
        let (c, sn) = (rot.cos(), rot.sin());
        let q = pose(c * x - sn * y, sn * x + c * y, th + rot);
        let r = render_depth(&e.rotated(rot), &q, &cfg);
        for i in 0..s.depths.len() {
            // Rays grazing a wall end may flip between hit and miss under rounding.
            if s.status[i] == r.status[i] {
                prop_assert!((s.depths[i] - r.depths[i]).abs() <= 1e-9);
            }
        }
        let agree = (0..s.depths.len()).filter(|&i| s.status[i] == r.status[i]).count();
        prop_assert!(agree + 2 >= s.depths.len());
    }

    #[test]
    fn filter_keeps_at_least_half(depths in prop::collection::vec(0.1f64..3.0, 5..64), invalid in prop::collection::vec(any::<bool>(), 64)) {
        let mut s = scan_of(&depths);
        for (st, &bad) in s.status.iter_mut().zip(&invalid) {
            if bad {
                *st = RayStatus::NoReturn;
            }
        }
        let valid = s.valid_count();
        let f = gradient_filter(&s);
        prop_assert!(2 * (valid - f.valid_count()) <= valid);
    }

    #[test]
    fn mapping_is_monotone_and_range_bounded(walls in arb_walls(), x in -1.0f64..1.0, y in -1.0f64..1.0, th in -PI..PI, ff in 0.0f64..1.0) {
        let e = env(walls);
        let g0 = OccupancyGrid::new(200, 200, 0.05, Point::new(-5.0, -5.0), Cell::Unknown).unwrap();
        let p = pose(x, y, th);
        let cfg = SensorConfig::default();
        let s = gradient_filter(&render_depth(&e, &p, &cfg));
        let g1 = integrate_scan(&g0, &p, &s, ff).unwrap();
        let half_diag = 0.05 * std::f64::consts::SQRT_2 / 2.0;
        for row in 0..200 {
            for col in 0..200 {
                if g1.get(col, row) != Cell::Unknown {
                    let d = (g1.cell_center(col, row) - p.position()).norm();
                    prop_assert!(d <= cfg.max_range + half_diag);
                }
            }
        }
        let p2 = pose(-x, -y, th + 1.0);
        let s2 = gradient_filter(&render_depth(&e, &p2, &cfg));
        let g2 = integrate_scan(&g1, &p2, &s2, ff).unwrap();
        for (a, b) in g1.cells().iter().zip(g2.cells()) {
            if *a == Cell::Occupied {
                prop_assert_eq!(*b, Cell::Occupied);
            }
            if *a != Cell::Unknown {
                prop_assert_ne!(*b, Cell::Unknown);
            }
        }
    }
}
