use std::time::Instant;

use nalgebra::Vector2;
use occnav::gridmap::{Cell, OccupancyGrid, PlanningMap, Point};
use occnav::trajopt::{
    check_collision, dynamics, integrate_rk4, objective, solve_transcription, ControlInput,
    InputVec, RobotState, StateVec, TrajError, Trajectory, TranscriptionConfig, VehicleParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const L: f64 = 0.33;

/// Independent bicycle-model RK4 on plain arrays.
fn step(x: [f64; 5], u: [f64; 2], h: f64) -> [f64; 5] {
    let f = |s: [f64; 5]| {
        [
            s[2] * s[3].cos(),
            s[2] * s[3].sin(),
            u[0],
            s[2] * s[4].tan() / L,
            u[1],
        ]
    };
    let add = |a: [f64; 5], b: [f64; 5], k: f64| std::array::from_fn(|i| a[i] + k * b[i]);
    let k1 = f(x);
    let k2 = f(add(x, k1, h / 2.0));
    let k3 = f(add(x, k2, h / 2.0));
    let k4 = f(add(x, k3, h));
    std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

fn arr(s: &RobotState) -> [f64; 5] {
    [s.x, s.y, s.v, s.theta, s.delta]
}

fn map_with(obstacle: Option<(f64, f64, f64)>) -> PlanningMap {
    let mut g = OccupancyGrid::new(240, 200, 0.05, Point::new(-2.0, -5.0), Cell::Free).unwrap();
    if let Some((cx, cy, half)) = obstacle {
        for r in 0..200 {
            for c in 0..240 {
                let p = g.cell_center(c, r);
                if (p.x - cx).abs() <= half && (p.y - cy).abs() <= half {
                    g.set(c, r, Cell::Occupied);
                }
            }
        }
    }
    PlanningMap::from_observed(g)
}

fn brute_clearance(map: &PlanningMap, p: &Point) -> f64 {
    let g = map.grid();
    let mut best = f64::INFINITY;
    for r in 0..g.height() {
        for c in 0..g.width() {
            if g.get(c, r) == Cell::Occupied {
                best = best.min((g.cell_center(c, r) - p).norm());
            }
        }
    }
    best
}

struct Case {
    start: RobotState,
    target: RobotState,
    map: PlanningMap,
}

/// Ten open-space and ten single-obstacle problems.
fn cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..20)
        .map(|i| {
            let v0 = rng.random_range(0.5..2.5);
            let start = RobotState::new(0.0, 0.0, v0, 0.0, 0.0);
            let dist = rng.random_range(2.0..4.0);
            let lat = rng.random_range(-0.6..0.6);
            let heading = rng.random_range(-0.3..0.3);
            let target = RobotState::new(dist, lat, rng.random_range(1.0..3.0), heading, 0.0);
            let obstacle = (i >= 10).then(|| {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (
                    dist / 2.0,
                    side * rng.random_range(0.7..1.0),
                    rng.random_range(0.1..0.25),
                )
            });
            Case {
                start,
                target,
                map: map_with(obstacle),
            }
        })
        .collect()
}

#[test]
fn dynamics_examples() {
    let p = VehicleParams::default();
    assert_eq!(
        dynamics(
            &StateVec::new(0.0, 0.0, 1.0, 0.0, 0.0),
            &InputVec::zeros(),
            &p
        ),
        StateVec::new(1.0, 0.0, 0.0, 0.0, 0.0)
    );
    let f = dynamics(
        &StateVec::new(0.0, 0.0, 2.0, std::f64::consts::FRAC_PI_2, 0.0),
        &InputVec::zeros(),
        &p,
    );
    assert!(f[0].abs() < 1e-15 && f[1] == 2.0);
    let f = dynamics(
        &StateVec::new(0.0, 0.0, 1.0, 0.0, 0.1),
        &InputVec::zeros(),
        &p,
    );
    assert!((f[3] - 0.30405).abs() < 1e-5);
}

#[test]
fn rk4_matches_closed_form_circle() {
    let p = VehicleParams::default();
    let delta: f64 = 0.2;
    let radius = L / delta.tan();
    let mut x = StateVec::new(0.0, 0.0, 1.0, 0.0, delta);
    for _ in 0..1000 {
        x = integrate_rk4(&x, &InputVec::zeros(), 1e-3, &p);
    }
    let exact = Vector2::new(
        radius * (1.0 / radius).sin(),
        radius * (1.0 - (1.0 / radius).cos()),
    );
    let err = (Vector2::new(x[0], x[1]) - exact).norm();
    assert!(err <= 1e-6, "{err}");
    let straight = integrate_rk4(
        &StateVec::new(0.0, 0.0, 1.0, 0.0, 0.0),
        &InputVec::zeros(),
        1.0,
        &p,
    );
    assert_eq!(straight, StateVec::new(1.0, 0.0, 1.0, 0.0, 0.0));
}

#[test]
fn rk4_converges_at_fourth_order() {
    let p = VehicleParams::default();
    let delta: f64 = 0.25;
    let radius = L / delta.tan();
    let horizon = 1.0;
    let exact = Vector2::new(
        radius * (horizon / radius).sin(),
        radius * (1.0 - (horizon / radius).cos()),
    );
    let err = |n: usize| {
        let mut x = StateVec::new(0.0, 0.0, 1.0, 0.0, delta);
        for _ in 0..n {
            x = integrate_rk4(&x, &InputVec::zeros(), horizon / n as f64, &p);
        }
        (Vector2::new(x[0], x[1]) - exact).norm()
    };
    let ratio = err(10) / err(20);
    assert!((ratio - 16.0).abs() < 2.0, "ratio {ratio}");
}

#[test]
fn transcription_is_certified_on_seeded_problems() {
    let t0 = Instant::now();
    let cfg = TranscriptionConfig::default();
    let lim = cfg.limits;
    let mut solved = 0;
    for (i, case) in cases().iter().enumerate() {
        let Ok(sol) = solve_transcription(&case.start, &case.target, &case.map, &cfg) else {
            continue;
        };
        solved += 1;
        let tr = &sol.trajectory;
        assert_eq!(tr.knot_count(), 10);
        assert_eq!(tr.states[0], case.start);
        // Re-simulation with the independent integrator.
        let mut x = arr(&tr.states[0]);
        for (k, u) in tr.inputs.iter().enumerate() {
            x = step(x, [u.accel, u.steer_rate], tr.dt);
            let knot = arr(&tr.states[k + 1]);
            for c in 0..5 {
                assert!(
                    (x[c] - knot[c]).abs() <= 1e-4,
                    "case {i} knot {} comp {c}",
                    k + 1
                );
            }
        }
        // Bounds.
        assert!(tr.dt >= cfg.dt_min - 1e-8 && tr.dt <= cfg.dt_max() + 1e-8);
        for s in &tr.states[1..] {
            assert!(
                s.v >= lim.v_min - 1e-8 && s.delta.abs() <= lim.delta_max + 1e-8,
                "case {i}"
            );
        }
        for u in &tr.inputs {
            assert!(
                u.accel.abs() <= 2.5 + 1e-8 && u.steer_rate.abs() <= 1.5 + 1e-8,
                "case {i}"
            );
        }
        // Terminal box.
        let end = arr(tr.states.last().unwrap());
        let goal = arr(&case.target);
        for (c, half) in [0.1, 0.1, 0.1, 0.25, 100.0].iter().enumerate() {
            assert!((end[c] - goal[c]).abs() <= half + 1e-8, "case {i} comp {c}");
        }
        // Clearance at the knots and 20 points per interval, against an exhaustive scan.
        for (k, u) in tr.inputs.iter().enumerate() {
            let mut x = arr(&tr.states[k]);
            for _ in 0..20 {
                let c = brute_clearance(&case.map, &Point::new(x[0], x[1]));
                assert!(c >= 0.35, "case {i}: clearance {c}");
                x = step(x, [u.accel, u.steer_rate], tr.dt / 20.0);
            }
        }
        let again = solve_transcription(&case.start, &case.target, &case.map, &cfg).unwrap();
        assert_eq!(sol.trajectory, again.trajectory);
        assert_eq!(sol.cost.to_bits(), again.cost.to_bits());
        assert_eq!(
            objective(tr, &cfg.input_weight).to_bits(),
            sol.cost.to_bits()
        );
    }
    assert_eq!(solved, 20, "solved {solved}/20");
    assert!(t0.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn straight_open_space_example() {
    let start = RobotState::new(0.0, 0.0, 0.5, 0.0, 0.0);
    let target = RobotState::new(4.0, 0.0, 3.0, 0.0, 0.0);
    let sol = solve_transcription(
        &start,
        &target,
        &map_with(None),
        &TranscriptionConfig::default(),
    )
    .unwrap();
    let tr = &sol.trajectory;
    let end = tr.states.last().unwrap();
    assert!((end.x - 4.0).abs() <= 0.1 + 1e-8 && end.y.abs() <= 0.1 + 1e-8);
    assert!(tr.rollout_defect(&VehicleParams::default()) <= 1e-4);
    assert!(tr.states.iter().all(|s| s.y.abs() < 0.1 + 1e-8));
}

#[test]
fn obstacle_around_the_target_is_infeasible() {
    let start = RobotState::new(0.0, 0.0, 0.5, 0.0, 0.0);
    let target = RobotState::new(3.0, 0.0, 2.0, 0.0, 0.0);
    let map = map_with(Some((3.2, 0.0, 0.2)));
    assert!(matches!(
        solve_transcription(&start, &target, &map, &TranscriptionConfig::default()),
        Err(TrajError::Infeasible { .. })
    ));
}

#[test]
fn obstacle_midway_is_avoided() {
    let start = RobotState::new(0.0, 0.0, 1.0, 0.0, 0.0);
    let target = RobotState::new(4.0, 0.0, 2.0, 0.0, 0.0);
    let map = map_with(Some((2.0, -0.45, 0.2)));
    let sol = solve_transcription(&start, &target, &map, &TranscriptionConfig::default()).unwrap();
    let p = VehicleParams::default();
    assert!(!check_collision(&sol.trajectory, &map, 0.35, &p));
}

#[test]
fn collision_check_examples() {
    let p = VehicleParams::default();
    let tr = Trajectory {
        states: vec![
            RobotState::new(0.0, 0.0, 1.0, 0.0, 0.0),
            RobotState::new(1.0, 0.0, 1.0, 0.0, 0.0),
        ],
        inputs: vec![ControlInput::default()],
        dt: 1.0,
    };
    assert!(!check_collision(&tr, &map_with(None), 0.35, &p));
    // A thin wall at x = 0.5 lies between the two knots.
    let mut g = OccupancyGrid::new(200, 200, 0.05, Point::new(-2.0, -5.0), Cell::Free).unwrap();
    for r in 0..200 {
        g.set(50, r, Cell::Occupied);
    }
    let wall = PlanningMap::from_observed(g);
    assert!(wall.is_clear(&Point::new(0.0, 0.0), 0.1) && wall.is_clear(&Point::new(1.0, 0.0), 0.1));
    assert!(check_collision(&tr, &wall, 0.1, &p));
    let on = Trajectory {
        states: vec![RobotState::new(0.525, 0.0, 1.0, 0.0, 0.0)],
        inputs: vec![],
        dt: 0.1,
    };
    assert!(check_collision(&on, &wall, 0.03, &p));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn returned_trajectories_are_certified(v0 in 0.5f64..3.0, d in 1.5f64..4.5, lat in -1.0f64..1.0, th in -0.5f64..0.5) {
        let start = RobotState::new(0.0, 0.0, v0, 0.0, 0.0);
        let target = RobotState::new(d, lat, 2.0, th, 0.0);
        let cfg = TranscriptionConfig::default();
        if let Ok(sol) = solve_transcription(&start, &target, &map_with(None), &cfg) {
            let tr = &sol.trajectory;
            prop_assert!(tr.rollout_defect(&cfg.vehicle) <= 1e-4);
            prop_assert!(tr.states[1..].iter().all(|s| s.v >= 0.5 - 1e-8 && s.delta.abs() <= 0.3 + 1e-8));
            let accepted: Vec<f64> = sol.log.outer.iter().filter(|o| o.accepted).map(|o| o.cost).collect();
            prop_assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
