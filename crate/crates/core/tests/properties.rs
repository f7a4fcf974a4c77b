use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use traffic_core::dqn::{epsilon_at, AgentConfig, Experience, ReplayMemory};
use traffic_core::harness::{run_once, NetworkDriver, NoopDriver};
use traffic_core::neural::{Activation, LayerDef, QNetwork};
use traffic_core::perception::{input_size, slice_state, InputHistory, OccupancyGrid, SensorConfig, WALL};
use traffic_core::sim::{
    Action, Direction, Vehicle, VehicleKind, World, WorldConfig, EGO_ID, EGO_LANE, EGO_NOSE_Y, GRID_ROWS, LANE_COUNT,
    MAX_SPEED, VEHICLE_COUNT,
};

/// (lane, nose y, speed, lateral offset toward the right-hand lane or 0).
type CarSpec = (usize, i32, u8, u8);

fn car_specs() -> impl Strategy<Value = Vec<CarSpec>> {
    prop::collection::vec((0usize..LANE_COUNT, -30i32..720, 0u8..=80, 0u8..20), 0..12)
}

/// Add cars one at a time, dropping any that would overlap those already placed.
fn build_world(specs: &[CarSpec], seed: u64) -> World {
    let mut cars = vec![Vehicle::new(EGO_ID, VehicleKind::Ego, EGO_LANE, EGO_NOSE_Y, MAX_SPEED)];
    for &(lane, y, speed, offset) in specs {
        let mut v = Vehicle::new(cars.len(), VehicleKind::Ambient, lane, f64::from(y), f64::from(speed));
        if offset > 0 && lane + 1 < LANE_COUNT {
            v.x += f64::from(offset);
            v.target_lane = lane + 1;
        }
        let mut trial = cars.clone();
        trial.push(v);
        if World::from_vehicles(WorldConfig::default(), trial.clone(), seed).is_ok() {
            cars = trial;
        }
    }
    World::from_vehicles(WorldConfig::default(), cars, seed).unwrap()
}

/// Horizontal extent of a car counting its committed destination lane.
fn footprint(v: &Vehicle) -> (f64, f64) {
    let target = 20.0 * v.target_lane as f64;
    (v.x.min(target), v.x.max(target) + 20.0)
}

/// Per-pixel rasterizer: a cell holds the slowest car covering any pixel
/// centre inside it.
fn rasterize(world: &World) -> Vec<Vec<Option<f64>>> {
    let mut cells = vec![vec![None::<f64>; GRID_ROWS]; LANE_COUNT];
    for v in world.vehicles() {
        let (x0, x1) = footprint(v);
        for py in 0..700 {
            let cy = py as f64 + 0.5;
            if !(cy > v.y && cy < v.y + 40.0) {
                continue;
            }
            for px in 0..140 {
                let cx = px as f64 + 0.5;
                if cx > x0 && cx < x1 {
                    let cell = &mut cells[px / 20][py / 10];
                    *cell = Some(cell.map_or(v.speed, |s| s.min(v.speed)));
                }
            }
        }
    }
    cells
}

/// Scan the 6 cells ahead, 4 abreast and 1 behind in the adjacent lane.
fn zone_scan_permits(world: &World, i: usize, direction: Direction) -> bool {
    let me = world.vehicle(i);
    let lane = me.target_lane as i64 + if direction == Direction::Left { -1 } else { 1 };
    if !(0..LANE_COUNT as i64).contains(&lane) {
        return false;
    }
    let nose_row = (me.y / 10.0).floor() as i64;
    let (cx0, cx1) = (20.0 * lane as f64, 20.0 * lane as f64 + 20.0);
    for row in nose_row - 6..=nose_row + 4 {
        if !(0..GRID_ROWS as i64).contains(&row) {
            continue;
        }
        let (cy0, cy1) = (10.0 * row as f64, 10.0 * row as f64 + 10.0);
        for v in world.vehicles() {
            if v.id == i || v.y >= 700.0 || v.y + 40.0 <= 0.0 {
                continue;
            }
            let (x0, x1) = footprint(v);
            if x0 < cx1 && x1 > cx0 && v.y < cy1 && v.y + 40.0 > cy0 {
                return false;
            }
        }
    }
    true
}

fn sensors() -> impl Strategy<Value = SensorConfig> {
    (0usize..=3, 1usize..=40, 0usize..=30, 0usize..=4).prop_filter_map("rows fit", |(ls, a, b, w)| {
        let s = SensorConfig {
            lanes_side: ls,
            patches_ahead: a,
            patches_behind: b,
            temporal_window: w,
        };
        s.validate().ok().map(|_| s)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_equals_pixel_rasterizer(specs in car_specs(), seed in any::<u64>()) {
        let world = build_world(&specs, seed);
        let grid = OccupancyGrid::build(&world);
        let raster = rasterize(&world);
        for lane in 0..LANE_COUNT {
            for row in 0..GRID_ROWS {
                prop_assert_eq!(grid.get(lane, row), raster[lane][row].unwrap_or(0.0), "cell {} {}", lane, row);
            }
        }
        prop_assert_eq!(OccupancyGrid::build(&world), grid);
    }

    #[test]
    fn lane_change_blocking_equals_zone_scan(specs in car_specs(), seed in any::<u64>()) {
        let world = build_world(&specs, seed);
        for v in world.vehicles() {
            for dir in [Direction::Left, Direction::Right] {
                prop_assert_eq!(world.lane_change_permitted(v.id, dir), zone_scan_permits(&world, v.id, dir));
            }
        }
    }

    #[test]
    fn slice_reads_grid_over_eighty(specs in car_specs(), sensor in sensors(), seed in any::<u64>()) {
        let world = build_world(&specs, seed);
        let grid = OccupancyGrid::build(&world);
        for v in world.vehicles() {
            let slice = slice_state(&grid, &world, &sensor, v.id);
            prop_assert_eq!(slice.len(), sensor.slice_size());
            prop_assert_eq!(&slice_state(&grid, &world, &sensor, v.id), &slice);
            let nose = (v.y / 10.0).floor() as i64;
            let lanes = sensor.lanes();
            for (k, &value) in slice.iter().enumerate() {
                let row = nose - sensor.patches_ahead as i64 + (k / lanes) as i64;
                let lane = v.target_lane as i64 - sensor.lanes_side as i64 + (k % lanes) as i64;
                if !(0..LANE_COUNT as i64).contains(&lane) {
                    prop_assert_eq!(value, WALL);
                } else if (0..GRID_ROWS as i64).contains(&row) {
                    prop_assert_eq!(value, grid.get(lane as usize, row as usize) / 80.0);
                } else {
                    prop_assert_eq!(value, 0.0);
                }
            }
        }
    }

    #[test]
    fn assembled_input_has_the_declared_length(sensor in sensors(), pushes in 0usize..8) {
        let mut h = InputHistory::new(sensor.temporal_window, 5);
        let s = sensor.slice_size();
        for k in 0..pushes {
            prop_assert_eq!(h.assemble(&vec![0.5; s]).len(), input_size(&sensor, 5));
            h.push(vec![k as f64; s], k % 5);
        }
        prop_assert_eq!(h.assemble(&vec![0.5; s]).len(), input_size(&sensor, 5));
    }

    #[test]
    fn random_play_conserves_cars_and_never_overlaps(seed in any::<u64>(), clones in 0usize..4) {
        let cfg = WorldConfig { agent_clone_count: clones, ..WorldConfig::default() };
        let mut world = World::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..1500 {
            world.advance(|_, _| Action::ALL[rng.gen_range(0..5)]);
            prop_assert_eq!(world.vehicles().len(), VEHICLE_COUNT);
            prop_assert_eq!(world.ego().y, EGO_NOSE_Y);
            prop_assert_eq!(world.first_overlap(), None);
            for v in world.vehicles() {
                if v.is_on_road() {
                    prop_assert!(v.speed <= v.commanded_speed(), "car {} drove {} > {}", v.id, v.speed, v.commanded_speed());
                    prop_assert!(world.safety_speed(v.id) <= v.commanded_speed());
                }
            }
        }
    }

    #[test]
    fn same_seed_and_actions_replay_identically(seed in any::<u64>(), trace_seed in any::<u64>()) {
        let run = || {
            let mut world = World::new(WorldConfig::default(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(trace_seed);
            (0..400)
                .map(|_| serde_json::to_string(&world.advance(|_, _| Action::ALL[rng.gen_range(0..5)])).unwrap())
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn epsilon_is_monotone_and_bounded(burnin in 0u64..5000, span in 0u64..100_000, eps_min in 0.0f64..=1.0, t in 0u64..200_000) {
        let cfg = AgentConfig {
            learning_steps_burnin: burnin,
            learning_steps_total: burnin + span,
            epsilon_min: eps_min,
            ..AgentConfig::default()
        };
        let (a, b) = (epsilon_at(t, &cfg), epsilon_at(t + 1, &cfg));
        prop_assert!(b <= a);
        prop_assert!((eps_min..=1.0).contains(&a));
    }

    #[test]
    fn replay_keeps_the_newest(capacity in 1usize..50, extra in 0usize..50) {
        let mut m = ReplayMemory::new(capacity);
        for k in 0..capacity + extra {
            m.push(Experience { s: vec![], a: 0, r: k as f64, s_next: vec![] });
            prop_assert!(m.len() <= capacity);
        }
        let kept: Vec<f64> = m.iter().map(|e| e.r).collect();
        let want: Vec<f64> = (extra..capacity + extra).map(|k| k as f64).collect();
        prop_assert_eq!(kept, want);
    }

    #[test]
    fn forward_is_bit_deterministic(seed in any::<u64>(), x in prop::collection::vec(-1.0f64..1.0, 6)) {
        let spec = traffic_core::neural::LayerSpec::new(6, &[LayerDef::new(5, Activation::Tanh)], 5);
        let net = QNetwork::new(spec, seed).unwrap();
        let a: Vec<u64> = net.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = net.clone().forward(&x).unwrap().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn noop_ego_averages_between_60_and_80(seed in any::<u64>()) {
        let score = run_once(&NoopDriver, &WorldConfig::default(), 10_000, seed).unwrap();
        prop_assert!((60.0..=80.0).contains(&score), "{}", score);
    }

    #[test]
    fn greedy_score_ignores_positive_affine_rescaling(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let cfg = AgentConfig {
            sensor: SensorConfig { lanes_side: 1, patches_ahead: 6, patches_behind: 2, temporal_window: 1 },
            layers: vec![LayerDef::new(8, Activation::Relu)],
            ..AgentConfig::default()
        };
        let net = QNetwork::new(cfg.layer_spec(), seed).unwrap();
        // Output layer = last 8·5 weights then 5 biases.
        let mut p = net.parameters();
        let n = p.len();
        for w in &mut p[n - 45..n - 5] {
            *w *= scale;
        }
        for b in &mut p[n - 5..] {
            *b = *b * scale + shift;
        }
        let mut scaled = net.clone();
        scaled.set_parameters(&p).unwrap();
        let world = WorldConfig::default();
        let a = run_once(&NetworkDriver::new(net, &cfg).unwrap(), &world, 600, seed).unwrap();
        let b = run_once(&NetworkDriver::new(scaled, &cfg).unwrap(), &world, 600, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
