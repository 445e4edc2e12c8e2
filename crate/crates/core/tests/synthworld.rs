use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bustr::eval::Dataset;
use bustr::ingest::{parse_gtfs_static, parse_traffic, parse_vehicle_positions, SegmentationConfig};
use bustr::pipeline::{examples_from_traces, world_inputs};
use bustr::shingler::{split_by_week, ShinglerConfig, WeekAssignment};
use bustr::spatial_grid::LatLng;
use bustr::synthworld::{MetroSpec, World, WorldSpec, DEFAULT_EPOCH, FEED_ID};
use bustr::Execution;

fn small(seed: u64) -> WorldSpec {
    WorldSpec {
        seed,
        days: 3,
        metros: vec![MetroSpec::new(LatLng { lat: 1.3, lng: 103.8 }, 6, 3, 3)],
        ..WorldSpec::default()
    }
}

#[test]
fn shingle_filters_pass_noisy_traces() {
    let world = World::generate(&WorldSpec {
        seed: 5,
        position_noise_m: 5.0,
        days: 7,
        ..WorldSpec::default()
    })
    .unwrap();
    let inputs = world_inputs(&world).unwrap();
    let (_, c) = examples_from_traces(
        inputs.traces,
        &inputs.feed,
        &ShinglerConfig::default(),
        1,
        Execution::default(),
    )
    .unwrap();
    let kept = c.get("shingles") as f64;
    let rejected = (c.get("rejected_gap") + c.get("rejected_speed")) as f64;
    assert!(kept > 1000.0);
    assert!(kept / (kept + rejected) > 0.95, "{c:?}");
}

#[test]
fn noiseless_world_ingests_without_drops() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(2);
    World::generate(&spec).unwrap().write(dir.path()).unwrap();
    let feed = parse_gtfs_static(&dir.path().join("gtfs"), FEED_ID, &SegmentationConfig::default()).unwrap();
    for (name, n) in &feed.counters.0 {
        assert!(name == "patterns" || name == "stops" || *n == 0, "{name} = {n}");
    }
    let (traces, c) = parse_vehicle_positions(&dir.path().join("vehicle_positions.jsonl"), &feed).unwrap();
    assert_eq!(c.get("reports_kept"), c.get("lines"));
    assert!(!traces.is_empty());
    for name in [
        "reports_malformed",
        "reports_unknown_trip",
        "reports_bad_position",
        "trips_non_monotone",
    ] {
        assert_eq!(c.get(name), 0, "{name}");
    }
    let (_, c) = parse_traffic(&dir.path().join("traffic.csv"), spec.traffic_bucket_min).unwrap();
    assert_eq!(c.get("rows"), c.get("rows_kept"));
    let inputs = world_inputs(&World::generate(&spec).unwrap()).unwrap();
    let (_, c) = bustr::pipeline::snap_traces(inputs.traces, &inputs.feed, 100.0, Execution::Sequential);
    assert_eq!(c.get("reports_off_shape"), 0);
}

/// Walks the interval in steps of at most one meter, charging each step
/// α/s + β + local seconds per meter at the speed seen on entering the
/// current piece, plus dwell at each stop reached.
fn simulate(world: &World, pattern: usize, start: f64, end: f64, t0: f64) -> f64 {
    let p = &world.patterns[pattern];
    let mut t = t0;
    let mut x = start;
    let mut piece_speed: Option<(usize, f64)> = None;
    while x < end {
        let k = p.pieces.iter().position(|q| q.lo <= x && x < q.hi).unwrap();
        let piece = &p.pieces[k];
        let s = match piece_speed {
            Some((pk, s)) if pk == k => s,
            _ => {
                let s = world.true_speed(pattern, piece.segment as usize, t);
                piece_speed = Some((k, s));
                s
            }
        };
        let law = &world.districts[piece.district];
        let step = (piece.hi.min(end) - x).min(1.0);
        t += step * (law.alpha / s + law.beta + piece.local);
        x += step;
        if x >= piece.hi {
            if let Some(stop) = piece.stop_at_end {
                t += p.dwell[stop];
            }
        }
    }
    t - t0
}

#[test]
fn oracle_matches_step_simulation() {
    let world = World::generate(&WorldSpec {
        local_effect_fraction: 0.3,
        ..small(3)
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let k = rng.random_range(0..world.patterns.len());
        let total = world.patterns[k].shape.total_m();
        let a = rng.random_range(0.0..total - 50.0);
        let b = rng.random_range(a + 10.0..=total);
        let t0 = (DEFAULT_EPOCH + rng.random_range(6 * 3600..70 * 3600)) as f64;
        let want = simulate(&world, k, a, b, t0);
        let got = world.oracle_duration(k, a, b, t0).unwrap();
        assert!(
            (got - want).abs() <= 1e-6 * want,
            "pattern {k} [{a}, {b}]: {got} vs {want}"
        );
    }
}

#[test]
fn two_district_interval_sums_laws() {
    let world = World::generate(&small(4)).unwrap();
    let t0 = (DEFAULT_EPOCH + 8 * 3600) as f64;
    let mut checked = 0;
    for (k, p) in world.patterns.iter().enumerate() {
        for w in p.pieces.windows(2) {
            let (x, y) = (&w[0], &w[1]);
            if x.district == y.district || x.stop_at_end.is_some() || y.stop_at_end.is_some() {
                continue;
            }
            let law = |piece: &bustr::synthworld::Piece, t: f64| {
                let d = &world.districts[piece.district];
                let s = world.true_speed(k, piece.segment as usize, t);
                (piece.hi - piece.lo) * (d.alpha / s + d.beta + piece.local)
            };
            let first = law(x, t0);
            let want = first + law(y, t0 + first);
            let got = world.oracle_duration(k, x.lo, y.hi, t0).unwrap();
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            checked += 1;
        }
    }
    assert!(checked > 0, "no district boundary without a stop");
}

#[test]
fn oracle_rejects_unknown_intervals() {
    let world = World::generate(&small(6)).unwrap();
    let total = world.patterns[0].shape.total_m();
    assert!(world.oracle_duration(world.patterns.len(), 0.0, 1.0, 0.0).is_err());
    assert!(world.oracle_duration(0, 0.0, total + 10.0, 0.0).is_err());
    assert!(world.oracle_duration(0, 20.0, 10.0, 0.0).is_err());
}

#[test]
fn degenerate_world_shingles_take_car_time() {
    // Unit law, no dwell, no noise, and day-long traffic buckets so each
    // segment's speed is one value for the whole service day.
    let mut spec = WorldSpec {
        seed: 9,
        dwell: (0.0, 0.0),
        days: 7,
        traffic_bucket_min: 1440,
        ..small(9)
    };
    spec.metros[0].alpha = (1.0, 1.0);
    spec.metros[0].beta = (0.0, 0.0);
    let world = World::generate(&spec).unwrap();
    let inputs = world_inputs(&world).unwrap();
    let (q, _) = examples_from_traces(
        inputs.traces,
        &inputs.feed,
        &ShinglerConfig::default(),
        2,
        Execution::default(),
    )
    .unwrap();
    let weeks = WeekAssignment {
        train: vec!["2024-W01".parse().unwrap()],
        validation: vec![],
        test: vec![],
    };
    let s = split_by_week(q, &weeks).unwrap();
    let data = Dataset::build(
        &s.train,
        &[],
        &[],
        inputs.feed.timezone,
        &inputs.traffic,
        Execution::default(),
    )
    .unwrap();
    assert!(data.train.len() > 100);
    for x in &data.train {
        let target = x.target().unwrap();
        assert!(
            (x.car_time() - target).abs() <= 1e-6 * target,
            "car {} vs actual {target}",
            x.car_time()
        );
    }
}
