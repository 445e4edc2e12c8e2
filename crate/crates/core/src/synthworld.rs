//! Synthetic cities with a known travel-time law, emitted in the same
//! formats the ingest stage reads.
//!
//! A bus traverses a road-segment piece (segments are cut at stops) in
//! `α·d/s + β·d` seconds, plus a per-cell local term, where `(α, β)` belong
//! to the district of the piece, `d` is its length and `s` the true traffic
//! speed of its segment when the bus enters it. At every interior stop it
//! dwells for a fixed time. Districts are unions of level-12.5 cells.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::LocalFrame;
use crate::ingest::{
    derive_segments, PositionRecord, RouteKey, SegmentKey, SegmentationConfig, TrafficTable, TripShape,
};
use crate::spatial_grid::{cell_at, CellId, GridLevel, LatLng};

/// 2024-01-01 00:00 UTC, a Monday.
pub const DEFAULT_EPOCH: i64 = 1_704_067_200;
pub const FEED_ID: &str = "synth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetroSpec {
    pub center: LatLng,
    pub blocks_x: usize,
    pub blocks_y: usize,
    pub block_m: f64,
    pub routes: usize,
    pub districts: usize,
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
}

impl MetroSpec {
    pub fn new(center: LatLng, blocks: usize, routes: usize, districts: usize) -> Self {
        MetroSpec {
            center,
            blocks_x: blocks,
            blocks_y: blocks,
            block_m: 500.0,
            routes,
            districts,
            alpha: (0.8, 1.6),
            beta: (0.0, 0.08),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwellMode {
    PerStop,
    PerDistrict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub metros: Vec<MetroSpec>,
    pub dwell: (f64, f64),
    pub dwell_mode: DwellMode,
    /// Fraction of level-15 cells with an extra per-meter delay.
    pub local_effect_fraction: f64,
    pub local_effect: (f64, f64),
    /// Free-flow segment speeds, m/s.
    pub base_speed: (f64, f64),
    /// Depth of the rush-hour speed dips, in [0, 1).
    pub diurnal_amplitude: f64,
    /// Log-space spread of the per-day, per-district, per-2h speed factor.
    pub daily_sigma: f64,
    /// Log-space noise on traffic observations.
    pub traffic_noise_sigma: f64,
    /// Log-space noise on each traversal and dwell.
    pub duration_noise_sigma: f64,
    pub misspecified: bool,
    pub stop_spacing_m: f64,
    pub report_interval_s: i64,
    pub position_noise_m: f64,
    pub headway_s: i64,
    pub service_start_h: u32,
    pub service_end_h: u32,
    pub epoch: i64,
    pub days: u32,
    pub traffic_bucket_min: i64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            metros: vec![MetroSpec::new(LatLng { lat: 1.3, lng: 103.8 }, 10, 6, 4)],
            dwell: (10.0, 45.0),
            dwell_mode: DwellMode::PerStop,
            local_effect_fraction: 0.0,
            local_effect: (0.03, 0.08),
            base_speed: (8.0, 14.0),
            diurnal_amplitude: 0.5,
            daily_sigma: 0.25,
            traffic_noise_sigma: 0.0,
            duration_noise_sigma: 0.0,
            misspecified: false,
            stop_spacing_m: 400.0,
            report_interval_s: 60,
            position_noise_m: 0.0,
            headway_s: 3600,
            service_start_h: 6,
            service_end_h: 22,
            epoch: DEFAULT_EPOCH,
            days: 21,
            traffic_bucket_min: 30,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.metros.is_empty() {
            return bad("world needs at least one metro".into());
        }
        for (i, m) in self.metros.iter().enumerate() {
            m.center.validate()?;
            if m.blocks_x == 0 || m.blocks_y == 0 || m.block_m <= 0.0 || m.districts == 0 {
                return bad(format!("metro {i}: grid and district counts must be positive"));
            }
            if !(m.alpha.0 > 0.0 && m.alpha.0 <= m.alpha.1) {
                return bad(format!("metro {i}: alpha range must be positive and ordered"));
            }
            if !(m.beta.0 >= 0.0 && m.beta.0 <= m.beta.1) {
                return bad(format!("metro {i}: beta range must be non-negative and ordered"));
            }
        }
        if !(self.dwell.0 >= 0.0 && self.dwell.0 <= self.dwell.1) {
            return bad("dwell range must be non-negative and ordered".into());
        }
        if !(self.base_speed.0 > 0.0 && self.base_speed.0 <= self.base_speed.1) {
            return bad("base speeds must be positive and ordered".into());
        }
        if !(0.0..1.0).contains(&self.diurnal_amplitude) {
            return bad("diurnal amplitude must be in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.local_effect_fraction) || self.local_effect.0 < 0.0 {
            return bad("local effects must be a fraction with non-negative size".into());
        }
        let sigmas = [
            self.daily_sigma,
            self.traffic_noise_sigma,
            self.duration_noise_sigma,
            self.position_noise_m,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise levels must be finite and non-negative".into());
        }
        if self.stop_spacing_m <= 0.0
            || self.report_interval_s <= 0
            || self.headway_s <= 0
            || self.traffic_bucket_min <= 0
        {
            return bad("spacings, intervals and buckets must be positive".into());
        }
        if self.service_start_h >= self.service_end_h || self.service_end_h > 24 || self.days == 0 {
            return bad("service window and day count must be non-empty".into());
        }
        Ok(())
    }

    /// Speed multiplier for a half-hour slot of the day: dips around 08:00
    /// and 17:30.
    pub fn diurnal(&self, slot: usize) -> f64 {
        let h = slot as f64 / 2.0 + 0.25;
        let bump = |c: f64, w: f64| (-(h - c).powi(2) / (2.0 * w * w)).exp();
        1.0 - self.diurnal_amplitude * (bump(8.0, 1.0).max(bump(17.5, 1.2)))
    }
}

/// One stretch of road between consecutive cut points (segment breaks and
/// stops) of a pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub segment: u32,
    pub lo: f64,
    pub hi: f64,
    pub district: usize,
    /// Extra seconds per meter from a local effect.
    pub local: f64,
    /// Stop index (in route order) located at `hi`, if any.
    pub stop_at_end: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldPattern {
    pub key: RouteKey,
    pub metro: usize,
    pub route_id: String,
    pub shape: TripShape,
    pub stop_locations: Vec<LatLng>,
    pub stop_offsets: Vec<f64>,
    pub dwell: Vec<f64>,
    pub pieces: Vec<Piece>,
    /// Per segment: free-flow speed and district of its midpoint.
    pub segment_speed: Vec<f64>,
    pub segment_district: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldTrip {
    pub trip_id: String,
    pub vehicle_id: String,
    pub pattern: usize,
    pub departure: i64,
    /// `(time, along)` knots of the trajectory, non-decreasing in both.
    pub timeline: Vec<(f64, f64)>,
}

impl WorldTrip {
    /// Along-shape position at time `t` (clamped to the trip).
    pub fn along_at(&self, t: f64) -> f64 {
        let k = self.timeline.partition_point(|(kt, _)| *kt <= t);
        if k == 0 {
            return self.timeline[0].1;
        }
        if k == self.timeline.len() {
            return self.timeline[k - 1].1;
        }
        let (t0, a0) = self.timeline[k - 1];
        let (t1, a1) = self.timeline[k];
        if t1 <= t0 {
            a1
        } else {
            a0 + (a1 - a0) * (t - t0) / (t1 - t0)
        }
    }

    /// Time the trip first reaches `along`.
    pub fn time_at(&self, along: f64) -> f64 {
        let k = self.timeline.partition_point(|(_, a)| *a < along);
        if k == 0 {
            return self.timeline[0].0;
        }
        if k == self.timeline.len() {
            return self.timeline[k - 1].0;
        }
        let (t0, a0) = self.timeline[k - 1];
        let (t1, a1) = self.timeline[k];
        t0 + (t1 - t0) * (along - a0) / (a1 - a0)
    }

    pub fn arrival(&self) -> f64 {
        self.timeline.last().map(|k| k.0).unwrap_or(self.departure as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistrictLaw {
    pub metro: usize,
    pub alpha: f64,
    pub beta: f64,
    pub dwell: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub patterns: Vec<WorldPattern>,
    pub trips: Vec<WorldTrip>,
    pub districts: Vec<DistrictLaw>,
    /// Level-12.5 cell → district.
    pub district_of_cell: BTreeMap<CellId, usize>,
    /// Level-15 cell → extra seconds per meter.
    pub local_effects: BTreeMap<CellId, f64>,
    /// Speed factor per (day, district, 2-hour block).
    daily: Vec<f64>,
}

const BLOCKS_PER_DAY: usize = 12;

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Level-`level` cells covering a metro's bounding box, sampled on a lattice
/// finer than the cells.
fn covered_cells(
    frame: &LocalFrame,
    half_w: f64,
    half_h: f64,
    level: GridLevel,
    step: f64,
) -> Result<BTreeSet<CellId>> {
    let mut out = BTreeSet::new();
    let (nx, ny) = ((2.0 * half_w / step).ceil() as i64, (2.0 * half_h / step).ceil() as i64);
    for i in 0..=nx {
        for j in 0..=ny {
            let p = frame.unproject([-half_w + i as f64 * step, -half_h + j as f64 * step]);
            out.insert(cell_at(p, level)?);
        }
    }
    Ok(out)
}

/// Random Manhattan path between two grid nodes at least half the grid
/// apart, as corner vertices.
fn manhattan_route(rng: &mut impl Rng, m: &MetroSpec) -> Vec<[f64; 2]> {
    let (nx, ny) = (m.blocks_x as i64, m.blocks_y as i64);
    let min_blocks = ((nx + ny) / 2).max(1);
    loop {
        let a = (rng.random_range(0..=nx), rng.random_range(0..=ny));
        let b = (rng.random_range(0..=nx), rng.random_range(0..=ny));
        if (a.0 - b.0).abs() + (a.1 - b.1).abs() < min_blocks || a.0 == b.0 || a.1 == b.1 {
            continue;
        }
        let node = |i: i64, j: i64| {
            [
                (i as f64 - nx as f64 / 2.0) * m.block_m,
                (j as f64 - ny as f64 / 2.0) * m.block_m,
            ]
        };
        let mid_x = if rng.random_bool(0.5) {
            a.0.min(b.0) + (a.0 - b.0).abs() / 2
        } else {
            b.0
        };
        let mut pts = vec![node(a.0, a.1), node(mid_x, a.1), node(mid_x, b.1), node(b.0, b.1)];
        pts.dedup();
        return pts;
    }
}

/// The traversal law for one piece.
fn piece_time(spec: &WorldSpec, law: &DistrictLaw, local: f64, d: f64, s: f64) -> f64 {
    let car = d / s;
    let car = if spec.misspecified {
        car * (10.0 / s).sqrt()
    } else {
        car
    };
    law.alpha * car + (law.beta + local) * d
}

impl World {
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let seg_cfg = SegmentationConfig::default();

        // Districts and local effects.
        let mut districts = Vec::new();
        let mut district_of_cell = BTreeMap::new();
        let mut local_effects = BTreeMap::new();
        let mut frames = Vec::new();
        for (mi, m) in spec.metros.iter().enumerate() {
            let frame = LocalFrame::new(m.center);
            let (hw, hh) = (m.blocks_x as f64 * m.block_m / 2.0, m.blocks_y as f64 * m.block_m / 2.0);
            let first = districts.len();
            let mut metro_dwell_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((mi as u64 + 1) * 0x9e37));
            for _ in 0..m.districts {
                districts.push(DistrictLaw {
                    metro: mi,
                    alpha: uniform(&mut rng, m.alpha),
                    beta: uniform(&mut rng, m.beta),
                    dwell: uniform(&mut metro_dwell_rng, spec.dwell),
                });
            }
            let mut cells: Vec<CellId> = covered_cells(&frame, hw + 200.0, hh + 200.0, GridLevel::L12_5, 100.0)?
                .into_iter()
                .filter(|c| !district_of_cell.contains_key(c))
                .collect();
            cells.shuffle(&mut rng);
            for (i, c) in cells.into_iter().enumerate() {
                district_of_cell.insert(c, first + i % m.districts);
            }
            if spec.local_effect_fraction > 0.0 {
                let l15 = covered_cells(&frame, hw + 50.0, hh + 50.0, GridLevel::L15, 25.0)?;
                for c in l15 {
                    if rng.random_bool(spec.local_effect_fraction) {
                        local_effects.insert(c, uniform(&mut rng, spec.local_effect));
                    }
                }
            }
            frames.push(frame);
        }

        // Routes, both directions.
        let mut patterns = Vec::new();
        for (mi, m) in spec.metros.iter().enumerate() {
            for r in 0..m.routes {
                let route_id = format!("m{mi}r{r}");
                let xy = manhattan_route(&mut rng, m);
                for dir in 0..2 {
                    let pts: Vec<[f64; 2]> = if dir == 0 {
                        xy.clone()
                    } else {
                        xy.iter().rev().cloned().collect()
                    };
                    let polyline: Vec<LatLng> = pts.iter().map(|p| frames[mi].unproject(*p)).collect();
                    let shape_id = format!("{route_id}_{dir}");
                    let p = Self::build_pattern(
                        spec,
                        &mut rng,
                        mi,
                        &route_id,
                        &shape_id,
                        polyline,
                        &seg_cfg,
                        &districts,
                        &district_of_cell,
                        &local_effects,
                    )?;
                    patterns.push(p);
                }
            }
        }

        let n_days = spec.days as usize;
        let daily_noise = Normal::new(0.0, spec.daily_sigma.max(1e-300)).expect("finite sigma");
        let daily = (0..n_days * districts.len() * BLOCKS_PER_DAY)
            .map(|_| {
                if spec.daily_sigma > 0.0 {
                    daily_noise.sample(&mut rng).exp()
                } else {
                    1.0
                }
            })
            .collect();

        let mut world = World {
            spec: spec.clone(),
            patterns,
            trips: Vec::new(),
            districts,
            district_of_cell,
            local_effects,
            daily,
        };
        world.trips = world.simulate_trips(&mut rng)?;
        Ok(world)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_pattern(
        spec: &WorldSpec,
        rng: &mut ChaCha8Rng,
        metro: usize,
        route_id: &str,
        shape_id: &str,
        polyline: Vec<LatLng>,
        seg_cfg: &SegmentationConfig,
        districts: &[DistrictLaw],
        district_of_cell: &BTreeMap<CellId, usize>,
        local_effects: &BTreeMap<CellId, f64>,
    ) -> Result<WorldPattern> {
        let mut shape = TripShape::new(shape_id, polyline)?;
        shape.segment_breaks = derive_segments(&shape, seg_cfg)?;
        let total = shape.total_m();
        let mut offsets: Vec<f64> = Vec::new();
        let mut o = 0.0;
        while o < total - 0.4 * spec.stop_spacing_m {
            offsets.push(o);
            o += spec.stop_spacing_m;
        }
        offsets.push(total);
        let stop_locations: Vec<LatLng> = offsets.iter().map(|o| shape.point_at(*o)).collect();
        // Offsets as the ingest stage will compute them from the locations.
        let mut stop_offsets = Vec::with_capacity(offsets.len());
        let mut min = 0.0;
        for p in &stop_locations {
            let (a, _) = shape.project(*p, min);
            stop_offsets.push(a);
            min = a;
        }
        shape.stop_offsets = stop_offsets.clone();
        let stop_ids: Vec<String> = (0..stop_offsets.len()).map(|k| format!("{shape_id}_s{k}")).collect();
        let key = RouteKey::new(FEED_ID, route_id, stop_ids)?;

        let district_at = |p: LatLng| -> Result<usize> {
            let c = cell_at(p, GridLevel::L12_5)?;
            district_of_cell
                .get(&c)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("route leaves the metro grid at cell {c}")))
        };
        let bounds = shape.segment_bounds();
        let mut segment_speed = Vec::with_capacity(bounds.len());
        let mut segment_district = Vec::with_capacity(bounds.len());
        for (a, b) in &bounds {
            segment_speed.push(uniform(rng, spec.base_speed));
            segment_district.push(district_at(shape.point_at(0.5 * (a + b)))?);
        }
        let dwell: Vec<f64> = stop_locations
            .iter()
            .map(|p| match spec.dwell_mode {
                DwellMode::PerStop => Ok(uniform(rng, spec.dwell)),
                DwellMode::PerDistrict => district_at(*p).map(|d| districts[d].dwell),
            })
            .collect::<Result<_>>()?;

        // Cut points: segment boundaries and stop offsets.
        let mut pieces = Vec::new();
        let n_stops = stop_offsets.len();
        for (si, (a, b)) in bounds.iter().enumerate() {
            let mut cuts: Vec<(f64, Option<usize>)> = stop_offsets
                .iter()
                .enumerate()
                .filter(|(_, o)| **o > *a && **o < *b)
                .map(|(k, o)| (*o, Some(k)))
                .collect();
            let end_stop = stop_offsets.iter().position(|o| *o == *b);
            cuts.push((*b, end_stop));
            let mut lo = *a;
            for (hi, stop) in cuts {
                if hi > lo {
                    let mid = shape.point_at(0.5 * (lo + hi));
                    pieces.push(Piece {
                        segment: si as u32,
                        lo,
                        hi,
                        district: district_at(mid)?,
                        local: local_effects
                            .get(&cell_at(mid, GridLevel::L15)?)
                            .copied()
                            .unwrap_or(0.0),
                        stop_at_end: stop.filter(|k| *k > 0 && *k + 1 < n_stops),
                    });
                    lo = hi;
                } else if let (Some(k), Some(last)) = (stop, pieces.last_mut()) {
                    // A stop exactly at the previous cut.
                    if k > 0 && k + 1 < n_stops && last.hi == hi {
                        last.stop_at_end = Some(k);
                    }
                }
            }
        }
        Ok(WorldPattern {
            key,
            metro,
            route_id: route_id.to_string(),
            shape,
            stop_locations,
            stop_offsets,
            dwell,
            pieces,
            segment_speed,
            segment_district,
        })
    }

    /// True traffic speed of a segment at time `t` (constant within a
    /// traffic bucket).
    pub fn true_speed(&self, pattern: usize, segment: usize, t: f64) -> f64 {
        let p = &self.patterns[pattern];
        let bucket_s = (self.spec.traffic_bucket_min * 60) as f64;
        let tb = (t / bucket_s).floor() * bucket_s;
        let since = tb - self.spec.epoch as f64;
        let day = (since / 86_400.0).floor().clamp(0.0, self.spec.days as f64 - 1.0) as usize;
        let sec_of_day = since.rem_euclid(86_400.0);
        let slot = (sec_of_day / 1800.0) as usize % 48;
        let block = (sec_of_day / 7200.0) as usize % BLOCKS_PER_DAY;
        let district = p.segment_district[segment];
        let daily = self.daily[(day * self.districts.len() + district) * BLOCKS_PER_DAY + block];
        (p.segment_speed[segment] * self.spec.diurnal(slot) * daily).clamp(0.5, 60.0)
    }

    fn piece_duration(&self, pattern: usize, piece: &Piece, lo: f64, hi: f64, t: f64) -> f64 {
        let s = self.true_speed(pattern, piece.segment as usize, t);
        piece_time(&self.spec, &self.districts[piece.district], piece.local, hi - lo, s)
    }

    fn simulate_trips(&self, rng: &mut ChaCha8Rng) -> Result<Vec<WorldTrip>> {
        let spec = &self.spec;
        let noise = Normal::new(0.0, spec.duration_noise_sigma.max(1e-300)).expect("finite sigma");
        let factor = |rng: &mut ChaCha8Rng| {
            if spec.duration_noise_sigma > 0.0 {
                noise.sample(rng).exp()
            } else {
                1.0
            }
        };
        let mut trips = Vec::new();
        for (pi, p) in self.patterns.iter().enumerate() {
            let phase = rng.random_range(0..spec.headway_s.min(3600));
            for day in 0..spec.days as i64 {
                let day0 = spec.epoch + day * 86_400;
                let mut dep = day0 + spec.service_start_h as i64 * 3600 + phase;
                let mut k = 0;
                while dep < day0 + spec.service_end_h as i64 * 3600 {
                    let mut t = dep as f64;
                    let mut timeline = vec![(t, 0.0)];
                    for piece in &p.pieces {
                        t += self.piece_duration(pi, piece, piece.lo, piece.hi, t) * factor(rng);
                        timeline.push((t, piece.hi));
                        if let Some(s) = piece.stop_at_end {
                            t += p.dwell[s] * factor(rng);
                            timeline.push((t, piece.hi));
                        }
                    }
                    trips.push(WorldTrip {
                        trip_id: format!("{}_d{day}_{k}", p.shape.shape_id),
                        vehicle_id: format!("bus_{}_{}", p.shape.shape_id, k % 4),
                        pattern: pi,
                        departure: dep,
                        timeline,
                    });
                    dep += spec.headway_s;
                    k += 1;
                }
            }
        }
        Ok(trips)
    }

    pub fn pattern_index(&self, key: &RouteKey) -> Result<usize> {
        self.patterns
            .iter()
            .position(|p| p.key == *key)
            .ok_or_else(|| Error::NotFound(format!("route {key}")))
    }

    /// Expected noise-free duration from `start_m` (departing at `t0`) to
    /// `end_m` along a pattern. Dwells at stops in `(start_m, end_m]` count.
    pub fn oracle_duration(&self, pattern: usize, start_m: f64, end_m: f64, t0: f64) -> Result<f64> {
        let p = self
            .patterns
            .get(pattern)
            .ok_or_else(|| Error::NotFound(format!("pattern {pattern}")))?;
        let total = p.shape.total_m();
        if !(start_m >= 0.0 && end_m <= total + 1e-9 && start_m <= end_m) {
            return Err(Error::InvalidArgument(format!(
                "interval [{start_m}, {end_m}] outside route extent [0, {total}]"
            )));
        }
        let mut t = t0;
        for piece in &p.pieces {
            if piece.hi <= start_m || piece.lo >= end_m {
                continue;
            }
            let (lo, hi) = (piece.lo.max(start_m), piece.hi.min(end_m));
            t += self.piece_duration(pattern, piece, lo, hi, t);
            if let Some(s) = piece.stop_at_end {
                if piece.hi <= end_m {
                    t += p.dwell[s];
                }
            }
        }
        Ok(t - t0)
    }

    /// GTFS text files keyed by file name.
    pub fn gtfs_files(&self) -> BTreeMap<String, String> {
        let mut files = BTreeMap::new();
        files.insert(
            "agency.txt".to_string(),
            "agency_id,agency_name,agency_url,agency_timezone\nsynth,Synthetic Transit,https://example.invalid,UTC\n"
                .to_string(),
        );
        let mut stops = String::from("stop_id,stop_name,stop_lat,stop_lon\n");
        let mut shapes = String::from("shape_id,shape_pt_lat,shape_pt_lon,shape_pt_sequence\n");
        let mut routes = String::from("route_id,agency_id,route_short_name,route_type\n");
        let mut seen_routes = BTreeSet::new();
        for p in &self.patterns {
            for (id, loc) in p.key.ordered_stop_ids.iter().zip(&p.stop_locations) {
                let _ = writeln!(stops, "{id},{id},{},{}", loc.lat, loc.lng);
            }
            for (i, v) in p.shape.polyline.iter().enumerate() {
                let _ = writeln!(shapes, "{},{},{},{}", p.shape.shape_id, v.lat, v.lng, i + 1);
            }
            if seen_routes.insert(p.route_id.clone()) {
                let _ = writeln!(routes, "{},synth,{},3", p.route_id, p.route_id);
            }
        }
        let mut trips = String::from("route_id,service_id,trip_id,shape_id,direction_id\n");
        let mut stop_times = String::from("trip_id,arrival_time,departure_time,stop_id,stop_sequence\n");
        let hms = |t: f64, day0: i64| {
            let s = (t - day0 as f64).round() as i64;
            format!("{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
        };
        for trip in &self.trips {
            let p = &self.patterns[trip.pattern];
            let dir = if p.shape.shape_id.ends_with("_0") { 0 } else { 1 };
            let _ = writeln!(trips, "{},all,{},{},{dir}", p.route_id, trip.trip_id, p.shape.shape_id);
            let day0 = self.spec.epoch + (trip.departure - self.spec.epoch).div_euclid(86_400) * 86_400;
            for (k, (id, o)) in p.key.ordered_stop_ids.iter().zip(&p.stop_offsets).enumerate() {
                let arr = trip.time_at(*o);
                let dep = if k == 0 {
                    trip.departure as f64
                } else {
                    arr + if k + 1 < p.dwell.len() { p.dwell[k] } else { 0.0 }
                };
                let _ = writeln!(
                    stop_times,
                    "{},{},{},{id},{}",
                    trip.trip_id,
                    hms(arr, day0),
                    hms(dep, day0),
                    k + 1
                );
            }
        }
        files.insert("stops.txt".to_string(), stops);
        files.insert("shapes.txt".to_string(), shapes);
        files.insert("routes.txt".to_string(), routes);
        files.insert("trips.txt".to_string(), trips);
        files.insert("stop_times.txt".to_string(), stop_times);
        files
    }

    /// Vehicle reports every report interval from a random phase, with
    /// Gaussian position noise.
    pub fn position_records(&self) -> Vec<PositionRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x005e_ed0f_7ace);
        let noise = Normal::new(0.0, self.spec.position_noise_m.max(1e-300)).expect("finite sigma");
        let mut out = Vec::new();
        for trip in &self.trips {
            let p = &self.patterns[trip.pattern];
            let frame = p.shape.frame();
            let end = trip.arrival();
            let mut t = trip.departure + rng.random_range(0..self.spec.report_interval_s);
            while (t as f64) <= end {
                let mut xy = p.shape.xy_at(trip.along_at(t as f64));
                if self.spec.position_noise_m > 0.0 {
                    xy[0] += noise.sample(&mut rng);
                    xy[1] += noise.sample(&mut rng);
                }
                let ll = frame.unproject(xy);
                out.push(PositionRecord {
                    vehicle_id: trip.vehicle_id.clone(),
                    feed_id: FEED_ID.to_string(),
                    trip_id: trip.trip_id.clone(),
                    ts: t,
                    lat: ll.lat,
                    lng: ll.lng,
                });
                t += self.spec.report_interval_s;
            }
        }
        out
    }

    /// Observed traffic: the true speed per segment and bucket over the
    /// service window (with an hour of margin), with optional noise.
    pub fn traffic_entries(&self) -> Vec<(SegmentKey, i64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x007a_ff1c);
        let noise = Normal::new(0.0, self.spec.traffic_noise_sigma.max(1e-300)).expect("finite sigma");
        let g = self.spec.traffic_bucket_min;
        let mut out = Vec::new();
        for (pi, p) in self.patterns.iter().enumerate() {
            for si in 0..p.segment_speed.len() {
                let key = p.shape.segment_key(si);
                for day in 0..self.spec.days as i64 {
                    let day0_min = (self.spec.epoch + day * 86_400) / 60;
                    let from = day0_min + (self.spec.service_start_h as i64 - 1) * 60;
                    let to = day0_min + (self.spec.service_end_h as i64 + 2).min(24) * 60;
                    let mut b = from.div_euclid(g) * g;
                    while b < to {
                        let mut s = self.true_speed(pi, si, (b * 60) as f64);
                        if self.spec.traffic_noise_sigma > 0.0 {
                            s = (s * noise.sample(&mut rng).exp()).clamp(0.1, 70.0);
                        }
                        out.push((key.clone(), b, s));
                        b += g;
                    }
                }
            }
        }
        out
    }

    pub fn traffic_table(&self) -> Result<TrafficTable> {
        TrafficTable::from_entries(self.spec.traffic_bucket_min, self.traffic_entries())
    }

    /// Writes `gtfs/`, `vehicle_positions.jsonl`, `traffic.csv` and
    /// `world.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let gtfs = dir.join("gtfs");
        fs::create_dir_all(&gtfs).map_err(|e| Error::io(&gtfs, e))?;
        for (name, body) in self.gtfs_files() {
            let p = gtfs.join(&name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        let mut vp = String::new();
        for r in self.position_records() {
            vp.push_str(&serde_json::to_string(&r).expect("plain record"));
            vp.push('\n');
        }
        let p = dir.join("vehicle_positions.jsonl");
        fs::write(&p, vp).map_err(|e| Error::io(&p, e))?;
        self.traffic_table()?.write_csv(&dir.join("traffic.csv"))?;
        let p = dir.join("world.json");
        let spec = serde_json::to_string_pretty(&self.spec).expect("plain spec");
        fs::write(&p, spec).map_err(|e| Error::io(&p, e))
    }

    /// Patterns of the given metro.
    pub fn metro_patterns(&self, metro: usize) -> impl Iterator<Item = usize> + '_ {
        self.patterns
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.metro == metro)
            .map(|(i, _)| i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> WorldSpec {
        WorldSpec {
            metros: vec![MetroSpec::new(LatLng { lat: 1.3, lng: 103.8 }, 6, 2, 4)],
            days: 1,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn degenerate_world_is_car_time() {
        let mut spec = small_spec();
        spec.metros[0].alpha = (1.0, 1.0);
        spec.metros[0].beta = (0.0, 0.0);
        spec.dwell = (0.0, 0.0);
        let w = World::generate(&spec).unwrap();
        let p = &w.patterns[0];
        let t0 = (DEFAULT_EPOCH + 9 * 3600) as f64;
        let got = w.oracle_duration(0, 0.0, p.shape.total_m(), t0).unwrap();
        let mut t = t0;
        for piece in &p.pieces {
            t += (piece.hi - piece.lo) / w.true_speed(0, piece.segment as usize, t);
        }
        assert!((got - (t - t0)).abs() < 1e-9);
    }

    #[test]
    fn law_arithmetic() {
        let spec = WorldSpec::default();
        let law = DistrictLaw {
            metro: 0,
            alpha: 1.0,
            beta: 0.05,
            dwell: 0.0,
        };
        assert!((piece_time(&spec, &law, 0.0, 2000.0, 10.0) - 300.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_is_additive_at_stops() {
        let w = World::generate(&small_spec()).unwrap();
        let p = &w.patterns[1];
        let o = &p.stop_offsets;
        let t0 = (DEFAULT_EPOCH + 7 * 3600 + 900) as f64;
        for (a, b, c) in [(0, 1, 2), (0, 3, 5), (1, 2, o.len() - 1)] {
            let ab = w.oracle_duration(1, o[a], o[b], t0).unwrap();
            let bc = w.oracle_duration(1, o[b], o[c], t0 + ab).unwrap();
            let ac = w.oracle_duration(1, o[a], o[c], t0).unwrap();
            assert!((ac - (ab + bc)).abs() < 1e-9 * ac, "{ac} vs {}", ab + bc);
        }
    }

    #[test]
    fn trips_follow_the_oracle() {
        let w = World::generate(&small_spec()).unwrap();
        for trip in w.trips.iter().step_by(7) {
            let total = w.patterns[trip.pattern].shape.total_m();
            let o = w
                .oracle_duration(trip.pattern, 0.0, total, trip.departure as f64)
                .unwrap();
            assert!((trip.arrival() - trip.departure as f64 - o).abs() < 1e-6);
        }
    }

    #[test]
    fn districts_within_ranges() {
        let w = World::generate(&small_spec()).unwrap();
        assert_eq!(w.districts.len(), 4);
        for d in &w.districts {
            assert!((0.8..=1.6).contains(&d.alpha) && (0.0..=0.08).contains(&d.beta));
        }
        let used: BTreeSet<usize> = w
            .patterns
            .iter()
            .flat_map(|p| p.pieces.iter().map(|x| x.district))
            .collect();
        assert!(used.len() >= 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = World::generate(&small_spec()).unwrap();
        let b = World::generate(&small_spec()).unwrap();
        assert_eq!(a.gtfs_files(), b.gtfs_files());
        assert_eq!(a.position_records(), b.position_records());
        assert_eq!(a.traffic_entries(), b.traffic_entries());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = small_spec();
        s.metros[0].alpha = (0.0, 1.0);
        assert!(World::generate(&s).is_err());
        let mut s = small_spec();
        s.diurnal_amplitude = 1.0;
        assert!(World::generate(&s).is_err());
    }
}
