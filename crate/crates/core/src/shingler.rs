//! Shingling of snapped trajectories and decomposition of intervals into
//! stop and road-segment quanta.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::{DateTime, Datelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{stable_hash, Execution};
use crate::ingest::{Counters, Feed, RouteKey, RoutePattern, SegmentKey, SnappedTrace, Stop};
use crate::spatial_grid::{model_cells, CellId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShinglerConfig {
    pub min_length_lo_m: f64,
    pub min_length_hi_m: f64,
    pub stop_exclusion_m: f64,
    pub min_start_spacing_s: i64,
    pub max_gap_s: i64,
    pub max_gap_m: f64,
    pub min_speed_kmh: f64,
    pub max_speed_kmh: f64,
    pub snap_tolerance_m: f64,
}

impl Default for ShinglerConfig {
    fn default() -> Self {
        ShinglerConfig {
            min_length_lo_m: 1000.0,
            min_length_hi_m: 5000.0,
            stop_exclusion_m: 20.0,
            min_start_spacing_s: 30,
            max_gap_s: 300,
            max_gap_m: 3000.0,
            min_speed_kmh: 0.7,
            max_speed_kmh: 140.0,
            snap_tolerance_m: 100.0,
        }
    }
}

/// A timed interval of one observed trip: the unit of training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shingle {
    pub route: Arc<RouteKey>,
    pub shape_id: String,
    pub trace_id: String,
    pub start_m: f64,
    pub end_m: f64,
    pub start_ts: i64,
    pub end_ts: i64,
    pub duration_s: i64,
}

impl Shingle {
    pub fn length_m(&self) -> f64 {
        self.end_m - self.start_m
    }

    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        (self.start_ts, &self.trace_id, self.end_ts)
            .cmp(&(other.start_ts, &other.trace_id, other.end_ts))
            .then(self.start_m.total_cmp(&other.start_m))
            .then(self.end_m.total_cmp(&other.end_m))
    }
}

/// Deterministic per-trace generator derived from the global seed.
pub fn trace_rng(seed: u64, trace_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash(trace_id))
}

/// Shingles for one trace given its minimum-length draw.
///
/// A report can be an endpoint only if it is farther than the exclusion
/// radius from every stop. Starts are visited in time order; each ends at
/// the first later admissible report at least `min_len_m` further along.
/// Candidates with an oversized gap between consecutive reports, or an
/// implausible average speed, are dropped. Emitted starts are at least
/// `min_start_spacing_s` apart.
pub fn extract_shingles_with_draw(
    trace: &SnappedTrace,
    stop_offsets: &[f64],
    config: &ShinglerConfig,
    min_len_m: f64,
    counters: &mut Counters,
) -> Vec<Shingle> {
    let pts = &trace.points;
    let admissible: Vec<bool> = pts
        .iter()
        .map(|&(_, a)| stop_offsets.iter().all(|s| (a - s).abs() > config.stop_exclusion_m))
        .collect();
    let mut out = Vec::new();
    let mut last_start: Option<i64> = None;
    for i in 0..pts.len() {
        if !admissible[i] {
            counters.bump("starts_near_stop");
            continue;
        }
        let (t0, a0) = pts[i];
        if last_start.is_some_and(|s| t0 - s < config.min_start_spacing_s) {
            counters.bump("starts_too_close");
            continue;
        }
        let Some(j) = (i + 1..pts.len()).find(|&j| admissible[j] && pts[j].1 - a0 >= min_len_m) else {
            counters.bump("no_end_reached");
            continue;
        };
        let gap = pts[i..=j]
            .windows(2)
            .any(|w| w[1].0 - w[0].0 > config.max_gap_s || (w[1].1 - w[0].1).abs() > config.max_gap_m);
        if gap {
            counters.bump("rejected_gap");
            continue;
        }
        let (t1, a1) = pts[j];
        let kmh = (a1 - a0) / (t1 - t0) as f64 * 3.6;
        if !(config.min_speed_kmh..=config.max_speed_kmh).contains(&kmh) {
            counters.bump("rejected_speed");
            continue;
        }
        counters.bump("shingles");
        last_start = Some(t0);
        out.push(Shingle {
            route: trace.route.clone(),
            shape_id: trace.shape_id.clone(),
            trace_id: trace.trace_id.clone(),
            start_m: a0,
            end_m: a1,
            start_ts: t0,
            end_ts: t1,
            duration_s: t1 - t0,
        });
    }
    out
}

/// Draws this trace's minimum length, uniform in the configured range, then
/// extracts its shingles.
pub fn extract_shingles(
    trace: &SnappedTrace,
    stop_offsets: &[f64],
    config: &ShinglerConfig,
    rng: &mut impl Rng,
    counters: &mut Counters,
) -> Vec<Shingle> {
    let draw = rng.random_range(config.min_length_lo_m..=config.min_length_hi_m);
    extract_shingles_with_draw(trace, stop_offsets, config, draw, counters)
}

/// Shingles for many traces, each with its own seeded generator.
pub fn shingle_traces(
    traces: &[SnappedTrace],
    feed: &Feed,
    config: &ShinglerConfig,
    seed: u64,
    exec: Execution,
) -> Result<(Vec<Shingle>, Counters)> {
    let per_trace = exec.map(traces, |t| -> Result<(Vec<Shingle>, Counters)> {
        let pattern = feed
            .find_pattern(&t.route, &t.shape_id)
            .ok_or_else(|| Error::NotFound(format!("pattern for trace {}", t.trace_id)))?;
        let mut counters = Counters::default();
        let mut rng = trace_rng(seed, &t.trace_id);
        let s = extract_shingles(
            t,
            &feed.patterns[pattern].shape.stop_offsets,
            config,
            &mut rng,
            &mut counters,
        );
        Ok((s, counters))
    });
    let mut all = Vec::new();
    let mut counters = Counters::default();
    for r in per_trace {
        let (s, c) = r?;
        all.extend(s);
        counters.merge(&c);
    }
    all.sort_by(Shingle::canonical_cmp);
    Ok((all, counters))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantumKind {
    Stop { stop_id: String },
    Segment { segment: SegmentKey, traversed_m: f64 },
}

/// One stop or traversed road-segment piece of an interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantum {
    #[serde(flatten)]
    pub kind: QuantumKind,
    /// Along-shape offset where the quantum begins.
    pub along_m: f64,
    /// Cells at levels 15, 12.5 and 4.5.
    pub cells: [CellId; 3],
}

impl Quantum {
    pub fn is_stop(&self) -> bool {
        matches!(self.kind, QuantumKind::Stop { .. })
    }

    pub fn traversed_m(&self) -> f64 {
        match self.kind {
            QuantumKind::Segment { traversed_m, .. } => traversed_m,
            QuantumKind::Stop { .. } => 0.0,
        }
    }
}

/// Quanta covering `[start_m, end_m]` of a pattern. `stops` must be sorted
/// by offset; segments are cut at every included stop so that a stop always
/// sits between two pieces.
fn assemble_quanta(pattern: &RoutePattern, stops: &[(f64, &Stop)], start_m: f64, end_m: f64) -> Result<Vec<Quantum>> {
    let shape = &pattern.shape;
    let total = shape.total_m();
    if !(start_m >= -1e-9 && end_m <= total + 1e-9 && start_m < end_m) {
        return Err(Error::InvalidArgument(format!(
            "interval [{start_m}, {end_m}] outside shape {} extent [0, {total}]",
            shape.shape_id
        )));
    }
    let (start_m, end_m) = (start_m.max(0.0), end_m.min(total));

    let mut out = Vec::new();
    let stop_quantum = |(offset, stop): (f64, &Stop)| -> Result<Quantum> {
        Ok(Quantum {
            kind: QuantumKind::Stop {
                stop_id: stop.stop_id.clone(),
            },
            along_m: offset,
            cells: model_cells(stop.location)?,
        })
    };
    let piece = |idx: usize, lo: f64, hi: f64| -> Result<Quantum> {
        Ok(Quantum {
            kind: QuantumKind::Segment {
                segment: shape.segment_key(idx),
                traversed_m: hi - lo,
            },
            along_m: lo,
            cells: model_cells(shape.point_at(0.5 * (lo + hi)))?,
        })
    };

    let mut si = 0;
    for (idx, (a, b)) in shape.segment_bounds().into_iter().enumerate() {
        if b <= start_m || a >= end_m {
            continue;
        }
        let (lo, hi) = (a.max(start_m), b.min(end_m));
        while si < stops.len() && stops[si].0 <= lo {
            out.push(stop_quantum(stops[si])?);
            si += 1;
        }
        let mut p = lo;
        while si < stops.len() && stops[si].0 < hi {
            let off = stops[si].0;
            if off > p {
                out.push(piece(idx, p, off)?);
                p = off;
            }
            out.push(stop_quantum(stops[si])?);
            si += 1;
        }
        if hi > p {
            out.push(piece(idx, p, hi)?);
        }
    }
    for s in &stops[si..] {
        out.push(stop_quantum(*s)?);
    }
    Ok(out)
}

/// Quanta of a shingle: stops strictly inside the interval and the traversed
/// pieces of every overlapping road segment, in along-shape order.
pub fn quantize(shingle: &Shingle, pattern: &RoutePattern, stops: &[&Stop]) -> Result<Vec<Quantum>> {
    quantize_interval(pattern, stops, shingle.start_m, shingle.end_m)
}

pub fn quantize_interval(pattern: &RoutePattern, stops: &[&Stop], start_m: f64, end_m: f64) -> Result<Vec<Quantum>> {
    let offsets = &pattern.shape.stop_offsets;
    let mut interior: Vec<(f64, &Stop)> = offsets
        .iter()
        .zip(stops)
        .filter(|(o, _)| **o > start_m && **o < end_m)
        .map(|(o, s)| (*o, *s))
        .collect();
    interior.sort_by(|a, b| a.0.total_cmp(&b.0));
    assemble_quanta(pattern, &interior, start_m, end_m)
}

/// Quanta from stop `from` to stop `to` (route-order indices), including
/// both endpoint stops.
pub fn quantize_stop_pair(pattern: &RoutePattern, stops: &[&Stop], from: usize, to: usize) -> Result<Vec<Quantum>> {
    if from >= to || to >= stops.len() {
        return Err(Error::InvalidArgument(format!(
            "stop pair ({from}, {to}) is not an ordered pair on the route"
        )));
    }
    let offsets = &pattern.shape.stop_offsets;
    let included: Vec<(f64, &Stop)> = (from..=to).map(|i| (offsets[i], stops[i])).collect();
    let (start, end) = (offsets[from], offsets[to]);
    if end <= start {
        // Co-located stops: nothing to traverse.
        return included
            .into_iter()
            .map(|(o, s)| {
                Ok(Quantum {
                    kind: QuantumKind::Stop {
                        stop_id: s.stop_id.clone(),
                    },
                    along_m: o,
                    cells: model_cells(s.location)?,
                })
            })
            .collect();
    }
    assemble_quanta(pattern, &included, start, end)
}

/// A shingle with its quanta, ready for featurization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedShingle {
    pub shingle: Shingle,
    pub quanta: Vec<Quantum>,
}

pub fn quantize_all(shingles: Vec<Shingle>, feed: &Feed, exec: Execution) -> Result<Vec<QuantizedShingle>> {
    exec.map_owned(shingles, |s| {
        let idx = feed
            .find_pattern(&s.route, &s.shape_id)
            .ok_or_else(|| Error::NotFound(format!("route {} shape {}", s.route, s.shape_id)))?;
        let stops = feed.pattern_stops(idx)?;
        let quanta = quantize(&s, &feed.patterns[idx], &stops)?;
        Ok(QuantizedShingle { shingle: s, quanta })
    })
    .into_iter()
    .collect()
}

/// ISO-8601 week, written `2024-W03`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IsoWeek {
    pub year: i32,
    pub week: u32,
}

impl IsoWeek {
    pub fn of_timestamp(ts: i64) -> Result<Self> {
        let dt = DateTime::from_timestamp(ts, 0)
            .ok_or_else(|| Error::InputDomain(format!("timestamp {ts} out of range")))?;
        let w = dt.iso_week();
        Ok(IsoWeek {
            year: w.year(),
            week: w.week(),
        })
    }
}

impl std::fmt::Display for IsoWeek {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-W{:02}", self.year, self.week)
    }
}

impl std::str::FromStr for IsoWeek {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed ISO week {s:?}"));
        let (y, w) = s.split_once("-W").ok_or_else(bad)?;
        let week: u32 = w.parse().map_err(|_| bad())?;
        if !(1..=53).contains(&week) {
            return Err(bad());
        }
        Ok(IsoWeek {
            year: y.parse().map_err(|_| bad())?,
            week,
        })
    }
}

impl Serialize for IsoWeek {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IsoWeek {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeekAssignment {
    pub train: Vec<IsoWeek>,
    pub validation: Vec<IsoWeek>,
    pub test: Vec<IsoWeek>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

pub trait Timestamped {
    fn start_ts(&self) -> i64;
    fn canonical_cmp(&self, other: &Self) -> Ordering;
}

impl Timestamped for Shingle {
    fn start_ts(&self) -> i64 {
        self.start_ts
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        Shingle::canonical_cmp(self, other)
    }
}

impl Timestamped for QuantizedShingle {
    fn start_ts(&self) -> i64 {
        self.shingle.start_ts
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.shingle.canonical_cmp(&other.shingle)
    }
}

/// Partitions examples by the ISO week (UTC) of their start time. Examples in
/// unassigned weeks are discarded. Each split comes back in canonical order.
pub fn split_by_week<T: Timestamped>(items: Vec<T>, weeks: &WeekAssignment) -> Result<Splits<T>> {
    let mut seen = BTreeSet::new();
    for w in weeks.train.iter().chain(&weeks.validation).chain(&weeks.test) {
        if !seen.insert(*w) {
            return Err(Error::InvalidArgument(format!(
                "week {w} assigned to more than one split"
            )));
        }
    }
    let mut splits = Splits {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for item in items {
        let w = IsoWeek::of_timestamp(item.start_ts())?;
        if weeks.train.contains(&w) {
            splits.train.push(item);
        } else if weeks.validation.contains(&w) {
            splits.validation.push(item);
        } else if weeks.test.contains(&w) {
            splits.test.push(item);
        }
    }
    for (name, set, ws) in [
        ("train", &mut splits.train, &weeks.train),
        ("validation", &mut splits.validation, &weeks.validation),
        ("test", &mut splits.test, &weeks.test),
    ] {
        set.sort_by(T::canonical_cmp);
        for w in ws {
            if !set.iter().any(|x| IsoWeek::of_timestamp(x.start_ts()).ok() == Some(*w)) {
                log::warn!("week {w} assigned to {name} has no examples");
            }
        }
    }
    Ok(splits)
}
