//! GTFS static feeds, vehicle-position traces, and traffic-speed tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, LocalFrame};
use crate::spatial_grid::LatLng;

/// Named drop/keep counters. Every rejected input line or trip lands here.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters(pub BTreeMap<String, u64>);

impl Counters {
    pub fn bump(&mut self, name: &str) {
        self.add(name, 1);
    }

    pub fn add(&mut self, name: &str, n: u64) {
        *self.0.entry(name.to_string()).or_default() += n;
    }

    pub fn get(&self, name: &str) -> u64 {
        self.0.get(name).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &Counters) {
        for (k, v) in &other.0 {
            self.add(k, *v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub stop_id: String,
    pub location: LatLng,
}

/// Route identity: public route id plus the exact ordered stop sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RouteKey {
    pub feed_id: String,
    pub public_route_id: String,
    pub ordered_stop_ids: Vec<String>,
}

impl RouteKey {
    pub fn new(feed_id: &str, public_route_id: &str, ordered_stop_ids: Vec<String>) -> Result<Self> {
        if ordered_stop_ids.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "route {public_route_id} has fewer than two stops"
            )));
        }
        Ok(RouteKey {
            feed_id: feed_id.to_string(),
            public_route_id: public_route_id.to_string(),
            ordered_stop_ids,
        })
    }

    /// Single-line vocabulary token.
    pub fn token(&self) -> String {
        format!(
            "{}|{}|{}",
            self.feed_id,
            self.public_route_id,
            self.ordered_stop_ids.join(">")
        )
    }
}

impl fmt::Display for RouteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

/// Road segment identity used to key traffic speeds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentKey {
    pub shape_id: String,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub turn_threshold_deg: f64,
    pub max_len_m: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            turn_threshold_deg: 30.0,
            max_len_m: 100.0,
        }
    }
}

/// A shape polyline with its along-shape geometry, road segments and the
/// offsets of one route's stops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripShape {
    pub shape_id: String,
    pub polyline: Vec<LatLng>,
    pub cumulative_m: Vec<f64>,
    pub segment_breaks: Vec<f64>,
    pub stop_offsets: Vec<f64>,
    frame: LocalFrame,
    xy: Vec<[f64; 2]>,
}

impl TripShape {
    pub fn new(shape_id: impl Into<String>, polyline: Vec<LatLng>) -> Result<Self> {
        let shape_id = shape_id.into();
        if polyline.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "shape {shape_id} needs at least two vertices"
            )));
        }
        for p in &polyline {
            p.validate()?;
        }
        let frame = LocalFrame::new(polyline[0]);
        let xy: Vec<[f64; 2]> = polyline.iter().map(|p| frame.project(*p)).collect();
        let mut cumulative_m = Vec::with_capacity(xy.len());
        let mut acc = 0.0;
        cumulative_m.push(0.0);
        for w in xy.windows(2) {
            acc += geo::dist(w[0], w[1]);
            cumulative_m.push(acc);
        }
        Ok(TripShape {
            shape_id,
            polyline,
            cumulative_m,
            segment_breaks: Vec::new(),
            stop_offsets: Vec::new(),
            frame,
            xy,
        })
    }

    pub fn total_m(&self) -> f64 {
        *self.cumulative_m.last().unwrap()
    }

    pub fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    pub fn xy(&self) -> &[[f64; 2]] {
        &self.xy
    }

    /// `[start, end)` of every road segment in along-shape order.
    pub fn segment_bounds(&self) -> Vec<(f64, f64)> {
        let mut edges = Vec::with_capacity(self.segment_breaks.len() + 2);
        edges.push(0.0);
        edges.extend_from_slice(&self.segment_breaks);
        edges.push(self.total_m());
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn segment_key(&self, index: usize) -> SegmentKey {
        SegmentKey {
            shape_id: self.shape_id.clone(),
            index: index as u32,
        }
    }

    /// Planar point at an along-shape offset (clamped to the shape).
    pub fn xy_at(&self, along_m: f64) -> [f64; 2] {
        let along = along_m.clamp(0.0, self.total_m());
        let k = match self.cumulative_m.partition_point(|&c| c <= along).checked_sub(1) {
            Some(k) => k.min(self.xy.len() - 2),
            None => 0,
        };
        let span = self.cumulative_m[k + 1] - self.cumulative_m[k];
        let t = if span > 0.0 {
            (along - self.cumulative_m[k]) / span
        } else {
            0.0
        };
        let (a, b) = (self.xy[k], self.xy[k + 1]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    pub fn point_at(&self, along_m: f64) -> LatLng {
        self.frame.unproject(self.xy_at(along_m))
    }

    /// Closest along-shape offset to `p` among offsets `>= min_along`,
    /// with its distance. Ties (within [`SNAP_TIE_M`]) go to the smaller offset.
    pub fn project(&self, p: LatLng, min_along: f64) -> (f64, f64) {
        let q = self.frame.project(p);
        let mut best = (f64::INFINITY, f64::INFINITY);
        for k in 0..self.xy.len() - 1 {
            let (c0, c1) = (self.cumulative_m[k], self.cumulative_m[k + 1]);
            if c1 < min_along {
                continue;
            }
            let (a, b) = if c0 < min_along {
                (self.xy_at(min_along), self.xy[k + 1])
            } else {
                (self.xy[k], self.xy[k + 1])
            };
            let start = c0.max(min_along);
            let (t, d) = geo::project_onto_segment(q, a, b);
            let along = start + t * (c1 - start);
            if d < best.1 - SNAP_TIE_M || (d <= best.1 + SNAP_TIE_M && along < best.0) {
                best = (along, d);
            }
        }
        best
    }
}

/// Distances closer than this are treated as equal when snapping.
pub const SNAP_TIE_M: f64 = 1e-7;

/// Breaks at turns sharper than the threshold, then extra breaks so that no
/// segment exceeds `max_len_m`. Returns interior break offsets, sorted.
pub fn derive_segments(shape: &TripShape, config: &SegmentationConfig) -> Result<Vec<f64>> {
    let total = shape.total_m();
    if shape.polyline.len() < 2 {
        return Err(Error::InvalidArgument("shape needs at least two vertices".into()));
    }
    if total <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "shape {} has zero length",
            shape.shape_id
        )));
    }
    if config.max_len_m <= 0.0 {
        return Err(Error::InvalidArgument("max_len_m must be positive".into()));
    }

    // Distinct vertices only; repeated points have no heading.
    let mut pts: Vec<([f64; 2], f64)> = Vec::new();
    for (xy, c) in shape.xy.iter().zip(&shape.cumulative_m) {
        if pts.last().is_none_or(|&(_, last)| *c > last) {
            pts.push((*xy, *c));
        }
    }
    let mut anchors = vec![0.0];
    for w in pts.windows(3) {
        let h_in = (w[1].0[1] - w[0].0[1]).atan2(w[1].0[0] - w[0].0[0]);
        let h_out = (w[2].0[1] - w[1].0[1]).atan2(w[2].0[0] - w[1].0[0]);
        let mut change = (h_out - h_in).to_degrees();
        while change > 180.0 {
            change -= 360.0;
        }
        while change < -180.0 {
            change += 360.0;
        }
        if change.abs() > config.turn_threshold_deg {
            anchors.push(w[1].1);
        }
    }
    anchors.push(total);

    let mut breaks = Vec::new();
    for w in anchors.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut pos = a + config.max_len_m;
        while pos < b - 1e-6 {
            breaks.push(pos);
            pos += config.max_len_m;
        }
        if b < total {
            breaks.push(b);
        }
    }
    Ok(breaks)
}

/// Along-shape offset of a report, or `None` when it is farther than
/// `tolerance_m` from the shape.
pub fn snap_report(position: LatLng, shape: &TripShape, tolerance_m: f64) -> Option<f64> {
    let (along, d) = shape.project(position, 0.0);
    (d <= tolerance_m).then_some(along)
}

/// One stop pattern of a route, with the shape its trips follow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutePattern {
    pub key: Arc<RouteKey>,
    pub shape: TripShape,
    pub trip_ids: Vec<String>,
}

impl RoutePattern {
    pub fn stop_index(&self, stop_id: &str) -> Option<usize> {
        self.key.ordered_stop_ids.iter().position(|s| s == stop_id)
    }
}

#[derive(Debug, Clone)]
pub struct Feed {
    pub feed_id: String,
    pub timezone: Tz,
    pub stops: BTreeMap<String, Stop>,
    /// Sorted by route key, then shape id.
    pub patterns: Vec<RoutePattern>,
    pub trip_pattern: BTreeMap<String, usize>,
    pub counters: Counters,
}

impl Feed {
    pub fn find_pattern(&self, route: &RouteKey, shape_id: &str) -> Option<usize> {
        self.patterns
            .binary_search_by(|p| (p.key.as_ref(), p.shape.shape_id.as_str()).cmp(&(route, shape_id)))
            .ok()
    }

    pub fn stop(&self, stop_id: &str) -> Result<&Stop> {
        self.stops
            .get(stop_id)
            .ok_or_else(|| Error::NotFound(format!("stop {stop_id}")))
    }

    /// Stops of a pattern in route order.
    pub fn pattern_stops(&self, pattern: usize) -> Result<Vec<&Stop>> {
        self.patterns[pattern]
            .key
            .ordered_stop_ids
            .iter()
            .map(|id| self.stop(id))
            .collect()
    }
}

enum FeedSource<'a> {
    Dir(PathBuf),
    Zip(PathBuf),
    Memory(&'a BTreeMap<String, String>),
}

impl FeedSource<'_> {
    fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Ok(FeedSource::Dir(path.to_path_buf()))
        } else if path.is_file() {
            Ok(FeedSource::Zip(path.to_path_buf()))
        } else {
            Err(Error::NotFound(format!("feed {}", path.display())))
        }
    }

    fn read(&self, name: &str) -> Result<Option<String>> {
        match self {
            FeedSource::Memory(files) => Ok(files.get(name).cloned()),
            FeedSource::Dir(dir) => {
                let p = dir.join(name);
                if !p.exists() {
                    return Ok(None);
                }
                fs::read_to_string(&p).map(Some).map_err(|e| Error::io(p, e))
            }
            FeedSource::Zip(path) => {
                let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
                let mut archive =
                    zip::ZipArchive::new(file).map_err(|e| Error::parse(path.display().to_string(), None, e))?;
                let idx = (0..archive.len()).find(|&i| {
                    archive
                        .by_index(i)
                        .map(|f| f.name().rsplit('/').next() == Some(name))
                        .unwrap_or(false)
                });
                let Some(idx) = idx else { return Ok(None) };
                let mut entry = archive.by_index(idx).map_err(|e| Error::parse(name, None, e))?;
                let mut s = String::new();
                entry
                    .read_to_string(&mut s)
                    .map_err(|e| Error::io(path.join(name), e))?;
                Ok(Some(s))
            }
        }
    }

    fn require(&self, name: &str) -> Result<String> {
        self.read(name)?
            .ok_or_else(|| Error::parse(name, None, format!("missing required file {name}")))
    }
}

/// Minimal CSV table: header-indexed string rows with 1-based line numbers.
struct CsvTable {
    file: String,
    columns: HashMap<String, usize>,
    rows: Vec<(usize, csv::StringRecord)>,
}

impl CsvTable {
    fn parse(file: &str, text: &str) -> Result<Self> {
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::parse(file, Some(1), e))?.clone();
        let columns = headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize);
                Error::parse(file, line, e)
            })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            rows.push((line, rec));
        }
        Ok(CsvTable {
            file: file.to_string(),
            columns,
            rows,
        })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.columns
            .get(name)
            .copied()
            .ok_or_else(|| Error::parse(&self.file, Some(1), format!("missing column {name}")))
    }

    fn field<'a>(&self, rec: &'a csv::StringRecord, line: usize, col: usize) -> Result<&'a str> {
        match rec.get(col) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::parse(&self.file, Some(line), "missing value")),
        }
    }

    fn number<T: std::str::FromStr>(&self, rec: &csv::StringRecord, line: usize, col: usize) -> Result<T> {
        let s = self.field(rec, line, col)?;
        s.parse()
            .map_err(|_| Error::parse(&self.file, Some(line), format!("bad number {s:?}")))
    }
}

/// Reads `stops.txt`, `trips.txt`, `stop_times.txt` and `shapes.txt` (plus an
/// optional `agency.txt` for the timezone) from a directory or zip archive.
pub fn parse_gtfs_static(path: &Path, feed_id: &str, seg: &SegmentationConfig) -> Result<Feed> {
    parse_gtfs_source(FeedSource::open(path)?, feed_id, seg)
}

/// Same as [`parse_gtfs_static`] for files already in memory, keyed by name.
pub fn parse_gtfs_files(files: &BTreeMap<String, String>, feed_id: &str, seg: &SegmentationConfig) -> Result<Feed> {
    parse_gtfs_source(FeedSource::Memory(files), feed_id, seg)
}

fn parse_gtfs_source(src: FeedSource, feed_id: &str, seg: &SegmentationConfig) -> Result<Feed> {
    let stops_txt = src.require("stops.txt")?;
    let trips_txt = src.require("trips.txt")?;
    let stop_times_txt = src.require("stop_times.txt")?;
    let shapes_txt = src.require("shapes.txt")?;
    let mut counters = Counters::default();

    let timezone = match src.read("agency.txt")? {
        Some(text) => {
            let t = CsvTable::parse("agency.txt", &text)?;
            match (t.columns.get("agency_timezone"), t.rows.first()) {
                (Some(&c), Some((line, rec))) => {
                    let name = t.field(rec, *line, c)?;
                    name.parse::<Tz>()
                        .map_err(|_| Error::parse("agency.txt", Some(*line), format!("unknown timezone {name}")))?
                }
                _ => Tz::UTC,
            }
        }
        None => Tz::UTC,
    };

    let t = CsvTable::parse("stops.txt", &stops_txt)?;
    let (c_id, c_lat, c_lon) = (t.col("stop_id")?, t.col("stop_lat")?, t.col("stop_lon")?);
    let mut stops = BTreeMap::new();
    for (line, rec) in &t.rows {
        let stop_id = t.field(rec, *line, c_id)?.to_string();
        let location = LatLng::new(t.number(rec, *line, c_lat)?, t.number(rec, *line, c_lon)?)
            .map_err(|e| Error::parse("stops.txt", Some(*line), e))?;
        if stops.contains_key(&stop_id) {
            return Err(Error::parse(
                "stops.txt",
                Some(*line),
                format!("duplicate stop_id {stop_id}"),
            ));
        }
        stops.insert(stop_id.clone(), Stop { stop_id, location });
    }

    let t = CsvTable::parse("shapes.txt", &shapes_txt)?;
    let (c_id, c_lat, c_lon, c_seq) = (
        t.col("shape_id")?,
        t.col("shape_pt_lat")?,
        t.col("shape_pt_lon")?,
        t.col("shape_pt_sequence")?,
    );
    let mut shape_pts: BTreeMap<String, Vec<(u32, LatLng)>> = BTreeMap::new();
    for (line, rec) in &t.rows {
        let id = t.field(rec, *line, c_id)?.to_string();
        let p = LatLng::new(t.number(rec, *line, c_lat)?, t.number(rec, *line, c_lon)?)
            .map_err(|e| Error::parse("shapes.txt", Some(*line), e))?;
        shape_pts.entry(id).or_default().push((t.number(rec, *line, c_seq)?, p));
    }
    let mut shapes: BTreeMap<String, TripShape> = BTreeMap::new();
    for (id, mut pts) in shape_pts {
        pts.sort_by_key(|(seq, _)| *seq);
        let mut shape = TripShape::new(id.clone(), pts.into_iter().map(|(_, p)| p).collect())?;
        shape.segment_breaks = derive_segments(&shape, seg)?;
        shapes.insert(id, shape);
    }

    let t = CsvTable::parse("trips.txt", &trips_txt)?;
    let (c_route, c_trip, c_shape) = (t.col("route_id")?, t.col("trip_id")?, t.col("shape_id")?);
    let mut trips: BTreeMap<String, (String, String)> = BTreeMap::new();
    for (line, rec) in &t.rows {
        trips.insert(
            t.field(rec, *line, c_trip)?.to_string(),
            (
                t.field(rec, *line, c_route)?.to_string(),
                t.field(rec, *line, c_shape)?.to_string(),
            ),
        );
    }

    let t = CsvTable::parse("stop_times.txt", &stop_times_txt)?;
    let (c_trip, c_stop, c_seq) = (t.col("trip_id")?, t.col("stop_id")?, t.col("stop_sequence")?);
    let mut trip_stops: BTreeMap<String, Vec<(u32, String)>> = BTreeMap::new();
    for (line, rec) in &t.rows {
        let stop = t.field(rec, *line, c_stop)?.to_string();
        if !stops.contains_key(&stop) {
            return Err(Error::parse(
                "stop_times.txt",
                Some(*line),
                format!("unknown stop_id {stop}"),
            ));
        }
        trip_stops
            .entry(t.field(rec, *line, c_trip)?.to_string())
            .or_default()
            .push((t.number(rec, *line, c_seq)?, stop));
    }

    let mut grouped: BTreeMap<(RouteKey, String), Vec<String>> = BTreeMap::new();
    for (trip_id, (route_id, shape_id)) in &trips {
        let Some(mut seq) = trip_stops.remove(trip_id) else {
            counters.bump("trips_without_stop_times");
            continue;
        };
        if !shapes.contains_key(shape_id) {
            counters.bump("trips_with_unknown_shape");
            continue;
        }
        seq.sort_by_key(|(s, _)| *s);
        let ids: Vec<String> = seq.into_iter().map(|(_, s)| s).collect();
        if ids.len() < 2 {
            counters.bump("trips_with_too_few_stops");
            continue;
        }
        let key = RouteKey::new(feed_id, route_id, ids)?;
        grouped
            .entry((key, shape_id.clone()))
            .or_default()
            .push(trip_id.clone());
    }

    let mut patterns = Vec::with_capacity(grouped.len());
    let mut trip_pattern = BTreeMap::new();
    for ((key, shape_id), trip_ids) in grouped {
        let mut shape = shapes[&shape_id].clone();
        let mut offset = 0.0;
        for stop_id in &key.ordered_stop_ids {
            let (along, d) = shape.project(stops[stop_id].location, offset);
            if d > 100.0 {
                log::warn!("stop {stop_id} is {d:.0} m from shape {shape_id}");
                counters.bump("stops_far_from_shape");
            }
            shape.stop_offsets.push(along);
            offset = along;
        }
        for t in &trip_ids {
            trip_pattern.insert(t.clone(), patterns.len());
        }
        patterns.push(RoutePattern {
            key: Arc::new(key),
            shape,
            trip_ids,
        });
    }
    counters.add("patterns", patterns.len() as u64);
    counters.add("stops", stops.len() as u64);

    Ok(Feed {
        feed_id: feed_id.to_string(),
        timezone,
        stops,
        patterns,
        trip_pattern,
        counters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehiclePositionReport {
    pub vehicle_id: String,
    pub route: Arc<RouteKey>,
    pub trip_start: i64,
    pub timestamp: i64,
    pub position: LatLng,
    pub along_m: Option<f64>,
}

/// One observed run of a vehicle over one trip, time-sorted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub feed_id: String,
    pub trip_id: String,
    pub vehicle_id: String,
    pub pattern: usize,
    pub reports: Vec<VehiclePositionReport>,
}

impl Trace {
    pub fn trace_id(&self) -> String {
        format!(
            "{}:{}:{}:{}",
            self.feed_id,
            self.trip_id,
            self.vehicle_id,
            self.reports.first().map(|r| r.trip_start).unwrap_or(0)
        )
    }
}

/// One line of `vehicle_positions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionRecord {
    pub vehicle_id: String,
    pub feed_id: String,
    pub trip_id: String,
    pub ts: i64,
    pub lat: f64,
    pub lng: f64,
}

/// Reports of one (vehicle, trip) further apart than this start a new run.
pub const TRIP_SPLIT_GAP_S: i64 = 6 * 3600;

/// Groups position records into traces. Runs with repeated timestamps are
/// dropped whole.
pub fn group_positions(records: Vec<PositionRecord>, feed: &Feed, counters: &mut Counters) -> Vec<Trace> {
    let mut by_trip: BTreeMap<(String, String, String), Vec<PositionRecord>> = BTreeMap::new();
    for r in records {
        if r.feed_id != feed.feed_id || !feed.trip_pattern.contains_key(&r.trip_id) {
            counters.bump("reports_unknown_trip");
            continue;
        }
        if LatLng::new(r.lat, r.lng).is_err() {
            counters.bump("reports_bad_position");
            continue;
        }
        by_trip
            .entry((r.feed_id.clone(), r.trip_id.clone(), r.vehicle_id.clone()))
            .or_default()
            .push(r);
    }

    let mut traces = Vec::new();
    for ((feed_id, trip_id, vehicle_id), mut recs) in by_trip {
        recs.sort_by_key(|r| (r.ts, r.lat.to_bits(), r.lng.to_bits()));
        let pattern = feed.trip_pattern[&trip_id];
        let route = feed.patterns[pattern].key.clone();
        let mut runs: Vec<Vec<PositionRecord>> = Vec::new();
        for r in recs {
            match runs.last_mut() {
                Some(run) if r.ts - run.last().unwrap().ts <= TRIP_SPLIT_GAP_S => run.push(r),
                _ => runs.push(vec![r]),
            }
        }
        for run in runs {
            if run.windows(2).any(|w| w[1].ts <= w[0].ts) {
                log::info!("dropping run of trip {trip_id} vehicle {vehicle_id}: repeated timestamp");
                counters.bump("trips_non_monotone");
                counters.add("reports_in_dropped_trips", run.len() as u64);
                continue;
            }
            let trip_start = run[0].ts;
            counters.add("reports_kept", run.len() as u64);
            traces.push(Trace {
                feed_id: feed_id.clone(),
                trip_id: trip_id.clone(),
                vehicle_id: vehicle_id.clone(),
                pattern,
                reports: run
                    .into_iter()
                    .map(|r| VehiclePositionReport {
                        vehicle_id: r.vehicle_id,
                        route: route.clone(),
                        trip_start,
                        timestamp: r.ts,
                        position: LatLng { lat: r.lat, lng: r.lng },
                        along_m: None,
                    })
                    .collect(),
            });
        }
    }
    traces
}

/// Parses a JSON-lines vehicle-position file into time-sorted traces.
pub fn parse_vehicle_positions(path: &Path, feed: &Feed) -> Result<(Vec<Trace>, Counters)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut counters = Counters::default();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        counters.bump("lines");
        match serde_json::from_str::<PositionRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{name} line {}: {e}", i + 1);
                counters.bump("reports_malformed");
            }
        }
    }
    let traces = group_positions(records, feed, &mut counters);
    Ok((traces, counters))
}

/// A time-sorted trace reduced to along-shape offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnappedTrace {
    pub trace_id: String,
    pub route: Arc<RouteKey>,
    pub shape_id: String,
    /// `(timestamp, along_m)`, strictly increasing in time.
    pub points: Vec<(i64, f64)>,
}

pub fn snap_trace(trace: &mut Trace, feed: &Feed, tolerance_m: f64, counters: &mut Counters) -> SnappedTrace {
    let pattern = &feed.patterns[trace.pattern];
    let mut points = Vec::with_capacity(trace.reports.len());
    for r in &mut trace.reports {
        r.along_m = snap_report(r.position, &pattern.shape, tolerance_m);
        match r.along_m {
            Some(a) => points.push((r.timestamp, a)),
            None => counters.bump("reports_off_shape"),
        }
    }
    SnappedTrace {
        trace_id: trace.trace_id(),
        route: pattern.key.clone(),
        shape_id: pattern.shape.shape_id.clone(),
        points,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficFlag {
    Exact,
    Nearest,
    SegmentMean,
    GlobalMean,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SegmentSeries {
    buckets: BTreeMap<i64, f64>,
    mean: f64,
}

/// Per-segment speeds in time buckets of `granularity_min` epoch minutes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrafficTable {
    granularity_min: i64,
    series: HashMap<SegmentKey, SegmentSeries>,
    global_mean: Option<f64>,
}

pub const MAX_SPEED_MPS: f64 = 70.0;
pub const NEAREST_WINDOW_MIN: i64 = 120;

impl TrafficTable {
    /// Builds a table from `(segment, bucket_epoch_min, speed)` entries.
    /// Bucket starts are floored to the granularity; duplicates are averaged.
    pub fn from_entries(
        granularity_min: i64,
        entries: impl IntoIterator<Item = (SegmentKey, i64, f64)>,
    ) -> Result<Self> {
        if granularity_min <= 0 {
            return Err(Error::InvalidArgument("traffic granularity must be positive".into()));
        }
        let mut raw: HashMap<SegmentKey, BTreeMap<i64, Vec<f64>>> = HashMap::new();
        for (key, bucket, speed) in entries {
            if !(speed > 0.0 && speed <= MAX_SPEED_MPS) {
                return Err(Error::InputDomain(format!(
                    "speed {speed} outside (0, {MAX_SPEED_MPS}]"
                )));
            }
            let b = bucket.div_euclid(granularity_min) * granularity_min;
            raw.entry(key).or_default().entry(b).or_default().push(speed);
        }
        let mut series = HashMap::with_capacity(raw.len());
        let mut keys: Vec<&SegmentKey> = raw.keys().collect();
        keys.sort();
        let (mut total, mut count) = (0.0, 0usize);
        for key in keys {
            let mut buckets = BTreeMap::new();
            for (b, vals) in &raw[key] {
                let mut vals = vals.clone();
                vals.sort_by(f64::total_cmp);
                buckets.insert(*b, vals.iter().sum::<f64>() / vals.len() as f64);
            }
            let sum: f64 = buckets.values().sum();
            total += sum;
            count += buckets.len();
            let mean = sum / buckets.len() as f64;
            series.insert(key.clone(), SegmentSeries { buckets, mean });
        }
        Ok(TrafficTable {
            granularity_min,
            series,
            global_mean: (count > 0).then(|| total / count as f64),
        })
    }

    pub fn granularity_min(&self) -> i64 {
        self.granularity_min
    }

    pub fn global_mean(&self) -> Option<f64> {
        self.global_mean
    }

    pub fn len(&self) -> usize {
        self.series.values().map(|s| s.buckets.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Speed for a segment at a wall time, with the fallback tier that served
    /// it: exact bucket, nearest bucket within two hours (earlier wins ties),
    /// segment mean, global mean.
    pub fn lookup(&self, key: &SegmentKey, ts_s: f64) -> Result<(f64, TrafficFlag)> {
        let minute = (ts_s / 60.0).floor() as i64;
        let bucket = minute.div_euclid(self.granularity_min) * self.granularity_min;
        if let Some(s) = self.series.get(key) {
            if let Some(v) = s.buckets.get(&bucket) {
                return Ok((*v, TrafficFlag::Exact));
            }
            let before = s.buckets.range(bucket - NEAREST_WINDOW_MIN..bucket).next_back();
            let after = s.buckets.range(bucket + 1..=bucket + NEAREST_WINDOW_MIN).next();
            let nearest = match (before, after) {
                (Some(b), Some(a)) => Some(if bucket - b.0 <= a.0 - bucket { b } else { a }),
                (b, a) => b.or(a),
            };
            if let Some((_, v)) = nearest {
                return Ok((*v, TrafficFlag::Nearest));
            }
            return Ok((s.mean, TrafficFlag::SegmentMean));
        }
        self.global_mean
            .map(|v| (v, TrafficFlag::GlobalMean))
            .ok_or_else(|| Error::Empty("traffic table has no speeds".into()))
    }

    /// All entries in canonical order.
    pub fn entries(&self) -> Vec<(SegmentKey, i64, f64)> {
        let mut keys: Vec<&SegmentKey> = self.series.keys().collect();
        keys.sort();
        keys.into_iter()
            .flat_map(|k| self.series[k].buckets.iter().map(move |(b, v)| (k.clone(), *b, *v)))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), None, e))?;
        let io = |e: csv::Error| Error::parse(path.display().to_string(), None, e);
        w.write_record(["shape_id", "segment_index", "bucket_epoch_min", "speed_mps"])
            .map_err(io)?;
        for (k, b, v) in self.entries() {
            w.write_record([k.shape_id, k.index.to_string(), b.to_string(), format!("{v}")])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parses `traffic.csv` (`shape_id,segment_index,bucket_epoch_min,speed_mps`).
/// Rows with a speed outside `(0, 70]` m/s are rejected and counted.
pub fn parse_traffic(path: &Path, granularity_min: i64) -> Result<(TrafficTable, Counters)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| path.display().to_string());
    let t = CsvTable::parse(&name, &text)?;
    let (c_shape, c_idx, c_bucket, c_speed) = (
        t.col("shape_id")?,
        t.col("segment_index")?,
        t.col("bucket_epoch_min")?,
        t.col("speed_mps")?,
    );
    let mut counters = Counters::default();
    let mut entries = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        counters.bump("rows");
        let speed: f64 = t.number(rec, *line, c_speed)?;
        if !(speed > 0.0 && speed <= MAX_SPEED_MPS) {
            counters.bump("rows_rejected_speed");
            continue;
        }
        entries.push((
            SegmentKey {
                shape_id: t.field(rec, *line, c_shape)?.to_string(),
                index: t.number(rec, *line, c_idx)?,
            },
            t.number(rec, *line, c_bucket)?,
            speed,
        ));
    }
    counters.add("rows_kept", entries.len() as u64);
    Ok((TrafficTable::from_entries(granularity_min, entries)?, counters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    /// Polyline from planar meter offsets around a fixed origin.
    fn shape_from_xy(pts: &[[f64; 2]]) -> TripShape {
        let frame = LocalFrame::new(LatLng::new(40.0, -75.0).unwrap());
        TripShape::new("s", pts.iter().map(|p| frame.unproject(*p)).collect()).unwrap()
    }

    #[test]
    fn straight_line_splits_by_length() {
        let shape = shape_from_xy(&[[0.0, 0.0], [250.0, 0.0]]);
        let breaks = derive_segments(&shape, &SegmentationConfig::default()).unwrap();
        assert_eq!(breaks.len(), 2);
        assert!((breaks[0] - 100.0).abs() < 1e-6 && (breaks[1] - 200.0).abs() < 1e-6);
    }

    #[test]
    fn right_angle_breaks_at_corner() {
        let shape = shape_from_xy(&[[0.0, 0.0], [50.0, 0.0], [50.0, 50.0]]);
        let breaks = derive_segments(&shape, &SegmentationConfig::default()).unwrap();
        assert_eq!(breaks.len(), 1);
        assert!((breaks[0] - 50.0).abs() < 1e-6);
    }

    #[test]
    fn zero_length_shape_is_rejected() {
        let shape = shape_from_xy(&[[0.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(
            derive_segments(&shape, &SegmentationConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn random_polylines_respect_segment_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = SegmentationConfig::default();
        for _ in 0..100 {
            let n = rng.random_range(2..12);
            let mut pts = vec![[0.0, 0.0]];
            for _ in 1..n {
                let last = *pts.last().unwrap();
                let len = rng.random_range(1.0..400.0);
                let h: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                pts.push([last[0] + len * h.cos(), last[1] + len * h.sin()]);
            }
            let shape = shape_from_xy(&pts);
            let breaks = derive_segments(&shape, &cfg).unwrap();
            let bounds = shape.segment_bounds_with(&breaks);
            for (a, b) in &bounds {
                assert!(b - a <= cfg.max_len_m + 1e-6);
                assert!(b > a);
            }
            // Brute-force turn scan over the raw vertices.
            for k in 1..pts.len() - 1 {
                let h_in = (pts[k][1] - pts[k - 1][1]).atan2(pts[k][0] - pts[k - 1][0]);
                let h_out = (pts[k + 1][1] - pts[k][1]).atan2(pts[k + 1][0] - pts[k][0]);
                let d = (h_out - h_in).to_degrees().rem_euclid(360.0);
                let turn = d.min(360.0 - d);
                if turn > cfg.turn_threshold_deg + 1e-6 {
                    let at = shape.cumulative_m[k];
                    assert!(
                        breaks.iter().any(|b| (b - at).abs() < 1e-6),
                        "missing break at turn of {turn} deg"
                    );
                }
            }
        }
    }

    impl TripShape {
        fn segment_bounds_with(&self, breaks: &[f64]) -> Vec<(f64, f64)> {
            let mut s = self.clone();
            s.segment_breaks = breaks.to_vec();
            s.segment_bounds()
        }
    }

    #[test]
    fn snap_on_vertex_and_tie_rule() {
        let shape = shape_from_xy(&[[0.0, 0.0], [100.0, 0.0], [200.0, 0.0], [300.0, 0.0]]);
        let v2 = shape.polyline[2];
        let along = snap_report(v2, &shape, 100.0).unwrap();
        assert!((along - shape.cumulative_m[2]).abs() < 1e-6);

        // Out and back along parallel lines 20 m apart; a point midway between
        // them is equidistant and must snap to the first pass.
        let shape = shape_from_xy(&[[0.0, 0.0], [300.0, 0.0], [300.0, 20.0], [0.0, 20.0]]);
        let p = shape.frame().unproject([150.0, 10.0]);
        let along = snap_report(p, &shape, 100.0).unwrap();
        assert!((along - 150.0).abs() < 1e-6, "{along}");

        let far = shape.frame().unproject([150.0, 500.0]);
        assert_eq!(snap_report(far, &shape, 100.0), None);
    }

    /// Dense sampling at 1 cm followed by golden-section refinement.
    fn dense_projection(shape: &TripShape, q: [f64; 2]) -> f64 {
        let total = shape.total_m();
        let n = (total / 0.01).ceil() as usize;
        let d = |a: f64| geo::dist(q, shape.xy_at(a));
        let mut best = (0.0, f64::INFINITY);
        for k in 0..=n {
            let a = (k as f64 * 0.01).min(total);
            let dist = d(a);
            if dist < best.1 {
                best = (a, dist);
            }
        }
        let (mut lo, mut hi) = ((best.0 - 0.01).max(0.0), (best.0 + 0.01).min(total));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..100 {
            let m1 = hi - g * (hi - lo);
            let m2 = lo + g * (hi - lo);
            if d(m1) <= d(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn snap_matches_dense_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Eastward-progressing polyline so that projections are unambiguous.
        let mut pts = vec![[0.0, 0.0]];
        for _ in 0..8 {
            let last: [f64; 2] = *pts.last().unwrap();
            let h: f64 = rng.random_range(-0.7..0.7);
            let len = rng.random_range(40.0..150.0);
            pts.push([last[0] + len * h.cos(), last[1] + len * h.sin()]);
        }
        let shape = shape_from_xy(&pts);
        for _ in 0..200 {
            let a = rng.random_range(0.0..shape.total_m());
            let base = shape.xy_at(a);
            let q = [
                base[0] + rng.random_range(-15.0..15.0),
                base[1] + rng.random_range(-15.0..15.0),
            ];
            let (along, _) = shape.project(shape.frame().unproject(q), 0.0);
            let q = shape.frame().project(shape.frame().unproject(q));
            let oracle = dense_projection(&shape, q);
            assert!((along - oracle).abs() < 1e-6, "snap {along} vs oracle {oracle}");
        }
    }

    fn write_feed(dir: &Path, stop_times: &str, trips: &str, skip: Option<&str>) {
        let files = [
            (
                "stops.txt",
                "stop_id,stop_name,stop_lat,stop_lon\nA,a,40.0,-75.0\nB,b,40.0,-74.99\nC,c,40.0,-74.98\n",
            ),
            (
                "shapes.txt",
                "shape_id,shape_pt_lat,shape_pt_lon,shape_pt_sequence\nsh1,40.0,-75.0,1\nsh1,40.0,-74.98,2\nsh2,40.0,-74.98,1\nsh2,40.0,-75.0,2\n",
            ),
            ("trips.txt", trips),
            ("stop_times.txt", stop_times),
        ];
        for (name, body) in files {
            if Some(name) == skip {
                continue;
            }
            fs::write(dir.join(name), body).unwrap();
        }
    }

    const ONE_ROUTE_TRIPS: &str = "route_id,service_id,trip_id,shape_id\n5,wk,t1,sh1\n5,wk,t2,sh1\n";
    const ONE_ROUTE_TIMES: &str = "trip_id,arrival_time,departure_time,stop_id,stop_sequence\n\
        t1,08:00:00,08:00:00,A,1\nt1,08:05:00,08:05:00,B,2\nt1,08:10:00,08:10:00,C,3\n\
        t2,09:00:00,09:00:00,A,1\nt2,09:05:00,09:05:00,B,2\nt2,09:10:00,09:10:00,C,3\n";

    #[test]
    fn minimal_feed_has_one_route() {
        let dir = tempfile::tempdir().unwrap();
        write_feed(dir.path(), ONE_ROUTE_TIMES, ONE_ROUTE_TRIPS, None);
        let feed = parse_gtfs_static(dir.path(), "f", &SegmentationConfig::default()).unwrap();
        assert_eq!(feed.patterns.len(), 1);
        let p = &feed.patterns[0];
        assert_eq!(p.key.ordered_stop_ids, vec!["A", "B", "C"]);
        assert_eq!(p.trip_ids, vec!["t1", "t2"]);
        assert_eq!(p.shape.stop_offsets.len(), 3);
        assert!(p.shape.stop_offsets.windows(2).all(|w| w[0] <= w[1]));
        assert!(p.shape.stop_offsets[0].abs() < 1e-6);
    }

    #[test]
    fn opposite_directions_are_distinct_routes() {
        let dir = tempfile::tempdir().unwrap();
        let trips = "route_id,service_id,trip_id,shape_id\n5,wk,n1,sh1\n5,wk,s1,sh2\n";
        let times = "trip_id,arrival_time,departure_time,stop_id,stop_sequence\n\
            n1,,,A,1\nn1,,,B,2\nn1,,,C,3\ns1,,,C,1\ns1,,,B,2\ns1,,,A,3\n";
        write_feed(dir.path(), times, trips, None);
        let feed = parse_gtfs_static(dir.path(), "f", &SegmentationConfig::default()).unwrap();
        assert_eq!(feed.patterns.len(), 2);
        assert_eq!(feed.patterns[0].key.public_route_id, "5");
        assert_eq!(feed.patterns[1].key.public_route_id, "5");
        assert_ne!(feed.patterns[0].key, feed.patterns[1].key);
    }

    #[test]
    fn missing_stops_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_feed(dir.path(), ONE_ROUTE_TIMES, ONE_ROUTE_TRIPS, Some("stops.txt"));
        let err = parse_gtfs_static(dir.path(), "f", &SegmentationConfig::default()).unwrap_err();
        assert!(err.to_string().contains("stops.txt"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_feed(dir.path(), ONE_ROUTE_TIMES, ONE_ROUTE_TRIPS, None);
        fs::write(
            dir.path().join("stops.txt"),
            "stop_id,stop_lat,stop_lon,extra\nA,40.0,-75.0,x\nB,north,-74.99,y\nC,40.0,-74.98,z\n",
        )
        .unwrap();
        let err = parse_gtfs_static(dir.path(), "f", &SegmentationConfig::default()).unwrap_err();
        match err {
            Error::Parse { file, line, .. } => {
                assert_eq!(file, "stops.txt");
                assert_eq!(line, Some(3));
            }
            e => panic!("unexpected {e}"),
        }
    }

    fn fixture_feed() -> (tempfile::TempDir, Feed) {
        let dir = tempfile::tempdir().unwrap();
        write_feed(dir.path(), ONE_ROUTE_TIMES, ONE_ROUTE_TRIPS, None);
        let feed = parse_gtfs_static(dir.path(), "f", &SegmentationConfig::default()).unwrap();
        (dir, feed)
    }

    fn write_jsonl(dir: &Path, lines: &[&str]) -> PathBuf {
        let p = dir.join("vp.jsonl");
        let mut f = fs::File::create(&p).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        p
    }

    #[test]
    fn jsonl_fixture_yields_one_trace() {
        let (dir, feed) = fixture_feed();
        let p = write_jsonl(
            dir.path(),
            &[
                r#"{"vehicle_id":"v","feed_id":"f","trip_id":"t1","ts":120,"lat":40.0,"lng":-74.99}"#,
                r#"{"vehicle_id":"v","feed_id":"f","trip_id":"t1","ts":60,"lat":40.0,"lng":-74.995}"#,
                r#"{"vehicle_id":"v","feed_id":"f","trip_id":"t1","ts":180,"lat":40.0,"lng":-74.985}"#,
            ],
        );
        let (traces, counters) = parse_vehicle_positions(&p, &feed).unwrap();
        assert_eq!(traces.len(), 1);
        let ts: Vec<i64> = traces[0].reports.iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, vec![60, 120, 180]);
        assert_eq!(counters.get("reports_kept"), 3);
    }

    #[test]
    fn duplicate_timestamp_drops_trip() {
        let (dir, feed) = fixture_feed();
        let p = write_jsonl(
            dir.path(),
            &[
                r#"{"vehicle_id":"v","feed_id":"f","trip_id":"t1","ts":60,"lat":40.0,"lng":-74.995}"#,
                r#"{"vehicle_id":"v","feed_id":"f","trip_id":"t1","ts":60,"lat":40.0,"lng":-74.99}"#,
                r#"{"vehicle_id":"w","feed_id":"f","trip_id":"t2","ts":60,"lat":40.0,"lng":-74.99}"#,
                r#"{"vehicle_id":"w","feed_id":"f","trip_id":"nope","ts":60,"lat":40.0,"lng":-74.99}"#,
                r#"not json"#,
            ],
        );
        let (traces, c) = parse_vehicle_positions(&p, &feed).unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].trip_id, "t2");
        assert_eq!(c.get("trips_non_monotone"), 1);
        // Every input line is accounted for exactly once.
        assert_eq!(
            c.get("lines"),
            c.get("reports_kept")
                + c.get("reports_in_dropped_trips")
                + c.get("reports_unknown_trip")
                + c.get("reports_malformed")
                + c.get("reports_bad_position")
        );
    }

    #[test]
    fn parsing_is_order_independent() {
        let (dir, feed) = fixture_feed();
        let mut lines = vec![
            r#"{"vehicle_id":"v","feed_id":"f","trip_id":"t1","ts":60,"lat":40.0,"lng":-74.995}"#,
            r#"{"vehicle_id":"v","feed_id":"f","trip_id":"t1","ts":120,"lat":40.0,"lng":-74.99}"#,
            r#"{"vehicle_id":"w","feed_id":"f","trip_id":"t2","ts":60,"lat":40.0,"lng":-74.99}"#,
            r#"{"vehicle_id":"w","feed_id":"f","trip_id":"t2","ts":90,"lat":40.0,"lng":-74.989}"#,
        ];
        let a = parse_vehicle_positions(&write_jsonl(dir.path(), &lines), &feed).unwrap();
        lines.reverse();
        let b = parse_vehicle_positions(&write_jsonl(dir.path(), &lines), &feed).unwrap();
        assert_eq!(a.1, b.1);
        let ids = |t: &[Trace]| t.iter().map(|t| (t.trace_id(), t.reports.clone())).collect::<Vec<_>>();
        assert_eq!(ids(&a.0), ids(&b.0));
    }

    fn key(i: u32) -> SegmentKey {
        SegmentKey {
            shape_id: "s".into(),
            index: i,
        }
    }

    #[test]
    fn traffic_fallback_chain() {
        let t = TrafficTable::from_entries(
            5,
            vec![(key(0), 1000, 10.0), (key(0), 1090, 14.0), (key(1), 1000, 20.0)],
        )
        .unwrap();
        assert_eq!(t.lookup(&key(0), 1002.0 * 60.0).unwrap(), (10.0, TrafficFlag::Exact));
        // Bucket 1030 is missing; 1000 is 30 min away, 1090 is 60 min away.
        assert_eq!(t.lookup(&key(0), 1031.0 * 60.0).unwrap(), (10.0, TrafficFlag::Nearest));
        assert_eq!(t.lookup(&key(0), 1080.0 * 60.0).unwrap(), (14.0, TrafficFlag::Nearest));
        assert_eq!(
            t.lookup(&key(0), 5000.0 * 60.0).unwrap(),
            (12.0, TrafficFlag::SegmentMean)
        );
        let (v, flag) = t.lookup(&key(9), 0.0).unwrap();
        assert_eq!(flag, TrafficFlag::GlobalMean);
        assert!((v - 44.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn traffic_csv_rejects_nonpositive_speeds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traffic.csv");
        fs::write(
            &p,
            "shape_id,segment_index,bucket_epoch_min,speed_mps\ns,0,100,8.5\ns,0,105,0\ns,1,100,-2\ns,1,105,12\n",
        )
        .unwrap();
        let (t, c) = parse_traffic(&p, 5).unwrap();
        assert_eq!(c.get("rows"), 4);
        assert_eq!(c.get("rows_rejected_speed"), 2);
        assert_eq!(t.len(), 2);
        let out = dir.path().join("again.csv");
        t.write_csv(&out).unwrap();
        let (t2, _) = parse_traffic(&out, 5).unwrap();
        assert_eq!(t.entries(), t2.entries());
    }
}
