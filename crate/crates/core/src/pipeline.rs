//! End-to-end glue: traces to quantized shingles, worlds to datasets, and
//! stop-to-stop prediction with a trained model.

use chrono_tz::Tz;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::featurizer::{featurize_quanta, ExampleFeatures, FeatureContext, Vocabs};
use crate::ingest::{
    group_positions, parse_gtfs_files, snap_trace, Counters, Feed, SegmentationConfig, SnappedTrace, Trace,
    TrafficTable,
};
use crate::model::{forward, Params};
use crate::shingler::{quantize_all, quantize_stop_pair, shingle_traces, QuantizedShingle, ShinglerConfig};
use crate::synthworld::{World, FEED_ID};

pub fn snap_traces(
    traces: Vec<Trace>,
    feed: &Feed,
    tolerance_m: f64,
    exec: Execution,
) -> (Vec<SnappedTrace>, Counters) {
    let per = exec.map_owned(traces, |mut t| {
        let mut c = Counters::default();
        let s = snap_trace(&mut t, feed, tolerance_m, &mut c);
        (s, c)
    });
    let mut counters = Counters::default();
    let mut out = Vec::with_capacity(per.len());
    for (s, c) in per {
        counters.merge(&c);
        out.push(s);
    }
    (out, counters)
}

/// Snaps, shingles and quantizes traces. Output is in canonical order.
pub fn examples_from_traces(
    traces: Vec<Trace>,
    feed: &Feed,
    config: &ShinglerConfig,
    seed: u64,
    exec: Execution,
) -> Result<(Vec<QuantizedShingle>, Counters)> {
    let (snapped, mut counters) = snap_traces(traces, feed, config.snap_tolerance_m, exec);
    let (shingles, c) = shingle_traces(&snapped, feed, config, seed, exec)?;
    counters.merge(&c);
    Ok((quantize_all(shingles, feed, exec)?, counters))
}

/// A generated world read back through the ingest stage.
pub struct WorldInputs {
    pub feed: Feed,
    pub traces: Vec<Trace>,
    pub traffic: TrafficTable,
    pub counters: Counters,
}

pub fn world_inputs(world: &World) -> Result<WorldInputs> {
    let feed = parse_gtfs_files(&world.gtfs_files(), FEED_ID, &SegmentationConfig::default())?;
    let mut counters = Counters::default();
    let traces = group_positions(world.position_records(), &feed, &mut counters);
    Ok(WorldInputs {
        feed,
        traces,
        traffic: world.traffic_table()?,
        counters,
    })
}

/// Stop-to-stop travel-time queries against a trained model.
pub struct Predictor<'a> {
    pub feed: &'a Feed,
    pub vocabs: &'a Vocabs,
    pub params: &'a Params,
    pub traffic: &'a TrafficTable,
    pub timezone: Tz,
    /// Replaces every traffic speed when set (traffic-ablated models).
    pub constant_speed: Option<f64>,
}

impl Predictor<'_> {
    /// Features for riding `route` from `from_stop` to `to_stop`, departing
    /// at `departure` (Unix seconds). Uses the first pattern of the route
    /// that serves both stops in that order.
    pub fn features(&self, route: &str, from_stop: &str, to_stop: &str, departure: i64) -> Result<ExampleFeatures> {
        let mut route_seen = false;
        for (i, p) in self.feed.patterns.iter().enumerate() {
            if p.key.public_route_id != route {
                continue;
            }
            route_seen = true;
            let (Some(a), Some(b)) = (p.stop_index(from_stop), p.stop_index(to_stop)) else {
                continue;
            };
            if a >= b {
                continue;
            }
            let stops = self.feed.pattern_stops(i)?;
            let quanta = quantize_stop_pair(p, &stops, a, b)?;
            let ctx = FeatureContext {
                vocabs: self.vocabs,
                timezone: self.timezone,
                traffic: self.traffic,
            };
            let x = featurize_quanta(&p.key, departure, &quanta, None, &ctx)?;
            return Ok(match self.constant_speed {
                Some(s) => x.with_constant_speed(s),
                None => x,
            });
        }
        if !route_seen {
            return Err(Error::NotFound(format!("route {route}")));
        }
        for s in [from_stop, to_stop] {
            self.feed.stop(s)?;
        }
        Err(Error::NotFound(format!(
            "route {route} does not serve {from_stop} before {to_stop}"
        )))
    }

    pub fn predict(&self, route: &str, from_stop: &str, to_stop: &str, departure: i64) -> Result<f64> {
        let x = self.features(route, from_stop, to_stop, departure)?;
        Ok(forward(&x, self.params)?.0)
    }
}
