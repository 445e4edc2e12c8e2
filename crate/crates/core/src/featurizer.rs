//! Integer-encoded model inputs: vocabularies, context and per-quantum
//! features, traffic lookup, and spatial input ablation.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Datelike, Timelike};
use chrono_tz::Tz;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{RouteKey, TrafficFlag, TrafficTable};
use crate::shingler::{QuantizedShingle, Quantum, QuantumKind};

/// Reserved index of the zero embedding: out-of-vocabulary or ablated.
pub const ABSENT: u32 = 0;
pub const HOUR_SLICES: usize = 48;
pub const DAYS: usize = 7;
/// Cell levels in model order: 15, 12.5, 4.5.
pub const N_LEVELS: usize = 3;

/// Frozen token↔index map; index 0 is [`ABSENT`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    name: String,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Sorted, deduplicated vocabulary, so the result does not depend on
    /// input order.
    pub fn build<I, S>(name: &str, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        Self::from_sorted(name, set.into_iter().collect())
    }

    fn from_sorted(name: &str, tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + 1))
            .collect();
        Vocab {
            name: name.to_string(),
            tokens,
            index,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of rows including [`ABSENT`].
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    /// True when only [`ABSENT`] is present.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(ABSENT)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, idx: u32) -> Option<&str> {
        idx.checked_sub(1)
            .and_then(|i| self.tokens.get(i as usize))
            .map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the name and tokens.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for t in &self.tokens {
            h.update([0u8]);
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Keeps the tokens whose current index satisfies `keep`, preserving
    /// order. Returns the new vocabulary and the old→new index map.
    pub fn restrict(&self, keep: impl Fn(u32) -> bool) -> (Vocab, Vec<u32>) {
        let mut remap = vec![ABSENT; self.len()];
        let mut kept = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let old = i as u32 + 1;
            if keep(old) {
                kept.push(t.clone());
                remap[old as usize] = kept.len() as u32;
            }
        }
        (Self::from_sorted(&self.name, kept), remap)
    }

    /// One token per line; line `n` holds index `n`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(name: &str, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let mut seen = BTreeSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || !seen.insert(t) {
                return Err(Error::parse(
                    path.display().to_string(),
                    Some(i + 1),
                    "empty or duplicate token",
                ));
            }
        }
        Ok(Self::from_sorted(name, tokens))
    }
}

pub const CELL_VOCAB_NAMES: [&str; N_LEVELS] = ["cell15", "cell12_5", "cell4_5"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabs {
    pub route: Vocab,
    pub cells: [Vocab; N_LEVELS],
}

impl Vocabs {
    pub fn hashes(&self) -> Vec<(String, String)> {
        std::iter::once(&self.route)
            .chain(&self.cells)
            .map(|v| (v.name().to_string(), v.hash()))
            .collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for v in std::iter::once(&self.route).chain(&self.cells) {
            v.write(&dir.join(format!("{}.vocab", v.name())))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| Vocab::read(name, &dir.join(format!("{name}.vocab")));
        Ok(Vocabs {
            route: read("route")?,
            cells: [
                read(CELL_VOCAB_NAMES[0])?,
                read(CELL_VOCAB_NAMES[1])?,
                read(CELL_VOCAB_NAMES[2])?,
            ],
        })
    }
}

/// Vocabularies from the training split only.
pub fn build_vocabs(train: &[QuantizedShingle]) -> Result<Vocabs> {
    if train.is_empty() {
        return Err(Error::Empty("training set has no shingles".into()));
    }
    let route = Vocab::build("route", train.iter().map(|q| q.shingle.route.token()));
    let cells = std::array::from_fn(|l| {
        Vocab::build(
            CELL_VOCAB_NAMES[l],
            train
                .iter()
                .flat_map(|q| q.quanta.iter().map(move |x| x.cells[l].to_string())),
        )
    });
    Ok(Vocabs { route, cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantumInput {
    Stop,
    Segment {
        /// Traversed length, meters.
        d: f64,
        /// Traffic speed, m/s.
        s: f64,
        flag: TrafficFlag,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantumFeatures {
    pub cells: [u32; N_LEVELS],
    #[serde(flatten)]
    pub input: QuantumInput,
}

impl QuantumFeatures {
    pub fn is_stop(&self) -> bool {
        matches!(self.input, QuantumInput::Stop)
    }

    /// `(d, s)` for segments.
    pub fn segment(&self) -> Option<(f64, f64)> {
        match self.input {
            QuantumInput::Segment { d, s, .. } => Some((d, s)),
            QuantumInput::Stop => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleFeatures {
    pub route: u32,
    pub hour: u8,
    pub dow: u8,
    pub quanta: Vec<QuantumFeatures>,
    /// Observed duration in seconds; absent at inference.
    pub target: Option<f64>,
}

impl ExampleFeatures {
    pub fn target(&self) -> Result<f64> {
        self.target
            .ok_or_else(|| Error::InvalidArgument("example has no target duration".into()))
    }

    /// Σ d/s over segments.
    pub fn car_time(&self) -> f64 {
        self.quanta
            .iter()
            .filter_map(QuantumFeatures::segment)
            .map(|(d, s)| d / s)
            .sum()
    }

    pub fn distance_m(&self) -> f64 {
        self.quanta
            .iter()
            .filter_map(QuantumFeatures::segment)
            .map(|(d, _)| d)
            .sum()
    }

    pub fn n_stops(&self) -> usize {
        self.quanta.iter().filter(|q| q.is_stop()).count()
    }

    /// Replaces every traffic speed, keeping distances and targets.
    pub fn with_constant_speed(&self, speed: f64) -> Self {
        let mut out = self.clone();
        for q in &mut out.quanta {
            if let QuantumInput::Segment { s, .. } = &mut q.input {
                *s = speed;
            }
        }
        out
    }

    /// Maps every cell index through per-level `old → new` tables.
    pub fn remap_cells(&mut self, remap: &[Vec<u32>; N_LEVELS]) {
        for q in &mut self.quanta {
            for l in 0..N_LEVELS {
                q.cells[l] = remap[l].get(q.cells[l] as usize).copied().unwrap_or(ABSENT);
            }
        }
    }
}

/// Hour slice (0..48) and day of week (Monday = 0) in local time.
pub fn time_slots(ts: i64, tz: Tz) -> Result<(u8, u8)> {
    let dt = DateTime::from_timestamp(ts, 0)
        .ok_or_else(|| Error::InputDomain(format!("timestamp {ts} out of range")))?
        .with_timezone(&tz);
    let minutes = dt.hour() * 60 + dt.minute();
    Ok(((minutes / 30) as u8, dt.weekday().num_days_from_monday() as u8))
}

/// Traffic lookup time, speed and fallback tier for each segment quantum, in
/// order. Lookup times are extrapolated from the start time by accumulating
/// car travel time along the previous segments.
pub fn traffic_timestamps(
    start_ts: i64,
    quanta: &[Quantum],
    traffic: &TrafficTable,
) -> Result<Vec<(f64, f64, TrafficFlag)>> {
    let mut t = start_ts as f64;
    let mut out = Vec::new();
    for q in quanta {
        if let QuantumKind::Segment { segment, traversed_m } = &q.kind {
            let (s, flag) = traffic.lookup(segment, t)?;
            out.push((t, s, flag));
            t += traversed_m / s;
        }
    }
    Ok(out)
}

/// Shared read-only inputs for featurization.
#[derive(Debug, Clone, Copy)]
pub struct FeatureContext<'a> {
    pub vocabs: &'a Vocabs,
    pub timezone: Tz,
    pub traffic: &'a TrafficTable,
}

pub fn featurize_quanta(
    route: &RouteKey,
    start_ts: i64,
    quanta: &[Quantum],
    target: Option<f64>,
    ctx: &FeatureContext,
) -> Result<ExampleFeatures> {
    let (hour, dow) = time_slots(start_ts, ctx.timezone)?;
    let speeds = traffic_timestamps(start_ts, quanta, ctx.traffic)?;
    let mut speeds = speeds.into_iter();
    let mut out = Vec::with_capacity(quanta.len());
    for q in quanta {
        let cells = std::array::from_fn(|l| ctx.vocabs.cells[l].get(&q.cells[l].to_string()));
        let input = match &q.kind {
            QuantumKind::Stop { .. } => QuantumInput::Stop,
            QuantumKind::Segment { traversed_m, .. } => {
                let (_, s, flag) = speeds.next().expect("one speed per segment");
                QuantumInput::Segment {
                    d: *traversed_m,
                    s,
                    flag,
                }
            }
        };
        out.push(QuantumFeatures { cells, input });
    }
    Ok(ExampleFeatures {
        route: ctx.vocabs.route.get(&route.token()),
        hour,
        dow,
        quanta: out,
        target,
    })
}

pub fn featurize(q: &QuantizedShingle, ctx: &FeatureContext) -> Result<ExampleFeatures> {
    featurize_quanta(
        &q.shingle.route,
        q.shingle.start_ts,
        &q.quanta,
        Some(q.shingle.duration_s as f64),
        ctx,
    )
}

/// Per-level spatial ablation probabilities for levels 15, 12.5, 4.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPolicy {
    pub p: [f64; N_LEVELS],
}

impl Default for AblationPolicy {
    fn default() -> Self {
        AblationPolicy { p: [0.2, 0.1, 0.1] }
    }
}

impl AblationPolicy {
    pub fn none() -> Self {
        AblationPolicy { p: [0.0; N_LEVELS] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.iter().any(|p| !(0.0..=1.0).contains(p)) || self.p.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "ablation rates {:?} must be in [0,1] and sum to at most 1",
                self.p
            )));
        }
        Ok(())
    }

    /// One outcome: `Some(level index)` to ablate that level and every finer
    /// one, or `None` to keep everything.
    pub fn draw(&self, rng: &mut impl Rng) -> Option<usize> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (l, p) in self.p.iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(l);
            }
        }
        None
    }
}

/// Ablates the route and every cell at `level` or finer, for all quanta.
pub fn ablate(x: &ExampleFeatures, level: Option<usize>) -> ExampleFeatures {
    let mut out = x.clone();
    if let Some(level) = level {
        out.route = ABSENT;
        for q in &mut out.quanta {
            for c in &mut q.cells[..=level] {
                *c = ABSENT;
            }
        }
    }
    out
}

pub fn apply_sia(x: &ExampleFeatures, rng: &mut impl Rng, policy: &AblationPolicy) -> ExampleFeatures {
    ablate(x, policy.draw(rng))
}
