//! The travel-time network: embeddings, one shared hidden layer, stop and
//! segment output units, and clipped summation. Gradients are derived by
//! hand.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{ExampleFeatures, Vocabs, ABSENT, DAYS, HOUR_SLICES, N_LEVELS};

/// Embedding tables in a fixed order.
pub const ROUTE: usize = 0;
pub const HOUR: usize = 1;
pub const DOW: usize = 2;
/// Cell level `l` lives at `CELL + l`.
pub const CELL: usize = 3;
pub const N_TABLES: usize = CELL + N_LEVELS;

/// Dense tensors in a fixed order.
pub const W1: usize = 0;
pub const B1: usize = 1;
pub const W2_STOP: usize = 2;
pub const B2_STOP: usize = 3;
pub const W2_SEG: usize = 4;
pub const B2_SEG: usize = 5;
pub const N_DENSE: usize = 6;

/// How the traffic and distance signals enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericMode {
    /// Segment head emits (α, β); t = α·d/s + β·d.
    Mixture,
    /// d and d/s feed the hidden layer; the segment head emits t directly.
    HiddenInputs,
}

/// Which categorical inputs the network reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMask {
    pub route: bool,
    pub time: bool,
    pub cells: [bool; N_LEVELS],
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask {
            route: true,
            time: true,
            cells: [true; N_LEVELS],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_route: usize,
    pub d_hour: usize,
    pub d_dow: usize,
    pub d_cell: usize,
    pub hidden: usize,
    pub init_std: f64,
    pub numeric: NumericMode,
    pub features: FeatureMask,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_route: 2,
            d_hour: 2,
            d_dow: 2,
            d_cell: 4,
            hidden: 32,
            init_std: 0.1,
            numeric: NumericMode::Mixture,
            features: FeatureMask::default(),
        }
    }
}

/// Scale of the numeric hidden inputs: d in hectometers, d/s in tens of
/// seconds.
const D_SCALE: f64 = 100.0;
const T_SCALE: f64 = 10.0;

/// Fixed output units of the heads: a raw head value of 1 means 10 s of
/// dwell, α = 1, β = 0.01 s/m, or 10 s of direct segment time. Puts every
/// head near unit scale at the true law so a single learning rate suits all.
const STOP_UNIT: [f64; 1] = [10.0];
const MIXTURE_UNITS: [f64; 2] = [1.0, 0.01];
const DIRECT_UNIT: [f64; 1] = [10.0];

fn head_units(is_stop: bool, numeric: NumericMode) -> &'static [f64] {
    match (is_stop, numeric) {
        (true, _) => &STOP_UNIT,
        (false, NumericMode::Mixture) => &MIXTURE_UNITS,
        (false, NumericMode::HiddenInputs) => &DIRECT_UNIT,
    }
}

/// Raw head output (pre-unit) for row `o` of a head.
fn raw_head(p: &Params, w2: usize, b2: usize, o: usize, hidden: &[f64]) -> f64 {
    dot(p.dense[w2].row(o), hidden) + p.dense[b2].data[o]
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_route == 0 || self.d_dow == 0 || self.d_cell == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(
                "embedding and hidden sizes must be positive".into(),
            ));
        }
        if self.d_hour < 2 {
            return Err(Error::InvalidArgument("d_hour must be at least 2".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "init_std must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn context_dim(&self) -> usize {
        self.d_route + self.d_hour + self.d_dow
    }

    fn numeric_dim(&self) -> usize {
        match self.numeric {
            NumericMode::Mixture => 0,
            NumericMode::HiddenInputs => 2,
        }
    }

    /// Width of the hidden-layer input: [ℓ; route; hour; dow; numeric].
    pub fn input_dim(&self) -> usize {
        self.d_cell + self.context_dim() + self.numeric_dim()
    }

    pub fn segment_outputs(&self) -> usize {
        match self.numeric {
            NumericMode::Mixture => 2,
            NumericMode::HiddenInputs => 1,
        }
    }

    fn table_dim(&self, t: usize) -> usize {
        match t {
            ROUTE => self.d_route,
            HOUR => self.d_hour,
            DOW => self.d_dow,
            _ => self.d_cell,
        }
    }
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub config: ModelConfig,
    /// Route, hour, day-of-week, then one table per cell level.
    pub tables: [Tensor; N_TABLES],
    /// W1 (k × in), b1, W2_stop (1 × k), b2_stop, W2_seg (heads × k), b2_seg.
    pub dense: [Tensor; N_DENSE],
}

/// Whether row 0 of a table is the pinned [`ABSENT`] row.
pub fn has_absent_row(table: usize) -> bool {
    !matches!(table, HOUR | DOW)
}

/// Row counts for each table given vocabularies.
pub fn table_rows(vocabs: &Vocabs) -> [usize; N_TABLES] {
    [
        vocabs.route.len(),
        HOUR_SLICES,
        DAYS,
        vocabs.cells[0].len(),
        vocabs.cells[1].len(),
        vocabs.cells[2].len(),
    ]
}

impl Params {
    pub fn zeros(config: ModelConfig, rows: [usize; N_TABLES]) -> Self {
        let k = config.hidden;
        Params {
            config,
            tables: std::array::from_fn(|t| Tensor::zeros(rows[t], config.table_dim(t))),
            dense: [
                Tensor::zeros(k, config.input_dim()),
                Tensor::zeros(1, k),
                Tensor::zeros(1, k),
                Tensor::zeros(1, 1),
                Tensor::zeros(config.segment_outputs(), k),
                Tensor::zeros(1, config.segment_outputs()),
            ],
        }
    }

    /// Gaussian init, hour slices placed on the unit circle in dims 0–1,
    /// ABSENT rows zero, head biases centered on 1.
    pub fn init(config: ModelConfig, rows: [usize; N_TABLES], rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = Params::zeros(config, rows);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::InvalidArgument(format!("init_std: {e}")))?;
        for (t, table) in p.tables.iter_mut().enumerate() {
            for v in table.data.iter_mut() {
                *v = normal.sample(rng);
            }
            if has_absent_row(t) && table.rows > 0 {
                table.row_mut(ABSENT as usize).fill(0.0);
            }
        }
        for h in 0..HOUR_SLICES {
            let theta = std::f64::consts::TAU * h as f64 / HOUR_SLICES as f64;
            let row = p.tables[HOUR].row_mut(h);
            row[0] = theta.cos();
            row[1] = theta.sin();
        }
        for d in p.dense.iter_mut() {
            for v in d.data.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        // Head biases are centered on one output unit instead of zero. A unit
        // whose output is clipped for every input gets no gradient and never
        // recovers; starting every head positive avoids beginning there.
        for b in [B2_STOP, B2_SEG] {
            p.dense[b].data.iter_mut().for_each(|v| *v += 1.0);
        }
        Ok(p)
    }

    /// Makes every head constant: stop units output `stop_s` seconds and
    /// mixture segment units use `(alpha, beta)`, whatever the input.
    pub fn force_heads(&mut self, stop_s: f64, alpha: f64, beta: f64) {
        for t in [W2_STOP, W2_SEG] {
            self.dense[t].data.fill(0.0);
        }
        self.dense[B2_STOP].data[0] = stop_s / STOP_UNIT[0];
        match self.config.numeric {
            NumericMode::Mixture => {
                self.dense[B2_SEG].data[0] = alpha / MIXTURE_UNITS[0];
                self.dense[B2_SEG].data[1] = beta / MIXTURE_UNITS[1];
            }
            NumericMode::HiddenInputs => self.dense[B2_SEG].data[0] = alpha / DIRECT_UNIT[0],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params::zeros(self.config, std::array::from_fn(|t| self.tables[t].rows))
    }

    pub fn all_finite(&self) -> bool {
        self.tables
            .iter()
            .chain(&self.dense)
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn check_example(&self, x: &ExampleFeatures) -> Result<()> {
        let oob = |what: &str, idx: usize, rows: usize| {
            Error::InvalidArgument(format!("{what} index {idx} outside table of {rows} rows"))
        };
        let f = self.config.features;
        if f.route && x.route as usize >= self.tables[ROUTE].rows {
            return Err(oob("route", x.route as usize, self.tables[ROUTE].rows));
        }
        if x.hour as usize >= HOUR_SLICES {
            return Err(oob("hour", x.hour as usize, HOUR_SLICES));
        }
        if x.dow as usize >= DAYS {
            return Err(oob("day", x.dow as usize, DAYS));
        }
        for q in &x.quanta {
            for l in 0..N_LEVELS {
                let rows = self.tables[CELL + l].rows;
                if f.cells[l] && q.cells[l] as usize >= rows {
                    return Err(oob("cell", q.cells[l] as usize, rows));
                }
            }
            if let Some((d, s)) = q.segment() {
                if !(d > 0.0 && s > 0.0 && d.is_finite() && s.is_finite()) {
                    return Err(Error::InputDomain(format!("segment with d={d}, s={s}")));
                }
            }
        }
        Ok(())
    }

    /// Concatenated context embedding (route; hour; dow), honoring the mask.
    fn context(&self, x: &ExampleFeatures) -> Vec<f64> {
        let c = &self.config;
        let mut out = Vec::with_capacity(c.context_dim());
        let f = c.features;
        if f.route && x.route != ABSENT {
            out.extend_from_slice(self.tables[ROUTE].row(x.route as usize));
        } else {
            out.resize(c.d_route, 0.0);
        }
        if f.time {
            out.extend_from_slice(self.tables[HOUR].row(x.hour as usize));
            out.extend_from_slice(self.tables[DOW].row(x.dow as usize));
        } else {
            out.resize(c.context_dim(), 0.0);
        }
        out
    }

    /// Unweighted sum of the readable cell embeddings of one quantum.
    fn location(&self, cells: &[u32; N_LEVELS]) -> Vec<f64> {
        let mut l = vec![0.0; self.config.d_cell];
        for lv in 0..N_LEVELS {
            if self.config.features.cells[lv] && cells[lv] != ABSENT {
                for (a, b) in l.iter_mut().zip(self.tables[CELL + lv].row(cells[lv] as usize)) {
                    *a += b;
                }
            }
        }
        l
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    signature: u64,
    pub context: Vec<f64>,
    /// Per quantum.
    pub units: Vec<UnitTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitTrace {
    pub location: Vec<f64>,
    pub numeric: [f64; 2],
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Head outputs: stop head value, or (α, β), or the direct segment value.
    pub head: Vec<f64>,
    pub pre_clip: f64,
    pub duration: f64,
}

impl UnitTrace {
    pub fn clipped(&self) -> bool {
        self.pre_clip <= 0.0
    }
}

/// Structural fingerprint tying a trace to the example it came from.
fn signature(x: &ExampleFeatures) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    mix(x.route as u64);
    mix(x.hour as u64);
    mix(x.dow as u64);
    mix(x.quanta.len() as u64);
    for q in &x.quanta {
        for c in q.cells {
            mix(c as u64);
        }
        match q.segment() {
            Some((d, s)) => {
                mix(d.to_bits());
                mix(s.to_bits());
            }
            None => mix(u64::MAX),
        }
    }
    h
}

/// Predicted duration in seconds and the trace needed for [`backward`].
pub fn forward(x: &ExampleFeatures, p: &Params) -> Result<(f64, ForwardTrace)> {
    p.check_example(x)?;
    let cfg = &p.config;
    let k = cfg.hidden;
    let context = p.context(x);
    let w1 = &p.dense[W1];
    let ctx_off = cfg.d_cell;
    let num_off = cfg.d_cell + cfg.context_dim();

    // W1 · c + b1 is shared by every quantum of the example.
    let base: Vec<f64> = (0..k)
        .map(|j| dot(&w1.row(j)[ctx_off..num_off], &context) + p.dense[B1].data[j])
        .collect();

    let mut units = Vec::with_capacity(x.quanta.len());
    let mut total = 0.0;
    for q in &x.quanta {
        let location = p.location(&q.cells);
        let numeric = match (cfg.numeric, q.segment()) {
            (NumericMode::HiddenInputs, Some((d, s))) => [d / D_SCALE, d / s / T_SCALE],
            _ => [0.0, 0.0],
        };
        let pre_hidden: Vec<f64> = (0..k)
            .map(|j| {
                let row = w1.row(j);
                let mut z = base[j] + dot(&row[..ctx_off], &location);
                if cfg.numeric == NumericMode::HiddenInputs {
                    z += row[num_off] * numeric[0] + row[num_off + 1] * numeric[1];
                }
                z
            })
            .collect();
        let hidden: Vec<f64> = pre_hidden.iter().map(|z| z.max(0.0)).collect();
        let units_of = head_units(q.is_stop(), cfg.numeric);
        let (head, pre_clip) = match (q.segment(), cfg.numeric) {
            (None, _) => {
                let v = units_of[0] * raw_head(p, W2_STOP, B2_STOP, 0, &hidden);
                (vec![v], v)
            }
            (Some((d, s)), NumericMode::Mixture) => {
                let a = units_of[0] * raw_head(p, W2_SEG, B2_SEG, 0, &hidden);
                let b = units_of[1] * raw_head(p, W2_SEG, B2_SEG, 1, &hidden);
                (vec![a, b], a * d / s + b * d)
            }
            (Some(_), NumericMode::HiddenInputs) => {
                let v = units_of[0] * raw_head(p, W2_SEG, B2_SEG, 0, &hidden);
                (vec![v], v)
            }
        };
        let duration = pre_clip.max(0.0);
        total += duration;
        units.push(UnitTrace {
            location,
            numeric,
            pre_hidden,
            hidden,
            head,
            pre_clip,
            duration,
        });
    }
    Ok((
        total,
        ForwardTrace {
            signature: signature(x),
            context,
            units,
        },
    ))
}

pub fn predict_features(x: &ExampleFeatures, p: &Params) -> Result<f64> {
    forward(x, p).map(|(t, _)| t)
}

/// Parameter gradients: dense tensors in full, embedding tables as sparse
/// rows keyed by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tables: [BTreeMap<u32, Vec<f64>>; N_TABLES],
    pub dense: [Tensor; N_DENSE],
}

impl Grads {
    pub fn zeros(p: &Params) -> Self {
        let z = p.zeros_like();
        Grads {
            tables: Default::default(),
            dense: z.dense,
        }
    }

    fn row(&mut self, table: usize, idx: u32, dim: usize) -> &mut Vec<f64> {
        self.tables[table].entry(idx).or_insert_with(|| vec![0.0; dim])
    }

    /// `self += other`, row by row in key order.
    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        for (t, rows) in other.tables.iter().enumerate() {
            for (idx, g) in rows {
                let dst = self.row(t, *idx, g.len());
                for (x, y) in dst.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for d in &mut self.dense {
            d.data.iter_mut().for_each(|v| *v *= c);
        }
        for rows in &mut self.tables {
            for g in rows.values_mut() {
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.dense.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
            && self
                .tables
                .iter()
                .all(|rows| rows.values().all(|g| g.iter().all(|v| v.is_finite())))
    }

    pub fn is_zero(&self) -> bool {
        self.dense.iter().all(|t| t.data.iter().all(|v| *v == 0.0))
            && self
                .tables
                .iter()
                .all(|rows| rows.values().all(|g| g.iter().all(|v| *v == 0.0)))
    }
}

/// Accumulates `dL/dθ` into `grads` given `dL/dT̂`. ReLU derivatives at
/// exactly zero are taken as zero.
pub fn backward(x: &ExampleFeatures, p: &Params, trace: &ForwardTrace, d_out: f64, grads: &mut Grads) -> Result<()> {
    if trace.signature != signature(x) || trace.units.len() != x.quanta.len() {
        return Err(Error::Mismatch("forward trace does not belong to this example".into()));
    }
    if d_out == 0.0 {
        return Ok(());
    }
    let cfg = p.config;
    let k = cfg.hidden;
    let ctx_off = cfg.d_cell;
    let num_off = cfg.d_cell + cfg.context_dim();
    let in_dim = cfg.input_dim();
    let mut d_context = vec![0.0; cfg.context_dim()];
    let mut dz = vec![0.0; k];

    for (q, u) in x.quanta.iter().zip(&trace.units) {
        if u.clipped() {
            continue;
        }
        let g = d_out;
        // Gradient with respect to each raw head output.
        let units_of = head_units(q.is_stop(), cfg.numeric);
        let head_grads: Vec<f64> = match (q.segment(), cfg.numeric) {
            (Some((d, s)), NumericMode::Mixture) => vec![g * d / s * units_of[0], g * d * units_of[1]],
            _ => vec![g * units_of[0]],
        };
        let (w2, b2) = if q.is_stop() {
            (W2_STOP, B2_STOP)
        } else {
            (W2_SEG, B2_SEG)
        };
        dz.fill(0.0);
        for (o, hg) in head_grads.iter().enumerate() {
            let w_row = p.dense[w2].row(o);
            let gw = grads.dense[w2].row_mut(o);
            for j in 0..k {
                gw[j] += hg * u.hidden[j];
                dz[j] += hg * w_row[j];
            }
            grads.dense[b2].data[o] += hg;
        }
        for j in 0..k {
            if u.pre_hidden[j] <= 0.0 {
                dz[j] = 0.0;
            }
        }
        let w1 = &p.dense[W1];
        let mut d_loc = vec![0.0; cfg.d_cell];
        for j in 0..k {
            let dzj = dz[j];
            if dzj == 0.0 {
                continue;
            }
            let row = w1.row(j);
            let gw = &mut grads.dense[W1].data[j * in_dim..(j + 1) * in_dim];
            for i in 0..cfg.d_cell {
                gw[i] += dzj * u.location[i];
                d_loc[i] += dzj * row[i];
            }
            for i in 0..cfg.context_dim() {
                gw[ctx_off + i] += dzj * trace.context[i];
                d_context[i] += dzj * row[ctx_off + i];
            }
            if cfg.numeric == NumericMode::HiddenInputs {
                gw[num_off] += dzj * u.numeric[0];
                gw[num_off + 1] += dzj * u.numeric[1];
            }
            grads.dense[B1].data[j] += dzj;
        }
        for l in 0..N_LEVELS {
            if cfg.features.cells[l] && q.cells[l] != ABSENT {
                let row = grads.row(CELL + l, q.cells[l], cfg.d_cell);
                for (a, b) in row.iter_mut().zip(&d_loc) {
                    *a += b;
                }
            }
        }
    }

    let f = cfg.features;
    if f.route && x.route != ABSENT {
        let row = grads.row(ROUTE, x.route, cfg.d_route);
        for (a, b) in row.iter_mut().zip(&d_context[..cfg.d_route]) {
            *a += b;
        }
    }
    if f.time {
        let o = cfg.d_route;
        let row = grads.row(HOUR, x.hour as u32, cfg.d_hour);
        for (a, b) in row.iter_mut().zip(&d_context[o..o + cfg.d_hour]) {
            *a += b;
        }
        let o = o + cfg.d_hour;
        let row = grads.row(DOW, x.dow as u32, cfg.d_dow);
        for (a, b) in row.iter_mut().zip(&d_context[o..o + cfg.d_dow]) {
            *a += b;
        }
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters with the vocabulary fingerprints they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab_hashes: BTreeMap<String, String>,
    /// Training-set mean speed, used when traffic is ablated.
    pub constant_speed: Option<f64>,
    pub params: Params,
}

impl Checkpoint {
    pub fn new(params: Params, vocabs: &Vocabs, constant_speed: Option<f64>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab_hashes: vocabs.hashes().into_iter().collect(),
            constant_speed,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::InvalidArgument(format!("serialize checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and checks it against `vocabs`.
    pub fn load(path: &Path, vocabs: &Vocabs) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), Some(e.line()), e))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Mismatch(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        let expected: BTreeMap<String, String> = vocabs.hashes().into_iter().collect();
        if c.vocab_hashes != expected {
            return Err(Error::Mismatch(
                "checkpoint was trained with different vocabularies".into(),
            ));
        }
        let rows = table_rows(vocabs);
        let fresh = Params::zeros(c.params.config, rows);
        let shapes_ok = c.params.tables.iter().zip(&fresh.tables).all(|(a, b)| a.same_shape(b))
            && c.params.dense.iter().zip(&fresh.dense).all(|(a, b)| a.same_shape(b))
            && c.params
                .tables
                .iter()
                .chain(&c.params.dense)
                .all(|t| t.data.len() == t.rows * t.cols);
        if !shapes_ok {
            return Err(Error::Mismatch(
                "checkpoint tensor shapes do not match its config".into(),
            ));
        }
        Ok(c)
    }
}
