//! Error metric, simple baselines, the feature-ablation harness and the
//! novelty slices.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::featurizer::{build_vocabs, featurize, AblationPolicy, ExampleFeatures, FeatureContext, Vocabs, N_LEVELS};
use crate::ingest::TrafficTable;
use crate::model::{ModelConfig, NumericMode, Params};
use crate::shingler::QuantizedShingle;
use crate::trainer::{predict_all, targets, train_full, TrainConfig, TrainReport, Trained};

/// Mean absolute percentage error, in percent.
pub fn mape(preds: &[f64], actuals: &[f64]) -> Result<f64> {
    if preds.len() != actuals.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} actuals",
            preds.len(),
            actuals.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let mut sum = 0.0;
    for (p, a) in preds.iter().zip(actuals) {
        if !(*a > 0.0) {
            return Err(Error::InputDomain(format!("actual duration {a} is not positive")));
        }
        sum += (p - a).abs() / a;
    }
    Ok(100.0 * sum / preds.len() as f64)
}

/// Treats the bus as a car: Σ d/s over segments.
pub fn car_baseline(x: &ExampleFeatures) -> f64 {
    x.car_time()
}

/// Least squares on (1, stops, distance, car time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub weights: [f64; 4],
}

const RIDGE: f64 = 1e-8;

fn linear_features(x: &ExampleFeatures) -> [f64; 3] {
    [x.n_stops() as f64, x.distance_m(), x.car_time()]
}

impl LinearBaseline {
    /// Solves the centered normal equations with a small ridge; the intercept
    /// follows from the means.
    pub fn fit(train: &[ExampleFeatures]) -> Result<Self> {
        if train.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "linear baseline needs at least 4 examples, got {}",
                train.len()
            )));
        }
        let n = train.len() as f64;
        let xs: Vec<[f64; 3]> = train.iter().map(linear_features).collect();
        let ys = targets(train)?;
        let mut mean = [0.0; 3];
        for x in &xs {
            for i in 0..3 {
                mean[i] += x[i] / n;
            }
        }
        let y_mean = ys.iter().sum::<f64>() / n;
        let mut xtx = DMatrix::<f64>::zeros(3, 3);
        let mut xty = DVector::<f64>::zeros(3);
        for (x, y) in xs.iter().zip(&ys) {
            let c = [x[0] - mean[0], x[1] - mean[1], x[2] - mean[2]];
            for i in 0..3 {
                for j in 0..3 {
                    xtx[(i, j)] += c[i] * c[j];
                }
                xty[i] += c[i] * (y - y_mean);
            }
        }
        // Ridge scaled to each column so that units do not matter.
        for i in 0..3 {
            xtx[(i, i)] += RIDGE * xtx[(i, i)].max(1.0);
        }
        let w = xtx
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("normal equations not positive definite".into()))?
            .solve(&xty);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient("non-finite linear weights".into()));
        }
        let intercept = y_mean - (0..3).map(|i| w[i] * mean[i]).sum::<f64>();
        Ok(LinearBaseline {
            weights: [intercept, w[0], w[1], w[2]],
        })
    }

    pub fn predict(&self, x: &ExampleFeatures) -> f64 {
        let f = linear_features(x);
        self.weights[0] + self.weights[1] * f[0] + self.weights[2] * f[1] + self.weights[3] * f[2]
    }
}

/// Example indices of the generalization slices. Slices may overlap.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoveltySlices {
    pub new_routes: Vec<usize>,
    pub new_areas: Vec<usize>,
}

/// Examples on routes never seen in training, and examples passing through
/// at least one level-12.5 cell never seen in training.
pub fn novelty_slices(test: &[QuantizedShingle], train_vocabs: &Vocabs) -> NoveltySlices {
    let mut out = NoveltySlices::default();
    for (i, q) in test.iter().enumerate() {
        if !train_vocabs.route.contains(&q.shingle.route.token()) {
            out.new_routes.push(i);
        }
        if q.quanta
            .iter()
            .any(|x| !train_vocabs.cells[1].contains(&x.cells[1].to_string()))
        {
            out.new_areas.push(i);
        }
    }
    out
}

/// Model variants compared by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    TrafficAblated,
    RouteAblated,
    RouteAndL15Ablated,
    RouteAndAllCellsAblated,
    TimeAblated,
    NumericHidden,
    NoFeatureSelection,
    NoSia,
    NoCoarseCells,
    NoSiaNoCoarseCells,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Full,
        Variant::TrafficAblated,
        Variant::RouteAblated,
        Variant::RouteAndL15Ablated,
        Variant::RouteAndAllCellsAblated,
        Variant::TimeAblated,
        Variant::NumericHidden,
        Variant::NoFeatureSelection,
        Variant::NoSia,
        Variant::NoCoarseCells,
        Variant::NoSiaNoCoarseCells,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TrafficAblated => "traffic-ablated",
            Variant::RouteAblated => "route-ablated",
            Variant::RouteAndL15Ablated => "route-and-l15-ablated",
            Variant::RouteAndAllCellsAblated => "route-and-all-cells-ablated",
            Variant::TimeAblated => "time-ablated",
            Variant::NumericHidden => "numeric-hidden",
            Variant::NoFeatureSelection => "no-feature-selection",
            Variant::NoSia => "no-sia",
            Variant::NoCoarseCells => "no-coarse-cells",
            Variant::NoSiaNoCoarseCells => "no-sia-no-coarse-cells",
        }
    }

    /// Model and training settings for this variant.
    pub fn configure(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig, bool) {
        let (mut m, mut t, mut select) = (*model, train.clone(), true);
        match self {
            Variant::Full | Variant::TrafficAblated => {}
            Variant::RouteAblated => m.features.route = false,
            Variant::RouteAndL15Ablated => {
                m.features.route = false;
                m.features.cells[0] = false;
            }
            Variant::RouteAndAllCellsAblated => {
                m.features.route = false;
                m.features.cells = [false; N_LEVELS];
            }
            Variant::TimeAblated => m.features.time = false,
            Variant::NumericHidden => m.numeric = NumericMode::HiddenInputs,
            Variant::NoFeatureSelection => select = false,
            Variant::NoSia => t.sia = AblationPolicy::none(),
            Variant::NoCoarseCells => m.features.cells = [true, false, false],
            Variant::NoSiaNoCoarseCells => {
                t.sia = AblationPolicy::none();
                m.features.cells = [true, false, false];
            }
        }
        (m, t, select)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Featurized splits with training vocabularies and test slices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocabs: Vocabs,
    pub train: Vec<ExampleFeatures>,
    pub validation: Vec<ExampleFeatures>,
    pub test: Vec<ExampleFeatures>,
    pub slices: NoveltySlices,
    /// Mean traffic speed over training segment quanta, m/s.
    pub train_mean_speed: f64,
}

impl Dataset {
    pub fn build(
        train: &[QuantizedShingle],
        validation: &[QuantizedShingle],
        test: &[QuantizedShingle],
        timezone: chrono_tz::Tz,
        traffic: &TrafficTable,
        exec: Execution,
    ) -> Result<Self> {
        let vocabs = build_vocabs(train)?;
        let ctx = FeatureContext {
            vocabs: &vocabs,
            timezone,
            traffic,
        };
        let feat = |set: &[QuantizedShingle]| -> Result<Vec<ExampleFeatures>> {
            exec.map(set, |q| featurize(q, &ctx)).into_iter().collect()
        };
        let train_x = feat(train)?;
        let validation_x = feat(validation)?;
        let test_x = feat(test)?;
        let slices = novelty_slices(test, &vocabs);
        let train_mean_speed = mean_speed(&train_x)?;
        Ok(Dataset {
            vocabs,
            train: train_x,
            validation: validation_x,
            test: test_x,
            slices,
            train_mean_speed,
        })
    }
}

/// Mean traffic speed over all segment quanta.
pub fn mean_speed(xs: &[ExampleFeatures]) -> Result<f64> {
    let (sum, n) = xs
        .iter()
        .flat_map(|x| x.quanta.iter().filter_map(|q| q.segment()))
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::Empty("no segment quanta with traffic speeds".into()));
    }
    Ok(sum / n as f64)
}

pub const SLICE_ALL: &str = "all";
pub const SLICE_NEW_ROUTES: &str = "new_routes";
pub const SLICE_NEW_AREAS: &str = "new_areas";

/// MAPE of `preds` on the whole test set and each non-empty slice.
pub fn slice_mapes(preds: &[f64], test: &[ExampleFeatures], slices: &NoveltySlices) -> Result<Vec<(String, f64)>> {
    let actual = targets(test)?;
    let mut out = vec![(SLICE_ALL.to_string(), mape(preds, &actual)?)];
    for (name, idx) in [
        (SLICE_NEW_ROUTES, &slices.new_routes),
        (SLICE_NEW_AREAS, &slices.new_areas),
    ] {
        if idx.is_empty() {
            continue;
        }
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let a: Vec<f64> = idx.iter().map(|&i| actual[i]).collect();
        out.push((name.to_string(), mape(&p, &a)?));
    }
    Ok(out)
}

/// One trained variant with its test predictions.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub trained: Trained,
    pub constant_speed: Option<f64>,
    pub test_preds: Vec<f64>,
    pub slice_mapes: Vec<(String, f64)>,
}

impl VariantRun {
    pub fn mape(&self, slice: &str) -> Option<f64> {
        self.slice_mapes.iter().find(|(s, _)| s == slice).map(|(_, v)| *v)
    }

    pub fn params(&self) -> &Params {
        &self.trained.params
    }

    pub fn report(&self) -> &TrainReport {
        &self.trained.report
    }
}

/// Trains and evaluates one variant.
pub fn ablation_run(
    variant: Variant,
    data: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    exec: Execution,
) -> Result<VariantRun> {
    let (m, t, select) = variant.configure(model, config);
    let constant_speed = (variant == Variant::TrafficAblated).then_some(data.train_mean_speed);
    let prep = |xs: &[ExampleFeatures]| -> Vec<ExampleFeatures> {
        match constant_speed {
            Some(v) => xs.iter().map(|x| x.with_constant_speed(v)).collect(),
            None => xs.to_vec(),
        }
    };
    let mut test = prep(&data.test);
    let before = data.vocabs.clone();
    let (trained, ..) = train_full(prep(&data.train), prep(&data.validation), &before, m, &t, select, exec)?;
    if trained.vocabs != before {
        // Selection shrank the cell vocabularies: re-index test cells.
        let remap: [Vec<u32>; N_LEVELS] = std::array::from_fn(|l| {
            (0..before.cells[l].len() as u32)
                .map(|i| {
                    before.cells[l]
                        .token(i)
                        .map(|tok| trained.vocabs.cells[l].get(tok))
                        .unwrap_or(0)
                })
                .collect()
        });
        for x in &mut test {
            x.remap_cells(&remap);
        }
    }
    let test_preds = predict_all(&trained.params, &test, exec)?;
    let slice_mapes = slice_mapes(&test_preds, &test, &data.slices)?;
    Ok(VariantRun {
        variant,
        trained,
        constant_speed,
        test_preds,
        slice_mapes,
    })
}

/// Trial MAPEs with summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub slice: String,
    pub trials: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single trial.
    pub stdev: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn new(label: &str, slice: &str, trials: Vec<f64>) -> Self {
        let n = trials.len();
        let mean = trials.iter().sum::<f64>() / n.max(1) as f64;
        let stdev = if n > 1 {
            (trials.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        EvalReport {
            label: label.to_string(),
            slice: slice.to_string(),
            trials,
            mean,
            stdev,
            n,
        }
    }
}

/// Runs `trials` seeds of each variant and collects per-slice reports.
pub fn ablation_trials(
    variants: &[Variant],
    data: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    trials: usize,
    exec: Execution,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for v in variants {
        let mut by_slice: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for t in 0..trials {
            let cfg = TrainConfig {
                seed: config.seed.wrapping_add(t as u64),
                ..config.clone()
            };
            let run = ablation_run(*v, data, model, &cfg, exec)?;
            for (slice, m) in run.slice_mapes {
                by_slice.entry(slice).or_default().push(m);
            }
        }
        for (slice, ms) in by_slice {
            out.push(EvalReport::new(v.name(), &slice, ms));
        }
    }
    Ok(out)
}

/// CSV rows `variant,slice,trial,mape`.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("variant,slice,trial,mape\n");
    for r in reports {
        for (t, m) in r.trials.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", r.label, r.slice, t, m));
        }
    }
    s
}

pub fn reports_summary_json(reports: &[EvalReport]) -> Result<String> {
    serde_json::to_string_pretty(reports).map_err(|e| Error::InvalidArgument(format!("serialize report: {e}")))
}
