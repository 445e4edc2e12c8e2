//! Adam with MSE loss, step-decayed learning rate, best-validation
//! checkpointing, and two-pass L1 feature selection.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::mape;
use crate::exec::Execution;
use crate::featurizer::{ablate, AblationPolicy, ExampleFeatures, Vocab, Vocabs, ABSENT, N_LEVELS};
use crate::model::{backward, forward, has_absent_row, table_rows, Grads, ModelConfig, Params, CELL, N_TABLES};

/// Numeric cell levels, finest first.
pub const LEVEL_VALUES: [f64; N_LEVELS] = [15.0, 12.5, 4.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub lambda_reg: f64,
    pub level_base: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub sia: AblationPolicy,
    /// Examples per gradient chunk; chunks are reduced in a fixed order.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100_000,
            batch: 200,
            learning_rate: 0.1,
            decay: 0.97,
            decay_every: 1000,
            eval_every: 500,
            eval_samples: 100_000,
            lambda_reg: 0.1,
            level_base: 1.25,
            epsilon: 0.1,
            seed: 0,
            sia: AblationPolicy::default(),
            chunk: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.steps,
            self.batch,
            self.decay_every,
            self.eval_every,
            self.eval_samples,
            self.chunk,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument(
                "step, batch and eval counts must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.decay > 0.0 && self.level_base > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate, decay and level base must be positive".into(),
            ));
        }
        if !(self.lambda_reg >= 0.0 && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(
                "lambda_reg and epsilon must be non-negative".into(),
            ));
        }
        self.sia.validate()
    }

    /// η·δ^⌊n/decay_every⌋.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate * self.decay.powi((step / self.decay_every) as i32)
    }

    /// λ·b^L for each cell level.
    pub fn level_weights(&self) -> [f64; N_LEVELS] {
        LEVEL_VALUES.map(|l| self.lambda_reg * self.level_base.powf(l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(p: &Params, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: p.zeros_like(),
            v: p.zeros_like(),
            step: 0,
        }
    }
}

/// `bc` holds the bias corrections `(1 - β1^t, 1 - β2^t)`.
fn adam_update(x: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], c: &AdamConfig, lr: f64, bc: (f64, f64)) {
    for i in 0..x.len() {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        x[i] -= lr * (m[i] / bc.0) / ((v[i] / bc.1).sqrt() + c.eps);
    }
}

/// One Adam step. Embedding rows absent from `grads` are left untouched,
/// including their moments; bias correction uses the global step count.
pub fn adam_step(p: &mut Params, grads: &Grads, state: &mut AdamState, lr: f64) -> Result<()> {
    if !grads.all_finite() {
        let bad: Vec<String> = grads
            .dense
            .iter()
            .enumerate()
            .filter(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
            .map(|(i, _)| format!("dense[{i}]"))
            .chain(
                grads
                    .tables
                    .iter()
                    .enumerate()
                    .filter(|(_, rows)| rows.values().any(|g| g.iter().any(|v| !v.is_finite())))
                    .map(|(i, _)| format!("table[{i}]")),
            )
            .collect();
        return Err(Error::NonFinite(format!(
            "gradient at step {} in {}",
            state.step + 1,
            bad.join(", ")
        )));
    }
    for (a, b) in p.dense.iter().zip(&grads.dense) {
        if a.data.len() != b.data.len() {
            return Err(Error::Mismatch("gradient shape does not match parameters".into()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let bc = (1.0 - c.beta1.powf(t), 1.0 - c.beta2.powf(t));
    for i in 0..p.dense.len() {
        adam_update(
            &mut p.dense[i].data,
            &mut state.m.dense[i].data,
            &mut state.v.dense[i].data,
            &grads.dense[i].data,
            &c,
            lr,
            bc,
        );
    }
    for tb in 0..N_TABLES {
        for (idx, g) in &grads.tables[tb] {
            let r = *idx as usize;
            if has_absent_row(tb) && *idx == ABSENT {
                continue;
            }
            if r >= p.tables[tb].rows || g.len() != p.tables[tb].cols {
                return Err(Error::Mismatch(format!("gradient row {r} outside table {tb}")));
            }
            adam_update(
                p.tables[tb].row_mut(r),
                state.m.tables[tb].row_mut(r),
                state.v.tables[tb].row_mut(r),
                g,
                &c,
                lr,
                bc,
            );
        }
    }
    Ok(())
}

/// Per-level penalty: λ·b^L times the mean over non-ABSENT rows of the row
/// L1 norm.
pub fn regularizer(p: &Params, weights: &[f64; N_LEVELS]) -> f64 {
    (0..N_LEVELS)
        .map(|l| {
            let t = &p.tables[CELL + l];
            if t.rows <= 1 {
                return 0.0;
            }
            let sum: f64 = t.data[t.cols..].iter().map(|v| v.abs()).sum();
            weights[l] * sum / (t.rows - 1) as f64
        })
        .sum()
}

/// Adds the regularizer's subgradient (sign, zero at zero) for every
/// non-ABSENT cell row.
pub fn add_regularizer_grad(p: &Params, weights: &[f64; N_LEVELS], grads: &mut Grads) {
    for l in 0..N_LEVELS {
        let t = &p.tables[CELL + l];
        if t.rows <= 1 || weights[l] == 0.0 {
            continue;
        }
        let w = weights[l] / (t.rows - 1) as f64;
        for r in 1..t.rows {
            let row = grads.tables[CELL + l]
                .entry(r as u32)
                .or_insert_with(|| vec![0.0; t.cols]);
            for (g, v) in row.iter_mut().zip(t.row(r)) {
                if *v != 0.0 {
                    *g += w * v.signum();
                }
            }
        }
    }
}

/// Mean squared error in seconds² over `batch` and its gradient.
pub fn batch_loss_grad(
    p: &Params,
    batch: &[(&ExampleFeatures, Option<usize>)],
    chunk: usize,
    exec: Execution,
) -> Result<(f64, Grads)> {
    let n = batch.len() as f64;
    let chunks: Vec<&[(&ExampleFeatures, Option<usize>)]> = batch.chunks(chunk.max(1)).collect();
    let parts = exec.map(&chunks, |c| -> Result<(f64, Grads)> {
        let mut g = Grads::zeros(p);
        let mut loss = 0.0;
        for (x, level) in c.iter() {
            let ablated;
            let x = match level {
                Some(_) => {
                    ablated = ablate(x, *level);
                    &ablated
                }
                None => *x,
            };
            let target = x.target()?;
            let (y, trace) = forward(x, p)?;
            let err = y - target;
            loss += err * err;
            backward(x, p, &trace, 2.0 * err / n, &mut g)?;
        }
        Ok((loss, g))
    });
    let mut total = Grads::zeros(p);
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add(&g);
    }
    Ok((loss / n, total))
}

pub fn predict_all(p: &Params, xs: &[ExampleFeatures], exec: Execution) -> Result<Vec<f64>> {
    exec.map(xs, |x| forward(x, p).map(|(y, _)| y)).into_iter().collect()
}

pub fn targets(xs: &[ExampleFeatures]) -> Result<Vec<f64>> {
    xs.iter().map(ExampleFeatures::target).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub curve: Vec<CurvePoint>,
    pub best_step: usize,
    pub best_val_mape: f64,
}

impl PassReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,train_loss,val_mape\n");
        for c in &self.curve {
            s.push_str(&format!("{},{},{}\n", c.step, c.train_loss, c.val_mape));
        }
        s
    }
}

const INIT_STREAM: u64 = 0x1;
const BATCH_STREAM: u64 = 0x2;
const SIA_STREAM: u64 = 0x3;
const EVAL_STREAM: u64 = 0x4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One training run from a fresh initialization. Returns the parameters with
/// the lowest validation MAPE (earliest on ties).
pub fn train_pass(
    train: &[ExampleFeatures],
    validation: &[ExampleFeatures],
    rows: [usize; N_TABLES],
    model: ModelConfig,
    config: &TrainConfig,
    regularize: bool,
    exec: Execution,
) -> Result<(Params, PassReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    let mut p = Params::init(model, rows, &mut stream(config.seed, INIT_STREAM))?;
    let mut adam = AdamState::new(&p, AdamConfig::default());
    let mut batch_rng = stream(config.seed, BATCH_STREAM);
    let mut sia_rng = stream(config.seed, SIA_STREAM);
    let weights = config.level_weights();

    let n_eval = config.eval_samples.min(validation.len());
    let mut eval_idx = index::sample(&mut stream(config.seed, EVAL_STREAM), validation.len(), n_eval).into_vec();
    eval_idx.sort_unstable();
    let eval_set: Vec<ExampleFeatures> = eval_idx.iter().map(|&i| validation[i].clone()).collect();
    let eval_targets = targets(&eval_set)?;

    let mut best: Option<(f64, usize, Params)> = None;
    let mut curve = Vec::new();
    let mut window_loss = 0.0;
    let mut window_n = 0usize;
    for step in 0..config.steps {
        let batch: Vec<(&ExampleFeatures, Option<usize>)> = (0..config.batch)
            .map(|_| {
                let x = &train[batch_rng.random_range(0..train.len())];
                (x, config.sia.draw(&mut sia_rng))
            })
            .collect();
        let (loss, mut grads) = batch_loss_grad(&p, &batch, config.chunk, exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        if regularize {
            add_regularizer_grad(&p, &weights, &mut grads);
        }
        adam_step(&mut p, &grads, &mut adam, config.lr_at(step))?;
        window_loss += loss;
        window_n += 1;

        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let preds = predict_all(&p, &eval_set, exec)?;
            let val = mape(&preds, &eval_targets)?;
            log::debug!(
                "step {done}: train loss {:.3}, validation MAPE {val:.3}",
                window_loss / window_n as f64
            );
            curve.push(CurvePoint {
                step: done,
                train_loss: window_loss / window_n as f64,
                val_mape: val,
            });
            window_loss = 0.0;
            window_n = 0;
            if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
                best = Some((val, done, p.clone()));
            }
        }
    }
    let (best_val_mape, best_step, params) = best.expect("at least one evaluation");
    Ok((
        params,
        PassReport {
            curve,
            best_step,
            best_val_mape,
        },
    ))
}

/// Cell rows kept by feature selection, per level.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub keep: [Vec<bool>; N_LEVELS],
}

impl Selection {
    pub fn kept(&self, level: usize) -> usize {
        self.keep[level].iter().skip(1).filter(|k| **k).count()
    }
}

/// Keeps cell rows whose L2 norm exceeds `epsilon`; ABSENT is always kept.
pub fn select_features(p: &Params, epsilon: f64) -> Selection {
    Selection {
        keep: std::array::from_fn(|l| {
            let t = &p.tables[CELL + l];
            (0..t.rows)
                .map(|r| r == ABSENT as usize || t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() > epsilon)
                .collect()
        }),
    }
}

/// Applies a selection to vocabularies and examples.
pub fn restrict(vocabs: &Vocabs, selection: &Selection, examples: &mut [&mut Vec<ExampleFeatures>]) -> Vocabs {
    let mut remaps: [Vec<u32>; N_LEVELS] = Default::default();
    let cells: [Vocab; N_LEVELS] = std::array::from_fn(|l| {
        let (v, remap) = vocabs.cells[l].restrict(|i| selection.keep[l][i as usize]);
        remaps[l] = remap;
        v
    });
    for set in examples.iter_mut() {
        for x in set.iter_mut() {
            x.remap_cells(&remaps);
        }
    }
    Vocabs {
        route: vocabs.route.clone(),
        cells,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub pass1: Option<PassReport>,
    pub pass2: PassReport,
    pub vocab_before: [usize; N_LEVELS],
    pub vocab_after: [usize; N_LEVELS],
}

impl TrainReport {
    /// Rows before over rows after, per level (ABSENT excluded).
    pub fn shrink_factor(&self, level: usize) -> f64 {
        self.vocab_before[level] as f64 / self.vocab_after[level].max(1) as f64
    }
}

/// A trained model with the vocabularies its tables index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: Params,
    pub vocabs: Vocabs,
    pub report: TrainReport,
}

/// Regularized pass, feature selection, then an unregularized pass from
/// scratch on the selected features. With `select` false only the second
/// pass runs, on all features.
pub fn train_full(
    mut train: Vec<ExampleFeatures>,
    mut validation: Vec<ExampleFeatures>,
    vocabs: &Vocabs,
    model: ModelConfig,
    config: &TrainConfig,
    select: bool,
    exec: Execution,
) -> Result<(Trained, Vec<ExampleFeatures>, Vec<ExampleFeatures>)> {
    let before: [usize; N_LEVELS] = std::array::from_fn(|l| vocabs.cells[l].len() - 1);
    let (vocabs, pass1) = if select {
        let (p1, r1) = train_pass(&train, &validation, table_rows(vocabs), model, config, true, exec)?;
        let selection = select_features(&p1, config.epsilon);
        let v = restrict(vocabs, &selection, &mut [&mut train, &mut validation]);
        (v, Some(r1))
    } else {
        (vocabs.clone(), None)
    };
    let (params, pass2) = train_pass(&train, &validation, table_rows(&vocabs), model, config, false, exec)?;
    let after = std::array::from_fn(|l| vocabs.cells[l].len() - 1);
    Ok((
        Trained {
            params,
            vocabs,
            report: TrainReport {
                pass1,
                pass2,
                vocab_before: before,
                vocab_after: after,
            },
        },
        train,
        validation,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::{QuantumFeatures, QuantumInput};
    use crate::ingest::TrafficFlag;
    use crate::model::{Tensor, B1};

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.1);
        assert!((c.lr_at(2500) - 0.09409).abs() < 1e-12);
        let w = c.level_weights();
        assert!((w[0] / w[2] - 1.25f64.powf(10.5)).abs() < 1e-9);
        assert!((w[0] / w[2] - 10.4).abs() < 0.05);
    }

    fn tiny_params() -> Params {
        Params::zeros(
            ModelConfig {
                hidden: 1,
                ..ModelConfig::default()
            },
            [2, 48, 7, 3, 2, 2],
        )
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = tiny_params();
        p.dense[B1].data[0] = 0.7;
        let before = p.clone();
        let g = Grads::zeros(&p);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = tiny_params();
        let mut g = Grads::zeros(&p);
        g.dense[B1].data[0] = 1.0;
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert!((p.dense[B1].data[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn untouched_rows_are_not_updated() {
        let mut p = tiny_params();
        p.tables[CELL].data.fill(0.5);
        let mut g = Grads::zeros(&p);
        g.tables[CELL].insert(1, vec![1.0; 4]);
        g.tables[CELL].insert(0, vec![1.0; 4]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert!(p.tables[CELL].row(0).iter().all(|v| *v == 0.5));
        assert!(p.tables[CELL].row(2).iter().all(|v| *v == 0.5));
        assert!(p.tables[CELL].row(1).iter().all(|v| *v < 0.5));
        assert!(s.m.tables[CELL].row(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = tiny_params();
        let mut g = Grads::zeros(&p);
        g.dense[B1].data[0] = f64::NAN;
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &g, &mut s, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn selection_threshold() {
        let mut p = tiny_params();
        p.tables[CELL] = Tensor {
            rows: 3,
            cols: 4,
            data: vec![0.0, 0.0, 0.0, 0.0, 0.05, 0.0, 0.0, 0.0, 0.0, 0.15, 0.0, 0.0],
        };
        let s = select_features(&p, 0.1);
        assert_eq!(s.keep[0], vec![true, false, true]);
    }

    #[test]
    fn regularizer_value_and_grad() {
        let mut p = tiny_params();
        p.tables[CELL].data = vec![0.0, 0.0, 0.0, 0.0, 1.0, -2.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0];
        let w = [2.0, 0.0, 0.0];
        // Mean over rows 1..3 of L1 norms (3.5, 0) is 1.75.
        assert!((regularizer(&p, &w) - 3.5).abs() < 1e-12);
        let mut g = Grads::zeros(&p);
        add_regularizer_grad(&p, &w, &mut g);
        assert_eq!(g.tables[CELL][&1], vec![1.0, -1.0, 0.0, 1.0]);
        assert_eq!(g.tables[CELL][&2], vec![0.0; 4]);
        assert!(!g.tables[CELL].contains_key(&0));
    }

    fn toy_examples(n: usize, seed: u64) -> Vec<ExampleFeatures> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let quanta: Vec<QuantumFeatures> = (0..5)
                    .map(|_| {
                        let d = rng.random_range(20.0..100.0);
                        let s = rng.random_range(4.0..15.0);
                        QuantumFeatures {
                            cells: [rng.random_range(1..3), 1, 1],
                            input: QuantumInput::Segment {
                                d,
                                s,
                                flag: TrafficFlag::Exact,
                            },
                        }
                    })
                    .collect();
                let target = quanta
                    .iter()
                    .map(|q| q.segment().unwrap())
                    .map(|(d, s)| 1.3 * d / s)
                    .sum();
                ExampleFeatures {
                    route: 1,
                    hour: rng.random_range(0..48),
                    dow: rng.random_range(0..7),
                    quanta,
                    target: Some(target),
                }
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            steps: 300,
            batch: 20,
            eval_every: 50,
            eval_samples: 100,
            learning_rate: 0.02,
            chunk: 4,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_selects_best() {
        let train = toy_examples(200, 1);
        let val = toy_examples(50, 2);
        let rows = [2, 48, 7, 3, 2, 2];
        let cfg = toy_config();
        let (a, ra) = train_pass(
            &train,
            &val,
            rows,
            ModelConfig::default(),
            &cfg,
            false,
            Execution::Sequential,
        )
        .unwrap();
        let (b, rb) = train_pass(
            &train,
            &val,
            rows,
            ModelConfig::default(),
            &cfg,
            false,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let min = ra.curve.iter().map(|c| c.val_mape).fold(f64::INFINITY, f64::min);
        assert_eq!(ra.best_val_mape, min);
        assert!(ra.best_val_mape < ra.curve[0].val_mape || ra.best_step == ra.curve[0].step);
        assert!(ra.best_val_mape < 15.0, "{}", ra.best_val_mape);
    }

    #[test]
    fn zero_epsilon_matches_single_pass() {
        let train = toy_examples(100, 3);
        let val = toy_examples(30, 4);
        let vocabs = Vocabs {
            route: Vocab::build("route", ["r"]),
            cells: [
                Vocab::build("cell15", ["a", "b"]),
                Vocab::build("cell12_5", ["c"]),
                Vocab::build("cell4_5", ["d"]),
            ],
        };
        let cfg = TrainConfig {
            epsilon: 0.0,
            steps: 100,
            ..toy_config()
        };
        let (full, ..) = train_full(
            train.clone(),
            val.clone(),
            &vocabs,
            ModelConfig::default(),
            &cfg,
            true,
            Execution::Parallel,
        )
        .unwrap();
        let (plain, ..) = train_full(
            train,
            val,
            &vocabs,
            ModelConfig::default(),
            &cfg,
            false,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(full.vocabs, plain.vocabs);
        assert_eq!(full.params, plain.params);
        assert_eq!(full.report.pass2, plain.report.pass2);
    }

    #[test]
    fn empty_split_is_an_error() {
        let cfg = toy_config();
        let r = train_pass(
            &[],
            &toy_examples(3, 1),
            [2, 48, 7, 3, 2, 2],
            ModelConfig::default(),
            &cfg,
            false,
            Execution::Sequential,
        );
        assert!(matches!(r, Err(Error::Empty(_))));
    }
}
