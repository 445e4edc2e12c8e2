//! One function per subcommand. Stages talk to each other only through files
//! under the output directory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

use bustr::eval::{
    ablation_run, ablation_trials, car_baseline, mape, novelty_slices, reports_csv, reports_summary_json, slice_mapes,
    Dataset, EvalReport, LinearBaseline,
};
use bustr::featurizer::{featurize, FeatureContext, Vocabs};
use bustr::ingest::{
    parse_gtfs_static, parse_traffic, parse_vehicle_positions, Counters, Feed, SegmentationConfig, SnappedTrace,
    TrafficTable,
};
use bustr::model::Checkpoint;
use bustr::pipeline::{snap_traces, Predictor};
use bustr::shingler::{quantize_all, shingle_traces, split_by_week, QuantizedShingle, Splits};
use bustr::synthworld::{World, WorldSpec};
use bustr::trainer::{predict_all, targets};
use bustr::Execution;

use crate::config::PipelineConfig;

pub const WORLD_DIR: &str = "world";
pub const SNAPPED: &str = "snapped.jsonl";
pub const SHINGLES: &str = "shingles.jsonl";
pub const MODEL_DIR: &str = "model";
pub const CHECKPOINT: &str = "checkpoint.json";

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| bustr::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| bustr::Error::Parse {
            file: path.display().to_string(),
            line: Some(i + 1),
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("write {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("write {}", path.display()))
}

fn load_feed(config: &PipelineConfig, out: &Path) -> anyhow::Result<Feed> {
    Ok(parse_gtfs_static(
        &config.gtfs(out),
        &config.inputs.feed_id,
        &SegmentationConfig::default(),
    )?)
}

fn load_traffic(config: &PipelineConfig, out: &Path) -> anyhow::Result<TrafficTable> {
    let (table, counters) = parse_traffic(&config.traffic(out), config.inputs.traffic_bucket_min)?;
    log::info!("traffic: {} entries, counters {:?}", table.len(), counters.0);
    Ok(table)
}

fn load_splits(config: &PipelineConfig, out: &Path) -> anyhow::Result<Splits<QuantizedShingle>> {
    let shingles: Vec<QuantizedShingle> = read_jsonl(&out.join(SHINGLES))?;
    Ok(split_by_week(shingles, &config.weeks)?)
}

pub fn synth_gen(config: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let world = World::generate(&config.world)?;
    let dir = out.join(WORLD_DIR);
    world.write(&dir)?;
    println!(
        "wrote {} patterns, {} trips to {}",
        world.patterns.len(),
        world.trips.len(),
        dir.display()
    );
    Ok(())
}

pub fn ingest(config: &PipelineConfig, out: &Path, exec: Execution) -> anyhow::Result<()> {
    let feed = load_feed(config, out)?;
    let (traces, mut counters) = parse_vehicle_positions(&config.positions(out), &feed)?;
    counters.merge(&feed.counters);
    let (snapped, c) = snap_traces(traces, &feed, config.shingler.snap_tolerance_m, exec);
    counters.merge(&c);
    write_jsonl(&out.join(SNAPPED), &snapped)?;
    write_json(&out.join("ingest_counters.json"), &counters)?;
    println!("ingested {} traces", snapped.len());
    Ok(())
}

pub fn shingle(config: &PipelineConfig, out: &Path, exec: Execution) -> anyhow::Result<()> {
    let feed = load_feed(config, out)?;
    let snapped: Vec<SnappedTrace> = read_jsonl(&out.join(SNAPPED))?;
    let (shingles, counters): (_, Counters) = shingle_traces(&snapped, &feed, &config.shingler, config.seed, exec)?;
    let quantized = quantize_all(shingles, &feed, exec)?;
    write_jsonl(&out.join(SHINGLES), &quantized)?;
    write_json(&out.join("shingle_counters.json"), &counters)?;
    println!("wrote {} shingles", quantized.len());
    Ok(())
}

fn dataset(config: &PipelineConfig, out: &Path, exec: Execution) -> anyhow::Result<Dataset> {
    let feed = load_feed(config, out)?;
    let traffic = load_traffic(config, out)?;
    let s = load_splits(config, out)?;
    log::info!(
        "split: {} train, {} validation, {} test",
        s.train.len(),
        s.validation.len(),
        s.test.len()
    );
    Ok(Dataset::build(
        &s.train,
        &s.validation,
        &s.test,
        feed.timezone,
        &traffic,
        exec,
    )?)
}

pub fn train(config: &PipelineConfig, out: &Path, exec: Execution) -> anyhow::Result<()> {
    let data = dataset(config, out, exec)?;
    let run = ablation_run(config.variant, &data, &config.model, &config.train, exec)?;
    let dir = out.join(MODEL_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("create {}", dir.display()))?;
    run.trained.vocabs.write_dir(&dir.join("vocabs"))?;
    data.vocabs.write_dir(&dir.join("train_vocabs"))?;
    Checkpoint::new(run.trained.params.clone(), &run.trained.vocabs, run.constant_speed).save(&dir.join(CHECKPOINT))?;
    let report = run.report();
    write_json(&dir.join("train_report.json"), report)?;
    if let Some(p1) = &report.pass1 {
        write_text(&dir.join("pass1.csv"), &p1.to_csv())?;
    }
    write_text(&dir.join("pass2.csv"), &report.pass2.to_csv())?;
    println!(
        "trained {} on {} examples; level-15 cells {} -> {}",
        config.variant,
        data.train.len(),
        report.vocab_before[0],
        report.vocab_after[0]
    );
    Ok(())
}

/// The trained model as written by `train`.
struct Model {
    vocabs: Vocabs,
    checkpoint: Checkpoint,
}

fn load_model(out: &Path) -> anyhow::Result<Model> {
    let dir = out.join(MODEL_DIR);
    let vocabs = Vocabs::read_dir(&dir.join("vocabs"))?;
    let checkpoint = Checkpoint::load(&dir.join(CHECKPOINT), &vocabs)?;
    Ok(Model { vocabs, checkpoint })
}

pub fn eval(config: &PipelineConfig, out: &Path, exec: Execution) -> anyhow::Result<()> {
    let model = load_model(out)?;
    let train_vocabs = Vocabs::read_dir(&out.join(MODEL_DIR).join("train_vocabs"))?;
    let feed = load_feed(config, out)?;
    let traffic = load_traffic(config, out)?;
    let test = load_splits(config, out)?.test;
    let ctx = FeatureContext {
        vocabs: &model.vocabs,
        timezone: feed.timezone,
        traffic: &traffic,
    };
    let mut xs = exec
        .map(&test, |q| featurize(q, &ctx))
        .into_iter()
        .collect::<bustr::Result<Vec<_>>>()?;
    if let Some(s) = model.checkpoint.constant_speed {
        xs = xs.iter().map(|x| x.with_constant_speed(s)).collect();
    }
    let preds = predict_all(&model.checkpoint.params, &xs, exec)?;
    let slices = novelty_slices(&test, &train_vocabs);
    let reports: Vec<EvalReport> = slice_mapes(&preds, &xs, &slices)?
        .into_iter()
        .map(|(slice, m)| EvalReport::new(config.variant.name(), &slice, vec![m]))
        .collect();
    write_text(&out.join("eval.csv"), &reports_csv(&reports))?;
    write_text(&out.join("eval.json"), &reports_summary_json(&reports)?)?;
    for r in &reports {
        println!("{} {}: MAPE {:.3}%", r.label, r.slice, r.mean);
    }
    Ok(())
}

pub fn ablate(config: &PipelineConfig, out: &Path, exec: Execution) -> anyhow::Result<()> {
    let data = dataset(config, out, exec)?;
    let reports = ablation_trials(
        &config.ablate.variants,
        &data,
        &config.model,
        &config.train,
        config.ablate.trials,
        exec,
    )?;
    write_text(&out.join("ablation.csv"), &reports_csv(&reports))?;
    write_text(&out.join("ablation.json"), &reports_summary_json(&reports)?)?;
    for r in &reports {
        println!(
            "{} {}: MAPE {:.3} +- {:.3} (n={})",
            r.label, r.slice, r.mean, r.stdev, r.n
        );
    }
    Ok(())
}

pub fn baseline(config: &PipelineConfig, out: &Path, exec: Execution) -> anyhow::Result<()> {
    let data = dataset(config, out, exec)?;
    let actual = targets(&data.test)?;
    let car: Vec<f64> = data.test.iter().map(car_baseline).collect();
    let linear = LinearBaseline::fit(&data.train)?;
    let lin: Vec<f64> = data.test.iter().map(|x| linear.predict(x)).collect();
    let reports = vec![
        EvalReport::new("car", "all", vec![mape(&car, &actual)?]),
        EvalReport::new("linear", "all", vec![mape(&lin, &actual)?]),
    ];
    write_text(&out.join("baselines.csv"), &reports_csv(&reports))?;
    for r in &reports {
        println!("{}: MAPE {:.3}%", r.label, r.mean);
    }
    Ok(())
}

pub struct Query<'a> {
    pub route: &'a str,
    pub from: &'a str,
    pub to: &'a str,
    pub departure: i64,
}

pub fn predict(config: &PipelineConfig, out: &Path, q: &Query) -> anyhow::Result<f64> {
    let model = load_model(out)?;
    let feed = load_feed(config, out)?;
    let traffic = load_traffic(config, out)?;
    let predictor = Predictor {
        feed: &feed,
        vocabs: &model.vocabs,
        params: &model.checkpoint.params,
        traffic: &traffic,
        timezone: feed.timezone,
        constant_speed: model.checkpoint.constant_speed,
    };
    Ok(predictor.predict(q.route, q.from, q.to, q.departure)?)
}

/// Regenerates the world from its `world.json` and asks its oracle.
pub fn oracle(out: &Path, shape_id: &str, start_m: f64, end_m: f64, departure: i64) -> anyhow::Result<f64> {
    let path = out.join(WORLD_DIR).join("world.json");
    let text = fs::read_to_string(&path).map_err(|e| bustr::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let spec: WorldSpec = serde_json::from_str(&text).map_err(|e| bustr::Error::Parse {
        file: path.display().to_string(),
        line: Some(e.line()),
        msg: e.to_string(),
    })?;
    let world = World::generate(&spec)?;
    let pattern = world
        .patterns
        .iter()
        .position(|p| p.shape.shape_id == shape_id)
        .ok_or_else(|| bustr::Error::NotFound(format!("shape {shape_id}")))?;
    Ok(world.oracle_duration(pattern, start_m, end_m, departure as f64)?)
}
