//! Ingested dataset to trained models: graph building, splitting, training
//! and search, with run artifacts written on completion.

use std::path::Path;
use std::time::Instant;

use dbscheme_core::hypergraph::{build_hypergraph, Direction, HeteroGraph, IntegrityMode};
use dbscheme_core::sampler::SampleSpec;
use dbscheme_core::scheme::Assembly;
use dbscheme_core::train::{collect_search, search_configs, train_loop, SearchOutcome, SearchSpace, TaskData, TrainConfig, TrainOutcome};

use crate::artifacts::{write_artifact, Summary, Timing};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::manifest::TargetSpec;

/// Builds the graph and the train/validation split for `target`.
pub fn prepare(ds: &Dataset, target: &TargetSpec, strict: bool, split_seed: u64) -> Result<(TaskData, Vec<String>)> {
    let target_relation = ds
        .db
        .schema
        .relation_index(&target.relation)
        .ok_or_else(|| Error::Usage(format!("dataset `{}` has no relation `{}`", ds.name, target.relation)))?;
    let mode = if strict { IntegrityMode::Strict } else { IntegrityMode::Drop };
    let (graph, warnings) = build_hypergraph(ds.db.clone(), mode)?;
    let spec = SampleSpec { target_relation, target_attr: target.attribute.clone(), task: target.task, depth_limit: None, fanout: None };
    Ok((TaskData::new(graph, ds.text.as_ref(), spec, split_seed)?, warnings))
}

#[derive(Debug, Clone)]
pub enum RunMode {
    Train(TrainConfig),
    Search { space: SearchSpace, base: TrainConfig, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub model: Assembly,
    pub mode: RunMode,
    pub strict_integrity: bool,
    pub split_seed: u64,
    /// Per-trial wall-clock cap.
    pub time_limit_secs: Option<f64>,
    /// Trials trained concurrently during a search.
    pub jobs: usize,
}

fn timed_run(data: &TaskData, kind: Assembly, cfg: &TrainConfig, limit: Option<f64>) -> (dbscheme_core::Result<TrainOutcome>, f64) {
    let start = Instant::now();
    let mut stop = |_| limit.is_some_and(|l| start.elapsed().as_secs_f64() >= l);
    let r = train_loop(data, kind, cfg, &mut stop);
    (r, start.elapsed().as_secs_f64())
}

/// Runs every configuration, `jobs` at a time; results come back in input order.
pub fn run_trials(data: &TaskData, kind: Assembly, configs: &[TrainConfig], jobs: usize, limit: Option<f64>) -> Vec<(dbscheme_core::Result<TrainOutcome>, f64)> {
    let jobs = jobs.clamp(1, configs.len().max(1));
    if jobs == 1 {
        return configs.iter().map(|c| timed_run(data, kind, c, limit)).collect();
    }
    let mut out: Vec<Option<(dbscheme_core::Result<TrainOutcome>, f64)>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in configs.chunks(jobs).enumerate() {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(move || timed_run(data, kind, c, limit))).collect();
            for (i, h) in handles.into_iter().enumerate() {
                out[chunk_idx * jobs + i] = Some(h.join().expect("trial thread panicked"));
            }
        });
    }
    out.into_iter().map(|r| r.expect("every trial ran")).collect()
}

/// Trains or searches on a prepared task.
pub fn run_task(data: &TaskData, opts: &ExperimentOptions) -> Result<(SearchOutcome, Vec<f64>)> {
    let configs = match &opts.mode {
        RunMode::Train(cfg) => vec![cfg.clone()],
        RunMode::Search { space, base, seed } => {
            if space.trials == 0 {
                return Err(Error::Usage("search needs at least one trial".into()));
            }
            search_configs(space, base, *seed)
        }
    };
    let results = run_trials(data, opts.model, &configs, opts.jobs, opts.time_limit_secs);
    let mut times = Vec::with_capacity(results.len());
    let mut paired = Vec::with_capacity(results.len());
    for (cfg, (r, t)) in configs.into_iter().zip(results) {
        times.push(t);
        paired.push((cfg, r));
    }
    let mut outcome = collect_search(data, opts.model, paired)?;
    for (rec, t) in outcome.trials.iter_mut().zip(&times) {
        rec.wall_time_secs = Some(*t);
    }
    Ok((outcome, times))
}

/// Prepares, trains and writes the run artifact into `out`.
pub fn run_experiment(ds: &Dataset, target: &TargetSpec, opts: &ExperimentOptions, out: &Path) -> Result<Summary> {
    let start = Instant::now();
    let (data, _) = prepare(ds, target, opts.strict_integrity, opts.split_seed)?;
    let (outcome, times) = run_task(&data, opts)?;
    let timing = Timing { total_secs: start.elapsed().as_secs_f64(), trial_secs: times };
    write_artifact(out, ds, target, &data, opts, &outcome, &timing)
}

/// Forward edges of every FK edge type as `{fk, source, target, pairs}` records.
pub fn edge_export(g: &HeteroGraph) -> serde_json::Value {
    let names = |r: usize| g.db.schema.relations[r].name.clone();
    let types: Vec<_> = g
        .edge_types()
        .filter(|e| e.direction == Direction::Forward)
        .map(|e| {
            let a = g.adjacency(e);
            serde_json::json!({ "fk": e.fk, "source": names(a.source_relation), "target": names(a.target_relation), "pairs": a.pairs })
        })
        .collect();
    serde_json::Value::Array(types)
}
