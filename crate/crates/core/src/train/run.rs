use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, argmax_rows, nrmse};
use super::{metric_name, SearchSpace, TrainConfig};
use crate::embed::{EncodedTable, Encoders, TextVectors};
use crate::error::{usage, Error, Result};
use crate::hypergraph::{HeteroGraph, NodeRef};
use crate::relmodel::Value;
use crate::sampler::{
    batch_size, bfs_expand, hetero_sample, mask_targets, split_train_val, Fanout, Labels, MiniBatch, NodeSet, SampleSpec, SplitSpec, TargetLabels, TaskKind,
};
use crate::scheme::{Assembly, Model};
use crate::tensor::{adam_step, AdamState, Tape};

const EVAL_CHUNK: usize = 256;
const BATCH_STREAM: u64 = 0x6261_7463_6865_7321;
const DROPOUT_STREAM: u64 = 0x6472_6f70_6f75_7421;

/// Everything a run needs besides the model: the graph, encoded features,
/// labels and the train/validation split.
#[derive(Debug)]
pub struct TaskData {
    pub graph: HeteroGraph,
    pub encoders: Encoders,
    pub encoded: Vec<EncodedTable>,
    pub spec: SampleSpec,
    pub labels: TargetLabels,
    pub train: Vec<NodeRef>,
    pub val: Vec<NodeRef>,
    /// Mean and standard deviation of the training targets; regression only.
    pub target_stats: Option<(f64, f64)>,
}

impl TaskData {
    /// Fits encoders on the graph's database, encodes it and splits the labelled target rows.
    pub fn new(graph: HeteroGraph, text: Option<&TextVectors>, spec: SampleSpec, split_seed: u64) -> Result<Self> {
        let encoders = Encoders::fit(&graph.db, text);
        Self::with_encoders(graph, encoders, text, spec, split_seed)
    }

    pub fn with_encoders(graph: HeteroGraph, encoders: Encoders, text: Option<&TextVectors>, spec: SampleSpec, split_seed: u64) -> Result<Self> {
        let labels = TargetLabels::from_db(&graph.db, &spec)?;
        let encoded = encoders.encode(&graph.db, text)?;
        let seeds = labels.seeds(spec.target_relation);
        let (train, val) = split_train_val(&seeds, SplitSpec::new(split_seed))?;
        let target_stats = match spec.task {
            TaskKind::Classification => None,
            TaskKind::Regression => {
                let Labels::Values(y) = labels.labels_for(&train)? else { unreachable!() };
                let mean = y.iter().sum::<f64>() / y.len() as f64;
                let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64;
                let std = libm::sqrt(var);
                Some((mean, if std > 1e-12 { std } else { 1.0 }))
            }
        };
        Ok(Self { graph, encoders, encoded, spec, labels, train, val, target_stats })
    }

    pub fn task(&self) -> TaskKind {
        self.spec.task
    }

    /// Decoder outputs: class count, or 1 for regression.
    pub fn outputs(&self) -> usize {
        match self.spec.task {
            TaskKind::Classification => self.labels.num_classes(),
            TaskKind::Regression => 1,
        }
    }

    /// Masked mini-batch for `seeds`, expanded `depth` hops.
    pub fn batch(&self, seeds: &[NodeRef], depth: usize, fanout: Option<&Fanout>, sample_seed: u64) -> Result<MiniBatch> {
        let nodes: NodeSet = match fanout {
            Some(f) => hetero_sample(&self.graph, seeds, Some(depth), f, sample_seed),
            None => bfs_expand(&self.graph, seeds, Some(depth)),
        };
        let b = MiniBatch::assemble(&self.graph, &self.encoded, &nodes, seeds, self.labels.labels_for(seeds)?)?;
        mask_targets(b, &self.spec, &self.graph.db.schema)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

/// One validation prediction. Classes are dense indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub row: usize,
    pub target: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub config: TrainConfig,
    pub task: TaskKind,
    pub metric: String,
    /// Original class values by dense index; empty for regression.
    pub classes: Vec<Value>,
    pub step_losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_step: Option<usize>,
    pub best_val: Option<f64>,
    pub train_target_mean: Option<f64>,
    /// Validation predictions of the selected checkpoint.
    pub val_predictions: Vec<Prediction>,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub failure: Option<String>,
    /// Filled in by callers that can read a clock.
    pub wall_time_secs: Option<f64>,
}

impl RunRecord {
    fn new(kind: Assembly, cfg: &TrainConfig, data: &TaskData) -> Self {
        Self {
            model: String::from(kind.name()),
            config: cfg.clone(),
            task: data.task(),
            metric: metric_name(data.task()),
            classes: data.labels.classes.clone(),
            step_losses: Vec::new(),
            evals: Vec::new(),
            best_step: None,
            best_val: None,
            train_target_mean: data.target_stats.map(|s| s.0),
            val_predictions: Vec::new(),
            steps_run: 0,
            stopped_early: false,
            failure: None,
            wall_time_secs: None,
        }
    }

    /// Whether `a` is a better validation value than `b` for this task.
    pub fn better(task: TaskKind, a: f64, b: f64) -> bool {
        match task {
            TaskKind::Classification => a > b,
            TaskKind::Regression => a < b,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation checkpoint.
    pub model: Model,
    pub record: RunRecord,
}

/// Validation loss, metric and predictions of `model` on `seeds`, evaluation mode.
pub fn evaluate(model: &mut Model, data: &TaskData, seeds: &[NodeRef], depth: usize, fanout: Option<&Fanout>, sample_seed: u64) -> Result<(f64, f64, Vec<Prediction>)> {
    if seeds.is_empty() {
        return Err(usage!("evaluation needs at least one seed"));
    }
    let mut preds = Vec::with_capacity(seeds.len());
    let mut loss_sum = 0.0;
    for chunk in seeds.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk, depth, fanout, sample_seed)?;
        let out = model.predict(&batch)?;
        match (&batch.labels, data.target_stats) {
            (Labels::Classes(y), _) => {
                loss_sum += super::cross_entropy_loss(&out, y)? * chunk.len() as f64;
                for ((s, &t), p) in chunk.iter().zip(y).zip(argmax_rows(&out)) {
                    preds.push(Prediction { row: s.row, target: t as f64, predicted: p as f64 });
                }
            }
            (Labels::Values(y), Some((mean, std))) => {
                for ((s, &t), &z) in chunk.iter().zip(y).zip(out.data()) {
                    let zt = (t - mean) / std;
                    loss_sum += (z - zt) * (z - zt);
                    preds.push(Prediction { row: s.row, target: t, predicted: mean + std * z });
                }
            }
            (Labels::Values(_), None) => return Err(usage!("regression data without target statistics")),
        }
    }
    let y: Vec<f64> = preds.iter().map(|p| p.target).collect();
    let y_hat: Vec<f64> = preds.iter().map(|p| p.predicted).collect();
    let metric = match data.target_stats {
        None => accuracy(&y_hat.iter().map(|&v| v as usize).collect::<Vec<_>>(), &y.iter().map(|&v| v as usize).collect::<Vec<_>>())?,
        Some((mean, _)) => nrmse(&y, &y_hat, mean)?,
    };
    Ok((loss_sum / seeds.len() as f64, metric, preds))
}

/// Trains a fresh `kind` model on `data` under `cfg`. `stop(step)` is polled
/// before every step; returning true ends the run early after a final evaluation.
pub fn train_loop(data: &TaskData, kind: Assembly, cfg: &TrainConfig, stop: &mut dyn FnMut(usize) -> bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(usage!("training needs non-empty train and validation splits"));
    }
    let spec = cfg.model_spec(kind, data.outputs());
    let mut model = Model::new(&spec, &data.graph.db.schema, &data.encoders, data.spec.target_relation, cfg.seed)?;
    let depth = spec.layers.len();
    let fanout = cfg
        .fanout
        .map(|cap| Fanout::uniform(depth, data.graph.num_edge_types(), cap))
        .or_else(|| data.spec.fanout.clone());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut adam = AdamState::new(&model.store);
    let n_train = data.train.len();
    let b = batch_size(cfg.batch_scale, n_train).min(n_train);
    let mut record = RunRecord::new(kind, cfg, data);
    let mut best: Option<(f64, Vec<crate::tensor::Tensor>, Vec<Prediction>)> = None;
    let mut window = (0.0, 0usize);

    let mut step = 0;
    while step < cfg.steps {
        if stop(step) {
            record.stopped_early = true;
            break;
        }
        let mut idx = rand::seq::index::sample(&mut batch_rng, n_train, b).into_vec();
        idx.sort_unstable();
        let seeds: Vec<NodeRef> = idx.into_iter().map(|i| data.train[i]).collect();
        let batch = data.batch(&seeds, depth, fanout.as_ref(), batch_rng.gen())?;

        model.store.zero_grad();
        let mut tape = Tape::new();
        let out = model.logits(&mut tape, &batch, true, &mut dropout_rng)?;
        let loss = match (&batch.labels, data.target_stats) {
            (Labels::Classes(y), _) => tape.cross_entropy(out, y)?,
            (Labels::Values(y), Some((mean, std))) => {
                let z: Vec<f64> = y.iter().map(|v| (v - mean) / std).collect();
                tape.mse(out, &z)?
            }
            (Labels::Values(_), None) => return Err(usage!("regression data without target statistics")),
        };
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {lv} with lr {}", cfg.lr) });
        }
        tape.backward(loss, &mut model.store)?;
        if cfg.lr > 0.0 {
            adam_step(&mut model.store, &mut adam, cfg.lr)?;
        }
        record.step_losses.push(lv);
        window = (window.0 + lv, window.1 + 1);
        step += 1;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            eval_point(&mut model, data, depth, fanout.as_ref(), cfg.seed, step, &mut window, &mut record, &mut best)?;
        }
    }
    record.steps_run = step;
    if record.stopped_early && record.evals.last().map(|e| e.step) != Some(step) {
        eval_point(&mut model, data, depth, fanout.as_ref(), cfg.seed, step, &mut window, &mut record, &mut best)?;
    }
    if let Some((_, params, preds)) = best {
        model.store.restore(&params)?;
        record.val_predictions = preds;
    }
    Ok(TrainOutcome { model, record })
}

#[allow(clippy::too_many_arguments)]
fn eval_point(
    model: &mut Model,
    data: &TaskData,
    depth: usize,
    fanout: Option<&Fanout>,
    sample_seed: u64,
    step: usize,
    window: &mut (f64, usize),
    record: &mut RunRecord,
    best: &mut Option<(f64, Vec<crate::tensor::Tensor>, Vec<Prediction>)>,
) -> Result<()> {
    let (val_loss, val_metric, preds) = evaluate(model, data, &data.val, depth, fanout, sample_seed)?;
    let train_loss = if window.1 > 0 { window.0 / window.1 as f64 } else { f64::NAN };
    *window = (0.0, 0);
    record.evals.push(EvalPoint { step, train_loss, val_loss, val_metric });
    if best.as_ref().is_none_or(|b| RunRecord::better(record.task, val_metric, b.0)) {
        *best = Some((val_metric, model.store.snapshot(), preds));
        record.best_step = Some(step);
        record.best_val = Some(val_metric);
    }
    Ok(())
}

/// Every trial of a search plus the best model.
#[derive(Debug)]
pub struct SearchOutcome {
    pub trials: Vec<RunRecord>,
    /// Index into `trials`; `None` when every trial failed.
    pub best: Option<usize>,
    pub best_model: Option<Model>,
}

/// Trial configurations of a search, drawn sequentially from one stream.
pub fn search_configs(space: &SearchSpace, base: &TrainConfig, seed: u64) -> Vec<TrainConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..space.trials)
        .map(|_| {
            let mut c = space.sample(&mut rng, base);
            c.seed = rng.gen();
            c
        })
        .collect()
}

/// Trains one model per sampled configuration. Diverged trials are kept with
/// their failure and never selected. `stop(trial, step)` is polled per step.
pub fn random_search(
    data: &TaskData,
    kind: Assembly,
    space: &SearchSpace,
    base: &TrainConfig,
    seed: u64,
    stop: &mut dyn FnMut(usize, usize) -> bool,
) -> Result<SearchOutcome> {
    if space.trials == 0 {
        return Err(usage!("search needs at least one trial"));
    }
    let configs = search_configs(space, base, seed);
    let mut results = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.into_iter().enumerate() {
        let r = train_loop(data, kind, &cfg, &mut |s| stop(i, s));
        match r {
            Err(e) if !matches!(e, Error::Diverged { .. }) => return Err(e),
            r => results.push((cfg, r)),
        }
    }
    collect_search(data, kind, results)
}

/// Assembles trial results in trial order. Diverged trials are recorded with
/// their failure; any other error is returned.
pub fn collect_search(data: &TaskData, kind: Assembly, results: Vec<(TrainConfig, Result<TrainOutcome>)>) -> Result<SearchOutcome> {
    let mut out = SearchOutcome { trials: Vec::new(), best: None, best_model: None };
    for (i, (cfg, r)) in results.into_iter().enumerate() {
        match r {
            Ok(TrainOutcome { model, record }) => {
                let better = match (record.best_val, out.best.and_then(|b| out.trials[b].best_val)) {
                    (Some(v), Some(cur)) => RunRecord::better(data.task(), v, cur),
                    (Some(_), None) => true,
                    (None, _) => false,
                };
                if better {
                    out.best = Some(i);
                    out.best_model = Some(model);
                }
                out.trials.push(record);
            }
            Err(Error::Diverged { step, detail }) => {
                let mut record = RunRecord::new(kind, &cfg, data);
                record.steps_run = step;
                record.failure = Some(format!("diverged at step {step}: {detail}"));
                out.trials.push(record);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
