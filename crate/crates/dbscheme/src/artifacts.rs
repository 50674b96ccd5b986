//! Run artifacts: config snapshot, metric log, predictions, checkpoint and
//! summary, plus the summary table export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dbscheme_core::relmodel::Value;
use dbscheme_core::sampler::TaskKind;
use dbscheme_core::scheme::{Model, ModelSpec};
use dbscheme_core::tensor::Tensor;
use dbscheme_core::train::{accuracy, nrmse, Prediction, RunRecord, SearchOutcome, SearchSpace, TaskData, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{csv_err, io_err, json_err, Error, Result};
use crate::ingest::Dataset;
use crate::manifest::TargetSpec;
use crate::pipeline::{ExperimentOptions, RunMode};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

pub fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join(format!("trial_{trial:02}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub config: TrainConfig,
    pub best_val: Option<f64>,
    pub best_step: Option<usize>,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub failure: Option<String>,
}

/// Deterministic summary of a run; wall-clock times live in `timing.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dataset: String,
    pub model: String,
    pub target: TargetSpec,
    pub metric: String,
    pub train_target_mean: Option<f64>,
    pub best_trial: Option<usize>,
    pub trials: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    pub trial_secs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub model: String,
    pub target: TargetSpec,
    pub split_seed: u64,
    pub strict_integrity: bool,
    pub search_seed: Option<u64>,
    pub space: Option<SearchSpace>,
    pub trials: Vec<TrainConfig>,
    /// Original class values by dense label index.
    pub classes: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Line-text checkpoint. After `trial`, `target_relation` and `spec` (one-line JSON)
/// header lines, each parameter is one tab-separated line:
/// `param  name  trainable(0|1)  dims(comma-separated)  hex of little-endian f64 bytes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub trial: usize,
    pub model_spec: ModelSpec,
    pub target_relation: usize,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn of(model: &Model, trial: usize) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| SavedParam { name: p.name.clone(), trainable: p.requires_grad, shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
            .collect();
        Self { trial, model_spec: model.network.spec.clone(), target_relation: model.network.target_relation, params }
    }

    /// Copies saved values into `model` by parameter name.
    pub fn restore(&self, model: &mut Model) -> Result<()> {
        if model.store.len() != self.params.len() {
            return Err(Error::Usage(format!("checkpoint has {} parameters, model has {}", self.params.len(), model.store.len())));
        }
        for p in &self.params {
            let id = model.store.id(&p.name).ok_or_else(|| Error::Usage(format!("model has no parameter `{}`", p.name)))?;
            let t = Tensor::new(p.shape.clone(), p.data.clone())?;
            let slot = &mut model.store.get_mut(id).value;
            if slot.shape() != t.shape() {
                return Err(Error::Usage(format!("parameter `{}` has shape {:?}, checkpoint {:?}", p.name, slot.shape(), t.shape())));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let spec = serde_json::to_string(&self.model_spec).expect("model spec serializes");
        let mut s = format!("trial\t{}\ntarget_relation\t{}\nspec\t{spec}\n", self.trial, self.target_relation);
        for p in &self.params {
            let dims: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            let bytes: Vec<u8> = p.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let _ = writeln!(s, "param\t{}\t{}\t{}\t{}", p.name, u8::from(p.trainable), dims.join(","), hex::encode(bytes));
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().enumerate();
        let mut header = |key: &str| -> std::result::Result<String, String> {
            let (i, l) = lines.next().ok_or_else(|| format!("missing `{key}` line"))?;
            l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')).map(str::to_owned).ok_or_else(|| format!("line {}: expected `{key}`", i + 1))
        };
        let trial = header("trial")?.parse().map_err(|e| format!("trial: {e}"))?;
        let target_relation = header("target_relation")?.parse().map_err(|e| format!("target_relation: {e}"))?;
        let model_spec = serde_json::from_str(&header("spec")?).map_err(|e| format!("spec: {e}"))?;
        let mut params = Vec::new();
        for (i, l) in lines {
            let bad = |what: &str| format!("line {}: {what}", i + 1);
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 || f[0] != "param" {
                return Err(bad("expected 5 tab-separated fields starting with `param`"));
            }
            let trainable = match f[2] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("trainable flag is not 0 or 1")),
            };
            let shape: Vec<usize> = if f[3].is_empty() { Vec::new() } else { f[3].split(',').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad shape"))? };
            let bytes = hex::decode(f[4]).map_err(|e| bad(&format!("bad hex: {e}")))?;
            if !bytes.len().is_multiple_of(8) {
                return Err(bad("value bytes are not a whole number of f64"));
            }
            let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            if data.len() != shape.iter().product::<usize>() {
                return Err(bad("value count does not match shape"));
            }
            params.push(SavedParam { name: f[1].to_owned(), trainable, shape, data });
        }
        Ok(Self { trial, model_spec, target_relation, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text).map_err(|detail| Error::Artifact { path: path.to_path_buf(), detail })
    }

    /// Rebuilds the saved model against a task prepared from the same dataset.
    pub fn into_model(&self, data: &TaskData) -> Result<Model> {
        let mut model = Model::new(&self.model_spec, &data.graph.db.schema, &data.encoders, self.target_relation, 0)?;
        self.restore(&mut model)?;
        Ok(model)
    }
}

pub fn read_run_config(dir: &Path) -> Result<RunConfig> {
    read_json(&dir.join(CONFIG_FILE))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(json_err(path))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Artifact { path: path.into(), detail: e.to_string() })?;
    serde_json::from_str(&text).map_err(json_err(path))
}

/// One line per training step and one per evaluation, tagged by trial.
pub fn metric_lines(trials: &[RunRecord]) -> String {
    let mut s = String::new();
    for (t, rec) in trials.iter().enumerate() {
        let mut evals = rec.evals.iter().peekable();
        for (i, loss) in rec.step_losses.iter().enumerate() {
            let step = i + 1;
            s += &json!({ "trial": t, "step": step, "train_loss": loss }).to_string();
            s.push('\n');
            while let Some(e) = evals.next_if(|e| e.step == step) {
                s += &json!({ "trial": t, "step": e.step, "eval": { "train_loss": e.train_loss, "val_loss": e.val_loss, "val_metric": e.val_metric } }).to_string();
                s.push('\n');
            }
        }
        if let Some(f) = &rec.failure {
            s += &json!({ "trial": t, "failure": f }).to_string();
            s.push('\n');
        }
    }
    s
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["row", "target", "predicted"]).map_err(csv_err(path))?;
    for p in preds {
        w.write_record([p.row.to_string(), format!("{:?}", p.target), format!("{:?}", p.predicted)]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    if !path.is_file() {
        return Err(Error::Artifact { path: path.into(), detail: "missing prediction dump".into() });
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Artifact { path: path.into(), detail: format!("short record {rec:?}") });
        let bad = |e: String| Error::Artifact { path: path.into(), detail: e };
        out.push(Prediction {
            row: field(0)?.parse().map_err(|e| bad(format!("{e}")))?,
            target: field(1)?.parse().map_err(|e| bad(format!("{e}")))?,
            predicted: field(2)?.parse().map_err(|e| bad(format!("{e}")))?,
        });
    }
    Ok(out)
}

/// Writes the full artifact for `outcome` into `out` and returns its summary.
pub fn write_artifact(out: &Path, ds: &Dataset, target: &TargetSpec, data: &TaskData, opts: &ExperimentOptions, outcome: &SearchOutcome, timing: &Timing) -> Result<Summary> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (search_seed, space) = match &opts.mode {
        RunMode::Train(_) => (None, None),
        RunMode::Search { space, seed, .. } => (Some(*seed), Some(space.clone())),
    };
    let config = RunConfig {
        dataset: ds.name.clone(),
        model: opts.model.name().into(),
        target: target.clone(),
        split_seed: opts.split_seed,
        strict_integrity: opts.strict_integrity,
        search_seed,
        space,
        trials: outcome.trials.iter().map(|t| t.config.clone()).collect(),
        classes: data.labels.classes.clone(),
    };
    write_json(&out.join(CONFIG_FILE), &config)?;
    let metrics = out.join(METRICS_FILE);
    fs::write(&metrics, metric_lines(&outcome.trials)).map_err(io_err(&metrics))?;
    for (i, rec) in outcome.trials.iter().enumerate() {
        let dir = trial_dir(out, i);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        if rec.failure.is_none() {
            write_predictions(&dir.join(PREDICTIONS_FILE), &rec.val_predictions)?;
        }
    }
    if let (Some(b), Some(model)) = (outcome.best, &outcome.best_model) {
        Checkpoint::of(model, b).save(&out.join(CHECKPOINT_FILE))?;
    }
    let summary = Summary {
        dataset: ds.name.clone(),
        model: opts.model.name().into(),
        target: target.clone(),
        metric: dbscheme_core::train::metric_name(data.task()),
        train_target_mean: data.target_stats.map(|s| s.0),
        best_trial: outcome.best,
        trials: outcome
            .trials
            .iter()
            .enumerate()
            .map(|(i, r)| TrialSummary {
                trial: i,
                config: r.config.clone(),
                best_val: r.best_val,
                best_step: r.best_step,
                steps_run: r.steps_run,
                stopped_early: r.stopped_early,
                failure: r.failure.clone(),
            })
            .collect(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    write_json(&out.join(TIMING_FILE), timing)?;
    Ok(summary)
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    read_json(&dir.join(SUMMARY_FILE))
}

/// Metric of a prediction dump: accuracy over dense class indices, or NRMSE
/// against the training-target mean.
pub fn metric_from_predictions(metric: &str, preds: &[Prediction], train_target_mean: Option<f64>) -> Result<f64> {
    let y: Vec<f64> = preds.iter().map(|p| p.target).collect();
    let y_hat: Vec<f64> = preds.iter().map(|p| p.predicted).collect();
    Ok(match metric {
        "accuracy" => accuracy(&y_hat.iter().map(|&v| v as usize).collect::<Vec<_>>(), &y.iter().map(|&v| v as usize).collect::<Vec<_>>())?,
        "nrmse" => nrmse(&y, &y_hat, train_target_mean.ok_or_else(|| Error::Usage("nrmse needs the training-target mean".into()))?)?,
        other => return Err(Error::Usage(format!("unknown metric `{other}`"))),
    })
}

/// One row per trial with the metric recomputed from its prediction dump;
/// the best trial is marked with `*`.
pub fn export_metrics(dir: &Path) -> Result<String> {
    let summary = read_summary(dir)?;
    let task = if summary.metric == "nrmse" { TaskKind::Regression } else { TaskKind::Classification };
    let mut s = String::new();
    let _ = writeln!(s, "{:<6}{:<20}{:<10}{:>12}{:>8}  best", "trial", "model", "metric", "value", "steps");
    for t in &summary.trials {
        let value = match (&t.failure, t.best_val) {
            (Some(f), _) => format!("failed: {f}"),
            (None, None) => return Err(Error::Artifact { path: dir.into(), detail: format!("trial {} has no validation result", t.trial) }),
            (None, Some(v)) => {
                let preds = read_predictions(&trial_dir(dir, t.trial).join(PREDICTIONS_FILE))?;
                let m = metric_from_predictions(&summary.metric, &preds, summary.train_target_mean)?;
                if (m - v).abs() > 1e-9 * v.abs().max(1.0) {
                    return Err(Error::Artifact { path: dir.into(), detail: format!("trial {} records {v} but its predictions give {m}", t.trial) });
                }
                format!("{m:.6}")
            }
        };
        let mark = if summary.best_trial == Some(t.trial) { "*" } else { "" };
        let _ = writeln!(s, "{:<6}{:<20}{:<10}{:>12}{:>8}  {mark}", t.trial, summary.model, summary.metric, value, t.steps_run);
    }
    if let Some(b) = summary.best_trial {
        let ok = summary.trials.iter().filter_map(|t| t.best_val).all(|v| !RunRecord::better(task, v, summary.trials[b].best_val.unwrap_or(v)));
        if !ok {
            return Err(Error::Artifact { path: dir.into(), detail: "marked best trial is not the best".into() });
        }
    }
    Ok(s)
}
