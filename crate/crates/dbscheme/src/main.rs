use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dbscheme::artifacts::export_metrics;
use dbscheme::fixtures::{make_fixture, FixtureKind};
use dbscheme::ingest::{ingest_dataset, Dataset};
use dbscheme::manifest::TargetSpec;
use dbscheme::pipeline::{edge_export, run_experiment, ExperimentOptions, RunMode};
use dbscheme::{Error, Result};
use dbscheme_core::embed::Variant;
use dbscheme_core::hypergraph::{build_hypergraph, graph_stats, IntegrityMode};
use dbscheme_core::sampler::TaskKind;
use dbscheme_core::scheme::Assembly;
use dbscheme_core::train::{FixedConfig, SearchSpace, TrainConfig, DEFAULT_STEPS};

#[derive(Parser)]
#[command(name = "dbscheme", version, about = "Deep learning directly on relational databases")]
struct Cli {
    /// Seed for fixtures, splits, initialization and search.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output location; its meaning depends on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fail on primary- or foreign-key violations instead of dropping bad edges.
    #[arg(long, global = true)]
    strict_integrity: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Dbformer,
    Dbgnn,
    DbTabtransformer,
    TabularFnn,
}

impl From<ModelArg> for Assembly {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Dbformer => Assembly::Dbformer,
            ModelArg::Dbgnn => Assembly::Dbgnn,
            ModelArg::DbTabtransformer => Assembly::DbTabtransformer,
            ModelArg::TabularFnn => Assembly::TabularFnn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Base,
    Text,
    Time,
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Text => Variant::Text,
            VariantArg::Time => Variant::Time,
            VariantArg::Full => Variant::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigArg {
    Large,
    Medium,
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Regression,
}

#[derive(Args)]
struct TargetArgs {
    /// Target as `relation.attribute`; defaults to the manifest target.
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_enum, default_value_t = TaskArg::Classification)]
    task: TaskArg,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory or SQLite file.
    dataset: PathBuf,
    #[arg(long, value_enum)]
    model: ModelArg,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    steps: Option<usize>,
    /// Per-trial wall-clock cap in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print relations, column types, keys and the integrity report.
    InspectSchema { dataset: PathBuf },
    /// Build the graph, print its statistics and optionally export edges to `--out`.
    BuildGraph {
        dataset: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Generate a synthetic dataset directory with its ground-truth rule.
    MakeFixture {
        #[arg(value_enum)]
        kind: FixtureKind,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Fixed reference configuration; other flags override it.
        #[arg(long, value_enum)]
        config: Option<ConfigArg>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_scale: Option<f64>,
    },
    /// Random hyperparameter search.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 16)]
        trials: usize,
        /// Trials trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print one metric row per trial of a run directory.
    Export { run_dir: PathBuf },
}

fn load(path: &Path) -> Result<Dataset> {
    let ds = ingest_dataset(path)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let lines = ds.integrity_lines();
    if lines.is_empty() {
        eprintln!("integrity: ok");
    } else {
        eprintln!("integrity: {} violation(s)", lines.len());
        for l in lines {
            eprintln!("  {l}");
        }
    }
    Ok(ds)
}

fn resolve_target(ds: &Dataset, t: &TargetArgs) -> Result<TargetSpec> {
    let task = match t.task {
        TaskArg::Classification => TaskKind::Classification,
        TaskArg::Regression => TaskKind::Regression,
    };
    match (&t.target, &ds.target) {
        (Some(s), _) => TargetSpec::parse(s, task),
        (None, Some(m)) => Ok(m.clone()),
        (None, None) => Err(Error::Usage("no --target given and the manifest declares none".into())),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InspectSchema { dataset } => {
            let ds = load(&dataset)?;
            println!("dataset {}", ds.name);
            for (rel, table) in ds.db.schema.relations.iter().zip(&ds.db.tables) {
                println!("{} ({} rows) primary key {:?}", rel.name, table.len(), rel.pk_attrs);
                for a in &rel.attributes {
                    println!("  {:<24}{:<12}{:?}", a.name, format!("{:?}", a.raw), a.semantic);
                }
                for fk in &rel.fks {
                    println!("  foreign key {:?} -> {}", fk.source_attrs, fk.target_relation);
                }
            }
            if let Some(t) = &ds.target {
                println!("target {}.{} ({:?})", t.relation, t.attribute, t.task);
            }
        }
        Command::BuildGraph { dataset, target } => {
            let ds = load(&dataset)?;
            let mode = if cli.strict_integrity { IntegrityMode::Strict } else { IntegrityMode::Drop };
            let (g, warnings) = build_hypergraph(ds.db.clone(), mode)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            let t = resolve_target(&ds, &target)?;
            let ti = ds.db.schema.relation_index(&t.relation).ok_or_else(|| Error::Usage(format!("unknown relation `{}`", t.relation)))?;
            let stats = graph_stats(&g, ti)?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            if let Some(out) = cli.out {
                let text = serde_json::to_string(&edge_export(&g)).expect("edges serialize");
                fs::write(&out, text + "\n").map_err(dbscheme::error::io_err(&out))?;
                eprintln!("edges written to {}", out.display());
            }
        }
        Command::MakeFixture { kind, size } => {
            let name = kind.to_possible_value().expect("named kind").get_name().to_string();
            let out = cli.out.unwrap_or_else(|| PathBuf::from(&name));
            let f = make_fixture(kind, size.unwrap_or(kind.default_size()), cli.seed, &out)?;
            eprintln!("{} relations written to {}", f.manifest.relations.len(), out.display());
        }
        Command::Train { run, config, lr, batch_scale } => {
            let mut cfg = match config {
                Some(ConfigArg::Large) => FixedConfig::Large.config(),
                Some(ConfigArg::Medium) => FixedConfig::Medium.config(),
                Some(ConfigArg::Small) => FixedConfig::Small.config(),
                None => TrainConfig::default(),
            };
            cfg.seed = cli.seed;
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = batch_scale {
                cfg.batch_scale = v;
            }
            apply_run_args(&mut cfg, &run);
            experiment(&run, RunMode::Train(cfg), 1, cli.seed, cli.strict_integrity, cli.out)?;
        }
        Command::Search { run, trials, jobs } => {
            let mut base = TrainConfig::default();
            apply_run_args(&mut base, &run);
            let space = SearchSpace { trials, ..SearchSpace::default() };
            experiment(&run, RunMode::Search { space, base, seed: cli.seed }, jobs, cli.seed, cli.strict_integrity, cli.out)?;
        }
        Command::Export { run_dir } => print!("{}", export_metrics(&run_dir)?),
    }
    Ok(())
}

fn apply_run_args(cfg: &mut TrainConfig, run: &RunArgs) {
    if let Some(v) = run.variant {
        cfg.variant = v.into();
    }
    cfg.steps = run.steps.unwrap_or(if cfg.steps == 0 { DEFAULT_STEPS } else { cfg.steps });
}

fn experiment(run: &RunArgs, mode: RunMode, jobs: usize, seed: u64, strict: bool, out: Option<PathBuf>) -> Result<()> {
    let ds = load(&run.dataset)?;
    let target = resolve_target(&ds, &run.target)?;
    let model: Assembly = run.model.into();
    let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}_{}", ds.name, model.name())));
    let opts = ExperimentOptions { model, mode, strict_integrity: strict, split_seed: seed, time_limit_secs: run.time_limit, jobs };
    let summary = run_experiment(&ds, &target, &opts, &out)?;
    eprintln!("run written to {}", out.display());
    print!("{}", export_metrics(&out)?);
    if summary.best_trial.is_none() {
        return Err(Error::Usage("every trial diverged".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
