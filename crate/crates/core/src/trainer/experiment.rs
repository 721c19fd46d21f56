use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::history::{Signal, TrainHistory};
use super::optim::TrainConfig;
use super::run::{MetricObserver, Observer, Trainer};
use crate::error::{Error, Result};
use crate::manifest::{sha256_hex, RunManifest};
use crate::metrics::{
    pca_project, write_metric_csv, write_pca_csv, EmbeddingSnapshot, MetricRecord,
};
use crate::model::{save_checkpoint, ModelConfig, ModelParams};
use crate::taskgen::{DatasetConfig, FactDataset};

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Compute toy metrics on unembedding columns instead of embedding rows.
    pub metrics_on_unembedding: bool,
    /// Components kept in the PCA exports.
    pub pca_components: usize,
}

impl RunConfig {
    /// Uses `seed` for both the dataset and the model/shuffle streams.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.pca_components == 0 {
            return Err(Error::Config("pca_components must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies a dotted-key override such as `train.lr=3e-4`. The value is
    /// parsed as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut tree = self.to_json_value();
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *node = value;
        *self =
            serde_json::from_value(tree).map_err(|e| Error::json(format!("override {key}"), e))?;
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics_on_unembedding: false,
            pca_components: 2,
        }
    }
}

/// Results of a run written to disk.
pub struct RunOutput {
    pub history: TrainHistory,
    pub metrics: Vec<MetricRecord>,
    pub params: ModelParams<f32>,
    pub manifest: RunManifest,
}

/// Trains per `config` and writes `dataset.json`, `history.csv`,
/// `metrics.csv`, first/last PCA exports, the final checkpoint and
/// `manifest.json` into `out`.
///
/// On a numerical failure the history up to that point and a manifest with
/// status `diverged` are still written before the error is returned.
pub fn run_experiment(
    config: &RunConfig,
    out: &Path,
    extra: &mut [&mut dyn Observer<f32>],
) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = FactDataset::generate(&config.dataset)?;
    let dataset_json = dataset.to_json()?;
    let dataset_path = out.join("dataset.json");
    std::fs::write(&dataset_path, &dataset_json).map_err(|e| Error::io(&dataset_path, e))?;

    let mut manifest = RunManifest::new("train", config.to_json_value());
    manifest.seeds.insert("dataset".into(), config.dataset.seed);
    manifest.seeds.insert("train".into(), config.train.seed);
    manifest
        .inputs
        .insert("dataset".into(), sha256_hex(dataset_json.as_bytes()));
    manifest.outputs.push("dataset.json".into());

    let mut metrics = MetricObserver {
        records: Vec::new(),
        use_unembedding: config.metrics_on_unembedding,
    };
    let mut trainer = Trainer::<f32>::new(&config.model, &config.train, &dataset)?;
    let first = snapshot(trainer.params(), &dataset, 0, config.metrics_on_unembedding);
    let result = {
        let mut all = Fanout {
            first: &mut metrics,
            rest: extra,
        };
        trainer.run(&mut [&mut all])
    };

    trainer.history().write_csv(&out.join("history.csv"))?;
    manifest.outputs.push("history.csv".into());
    write_metric_csv(&out.join("metrics.csv"), "step", &metrics.records)?;
    manifest.outputs.push("metrics.csv".into());

    if let Err(e) = result {
        manifest.status = format!("diverged: {e}");
        manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
        manifest.write(out)?;
        return Err(e);
    }

    let k = config.pca_components.min(dataset.world.num_entities());
    let last = snapshot(
        trainer.params(),
        &dataset,
        trainer.step(),
        config.metrics_on_unembedding,
    );
    for snap in [&first, &last] {
        let name = format!("pca_step_{:06}.csv", snap.index);
        if manifest.outputs.contains(&name) {
            continue;
        }
        let pca = pca_project(snap.matrix.view(), k.min(snap.matrix.ncols()))?;
        write_pca_csv(&out.join(&name), &pca)?;
        manifest.outputs.push(name);
    }
    save_checkpoint(
        trainer.params(),
        config.train.seed,
        trainer.step(),
        &out.join("checkpoint"),
    )?;
    manifest.outputs.push("checkpoint".into());

    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(out)?;
    let (params, history) = trainer.into_parts();
    Ok(RunOutput {
        history,
        metrics: metrics.records,
        params,
        manifest,
    })
}

struct Fanout<'a, 'b> {
    first: &'a mut MetricObserver,
    rest: &'a mut [&'b mut dyn Observer<f32>],
}

impl Observer<f32> for Fanout<'_, '_> {
    fn on_eval(&mut self, r: &super::history::EvalRecord) -> std::ops::ControlFlow<()> {
        let mut flow = Observer::<f32>::on_eval(self.first, r);
        for o in self.rest.iter_mut() {
            if o.on_eval(r).is_break() {
                flow = std::ops::ControlFlow::Break(());
            }
        }
        flow
    }

    fn on_snapshot(&mut self, s: &super::run::Snapshot<'_, f32>) -> Result<()> {
        self.first.on_snapshot(s)?;
        self.rest.iter_mut().try_for_each(|o| o.on_snapshot(s))
    }
}

fn snapshot(
    params: &ModelParams<f32>,
    ds: &FactDataset,
    step: u64,
    unembedding: bool,
) -> EmbeddingSnapshot<f32> {
    let n = ds.world.num_entities();
    if unembedding {
        EmbeddingSnapshot::toy_unembedding(params, n, step)
    } else {
        EmbeddingSnapshot::toy_embedding(params, n, step)
    }
}

/// Configuration field varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Entities,
    Relations,
    CompOod,
    AnaOod,
    WeightDecay,
    BatchSize,
    Lr,
    DModel,
    NLayers,
    Sparsity,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "entities" => Self::Entities,
            "relations" => Self::Relations,
            "comp_ood" => Self::CompOod,
            "ana_ood" => Self::AnaOod,
            "weight_decay" => Self::WeightDecay,
            "batch_size" => Self::BatchSize,
            "lr" => Self::Lr,
            "d_model" => Self::DModel,
            "n_layers" => Self::NLayers,
            "sparsity" => Self::Sparsity,
            other => return Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        })
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Entities => "entities",
            Self::Relations => "relations",
            Self::CompOod => "comp_ood",
            Self::AnaOod => "ana_ood",
            Self::WeightDecay => "weight_decay",
            Self::BatchSize => "batch_size",
            Self::Lr => "lr",
            Self::DModel => "d_model",
            Self::NLayers => "n_layers",
            Self::Sparsity => "sparsity",
        }
    }

    pub fn apply(self, config: &mut RunConfig, value: &str) -> Result<()> {
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{}: {value:?} is not an integer", self.name())))
        };
        let float = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: {value:?} is not a number", self.name())))
        };
        match self {
            Self::Entities => config.dataset.entities = int()?,
            Self::Relations => config.dataset.relations = int()?,
            Self::CompOod => config.dataset.comp_ood = float()?,
            Self::AnaOod => config.dataset.ana_ood = float()?,
            Self::WeightDecay => config.train.weight_decay = float()?,
            Self::BatchSize => config.train.batch_size = int()?,
            Self::Lr => config.train.lr = float()?,
            Self::DModel => config.model.d_model = int()?,
            Self::NLayers => config.model.n_layers = int()?,
            Self::Sparsity => config.dataset.sparsity = float()?,
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub config: RunConfig,
}

/// Expands `values x seeds` into run directories `<axis>=<value>/seed_<k>`.
pub fn plan_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: u64,
    out: &Path,
) -> Result<Vec<SweepRun>> {
    if values.is_empty() || seeds == 0 {
        return Err(Error::Config(
            "a sweep needs at least one value and one seed".into(),
        ));
    }
    let mut runs = Vec::new();
    for value in values {
        for seed in 0..seeds {
            let mut config = base.clone().with_seed(seed);
            axis.apply(&mut config, value)?;
            config.validate()?;
            runs.push(SweepRun {
                value: value.clone(),
                seed,
                dir: out
                    .join(format!("{}={value}", axis.name()))
                    .join(format!("seed_{seed}")),
                config,
            });
        }
    }
    Ok(runs)
}

pub const SUMMARY_HEADER: &str =
    "axis,value,seed,steps,train_acc,comp_ood_acc,ana_ood_acc,step_train_099,step_comp_09,step_ana_09,status";

/// One row of `summary.csv`.
pub fn summary_row(axis: SweepAxis, run: &SweepRun, result: &Result<TrainHistory>) -> String {
    let fmt = |s: Option<u64>| s.map(|v| v.to_string()).unwrap_or_default();
    match result {
        Ok(h) => {
            let last = h.last().expect("history has the initial eval");
            format!(
                "{},{},{},{},{},{},{},{},{},{},ok",
                axis.name(),
                run.value,
                run.seed,
                last.step,
                last.train_acc,
                last.comp_ood_acc,
                last.ana_ood_acc,
                fmt(h.first_reaching(Signal::Train, 0.99)),
                fmt(h.first_reaching(Signal::CompOod, 0.9)),
                fmt(h.first_reaching(Signal::AnaOod, 0.9)),
            )
        }
        Err(e) => format!(
            "{},{},{},,,,,,,,\"{}\"",
            axis.name(),
            run.value,
            run.seed,
            e.to_string().replace('"', "'")
        ),
    }
}

/// Runs every planned member on a pool of `jobs` threads and writes
/// `summary.csv` under `out`. Failed members are reported in the summary.
pub fn run_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: u64,
    jobs: usize,
    out: &Path,
) -> Result<Vec<(SweepRun, Result<TrainHistory>)>> {
    use rayon::prelude::*;

    let runs = plan_sweep(base, axis, values, seeds, out)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<TrainHistory>> = pool.install(|| {
        runs.par_iter()
            .map(|r| run_experiment(&r.config, &r.dir, &mut []).map(|o| o.history))
            .collect()
    });
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for (run, res) in runs.iter().zip(&results) {
        summary.push_str(&summary_row(axis, run, res));
        summary.push('\n');
    }
    let path = out.join("summary.csv");
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(runs.into_iter().zip(results).collect())
}
