use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use analogy_core::llmprobe::{
    gen_prompt as make_prompt, layer_energy_curve, layer_pca, load_dump, PromptSpec, PromptVariant,
    DUMP_MANIFEST,
};
use analogy_core::manifest::{sha256_file, sha256_hex, RunManifest, RUN_MANIFEST_FORMAT};
use analogy_core::metrics::{
    pca_project, toy_metrics, write_metric_csv, write_pca_csv, EmbeddingSnapshot,
};
use analogy_core::model::load_checkpoint;
use analogy_core::taskgen::{DatasetConfig, FactDataset, FunctorSampling};
use analogy_core::trainer::{
    plan_sweep, run_experiment, run_sweep, EvalRecord, Observer, RunConfig, SweepAxis,
};
use analogy_core::Error;
use serde_json::{json, Value};

use crate::error::{usage, CliError, CliResult};
use crate::output::{FileSet, OutputDir};
use crate::plot::{build_panel, panel_names, read_curves, render_svg};
use crate::{
    AnalyzeArgs, FunctorArg, GenArgs, GenPromptArgs, PlotArgs, ProbeAnalyzeArgs, RunArgs,
    SweepArgs, TrainArgs,
};

fn require_file(path: &Path, role: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!(
            "{role} {} does not exist or is not a file",
            path.display()
        )))
    }
}

fn require_dir(path: &Path, role: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!(
            "{role} {} does not exist or is not a directory",
            path.display()
        )))
    }
}

/// Reads a config file, unwrapping the `config` section of a run manifest.
fn read_config_json(path: &Path) -> CliResult<Value> {
    require_file(path, "config")?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("malformed config {}: {e}", path.display())))?;
    if value.get("format").and_then(Value::as_str) == Some(RUN_MANIFEST_FORMAT) {
        return Ok(value.get("config").cloned().unwrap_or(Value::Null));
    }
    Ok(value)
}

fn load_run_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        None => RunConfig::default(),
        Some(path) => serde_json::from_value(read_config_json(path)?)
            .map_err(|e| usage(format!("malformed config {}: {e}", path.display())))?,
    };
    for o in &args.overrides {
        cfg.apply_override(o).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(steps) = args.max_steps {
        cfg.train.max_steps = Some(steps);
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

pub fn gen(a: GenArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut cfg = match &a.config {
        None => DatasetConfig::default(),
        Some(path) => {
            let mut v = read_config_json(path)?;
            if let Some(d) = v.get("dataset") {
                v = d.clone();
            }
            serde_json::from_value(v)
                .map_err(|e| usage(format!("malformed config {}: {e}", path.display())))?
        }
    };
    if let Some(v) = a.entities {
        cfg.entities = v;
    }
    if let Some(v) = a.relations {
        cfg.relations = v;
    }
    if let Some(v) = a.comp_ood {
        cfg.comp_ood = v;
    }
    if let Some(v) = a.ana_ood {
        cfg.ana_ood = v;
    }
    if let Some(v) = a.sparsity {
        cfg.sparsity = v;
    }
    if a.include_cycles {
        cfg.include_cycles = true;
    }
    if let Some(f) = a.functor {
        cfg.functor = match f {
            FunctorArg::Uniform => FunctorSampling::Uniform,
            FunctorArg::IdentityOffset => FunctorSampling::IdentityOffset,
        };
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let ds = FactDataset::generate(&cfg)?;
    let text = ds.to_json()?;
    eprintln!(
        "generated {} entities, vocabulary {}, {} training / {} compositional OOD / {} analogical OOD facts",
        ds.world.num_entities(),
        ds.vocab.size(),
        ds.train.len(),
        ds.comp_ood.len(),
        ds.ana_ood.len()
    );
    let Some(out) = a.out else {
        print!("{text}");
        return Ok(());
    };
    let out = OutputDir::open(&out)?;
    let path = out.join("dataset.json");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    let mut manifest = RunManifest::new(
        "gen",
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    manifest.seeds.insert("dataset".into(), cfg.seed);
    manifest
        .inputs
        .insert("dataset".into(), sha256_hex(text.as_bytes()));
    manifest.outputs.push("dataset.json".into());
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(out.path())?;
    out.commit();
    Ok(())
}

struct Progress;

impl Observer<f32> for Progress {
    fn on_eval(&mut self, r: &EvalRecord) -> ControlFlow<()> {
        eprintln!(
            "step {:>7}  loss {:.4}  train {:.3}  comp_ood {:.3}  ana_ood {:.3}",
            r.step, r.loss, r.train_acc, r.comp_ood_acc, r.ana_ood_acc
        );
        ControlFlow::Continue(())
    }
}

/// Keeps the directory when training diverged, so the partial history and
/// the `diverged` manifest survive; rolls back on every other failure.
fn finish<T>(out: OutputDir, result: analogy_core::Result<T>) -> CliResult<T> {
    match result {
        Ok(v) => {
            out.commit();
            Ok(v)
        }
        Err(e) if e.is_numerical() => {
            out.commit();
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_run_config(&a.run)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    let out = OutputDir::open(&a.out)?;
    let mut progress = Progress;
    let mut observers: Vec<&mut dyn Observer<f32>> = Vec::new();
    if !a.quiet {
        observers.push(&mut progress);
    }
    let result = run_experiment(&cfg, out.path(), &mut observers);
    let run = finish(out, result)?;
    if let Some(last) = run.history.last() {
        eprintln!(
            "finished at step {}: train {:.3}, compositional OOD {:.3}, analogical OOD {:.3}",
            last.step, last.train_acc, last.comp_ood_acc, last.ana_ood_acc
        );
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = load_run_config(&a.run)?;
    let axis: SweepAxis = a.axis.parse().map_err(|e: Error| usage(e.to_string()))?;
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let plan = plan_sweep(&cfg, axis, &a.values, a.seeds, &a.out)?;
    let out = OutputDir::open(&a.out)?;
    eprintln!(
        "sweep over {}: {} runs on {} worker(s)",
        axis.name(),
        plan.len(),
        a.jobs
    );
    let results = run_sweep(&cfg, axis, &a.values, a.seeds, a.jobs, out.path())?;

    let mut manifest = RunManifest::new(
        "sweep",
        json!({
            "base": cfg.to_json_value(),
            "axis": axis.name(),
            "values": a.values,
            "seeds": a.seeds,
            "jobs": a.jobs,
        }),
    );
    manifest.seeds.insert("count".into(), a.seeds);
    manifest.outputs.push("summary.csv".into());
    let mut first_error: Option<Error> = None;
    let mut failed = 0;
    for (run, result) in results {
        let rel = run.dir.strip_prefix(out.path()).unwrap_or(&run.dir);
        manifest.outputs.push(rel.display().to_string());
        if let Err(e) = result {
            eprintln!("run {} failed: {e}", rel.display());
            failed += 1;
            first_error.get_or_insert(e);
        }
    }
    if failed > 0 {
        manifest.status = format!("{failed} of {} runs failed", plan.len());
    }
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(out.path())?;
    out.commit();
    match first_error {
        None => Ok(()),
        Some(e) => Err(e.into()),
    }
}

pub fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    let started = Instant::now();
    require_dir(&a.checkpoint, "checkpoint")?;
    require_file(&a.checkpoint.join("manifest.json"), "checkpoint manifest")?;
    require_file(&a.dataset, "dataset")?;
    if a.components == 0 {
        return Err(usage("--components must be at least 1"));
    }
    let ds = FactDataset::load(&a.dataset)?;
    let (params, ck) = load_checkpoint::<f32>(&a.checkpoint)?;
    if params.config.vocab_size != ds.vocab.size() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary {} does not match the dataset vocabulary {}",
            params.config.vocab_size,
            ds.vocab.size()
        ))
        .into());
    }
    let n = ds.world.num_entities();
    let record = toy_metrics(&params, &ds, ck.step, a.unembedding)?;
    let snap = if a.unembedding {
        EmbeddingSnapshot::toy_unembedding(&params, n, ck.step)
    } else {
        EmbeddingSnapshot::toy_embedding(&params, n, ck.step)
    };
    let pca = pca_project(
        snap.matrix.view(),
        a.components.min(n).min(snap.matrix.ncols()),
    )?;

    let out = OutputDir::open(&a.out)?;
    let result = (|| -> analogy_core::Result<()> {
        write_metric_csv(
            &out.join("metrics.csv"),
            "step",
            std::slice::from_ref(&record),
        )?;
        write_pca_csv(&out.join("pca.csv"), &pca)?;
        let mut manifest = RunManifest::new(
            "analyze",
            json!({
                "checkpoint": a.checkpoint,
                "dataset": a.dataset,
                "unembedding": a.unembedding,
                "components": a.components,
            }),
        );
        manifest.seeds.insert("train".into(), ck.seed);
        manifest
            .inputs
            .insert("dataset".into(), sha256_file(&a.dataset)?);
        manifest.inputs.insert(
            "checkpoint".into(),
            sha256_file(&a.checkpoint.join("manifest.json"))?,
        );
        manifest.outputs = vec!["metrics.csv".into(), "pca.csv".into()];
        manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
        manifest.write(out.path())
    })();
    finish(out, result)?;
    eprintln!(
        "step {}: energy {:.6}, attention {:.4}, parallelism {:.4}/{:.4}, probability {:.4}/{:.4}",
        record.index,
        record.energy,
        record.attention,
        record.parallelism_id,
        record.parallelism_ood,
        record.prob_id,
        record.prob_ood
    );
    Ok(())
}

pub fn gen_prompt(a: GenPromptArgs) -> CliResult<()> {
    let variant = PromptVariant::try_from(a.variant).map_err(|e| usage(e.to_string()))?;
    let spec = make_prompt(variant, a.entities, a.seed)?;
    match a.out {
        None => print!("{}", spec.to_json()),
        Some(path) => std::fs::write(&path, spec.to_json())
            .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?,
    }
    Ok(())
}

pub fn probe_analyze(a: ProbeAnalyzeArgs) -> CliResult<()> {
    let started = Instant::now();
    require_dir(&a.dump, "dump")?;
    if a.components == 0 {
        return Err(usage("--components must be at least 1"));
    }
    let dump = load_dump(&a.dump)?;
    let mut inputs = vec![(
        "dump".to_string(),
        sha256_file(&a.dump.join(DUMP_MANIFEST))?,
    )];
    if let Some(p) = &a.prompt {
        require_file(p, "prompt")?;
        let text = std::fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
        let spec: PromptSpec = serde_json::from_str(&text)
            .map_err(|e| CliError::Format(format!("{}: {e}", p.display())))?;
        dump.check_prompt(&spec)?;
        inputs.push(("prompt".into(), sha256_hex(text.as_bytes())));
    }
    let layers = dump.manifest.num_layers;
    if let Some(l) = a.pca_layers.iter().find(|&&l| l >= layers) {
        return Err(usage(format!(
            "--pca-layers {l} is out of range for a dump of {layers} layers"
        )));
    }
    let functor = dump.manifest.functor_map()?;
    let records = layer_energy_curve(&dump, &functor)?;

    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    require_dir(&parent, "output directory")?;
    let stem = a
        .out
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| usage(format!("output {} has no file name", a.out.display())))?
        .to_string();

    let mut files = FileSet::default();
    let mut outputs = Vec::new();
    write_metric_csv(&files.claim(a.out.clone()), "layer", &records)?;
    outputs.push(a.out.file_name().unwrap().to_string_lossy().into_owned());
    for &l in &a.pca_layers {
        let pca = layer_pca(&dump, l, a.components.min(dump.manifest.entity_count))?;
        let name = format!("{stem}_pca_layer_{l:03}.csv");
        write_pca_csv(&files.claim(parent.join(&name)), &pca)?;
        outputs.push(name);
    }
    let mut manifest = RunManifest::new(
        "probe analyze",
        json!({
            "dump": a.dump,
            "prompt": a.prompt,
            "pca_layers": a.pca_layers,
            "components": a.components,
            "model": dump.manifest.model,
        }),
    );
    manifest.inputs.extend(inputs);
    manifest.outputs = outputs;
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_json(
        &files.claim(parent.join(format!("{stem}.manifest.json"))),
        &manifest,
    )?;
    files.commit();

    let (first, last) = (&records[0], &records[records.len() - 1]);
    eprintln!(
        "{} layers: energy {:.6} -> {:.6}, logit-lens probability {:.4} -> {:.4}",
        records.len(),
        first.energy,
        last.energy,
        first.prob_id,
        last.prob_id
    );
    Ok(())
}

pub fn plot(a: PlotArgs) -> CliResult<()> {
    let started = Instant::now();
    let curves = a
        .input
        .iter()
        .map(|p| read_curves(p))
        .collect::<CliResult<Vec<_>>>()?;
    let kind = curves[0].kind;
    if let Some(i) = curves.iter().position(|c| c.kind != kind) {
        return Err(CliError::Format(format!(
            "{} does not have the same kind of columns as {}",
            a.input[i].display(),
            a.input[0].display()
        )));
    }
    let names: Vec<String> = if a.panels.is_empty() {
        panel_names(kind).into_iter().map(String::from).collect()
    } else {
        a.panels.clone()
    };
    let panels = names
        .iter()
        .map(|n| build_panel(n, &curves, a.log_x, a.title.as_deref()))
        .collect::<CliResult<Vec<_>>>()?;

    let out = OutputDir::open(&a.out)?;
    let mut manifest = RunManifest::new(
        "plot",
        json!({
            "inputs": a.input,
            "panels": names,
            "log_x": a.log_x,
            "title": a.title,
        }),
    );
    for (i, p) in a.input.iter().enumerate() {
        manifest
            .inputs
            .insert(format!("input_{i}"), sha256_file(p)?);
    }
    for (name, panel) in names.iter().zip(&panels) {
        let file = format!("{name}.svg");
        let path = out.join(&file);
        std::fs::write(&path, render_svg(panel)).map_err(|e| Error::io(&path, e))?;
        manifest.outputs.push(file);
    }
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(out.path())?;
    out.commit();
    Ok(())
}
