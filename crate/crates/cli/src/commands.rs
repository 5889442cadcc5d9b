//! Command implementations. Each writes its artifacts under a run directory
//! of the output root and finishes with a [`RunManifest`].

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use imfuse::config::{DownstreamConfig, RunConfig, TrainMode};
use imfuse::container::{Blob, Container, ContainerWriter, MANIFEST};
use imfuse::downstream::{ablation_tsv, evaluate, reports_tsv, train_downstream, DownstreamOutcome, EvalReport, Variant};
use imfuse::modality::ModalitySet;
use imfuse::model::load_params;
use imfuse::pretrain::{curve_tsv, pretrain, save_weights, PretrainOutcome, RunControl};
use imfuse::synthdata::{Dataset, Split, DATASET_FILE};
use imfuse::tokenizer::SampleInputs;
use imfuse::{DataShape, Error, Model32, Result};
use serde_json::json;

use crate::args::{Cli, Command};
use crate::manifest::RunManifest;
use crate::plot::plot_file;
use crate::settings::{dataset_dir, load_config, output_root};

pub const CONFUSION_KIND: &str = "imfuse-confusion";

fn not_found(path: impl Into<PathBuf>, msg: &str) -> Error {
    Error::io(path, std::io::Error::new(ErrorKind::NotFound, msg.to_string()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_dir(config: &RunConfig, name: &str) -> Result<PathBuf> {
    if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
        return Err(Error::config(format!("run name {name:?} must be a plain directory name")));
    }
    let dir = output_root(config).join(name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub dir: PathBuf,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn synth(config: &RunConfig) -> Result<SynthSummary> {
    config.validate()?;
    let dir = dataset_dir(config, &output_root(config));
    let ds = Dataset::generate(&config.data, config.seed)?;
    ds.write(&dir)?;
    Ok(SynthSummary {
        samples: ds.samples.len(),
        train: ds.splits.train.len(),
        val: ds.splits.val.len(),
        test: ds.splits.test.len(),
        dir,
    })
}

/// Dataset under the config's dataset directory with the model geometry it
/// implies.
pub fn load_dataset(config: &RunConfig) -> Result<(Dataset, DataShape)> {
    let dir = dataset_dir(config, &output_root(config));
    if !dir.join(DATASET_FILE).is_file() {
        return Err(not_found(dir, "no dataset here; run `imfuse synth` first"));
    }
    let ds = Dataset::load(&dir)?;
    let shape = DataShape { size: ds.config.size, patch: ds.config.patch, classes: ds.config.classes };
    Ok((ds, shape))
}

pub fn split_inputs(ds: &Dataset, split: Split) -> Result<Vec<SampleInputs<f32>>> {
    ds.split(split).into_iter().map(|s| SampleInputs::from_sample(s, ds.config.patch)).collect()
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    pub resume: bool,
    pub stop_after: Option<usize>,
}

/// Pretrains into `<out>/<name>`: `checkpoint/`, `loss_curve.tsv`,
/// `loss_curve.svg` and `summary.json`.
pub fn pretrain_run(config: &RunConfig, name: &str, options: &PretrainOptions) -> Result<(PathBuf, PretrainOutcome)> {
    config.validate()?;
    let mut manifest = RunManifest::begin("pretrain", config);
    let (ds, shape) = load_dataset(config)?;
    let dir = run_dir(config, name)?;
    let train = split_inputs(&ds, Split::Train)?;
    let val = split_inputs(&ds, Split::Val)?;
    let mut model = Model32::new(&config.model, shape, config.seed)?;
    let control = RunControl { checkpoint_dir: Some(dir.join("checkpoint")), resume: options.resume, stop_after: options.stop_after };
    let outcome = pretrain(&mut model, &train, &val, &config.pretrain, config.seed, &control)?;
    write(&dir.join("loss_curve.tsv"), &curve_tsv(&outcome.curve))?;
    plot_file(&dir.join("loss_curve.tsv"))?;
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&outcome).unwrap())?;
    for a in ["checkpoint", "loss_curve.tsv", "loss_curve.svg", "summary.json"] {
        manifest.add(a);
    }
    manifest.finish(&dir)?;
    Ok((dir, outcome))
}

/// Segmentation loss curve in the same layout as the pretraining curve.
pub fn downstream_curve_tsv(curve: &[f64]) -> String {
    let mut s = String::from("epoch\tterm\tvalue\n");
    for (e, v) in curve.iter().enumerate() {
        s.push_str(&format!("{}\tsegmentation\t{}\n", e + 1, v));
    }
    s
}

fn train_into(config: &RunConfig, downstream: &DownstreamConfig, ds: &Dataset, shape: DataShape, dir: &Path) -> Result<(Model32, DownstreamOutcome)> {
    let train = split_inputs(ds, Split::Train)?;
    let mut model = Model32::new(&config.model, shape, config.seed)?;
    let outcome = train_downstream(&mut model, &train, downstream, config.seed)?;
    write(&dir.join("loss_curve.tsv"), &downstream_curve_tsv(&outcome.curve))?;
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&outcome).unwrap())?;
    Ok((model, outcome))
}

/// Trains into `<out>/<name>`: `model/`, `loss_curve.tsv`, `loss_curve.svg`
/// and `summary.json`. Finetune modes default to `<out>/pretrain/checkpoint`.
pub fn train_run(config: &RunConfig, name: &str) -> Result<(PathBuf, DownstreamOutcome)> {
    let mut config = config.clone();
    if config.downstream.mode.needs_checkpoint() && config.downstream.checkpoint.is_none() {
        config.downstream.checkpoint = Some(output_root(&config).join("pretrain").join("checkpoint"));
    }
    config.validate()?;
    let mut manifest = RunManifest::begin("train", &config);
    let (ds, shape) = load_dataset(&config)?;
    let dir = run_dir(&config, name)?;
    let (model, outcome) = train_into(&config, &config.downstream, &ds, shape, &dir)?;
    save_weights(dir.join("model"), &model, json!({"phase": "downstream", "config": config}))?;
    plot_file(&dir.join("loss_curve.tsv"))?;
    for a in ["model", "loss_curve.tsv", "loss_curve.svg", "summary.json"] {
        manifest.add(a);
    }
    manifest.finish(&dir)?;
    Ok((dir, outcome))
}

/// Confusion matrices of each subset as `K x K` int64 entries named by subset.
pub fn write_confusions(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = ContainerWriter::create(dir, CONFUSION_KIND, json!({"subsets": reports.iter().map(|r| &r.subset).collect::<Vec<_>>()}))?;
    for r in reports {
        let k = r.confusion.classes;
        w.add(&r.subset, &[k, k], &Blob::I64(r.confusion.counts.iter().map(|&c| c as i64).collect()))?;
    }
    w.finish()?;
    Ok(())
}

fn write_eval(dir: &Path, split: &str, reports: &[EvalReport], manifest: &mut RunManifest) -> Result<()> {
    let table = format!("eval_{split}.tsv");
    write(&dir.join(&table), &reports_tsv(reports))?;
    let confusion = format!("confusion_{split}");
    write_confusions(&dir.join(&confusion), reports)?;
    manifest.add(table);
    manifest.add(confusion);
    Ok(())
}

/// Evaluates `<out>/<name>/model` on every non-empty subset (full set first,
/// singles last); writes `eval_<split>.tsv` and `confusion_<split>/`.
pub fn eval_run(config: &RunConfig, name: &str, split: &str) -> Result<(PathBuf, Vec<EvalReport>)> {
    let which: Split = split.parse()?;
    let dir = output_root(config).join(name);
    let model_dir = dir.join("model");
    if !model_dir.join(MANIFEST).is_file() {
        return Err(not_found(model_dir, "no trained model here; run `imfuse train` first"));
    }
    let stored = Container::open(&model_dir)?;
    let trained: RunConfig = serde_json::from_value(stored.manifest().meta["config"].clone())
        .map_err(|e| Error::contract(format!("{}: model carries no usable config: {e}", model_dir.display())))?;
    let mut config = config.clone();
    config.model = trained.model.clone();
    config.downstream = trained.downstream.clone();
    let mut manifest = RunManifest::begin("eval", &config);
    let (ds, shape) = load_dataset(&config)?;
    let mut model = Model32::new(&config.model, shape, trained.seed)?;
    let loaded = load_params(&model_dir, &mut model.store, |_| true)?;
    if loaded != model.store.len() {
        return Err(Error::contract(format!("{}: holds {loaded} of {} parameters", model_dir.display(), model.store.len())));
    }
    let samples = split_inputs(&ds, which)?;
    let reports = evaluate(&model, &samples, &ModalitySet::FULL.nonempty_subsets(), config.downstream.encoder_options())?;
    write_eval(&dir, split, &reports, &mut manifest)?;
    manifest.finish(&dir)?;
    Ok((dir, reports))
}

/// Pretrains once when a selected variant needs it, then trains and
/// evaluates each variant on the test split under the same seed and data.
/// Writes `ablation.tsv` (subsets by variants) and `ablation.svg`.
pub fn ablate_run(config: &RunConfig, name: &str, variants: &[Variant]) -> Result<(PathBuf, Vec<(Variant, Vec<EvalReport>)>)> {
    config.validate()?;
    if variants.is_empty() {
        return Err(Error::config("no variants selected"));
    }
    let mut manifest = RunManifest::begin("ablate", config);
    let (ds, shape) = load_dataset(config)?;
    let dir = run_dir(config, name)?;
    let checkpoint = if variants.iter().any(|v| v.needs_checkpoint()) {
        let pre = dir.join("pretrain");
        fs::create_dir_all(&pre).map_err(|e| Error::io(&pre, e))?;
        let train = split_inputs(&ds, Split::Train)?;
        let val = split_inputs(&ds, Split::Val)?;
        let mut model = Model32::new(&config.model, shape, config.seed)?;
        let control = RunControl { checkpoint_dir: Some(pre.join("checkpoint")), ..RunControl::default() };
        let outcome = pretrain(&mut model, &train, &val, &config.pretrain, config.seed, &control)?;
        write(&pre.join("loss_curve.tsv"), &curve_tsv(&outcome.curve))?;
        manifest.add("pretrain/checkpoint");
        manifest.add("pretrain/loss_curve.tsv");
        Some(pre.join("checkpoint"))
    } else {
        None
    };
    let test = split_inputs(&ds, Split::Test)?;
    let subsets = ModalitySet::FULL.nonempty_subsets();
    let mut columns = Vec::with_capacity(variants.len());
    for &v in variants {
        let cell = dir.join(v.name());
        fs::create_dir_all(&cell).map_err(|e| Error::io(&cell, e))?;
        let downstream = v.configure(&config.downstream, checkpoint.clone());
        let (model, _) = train_into(config, &downstream, &ds, shape, &cell)?;
        let reports = evaluate(&model, &test, &subsets, downstream.encoder_options())?;
        write(&cell.join("eval_test.tsv"), &reports_tsv(&reports))?;
        write_confusions(&cell.join("confusion_test"), &reports)?;
        for a in ["loss_curve.tsv", "summary.json", "eval_test.tsv", "confusion_test"] {
            manifest.add(Path::new(v.name()).join(a));
        }
        columns.push((v, reports));
    }
    write(&dir.join("ablation.tsv"), &ablation_tsv(&columns))?;
    plot_file(&dir.join("ablation.tsv"))?;
    manifest.add("ablation.tsv");
    manifest.add("ablation.svg");
    manifest.finish(&dir)?;
    Ok((dir, columns))
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Ok(Variant::ABLATION.to_vec());
    }
    names.iter().map(|n| n.trim().parse()).collect()
}

/// Executes a parsed command line, printing a short report to stdout.
// Stdout writes that ignore a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! sayln {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.samples {
                config.data.samples = n;
            }
            let s = synth(&config)?;
            sayln!("samples {}", s.samples);
            sayln!("train {} val {} test {}", s.train, s.val, s.test);
            sayln!("dataset {}", s.dir.display());
        }
        Command::Pretrain(a) => {
            let p = &mut config.pretrain;
            if let Some(e) = a.epochs {
                p.epochs = e;
            }
            if let Some(x) = a.alpha {
                p.alpha = x;
            }
            if let Some(x) = a.lambda2 {
                p.lambda2 = x;
            }
            let options = PretrainOptions { resume: a.resume, stop_after: a.stop_after };
            let (dir, outcome) = pretrain_run(&config, &a.name, &options)?;
            for (e, r) in outcome.curve.iter().enumerate() {
                let terms: Vec<String> = r.terms().iter().map(|(t, v)| format!("{t} {v:.6}")).collect();
                sayln!("epoch {} {}", e + 1, terms.join(" "));
            }
            if let Some(al) = outcome.alignment {
                sayln!("alignment positive {:.6} negative {:.6} gap {:.6}", al.positive, al.negative, al.gap());
            }
            sayln!("run {}", dir.display());
        }
        Command::Train(a) => {
            let d = &mut config.downstream;
            if let Some(m) = &a.mode {
                d.mode = m.parse::<TrainMode>()?;
            }
            if a.no_random {
                d.random_combo = false;
            }
            d.no_lstm |= a.no_lstm;
            d.no_mask |= a.no_mask;
            if let Some(e) = a.epochs {
                d.epochs = e;
            }
            if let Some(c) = &a.checkpoint {
                d.checkpoint = Some(c.clone());
            }
            let (dir, outcome) = train_run(&config, &a.name)?;
            for (e, v) in outcome.curve.iter().enumerate() {
                sayln!("epoch {} segmentation {v:.6}", e + 1);
            }
            sayln!("run {}", dir.display());
        }
        Command::Eval(a) => {
            let (dir, reports) = eval_run(&config, &a.name, &a.split)?;
            say!("{}", reports_tsv(&reports));
            sayln!("run {}", dir.display());
        }
        Command::Ablate(a) => {
            let variants = parse_variants(&a.variants)?;
            let (dir, columns) = ablate_run(&config, &a.name, &variants)?;
            say!("{}", ablation_tsv(&columns));
            sayln!("run {}", dir.display());
        }
        Command::Plot(a) => {
            for input in &a.inputs {
                sayln!("{}", plot_file(input)?.display());
            }
        }
    }
    Ok(())
}
