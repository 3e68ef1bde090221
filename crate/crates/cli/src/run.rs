//! Subcommand implementations. Each writes its artifacts under an output
//! directory it holds exclusively for the duration of the run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use hagroute_core::data::{
    augment_gaussian_noise, channel_stats, kfold_split, load_cifar100_binary, load_csv_regression,
    normalize_images, synth_regression_dataset, write_csv_regression, ChannelStats, CifarOptions, Sample,
    Split, SplitPlan, Target,
};
use hagroute_core::init;
use hagroute_core::loss::{Objective, Targets};
use hagroute_core::metrics::{
    classification_report, consolidate_folds, evaluate, ClassificationReport, EvalReport, FoldConsolidation,
    MetricRow, Prediction,
};
use hagroute_core::nn::{HeadKind, Network};
use hagroute_core::optim::TrainStepReport;
use hagroute_core::tensor::Array;
use hagroute_core::train::{gradcheck_network, Trainer};
use hagroute_core::{Error, Group};
use rand::Rng;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::config::{DataSource, RunConfig};
use crate::error::{CliResult, Failure};

pub const GRADCHECK_MAX_PARAMS: usize = 5000;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const LOCK_FILE: &str = ".hagroute.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Runtime(anyhow!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn load_samples(cfg: &RunConfig) -> CliResult<Vec<Sample>> {
    let d = cfg.data()?;
    let path = || {
        d.path
            .as_deref()
            .ok_or_else(|| Failure::validation("`data.path` is required for this source"))
    };
    let samples = match d.source {
        DataSource::Synthetic => {
            let syn = d
                .synthetic
                .as_ref()
                .ok_or_else(|| Failure::validation("`data.synthetic` is missing"))?;
            synth_regression_dataset(syn)?.samples
        }
        DataSource::Csv => load_csv_regression(path()?)?,
        DataSource::Cifar100 => {
            let opts = CifarOptions {
                limit: d.cifar.limit,
                class_filter: d.cifar.classes.clone(),
                per_class_limit: d.cifar.per_class,
                remap: d.cifar.classes.is_some(),
            };
            load_cifar100_binary(path()?, &opts)?
        }
    };
    let want: usize = cfg.model.input_shape.iter().product();
    if let Some(s) = samples.iter().find(|s| s.input.numel() != want) {
        return Err(Failure::validation(format!(
            "sample `{}` has {} input values, model.input_shape {:?} needs {want}",
            s.sample_id,
            s.input.numel(),
            cfg.model.input_shape
        )));
    }
    Ok(samples)
}

/// Samples of one fold assignment, normalised with training statistics.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub channel_stats: Option<ChannelStats>,
}

pub fn prepare(cfg: &RunConfig, test_fold: usize) -> CliResult<Prepared> {
    let mut samples = load_samples(cfg)?;
    let d = cfg.data()?;
    let s = d.split;
    let plan = SplitPlan::new(s.k, test_fold)?;
    let split = kfold_split(&samples, &plan, s.seed)?;
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if idx.is_empty() {
            return Err(Failure::Runtime(anyhow!(
                "{name} split is empty ({} samples, k = {})",
                samples.len(),
                s.k
            )));
        }
    }
    let images = samples.first().is_some_and(|x| x.input.shape().len() == 3);
    let channel_stats = if images && d.normalize_channels {
        let train: Vec<&Sample> = split.train.iter().map(|&i| &samples[i]).collect();
        let stats = channel_stats(&train)?;
        normalize_images(&mut samples, &stats)?;
        Some(stats)
    } else {
        None
    };
    Ok(Prepared {
        samples,
        split,
        channel_stats,
    })
}

/// Evaluation output: size metrics for regressors, accuracy for classifiers.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum TestReport {
    Sizes(EvalReport),
    Classes(ClassificationReport),
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_metric_rows(path: &Path, rows: &[MetricRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in preds {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn class_labels(samples: &[Sample], idx: &[usize]) -> CliResult<Vec<usize>> {
    idx.iter()
        .map(|&i| match samples[i].target {
            Target::Class(c) => Ok(c),
            Target::SizeMm(_) => Err(Failure::validation("classification head on size targets")),
        })
        .collect()
}

/// Predictions of `trainer` on `idx`: size predictions for regressors,
/// `(truth, predicted)` labels for classifiers.
enum Outputs {
    Sizes(Vec<Prediction>),
    Classes(Vec<usize>, Vec<usize>),
}

fn infer(trainer: &Trainer, samples: &[Sample], idx: &[usize], batch: usize) -> CliResult<Outputs> {
    Ok(match trainer.net.config.head {
        HeadKind::Regression => Outputs::Sizes(trainer.predict_sizes(samples, idx, batch)?),
        HeadKind::Classification => Outputs::Classes(
            class_labels(samples, idx)?,
            trainer.predict_classes(samples, idx, batch)?,
        ),
    })
}

fn report(out: &Outputs, cfg: &RunConfig) -> CliResult<TestReport> {
    Ok(match out {
        Outputs::Sizes(p) => TestReport::Sizes(evaluate(p, cfg.run.f1_average)?),
        Outputs::Classes(t, p) => TestReport::Classes(classification_report(t, p, cfg.model.num_classes)?),
    })
}

/// One row of `gate_stats.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateRow {
    pub layer: usize,
    pub position: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub histogram: Vec<usize>,
}

pub fn gate_rows(net: &Network) -> Vec<GateRow> {
    net.gates()
        .into_iter()
        .map(|site| {
            let s = site.gate.stats(&net.store);
            GateRow {
                layer: site.layer,
                position: site.position.to_string(),
                n: site.gate.n(),
                mean: s.mean,
                std: s.std,
                histogram: s.histogram,
            }
        })
        .collect()
}

pub fn write_gate_rows(path: &Path, rows: &[GateRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let bins = rows.first().map_or(0, |r| r.histogram.len());
    let mut header: Vec<String> = ["layer", "position", "n", "mean", "std"].map(String::from).to_vec();
    header.extend((0..bins).map(|b| format!("bin_{b:02}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.layer.to_string(), r.position.clone(), r.n.to_string(), r.mean.to_string(), r.std.to_string()];
        rec.extend(r.histogram.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const STEP_HEADER: [&str; 10] = [
    "epoch",
    "step",
    "loss_att",
    "loss_main",
    "att_pre_clip_norm",
    "att_post_clip_norm",
    "att_lr",
    "main_pre_clip_norm",
    "main_post_clip_norm",
    "main_lr",
];

fn step_record(epoch: usize, step: usize, r: &TrainStepReport) -> Vec<String> {
    let g = |group| r.stats(group);
    vec![
        epoch.to_string(),
        step.to_string(),
        opt(r.loss_att),
        r.loss_main.to_string(),
        opt(g(Group::Att).map(|s| s.pre_clip_norm)),
        opt(g(Group::Att).map(|s| s.post_clip_norm)),
        opt(g(Group::Att).map(|s| s.lr)),
        opt(g(Group::Main).map(|s| s.pre_clip_norm)),
        opt(g(Group::Main).map(|s| s.post_clip_norm)),
        opt(g(Group::Main).map(|s| s.lr)),
    ]
}

/// Per-epoch aggregate of step reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss_att: Option<f64>,
    pub train_loss_main: f64,
    pub val_loss: f64,
    pub att_pre_clip_norm_max: Option<f64>,
    pub att_post_clip_norm_max: Option<f64>,
    pub main_pre_clip_norm_max: Option<f64>,
    pub main_post_clip_norm_max: Option<f64>,
    pub att_lr: Option<f64>,
    pub main_lr: Option<f64>,
    pub best: bool,
    pub gates: Vec<(String, f64, f64)>,
}

fn max_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

fn mean_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EpochLog {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "epoch",
            "train_loss_att",
            "train_loss_main",
            "val_loss",
            "att_pre_clip_norm_max",
            "att_post_clip_norm_max",
            "main_pre_clip_norm_max",
            "main_post_clip_norm_max",
            "att_lr",
            "main_lr",
            "best",
        ]
        .map(String::from)
        .to_vec();
        for (name, _, _) in &self.gates {
            h.push(format!("{name}_mean"));
            h.push(format!("{name}_std"));
        }
        h
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            opt(self.train_loss_att),
            self.train_loss_main.to_string(),
            self.val_loss.to_string(),
            opt(self.att_pre_clip_norm_max),
            opt(self.att_post_clip_norm_max),
            opt(self.main_pre_clip_norm_max),
            opt(self.main_post_clip_norm_max),
            opt(self.att_lr),
            opt(self.main_lr),
            u8::from(self.best).to_string(),
        ];
        for (_, m, s) in &self.gates {
            r.push(m.to_string());
            r.push(s.to_string());
        }
        r
    }
}

fn summarise(epoch: usize, steps: &[TrainStepReport], val_loss: f64, best: bool, net: &Network) -> EpochLog {
    let stat = |group, f: fn(&hagroute_core::optim::GroupStepStats) -> f64| {
        max_of(steps.iter().filter_map(|r| r.stats(group)).map(f))
    };
    let last = |group| steps.last().and_then(|r| r.stats(group)).map(|s| s.lr);
    EpochLog {
        epoch,
        train_loss_att: mean_of(steps.iter().filter_map(|r| r.loss_att)),
        train_loss_main: mean_of(steps.iter().map(|r| r.loss_main)).unwrap_or(f64::NAN),
        val_loss,
        att_pre_clip_norm_max: stat(Group::Att, |s| s.pre_clip_norm),
        att_post_clip_norm_max: stat(Group::Att, |s| s.post_clip_norm),
        main_pre_clip_norm_max: stat(Group::Main, |s| s.pre_clip_norm),
        main_post_clip_norm_max: stat(Group::Main, |s| s.post_clip_norm),
        att_lr: last(Group::Att),
        main_lr: last(Group::Main),
        best,
        gates: gate_rows(net)
            .into_iter()
            .map(|g| (format!("gate_l{}_{}", g.layer, g.position), g.mean, g.std))
            .collect(),
    }
}

#[derive(Serialize)]
struct ParamHealth {
    name: String,
    max_abs: f64,
    non_finite: usize,
}

#[derive(Serialize)]
struct Divergence<'a> {
    epoch: usize,
    step: usize,
    phase: &'a str,
    loss: f64,
    params: Vec<ParamHealth>,
}

fn write_divergence(dir: &Path, epoch: usize, step: usize, phase: &str, loss: f64, net: &Network) -> CliResult<()> {
    let params = net
        .store
        .iter()
        .map(|(_, p)| ParamHealth {
            name: p.name.clone(),
            max_abs: p.value.data().iter().fold(0.0, |m, v| if v.is_finite() { m.max(v.abs()) } else { m }),
            non_finite: p.value.data().iter().filter(|v| !v.is_finite()).count(),
        })
        .collect();
    write_json(
        &dir.join("diverged.json"),
        &Divergence {
            epoch,
            step,
            phase,
            loss,
            params,
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test: TestReport,
}

fn augmented(samples: &[Sample], idx: &[usize], sigma: f64, seed: u64, epoch: usize) -> CliResult<Vec<Sample>> {
    let mut rng = init::rng(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.iter()
        .map(|&i| Ok(augment_gaussian_noise(&samples[i], sigma, rng.gen())?))
        .collect()
}

/// Trains on the configured split, keeping the checkpoint with the lowest
/// validation loss, then reports on the test split with that checkpoint.
pub fn run_train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let dir = cfg.run.out_dir.clone();
    let section = cfg.data()?;
    let test_fold = section.split.test_fold;
    let _lock = OutDirLock::acquire(&dir)?;
    let data = prepare(cfg, test_fold)?;
    if let Some(stats) = &data.channel_stats {
        write_json(&dir.join("channel_stats.json"), stats)?;
    }
    let net = Network::build(&cfg.model)?;
    let mut trainer = Trainer::new(net, cfg.trainer_config())?;
    log::info!(
        "training {:?} ({} params, gr = {}) on {} / {} / {} samples",
        cfg.model.architecture,
        trainer.net.param_count(),
        cfg.gr_enabled(),
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len()
    );

    let mut steps_csv = csv::Writer::from_path(dir.join("steps.csv"))?;
    steps_csv.write_record(STEP_HEADER)?;
    let mut log_csv = csv::Writer::from_path(dir.join("train_log.csv"))?;
    let best_stem = dir.join("best");
    let bs = cfg.run.batch_size;
    let sigma = section.augmentation.gaussian_noise_std;
    let mut rng = init::rng(cfg.run.seed);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut global_step = 0;

    for epoch in 1..=cfg.run.epochs {
        let result = if sigma > 0.0 {
            let aug = augmented(&data.samples, &data.split.train, sigma, cfg.run.seed, epoch)?;
            let idx: Vec<usize> = (0..aug.len()).collect();
            trainer.run_epoch(&aug, &idx, bs, &mut rng)
        } else {
            trainer.run_epoch(&data.samples, &data.split.train, bs, &mut rng)
        };
        let steps = match result {
            Ok(s) => s,
            Err(Error::NonFiniteLoss { phase, value }) => {
                write_divergence(&dir, epoch, global_step, phase, value, &trainer.net)?;
                return Err(Failure::Runtime(anyhow!(
                    "non-finite loss {value} in the {phase} phase of epoch {epoch}; parameter snapshot in {}",
                    dir.join("diverged.json").display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        for r in &steps {
            global_step += 1;
            steps_csv.write_record(step_record(epoch, global_step, r))?;
        }
        steps_csv.flush()?;

        let val_loss = trainer.loss(&data.samples, &data.split.val, bs)?;
        if !val_loss.is_finite() {
            write_divergence(&dir, epoch, global_step, "validation", val_loss, &trainer.net)?;
            return Err(Failure::Runtime(anyhow!("non-finite validation loss at epoch {epoch}")));
        }
        let improved = best.map_or(true, |(_, b)| val_loss < b);
        if improved {
            best = Some((epoch, val_loss));
            let groups = cfg.run.save_optimizer_state.then_some(trainer.groups.as_slice());
            checkpoint::save(
                &best_stem,
                &trainer.net,
                groups,
                CheckpointMeta {
                    epoch,
                    val_loss,
                    test_fold,
                    precision: cfg.run.precision,
                },
            )?;
        }
        let entry = summarise(epoch, &steps, val_loss, improved, &trainer.net);
        if epoch == 1 {
            log_csv.write_record(entry.header())?;
        }
        log_csv.write_record(entry.record())?;
        log_csv.flush()?;
        log::info!("epoch {epoch}: train {:.6} val {val_loss:.6}", entry.train_loss_main);
        epochs.push(entry);
    }

    checkpoint::save(
        &dir.join("final"),
        &trainer.net,
        cfg.run.save_optimizer_state.then_some(trainer.groups.as_slice()),
        CheckpointMeta {
            epoch: cfg.run.epochs,
            val_loss: epochs.last().map_or(f64::NAN, |e| e.val_loss),
            test_fold,
            precision: cfg.run.precision,
        },
    )?;

    let (best_epoch, best_val_loss) = best.expect("at least one epoch ran");
    trainer.net = Checkpoint::load(&best_stem)?.network()?;
    let out = infer(&trainer, &data.samples, &data.split.test, bs)?;
    let test = report(&out, cfg)?;
    write_json(&dir.join("eval_report.json"), &test)?;
    match (&out, &test) {
        (Outputs::Sizes(p), TestReport::Sizes(r)) => {
            write_predictions(&dir.join("predictions.csv"), p)?;
            write_metric_rows(&dir.join("eval_metrics.csv"), &r.rows(&test_fold.to_string()))?;
        }
        (_, TestReport::Classes(r)) => write_classification_rows(&dir.join("eval_metrics.csv"), "0", r)?,
        _ => unreachable!("report kind follows outputs"),
    }
    let gates = gate_rows(&trainer.net);
    if !gates.is_empty() {
        write_gate_rows(&dir.join("gate_stats.csv"), &gates)?;
    }
    Ok(TrainSummary {
        out_dir: dir,
        epochs,
        best_epoch,
        best_val_loss,
        test,
    })
}

fn write_classification_rows(path: &Path, fold: &str, r: &ClassificationReport) -> CliResult<()> {
    let rows = vec![
        MetricRow {
            fold: fold.to_string(),
            scheme: "classes".into(),
            metric: "accuracy".into(),
            value: r.accuracy,
        },
        MetricRow {
            fold: fold.to_string(),
            scheme: "classes".into(),
            metric: "balanced_accuracy".into(),
            value: r.balanced_accuracy,
        },
        MetricRow {
            fold: fold.to_string(),
            scheme: "classes".into(),
            metric: "f1".into(),
            value: r.f1_macro,
        },
    ];
    write_metric_rows(path, &rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum EvalSummary {
    /// Test-split size predictions pooled over the given checkpoints.
    Consolidated(FoldConsolidation),
    PerFold(Vec<TestReport>),
}

/// Evaluates each checkpoint on the chosen split of its own fold. Test-split
/// regression results are consolidated across checkpoints.
pub fn run_eval(cfg: &RunConfig, checkpoints: &[PathBuf], split: EvalSplit) -> CliResult<EvalSummary> {
    if checkpoints.is_empty() {
        return Err(Failure::validation("at least one --checkpoint is required"));
    }
    let loaded = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<CliResult<Vec<_>>>()?;
    for ck in &loaded {
        ck.check_model_config(&cfg.model)?;
    }
    let dir = cfg.run.out_dir.clone();
    let _lock = OutDirLock::acquire(&dir)?;
    let bs = cfg.run.batch_size;
    let mut outputs = Vec::new();
    for ck in &loaded {
        let fold = ck.manifest.test_fold;
        let data = prepare(cfg, fold)?;
        let trainer = Trainer::new(ck.network()?, cfg.trainer_config())?;
        let idx: Vec<usize> = match split {
            EvalSplit::Train => data.split.train.clone(),
            EvalSplit::Val => data.split.val.clone(),
            EvalSplit::Test => data.split.test.clone(),
            EvalSplit::All => (0..data.samples.len()).collect(),
        };
        let out = infer(&trainer, &data.samples, &idx, bs)?;
        let r = report(&out, cfg)?;
        write_json(&dir.join(format!("eval_fold{fold}.json")), &r)?;
        outputs.push((fold, out, r));
    }

    let all_sizes = outputs.iter().all(|(_, o, _)| matches!(o, Outputs::Sizes(_)));
    if split == EvalSplit::Test && all_sizes {
        let folds: Vec<Vec<Prediction>> = outputs
            .iter()
            .map(|(_, o, _)| match o {
                Outputs::Sizes(p) => p.clone(),
                Outputs::Classes(..) => unreachable!(),
            })
            .collect();
        let c = consolidate_folds(&folds, cfg.run.f1_average)?;
        write_json(&dir.join("eval_consolidated.json"), &c)?;
        write_metric_rows(&dir.join("eval_metrics.csv"), &c.rows())?;
        write_predictions(&dir.join("predictions.csv"), &folds.concat())?;
        return Ok(EvalSummary::Consolidated(c));
    }
    let mut rows = Vec::new();
    for (fold, _, r) in &outputs {
        match r {
            TestReport::Sizes(e) => rows.extend(e.rows(&fold.to_string())),
            TestReport::Classes(c) => {
                let tmp = dir.join(format!("eval_fold{fold}.csv"));
                write_classification_rows(&tmp, &fold.to_string(), c)?;
            }
        }
    }
    if !rows.is_empty() {
        write_metric_rows(&dir.join("eval_metrics.csv"), &rows)?;
    }
    Ok(EvalSummary::PerFold(outputs.into_iter().map(|(_, _, r)| r).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub params: usize,
    pub max_rel_error: f64,
    /// `(objective, module, max relative error)`, in parameter order.
    pub per_module: Vec<(String, String, f64)>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn module_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(m, _)| m)
}

fn objective_name(o: &Objective) -> &'static str {
    match o {
        Objective::WeightedHuber(_) => "weighted_huber",
        Objective::CrossEntropy => "cross_entropy",
        Objective::Mse => "mse",
    }
}

/// Central differences against backprop for every parameter of the
/// configured model under both phase objectives, on a small random batch.
pub fn run_gradcheck(cfg: &RunConfig) -> CliResult<GradcheckSummary> {
    let net = Network::build(&cfg.model)?;
    let params = net.param_count();
    if params > GRADCHECK_MAX_PARAMS {
        return Err(Failure::validation(format!(
            "model has {params} parameters, gradcheck allows {GRADCHECK_MAX_PARAMS}; \
             shrink vit.embed / vit.depth, cnn.widths or mlp.hidden"
        )));
    }
    let mut rng = init::rng(cfg.run.seed);
    let batch = 2;
    let mut shape = vec![batch];
    shape.extend(&cfg.model.input_shape);
    let n: usize = shape.iter().product();
    let inputs = Array::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let targets = match cfg.model.head {
        HeadKind::Regression => Targets::Values((0..batch).map(|_| rng.gen_range(0.5..20.0)).collect()),
        HeadKind::Classification => Targets::Labels((0..batch).map(|i| i % cfg.model.num_classes).collect()),
    };
    let mut objectives = vec![cfg.loss_main()];
    if cfg.gr_enabled() && cfg.loss_att() != cfg.loss_main() {
        objectives.push(cfg.loss_att());
    }
    let mut per_module: Vec<(String, String, f64)> = Vec::new();
    let mut worst: f64 = 0.0;
    for obj in &objectives {
        let report = gradcheck_network(&net, &inputs, &targets, obj, 1e-6)?;
        worst = worst.max(report.max_rel_error);
        for p in &report.per_param {
            let module = module_of(&p.name).to_string();
            let key = objective_name(obj).to_string();
            match per_module.iter_mut().find(|(o, m, _)| *o == key && *m == module) {
                Some(entry) => entry.2 = entry.2.max(p.max_rel_error),
                None => per_module.push((key, module, p.max_rel_error)),
            }
        }
    }
    Ok(GradcheckSummary {
        params,
        max_rel_error: worst,
        per_module,
    })
}

pub fn write_gradcheck(path: &Path, s: &GradcheckSummary) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["objective", "module", "max_rel_error"])?;
    for (o, m, e) in &s.per_module {
        w.write_record([o.as_str(), m.as_str(), &e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-gate score statistics of a checkpoint, written to
/// `<out_dir>/gate_stats.csv`.
pub fn run_gatestats(checkpoint: &Path, out_dir: &Path) -> CliResult<Vec<GateRow>> {
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.network()?;
    let rows = gate_rows(&net);
    if rows.is_empty() {
        return Err(Failure::validation(format!(
            "{} has no gates (model.use_hag = false)",
            checkpoint.display()
        )));
    }
    let _lock = OutDirLock::acquire(out_dir)?;
    write_gate_rows(&out_dir.join("gate_stats.csv"), &rows)?;
    Ok(rows)
}

/// Writes the configured synthetic dataset as a CSV table.
pub fn run_synth(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> CliResult<PathBuf> {
    let mut syn = cfg
        .data()?
        .synthetic
        .clone()
        .ok_or_else(|| Failure::validation("`data.synthetic` is required for synth"))?;
    if let Some(s) = seed {
        syn.seed = s;
    }
    let ds = synth_regression_dataset(&syn)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv_regression(out, &ds.samples)?;
    write_json(
        &out.with_extension("truth.json"),
        &serde_json::json!({
            "informative": ds.informative,
            "coefficients": ds.coefficients,
            "config": syn,
        }),
    )?;
    Ok(out.to_path_buf())
}
