//! Experiment orchestration: trains every (method, seed) cell of the grid,
//! evaluates each trained run on its held-out test cores, and writes all
//! artifacts under one output directory.
//!
//! Layout:
//!
//! ```text
//! <output_dir>/
//!   config.toml                  resolved configuration
//!   summary.json                 per-method mean ± std over seeds
//!   manifest.json                config + sorted artifact listing
//!   <method>/seed_<seed>/
//!     history.jsonl              one epoch record per line
//!     checkpoint.evck            best-validation model archive
//!     (member_<m>_history.jsonl / member_<m>.evck for ensembles)
//!     train_summary.json
//!     metrics.json
//!     curve.csv                  accuracy/retention vs confidence threshold
//!     reliability.csv            calibration bins on weak labels
//! ```
//!
//! Every artifact is a pure function of the configuration, so rerunning an
//! experiment reproduces each file byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evicore::baselines::{
    ensemble_predict_set, mc_dropout_predict_set, train_baseline, BaselineTrainConfig,
};
use evicore::coteach::{
    attach_oracle_labels, flatten_ood_flags, predict_patches, train_pair, train_single,
    LossKind, TrainResult, TrainingSet,
};
use evicore::domain::{BiopsyCore, CalibrationReport, CoreStatus};
use evicore::eval::{
    accuracy_vs_confidence_curve, aggregate_cores, core_metrics, ece_from_patches,
    ood_detection_auroc, patch_balanced_accuracy, LabelSource, PatchPrediction,
};
use evicore::model::{load_backbone, Backbone};
use evicore::rng::mix64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::FileConfig;
use crate::dataset::{ood_probe, prepare, train_seed, SplitCores};
use crate::methods::{parse_methods, Method};

/// Salts separating evaluation-time stochastic streams from training.
const SALT_MC_TEST: u64 = 0x0DD0_0001;
const SALT_MC_PROBE: u64 = 0x0DD0_0002;

/// The optimizer every arm trains with; recorded in run metadata.
const OPTIMIZER: &str = "adamw";

// ---------------------------------------------------------------------------
// Metric records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMetrics {
    pub n_patches: usize,
    pub balanced_accuracy_weak: f64,
    /// Scored against hidden per-patch ground truth; absent on real data.
    pub balanced_accuracy_true: Option<f64>,
    pub ece_weak: f64,
    pub ece_true: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreTauMetrics {
    pub tau: f64,
    pub predicted_cores: usize,
    pub rejected_cores: usize,
    /// Metric fields are absent when every core was rejected or only one
    /// class survived.
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub n_id: usize,
    pub n_ood: usize,
    pub mean_uncertainty_id: f64,
    pub mean_uncertainty_ood: f64,
    /// Separability of in- vs out-of-distribution patches by uncertainty;
    /// absent when the probe ended up single-class.
    pub auroc: Option<f64>,
}

/// Everything `metrics.json` holds for one (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub seed: u64,
    pub optimizer: String,
    /// Model selection outcome of the first trained member.
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub patch: PatchMetrics,
    pub core: Vec<CoreTauMetrics>,
    pub ood: Option<OodMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSummaryEntry {
    member: usize,
    best_epoch: Option<usize>,
    best_val_auc: Option<f64>,
    optimizer: String,
}

// ---------------------------------------------------------------------------
// Paths and small writers
// ---------------------------------------------------------------------------

pub fn run_dir(output_dir: &Path, method: Method, seed: u64) -> PathBuf {
    output_dir.join(method.name()).join(format!("seed_{seed}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Trains one (method, seed) cell and writes its checkpoints, history, and
/// training summary into the run directory. Returns the trained members.
pub fn train_run(
    config: &FileConfig,
    method: Method,
    run_seed: u64,
    dir: &Path,
) -> Result<Vec<TrainResult>> {
    if method.needs_dropout() && config.model.dropout_rate == 0.0 {
        bail!(
            "method {} predicts with dropout but model.dropout_rate is 0",
            method.name()
        );
    }
    let SplitCores { train, val, .. } = prepare(config, run_seed)?;
    let seed = train_seed(config, run_seed);
    let members = method.members(config);

    let results: Vec<TrainResult> = match method.loss_kind() {
        LossKind::Edl => {
            let train_config = config.train.coteach_config(LossKind::Edl);
            let result = if method.coteach() {
                train_pair(&train, &val, &config.model, &train_config, seed)?
            } else {
                train_single(&train, &val, &config.model, &train_config, seed)?
            };
            vec![result]
        }
        LossKind::CrossEntropy => {
            let baseline = BaselineTrainConfig {
                train: config.train.coteach_config(LossKind::CrossEntropy),
                members,
                coteach: method.coteach(),
            };
            train_baseline(&train, &val, &config.model, &baseline, seed)?
        }
    };

    std::fs::create_dir_all(dir)?;
    let single = results.len() == 1;
    let mut summary = Vec::with_capacity(results.len());
    for (m, result) in results.iter().enumerate() {
        let (ckpt, hist) = if single {
            ("checkpoint.evck".to_string(), "history.jsonl".to_string())
        } else {
            (format!("member_{m}.evck"), format!("member_{m}_history.jsonl"))
        };
        std::fs::write(dir.join(ckpt), &result.best_checkpoint)?;
        write_jsonl(&dir.join(hist), &result.history)?;
        summary.push(TrainSummaryEntry {
            member: m,
            best_epoch: result.best_epoch,
            best_val_auc: result.best_val_auc,
            optimizer: OPTIMIZER.to_string(),
        });
    }
    write_json(&dir.join("train_summary.json"), &summary)?;
    Ok(results)
}

/// Loads the models a finished run left behind: `checkpoint.evck` or the
/// `member_<m>.evck` series.
pub fn load_run_models(dir: &Path) -> Result<Vec<Backbone>> {
    let single = dir.join("checkpoint.evck");
    if single.exists() {
        return Ok(vec![load_backbone(&single)?]);
    }
    let mut models = Vec::new();
    loop {
        let path = dir.join(format!("member_{}.evck", models.len()));
        if !path.exists() {
            break;
        }
        models.push(load_backbone(&path)?);
    }
    if models.is_empty() {
        bail!("no checkpoint found in {}", dir.display());
    }
    Ok(models)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Seed for Monte Carlo dropout passes over the test split, derived from
/// the run's training seed so evaluation is reproducible on its own.
pub fn test_mc_seed(config: &FileConfig, run_seed: u64) -> u64 {
    mix64(train_seed(config, run_seed) ^ SALT_MC_TEST)
}

/// Runs the method's prediction rule over a core set.
pub fn predict_for(
    method: Method,
    models: &mut [Backbone],
    cores: &[BiopsyCore],
    config: &FileConfig,
    mc_seed: u64,
) -> Result<Vec<PatchPrediction>> {
    let set = TrainingSet::from_cores(cores)?;
    let mut predictions = match method {
        Method::Ensemble | Method::EnsembleCoteach => ensemble_predict_set(models, &set)?,
        Method::McDropout | Method::McDropoutCoteach => {
            mc_dropout_predict_set(&mut models[0], &set, config.train.mc_passes, mc_seed)?
        }
        _ => predict_patches(&mut models[0], &set, method.loss_kind())?,
    };
    attach_oracle_labels(&mut predictions, cores)?;
    Ok(predictions)
}

fn tau_metrics(predictions: &[PatchPrediction], tau: f64) -> Result<CoreTauMetrics> {
    let cores = aggregate_cores(predictions, tau)?;
    let predicted = cores
        .iter()
        .filter(|(p, _)| p.status == CoreStatus::Predicted)
        .count();
    let metrics = core_metrics(&cores).ok();
    Ok(CoreTauMetrics {
        tau,
        predicted_cores: predicted,
        rejected_cores: cores.len() - predicted,
        auc: metrics.as_ref().map(|m| m.auc),
        sensitivity: metrics.as_ref().map(|m| m.sensitivity),
        specificity: metrics.as_ref().map(|m| m.specificity),
        balanced_accuracy: metrics.as_ref().map(|m| m.balanced_accuracy),
    })
}

fn ood_metrics(
    config: &FileConfig,
    method: Method,
    run_seed: u64,
    models: &mut [Backbone],
) -> Result<Option<OodMetrics>> {
    if config.experiment.ood_eval_fraction <= 0.0 {
        return Ok(None);
    }
    let probe = ood_probe(config, run_seed)?;
    let mc_seed = mix64(train_seed(config, run_seed) ^ SALT_MC_PROBE);
    let predictions = predict_for(method, models, &probe, config, mc_seed)?;
    let flags = flatten_ood_flags(&probe);
    let uncertainty: Vec<f64> = predictions.iter().map(|p| 1.0 - p.confidence).collect();

    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (&u, &ood) in uncertainty.iter().zip(&flags) {
        sums[ood as usize] += u;
        counts[ood as usize] += 1;
    }
    Ok(Some(OodMetrics {
        n_id: counts[0],
        n_ood: counts[1],
        mean_uncertainty_id: sums[0] / counts[0].max(1) as f64,
        mean_uncertainty_ood: sums[1] / counts[1].max(1) as f64,
        auroc: ood_detection_auroc(&uncertainty, &flags).ok(),
    }))
}

fn write_curve_csv(path: &Path, predictions: &[PatchPrediction], tau_grid: &[f64]) -> Result<()> {
    let curve = accuracy_vs_confidence_curve(predictions, tau_grid)?;
    let mut out = String::from("tau,balanced_accuracy,retained_cores,total_cores\n");
    for point in &curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            point.tau,
            fmt_opt(point.balanced_accuracy),
            point.retained_cores,
            point.total_cores
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_reliability_csv(path: &Path, report: &CalibrationReport) -> Result<()> {
    let mut out = String::from("bin,count,mean_confidence,accuracy\n");
    for (i, bin) in report.bins.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            i + 1,
            bin.count,
            bin.mean_confidence,
            bin.accuracy
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Evaluates one trained run on its regenerated test split and writes
/// `metrics.json`, `curve.csv`, and `reliability.csv` into the run directory.
pub fn eval_run(
    config: &FileConfig,
    method: Method,
    run_seed: u64,
    dir: &Path,
) -> Result<RunMetrics> {
    let SplitCores { test, .. } = prepare(config, run_seed)?;
    if test.is_empty() {
        bail!("test split is empty; raise n_patients or lower train/val fractions");
    }
    let mut models = load_run_models(dir)?;
    let predictions =
        predict_for(method, &mut models, &test, config, test_mc_seed(config, run_seed))?;

    let bins = config.experiment.ece_bins;
    let weak_report = ece_from_patches(&predictions, LabelSource::Weak, bins)?;
    let patch = PatchMetrics {
        n_patches: predictions.len(),
        balanced_accuracy_weak: patch_balanced_accuracy(&predictions, LabelSource::Weak)?,
        balanced_accuracy_true: patch_balanced_accuracy(&predictions, LabelSource::True).ok(),
        ece_weak: weak_report.ece,
        ece_true: ece_from_patches(&predictions, LabelSource::True, bins)
            .ok()
            .map(|r| r.ece),
    };

    let core = config
        .experiment
        .tau_grid
        .iter()
        .map(|&tau| tau_metrics(&predictions, tau))
        .collect::<Result<Vec<_>>>()?;

    let train_summary: Vec<TrainSummaryEntry> = serde_json::from_str(
        &std::fs::read_to_string(dir.join("train_summary.json"))
            .with_context(|| format!("reading train summary in {}", dir.display()))?,
    )?;
    let first = train_summary.first();

    let metrics = RunMetrics {
        method: method.name().to_string(),
        seed: run_seed,
        optimizer: OPTIMIZER.to_string(),
        best_epoch: first.and_then(|e| e.best_epoch),
        best_val_auc: first.and_then(|e| e.best_val_auc),
        patch,
        core,
        ood: ood_metrics(config, method, run_seed, &mut models)?,
    };

    write_json(&dir.join("metrics.json"), &metrics)?;
    write_curve_csv(&dir.join("curve.csv"), &predictions, &config.experiment.tau_grid)?;
    write_reliability_csv(&dir.join("reliability.csv"), &weak_report)?;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Summary and manifest
// ---------------------------------------------------------------------------

/// Flattens every numeric leaf of a JSON value into dotted-path keys.
/// Arrays of objects index by a distinguishing field when one exists
/// (`tau` for threshold sweeps) and by position otherwise.
fn numeric_leaves(value: &Value, prefix: &str, out: &mut BTreeMap<String, f64>) {
    match value {
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                out.insert(prefix.to_string(), f);
            }
        }
        Value::Bool(b) => {
            out.insert(prefix.to_string(), *b as u8 as f64);
        }
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                numeric_leaves(v, &key, out);
            }
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                let label = item
                    .get("tau")
                    .and_then(Value::as_f64)
                    .map(|t| format!("tau_{t}"))
                    .unwrap_or_else(|| i.to_string());
                numeric_leaves(item, &format!("{prefix}[{label}]"), out);
            }
        }
        Value::Null | Value::String(_) => {}
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    /// Population standard deviation over the seeds the leaf appeared in.
    pub std: f64,
    pub n: usize,
}

/// Per-method aggregation: mean ± population std of every numeric leaf
/// over that method's runs. String fields (method, optimizer) are dropped;
/// leaves missing in some runs aggregate over the runs that have them.
pub fn summarize_metrics(
    runs: &[RunMetrics],
) -> Result<BTreeMap<String, BTreeMap<String, SummaryStat>>> {
    let mut by_method: BTreeMap<String, Vec<BTreeMap<String, f64>>> = BTreeMap::new();
    for run in runs {
        let value = serde_json::to_value(run)?;
        let mut leaves = BTreeMap::new();
        numeric_leaves(&value, "", &mut leaves);
        leaves.remove("seed");
        by_method.entry(run.method.clone()).or_default().push(leaves);
    }

    let mut summary = BTreeMap::new();
    for (method, runs) in by_method {
        let mut keys: Vec<&String> = runs.iter().flat_map(|r| r.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut stats = BTreeMap::new();
        for key in keys {
            let values: Vec<f64> = runs.iter().filter_map(|r| r.get(key)).copied().collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            stats.insert(
                key.clone(),
                SummaryStat {
                    mean,
                    std: var.sqrt(),
                    n,
                },
            );
        }
        summary.insert(method, stats);
    }
    Ok(summary)
}

/// Reads `metrics.json` files and writes their aggregation to `out`.
pub fn summarize_files(metric_paths: &[PathBuf], out: &Path) -> Result<()> {
    if metric_paths.is_empty() {
        bail!("no metrics files given");
    }
    let mut runs = Vec::with_capacity(metric_paths.len());
    for path in metric_paths {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        runs.push(serde_json::from_str::<RunMetrics>(&text)
            .with_context(|| format!("parsing {}", path.display()))?);
    }
    write_json(out, &summarize_metrics(&runs)?)
}

fn collect_artifacts(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_artifacts(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("artifact under root")
                .to_string_lossy()
                .replace('\\', "/");
            if rel != "manifest.json" {
                out.push(rel);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: FileConfig,
    artifacts: Vec<String>,
}

// ---------------------------------------------------------------------------
// The full grid
// ---------------------------------------------------------------------------

/// Trains and evaluates every (method, seed) cell, then writes the summary
/// and manifest. Method names are validated before any training starts.
pub fn run_experiment(config: &FileConfig) -> Result<Vec<RunMetrics>> {
    config.validate().map_err(|e| anyhow::anyhow!(e))?;
    let methods = parse_methods(&config.experiment.methods)?;
    for method in &methods {
        if method.needs_dropout() && config.model.dropout_rate == 0.0 {
            bail!(
                "method {} predicts with dropout but model.dropout_rate is 0",
                method.name()
            );
        }
    }

    let output_dir = PathBuf::from(&config.experiment.output_dir);
    std::fs::create_dir_all(&output_dir)?;
    std::fs::write(
        output_dir.join("config.toml"),
        toml::to_string_pretty(config)?,
    )?;

    let mut all = Vec::new();
    for &method in &methods {
        for &seed in &config.experiment.seeds {
            let dir = run_dir(&output_dir, method, seed);
            println!("training {} seed {seed}", method.name());
            train_run(config, method, seed, &dir)?;
            let metrics = eval_run(config, method, seed, &dir)?;
            let auc_at_zero = metrics.core.first().and_then(|c| c.auc);
            println!(
                "evaluated {} seed {seed}: core auc {} over {} test patches",
                method.name(),
                fmt_opt(auc_at_zero),
                metrics.patch.n_patches
            );
            all.push(metrics);
        }
    }

    write_json(&output_dir.join("summary.json"), &summarize_metrics(&all)?)?;

    let mut artifacts = Vec::new();
    collect_artifacts(&output_dir, &output_dir, &mut artifacts)?;
    artifacts.sort();
    write_json(
        &output_dir.join("manifest.json"),
        &Manifest {
            config: config.clone(),
            artifacts,
        },
    )?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> FileConfig {
        let mut config = FileConfig::default();
        config.synth.n_patients = 10;
        config.synth.cores_per_patient = 2;
        config.synth.patches_per_core = 4;
        config.synth.image_size = (16, 16);
        config.synth.class_separation = 1.5;
        config.model.input_size = (16, 16);
        config.train.max_epochs = 2;
        config.train.batch_size = 32;
        config.experiment.methods = vec!["edl".into()];
        config.experiment.seeds = vec![0];
        config.experiment.tau_grid = vec![0.0, 0.7];
        config.experiment.output_dir = dir.to_string_lossy().into_owned();
        config.experiment.ood_eval_fraction = 0.25;
        config
    }

    #[test]
    fn experiment_writes_complete_artifact_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config(&tmp.path().join("runs"));
        let metrics = run_experiment(&config).unwrap();
        assert_eq!(metrics.len(), 1);

        let root = Path::new(&config.experiment.output_dir);
        let run = root.join("edl/seed_0");
        for file in [
            "history.jsonl",
            "checkpoint.evck",
            "train_summary.json",
            "metrics.json",
            "curve.csv",
            "reliability.csv",
        ] {
            assert!(run.join(file).exists(), "missing {file}");
        }
        for file in ["config.toml", "summary.json", "manifest.json"] {
            assert!(root.join(file).exists(), "missing {file}");
        }

        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(root.join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert!(manifest
            .artifacts
            .contains(&"edl/seed_0/metrics.json".to_string()));
        let mut sorted = manifest.artifacts.clone();
        sorted.sort();
        assert_eq!(manifest.artifacts, sorted);

        let m = &metrics[0];
        assert_eq!(m.method, "edl");
        assert!(m.patch.n_patches > 0);
        assert_eq!(m.core.len(), config.experiment.tau_grid.len());
        assert!(m.ood.is_some());
        let ood = m.ood.as_ref().unwrap();
        assert!(ood.n_ood > 0 && ood.n_id > 0);
        // Curve rows: header + one per tau.
        let curve = std::fs::read_to_string(run.join("curve.csv")).unwrap();
        assert_eq!(curve.lines().count(), 1 + config.experiment.tau_grid.len());
    }

    #[test]
    fn rerunning_reproduces_metrics_and_checkpoint_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let config_a = tiny_config(&tmp.path().join("a"));
        let config_b = tiny_config(&tmp.path().join("b"));
        run_experiment(&config_a).unwrap();
        run_experiment(&config_b).unwrap();

        for file in [
            "edl/seed_0/metrics.json",
            "edl/seed_0/checkpoint.evck",
            "edl/seed_0/history.jsonl",
            "edl/seed_0/curve.csv",
            "summary.json",
        ] {
            let a = std::fs::read(Path::new(&config_a.experiment.output_dir).join(file)).unwrap();
            let b = std::fs::read(Path::new(&config_b.experiment.output_dir).join(file)).unwrap();
            assert_eq!(a, b, "artifact {file} differs between identical reruns");
        }
    }

    #[test]
    fn unknown_method_fails_before_any_training() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = tiny_config(&tmp.path().join("runs"));
        config.experiment.methods = vec!["edl".into(), "bogus".into()];
        assert!(run_experiment(&config).is_err());
        // Nothing was trained or written for the valid method either.
        assert!(!Path::new(&config.experiment.output_dir).join("edl").exists());
    }

    #[test]
    fn dropout_free_model_rejects_mc_dropout_method() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = tiny_config(&tmp.path().join("runs"));
        config.model.dropout_rate = 0.0;
        config.experiment.methods = vec!["mc-dropout".into()];
        assert!(run_experiment(&config).is_err());
    }

    #[test]
    fn summary_aggregates_leaves_per_method() {
        let base = RunMetrics {
            method: "edl".into(),
            seed: 0,
            optimizer: OPTIMIZER.into(),
            best_epoch: Some(1),
            best_val_auc: Some(0.8),
            patch: PatchMetrics {
                n_patches: 10,
                balanced_accuracy_weak: 0.7,
                balanced_accuracy_true: None,
                ece_weak: 0.1,
                ece_true: None,
            },
            core: vec![CoreTauMetrics {
                tau: 0.5,
                predicted_cores: 4,
                rejected_cores: 1,
                auc: Some(0.9),
                sensitivity: None,
                specificity: None,
                balanced_accuracy: None,
            }],
            ood: None,
        };
        let mut second = base.clone();
        second.seed = 1;
        second.patch.balanced_accuracy_weak = 0.9;
        second.core[0].auc = Some(0.7);

        let summary = summarize_metrics(&[base, second]).unwrap();
        let edl = &summary["edl"];
        let bacc = &edl["patch.balanced_accuracy_weak"];
        assert!((bacc.mean - 0.8).abs() < 1e-12);
        assert!((bacc.std - 0.1).abs() < 1e-12);
        assert_eq!(bacc.n, 2);
        let auc = &edl["core[tau_0.5].auc"];
        assert!((auc.mean - 0.8).abs() < 1e-12);
        assert!(!edl.contains_key("seed"));
    }
}
