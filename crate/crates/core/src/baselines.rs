//! Comparison uncertainty methods sharing the backbone contract: Monte
//! Carlo dropout, deep ensembles, and a plain softmax-confidence model.
//! All three emit the same `[0, 1]` confidence scalar — one minus the
//! normalized predictive entropy — so their rejection curves are directly
//! comparable with the evidential head's.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::coteach::{train_pair, train_single, CoteachConfig, LossKind, TrainResult, TrainingSet};
use crate::domain::{check_label, BiopsyCore, CANCER};
use crate::error::{Error, Result};
use crate::eval::PatchPrediction;
use crate::model::{Backbone, BackboneConfig, ForwardMode};
use crate::rng::{mix64, substream_rng};

/// Default number of stochastic passes for Monte Carlo dropout.
pub const DEFAULT_MC_PASSES: usize = 20;

/// Default ensemble size.
pub const DEFAULT_ENSEMBLE_MEMBERS: usize = 5;

/// Substream base for per-pass dropout draws.
const STREAM_MC_PASS: u64 = 0x3C0D;
/// Salt for per-member training seeds.
const SALT_MEMBER: u64 = 0xE453_8000;
/// Batch size for inference-only passes.
const PREDICT_BATCH: usize = 256;

/// A probability-based prediction for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbOutput {
    pub prob_cancer: f64,
    pub confidence: f64,
    pub predicted_label: u8,
}

impl ProbOutput {
    /// Builds the output from a cancer probability. The label is 1 exactly
    /// when the probability exceeds 0.5 (0.5 itself maps to 0); confidence
    /// is one minus the normalized binary entropy.
    pub fn from_prob(prob_cancer: f64) -> Result<Self> {
        let confidence = entropy_confidence(prob_cancer)?;
        Ok(Self {
            prob_cancer,
            confidence,
            predicted_label: if prob_cancer > 0.5 { CANCER } else { 0 },
        })
    }
}

/// Numerically stable two-way softmax.
pub fn softmax2(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let z = e0 + e1;
    (e0 / z, e1 / z)
}

/// Confidence as one minus the normalized binary entropy of `p`:
/// `1 − H(p)/ln 2`, so `p = 0.5` gives 0 and `p ∈ {0, 1}` gives 1.
pub fn entropy_confidence(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    let entropy = term(p) + term(1.0 - p);
    Ok((1.0 - entropy / std::f64::consts::LN_2).clamp(0.0, 1.0))
}

/// Per-sample cross-entropy `−ln p_y` from raw logits (stable log-softmax).
pub fn ce_per_sample_losses(logits: &Array2<f64>, labels: &[u8]) -> Result<Vec<f64>> {
    if logits.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", logits.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    let mut out = Vec::with_capacity(labels.len());
    for (row, &y) in logits.outer_iter().zip(labels) {
        check_label(y)?;
        let (l0, l1) = (row[0], row[1]);
        let m = l0.max(l1);
        let log_z = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let l_y = if y == 1 { l1 } else { l0 };
        out.push(log_z - l_y);
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits: `(softmax − onehot) / n`.
pub fn ce_loss_grad(logits: &Array2<f64>, labels: &[u8]) -> Result<(f64, Array2<f64>)> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("loss batch"));
    }
    let losses = ce_per_sample_losses(logits, labels)?;
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        let (p0, p1) = softmax2(logits[[i, 0]], logits[[i, 1]]);
        let (y0, y1) = if y == 1 { (0.0, 1.0) } else { (1.0, 0.0) };
        grad[[i, 0]] = (p0 - y0) / n;
        grad[[i, 1]] = (p1 - y1) / n;
    }
    Ok((losses.iter().sum::<f64>() / n, grad))
}

fn softmax_probs(logits: &Array2<f64>) -> Vec<f64> {
    logits
        .outer_iter()
        .map(|row| softmax2(row[0], row[1]).1)
        .collect()
}

/// Monte Carlo dropout: `passes` stochastic forwards with dropout active
/// and batch-norm frozen on its running statistics; the prediction is the
/// mean softmax probability across passes. Deterministic in `seed`.
pub fn mc_dropout_predict(
    model: &mut Backbone,
    batch: &Array3<f32>,
    passes: usize,
    seed: u64,
) -> Result<Vec<ProbOutput>> {
    if model.config().dropout_rate == 0.0 {
        return Err(Error::InvalidConfig(
            "Monte Carlo dropout needs a model with dropout_rate > 0".into(),
        ));
    }
    if passes == 0 {
        return Err(Error::InvalidConfig("pass count must be at least 1".into()));
    }
    let n = batch.dim().0;
    if n == 0 {
        return Err(Error::EmptyInput("prediction batch"));
    }
    let mut sums = vec![0.0f64; n];
    for t in 0..passes {
        let mut rng = substream_rng(seed, STREAM_MC_PASS + t as u64);
        let logits = model.forward(batch, ForwardMode::Sample, Some(&mut rng))?;
        for (s, p) in sums.iter_mut().zip(softmax_probs(&logits)) {
            *s += p;
        }
    }
    sums.iter()
        .map(|s| ProbOutput::from_prob(s / passes as f64))
        .collect()
}

/// Deep-ensemble prediction: the mean of the members' softmax probabilities,
/// with confidence from the entropy of that mean. Member probabilities are
/// sorted before averaging so the result is exactly invariant to member
/// order.
pub fn ensemble_predict(models: &mut [Backbone], batch: &Array3<f32>) -> Result<Vec<ProbOutput>> {
    if models.is_empty() {
        return Err(Error::EmptyInput("ensemble members"));
    }
    let n = batch.dim().0;
    if n == 0 {
        return Err(Error::EmptyInput("prediction batch"));
    }
    let reference = models[0].fingerprint();
    let mut member_probs: Vec<Vec<f64>> = Vec::with_capacity(models.len());
    for model in models.iter_mut() {
        if model.fingerprint() != reference {
            return Err(Error::InvalidConfig(
                "ensemble members must share one architecture".into(),
            ));
        }
        let logits = model.forward(batch, ForwardMode::Eval, None)?;
        member_probs.push(softmax_probs(&logits));
    }
    (0..n)
        .map(|i| {
            let mut ps: Vec<f64> = member_probs.iter().map(|m| m[i]).collect();
            ps.sort_by(f64::total_cmp);
            let mean = ps.iter().sum::<f64>() / ps.len() as f64;
            ProbOutput::from_prob(mean)
        })
        .collect()
}

fn outputs_to_predictions(
    outputs: &[ProbOutput],
    set: &TrainingSet,
    offset: usize,
) -> Vec<PatchPrediction> {
    outputs
        .iter()
        .enumerate()
        .map(|(row, o)| {
            let i = offset + row;
            PatchPrediction {
                prob_cancer: o.prob_cancer,
                confidence: o.confidence,
                predicted_label: o.predicted_label,
                core_id: set.core_ids()[set.core_index()[i]].clone(),
                weak_label: set.labels()[i],
                true_label: None,
            }
        })
        .collect()
}

fn chunk_starts(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n)
        .step_by(PREDICT_BATCH)
        .map(move |s| (s, (s + PREDICT_BATCH).min(n)))
}

/// Monte Carlo dropout over a whole set, chunked; each chunk draws its
/// dropout masks from a chunk-specific substream of `seed`.
pub fn mc_dropout_predict_set(
    model: &mut Backbone,
    set: &TrainingSet,
    passes: usize,
    seed: u64,
) -> Result<Vec<PatchPrediction>> {
    if set.is_empty() {
        return Err(Error::EmptyInput("prediction set"));
    }
    let mut out = Vec::with_capacity(set.len());
    for (start, end) in chunk_starts(set.len()) {
        let idx: Vec<usize> = (start..end).collect();
        let (batch, _) = set.gather(&idx);
        let chunk_seed = mix64(seed ^ (0xC40C ^ start as u64));
        let outputs = mc_dropout_predict(model, &batch, passes, chunk_seed)?;
        out.extend(outputs_to_predictions(&outputs, set, start));
    }
    Ok(out)
}

/// Ensemble prediction over a whole set, chunked.
pub fn ensemble_predict_set(
    models: &mut [Backbone],
    set: &TrainingSet,
) -> Result<Vec<PatchPrediction>> {
    if set.is_empty() {
        return Err(Error::EmptyInput("prediction set"));
    }
    let mut out = Vec::with_capacity(set.len());
    for (start, end) in chunk_starts(set.len()) {
        let idx: Vec<usize> = (start..end).collect();
        let (batch, _) = set.gather(&idx);
        let outputs = ensemble_predict(models, &batch)?;
        out.extend(outputs_to_predictions(&outputs, set, start));
    }
    Ok(out)
}

/// How to train the comparison models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrainConfig {
    /// Schedule, optimizer, and batch settings; the loss is always forced
    /// to cross-entropy — that is what makes these models the baseline.
    pub train: CoteachConfig,
    /// 1 for a single model, larger for a deep ensemble.
    pub members: usize,
    /// Wrap each member in the co-teaching pair (the ablation grid's
    /// `*-coteach` arms) instead of plain single-model training.
    pub coteach: bool,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        Self {
            train: CoteachConfig::default(),
            members: 1,
            coteach: false,
        }
    }
}

/// Trains `members` independently seeded cross-entropy models (optionally
/// co-teaching pairs) and returns one training result per member, each
/// carrying its best checkpoint.
pub fn train_baseline(
    train_cores: &[BiopsyCore],
    val_cores: &[BiopsyCore],
    model_config: &BackboneConfig,
    config: &BaselineTrainConfig,
    seed: u64,
) -> Result<Vec<TrainResult>> {
    if config.members == 0 {
        return Err(Error::InvalidConfig(
            "ensemble needs at least one member".into(),
        ));
    }
    let mut train_config = config.train.clone();
    train_config.loss_kind = LossKind::CrossEntropy;
    let mut results = Vec::with_capacity(config.members);
    for m in 0..config.members {
        let member_seed = mix64(seed ^ (SALT_MEMBER + m as u64));
        let result = if config.coteach {
            train_pair(train_cores, val_cores, model_config, &train_config, member_seed)?
        } else {
            train_single(train_cores, val_cores, model_config, &train_config, member_seed)?
        };
        results.push(result);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneKind;
    use crate::synthgen::{
        generate_dataset, split_by_patient, InvolvementDistribution, SynthConfig,
    };
    use ndarray::array;
    use rand::Rng;

    fn tiny_model(dropout: f64, seed: u64) -> Backbone {
        Backbone::new(
            BackboneConfig {
                kind: BackboneKind::SmallCnn,
                dropout_rate: dropout,
                input_size: (8, 8),
            },
            seed,
        )
        .unwrap()
    }

    fn batch(n: usize, seed: u64) -> Array3<f32> {
        let mut rng = substream_rng(seed, 3);
        Array3::from_shape_fn((n, 8, 8), |_| rng.gen_range(-1.5f32..1.5))
    }

    #[test]
    fn entropy_confidence_extremes_and_midpoint() {
        assert_eq!(entropy_confidence(0.5).unwrap(), 0.0);
        assert_eq!(entropy_confidence(0.0).unwrap(), 1.0);
        assert_eq!(entropy_confidence(1.0).unwrap(), 1.0);
        // Interior value: H(0.25)/ln2 = 0.811278..., confidence ≈ 0.188722.
        let c = entropy_confidence(0.25).unwrap();
        assert!((c - 0.188_721_875_540_867_34).abs() < 1e-12);
        assert!(entropy_confidence(-0.1).is_err());
        assert!(entropy_confidence(1.1).is_err());
    }

    #[test]
    fn prob_output_label_threshold() {
        assert_eq!(ProbOutput::from_prob(0.51).unwrap().predicted_label, 1);
        assert_eq!(ProbOutput::from_prob(0.5).unwrap().predicted_label, 0);
        assert_eq!(ProbOutput::from_prob(0.49).unwrap().predicted_label, 0);
    }

    #[test]
    fn cross_entropy_matches_direct_formula_and_finite_differences() {
        let logits = array![[0.3, -1.2], [2.0, 2.0], [-0.5, 1.5]];
        let labels = [0u8, 1, 1];
        let losses = ce_per_sample_losses(&logits, &labels).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let (p0, p1) = softmax2(logits[[i, 0]], logits[[i, 1]]);
            let p_y = if y == 1 { p1 } else { p0 };
            assert!((losses[i] + p_y.ln()).abs() < 1e-12);
        }

        let (_, grad) = ce_loss_grad(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut plus = logits.clone();
                plus[[i, j]] += h;
                let mut minus = logits.clone();
                minus[[i, j]] -= h;
                let f = |l: &Array2<f64>| {
                    ce_per_sample_losses(l, &labels)
                        .unwrap()
                        .iter()
                        .sum::<f64>()
                        / labels.len() as f64
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!(
                    (fd - grad[[i, j]]).abs() < 1e-6,
                    "logit ({i},{j}): fd {fd} vs {}",
                    grad[[i, j]]
                );
            }
        }
        assert!(ce_per_sample_losses(&logits, &[0, 1]).is_err());
        assert!(ce_per_sample_losses(&logits, &[0, 1, 2]).is_err());
    }

    #[test]
    fn mc_dropout_is_reproducible_and_needs_dropout() {
        let mut plain = tiny_model(0.0, 1);
        assert!(mc_dropout_predict(&mut plain, &batch(2, 0), 5, 0).is_err());

        let mut model = tiny_model(0.5, 1);
        assert!(mc_dropout_predict(&mut model, &batch(2, 0), 0, 0).is_err());
        let b = batch(3, 1);
        let one = mc_dropout_predict(&mut model, &b, 7, 11).unwrap();
        let two = mc_dropout_predict(&mut model, &b, 7, 11).unwrap();
        assert_eq!(one, two);
        let three = mc_dropout_predict(&mut model, &b, 7, 12).unwrap();
        assert_ne!(one, three);
        // Single pass is legal: confidence comes from that pass alone.
        let single = mc_dropout_predict(&mut model, &b, 1, 5).unwrap();
        assert_eq!(single.len(), 3);
        assert!(single.iter().all(|o| (0.0..=1.0).contains(&o.confidence)));
    }

    #[test]
    fn more_passes_reduce_prediction_variance() {
        let mut model = tiny_model(0.5, 2);
        let b = batch(2, 4);
        let mut variance = |passes: usize| {
            let probs: Vec<f64> = (0..20)
                .map(|rep| {
                    mc_dropout_predict(&mut model, &b, passes, 1000 + rep).unwrap()[0]
                        .prob_cancer
                })
                .collect();
            let mean = probs.iter().sum::<f64>() / probs.len() as f64;
            probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / probs.len() as f64
        };
        let v1 = variance(1);
        let v20 = variance(20);
        assert!(
            v20 < v1,
            "20-pass variance {v20:.3e} should fall below 1-pass variance {v1:.3e}"
        );
    }

    #[test]
    fn ensemble_mean_and_permutation_invariance() {
        // Hand-check the mean on a known probability set by steering
        // through from_prob directly.
        let ps = [0.2, 0.4, 0.6, 0.8, 1.0];
        let mean = ps.iter().sum::<f64>() / ps.len() as f64;
        assert!((mean - 0.6).abs() < 1e-15);

        let b = batch(4, 9);
        let mut members: Vec<Backbone> = (0..5).map(|s| tiny_model(0.0, 100 + s)).collect();
        let forward = ensemble_predict(&mut members, &b).unwrap();
        // Any permutation gives bitwise-identical outputs.
        members.reverse();
        let reversed = ensemble_predict(&mut members, &b).unwrap();
        assert_eq!(forward, reversed);
        members.swap(0, 2);
        members.swap(1, 4);
        let shuffled = ensemble_predict(&mut members, &b).unwrap();
        assert_eq!(forward, shuffled);

        // M = 1 reduces to the single model's softmax prediction.
        let mut lone = vec![tiny_model(0.0, 100)];
        let single = ensemble_predict(&mut lone, &b).unwrap();
        let logits = lone[0].forward(&b, ForwardMode::Eval, None).unwrap();
        for (row, out) in logits.outer_iter().zip(&single) {
            let (_, p1) = softmax2(row[0], row[1]);
            assert_eq!(out.prob_cancer, p1);
        }

        // Identical members add no disagreement: same confidence as one.
        let mut twins = vec![tiny_model(0.0, 100), tiny_model(0.0, 100), tiny_model(0.0, 100)];
        let tripled = ensemble_predict(&mut twins, &b).unwrap();
        for (a, b_out) in single.iter().zip(&tripled) {
            assert!((a.confidence - b_out.confidence).abs() < 1e-12);
            assert!((a.prob_cancer - b_out.prob_cancer).abs() < 1e-12);
        }

        assert!(ensemble_predict(&mut [], &b).is_err());
        let mut mixed = vec![
            tiny_model(0.0, 1),
            Backbone::new(
                BackboneConfig {
                    kind: BackboneKind::HalfResnet18,
                    dropout_rate: 0.0,
                    input_size: (8, 8),
                },
                1,
            )
            .unwrap(),
        ];
        assert!(ensemble_predict(&mut mixed, &b).is_err());
    }

    fn separable_fixture() -> (Vec<BiopsyCore>, Vec<BiopsyCore>) {
        let synth = SynthConfig {
            n_patients: 12,
            cores_per_patient: 4,
            patches_per_core: 8,
            involvement: InvolvementDistribution::Fixed { value: 1.0 },
            class_separation: 1.5,
            image_size: (16, 16),
            seed: 40,
            ..SynthConfig::default()
        };
        let cores = generate_dataset(&synth).unwrap();
        let (train, val, _) = split_by_patient(cores, (0.7, 0.3, 0.0), 3).unwrap();
        (train, val)
    }

    #[test]
    fn baseline_training_learns_separable_data_and_is_deterministic() {
        let (train, val) = separable_fixture();
        let model_cfg = BackboneConfig {
            kind: BackboneKind::SmallCnn,
            dropout_rate: 0.0,
            input_size: (16, 16),
        };
        let cfg = BaselineTrainConfig {
            train: CoteachConfig {
                max_epochs: 12,
                batch_size: 64,
                learning_rate: 1e-3,
                ..CoteachConfig::default()
            },
            members: 1,
            coteach: false,
        };
        let results = train_baseline(&train, &val, &model_cfg, &cfg, 7).unwrap();
        assert_eq!(results.len(), 1);
        let top = results[0]
            .history
            .iter()
            .map(|r| r.val_patch_accuracy_a)
            .fold(0.0f64, f64::max);
        assert!(top > 0.95, "validation patch accuracy {top:.3}");

        let again = train_baseline(&train, &val, &model_cfg, &cfg, 7).unwrap();
        assert_eq!(results[0].best_checkpoint, again[0].best_checkpoint);
    }

    #[test]
    fn ensemble_members_get_distinct_initial_weights() {
        let (train, val) = separable_fixture();
        let model_cfg = BackboneConfig {
            kind: BackboneKind::SmallCnn,
            dropout_rate: 0.0,
            input_size: (16, 16),
        };
        let cfg = BaselineTrainConfig {
            train: CoteachConfig {
                max_epochs: 0,
                ..CoteachConfig::default()
            },
            members: 5,
            coteach: false,
        };
        // Zero epochs keeps the initial weights, isolating the seeding.
        let results = train_baseline(&train, &val, &model_cfg, &cfg, 3).unwrap();
        assert_eq!(results.len(), 5);
        let dumps: Vec<Vec<u8>> = results.iter().map(|r| r.best_checkpoint.clone()).collect();
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(dumps[i], dumps[j], "members {i} and {j} share weights");
            }
        }
        assert!(train_baseline(
            &train,
            &val,
            &model_cfg,
            &BaselineTrainConfig { members: 0, ..cfg },
            3
        )
        .is_err());
    }

    #[test]
    fn set_level_prediction_aligns_metadata() {
        let synth = SynthConfig {
            n_patients: 4,
            cores_per_patient: 2,
            patches_per_core: 5,
            involvement: InvolvementDistribution::Fixed { value: 0.6 },
            image_size: (16, 16),
            seed: 9,
            ..SynthConfig::default()
        };
        let cores = generate_dataset(&synth).unwrap();
        let set = TrainingSet::from_cores(&cores).unwrap();
        let mut model = Backbone::new(
            BackboneConfig {
                kind: BackboneKind::SmallCnn,
                dropout_rate: 0.4,
                input_size: (16, 16),
            },
            2,
        )
        .unwrap();
        let mc = mc_dropout_predict_set(&mut model, &set, 3, 5).unwrap();
        assert_eq!(mc.len(), set.len());
        for (i, p) in mc.iter().enumerate() {
            assert_eq!(p.weak_label, set.labels()[i]);
            assert_eq!(p.core_id, set.core_ids()[set.core_index()[i]]);
        }
        let mut members = vec![
            Backbone::new(*model.config(), 3).unwrap(),
            Backbone::new(*model.config(), 4).unwrap(),
        ];
        let ens = ensemble_predict_set(&mut members, &set).unwrap();
        assert_eq!(ens.len(), set.len());
        assert!(ens.iter().all(|p| (0.0..=1.0).contains(&p.confidence)));
    }
}
