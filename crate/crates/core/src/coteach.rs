//! Co-teaching trainer: two peer networks train side by side, and each
//! epoch every peer picks the smallest-loss samples in the batch for the
//! *other* peer's optimizer update. Under noisy weak labels the small-loss
//! subset is enriched in correctly labelled samples, so the peers shield
//! each other from memorizing the noise. A single-model arm with the
//! selection disabled serves as the ablation.

use std::collections::HashSet;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{ce_loss_grad, ce_per_sample_losses, softmax2, ProbOutput};
use crate::domain::BiopsyCore;
use crate::edl::{self, EdlLossConfig};
use crate::error::{Error, Result};
use crate::eval::{aggregate_cores, rank_auc, PatchPrediction};
use crate::model::{
    save_backbone_bytes, AdamW, Backbone, BackboneConfig, ForwardMode,
};
use crate::rng::{mix64, substream_rng};

/// Salt for peer A's weight initialization stream.
const SALT_PEER_A: u64 = 0xA11A_57A6;
/// Salt for peer B's weight initialization stream.
const SALT_PEER_B: u64 = 0xB0B5_1DE5;
/// Substream ids for epoch shuffling and per-peer dropout draws.
const STREAM_SHUFFLE: u64 = 0x5F1E;
const STREAM_DROP_A: u64 = 0xD801;
const STREAM_DROP_B: u64 = 0xD802;
/// Batch size used for inference-only passes.
const PREDICT_BATCH: usize = 256;

/// Which per-sample training loss drives selection and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Evidential loss: Bayes risk plus annealed KL regularizer.
    Edl,
    /// Plain softmax cross-entropy.
    CrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edl" => Ok(Self::Edl),
            "cross_entropy" | "ce" => Ok(Self::CrossEntropy),
            other => Err(Error::InvalidConfig(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoteachConfig {
    /// Fraction of samples eventually dropped by the selection schedule.
    pub gamma: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_kind: LossKind,
    /// Evidential loss settings; ignored for cross-entropy.
    pub edl: EdlLossConfig,
}

impl Default for CoteachConfig {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            max_epochs: 30,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            loss_kind: LossKind::Edl,
            edl: EdlLossConfig::default(),
        }
    }
}

impl CoteachConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        self.edl.validate()
    }
}

/// Selection-ratio schedule: starts at 1, decays linearly with epoch, and
/// floors at `1 − gamma` from epoch `gamma·max_epochs` onward. Epochs are
/// 0-indexed.
pub fn selection_ratio(epoch: usize, max_epochs: usize, gamma: f64) -> Result<f64> {
    if max_epochs == 0 {
        return Err(Error::InvalidConfig(
            "selection schedule needs max_epochs >= 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    if epoch > max_epochs {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} lies beyond max_epochs {max_epochs}"
        )));
    }
    Ok(1.0 - (epoch as f64 / max_epochs as f64).min(gamma))
}

/// Indices of the `k = max(1, floor(ratio·N))` smallest losses, ties broken
/// toward the lower index, returned sorted ascending.
pub fn select_small_loss(losses: &[f64], ratio: f64) -> Result<Vec<usize>> {
    if losses.is_empty() {
        return Err(Error::EmptyInput("selection losses"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "selection ratio {ratio} outside (0, 1]"
        )));
    }
    if losses.iter().any(|l| l.is_nan()) {
        return Err(Error::InvalidConfig("NaN loss in selection".into()));
    }
    let n = losses.len();
    // The tiny epsilon keeps k exact when ratio·N is an integer up to float
    // rounding (e.g. 0.6 · 5).
    let k = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// A dataset flattened for training: stacked patch tensors plus per-patch
/// weak labels and core bookkeeping. Deliberately carries no hidden ground
/// truth — training code cannot peek at it. Patches appear in core order,
/// and within each core in patch order, so evaluation code can re-align
/// oracle labels afterwards via [`attach_oracle_labels`].
#[derive(Debug, Clone)]
pub struct TrainingSet {
    patches: Array3<f32>,
    labels: Vec<u8>,
    core_index: Vec<usize>,
    core_ids: Vec<String>,
    core_labels: Vec<u8>,
}

impl TrainingSet {
    pub fn from_cores(cores: &[BiopsyCore]) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::EmptyInput("cores"));
        }
        let (h, w) = cores[0].patches()[0].pixels().dim();
        let total: usize = cores.iter().map(|c| c.patches().len()).sum();
        let mut patches = Array3::zeros((total, h, w));
        let mut labels = Vec::with_capacity(total);
        let mut core_index = Vec::with_capacity(total);
        let mut core_ids = Vec::with_capacity(cores.len());
        let mut core_labels = Vec::with_capacity(cores.len());
        let mut row = 0;
        for (ci, core) in cores.iter().enumerate() {
            core_ids.push(core.core_id().to_string());
            core_labels.push(core.weak_label());
            for patch in core.patches() {
                if patch.pixels().dim() != (h, w) {
                    return Err(Error::ShapeMismatch {
                        expected: format!("({h}, {w}) patches"),
                        got: format!("{:?}", patch.pixels().dim()),
                    });
                }
                patches.index_axis_mut(Axis(0), row).assign(patch.pixels());
                labels.push(patch.weak_label());
                core_index.push(ci);
                row += 1;
            }
        }
        Ok(Self { patches, labels, core_index, core_ids, core_labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_size(&self) -> (usize, usize) {
        let (_, h, w) = self.patches.dim();
        (h, w)
    }

    pub fn patches(&self) -> &Array3<f32> {
        &self.patches
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn core_ids(&self) -> &[String] {
        &self.core_ids
    }

    pub fn core_index(&self) -> &[usize] {
        &self.core_index
    }

    pub fn core_labels(&self) -> &[u8] {
        &self.core_labels
    }

    /// Copies the given rows into a dense batch with their labels.
    pub fn gather(&self, idx: &[usize]) -> (Array3<f32>, Vec<u8>) {
        let (_, h, w) = self.patches.dim();
        let mut out = Array3::zeros((idx.len(), h, w));
        for (row, &i) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), row)
                .assign(&self.patches.index_axis(Axis(0), i));
        }
        (out, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Copies hidden per-patch ground truth onto predictions produced from a
/// [`TrainingSet`] built over the same cores in the same order. Kept apart
/// from training on purpose: only evaluation code calls this.
pub fn attach_oracle_labels(
    predictions: &mut [PatchPrediction],
    cores: &[BiopsyCore],
) -> Result<()> {
    let total: usize = cores.iter().map(|c| c.patches().len()).sum();
    if total != predictions.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{total} predictions"),
            got: format!("{}", predictions.len()),
        });
    }
    let mut k = 0;
    for core in cores {
        for patch in core.patches() {
            if predictions[k].core_id != core.core_id() {
                return Err(Error::InvalidConfig(format!(
                    "prediction {k} belongs to core {}, expected {}",
                    predictions[k].core_id,
                    core.core_id()
                )));
            }
            predictions[k].true_label = patch.oracle().map(|o| o.true_label);
            k += 1;
        }
    }
    Ok(())
}

/// Flattens per-patch out-of-distribution flags in [`TrainingSet`] order.
/// Patches without an oracle annotation count as in-distribution.
pub fn flatten_ood_flags(cores: &[BiopsyCore]) -> Vec<bool> {
    cores
        .iter()
        .flat_map(|c| c.patches())
        .map(|p| p.oracle().map(|o| o.is_ood).unwrap_or(false))
        .collect()
}

fn batch_losses(
    logits: &Array2<f64>,
    labels: &[u8],
    epoch: usize,
    config: &CoteachConfig,
) -> Result<Vec<f64>> {
    match config.loss_kind {
        LossKind::Edl => edl::per_sample_losses(logits, labels, epoch, &config.edl),
        LossKind::CrossEntropy => ce_per_sample_losses(logits, labels),
    }
}

fn loss_and_grad(
    logits: &Array2<f64>,
    labels: &[u8],
    epoch: usize,
    config: &CoteachConfig,
) -> Result<(f64, Array2<f64>)> {
    match config.loss_kind {
        LossKind::Edl => edl::edl_total_loss_grad(logits, labels, epoch, &config.edl),
        LossKind::CrossEntropy => ce_loss_grad(logits, labels),
    }
}

fn gather_rows(batch: &Array3<f32>, idx: &[usize]) -> Array3<f32> {
    let (_, h, w) = batch.dim();
    let mut out = Array3::zeros((idx.len(), h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&batch.index_axis(Axis(0), i));
    }
    out
}

/// One forward/backward/step on the selected subset; returns the subset loss.
fn update_on(
    model: &mut Backbone,
    opt: &mut AdamW,
    batch: &Array3<f32>,
    labels: &[u8],
    idx: &[usize],
    epoch: usize,
    config: &CoteachConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let sub = gather_rows(batch, idx);
    let sub_labels: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
    let logits = model.forward(&sub, ForwardMode::Train, Some(rng))?;
    let (loss, grad) = loss_and_grad(&logits, &sub_labels, epoch, config)?;
    model.backward(&grad)?;
    opt.step(model)?;
    Ok(loss)
}

/// The two peers with their optimizers and dropout streams.
#[derive(Debug)]
pub struct PeerPair {
    pub model_a: Backbone,
    pub model_b: Backbone,
    opt_a: AdamW,
    opt_b: AdamW,
    rng_a: ChaCha8Rng,
    rng_b: ChaCha8Rng,
}

impl PeerPair {
    /// Two identically configured backbones with independently drawn
    /// initial weights, both derived from `seed`.
    pub fn new(
        model_config: &BackboneConfig,
        config: &CoteachConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model_a: Backbone::new(*model_config, mix64(seed ^ SALT_PEER_A))?,
            model_b: Backbone::new(*model_config, mix64(seed ^ SALT_PEER_B))?,
            opt_a: AdamW::new(config.learning_rate, config.weight_decay),
            opt_b: AdamW::new(config.learning_rate, config.weight_decay),
            rng_a: substream_rng(seed, STREAM_DROP_A),
            rng_b: substream_rng(seed, STREAM_DROP_B),
        })
    }
}

/// What one co-teaching step did: the schedule value, each peer's full-batch
/// mean loss before any update, and the index sets each peer selected (A's
/// selection trains B and vice versa).
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub selection_ratio: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub selected_by_a: Vec<usize>,
    pub selected_by_b: Vec<usize>,
}

/// One mini-batch of co-teaching: both peers score the full batch with
/// their pre-update weights, each selects its small-loss subset, then A's
/// subset drives one optimizer step of B and B's subset one step of A.
pub fn coteach_step(
    pair: &mut PeerPair,
    batch: &Array3<f32>,
    labels: &[u8],
    epoch: usize,
    config: &CoteachConfig,
) -> Result<StepReport> {
    let n = batch.dim().0;
    if n == 0 {
        return Err(Error::EmptyInput("co-teaching batch"));
    }
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    let ratio = selection_ratio(epoch, config.max_epochs, config.gamma)?;

    // Score with pre-update weights for both peers so neither update can
    // leak into the other's selection.
    let logits_a = pair.model_a.forward(batch, ForwardMode::Loss, None)?;
    let logits_b = pair.model_b.forward(batch, ForwardMode::Loss, None)?;
    let losses_a = batch_losses(&logits_a, labels, epoch, config)?;
    let losses_b = batch_losses(&logits_b, labels, epoch, config)?;
    let selected_by_a = select_small_loss(&losses_a, ratio)?;
    let selected_by_b = select_small_loss(&losses_b, ratio)?;

    update_on(
        &mut pair.model_b,
        &mut pair.opt_b,
        batch,
        labels,
        &selected_by_a,
        epoch,
        config,
        &mut pair.rng_b,
    )?;
    update_on(
        &mut pair.model_a,
        &mut pair.opt_a,
        batch,
        labels,
        &selected_by_b,
        epoch,
        config,
        &mut pair.rng_a,
    )?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(StepReport {
        selection_ratio: ratio,
        loss_a: mean(&losses_a),
        loss_b: mean(&losses_b),
        selected_by_a,
        selected_by_b,
    })
}

/// Per-epoch training record; serialized one-per-line into history files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub selection_ratio: f64,
    pub train_loss_a: f64,
    /// Absent in the single-model arm.
    pub train_loss_b: Option<f64>,
    /// Core-level validation AUC; absent when undefined (single-class split).
    pub val_core_auc_a: Option<f64>,
    pub val_core_auc_b: Option<f64>,
    pub val_patch_accuracy_a: f64,
    pub val_patch_accuracy_b: Option<f64>,
}

/// Final state of a training run plus the model-selection outcome.
#[derive(Debug)]
pub struct TrainResult {
    pub model_a: Backbone,
    /// Absent in the single-model arm.
    pub model_b: Option<Backbone>,
    pub history: Vec<EpochRecord>,
    /// Archive bytes of the peer/epoch with the best validation core AUC;
    /// falls back to the final (or initial, if no epochs ran) first model
    /// when the AUC was never defined.
    pub best_checkpoint: Vec<u8>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
}

/// Maps a logit pair to `(prob_cancer, confidence, predicted_label)` under
/// the given head.
pub fn head_outputs(l0: f64, l1: f64, kind: LossKind) -> Result<(f64, f64, u8)> {
    match kind {
        LossKind::Edl => {
            let (e0, e1) = (edl::softplus(l0), edl::softplus(l1));
            let out = edl::evidence_to_output(e0, e1)?;
            Ok((
                edl::evidence_to_prob_cancer(e0, e1),
                out.confidence,
                out.predicted_label,
            ))
        }
        LossKind::CrossEntropy => {
            let (_, p1) = softmax2(l0, l1);
            let out = ProbOutput::from_prob(p1)?;
            Ok((out.prob_cancer, out.confidence, out.predicted_label))
        }
    }
}

/// Deterministic inference over a whole set: evaluation-mode forwards in
/// fixed-size chunks, mapped through the head matching `kind`. Ground-truth
/// fields are left unset; see [`attach_oracle_labels`].
pub fn predict_patches(
    model: &mut Backbone,
    set: &TrainingSet,
    kind: LossKind,
) -> Result<Vec<PatchPrediction>> {
    if set.is_empty() {
        return Err(Error::EmptyInput("prediction set"));
    }
    let n = set.len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + PREDICT_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (batch, _) = set.gather(&idx);
        let logits = model.forward(&batch, ForwardMode::Eval, None)?;
        for (row, i) in (start..end).enumerate() {
            let (prob_cancer, confidence, predicted_label) =
                head_outputs(logits[[row, 0]], logits[[row, 1]], kind)?;
            out.push(PatchPrediction {
                prob_cancer,
                confidence,
                predicted_label,
                core_id: set.core_ids[set.core_index[i]].clone(),
                weak_label: set.labels[i],
                true_label: None,
            });
        }
        start = end;
    }
    Ok(out)
}

/// Validation pass: core-level AUC at threshold 0 (no rejection) against
/// weak labels, plus raw patch accuracy.
fn validation_metrics(
    model: &mut Backbone,
    val: &TrainingSet,
    kind: LossKind,
) -> Result<(Option<f64>, f64)> {
    let preds = predict_patches(model, val, kind)?;
    let correct = preds
        .iter()
        .filter(|p| p.predicted_label == p.weak_label)
        .count();
    let acc = correct as f64 / preds.len() as f64;
    let cores = aggregate_cores(&preds, 0.0)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (pred, weak) in &cores {
        if let Some(s) = pred.score {
            scores.push(s);
            labels.push(*weak == 1);
        }
    }
    let auc = rank_auc(&scores, &labels).ok();
    Ok((auc, acc))
}

fn check_patient_disjoint(train: &[BiopsyCore], val: &[BiopsyCore]) -> Result<()> {
    let train_patients: HashSet<&str> = train.iter().map(|c| c.patient_id()).collect();
    if let Some(shared) = val
        .iter()
        .map(|c| c.patient_id())
        .find(|p| train_patients.contains(p))
    {
        return Err(Error::InvalidConfig(format!(
            "patient {shared} appears in both train and validation splits"
        )));
    }
    Ok(())
}

struct BestTracker {
    auc: Option<f64>,
    epoch: Option<usize>,
    bytes: Option<Vec<u8>>,
}

impl BestTracker {
    fn new() -> Self {
        Self { auc: None, epoch: None, bytes: None }
    }

    /// Keeps the best AUC; later offers win ties, so among equally ranked
    /// checkpoints the most-trained one is returned.
    fn offer(&mut self, auc: Option<f64>, epoch: usize, model: &Backbone) {
        if let Some(a) = auc {
            if self.auc.map_or(true, |best| a >= best) {
                self.auc = Some(a);
                self.epoch = Some(epoch);
                self.bytes = Some(save_backbone_bytes(model));
            }
        }
    }
}

fn shuffled_batches(
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn prepare_sets(
    train_cores: &[BiopsyCore],
    val_cores: &[BiopsyCore],
    model_config: &BackboneConfig,
) -> Result<(TrainingSet, TrainingSet)> {
    if train_cores.is_empty() {
        return Err(Error::EmptyInput("training cores"));
    }
    if val_cores.is_empty() {
        return Err(Error::EmptyInput("validation cores"));
    }
    check_patient_disjoint(train_cores, val_cores)?;
    let train = TrainingSet::from_cores(train_cores)?;
    let val = TrainingSet::from_cores(val_cores)?;
    for set in [&train, &val] {
        if set.input_size() != model_config.input_size {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} patches", model_config.input_size),
                got: format!("{:?}", set.input_size()),
            });
        }
    }
    Ok((train, val))
}

/// Trains a co-teaching pair and returns the best peer by validation core
/// AUC. Fully deterministic in `seed`.
pub fn train_pair(
    train_cores: &[BiopsyCore],
    val_cores: &[BiopsyCore],
    model_config: &BackboneConfig,
    config: &CoteachConfig,
    seed: u64,
) -> Result<TrainResult> {
    config.validate()?;
    let (train, val) = prepare_sets(train_cores, val_cores, model_config)?;
    let mut pair = PeerPair::new(model_config, config, seed)?;
    let mut shuffle_rng = substream_rng(seed, STREAM_SHUFFLE);
    let mut best = BestTracker::new();
    let mut history = Vec::with_capacity(config.max_epochs);

    for epoch in 0..config.max_epochs {
        let mut loss_sum_a = 0.0;
        let mut loss_sum_b = 0.0;
        let mut seen = 0usize;
        let mut ratio = 1.0;
        for idx in shuffled_batches(train.len(), config.batch_size, &mut shuffle_rng) {
            let (batch, labels) = train.gather(&idx);
            let report = coteach_step(&mut pair, &batch, &labels, epoch, config)?;
            ratio = report.selection_ratio;
            loss_sum_a += report.loss_a * idx.len() as f64;
            loss_sum_b += report.loss_b * idx.len() as f64;
            seen += idx.len();
        }
        let (auc_a, acc_a) = validation_metrics(&mut pair.model_a, &val, config.loss_kind)?;
        let (auc_b, acc_b) = validation_metrics(&mut pair.model_b, &val, config.loss_kind)?;
        best.offer(auc_a, epoch, &pair.model_a);
        best.offer(auc_b, epoch, &pair.model_b);
        history.push(EpochRecord {
            epoch,
            selection_ratio: ratio,
            train_loss_a: loss_sum_a / seen as f64,
            train_loss_b: Some(loss_sum_b / seen as f64),
            val_core_auc_a: auc_a,
            val_core_auc_b: auc_b,
            val_patch_accuracy_a: acc_a,
            val_patch_accuracy_b: Some(acc_b),
        });
    }

    let best_checkpoint = best
        .bytes
        .take()
        .unwrap_or_else(|| save_backbone_bytes(&pair.model_a));
    Ok(TrainResult {
        model_a: pair.model_a,
        model_b: Some(pair.model_b),
        history,
        best_checkpoint,
        best_epoch: best.epoch,
        best_val_auc: best.auc,
    })
}

/// Ablation arm: one model, no small-loss selection (every sample trains),
/// same loss, optimizer, schedule bookkeeping, and model selection.
pub fn train_single(
    train_cores: &[BiopsyCore],
    val_cores: &[BiopsyCore],
    model_config: &BackboneConfig,
    config: &CoteachConfig,
    seed: u64,
) -> Result<TrainResult> {
    config.validate()?;
    let (train, val) = prepare_sets(train_cores, val_cores, model_config)?;
    let mut model = Backbone::new(*model_config, mix64(seed ^ SALT_PEER_A))?;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut drop_rng = substream_rng(seed, STREAM_DROP_A);
    let mut shuffle_rng = substream_rng(seed, STREAM_SHUFFLE);
    let mut best = BestTracker::new();
    let mut history = Vec::with_capacity(config.max_epochs);

    for epoch in 0..config.max_epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in shuffled_batches(train.len(), config.batch_size, &mut shuffle_rng) {
            let (batch, labels) = train.gather(&idx);
            let all: Vec<usize> = (0..idx.len()).collect();
            let loss = update_on(
                &mut model,
                &mut opt,
                &batch,
                &labels,
                &all,
                epoch,
                config,
                &mut drop_rng,
            )?;
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let (auc, acc) = validation_metrics(&mut model, &val, config.loss_kind)?;
        best.offer(auc, epoch, &model);
        history.push(EpochRecord {
            epoch,
            selection_ratio: 1.0,
            train_loss_a: loss_sum / seen as f64,
            train_loss_b: None,
            val_core_auc_a: auc,
            val_core_auc_b: None,
            val_patch_accuracy_a: acc,
            val_patch_accuracy_b: None,
        });
    }

    let best_checkpoint = best
        .bytes
        .take()
        .unwrap_or_else(|| save_backbone_bytes(&model));
    Ok(TrainResult {
        model_a: model,
        model_b: None,
        history,
        best_checkpoint,
        best_epoch: best.epoch,
        best_val_auc: best.auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneKind;
    use crate::synthgen::{
        generate_dataset, split_by_patient, InvolvementDistribution, SynthConfig,
    };

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn selection_ratio_schedule_endpoints_and_floor() {
        // Start of training keeps everything.
        assert!(close(selection_ratio(0, 100, 0.4).unwrap(), 1.0));
        // Epoch 40 of 100 reaches the floor 1 − γ.
        assert!(close(selection_ratio(40, 100, 0.4).unwrap(), 0.6));
        // The floor holds through the final epoch.
        assert!(close(selection_ratio(100, 100, 0.4).unwrap(), 0.6));
        // Monotone non-increasing, bounded in [1 − γ, 1].
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let r = selection_ratio(e, 100, 0.4).unwrap();
            assert!(r <= prev + 1e-15);
            assert!((0.6..=1.0).contains(&r));
            prev = r;
        }
        assert!(selection_ratio(1, 0, 0.4).is_err());
        assert!(selection_ratio(101, 100, 0.4).is_err());
        assert!(selection_ratio(0, 10, 1.5).is_err());
    }

    /// Brute-force oracle: sort (loss, index) pairs, take the first k indices.
    fn select_oracle(losses: &[f64], ratio: f64) -> Vec<usize> {
        let n = losses.len();
        let k = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n);
        let mut pairs: Vec<(f64, usize)> =
            losses.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
        out.sort_unstable();
        out
    }

    #[test]
    fn small_loss_selection_matches_sort_oracle() {
        assert_eq!(
            select_small_loss(&[0.9, 0.1, 0.5, 0.2], 0.5).unwrap(),
            vec![1, 3]
        );
        assert_eq!(
            select_small_loss(&[0.3, 0.3, 0.3, 0.3], 0.5).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            select_small_loss(&[0.9, 0.1, 0.5], 1.0).unwrap(),
            vec![0, 1, 2]
        );
        // k floors at 1.
        assert_eq!(select_small_loss(&[5.0, 1.0, 3.0], 0.1).unwrap(), vec![1]);
        // Randomized agreement with the oracle.
        let mut rng = substream_rng(77, 0);
        use rand::Rng;
        for trial in 0..50 {
            let n = rng.gen_range(1..40);
            let losses: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..8) as f64) / 4.0)
                .collect();
            let ratio = rng.gen_range(1..=10) as f64 / 10.0;
            assert_eq!(
                select_small_loss(&losses, ratio).unwrap(),
                select_oracle(&losses, ratio),
                "trial {trial}: losses {losses:?} ratio {ratio}"
            );
        }
        assert!(select_small_loss(&[], 0.5).is_err());
        assert!(select_small_loss(&[1.0], 0.0).is_err());
        assert!(select_small_loss(&[1.0], 1.1).is_err());
        assert!(select_small_loss(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn ratio_times_n_stays_exact_at_representable_fractions() {
        // 0.6 · 5 must select 3, not fall to 2 through float truncation.
        let losses = [0.5, 0.4, 0.3, 0.2, 0.1];
        let r = selection_ratio(40, 100, 0.4).unwrap();
        assert_eq!(select_small_loss(&losses, r).unwrap(), vec![2, 3, 4]);
    }

    fn tiny_config(h: usize) -> (BackboneConfig, CoteachConfig) {
        (
            BackboneConfig {
                kind: BackboneKind::SmallCnn,
                dropout_rate: 0.0,
                input_size: (h, h),
            },
            CoteachConfig {
                max_epochs: 4,
                batch_size: 32,
                learning_rate: 3e-4,
                ..CoteachConfig::default()
            },
        )
    }

    fn synth_split(
        cfg: &SynthConfig,
        fractions: (f64, f64, f64),
        seed: u64,
    ) -> (Vec<BiopsyCore>, Vec<BiopsyCore>) {
        let cores = generate_dataset(cfg).unwrap();
        let (train, val, _) = split_by_patient(cores, fractions, seed).unwrap();
        (train, val)
    }

    fn noisy_synth(seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: 10,
            cores_per_patient: 4,
            patches_per_core: 8,
            involvement: InvolvementDistribution::Fixed { value: 0.7 },
            image_size: (16, 16),
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn full_ratio_step_equals_independent_full_batch_updates() {
        let (model_cfg, mut cfg) = tiny_config(16);
        cfg.max_epochs = 10; // epoch 0 → ratio 1
        let synth = noisy_synth(3);
        let cores = generate_dataset(&synth).unwrap();
        let set = TrainingSet::from_cores(&cores[..4]).unwrap();
        let idx: Vec<usize> = (0..set.len()).collect();
        let (batch, labels) = set.gather(&idx);

        let mut pair = PeerPair::new(&model_cfg, &cfg, 5).unwrap();
        let mut solo_a = pair.model_a.clone();
        let mut solo_b = pair.model_b.clone();
        let mut opt_a = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        let mut opt_b = AdamW::new(cfg.learning_rate, cfg.weight_decay);

        let report = coteach_step(&mut pair, &batch, &labels, 0, &cfg).unwrap();
        assert_eq!(report.selected_by_a, idx);
        assert_eq!(report.selected_by_b, idx);

        // Independent full-batch updates of clones land on identical weights.
        let all: Vec<usize> = (0..batch.dim().0).collect();
        let mut rng = substream_rng(0, 0); // unused: dropout rate is 0
        update_on(&mut solo_a, &mut opt_a, &batch, &labels, &all, 0, &cfg, &mut rng)
            .unwrap();
        update_on(&mut solo_b, &mut opt_b, &batch, &labels, &all, 0, &cfg, &mut rng)
            .unwrap();
        let weights = |m: &Backbone| {
            let mut v = Vec::new();
            m.visit_params(&mut |p| v.extend(p.value.iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(weights(&pair.model_a), weights(&solo_a));
        assert_eq!(weights(&pair.model_b), weights(&solo_b));
    }

    #[test]
    fn identical_peers_select_identical_sets() {
        let (model_cfg, cfg) = tiny_config(16);
        let synth = noisy_synth(4);
        let cores = generate_dataset(&synth).unwrap();
        let set = TrainingSet::from_cores(&cores[..4]).unwrap();
        let idx: Vec<usize> = (0..set.len()).collect();
        let (batch, labels) = set.gather(&idx);

        let mut pair = PeerPair::new(&model_cfg, &cfg, 6).unwrap();
        pair.model_b = pair.model_a.clone();
        let report = coteach_step(&mut pair, &batch, &labels, 2, &cfg).unwrap();
        assert_eq!(report.selected_by_a, report.selected_by_b);
        assert!(report.selected_by_a.len() < batch.dim().0);
    }

    #[test]
    fn selected_sets_are_cleaner_than_the_batch_under_label_noise() {
        // 30% of cancer-core patches carry a wrong weak label. After a few
        // epochs the small-loss subsets must be cleaner than the raw batch,
        // across three independent seeds.
        for seed in [0u64, 1, 2] {
            let synth = SynthConfig {
                n_patients: 8,
                cores_per_patient: 4,
                patches_per_core: 10,
                involvement: InvolvementDistribution::Fixed { value: 0.7 },
                class_separation: 1.5,
                image_size: (16, 16),
                seed: 100 + seed,
                ..SynthConfig::default()
            };
            let cores = generate_dataset(&synth).unwrap();
            let set = TrainingSet::from_cores(&cores).unwrap();
            let clean: Vec<bool> = cores
                .iter()
                .flat_map(|c| c.patches())
                .map(|p| p.oracle().unwrap().true_label == p.weak_label())
                .collect();
            let batch_clean =
                clean.iter().filter(|&&c| c).count() as f64 / clean.len() as f64;
            assert!(batch_clean < 0.95, "fixture must actually contain noise");

            let model_cfg = BackboneConfig {
                kind: BackboneKind::SmallCnn,
                dropout_rate: 0.0,
                input_size: (16, 16),
            };
            let cfg = CoteachConfig {
                max_epochs: 6,
                batch_size: 64,
                learning_rate: 1e-3,
                ..CoteachConfig::default()
            };
            let mut pair = PeerPair::new(&model_cfg, &cfg, seed).unwrap();
            let mut shuffle = substream_rng(seed, STREAM_SHUFFLE);
            let mut selected_clean = 0usize;
            let mut selected_total = 0usize;
            for epoch in 0..cfg.max_epochs {
                let last = epoch + 1 == cfg.max_epochs;
                for idx in shuffled_batches(set.len(), cfg.batch_size, &mut shuffle) {
                    let (batch, labels) = set.gather(&idx);
                    let report =
                        coteach_step(&mut pair, &batch, &labels, epoch, &cfg).unwrap();
                    if last {
                        for sel in [&report.selected_by_a, &report.selected_by_b] {
                            for &s in sel.iter() {
                                selected_total += 1;
                                selected_clean += clean[idx[s]] as usize;
                            }
                        }
                    }
                }
            }
            let selected_fraction = selected_clean as f64 / selected_total as f64;
            assert!(
                selected_fraction > batch_clean,
                "seed {seed}: selected clean fraction {selected_fraction:.3} \
                 not above batch clean fraction {batch_clean:.3}"
            );
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_model_and_empty_history() {
        let (model_cfg, mut cfg) = tiny_config(16);
        cfg.max_epochs = 0;
        let (train, val) = synth_split(&noisy_synth(5), (0.5, 0.5, 0.0), 1);
        let result = train_pair(&train, &val, &model_cfg, &cfg, 9).unwrap();
        assert!(result.history.is_empty());
        assert!(result.best_epoch.is_none());
        assert!(result.best_val_auc.is_none());
        // The fallback checkpoint is the untouched initial first peer.
        let loaded = crate::model::load_backbone_bytes(&result.best_checkpoint).unwrap();
        let fresh = Backbone::new(model_cfg, mix64(9 ^ SALT_PEER_A)).unwrap();
        let weights = |m: &Backbone| {
            let mut v = Vec::new();
            m.visit_params(&mut |p| v.extend(p.value.iter().map(|&x| x as f32)));
            v
        };
        assert_eq!(weights(&loaded), weights(&fresh));
    }

    #[test]
    fn same_seed_reproduces_identical_history() {
        let (model_cfg, mut cfg) = tiny_config(16);
        cfg.max_epochs = 2;
        let (train, val) = synth_split(&noisy_synth(6), (0.5, 0.5, 0.0), 2);
        let a = train_pair(&train, &val, &model_cfg, &cfg, 33).unwrap();
        let b = train_pair(&train, &val, &model_cfg, &cfg, 33).unwrap();
        let dump = |h: &[EpochRecord]| serde_json::to_string(h).unwrap();
        assert_eq!(dump(&a.history), dump(&b.history));
        assert_eq!(a.best_checkpoint, b.best_checkpoint);
        let c = train_pair(&train, &val, &model_cfg, &cfg, 34).unwrap();
        assert_ne!(dump(&a.history), dump(&c.history));
    }

    #[test]
    fn separable_classes_reach_high_validation_accuracy() {
        // Zero label noise (full involvement), clearly separated textures.
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
        let (train, val) = synth_split(&synth, (0.7, 0.3, 0.0), 3);
        let model_cfg = BackboneConfig {
            kind: BackboneKind::SmallCnn,
            dropout_rate: 0.0,
            input_size: (16, 16),
        };
        let cfg = CoteachConfig {
            max_epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            ..CoteachConfig::default()
        };
        let result = train_pair(&train, &val, &model_cfg, &cfg, 0).unwrap();
        let top = result
            .history
            .iter()
            .map(|r| r.val_patch_accuracy_a.max(r.val_patch_accuracy_b.unwrap()))
            .fold(0.0f64, f64::max);
        assert!(top > 0.95, "best validation patch accuracy {top:.3}");
        assert!(result.best_val_auc.is_some());

        // The single-model arm learns the separable problem too.
        let single = train_single(&train, &val, &model_cfg, &cfg, 0).unwrap();
        let top_single = single
            .history
            .iter()
            .map(|r| r.val_patch_accuracy_a)
            .fold(0.0f64, f64::max);
        assert!(top_single > 0.95, "single-model accuracy {top_single:.3}");
        assert!(single.model_b.is_none());
        assert!(single.history.iter().all(|r| r.selection_ratio == 1.0));
    }

    #[test]
    fn rejects_overlapping_patients_and_empty_splits() {
        let (model_cfg, cfg) = tiny_config(16);
        let cores = generate_dataset(&noisy_synth(7)).unwrap();
        let err = train_pair(&cores, &cores, &model_cfg, &cfg, 0);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
        assert!(train_pair(&[], &cores, &model_cfg, &cfg, 0).is_err());
        assert!(train_pair(&cores, &[], &model_cfg, &cfg, 0).is_err());
    }

    #[test]
    fn oracle_attachment_aligns_with_set_order() {
        let cores = generate_dataset(&noisy_synth(8)).unwrap();
        let set = TrainingSet::from_cores(&cores).unwrap();
        let mut model = Backbone::new(
            BackboneConfig {
                kind: BackboneKind::SmallCnn,
                dropout_rate: 0.0,
                input_size: (16, 16),
            },
            0,
        )
        .unwrap();
        let mut preds = predict_patches(&mut model, &set, LossKind::Edl).unwrap();
        assert!(preds.iter().all(|p| p.true_label.is_none()));
        attach_oracle_labels(&mut preds, &cores).unwrap();
        let expected: Vec<u8> = cores
            .iter()
            .flat_map(|c| c.patches())
            .map(|p| p.oracle().unwrap().true_label)
            .collect();
        let got: Vec<u8> = preds.iter().map(|p| p.true_label.unwrap()).collect();
        assert_eq!(got, expected);
        // Confidence agrees with the evidential uncertainty complement.
        assert!(preds.iter().all(|p| (0.0..=1.0).contains(&p.confidence)));

        // Mismatched shapes are rejected.
        assert!(attach_oracle_labels(&mut preds[..3], &cores).is_err());
    }
}
