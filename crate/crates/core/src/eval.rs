//! Selective-prediction evaluation: calibration error, core-level
//! aggregation with confidence rejection, rank-based AUC, and
//! accuracy-vs-confidence curves.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::domain::{CalibrationBin, CalibrationReport, CorePrediction, CoreStatus};
use crate::error::{Error, Result};

/// Fraction of a core's patches that must survive the confidence threshold
/// for the core to receive a prediction; below this the core is rejected
/// as uncertain.
pub const MIN_RETAINED_FRACTION: f64 = 0.6;

/// Operating point on core scores for sensitivity/specificity.
pub const CORE_SCORE_THRESHOLD: f64 = 0.5;

/// One patch-level prediction, however produced, plus the labels needed by
/// the metrics. `true_label` is present for synthetic data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPrediction {
    pub prob_cancer: f64,
    pub confidence: f64,
    pub predicted_label: u8,
    pub core_id: String,
    pub weak_label: u8,
    pub true_label: Option<u8>,
}

/// Which label a patch-level metric is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    /// The core's pathology label, propagated to every patch.
    Weak,
    /// The hidden per-patch ground truth (synthetic data only).
    True,
}

/// Core-level metric set over the status=predicted cores; rejected cores are
/// counted separately and excluded from the four accuracy figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreMetrics {
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
    pub predicted_cores: usize,
    pub rejected_cores: usize,
}

/// One point of the accuracy-vs-confidence / retention curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    /// Absent when no predicted core remains or one class vanishes.
    pub balanced_accuracy: Option<f64>,
    pub retained_cores: usize,
    pub total_cores: usize,
}

/// Expected calibration error over `bins` equal-width confidence bins.
///
/// Bin `s` (1-based) covers ((s−1)/S, s/S]; confidence 0 is assigned to the
/// first bin. ECE = Σ_s (n_s/N)·|acc(s) − conf(s)|, empty bins contributing 0.
pub fn ece(predictions: &[(f64, bool)], bins: usize) -> Result<CalibrationReport> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("calibration predictions"));
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("bin count must be at least 1".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut correct_sum = vec![0usize; bins];
    for &(c, ok) in predictions {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidConfig(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
        let idx = if c == 0.0 {
            0
        } else {
            ((c * bins as f64).ceil() as usize - 1).min(bins - 1)
        };
        count[idx] += 1;
        conf_sum[idx] += c;
        correct_sum[idx] += ok as usize;
    }
    let n = predictions.len() as f64;
    let mut total_ece = 0.0;
    let mut report_bins = Vec::with_capacity(bins);
    for s in 0..bins {
        if count[s] == 0 {
            report_bins.push(CalibrationBin {
                count: 0,
                mean_confidence: 0.0,
                accuracy: 0.0,
            });
            continue;
        }
        let mean_conf = conf_sum[s] / count[s] as f64;
        let acc = correct_sum[s] as f64 / count[s] as f64;
        total_ece += count[s] as f64 / n * (acc - mean_conf).abs();
        report_bins.push(CalibrationBin {
            count: count[s],
            mean_confidence: mean_conf,
            accuracy: acc,
        });
    }
    Ok(CalibrationReport {
        bins: report_bins,
        ece: total_ece,
        total: predictions.len(),
    })
}

/// Calibration of patch predictions scored against the chosen label source.
pub fn ece_from_patches(
    predictions: &[PatchPrediction],
    source: LabelSource,
    bins: usize,
) -> Result<CalibrationReport> {
    let pairs = predictions
        .iter()
        .map(|p| Ok((p.confidence, p.predicted_label == target_label(p, source)?)))
        .collect::<Result<Vec<_>>>()?;
    ece(&pairs, bins)
}

/// Aggregates one core's patch predictions at confidence threshold `tau`.
///
/// Patches with confidence < tau are discarded. If fewer than 60% of the
/// core's patches remain the core is rejected as uncertain; otherwise the
/// score is the mean cancer probability of the retained patches.
pub fn aggregate_core(patches: &[PatchPrediction], tau: f64) -> Result<CorePrediction> {
    if patches.is_empty() {
        return Err(Error::EmptyInput("core patch predictions"));
    }
    let core_id = &patches[0].core_id;
    if patches.iter().any(|p| &p.core_id != core_id) {
        return Err(Error::InvalidConfig(
            "aggregate_core got patches from multiple cores".into(),
        ));
    }
    let retained: Vec<&PatchPrediction> =
        patches.iter().filter(|p| p.confidence >= tau).collect();
    let retained_fraction = retained.len() as f64 / patches.len() as f64;
    if retained_fraction < MIN_RETAINED_FRACTION {
        return Ok(CorePrediction {
            core_id: core_id.clone(),
            status: CoreStatus::Uncertain,
            score: None,
            retained_fraction,
            threshold: tau,
        });
    }
    let score = retained.iter().map(|p| p.prob_cancer).sum::<f64>() / retained.len() as f64;
    Ok(CorePrediction {
        core_id: core_id.clone(),
        status: CoreStatus::Predicted,
        score: Some(score),
        retained_fraction,
        threshold: tau,
    })
}

/// Groups patch predictions by core (preserving first-appearance order) and
/// aggregates each; returns the per-core predictions with the core's weak
/// label alongside.
pub fn aggregate_cores(
    predictions: &[PatchPrediction],
    tau: f64,
) -> Result<Vec<(CorePrediction, u8)>> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("patch predictions"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&PatchPrediction>> = HashMap::new();
    for p in predictions {
        groups
            .entry(p.core_id.as_str())
            .or_insert_with(|| {
                order.push(p.core_id.as_str());
                Vec::new()
            })
            .push(p);
    }
    let mut out = Vec::with_capacity(order.len());
    for core_id in order {
        let members = &groups[core_id];
        let weak = members[0].weak_label;
        if members.iter().any(|p| p.weak_label != weak) {
            return Err(Error::InvalidConfig(format!(
                "core {core_id} carries inconsistent weak labels"
            )));
        }
        let owned: Vec<PatchPrediction> = members.iter().map(|&p| p.clone()).collect();
        out.push((aggregate_core(&owned, tau)?, weak));
    }
    Ok(out)
}

/// Rank-based AUC (Mann–Whitney) with tied scores given their average rank.
/// `labels[i] = true` marks positives.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("rank AUC"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("NaN score in AUC input".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk tie groups, assigning each member the average 1-based rank.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Core-level AUC, sensitivity, specificity, and balanced accuracy over the
/// predicted cores; uncertain cores are excluded and counted as rejections.
pub fn core_metrics(predictions: &[(CorePrediction, u8)]) -> Result<CoreMetrics> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("core predictions"));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut rejected = 0usize;
    for (pred, label) in predictions {
        crate::domain::check_label(*label)?;
        match (pred.status, pred.score) {
            (CoreStatus::Predicted, Some(s)) => {
                scores.push(s);
                labels.push(*label == 1);
            }
            (CoreStatus::Uncertain, _) => rejected += 1,
            (CoreStatus::Predicted, None) => {
                return Err(Error::InvalidConfig(format!(
                    "predicted core {} has no score",
                    pred.core_id
                )))
            }
        }
    }
    if scores.is_empty() || labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::SingleClass("core metrics"));
    }
    let auc = rank_auc(&scores, &labels)?;
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (s, &is_cancer) in scores.iter().zip(&labels) {
        let called_cancer = *s > CORE_SCORE_THRESHOLD;
        match (is_cancer, called_cancer) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let sensitivity = tp as f64 / (tp + fn_) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    Ok(CoreMetrics {
        auc,
        sensitivity,
        specificity,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
        predicted_cores: scores.len(),
        rejected_cores: rejected,
    })
}

/// Mean of per-class accuracies of `predicted_label` against the chosen
/// label source.
pub fn patch_balanced_accuracy(
    predictions: &[PatchPrediction],
    source: LabelSource,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("patch predictions"));
    }
    let mut n = [0usize; 2];
    let mut correct = [0usize; 2];
    for p in predictions {
        let target = target_label(p, source)?;
        crate::domain::check_label(target)?;
        n[target as usize] += 1;
        correct[target as usize] += (p.predicted_label == target) as usize;
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(Error::SingleClass("patch balanced accuracy"));
    }
    Ok((correct[0] as f64 / n[0] as f64 + correct[1] as f64 / n[1] as f64) / 2.0)
}

/// Sweeps the confidence threshold over `tau_grid`: at each tau every core is
/// aggregated, balanced accuracy is computed over the predicted cores against
/// the core weak labels (absent if a class vanishes), and the retained-core
/// count is recorded.
pub fn accuracy_vs_confidence_curve(
    predictions: &[PatchPrediction],
    tau_grid: &[f64],
) -> Result<Vec<CurvePoint>> {
    if tau_grid.is_empty() {
        return Err(Error::EmptyInput("tau grid"));
    }
    if tau_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidConfig("tau grid values must lie in [0, 1]".into()));
    }
    let mut points = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let cores = aggregate_cores(predictions, tau)?;
        let total_cores = cores.len();
        let retained_cores = cores
            .iter()
            .filter(|(p, _)| p.status == CoreStatus::Predicted)
            .count();
        let balanced_accuracy = core_metrics(&cores).ok().map(|m| m.balanced_accuracy);
        points.push(CurvePoint {
            tau,
            balanced_accuracy,
            retained_cores,
            total_cores,
        });
    }
    Ok(points)
}

/// AUROC of an uncertainty score as an out-of-distribution detector
/// (OOD samples are the positives).
pub fn ood_detection_auroc(uncertainty: &[f64], is_ood: &[bool]) -> Result<f64> {
    rank_auc(uncertainty, is_ood)
}

fn target_label(p: &PatchPrediction, source: LabelSource) -> Result<u8> {
    match source {
        LabelSource::Weak => Ok(p.weak_label),
        LabelSource::True => p
            .true_label
            .ok_or(Error::MissingOracle("patch true label")),
    }
}
