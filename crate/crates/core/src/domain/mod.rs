//! Shared data types and their invariants. No algorithms live here.
//!
//! Ground-truth labels and OOD flags on synthetic patches are carried in a
//! separate [`PatchOracle`] record reachable only through [`Patch::oracle`].
//! Training code consumes [`crate::coteach::TrainingSet`], which is built
//! without that record, so hidden labels cannot leak into training.

mod io;

pub use io::{read_dataset, write_dataset};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BENIGN: u8 = 0;
pub const CANCER: u8 = 1;

/// Evaluation-only ground truth attached to synthetic patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOracle {
    pub true_label: u8,
    pub is_ood: bool,
}

/// A normalized image patch carrying the weak label of its parent core.
#[derive(Debug, Clone)]
pub struct Patch {
    pixels: Array2<f32>,
    weak_label: u8,
    core_id: String,
    oracle: Option<PatchOracle>,
}

impl Patch {
    pub fn new(
        pixels: Array2<f32>,
        weak_label: u8,
        core_id: impl Into<String>,
        oracle: Option<PatchOracle>,
    ) -> Result<Self> {
        check_label(weak_label)?;
        if pixels.is_empty() {
            return Err(Error::EmptyInput("patch pixels"));
        }
        Ok(Self {
            pixels,
            weak_label,
            core_id: core_id.into(),
            oracle,
        })
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn weak_label(&self) -> u8 {
        self.weak_label
    }

    pub fn core_id(&self) -> &str {
        &self.core_id
    }

    /// Hidden ground truth, present on synthetic data only. Evaluation-only;
    /// nothing on the training path calls this.
    pub fn oracle(&self) -> Option<&PatchOracle> {
        self.oracle.as_ref()
    }
}

/// A biopsy core: an ordered group of patches sharing one weak label, with
/// the pathology involvement estimate (fraction of the core that is cancer).
#[derive(Debug, Clone)]
pub struct BiopsyCore {
    core_id: String,
    patient_id: String,
    patches: Vec<Patch>,
    weak_label: u8,
    involvement: f64,
}

impl BiopsyCore {
    pub fn new(
        core_id: impl Into<String>,
        patient_id: impl Into<String>,
        patches: Vec<Patch>,
        weak_label: u8,
        involvement: f64,
    ) -> Result<Self> {
        let core_id = core_id.into();
        check_label(weak_label)?;
        if patches.is_empty() {
            return Err(Error::EmptyInput("core patches"));
        }
        if !(0.0..=1.0).contains(&involvement) {
            return Err(Error::InvalidConfig(format!(
                "involvement {involvement} outside [0, 1]"
            )));
        }
        if weak_label == BENIGN && involvement != 0.0 {
            return Err(Error::InvalidConfig(
                "benign cores must have involvement 0".into(),
            ));
        }
        for p in &patches {
            if p.weak_label != weak_label {
                return Err(Error::InvalidConfig(format!(
                    "patch weak label {} disagrees with core {core_id} label {weak_label}",
                    p.weak_label
                )));
            }
            if p.core_id != core_id {
                return Err(Error::InvalidConfig(format!(
                    "patch belongs to core {}, not {core_id}",
                    p.core_id
                )));
            }
        }
        Ok(Self {
            core_id,
            patient_id: patient_id.into(),
            patches,
            weak_label,
            involvement,
        })
    }

    pub fn core_id(&self) -> &str {
        &self.core_id
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn weak_label(&self) -> u8 {
        self.weak_label
    }

    pub fn involvement(&self) -> f64 {
        self.involvement
    }
}

/// Per-sample evidential output: nonnegative evidence, belief masses, and
/// the derived uncertainty/confidence pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceOutput {
    pub evidence: [f64; 2],
    pub belief: [f64; 2],
    pub uncertainty: f64,
    pub predicted_label: u8,
    pub confidence: f64,
}

impl EvidenceOutput {
    /// Builds the belief/uncertainty assignment from a nonnegative evidence
    /// pair: with `S = e0 + e1 + 2`, `b_j = e_j / S` and `U = 2 / S`, so
    /// `b0 + b1 + U = 1`. Ties in evidence predict label 0.
    pub fn from_evidence(e0: f64, e1: f64) -> Result<Self> {
        if !(e0 >= 0.0 && e1 >= 0.0) {
            return Err(Error::NegativeEvidence(e0, e1));
        }
        let s = e0 + e1 + 2.0;
        let uncertainty = 2.0 / s;
        let predicted_label = if e1 > e0 { CANCER } else { BENIGN };
        Ok(Self {
            evidence: [e0, e1],
            belief: [e0 / s, e1 / s],
            uncertainty,
            predicted_label,
            confidence: 1.0 - uncertainty,
        })
    }
}

/// Aggregated core-level decision: either a probability score over the
/// retained patches or an explicit rejection as uncertain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorePrediction {
    pub core_id: String,
    pub status: CoreStatus,
    /// Mean retained-patch probability; present iff `status` is `Predicted`.
    pub score: Option<f64>,
    pub retained_fraction: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreStatus {
    Predicted,
    Uncertain,
}

/// Binned confidence/accuracy statistics with the expected calibration error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

pub(crate) fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::InvalidConfig(format!(
            "label must be 0 or 1, got {label}"
        )));
    }
    Ok(())
}
