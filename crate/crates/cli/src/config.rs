//! Experiment configuration: one TOML document with a flat section per
//! module, every field overridable by a command-line flag of the same
//! (section-qualified) name. Missing keys fall back to defaults, so an
//! empty file is a valid config.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use evicore::coteach::{CoteachConfig, LossKind};
use evicore::edl::EdlLossConfig;
use evicore::model::{BackboneConfig, BackboneKind};
use evicore::synthgen::{InvolvementDistribution, SynthConfig};
use serde::{Deserialize, Serialize};

/// How the generated cores are filtered, balanced, and split before
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// Cancer cores below this involvement are dropped (benign cores stay).
    pub min_involvement: f64,
    /// Undersample the majority class to a 1:1 core ratio.
    pub balance: bool,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            min_involvement: 0.4,
            balance: true,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

/// Optimization and loss settings shared by every method arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub gamma: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub kl_anneal_epochs: usize,
    pub kl_max_weight: f64,
    /// Stochastic passes for Monte Carlo dropout prediction.
    pub mc_passes: usize,
    pub ensemble_members: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = CoteachConfig::default();
        Self {
            gamma: c.gamma,
            max_epochs: c.max_epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            weight_decay: c.weight_decay,
            kl_anneal_epochs: c.edl.kl_anneal_epochs,
            kl_max_weight: c.edl.kl_max_weight,
            mc_passes: evicore::baselines::DEFAULT_MC_PASSES,
            ensemble_members: evicore::baselines::DEFAULT_ENSEMBLE_MEMBERS,
        }
    }
}

impl TrainSection {
    pub fn coteach_config(&self, loss_kind: LossKind) -> CoteachConfig {
        CoteachConfig {
            gamma: self.gamma,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            loss_kind,
            edl: EdlLossConfig {
                kl_anneal_epochs: self.kl_anneal_epochs,
                kl_max_weight: self.kl_max_weight,
            },
        }
    }
}

/// What to run and where to put it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub tau_grid: Vec<f64>,
    pub ece_bins: usize,
    pub output_dir: String,
    /// Fraction of benign-core patches swapped for the out-of-distribution
    /// texture in the held-out probe set; 0 disables the probe entirely.
    pub ood_eval_fraction: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            methods: vec!["edl".into(), "edl-coteach".into()],
            seeds: vec![0],
            tau_grid: vec![0.0, 0.5, 0.6, 0.7, 0.8, 0.9],
            ece_bins: 10,
            output_dir: "runs".into(),
            ood_eval_fraction: 0.1,
        }
    }
}

/// The whole experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub dataset: DatasetSection,
    pub model: BackboneConfig,
    pub train: TrainSection,
    pub experiment: ExperimentSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        if self.experiment.seeds.is_empty() {
            bail!("experiment needs at least one seed");
        }
        if self.experiment.methods.is_empty() {
            bail!("experiment needs at least one method");
        }
        if self
            .experiment
            .tau_grid
            .iter()
            .any(|t| !(0.0..=1.0).contains(t))
        {
            bail!("tau_grid entries must lie in [0, 1]");
        }
        if self.experiment.ece_bins == 0 {
            bail!("ece_bins must be at least 1");
        }
        if !(0.0..1.0).contains(&self.experiment.ood_eval_fraction) {
            bail!("ood_eval_fraction must lie in [0, 1)");
        }
        let (tf, vf) = (self.dataset.train_fraction, self.dataset.val_fraction);
        if !(tf >= 0.0 && vf >= 0.0 && tf + vf <= 1.0 + 1e-9) {
            bail!("train/val fractions must be nonnegative and sum to at most 1");
        }
        if !(0.0..=1.0).contains(&self.dataset.min_involvement) {
            bail!("min_involvement must lie in [0, 1]");
        }
        // The training loop itself revalidates, but fail early and clearly.
        self.train
            .coteach_config(LossKind::Edl)
            .validate()
            .map_err(anyhow::Error::from)?;
        Ok(())
    }
}

/// Command-line overrides: one optional flag per config field, named
/// `--<section>-<field>` (experiment fields drop the prefix).
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    // [synth]
    #[arg(long)]
    pub synth_n_patients: Option<usize>,
    #[arg(long)]
    pub synth_cores_per_patient: Option<usize>,
    #[arg(long)]
    pub synth_patches_per_core: Option<usize>,
    /// "fixed" or "uniform".
    #[arg(long)]
    pub synth_involvement_kind: Option<String>,
    #[arg(long)]
    pub synth_involvement_value: Option<f64>,
    #[arg(long)]
    pub synth_involvement_lo: Option<f64>,
    #[arg(long)]
    pub synth_involvement_hi: Option<f64>,
    #[arg(long)]
    pub synth_ood_fraction: Option<f64>,
    #[arg(long)]
    pub synth_class_separation: Option<f64>,
    #[arg(long)]
    pub synth_image_height: Option<usize>,
    #[arg(long)]
    pub synth_image_width: Option<usize>,
    #[arg(long)]
    pub synth_seed: Option<u64>,

    // [dataset]
    #[arg(long)]
    pub dataset_min_involvement: Option<f64>,
    #[arg(long)]
    pub dataset_balance: Option<bool>,
    #[arg(long)]
    pub dataset_train_fraction: Option<f64>,
    #[arg(long)]
    pub dataset_val_fraction: Option<f64>,

    // [model]
    /// "small_cnn" or "half_resnet18".
    #[arg(long)]
    pub model_kind: Option<String>,
    #[arg(long)]
    pub model_dropout_rate: Option<f64>,
    #[arg(long)]
    pub model_input_height: Option<usize>,
    #[arg(long)]
    pub model_input_width: Option<usize>,

    // [train]
    #[arg(long)]
    pub train_gamma: Option<f64>,
    #[arg(long)]
    pub train_max_epochs: Option<usize>,
    #[arg(long)]
    pub train_batch_size: Option<usize>,
    #[arg(long)]
    pub train_learning_rate: Option<f64>,
    #[arg(long)]
    pub train_weight_decay: Option<f64>,
    #[arg(long)]
    pub train_kl_anneal_epochs: Option<usize>,
    #[arg(long)]
    pub train_kl_max_weight: Option<f64>,
    #[arg(long)]
    pub train_mc_passes: Option<usize>,
    #[arg(long)]
    pub train_ensemble_members: Option<usize>,

    // [experiment]
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated thresholds in [0, 1].
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub ece_bins: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<String>,
    #[arg(long)]
    pub ood_eval_fraction: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut FileConfig) -> Result<()> {
        macro_rules! set {
            ($target:expr, $source:expr) => {
                if let Some(v) = $source.clone() {
                    $target = v;
                }
            };
        }
        set!(config.synth.n_patients, self.synth_n_patients);
        set!(config.synth.cores_per_patient, self.synth_cores_per_patient);
        set!(config.synth.patches_per_core, self.synth_patches_per_core);
        self.apply_involvement(config)?;
        set!(config.synth.ood_fraction, self.synth_ood_fraction);
        set!(config.synth.class_separation, self.synth_class_separation);
        set!(config.synth.image_size.0, self.synth_image_height);
        set!(config.synth.image_size.1, self.synth_image_width);
        set!(config.synth.seed, self.synth_seed);

        set!(config.dataset.min_involvement, self.dataset_min_involvement);
        set!(config.dataset.balance, self.dataset_balance);
        set!(config.dataset.train_fraction, self.dataset_train_fraction);
        set!(config.dataset.val_fraction, self.dataset_val_fraction);

        if let Some(kind) = &self.model_kind {
            config.model.kind = kind
                .parse::<BackboneKind>()
                .map_err(anyhow::Error::from)?;
        }
        set!(config.model.dropout_rate, self.model_dropout_rate);
        set!(config.model.input_size.0, self.model_input_height);
        set!(config.model.input_size.1, self.model_input_width);

        set!(config.train.gamma, self.train_gamma);
        set!(config.train.max_epochs, self.train_max_epochs);
        set!(config.train.batch_size, self.train_batch_size);
        set!(config.train.learning_rate, self.train_learning_rate);
        set!(config.train.weight_decay, self.train_weight_decay);
        set!(config.train.kl_anneal_epochs, self.train_kl_anneal_epochs);
        set!(config.train.kl_max_weight, self.train_kl_max_weight);
        set!(config.train.mc_passes, self.train_mc_passes);
        set!(config.train.ensemble_members, self.train_ensemble_members);

        set!(config.experiment.methods, self.methods);
        set!(config.experiment.seeds, self.seeds);
        set!(config.experiment.tau_grid, self.tau_grid);
        set!(config.experiment.ece_bins, self.ece_bins);
        set!(config.experiment.output_dir, self.output_dir);
        set!(config.experiment.ood_eval_fraction, self.ood_eval_fraction);
        Ok(())
    }

    fn apply_involvement(&self, config: &mut FileConfig) -> Result<()> {
        let current = config.synth.involvement;
        let kind = match self.synth_involvement_kind.as_deref() {
            Some("fixed") => "fixed",
            Some("uniform") => "uniform",
            Some(other) => bail!("unknown involvement kind {other:?}"),
            None => match current {
                InvolvementDistribution::Fixed { .. } => "fixed",
                InvolvementDistribution::Uniform { .. } => "uniform",
            },
        };
        config.synth.involvement = match kind {
            "fixed" => {
                let base = match current {
                    InvolvementDistribution::Fixed { value } => value,
                    _ => 0.7,
                };
                InvolvementDistribution::Fixed {
                    value: self.synth_involvement_value.unwrap_or(base),
                }
            }
            _ => {
                let (base_lo, base_hi) = match current {
                    InvolvementDistribution::Uniform { lo, hi } => (lo, hi),
                    _ => (0.4, 1.0),
                };
                InvolvementDistribution::Uniform {
                    lo: self.synth_involvement_lo.unwrap_or(base_lo),
                    hi: self.synth_involvement_hi.unwrap_or(base_hi),
                }
            }
        };
        Ok(())
    }
}

/// Loads a config (or defaults when no path is given) and applies overrides.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<FileConfig> {
    let mut config = match path {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    overrides.apply(&mut config)?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let config: FileConfig = toml::from_str("").unwrap();
        assert_eq!(config, FileConfig::default());
        config.validate().unwrap();
    }

    #[test]
    fn sections_round_trip_through_toml() {
        let mut config = FileConfig::default();
        config.synth.n_patients = 7;
        config.synth.involvement = InvolvementDistribution::Uniform { lo: 0.4, hi: 0.9 };
        config.model.kind = BackboneKind::HalfResnet18;
        config.train.max_epochs = 3;
        config.experiment.methods = vec!["ce".into()];
        let text = toml::to_string(&config).unwrap();
        let back: FileConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut config = FileConfig::default();
        let overrides = Overrides {
            synth_n_patients: Some(3),
            synth_involvement_kind: Some("uniform".into()),
            synth_involvement_lo: Some(0.5),
            model_kind: Some("half_resnet18".into()),
            train_learning_rate: Some(0.5),
            seeds: Some(vec![4, 5]),
            ..Overrides::default()
        };
        overrides.apply(&mut config).unwrap();
        assert_eq!(config.synth.n_patients, 3);
        assert_eq!(
            config.synth.involvement,
            InvolvementDistribution::Uniform { lo: 0.5, hi: 1.0 }
        );
        assert_eq!(config.model.kind, BackboneKind::HalfResnet18);
        assert_eq!(config.train.learning_rate, 0.5);
        assert_eq!(config.experiment.seeds, vec![4, 5]);

        assert!(Overrides {
            model_kind: Some("resnet50".into()),
            ..Overrides::default()
        }
        .apply(&mut config)
        .is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut config = FileConfig::default();
        config.experiment.seeds.clear();
        assert!(config.validate().is_err());

        let mut config = FileConfig::default();
        config.experiment.tau_grid = vec![0.5, 1.2];
        assert!(config.validate().is_err());

        let mut config = FileConfig::default();
        config.dataset.train_fraction = 0.9;
        config.dataset.val_fraction = 0.3;
        assert!(config.validate().is_err());
    }
}
