//! Synthetic weak-label dataset generator.
//!
//! Produces biopsy cores whose patches are class-conditional random-field
//! textures: filtered Gaussian noise with class-specific anisotropy plus an
//! oriented grating, normalized per patch. Cancer cores carry a contiguous
//! run of truly-cancerous patches sized by the involvement fraction while
//! every patch inherits the core's weak label, so the weak-label noise rate
//! is controlled exactly. A third texture family models out-of-distribution
//! tissue inside benign cores. Hidden true labels ride along in the oracle
//! view for evaluation only.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{BiopsyCore, Patch, PatchOracle, BENIGN, CANCER};
use crate::error::{Error, Result};
use crate::preprocess::normalize_patch;
use crate::rng::substream_rng;
use crate::{par, preprocess};

/// Distribution of the involvement fraction for cancer cores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InvolvementDistribution {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl InvolvementDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Fixed { value } => (0.0..=1.0).contains(&value),
            Self::Uniform { lo, hi } => {
                (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "involvement distribution support must lie in [0, 1]: {self:?}"
            )))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Self::Fixed { value } => value,
            Self::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    lo + rng.gen::<f64>() * (hi - lo)
                }
            }
        }
    }
}

/// Full description of a synthetic dataset; the seed determines every pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub cores_per_patient: usize,
    pub patches_per_core: usize,
    pub involvement: InvolvementDistribution,
    /// Fraction of each benign core's patches replaced by the
    /// out-of-distribution texture family.
    pub ood_fraction: f64,
    /// How far apart the benign and cancer texture statistics sit: scales the
    /// class-specific grating amplitude and, up to its saturation at 1.0, the
    /// class-specific blur anisotropy. At 0 the in-distribution classes are
    /// statistically identical; larger values make them easier to separate.
    pub class_separation: f64,
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 25,
            cores_per_patient: 8,
            patches_per_core: 20,
            involvement: InvolvementDistribution::Fixed { value: 0.7 },
            ood_fraction: 0.0,
            class_separation: 1.0,
            image_size: (32, 32),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.cores_per_patient == 0 {
            return Err(Error::InvalidConfig("need at least one patient and core".into()));
        }
        if self.patches_per_core == 0 {
            return Err(Error::InvalidConfig("patches_per_core must be positive".into()));
        }
        self.involvement.validate()?;
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return Err(Error::InvalidConfig(format!(
                "ood_fraction must lie in [0, 1), got {}",
                self.ood_fraction
            )));
        }
        if !(self.class_separation >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "class_separation must be nonnegative, got {}",
                self.class_separation
            )));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InvalidConfig("image_size must be nonzero".into()));
        }
        Ok(())
    }

    pub fn total_cores(&self) -> usize {
        self.n_patients * self.cores_per_patient
    }
}

/// The three texture families. Axial/lateral blur widths and grating
/// orientation give each family distinct second-order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TextureKind {
    Benign,
    Cancer,
    Ood,
}

impl TextureKind {
    /// (sigma_rows, sigma_cols) of the noise-shaping blur. The in-distribution
    /// families interpolate from an isotropic field at separation 0 to their
    /// full anisotropy at separation 1, where the blur contrast saturates, so
    /// every class-conditional statistic closes up as the separation knob
    /// drops, not just the grating amplitude.
    fn blur_sigma(self, class_separation: f64) -> (f64, f64) {
        let t = class_separation.clamp(0.0, 1.0);
        let lerp = |b: f64| 1.0 + t * (b - 1.0);
        match self {
            Self::Benign => (lerp(1.4), lerp(0.5)),
            Self::Cancer => (lerp(0.5), lerp(1.4)),
            Self::Ood => (1.0, 1.0),
        }
    }

    /// (orientation_deg, wavelength_px, amplitude_scale) of the grating.
    fn grating(self) -> (f64, f64, f64) {
        match self {
            Self::Benign => (0.0, 8.0, 1.0),
            Self::Cancer => (90.0, 8.0, 1.0),
            Self::Ood => (45.0, 5.0, 1.2),
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with edge clamping.
fn blur(a: &Array2<f64>, sigma_rows: f64, sigma_cols: f64) -> Array2<f64> {
    let (h, w) = a.dim();
    let kr = gaussian_kernel(sigma_rows);
    let kc = gaussian_kernel(sigma_cols);
    let rr = (kr.len() / 2) as isize;
    let rc = (kc.len() / 2) as isize;

    let mut rows_done = Array2::<f64>::zeros((h, w));
    for r in 0..h as isize {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &wk) in kr.iter().enumerate() {
                let rr_idx = (r + i as isize - rr).clamp(0, h as isize - 1) as usize;
                acc += wk * a[[rr_idx, c]];
            }
            rows_done[[r as usize, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for (i, &wk) in kc.iter().enumerate() {
                let cc_idx = (c + i as isize - rc).clamp(0, w as isize - 1) as usize;
                acc += wk * rows_done[[r, cc_idx]];
            }
            out[[r, c as usize]] = acc;
        }
    }
    out
}

/// Unnormalized texture field: shaped noise plus an oriented grating with a
/// random phase. Draw order per call: all noise samples, then the phase.
fn texture_field(
    kind: TextureKind,
    size: (usize, usize),
    class_separation: f64,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let noise = Array2::from_shape_fn(size, |_| rng.sample::<f64, _>(StandardNormal));
    let (sr, sc) = kind.blur_sigma(class_separation);
    let mut field = blur(&noise, sr, sc);
    let (theta_deg, wavelength, amp_scale) = kind.grating();
    let phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let theta = theta_deg.to_radians();
    let amp = class_separation * amp_scale;
    for ((r, c), v) in field.indexed_iter_mut() {
        let along = r as f64 * theta.sin() + c as f64 * theta.cos();
        *v += amp * (std::f64::consts::TAU * along / wavelength + phase).sin();
    }
    field
}

fn texture_patch(
    kind: TextureKind,
    size: (usize, usize),
    class_separation: f64,
    rng: &mut impl Rng,
) -> Result<Array2<f32>> {
    let field = texture_field(kind, size, class_separation, rng).mapv(|v| v as f32);
    normalize_patch(&field)
}

fn build_core(config: &SynthConfig, index: usize) -> Result<BiopsyCore> {
    let mut rng = substream_rng(config.seed, index as u64);
    let core_id = format!("core_{index:05}");
    let patient_id = format!("patient_{:04}", index / config.cores_per_patient);
    let label = (index % 2 == 1) as u8;
    let n = config.patches_per_core;

    // Per-patch texture kinds, decided before any pixels are drawn.
    let (kinds, involvement) = if label == CANCER {
        let involvement = config.involvement.sample(&mut rng);
        let n_cancer = (involvement * n as f64).round() as usize;
        let start = if n_cancer < n {
            rng.gen_range(0..=n - n_cancer)
        } else {
            0
        };
        let kinds: Vec<TextureKind> = (0..n)
            .map(|i| {
                if i >= start && i < start + n_cancer {
                    TextureKind::Cancer
                } else {
                    TextureKind::Benign
                }
            })
            .collect();
        (kinds, involvement)
    } else {
        let n_ood = (config.ood_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..n_ood {
            let j = rng.gen_range(i..n);
            order.swap(i, j);
        }
        let mut kinds = vec![TextureKind::Benign; n];
        for &i in &order[..n_ood] {
            kinds[i] = TextureKind::Ood;
        }
        (kinds, 0.0)
    };

    let patches = kinds
        .iter()
        .map(|&kind| {
            let pixels = texture_patch(kind, config.image_size, config.class_separation, &mut rng)?;
            let oracle = PatchOracle {
                true_label: if kind == TextureKind::Cancer { CANCER } else { BENIGN },
                is_ood: kind == TextureKind::Ood,
            };
            Patch::new(pixels, label, &core_id, Some(oracle))
        })
        .collect::<Result<Vec<_>>>()?;

    BiopsyCore::new(core_id, patient_id, patches, label, involvement)
}

/// Generates the full dataset. Cores alternate benign/cancer by index, so
/// even totals are class-balanced by construction; each core is produced
/// from its own random substream and the result is identical whether cores
/// are built in parallel or serially.
pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<BiopsyCore>> {
    config.validate()?;
    par::map_range(config.total_cores(), |i| build_core(config, i))
        .into_iter()
        .collect()
}

/// Drops cancer cores whose involvement is below `min_involvement`
/// (boundary inclusive: exactly the minimum is retained). Benign cores pass
/// through untouched.
pub fn filter_by_involvement(cores: Vec<BiopsyCore>, min_involvement: f64) -> Vec<BiopsyCore> {
    cores
        .into_iter()
        .filter(|c| c.weak_label() == BENIGN || c.involvement() >= min_involvement)
        .collect()
}

/// Under-samples the majority class uniformly at random until core counts
/// per class are equal; surviving cores keep their original order.
pub fn balance_cores(cores: Vec<BiopsyCore>, seed: u64) -> Result<Vec<BiopsyCore>> {
    let n_cancer = cores.iter().filter(|c| c.weak_label() == CANCER).count();
    let n_benign = cores.len() - n_cancer;
    if n_cancer == 0 || n_benign == 0 {
        return Err(Error::SingleClass("core balancing"));
    }
    if n_cancer == n_benign {
        return Ok(cores);
    }
    let (majority, keep) = if n_benign > n_cancer {
        (BENIGN, n_cancer)
    } else {
        (CANCER, n_benign)
    };
    let majority_positions: Vec<usize> = cores
        .iter()
        .enumerate()
        .filter(|(_, c)| c.weak_label() == majority)
        .map(|(i, _)| i)
        .collect();
    let mut order = majority_positions.clone();
    let mut rng = substream_rng(seed, 0xba1a);
    for i in 0..keep {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    let mut kept = vec![false; cores.len()];
    for &i in &order[..keep] {
        kept[i] = true;
    }
    Ok(cores
        .into_iter()
        .enumerate()
        .filter(|(i, c)| c.weak_label() != majority || kept[*i])
        .map(|(_, c)| c)
        .collect())
}

/// Splits cores into train/val/test with no patient appearing in more than
/// one split. Patients are shuffled by the seed and allotted by rounding the
/// requested fractions; cores keep their original order within each split.
pub fn split_by_patient(
    cores: Vec<BiopsyCore>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<BiopsyCore>, Vec<BiopsyCore>, Vec<BiopsyCore>)> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be nonnegative, got {fractions:?}"
        )));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }

    let mut patients: Vec<String> = Vec::new();
    for c in &cores {
        if !patients.iter().any(|p| p == c.patient_id()) {
            patients.push(c.patient_id().to_string());
        }
    }
    let mut rng = substream_rng(seed, 0x5_911_7);
    let p = patients.len();
    for i in (1..p).rev() {
        let j = rng.gen_range(0..=i);
        patients.swap(i, j);
    }
    let n_train = ((ft * p as f64).round() as usize).min(p);
    let n_val = ((fv * p as f64).round() as usize).min(p - n_train);

    use std::collections::HashMap;
    let mut split_of: HashMap<&str, u8> = HashMap::new();
    for (i, pid) in patients.iter().enumerate() {
        let s = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        split_of.insert(pid.as_str(), s);
    }

    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for c in cores {
        match split_of[c.patient_id()] {
            0 => out.0.push(c),
            1 => out.1.push(c),
            _ => out.2.push(c),
        }
    }
    Ok(out)
}

/// A whole synthetic RF frame for sliding-window inference demos: benign
/// texture everywhere except a contiguous run of cancer-textured columns.
#[derive(Debug, Clone)]
pub struct DemoImage {
    pub image: preprocess::RfImage,
    /// Column range `[start, end)` of the cancer region.
    pub cancer_cols: (usize, usize),
}

pub fn generate_demo_image(
    size: (usize, usize),
    cancer_cols: (usize, usize),
    class_separation: f64,
    seed: u64,
) -> Result<DemoImage> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::InvalidConfig("demo image size must be nonzero".into()));
    }
    if cancer_cols.0 >= cancer_cols.1 || cancer_cols.1 > w {
        return Err(Error::InvalidConfig(format!(
            "cancer column range {cancer_cols:?} must be nonempty and within width {w}"
        )));
    }
    let mut rng = substream_rng(seed, 0xde30);
    let benign = texture_field(TextureKind::Benign, size, class_separation, &mut rng);
    let cancer = texture_field(TextureKind::Cancer, size, class_separation, &mut rng);
    let samples = Array2::from_shape_fn(size, |(r, c)| {
        if c >= cancer_cols.0 && c < cancer_cols.1 {
            cancer[[r, c]] as f32
        } else {
            benign[[r, c]] as f32
        }
    });
    let image = preprocess::RfImage::new(
        samples,
        1.0,
        1.0,
        Array2::from_elem(size, 1u8),
        preprocess::NeedleGeometry {
            angle_deg: 0.0,
            entry: (h as f64 / 2.0, 0.0),
        },
    )?;
    Ok(DemoImage { image, cancer_cols })
}
