//! Per-run dataset preparation and the CLI's on-disk image formats.
//!
//! Every run regenerates its data from the config and the run seed, so
//! evaluation can rebuild exactly what training saw without shipping the
//! patches around. Raw RF frames travel as a single JSON document (shapes
//! plus row-major sample lists) because they are small and self-describing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use evicore::domain::BiopsyCore;
use evicore::preprocess::{NeedleGeometry, RfImage};
use evicore::rng::mix64;
use evicore::synthgen::{
    balance_cores, filter_by_involvement, generate_dataset, split_by_patient, DemoImage,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::FileConfig;

/// Salts separating the derived seeds of one run's independent random
/// choices (data generation, balancing, splitting, the OOD probe, training).
const SALT_GENERATE: u64 = 0xDA7A_0001;
const SALT_BALANCE: u64 = 0xDA7A_0002;
const SALT_SPLIT: u64 = 0xDA7A_0003;
const SALT_PROBE: u64 = 0xDA7A_0004;
const SALT_TRAIN: u64 = 0xDA7A_0005;

/// Mixes the config's base seed with the run seed and a salt.
fn derived_seed(config: &FileConfig, run_seed: u64, salt: u64) -> u64 {
    mix64(config.synth.seed ^ mix64(run_seed.wrapping_add(salt)))
}

/// Seed handed to the trainer for a given run.
pub fn train_seed(config: &FileConfig, run_seed: u64) -> u64 {
    derived_seed(config, run_seed, SALT_TRAIN)
}

/// The patient-disjoint split one run trains and evaluates on.
pub struct SplitCores {
    pub train: Vec<BiopsyCore>,
    pub val: Vec<BiopsyCore>,
    pub test: Vec<BiopsyCore>,
}

/// Generates, filters, balances, and splits the cores for one run. The
/// whole pipeline is a pure function of the config and the run seed.
pub fn prepare(config: &FileConfig, run_seed: u64) -> Result<SplitCores> {
    let mut synth = config.synth.clone();
    synth.seed = derived_seed(config, run_seed, SALT_GENERATE);
    let mut cores = generate_dataset(&synth).context("generating dataset")?;

    cores = filter_by_involvement(cores, config.dataset.min_involvement);
    if cores.is_empty() {
        bail!("no cores left after the involvement filter");
    }
    if config.dataset.balance {
        cores = balance_cores(cores, derived_seed(config, run_seed, SALT_BALANCE))
            .context("balancing cores")?;
    }
    let fractions = (
        config.dataset.train_fraction,
        config.dataset.val_fraction,
        (1.0 - config.dataset.train_fraction - config.dataset.val_fraction).max(0.0),
    );
    let (train, val, test) = split_by_patient(
        cores,
        fractions,
        derived_seed(config, run_seed, SALT_SPLIT),
    )
    .context("splitting by patient")?;
    Ok(SplitCores { train, val, test })
}

/// A held-out probe set with a fraction of benign-core patches swapped for
/// the out-of-distribution texture. Generated from a fresh seed, unfiltered
/// and unbalanced: this set is only ever scored, never trained on.
pub fn ood_probe(config: &FileConfig, run_seed: u64) -> Result<Vec<BiopsyCore>> {
    if config.experiment.ood_eval_fraction <= 0.0 {
        bail!("ood probe requested with ood_eval_fraction 0");
    }
    let mut synth = config.synth.clone();
    synth.ood_fraction = config.experiment.ood_eval_fraction;
    synth.seed = derived_seed(config, run_seed, SALT_PROBE);
    generate_dataset(&synth).context("generating ood probe")
}

// ---------------------------------------------------------------------------
// RF image files
// ---------------------------------------------------------------------------

/// Row-major 2-D array payload for JSON transport.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridDto<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Clone> GridDto<T> {
    pub fn from_array(a: &Array2<T>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().cloned().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<T>> {
        if self.rows * self.cols != self.data.len() {
            bail!(
                "grid declares {}x{} but carries {} values",
                self.rows,
                self.cols,
                self.data.len()
            );
        }
        Ok(Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .expect("length checked above"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeedleDto {
    pub angle_deg: f64,
    pub entry: (f64, f64),
}

/// JSON form of a calibrated RF frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfImageFile {
    pub samples: GridDto<f32>,
    pub axial_spacing_mm: f64,
    pub lateral_spacing_mm: f64,
    pub prostate_mask: GridDto<u8>,
    pub needle: NeedleDto,
    /// Column range `[start, end)` of the planted cancer region, present on
    /// generated demo frames only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancer_cols: Option<(usize, usize)>,
}

impl RfImageFile {
    pub fn from_image(image: &RfImage, cancer_cols: Option<(usize, usize)>) -> Self {
        Self {
            samples: GridDto::from_array(&image.samples),
            axial_spacing_mm: image.axial_spacing_mm,
            lateral_spacing_mm: image.lateral_spacing_mm,
            prostate_mask: GridDto::from_array(&image.prostate_mask),
            needle: NeedleDto {
                angle_deg: image.needle.angle_deg,
                entry: image.needle.entry,
            },
            cancer_cols,
        }
    }

    pub fn from_demo(demo: &DemoImage) -> Self {
        Self::from_image(&demo.image, Some(demo.cancer_cols))
    }

    /// Rebuilds the image, revalidating every invariant.
    pub fn to_image(&self) -> Result<RfImage> {
        RfImage::new(
            self.samples.to_array()?,
            self.axial_spacing_mm,
            self.lateral_spacing_mm,
            self.prostate_mask.to_array()?,
            NeedleGeometry {
                angle_deg: self.needle.angle_deg,
                entry: self.needle.entry,
            },
        )
        .map_err(anyhow::Error::from)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file =
            File::open(path).with_context(|| format!("opening {}", path.display()))?;
        serde_json::from_reader(BufReader::new(file))
            .with_context(|| format!("parsing image file {}", path.display()))
    }
}

// ---------------------------------------------------------------------------
// Raw f32 patch stacks (preprocess output)
// ---------------------------------------------------------------------------

/// Writes patches as `count, height, width` little-endian `u32` values
/// followed by the row-major `f32` pixels — the same layout dataset
/// directories use for their per-core patch files.
pub fn write_f32_stack(path: &Path, patches: &[Array2<f32>]) -> Result<()> {
    if patches.is_empty() {
        bail!("no patches to write");
    }
    let (h, w) = patches[0].dim();
    let mut out = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for v in [patches.len() as u32, h as u32, w as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for p in patches {
        if p.dim() != (h, w) {
            bail!("patch stack mixes shapes {:?} and {:?}", (h, w), p.dim());
        }
        for &x in p.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_f32_stack(path: &Path) -> Result<Vec<Array2<f32>>> {
    let mut file = BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut header = [0u8; 12];
    file.read_exact(&mut header)?;
    let n = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if n == 0 || h == 0 || w == 0 {
        bail!("patch stack {} has empty dimensions", path.display());
    }
    let mut raw = vec![0u8; n * h * w * 4];
    file.read_exact(&mut raw)
        .with_context(|| format!("patch stack {} is truncated", path.display()))?;
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        bail!("patch stack {} longer than its header declares", path.display());
    }
    let mut patches = Vec::with_capacity(n);
    for i in 0..n {
        let base = i * h * w * 4;
        let pixels: Vec<f32> = (0..h * w)
            .map(|j| {
                let off = base + j * 4;
                f32::from_le_bytes(raw[off..off + 4].try_into().unwrap())
            })
            .collect();
        patches.push(Array2::from_shape_vec((h, w), pixels).expect("sized above"));
    }
    Ok(patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use evicore::synthgen::generate_demo_image;

    #[test]
    fn run_pipeline_is_deterministic_and_split_is_disjoint() {
        let mut config = FileConfig::default();
        config.synth.n_patients = 8;
        config.synth.cores_per_patient = 2;
        config.synth.patches_per_core = 2;
        config.synth.image_size = (16, 16);

        let a = prepare(&config, 11).unwrap();
        let b = prepare(&config, 11).unwrap();
        let ids = |cores: &[BiopsyCore]| -> Vec<String> {
            cores.iter().map(|c| c.core_id().to_string()).collect()
        };
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.val), ids(&b.val));
        assert_eq!(ids(&a.test), ids(&b.test));
        assert_eq!(
            a.train[0].patches()[0].pixels(),
            b.train[0].patches()[0].pixels()
        );

        let c = prepare(&config, 12).unwrap();
        assert_ne!(
            a.train[0].patches()[0].pixels(),
            c.train[0].patches()[0].pixels()
        );

        let patients = |cores: &[BiopsyCore]| -> std::collections::HashSet<String> {
            cores.iter().map(|c| c.patient_id().to_string()).collect()
        };
        assert!(patients(&a.train).is_disjoint(&patients(&a.val)));
        assert!(patients(&a.train).is_disjoint(&patients(&a.test)));
        assert!(patients(&a.val).is_disjoint(&patients(&a.test)));
    }

    #[test]
    fn probe_carries_ood_patches_and_needs_positive_fraction() {
        let mut config = FileConfig::default();
        config.synth.n_patients = 6;
        config.synth.cores_per_patient = 2;
        config.synth.patches_per_core = 10;
        config.synth.image_size = (16, 16);
        config.experiment.ood_eval_fraction = 0.5;

        let probe = ood_probe(&config, 3).unwrap();
        let ood_patches: usize = probe
            .iter()
            .flat_map(|c| c.patches())
            .filter(|p| p.oracle().map(|o| o.is_ood).unwrap_or(false))
            .count();
        assert!(ood_patches > 0, "probe should contain ood patches");

        config.experiment.ood_eval_fraction = 0.0;
        assert!(ood_probe(&config, 3).is_err());
    }

    #[test]
    fn image_file_round_trips_and_validates() {
        let demo = generate_demo_image((24, 40), (10, 30), 1.5, 7).unwrap();
        let file = RfImageFile::from_demo(&demo);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.json");
        file.save(&path).unwrap();

        let back = RfImageFile::load(&path).unwrap();
        let image = back.to_image().unwrap();
        assert_eq!(image.samples, demo.image.samples);
        assert_eq!(image.prostate_mask, demo.image.prostate_mask);
        assert_eq!(back.cancer_cols, Some((10, 30)));

        let mut broken = RfImageFile::load(&path).unwrap();
        broken.samples.data.pop();
        assert!(broken.to_image().is_err());
    }

    #[test]
    fn f32_stack_round_trips_and_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patches.bin");
        let patches: Vec<Array2<f32>> = (0..3)
            .map(|i| Array2::from_shape_fn((4, 6), |(r, c)| (i * 24 + r * 6 + c) as f32 * 0.5))
            .collect();
        write_f32_stack(&path, &patches).unwrap();
        let back = read_f32_stack(&path).unwrap();
        assert_eq!(back, patches);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_f32_stack(&path).is_err());
    }
}
