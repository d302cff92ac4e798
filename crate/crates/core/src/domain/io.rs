//! Dataset directory layout.
//!
//! A dataset directory holds `cores.jsonl` with one record per core
//! (`core_id`, `patient_id`, `weak_label`, `involvement`, `patch_file`) and
//! one binary patch file per core. Each patch file starts with three
//! little-endian `u32` values — patch count, height, width — followed by the
//! patches as row-major little-endian `f32`, concatenated in order.
//!
//! Synthetic datasets also carry an `oracle.jsonl` sidecar with the hidden
//! per-patch ground truth (`true_labels`, `is_ood`). Readers attach it to the
//! patches when present and leave the oracle empty otherwise, so real data
//! without ground truth flows through the same loader.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{BiopsyCore, Patch, PatchOracle};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CoreRecord {
    core_id: String,
    patient_id: String,
    weak_label: u8,
    involvement: f64,
    patch_file: String,
}

#[derive(Serialize, Deserialize)]
struct OracleRecord {
    core_id: String,
    true_labels: Vec<u8>,
    is_ood: bool,
}

/// Writes `cores` into `dir`, creating it if needed. Oracle records are
/// written to the sidecar for every core whose patches carry them.
pub fn write_dataset(dir: &Path, cores: &[BiopsyCore]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(File::create(dir.join("cores.jsonl"))?);
    let mut oracle = Vec::new();

    for core in cores {
        let patch_file = format!("{}.bin", core.core_id());
        let record = CoreRecord {
            core_id: core.core_id().to_string(),
            patient_id: core.patient_id().to_string(),
            weak_label: core.weak_label(),
            involvement: core.involvement(),
            patch_file: patch_file.clone(),
        };
        serde_json::to_writer(&mut index, &record)?;
        index.write_all(b"\n")?;

        write_patch_stack(&dir.join(&patch_file), core.patches())?;

        let oracles: Vec<&PatchOracle> =
            core.patches().iter().filter_map(|p| p.oracle()).collect();
        if !oracles.is_empty() {
            if oracles.len() != core.patches().len() {
                return Err(Error::Format(format!(
                    "core {} has oracle data on only some patches",
                    core.core_id()
                )));
            }
            oracle.push(OracleRecord {
                core_id: core.core_id().to_string(),
                true_labels: oracles.iter().map(|o| o.true_label).collect(),
                is_ood: oracles[0].is_ood,
            });
        }
    }
    index.flush()?;

    if !oracle.is_empty() {
        let mut side = BufWriter::new(File::create(dir.join("oracle.jsonl"))?);
        for rec in &oracle {
            serde_json::to_writer(&mut side, rec)?;
            side.write_all(b"\n")?;
        }
        side.flush()?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`] (or any producer
/// of the same layout). Core order follows `cores.jsonl` line order.
pub fn read_dataset(dir: &Path) -> Result<Vec<BiopsyCore>> {
    let index = BufReader::new(File::open(dir.join("cores.jsonl"))?);
    let mut oracles: std::collections::HashMap<String, OracleRecord> = Default::default();
    let sidecar = dir.join("oracle.jsonl");
    if sidecar.exists() {
        for line in BufReader::new(File::open(sidecar)?).lines() {
            let rec: OracleRecord = serde_json::from_str(&line?)?;
            oracles.insert(rec.core_id.clone(), rec);
        }
    }

    let mut cores = Vec::new();
    for line in index.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CoreRecord = serde_json::from_str(&line)?;
        let stacks = read_patch_stack(&dir.join(&rec.patch_file))?;
        let oracle = oracles.get(&rec.core_id);
        if let Some(o) = oracle {
            if o.true_labels.len() != stacks.len() {
                return Err(Error::Format(format!(
                    "core {}: {} oracle labels for {} patches",
                    rec.core_id,
                    o.true_labels.len(),
                    stacks.len()
                )));
            }
        }
        let patches = stacks
            .into_iter()
            .enumerate()
            .map(|(i, pixels)| {
                let po = oracle.map(|o| PatchOracle {
                    true_label: o.true_labels[i],
                    is_ood: o.is_ood,
                });
                Patch::new(pixels, rec.weak_label, &rec.core_id, po)
            })
            .collect::<Result<Vec<_>>>()?;
        cores.push(BiopsyCore::new(
            rec.core_id,
            rec.patient_id,
            patches,
            rec.weak_label,
            rec.involvement,
        )?);
    }
    Ok(cores)
}

fn write_patch_stack(path: &Path, patches: &[Patch]) -> Result<()> {
    let (h, w) = patches[0].pixels().dim();
    let mut out = BufWriter::new(File::create(path)?);
    for v in [patches.len() as u32, h as u32, w as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for p in patches {
        if p.pixels().dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("{h}x{w}"),
                got: format!("{}x{}", p.pixels().dim().0, p.pixels().dim().1),
            });
        }
        for &x in p.pixels().iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_patch_stack(path: &Path) -> Result<Vec<Array2<f32>>> {
    let mut file = BufReader::new(File::open(path)?);
    let mut header = [0u8; 12];
    file.read_exact(&mut header)?;
    let n = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!(
            "patch file {} has empty dimensions {n}x{h}x{w}",
            path.display()
        )));
    }

    let mut raw = vec![0u8; n * h * w * 4];
    file.read_exact(&mut raw)?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "patch file {} longer than its header declares",
            path.display()
        )));
    }

    let mut patches = Vec::with_capacity(n);
    for i in 0..n {
        let base = i * h * w * 4;
        let mut pixels = Vec::with_capacity(h * w);
        for j in 0..h * w {
            let off = base + j * 4;
            pixels.push(f32::from_le_bytes(raw[off..off + 4].try_into().unwrap()));
        }
        patches.push(
            Array2::from_shape_vec((h, w), pixels)
                .map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    Ok(patches)
}
