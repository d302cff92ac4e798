//! Command-line interface: dataset generation, patch preprocessing,
//! experiment training/evaluation, confidence curves, whole-frame heatmaps,
//! and cross-run summaries.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use evicore_cli::config::{resolve, FileConfig, Overrides};
use evicore_cli::dataset::{write_f32_stack, RfImageFile};
use evicore_cli::experiment::{eval_run, load_run_models, run_dir, run_experiment, summarize_files};
use evicore_cli::heatmap::{sliding_window_heatmap, write_outputs};
use evicore_cli::methods::{parse_methods, Method};
use evicore::coteach::LossKind;
use evicore::domain::write_dataset;
use evicore::eval::accuracy_vs_confidence_curve;
use evicore::model::load_backbone;
use evicore::preprocess::{needle_roi, extract_patches, resample_patch, normalize_patch, PatchGrid};
use evicore::synthgen::{generate_dataset, generate_demo_image};

#[derive(Parser)]
#[command(
    name = "evicore",
    about = "Confidence-calibrated cancer detection on ultrasound patches",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<FileConfig> {
        resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic biopsy dataset directory.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic whole-frame RF image with a known cancer region.
    DemoImage {
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// First column of the cancer region.
        #[arg(long)]
        cancer_start: usize,
        /// One past the last column of the cancer region.
        #[arg(long)]
        cancer_end: usize,
        #[arg(long, default_value_t = 1.0)]
        class_separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract, resample, and normalize needle-band patches from an RF image.
    Preprocess {
        /// RF image JSON file.
        #[arg(long)]
        image: PathBuf,
        /// Output directory for patches.bin, origins.csv, and grid.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        patch_mm: f64,
        #[arg(long, default_value_t = 0.9)]
        overlap: f64,
        /// Side length of the resampled square patch in pixels.
        #[arg(long, default_value_t = 256)]
        out_size: usize,
        /// Half-width of the needle band in millimeters.
        #[arg(long, default_value_t = 2.5)]
        half_width_mm: f64,
        /// Lateral upsampling factor applied before the final resize.
        #[arg(long, default_value_t = 1)]
        lateral_up: usize,
        /// Axial decimation factor applied before the final resize.
        #[arg(long, default_value_t = 1)]
        axial_down: usize,
    },
    /// Train and evaluate every configured (method, seed) combination.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Re-evaluate finished runs from their checkpoints.
    Eval {
        /// Experiment directory (the train command's output_dir).
        #[arg(long)]
        dir: PathBuf,
        /// Restrict to one method.
        #[arg(long)]
        method: Option<String>,
        /// Restrict to one seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute the accuracy/retention curve of one run on a custom grid.
    Curve {
        /// Experiment directory (the train command's output_dir).
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: u64,
        /// Comma-separated confidence thresholds.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every sliding window of an RF image with a trained model.
    Heatmap {
        /// RF image JSON file.
        #[arg(long)]
        image: PathBuf,
        /// Model archive (.evck).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for heatmap.ppm and cells.csv.
        #[arg(long)]
        out: PathBuf,
        /// Head the checkpoint was trained with.
        #[arg(long, default_value = "edl")]
        loss: String,
        /// Cells below this confidence are left unpainted.
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        #[arg(long, default_value_t = 5.0)]
        patch_mm: f64,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
    /// Aggregate metrics.json files into a per-method summary.
    Summarize {
        /// metrics.json files to aggregate.
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn cmd_synth(config: &FileConfig, out: &PathBuf) -> Result<()> {
    let cores = generate_dataset(&config.synth)?;
    write_dataset(out, &cores)?;
    println!("wrote {} cores to {}", cores.len(), out.display());
    Ok(())
}

fn cmd_preprocess(
    image_path: &PathBuf,
    out: &PathBuf,
    grid: PatchGrid,
    half_width_mm: f64,
    lateral_up: usize,
    axial_down: usize,
) -> Result<()> {
    let image = RfImageFile::load(image_path)?.to_image()?;
    let roi = needle_roi(&image, half_width_mm)?;
    let extracted = extract_patches(&image, &roi, &grid)?;
    if extracted.is_empty() {
        bail!("no windows met the region-of-interest coverage requirement");
    }
    let mut patches = Vec::with_capacity(extracted.len());
    let mut origins = String::from("origin_row,origin_col\n");
    for e in &extracted {
        let resampled = resample_patch(&e.pixels, lateral_up, axial_down, grid.output_size_px)?;
        patches.push(normalize_patch(&resampled)?);
        origins.push_str(&format!("{},{}\n", e.origin.0, e.origin.1));
    }
    std::fs::create_dir_all(out)?;
    write_f32_stack(&out.join("patches.bin"), &patches)?;
    std::fs::write(out.join("origins.csv"), origins)?;
    let window = grid.window_px(&image)?;
    let meta = serde_json::json!({
        "grid": grid,
        "window_px": window,
        "stride_px": grid.stride_px(window),
        "n_patches": patches.len(),
    });
    std::fs::write(
        out.join("grid.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    println!("wrote {} patches to {}", patches.len(), out.display());
    Ok(())
}

fn load_experiment_config(dir: &PathBuf) -> Result<FileConfig> {
    let path = dir.join("config.toml");
    let config = FileConfig::load(&path)
        .with_context(|| format!("no experiment config at {}", path.display()))?;
    config.validate()?;
    Ok(config)
}

fn cmd_eval(dir: &PathBuf, method: Option<&str>, seed: Option<u64>) -> Result<()> {
    let config = load_experiment_config(dir)?;
    let methods = match method {
        Some(name) => vec![Method::parse(name)?],
        None => parse_methods(&config.experiment.methods)?,
    };
    let seeds: Vec<u64> = match seed {
        Some(s) => vec![s],
        None => config.experiment.seeds.clone(),
    };
    let mut evaluated = 0;
    for &m in &methods {
        for &s in &seeds {
            let run = run_dir(dir, m, s);
            if !run.exists() {
                bail!("run directory {} does not exist", run.display());
            }
            let metrics = eval_run(&config, m, s, &run)?;
            let auc = metrics.core.first().and_then(|c| c.auc);
            println!(
                "evaluated {} seed {s}: core auc {}",
                m.name(),
                auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
            );
            evaluated += 1;
        }
    }
    println!("re-evaluated {evaluated} runs in {}", dir.display());
    Ok(())
}

fn cmd_curve(dir: &PathBuf, method: &str, seed: u64, taus: &[f64], out: &PathBuf) -> Result<()> {
    if taus.is_empty() {
        bail!("curve needs at least one threshold");
    }
    let config = load_experiment_config(dir)?;
    let method = Method::parse(method)?;
    let run = run_dir(dir, method, seed);
    let mut models = load_run_models(&run)?;

    let split = evicore_cli::dataset::prepare(&config, seed)?;
    let mc_seed = evicore_cli::experiment::test_mc_seed(&config, seed);
    let predictions =
        evicore_cli::experiment::predict_for(method, &mut models, &split.test, &config, mc_seed)?;

    let curve = accuracy_vs_confidence_curve(&predictions, taus)?;
    let mut csv = String::from("tau,balanced_accuracy,retained_cores,total_cores\n");
    for p in &curve {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            p.tau,
            p.balanced_accuracy.map(|b| b.to_string()).unwrap_or_default(),
            p.retained_cores,
            p.total_cores
        ));
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, csv)?;
    println!("wrote {} curve points to {}", curve.len(), out.display());
    Ok(())
}

fn cmd_heatmap(
    image_path: &PathBuf,
    checkpoint: &PathBuf,
    out: &PathBuf,
    loss: &str,
    tau: f64,
    patch_mm: f64,
    overlap: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        bail!("tau must lie in [0, 1], got {tau}");
    }
    let kind: LossKind = loss.parse().map_err(anyhow::Error::from)?;
    let image = RfImageFile::load(image_path)?.to_image()?;
    let mut model = load_backbone(checkpoint)?;
    let grid = PatchGrid {
        patch_size_mm: patch_mm,
        overlap_fraction: overlap,
        output_size_px: model.config().input_size,
    };
    let map = sliding_window_heatmap(&mut model, &image, &grid, kind)?;
    write_outputs(out, &image, &map, tau)?;
    println!(
        "scored {} windows ({}x{} grid) into {}",
        map.cells.len(),
        map.grid_shape.0,
        map.grid_shape.1,
        out.display()
    );
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { config, out } => cmd_synth(&config.resolve()?, out),
        Command::DemoImage {
            height,
            width,
            cancer_start,
            cancer_end,
            class_separation,
            seed,
            out,
        } => {
            let demo = generate_demo_image(
                (*height, *width),
                (*cancer_start, *cancer_end),
                *class_separation,
                *seed,
            )?;
            RfImageFile::from_demo(&demo).save(out)?;
            println!(
                "wrote {}x{} demo image with cancer columns {:?} to {}",
                height,
                width,
                demo.cancer_cols,
                out.display()
            );
            Ok(())
        }
        Command::Preprocess {
            image,
            out,
            patch_mm,
            overlap,
            out_size,
            half_width_mm,
            lateral_up,
            axial_down,
        } => cmd_preprocess(
            image,
            out,
            PatchGrid {
                patch_size_mm: *patch_mm,
                overlap_fraction: *overlap,
                output_size_px: (*out_size, *out_size),
            },
            *half_width_mm,
            *lateral_up,
            *axial_down,
        ),
        Command::Train { config } => {
            let config = config.resolve()?;
            let metrics = run_experiment(&config)?;
            println!(
                "finished {} runs; summary at {}/summary.json",
                metrics.len(),
                config.experiment.output_dir
            );
            Ok(())
        }
        Command::Eval { dir, method, seed } => cmd_eval(dir, method.as_deref(), *seed),
        Command::Curve {
            dir,
            method,
            seed,
            taus,
            out,
        } => cmd_curve(dir, method, *seed, taus, out),
        Command::Heatmap {
            image,
            checkpoint,
            out,
            loss,
            tau,
            patch_mm,
            overlap,
        } => cmd_heatmap(image, checkpoint, out, loss, *tau, *patch_mm, *overlap),
        Command::Summarize { metrics, out } => {
            summarize_files(metrics, out)?;
            println!("wrote summary to {}", out.display());
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
