//! Whole-frame sliding-window inference: scores every grid window of an RF
//! image with a trained model and renders the result as a portable pixmap
//! (binary PPM) with a per-cell CSV alongside.

use std::path::Path;

use anyhow::{bail, Context, Result};
use evicore::coteach::{head_outputs, LossKind};
use evicore::model::{Backbone, ForwardMode};
use evicore::preprocess::{normalize_patch, resize_to, PatchGrid, RfImage};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

/// Model forwards are batched in chunks of this many windows.
const BATCH: usize = 256;

/// Painted cells are blended over the grayscale underlay with this opacity.
const OVERLAY_ALPHA: f64 = 0.55;
const CANCER_COLOR: [u8; 3] = [220, 40, 40];
const BENIGN_COLOR: [u8; 3] = [40, 70, 220];

/// One scored window: its grid position, pixel origin, and model outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub row: usize,
    pub col: usize,
    pub origin: (usize, usize),
    pub prob_cancer: f64,
    pub confidence: f64,
}

/// A full sliding-window scan of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Cells in row-major grid order.
    pub cells: Vec<HeatmapCell>,
    pub window: (usize, usize),
    pub stride: (usize, usize),
    /// Grid extent as (rows, cols) of cells.
    pub grid_shape: (usize, usize),
    pub image_shape: (usize, usize),
}

/// Scores every window of `grid` laid over `image` with the model's
/// evaluation-mode forward pass. Windows are resized to the model's input
/// and normalized exactly like training patches.
pub fn sliding_window_heatmap(
    model: &mut Backbone,
    image: &RfImage,
    grid: &PatchGrid,
    kind: LossKind,
) -> Result<Heatmap> {
    grid.validate().map_err(anyhow::Error::from)?;
    let (h, w) = image.samples.dim();
    let window = grid.window_px(image)?;
    if window.0 > h || window.1 > w {
        bail!(
            "window {:?} exceeds image dimensions {:?}",
            window,
            (h, w)
        );
    }
    let stride = grid.stride_px(window);
    let rows: Vec<usize> = (0..=h - window.0).step_by(stride.0).collect();
    let cols: Vec<usize> = (0..=w - window.1).step_by(stride.1).collect();
    let input = model.config().input_size;

    // Preprocess all windows first, then forward in fixed-size chunks.
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    let mut patches = Array3::<f32>::zeros((rows.len() * cols.len(), input.0, input.1));
    for (i, (&r, &c)) in rows
        .iter()
        .flat_map(|r| cols.iter().map(move |c| (r, c)))
        .enumerate()
    {
        let raw = image
            .samples
            .slice(ndarray::s![r..r + window.0, c..c + window.1])
            .to_owned();
        let resized = resize_to(&raw, input)?;
        let normalized = normalize_patch(&resized)
            .with_context(|| format!("window at ({r}, {c}) cannot be normalized"))?;
        patches.index_axis_mut(Axis(0), i).assign(&normalized);
        origins.push((r, c));
    }

    let mut cells = Vec::with_capacity(origins.len());
    let n = origins.len();
    let mut start = 0;
    while start < n {
        let end = (start + BATCH).min(n);
        let batch = patches.slice(ndarray::s![start..end, .., ..]).to_owned();
        let logits = model.forward(&batch, ForwardMode::Eval, None)?;
        for (row_idx, i) in (start..end).enumerate() {
            let (prob_cancer, confidence, _) =
                head_outputs(logits[[row_idx, 0]], logits[[row_idx, 1]], kind)?;
            cells.push(HeatmapCell {
                row: i / cols.len(),
                col: i % cols.len(),
                origin: origins[i],
                prob_cancer,
                confidence,
            });
        }
        start = end;
    }

    Ok(Heatmap {
        cells,
        window,
        stride,
        grid_shape: (rows.len(), cols.len()),
        image_shape: (h, w),
    })
}

/// Renders the heatmap over the image as a binary PPM (P6). The underlay is
/// the min–max normalized grayscale image; every cell with confidence at
/// least `tau` blends its class color (red for cancer, blue for benign)
/// over its window area, cells painted in row-major order.
pub fn render_ppm(image: &RfImage, heatmap: &Heatmap, tau: f64) -> Result<Vec<u8>> {
    let (h, w) = image.samples.dim();
    if heatmap.image_shape != (h, w) {
        bail!(
            "heatmap was computed for image shape {:?}, got {:?}",
            heatmap.image_shape,
            (h, w)
        );
    }
    let (lo, hi) = image
        .samples
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (hi - lo).max(1e-12);
    let mut pixels: Vec<[f64; 3]> = image
        .samples
        .iter()
        .map(|&v| {
            let g = ((v - lo) / span) as f64 * 255.0;
            [g, g, g]
        })
        .collect();

    for cell in &heatmap.cells {
        if cell.confidence < tau {
            continue;
        }
        let color = if cell.prob_cancer > 0.5 {
            CANCER_COLOR
        } else {
            BENIGN_COLOR
        };
        for r in cell.origin.0..(cell.origin.0 + heatmap.window.0).min(h) {
            for c in cell.origin.1..(cell.origin.1 + heatmap.window.1).min(w) {
                let px = &mut pixels[r * w + c];
                for ch in 0..3 {
                    px[ch] = (1.0 - OVERLAY_ALPHA) * px[ch] + OVERLAY_ALPHA * color[ch] as f64;
                }
            }
        }
    }

    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(pixels.len() * 3);
    for px in pixels {
        for ch in px {
            out.push(ch.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Writes `heatmap.ppm` and `cells.csv` into `dir`.
pub fn write_outputs(dir: &Path, image: &RfImage, heatmap: &Heatmap, tau: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("heatmap.ppm"), render_ppm(image, heatmap, tau)?)?;
    let mut csv = String::from("row,col,origin_row,origin_col,prob_cancer,confidence\n");
    for cell in &heatmap.cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            cell.row, cell.col, cell.origin.0, cell.origin.1, cell.prob_cancer, cell.confidence
        ));
    }
    std::fs::write(dir.join("cells.csv"), csv)?;
    Ok(())
}
