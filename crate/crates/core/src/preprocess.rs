//! Image-to-patch pipeline for RF ultrasound frames: needle-band ROI,
//! overlapping physical-unit window extraction, anisotropic resampling,
//! and per-patch normalization.
//!
//! All geometry is computed in millimeters so anisotropic pixel spacings
//! are handled uniformly; interpolation arithmetic runs in f64 and is cast
//! to f32 only at the boundary.

use ndarray::Array2;

use crate::error::{Error, Result};

/// A raw RF frame with its physical calibration and annotations.
#[derive(Debug, Clone)]
pub struct RfImage {
    pub samples: Array2<f32>,
    pub axial_spacing_mm: f64,
    pub lateral_spacing_mm: f64,
    /// 1 inside the prostate segmentation, 0 outside; same shape as samples.
    pub prostate_mask: Array2<u8>,
    pub needle: NeedleGeometry,
}

/// Needle line: an entry point in (row, col) pixel coordinates and an angle
/// in degrees measured from the lateral (column) axis, both interpreted in
/// physical millimeter space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleGeometry {
    pub angle_deg: f64,
    pub entry: (f64, f64),
}

impl RfImage {
    pub fn new(
        samples: Array2<f32>,
        axial_spacing_mm: f64,
        lateral_spacing_mm: f64,
        prostate_mask: Array2<u8>,
        needle: NeedleGeometry,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("rf image samples"));
        }
        if samples.dim() != prostate_mask.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} mask", samples.dim()),
                got: format!("{:?}", prostate_mask.dim()),
            });
        }
        if !(axial_spacing_mm > 0.0 && lateral_spacing_mm > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "pixel spacings must be positive, got ({axial_spacing_mm}, {lateral_spacing_mm})"
            )));
        }
        Ok(Self {
            samples,
            axial_spacing_mm,
            lateral_spacing_mm,
            prostate_mask,
            needle,
        })
    }
}

/// Sliding-window layout in physical units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchGrid {
    pub patch_size_mm: f64,
    pub overlap_fraction: f64,
    pub output_size_px: (usize, usize),
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self {
            patch_size_mm: 5.0,
            overlap_fraction: 0.9,
            output_size_px: (256, 256),
        }
    }
}

impl PatchGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_size_mm > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "patch_size_mm must be positive, got {}",
                self.patch_size_mm
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::InvalidConfig(format!(
                "overlap_fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        if self.output_size_px.0 == 0 || self.output_size_px.1 == 0 {
            return Err(Error::InvalidConfig("output_size_px must be nonzero".into()));
        }
        Ok(())
    }

    /// Window extent in pixels for the given spacings: rounded patch size
    /// per axis.
    pub fn window_px(&self, image: &RfImage) -> Result<(usize, usize)> {
        let win_r = (self.patch_size_mm / image.axial_spacing_mm).round() as usize;
        let win_c = (self.patch_size_mm / image.lateral_spacing_mm).round() as usize;
        if win_r == 0 || win_c == 0 {
            return Err(Error::InvalidConfig(
                "patch window rounds to less than one pixel".into(),
            ));
        }
        Ok((win_r, win_c))
    }

    /// Stride in pixels: window · (1 − overlap), at least 1.
    pub fn stride_px(&self, window: (usize, usize)) -> (usize, usize) {
        let s = |w: usize| {
            ((w as f64 * (1.0 - self.overlap_fraction)).round() as usize).max(1)
        };
        (s(window.0), s(window.1))
    }
}

/// Band of pixels within `half_width_mm` perpendicular distance of the
/// needle line, intersected with the prostate mask.
pub fn needle_roi(image: &RfImage, half_width_mm: f64) -> Result<Array2<u8>> {
    if !(half_width_mm > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "needle band half-width must be positive, got {half_width_mm}"
        )));
    }
    let (h, w) = image.samples.dim();
    let theta = image.needle.angle_deg.to_radians();
    // Unit normal to the needle direction (sin θ, cos θ) in mm space.
    let normal = (theta.cos(), -theta.sin());
    let entry_mm = (
        image.needle.entry.0 * image.axial_spacing_mm,
        image.needle.entry.1 * image.lateral_spacing_mm,
    );
    let mut roi = Array2::<u8>::zeros((h, w));
    let mut any = false;
    for r in 0..h {
        for c in 0..w {
            if image.prostate_mask[[r, c]] == 0 {
                continue;
            }
            let p = (
                r as f64 * image.axial_spacing_mm,
                c as f64 * image.lateral_spacing_mm,
            );
            let d = normal.0 * (p.0 - entry_mm.0) + normal.1 * (p.1 - entry_mm.1);
            if d.abs() <= half_width_mm {
                roi[[r, c]] = 1;
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::EmptyRoi);
    }
    Ok(roi)
}

/// A raw extracted window and its top-left pixel origin in the source image.
#[derive(Debug, Clone)]
pub struct ExtractedPatch {
    pub pixels: Array2<f32>,
    pub origin: (usize, usize),
}

/// Slides the grid's window over the image and emits every window with at
/// least 50% of its pixels inside the ROI.
pub fn extract_patches(
    image: &RfImage,
    roi: &Array2<u8>,
    grid: &PatchGrid,
) -> Result<Vec<ExtractedPatch>> {
    grid.validate()?;
    if roi.dim() != image.samples.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?} roi", image.samples.dim()),
            got: format!("{:?}", roi.dim()),
        });
    }
    if roi.iter().all(|&v| v == 0) {
        return Err(Error::EmptyRoi);
    }
    let (h, w) = image.samples.dim();
    let window = grid.window_px(image)?;
    if window.0 > h || window.1 > w {
        return Err(Error::WindowTooLarge {
            window,
            image: (h, w),
        });
    }
    let stride = grid.stride_px(window);

    // Summed-area table of the ROI for O(1) per-window coverage counts.
    let mut integral = Array2::<u64>::zeros((h + 1, w + 1));
    for r in 0..h {
        for c in 0..w {
            integral[[r + 1, c + 1]] = roi[[r, c]] as u64 + integral[[r, c + 1]]
                + integral[[r + 1, c]]
                - integral[[r, c]];
        }
    }
    let window_area = (window.0 * window.1) as u64;

    let mut out = Vec::new();
    let mut r = 0;
    while r + window.0 <= h {
        let mut c = 0;
        while c + window.1 <= w {
            // Sums first so the u64 arithmetic never dips negative.
            let inside = integral[[r + window.0, c + window.1]] + integral[[r, c]]
                - integral[[r, c + window.1]]
                - integral[[r + window.0, c]];
            if 2 * inside >= window_area {
                let pixels = image
                    .samples
                    .slice(ndarray::s![r..r + window.0, c..c + window.1])
                    .to_owned();
                out.push(ExtractedPatch {
                    pixels,
                    origin: (r, c),
                });
            }
            c += stride.1;
        }
        r += stride.0;
    }
    Ok(out)
}

/// Resamples a raw window to uniform physical spacing: mean-pooling by
/// `axial_down` along rows (anti-aliased down-sampling), linear up-sampling
/// by `lateral_up` along columns, then center-crop or linear resize to
/// `output_size_px`.
pub fn resample_patch(
    raw: &Array2<f32>,
    lateral_up: usize,
    axial_down: usize,
    output_size_px: (usize, usize),
) -> Result<Array2<f32>> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("raw patch"));
    }
    if lateral_up == 0 || axial_down == 0 {
        return Err(Error::InvalidConfig(
            "resampling factors must be at least 1".into(),
        ));
    }
    if output_size_px.0 == 0 || output_size_px.1 == 0 {
        return Err(Error::InvalidConfig("output_size_px must be nonzero".into()));
    }
    let (h, w) = raw.dim();
    if h < axial_down {
        return Err(Error::InvalidConfig(format!(
            "cannot down-sample {h} rows by factor {axial_down}"
        )));
    }

    // Axial: mean over consecutive groups of `axial_down` rows.
    let h2 = h / axial_down;
    let mut pooled = Array2::<f64>::zeros((h2, w));
    for i in 0..h2 {
        for c in 0..w {
            let mut acc = 0.0;
            for k in 0..axial_down {
                acc += raw[[i * axial_down + k, c]] as f64;
            }
            pooled[[i, c]] = acc / axial_down as f64;
        }
    }

    // Lateral: linear interpolation onto w · lateral_up columns.
    let upsampled = resize_axis_linear(&pooled, w * lateral_up, true);

    // Fit each axis to the requested output: crop when larger, linear
    // resize when smaller.
    let fitted_rows = fit_axis(&upsampled, output_size_px.0, false);
    let fitted = fit_axis(&fitted_rows, output_size_px.1, true);
    Ok(fitted.mapv(|v| v as f32))
}

fn fit_axis(a: &Array2<f64>, target: usize, along_cols: bool) -> Array2<f64> {
    let current = if along_cols { a.ncols() } else { a.nrows() };
    if current == target {
        a.clone()
    } else if current > target {
        let start = (current - target) / 2;
        if along_cols {
            a.slice(ndarray::s![.., start..start + target]).to_owned()
        } else {
            a.slice(ndarray::s![start..start + target, ..]).to_owned()
        }
    } else {
        resize_axis_linear(a, target, along_cols)
    }
}

/// Linear interpolation along one axis with endpoint alignment: output
/// position i samples source coordinate i·(n−1)/(m−1).
fn resize_axis_linear(a: &Array2<f64>, target: usize, along_cols: bool) -> Array2<f64> {
    let (h, w) = a.dim();
    let source = if along_cols { w } else { h };
    let out_dim = if along_cols { (h, target) } else { (target, w) };
    let scale = if target > 1 {
        (source - 1) as f64 / (target - 1) as f64
    } else {
        0.0
    };
    Array2::from_shape_fn(out_dim, |(r, c)| {
        let (fixed, moving) = if along_cols { (r, c) } else { (c, r) };
        let src = moving as f64 * scale;
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(source - 1);
        let t = src - lo as f64;
        let (va, vb) = if along_cols {
            (a[[fixed, lo]], a[[fixed, hi]])
        } else {
            (a[[lo, fixed]], a[[hi, fixed]])
        };
        va * (1.0 - t) + vb * t
    })
}

/// Resizes a raw window to the model input size (both axes, linear) without
/// any physical-unit bookkeeping. Used for whole-image sliding windows.
pub fn resize_to(raw: &Array2<f32>, target: (usize, usize)) -> Result<Array2<f32>> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("raw patch"));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::InvalidConfig("resize target must be nonzero".into()));
    }
    let a = raw.mapv(|v| v as f64);
    let rows = if a.nrows() == target.0 {
        a
    } else {
        resize_axis_linear(&a, target.0, false)
    };
    let cols = if rows.ncols() == target.1 {
        rows
    } else {
        resize_axis_linear(&rows, target.1, true)
    };
    Ok(cols.mapv(|v| v as f32))
}

/// Centers the patch and scales it to unit population standard deviation.
/// Near-constant input is rejected so callers can drop the patch.
pub fn normalize_patch(a: &Array2<f32>) -> Result<Array2<f32>> {
    if a.is_empty() {
        return Err(Error::EmptyInput("patch"));
    }
    let n = a.len() as f64;
    let mean = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = a
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Err(Error::DegeneratePatch);
    }
    Ok(a.mapv(|v| ((v as f64 - mean) / std) as f32))
}
