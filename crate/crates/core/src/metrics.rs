//! MAE and SSIM over whole images and over a region of interest.
//!
//! Both are reported in percent of the unit range: MAE x100, SSIM x100.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{BBox, PixelRect};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize, usize), (usize, usize, usize)),
    #[error("region {0:?} contains no pixels")]
    EmptyRegion([f64; 4]),
    #[error("region {width}x{height} is smaller than the {window}x{window} window")]
    RegionTooSmall { width: usize, height: usize, window: usize },
    #[error("external evaluator `{name}` failed: {message}")]
    External { name: String, message: String },
}

fn dims(img: &Image) -> (usize, usize, usize) {
    (img.channels, img.height, img.width)
}

fn region_rect(a: &Image, b: &Image, region: Option<BBox>) -> Result<PixelRect, MetricsError> {
    if dims(a) != dims(b) {
        return Err(MetricsError::Shape(dims(a), dims(b)));
    }
    let bbox = region.map_or(BBox::FULL, clip);
    let rect = bbox.to_pixel_rect(a.width, a.height);
    if rect.is_empty() {
        return Err(MetricsError::EmptyRegion(bbox.to_array()));
    }
    Ok(rect)
}

fn clip(b: BBox) -> BBox {
    BBox::clamped_ordered(b.to_array())
}

/// Mean absolute difference over the region (default: whole image), x100.
pub fn mae(a: &Image, b: &Image, region: Option<BBox>) -> Result<f64, MetricsError> {
    let r = region_rect(a, b, region)?;
    let mut sum = 0.0;
    for c in 0..a.channels {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                sum += (a.get(c, x, y) as f64 - b.get(c, x, y) as f64).abs();
            }
        }
    }
    Ok(100.0 * sum / (a.channels * r.width() * r.height()) as f64)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_rect(a: &Image, b: &Image, r: PixelRect) -> f64 {
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let (w, h) = (r.width(), r.height());
    let mut total = 0.0;
    for c in 0..a.channels {
        let take = |img: &Image| -> Vec<f64> {
            let mut v = Vec::with_capacity(w * h);
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    v.push(img.get(c, x, y) as f64);
                }
            }
            v
        };
        let (pa, pb) = (take(a), take(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter_valid(&pa, w, h, &taps);
        let mu_b = filter_valid(&pb, w, h, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), w, h, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), w, h, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), w, h, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    100.0 * total / a.channels as f64
}

/// Mean SSIM over all windows lying fully inside the region, averaged over channels, x100.
pub fn ssim(a: &Image, b: &Image, region: Option<BBox>) -> Result<f64, MetricsError> {
    let r = region_rect(a, b, region)?;
    if r.width() < SSIM_WINDOW || r.height() < SSIM_WINDOW {
        return Err(MetricsError::RegionTooSmall {
            width: r.width(),
            height: r.height(),
            window: SSIM_WINDOW,
        });
    }
    Ok(ssim_rect(a, b, r))
}

/// Grows `r` to at least the window size, centered where possible and kept inside the image.
fn widen_to_window(r: PixelRect, width: usize, height: usize) -> PixelRect {
    let grow = |lo: usize, hi: usize, n: usize| -> (usize, usize) {
        if hi - lo >= SSIM_WINDOW || n < SSIM_WINDOW {
            return (lo, hi);
        }
        let extra = SSIM_WINDOW - (hi - lo);
        let lo2 = lo.saturating_sub(extra / 2);
        let hi2 = (lo2 + SSIM_WINDOW).min(n);
        (hi2 - SSIM_WINDOW, hi2)
    };
    let (x0, x1) = grow(r.x0, r.x1, width);
    let (y0, y1) = grow(r.y0, r.y1, height);
    PixelRect { x0, y0, x1, y1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: SSIM_WINDOW,
            sigma: SSIM_SIGMA,
            k1: SSIM_K1,
            k2: SSIM_K2,
            dynamic_range: SSIM_RANGE,
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_all: f64,
    pub ssim_all: f64,
    /// `None` when nothing was modified.
    pub mae_roi: Option<f64>,
    pub ssim_roi: Option<f64>,
    /// `[width, height]` in pixels.
    pub resolution: [usize; 2],
    pub roi: Option<BBox>,
    /// Pixel rectangle the RoI SSIM was computed on, after widening to the window.
    pub roi_ssim_rect: Option<PixelRect>,
    pub ssim_params: SsimParams,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

/// Scores `after` against `reference` if given, else against `before`.
pub fn report(before: &Image, after: &Image, roi: Option<BBox>, reference: Option<&Image>) -> Result<MetricsReport, MetricsError> {
    let base = reference.unwrap_or(before);
    if dims(before) != dims(after) {
        return Err(MetricsError::Shape(dims(before), dims(after)));
    }
    let mae_all = mae(base, after, None)?;
    let ssim_all = ssim(base, after, None)?;
    let roi = roi.map(clip);
    let (mae_roi, ssim_roi, rect) = match roi {
        Some(b) => {
            let r = b.to_pixel_rect(after.width, after.height);
            if r.is_empty() {
                (None, None, None)
            } else {
                let wide = widen_to_window(r, after.width, after.height);
                (Some(mae(base, after, Some(b))?), Some(ssim(base, after, Some(wide.to_bbox(after.width, after.height)))?), Some(wide))
            }
        }
        None => (None, None, None),
    };
    Ok(MetricsReport {
        mae_all,
        ssim_all,
        mae_roi,
        ssim_roi,
        resolution: [after.width, after.height],
        roi,
        roi_ssim_rect: rect,
        ssim_params: SsimParams::default(),
        external: BTreeMap::new(),
    })
}

/// A perceptual metric computed outside this crate (e.g. LPIPS or FID):
/// a program called as `program [args..] <before.png> <after.png>` that
/// prints one number on stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEvaluator {
    pub name: String,
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalEvaluator {
    pub fn evaluate(&self, before: &Path, after: &Path) -> Result<f64, MetricsError> {
        let fail = |message: String| MetricsError::External {
            name: self.name.clone(),
            message,
        };
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(before)
            .arg(after)
            .output()
            .map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exit {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim().parse::<f64>().map_err(|e| fail(format!("unparsable output {:?}: {e}", text.trim())))
    }
}
