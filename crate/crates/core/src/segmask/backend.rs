use std::collections::VecDeque;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{InstanceCandidate, Mask, SegmentError};
use crate::bbox::{BBox, PixelRect};
use crate::image::Image;

/// Produces instance candidates for a category near a hint box.
pub trait SegmentationBackend: Send + Sync {
    fn candidates(&self, image: &Image, category: &str, bbox_hint: BBox)
        -> Result<Vec<InstanceCandidate>, SegmentError>;

    fn name(&self) -> &str;
}

/// Shape categories the synthetic oracle can tell apart.
pub const SHAPE_CATEGORIES: [&str; 3] = ["cube", "sphere", "cylinder"];

/// Color-threshold segmenter for flat-background synthetic scenes.
///
/// The background color is the per-channel median of the image border. Inside
/// the hint, pixels farther than `background_tolerance` from it are salient;
/// their median is the instance color, and the instance is the largest
/// 4-connected set of hint pixels within `color_tolerance` of that color.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    pub color_tolerance: f32,
    pub background_tolerance: f32,
    pub classify_shapes: bool,
}

impl Default for SyntheticOracle {
    fn default() -> Self {
        SyntheticOracle {
            color_tolerance: 0.12,
            background_tolerance: 0.15,
            classify_shapes: true,
        }
    }
}

fn dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

fn border_median(image: &Image) -> Vec<f32> {
    let (w, h) = (image.width, image.height);
    (0..image.channels)
        .map(|c| {
            let mut v = Vec::with_capacity(2 * (w + h));
            for x in 0..w {
                v.push(image.get(c, x, 0));
                v.push(image.get(c, x, h - 1));
            }
            for y in 0..h {
                v.push(image.get(c, 0, y));
                v.push(image.get(c, w - 1, y));
            }
            median(v)
        })
        .collect()
}

/// Shape label from the fill ratio of the component's bounding rectangle and its aspect.
pub fn classify_shape(fill: f64, aspect: f64) -> &'static str {
    if fill < 0.9 {
        "sphere"
    } else if aspect < 0.8 {
        "cylinder"
    } else {
        "cube"
    }
}

impl SyntheticOracle {
    fn largest_component(member: &[bool], rect: PixelRect, width: usize) -> Vec<(usize, usize)> {
        let (rw, rh) = (rect.width(), rect.height());
        let mut seen = vec![false; rw * rh];
        let mut best: Vec<(usize, usize)> = Vec::new();
        for sy in 0..rh {
            for sx in 0..rw {
                let i = sy * rw + sx;
                if seen[i] || !member[(rect.y0 + sy) * width + rect.x0 + sx] {
                    continue;
                }
                let mut comp = Vec::new();
                let mut queue = VecDeque::from([(sx, sy)]);
                seen[i] = true;
                while let Some((x, y)) = queue.pop_front() {
                    comp.push((rect.x0 + x, rect.y0 + y));
                    let mut visit = |nx: usize, ny: usize| {
                        let j = ny * rw + nx;
                        if !seen[j] && member[(rect.y0 + ny) * width + rect.x0 + nx] {
                            seen[j] = true;
                            queue.push_back((nx, ny));
                        }
                    };
                    if x > 0 {
                        visit(x - 1, y);
                    }
                    if x + 1 < rw {
                        visit(x + 1, y);
                    }
                    if y > 0 {
                        visit(x, y - 1);
                    }
                    if y + 1 < rh {
                        visit(x, y + 1);
                    }
                }
                if comp.len() > best.len() {
                    best = comp;
                }
            }
        }
        best
    }
}

impl SegmentationBackend for SyntheticOracle {
    fn candidates(
        &self,
        image: &Image,
        category: &str,
        bbox_hint: BBox,
    ) -> Result<Vec<InstanceCandidate>, SegmentError> {
        let rect = bbox_hint.to_pixel_rect(image.width, image.height);
        if rect.is_empty() {
            return Ok(Vec::new());
        }
        let bg = border_median(image);
        let mut salient: Vec<Vec<f32>> = Vec::new();
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let p = image.pixel(x, y);
                if dist(&p, &bg) > self.background_tolerance {
                    salient.push(p);
                }
            }
        }
        if salient.is_empty() {
            return Ok(Vec::new());
        }
        let instance_color: Vec<f32> = (0..image.channels)
            .map(|c| median(salient.iter().map(|p| p[c]).collect()))
            .collect();
        let mut member = vec![false; image.pixels()];
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                member[y * image.width + x] = dist(&image.pixel(x, y), &instance_color) <= self.color_tolerance;
            }
        }
        let comp = Self::largest_component(&member, rect, image.width);
        if comp.is_empty() {
            return Ok(Vec::new());
        }
        let mut mask = Mask::all_known(image.width, image.height);
        let mut r = PixelRect {
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
        };
        for &(x, y) in &comp {
            mask.set_known(x, y, false);
            r.x0 = r.x0.min(x);
            r.y0 = r.y0.min(y);
            r.x1 = r.x1.max(x + 1);
            r.y1 = r.y1.max(y + 1);
        }
        let fill = comp.len() as f64 / (r.width() * r.height()) as f64;
        let aspect = r.width() as f64 / r.height() as f64;
        let label = if self.classify_shapes && SHAPE_CATEGORIES.contains(&category) {
            classify_shape(fill, aspect).to_string()
        } else {
            category.to_string()
        };
        Ok(vec![InstanceCandidate {
            category: label,
            score: (comp.len() as f64 / salient.len() as f64).min(1.0),
            bbox: r.to_bbox(image.width, image.height),
            mask,
        }])
    }

    fn name(&self) -> &str {
        "synthetic-oracle"
    }
}

/// Request body sent to an external segmentation service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireRequest {
    pub image_png_base64: String,
    pub category: String,
    pub bbox_hint: BBox,
}

/// One candidate in the external service's response. The mask is a
/// single-channel PNG with 255 = background and 0 = instance pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireCandidate {
    pub category: String,
    pub score: f64,
    pub bbox: BBox,
    pub mask_png_base64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireResponse {
    pub candidates: Vec<WireCandidate>,
}

impl WireCandidate {
    pub fn from_candidate(c: &InstanceCandidate) -> Result<Self, SegmentError> {
        let png = c.mask.encode_png().map_err(|e| SegmentError::BadResponse(e.to_string()))?;
        Ok(WireCandidate {
            category: c.category.clone(),
            score: c.score,
            bbox: c.bbox,
            mask_png_base64: B64.encode(png),
        })
    }

    pub fn into_candidate(self, width: usize, height: usize) -> Result<InstanceCandidate, SegmentError> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(SegmentError::BadResponse(format!("score {} outside [0,1]", self.score)));
        }
        if !self.bbox.is_valid() {
            return Err(SegmentError::BadResponse(format!("invalid bbox {:?}", self.bbox.to_array())));
        }
        let bytes = B64
            .decode(&self.mask_png_base64)
            .map_err(|e| SegmentError::BadResponse(format!("mask base64: {e}")))?;
        let mask = Mask::decode_png(&bytes).map_err(|e| SegmentError::BadResponse(format!("mask png: {e}")))?;
        if mask.width != width || mask.height != height {
            return Err(SegmentError::BadResponse(format!(
                "mask is {}x{}, image is {width}x{height}",
                mask.width, mask.height
            )));
        }
        Ok(InstanceCandidate {
            category: self.category,
            score: self.score,
            bbox: self.bbox,
            mask,
        })
    }
}

/// Client for an external segmentation model served over HTTP (JSON POST).
/// Holds no per-request state, so it can be shared across threads.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub url: String,
    pub timeout: Duration,
}

impl ExternalBackend {
    pub fn new(url: impl Into<String>) -> Self {
        ExternalBackend {
            url: url.into(),
            timeout: Duration::from_secs(60),
        }
    }
}

impl SegmentationBackend for ExternalBackend {
    fn candidates(
        &self,
        image: &Image,
        category: &str,
        bbox_hint: BBox,
    ) -> Result<Vec<InstanceCandidate>, SegmentError> {
        let png = image.encode_png().map_err(|e| SegmentError::BadResponse(e.to_string()))?;
        let request = WireRequest {
            image_png_base64: B64.encode(png),
            category: category.to_string(),
            bbox_hint,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .send_json(&request)
            .map_err(|e| SegmentError::Unreachable(format!("{}: {e}", self.url)))?;
        let body: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| SegmentError::BadResponse(e.to_string()))?;
        body.candidates
            .into_iter()
            .map(|c| c.into_candidate(image.width, image.height))
            .collect()
    }

    fn name(&self) -> &str {
        "external"
    }
}
