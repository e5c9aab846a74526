//! Binary masks, hole morphology, and instance segmentation backends.
//!
//! Convention: in a [`Mask`], `1`/`true` marks a known pixel and `0`/`false`
//! a hole. Instance masks use the same convention with the object's pixels as
//! the hole, so a removal mask is the instance mask as-is.

mod backend;
mod mask;
mod morphology;

use thiserror::Error;

pub use backend::{
    ExternalBackend, SegmentationBackend, SyntheticOracle, WireCandidate, WireRequest, WireResponse,
};
pub use mask::Mask;
pub use morphology::{default_dilation_radius, dilate_hole, erode_foreground};

use crate::bbox::BBox;
use crate::image::Image;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("negative morphology radius {0}")]
    NegativeRadius(i64),
    #[error("mask values must be 0 or 1, found {0}")]
    NotBinary(u8),
    #[error("mask shape mismatch: {0}")]
    Shape(String),
    #[error("bounding box {0:?} rasterizes to zero pixels")]
    DegenerateBox([f64; 4]),
    #[error("mask codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("no `{category}` instance found; candidates: {available:?}")]
    NotFound { category: String, available: Vec<String> },
    #[error("segmentation backend unreachable: {0}")]
    Unreachable(String),
    #[error("segmentation backend returned an invalid response: {0}")]
    BadResponse(String),
    #[error("invalid bbox hint {0:?}")]
    InvalidHint([f64; 4]),
}

/// One detected instance. `mask` has the instance pixels as its hole.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCandidate {
    pub category: String,
    pub score: f64,
    pub bbox: BBox,
    pub mask: Mask,
}

/// Runs the backend and picks the candidate best matching the hint.
pub fn segment(
    image: &Image,
    category: &str,
    bbox_hint: BBox,
    backend: &dyn SegmentationBackend,
) -> Result<InstanceCandidate, SegmentError> {
    if !bbox_hint.is_valid() {
        return Err(SegmentError::InvalidHint(bbox_hint.to_array()));
    }
    let candidates = backend.candidates(image, category, bbox_hint)?;
    select_instance(&candidates, category, bbox_hint).cloned()
}

/// Among candidates of `category`, the one maximizing IoU with the hint; ties
/// go to the higher score, then to the lexicographically smallest bbox.
pub fn select_instance<'a>(
    candidates: &'a [InstanceCandidate],
    category: &str,
    bbox_hint: BBox,
) -> Result<&'a InstanceCandidate, SegmentError> {
    candidates
        .iter()
        .filter(|c| c.category == category)
        .max_by(|a, b| {
            a.bbox
                .iou(&bbox_hint)
                .total_cmp(&b.bbox.iou(&bbox_hint))
                .then(a.score.total_cmp(&b.score))
                .then_with(|| lex_cmp(&b.bbox.to_array(), &a.bbox.to_array()))
        })
        .ok_or_else(|| SegmentError::NotFound {
            category: category.to_string(),
            available: candidates.iter().map(|c| c.category.clone()).collect(),
        })
}

fn lex_cmp(a: &[f64; 4], b: &[f64; 4]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Hole = the pixels whose centers fall inside `bbox`.
pub fn mask_from_bbox(bbox: BBox, width: usize, height: usize) -> Result<Mask, MaskError> {
    let rect = bbox.to_pixel_rect(width, height);
    if !bbox.is_valid() || rect.is_empty() {
        return Err(MaskError::DegenerateBox(bbox.to_array()));
    }
    let mut m = Mask::all_known(width, height);
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            m.set_known(x, y, false);
        }
    }
    Ok(m)
}
