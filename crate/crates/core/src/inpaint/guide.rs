//! Background statistics that the hole average is pulled toward.

use serde::{Deserialize, Serialize};

use super::{InpaintError, PixelGrid};
use crate::bbox::{BBox, PixelRect};
use crate::segmask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuideMode {
    None,
    #[default]
    Global,
    RowWise,
}

/// Per-row target for the row-wise constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowTarget {
    pub y: usize,
    pub mean: Vec<f64>,
    /// The row had no known pixels inside the region; `mean` is the global one.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideSpec {
    pub region: BBox,
    pub mode: GuideMode,
    /// Per-channel mean of the known pixels inside the region.
    pub global: Vec<f64>,
    /// One entry per hole-intersecting row, ascending; empty in global mode.
    pub rows: Vec<RowTarget>,
}

impl GuideSpec {
    pub fn fallback_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.fallback).count()
    }
}

/// Hole bbox grown by a quarter of its width/height on each side, clipped.
pub fn guide_region(mask: &Mask) -> Option<BBox> {
    let hole = mask.hole_bbox()?;
    let (dx, dy) = (0.25 * hole.width(), 0.25 * hole.height());
    Some(BBox::new(
        (hole.x_min - dx).max(0.0),
        (hole.y_min - dy).max(0.0),
        (hole.x_max + dx).min(1.0),
        (hole.y_max + dy).min(1.0),
    ))
}

fn hole_rows(mask: &Mask) -> Vec<usize> {
    (0..mask.height)
        .filter(|&y| (0..mask.width).any(|x| mask.is_hole(x, y)))
        .collect()
}

fn known_mean(image: &PixelGrid, mask: &Mask, rect: PixelRect, rows: std::ops::Range<usize>) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; image.channels];
    let mut n = 0usize;
    for y in rows {
        for x in rect.x0..rect.x1 {
            if mask.is_known(x, y) {
                n += 1;
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += image.get(c, x, y);
                }
            }
        }
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

/// Means of the known pixels of `image` inside `region`, globally and, in
/// row-wise mode, per hole-intersecting row.
pub fn compute_background_average(
    image: &PixelGrid,
    mask: &Mask,
    region: BBox,
    mode: GuideMode,
) -> Result<GuideSpec, InpaintError> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(InpaintError::Shape(format!(
            "image {}x{} vs mask {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    if !region.is_valid() {
        return Err(InpaintError::InvalidSpec(format!("guide region {:?}", region.to_array())));
    }
    let rect = region.to_pixel_rect(image.width, image.height);
    let global = known_mean(image, mask, rect, rect.y0..rect.y1).ok_or(InpaintError::NoBackground {
        region: region.to_array(),
    })?;
    let rows = if mode == GuideMode::RowWise {
        hole_rows(mask)
            .into_iter()
            .map(|y| {
                let in_region = y >= rect.y0 && y < rect.y1;
                match known_mean(image, mask, rect, y..y + 1).filter(|_| in_region) {
                    Some(mean) => RowTarget {
                        y,
                        mean,
                        fallback: false,
                    },
                    None => RowTarget {
                        y,
                        mean: global.clone(),
                        fallback: true,
                    },
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(GuideSpec {
        region,
        mode,
        global,
        rows,
    })
}
