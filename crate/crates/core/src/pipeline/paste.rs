use super::StepError;
use crate::bbox::{BBox, PixelRect};
use crate::image::Image;
use crate::segmask::{erode_foreground, Mask};

/// Result of compositing a crop onto a canvas.
#[derive(Debug, Clone)]
pub struct Pasted {
    pub image: Image,
    /// Canvas-sized; holes are the pixels that were overwritten.
    pub pasted: Mask,
    /// Canvas-sized; holes are the resized object footprint before erosion.
    pub footprint: Mask,
    pub rect: PixelRect,
}

/// Resizes `crop` to the pixel extent of `target_bbox` and writes its
/// foreground, shrunk by `erosion_radius`, over `canvas`.
///
/// The crop's foreground is the hole set of `crop_mask`. The mask is padded
/// with a known border before erosion so an object touching the crop edge
/// also loses its outer ring there.
pub fn paste_object(
    canvas: &Image,
    crop: &Image,
    crop_mask: &Mask,
    target_bbox: BBox,
    erosion_radius: usize,
) -> Result<Pasted, StepError> {
    let rect = target_bbox.to_pixel_rect(canvas.width, canvas.height);
    if !target_bbox.is_valid() || rect.is_empty() {
        return Err(StepError::DegenerateTarget(target_bbox.to_array()));
    }
    if (crop.width, crop.height) != (crop_mask.width, crop_mask.height) {
        return Err(crate::segmask::MaskError::Shape(format!(
            "crop {}x{} vs mask {}x{}",
            crop.width, crop.height, crop_mask.width, crop_mask.height
        ))
        .into());
    }
    let (rw, rh) = (rect.width(), rect.height());
    let resized = crop.resize_bilinear(rw, rh);
    let fg = crop_mask.resize_nearest(rw, rh);
    let r = erosion_radius;
    let mut padded = Mask::all_known(rw + 2 * r, rh + 2 * r);
    for y in 0..rh {
        for x in 0..rw {
            padded.set_known(x + r, y + r, fg.is_known(x, y));
        }
    }
    let eroded = erode_foreground(&padded, r as i64)?;

    let mut image = canvas.clone();
    let mut pasted = Mask::all_known(canvas.width, canvas.height);
    let mut footprint = Mask::all_known(canvas.width, canvas.height);
    for y in 0..rh {
        for x in 0..rw {
            let (cx, cy) = (rect.x0 + x, rect.y0 + y);
            if fg.is_hole(x, y) {
                footprint.set_known(cx, cy, false);
            }
            if eroded.is_hole(x + r, y + r) {
                pasted.set_known(cx, cy, false);
                for c in 0..image.channels.min(resized.channels) {
                    image.set(c, cx, cy, resized.get(c, x, y));
                }
            }
        }
    }
    if !pasted.has_hole() {
        log::warn!("paste: erosion radius {r} removes the whole {rw}x{rh} object; canvas unchanged");
    }
    Ok(Pasted {
        image,
        pasted,
        footprint,
        rect,
    })
}
