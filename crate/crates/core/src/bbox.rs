//! Normalized axis-aligned boxes and their pixel rasterization.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized image coordinates, `[x_min, y_min, x_max, y_max]`.
///
/// Serialized as a plain four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const FULL: BBox = BBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 1.0,
        y_max: 1.0,
    };

    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Checks `0 <= min <= max <= 1` on both axes (NaN fails).
    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x_min)
            && in_unit(self.x_max)
            && in_unit(self.y_min)
            && in_unit(self.y_max)
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        );
        (b.x_min <= b.x_max && b.y_min <= b.y_max).then_some(b)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x_min.min(other.x_min),
            self.y_min.min(other.y_min),
            self.x_max.max(other.x_max),
            self.y_max.max(other.y_max),
        )
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).map_or(0.0, |b| b.area());
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamps each coordinate to `[0, 1]` and orders the corners.
    pub fn clamped_ordered(raw: [f64; 4]) -> BBox {
        let c = raw.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        BBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3]))
    }

    /// Pixel rectangle of the pixels whose centers fall in the half-open box
    /// `[x_min*W, x_max*W) x [y_min*H, y_max*H)`.
    pub fn to_pixel_rect(&self, width: usize, height: usize) -> PixelRect {
        let lo = |v: f64, n: usize| ((v * n as f64 - 0.5).ceil().max(0.0) as usize).min(n);
        PixelRect {
            x0: lo(self.x_min, width),
            y0: lo(self.y_min, height),
            x1: lo(self.x_max, width),
            y1: lo(self.y_max, height),
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Normalized box whose rasterization is exactly this rectangle.
    pub fn to_bbox(&self, width: usize, height: usize) -> BBox {
        BBox::new(
            self.x0 as f64 / width as f64,
            self.y0 as f64 / height as f64,
            self.x1 as f64 / width as f64,
            self.y1 as f64 / height as f64,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rasterizes_quarter_box_on_8x8() {
        let r = BBox::new(0.25, 0.25, 0.75, 0.75).to_pixel_rect(8, 8);
        assert_eq!(r, PixelRect { x0: 2, y0: 2, x1: 6, y1: 6 });
    }

    #[test]
    fn full_box_covers_image() {
        let r = BBox::FULL.to_pixel_rect(7, 5);
        assert_eq!(r, PixelRect { x0: 0, y0: 0, x1: 7, y1: 5 });
    }

    #[test]
    fn pixel_rect_round_trips() {
        let r = PixelRect { x0: 3, y0: 1, x1: 9, y1: 4 };
        assert_eq!(r.to_bbox(16, 8).to_pixel_rect(16, 8), r);
    }

    #[test]
    fn iou_by_hand() {
        let a = BBox::new(0.0, 0.0, 0.5, 0.5);
        let b = BBox::new(0.25, 0.0, 0.75, 0.5);
        // inter 0.125, union 0.375
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.iou(&BBox::new(0.6, 0.6, 0.9, 0.9)), 0.0);
    }

    #[test]
    fn clamp_orders_corners() {
        let b = BBox::clamped_ordered([1.3, 0.7, -0.2, 0.1]);
        assert_eq!(b, BBox::new(0.0, 0.1, 1.0, 0.7));
        assert!(b.is_valid());
    }
}
