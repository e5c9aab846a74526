use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat};

use super::MaskError;
use crate::bbox::{BBox, PixelRect};

/// Binary known/hole grid. `true` = known pixel (value 1), `false` = hole (value 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn all_known(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn all_hole(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_known(width: usize, height: usize, known: Vec<bool>) -> Result<Self, MaskError> {
        if known.len() != width * height {
            return Err(MaskError::Shape(format!(
                "expected {} values for {width}x{height}, got {}",
                width * height,
                known.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            data: known,
        })
    }

    /// Builds a mask from 0/1 values; anything else is rejected.
    pub fn from_binary(width: usize, height: usize, values: &[u8]) -> Result<Self, MaskError> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(MaskError::NotBinary(*v));
        }
        Mask::from_known(width, height, values.iter().map(|&v| v == 1).collect())
    }

    #[inline]
    pub fn is_known(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_hole(&self, x: usize, y: usize) -> bool {
        !self.is_known(x, y)
    }

    #[inline]
    pub fn set_known(&mut self, x: usize, y: usize, known: bool) {
        self.data[y * self.width + x] = known;
    }

    pub fn known_slice(&self) -> &[bool] {
        &self.data
    }

    /// 1.0 for known pixels, 0.0 for holes.
    pub fn value(&self, x: usize, y: usize) -> f64 {
        if self.is_known(x, y) {
            1.0
        } else {
            0.0
        }
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|&&k| !k).count()
    }

    pub fn has_hole(&self) -> bool {
        self.data.iter().any(|&k| !k)
    }

    /// Tight pixel bounds of the hole, or `None` if there is no hole.
    pub fn hole_rect(&self) -> Option<PixelRect> {
        let mut r: Option<PixelRect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_hole(x, y) {
                    r = Some(match r {
                        None => PixelRect { x0: x, y0: y, x1: x + 1, y1: y + 1 },
                        Some(r) => PixelRect {
                            x0: r.x0.min(x),
                            y0: r.y0.min(y),
                            x1: r.x1.max(x + 1),
                            y1: r.y1.max(y + 1),
                        },
                    });
                }
            }
        }
        r
    }

    pub fn hole_bbox(&self) -> Option<BBox> {
        self.hole_rect().map(|r| r.to_bbox(self.width, self.height))
    }

    /// Hole set union: a pixel is a hole if it is a hole in either mask.
    pub fn union_holes(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    /// Swaps known and hole.
    pub fn inverted(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&k| !k).collect(),
        }
    }

    pub fn crop(&self, r: PixelRect) -> Mask {
        let mut out = Mask::all_known(r.width(), r.height());
        for y in 0..r.height() {
            for x in 0..r.width() {
                out.set_known(x, y, self.is_known(r.x0 + x, r.y0 + y));
            }
        }
        out
    }

    /// Nearest-neighbour resize with pixel-center alignment.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Mask::all_known(width, height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                out.set_known(x, y, self.is_known(sx, sy));
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, MaskError> {
        let buf: Vec<u8> = self.data.iter().map(|&k| if k { 255 } else { 0 }).collect();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer sized");
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageLuma8(img).write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decodes a single-channel mask image: values >= 128 are known.
    pub fn decode_png(bytes: &[u8]) -> Result<Mask, MaskError> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Mask::from_known(w, h, img.pixels().map(|p| p[0] >= 128).collect())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), MaskError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mask, MaskError> {
        Mask::decode_png(&std::fs::read(path)?)
    }
}
