//! Planar floating-point images and PNG I/O.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use thiserror::Error;

use crate::bbox::PixelRect;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Channel-planar image with values in `[0, 1]`.
///
/// `data[c * width * height + y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, color: &[f32]) -> Self {
        let mut img = Image::new(width, height, color.len());
        for (c, &v) in color.iter().enumerate() {
            img.plane_mut(c).fill(v);
        }
        img
    }

    pub fn from_planes(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Shape(format!(
                "expected {} values for {width}x{height}x{channels}, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn idx(&self, c: usize, x: usize, y: usize) -> usize {
        c * self.pixels() + y * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[self.idx(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let i = self.idx(c, x, y);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, x, y)).collect()
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Snaps every value to the nearest multiple of 1/255, as PNG storage would.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    pub fn quantized(mut self) -> Self {
        self.quantize();
        self
    }

    pub fn crop(&self, r: PixelRect) -> Image {
        let (w, h) = (r.width(), r.height());
        let mut out = Image::new(w, h, self.channels);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, x, y, self.get(c, r.x0 + x, r.y0 + y));
                }
            }
        }
        out
    }

    /// Bilinear resize with pixel-center alignment; identity when the size is unchanged.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::new(width, height, self.channels);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = (fx - x0 as f64) as f32;
                for c in 0..self.channels {
                    let top = self.get(c, x0, y0) * (1.0 - tx) + self.get(c, x1, y0) * tx;
                    let bot = self.get(c, x0, y1) * (1.0 - tx) + self.get(c, x1, y1) * tx;
                    out.set(c, x, y, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.plane(0).iter().map(|&v| to_u8(v)).collect();
                DynamicImage::ImageLuma8(
                    GrayImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer sized"),
                )
            }
            _ => {
                let mut buf = Vec::with_capacity(self.pixels() * 3);
                for y in 0..self.height {
                    for x in 0..self.width {
                        for c in 0..3 {
                            let v = self.get(c.min(self.channels - 1), x, y);
                            buf.push(to_u8(v));
                        }
                    }
                }
                DynamicImage::ImageRgb8(
                    RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer sized"),
                )
            }
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Image {
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Image::new(w, h, 3);
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, x as usize, y as usize, p[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
        let img = image::load_from_memory(bytes)?;
        Ok(Image::from_dynamic(&img))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        let img = image::open(path)?;
        Ok(Image::from_dynamic(&img))
    }

    /// Reads only the header to get `(width, height)`.
    pub fn probe_dimensions(bytes: &[u8]) -> Result<(usize, usize), ImageError> {
        let reader = image::ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
        let (w, h) = reader.into_dimensions()?;
        Ok((w as usize, h as usize))
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantize() {
        let mut img = Image::new(5, 3, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.037) % 1.0;
        }
        img.quantize();
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut img = Image::new(4, 4, 1);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 / 16.0);
        assert_eq!(img.resize_bilinear(4, 4), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(3, 5, &[0.25, 0.5, 0.75]);
        let r = img.resize_bilinear(7, 2);
        assert!(r.plane(1).iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}
