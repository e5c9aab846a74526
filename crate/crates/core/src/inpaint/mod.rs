//! Single-image inpainting by optimizing an encoder-decoder on the image itself.
//!
//! The network maps a fixed noise map to an image. Its parameters are fitted so
//! the output matches the input on known pixels, optionally with a penalty
//! tying the average of the hole to the average of the nearby background.
//! The hole is filled from the network output; known pixels are copied through.

mod guide;
mod loss;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use guide::{compute_background_average, guide_region, GuideMode, GuideSpec, RowTarget};
pub use loss::{dip_loss, dip_loss_grad, gradcheck, guide_term_grad, guided_loss, guided_loss_grad, LossKind, LossParts};

use crate::image::Image;
use crate::nn::{Adam, NetworkConfig, NetworkError, SkipNet, Tensor};
use crate::segmask::{default_dilation_radius, dilate_hole, Mask, MaskError};

#[derive(Debug, Error)]
pub enum InpaintError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("guide region {region:?} contains no known pixels")]
    NoBackground { region: [f64; 4] },
    #[error("guide does not match the mask: {0}")]
    GuideMismatch(String),
    #[error("invalid inpaint spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize, trace: Vec<TraceRow> },
}

/// Channel-planar image in f64 for loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "pixel grid length");
        PixelGrid {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

impl From<&Image> for PixelGrid {
    fn from(img: &Image) -> Self {
        PixelGrid::new(
            img.width,
            img.height,
            img.channels,
            img.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintSpec {
    pub iterations: usize,
    pub lambda: f64,
    /// Hole dilation in pixels; `None` picks the resolution default.
    pub dilation_radius: Option<usize>,
    pub guide_mode: GuideMode,
    pub network: NetworkConfig,
    pub noise_seed: u64,
    pub param_seed: u64,
    pub learning_rate: f64,
    /// Std of Gaussian noise added to the input map each iteration; 0 disables.
    pub input_noise_std: f64,
}

impl Default for InpaintSpec {
    fn default() -> Self {
        InpaintSpec {
            iterations: 2000,
            lambda: 0.1,
            dilation_radius: None,
            guide_mode: GuideMode::Global,
            network: NetworkConfig::default(),
            noise_seed: 0,
            param_seed: 0,
            learning_rate: 0.01,
            input_noise_std: 0.0,
        }
    }
}

impl InpaintSpec {
    /// Unguided reconstruction with no dilation.
    pub fn plain() -> Self {
        InpaintSpec {
            guide_mode: GuideMode::None,
            dilation_radius: Some(0),
            ..Default::default()
        }
    }

    pub fn effective_dilation(&self, width: usize, height: usize) -> usize {
        self.dilation_radius
            .unwrap_or_else(|| default_dilation_radius(width.max(height)))
    }

    pub fn validate(&self) -> Result<(), InpaintError> {
        let bad = |m: &str| Err(InpaintError::InvalidSpec(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.input_noise_std >= 0.0 && self.input_noise_std.is_finite()) {
            return bad("input_noise_std must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub data_term: f64,
    pub guide_term: f64,
    pub total: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: std::io::Read>(input: R) -> Result<Vec<TraceRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[derive(Debug, Clone)]
pub struct InpaintOutput {
    pub image: Image,
    pub trace: Vec<TraceRow>,
    pub elapsed: Duration,
    /// The mask actually optimized against (after dilation).
    pub mask: Mask,
    pub guide: Option<GuideSpec>,
}

/// Builds the generator for a `width x height` image. Inputs are zero-padded
/// up to a multiple of `2^depth`, so the only limit is that the coarsest level
/// keeps at least one pixel of the shorter side.
pub fn build_network(
    config: &NetworkConfig,
    width: usize,
    height: usize,
    channels: usize,
    seed: u64,
) -> Result<SkipNet<f32>, NetworkError> {
    let max = usize::BITS as usize - 1 - width.min(height).max(1).leading_zeros() as usize;
    if config.depth > max {
        return Err(NetworkError::DepthTooLarge {
            depth: config.depth,
            factor: 1 << config.depth.min(62),
            width,
            height,
            max_depth: max,
        });
    }
    let (pw, ph) = padded_dims(config, width, height);
    SkipNet::new(config, pw, ph, channels, seed)
}

fn padded_dims(config: &NetworkConfig, width: usize, height: usize) -> (usize, usize) {
    let f = 1usize << config.depth;
    (width.div_ceil(f) * f, height.div_ceil(f) * f)
}

pub fn inpaint(image: &Image, mask: &Mask, spec: &InpaintSpec) -> Result<InpaintOutput, InpaintError> {
    inpaint_with_progress(image, mask, spec, &mut |_| {})
}

/// Runs the optimization; `progress` sees every trace row as it is produced.
pub fn inpaint_with_progress(
    image: &Image,
    mask: &Mask,
    spec: &InpaintSpec,
    progress: &mut dyn FnMut(&TraceRow),
) -> Result<InpaintOutput, InpaintError> {
    spec.validate()?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(InpaintError::Shape(format!(
            "image {}x{} vs mask {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let start = Instant::now();
    let radius = spec.effective_dilation(image.width, image.height);
    let hole = dilate_hole(mask, radius as i64)?;
    if !hole.has_hole() {
        return Ok(InpaintOutput {
            image: image.clone(),
            trace: Vec::new(),
            elapsed: start.elapsed(),
            mask: hole,
            guide: None,
        });
    }
    let x0 = PixelGrid::from(image);
    let guide = match spec.guide_mode {
        GuideMode::None => None,
        mode => {
            let region = guide_region(&hole).expect("mask has a hole");
            Some(compute_background_average(&x0, &hole, region, mode)?)
        }
    };
    let no_guide = GuideSpec {
        region: crate::bbox::BBox::FULL,
        mode: GuideMode::None,
        global: Vec::new(),
        rows: Vec::new(),
    };
    let lambda = if guide.is_some() { spec.lambda } else { 0.0 };
    let guide_ref = guide.as_ref().unwrap_or(&no_guide);

    let (w, h, ch) = (image.width, image.height, image.channels);
    let mut net = build_network(&spec.network, w, h, ch, spec.param_seed)?;
    let (pw, ph) = padded_dims(&spec.network, w, h);
    let cin = spec.network.input_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let z: Vec<f32> = (0..cin * pw * ph).map(|_| rng.gen_range(0.0..0.1)).collect();
    let jitter = (spec.input_noise_std > 0.0)
        .then(|| Normal::new(0.0, spec.input_noise_std as f32).expect("validated std"));
    let mut opt = Adam::new(spec.learning_rate);
    let mut trace = Vec::with_capacity(spec.iterations);
    let mut last = PixelGrid::new(w, h, ch, vec![0.0; w * h * ch]);
    let mut grad_out = Tensor::<f32>::zeros(ch, ph, pw);

    for iteration in 0..spec.iterations {
        let input = match &jitter {
            Some(dist) => z.iter().map(|&v| v + dist.sample(&mut rng)).collect(),
            None => z.clone(),
        };
        let y = net.forward(&Tensor::from_vec(cin, ph, pw, input));
        for c in 0..ch {
            for yy in 0..h {
                for xx in 0..w {
                    last.data[(c * h + yy) * w + xx] = y.data[(c * ph + yy) * pw + xx] as f64;
                }
            }
        }
        let parts = guided_loss_grad(&last, &x0, &hole, guide_ref, lambda)?;
        let row = TraceRow {
            iteration,
            data_term: parts.data_term,
            guide_term: parts.guide_term,
            total: parts.total,
        };
        trace.push(row);
        if !parts.total.is_finite() {
            return Err(InpaintError::NonFinite { iteration, trace });
        }
        progress(&row);
        for c in 0..ch {
            for yy in 0..h {
                for xx in 0..w {
                    grad_out.data[(c * ph + yy) * pw + xx] = parts.grad[(c * h + yy) * w + xx] as f32;
                }
            }
        }
        net.zero_grad();
        net.backward(&grad_out);
        opt.step(&mut net);
    }

    let mut out = image.clone();
    let plane = w * h;
    for c in 0..ch {
        for i in 0..plane {
            if !hole.known_slice()[i] {
                out.data[c * plane + i] = last.data[c * plane + i] as f32;
            }
        }
    }
    Ok(InpaintOutput {
        image: out,
        trace,
        elapsed: start.elapsed(),
        mask: hole,
        guide,
    })
}

#[cfg(test)]
mod tests;
