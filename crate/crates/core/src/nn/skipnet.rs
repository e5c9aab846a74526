//! Convolutional encoder-decoder with skip connections.
//!
//! Each level `i` sees a map at resolution `R_i`:
//!
//! ```text
//! skip_i  = block1x1(x)                      (R_i, skip channels)
//! down_i  = block3x3(block3x3_s2(x))         (R_i / 2)
//! deep    = level_{i+1}(down_i) or down_i    (R_i / 2)
//! out_i   = block1x1(block3x3(norm(concat(skip_i, up2(deep)))))   (R_i)
//! ```
//!
//! and the network output is `sigmoid(conv1x1(out_0))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::layers::{upsample2, upsample2_backward, BatchNorm, Conv2d, HasParams, LeakyRelu, Param, Sigmoid};
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of down/up levels; spatial dims halve per level.
    pub depth: usize,
    /// Feature channels at every level.
    pub channels: usize,
    /// Channels of each skip branch; 0 disables skips.
    pub skip_channels: usize,
    pub batch_norm: bool,
    /// Channels of the input noise map.
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 5,
            channels: 64,
            skip_channels: 4,
            batch_norm: true,
            input_channels: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetworkError {
    #[error("depth {depth} needs dims divisible by {factor}, got {width}x{height} (max depth {max_depth})")]
    DepthTooLarge {
        depth: usize,
        factor: usize,
        width: usize,
        height: usize,
        max_depth: usize,
    },
    #[error("invalid network config: {0}")]
    Invalid(String),
}

/// Largest depth for which both dims stay integral through every halving.
pub fn max_depth(width: usize, height: usize) -> usize {
    if width == 0 || height == 0 {
        return 0;
    }
    (width.trailing_zeros().min(height.trailing_zeros())) as usize
}

#[derive(Debug, Clone)]
struct Block<T> {
    conv: Conv2d<T>,
    bn: Option<BatchNorm<T>>,
    act: LeakyRelu,
}

impl<T: Scalar> Block<T> {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, bn: bool, rng: &mut ChaCha8Rng) -> Self {
        Block {
            conv: Conv2d::new(cin, cout, k, stride, rng),
            bn: bn.then(|| BatchNorm::new(cout)),
            act: LeakyRelu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &mut self.bn {
            y = bn.forward(&y);
        }
        self.act.forward(&y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = self.act.backward(dy);
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g);
        }
        self.conv.backward(&g)
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.conv.weight);
        f(&mut self.conv.bias);
        if let Some(bn) = &mut self.bn {
            f(&mut bn.gamma);
            f(&mut bn.beta);
        }
    }
}

#[derive(Debug, Clone)]
struct Level<T> {
    skip: Option<Block<T>>,
    down1: Block<T>,
    down2: Block<T>,
    merge_bn: Option<BatchNorm<T>>,
    up1: Block<T>,
    up2: Block<T>,
    skip_channels: usize,
}

/// The generator network. Parameter init is a pure function of the config and seed.
#[derive(Debug, Clone)]
pub struct SkipNet<T> {
    pub config: NetworkConfig,
    pub out_channels: usize,
    levels: Vec<Level<T>>,
    head: Conv2d<T>,
    sigmoid: Sigmoid<T>,
}

impl<T: Scalar> SkipNet<T> {
    /// Builds the network for a `width x height` input producing `out_channels` maps.
    pub fn new(
        config: &NetworkConfig,
        width: usize,
        height: usize,
        out_channels: usize,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        if config.depth == 0 || config.channels == 0 || config.input_channels == 0 || out_channels == 0 {
            return Err(NetworkError::Invalid(format!(
                "depth, channels, input and output channels must be positive: {config:?}"
            )));
        }
        let factor = 1usize << config.depth;
        if width % factor != 0 || height % factor != 0 {
            return Err(NetworkError::DepthTooLarge {
                depth: config.depth,
                factor,
                width,
                height,
                max_depth: max_depth(width, height),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bn = config.batch_norm;
        let ch = config.channels;
        let sk = config.skip_channels;
        let levels = (0..config.depth)
            .map(|i| {
                let cin = if i == 0 { config.input_channels } else { ch };
                Level {
                    skip: (sk > 0).then(|| Block::new(cin, sk, 1, 1, bn, &mut rng)),
                    down1: Block::new(cin, ch, 3, 2, bn, &mut rng),
                    down2: Block::new(ch, ch, 3, 1, bn, &mut rng),
                    merge_bn: bn.then(|| BatchNorm::new(ch + sk)),
                    up1: Block::new(ch + sk, ch, 3, 1, bn, &mut rng),
                    up2: Block::new(ch, ch, 1, 1, bn, &mut rng),
                    skip_channels: sk,
                }
            })
            .collect();
        Ok(SkipNet {
            config: config.clone(),
            out_channels,
            levels,
            head: Conv2d::new(ch, out_channels, 1, 1, &mut rng),
            sigmoid: Sigmoid::default(),
        })
    }

    pub fn forward(&mut self, z: &Tensor<T>) -> Tensor<T> {
        let feat = self.forward_level(0, z);
        let logits = self.head.forward(&feat);
        self.sigmoid.forward(&logits)
    }

    fn forward_level(&mut self, i: usize, x: &Tensor<T>) -> Tensor<T> {
        let skip = self.levels[i].skip.as_mut().map(|b| b.forward(x));
        let d = self.levels[i].down1.forward(x);
        let mut d = self.levels[i].down2.forward(&d);
        if i + 1 < self.levels.len() {
            d = self.forward_level(i + 1, &d);
        }
        let up = upsample2(&d);
        let lvl = &mut self.levels[i];
        let mut merged = match skip {
            Some(s) => Tensor::concat(&s, &up),
            None => up,
        };
        if let Some(bn) = &mut lvl.merge_bn {
            merged = bn.forward(&merged);
        }
        let y = lvl.up1.forward(&merged);
        lvl.up2.forward(&y)
    }

    /// Backpropagates `d loss / d output`, accumulating parameter gradients.
    pub fn backward(&mut self, dout: &Tensor<T>) -> Tensor<T> {
        let g = self.sigmoid.backward(dout);
        let g = self.head.backward(&g);
        self.backward_level(0, &g)
    }

    fn backward_level(&mut self, i: usize, dy: &Tensor<T>) -> Tensor<T> {
        let lvl = &mut self.levels[i];
        let g = lvl.up2.backward(dy);
        let mut g = lvl.up1.backward(&g);
        if let Some(bn) = &mut lvl.merge_bn {
            g = bn.backward(&g);
        }
        let (dskip, dup) = if lvl.skip.is_some() {
            let (a, b) = g.split(lvl.skip_channels);
            (Some(a), b)
        } else {
            (None, g)
        };
        let mut dd = upsample2_backward(&dup);
        if i + 1 < self.levels.len() {
            dd = self.backward_level(i + 1, &dd);
        }
        let lvl = &mut self.levels[i];
        let g = lvl.down2.backward(&dd);
        let mut dx = lvl.down1.backward(&g);
        if let (Some(skip), Some(ds)) = (&mut lvl.skip, dskip) {
            dx.add_assign(&skip.backward(&ds));
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Flat copy of every parameter value, in visiting order.
    pub fn parameter_snapshot(&mut self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }
}

impl<T: Scalar> HasParams<T> for SkipNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for lvl in &mut self.levels {
            if let Some(s) = &mut lvl.skip {
                s.visit(f);
            }
            lvl.down1.visit(f);
            lvl.down2.visit(f);
            if let Some(bn) = &mut lvl.merge_bn {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
            lvl.up1.visit(f);
            lvl.up2.visit(f);
        }
        f(&mut self.head.weight);
        f(&mut self.head.bias);
    }
}

/// First-order adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn step<T: Scalar>(&mut self, model: &mut impl HasParams<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(self.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(self.eps);
        model.visit_params(&mut |p| {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + one_b1 * g;
                p.v[i] = b2 * p.v[i] + one_b2 * g * g;
                let denom = (p.v[i] * inv_bc2).sqrt() + eps;
                p.value[i] = p.value[i] - step_size * p.m[i] / denom;
            }
        });
    }
}
