use rand::Rng;

use super::tensor::{Scalar, Tensor};

/// A trainable parameter block with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let n = value.len();
        Param {
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn uniform<R: Rng>(n: usize, bound: f64, rng: &mut R) -> Self {
        Param::new((0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything holding trainable parameters, visited in a fixed order.
pub trait HasParams<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

/// Square-kernel 2-D convolution with zero padding `(k - 1) / 2`, via im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    col: Vec<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            cin,
            cout,
            k,
            stride,
            weight: Param::uniform(cout * fan_in, bound, rng),
            bias: Param::uniform(cout, bound, rng),
            col: Vec::new(),
            in_shape: (0, 0, 0),
            out_hw: (0, 0),
        }
    }

    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_dims(x.h, x.w);
        let p = ho * wo;
        let kk = self.cin * self.k * self.k;
        let pad = self.pad() as isize;
        self.col.clear();
        self.col.resize(kk * p, T::zero());
        for ci in 0..self.cin {
            let plane = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut self.col[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < x.w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = Tensor::zeros(self.cout, ho, wo);
        for (co, chunk) in out.data.chunks_mut(p).enumerate() {
            chunk.fill(self.bias.value[co]);
        }
        T::gemm(
            self.cout,
            kk,
            p,
            &self.weight.value,
            kk as isize,
            1,
            &self.col,
            p as isize,
            1,
            T::one(),
            &mut out.data,
        );
        self.in_shape = x.shape();
        self.out_hw = (ho, wo);
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (ho, wo) = self.out_hw;
        assert_eq!(dy.shape(), (self.cout, ho, wo), "conv grad shape");
        let p = ho * wo;
        let kk = self.cin * self.k * self.k;
        for (co, chunk) in dy.data.chunks(p).enumerate() {
            self.bias.grad[co] = self.bias.grad[co] + chunk.iter().copied().sum();
        }
        // dW += dY * col^T
        T::gemm(
            self.cout,
            p,
            kk,
            &dy.data,
            p as isize,
            1,
            &self.col,
            1,
            p as isize,
            T::one(),
            &mut self.weight.grad,
        );
        // dcol = W^T * dY
        let mut dcol = vec![T::zero(); kk * p];
        T::gemm(
            kk,
            self.cout,
            p,
            &self.weight.value,
            1,
            kk as isize,
            &dy.data,
            p as isize,
            1,
            T::zero(),
            &mut dcol,
        );
        let (cin, h, w) = self.in_shape;
        let pad = self.pad() as isize;
        let mut dx = Tensor::zeros(cin, h, w);
        for ci in 0..cin {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &dcol[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                let i = iy as usize * w + ix as usize;
                                plane[i] = plane[i] + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel normalization over the spatial extent (batch of one), with affine scale/shift.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: (usize, usize, usize),
}

const BN_EPS: f64 = 1e-5;

impl<T: Scalar> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Param::new(vec![T::one(); c]),
            beta: Param::new(vec![T::zero(); c]),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: (0, 0, 0),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.plane_len();
        let nf = T::from_f64(n as f64);
        let mut out = Tensor::zeros(x.c, x.h, x.w);
        self.xhat = vec![T::zero(); x.data.len()];
        self.inv_std = vec![T::zero(); x.c];
        for c in 0..x.c {
            let src = &x.data[c * n..(c + 1) * n];
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + T::from_f64(BN_EPS)).sqrt();
            self.inv_std[c] = inv;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for i in 0..n {
                let xh = (src[i] - mean) * inv;
                self.xhat[c * n + i] = xh;
                out.data[c * n + i] = g * xh + b;
            }
        }
        self.shape = x.shape();
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (c_n, h, w) = self.shape;
        let n = h * w;
        let nf = T::from_f64(n as f64);
        let mut dx = Tensor::zeros(c_n, h, w);
        for c in 0..c_n {
            let g = &dy.data[c * n..(c + 1) * n];
            let xh = &self.xhat[c * n..(c + 1) * n];
            let sum_dy: T = g.iter().copied().sum();
            let sum_dy_xh: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            self.beta.grad[c] = self.beta.grad[c] + sum_dy;
            self.gamma.grad[c] = self.gamma.grad[c] + sum_dy_xh;
            let gamma = self.gamma.value[c];
            let scale = gamma * self.inv_std[c] / nf;
            // dxhat = gamma * dy, folded into the scale
            for i in 0..n {
                dx.data[c * n + i] = scale * (nf * g[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct LeakyRelu {
    positive: Vec<bool>,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl LeakyRelu {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let slope = T::from_f64(LEAKY_SLOPE);
        self.positive = x.data.iter().map(|&v| v > T::zero()).collect();
        Tensor::from_vec(
            x.c,
            x.h,
            x.w,
            x.data.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect(),
        )
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Tensor<T> {
        let slope = T::from_f64(LEAKY_SLOPE);
        Tensor::from_vec(
            dy.c,
            dy.h,
            dy.w,
            dy.data
                .iter()
                .zip(&self.positive)
                .map(|(&g, &p)| if p { g } else { g * slope })
                .collect(),
        )
    }
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out.data[(c * h2 + y) * w2 + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let i = (c * h + y / 2) * w + xx / 2;
                dx.data[i] = dx.data[i] + dy.data[(c * dy.h + y) * dy.w + xx];
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T> {
    out: Vec<T>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y: Vec<T> = x.data.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        self.out = y.clone();
        Tensor::from_vec(x.c, x.h, x.w, y)
    }

    pub fn backward(&self, dy: &Tensor<T>) -> Tensor<T> {
        Tensor::from_vec(
            dy.c,
            dy.h,
            dy.w,
            dy.data
                .iter()
                .zip(&self.out)
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect(),
        )
    }
}
