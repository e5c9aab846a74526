//! Batched forward/backward for the triplet encoder and box regressor.
//!
//! Matrices are row-major; a batch of `B` vectors of width `n` is a `B x n` matrix.

use rand::Rng;

use crate::nn::{HasParams, Param, Scalar};

/// Fully connected layer `y = x W^T + b`, `W` is `out x in`.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub inp: usize,
    pub out: usize,
    pub w: Param<f64>,
    pub b: Param<f64>,
}

impl Dense {
    pub fn new(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Dense {
            inp,
            out,
            w: Param::uniform(inp * out, bound, rng),
            b: Param::uniform(out, bound, rng),
        }
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut y: Vec<f64> = (0..batch).flat_map(|_| self.b.value.iter().copied()).collect();
        f64::gemm(batch, self.inp, self.out, x, self.inp as isize, 1, &self.w.value, 1, self.inp as isize, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], batch: usize) -> Vec<f64> {
        for row in dy.chunks(self.out) {
            for (g, d) in self.b.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        f64::gemm(self.out, batch, self.inp, dy, 1, self.out as isize, x, self.inp as isize, 1, 1.0, &mut self.w.grad);
        let mut dx = vec![0.0; batch * self.inp];
        f64::gemm(batch, self.out, self.inp, dy, self.out as isize, 1, &self.w.value, self.inp as isize, 1, 0.0, &mut dx);
        dx
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One encoded sequence: per step the input vector and the embedding rows it used.
#[derive(Debug, Clone)]
pub(crate) struct EncodedStep {
    pub x: Vec<f64>,
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Net {
    pub use_categories: bool,
    pub d_obj: usize,
    pub d_pred: usize,
    pub d_h: usize,
    pub categories: Param<f64>,
    pub predicates: Param<f64>,
    /// Gates `[input, forget, cell, output]`, acting on `[x; h]`.
    pub lstm: Dense,
    pub hidden: Vec<Dense>,
    pub head: Dense,
}

pub(crate) struct Cache {
    batch: usize,
    steps: Vec<StepCache>,
    hidden_in: Vec<Vec<f64>>,
    hidden_pre: Vec<Vec<f64>>,
    head_in: Vec<f64>,
}

struct StepCache {
    z: Vec<f64>,
    active: Vec<bool>,
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    tokens: Vec<Option<(usize, usize, usize)>>,
}

impl Net {
    pub fn input_len(&self) -> usize {
        let cats = if self.use_categories { 2 * self.d_obj } else { 0 };
        cats + self.d_pred + 5
    }

    /// `x_t = [subject emb, object emb, predicate emb, reference box, target flag]`.
    pub fn encode(&self, subject: usize, object: usize, predicate: usize, bbox: [f64; 4], flag: bool) -> EncodedStep {
        let mut x = Vec::with_capacity(self.input_len());
        if self.use_categories {
            x.extend_from_slice(&self.categories.value[subject * self.d_obj..(subject + 1) * self.d_obj]);
            x.extend_from_slice(&self.categories.value[object * self.d_obj..(object + 1) * self.d_obj]);
        }
        x.extend_from_slice(&self.predicates.value[predicate * self.d_pred..(predicate + 1) * self.d_pred]);
        x.extend_from_slice(&bbox);
        x.push(if flag { 1.0 } else { 0.0 });
        EncodedStep {
            x,
            subject,
            object,
            predicate,
        }
    }

    /// Raw (unclamped) outputs, `batch x 4`.
    pub fn forward(&self, seqs: &[Vec<EncodedStep>]) -> (Vec<f64>, Cache) {
        let batch = seqs.len();
        let (d_in, d_h) = (self.input_len(), self.d_h);
        let t_max = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut h = vec![0.0; batch * d_h];
        let mut c = vec![0.0; batch * d_h];
        let mut steps = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut z = vec![0.0; batch * (d_in + d_h)];
            let mut active = vec![false; batch];
            let mut tokens = vec![None; batch];
            for (b, seq) in seqs.iter().enumerate() {
                let row = &mut z[b * (d_in + d_h)..(b + 1) * (d_in + d_h)];
                if let Some(step) = seq.get(t) {
                    active[b] = true;
                    tokens[b] = Some((step.subject, step.object, step.predicate));
                    row[..d_in].copy_from_slice(&step.x);
                }
                row[d_in..].copy_from_slice(&h[b * d_h..(b + 1) * d_h]);
            }
            let mut gates = self.lstm.forward(&z, batch);
            let c_prev = c.clone();
            let mut tanh_c = vec![0.0; batch * d_h];
            for b in 0..batch {
                if !active[b] {
                    continue;
                }
                let g = &mut gates[b * 4 * d_h..(b + 1) * 4 * d_h];
                for j in 0..d_h {
                    let i_g = sigmoid(g[j]);
                    let f_g = sigmoid(g[d_h + j]);
                    let c_g = g[2 * d_h + j].tanh();
                    let o_g = sigmoid(g[3 * d_h + j]);
                    g[j] = i_g;
                    g[d_h + j] = f_g;
                    g[2 * d_h + j] = c_g;
                    g[3 * d_h + j] = o_g;
                    let k = b * d_h + j;
                    c[k] = f_g * c_prev[k] + i_g * c_g;
                    tanh_c[k] = c[k].tanh();
                    h[k] = o_g * tanh_c[k];
                }
            }
            steps.push(StepCache {
                z,
                active,
                gates,
                c_prev,
                tanh_c,
                tokens,
            });
        }
        let mut a = h;
        let mut hidden_in = Vec::with_capacity(self.hidden.len());
        let mut hidden_pre = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let pre = layer.forward(&a, batch);
            hidden_in.push(a);
            a = pre.iter().map(|&v| v.max(0.0)).collect();
            hidden_pre.push(pre);
        }
        let out = self.head.forward(&a, batch);
        (
            out,
            Cache {
                batch,
                steps,
                hidden_in,
                hidden_pre,
                head_in: a,
            },
        )
    }

    /// Backpropagates `d loss / d raw output` through the whole model.
    pub fn backward(&mut self, cache: &Cache, dout: &[f64]) {
        let batch = cache.batch;
        let (d_in, d_h) = (self.input_len(), self.d_h);
        let mut da = self.head.backward(&cache.head_in, dout, batch);
        for (li, layer) in self.hidden.iter_mut().enumerate().rev() {
            for (g, &p) in da.iter_mut().zip(&cache.hidden_pre[li]) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
            da = layer.backward(&cache.hidden_in[li], &da, batch);
        }
        let mut dh = da;
        let mut dc = vec![0.0; batch * d_h];
        for step in cache.steps.iter().rev() {
            let mut dgates = vec![0.0; batch * 4 * d_h];
            for b in 0..batch {
                if !step.active[b] {
                    continue;
                }
                let g = &step.gates[b * 4 * d_h..(b + 1) * 4 * d_h];
                let dg = &mut dgates[b * 4 * d_h..(b + 1) * 4 * d_h];
                for j in 0..d_h {
                    let k = b * d_h + j;
                    let (i_g, f_g, c_g, o_g) = (g[j], g[d_h + j], g[2 * d_h + j], g[3 * d_h + j]);
                    let tc = step.tanh_c[k];
                    let dcell = dc[k] + dh[k] * o_g * (1.0 - tc * tc);
                    dg[j] = dcell * c_g * i_g * (1.0 - i_g);
                    dg[d_h + j] = dcell * step.c_prev[k] * f_g * (1.0 - f_g);
                    dg[2 * d_h + j] = dcell * i_g * (1.0 - c_g * c_g);
                    dg[3 * d_h + j] = dh[k] * tc * o_g * (1.0 - o_g);
                    dc[k] = dcell * f_g;
                }
            }
            let dz = self.lstm.backward(&step.z, &dgates, batch);
            for b in 0..batch {
                if !step.active[b] {
                    continue;
                }
                let row = &dz[b * (d_in + d_h)..(b + 1) * (d_in + d_h)];
                dh[b * d_h..(b + 1) * d_h].copy_from_slice(&row[d_in..]);
                let (s, o, p) = step.tokens[b].expect("active step has tokens");
                let mut off = 0;
                if self.use_categories {
                    for (j, v) in row[..self.d_obj].iter().enumerate() {
                        self.categories.grad[s * self.d_obj + j] += v;
                    }
                    for (j, v) in row[self.d_obj..2 * self.d_obj].iter().enumerate() {
                        self.categories.grad[o * self.d_obj + j] += v;
                    }
                    off = 2 * self.d_obj;
                }
                for (j, v) in row[off..off + self.d_pred].iter().enumerate() {
                    self.predicates.grad[p * self.d_pred + j] += v;
                }
            }
        }
    }
}

impl HasParams<f64> for Net {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        f(&mut self.categories);
        f(&mut self.predicates);
        f(&mut self.lstm.w);
        f(&mut self.lstm.b);
        for l in &mut self.hidden {
            f(&mut l.w);
            f(&mut l.b);
        }
        f(&mut self.head.w);
        f(&mut self.head.b);
    }
}
