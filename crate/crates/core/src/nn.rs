//! Tiny fully-connected networks with hand-written reverse accumulation,
//! positional encoding, Adam, and a central-difference gradient checker.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x ++ [sin(2^k pi x), cos(2^k pi x)]` for `k < octaves`; length `3 + 6 * octaves`.
pub fn positional_encoding(x: Vec3, octaves: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * octaves);
    out.extend(x.to_array());
    for k in 0..octaves {
        let f = (1u64 << k) as f64 * PI;
        let c = x.to_array().map(|v| v * f);
        out.extend(c.map(f64::sin));
        out.extend(c.map(f64::cos));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalInit {
    Zero,
    He,
}

/// Multi-layer perceptron: affine layers with ReLU between them, linear head.
///
/// Parameters are one flat buffer; layer `l` stores its `out x in` weight
/// matrix row-major followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum TapeOp {
    Affine { layer: usize, input: Vec<f64> },
    /// Affine layer 0 whose input past index 0 was folded into a cached
    /// partial pre-activation.
    AffineSplit { first: f64 },
    Relu { mask: Vec<bool> },
}

/// Record of one forward pass, consumed in reverse by [`Mlp::backward`].
#[derive(Debug, Clone, Default)]
pub struct ParamTape {
    ops: Vec<TapeOp>,
}

impl ParamTape {
    pub fn ops(&self) -> &[TapeOp] {
        &self.ops
    }
}

impl Mlp {
    /// `dims = [input, hidden..., output]`.
    pub fn new(dims: &[usize], final_init: FinalInit, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut params = Vec::with_capacity(Self::count(dims));
        let layers = dims.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let zero = l + 1 == layers && final_init == FinalInit::Zero;
            for _ in 0..fan_in * fan_out {
                params.push(if zero { 0.0 } else { std * normal_sample(rng) });
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Mlp {
            dims: dims.to_vec(),
            params,
        }
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let want = Self::count(dims);
        if params.len() != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                got: params.len(),
            });
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            params,
        })
    }

    fn count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(weight offset, bias offset)` of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let w = Self::count(&self.dims[..=l]);
        (w, w + self.dims[l] * self.dims[l + 1])
    }

    fn affine(&self, l: usize, input: &[f64], out: &mut Vec<f64>) {
        let (wo, bo) = self.offsets(l);
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        out.clear();
        for o in 0..n_out {
            let row = &self.params[wo + o * n_in..wo + (o + 1) * n_in];
            out.push(self.params[bo + o] + dot(row, input));
        }
    }

    fn run_from(&self, mut z: Vec<f64>, tape: &mut ParamTape) -> Vec<f64> {
        for l in 1..self.num_layers() {
            let mask: Vec<bool> = z.iter().map(|v| *v > 0.0).collect();
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
            tape.ops.push(TapeOp::Relu { mask });
            let mut next = Vec::with_capacity(self.dims[l + 1]);
            self.affine(l, &z, &mut next);
            tape.ops.push(TapeOp::Affine { layer: l, input: z });
            z = next;
        }
        z
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ParamTape)> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut tape = ParamTape::default();
        let mut z = Vec::with_capacity(self.dims[1]);
        self.affine(0, input, &mut z);
        tape.ops.push(TapeOp::Affine {
            layer: 0,
            input: input.to_vec(),
        });
        let out = self.run_from(z, &mut tape);
        Ok((out, tape))
    }

    /// Forward pass without recording.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut z = Vec::with_capacity(self.dims[1]);
        self.affine(0, input, &mut z);
        let mut next = Vec::new();
        for l in 1..self.num_layers() {
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
            self.affine(l, &z, &mut next);
            std::mem::swap(&mut z, &mut next);
        }
        z
    }

    /// Reverse accumulation over `tape`. Parameter gradients are added into
    /// `grad` (same layout as [`Mlp::params`]); returns the input gradient.
    pub fn backward(&self, tape: &ParamTape, upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut g = upstream.to_vec();
        for op in tape.ops.iter().rev() {
            match op {
                TapeOp::Relu { mask } => {
                    for (v, m) in g.iter_mut().zip(mask) {
                        if !*m {
                            *v = 0.0;
                        }
                    }
                }
                TapeOp::Affine { layer, input } => {
                    g = self.affine_backward(*layer, input, &g, grad);
                }
                TapeOp::AffineSplit { first } => {
                    // Only the column of input 0 is handled per sample; the
                    // cached part is finished by `finish_split`.
                    let (wo, _) = self.offsets(0);
                    let n_in = self.dims[0];
                    let mut g0 = 0.0;
                    for (o, go) in g.iter().enumerate() {
                        grad[wo + o * n_in] += go * first;
                        g0 += self.params[wo + o * n_in] * go;
                    }
                    let mut out = Vec::with_capacity(1 + g.len());
                    out.push(g0);
                    out.extend_from_slice(&g);
                    return out;
                }
            }
        }
        g
    }

    fn affine_backward(&self, l: usize, input: &[f64], g: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (wo, bo) = self.offsets(l);
        let n_in = self.dims[l];
        let mut gin = vec![0.0; n_in];
        for (o, go) in g.iter().enumerate() {
            if *go == 0.0 {
                continue;
            }
            let row = wo + o * n_in;
            let w = &self.params[row..row + n_in];
            let gw = &mut grad[row..row + n_in];
            for i in 0..n_in {
                gw[i] += go * input[i];
                gin[i] += w[i] * go;
            }
            grad[bo + o] += go;
        }
        gin
    }

    /// Partial first-layer pre-activation `W[:, 1..] rest + b`, shared by all
    /// evaluations whose inputs differ only in element 0.
    pub fn precompute_split(&self, rest: &[f64]) -> Vec<f64> {
        debug_assert_eq!(rest.len() + 1, self.input_dim());
        let (wo, bo) = self.offsets(0);
        let n_in = self.dims[0];
        (0..self.dims[1])
            .map(|o| {
                let row = &self.params[wo + o * n_in + 1..wo + (o + 1) * n_in];
                self.params[bo + o] + dot(row, rest)
            })
            .collect()
    }

    fn first_column(&self, partial: &[f64], first: f64) -> Vec<f64> {
        let (wo, _) = self.offsets(0);
        let n_in = self.dims[0];
        partial
            .iter()
            .enumerate()
            .map(|(o, p)| p + self.params[wo + o * n_in] * first)
            .collect()
    }

    /// Forward pass for input `[first, rest...]` given
    /// `partial = precompute_split(rest)`.
    pub fn forward_split(&self, partial: &[f64], first: f64) -> (Vec<f64>, ParamTape) {
        let mut tape = ParamTape::default();
        tape.ops.push(TapeOp::AffineSplit { first });
        let z = self.first_column(partial, first);
        let out = self.run_from(z, &mut tape);
        (out, tape)
    }

    pub fn eval_split(&self, partial: &[f64], first: f64) -> Vec<f64> {
        let mut z = self.first_column(partial, first);
        let mut next = Vec::new();
        for l in 1..self.num_layers() {
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
            self.affine(l, &z, &mut next);
            std::mem::swap(&mut z, &mut next);
        }
        z
    }

    /// Completes gradients for a batch of split evaluations that shared
    /// `rest`. `sum_gz` is the sum over the batch of the layer-0
    /// pre-activation gradients (elements `1..` of each `backward` result).
    /// Returns the gradient with respect to `rest`.
    pub fn finish_split(&self, rest: &[f64], sum_gz: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (wo, bo) = self.offsets(0);
        let n_in = self.dims[0];
        let mut grest = vec![0.0; rest.len()];
        for (o, go) in sum_gz.iter().enumerate() {
            if *go == 0.0 {
                continue;
            }
            let row = wo + o * n_in + 1;
            for i in 0..rest.len() {
                grad[row + i] += go * rest[i];
                grest[i] += self.params[row + i] * go;
            }
            grad[bo + o] += go;
        }
        grest
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Absolute floor below which gradient magnitudes are compared absolutely.
pub const GRAD_ABS_FLOOR: f64 = 1e-6;

/// Compares `grad` against central differences of `f` at `params`, over
/// `indices` (all parameters when `None`).
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    grad: &[f64],
    h: f64,
    indices: Option<&[usize]>,
) -> GradCheck {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.to_vec();
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: idx.len(),
    };
    for &i in idx {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = rel_err(fd, grad[i]);
        if err > worst.max_rel_err || err.is_nan() {
            worst.max_rel_err = err;
            worst.worst_index = i;
        }
    }
    worst
}

pub fn rel_err(numeric: f64, analytic: f64) -> f64 {
    let scale = numeric.abs().max(analytic.abs()).max(GRAD_ABS_FLOOR);
    (numeric - analytic).abs() / scale
}

pub(crate) fn normal_sample(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}
