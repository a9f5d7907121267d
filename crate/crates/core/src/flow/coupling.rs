use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pwquad::PwQuadBins;
use crate::nn::{FinalInit, Mlp, ParamTape};

/// One coupling layer: the pass-through coordinate and the conditioning
/// vector drive a network whose head parameterizes a piecewise-quadratic
/// warp of the other coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    net: Mlp,
    /// Index (0 or 1) of the warped coordinate.
    transformed: usize,
    bins: usize,
}

/// Per-sample record of [`CouplingLayer::forward_recorded`].
#[derive(Debug, Clone)]
pub struct CouplingTape {
    x: [f64; 2],
    bins: PwQuadBins,
    pdf: f64,
    net_tape: ParamTape,
}

impl CouplingLayer {
    pub fn new(transformed: usize, cond_dim: usize, bins: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        assert!(transformed < 2);
        let mut dims = vec![1 + cond_dim];
        dims.extend_from_slice(hidden);
        dims.push(PwQuadBins::raw_len(bins));
        CouplingLayer {
            net: Mlp::new(&dims, FinalInit::Zero, rng),
            transformed,
            bins,
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn transformed(&self) -> usize {
        self.transformed
    }

    pub fn passthrough(&self) -> usize {
        1 - self.transformed
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn cond_dim(&self) -> usize {
        self.net.input_dim() - 1
    }

    /// First-layer partial shared by every evaluation under `cond`.
    pub fn precompute(&self, cond: &[f64]) -> Vec<f64> {
        self.net.precompute_split(cond)
    }

    pub fn bins_for(&self, partial: &[f64], passthrough: f64) -> PwQuadBins {
        PwQuadBins::from_raw(&self.net.eval_split(partial, passthrough))
    }

    /// Data to latent: warps the transformed coordinate by its CDF.
    /// Returns the output and `log p(x_t)`.
    pub fn forward(&self, partial: &[f64], x: [f64; 2]) -> ([f64; 2], f64) {
        let bins = self.bins_for(partial, x[self.passthrough()]);
        let mut y = x;
        let t = self.transformed;
        y[t] = bins.cdf(x[t]);
        (y, bins.pdf(x[t]).ln())
    }

    /// Latent to data. Returns the input and `log p(x_t)` at that input.
    pub fn inverse(&self, partial: &[f64], y: [f64; 2]) -> ([f64; 2], f64) {
        let bins = self.bins_for(partial, y[self.passthrough()]);
        let mut x = y;
        let t = self.transformed;
        x[t] = bins.inverse_cdf(y[t]);
        (x, bins.pdf(x[t]).ln())
    }

    pub fn forward_recorded(&self, partial: &[f64], x: [f64; 2]) -> ([f64; 2], f64, CouplingTape) {
        let (raw, net_tape) = self.net.forward_split(partial, x[self.passthrough()]);
        let bins = PwQuadBins::from_raw(&raw);
        let t = self.transformed;
        let mut y = x;
        y[t] = bins.cdf(x[t]);
        let pdf = bins.pdf(x[t]);
        let tape = CouplingTape {
            x,
            bins,
            pdf,
            net_tape,
        };
        (y, pdf.ln(), tape)
    }

    /// Backpropagates `g_y . y + g_log_det * log_det`. Network parameter
    /// gradients go to `grad`; the layer-0 pre-activation gradient is added
    /// to `g_z1` (finished per condition with [`Mlp::finish_split`]).
    /// Returns the gradient with respect to the layer input.
    pub fn backward(&self, tape: &CouplingTape, g_y: [f64; 2], g_log_det: f64, grad: &mut [f64], g_z1: &mut [f64]) -> [f64; 2] {
        let t = self.transformed;
        let pt = self.passthrough();
        let bg = tape.bins.backward(tape.x[t], g_y[t], g_log_det / tape.pdf);
        let g_in = self.net.backward(&tape.net_tape, &bg.raw, grad);
        for (acc, g) in g_z1.iter_mut().zip(&g_in[1..]) {
            *acc += g;
        }
        let mut g_x = [0.0; 2];
        g_x[t] = bg.x;
        g_x[pt] = g_y[pt] + g_in[0];
        g_x
    }
}
