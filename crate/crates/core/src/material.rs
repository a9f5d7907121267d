//! Spatially varying material `x -> (albedo, metallic, roughness)`.
//!
//! A VM grid feature and a positional encoding of `x` feed an MLP whose five
//! outputs pass through sigmoids. Roughness is mapped into
//! `[ROUGHNESS_FLOOR, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brdf::{Material, ROUGHNESS_FLOOR};
use crate::color::Rgb;
use crate::geom::Vec3;
use crate::nn::{positional_encoding, sigmoid, FinalInit, Mlp, ParamTape};
use crate::tensor::VmGrid;

pub const MATERIAL_OCTAVES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterialFieldConfig {
    pub components: usize,
    pub resolution: usize,
    pub hidden: usize,
}

impl Default for MaterialFieldConfig {
    fn default() -> Self {
        MaterialFieldConfig {
            components: 16,
            resolution: 64,
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialField {
    grid: VmGrid,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct MaterialTape {
    x: Vec3,
    tape: ParamTape,
    out: [f64; 5],
}

/// Upstream gradient with respect to a [`Material`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaterialGrad {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
}

impl MaterialGrad {
    pub fn scaled(self, s: f64) -> Self {
        MaterialGrad {
            albedo: self.albedo * s,
            metallic: self.metallic * s,
            roughness: self.roughness * s,
        }
    }

    pub fn add(self, o: MaterialGrad) -> Self {
        MaterialGrad {
            albedo: self.albedo + o.albedo,
            metallic: self.metallic + o.metallic,
            roughness: self.roughness + o.roughness,
        }
    }
}

impl MaterialField {
    pub fn new(config: &MaterialFieldConfig, bbox_min: Vec3, bbox_max: Vec3, rng: &mut impl Rng) -> Self {
        let grid = VmGrid::new(config.components, config.resolution, bbox_min, bbox_max, 0.1, rng);
        let input = grid.feature_dim() + 3 + 6 * MATERIAL_OCTAVES;
        let mlp = Mlp::new(&[input, config.hidden, config.hidden, 5], FinalInit::Zero, rng);
        MaterialField { grid, mlp }
    }

    pub fn grid(&self) -> &VmGrid {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut VmGrid {
        &mut self.grid
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    fn input(&self, x: Vec3) -> Vec<f64> {
        let mut v = self.grid.feature_query(x);
        v.extend(positional_encoding(x, MATERIAL_OCTAVES));
        v
    }

    fn decode(out: &[f64]) -> Material {
        Material {
            albedo: Rgb::new(sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])),
            metallic: sigmoid(out[3]),
            roughness: ROUGHNESS_FLOOR + (1.0 - ROUGHNESS_FLOOR) * sigmoid(out[4]),
        }
    }

    pub fn eval(&self, x: Vec3) -> Material {
        Self::decode(&self.mlp.eval(&self.input(x)))
    }

    pub fn forward(&self, x: Vec3) -> (Material, MaterialTape) {
        let (out, tape) = self.mlp.forward(&self.input(x)).expect("material input width is fixed");
        let out: [f64; 5] = out.try_into().expect("five outputs");
        (Self::decode(&out), MaterialTape { x, tape, out })
    }

    /// Raw output gradient for an upstream material gradient.
    fn output_grad(tape: &MaterialTape, g: &MaterialGrad) -> Vec<f64> {
        let ds = |o: f64| {
            let s = sigmoid(o);
            s * (1.0 - s)
        };
        vec![
            g.albedo[0] * ds(tape.out[0]),
            g.albedo[1] * ds(tape.out[1]),
            g.albedo[2] * ds(tape.out[2]),
            g.metallic * ds(tape.out[3]),
            g.roughness * (1.0 - ROUGHNESS_FLOOR) * ds(tape.out[4]),
        ]
    }

    /// Adds parameter gradients into `grad_grid` and `grad_mlp`.
    pub fn backward(&self, tape: &MaterialTape, g: &MaterialGrad, grad_grid: &mut [f64], grad_mlp: &mut [f64]) {
        let g_out = Self::output_grad(tape, g);
        let g_in = self.mlp.backward(&tape.tape, &g_out, grad_mlp);
        self.grid.feature_query_backward(tape.x, &g_in[..self.grid.feature_dim()], grad_grid);
    }
}

/// Material regularizer: squared difference against a jittered neighbor
/// plus a metallic sparsity term.
pub const REG_JITTER: f64 = 0.01;
pub const REG_METALLIC_WEIGHT: f64 = 0.01;

/// Mean regularizer over `(point, jittered point)` pairs. Gradients are
/// scaled by `weight` and added into the two buffers. Returns the unscaled
/// loss.
pub fn material_reg_loss(
    field: &MaterialField,
    pairs: &[(Vec3, Vec3)],
    weight: f64,
    grad_grid: &mut [f64],
    grad_mlp: &mut [f64],
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for (a, b) in pairs {
        let (ma, ta) = field.forward(*a);
        let (mb, tb) = field.forward(*b);
        let d = [
            ma.albedo[0] - mb.albedo[0],
            ma.albedo[1] - mb.albedo[1],
            ma.albedo[2] - mb.albedo[2],
            ma.metallic - mb.metallic,
            ma.roughness - mb.roughness,
        ];
        loss += inv * (d.iter().map(|v| v * v).sum::<f64>() + REG_METALLIC_WEIGHT * ma.metallic);
        if weight == 0.0 {
            continue;
        }
        let s = 2.0 * inv * weight;
        let ga = MaterialGrad {
            albedo: Rgb::new(d[0], d[1], d[2]) * s,
            metallic: d[3] * s + weight * inv * REG_METALLIC_WEIGHT,
            roughness: d[4] * s,
        };
        let gb = MaterialGrad {
            albedo: Rgb::new(-d[0], -d[1], -d[2]) * s,
            metallic: -d[3] * s,
            roughness: -d[4] * s,
        };
        field.backward(&ta, &ga, grad_grid, grad_mlp);
        field.backward(&tb, &gb, grad_grid, grad_mlp);
    }
    loss
}
