//! Vector-Matrix factorized feature grids.
//!
//! For each axis `a` with complementary plane `(b, c)` the grid stores `K`
//! line vectors `v^a_k` of length `R` and `K` matrices `M^{bc}_k` of size
//! `R x R`. A query returns the concatenation over `a in {X, Y, Z}` of the
//! elementwise products `v^a_k(x_a) * M^{bc}_k(x_b, x_c)`, giving `3K`
//! features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Vec3;
use crate::nn::normal_sample;

/// Complementary plane axes for X, Y and Z.
const PLANES: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmGrid {
    components: usize,
    resolution: usize,
    bbox_min: Vec3,
    bbox_max: Vec3,
    /// `[vec X | vec Y | vec Z | mat YZ | mat XZ | mat XY]`.
    params: Vec<f64>,
}

/// Interpolation stencil of one query; reused by the backward pass.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    /// Lower node index and fraction per axis.
    idx: [usize; 3],
    frac: [f64; 3],
}

impl VmGrid {
    pub fn new(components: usize, resolution: usize, bbox_min: Vec3, bbox_max: Vec3, init_std: f64, rng: &mut impl Rng) -> Self {
        assert!(resolution >= 2, "resolution must be at least 2");
        let len = 3 * components * resolution * (1 + resolution);
        let params = (0..len).map(|_| init_std * normal_sample(rng)).collect();
        VmGrid {
            components,
            resolution,
            bbox_min,
            bbox_max,
            params,
        }
    }

    pub fn filled(components: usize, resolution: usize, bbox_min: Vec3, bbox_max: Vec3, value: f64) -> Self {
        let len = 3 * components * resolution * (1 + resolution);
        VmGrid {
            components,
            resolution,
            bbox_min,
            bbox_max,
            params: vec![value; len],
        }
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.components
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        (self.bbox_min, self.bbox_max)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of `v^axis_k[i]`.
    pub fn vec_index(&self, axis: usize, k: usize, i: usize) -> usize {
        (axis * self.components + k) * self.resolution + i
    }

    /// Offset of `M^{plane(axis)}_k[i][j]` (row `i` along the first plane axis).
    pub fn mat_index(&self, axis: usize, k: usize, i: usize, j: usize) -> usize {
        let r = self.resolution;
        3 * self.components * r + ((axis * self.components + k) * r + i) * r + j
    }

    fn stencil(&self, x: Vec3) -> Stencil {
        let r = self.resolution;
        let p = x.to_array();
        let lo = self.bbox_min.to_array();
        let hi = self.bbox_max.to_array();
        let mut idx = [0; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let extent = (hi[a] - lo[a]).max(f64::MIN_POSITIVE);
            let g = ((p[a] - lo[a]) / extent * (r - 1) as f64).clamp(0.0, (r - 1) as f64);
            let i = (g.floor() as usize).min(r - 2);
            idx[a] = i;
            frac[a] = g - i as f64;
        }
        Stencil { idx, frac }
    }

    fn lerp_vec(&self, axis: usize, k: usize, s: &Stencil) -> f64 {
        let i = s.idx[axis];
        let t = s.frac[axis];
        let o = self.vec_index(axis, k, i);
        self.params[o] * (1.0 - t) + self.params[o + 1] * t
    }

    fn bilerp_mat(&self, axis: usize, k: usize, s: &Stencil) -> f64 {
        let (b, c) = PLANES[axis];
        let (i, j) = (s.idx[b], s.idx[c]);
        let (tb, tc) = (s.frac[b], s.frac[c]);
        let r = self.resolution;
        let o = self.mat_index(axis, k, i, j);
        let m00 = self.params[o];
        let m01 = self.params[o + 1];
        let m10 = self.params[o + r];
        let m11 = self.params[o + r + 1];
        (1.0 - tb) * ((1.0 - tc) * m00 + tc * m01) + tb * ((1.0 - tc) * m10 + tc * m11)
    }

    /// Feature vector of length `3K`; points outside the box are clamped.
    pub fn feature_query(&self, x: Vec3) -> Vec<f64> {
        let s = self.stencil(x);
        let mut out = Vec::with_capacity(self.feature_dim());
        for axis in 0..3 {
            for k in 0..self.components {
                out.push(self.lerp_vec(axis, k, &s) * self.bilerp_mat(axis, k, &s));
            }
        }
        out
    }

    /// Accumulates `d(upstream . feature(x)) / d params` into `grad`.
    pub fn feature_query_backward(&self, x: Vec3, upstream: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(upstream.len(), self.feature_dim());
        debug_assert_eq!(grad.len(), self.params.len());
        let s = self.stencil(x);
        let r = self.resolution;
        for axis in 0..3 {
            let (b, c) = PLANES[axis];
            let (tb, tc) = (s.frac[b], s.frac[c]);
            let ta = s.frac[axis];
            for k in 0..self.components {
                let g = upstream[axis * self.components + k];
                if g == 0.0 {
                    continue;
                }
                let v = self.lerp_vec(axis, k, &s);
                let m = self.bilerp_mat(axis, k, &s);
                let vo = self.vec_index(axis, k, s.idx[axis]);
                grad[vo] += g * m * (1.0 - ta);
                grad[vo + 1] += g * m * ta;
                let mo = self.mat_index(axis, k, s.idx[b], s.idx[c]);
                let gv = g * v;
                grad[mo] += gv * (1.0 - tb) * (1.0 - tc);
                grad[mo + 1] += gv * (1.0 - tb) * tc;
                grad[mo + r] += gv * tb * (1.0 - tc);
                grad[mo + r + 1] += gv * tb * tc;
            }
        }
    }
}
