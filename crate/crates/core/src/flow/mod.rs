//! Conditional normalizing flows on the unit square, mapped to directions.
//!
//! A flow is a stack of coupling layers. Evaluating the CDFs layer by layer
//! takes a data point to the uniform latent square, so the density of the
//! data point is the product of the per-layer bin densities. Sampling runs
//! the inverse CDFs in reverse order.
//!
//! The square maps to the hemisphere about the shading normal with the
//! cylindrical equal-area warp. In the half-vector domain the resulting
//! direction is a microfacet normal that reflects `w_o`.

mod coupling;
mod pwquad;

pub use coupling::{CouplingLayer, CouplingTape};
pub use pwquad::{BinsGrad, PwQuadBins};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brdf::{half_vector_pdf_transform, DirSample};
use crate::geom::{build_frame, dir_to_square, reflect, square_to_dir, Frame, SquarePoint, UnitDir, Vec3, SQUARE_TO_DIR_JACOBIAN};
use crate::tensor::VmGrid;
use crate::{Error, Result};

/// Smallest `h . w_o` accepted when converting half-vector densities.
pub const MIN_HALF_DOT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowDomain {
    Incident,
    HalfVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub layers: usize,
    pub bins: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 2,
            bins: 32,
            hidden: 64,
            hidden_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizingFlow {
    layers: Vec<CouplingLayer>,
    domain: FlowDomain,
}

/// Conditioning vector with each layer's cached first-layer partial.
#[derive(Debug, Clone)]
pub struct FlowCondition {
    cond: Vec<f64>,
    partials: Vec<Vec<f64>>,
}

impl FlowCondition {
    pub fn cond(&self) -> &[f64] {
        &self.cond
    }
}

/// Per-condition gradient accumulator for [`NormalizingFlow::accumulate_log_pdf`].
#[derive(Debug, Clone)]
pub struct ConditionGrad {
    g_z1: Vec<Vec<f64>>,
}

/// Gradients of a flow objective.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGradient {
    pub net: Vec<f64>,
    pub grid: Vec<f64>,
}

impl NormalizingFlow {
    /// Layers alternate the warped coordinate, starting with the second.
    pub fn new(domain: FlowDomain, cond_dim: usize, config: &FlowConfig, rng: &mut impl Rng) -> Self {
        let hidden = vec![config.hidden; config.hidden_layers];
        let layers = (0..config.layers)
            .map(|i| CouplingLayer::new(1 - i % 2, cond_dim, config.bins, &hidden, rng))
            .collect();
        NormalizingFlow { layers, domain }
    }

    pub fn domain(&self) -> FlowDomain {
        self.domain
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn cond_dim(&self) -> usize {
        self.layers[0].cond_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.net().params().len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.net().params().iter().copied()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for l in &mut self.layers {
            let p = l.net_mut().params_mut();
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.net().params().len();
                o
            })
            .collect()
    }

    /// `V_f(x) ⊕ w_r` with `w_r` in world coordinates.
    pub fn conditioning(grid: &VmGrid, x: Vec3, w_r: UnitDir) -> Vec<f64> {
        let mut c = grid.feature_query(x);
        c.extend_from_slice(&w_r.to_array());
        c
    }

    pub fn condition(&self, cond: Vec<f64>) -> FlowCondition {
        assert_eq!(cond.len(), self.cond_dim());
        let partials = self.layers.iter().map(|l| l.precompute(&cond)).collect();
        FlowCondition { cond, partials }
    }

    /// Draws a square point; returns it with its log density on the square.
    pub fn sample_square(&self, c: &FlowCondition, u: SquarePoint) -> (SquarePoint, f64) {
        let mut z = u.to_array();
        let mut log_q = 0.0;
        for (l, partial) in self.layers.iter().zip(&c.partials).rev() {
            let (x, ld) = l.inverse(partial, z);
            z = x;
            log_q += ld;
        }
        let s = SquarePoint::new(z[0], z[1]);
        if s.to_array() != z {
            log_q = self.log_density_square(c, s);
        }
        (s, log_q)
    }

    pub fn log_density_square(&self, c: &FlowCondition, s: SquarePoint) -> f64 {
        let mut z = s.to_array();
        let mut log_q = 0.0;
        for (l, partial) in self.layers.iter().zip(&c.partials) {
            let (y, ld) = l.forward(partial, z);
            z = y;
            log_q += ld;
        }
        log_q
    }

    /// Latent image of a data point (the CDF composition).
    pub fn to_latent(&self, c: &FlowCondition, s: SquarePoint) -> [f64; 2] {
        let mut z = s.to_array();
        for (l, partial) in self.layers.iter().zip(&c.partials) {
            z = l.forward(partial, z).0;
        }
        z
    }

    pub fn sample(&self, c: &FlowCondition, u: SquarePoint, frame: &Frame, w_o: UnitDir) -> DirSample {
        let (s, log_q) = self.sample_square(c, u);
        let (d, jac) = square_to_dir(s, frame);
        let q = log_q.exp() / jac;
        match self.domain {
            FlowDomain::Incident => DirSample {
                direction: d,
                pdf: q,
                valid: true,
            },
            FlowDomain::HalfVector => {
                let hw = d.dot(*w_o);
                let w_i = reflect(w_o, d);
                DirSample {
                    direction: w_i,
                    pdf: q / (4.0 * hw.max(MIN_HALF_DOT)),
                    valid: hw >= MIN_HALF_DOT && w_i.dot(*frame.normal) > 0.0,
                }
            }
        }
    }

    /// Square point of `w_i` and the log of the direction-space Jacobian
    /// factor that turns a square density into a density over `w_i`.
    fn locate(&self, w_i: UnitDir, frame: &Frame, w_o: UnitDir) -> Result<(SquarePoint, f64)> {
        match self.domain {
            FlowDomain::Incident => Ok((dir_to_square(w_i, frame)?, -SQUARE_TO_DIR_JACOBIAN.ln())),
            FlowDomain::HalfVector => {
                let h = UnitDir::new(*w_i + *w_o).ok_or(Error::DegenerateHalfVector { dot: 0.0 })?;
                let s = dir_to_square(h, frame)?;
                let factor = half_vector_pdf_transform(1.0, h, w_o)?;
                Ok((s, factor.ln() - SQUARE_TO_DIR_JACOBIAN.ln()))
            }
        }
    }

    pub fn log_pdf(&self, c: &FlowCondition, w_i: UnitDir, frame: &Frame, w_o: UnitDir) -> Result<f64> {
        let (s, log_jac) = self.locate(w_i, frame, w_o)?;
        Ok(self.log_density_square(c, s) + log_jac)
    }

    pub fn pdf(&self, c: &FlowCondition, w_i: UnitDir, frame: &Frame, w_o: UnitDir) -> Result<f64> {
        self.log_pdf(c, w_i, frame, w_o).map(f64::exp)
    }

    pub fn condition_grad(&self) -> ConditionGrad {
        ConditionGrad {
            g_z1: self.layers.iter().map(|l| vec![0.0; l.net().dims()[1]]).collect(),
        }
    }

    /// Adds `upstream * d log q(w_i) / d params` into `grad` (flat layout of
    /// [`NormalizingFlow::params_flat`]) and the conditioning part into
    /// `acc`. Returns `log q(w_i)`.
    pub fn accumulate_log_pdf(
        &self,
        c: &FlowCondition,
        w_i: UnitDir,
        frame: &Frame,
        w_o: UnitDir,
        upstream: f64,
        grad: &mut [f64],
        acc: &mut ConditionGrad,
    ) -> Result<f64> {
        let (s, log_jac) = self.locate(w_i, frame, w_o)?;
        let mut z = s.to_array();
        let mut log_q = log_jac;
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (l, partial) in self.layers.iter().zip(&c.partials) {
            let (y, ld, tape) = l.forward_recorded(partial, z);
            z = y;
            log_q += ld;
            tapes.push(tape);
        }
        let offsets = self.offsets();
        let mut g_z = [0.0; 2];
        for (i, l) in self.layers.iter().enumerate().rev() {
            let len = l.net().params().len();
            let g = &mut grad[offsets[i]..offsets[i] + len];
            g_z = l.backward(&tapes[i], g_z, upstream, g, &mut acc.g_z1[i]);
        }
        Ok(log_q)
    }

    /// Finishes the conditioning gradient accumulated in `acc`, adding the
    /// remaining first-layer parameter gradients into `grad`. Returns the
    /// gradient with respect to the conditioning vector.
    pub fn finish_condition(&self, c: &FlowCondition, acc: &ConditionGrad, grad: &mut [f64]) -> Vec<f64> {
        let offsets = self.offsets();
        let mut g_cond = vec![0.0; c.cond.len()];
        for (i, l) in self.layers.iter().enumerate() {
            let len = l.net().params().len();
            let g = &mut grad[offsets[i]..offsets[i] + len];
            let gc = l.net().finish_split(&c.cond, &acc.g_z1[i], g);
            for (a, b) in g_cond.iter_mut().zip(gc) {
                *a += b;
            }
        }
        g_cond
    }
}

/// Draws a direction at surface point `x` with normal `n`, conditioned on
/// `grid` and the mirror direction of `w_o`.
pub fn flow_sample(flow: &NormalizingFlow, grid: &VmGrid, u: SquarePoint, x: Vec3, n: UnitDir, w_o: UnitDir) -> DirSample {
    let c = flow.condition(NormalizingFlow::conditioning(grid, x, reflect(w_o, n)));
    flow.sample(&c, u, &build_frame(n), w_o)
}

pub fn flow_pdf(flow: &NormalizingFlow, grid: &VmGrid, w_i: UnitDir, x: Vec3, n: UnitDir, w_o: UnitDir) -> Result<f64> {
    let c = flow.condition(NormalizingFlow::conditioning(grid, x, reflect(w_o, n)));
    flow.pdf(&c, w_i, &build_frame(n), w_o)
}

/// `log q(w_i)` with its gradient with respect to the flow networks and
/// the conditioning grid.
pub fn flow_log_pdf_with_grad(
    flow: &NormalizingFlow,
    grid: &VmGrid,
    w_i: UnitDir,
    x: Vec3,
    n: UnitDir,
    w_o: UnitDir,
) -> Result<(f64, FlowGradient)> {
    let c = flow.condition(NormalizingFlow::conditioning(grid, x, reflect(w_o, n)));
    let mut net = vec![0.0; flow.num_params()];
    let mut acc = flow.condition_grad();
    let log_q = flow.accumulate_log_pdf(&c, w_i, &build_frame(n), w_o, 1.0, &mut net, &mut acc)?;
    let g_cond = flow.finish_condition(&c, &acc, &mut net);
    let mut grid_grad = vec![0.0; grid.params().len()];
    grid.feature_query_backward(x, &g_cond[..grid.feature_dim()], &mut grid_grad);
    Ok((log_q, FlowGradient { net, grid: grid_grad }))
}

/// Frozen copy of a flow and its conditioning grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSnapshot {
    flow: NormalizingFlow,
    grid: VmGrid,
    iteration: u64,
}

impl FlowSnapshot {
    pub fn new(flow: &NormalizingFlow, grid: &VmGrid, iteration: u64) -> Self {
        FlowSnapshot {
            flow: flow.clone(),
            grid: grid.clone(),
            iteration,
        }
    }

    pub fn flow(&self) -> &NormalizingFlow {
        &self.flow
    }

    pub fn grid(&self) -> &VmGrid {
        &self.grid
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn condition(&self, x: Vec3, n: UnitDir, w_o: UnitDir) -> FlowCondition {
        self.flow.condition(NormalizingFlow::conditioning(&self.grid, x, reflect(w_o, n)))
    }
}
