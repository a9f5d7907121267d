//! Piecewise-quadratic monotone warps of the unit interval.
//!
//! The density is piecewise linear over `K` bins of variable width with
//! `K + 1` vertex heights. The raw network head holds `K + 1` unnormalized
//! log-heights followed by `K` unnormalized log-widths.

/// Tolerance below which a bin's density is treated as flat when inverting.
const FLAT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PwQuadBins {
    widths: Vec<f64>,
    vertices: Vec<f64>,
    /// Left bin edges, `edges[K] == 1`.
    edges: Vec<f64>,
    /// Cumulative mass at each left edge, `masses[K] == 1`.
    masses: Vec<f64>,
}

/// Gradients of `g_cdf * C(x) + g_pdf * p(x)`.
#[derive(Debug, Clone)]
pub struct BinsGrad {
    /// With respect to the raw head, same layout as [`PwQuadBins::from_raw`].
    pub raw: Vec<f64>,
    pub x: f64,
}

impl PwQuadBins {
    /// Raw head length for `k` bins.
    pub fn raw_len(k: usize) -> usize {
        2 * k + 1
    }

    pub fn uniform(k: usize) -> Self {
        Self::from_raw(&vec![0.0; Self::raw_len(k)])
    }

    /// Builds normalized bins from `[V̂_0..=V̂_K, Ŵ_0..Ŵ_{K-1}]`.
    pub fn from_raw(raw: &[f64]) -> Self {
        assert!(raw.len() >= 3 && raw.len() % 2 == 1, "raw head must have odd length >= 3");
        let k = (raw.len() - 1) / 2;
        let (v_hat, w_hat) = raw.split_at(k + 1);

        let w_max = w_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut widths: Vec<f64> = w_hat.iter().map(|w| (w - w_max).exp()).collect();
        let w_sum: f64 = widths.iter().sum();
        widths.iter_mut().for_each(|w| *w /= w_sum);

        let v_max = v_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut vertices: Vec<f64> = v_hat.iter().map(|v| (v - v_max).exp()).collect();
        let z: f64 = (0..k).map(|i| 0.5 * (vertices[i] + vertices[i + 1]) * widths[i]).sum();
        vertices.iter_mut().for_each(|v| *v /= z);

        let mut edges = Vec::with_capacity(k + 1);
        let mut masses = Vec::with_capacity(k + 1);
        let (mut e, mut m) = (0.0, 0.0);
        for i in 0..k {
            edges.push(e);
            masses.push(m);
            e += widths[i];
            m += 0.5 * (vertices[i] + vertices[i + 1]) * widths[i];
        }
        edges.push(1.0);
        masses.push(1.0);

        PwQuadBins {
            widths,
            vertices,
            edges,
            masses,
        }
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn vertices(&self) -> &[f64] {
        &self.vertices
    }

    /// Bin index and relative position within it.
    fn locate(&self, x: f64) -> (usize, f64) {
        let x = x.clamp(0.0, 1.0);
        let k = self.bins();
        let b = (self.edges[1..k].partition_point(|e| *e <= x)).min(k - 1);
        let alpha = ((x - self.edges[b]) / self.widths[b]).clamp(0.0, 1.0);
        (b, alpha)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (b, a) = self.locate(x);
        (1.0 - a) * self.vertices[b] + a * self.vertices[b + 1]
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (b, a) = self.locate(x);
        self.cdf_in_bin(b, a)
    }

    fn cdf_in_bin(&self, b: usize, a: f64) -> f64 {
        let (vb, vn, w) = (self.vertices[b], self.vertices[b + 1], self.widths[b]);
        self.masses[b] + 0.5 * a * w * ((2.0 - a) * vb + a * vn)
    }

    pub fn inverse_cdf(&self, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        let k = self.bins();
        let b = (self.masses[1..k].partition_point(|m| *m <= y)).min(k - 1);
        let (vb, vn, w) = (self.vertices[b], self.vertices[b + 1], self.widths[b]);
        let r = (y - self.masses[b]).max(0.0);
        let lin = w * vb;
        let alpha = if (vn - vb).abs() < FLAT_EPS {
            r / lin
        } else {
            // a alpha^2 + lin alpha - r = 0, root taken in the cancellation-free form.
            let quad = 0.5 * w * (vn - vb);
            let disc = (lin * lin + 4.0 * quad * r).max(0.0);
            2.0 * r / (lin + disc.sqrt())
        };
        self.edges[b] + alpha.clamp(0.0, 1.0) * w
    }

    /// Gradients of `g_cdf * C(x) + g_pdf * p(x)` with respect to the raw
    /// head and to `x`.
    pub fn backward(&self, x: f64, g_cdf: f64, g_pdf: f64) -> BinsGrad {
        let k = self.bins();
        let (b, a) = self.locate(x);
        let (w, v) = (&self.widths, &self.vertices);
        let (vb, vn, wb) = (v[b], v[b + 1], w[b]);
        let p = (1.0 - a) * vb + a * vn;

        // Explicit partials holding alpha's inputs (x, W) and V independent.
        let mut g_v = vec![0.0; k + 1];
        let mut g_w = vec![0.0; k];
        for j in 0..b {
            let half = 0.5 * g_cdf * w[j];
            g_v[j] += half;
            g_v[j + 1] += half;
            g_w[j] += g_cdf * 0.5 * (v[j] + v[j + 1]);
        }
        g_v[b] += g_cdf * 0.5 * a * wb * (2.0 - a) + g_pdf * (1.0 - a);
        g_v[b + 1] += g_cdf * 0.5 * a * a * wb + g_pdf * a;
        g_w[b] += g_cdf * 0.5 * a * ((2.0 - a) * vb + a * vn);

        // alpha = (x - sum_{j<b} W_j) / W_b
        let g_alpha = g_cdf * wb * p + g_pdf * (vn - vb);
        for gw in g_w.iter_mut().take(b) {
            *gw -= g_alpha / wb;
        }
        g_w[b] -= g_alpha * a / wb;
        let g_x = g_alpha / wb;

        // V_i = e_i / Z with Z = sum_k (e_k + e_{k+1}) W_k / 2.
        let s: f64 = g_v.iter().zip(v).map(|(g, vi)| g * vi).sum();
        for j in 0..k {
            g_w[j] -= 0.5 * (v[j] + v[j + 1]) * s;
        }
        let mut raw = Vec::with_capacity(2 * k + 1);
        for j in 0..=k {
            let w_left = if j > 0 { w[j - 1] } else { 0.0 };
            let w_right = if j < k { w[j] } else { 0.0 };
            raw.push(v[j] * (g_v[j] - 0.5 * (w_left + w_right) * s));
        }
        // W = softmax(Ŵ)
        let dot: f64 = g_w.iter().zip(w).map(|(g, wj)| g * wj).sum();
        for j in 0..k {
            raw.push(w[j] * (g_w[j] - dot));
        }

        BinsGrad { raw, x: g_x }
    }
}
