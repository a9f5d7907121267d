//! Incident radiance: a lat-long environment map seen through binary
//! visibility, plus an optional learned indirect term.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color::Rgb;
use crate::geom::{occluded, Geometry, UnitDir, Vec3};
use crate::nn::{positional_encoding, sigmoid, softplus, softplus_inverse, FinalInit, Mlp, ParamTape};
use crate::{Error, Result};

pub const DEFAULT_ENV_WIDTH: usize = 64;
pub const DEFAULT_ENV_HEIGHT: usize = 32;

/// Equirectangular environment map. Row 0 is the `+z` pole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMap {
    width: usize,
    height: usize,
    /// Linear radiance, `3 * width * height` row-major.
    texels: Vec<f64>,
    /// Softplus pre-activations of `texels` when learnable.
    preact: Option<Vec<f64>>,
}

/// Smooth directional light lobe `color * exp(sharpness * (cos - 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub direction: UnitDir,
    pub color: Rgb,
    pub sharpness: f64,
}

impl Lobe {
    pub fn eval(&self, w: UnitDir) -> Rgb {
        self.color * (self.sharpness * (w.dot(*self.direction) - 1.0)).exp()
    }
}

/// Bilinear footprint of a lookup: texel indices and weights.
pub type Stencil = [(usize, f64); 4];

impl EnvMap {
    pub fn constant(width: usize, height: usize, value: Rgb) -> Result<Self> {
        Self::from_fn(width, height, |_| value)
    }

    /// Samples `f` at texel centers.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(UnitDir) -> Rgb) -> Result<Self> {
        if width < 4 || height < 2 {
            return Err(Error::Validation(format!("environment map must be at least 4x2, got {width}x{height}")));
        }
        let mut texels = Vec::with_capacity(3 * width * height);
        for j in 0..height {
            for i in 0..width {
                let c = f(texel_direction(width, height, i, j));
                texels.extend(c.0.iter().map(|v| v.max(0.0)));
            }
        }
        Ok(EnvMap {
            width,
            height,
            texels,
            preact: None,
        })
    }

    pub fn from_lobes(width: usize, height: usize, ambient: Rgb, lobes: &[Lobe]) -> Result<Self> {
        Self::from_fn(width, height, |w| lobes.iter().fold(ambient, |acc, l| acc + l.eval(w)))
    }

    pub fn from_texels(width: usize, height: usize, texels: Vec<f64>) -> Result<Self> {
        if width < 4 || height < 2 || texels.len() != 3 * width * height {
            return Err(Error::Validation(format!(
                "environment map {width}x{height} needs {} values, got {}",
                3 * width * height,
                texels.len()
            )));
        }
        if let Some(bad) = texels.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(format!("environment texel {bad} is not a finite nonnegative radiance")));
        }
        Ok(EnvMap {
            width,
            height,
            texels,
            preact: None,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn texels(&self) -> &[f64] {
        &self.texels
    }

    pub fn learnable(&self) -> bool {
        self.preact.is_some()
    }

    /// Switches texels to softplus-parameterized storage (or back).
    pub fn set_learnable(&mut self, learnable: bool) {
        if learnable && self.preact.is_none() {
            self.preact = Some(self.texels.iter().map(|v| softplus_inverse(v.max(1e-6))).collect());
            self.sync_texels();
        } else if !learnable {
            self.preact = None;
        }
    }

    pub fn preact(&self) -> Option<&[f64]> {
        self.preact.as_deref()
    }

    pub fn set_preact(&mut self, values: &[f64]) {
        let p = self.preact.as_mut().expect("environment map is not learnable");
        p.copy_from_slice(values);
        self.sync_texels();
    }

    fn sync_texels(&mut self) {
        if let Some(p) = &self.preact {
            for (t, a) in self.texels.iter_mut().zip(p) {
                *t = softplus(*a);
            }
        }
    }

    /// `d texel / d preact` for texel component `k`.
    pub fn preact_slope(&self, k: usize) -> f64 {
        self.preact.as_ref().map_or(1.0, |p| sigmoid(p[k]))
    }

    pub fn texel(&self, i: usize, j: usize) -> Rgb {
        let o = 3 * (j * self.width + i);
        Rgb([self.texels[o], self.texels[o + 1], self.texels[o + 2]])
    }

    /// Texel indices `[i0, i1, j0, j1]` and fractions `(tu, tv)` of the
    /// bilinear footprint of `w`.
    fn footprint(&self, w: UnitDir) -> ([usize; 4], f64, f64) {
        let u = (w.y.atan2(w.x) + PI) / (2.0 * PI);
        let v = w.z.clamp(-1.0, 1.0).acos() / PI;
        let fu = u * self.width as f64 - 0.5;
        let fv = (v * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let i0f = fu.floor();
        let tu = fu - i0f;
        let i0 = (i0f as i64).rem_euclid(self.width as i64) as usize;
        let i1 = (i0 + 1) % self.width;
        let j0 = (fv.floor() as usize).min(self.height - 2);
        let tv = fv - j0 as f64;
        ([i0, i1, j0, j0 + 1], tu, tv)
    }

    /// Bilinear footprint; indices address texels (multiply by 3 for data).
    pub fn stencil(&self, w: UnitDir) -> Stencil {
        let ([i0, i1, j0, j1], tu, tv) = self.footprint(w);
        let idx = |i: usize, j: usize| j * self.width + i;
        [
            (idx(i0, j0), (1.0 - tu) * (1.0 - tv)),
            (idx(i1, j0), tu * (1.0 - tv)),
            (idx(i0, j1), (1.0 - tu) * tv),
            (idx(i1, j1), tu * tv),
        ]
    }

    /// Bilinear lookup with the weights of [`EnvMap::stencil`], in nested
    /// lerp form so that equal texels are reproduced exactly.
    pub fn lookup(&self, w: UnitDir) -> Rgb {
        let ([i0, i1, j0, j1], tu, tv) = self.footprint(w);
        let lerp = |a: Rgb, b: Rgb, t: f64| a + (b - a) * t;
        let top = lerp(self.texel(i0, j0), self.texel(i1, j0), tu);
        let bottom = lerp(self.texel(i0, j1), self.texel(i1, j1), tu);
        lerp(top, bottom, tv)
    }

    /// Solid angle of the texels in row `j`.
    pub fn row_solid_angle(&self, j: usize) -> f64 {
        let t0 = PI * j as f64 / self.height as f64;
        let t1 = PI * (j + 1) as f64 / self.height as f64;
        2.0 * PI / self.width as f64 * (t0.cos() - t1.cos())
    }
}

/// Direction through the center of texel `(i, j)`.
pub fn texel_direction(width: usize, height: usize, i: usize, j: usize) -> UnitDir {
    let u = (i as f64 + 0.5) / width as f64;
    let v = (j as f64 + 0.5) / height as f64;
    let phi = 2.0 * PI * u - PI;
    let theta = PI * v;
    UnitDir::new_unchecked(Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()))
}

pub fn env_lookup(env: &EnvMap, w: UnitDir) -> Rgb {
    env.lookup(w)
}

pub const INDIRECT_OCTAVES: usize = 6;

/// Learned indirect radiance `softplus(mlp(PE(x) ⊕ w))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndirectField {
    mlp: Mlp,
    enabled: bool,
}

#[derive(Debug, Clone)]
pub struct IndirectTape {
    tape: ParamTape,
    pre: [f64; 3],
}

impl IndirectField {
    pub fn new(hidden: usize, enabled: bool, rng: &mut impl Rng) -> Self {
        let input = 3 + 6 * INDIRECT_OCTAVES + 3;
        IndirectField {
            mlp: Mlp::new(&[input, hidden, hidden, 3], FinalInit::Zero, rng),
            enabled,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    fn input(x: Vec3, w: UnitDir) -> Vec<f64> {
        let mut v = positional_encoding(x, INDIRECT_OCTAVES);
        v.extend_from_slice(&w.to_array());
        v
    }

    pub fn eval(&self, x: Vec3, w: UnitDir) -> Rgb {
        Rgb(self.mlp.eval(&Self::input(x, w)).try_into().expect("three outputs")).map(softplus)
    }

    pub fn forward(&self, x: Vec3, w: UnitDir) -> (Rgb, IndirectTape) {
        let (out, tape) = self.mlp.forward(&Self::input(x, w)).expect("indirect input width is fixed");
        let pre: [f64; 3] = out.try_into().expect("three outputs");
        (Rgb(pre).map(softplus), IndirectTape { tape, pre })
    }

    /// Adds `d(upstream . L_ind) / d params` into `grad`.
    pub fn backward(&self, tape: &IndirectTape, upstream: Rgb, grad: &mut [f64]) {
        let g: Vec<f64> = (0..3).map(|k| upstream[k] * sigmoid(tape.pre[k])).collect();
        self.mlp.backward(&tape.tape, &g, grad);
    }
}

pub fn indirect_eval(field: &IndirectField, x: Vec3, w_i: UnitDir) -> Rgb {
    field.eval(x, w_i)
}

/// Light sources of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub env: EnvMap,
    pub indirect: IndirectField,
}

/// `V(w_i, x) L_env(w_i) + L_ind(x, w_i)` at a surface point with normal `n`.
pub fn incident_radiance(w_i: UnitDir, x: Vec3, n: UnitDir, geometry: &Geometry, lighting: &Lighting) -> Rgb {
    let direct = if occluded(x, n, w_i, geometry) {
        Rgb::BLACK
    } else {
        lighting.env.lookup(w_i)
    };
    if lighting.indirect.enabled() {
        direct + lighting.indirect.eval(x, w_i)
    } else {
        direct
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Primitive;
    use crate::nn::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut impl Rng) -> UnitDir {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).sqrt();
        UnitDir::xyz(r * phi.cos(), r * phi.sin(), z).unwrap()
    }

    #[test]
    fn constant_map_everywhere() {
        let env = EnvMap::constant(64, 32, Rgb::new(0.2, 0.5, 1.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for _ in 0..1000 {
            let c = env.lookup(random_dir(&mut rng));
            assert!((c - Rgb::new(0.2, 0.5, 1.5)).0.iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn pole_reads_top_row() {
        let env = EnvMap::from_fn(8, 4, |w| Rgb::splat(if w.z > 0.5 { 3.0 } else { 0.0 })).unwrap();
        assert_eq!(env.lookup(UnitDir::Z), Rgb::splat(3.0));
        let s = env.stencil(UnitDir::Z);
        assert!(s.iter().filter(|(_, w)| *w > 0.0).all(|(t, _)| t / 8 == 0));
        assert_eq!(env.lookup(-UnitDir::Z), Rgb::BLACK);
    }

    #[test]
    fn wraps_across_the_seam() {
        let env = EnvMap::from_fn(16, 8, |w| Rgb::splat(w.y.atan2(w.x).cos() + 1.0)).unwrap();
        // phi = pi is the seam; both sides blend the first and last columns.
        let a = env.lookup(UnitDir::xyz(-1.0, 1e-9, 0.0).unwrap());
        let b = env.lookup(UnitDir::xyz(-1.0, -1e-9, 0.0).unwrap());
        assert!((a - b).0.iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn constant_map_integrates_to_sphere_area() {
        let env = EnvMap::constant(64, 32, Rgb::WHITE).unwrap();
        let mut total = 0.0;
        for j in 0..env.height() {
            for i in 0..env.width() {
                total += env.lookup(texel_direction(64, 32, i, j))[0] * env.row_solid_angle(j);
            }
        }
        assert!((total / (4.0 * PI) - 1.0).abs() < 0.01, "{total}");
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(EnvMap::constant(2, 2, Rgb::WHITE).is_err());
        assert!(EnvMap::from_texels(4, 2, vec![1.0; 23]).is_err());
        let mut t = vec![1.0; 24];
        t[5] = -1.0;
        assert!(EnvMap::from_texels(4, 2, t).is_err());
    }

    #[test]
    fn learnable_storage_round_trips() {
        let mut env = EnvMap::from_lobes(
            16,
            8,
            Rgb::splat(0.1),
            &[Lobe {
                direction: UnitDir::Z,
                color: Rgb::new(2.0, 1.0, 0.5),
                sharpness: 10.0,
            }],
        )
        .unwrap();
        let before = env.texels().to_vec();
        env.set_learnable(true);
        for (a, b) in env.texels().iter().zip(&before) {
            assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
        let p: Vec<f64> = env.preact().unwrap().iter().map(|v| v - 100.0).collect();
        env.set_preact(&p);
        assert!(env.texels().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn lookup_is_pure() {
        let env = EnvMap::from_fn(32, 16, |w| Rgb::new(w.x.abs(), w.y.abs(), w.z.abs())).unwrap();
        let w = UnitDir::xyz(0.3, -0.4, 0.5).unwrap();
        assert_eq!(env.lookup(w).0.map(f64::to_bits), env.lookup(w).0.map(f64::to_bits));
    }

    #[test]
    fn zero_init_indirect_is_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let f = IndirectField::new(64, true, &mut rng);
        for _ in 0..100 {
            let x = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let c = f.eval(x, random_dir(&mut rng));
            assert!(c.0.iter().all(|v| (v - 2f64.ln()).abs() < 1e-15));
        }
    }

    #[test]
    fn indirect_finite_over_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let mut f = IndirectField::new(64, true, &mut rng);
        for p in f.mlp_mut().params_mut() {
            *p += rng.gen_range(-0.5..0.5);
        }
        for _ in 0..10_000 {
            let x = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let c = f.eval(x, random_dir(&mut rng));
            assert!(c.is_finite() && c.min_component() >= 0.0);
        }
    }

    #[test]
    fn indirect_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let mut f = IndirectField::new(16, true, &mut rng);
        for p in f.mlp_mut().params_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
        let x = Vec3::new(0.2, -0.1, 0.4);
        let w = random_dir(&mut rng);
        let up = Rgb::new(0.3, -0.7, 1.1);
        let (_, tape) = f.forward(x, w);
        let mut grad = vec![0.0; f.mlp().params().len()];
        f.backward(&tape, up, &mut grad);
        let chk = finite_diff_check(
            |p| {
                let mut ff = f.clone();
                ff.mlp_mut().params_mut().copy_from_slice(p);
                ff.eval(x, w).dot(up)
            },
            f.mlp().params(),
            &grad,
            1e-6,
            None,
        );
        assert!(chk.max_rel_err < 1e-3, "{chk:?}");
    }

    fn lighting(env: EnvMap, indirect: bool) -> Lighting {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        Lighting {
            env,
            indirect: IndirectField::new(8, indirect, &mut rng),
        }
    }

    #[test]
    fn visibility_gates_direct_light() {
        let env = EnvMap::from_fn(32, 16, |w| Rgb::splat(1.0 + w.z)).unwrap();
        let l = lighting(env.clone(), false);
        let open = Geometry::new(vec![]);
        let w = UnitDir::xyz(0.2, 0.1, 0.97).unwrap();
        assert_eq!(incident_radiance(w, Vec3::ZERO, UnitDir::Z, &open, &l), env.lookup(w));
        let blocker = Geometry::new(vec![Primitive::Sphere {
            center: Vec3::new(0.0, 0.0, 2.0),
            radius: 1.5,
        }]);
        assert_eq!(incident_radiance(UnitDir::Z, Vec3::ZERO, UnitDir::Z, &blocker, &l), Rgb::BLACK);
        let with_ind = lighting(env, true);
        let c = incident_radiance(UnitDir::Z, Vec3::ZERO, UnitDir::Z, &blocker, &with_ind);
        assert!((c[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shadowed_point_receives_less_light() {
        let l = lighting(EnvMap::constant(32, 16, Rgb::WHITE).unwrap(), false);
        let g = Geometry::new(vec![
            Primitive::Plane {
                point: Vec3::ZERO,
                normal: UnitDir::Z,
            },
            Primitive::Sphere {
                center: Vec3::new(0.0, 0.0, 1.0),
                radius: 0.5,
            },
        ]);
        let irradiance = |x: Vec3| {
            let n = 128;
            let mut total = 0.0;
            for i in 0..n {
                let z = (i as f64 + 0.5) / n as f64;
                for j in 0..n {
                    let phi = 2.0 * PI * (j as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let w = UnitDir::xyz(r * phi.cos(), r * phi.sin(), z).unwrap();
                    total += incident_radiance(w, x, UnitDir::Z, &g, &l)[0];
                }
            }
            total * 2.0 * PI / (n * n) as f64
        };
        let under = irradiance(Vec3::ZERO);
        let far = irradiance(Vec3::new(5.0, 0.0, 0.0));
        assert!((far - 2.0 * PI).abs() < 0.05, "{far}");
        assert!(under < far);
    }
}
