//! Microfacet BRDF (Lambertian diffuse plus GGX specular) and the two
//! fixed importance samplers used as baselines.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::geom::{reflect, Frame, SquarePoint, UnitDir, Vec3};

pub const ROUGHNESS_FLOOR: f64 = 0.01;
const DIELECTRIC_F0: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
}

impl Material {
    pub fn new(albedo: Rgb, metallic: f64, roughness: f64) -> Self {
        Material {
            albedo: albedo.map(|c| c.clamp(0.0, 1.0)),
            metallic: metallic.clamp(0.0, 1.0),
            roughness: roughness.clamp(ROUGHNESS_FLOOR, 1.0),
        }
    }

    /// GGX width, `roughness^2`.
    pub fn alpha(&self) -> f64 {
        self.roughness * self.roughness
    }

    pub fn f0(&self) -> Rgb {
        Rgb::splat(DIELECTRIC_F0 * (1.0 - self.metallic)) + self.albedo * self.metallic
    }
}

/// A sampled direction with its density per steradian.
///
/// `valid` is false when the direction left the upper hemisphere; such
/// samples still carry the density they were drawn with and contribute zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirSample {
    pub direction: UnitDir,
    pub pdf: f64,
    pub valid: bool,
}

pub fn eval_diffuse(mat: &Material) -> Rgb {
    mat.albedo * ((1.0 - mat.metallic) / PI)
}

fn ggx_d_alpha(cos_h: f64, alpha: f64) -> f64 {
    if cos_h <= 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    let d = cos_h * cos_h * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

/// GGX / Trowbridge-Reitz normal distribution.
pub fn ggx_d(w_h: UnitDir, n: UnitDir, mat: &Material) -> f64 {
    ggx_d_alpha(w_h.dot(*n), mat.alpha())
}

pub fn fresnel_schlick(cos_theta: f64, f0: Rgb) -> Rgb {
    let w = (1.0 - cos_theta.clamp(0.0, 1.0)).powi(5);
    f0.map(|f| f + (1.0 - f) * w)
}

fn g1(cos_v: f64, k: f64) -> f64 {
    cos_v / (cos_v * (1.0 - k) + k)
}

/// Separable Smith shadowing-masking with the Schlick-GGX approximation,
/// `k = alpha / 2`.
pub fn smith_g(w_i: UnitDir, w_o: UnitDir, n: UnitDir, mat: &Material) -> f64 {
    let k = mat.alpha() / 2.0;
    g1(w_i.dot(*n), k) * g1(w_o.dot(*n), k)
}

/// `D F G / (4 cos_i cos_o)`; zero if either direction is below the horizon.
pub fn eval_specular(w_i: UnitDir, w_o: UnitDir, n: UnitDir, mat: &Material) -> Rgb {
    let ci = w_i.dot(*n);
    let co = w_o.dot(*n);
    if ci <= 0.0 || co <= 0.0 {
        return Rgb::BLACK;
    }
    let Some(h) = UnitDir::new(*w_i + *w_o) else {
        return Rgb::BLACK;
    };
    let d = ggx_d(h, n, mat);
    let g = smith_g(w_i, w_o, n, mat);
    fresnel_schlick(h.dot(*w_o), mat.f0()) * (d * g / (4.0 * ci * co))
}

/// Specular value with its partial derivatives in the material parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpecularPartials {
    pub value: Rgb,
    /// Channel-diagonal derivative w.r.t. albedo.
    pub d_albedo: Rgb,
    pub d_metallic: Rgb,
    pub d_roughness: Rgb,
}

pub fn eval_specular_partials(
    w_i: UnitDir,
    w_o: UnitDir,
    n: UnitDir,
    mat: &Material,
) -> SpecularPartials {
    let ci = w_i.dot(*n);
    let co = w_o.dot(*n);
    if ci <= 0.0 || co <= 0.0 {
        return SpecularPartials::default();
    }
    let Some(h) = UnitDir::new(*w_i + *w_o) else {
        return SpecularPartials::default();
    };
    let alpha = mat.alpha();
    let a2 = alpha * alpha;
    let ch = h.dot(*n);
    let t = ch * ch;
    let den = t * (a2 - 1.0) + 1.0;
    let d = if ch > 0.0 { a2 / (PI * den * den) } else { 0.0 };
    let dd_dalpha = if ch > 0.0 {
        2.0 * alpha / (PI * den * den) * (1.0 - 2.0 * a2 * t / den)
    } else {
        0.0
    };

    let k = alpha / 2.0;
    let gi = g1(ci, k);
    let go = g1(co, k);
    let dg1 = |c: f64| -c * (1.0 - c) / (c * (1.0 - k) + k).powi(2);
    let g = gi * go;
    let dg_dalpha = 0.5 * (dg1(ci) * go + gi * dg1(co));

    let fw = (1.0 - h.dot(*w_o).clamp(0.0, 1.0)).powi(5);
    let f0 = mat.f0();
    let fresnel = f0.map(|f| f + (1.0 - f) * fw);
    let df_df0 = 1.0 - fw;

    let scale = 1.0 / (4.0 * ci * co);
    let dg = d * g * scale;
    // roughness floor makes the clamped region flat.
    let dalpha_dr = if mat.roughness > ROUGHNESS_FLOOR {
        2.0 * mat.roughness
    } else {
        0.0
    };
    SpecularPartials {
        value: fresnel * dg,
        d_albedo: Rgb::splat(df_df0 * mat.metallic * dg),
        d_metallic: mat.albedo.map(|a| df_df0 * (a - DIELECTRIC_F0) * dg),
        d_roughness: fresnel * ((dd_dalpha * g + d * dg_dalpha) * scale * dalpha_dr),
    }
}

/// Cosine-weighted hemisphere sample, `pdf = cos / pi`.
pub fn sample_cosine(p: SquarePoint, frame: &Frame) -> DirSample {
    let z = (1.0 - p.u1).max(0.0).sqrt();
    let r = p.u1.sqrt();
    let phi = 2.0 * PI * p.u2;
    let local = Vec3::new(r * phi.cos(), r * phi.sin(), z);
    DirSample {
        direction: UnitDir::new_unchecked(frame.to_world(local)),
        pdf: z / PI,
        valid: true,
    }
}

pub fn pdf_cosine(w_i: UnitDir, n: UnitDir) -> f64 {
    w_i.dot(*n).max(0.0) / PI
}

/// Samples a GGX half vector (`D(h) cos_h`) and reflects `w_o` about it.
pub fn sample_ggx(p: SquarePoint, w_o: UnitDir, frame: &Frame, mat: &Material) -> DirSample {
    let alpha = mat.alpha();
    let cos_h = ((1.0 - p.u1) / (1.0 + (alpha * alpha - 1.0) * p.u1)).sqrt();
    let sin_h = (1.0 - cos_h * cos_h).max(0.0).sqrt();
    let phi = 2.0 * PI * p.u2;
    let local = Vec3::new(sin_h * phi.cos(), sin_h * phi.sin(), cos_h);
    let h = UnitDir::new(frame.to_world(local)).unwrap_or(frame.normal);
    let w_i = reflect(w_o, h);
    let hw = h.dot(*w_o);
    let pdf = ggx_d_alpha(cos_h, alpha) * cos_h / (4.0 * hw.abs().max(1e-12));
    DirSample {
        direction: w_i,
        pdf,
        valid: hw > 0.0 && w_i.dot(*frame.normal) > 0.0,
    }
}

/// Density of [`sample_ggx`] producing `w_i`.
pub fn pdf_ggx(w_i: UnitDir, w_o: UnitDir, n: UnitDir, mat: &Material) -> f64 {
    let Some(h) = UnitDir::new(*w_i + *w_o) else {
        return 0.0;
    };
    let hw = h.dot(*w_o);
    let ch = h.dot(*n);
    if hw <= 0.0 || ch <= 0.0 {
        return 0.0;
    }
    ggx_d_alpha(ch, mat.alpha()) * ch / (4.0 * hw)
}

/// Converts a half-vector density into an incident-direction density.
pub fn half_vector_pdf_transform(q_h: f64, w_h: UnitDir, w_o: UnitDir) -> Result<f64> {
    let dot = w_h.dot(*w_o);
    if dot < 1e-6 {
        return Err(Error::DegenerateHalfVector { dot });
    }
    Ok(q_h / (4.0 * dot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::build_frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn upper(rng: &mut impl Rng) -> UnitDir {
        let z: f64 = rng.gen_range(0.05..1.0);
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).sqrt();
        UnitDir::xyz(r * phi.cos(), r * phi.sin(), z).unwrap()
    }

    /// Midpoint quadrature over the upper hemisphere in (theta, phi).
    fn hemi_quad(n: usize, f: impl Fn(UnitDir) -> f64) -> f64 {
        let dt = PI / 2.0 / n as f64;
        let dp = 2.0 * PI / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            let th = (i as f64 + 0.5) * dt;
            for j in 0..n {
                let ph = (j as f64 + 0.5) * dp;
                let d = UnitDir::xyz(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()).unwrap();
                s += f(d) * th.sin() * dt * dp;
            }
        }
        s
    }

    #[test]
    fn diffuse_examples() {
        let m = Material::new(Rgb::WHITE, 0.0, 0.5);
        assert_eq!(eval_diffuse(&m), Rgb::splat(1.0 / PI));
        let m = Material::new(Rgb::new(0.3, 0.6, 0.9), 1.0, 0.5);
        assert_eq!(eval_diffuse(&m), Rgb::BLACK);
        let m = Material::new(Rgb::new(0.5, 0.2, 0.1), 0.5, 0.5);
        let want = Rgb::new(0.25, 0.1, 0.05) * (1.0 / PI);
        assert!((eval_diffuse(&m) - want).max_component().abs() < 1e-15);
    }

    #[test]
    fn ggx_d_examples() {
        let n = UnitDir::Z;
        let rough = Material::new(Rgb::WHITE, 0.0, 1.0);
        let h = UnitDir::xyz(0.3, 0.1, 0.8).unwrap();
        assert!((ggx_d(h, n, &rough) - 1.0 / PI).abs() < 1e-12);
        let m = Material::new(Rgb::WHITE, 0.0, 0.5);
        assert!((ggx_d(n, n, &m) - 16.0 / PI).abs() < 1e-12);
        assert_eq!(ggx_d(-n, n, &m), 0.0);
    }

    #[test]
    fn ggx_projected_area_normalized() {
        for alpha in [0.1f64, 0.5, 1.0] {
            let m = Material::new(Rgb::WHITE, 0.0, alpha.sqrt());
            let total = hemi_quad(512, |h| ggx_d(h, UnitDir::Z, &m) * h.z);
            assert!((total - 1.0).abs() < 2e-2, "alpha {alpha}: {total}");
        }
    }

    #[test]
    fn fresnel_examples() {
        let f0 = Rgb::splat(0.04);
        assert_eq!(fresnel_schlick(1.0, f0), f0);
        assert_eq!(fresnel_schlick(0.0, f0), Rgb::WHITE);
        assert!((fresnel_schlick(0.5, f0)[0] - 0.07).abs() < 1e-12);
    }

    #[test]
    fn smith_g_limits_and_symmetry() {
        let n = UnitDir::Z;
        let smooth = Material::new(Rgb::WHITE, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (a, b) = (upper(&mut rng), upper(&mut rng));
        assert!((smith_g(a, b, n, &smooth) - 1.0).abs() < 1e-3);
        let m = Material::new(Rgb::WHITE, 0.0, 0.7);
        assert_eq!(smith_g(n, n, n, &m), 1.0);
        for _ in 0..1000 {
            let (a, b) = (upper(&mut rng), upper(&mut rng));
            assert_eq!(smith_g(a, b, n, &m), smith_g(b, a, n, &m));
        }
    }

    #[test]
    fn specular_horizon_and_reciprocity() {
        let n = UnitDir::Z;
        let m = Material::new(Rgb::new(0.9, 0.5, 0.2), 0.3, 0.4);
        let below = UnitDir::xyz(0.2, 0.0, -0.5).unwrap();
        assert_eq!(eval_specular(below, n, n, &m), Rgb::BLACK);
        assert_eq!(eval_specular(n, below, n, &m), Rgb::BLACK);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (a, b) = (upper(&mut rng), upper(&mut rng));
            let fab = eval_specular(a, b, n, &m);
            let fba = eval_specular(b, a, n, &m);
            assert!((fab - fba).max_component().abs() <= 1e-12 * fab.max_component().max(1.0));
            assert!(fab.min_component() >= 0.0);
        }
    }

    #[test]
    fn white_furnace_bounded() {
        let n = UnitDir::Z;
        for r in [0.3, 0.5, 0.8, 1.0] {
            let m = Material::new(Rgb::WHITE, 1.0, r);
            for co in [0.2, 0.6, 1.0] {
                let w_o = UnitDir::xyz((1.0 - co * co as f64).sqrt(), 0.0, co).unwrap();
                let e = hemi_quad(512, |wi| eval_specular(wi, w_o, n, &m)[0] * wi.z);
                assert!(e <= 1.0, "r={r} co={co}: {e}");
            }
        }
    }

    #[test]
    fn specular_partials_match_finite_differences() {
        let n = UnitDir::Z;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let m = Material::new(
                Rgb::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.2..0.9),
            );
            let (wi, wo) = (upper(&mut rng), upper(&mut rng));
            let p = eval_specular_partials(wi, wo, n, &m);
            assert!((p.value - eval_specular(wi, wo, n, &m)).max_component().abs() < 1e-12);
            let h = 1e-6;
            let fd = |f: &dyn Fn(f64) -> Material| {
                (eval_specular(wi, wo, n, &f(h)) - eval_specular(wi, wo, n, &f(-h))) * (0.5 / h)
            };
            let dr = fd(&|e| Material { roughness: m.roughness + e, ..m });
            let dm = fd(&|e| Material { metallic: m.metallic + e, ..m });
            let close = |a: Rgb, b: Rgb| {
                (a - b).map(f64::abs).max_component() <= 1e-5 * (1.0 + b.map(f64::abs).max_component())
            };
            assert!(close(p.d_roughness, dr), "{:?} {:?}", p.d_roughness, dr);
            assert!(close(p.d_metallic, dm));
            for c in 0..3 {
                let da = fd(&|e| {
                    let mut a = m.albedo;
                    a[c] += e;
                    Material { albedo: a, ..m }
                });
                assert!((p.d_albedo[c] - da[c]).abs() <= 1e-5 * (1.0 + da[c].abs()));
            }
        }
    }

    #[test]
    fn cosine_sampler_pdf_and_normalization() {
        let f = build_frame(UnitDir::xyz(0.3, -0.2, 0.9).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let s = sample_cosine(SquarePoint::new(rng.gen(), rng.gen()), &f);
            assert!((s.pdf - s.direction.dot(*f.normal) / PI).abs() < 1e-12);
            // integrand cos/pi is exactly proportional to the pdf
            assert!(((s.direction.dot(*f.normal) / PI) / s.pdf - 1.0).abs() < 1e-9);
        }
        let total = hemi_quad(256, |d| pdf_cosine(d, UnitDir::Z));
        assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn ggx_peak_sample_is_mirror() {
        let f = build_frame(UnitDir::Z);
        let m = Material::new(Rgb::WHITE, 0.0, 0.5);
        let w_o = UnitDir::xyz(0.4, 0.1, 0.9).unwrap();
        let s = sample_ggx(SquarePoint::new(0.0, 0.3), w_o, &f, &m);
        // u1 is clamped to SQUARE_EPS, which tilts h by about sqrt(eps) / alpha.
        let tol = 2.5 * crate::geom::SQUARE_EPS.sqrt() / m.alpha();
        assert!(s.direction.max_abs_diff(*reflect(w_o, UnitDir::Z)) < tol);
    }

    #[test]
    fn ggx_pdf_matches_half_vector_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let m = Material::new(Rgb::WHITE, 0.0, 0.45);
        for _ in 0..1000 {
            let n = upper(&mut rng);
            let f = build_frame(n);
            let w_o = UnitDir::new(*upper(&mut rng) + *n * 0.5).unwrap();
            if w_o.dot(*n) <= 0.05 {
                continue;
            }
            let s = sample_ggx(SquarePoint::new(rng.gen(), rng.gen()), w_o, &f, &m);
            if !s.valid {
                continue;
            }
            let q = pdf_ggx(s.direction, w_o, n, &m);
            assert!((q / s.pdf - 1.0).abs() < 1e-6, "{q} {}", s.pdf);
        }
    }

    #[test]
    fn ggx_half_vector_histogram_chi_square() {
        let alpha = 0.5f64;
        let m = Material::new(Rgb::WHITE, 0.0, alpha.sqrt());
        let f = build_frame(UnitDir::Z);
        let w_o = UnitDir::Z;
        let (nt, np) = (8usize, 4usize);
        let mut counts = vec![0usize; nt * np];
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 100_000;
        for _ in 0..n {
            let s = sample_ggx(SquarePoint::new(rng.gen(), rng.gen()), w_o, &f, &m);
            let h = UnitDir::new(*s.direction + *w_o).unwrap();
            let ti = ((h.z.acos() / (PI / 2.0)) * nt as f64).min(nt as f64 - 1.0) as usize;
            let mut ph = h.y.atan2(h.x);
            if ph < 0.0 {
                ph += 2.0 * PI;
            }
            let pi_ = ((ph / (2.0 * PI)) * np as f64).min(np as f64 - 1.0) as usize;
            counts[ti * np + pi_] += 1;
        }
        // Expected bin mass from quadrature of D(h) cos_h over each cell.
        let mut chi2 = 0.0;
        for ti in 0..nt {
            let mut mass = 0.0;
            let sub = 2000;
            let t0 = ti as f64 * PI / 2.0 / nt as f64;
            let dt = PI / 2.0 / nt as f64 / sub as f64;
            for k in 0..sub {
                let th = t0 + (k as f64 + 0.5) * dt;
                let h = UnitDir::xyz(th.sin(), 0.0, th.cos()).unwrap();
                mass += ggx_d(h, UnitDir::Z, &m) * th.cos() * th.sin() * dt;
            }
            mass *= 2.0 * PI / np as f64;
            for pi_ in 0..np {
                let e = mass * n as f64;
                let o = counts[ti * np + pi_] as f64;
                chi2 += (o - e) * (o - e) / e;
            }
        }
        // 31 degrees of freedom; the 99.9% quantile is about 61.1.
        assert!(chi2 < 61.1, "chi2 = {chi2}");
    }

    #[test]
    fn half_vector_transform_examples() {
        let n = UnitDir::Z;
        assert_eq!(half_vector_pdf_transform(2.0, n, n).unwrap(), 0.5);
        let h = UnitDir::xyz(0.75f64.sqrt(), 0.0, 0.5).unwrap();
        assert!((half_vector_pdf_transform(3.0, h, n).unwrap() - 1.5).abs() < 1e-12);
        let perp = UnitDir::xyz(1.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            half_vector_pdf_transform(1.0, perp, n),
            Err(Error::DegenerateHalfVector { .. })
        ));
    }

    #[test]
    fn half_vector_density_integrates_over_reflected_domain() {
        // The induced density on w_i carries exactly the mass of D(h) cos_h
        // over half vectors facing w_o.
        let m = Material::new(Rgb::WHITE, 0.0, 0.6);
        let w_o = UnitDir::xyz(0.5, 0.0, 0.75f64.sqrt()).unwrap();
        let n = 1024;
        let mut total = 0.0;
        for i in 0..n {
            // equal-area in z over the full sphere
            let z = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let ph = 2.0 * PI * (j as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let wi = UnitDir::xyz(r * ph.cos(), r * ph.sin(), z).unwrap();
                let Some(h) = UnitDir::new(*wi + *w_o) else { continue };
                if h.z <= 0.0 {
                    continue;
                }
                let q_h = ggx_d(h, UnitDir::Z, &m) * h.z;
                if let Ok(q) = half_vector_pdf_transform(q_h, h, w_o) {
                    total += q * 4.0 * PI / (n * n) as f64;
                }
            }
        }
        let mut expected = 0.0;
        for i in 0..n {
            let z = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let ph = 2.0 * PI * (j as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let h = UnitDir::xyz(r * ph.cos(), r * ph.sin(), z).unwrap();
                if h.dot(*w_o) >= 1e-6 {
                    expected += ggx_d(h, UnitDir::Z, &m) * z * 2.0 * PI / (n * n) as f64;
                }
            }
        }
        assert!(expected > 0.98 && expected <= 1.0 + 1e-3, "{expected}");
        assert!((total - expected).abs() < 2e-3, "{total} vs {expected}");
    }

    #[test]
    fn baseline_samplers_unbiased() {
        let n = UnitDir::Z;
        let f = build_frame(n);
        let m = Material::new(Rgb::new(0.8, 0.6, 0.4), 0.2, 0.5);
        let w_o = UnitDir::xyz(0.3, 0.2, 0.9).unwrap();
        let light = |w: UnitDir| 1.0 + 0.8 * w.x + 0.3 * w.y * w.y;
        let spec = |w: UnitDir| eval_specular(w, w_o, n, &m)[0] * w.z * light(w);
        let diff = |w: UnitDir| eval_diffuse(&m)[0] * w.z * light(w);
        let spec_ref = hemi_quad(512, spec);
        let diff_ref = hemi_quad(512, diff);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let count = 100_000;
        let mut check = |draw: &mut dyn FnMut(&mut ChaCha8Rng) -> DirSample, g: &dyn Fn(UnitDir) -> f64, want: f64| {
            let xs: Vec<f64> = (0..count)
                .map(|_| {
                    let s = draw(&mut rng);
                    if s.valid { g(s.direction) / s.pdf } else { 0.0 }
                })
                .collect();
            let mean = xs.iter().sum::<f64>() / count as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
            let se = (var / count as f64).sqrt();
            assert!((mean - want).abs() < 3.0 * se + 1e-4 * want.abs(), "{mean} vs {want} (se {se})");
        };
        check(&mut |r| sample_ggx(SquarePoint::new(r.gen(), r.gen()), w_o, &f, &m), &spec, spec_ref);
        check(&mut |r| sample_cosine(SquarePoint::new(r.gen(), r.gen()), &f), &diff, diff_ref);
    }
}
