//! Monte Carlo estimators for the diffuse and specular reflection integrals.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brdf::{eval_diffuse, eval_specular, pdf_cosine, pdf_ggx, sample_cosine, sample_ggx, Material};
use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::flow::FlowSnapshot;
use crate::geom::{build_frame, Frame, Geometry, SquarePoint, UnitDir, Vec3};
use crate::lighting::{incident_radiance, Lighting};
use crate::rng::{self, stratum};

/// Pdfs below this are raised to it so that `I / q` stays finite.
pub const MIN_PDF: f64 = 1e-300;

/// Surface point being shaded, with the outgoing direction `w_o`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadingPoint {
    pub position: Vec3,
    pub normal: UnitDir,
    pub w_o: UnitDir,
    pub frame: Frame,
}

impl ShadingPoint {
    pub fn new(position: Vec3, normal: UnitDir, w_o: UnitDir) -> Self {
        ShadingPoint {
            position,
            normal,
            w_o,
            frame: build_frame(normal),
        }
    }

    pub fn incident(&self, w_i: UnitDir, geometry: &Geometry, lighting: &Lighting) -> Rgb {
        incident_radiance(w_i, self.position, self.normal, geometry, lighting)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecularSampler {
    Ggx,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffuseSampler {
    Cosine,
    /// Flow and cosine samples combined with the balance heuristic.
    FlowMis,
}

/// Which samplers to use and how many samples each draws.
///
/// With the cosine diffuse sampler all `n_diffuse_flow + n_diffuse_cos`
/// samples are cosine samples, so both settings spend the same budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub specular: SpecularSampler,
    pub diffuse: DiffuseSampler,
    pub n_specular: usize,
    pub n_diffuse_flow: usize,
    pub n_diffuse_cos: usize,
}

impl SamplerConfig {
    pub fn predefined(n_specular: usize, n_diffuse_flow: usize, n_diffuse_cos: usize) -> Self {
        SamplerConfig {
            specular: SpecularSampler::Ggx,
            diffuse: DiffuseSampler::Cosine,
            n_specular,
            n_diffuse_flow,
            n_diffuse_cos,
        }
    }

    pub fn flow(n_specular: usize, n_diffuse_flow: usize, n_diffuse_cos: usize) -> Self {
        SamplerConfig {
            specular: SpecularSampler::Flow,
            diffuse: DiffuseSampler::FlowMis,
            n_specular,
            n_diffuse_flow,
            n_diffuse_cos,
        }
    }

    pub fn n_diffuse(&self) -> usize {
        self.n_diffuse_flow + self.n_diffuse_cos
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_specular == 0 || self.n_diffuse_flow == 0 || self.n_diffuse_cos == 0 {
            return Err(Error::Validation("sample counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn uses_flows(&self) -> bool {
        self.specular == SpecularSampler::Flow || self.diffuse == DiffuseSampler::FlowMis
    }

    /// Attaches the flow snapshots the configuration needs.
    pub fn bind<'a>(&self, specular: Option<&'a FlowSnapshot>, diffuse: Option<&'a FlowSnapshot>) -> Result<Sampler<'a>> {
        self.validate()?;
        let specular = match self.specular {
            SpecularSampler::Ggx => SpecularStrategy::Ggx,
            SpecularSampler::Flow => SpecularStrategy::Flow(specular.ok_or_else(|| Error::Validation("specular flow sampler requested but no flow is available".into()))?),
        };
        let diffuse = match self.diffuse {
            DiffuseSampler::Cosine => DiffuseStrategy::Cosine,
            DiffuseSampler::FlowMis => DiffuseStrategy::FlowMis(diffuse.ok_or_else(|| Error::Validation("diffuse flow sampler requested but no flow is available".into()))?),
        };
        Ok(Sampler {
            specular,
            diffuse,
            n_specular: self.n_specular,
            n_diffuse_flow: self.n_diffuse_flow,
            n_diffuse_cos: self.n_diffuse_cos,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SpecularStrategy<'a> {
    Ggx,
    Flow(&'a FlowSnapshot),
}

#[derive(Debug, Clone, Copy)]
pub enum DiffuseStrategy<'a> {
    Cosine,
    FlowMis(&'a FlowSnapshot),
}

/// A [`SamplerConfig`] with its flows attached.
#[derive(Debug, Clone, Copy)]
pub struct Sampler<'a> {
    pub specular: SpecularStrategy<'a>,
    pub diffuse: DiffuseStrategy<'a>,
    pub n_specular: usize,
    pub n_diffuse_flow: usize,
    pub n_diffuse_cos: usize,
}

/// Identifies the random streams of one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleKey {
    pub seed: u64,
    pub pixel: u64,
    pub iteration: u64,
}

impl SampleKey {
    pub fn stream(&self, stratum: u64) -> rng::StreamRng {
        rng::stream(self.seed, self.pixel, self.iteration, stratum)
    }
}

/// A drawn direction with the effective density of the whole strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub direction: UnitDir,
    pub pdf: f64,
    pub valid: bool,
    pub from_flow: bool,
}

fn square(rng: &mut impl Rng) -> SquarePoint {
    SquarePoint::new(rng.gen(), rng.gen())
}

/// Balance-heuristic weights of a sample under two strategies drawing
/// `n_a` and `n_b` samples.
pub fn balance_weights(n_a: usize, q_a: f64, n_b: usize, q_b: f64) -> (f64, f64) {
    let a = n_a as f64 * q_a;
    let b = n_b as f64 * q_b;
    if a + b <= 0.0 {
        return (0.5, 0.5);
    }
    (a / (a + b), b / (a + b))
}

pub fn draw_specular(p: &ShadingPoint, mat: &Material, sampler: &Sampler, key: SampleKey) -> Vec<SampleRecord> {
    let mut rng = key.stream(stratum::SPECULAR);
    match sampler.specular {
        SpecularStrategy::Ggx => (0..sampler.n_specular)
            .map(|_| {
                let s = sample_ggx(square(&mut rng), p.w_o, &p.frame, mat);
                SampleRecord {
                    direction: s.direction,
                    pdf: s.pdf.max(MIN_PDF),
                    valid: s.valid,
                    from_flow: false,
                }
            })
            .collect(),
        SpecularStrategy::Flow(snap) => {
            let c = snap.condition(p.position, p.normal, p.w_o);
            (0..sampler.n_specular)
                .map(|_| {
                    let s = snap.flow().sample(&c, square(&mut rng), &p.frame, p.w_o);
                    SampleRecord {
                        direction: s.direction,
                        pdf: s.pdf.max(MIN_PDF),
                        valid: s.valid,
                        from_flow: true,
                    }
                })
                .collect()
        }
    }
}

/// Diffuse samples. Under MIS each record's pdf is the sample-count
/// weighted mixture `(N_f q_f + N_c q_c) / N`, which makes `mean(I / pdf)`
/// equal to the balance-heuristic combination of both strata.
pub fn draw_diffuse(p: &ShadingPoint, sampler: &Sampler, key: SampleKey) -> Vec<SampleRecord> {
    let cosine = |rng: &mut rng::StreamRng| sample_cosine(square(rng), &p.frame);
    match sampler.diffuse {
        DiffuseStrategy::Cosine => {
            let mut rng = key.stream(stratum::DIFFUSE_COSINE);
            (0..sampler.n_diffuse_flow + sampler.n_diffuse_cos)
                .map(|_| {
                    let s = cosine(&mut rng);
                    SampleRecord {
                        direction: s.direction,
                        pdf: s.pdf.max(MIN_PDF),
                        valid: s.valid,
                        from_flow: false,
                    }
                })
                .collect()
        }
        DiffuseStrategy::FlowMis(snap) => {
            let c = snap.condition(p.position, p.normal, p.w_o);
            let (nf, nc) = (sampler.n_diffuse_flow, sampler.n_diffuse_cos);
            let n = (nf + nc) as f64;
            let mix = |q_f: f64, q_c: f64| ((nf as f64 * q_f + nc as f64 * q_c) / n).max(MIN_PDF);
            let mut out = Vec::with_capacity(nf + nc);
            let mut rng = key.stream(stratum::DIFFUSE_FLOW);
            for _ in 0..nf {
                let s = snap.flow().sample(&c, square(&mut rng), &p.frame, p.w_o);
                out.push(SampleRecord {
                    direction: s.direction,
                    pdf: mix(s.pdf, pdf_cosine(s.direction, p.normal)),
                    valid: s.valid,
                    from_flow: true,
                });
            }
            let mut rng = key.stream(stratum::DIFFUSE_COSINE);
            for _ in 0..nc {
                let s = cosine(&mut rng);
                // Directions the flow cannot produce have zero flow density.
                let q_f = snap.flow().pdf(&c, s.direction, &p.frame, p.w_o).unwrap_or(0.0);
                out.push(SampleRecord {
                    direction: s.direction,
                    pdf: mix(q_f, s.pdf),
                    valid: s.valid,
                    from_flow: false,
                });
            }
            out
        }
    }
}

/// Density with which the configured specular strategy produces `w_i`.
pub fn specular_pdf(p: &ShadingPoint, mat: &Material, sampler: &Sampler, w_i: UnitDir) -> f64 {
    match sampler.specular {
        SpecularStrategy::Ggx => pdf_ggx(w_i, p.w_o, p.normal, mat),
        SpecularStrategy::Flow(snap) => {
            let c = snap.condition(p.position, p.normal, p.w_o);
            snap.flow().pdf(&c, w_i, &p.frame, p.w_o).unwrap_or(0.0)
        }
    }
}

/// Both variance measures of an importance-sampled estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VarianceStats {
    /// `1/(N(N-1)) * sum (I_i - mean(I))^2 / q_i`.
    pub literal: f64,
    /// Variance of the estimator `mean(I_i / q_i)`:
    /// `1/(N(N-1)) * sum (I_i/q_i - mean(I/q))^2`.
    pub standard: f64,
}

/// Variance measures of `(I_i, q_i)` pairs, `I` being scalar (luminance).
pub fn sample_variance(samples: &[(f64, f64)]) -> Result<VarianceStats> {
    let triples: Vec<(f64, f64, f64)> = samples.iter().map(|&(i, q)| (i, q, i / q)).collect();
    sample_variance_weighted(&triples)
}

/// Like [`sample_variance`] on `(I_i, q_i, I_i/q_i)` with the ratio given
/// by the caller, so samplers that cancel `q` analytically keep exact
/// ratios. Deviations are taken from the first sample, which makes equal
/// inputs give exactly zero.
pub fn sample_variance_weighted(samples: &[(f64, f64, f64)]) -> Result<VarianceStats> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if let Some((_, q, _)) = samples.iter().find(|(_, q, _)| !(*q > 0.0)) {
        return Err(Error::Validation(format!("sample pdf must be positive, got {q}")));
    }
    let nf = n as f64;
    let (i0, _, r0) = samples[0];
    let shift_i = samples.iter().map(|s| s.0 - i0).sum::<f64>() / nf;
    let shift_r = samples.iter().map(|s| s.2 - r0).sum::<f64>() / nf;
    let norm = 1.0 / (nf * (nf - 1.0));
    let literal = norm * samples.iter().map(|(i, q, _)| ((i - i0) - shift_i).powi(2) / q).sum::<f64>();
    let standard = norm * samples.iter().map(|(_, _, r)| ((r - r0) - shift_r).powi(2)).sum::<f64>();
    Ok(VarianceStats { literal, standard })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RadianceEstimate {
    pub rgb: Rgb,
    /// Literal variance measure on luminance, see [`VarianceStats`].
    pub variance: f64,
    pub standard_variance: f64,
    pub n_samples: usize,
}

/// `mean(I / pdf)` over the records, `I = integrand(w)` for valid records
/// and zero otherwise. Variances are zero for fewer than two samples.
pub fn estimate_records(records: &[SampleRecord], mut integrand: impl FnMut(UnitDir) -> Rgb) -> RadianceEstimate {
    let values: Vec<Rgb> = records
        .iter()
        .map(|r| if r.valid { integrand(r.direction) } else { Rgb::BLACK })
        .collect();
    estimate_values(records, &values)
}

/// Like [`estimate_records`] with the integrand values given per record.
pub fn estimate_values(records: &[SampleRecord], values: &[Rgb]) -> RadianceEstimate {
    let ratios: Vec<Rgb> = records.iter().zip(values).map(|(r, i)| *i * (1.0 / r.pdf)).collect();
    estimate_weighted(records, values, &ratios)
}

/// Estimate from integrand values and their ratios `I / pdf`.
pub fn estimate_weighted(records: &[SampleRecord], values: &[Rgb], ratios: &[Rgb]) -> RadianceEstimate {
    assert_eq!(records.len(), values.len());
    assert_eq!(records.len(), ratios.len());
    let n = records.len();
    if n == 0 {
        return RadianceEstimate::default();
    }
    let mut sum = Rgb::BLACK;
    let mut lum = Vec::with_capacity(n);
    for ((r, i), w) in records.iter().zip(values).zip(ratios) {
        let (i, w) = if r.valid { (*i, *w) } else { (Rgb::BLACK, Rgb::BLACK) };
        sum += w;
        lum.push((i.luminance(), r.pdf, w.luminance()));
    }
    let v = sample_variance_weighted(&lum).unwrap_or_default();
    RadianceEstimate {
        rgb: sum * (1.0 / n as f64),
        variance: v.literal,
        standard_variance: v.standard,
        n_samples: n,
    }
}

/// `(1-m) a/pi L(w_i) (w_i . n)`.
pub fn diffuse_integrand(p: &ShadingPoint, mat: &Material, w_i: UnitDir, radiance: Rgb) -> Rgb {
    let cos = w_i.dot(*p.normal);
    if cos <= 0.0 {
        return Rgb::BLACK;
    }
    eval_diffuse(mat) * radiance * cos
}

/// `f_s(w_i, w_o) L(w_i) (w_i . n)`.
pub fn specular_integrand(p: &ShadingPoint, mat: &Material, w_i: UnitDir, radiance: Rgb) -> Rgb {
    let cos = w_i.dot(*p.normal);
    if cos <= 0.0 {
        return Rgb::BLACK;
    }
    eval_specular(w_i, p.w_o, p.normal, mat) * radiance * cos
}

pub fn estimate_diffuse(
    p: &ShadingPoint,
    mat: &Material,
    geometry: &Geometry,
    lighting: &Lighting,
    sampler: &Sampler,
    key: SampleKey,
) -> RadianceEstimate {
    let records = draw_diffuse(p, sampler, key);
    if mat.metallic >= 1.0 {
        return RadianceEstimate {
            n_samples: records.len(),
            ..Default::default()
        };
    }
    if let DiffuseStrategy::Cosine = sampler.diffuse {
        // The cosine density cancels against the integrand's cosine.
        let kd = mat.albedo * (1.0 - mat.metallic);
        let ratios: Vec<Rgb> = records
            .iter()
            .map(|r| if r.valid { kd * p.incident(r.direction, geometry, lighting) } else { Rgb::BLACK })
            .collect();
        let values: Vec<Rgb> = records
            .iter()
            .zip(&ratios)
            .map(|(r, w)| *w * (r.direction.dot(*p.normal).max(0.0) / PI))
            .collect();
        return estimate_weighted(&records, &values, &ratios);
    }
    estimate_records(&records, |w| diffuse_integrand(p, mat, w, p.incident(w, geometry, lighting)))
}

pub fn estimate_specular(
    p: &ShadingPoint,
    mat: &Material,
    geometry: &Geometry,
    lighting: &Lighting,
    sampler: &Sampler,
    key: SampleKey,
) -> RadianceEstimate {
    let records = draw_specular(p, mat, sampler, key);
    estimate_records(&records, |w| specular_integrand(p, mat, w, p.incident(w, geometry, lighting)))
}

/// Sum of independent diffuse and specular estimates.
pub fn combine(diffuse: RadianceEstimate, specular: RadianceEstimate) -> RadianceEstimate {
    RadianceEstimate {
        rgb: diffuse.rgb + specular.rgb,
        variance: diffuse.variance + specular.variance,
        standard_variance: diffuse.standard_variance + specular.standard_variance,
        n_samples: diffuse.n_samples + specular.n_samples,
    }
}

/// Outgoing radiance estimate at `p`.
pub fn shade(
    p: &ShadingPoint,
    mat: &Material,
    geometry: &Geometry,
    lighting: &Lighting,
    sampler: &Sampler,
    key: SampleKey,
) -> RadianceEstimate {
    combine(
        estimate_diffuse(p, mat, geometry, lighting, sampler, key),
        estimate_specular(p, mat, geometry, lighting, sampler, key),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brdf::fresnel_schlick;
    use crate::flow::{FlowConfig, FlowDomain, NormalizingFlow};
    use crate::geom::{reflect, Primitive};
    use crate::lighting::{EnvMap, IndirectField, Lobe};
    use crate::tensor::VmGrid;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn lighting(env: EnvMap) -> Lighting {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Lighting {
            env,
            indirect: IndirectField::new(16, false, &mut rng),
        }
    }

    fn lobe_env() -> EnvMap {
        EnvMap::from_lobes(
            64,
            32,
            Rgb::splat(0.2),
            &[
                Lobe {
                    direction: UnitDir::xyz(0.3, -0.2, 1.0).unwrap(),
                    color: Rgb::new(4.0, 3.0, 2.0),
                    sharpness: 12.0,
                },
                Lobe {
                    direction: UnitDir::xyz(-1.0, 0.4, 0.2).unwrap(),
                    color: Rgb::new(0.5, 1.0, 2.0),
                    sharpness: 4.0,
                },
            ],
        )
        .unwrap()
    }

    /// Unit sphere on a ground plane, shaded on its upper side so the plane
    /// occludes part of the hemisphere.
    fn scene() -> (Geometry, ShadingPoint) {
        let geometry = Geometry::new(vec![
            Primitive::Sphere { center: Vec3::ZERO, radius: 1.0 },
            Primitive::Plane {
                point: Vec3::new(0.0, 0.0, -1.0),
                normal: UnitDir::Z,
            },
        ]);
        let n = UnitDir::xyz(0.8, 0.0, 0.3).unwrap();
        let w_o = UnitDir::xyz(0.5, -0.6, 0.4).unwrap();
        (geometry, ShadingPoint::new(*n, n, w_o))
    }

    /// Midpoint quadrature over the hemisphere of `n` in `(cos, phi)`.
    fn quadrature(p: &ShadingPoint, res: usize, f: impl Fn(UnitDir) -> Rgb) -> Rgb {
        let mut sum = Rgb::BLACK;
        let d = 1.0 / res as f64;
        for i in 0..res {
            let z = (i as f64 + 0.5) * d;
            let r = (1.0 - z * z).sqrt();
            for j in 0..res {
                let phi = 2.0 * PI * (j as f64 + 0.5) * d;
                let w = UnitDir::new_unchecked(p.frame.to_world(Vec3::new(r * phi.cos(), r * phi.sin(), z)));
                sum += f(w);
            }
        }
        sum * (2.0 * PI * d * d)
    }

    fn perturbed_flow(domain: FlowDomain, seed: u64) -> FlowSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = VmGrid::new(4, 8, Vec3::splat(-2.0), Vec3::splat(2.0), 0.3, &mut rng);
        let mut flow = NormalizingFlow::new(domain, grid.feature_dim() + 3, &FlowConfig::default(), &mut rng);
        let mut params = flow.params_flat();
        for v in params.iter_mut() {
            *v += 0.15 * (rng.gen::<f64>() - 0.5);
        }
        flow.set_params_flat(&params);
        FlowSnapshot::new(&flow, &grid, 0)
    }

    fn key(i: u64) -> SampleKey {
        SampleKey {
            seed: 11,
            pixel: 3,
            iteration: i,
        }
    }

    /// Mean and standard error of 100 independent estimates.
    fn mc_mean(run: impl Fn(SampleKey) -> RadianceEstimate) -> (Rgb, Rgb) {
        let runs: Vec<Rgb> = (0..100).map(|i| run(key(i)).rgb).collect();
        let n = runs.len() as f64;
        let mean = runs.iter().fold(Rgb::BLACK, |a, r| a + *r) * (1.0 / n);
        let var = runs.iter().fold(Rgb::BLACK, |a, r| a + (*r - mean) * (*r - mean)) * (1.0 / (n - 1.0));
        (mean, var.map(|v| (v / n).sqrt()))
    }

    fn assert_within_3se(name: &str, mean: Rgb, se: Rgb, reference: Rgb) {
        for k in 0..3 {
            let tol = 3.0 * se[k] + 1e-9 * reference[k].abs();
            assert!((mean[k] - reference[k]).abs() <= tol, "{name} channel {k}: mean {} ref {} se {}", mean[k], reference[k], se[k]);
        }
    }

    #[test]
    fn cosine_sampling_constant_light_is_exact() {
        let env = EnvMap::constant(8, 4, Rgb::splat(1.5)).unwrap();
        let l = lighting(env);
        let geometry = Geometry::new(vec![]);
        let p = ShadingPoint::new(Vec3::ZERO, UnitDir::Z, UnitDir::xyz(0.2, 0.1, 1.0).unwrap());
        let mat = Material::new(Rgb::new(0.8, 0.5, 0.2), 0.0, 0.5);
        let s = SamplerConfig::predefined(4, 8, 8).bind(None, None).unwrap();
        let e = estimate_diffuse(&p, &mat, &geometry, &l, &s, key(0));
        for k in 0..3 {
            assert!((e.rgb[k] - mat.albedo[k] * 1.5).abs() < 1e-12);
        }
        assert_eq!(e.standard_variance, 0.0);
        assert_eq!(e.n_samples, 16);
    }

    #[test]
    fn metallic_surface_has_no_diffuse() {
        let l = lighting(lobe_env());
        let (geometry, p) = scene();
        let mat = Material::new(Rgb::splat(0.7), 1.0, 0.3);
        let s = SamplerConfig::predefined(4, 8, 8).bind(None, None).unwrap();
        let e = estimate_diffuse(&p, &mat, &geometry, &l, &s, key(0));
        assert_eq!(e.rgb, Rgb::BLACK);
        assert_eq!(e.variance, 0.0);
    }

    #[test]
    fn dark_scene_gives_zero() {
        let l = lighting(EnvMap::constant(8, 4, Rgb::BLACK).unwrap());
        let (geometry, p) = scene();
        let mat = Material::new(Rgb::splat(0.7), 0.3, 0.3);
        let s = SamplerConfig::predefined(8, 8, 8).bind(None, None).unwrap();
        let e = shade(&p, &mat, &geometry, &l, &s, key(0));
        assert_eq!(e.rgb, Rgb::BLACK);
        assert_eq!(e.variance, 0.0);
    }

    #[test]
    fn near_mirror_matches_reflected_lookup() {
        let env = EnvMap::from_fn(128, 64, |w| Rgb::new(1.0 + 0.5 * w.z, 1.0 + 0.3 * w.x, 1.2)).unwrap();
        let l = lighting(env);
        let geometry = Geometry::new(vec![]);
        let n = UnitDir::Z;
        let w_o = UnitDir::xyz(0.4, 0.1, 1.0).unwrap();
        let p = ShadingPoint::new(Vec3::ZERO, n, w_o);
        let mat = Material::new(Rgb::splat(0.9), 1.0, 0.01);
        let s = SamplerConfig::predefined(64, 1, 1).bind(None, None).unwrap();
        let e = estimate_specular(&p, &mat, &geometry, &l, &s, key(0));
        let expect = fresnel_schlick(w_o.dot(*n), mat.f0()) * l.env.lookup(reflect(w_o, n));
        for k in 0..3 {
            assert!((e.rgb[k] / expect[k] - 1.0).abs() < 0.1, "{:?} vs {:?}", e.rgb, expect);
        }
    }

    #[test]
    fn estimators_are_unbiased_against_quadrature() {
        let l = lighting(lobe_env());
        let (geometry, p) = scene();
        let mat = Material::new(Rgb::new(0.6, 0.4, 0.3), 0.4, 0.35);
        let diff_ref = quadrature(&p, 512, |w| diffuse_integrand(&p, &mat, w, p.incident(w, &geometry, &l)));
        let spec_ref = quadrature(&p, 512, |w| specular_integrand(&p, &mat, w, p.incident(w, &geometry, &l)));

        let spec_flow = perturbed_flow(FlowDomain::HalfVector, 1);
        let inc_flow = perturbed_flow(FlowDomain::Incident, 2);
        let configs = [
            ("predefined", SamplerConfig::predefined(16, 8, 16), &spec_flow),
            ("flow half", SamplerConfig::flow(16, 8, 16), &spec_flow),
            ("flow incident", SamplerConfig::flow(16, 8, 16), &inc_flow),
        ];
        for (name, cfg, spec) in configs {
            let s = cfg.bind(Some(spec), Some(&inc_flow)).unwrap();
            let (m, se) = mc_mean(|k| estimate_diffuse(&p, &mat, &geometry, &l, &s, k));
            assert_within_3se(&format!("{name} diffuse"), m, se, diff_ref);
            let (m, se) = mc_mean(|k| estimate_specular(&p, &mat, &geometry, &l, &s, k));
            assert_within_3se(&format!("{name} specular"), m, se, spec_ref);
            let (m, se) = mc_mean(|k| shade(&p, &mat, &geometry, &l, &s, k));
            assert_within_3se(&format!("{name} combined"), m, se, diff_ref + spec_ref);
        }
    }

    #[test]
    fn specular_pdf_matches_recorded_density() {
        let (_, p) = scene();
        let mat = Material::new(Rgb::splat(0.5), 0.5, 0.4);
        let spec_flow = perturbed_flow(FlowDomain::HalfVector, 3);
        for cfg in [SamplerConfig::predefined(32, 1, 1), SamplerConfig::flow(32, 1, 1)] {
            let s = cfg.bind(Some(&spec_flow), Some(&spec_flow)).unwrap();
            for r in draw_specular(&p, &mat, &s, key(5)).iter().filter(|r| r.valid) {
                let q = specular_pdf(&p, &mat, &s, r.direction);
                assert!((q / r.pdf - 1.0).abs() < 1e-6, "{q} vs {}", r.pdf);
            }
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let l = lighting(lobe_env());
        let (geometry, p) = scene();
        let mat = Material::new(Rgb::splat(0.5), 0.2, 0.4);
        let s = SamplerConfig::predefined(8, 4, 4).bind(None, None).unwrap();
        let a = shade(&p, &mat, &geometry, &l, &s, key(1));
        assert_eq!(a, shade(&p, &mat, &geometry, &l, &s, key(1)));
        assert_ne!(a, shade(&p, &mat, &geometry, &l, &s, key(2)));
    }

    #[test]
    fn binding_requires_flows() {
        let cfg = SamplerConfig::flow(4, 4, 4);
        assert!(matches!(cfg.bind(None, None), Err(Error::Validation(_))));
        assert!(matches!(SamplerConfig::predefined(0, 1, 1).bind(None, None), Err(Error::Validation(_))));
    }

    #[test]
    fn variance_examples() {
        assert_eq!(sample_variance(&[(0.3, 1.0), (0.3, 2.0), (0.3, 0.5)]).unwrap().literal, 0.0);
        let v = sample_variance(&[(0.0, 1.0), (2.0, 1.0)]).unwrap();
        assert!((v.literal - 1.0).abs() < 1e-15);
        assert!((v.standard - 1.0).abs() < 1e-15);
        // q proportional to I: every ratio equals the integral
        let v = sample_variance(&[(0.2, 0.1), (1.0, 0.5), (3.0, 1.5)]).unwrap();
        assert!(v.standard < 1e-28);
        assert!(v.literal > 0.0);
        assert!(matches!(sample_variance(&[(1.0, 1.0)]), Err(Error::InsufficientSamples { needed: 2, got: 1 })));
        assert!(sample_variance(&[(1.0, 1.0), (1.0, 0.0)]).is_err());
    }

    #[test]
    fn combine_adds_components() {
        let a = RadianceEstimate {
            rgb: Rgb::new(1.0, 0.0, 0.0),
            variance: 0.1,
            standard_variance: 0.2,
            n_samples: 3,
        };
        let c = combine(a, RadianceEstimate::default());
        assert_eq!(c, a);
        let b = RadianceEstimate {
            rgb: Rgb::new(0.0, 2.0, 0.0),
            variance: 0.3,
            standard_variance: 0.4,
            n_samples: 4,
        };
        let c = combine(a, b);
        assert_eq!(c.rgb, Rgb::new(1.0, 2.0, 0.0));
        assert!((c.variance - 0.4).abs() < 1e-15);
        assert_eq!(c.n_samples, 7);
    }

    proptest! {
        #[test]
        fn balance_weights_sum_to_one(na in 1usize..600, nb in 1usize..600, qa in 0.0f64..50.0, qb in 1e-6f64..50.0) {
            let (a, b) = balance_weights(na, qa, nb, qb);
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert!(a >= 0.0 && b >= 0.0);
        }

        #[test]
        fn variance_is_nonnegative(s in prop::collection::vec((0.0f64..10.0, 1e-3f64..10.0), 2..40)) {
            let v = sample_variance(&s).unwrap();
            prop_assert!(v.literal >= 0.0 && v.standard >= 0.0);
        }
    }
}
