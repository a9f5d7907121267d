//! Image rendering through the Monte Carlo estimators.

use crate::color::Rgb;
use crate::error::Result;
use crate::estimator::{combine, estimate_diffuse, estimate_specular, SampleKey, Sampler, ShadingPoint};
use crate::image::Image;
use crate::parallel::{map_indexed_with, Exec};
use crate::scene::{Camera, Scene};
use crate::train::Model;

/// Variance images are scaled by this factor for visibility.
pub const VARIANCE_SCALE: f64 = 1000.0;

/// Per-pixel result averaged over passes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelResult {
    pub rgb: Rgb,
    pub diffuse: Rgb,
    pub specular: Rgb,
    /// Mean literal variance of the per-pass estimates.
    pub variance: f64,
    pub standard_variance: f64,
    pub specular_variance: f64,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub radiance: Image,
    /// Literal variance times [`VARIANCE_SCALE`] in every channel.
    pub variance: Image,
    pub pixels: Vec<PixelResult>,
}

impl Rendering {
    /// Mean over hit pixels of a per-pixel quantity.
    pub fn mean_over_hits(&self, f: impl Fn(&PixelResult) -> f64) -> f64 {
        let hits: Vec<f64> = self.pixels.iter().filter(|p| p.hit).map(f).collect();
        if hits.is_empty() {
            0.0
        } else {
            hits.iter().sum::<f64>() / hits.len() as f64
        }
    }
}

/// Renders pixel `(x, y)` with `spp` independent passes.
pub fn render_pixel(scene: &Scene, model: &Model, camera: &Camera, sampler: &Sampler, x: usize, y: usize, pixel_id: u64, spp: usize, seed: u64) -> PixelResult {
    let ray = camera.ray(x, y);
    let Some(hit) = scene.geometry.intersect(&ray) else {
        return PixelResult {
            rgb: model.lighting.env.lookup(ray.direction),
            ..Default::default()
        };
    };
    let p = ShadingPoint::new(hit.position, hit.normal, -ray.direction);
    let mat = model.material_at(scene.slots[hit.primitive_id], hit.position);
    let mut out = PixelResult {
        hit: true,
        ..Default::default()
    };
    let inv = 1.0 / spp.max(1) as f64;
    for pass in 0..spp.max(1) {
        let key = SampleKey {
            seed,
            pixel: pixel_id,
            iteration: pass as u64,
        };
        let d = estimate_diffuse(&p, &mat, &scene.geometry, &model.lighting, sampler, key);
        let s = estimate_specular(&p, &mat, &scene.geometry, &model.lighting, sampler, key);
        let e = combine(d, s);
        out.rgb += e.rgb * inv;
        out.diffuse += d.rgb * inv;
        out.specular += s.rgb * inv;
        out.variance += e.variance * inv;
        out.standard_variance += e.standard_variance * inv;
        out.specular_variance += s.variance * inv;
    }
    out
}

/// Renders camera `camera_index`; deterministic in `seed`.
pub fn render(scene: &Scene, model: &Model, camera_index: usize, sampler: &Sampler, spp: usize, seed: u64) -> Result<Rendering> {
    render_with(Exec::DEFAULT, scene, model, camera_index, sampler, spp, seed)
}

/// [`render`] with an explicit execution strategy; the output does not
/// depend on it.
pub fn render_with(exec: Exec, scene: &Scene, model: &Model, camera_index: usize, sampler: &Sampler, spp: usize, seed: u64) -> Result<Rendering> {
    let cam = &scene.cameras[camera_index];
    let offset: usize = scene.cameras[..camera_index].iter().map(|c| c.pixel_count()).sum();
    let pixels = map_indexed_with(exec, cam.pixel_count(), |i| {
        render_pixel(scene, model, cam, sampler, i % cam.width, i / cam.width, (offset + i) as u64, spp, seed)
    });
    let radiance = Image::from_pixels(cam.width, cam.height, pixels.iter().map(|p| p.rgb).collect())?;
    let variance = Image::from_pixels(
        cam.width,
        cam.height,
        pixels.iter().map(|p| Rgb::splat(p.variance * VARIANCE_SCALE)).collect(),
    )?;
    Ok(Rendering { radiance, variance, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::SamplerConfig;
    use crate::scene::SceneConfig;
    use crate::train::ModelConfig;
    use std::path::Path;

    const DIFFUSE: &str = r#"
[envmap]
constant = [1.0, 1.0, 1.0]

[materials.white]
albedo = [0.7, 0.5, 0.3]
metallic = 0.0
roughness = 1.0

[[spheres]]
center = [0.0, 0.0, 0.0]
radius = 0.3
material = "white"

[[cameras]]
position = [0.0, -2.0, 0.0]
look_at = [0.0, 0.0, 0.0]
up = [0.0, 0.0, 1.0]
fov = 20.0
width = 12
height = 12
"#;

    fn load(text: &str) -> (Scene, Model) {
        let cfg = SceneConfig::parse_str(text, Path::new("t.toml")).unwrap();
        let scene = Scene::from_config(&cfg, Path::new(".")).unwrap();
        let model = Model::new(&ModelConfig::default(), &scene, 0);
        (scene, model)
    }

    #[test]
    fn dark_scene_renders_black() {
        let (scene, model) = load(&DIFFUSE.replace("constant = [1.0, 1.0, 1.0]", "constant = [0.0, 0.0, 0.0]"));
        let s = SamplerConfig::predefined(4, 2, 2).bind(None, None).unwrap();
        let r = render(&scene, &model, 0, &s, 2, 1).unwrap();
        assert!(r.radiance.pixels().iter().all(|p| *p == Rgb::BLACK));
        assert!(r.variance.pixels().iter().all(|p| *p == Rgb::BLACK));
    }

    #[test]
    fn constant_light_diffuse_sphere_is_flat() {
        let (scene, model) = load(DIFFUSE);
        let s = SamplerConfig::predefined(16, 8, 8).bind(None, None).unwrap();
        let r = render(&scene, &model, 0, &s, 4, 1).unwrap();
        let hits: Vec<&PixelResult> = r.pixels.iter().filter(|p| p.hit).collect();
        assert!(hits.len() > 20);
        for p in hits {
            for (k, a) in [0.7, 0.5, 0.3].iter().enumerate() {
                assert!((p.diffuse[k] - a).abs() < 1e-12, "{:?}", p.diffuse);
            }
            assert!(p.specular.min_component() > 0.0);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let (scene, model) = load(DIFFUSE);
        let s = SamplerConfig::predefined(4, 2, 2).bind(None, None).unwrap();
        let a = render(&scene, &model, 0, &s, 2, 9).unwrap();
        let b = render(&scene, &model, 0, &s, 2, 9).unwrap();
        assert_eq!(a.radiance.to_pfm_bytes(), b.radiance.to_pfm_bytes());
        assert_eq!(a.variance.to_pfm_bytes(), b.variance.to_pfm_bytes());
        let seq = render_with(Exec::Sequential, &scene, &model, 0, &s, 2, 9).unwrap();
        assert_eq!(seq, a);
        let c = render(&scene, &model, 0, &s, 2, 10).unwrap();
        assert_ne!(a.radiance, c.radiance);
    }
}
