//! Scene description files and the runtime scene built from them.
//!
//! Scenes are TOML documents:
//!
//! ```toml
//! seed = 7
//!
//! [envmap]
//! constant = [1.0, 1.0, 1.0]
//!
//! [materials.red]
//! albedo = [0.8, 0.1, 0.1]
//! metallic = 0.0
//! roughness = 0.4
//!
//! [[spheres]]
//! center = [0.0, 0.0, 0.0]
//! radius = 0.3
//! material = "red"
//!
//! [[cameras]]
//! position = [0.0, -2.0, 0.0]
//! look_at = [0.0, 0.0, 0.0]
//! up = [0.0, 0.0, 1.0]
//! fov = 30.0
//! width = 64
//! height = 64
//! ```
//!
//! A material with `learnable = true` is represented by the learned
//! material field instead of fixed values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::brdf::Material;
use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::geom::{Geometry, Primitive, Ray, UnitDir, Vec3};
use crate::image::Image;
use crate::lighting::{EnvMap, Lobe, DEFAULT_ENV_HEIGHT, DEFAULT_ENV_WIDTH};

pub const MAX_RESOLUTION: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub seed: u64,
    /// Enables the learned indirect light field.
    #[serde(default)]
    pub indirect: bool,
    pub envmap: EnvMapConfig,
    #[serde(default)]
    pub materials: BTreeMap<String, MaterialConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spheres: Vec<SphereConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planes: Vec<PlaneConfig>,
    pub cameras: Vec<CameraConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvMapConfig {
    #[serde(default)]
    pub learnable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<[f64; 3]>,
    /// PFM file, relative to the scene file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Base radiance under procedural lobes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambient: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lobes: Vec<LobeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LobeConfig {
    pub direction: [f64; 3],
    pub color: [f64; 3],
    pub sharpness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    #[serde(default)]
    pub learnable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub albedo: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metallic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roughness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereConfig {
    pub center: [f64; 3],
    pub radius: f64,
    pub material: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneConfig {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub material: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in degrees.
    pub fov: f64,
    pub width: usize,
    pub height: usize,
}

impl SceneConfig {
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: SceneConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.spheres.is_empty() && self.planes.is_empty() {
            return bad("scene needs at least one sphere or plane".into());
        }
        if self.cameras.is_empty() {
            return bad("scene needs at least one camera".into());
        }
        for (name, m) in &self.materials {
            if m.learnable {
                if m.albedo.is_some() || m.metallic.is_some() || m.roughness.is_some() {
                    return bad(format!("materials.{name}: learnable materials take no fixed values"));
                }
                continue;
            }
            let albedo = m.albedo.ok_or_else(|| Error::Validation(format!("materials.{name}.albedo is required")))?;
            if albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("materials.{name}.albedo must lie in [0, 1]"));
            }
            if !(0.0..=1.0).contains(&m.metallic.unwrap_or(0.0)) {
                return bad(format!("materials.{name}.metallic must lie in [0, 1]"));
            }
            let r = m.roughness.ok_or_else(|| Error::Validation(format!("materials.{name}.roughness is required")))?;
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("materials.{name}.roughness must lie in [0, 1]"));
            }
        }
        let check_ref = |kind: &str, i: usize, name: &str| {
            if self.materials.contains_key(name) {
                Ok(())
            } else {
                bad(format!("{kind}[{i}].material references unknown material {name:?}"))
            }
        };
        for (i, s) in self.spheres.iter().enumerate() {
            check_ref("spheres", i, &s.material)?;
            if !(s.radius > 0.0 && s.radius.is_finite()) {
                return bad(format!("spheres[{i}].radius must be positive"));
            }
        }
        for (i, p) in self.planes.iter().enumerate() {
            check_ref("planes", i, &p.material)?;
            if UnitDir::new(Vec3::from_array(p.normal)).is_none() {
                return bad(format!("planes[{i}].normal must be nonzero"));
            }
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if !(c.fov > 0.0 && c.fov < 180.0) {
                return bad(format!("cameras[{i}].fov must lie in (0, 180)"));
            }
            if c.width == 0 || c.height == 0 || c.width * c.height > MAX_RESOLUTION * MAX_RESOLUTION {
                return bad(format!("cameras[{i}] resolution {}x{} is out of range", c.width, c.height));
            }
            Camera::from_config(c).map_err(|e| Error::Validation(format!("cameras[{i}]: {e}")))?;
        }
        let e = &self.envmap;
        let sources = e.constant.is_some() as u8 + e.path.is_some() as u8 + (e.ambient.is_some() || !e.lobes.is_empty()) as u8;
        if sources != 1 {
            return bad("envmap needs exactly one of constant, path, or ambient/lobes".into());
        }
        if let Some(c) = e.constant.or(e.ambient) {
            if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("envmap radiance must be finite and nonnegative".into());
            }
        }
        for (i, l) in e.lobes.iter().enumerate() {
            if UnitDir::new(Vec3::from_array(l.direction)).is_none() || l.color.iter().any(|v| *v < 0.0) || l.sharpness < 0.0 {
                return bad(format!("envmap.lobes[{i}] is invalid"));
            }
        }
        Ok(())
    }
}

pub fn parse_scene(path: &Path) -> Result<SceneConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SceneConfig::parse_str(&text, path)
}

/// Pinhole camera shooting one ray through each pixel center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    forward: UnitDir,
    right: UnitDir,
    up: UnitDir,
    tan_half_fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(position: Vec3, look_at: Vec3, up: Vec3, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let forward = UnitDir::new(look_at - position).ok_or_else(|| Error::Validation("camera looks at its own position".into()))?;
        let right = UnitDir::new(forward.cross(up)).ok_or_else(|| Error::Validation("camera up is parallel to the view direction".into()))?;
        let up = UnitDir::new(right.cross(*forward)).expect("orthogonal unit vectors");
        Ok(Camera {
            position,
            forward,
            right,
            up,
            tan_half_fov: (fov_deg.to_radians() / 2.0).tan(),
            width,
            height,
        })
    }

    pub fn from_config(c: &CameraConfig) -> Result<Self> {
        Self::new(Vec3::from_array(c.position), Vec3::from_array(c.look_at), Vec3::from_array(c.up), c.fov, c.width, c.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through the center of pixel `(x, y)`, `y = 0` at the top.
    pub fn ray(&self, x: usize, y: usize) -> Ray {
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * (x as f64 + 0.5) / self.width as f64 - 1.0) * self.tan_half_fov * aspect;
        let sy = (1.0 - 2.0 * (y as f64 + 0.5) / self.height as f64) * self.tan_half_fov;
        let d = *self.forward + *self.right * sx + *self.up * sy;
        Ray::new(self.position, UnitDir::new(d).expect("nonzero view ray"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaterialSlot {
    Fixed(Material),
    Learned,
}

/// Geometry, material assignment and cameras of a scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub geometry: Geometry,
    /// Material of each primitive, indexed like `geometry.primitives`.
    pub slots: Vec<MaterialSlot>,
    pub cameras: Vec<Camera>,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub env: EnvMap,
    pub env_learnable: bool,
    pub indirect: bool,
    pub seed: u64,
}

impl Scene {
    /// Builds the runtime scene; relative envmap paths resolve against
    /// `base_dir`.
    pub fn from_config(cfg: &SceneConfig, base_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let slot = |name: &str| {
            let m = &cfg.materials[name];
            if m.learnable {
                MaterialSlot::Learned
            } else {
                MaterialSlot::Fixed(Material::new(
                    Rgb(m.albedo.expect("validated")),
                    m.metallic.unwrap_or(0.0),
                    m.roughness.expect("validated"),
                ))
            }
        };
        let mut prims = Vec::new();
        let mut slots = Vec::new();
        let (mut lo, mut hi) = (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY));
        for s in &cfg.spheres {
            let c = Vec3::from_array(s.center);
            prims.push(Primitive::Sphere { center: c, radius: s.radius });
            slots.push(slot(&s.material));
            lo = lo.min(c - Vec3::splat(s.radius));
            hi = hi.max(c + Vec3::splat(s.radius));
        }
        for p in &cfg.planes {
            let point = Vec3::from_array(p.point);
            prims.push(Primitive::Plane {
                point,
                normal: UnitDir::new(Vec3::from_array(p.normal)).expect("validated"),
            });
            slots.push(slot(&p.material));
            lo = lo.min(point);
            hi = hi.max(point);
        }
        // Pad so that flat or point-like extents still get a usable box.
        let pad = ((hi - lo).max_component() * 0.1).max(0.1);
        let (bbox_min, bbox_max) = (lo - Vec3::splat(pad), hi + Vec3::splat(pad));

        let e = &cfg.envmap;
        let (w, h) = (e.width.unwrap_or(DEFAULT_ENV_WIDTH), e.height.unwrap_or(DEFAULT_ENV_HEIGHT));
        let env = if let Some(c) = e.constant {
            EnvMap::constant(w, h, Rgb(c))?
        } else if let Some(p) = &e.path {
            let full = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            let img = Image::read_pfm(&full)?;
            let texels = img.pixels().iter().flat_map(|c| c.0).collect();
            EnvMap::from_texels(img.width(), img.height(), texels)?
        } else {
            let lobes: Vec<Lobe> = e
                .lobes
                .iter()
                .map(|l| Lobe {
                    direction: UnitDir::new(Vec3::from_array(l.direction)).expect("validated"),
                    color: Rgb(l.color),
                    sharpness: l.sharpness,
                })
                .collect();
            EnvMap::from_lobes(w, h, Rgb(e.ambient.unwrap_or([0.0; 3])), &lobes)?
        };

        Ok(Scene {
            geometry: Geometry::new(prims),
            slots,
            cameras: cfg.cameras.iter().map(Camera::from_config).collect::<Result<_>>()?,
            bbox_min,
            bbox_max,
            env,
            env_learnable: e.learnable,
            indirect: cfg.indirect,
            seed: cfg.seed,
        })
    }

    pub fn load(path: &Path) -> Result<(SceneConfig, Scene)> {
        let cfg = parse_scene(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let scene = Scene::from_config(&cfg, base)?;
        Ok((cfg, scene))
    }

    pub fn has_learned_material(&self) -> bool {
        self.slots.iter().any(|s| matches!(s, MaterialSlot::Learned))
    }
}

/// Writes an environment map as a PFM image (row 0 at the top).
pub fn env_to_image(env: &EnvMap) -> Image {
    let pixels = env.texels().chunks_exact(3).map(|c| Rgb::new(c[0], c[1], c[2])).collect();
    Image::from_pixels(env.width(), env.height(), pixels).expect("texel count matches")
}
