//! Vector math, shading frames, square/hemisphere warps and analytic
//! ray-primitive intersection.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Deref, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Open-interval clamp for points on the unit square.
pub const SQUARE_EPS: f64 = 1e-6;

/// Offset applied along the surface normal before tracing shadow rays.
pub const SHADOW_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn length_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn length(self) -> f64 {
        self.length_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub const fn splat(v: f64) -> Self {
        Vec3::new(v, v, v)
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn max_component(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn max_abs_diff(self, o: Vec3) -> f64 {
        (self.x - o.x)
            .abs()
            .max((self.y - o.y).abs())
            .max((self.z - o.z).abs())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A unit-length direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec3", try_from = "Vec3")]
pub struct UnitDir(Vec3);

impl UnitDir {
    pub const Z: UnitDir = UnitDir(Vec3::new(0.0, 0.0, 1.0));

    /// Normalizes `v`. Returns `None` for zero or non-finite input.
    pub fn new(v: Vec3) -> Option<UnitDir> {
        let len = v.length();
        if len > 0.0 && len.is_finite() {
            Some(UnitDir(v / len))
        } else {
            None
        }
    }

    /// Wraps a vector the caller guarantees to be unit length.
    pub fn new_unchecked(v: Vec3) -> UnitDir {
        debug_assert!((v.length() - 1.0).abs() < 1e-6, "not unit: {v:?}");
        UnitDir(v)
    }

    pub fn xyz(x: f64, y: f64, z: f64) -> Option<UnitDir> {
        UnitDir::new(Vec3::new(x, y, z))
    }

    pub fn vec(self) -> Vec3 {
        self.0
    }
}

impl Deref for UnitDir {
    type Target = Vec3;
    fn deref(&self) -> &Vec3 {
        &self.0
    }
}

impl From<UnitDir> for Vec3 {
    fn from(d: UnitDir) -> Vec3 {
        d.0
    }
}

impl TryFrom<Vec3> for UnitDir {
    type Error = String;
    fn try_from(v: Vec3) -> std::result::Result<Self, String> {
        UnitDir::new(v).ok_or_else(|| format!("cannot normalize {v:?}"))
    }
}

impl Neg for UnitDir {
    type Output = UnitDir;
    fn neg(self) -> UnitDir {
        UnitDir(-self.0)
    }
}

/// Orthonormal right-handed shading frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub tangent: UnitDir,
    pub bitangent: UnitDir,
    pub normal: UnitDir,
}

impl Frame {
    pub fn to_local(&self, v: Vec3) -> Vec3 {
        Vec3::new(v.dot(*self.tangent), v.dot(*self.bitangent), v.dot(*self.normal))
    }

    pub fn to_world(&self, v: Vec3) -> Vec3 {
        *self.tangent * v.x + *self.bitangent * v.y + *self.normal * v.z
    }
}

/// Builds an orthonormal basis around `n` without a branch on the pole
/// (Duff et al., "Building an Orthonormal Basis, Revisited").
pub fn build_frame(n: UnitDir) -> Frame {
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let t = Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let bt = Vec3::new(b, sign + n.y * n.y * a, -n.y);
    Frame {
        tangent: UnitDir::new_unchecked(t),
        bitangent: UnitDir::new_unchecked(bt),
        normal: n,
    }
}

/// Mirror reflection of `w_o` about `n`.
pub fn reflect(w_o: UnitDir, n: UnitDir) -> UnitDir {
    let v = *n * (2.0 * w_o.dot(*n)) - *w_o;
    // Renormalize to stop drift from accumulating in chained reflections.
    UnitDir::new(v).unwrap_or(n)
}

/// A point in the open unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquarePoint {
    pub u1: f64,
    pub u2: f64,
}

impl SquarePoint {
    /// Clamps both coordinates into `(SQUARE_EPS, 1 - SQUARE_EPS)`.
    pub fn new(u1: f64, u2: f64) -> Self {
        SquarePoint {
            u1: clamp_open(u1),
            u2: clamp_open(u2),
        }
    }

    pub fn coord(&self, dim: usize) -> f64 {
        if dim == 0 {
            self.u1
        } else {
            self.u2
        }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.u1, self.u2]
    }
}

pub(crate) fn clamp_open(u: f64) -> f64 {
    u.clamp(SQUARE_EPS, 1.0 - SQUARE_EPS)
}

/// Area Jacobian `d omega / d u` of the cylindrical equal-area warp.
pub const SQUARE_TO_DIR_JACOBIAN: f64 = 2.0 * PI;

/// Cylindrical equal-area map: `z = u1`, `phi = 2 pi u2` in the local frame.
pub fn square_to_dir(p: SquarePoint, frame: &Frame) -> (UnitDir, f64) {
    let z = p.u1;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * p.u2;
    let local = Vec3::new(r * phi.cos(), r * phi.sin(), z);
    (
        UnitDir::new_unchecked(frame.to_world(local)),
        SQUARE_TO_DIR_JACOBIAN,
    )
}

/// Inverse of [`square_to_dir`].
pub fn dir_to_square(d: UnitDir, frame: &Frame) -> Result<SquarePoint> {
    let local = frame.to_local(*d);
    if local.z <= 0.0 {
        return Err(Error::BelowHorizon { cos: local.z });
    }
    let mut phi = local.y.atan2(local.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    Ok(SquarePoint::new(local.z, phi / (2.0 * PI)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: UnitDir,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: UnitDir) -> Self {
        Ray {
            origin,
            direction,
            t_min: 0.0,
            t_max: f64::INFINITY,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + *self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub position: Vec3,
    pub normal: UnitDir,
    pub primitive_id: usize,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Plane { point: Vec3, normal: UnitDir },
}

impl Primitive {
    /// Nearest root in `[t_min, t_max]`, with the shading normal.
    fn hit(&self, ray: &Ray) -> Option<(f64, UnitDir)> {
        match *self {
            Primitive::Sphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(*ray.direction);
                let c = oc.length_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = [-b - s, -b + s]
                    .into_iter()
                    .find(|t| *t >= ray.t_min && *t <= ray.t_max)?;
                let n = UnitDir::new((ray.at(t) - center) / radius)?;
                Some((t, n))
            }
            Primitive::Plane { point, normal } => {
                let denom = ray.direction.dot(*normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (point - ray.origin).dot(*normal) / denom;
                if t < ray.t_min || t > ray.t_max {
                    return None;
                }
                let n = if denom > 0.0 { -normal } else { normal };
                Some((t, n))
            }
        }
    }

    /// Signed distance-like residual of the implicit surface equation.
    pub fn implicit(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (p - center).length() - radius,
            Primitive::Plane { point, normal } => (p - point).dot(*normal),
        }
    }
}

/// Flat list of analytic primitives; ids are list indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub primitives: Vec<Primitive>,
}

impl Geometry {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Geometry { primitives }
    }

    pub fn intersect(&self, ray: &Ray) -> Option<SurfaceHit> {
        intersect(ray, self)
    }
}

/// Nearest hit over all primitives.
pub fn intersect(ray: &Ray, geometry: &Geometry) -> Option<SurfaceHit> {
    let mut best: Option<SurfaceHit> = None;
    let mut r = *ray;
    for (id, prim) in geometry.primitives.iter().enumerate() {
        if let Some((t, normal)) = prim.hit(&r) {
            r.t_max = t;
            best = Some(SurfaceHit {
                position: ray.at(t),
                normal,
                primitive_id: id,
                t,
            });
        }
    }
    best
}

/// Whether a shadow ray leaving `x` (offset along `n`) in direction `w` hits
/// anything.
pub fn occluded(x: Vec3, n: UnitDir, w: UnitDir, geometry: &Geometry) -> bool {
    let ray = Ray::new(x + *n * SHADOW_EPS, w);
    geometry.primitives.iter().any(|p| p.hit(&ray).is_some())
}
