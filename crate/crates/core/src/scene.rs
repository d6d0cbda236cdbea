//! Procedural multi-view scenes with exact ground truth, and simulated sparse depth.
//!
//! Scenes are analytic: every camera pixel is ray traced against planes, spheres
//! and boxes, shaded with one directional light plus ambient, and optionally a
//! Phong highlight. The traced hit distance is the ground-truth along-ray depth.

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Intrinsics, Pose, Ray};
use crate::error::{Error, Result};
use crate::raster::{DepthMap, Image};

const AMBIENT: f64 = 0.2;
const ENCODING_BOUND: f64 = std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Fronto-parallel rectangle `z = depth`, `x ∈ [x0, x1]`, `y ∈ [y0, y1]`.
    Plane {
        depth: f64,
        x: [f64; 2],
        y: [f64; 2],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box.
    Cuboid {
        min: [f64; 3],
        max: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid { color: [f64; 3] },
    /// 3D checkerboard with cubic cells of side `cell`.
    Checker {
        cell: f64,
        a: [f64; 3],
        b: [f64; 3],
    },
    /// Trilinear value noise modulating `base`.
    Noise {
        scale: f64,
        base: [f64; 3],
        amplitude: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Material {
    Lambertian,
    Specular { shininess: f64, strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    pub material: Material,
}

/// Cameras evenly spaced on a circle, all looking at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    /// Center of the ring; the ring lies in the plane orthogonal to the viewing axis.
    pub center: [f64; 3],
    pub look_at: [f64; 3],
    /// Focal length in pixels.
    pub focal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub background: Primitive,
    pub ring: CameraRing,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    /// Direction towards the light.
    pub light: [f64; 3],
    pub train_views: usize,
}

/// One simulated SfM keypoint: integer pixel of a view and its along-ray depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsePoint {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub depth: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub views: Vec<CameraView>,
    pub sparse_depth: Vec<SparsePoint>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub near: f64,
    pub far: f64,
}

impl Dataset {
    pub fn train_views(&self) -> impl Iterator<Item = &CameraView> {
        self.train.iter().map(|&i| &self.views[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Data("dataset has no views".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Data(format!(
                "invalid bounds near={} far={}",
                self.near, self.far
            )));
        }
        for &i in self.train.iter().chain(&self.test) {
            if i >= self.views.len() {
                return Err(Error::Data(format!(
                    "split index {i} out of range for {} views",
                    self.views.len()
                )));
            }
        }
        for p in &self.sparse_depth {
            let Some(v) = self.views.get(p.view) else {
                return Err(Error::Data(format!("sparse depth refers to missing view {}", p.view)));
            };
            if p.x >= v.intrinsics.width || p.y >= v.intrinsics.height {
                return Err(Error::Data(format!(
                    "sparse depth pixel ({}, {}) outside view {}",
                    p.x, p.y, p.view
                )));
            }
            if !(p.depth >= self.near && p.depth <= self.far) {
                return Err(Error::Data(format!(
                    "sparse depth {} outside [{}, {}]",
                    p.depth, self.near, self.far
                )));
            }
        }
        Ok(())
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl SceneSpec {
    /// Three textured fronto-parallel planes at staggered depths in front of a
    /// textured background.
    pub fn threeplanes(width: usize, height: usize, views: usize, train_views: usize) -> Self {
        let checker = |cell: f64, a: [f64; 3], b: [f64; 3]| Texture::Checker { cell, a, b };
        let lambert = |shape: Shape, texture: Texture| Primitive {
            shape,
            texture,
            material: Material::Lambertian,
        };
        SceneSpec {
            name: "threeplanes".into(),
            primitives: vec![
                lambert(
                    Shape::Plane { depth: -1.0, x: [-0.9, -0.05], y: [-0.8, 0.3] },
                    checker(0.16, [0.9, 0.25, 0.2], [0.35, 0.1, 0.05]),
                ),
                lambert(
                    Shape::Plane { depth: -0.4, x: [0.1, 1.1], y: [-0.2, 0.9] },
                    checker(0.2, [0.2, 0.75, 0.3], [0.05, 0.3, 0.1]),
                ),
                lambert(
                    Shape::Plane { depth: 0.2, x: [-0.6, 0.7], y: [-1.4, -0.45] },
                    checker(0.24, [0.25, 0.35, 0.9], [0.9, 0.9, 0.3]),
                ),
            ],
            background: lambert(
                Shape::Plane { depth: 1.0, x: [-3.0, 3.0], y: [-3.0, 3.0] },
                checker(0.4, [0.75, 0.75, 0.7], [0.3, 0.3, 0.35]),
            ),
            ring: CameraRing {
                count: views,
                radius: 0.25,
                center: [0.0, 0.0, -3.0],
                look_at: [0.0, 0.0, 0.0],
                focal: 0.95 * width as f64,
            },
            width,
            height,
            near: 1.0,
            far: 5.6,
            light: [0.3, -0.5, -1.0],
            train_views,
        }
    }

    /// `threeplanes` plus a glossy sphere in front.
    pub fn specsphere(width: usize, height: usize, views: usize, train_views: usize) -> Self {
        let mut spec = SceneSpec::threeplanes(width, height, views, train_views);
        spec.name = "specsphere".into();
        spec.primitives.push(Primitive {
            shape: Shape::Sphere { center: [0.05, 0.05, -0.7], radius: 0.4 },
            texture: Texture::Noise { scale: 6.0, base: [0.55, 0.5, 0.75], amplitude: 0.35 },
            material: Material::Specular { shininess: 12.0, strength: 0.7 },
        });
        spec
    }

    pub fn preset(name: &str, width: usize, height: usize, views: usize, train_views: usize) -> Result<Self> {
        match name {
            "threeplanes" => Ok(SceneSpec::threeplanes(width, height, views, train_views)),
            "specsphere" => Ok(SceneSpec::specsphere(width, height, views, train_views)),
            other => Err(Error::Config(format!(
                "scene.preset: unknown scene {other:?} (expected threeplanes or specsphere)"
            ))),
        }
    }

    pub fn cameras(&self) -> Result<Vec<(Intrinsics, Pose)>> {
        let intr = Intrinsics::centered(self.ring.focal, self.width, self.height)
            .map_err(|e| Error::Config(format!("scene.focal: {e}")))?;
        let center = v3(self.ring.center);
        let target = v3(self.ring.look_at);
        let axis = (target - center).normalize();
        let helper = if axis.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
        let u = axis.cross(&helper).normalize();
        let w = axis.cross(&u);
        (0..self.ring.count)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / self.ring.count as f64;
                let eye = center + self.ring.radius * (a.cos() * u + a.sin() * w);
                let pose = Pose::look_at(eye, target, -Vector3::y())
                    .map_err(|e| Error::Config(format!("scene.ring: {e}")))?;
                Ok((intr, pose))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene.width/scene.height must be positive".into()));
        }
        if self.ring.count == 0 {
            return Err(Error::Config("scene.views must be positive".into()));
        }
        if self.train_views == 0 || self.train_views > self.ring.count {
            return Err(Error::Config(format!(
                "scene.train_views = {} must lie in 1..={}",
                self.train_views, self.ring.count
            )));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Config(format!(
                "scene.near/scene.far: need 0 < near < far, got {} and {}",
                self.near, self.far
            )));
        }
        let cz = self.ring.center[2];
        for (i, p) in self.primitives.iter().chain([&self.background]).enumerate() {
            let (lo, hi) = p.shape.z_extent();
            let (lo, hi) = (lo - cz, hi - cz);
            let which = if i == self.primitives.len() { "background".to_string() } else { format!("primitive {i}") };
            if hi >= self.far {
                return Err(Error::Config(format!(
                    "scene.far: {which} reaches depth {hi}, beyond far = {}",
                    self.far
                )));
            }
            if lo <= self.near {
                return Err(Error::Config(format!(
                    "scene.near: {which} starts at depth {lo}, inside near = {}",
                    self.near
                )));
            }
        }
        // Ray segments over [near, far] fill the convex hull of the camera
        // centers and the far-plane frustum corners.
        for (intr, pose) in self.cameras()? {
            let w = intr.width as f64;
            let h = intr.height as f64;
            let mut pts = vec![pose.center()];
            for px in [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]] {
                pts.push(crate::camera::ray_unchecked(&intr, &pose, px).at(self.far));
            }
            for p in pts {
                if p.iter().any(|c| c.abs() > ENCODING_BOUND) {
                    return Err(Error::Config(format!(
                        "scene.far: ray point {:?} leaves the [-pi, pi]^3 encoding box",
                        [p.x, p.y, p.z]
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Shape {
    /// Smallest and largest world z of the shape; cameras look roughly along +z.
    fn z_extent(&self) -> (f64, f64) {
        match *self {
            Shape::Plane { depth, .. } => (depth, depth),
            Shape::Sphere { center, radius } => (center[2] - radius, center[2] + radius),
            Shape::Cuboid { min, max } => (min[2], max[2]),
        }
    }

    /// Nearest hit distance `> 0` and outward normal.
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vector3<f64>)> {
        let o = ray.origin;
        let d = ray.direction;
        match *self {
            Shape::Plane { depth, x, y } => {
                if d.z.abs() < 1e-12 {
                    return None;
                }
                let t = (depth - o.z) / d.z;
                if t <= 0.0 {
                    return None;
                }
                let p = o + d * t;
                (p.x >= x[0] && p.x <= x[1] && p.y >= y[0] && p.y <= y[1])
                    .then(|| (t, Vector3::new(0.0, 0.0, -1.0)))
            }
            Shape::Sphere { center, radius } => {
                let c = v3(center);
                let oc = o - c;
                let b = oc.dot(&d);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 0.0 { -b - sq } else { -b + sq };
                (t > 0.0).then(|| (t, (o + d * t - c) / radius))
            }
            Shape::Cuboid { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis = 0;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (min[a] - o[a]) / d[a];
                    let tb = (max[a] - o[a]) / d[a];
                    let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
                    if lo > t0 {
                        t0 = lo;
                        axis = a;
                    }
                    t1 = t1.min(hi);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = -d[axis].signum();
                Some((t0, n))
            }
        }
    }
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let t = p - f;
    let s = t.map(|v| v * v * (3.0 - 2.0 * v));
    let (x, y, z) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for (dx, dy, dz) in itertools_corners() {
        let w = (if dx == 1 { s.x } else { 1.0 - s.x })
            * (if dy == 1 { s.y } else { 1.0 - s.y })
            * (if dz == 1 { s.z } else { 1.0 - s.z });
        acc += w * hash3(x + dx, y + dy, z + dz, seed);
    }
    acc
}

fn itertools_corners() -> impl Iterator<Item = (i64, i64, i64)> {
    (0..8).map(|i| ((i & 1) as i64, ((i >> 1) & 1) as i64, ((i >> 2) & 1) as i64))
}

impl Texture {
    fn albedo(&self, p: Vector3<f64>, seed: u64) -> [f64; 3] {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { cell, a, b } => {
                let k = (p.x / cell).floor() as i64 + (p.y / cell).floor() as i64 + (p.z / cell).floor() as i64;
                if k.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Noise { scale, base, amplitude } => {
                let n = value_noise(p * *scale, seed) - 0.5;
                base.map(|c| (c + amplitude * n).clamp(0.0, 1.0))
            }
        }
    }
}

struct Hit<'a> {
    t: f64,
    normal: Vector3<f64>,
    primitive: &'a Primitive,
    index: usize,
}

fn trace<'a>(spec: &'a SceneSpec, ray: &Ray) -> Option<Hit<'a>> {
    let mut best: Option<Hit<'a>> = None;
    for (index, p) in spec.primitives.iter().chain([&spec.background]).enumerate() {
        if let Some((t, normal)) = p.shape.intersect(ray) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal, primitive: p, index });
            }
        }
    }
    best
}

fn shade(spec: &SceneSpec, ray: &Ray, hit: &Hit<'_>, seed: u64) -> [f64; 3] {
    let p = ray.at(hit.t);
    let mut n = hit.normal;
    if n.dot(&ray.direction) > 0.0 {
        n = -n;
    }
    let light = v3(spec.light).normalize();
    let diffuse = n.dot(&light).max(0.0);
    let albedo = hit.primitive.texture.albedo(p, seed.wrapping_add(hit.index as u64));
    let mut c = albedo.map(|a| a * (AMBIENT + (1.0 - AMBIENT) * diffuse));
    if let Material::Specular { shininess, strength } = hit.primitive.material {
        let r = 2.0 * n.dot(&light) * n - light;
        let spec_term = strength * r.dot(&-ray.direction).max(0.0).powf(shininess);
        c = c.map(|v| v + spec_term);
    }
    c.map(|v| v.clamp(0.0, 1.0))
}

/// Renders one view of the scene: image and exact along-ray depth.
pub fn render_view(spec: &SceneSpec, intr: &Intrinsics, pose: &Pose, seed: u64) -> (Image, DepthMap) {
    let mut image = Image::new(intr.width, intr.height);
    let mut depth = DepthMap::empty(intr.width, intr.height);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let ray = crate::camera::pixel_center_ray(intr, pose, x, y);
            if let Some(hit) = trace(spec, &ray) {
                image.set(x, y, shade(spec, &ray, &hit, seed));
                depth.set(x, y, hit.t);
            }
        }
    }
    (image, depth)
}

/// Distance to the first surface along `ray`.
pub fn first_hit(spec: &SceneSpec, ray: &Ray) -> Option<f64> {
    trace(spec, ray).map(|h| h.t)
}

/// Index of the primitive hit by each pixel (`usize::MAX` for misses); the
/// background has index `primitives.len()`.
pub fn primitive_ids(spec: &SceneSpec, intr: &Intrinsics, pose: &Pose) -> Vec<usize> {
    let mut ids = Vec::with_capacity(intr.width * intr.height);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let ray = crate::camera::pixel_center_ray(intr, pose, x, y);
            ids.push(trace(spec, &ray).map_or(usize::MAX, |h| h.index));
        }
    }
    ids
}

/// Train views spread evenly around the ring; the rest are test views.
pub fn ring_split(count: usize, train: usize) -> (Vec<usize>, Vec<usize>) {
    let train_idx: Vec<usize> = (0..train).map(|i| i * count / train).collect();
    let test = (0..count).filter(|i| !train_idx.contains(i)).collect();
    (train_idx, test)
}

/// Ray traces every camera of `spec`. Sparse depth is left empty; see [`sample_sparse_depth`].
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut views = Vec::with_capacity(spec.ring.count);
    for (intr, pose) in spec.cameras()? {
        let (image, depth) = render_view(spec, &intr, &pose, seed);
        if let Some(max) = depth.max_valid() {
            if max >= spec.far {
                return Err(Error::Config(format!(
                    "scene.far: visible depth {max} reaches far = {}",
                    spec.far
                )));
            }
        }
        let min = depth
            .values()
            .iter()
            .zip(depth.validity())
            .filter(|(_, v)| **v)
            .map(|(d, _)| *d)
            .fold(f64::INFINITY, f64::min);
        if min <= spec.near {
            return Err(Error::Config(format!(
                "scene.near: visible depth {min} inside near = {}",
                spec.near
            )));
        }
        let mut view = CameraView::new(intr, pose, image)?;
        view.depth = Some(depth);
        views.push(view);
    }
    let (train, test) = ring_split(spec.ring.count, spec.train_views);
    Ok(Dataset {
        views,
        sparse_depth: Vec::new(),
        train,
        test,
        near: spec.near,
        far: spec.far,
    })
}

/// Central-difference gradient magnitude of the grayscale image.
pub fn gradient_magnitude(image: &Image) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let g = image.gray();
    let at = |x: usize, y: usize| g[y * w + x];
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y);
            let gy = at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1));
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Simulated SfM keypoints: `per_view` pixels per train view, drawn uniformly
/// among valid-depth pixels whose gradient magnitude is at or above the given
/// percentile. Depths are perturbed by multiplicative Gaussian noise `noise`.
pub fn sample_sparse_depth(
    dataset: &Dataset,
    per_view: usize,
    percentile: f64,
    noise: f64,
    seed: u64,
) -> Result<Vec<SparsePoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &vi in &dataset.train {
        let view = &dataset.views[vi];
        let depth = view
            .depth
            .as_ref()
            .ok_or_else(|| Error::Data(format!("view {vi} has no ground-truth depth")))?;
        if per_view == 0 {
            continue;
        }
        let grad = gradient_magnitude(&view.image);
        let w = view.intrinsics.width;
        let mut valid: Vec<(usize, f64)> = grad
            .iter()
            .enumerate()
            .filter(|(i, _)| depth.validity()[*i])
            .map(|(i, g)| (i, *g))
            .collect();
        if valid.is_empty() {
            continue;
        }
        let mut mags: Vec<f64> = valid.iter().map(|(_, g)| *g).collect();
        mags.sort_by(f64::total_cmp);
        let cut = mags[((percentile.clamp(0.0, 100.0) / 100.0) * (mags.len() - 1) as f64).round() as usize];
        valid.retain(|(_, g)| *g >= cut && *g > 0.0);
        let m = per_view.min(valid.len());
        let mut picks: Vec<usize> = sample_indices(&mut rng, valid.len(), m).into_iter().collect();
        picks.sort_unstable();
        for k in picks {
            let i = valid[k].0;
            let (x, y) = (i % w, i / w);
            let gt = depth.get(x, y).expect("filtered on validity");
            let eta: f64 = if noise > 0.0 {
                noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            } else {
                0.0
            };
            let z = (gt * (1.0 + eta)).clamp(dataset.near, dataset.far);
            out.push(SparsePoint { view: vi, x, y, depth: z });
        }
    }
    Ok(out)
}

/// Random unit vector, for callers building random poses.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{pixel_center_ray, reproject};

    fn single_plane(d: f64) -> SceneSpec {
        let mut spec = SceneSpec::threeplanes(32, 32, 2, 1);
        spec.primitives.clear();
        spec.background = Primitive {
            shape: Shape::Plane { depth: d, x: [-3.0, 3.0], y: [-3.0, 3.0] },
            texture: Texture::Checker { cell: 0.2, a: [1.0, 0.0, 0.0], b: [0.0, 0.0, 1.0] },
            material: Material::Lambertian,
        };
        spec.ring.radius = 0.0;
        spec
    }

    #[test]
    fn fronto_parallel_depth_is_analytic() {
        let d = 2.5;
        let spec = single_plane(d - 3.0);
        let data = generate_scene(&spec, 0).unwrap();
        let v = &data.views[0];
        let depth = v.depth.as_ref().unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let ray = pixel_center_ray(&v.intrinsics, &v.pose, x, y);
                let cos = ray.direction.z;
                assert!((depth.get(x, y).unwrap() - d / cos).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_poses_give_identical_images() {
        let spec = single_plane(-1.0);
        let data = generate_scene(&spec, 0).unwrap();
        // zero ring radius: both cameras sit at the same pose
        assert_eq!(data.views[0].image, data.views[1].image);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::specsphere(24, 24, 3, 2);
        let a = generate_scene(&spec, 5).unwrap();
        let b = generate_scene(&spec, 5).unwrap();
        for (x, y) in a.views.iter().zip(&b.views) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.depth, y.depth);
        }
    }

    #[test]
    fn plane_beyond_far_is_rejected() {
        let mut spec = SceneSpec::threeplanes(16, 16, 4, 2);
        spec.primitives[0].shape = Shape::Plane { depth: 6.0, x: [-1.0, 1.0], y: [-1.0, 1.0] };
        let err = generate_scene(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("scene.far"), "{err}");
    }

    #[test]
    fn encoding_box_is_enforced() {
        let mut spec = SceneSpec::threeplanes(16, 16, 4, 2);
        spec.far = 30.0;
        spec.background.shape = Shape::Plane { depth: 20.0, x: [-40.0, 40.0], y: [-40.0, 40.0] };
        assert!(spec.validate().unwrap_err().to_string().contains("encoding box"));
        assert!(spec.validate().is_err());
        assert!(SceneSpec::threeplanes(64, 64, 8, 2).validate().is_ok());
        assert!(SceneSpec::specsphere(64, 64, 8, 2).validate().is_ok());
    }

    #[test]
    fn ring_split_spreads_train_views() {
        assert_eq!(ring_split(8, 2), (vec![0, 4], vec![1, 2, 3, 5, 6, 7]));
        assert_eq!(ring_split(8, 3).0, vec![0, 2, 5]);
    }

    #[test]
    fn lambertian_views_are_photo_consistent() {
        let spec = SceneSpec::threeplanes(48, 48, 4, 4);
        let data = generate_scene(&spec, 1).unwrap();
        for (i, a) in data.views.iter().enumerate() {
            for (j, b) in data.views.iter().enumerate() {
                if i == j {
                    continue;
                }
                let depth = a.depth.as_ref().unwrap();
                let mut matched = 0usize;
                let mut n = 0usize;
                for y in 0..48 {
                    for x in 0..48 {
                        let z = depth.get(x, y).unwrap();
                        let Some(p) = reproject([x as f64 + 0.5, y as f64 + 0.5], z, (&a.intrinsics, &a.pose), (&b.intrinsics, &b.pose)).unwrap() else { continue };
                        let Ok(ray) = crate::camera::generate_ray(&b.intrinsics, &b.pose, p.pixel) else { continue };
                        let hit = trace(&spec, &ray).unwrap();
                        // occluded in b
                        if (hit.t - p.distance).abs() > 1e-6 {
                            continue;
                        }
                        let c = shade(&spec, &ray, &hit, 1);
                        let s = a.image.get(x, y);
                        n += 1;
                        matched += (0..3).all(|k| (c[k] - s[k]).abs() < 1e-9) as usize;
                    }
                }
                assert!(n > 500);
                // checker cell boundaries may flip parity under round-off
                assert!(matched as f64 >= 0.99 * n as f64, "views {i}->{j}: {matched}/{n}");
            }
        }
    }

    #[test]
    fn sparse_depth_cases() {
        let spec = SceneSpec::threeplanes(48, 48, 4, 2);
        let mut data = generate_scene(&spec, 0).unwrap();
        assert!(sample_sparse_depth(&data, 0, 80.0, 0.0, 1).unwrap().is_empty());
        let pts = sample_sparse_depth(&data, 20, 80.0, 0.0, 1).unwrap();
        assert_eq!(pts.len(), 40);
        for p in &pts {
            let gt = data.views[p.view].depth.as_ref().unwrap().get(p.x, p.y).unwrap();
            assert_eq!(p.depth, gt);
        }
        data.sparse_depth = pts;
        data.validate().unwrap();
        let noisy = sample_sparse_depth(&data, 20, 80.0, 0.05, 1).unwrap();
        assert!(noisy.iter().zip(&data.sparse_depth).any(|(a, b)| a.depth != b.depth));
    }

    #[test]
    fn keypoints_concentrate_on_edges() {
        let spec = SceneSpec::threeplanes(64, 64, 8, 2);
        let data = generate_scene(&spec, 0).unwrap();
        let pts = sample_sparse_depth(&data, 64, 80.0, 0.0, 3).unwrap();
        let mut near_edge = 0;
        for p in &pts {
            let v = &data.views[p.view];
            let (w, h) = (64usize, 64usize);
            // albedo/primitive edges: a change of primitive id or checker parity nearby
            let ids = primitive_ids(&spec, &v.intrinsics, &v.pose);
            let parity = |x: usize, y: usize| {
                let ray = pixel_center_ray(&v.intrinsics, &v.pose, x, y);
                let hit = trace(&spec, &ray).unwrap();
                let q = ray.at(hit.t);
                let cell = match hit.primitive.texture {
                    Texture::Checker { cell, .. } => cell,
                    _ => 1.0,
                };
                ((q.x / cell).floor() as i64 + (q.y / cell).floor() as i64 + (q.z / cell).floor() as i64).rem_euclid(2)
            };
            let mut edge = false;
            for y in p.y.saturating_sub(2)..=(p.y + 2).min(h - 1) {
                for x in p.x.saturating_sub(2)..=(p.x + 2).min(w - 1) {
                    if ids[y * w + x] != ids[p.y * w + p.x] || parity(x, y) != parity(p.x, p.y) {
                        edge = true;
                    }
                }
            }
            near_edge += edge as usize;
        }
        assert!(near_edge as f64 >= 0.8 * pts.len() as f64, "{near_edge}/{}", pts.len());
    }
}
