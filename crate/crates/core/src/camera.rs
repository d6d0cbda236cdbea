//! Pinhole cameras, ray generation and depth-based reprojection.
//!
//! Conventions: camera frame is x right, y down, looking along +z. Integer
//! pixel `(i, j)` has its center at continuous coordinate `(i + 0.5, j + 0.5)`.
//! Every depth in the crate is an along-ray distance from the camera center,
//! never an optical-axis z.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{precondition, Error, Result};
use crate::raster::Image;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(precondition(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(precondition(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Intrinsics::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    #[inline]
    pub fn contains(&self, pixel: [f64; 2]) -> bool {
        pixel[0] >= 0.0
            && pixel[1] >= 0.0
            && pixel[0] <= self.width as f64
            && pixel[1] <= self.height as f64
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(err <= ORTHONORMAL_TOL && (det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(precondition(format!(
                "rotation is not a proper orthonormal matrix (|R^T R - I| = {err:e}, det = {det})"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(precondition("translation must be finite"));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; `up` fixes roll (image y points away from it).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(precondition("look_at: eye and target coincide"));
        }
        let z = forward.normalize();
        let x = z.cross(&(-up));
        if x.norm() < 1e-12 {
            return Err(precondition("look_at: up is parallel to the viewing direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Pose::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn world_to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (point - self.translation)
    }

    pub fn camera_to_world(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit world-space direction; doubles as the viewing direction fed to the field.
    pub direction: Vector3<f64>,
}

impl Ray {
    /// The point at along-ray distance `s > 0`.
    pub fn point_at_distance(&self, s: f64) -> Result<Vector3<f64>> {
        if !(s > 0.0) {
            return Err(precondition(format!(
                "along-ray distance must be positive, got {s}"
            )));
        }
        Ok(self.at(s))
    }

    /// Unchecked variant for hot loops where `s` is known positive.
    #[inline]
    pub fn at(&self, s: f64) -> Vector3<f64> {
        self.origin + self.direction * s
    }
}

/// Ray through a continuous pixel coordinate.
pub fn generate_ray(cam: &Intrinsics, pose: &Pose, pixel: [f64; 2]) -> Result<Ray> {
    if !cam.contains(pixel) {
        return Err(precondition(format!(
            "pixel ({}, {}) outside {}x{} image",
            pixel[0], pixel[1], cam.width, cam.height
        )));
    }
    Ok(ray_unchecked(cam, pose, pixel))
}

#[inline]
pub(crate) fn ray_unchecked(cam: &Intrinsics, pose: &Pose, pixel: [f64; 2]) -> Ray {
    let d = Vector3::new(
        (pixel[0] - cam.cx) / cam.fx,
        (pixel[1] - cam.cy) / cam.fy,
        1.0,
    );
    Ray {
        origin: pose.translation,
        direction: (pose.rotation * d).normalize(),
    }
}

/// Ray through the center of integer pixel `(x, y)`.
pub fn pixel_center_ray(cam: &Intrinsics, pose: &Pose, x: usize, y: usize) -> Ray {
    ray_unchecked(cam, pose, [x as f64 + 0.5, y as f64 + 0.5])
}

/// Continuous pixel and along-ray distance of a world point, `None` when the
/// point is not strictly in front of the camera.
pub fn project(cam: &Intrinsics, pose: &Pose, point: &Vector3<f64>) -> Option<Projection> {
    let pc = pose.world_to_camera(point);
    if !(pc.z > 0.0) {
        return None;
    }
    Some(Projection {
        pixel: [cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy],
        distance: pc.norm(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub distance: f64,
}

/// Lifts `pixel` at along-ray distance `s` through `src` and projects it into `dst`.
///
/// `Ok(None)` marks a point behind (or on the plane of) the destination camera.
/// The destination pixel is not bounds-checked.
pub fn reproject(
    pixel: [f64; 2],
    s: f64,
    src: (&Intrinsics, &Pose),
    dst: (&Intrinsics, &Pose),
) -> Result<Option<Projection>> {
    if !(s > 0.0) {
        return Err(precondition(format!(
            "along-ray distance must be positive, got {s}"
        )));
    }
    let ray = ray_unchecked(src.0, src.1, pixel);
    Ok(project(dst.0, dst.1, &ray.at(s)))
}

/// Bilinear lookup in array-index coordinates, where integer `(x, y)` is exactly
/// pixel `(x, y)`. Continuous pixel coordinates map here by subtracting 0.5.
/// Returns `None` when any contributing neighbor lies outside the image.
pub fn bilinear_sample(image: &Image, xy: [f64; 2]) -> Option<[f64; 3]> {
    let [x, y] = xy;
    if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 {
        return None;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let tx = x - x0;
    let ty = y - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = if tx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if ty > 0.0 { y0 + 1 } else { y0 };
    if x1 >= image.width() || y1 >= image.height() {
        return None;
    }
    let p00 = image.get(x0, y0);
    let p10 = image.get(x1, y0);
    let p01 = image.get(x0, y1);
    let p11 = image.get(x1, y1);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] + (p10[c] - p00[c]) * tx;
        let bottom = p01[c] + (p11[c] - p01[c]) * tx;
        out[c] = top + (bottom - top) * ty;
    }
    Some(out)
}

/// One calibrated view of a scene.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image: Image,
    pub depth: Option<crate::raster::DepthMap>,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, pose: Pose, image: Image) -> Result<Self> {
        if image.width() != intrinsics.width || image.height() != intrinsics.height {
            return Err(Error::Data(format!(
                "image is {}x{} but intrinsics say {}x{}",
                image.width(),
                image.height(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        Ok(CameraView {
            intrinsics,
            pose,
            image,
            depth: None,
        })
    }

    pub fn ray(&self, x: usize, y: usize) -> Ray {
        pixel_center_ray(&self.intrinsics, &self.pose, x, y)
    }
}

/// Point in world coordinates as an nalgebra point, for callers that prefer it.
pub fn to_point(v: &Vector3<f64>) -> Point3<f64> {
    Point3::from(*v)
}
