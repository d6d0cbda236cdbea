//! Depth reliability from patch reprojection error.
//!
//! A candidate depth for pixel `q` is scored by warping the `k x k` patch around
//! `q` into the nearest other training view at that depth and measuring the
//! photometric MSE. Comparing the scores of two candidate depths yields a
//! ternary verdict deciding which depth (if any) supervises the other.

use serde::{Deserialize, Serialize};

use crate::camera::{bilinear_sample, reproject, CameraView, Pose};
use crate::error::{precondition, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReliabilityConfig {
    /// Odd patch side.
    pub k: usize,
    /// MSE above which a depth is never trusted.
    pub e_tau: f64,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        ReliabilityConfig { k: 5, e_tau: 0.1 }
    }
}

impl ReliabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::Config(format!("patch size k = {} must be odd", self.k)));
        }
        if !(self.e_tau > 0.0) {
            return Err(Error::Config(format!("e_tau = {} must be positive", self.e_tau)));
        }
        Ok(())
    }
}

/// Which side of a depth pair is trusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Verdict {
    /// The alternative depth supervises the main one.
    AltReliable,
    /// The main depth supervises the alternative.
    MainReliable,
    #[default]
    Neither,
}

impl Verdict {
    pub fn value(self) -> i8 {
        match self {
            Verdict::AltReliable => 1,
            Verdict::MainReliable => -1,
            Verdict::Neither => 0,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            1 => Some(Verdict::AltReliable),
            -1 => Some(Verdict::MainReliable),
            0 => Some(Verdict::Neither),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskVerdict {
    pub verdict: Verdict,
    pub e_main: Option<f64>,
    pub e_alt: Option<f64>,
}

/// `+1` if `e_alt <= e_main` and `e_alt <= e_tau`; `-1` if `e_main < e_alt` and
/// `e_main <= e_tau`; `0` otherwise. Unusable patches (`None`) count as `+inf`.
pub fn reliability_mask(e_main: Option<f64>, e_alt: Option<f64>, e_tau: f64) -> MaskVerdict {
    let em = e_main.unwrap_or(f64::INFINITY);
    let ea = e_alt.unwrap_or(f64::INFINITY);
    let verdict = if ea <= em && ea <= e_tau {
        Verdict::AltReliable
    } else if em < ea && em <= e_tau {
        Verdict::MainReliable
    } else {
        Verdict::Neither
    };
    MaskVerdict {
        verdict,
        e_main,
        e_alt,
    }
}

/// Index of the other view whose camera center is closest to view `index`'s; ties go
/// to the lower index.
pub fn nearest_train_view(index: usize, poses: &[Pose]) -> Result<usize> {
    if poses.len() < 2 {
        return Err(precondition("nearest view needs at least two training views"));
    }
    if index >= poses.len() {
        return Err(precondition(format!(
            "view {index} out of range for {} views",
            poses.len()
        )));
    }
    let c = poses[index].center();
    let mut best: Option<(usize, f64)> = None;
    for (j, pose) in poses.iter().enumerate() {
        if j == index {
            continue;
        }
        let d = (pose.center() - c).norm();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    Ok(best.expect("at least one other view").0)
}

/// Photometric MSE of the `k x k` patch around integer pixel `q` of `src`, warped
/// into `dst` at the shared along-ray distance `z`.
///
/// Each patch pixel is cast along its own ray; the destination is sampled
/// bilinearly. `None` when more than half of the patch cannot be compared.
pub fn patch_reprojection_error(
    q: (usize, usize),
    z: f64,
    src: &CameraView,
    dst: &CameraView,
    cfg: &ReliabilityConfig,
) -> Result<Option<f64>> {
    if !(z > 0.0) {
        return Err(precondition(format!("depth must be positive, got {z}")));
    }
    let (w, h) = (src.intrinsics.width, src.intrinsics.height);
    if q.0 >= w || q.1 >= h {
        return Err(precondition(format!("pixel {q:?} outside {w}x{h} image")));
    }
    Ok(patch_error_unchecked(q, z, src, dst, cfg.k))
}

pub(crate) fn patch_error_unchecked(
    q: (usize, usize),
    z: f64,
    src: &CameraView,
    dst: &CameraView,
    k: usize,
) -> Option<f64> {
    let r = (k / 2) as isize;
    let (w, h) = (src.intrinsics.width as isize, src.intrinsics.height as isize);
    let total = k * k;
    let mut valid = 0usize;
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (q.0 as isize + dx, q.1 as isize + dy);
            if x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            let center = [x as f64 + 0.5, y as f64 + 0.5];
            let Ok(Some(p)) = reproject(
                center,
                z,
                (&src.intrinsics, &src.pose),
                (&dst.intrinsics, &dst.pose),
            ) else {
                continue;
            };
            let Some(sampled) = bilinear_sample(&dst.image, [p.pixel[0] - 0.5, p.pixel[1] - 0.5])
            else {
                continue;
            };
            let reference = src.image.get(x as usize, y as usize);
            for c in 0..3 {
                let d = sampled[c] - reference[c];
                sum += d * d;
            }
            valid += 1;
        }
    }
    if 2 * valid < total || valid == 0 {
        return None;
    }
    Some(sum / (3 * valid) as f64)
}
