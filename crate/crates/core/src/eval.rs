//! Image and depth quality measures, and the visibility-masked evaluation protocol.
//!
//! Every metric takes an optional pixel mask; `None` means every pixel.

use std::fmt::Write as _;
use std::path::Path;

use crate::camera::{project, ray_unchecked, CameraView};
use crate::error::{precondition, Error, Result};
use crate::exec::Execution;
use crate::raster::{DepthMap, Image};
use crate::render::RenderConfig;
use crate::trainer::{render_view, Models, RenderedView};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_mask(mask: Option<&[bool]>, n: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::LengthMismatch {
                what: "mask",
                expected: n,
                got: m.len(),
            });
        }
    }
    Ok(())
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(precondition(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Mean squared error over masked pixels and channels.
pub fn mse(pred: &Image, gt: &Image, mask: Option<&[bool]>) -> Result<f64> {
    same_shape(pred, gt)?;
    check_mask(mask, gt.pixels().len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (p, g)) in pred.pixels().iter().zip(gt.pixels()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..3 {
            sum += (p[c] - g[c]).powi(2);
        }
        n += 1;
    }
    if n == 0 {
        return Err(precondition("empty mask"));
    }
    Ok(sum / (3 * n) as f64)
}

/// `10 log10(1 / MSE)`; identical inputs give `+inf`.
pub fn psnr(pred: &Image, gt: &Image, mask: Option<&[bool]>) -> Result<f64> {
    let e = mse(pred, gt, mask)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w: Vec<f64> = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (-((x * x + y * y) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()))
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Per-center SSIM values of the grayscale images at every valid window center.
fn ssim_map(pred: &Image, gt: &Image) -> Result<Vec<(usize, f64)>> {
    same_shape(pred, gt)?;
    let (w, h) = (gt.width(), gt.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(precondition(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (x, y) = (pred.gray(), gt.gray());
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let r = SSIM_WINDOW / 2;
    let mut out = Vec::with_capacity((w - 2 * r) * (h - 2 * r));
    for cy in r..h - r {
        for cx in r..w - r {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = win[dy * SSIM_WINDOW + dx];
                    let i = (cy + dy - r) * w + (cx + dx - r);
                    mx += k * x[i];
                    my += k * y[i];
                    sxx += k * x[i] * x[i];
                    syy += k * y[i] * y[i];
                    sxy += k * x[i] * y[i];
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            out.push((cy * w + cx, s));
        }
    }
    Ok(out)
}

/// Single-scale SSIM on the channel-mean grayscale images, averaged over the
/// (masked) window centers.
pub fn ssim(pred: &Image, gt: &Image, mask: Option<&[bool]>) -> Result<f64> {
    check_mask(mask, gt.pixels().len())?;
    let map = ssim_map(pred, gt)?;
    let (sum, n) = map
        .iter()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        return Err(precondition("empty mask"));
    }
    Ok(sum / n as f64)
}

fn masked_pairs(pred: &[f64], gt: &DepthMap, mask: Option<&[bool]>) -> Result<Vec<(f64, f64)>> {
    let n = gt.values().len();
    if pred.len() != n {
        return Err(Error::LengthMismatch {
            what: "predicted depth",
            expected: n,
            got: pred.len(),
        });
    }
    check_mask(mask, n)?;
    Ok((0..n)
        .filter(|&i| gt.validity()[i] && mask.is_none_or(|m| m[i]))
        .map(|i| (pred[i], gt.values()[i]))
        .collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean absolute depth error over masked pixels with valid ground truth;
/// with `normalize`, both maps are first divided by the median ground truth.
pub fn depth_mae(pred: &[f64], gt: &DepthMap, mask: Option<&[bool]>, normalize: bool) -> Result<f64> {
    let pairs = masked_pairs(pred, gt, mask)?;
    if pairs.is_empty() {
        return Err(precondition("empty mask"));
    }
    let scale = if normalize {
        let med = median(pairs.iter().map(|p| p.1).collect());
        if !(med > 0.0) {
            return Err(precondition(format!("non-positive median depth {med}")));
        }
        med
    } else {
        1.0
    };
    Ok(pairs.iter().map(|(p, g)| (p / scale - g / scale).abs()).sum::<f64>() / pairs.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation of two sequences; `None` when either is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "rank sequences",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(precondition("rank correlation needs at least two values"));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Spearman correlation between predicted and ground-truth depth over the mask.
pub fn srocc(pred: &[f64], gt: &DepthMap, mask: Option<&[bool]>) -> Result<Option<f64>> {
    let pairs = masked_pairs(pred, gt, mask)?;
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    spearman(&a, &b)
}

/// Sub-pixel positions splatted per source pixel; one sample per pixel leaves
/// holes wherever the warp magnifies slightly.
const SPLAT_OFFSETS: [[f64; 2]; 4] = [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]];

/// Test pixels seen by at least two train views: each train view's reference
/// depth is splatted into the test view (nearest pixel, closest depth wins) and
/// a pixel counts as seen when the warped depth is within
/// `threshold_factor * max(train depth)` of the test reference depth.
pub fn visibility_mask(test: &CameraView, train: &[&CameraView], threshold_factor: f64) -> Result<Vec<bool>> {
    if train.len() < 2 {
        return Err(precondition(format!(
            "visibility needs at least two train views, got {}",
            train.len()
        )));
    }
    let test_depth = test
        .depth
        .as_ref()
        .ok_or_else(|| Error::Data("test view has no reference depth".into()))?;
    let (w, h) = (test.intrinsics.width, test.intrinsics.height);
    let mut hits = vec![0u32; w * h];
    for view in train {
        let depth = view
            .depth
            .as_ref()
            .ok_or_else(|| Error::Data("train view has no reference depth".into()))?;
        let Some(max) = depth.max_valid() else { continue };
        let tol = threshold_factor * max;
        let mut warped = vec![f64::INFINITY; w * h];
        for y in 0..view.intrinsics.height {
            for x in 0..view.intrinsics.width {
                let Some(d) = depth.get(x, y) else { continue };
                for [sx, sy] in SPLAT_OFFSETS {
                    let px = [x as f64 + sx, y as f64 + sy];
                    let p = ray_unchecked(&view.intrinsics, &view.pose, px).at(d);
                    let Some(proj) = project(&test.intrinsics, &test.pose, &p) else { continue };
                    let (u, v) = (proj.pixel[0].floor(), proj.pixel[1].floor());
                    if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                        continue;
                    }
                    let i = v as usize * w + u as usize;
                    warped[i] = warped[i].min(proj.distance);
                }
            }
        }
        for i in 0..w * h {
            if let Some(t) = test_depth.get(i % w, i / w) {
                if (warped[i] - t).abs() < tol {
                    hits[i] += 1;
                }
            }
        }
    }
    Ok(hits.into_iter().map(|n| n >= 2).collect())
}

/// Metrics of one test view, unmasked and restricted to the visibility mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: Option<f64>,
    pub srocc: Option<f64>,
    pub psnr_masked: Option<f64>,
    pub ssim_masked: Option<f64>,
    pub depth_mae_masked: Option<f64>,
    pub srocc_masked: Option<f64>,
    pub coverage: f64,
    /// Mean |coarse depth - fine depth| over all pixels.
    pub coarse_fine_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl EvalReport {
    /// Means over views of each metric (views lacking a value are skipped).
    pub fn aggregate(&self) -> ViewMetrics {
        let m = |f: &dyn Fn(&ViewMetrics) -> Option<f64>| mean_of(self.views.iter().map(f));
        ViewMetrics {
            view: usize::MAX,
            psnr: m(&|v| Some(v.psnr)).unwrap_or(f64::NAN),
            ssim: m(&|v| Some(v.ssim)).unwrap_or(f64::NAN),
            depth_mae: m(&|v| v.depth_mae),
            srocc: m(&|v| v.srocc),
            psnr_masked: m(&|v| v.psnr_masked),
            ssim_masked: m(&|v| v.ssim_masked),
            depth_mae_masked: m(&|v| v.depth_mae_masked),
            srocc_masked: m(&|v| v.srocc_masked),
            coverage: m(&|v| Some(v.coverage)).unwrap_or(0.0),
            coarse_fine_gap: m(&|v| v.coarse_fine_gap),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "view,psnr,ssim,depth_mae,srocc,psnr_masked,ssim_masked,depth_mae_masked,srocc_masked,coverage,coarse_fine_gap\n",
        );
        let row = |out: &mut String, name: String, v: &ViewMetrics| {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{},{},{}",
                v.psnr,
                v.ssim,
                cell(v.depth_mae),
                cell(v.srocc),
                cell(v.psnr_masked),
                cell(v.ssim_masked),
                cell(v.depth_mae_masked),
                cell(v.srocc_masked),
                v.coverage,
                cell(v.coarse_fine_gap)
            );
        };
        for v in &self.views {
            row(&mut out, v.view.to_string(), v);
        }
        row(&mut out, "aggregate".into(), &self.aggregate());
        out
    }

    pub fn summary(&self) -> String {
        let a = self.aggregate();
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        format!(
            "test views: {}\nPSNR {:.3} dB (masked {})\nSSIM {:.4} (masked {})\ndepth MAE {} (masked {})\nSROCC {} (masked {})\nmask coverage {:.3}\ncoarse-fine gap {}\n",
            self.views.len(),
            a.psnr,
            f(a.psnr_masked),
            a.ssim,
            f(a.ssim_masked),
            f(a.depth_mae),
            f(a.depth_mae_masked),
            f(a.srocc),
            f(a.srocc_masked),
            a.coverage,
            f(a.coarse_fine_gap)
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("summary.txt");
        std::fs::write(&txt, self.summary()).map_err(|e| Error::io(&txt, e))
    }
}

/// Scores a prediction for one test view. `mask` is the visibility mask, when available.
pub fn score_view(
    view_index: usize,
    view: &CameraView,
    rendered: &RenderedView,
    mask: Option<&[bool]>,
) -> Result<ViewMetrics> {
    let pred_depth = rendered.depth.values();
    let gt_depth = view.depth.as_ref();
    let psnr_all = psnr(&rendered.image, &view.image, None)?;
    let ssim_all = ssim(&rendered.image, &view.image, None)?;
    let (mut mae, mut rho) = (None, None);
    if let Some(gt) = gt_depth {
        mae = Some(depth_mae(pred_depth, gt, None, true)?);
        rho = srocc(pred_depth, gt, None)?;
    }
    let coverage = mask.map_or(1.0, |m| m.iter().filter(|b| **b).count() as f64 / m.len() as f64);
    let usable = mask.filter(|m| m.iter().any(|b| *b));
    let (mut pm, mut sm, mut mm, mut rm) = (None, None, None, None);
    if let Some(m) = usable {
        pm = Some(psnr(&rendered.image, &view.image, Some(m))?);
        // masks may cover no full SSIM window
        sm = ssim(&rendered.image, &view.image, Some(m)).ok();
        if let Some(gt) = gt_depth {
            mm = depth_mae(pred_depth, gt, Some(m), true).ok();
            rm = srocc(pred_depth, gt, Some(m)).ok().flatten();
        }
    }
    let gap = rendered
        .coarse_depth
        .iter()
        .zip(pred_depth)
        .map(|(c, f)| (c - f).abs())
        .sum::<f64>()
        / pred_depth.len().max(1) as f64;
    Ok(ViewMetrics {
        view: view_index,
        psnr: psnr_all,
        ssim: ssim_all,
        depth_mae: mae,
        srocc: rho,
        psnr_masked: pm,
        ssim_masked: sm,
        depth_mae_masked: mm,
        srocc_masked: rm,
        coverage,
        coarse_fine_gap: Some(gap),
    })
}

/// A rendered test view with its visibility mask.
#[derive(Debug, Clone)]
pub struct EvaluatedView {
    pub view: usize,
    pub rendered: RenderedView,
    pub mask: Option<Vec<bool>>,
}

/// Renders every test view with the main model and scores it. Visibility masks
/// use the ground-truth depth of the test and train views when present.
pub fn evaluate(
    models: &Models,
    dataset: &crate::scene::Dataset,
    render: &RenderConfig,
    threshold_factor: f64,
    seed: u64,
    exec: Execution,
) -> Result<(EvalReport, Vec<EvaluatedView>)> {
    if dataset.test.is_empty() {
        return Err(Error::Data("dataset has no test views".into()));
    }
    let train: Vec<&CameraView> = dataset.train_views().collect();
    let have_depth = train.len() >= 2 && train.iter().all(|v| v.depth.is_some());
    let mut metrics = Vec::with_capacity(dataset.test.len());
    let mut outputs = Vec::with_capacity(dataset.test.len());
    for &i in &dataset.test {
        let view = &dataset.views[i];
        let rendered = render_view(models, &view.intrinsics, &view.pose, render, seed, false, exec)?;
        let mask = if have_depth && view.depth.is_some() {
            Some(visibility_mask(view, &train, threshold_factor)?)
        } else {
            None
        };
        metrics.push(score_view(i, view, &rendered, mask.as_deref())?);
        outputs.push(EvaluatedView { view: i, rendered, mask });
    }
    Ok((EvalReport { views: metrics }, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use crate::scene::{generate_scene, SceneSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, w: usize, h: usize) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..w * h).map(|_| [r.random(), r.random(), r.random()]).collect();
        Image::from_pixels(w, h, px).unwrap()
    }

    fn random_depth(seed: u64, w: usize, h: usize) -> DepthMap {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::from_values(w, h, (0..w * h).map(|_| r.random_range(1.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = noise_image(1, 16, 16);
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        let b = a.map(|p| p.map(|c| c + 0.1));
        assert!((psnr(&b, &a, None).unwrap() - 20.0).abs() < 1e-9);
        let c = noise_image(2, 16, 16);
        let mut s = 0.0;
        for (p, q) in a.pixels().iter().zip(c.pixels()) {
            for k in 0..3 {
                s += (p[k] - q[k]) * (p[k] - q[k]);
            }
        }
        let want = 10.0 * (1.0 / (s / (3.0 * 256.0))).log10();
        assert!((psnr(&a, &c, None).unwrap() - want).abs() < 1e-10);
        assert!(psnr(&a, &c, Some(&[false; 256])).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = noise_image(3, 24, 24);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let mut checker = Image::new(24, 24);
        for y in 0..24 {
            for x in 0..24 {
                let v = ((x / 2 + y / 2) % 2) as f64;
                checker.set(x, y, [v; 3]);
            }
        }
        let inv = checker.map(|p| p.map(|c| 1.0 - c));
        assert!(ssim(&checker, &inv, None).unwrap() < 0.0);
        let shifted = a.map(|p| p.map(|c| c + 0.1));
        let s = ssim(&shifted, &a, None).unwrap();
        assert!(s < 1.0 && s > 0.5);
        assert!(ssim(&noise_image(0, 8, 8), &noise_image(0, 8, 8), None).is_err());
    }

    #[test]
    fn depth_mae_examples() {
        let gt = random_depth(4, 9, 9);
        assert_eq!(depth_mae(gt.values(), &gt, None, true).unwrap(), 0.0);
        let med = median(gt.values().to_vec());
        let pred: Vec<f64> = gt.values().iter().map(|d| d + 0.1 * med).collect();
        assert!((depth_mae(&pred, &gt, None, true).unwrap() - 0.1).abs() < 1e-12);
        let other = random_depth(5, 9, 9);
        let want = other.values().iter().zip(gt.values()).map(|(p, g)| (p - g).abs()).sum::<f64>() / 81.0;
        assert!((depth_mae(other.values(), &gt, None, false).unwrap() - want).abs() < 1e-12);
        assert!(depth_mae(other.values(), &gt, Some(&[false; 81]), true).is_err());
    }

    #[test]
    fn srocc_examples() {
        let gt = random_depth(6, 7, 7);
        let mono: Vec<f64> = gt.values().iter().map(|d| d.ln() * 3.0).collect();
        assert_eq!(srocc(&mono, &gt, None).unwrap(), Some(1.0));
        let neg: Vec<f64> = gt.values().iter().map(|d| -d).collect();
        assert_eq!(srocc(&neg, &gt, None).unwrap(), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn full_mask_equals_unmasked() {
        let (a, b) = (noise_image(7, 20, 20), noise_image(8, 20, 20));
        let full = vec![true; 400];
        assert!((psnr(&a, &b, Some(&full)).unwrap() - psnr(&a, &b, None).unwrap()).abs() < 1e-12);
        assert!((ssim(&a, &b, Some(&full)).unwrap() - ssim(&a, &b, None).unwrap()).abs() < 1e-12);
        let (p, g) = (random_depth(9, 20, 20), random_depth(10, 20, 20));
        let d = |m| depth_mae(p.values(), &g, m, true).unwrap();
        assert!((d(Some(&full)) - d(None)).abs() < 1e-12);
    }

    fn plane_view(pose: Pose) -> CameraView {
        let intr = Intrinsics::centered(20.0, 24, 24).unwrap();
        let mut v = CameraView::new(intr, pose, Image::new(24, 24)).unwrap();
        let mut d = DepthMap::empty(24, 24);
        for y in 0..24 {
            for x in 0..24 {
                d.set(x, y, 2.0 / v.ray(x, y).direction.z);
            }
        }
        v.depth = Some(d);
        v
    }

    #[test]
    fn identical_views_are_fully_visible() {
        let t = plane_view(Pose::identity());
        let a = plane_view(Pose::identity());
        let b = plane_view(Pose::identity());
        let m = visibility_mask(&t, &[&a, &b], 0.05).unwrap();
        assert!(m.iter().all(|v| *v));
        let none = visibility_mask(&t, &[&a, &b], 0.0).unwrap();
        assert!(none.iter().all(|v| !*v));
        assert!(visibility_mask(&t, &[&a], 0.05).is_err());
    }

    #[test]
    fn occluded_pixels_are_masked_out() {
        let mut spec = SceneSpec::threeplanes(48, 48, 8, 2);
        spec.ring.radius = 0.5;
        spec.far = 6.0;
        let ds = generate_scene(&spec, 0).unwrap();
        let train: Vec<&CameraView> = ds.train_views().collect();
        let test = &ds.views[2];
        let m = visibility_mask(test, &train, 0.05).unwrap();
        // analytic oracle: a surface point is seen by a view when it projects
        // inside the image and nothing lies in front of it
        let seen_by_all = |i: usize| {
            let d = test.depth.as_ref().unwrap().get(i % 48, i / 48).unwrap();
            let p = test.ray(i % 48, i / 48).at(d);
            train.iter().all(|v| {
                let Some(proj) = project(&v.intrinsics, &v.pose, &p) else { return false };
                if !v.intrinsics.contains(proj.pixel) {
                    return false;
                }
                let c = v.pose.center();
                let ray = crate::camera::Ray { origin: c, direction: (p - c).normalize() };
                let hit = crate::scene::first_hit(&spec, &ray).unwrap();
                (hit - (p - c).norm()).abs() < 1e-6
            })
        };
        let oracle: Vec<bool> = (0..m.len()).map(seen_by_all).collect();
        let hidden = oracle.iter().filter(|v| !**v).count();
        assert!(hidden > 50, "scene should hide some test pixels ({hidden})");
        let hidden_dropped = (0..m.len()).filter(|&i| !oracle[i] && !m[i]).count();
        let agree = (0..m.len()).filter(|&i| oracle[i] == m[i]).count();
        // splatting is exact up to one-pixel rounding along occlusion edges
        assert!(hidden_dropped as f64 >= 0.9 * hidden as f64, "{hidden_dropped}/{hidden}");
        assert!(agree as f64 >= 0.95 * m.len() as f64, "{agree}/{}", m.len());
    }

    proptest! {
        #[test]
        fn srocc_is_rank_invariant(seed in 0u64..200, n in 3usize..30) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
            let ea: Vec<f64> = a.iter().map(|x| x.exp()).collect();
            prop_assert_eq!(spearman(&a, &b).unwrap(), spearman(&ea, &b).unwrap());
        }

        #[test]
        fn visibility_grows_with_threshold(f1 in 0.0f64..0.2, df in 0.0f64..0.2) {
            let mut spec = SceneSpec::threeplanes(24, 24, 4, 2);
            spec.ring.radius = 0.5;
            let ds = generate_scene(&spec, 0).unwrap();
            let train: Vec<&CameraView> = ds.train_views().collect();
            let lo = visibility_mask(&ds.views[1], &train, f1).unwrap();
            let hi = visibility_mask(&ds.views[1], &train, f1 + df).unwrap();
            prop_assert!(lo.iter().zip(&hi).all(|(a, b)| !*a || *b));
        }
    }
}
