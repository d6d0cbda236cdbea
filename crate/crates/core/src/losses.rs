//! Training losses on per-ray rendered colors and depths.
//!
//! Subscripts: `c`/`f` are the coarse and fine passes of the main model, `ap` the
//! points augmentation and `av` the views augmentation. Every term is a batch
//! mean; the sparse-depth term averages over keypoint rays only.

use serde::{Deserialize, Serialize};

use crate::reliability::Verdict;

/// Loss weights `λ1..λ5` and the iteration at which the depth-supervision terms switch on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub color: f64,
    pub sparse_depth: f64,
    pub points_aug: f64,
    pub views_aug: f64,
    pub coarse_fine: f64,
    /// Derived from the training schedule, not read from config files.
    #[serde(skip)]
    pub warmup_iters: u64,
    /// `false` drops the reliability test: every verdict is forced to
    /// "alternative reliable" regardless of reprojection error.
    pub reliable_depth: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            color: 1.0,
            sparse_depth: 0.1,
            points_aug: 0.1,
            views_aug: 0.1,
            coarse_fine: 0.1,
            warmup_iters: 10_000,
            reliable_depth: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.color > 0.0) {
            return Err(crate::Error::Config("lambda1 (color) must be positive".into()));
        }
        for (name, v) in [
            ("lambda2", self.sparse_depth),
            ("lambda3", self.points_aug),
            ("lambda4", self.views_aug),
            ("lambda5", self.coarse_fine),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(crate::Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Whether the depth-supervision terms are active at `iteration`.
    pub fn regularizers_active(&self, iteration: u64) -> bool {
        iteration >= self.warmup_iters
    }

    /// Weights in effect at `iteration`, with `λ3..λ5` zeroed during warmup.
    pub fn scheduled(&self, iteration: u64) -> [f64; 5] {
        let on = if self.regularizers_active(iteration) { 1.0 } else { 0.0 };
        [
            self.color,
            self.sparse_depth,
            self.points_aug * on,
            self.views_aug * on,
            self.coarse_fine * on,
        ]
    }
}

/// Rendered quantities and supervision targets of one ray.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayOutputs {
    pub c_c: [f64; 3],
    pub c_f: [f64; 3],
    pub c_ap: [f64; 3],
    pub c_av: [f64; 3],
    pub z_c: f64,
    pub z_f: f64,
    pub z_ap: f64,
    pub z_av: f64,
    pub target: [f64; 3],
    pub sparse_depth: Option<f64>,
    pub m_ap: Verdict,
    pub m_av: Verdict,
    pub m_cfc: Verdict,
}

/// Loss gradient with respect to each rendered quantity of one ray.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayGrads {
    pub c_c: [f64; 3],
    pub c_f: [f64; 3],
    pub c_ap: [f64; 3],
    pub c_av: [f64; 3],
    pub z_c: f64,
    pub z_f: f64,
    pub z_ap: f64,
    pub z_av: f64,
}

impl RayGrads {
    fn add_scaled(&mut self, other: &RayGrads, s: f64) {
        for k in 0..3 {
            self.c_c[k] += s * other.c_c[k];
            self.c_f[k] += s * other.c_f[k];
            self.c_ap[k] += s * other.c_ap[k];
            self.c_av[k] += s * other.c_av[k];
        }
        self.z_c += s * other.z_c;
        self.z_f += s * other.z_f;
        self.z_ap += s * other.z_ap;
        self.z_av += s * other.z_av;
    }
}

/// The five loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub color: f64,
    pub sparse_depth: f64,
    pub points_aug: f64,
    pub views_aug: f64,
    pub coarse_fine: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.color,
            self.sparse_depth,
            self.points_aug,
            self.views_aug,
            self.coarse_fine,
        ]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        LossTerms {
            color: a[0],
            sparse_depth: a[1],
            points_aug: a[2],
            views_aug: a[3],
            coarse_fine: a[4],
        }
    }

    pub fn names() -> [&'static str; 5] {
        ["L_color", "L_sd", "L_ap", "L_av", "L_cfc"]
    }

    pub fn add(&mut self, other: &LossTerms) {
        self.color += other.color;
        self.sparse_depth += other.sparse_depth;
        self.points_aug += other.points_aug;
        self.views_aug += other.views_aug;
        self.coarse_fine += other.coarse_fine;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    /// `λ1..λ5` in effect for this iteration.
    pub weights: [f64; 5],
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(terms: LossTerms, weights: [f64; 5]) -> Self {
        let total = terms
            .as_array()
            .iter()
            .zip(&weights)
            .map(|(t, w)| t * w)
            .sum();
        LossBreakdown {
            terms,
            weights,
            total,
        }
    }

    pub fn weighted(&self) -> LossTerms {
        let t = self.terms.as_array();
        LossTerms::from_array(std::array::from_fn(|i| t[i] * self.weights[i]))
    }

    /// First term that is not finite, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let names = LossTerms::names();
        self.terms
            .as_array()
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| names[i])
            .or_else(|| (!self.total.is_finite()).then_some("total"))
    }
}

fn sq_err(a: [f64; 3], b: [f64; 3]) -> (f64, [f64; 3]) {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
        [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]],
    )
}

/// Masked depth supervision between a main and an alternative depth.
///
/// `AltReliable` pulls `z_main` toward a frozen `z_alt`; `MainReliable` pulls
/// `z_alt` toward a frozen `z_main`. Returns `(loss, d_main, d_alt)`.
pub fn masked_depth_loss(z_main: f64, z_alt: f64, verdict: Verdict) -> (f64, f64, f64) {
    let d = z_main - z_alt;
    let (g_main, g_alt) = match verdict {
        Verdict::Neither => return (0.0, 0.0, 0.0),
        Verdict::AltReliable => (2.0 * d, 0.0),
        Verdict::MainReliable => (0.0, -2.0 * d),
    };
    (d * d, g_main, g_alt)
}

/// Coarse-fine consistency: the same structure with `z_c` as main and `z_f` as alternative.
pub fn coarse_fine_consistency_loss(z_c: f64, z_f: f64, verdict: Verdict) -> (f64, f64, f64) {
    masked_depth_loss(z_c, z_f, verdict)
}

/// Per-batch normalizers and effective weights for [`ray_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScales {
    pub weights: [f64; 5],
    pub n_rays: usize,
    pub n_sparse: usize,
}

impl LossScales {
    pub fn for_batch(batch: &[RayOutputs], weights: &LossWeights, iteration: u64) -> Self {
        LossScales {
            weights: weights.scheduled(iteration),
            n_rays: batch.len(),
            n_sparse: batch.iter().filter(|r| r.sparse_depth.is_some()).count(),
        }
    }
}

/// One ray's contribution to every (batch-mean) term, and the gradient of the
/// weighted total with respect to its rendered quantities.
pub fn ray_loss(ray: &RayOutputs, scales: &LossScales) -> (LossTerms, RayGrads) {
    let mut terms = LossTerms::default();
    let mut grads = RayGrads::default();
    if scales.n_rays == 0 {
        return (terms, grads);
    }
    let inv_b = 1.0 / scales.n_rays as f64;
    let [l1, l2, l3, l4, l5] = scales.weights;

    let color = color_terms(ray);
    terms.color = color.0 * inv_b;
    grads.add_scaled(&color.1, l1 * inv_b);

    if let Some(zhat) = ray.sparse_depth {
        let inv_k = 1.0 / scales.n_sparse.max(1) as f64;
        let (v, g) = sparse_terms(ray, zhat);
        terms.sparse_depth = v * inv_k;
        grads.add_scaled(&g, l2 * inv_k);
    }

    if l3 != 0.0 {
        let (v, gm, ga) = masked_depth_loss(ray.z_c, ray.z_ap, ray.m_ap);
        terms.points_aug = v * inv_b;
        grads.z_c += l3 * inv_b * gm;
        grads.z_ap += l3 * inv_b * ga;
    }
    if l4 != 0.0 {
        let (v, gm, ga) = masked_depth_loss(ray.z_c, ray.z_av, ray.m_av);
        terms.views_aug = v * inv_b;
        grads.z_c += l4 * inv_b * gm;
        grads.z_av += l4 * inv_b * ga;
    }
    if l5 != 0.0 {
        let (v, gc, gf) = coarse_fine_consistency_loss(ray.z_c, ray.z_f, ray.m_cfc);
        terms.coarse_fine = v * inv_b;
        grads.z_c += l5 * inv_b * gc;
        grads.z_f += l5 * inv_b * gf;
    }
    (terms, grads)
}

fn color_terms(ray: &RayOutputs) -> (f64, RayGrads) {
    let (vc, gc) = sq_err(ray.c_c, ray.target);
    let (vf, gf) = sq_err(ray.c_f, ray.target);
    let (va, ga) = sq_err(ray.c_ap, ray.target);
    let (vv, gv) = sq_err(ray.c_av, ray.target);
    let g = RayGrads {
        c_c: gc,
        c_f: gf,
        c_ap: ga,
        c_av: gv,
        ..RayGrads::default()
    };
    (vc + vf + va + vv, g)
}

fn sparse_terms(ray: &RayOutputs, zhat: f64) -> (f64, RayGrads) {
    let (df, da, dv) = (ray.z_f - zhat, ray.z_ap - zhat, ray.z_av - zhat);
    let g = RayGrads {
        z_f: 2.0 * df,
        z_ap: 2.0 * da,
        z_av: 2.0 * dv,
        ..RayGrads::default()
    };
    (df * df + da * da + dv * dv, g)
}

/// Mean over rays of the four squared color errors, with per-ray gradients.
pub fn color_loss(batch: &[RayOutputs]) -> (f64, Vec<RayGrads>) {
    let n = batch.len().max(1) as f64;
    let mut total = 0.0;
    let grads = batch
        .iter()
        .map(|r| {
            let (v, g) = color_terms(r);
            total += v;
            let mut out = RayGrads::default();
            out.add_scaled(&g, 1.0 / n);
            out
        })
        .collect();
    (total / n, grads)
}

/// Mean over keypoint rays of the fine and augmented depth errors. The main
/// coarse depth is never supervised by sparse depth.
pub fn sparse_depth_loss(batch: &[RayOutputs]) -> (f64, Vec<RayGrads>) {
    let k = batch.iter().filter(|r| r.sparse_depth.is_some()).count();
    let mut total = 0.0;
    let grads = batch
        .iter()
        .map(|r| match r.sparse_depth {
            Some(zhat) => {
                let (v, g) = sparse_terms(r, zhat);
                total += v;
                let mut out = RayGrads::default();
                out.add_scaled(&g, 1.0 / k as f64);
                out
            }
            None => RayGrads::default(),
        })
        .collect();
    (if k == 0 { 0.0 } else { total / k as f64 }, grads)
}

/// Weighted total with the warmup schedule applied, and per-ray gradients of it.
pub fn total_loss(batch: &[RayOutputs], weights: &LossWeights, iteration: u64) -> (LossBreakdown, Vec<RayGrads>) {
    let scales = LossScales::for_batch(batch, weights, iteration);
    let mut terms = LossTerms::default();
    let grads = batch
        .iter()
        .map(|r| {
            let (t, g) = ray_loss(r, &scales);
            terms.add(&t);
            g
        })
        .collect();
    (LossBreakdown::from_terms(terms, scales.weights), grads)
}
