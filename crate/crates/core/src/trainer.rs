//! Joint optimization of the main coarse/fine fields and the two augmentations.
//!
//! Each iteration draws a mixed batch (uniform photometric rays over the train
//! pixels plus every keypoint of one train view), renders it with all active
//! models, derives reliability verdicts from the current depths, and takes one
//! Adam step over the concatenated parameters. Randomness is derived from
//! `(seed, iteration, ray index)` alone, so a run is reproducible from its
//! config and resumable from any checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{pixel_center_ray, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::{init_params, Bands, FieldConfig, FieldParams, FieldVariant};
use crate::losses::{ray_loss, LossBreakdown, LossScales, LossTerms, LossWeights, RayOutputs};
use crate::raster::{DepthMap, Image};
use crate::reliability::{nearest_train_view, patch_error_unchecked, reliability_mask, ReliabilityConfig, Verdict};
use crate::render::{hierarchical_sample, midpoint_samples, stratified_sample, RayPass, RenderConfig, SampleSet};
use crate::scene::{Dataset, SparsePoint};

/// Rays per work item; fixed so reductions do not depend on the thread count.
const RAY_CHUNK: usize = 8;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SNRF";
const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.snrf";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "iter,lr,L_color,L_sd,L_ap,L_av,L_cfc,total";

pub const MODEL_NAMES: [&str; 4] = ["main_coarse", "main_fine", "points_aug", "views_aug"];

pub const PRESETS: [&str; 7] = [
    "simplenerf",
    "dsnerf-baseline",
    "no-points",
    "no-views",
    "no-cfc",
    "no-reliable-depth",
    "identical-aug",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Written as `0` when there is no skip connection.
    #[serde(with = "skip_as_zero")]
    pub skip_layer: Option<usize>,
    pub l_p: u32,
    pub l_v: u32,
    pub l_p_ap: u32,
    /// Both augmentations become plain copies of the main layout.
    pub identical_aug: bool,
}

mod skip_as_zero {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let v = usize::deserialize(d)?;
        Ok((v > 0).then_some(v))
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        let f = FieldConfig::desk(FieldVariant::Main);
        let b = Bands::default();
        ModelConfig {
            hidden_layers: f.hidden_layers,
            hidden_width: f.hidden_width,
            skip_layer: f.skip_layer,
            l_p: b.l_p,
            l_v: b.l_v,
            l_p_ap: b.l_p_ap,
            identical_aug: false,
        }
    }

    pub fn field(&self, variant: FieldVariant) -> FieldConfig {
        let variant = if self.identical_aug { FieldVariant::Main } else { variant };
        FieldConfig {
            variant,
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            skip_layer: self.skip_layer,
            bands: Bands {
                l_p: self.l_p,
                l_v: self.l_v,
                l_p_ap: self.l_p_ap,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_rays: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of `iterations` before the depth-supervision terms switch on.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub loss: LossWeights,
    pub reliability: ReliabilityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// CPU-scale defaults: 20k iterations of 256 rays on the four-layer fields.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_rays: 256,
            lr_init: 5e-4,
            lr_final: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_fraction: 0.1,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
            model: ModelConfig::desk(),
            sampling: SamplingConfig { n_coarse: 32, n_fine: 32 },
            loss: LossWeights::default(),
            reliability: ReliabilityConfig::default(),
        }
    }

    /// Loss weights with the warmup length resolved against `iterations`.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            warmup_iters: self.warmup_iters(),
            ..self.loss
        }
    }

    pub fn warmup_iters(&self) -> u64 {
        (self.warmup_fraction * self.iterations as f64).round() as u64
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let l = &mut self.loss;
        match name {
            "simplenerf" => {}
            "dsnerf-baseline" => {
                l.points_aug = 0.0;
                l.views_aug = 0.0;
                l.coarse_fine = 0.0;
            }
            "no-points" => l.points_aug = 0.0,
            "no-views" => l.views_aug = 0.0,
            "no-cfc" => l.coarse_fine = 0.0,
            "no-reliable-depth" => l.reliable_depth = false,
            "identical-aug" => self.model.identical_aug = true,
            other => {
                return Err(Error::Config(format!(
                    "--preset: unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::Config(format!("{k}: {m}")));
        if !(self.lr_init > 0.0 && self.lr_final > 0.0 && self.lr_final < self.lr_init) {
            return bad("train.lr_final", format!("need 0 < lr_final < lr_init, got {} and {}", self.lr_final, self.lr_init));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("train.warmup_fraction", format!("must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if self.batch_rays == 0 {
            return bad("train.batch_rays", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("train.beta1", "Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if self.log_every == 0 {
            return bad("train.log_every", "must be positive".into());
        }
        if self.sampling.n_coarse < 2 || self.sampling.n_fine == 0 {
            return bad("render.n_coarse", format!(
                "need n_coarse >= 2 and n_fine >= 1, got {} and {}",
                self.sampling.n_coarse, self.sampling.n_fine
            ));
        }
        self.loss.validate()?;
        self.reliability.validate()?;
        for v in [FieldVariant::Main, FieldVariant::PointsAug, FieldVariant::ViewsAug] {
            self.model.field(v).validate()?;
        }
        Ok(())
    }

    /// Canonical text form; its hash identifies checkpoints.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn points_aug_active(&self) -> bool {
        self.loss.points_aug > 0.0
    }

    pub fn views_aug_active(&self) -> bool {
        self.loss.views_aug > 0.0
    }
}

/// `lr_init · (lr_final / lr_init)^(iteration / iterations)`.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    if config.iterations == 0 {
        return config.lr_init;
    }
    let t = iteration.min(config.iterations) as f64 / config.iterations as f64;
    config.lr_init * (config.lr_final / config.lr_init).powf(t)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, p| splitmix(acc ^ splitmix(*p)))
}

/// The main coarse and fine fields and both augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub coarse: FieldParams,
    pub fine: FieldParams,
    pub points_aug: FieldParams,
    pub views_aug: FieldParams,
}

impl Models {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let s = |k: u64| mix(&[seed, 0xF1E1D, k]);
        Ok(Models {
            coarse: init_params(cfg.field(FieldVariant::Main), s(0))?,
            fine: init_params(cfg.field(FieldVariant::Main), s(1))?,
            points_aug: init_params(cfg.field(FieldVariant::PointsAug), s(2))?,
            views_aug: init_params(cfg.field(FieldVariant::ViewsAug), s(3))?,
        })
    }

    pub fn all(&self) -> [&FieldParams; 4] {
        [&self.coarse, &self.fine, &self.points_aug, &self.views_aug]
    }

    pub fn all_mut(&mut self) -> [&mut FieldParams; 4] {
        [&mut self.coarse, &mut self.fine, &mut self.points_aug, &mut self.views_aug]
    }

    pub fn total_len(&self) -> usize {
        self.all().iter().map(|m| m.len()).sum()
    }

    pub fn zero_grads(&self) -> [Vec<f64>; 4] {
        self.all().map(|m| vec![0.0; m.len()])
    }
}

/// Adam with bias-corrected moments over the concatenation of all four models.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update of `params` (taken as one vector, in order) with `grads`.
    pub fn step(&mut self, params: [&mut [f64]; 4], grads: &[Vec<f64>; 4], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut k = 0;
        for (p, g) in params.into_iter().zip(grads) {
            for (pi, gi) in p.iter_mut().zip(g) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                *pi -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                k += 1;
            }
        }
    }
}

/// A dataset prepared for training: bounds, nearest-view table, keypoints by view.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub render: RenderConfig,
    /// For each dataset view that is a train view, the nearest other train view.
    nearest: Vec<Option<usize>>,
    keypoints: Vec<Vec<SparsePoint>>,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &TrainConfig) -> Result<Self> {
        dataset.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::Data("dataset has no training views".into()));
        }
        let render = RenderConfig {
            near: dataset.near,
            far: dataset.far,
            n_coarse: cfg.sampling.n_coarse,
            n_fine: cfg.sampling.n_fine,
        };
        render.validate()?;
        let mut nearest = vec![None; dataset.views.len()];
        let needs_masks = cfg.loss.reliable_depth
            && (cfg.loss.points_aug > 0.0 || cfg.loss.views_aug > 0.0 || cfg.loss.coarse_fine > 0.0);
        if dataset.train.len() >= 2 {
            let poses: Vec<Pose> = dataset.train.iter().map(|&i| dataset.views[i].pose).collect();
            for (k, &i) in dataset.train.iter().enumerate() {
                nearest[i] = Some(dataset.train[nearest_train_view(k, &poses)?]);
            }
        } else if needs_masks {
            return Err(Error::Config(
                "reliability masks need at least two training views (scene.train_views)".into(),
            ));
        }
        let mut keypoints: Vec<Vec<SparsePoint>> = Vec::new();
        for &i in &dataset.train {
            let pts: Vec<SparsePoint> = dataset.sparse_depth.iter().filter(|p| p.view == i).copied().collect();
            if !pts.is_empty() {
                keypoints.push(pts);
            }
        }
        Ok(TrainData {
            dataset,
            render,
            nearest,
            keypoints,
        })
    }

    pub fn nearest(&self, view: usize) -> Option<usize> {
        self.nearest.get(view).copied().flatten()
    }
}

/// One ray of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayJob {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub target: [f64; 3],
    pub sparse_depth: Option<f64>,
}

/// `batch_rays` uniform train pixels, then all keypoints of one train view.
pub fn sample_batch(data: &TrainData<'_>, cfg: &TrainConfig, iteration: u64) -> Vec<RayJob> {
    let ds = data.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, iteration, 0xBA7C4]));
    let mut jobs = Vec::with_capacity(cfg.batch_rays);
    for _ in 0..cfg.batch_rays {
        let view = ds.train[rng.random_range(0..ds.train.len())];
        let v = &ds.views[view];
        let x = rng.random_range(0..v.intrinsics.width);
        let y = rng.random_range(0..v.intrinsics.height);
        jobs.push(RayJob {
            view,
            x,
            y,
            target: v.image.get(x, y),
            sparse_depth: None,
        });
    }
    if !data.keypoints.is_empty() {
        let group = &data.keypoints[rng.random_range(0..data.keypoints.len())];
        for p in group {
            jobs.push(RayJob {
                view: p.view,
                x: p.x,
                y: p.y,
                target: ds.views[p.view].image.get(p.x, p.y),
                sparse_depth: Some(p.depth),
            });
        }
    }
    jobs
}

/// Sample sets and verdicts of one ray; replaying a plan makes the loss a
/// deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPlan {
    pub coarse: SampleSet,
    pub fine: SampleSet,
    pub m_ap: Verdict,
    pub m_av: Verdict,
    pub m_cfc: Verdict,
}

struct RayEval {
    outputs: RayOutputs,
    coarse: RayPass,
    fine: RayPass,
    ap: Option<RayPass>,
    av: Option<RayPass>,
    plan: RayPlan,
    patch_evals: u64,
}

fn patch_error(data: &TrainData<'_>, job: &RayJob, z: f64, k: usize) -> Option<f64> {
    if !(z > 0.0) {
        return None;
    }
    let dst = data.nearest(job.view)?;
    let ds = data.dataset;
    patch_error_unchecked((job.x, job.y), z, &ds.views[job.view], &ds.views[dst], k)
}

fn eval_ray(
    models: &Models,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    iteration: u64,
    job: &RayJob,
    ray_seed: u64,
    frozen: Option<&RayPlan>,
) -> Result<RayEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(ray_seed);
    let ray = data.dataset.views[job.view].ray(job.x, job.y);
    let rc = &data.render;
    let coarse_set = match frozen {
        Some(p) => p.coarse.clone(),
        None => stratified_sample(rc.near, rc.far, rc.n_coarse, &mut rng)?,
    };
    let coarse = RayPass::trace(&models.coarse, &ray, coarse_set.clone());
    let fine_set = match frozen {
        Some(p) => p.fine.clone(),
        None => hierarchical_sample(coarse.weights(), &coarse_set, rc.n_fine, &mut rng)?,
    };
    let fine = RayPass::trace(&models.fine, &ray, fine_set.clone());
    let ap = cfg
        .points_aug_active()
        .then(|| RayPass::trace(&models.points_aug, &ray, coarse_set.clone()));
    let av = cfg
        .views_aug_active()
        .then(|| RayPass::trace(&models.views_aug, &ray, coarse_set.clone()));

    // An inactive augmentation reports the targets, so its terms vanish.
    let idle_z = job.sparse_depth.unwrap_or(0.0);
    let mut out = RayOutputs {
        c_c: coarse.color(),
        c_f: fine.color(),
        c_ap: ap.as_ref().map_or(job.target, |p| p.color()),
        c_av: av.as_ref().map_or(job.target, |p| p.color()),
        z_c: coarse.depth(),
        z_f: fine.depth(),
        z_ap: ap.as_ref().map_or(idle_z, |p| p.depth()),
        z_av: av.as_ref().map_or(idle_z, |p| p.depth()),
        target: job.target,
        sparse_depth: job.sparse_depth,
        ..RayOutputs::default()
    };

    let mut patch_evals = 0;
    if let Some(p) = frozen {
        out.m_ap = p.m_ap;
        out.m_av = p.m_av;
        out.m_cfc = p.m_cfc;
    } else if cfg.weights().regularizers_active(iteration) {
        let l = &cfg.loss;
        let wanted = [
            ap.is_some() && l.points_aug > 0.0,
            av.is_some() && l.views_aug > 0.0,
            l.coarse_fine > 0.0,
        ];
        if !l.reliable_depth {
            let force = |on: bool| if on { Verdict::AltReliable } else { Verdict::Neither };
            out.m_ap = force(wanted[0]);
            out.m_av = force(wanted[1]);
            out.m_cfc = force(wanted[2]);
        } else if wanted.iter().any(|w| *w) {
            let (k, tau) = (cfg.reliability.k, cfg.reliability.e_tau);
            let mut eval = |z: f64| {
                patch_evals += 1;
                patch_error(data, job, z, k)
            };
            let e_c = eval(out.z_c);
            if wanted[0] {
                out.m_ap = reliability_mask(e_c, eval(out.z_ap), tau).verdict;
            }
            if wanted[1] {
                out.m_av = reliability_mask(e_c, eval(out.z_av), tau).verdict;
            }
            if wanted[2] {
                out.m_cfc = reliability_mask(e_c, eval(out.z_f), tau).verdict;
            }
        }
    }
    Ok(RayEval {
        outputs: out,
        plan: RayPlan {
            coarse: coarse_set,
            fine: fine_set,
            m_ap: out.m_ap,
            m_av: out.m_av,
            m_cfc: out.m_cfc,
        },
        coarse,
        fine,
        ap,
        av,
        patch_evals,
    })
}

/// Loss, parameter gradients and replay plans of one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub breakdown: LossBreakdown,
    pub grads: [Vec<f64>; 4],
    pub plans: Vec<RayPlan>,
    /// Patch reprojection errors evaluated for the verdicts.
    pub patch_evals: u64,
    pub verdicts: VerdictCounts,
}

/// How often each verdict occurred, per mask (`[m_ap, m_av, m_cfc]`, then `[+1, -1, 0]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerdictCounts(pub [[u64; 3]; 3]);

impl VerdictCounts {
    fn record(&mut self, o: &RayOutputs) {
        for (row, v) in self.0.iter_mut().zip([o.m_ap, o.m_av, o.m_cfc]) {
            row[match v {
                Verdict::AltReliable => 0,
                Verdict::MainReliable => 1,
                Verdict::Neither => 2,
            }] += 1;
        }
    }

    fn add(&mut self, o: &VerdictCounts) {
        for (a, b) in self.0.iter_mut().zip(o.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Evaluates the batch loss and its gradient with respect to all four models.
/// With `frozen`, sample positions and verdicts are replayed instead of drawn.
pub fn batch_loss(
    models: &Models,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    iteration: u64,
    jobs: &[RayJob],
    frozen: Option<&[RayPlan]>,
    exec: Execution,
) -> Result<BatchResult> {
    if let Some(f) = frozen {
        if f.len() != jobs.len() {
            return Err(Error::LengthMismatch {
                what: "ray plans",
                expected: jobs.len(),
                got: f.len(),
            });
        }
    }
    let weights = cfg.weights();
    let scales = LossScales {
        weights: weights.scheduled(iteration),
        n_rays: jobs.len(),
        n_sparse: jobs.iter().filter(|j| j.sparse_depth.is_some()).count(),
    };
    let parts = exec.map_chunks(jobs, RAY_CHUNK, |start, chunk| -> Result<_> {
        let mut grads = models.zero_grads();
        let mut terms = LossTerms::default();
        let mut plans = Vec::with_capacity(chunk.len());
        let mut evals = 0;
        let mut counts = VerdictCounts::default();
        for (k, job) in chunk.iter().enumerate() {
            let idx = start + k;
            let seed = mix(&[cfg.seed, iteration, idx as u64]);
            let r = eval_ray(models, data, cfg, iteration, job, seed, frozen.map(|f| &f[idx]))?;
            let (t, g) = ray_loss(&r.outputs, &scales);
            terms.add(&t);
            let [gc, gf, gap, gav] = &mut grads;
            r.coarse.backward(&models.coarse, g.c_c, g.z_c, gc)?;
            r.fine.backward(&models.fine, g.c_f, g.z_f, gf)?;
            if let Some(p) = &r.ap {
                p.backward(&models.points_aug, g.c_ap, g.z_ap, gap)?;
            }
            if let Some(p) = &r.av {
                p.backward(&models.views_aug, g.c_av, g.z_av, gav)?;
            }
            counts.record(&r.outputs);
            evals += r.patch_evals;
            plans.push(r.plan);
        }
        Ok((terms, grads, plans, evals, counts))
    });
    let mut grads = models.zero_grads();
    let mut terms = LossTerms::default();
    let mut plans = Vec::with_capacity(jobs.len());
    let mut patch_evals = 0;
    let mut verdicts = VerdictCounts::default();
    for part in parts {
        let (t, g, p, e, c) = part?;
        terms.add(&t);
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
        plans.extend(p);
        patch_evals += e;
        verdicts.add(&c);
    }
    Ok(BatchResult {
        breakdown: LossBreakdown::from_terms(terms, scales.weights),
        grads,
        plans,
        patch_evals,
        verdicts,
    })
}

/// Per-ray outputs of a replayed batch, without gradients.
pub(crate) fn replay_outputs(
    models: &Models,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    iteration: u64,
    jobs: &[RayJob],
    plans: &[RayPlan],
) -> Result<Vec<RayOutputs>> {
    jobs.iter()
        .zip(plans)
        .map(|(job, plan)| eval_ray(models, data, cfg, iteration, job, 0, Some(plan)).map(|r| r.outputs))
        .collect()
}

/// Models plus optimizer state; `iteration` is the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub models: Models,
    pub adam: Adam,
    pub iteration: u64,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub iteration: u64,
    pub lr: f64,
    pub breakdown: LossBreakdown,
    pub patch_evals: u64,
    pub verdicts: VerdictCounts,
}

impl TrainState {
    pub fn new(mut config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.loss.warmup_iters = config.warmup_iters();
        let models = Models::init(&config.model, config.seed)?;
        let adam = Adam::new(models.total_len());
        Ok(TrainState {
            config,
            models,
            adam,
            iteration: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }
}

fn check_finite(r: &BatchResult, iteration: u64) -> Result<()> {
    if let Some(term) = r.breakdown.non_finite_term() {
        return Err(Error::NonFinite {
            term: term.to_string(),
            iteration,
            detail: format!("loss terms {:?}, weights {:?}", r.breakdown.terms, r.breakdown.weights),
        });
    }
    for (name, g) in MODEL_NAMES.iter().zip(&r.grads) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("gradient of {name}"),
                iteration,
                detail: format!("parameter {i} has gradient {}", g[i]),
            });
        }
    }
    Ok(())
}

/// One optimization step at `state.iteration`.
pub fn train_step(state: &mut TrainState, data: &TrainData<'_>, exec: Execution) -> Result<StepReport> {
    let it = state.iteration;
    let cfg = &state.config;
    let jobs = sample_batch(data, cfg, it);
    let r = batch_loss(&state.models, data, cfg, it, &jobs, None, exec)?;
    check_finite(&r, it)?;
    let lr = lr_at(it, cfg);
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
    let params = state.models.all_mut().map(|m| m.values_mut());
    state.adam.step(params, &r.grads, lr, b1, b2, eps);
    state.iteration += 1;
    Ok(StepReport {
        iteration: it,
        lr,
        breakdown: r.breakdown,
        patch_evals: r.patch_evals,
        verdicts: r.verdicts,
    })
}

/// Unweighted terms and weighted total of one logged iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub lr: f64,
    pub terms: [f64; 5],
    pub total: f64,
}

impl MetricsRow {
    pub fn from_report(r: &StepReport) -> Self {
        MetricsRow {
            iter: r.iteration,
            lr: r.lr,
            terms: r.breakdown.terms.as_array(),
            total: r.breakdown.total,
        }
    }

    pub fn csv_line(&self) -> String {
        let t = self.terms;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.lr, t[0], t[1], t[2], t[3], t[4], self.total
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    pub execution: Execution,
    /// Where checkpoints and the metrics log go; nothing is written when `None`.
    pub out_dir: Option<&'a Path>,
    /// Stop early once this many iterations are complete.
    pub stop_at: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    /// Patch reprojection errors evaluated over the run, by iteration.
    pub patch_evals: Vec<u64>,
    pub verdicts: VerdictCounts,
}

fn prepare_metrics(path: &Path, resume_from: u64) -> Result<fs::File> {
    let mut keep = String::from(METRICS_HEADER);
    keep.push('\n');
    if resume_from > 0 && path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().skip(1) {
            let iter: Option<u64> = line.split(',').next().and_then(|t| t.parse().ok());
            if iter.is_some_and(|i| i < resume_from) {
                keep.push_str(line);
                keep.push('\n');
            }
        }
    }
    fs::write(path, keep).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Runs [`train_step`] until the configured iteration count (or `stop_at`),
/// logging every `log_every` iterations and checkpointing every `checkpoint_every`.
pub fn train(state: &mut TrainState, data: &TrainData<'_>, opts: TrainOptions<'_>) -> Result<TrainSummary> {
    let end = opts
        .stop_at
        .map_or(state.config.iterations, |s| s.min(state.config.iterations));
    let mut metrics = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some((prepare_metrics(&dir.join(METRICS_FILE), state.iteration)?, dir.join(METRICS_FILE)))
        }
        None => None,
    };
    let mut summary = TrainSummary::default();
    while state.iteration < end {
        let report = train_step(state, data, opts.execution)?;
        summary.patch_evals.push(report.patch_evals);
        summary.verdicts.add(&report.verdicts);
        let it = report.iteration;
        if it % state.config.log_every == 0 || it + 1 == state.config.iterations {
            let row = MetricsRow::from_report(&report);
            if let Some((file, path)) = &mut metrics {
                writeln!(file, "{}", row.csv_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            summary.rows.push(row);
        }
        let every = state.config.checkpoint_every;
        if let Some(dir) = opts.out_dir {
            if every > 0 && state.iteration % every == 0 && state.iteration < end {
                save_checkpoint(&dir.join(CHECKPOINT_FILE), state)?;
            }
        }
    }
    if let Some(dir) = opts.out_dir {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), state)?;
    }
    Ok(summary)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes the state: magic, version, config digest, iteration, config
/// text, per-model shape headers, then parameters and Adam moments as
/// little-endian f64. Randomness is a pure function of `(seed, iteration)`,
/// so no generator state needs storing.
pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&state.config.digest());
    put_u64(&mut out, state.iteration);
    put_u64(&mut out, state.adam.t);
    let text = state.config.canonical();
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    let models = state.models.all();
    put_u32(&mut out, models.len() as u32);
    for m in models {
        let c = m.config();
        put_u32(&mut out, c.variant.code());
        put_u32(&mut out, c.hidden_layers as u32);
        put_u32(&mut out, c.hidden_width as u32);
        put_u32(&mut out, c.skip_layer.map_or(u32::MAX, |s| s as u32));
        put_u32(&mut out, c.bands.l_p);
        put_u32(&mut out, c.bands.l_v);
        put_u32(&mut out, c.bands.l_p_ap);
        put_u64(&mut out, m.seed());
        put_u64(&mut out, m.len() as u64);
    }
    for m in models {
        put_f64s(&mut out, m.values());
    }
    put_f64s(&mut out, &state.adam.m);
    put_f64s(&mut out, &state.adam.v);
    out
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_bytes(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!("{}: truncated checkpoint", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let iteration = r.u64()?;
    let t = r.u64()?;
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| bad("config text is not UTF-8"))?;
    let mut config: TrainConfig = toml::from_str(text).map_err(|e| bad(&format!("embedded config: {e}")))?;
    config.loss.warmup_iters = config.warmup_iters();
    if config.digest() != digest {
        return Err(bad("config digest mismatch"));
    }
    let count = r.u32()? as usize;
    if count != 4 {
        return Err(bad(&format!("expected 4 models, found {count}")));
    }
    let mut shapes = Vec::with_capacity(4);
    for _ in 0..4 {
        let variant = FieldVariant::from_code(r.u32()?).ok_or_else(|| bad("unknown field variant"))?;
        let hidden_layers = r.u32()? as usize;
        let hidden_width = r.u32()? as usize;
        let skip = r.u32()?;
        let bands = Bands {
            l_p: r.u32()?,
            l_v: r.u32()?,
            l_p_ap: r.u32()?,
        };
        let seed = r.u64()?;
        let n = r.u64()? as usize;
        let cfg = FieldConfig {
            variant,
            hidden_layers,
            hidden_width,
            skip_layer: (skip != u32::MAX).then_some(skip as usize),
            bands,
        };
        shapes.push((cfg, seed, n));
    }
    let mut params = Vec::with_capacity(4);
    for (cfg, seed, n) in &shapes {
        let values = r.f64s(*n)?;
        params.push(FieldParams::from_values(*cfg, values, *seed).map_err(|e| bad(&e.to_string()))?);
    }
    let total: usize = shapes.iter().map(|s| s.2).sum();
    let m = r.f64s(total)?;
    let v = r.f64s(total)?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after checkpoint"));
    }
    let mut it = params.into_iter();
    let models = Models {
        coarse: it.next().expect("4 models"),
        fine: it.next().expect("4 models"),
        points_aug: it.next().expect("4 models"),
        views_aug: it.next().expect("4 models"),
    };
    for (model, variant) in models.all().iter().zip([
        FieldVariant::Main,
        FieldVariant::Main,
        FieldVariant::PointsAug,
        FieldVariant::ViewsAug,
    ]) {
        if *model.config() != config.model.field(variant) {
            return Err(bad("model shapes disagree with the embedded config"));
        }
    }
    Ok(TrainState {
        config,
        models,
        adam: Adam { m, v, t },
        iteration,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

/// Loads a checkpoint to continue training under `config`, which must match the
/// configuration the checkpoint was written with.
pub fn resume(path: &Path, config: &TrainConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if state.config.digest() != config.digest() {
        return Err(Error::Config(format!(
            "{}: checkpoint was written with a different configuration",
            path.display()
        )));
    }
    Ok(state)
}

/// Full-frame render of one camera.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: Image,
    /// Fine-pass expected termination distance.
    pub depth: DepthMap,
    pub coarse_depth: Vec<f64>,
    pub opacity: Vec<f64>,
    /// Coarse depths of the points and views augmentations, when requested.
    pub aug_depth: Option<[Vec<f64>; 2]>,
}

/// Renders with the main coarse and fine fields: bin-center coarse samples,
/// fine samples drawn with a per-pixel generator derived from `seed`.
pub fn render_view(
    models: &Models,
    intr: &Intrinsics,
    pose: &Pose,
    render: &RenderConfig,
    seed: u64,
    with_aug: bool,
    exec: Execution,
) -> Result<RenderedView> {
    render.validate()?;
    let (w, h) = (intr.width, intr.height);
    let coarse_set = midpoint_samples(render.near, render.far, render.n_coarse)?;
    let pixels: Vec<usize> = (0..w * h).collect();
    let parts = exec.map_chunks(&pixels, w.max(1), |_, chunk| -> Result<Vec<_>> {
        chunk
            .iter()
            .map(|&i| {
                let ray = pixel_center_ray(intr, pose, i % w, i / w);
                let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, i as u64]));
                let c = RayPass::trace(&models.coarse, &ray, coarse_set.clone());
                let fine_set = hierarchical_sample(c.weights(), &coarse_set, render.n_fine, &mut rng)?;
                let f = RayPass::trace(&models.fine, &ray, fine_set);
                let aug = with_aug.then(|| {
                    [
                        RayPass::trace(&models.points_aug, &ray, coarse_set.clone()).depth(),
                        RayPass::trace(&models.views_aug, &ray, coarse_set.clone()).depth(),
                    ]
                });
                Ok((f.color(), f.depth(), c.depth(), f.opacity(), aug))
            })
            .collect()
    });
    let mut colors = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut coarse_depth = Vec::with_capacity(w * h);
    let mut opacity = Vec::with_capacity(w * h);
    let mut aug = [Vec::new(), Vec::new()];
    for part in parts {
        for (c, d, cd, o, a) in part? {
            colors.push(c);
            depth.push(d);
            coarse_depth.push(cd);
            opacity.push(o);
            if let Some([p, v]) = a {
                aug[0].push(p);
                aug[1].push(v);
            }
        }
    }
    Ok(RenderedView {
        image: Image::from_pixels(w, h, colors)?,
        depth: DepthMap::from_values(w, h, depth)?,
        coarse_depth,
        opacity,
        aug_depth: with_aug.then_some(aug),
    })
}

/// Per-pixel verdict maps of one train view under the current models.
#[derive(Debug, Clone)]
pub struct MaskMaps {
    pub width: usize,
    pub height: usize,
    pub m_ap: Vec<Verdict>,
    pub m_av: Vec<Verdict>,
    pub m_cfc: Vec<Verdict>,
}

pub fn mask_maps(
    models: &Models,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    view: usize,
    seed: u64,
    exec: Execution,
) -> Result<MaskMaps> {
    let ds = data.dataset;
    if data.nearest(view).is_none() {
        return Err(Error::Config(format!(
            "view {view} is not a training view with a neighbour; masks need two training views"
        )));
    }
    let v = &ds.views[view];
    let r = render_view(models, &v.intrinsics, &v.pose, &data.render, seed, true, exec)?;
    let [z_ap, z_av] = r.aug_depth.expect("requested augmentation depths");
    let (w, h) = (v.intrinsics.width, v.intrinsics.height);
    let tau = cfg.reliability.e_tau;
    let k = cfg.reliability.k;
    let pixels: Vec<usize> = (0..w * h).collect();
    let rows = exec.map_chunks(&pixels, w.max(1), |_, chunk| {
        chunk
            .iter()
            .map(|&i| {
                let job = RayJob {
                    view,
                    x: i % w,
                    y: i / w,
                    target: [0.0; 3],
                    sparse_depth: None,
                };
                let e_c = patch_error(data, &job, r.coarse_depth[i], k);
                let e_f = patch_error(data, &job, r.depth.values()[i], k);
                [
                    reliability_mask(e_c, patch_error(data, &job, z_ap[i], k), tau).verdict,
                    reliability_mask(e_c, patch_error(data, &job, z_av[i], k), tau).verdict,
                    reliability_mask(e_c, e_f, tau).verdict,
                ]
            })
            .collect::<Vec<_>>()
    });
    let mut maps = MaskMaps {
        width: w,
        height: h,
        m_ap: Vec::with_capacity(w * h),
        m_av: Vec::with_capacity(w * h),
        m_cfc: Vec::with_capacity(w * h),
    };
    for [a, b, c] in rows.into_iter().flatten() {
        maps.m_ap.push(a);
        maps.m_av.push(b);
        maps.m_cfc.push(c);
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, sample_sparse_depth, SceneSpec};

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            batch_rays: 12,
            warmup_fraction: 0.5,
            checkpoint_every: 2,
            log_every: 1,
            model: ModelConfig {
                hidden_layers: 2,
                hidden_width: 16,
                skip_layer: Some(1),
                ..ModelConfig::desk()
            },
            sampling: SamplingConfig { n_coarse: 8, n_fine: 8 },
            ..TrainConfig::desk()
        }
    }

    fn tiny_dataset() -> Dataset {
        let spec = SceneSpec::threeplanes(16, 16, 4, 2);
        let mut d = generate_scene(&spec, 0).unwrap();
        d.sparse_depth = sample_sparse_depth(&d, 5, 80.0, 0.0, 0).unwrap();
        d
    }

    #[test]
    fn lr_schedule_examples() {
        let c = TrainConfig::desk();
        assert!((lr_at(0, &c) - 5e-4).abs() < 1e-18);
        assert!((lr_at(c.iterations, &c) - 5e-6).abs() < 1e-18);
        assert!((lr_at(c.iterations / 2, &c) - (5e-4f64 * 5e-6).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let mut adam = Adam::new(1);
        let mut p = [2.0];
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 2.0f64);
        for t in 1..=50 {
            let g = 2.0 * (q - 0.5);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            q -= lr * mh / (vh.sqrt() + eps);
            let grads = [vec![2.0 * (p[0] - 0.5)], vec![], vec![], vec![]];
            let (mut e1, mut e2, mut e3) = ([0.0; 0], [0.0; 0], [0.0; 0]);
            adam.step([&mut p, &mut e1, &mut e2, &mut e3], &grads, lr, b1, b2, eps);
            assert!((p[0] - q).abs() < 1e-12);
        }
    }

    #[test]
    fn presets_set_expected_weights() {
        for name in PRESETS {
            let mut c = TrainConfig::desk();
            c.apply_preset(name).unwrap();
            c.validate().unwrap();
        }
        let mut c = TrainConfig::desk();
        c.apply_preset("dsnerf-baseline").unwrap();
        assert_eq!((c.loss.points_aug, c.loss.views_aug, c.loss.coarse_fine), (0.0, 0.0, 0.0));
        assert!(TrainConfig::desk().apply_preset("bogus").is_err());
        let mut bad = TrainConfig::desk();
        bad.lr_final = 1e-3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.iterations = 0;
        let data = TrainData::new(&ds, &cfg).unwrap();
        let mut state = TrainState::new(cfg.clone()).unwrap();
        let init = state.clone();
        let dir = tempfile::tempdir().unwrap();
        train(&mut state, &data, TrainOptions { out_dir: Some(dir.path()), ..Default::default() }).unwrap();
        assert_eq!(state, init);
        assert_eq!(load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap(), init);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let data = TrainData::new(&ds, &cfg).unwrap();
        let mut state = TrainState::new(cfg).unwrap();
        train_step(&mut state, &data, Execution::Sequential).unwrap();
        let bytes = checkpoint_bytes(&state);
        let p = Path::new("mem");
        assert_eq!(parse_checkpoint(&bytes, p).unwrap(), state);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_checkpoint(&bad, p).is_err());
        let mut other = state.config.clone();
        other.seed += 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.snrf");
        save_checkpoint(&path, &state).unwrap();
        assert!(matches!(resume(&path, &other), Err(Error::Config(_))));
    }

    #[test]
    fn masks_wait_for_warmup() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let data = TrainData::new(&ds, &cfg).unwrap();
        let mut state = TrainState::new(cfg.clone()).unwrap();
        let summary = train(&mut state, &data, TrainOptions::default()).unwrap();
        let warm = cfg.warmup_iters() as usize;
        assert_eq!(warm, 3);
        assert!(summary.patch_evals[..warm].iter().all(|n| *n == 0));
        assert!(summary.patch_evals[warm..].iter().all(|n| *n > 0));
        for row in &summary.rows[..warm] {
            assert_eq!(&row.terms[2..], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn baseline_never_computes_masks() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.apply_preset("dsnerf-baseline").unwrap();
        let data = TrainData::new(&ds, &cfg).unwrap();
        let mut state = TrainState::new(cfg).unwrap();
        let s = train(&mut state, &data, TrainOptions::default()).unwrap();
        assert!(s.patch_evals.iter().all(|n| *n == 0));
        assert!(s.rows.iter().all(|r| r.terms[2..] == [0.0, 0.0, 0.0]));
        // unused augmentations stay at their initialization
        let init = Models::init(&state.config.model, state.config.seed).unwrap();
        assert_eq!(state.models.points_aug, init.points_aug);
        assert_eq!(state.models.views_aug, init.views_aug);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let data = TrainData::new(&ds, &cfg).unwrap();
        let mut a = TrainState::new(cfg.clone()).unwrap();
        let mut b = TrainState::new(cfg).unwrap();
        train(&mut a, &data, TrainOptions { execution: Execution::Sequential, ..Default::default() }).unwrap();
        train(&mut b, &data, TrainOptions { execution: Execution::Parallel, ..Default::default() }).unwrap();
        assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let data = TrainData::new(&ds, &cfg).unwrap();
        let full = tempfile::tempdir().unwrap();
        let mut a = TrainState::new(cfg.clone()).unwrap();
        let opts = |dir| TrainOptions { execution: Execution::Sequential, out_dir: Some(dir), stop_at: None };
        train(&mut a, &data, opts(full.path())).unwrap();

        let split = tempfile::tempdir().unwrap();
        let mut b = TrainState::new(cfg.clone()).unwrap();
        train(&mut b, &data, TrainOptions { stop_at: Some(4), ..opts(split.path()) }).unwrap();
        let mut c = resume(&split.path().join(CHECKPOINT_FILE), &cfg).unwrap();
        assert_eq!(c.iteration, 4);
        train(&mut c, &data, opts(split.path())).unwrap();
        assert_eq!(c, a);
        for f in [METRICS_FILE, CHECKPOINT_FILE] {
            assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(split.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn step_descends_on_frozen_batch() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.lr_init = 1e-4;
        cfg.lr_final = 1e-6;
        let data = TrainData::new(&ds, &cfg).unwrap();
        let mut state = TrainState::new(cfg.clone()).unwrap();
        let it = 4;
        let jobs = sample_batch(&data, &cfg, it);
        let before = batch_loss(&state.models, &data, &cfg, it, &jobs, None, Execution::Sequential).unwrap();
        let params = state.models.all_mut().map(|m| m.values_mut());
        state.adam.step(params, &before.grads, 1e-4, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let after = batch_loss(&state.models, &data, &cfg, it, &jobs, Some(&before.plans), Execution::Sequential).unwrap();
        assert!(after.breakdown.total < before.breakdown.total);
    }

    #[test]
    fn depth_terms_touch_only_their_models() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.warmup_fraction = 0.0;
        let data = TrainData::new(&ds, &cfg).unwrap();
        let models = Models::init(&cfg.model, 1).unwrap();
        let jobs: Vec<RayJob> = sample_batch(&data, &cfg, 0).into_iter().map(|j| RayJob { sparse_depth: None, ..j }).collect();
        let base = batch_loss(&models, &data, &cfg, 0, &jobs, None, Execution::Sequential).unwrap();
        // zero every weight except one depth term, forcing both verdict directions
        let only = |idx: usize, v: Verdict| {
            let mut c = cfg.clone();
            c.loss = LossWeights {
                color: 0.0,
                sparse_depth: 0.0,
                points_aug: if idx == 0 { 1.0 } else { 0.0 },
                views_aug: if idx == 1 { 1.0 } else { 0.0 },
                coarse_fine: if idx == 2 { 1.0 } else { 0.0 },
                ..c.loss
            };
            let plans: Vec<RayPlan> = base.plans.iter().map(|p| RayPlan { m_ap: v, m_av: v, m_cfc: v, ..p.clone() }).collect();
            batch_loss(&models, &data, &c, 0, &jobs, Some(&plans), Execution::Sequential).unwrap().grads
        };
        let nz = |g: &Vec<f64>| g.iter().any(|v| *v != 0.0);
        for v in [Verdict::AltReliable, Verdict::MainReliable] {
            let g = only(0, v);
            assert!(!nz(&g[1]) && !nz(&g[3]));
            assert_eq!(nz(&g[0]), v == Verdict::AltReliable);
            assert_eq!(nz(&g[2]), v == Verdict::MainReliable);
            let g = only(1, v);
            assert!(!nz(&g[1]) && !nz(&g[2]));
            assert_eq!(nz(&g[0]), v == Verdict::AltReliable);
            assert_eq!(nz(&g[3]), v == Verdict::MainReliable);
            let g = only(2, v);
            assert!(!nz(&g[2]) && !nz(&g[3]));
            assert_eq!(nz(&g[0]), v == Verdict::AltReliable);
            assert_eq!(nz(&g[1]), v == Verdict::MainReliable);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_term() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let data = TrainData::new(&ds, &cfg).unwrap();
        let mut state = TrainState::new(cfg).unwrap();
        state.models.fine.values_mut().fill(f64::NAN);
        let err = train_step(&mut state, &data, Execution::Sequential).unwrap_err();
        match err {
            Error::NonFinite { term, iteration, .. } => {
                assert_eq!(iteration, 0);
                assert_eq!(term, "L_color");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let data = TrainData::new(&ds, &cfg).unwrap();
        let models = Models::init(&cfg.model, 0).unwrap();
        let v = &ds.views[1];
        let a = render_view(&models, &v.intrinsics, &v.pose, &data.render, 3, false, Execution::Parallel).unwrap();
        let b = render_view(&models, &v.intrinsics, &v.pose, &data.render, 3, false, Execution::Sequential).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth, b.depth);
        for (d, o) in a.depth.values().iter().zip(&a.opacity) {
            if *o > 0.99 {
                assert!(*d >= data.render.near * o && *d <= data.render.far);
            }
        }
    }
}
