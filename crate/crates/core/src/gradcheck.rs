//! Finite-difference gradient checks.
//!
//! Every suite compares analytic derivatives against central differences in
//! double precision on tiny networks. Inputs that sit behind a stop-gradient
//! are not differenced; their analytic gradient must be exactly zero instead.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{encode_backward, positional_encode, EncodingBand};
use crate::error::Result;
use crate::exec::Execution;
use crate::field::{init_params, Bands, FieldConfig, FieldParams, FieldVariant};
use crate::losses::{masked_depth_loss, ray_loss, LossScales, RayOutputs};
use crate::reliability::Verdict;
use crate::render::{compute_weights, composite, composite_backward, RayPass, SampleSet};
use crate::camera::Ray;
use crate::scene::{generate_scene, sample_sparse_depth, SceneSpec};
use crate::trainer::{batch_loss, replay_outputs, sample_batch, ModelConfig, Models, SamplingConfig, TrainConfig, TrainData};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

/// Relative error with an absolute floor: differences between gradients whose
/// magnitudes are both below `1e-4` are measured against `1e-4`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Signature of [`encode_backward`]; the encoding suite accepts a substitute.
pub type EncodeBackward = fn(&[f64], EncodingBand, &[f64], &mut [f64]);

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub checks: usize,
    pub max_rel_err: f64,
    /// Where the largest error occurred.
    pub worst: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks > 0 && self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub suites: Vec<SuiteReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        !self.suites.is_empty() && self.suites.iter().all(SuiteReport::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.suites.iter().map(|s| s.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>7} {:>12}  status  worst", "suite", "checks", "max rel err")?;
        for s in &self.suites {
            writeln!(
                f,
                "{:<22} {:>7} {:>12.3e}  {:<6}  {}",
                s.name,
                s.checks,
                s.max_rel_err,
                if s.passed() { "pass" } else { "FAIL" },
                s.worst
            )?;
        }
        write!(
            f,
            "overall: {} (max rel err {:.3e}, tolerance {TOLERANCE:e})",
            if self.passed() { "pass" } else { "FAIL" },
            self.max_rel_err()
        )
    }
}

struct Tracker {
    report: SuiteReport,
}

impl Tracker {
    fn new(name: impl Into<String>) -> Self {
        Tracker {
            report: SuiteReport {
                name: name.into(),
                checks: 0,
                max_rel_err: 0.0,
                worst: String::new(),
            },
        }
    }

    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.report.checks += 1;
        // NaN must register as a failure
        if !(err <= self.report.max_rel_err) {
            self.report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            self.report.worst = what();
        }
    }

    fn compare(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        self.record(rel_err(analytic, numeric), || {
            format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what())
        });
    }

    /// A stopped input: any nonzero analytic gradient is an infinite error.
    fn stopped(&mut self, analytic: f64, what: impl FnOnce() -> String) {
        let err = if analytic == 0.0 { 0.0 } else { f64::INFINITY };
        self.record(err, || format!("{} should be stopped, got {analytic:.6e}", what()));
    }

    fn finish(self) -> SuiteReport {
        self.report
    }
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

/// The 2x16 fields used by every suite.
pub fn tiny_field(variant: FieldVariant) -> FieldConfig {
    FieldConfig {
        variant,
        hidden_layers: 2,
        hidden_width: 16,
        skip_layer: Some(1),
        bands: Bands {
            l_p: 4,
            l_v: 2,
            l_p_ap: 1,
        },
    }
}

fn uniform3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

fn unit3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = uniform3(rng, -1.0, 1.0);
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 {
            return v.map(|c| c / n);
        }
    }
}

pub fn encoding_suite(seed: u64, backward: EncodeBackward) -> Result<SuiteReport> {
    let mut t = Tracker::new("encoding");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for band in [EncodingBand::up_to(4), EncodingBand::new(1, 3)?, EncodingBand::up_to(0)] {
        for _ in 0..4 {
            let x = uniform3(&mut rng, -std::f64::consts::PI, std::f64::consts::PI);
            let d_out: Vec<f64> = (0..band.encoded_len(3)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dx = [0.0; 3];
            backward(&x, band, &d_out, &mut dx);
            for i in 0..3 {
                let numeric = central(
                    |v| {
                        let mut y = x;
                        y[i] = v;
                        positional_encode(&y, band).iter().zip(&d_out).map(|(a, b)| a * b).sum()
                    },
                    x[i],
                );
                t.compare(dx[i], numeric, || format!("band {}..{} x[{i}]", band.lo(), band.hi()));
            }
        }
    }
    Ok(t.finish())
}

/// `Σ dσ·σ + Σ dc·c` over a small batch, against parameters and inputs.
pub fn field_suite(variant: FieldVariant, seed: u64) -> Result<SuiteReport> {
    let mut t = Tracker::new(format!("field/{variant}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(tiny_field(variant), seed)?;
    let n = 4;
    let points: Vec<[f64; 3]> = (0..n).map(|_| uniform3(&mut rng, -1.0, 1.0)).collect();
    let dirs: Vec<[f64; 3]> = (0..n).map(|_| unit3(&mut rng)).collect();
    let d_sigma: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d_color: Vec<[f64; 3]> = (0..n).map(|_| uniform3(&mut rng, -1.0, 1.0)).collect();
    let objective = |p: &FieldParams, pts: &[[f64; 3]], ds: &[[f64; 3]]| -> f64 {
        let pass = p.forward(pts, ds);
        let mut v = 0.0;
        for i in 0..n {
            v += d_sigma[i] * pass.sigma()[i];
            for k in 0..3 {
                v += d_color[i][k] * pass.color()[i][k];
            }
        }
        v
    };
    let pass = params.forward(&points, &dirs);
    let mut grads = vec![0.0; params.len()];
    let inputs = pass.backward_with_inputs(&params, &d_sigma, &d_color, &mut grads)?;

    let mut probe = params.clone();
    for j in 0..params.len() {
        let x0 = params.values()[j];
        let numeric = central(
            |v| {
                probe.values_mut()[j] = v;
                objective(&probe, &points, &dirs)
            },
            x0,
        );
        probe.values_mut()[j] = x0;
        t.compare(grads[j], numeric, || format!("param {j}"));
    }
    for i in 0..n {
        for k in 0..3 {
            let numeric = central(
                |v| {
                    let mut p = points.clone();
                    p[i][k] = v;
                    objective(&params, &p, &dirs)
                },
                points[i][k],
            );
            t.compare(inputs.points[i][k], numeric, || format!("point {i}[{k}]"));
            if params.config().uses_view() {
                let numeric = central(
                    |v| {
                        let mut d = dirs.clone();
                        d[i][k] = v;
                        objective(&params, &points, &d)
                    },
                    dirs[i][k],
                );
                t.compare(inputs.dirs[i][k], numeric, || format!("dir {i}[{k}]"));
            }
        }
    }
    Ok(t.finish())
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> Result<SampleSet> {
    let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(2.0..6.0)).collect();
    s.sort_by(f64::total_cmp);
    SampleSet::new(s, 2.0, 6.0)
}

/// Compositing gradients with respect to per-sample densities and colors.
pub fn composite_suite(seed: u64) -> Result<SuiteReport> {
    let mut t = Tracker::new("render/composite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..5 {
        let n = 8;
        let samples = random_samples(&mut rng, n)?;
        let sigmas: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.0)).collect();
        let colors: Vec<[f64; 3]> = (0..n).map(|_| uniform3(&mut rng, 0.0, 1.0)).collect();
        let d_color = uniform3(&mut rng, -1.0, 1.0);
        let d_depth = rng.random_range(-1.0..1.0);
        let objective = |sg: &[f64], cl: &[[f64; 3]]| -> Result<f64> {
            let w = compute_weights(sg, &samples)?;
            let c = composite(&w, cl, &samples)?;
            Ok(d_color[0] * c.color[0] + d_color[1] * c.color[1] + d_color[2] * c.color[2] + d_depth * c.depth)
        };
        let (g_sigma, g_color) = composite_backward(&sigmas, &colors, &samples, d_color, d_depth)?;
        for i in 0..n {
            let mut sg = sigmas.clone();
            let numeric = central(
                |v| {
                    sg[i] = v;
                    objective(&sg, &colors).expect("valid perturbation")
                },
                sigmas[i],
            );
            t.compare(g_sigma[i], numeric, || format!("sigma {i}"));
            for k in 0..3 {
                let mut cl = colors.clone();
                let numeric = central(
                    |v| {
                        cl[i][k] = v;
                        objective(&sigmas, &cl).expect("valid perturbation")
                    },
                    colors[i][k],
                );
                t.compare(g_color[i][k], numeric, || format!("color {i}[{k}]"));
            }
        }
    }
    Ok(t.finish())
}

/// Rendered color and depth of one ray, back through each field variant.
pub fn ray_suite(seed: u64) -> Result<SuiteReport> {
    let mut t = Tracker::new("render/ray");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for variant in [FieldVariant::Main, FieldVariant::PointsAug, FieldVariant::ViewsAug] {
        let mut params = init_params(tiny_field(variant), seed ^ 0x5A)?;
        let ray = Ray {
            origin: nalgebra::Vector3::from(uniform3(&mut rng, -0.2, 0.2)),
            direction: nalgebra::Vector3::from(unit3(&mut rng)),
        };
        let samples = SampleSet::new(
            (0..8).map(|i| 0.1 + 0.12 * i as f64 + rng.random_range(0.0..0.1)).collect(),
            0.1,
            1.2,
        )?;
        shift_density_bias(&mut params, &ray, &samples);
        let d_color = uniform3(&mut rng, -1.0, 1.0);
        let d_depth = rng.random_range(-1.0..1.0);
        let objective = |p: &FieldParams| {
            let pass = RayPass::trace(p, &ray, samples.clone());
            let c = pass.color();
            d_color[0] * c[0] + d_color[1] * c[1] + d_color[2] * c[2] + d_depth * pass.depth()
        };
        let mut grads = vec![0.0; params.len()];
        RayPass::trace(&params, &ray, samples.clone()).backward(&params, d_color, d_depth, &mut grads)?;
        let mut probe = params.clone();
        for j in 0..params.len() {
            let x0 = params.values()[j];
            let numeric = central(
                |v| {
                    probe.values_mut()[j] = v;
                    objective(&probe)
                },
                x0,
            );
            probe.values_mut()[j] = x0;
            t.compare(grads[j], numeric, || format!("{variant} param {j}"));
        }
    }
    Ok(t.finish())
}

/// Raises the density output bias until every sample on the ray has positive
/// raw density, so the check exercises the density path.
fn shift_density_bias(params: &mut FieldParams, ray: &Ray, samples: &SampleSet) {
    let points: Vec<[f64; 3]> = samples
        .distances()
        .iter()
        .map(|s| {
            let p = ray.at(*s);
            [p.x, p.y, p.z]
        })
        .collect();
    let dirs = vec![[ray.direction.x, ray.direction.y, ray.direction.z]; points.len()];
    let config = *params.config();
    let raw: Vec<f64> = {
        let pass = params.forward(&points, &dirs);
        (0..points.len()).map(|i| pass.output(i, &config).sigma_raw).collect()
    };
    let lowest = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let bias = config.density_bias_index();
    params.values_mut()[bias] += (0.5 - lowest).max(0.0);
}

const VERDICTS: [Verdict; 3] = [Verdict::AltReliable, Verdict::MainReliable, Verdict::Neither];

/// Which sides of a masked term are differentiable: `(main, alt)`.
fn live(v: Verdict) -> (bool, bool) {
    match v {
        Verdict::AltReliable => (true, false),
        Verdict::MainReliable => (false, true),
        Verdict::Neither => (false, false),
    }
}

const RAY_FIELDS: [&str; 16] = [
    "c_c.r", "c_c.g", "c_c.b", "c_f.r", "c_f.g", "c_f.b", "c_ap.r", "c_ap.g", "c_ap.b", "c_av.r", "c_av.g",
    "c_av.b", "z_c", "z_f", "z_ap", "z_av",
];

fn ray_field(r: &mut RayOutputs, i: usize) -> &mut f64 {
    match i {
        0..=2 => &mut r.c_c[i],
        3..=5 => &mut r.c_f[i - 3],
        6..=8 => &mut r.c_ap[i - 6],
        9..=11 => &mut r.c_av[i - 9],
        12 => &mut r.z_c,
        13 => &mut r.z_f,
        14 => &mut r.z_ap,
        _ => &mut r.z_av,
    }
}

fn grad_field(g: &crate::losses::RayGrads, i: usize) -> f64 {
    match i {
        0..=2 => g.c_c[i],
        3..=5 => g.c_f[i - 3],
        6..=8 => g.c_ap[i - 6],
        9..=11 => g.c_av[i - 9],
        12 => g.z_c,
        13 => g.z_f,
        14 => g.z_ap,
        _ => g.z_av,
    }
}

/// Inputs of term `k` that sit behind a stop-gradient for this ray.
fn stopped_inputs(ray: &RayOutputs, k: usize) -> Vec<usize> {
    let (verdict, main, alt) = match k {
        2 => (ray.m_ap, 12, 14),
        3 => (ray.m_av, 12, 15),
        4 => (ray.m_cfc, 12, 13),
        _ => return Vec::new(),
    };
    let (lm, la) = live(verdict);
    let mut out = Vec::new();
    if !lm {
        out.push(main);
    }
    if !la {
        out.push(alt);
    }
    out
}

/// Every loss term separately, over all verdict combinations.
pub fn loss_suite(seed: u64) -> Result<SuiteReport> {
    let mut t = Tracker::new("losses");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = crate::losses::LossTerms::names();
    for combo in 0..27 {
        let mut ray = RayOutputs {
            c_c: uniform3(&mut rng, 0.0, 1.0),
            c_f: uniform3(&mut rng, 0.0, 1.0),
            c_ap: uniform3(&mut rng, 0.0, 1.0),
            c_av: uniform3(&mut rng, 0.0, 1.0),
            z_c: rng.random_range(1.0..5.0),
            z_f: rng.random_range(1.0..5.0),
            z_ap: rng.random_range(1.0..5.0),
            z_av: rng.random_range(1.0..5.0),
            target: uniform3(&mut rng, 0.0, 1.0),
            sparse_depth: (combo % 2 == 0).then(|| rng.random_range(1.0..5.0)),
            m_ap: VERDICTS[combo % 3],
            m_av: VERDICTS[(combo / 3) % 3],
            m_cfc: VERDICTS[combo / 9],
        };
        for k in 0..5 {
            let mut weights = [0.0; 5];
            weights[k] = rng.random_range(0.05..1.0);
            let scales = LossScales {
                weights,
                n_rays: 3,
                n_sparse: 2,
            };
            let (_, g) = ray_loss(&ray, &scales);
            let stopped = stopped_inputs(&ray, k);
            for i in 0..RAY_FIELDS.len() {
                let what = || format!("{} wrt {} (verdicts {combo})", names[k], RAY_FIELDS[i]);
                if stopped.contains(&i) {
                    t.stopped(grad_field(&g, i), what);
                    continue;
                }
                let x0 = *ray_field(&mut ray, i);
                let numeric = central(
                    |v| {
                        let mut r = ray;
                        *ray_field(&mut r, i) = v;
                        weights[k] * ray_loss(&r, &scales).0.as_array()[k]
                    },
                    x0,
                );
                t.compare(grad_field(&g, i), numeric, what);
            }
        }
    }
    Ok(t.finish())
}

/// Config of the batch suite: tiny fields, 8+8 samples, past warmup.
pub fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 10,
        batch_rays: 6,
        warmup_fraction: 0.5,
        seed,
        model: ModelConfig {
            hidden_layers: 2,
            hidden_width: 16,
            skip_layer: Some(1),
            l_p: 4,
            l_v: 2,
            l_p_ap: 1,
            identical_aug: false,
        },
        sampling: SamplingConfig { n_coarse: 8, n_fine: 8 },
        ..TrainConfig::desk()
    }
}

/// The weighted total of a replayed batch, recomputed term by term. The
/// stopped side of each masked term is taken from `base` rather than `outs`.
fn detached_total(outs: &[RayOutputs], base: &[RayOutputs], weights: [f64; 5]) -> f64 {
    let b = outs.len() as f64;
    let k = outs.iter().filter(|r| r.sparse_depth.is_some()).count().max(1) as f64;
    let sq = |a: [f64; 3], t: [f64; 3]| (0..3).map(|i| (a[i] - t[i]).powi(2)).sum::<f64>();
    let pick = |on: bool, live: f64, held: f64| if on { live } else { held };
    let masked = |v: Verdict, main: (f64, f64), alt: (f64, f64)| {
        let (lm, la) = live(v);
        masked_depth_loss(pick(lm, main.0, main.1), pick(la, alt.0, alt.1), v).0
    };
    let mut total = [0.0; 5];
    for (o, h) in outs.iter().zip(base) {
        total[0] += sq(o.c_c, o.target) + sq(o.c_f, o.target) + sq(o.c_ap, o.target) + sq(o.c_av, o.target);
        if let Some(z) = o.sparse_depth {
            total[1] += (o.z_f - z).powi(2) + (o.z_ap - z).powi(2) + (o.z_av - z).powi(2);
        }
        total[2] += masked(o.m_ap, (o.z_c, h.z_c), (o.z_ap, h.z_ap));
        total[3] += masked(o.m_av, (o.z_c, h.z_c), (o.z_av, h.z_av));
        total[4] += masked(o.m_cfc, (o.z_c, h.z_c), (o.z_f, h.z_f));
    }
    weights[0] * total[0] / b
        + weights[1] * total[1] / k
        + (weights[2] * total[2] + weights[3] * total[3] + weights[4] * total[4]) / b
}

/// The full training objective of one frozen batch against all four models,
/// with every verdict combination forced onto some ray.
pub fn batch_suite(seed: u64, params_per_model: usize) -> Result<SuiteReport> {
    let mut t = Tracker::new("batch");
    let spec = SceneSpec::threeplanes(16, 16, 4, 2);
    let mut ds = generate_scene(&spec, seed)?;
    ds.sparse_depth = sample_sparse_depth(&ds, 4, 80.0, 0.0, seed)?;
    let cfg = tiny_train_config(seed);
    let data = TrainData::new(&ds, &cfg)?;
    let models = Models::init(&cfg.model, seed)?;
    let it = cfg.iterations - 1;
    let jobs = sample_batch(&data, &cfg, it);
    let mut plans = batch_loss(&models, &data, &cfg, it, &jobs, None, Execution::Sequential)?.plans;
    for (i, p) in plans.iter_mut().enumerate() {
        p.m_ap = VERDICTS[i % 3];
        p.m_av = VERDICTS[(i + 1) % 3];
        p.m_cfc = VERDICTS[(i / 3 + 2) % 3];
    }
    let analytic = batch_loss(&models, &data, &cfg, it, &jobs, Some(&plans), Execution::Sequential)?;
    let weights = cfg.weights().scheduled(it);
    let base = replay_outputs(&models, &data, &cfg, it, &jobs, &plans)?;
    let reported = analytic.breakdown.total;
    let recomputed = detached_total(&base, &base, weights);
    t.compare(reported, recomputed, || "loss value".into());

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    let mut probe = models.clone();
    for m in 0..4 {
        let len = models.all()[m].len();
        let picks = rand::seq::index::sample(&mut rng, len, params_per_model.min(len)).into_vec();
        for j in picks {
            let x0 = models.all()[m].values()[j];
            let numeric = central(
                |v| {
                    probe.all_mut()[m].values_mut()[j] = v;
                    let outs = replay_outputs(&probe, &data, &cfg, it, &jobs, &plans).expect("replay");
                    detached_total(&outs, &base, weights)
                },
                x0,
            );
            probe.all_mut()[m].values_mut()[j] = x0;
            t.compare(analytic.grads[m][j], numeric, || {
                format!("{} param {j}", crate::trainer::MODEL_NAMES[m])
            });
        }
    }
    Ok(t.finish())
}

/// All suites.
pub fn run_all(seed: u64) -> Result<GradReport> {
    let mut suites = vec![encoding_suite(seed, encode_backward)?];
    for v in [FieldVariant::Main, FieldVariant::PointsAug, FieldVariant::ViewsAug] {
        suites.push(field_suite(v, seed)?);
    }
    suites.push(composite_suite(seed)?);
    suites.push(ray_suite(seed)?);
    suites.push(loss_suite(seed)?);
    suites.push(batch_suite(seed, 200)?);
    Ok(GradReport { suites })
}
