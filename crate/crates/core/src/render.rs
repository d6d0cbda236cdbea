//! Volume rendering along rays: stratified and hierarchical sampling, compositing
//! weights, and the matching backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Ray;
use crate::error::{precondition, Error, Result};
use crate::field::{FieldParams, ForwardPass};

/// Added to every coarse weight before building the inverse CDF.
pub const HIERARCHICAL_EPS: f64 = 1e-5;

/// Ascending along-ray distances in `[near, far]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    s: Vec<f64>,
    near: f64,
    far: f64,
    /// Number of equal-width bins the set was stratified over.
    bins: usize,
}

impl SampleSet {
    pub fn new(s: Vec<f64>, near: f64, far: f64) -> Result<Self> {
        check_range(near, far)?;
        if s.is_empty() {
            return Err(precondition("sample set is empty"));
        }
        if s.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(precondition("samples must be strictly ascending"));
        }
        if s.iter().any(|v| *v < near || *v > far) {
            return Err(precondition(format!("samples must lie in [{near}, {far}]")));
        }
        let bins = s.len();
        Ok(SampleSet { s, near, far, bins })
    }

    pub fn distances(&self) -> &[f64] {
        &self.s
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Gaps to the next sample; the last gap is one nominal bin `(far - near) / N`.
    pub fn deltas(&self) -> Vec<f64> {
        let n = self.s.len();
        let mut d = Vec::with_capacity(n);
        for w in self.s.windows(2) {
            d.push(w[1] - w[0]);
        }
        d.push((self.far - self.near) / n as f64);
        d
    }
}

fn check_range(near: f64, far: f64) -> Result<()> {
    if !(near > 0.0 && far > near && far.is_finite()) {
        return Err(precondition(format!(
            "need 0 < near < far, got near={near}, far={far}"
        )));
    }
    Ok(())
}

/// One uniform draw in each of `n` equal-width bins of `[near, far]`.
pub fn stratified_sample<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    n: usize,
    rng: &mut R,
) -> Result<SampleSet> {
    check_range(near, far)?;
    if n < 2 {
        return Err(precondition(format!("need at least 2 samples, got {n}")));
    }
    let width = (far - near) / n as f64;
    let s = (0..n)
        .map(|i| near + width * (i as f64 + rng.random::<f64>()))
        .collect();
    Ok(SampleSet {
        s,
        near,
        far,
        bins: n,
    })
}

/// Bin centers of `n` equal-width bins; the jitter-free sampler used at inference.
pub fn midpoint_samples(near: f64, far: f64, n: usize) -> Result<SampleSet> {
    check_range(near, far)?;
    if n < 2 {
        return Err(precondition(format!("need at least 2 samples, got {n}")));
    }
    let width = (far - near) / n as f64;
    Ok(SampleSet {
        s: (0..n).map(|i| near + width * (i as f64 + 0.5)).collect(),
        near,
        far,
        bins: n,
    })
}

/// `w_i = exp(-Σ_{j<i} δ_j σ_j) (1 - exp(-δ_i σ_i))`.
pub fn compute_weights(sigmas: &[f64], samples: &SampleSet) -> Result<Vec<f64>> {
    if sigmas.len() != samples.len() {
        return Err(Error::LengthMismatch {
            what: "densities",
            expected: samples.len(),
            got: sigmas.len(),
        });
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(precondition("densities must be nonnegative"));
    }
    Ok(weights_unchecked(sigmas, &samples.deltas()))
}

fn weights_unchecked(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut optical = 0.0f64;
    sigmas
        .iter()
        .zip(deltas)
        .map(|(s, d)| {
            let tau = s * d;
            let w = (-optical).exp() * -(-tau).exp_m1();
            optical += tau;
            w
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    /// Expected ray termination length `Σ w_i s_i`, not renormalized by opacity.
    pub depth: f64,
    pub opacity: f64,
}

pub fn composite(weights: &[f64], colors: &[[f64; 3]], samples: &SampleSet) -> Result<Composite> {
    for (what, got) in [("weights", weights.len()), ("colors", colors.len())] {
        if got != samples.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: samples.len(),
                got,
            });
        }
    }
    Ok(composite_unchecked(weights, colors, samples.distances()))
}

fn composite_unchecked(weights: &[f64], colors: &[[f64; 3]], s: &[f64]) -> Composite {
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut opacity = 0.0;
    for ((w, c), z) in weights.iter().zip(colors).zip(s) {
        for k in 0..3 {
            color[k] += w * c[k];
        }
        depth += w * z;
        opacity += w;
    }
    Composite {
        color,
        depth,
        opacity,
    }
}

/// Gradients of `(color, depth)` with respect to per-sample densities and colors,
/// given upstream `d_color` and `d_depth`.
pub fn composite_backward(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    samples: &SampleSet,
    d_color: [f64; 3],
    d_depth: f64,
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let weights = compute_weights(sigmas, samples)?;
    if colors.len() != samples.len() {
        return Err(Error::LengthMismatch {
            what: "colors",
            expected: samples.len(),
            got: colors.len(),
        });
    }
    Ok(backward_unchecked(
        sigmas,
        colors,
        samples.distances(),
        &samples.deltas(),
        &weights,
        d_color,
        d_depth,
    ))
}

fn backward_unchecked(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    s: &[f64],
    deltas: &[f64],
    weights: &[f64],
    d_color: [f64; 3],
    d_depth: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = sigmas.len();
    let d_colors: Vec<[f64; 3]> = weights
        .iter()
        .map(|w| [w * d_color[0], w * d_color[1], w * d_color[2]])
        .collect();
    // dL/dw_i
    let gw: Vec<f64> = (0..n)
        .map(|i| {
            d_color[0] * colors[i][0]
                + d_color[1] * colors[i][1]
                + d_color[2] * colors[i][2]
                + d_depth * s[i]
        })
        .collect();
    // dw_i/dσ_k = δ_k T_{k+1} for i = k, -δ_k w_i for i > k.
    let mut d_sigma = vec![0.0; n];
    let mut suffix = 0.0;
    let mut optical: f64 = sigmas.iter().zip(deltas).map(|(a, b)| a * b).sum();
    for k in (0..n).rev() {
        let t_next = (-optical).exp();
        optical -= sigmas[k] * deltas[k];
        d_sigma[k] = deltas[k] * (t_next * gw[k] - suffix);
        suffix += weights[k] * gw[k];
    }
    (d_sigma, d_colors)
}

/// Inverse-CDF draws from the piecewise-constant density `∝ w + ε` over the coarse
/// bins, merged with the coarse samples in ascending order.
pub fn hierarchical_sample<R: Rng + ?Sized>(
    weights: &[f64],
    coarse: &SampleSet,
    n_fine: usize,
    rng: &mut R,
) -> Result<SampleSet> {
    if n_fine == 0 {
        return Err(precondition("need at least one fine sample"));
    }
    let mut fine = draw_inverse_cdf(weights, coarse, n_fine, rng)?;
    fine.extend_from_slice(coarse.distances());
    fine.sort_by(f64::total_cmp);
    Ok(SampleSet {
        s: fine,
        near: coarse.near,
        far: coarse.far,
        bins: coarse.bins,
    })
}

/// The fine draws alone, unsorted.
pub fn draw_inverse_cdf<R: Rng + ?Sized>(
    weights: &[f64],
    coarse: &SampleSet,
    n_fine: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let bins = coarse.bins;
    if weights.len() != bins {
        return Err(Error::LengthMismatch {
            what: "coarse weights",
            expected: bins,
            got: weights.len(),
        });
    }
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w.max(0.0) + HIERARCHICAL_EPS;
        cdf.push(acc);
    }
    let total = acc;
    let width = (coarse.far - coarse.near) / bins as f64;
    Ok((0..n_fine)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            // first edge strictly above u
            let j = cdf.partition_point(|c| *c <= u).clamp(1, bins) - 1;
            let mass = cdf[j + 1] - cdf[j];
            let t = ((u - cdf[j]) / mass).clamp(0.0, 1.0);
            (coarse.near + width * (j as f64 + t)).min(coarse.far)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        check_range(self.near, self.far)?;
        if self.n_coarse < 2 || self.n_fine < 1 {
            return Err(Error::Config(format!(
                "need n_coarse >= 2 and n_fine >= 1, got {} and {}",
                self.n_coarse, self.n_fine
            )));
        }
        Ok(())
    }
}

/// Anything that maps sample points (and view directions) to densities and colors.
pub trait RadianceField {
    fn query(&self, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>);
}

impl RadianceField for FieldParams {
    fn query(&self, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>) {
        let pass = self.forward(points, dirs);
        (pass.sigma().to_vec(), pass.color().to_vec())
    }
}

fn render_samples<F: RadianceField + ?Sized>(field: &F, ray: &Ray, samples: &SampleSet) -> RenderOutput {
    let points: Vec<[f64; 3]> = samples
        .distances()
        .iter()
        .map(|s| {
            let p = ray.at(*s);
            [p.x, p.y, p.z]
        })
        .collect();
    let d = [ray.direction.x, ray.direction.y, ray.direction.z];
    let (sigma, color) = field.query(&points, &vec![d; points.len()]);
    let weights = weights_unchecked(&sigma, &samples.deltas());
    let c = composite_unchecked(&weights, &color, samples.distances());
    RenderOutput {
        color: c.color,
        depth: c.depth,
        weights,
        opacity: c.opacity,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub weights: Vec<f64>,
    pub opacity: f64,
}

/// Forward state of one field along one ray, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RayPass {
    samples: SampleSet,
    deltas: Vec<f64>,
    field: ForwardPass,
    weights: Vec<f64>,
    composite: Composite,
}

impl RayPass {
    pub fn trace(params: &FieldParams, ray: &Ray, samples: SampleSet) -> Self {
        let points: Vec<[f64; 3]> = samples
            .distances()
            .iter()
            .map(|s| {
                let p = ray.at(*s);
                [p.x, p.y, p.z]
            })
            .collect();
        let d = [ray.direction.x, ray.direction.y, ray.direction.z];
        let dirs = vec![d; points.len()];
        let field = params.forward(&points, &dirs);
        let deltas = samples.deltas();
        let weights = weights_unchecked(field.sigma(), &deltas);
        let composite = composite_unchecked(&weights, field.color(), samples.distances());
        RayPass {
            samples,
            deltas,
            field,
            weights,
            composite,
        }
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn color(&self) -> [f64; 3] {
        self.composite.color
    }

    pub fn depth(&self) -> f64 {
        self.composite.depth
    }

    pub fn opacity(&self) -> f64 {
        self.composite.opacity
    }

    pub fn output(&self) -> RenderOutput {
        RenderOutput {
            color: self.composite.color,
            depth: self.composite.depth,
            weights: self.weights.clone(),
            opacity: self.composite.opacity,
        }
    }

    /// Backpropagates `d_color`, `d_depth` into the field parameter gradients.
    pub fn backward(
        &self,
        params: &FieldParams,
        d_color: [f64; 3],
        d_depth: f64,
        grads: &mut [f64],
    ) -> Result<()> {
        if d_color == [0.0; 3] && d_depth == 0.0 {
            return Ok(());
        }
        let (d_sigma, d_colors) = backward_unchecked(
            self.field.sigma(),
            self.field.color(),
            self.samples.distances(),
            &self.deltas,
            &self.weights,
            d_color,
            d_depth,
        );
        self.field.backward(params, &d_sigma, &d_colors, grads)
    }
}

/// Coarse pass on stratified samples, then (if `fine` is given) a fine pass on the
/// union of coarse and inverse-CDF samples.
pub fn render_ray<C, F, R>(
    ray: &Ray,
    coarse: &C,
    fine: Option<&F>,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<(RenderOutput, Option<RenderOutput>)>
where
    C: RadianceField + ?Sized,
    F: RadianceField + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let samples = stratified_sample(cfg.near, cfg.far, cfg.n_coarse, rng)?;
    let coarse_out = render_samples(coarse, ray, &samples);
    let fine_out = match fine {
        None => None,
        Some(fine) => {
            let union = hierarchical_sample(&coarse_out.weights, &samples, cfg.n_fine, rng)?;
            Some(render_samples(fine, ray, &union))
        }
    };
    Ok((coarse_out, fine_out))
}
