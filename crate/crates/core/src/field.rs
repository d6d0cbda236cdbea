//! Radiance-field MLPs with hand-written reverse-mode gradients.
//!
//! Three input layouts share one implementation:
//!
//! * [`FieldVariant::Main`]: `σ, h = F1(γ(p, 0, l_p))`, `c = F2(h, γ(v, 0, l_v))`.
//! * [`FieldVariant::PointsAug`]: `σ, h = F1(γ(p, 0, l_p^ap))`,
//!   `c = F2(h, γ(p, l_p^ap, l_p), γ(v, 0, l_v))`.
//! * [`FieldVariant::ViewsAug`]: `F1(γ(p, 0, l_p))` emits `σ` and `c` directly and never sees `v`.
//!
//! F1 is a ReLU trunk with an optional skip connection that re-injects the encoded
//! point, followed by a linear head. F2 is one ReLU layer of half width and a
//! sigmoid color layer. Density is `max(σ_raw, 0)`.

use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_backward, encode_into, EncodingBand};
use crate::error::{precondition, Error, Result};
use crate::linalg::{dense_forward, dense_grad_input, dense_grad_params};

const VIEW_DIM: usize = 3;
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldVariant {
    Main,
    PointsAug,
    ViewsAug,
}

impl FieldVariant {
    pub(crate) fn code(self) -> u32 {
        match self {
            FieldVariant::Main => 0,
            FieldVariant::PointsAug => 1,
            FieldVariant::ViewsAug => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(FieldVariant::Main),
            1 => Some(FieldVariant::PointsAug),
            2 => Some(FieldVariant::ViewsAug),
            _ => None,
        }
    }
}

impl fmt::Display for FieldVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldVariant::Main => "main",
            FieldVariant::PointsAug => "points_aug",
            FieldVariant::ViewsAug => "views_aug",
        })
    }
}

/// Highest encoding frequencies for points, view directions and the points augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bands {
    pub l_p: u32,
    pub l_v: u32,
    pub l_p_ap: u32,
}

impl Default for Bands {
    fn default() -> Self {
        Bands {
            l_p: 10,
            l_v: 4,
            l_p_ap: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldConfig {
    pub variant: FieldVariant,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Trunk layer whose input is `[previous activation, encoded point]`.
    pub skip_layer: Option<usize>,
    pub bands: Bands,
}

impl FieldConfig {
    /// Eight 256-wide layers with the encoded input re-injected at layer 4.
    pub fn reference(variant: FieldVariant) -> Self {
        FieldConfig {
            variant,
            hidden_layers: 8,
            hidden_width: 256,
            skip_layer: Some(4),
            bands: Bands::default(),
        }
    }

    /// CPU-sized default: four 64-wide layers, skip at layer 2.
    pub fn desk(variant: FieldVariant) -> Self {
        FieldConfig {
            variant,
            hidden_layers: 4,
            hidden_width: 64,
            skip_layer: Some(2),
            bands: Bands::default(),
        }
    }

    pub fn with_variant(mut self, variant: FieldVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 {
            return Err(Error::Config("field needs at least one hidden layer".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("field hidden width must be positive".into()));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.hidden_layers {
                return Err(Error::Config(format!(
                    "skip layer {s} must lie in 1..{}",
                    self.hidden_layers
                )));
            }
        }
        let b = self.bands;
        if b.l_p_ap > b.l_p {
            return Err(Error::Config(format!(
                "l_p_ap = {} exceeds l_p = {}",
                b.l_p_ap, b.l_p
            )));
        }
        EncodingBand::new(0, b.l_p)?;
        EncodingBand::new(0, b.l_v)?;
        Ok(())
    }

    /// Band feeding F1.
    pub fn density_band(&self) -> EncodingBand {
        match self.variant {
            FieldVariant::PointsAug => EncodingBand::up_to(self.bands.l_p_ap),
            _ => EncodingBand::up_to(self.bands.l_p),
        }
    }

    /// High-frequency point band routed to F2, points augmentation only.
    pub fn residual_band(&self) -> Option<EncodingBand> {
        match self.variant {
            FieldVariant::PointsAug => Some(
                EncodingBand::new(self.bands.l_p_ap, self.bands.l_p)
                    .expect("validated band order"),
            ),
            _ => None,
        }
    }

    pub fn view_band(&self) -> Option<EncodingBand> {
        match self.variant {
            FieldVariant::ViewsAug => None,
            _ => Some(EncodingBand::up_to(self.bands.l_v)),
        }
    }

    pub fn uses_view(&self) -> bool {
        self.variant != FieldVariant::ViewsAug
    }

    fn color_width(&self) -> usize {
        (self.hidden_width / 2).max(1)
    }

    fn layout(&self) -> Layout {
        let w = self.hidden_width;
        let enc = self.density_band().encoded_len(3);
        let mut offset = 0;
        let mut push = |fi: usize, fo: usize| {
            let d = Dense {
                fi,
                fo,
                w: offset,
                b: offset + fi * fo,
            };
            offset += fi * fo + fo;
            d
        };
        let mut trunk = Vec::with_capacity(self.hidden_layers);
        for l in 0..self.hidden_layers {
            let fi = if l == 0 {
                enc
            } else if Some(l) == self.skip_layer {
                w + enc
            } else {
                w
            };
            trunk.push(push(fi, w));
        }
        let (head, color) = match self.variant {
            FieldVariant::ViewsAug => (push(w, 4), None),
            _ => {
                let head = push(w, 1 + w);
                let extra = self.residual_band().map_or(0, |b| b.encoded_len(3))
                    + self.view_band().map_or(0, |b| b.encoded_len(VIEW_DIM));
                let hidden = push(w + extra, self.color_width());
                let out = push(self.color_width(), 3);
                (head, Some((hidden, out)))
            }
        };
        Layout {
            trunk,
            head,
            color,
            len: offset,
        }
    }

    /// Position of the raw-density output bias in the parameter vector.
    pub(crate) fn density_bias_index(&self) -> usize {
        self.layout().head.b
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    fi: usize,
    fo: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.fi * self.fo]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.fo]
    }

    fn grads_mut<'a>(&self, g: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        let (w, b) = g[self.w..self.b + self.fo].split_at_mut(self.fi * self.fo);
        (w, b)
    }

    fn forward(&self, p: &[f64], input: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.fo];
        dense_forward(input, n, self.fi, self.weights(p), self.bias(p), self.fo, &mut out);
        out
    }

    fn backward(
        &self,
        p: &[f64],
        input: &[f64],
        d_out: &[f64],
        n: usize,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let (dw, db) = self.grads_mut(grads);
        dense_grad_params(input, n, self.fi, d_out, self.fo, dw, db);
        want_input.then(|| {
            let mut d_in = vec![0.0; n * self.fi];
            dense_grad_input(d_out, n, self.fo, self.weights(p), self.fi, &mut d_in);
            d_in
        })
    }
}

#[derive(Debug, Clone)]
struct Layout {
    trunk: Vec<Dense>,
    head: Dense,
    color: Option<(Dense, Dense)>,
    len: usize,
}

/// Flat parameter vector of one field plus the config that shapes it.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    config: FieldConfig,
    values: Vec<f64>,
    seed: u64,
}

impl FieldParams {
    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Seed used by [`init_params`].
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_values(config: FieldConfig, values: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        let want = config.param_count();
        if values.len() != want {
            return Err(Error::LengthMismatch {
                what: "field parameters",
                expected: want,
                got: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("field parameters contain non-finite values".into()));
        }
        Ok(FieldParams {
            config,
            values,
            seed,
        })
    }

    /// All-zero parameters; useful as an analytic fixture.
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        Ok(FieldParams {
            values: vec![0.0; config.param_count()],
            config,
            seed: 0,
        })
    }

    /// Evaluates a batch; `dirs` must have one entry per point (ignored by the views augmentation).
    pub fn forward(&self, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> ForwardPass {
        forward(self, points, dirs)
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(config: FieldConfig, seed: u64) -> Result<FieldParams> {
    config.validate()?;
    let layout = config.layout();
    let mut values = vec![0.0; layout.len];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<&Dense> = layout.trunk.iter().collect();
    layers.push(&layout.head);
    if let Some((h, o)) = &layout.color {
        layers.push(h);
        layers.push(o);
    }
    for d in layers {
        let a = (6.0 / (d.fi + d.fo) as f64).sqrt();
        for v in &mut values[d.w..d.w + d.fi * d.fo] {
            *v = rng.random_range(-a..=a);
        }
    }
    Ok(FieldParams {
        config,
        values,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub sigma_raw: f64,
    pub sigma: f64,
    /// Latent feature `h` handed to F2; empty for the views augmentation.
    pub feature: Vec<f64>,
    pub color: [f64; 3],
}

/// Cached activations of one batched evaluation, sufficient for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    n: usize,
    points: Vec<[f64; 3]>,
    dirs: Vec<[f64; 3]>,
    /// Input of each trunk layer (layer 0 sees the encoded point).
    trunk_inputs: Vec<Vec<f64>>,
    trunk_pre: Vec<Vec<f64>>,
    head_input: Vec<f64>,
    head_out: Vec<f64>,
    color_in: Vec<f64>,
    color_hidden_pre: Vec<f64>,
    color_hidden: Vec<f64>,
    sigma: Vec<f64>,
    color: Vec<[f64; 3]>,
}

impl ForwardPass {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn color(&self) -> &[[f64; 3]] {
        &self.color
    }

    pub fn output(&self, i: usize, config: &FieldConfig) -> FieldOutput {
        let width = self.head_out.len() / self.n.max(1);
        let row = &self.head_out[i * width..(i + 1) * width];
        FieldOutput {
            sigma_raw: row[0],
            sigma: self.sigma[i],
            feature: match config.variant {
                FieldVariant::ViewsAug => Vec::new(),
                _ => row[1..].to_vec(),
            },
            color: self.color[i],
        }
    }

    /// Accumulates parameter gradients for upstream `d_sigma` / `d_color` into `grads`.
    pub fn backward(
        &self,
        params: &FieldParams,
        d_sigma: &[f64],
        d_color: &[[f64; 3]],
        grads: &mut [f64],
    ) -> Result<()> {
        self.backward_impl(params, d_sigma, d_color, grads, false)
            .map(|_| ())
    }

    /// Like [`backward`](Self::backward) and additionally returns gradients
    /// with respect to the input points and view directions.
    pub fn backward_with_inputs(
        &self,
        params: &FieldParams,
        d_sigma: &[f64],
        d_color: &[[f64; 3]],
        grads: &mut [f64],
    ) -> Result<InputGrads> {
        self.backward_impl(params, d_sigma, d_color, grads, true)
            .map(|g| g.expect("input gradients requested"))
    }

    fn backward_impl(
        &self,
        params: &FieldParams,
        d_sigma: &[f64],
        d_color: &[[f64; 3]],
        grads: &mut [f64],
        want_input: bool,
    ) -> Result<Option<InputGrads>> {
        let n = self.n;
        let cfg = &params.config;
        if d_sigma.len() != n {
            return Err(Error::LengthMismatch {
                what: "density gradient",
                expected: n,
                got: d_sigma.len(),
            });
        }
        if d_color.len() != n {
            return Err(Error::LengthMismatch {
                what: "color gradient",
                expected: n,
                got: d_color.len(),
            });
        }
        if grads.len() != params.values.len() {
            return Err(Error::LengthMismatch {
                what: "parameter gradient buffer",
                expected: params.values.len(),
                got: grads.len(),
            });
        }
        let layout = cfg.layout();
        let p = &params.values;
        let w = cfg.hidden_width;
        let head_w = layout.head.fo;

        let mut d_head = vec![0.0; n * head_w];
        let mut d_resid: Option<Vec<f64>> = None;
        let mut d_view: Option<Vec<f64>> = None;
        for i in 0..n {
            let row = &mut d_head[i * head_w..(i + 1) * head_w];
            if self.head_out[i * head_w] > 0.0 {
                row[0] = d_sigma[i];
            }
        }
        match &layout.color {
            None => {
                for i in 0..n {
                    for c in 0..3 {
                        let s = self.color[i][c];
                        d_head[i * head_w + 1 + c] = d_color[i][c] * s * (1.0 - s);
                    }
                }
            }
            Some((hidden, out)) => {
                let mut d_raw = vec![0.0; n * 3];
                for i in 0..n {
                    for c in 0..3 {
                        let s = self.color[i][c];
                        d_raw[i * 3 + c] = d_color[i][c] * s * (1.0 - s);
                    }
                }
                let mut d_hidden = out
                    .backward(p, &self.color_hidden, &d_raw, n, grads, true)
                    .expect("requested");
                for (g, pre) in d_hidden.iter_mut().zip(&self.color_hidden_pre) {
                    if *pre <= 0.0 {
                        *g = 0.0;
                    }
                }
                let d_in = hidden
                    .backward(p, &self.color_in, &d_hidden, n, grads, true)
                    .expect("requested");
                let fi = hidden.fi;
                let resid_len = cfg.residual_band().map_or(0, |b| b.encoded_len(3));
                let view_len = cfg.view_band().map_or(0, |b| b.encoded_len(VIEW_DIM));
                for i in 0..n {
                    let row = &d_in[i * fi..(i + 1) * fi];
                    d_head[i * head_w + 1..(i + 1) * head_w].copy_from_slice(&row[..w]);
                }
                if want_input {
                    if resid_len > 0 {
                        let mut r = vec![0.0; n * resid_len];
                        for i in 0..n {
                            r[i * resid_len..(i + 1) * resid_len]
                                .copy_from_slice(&d_in[i * fi + w..i * fi + w + resid_len]);
                        }
                        d_resid = Some(r);
                    }
                    if view_len > 0 {
                        let mut v = vec![0.0; n * view_len];
                        for i in 0..n {
                            let start = i * fi + w + resid_len;
                            v[i * view_len..(i + 1) * view_len]
                                .copy_from_slice(&d_in[start..start + view_len]);
                        }
                        d_view = Some(v);
                    }
                }
            }
        }

        let enc_len = cfg.density_band().encoded_len(3);
        let mut d_enc = if want_input {
            vec![0.0; n * enc_len]
        } else {
            Vec::new()
        };
        let mut d_act = layout
            .head
            .backward(p, &self.head_input, &d_head, n, grads, true)
            .expect("requested");
        for l in (0..layout.trunk.len()).rev() {
            let dense = &layout.trunk[l];
            for (g, pre) in d_act.iter_mut().zip(&self.trunk_pre[l]) {
                if *pre <= 0.0 {
                    *g = 0.0;
                }
            }
            let need_input = l > 0 || want_input;
            let d_in = dense.backward(p, &self.trunk_inputs[l], &d_act, n, grads, need_input);
            let Some(d_in) = d_in else { break };
            if l == 0 {
                for (acc, g) in d_enc.iter_mut().zip(&d_in) {
                    *acc += g;
                }
                break;
            }
            if Some(l) == cfg.skip_layer {
                let fi = dense.fi;
                let mut d_prev = vec![0.0; n * w];
                for i in 0..n {
                    let row = &d_in[i * fi..(i + 1) * fi];
                    d_prev[i * w..(i + 1) * w].copy_from_slice(&row[..w]);
                    if want_input {
                        for (acc, g) in d_enc[i * enc_len..(i + 1) * enc_len]
                            .iter_mut()
                            .zip(&row[w..])
                        {
                            *acc += g;
                        }
                    }
                }
                d_act = d_prev;
            } else {
                d_act = d_in;
            }
        }

        if !want_input {
            return Ok(None);
        }
        let mut d_points = vec![[0.0; 3]; n];
        let mut d_dirs = vec![[0.0; 3]; n];
        let band = cfg.density_band();
        for i in 0..n {
            encode_backward(
                &self.points[i],
                band,
                &d_enc[i * enc_len..(i + 1) * enc_len],
                &mut d_points[i],
            );
        }
        if let (Some(b), Some(r)) = (cfg.residual_band(), &d_resid) {
            let len = b.encoded_len(3);
            for i in 0..n {
                encode_backward(&self.points[i], b, &r[i * len..(i + 1) * len], &mut d_points[i]);
            }
        }
        if let (Some(b), Some(v)) = (cfg.view_band(), &d_view) {
            let len = b.encoded_len(VIEW_DIM);
            for i in 0..n {
                encode_backward(&self.dirs[i], b, &v[i * len..(i + 1) * len], &mut d_dirs[i]);
            }
        }
        Ok(Some(InputGrads {
            points: d_points,
            dirs: d_dirs,
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub points: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward(params: &FieldParams, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> ForwardPass {
    let cfg = &params.config;
    let layout = cfg.layout();
    let p = &params.values;
    let n = points.len();
    let w = cfg.hidden_width;
    assert!(
        !cfg.uses_view() || dirs.len() == n,
        "one view direction per point required"
    );

    let band = cfg.density_band();
    let enc_len = band.encoded_len(3);
    let mut enc = vec![0.0; n * enc_len];
    for (pt, out) in points.iter().zip(enc.chunks_exact_mut(enc_len)) {
        encode_into(pt, band, out);
    }

    let mut trunk_inputs = Vec::with_capacity(layout.trunk.len());
    let mut trunk_pre = Vec::with_capacity(layout.trunk.len());
    let mut act: Vec<f64> = Vec::new();
    for (l, dense) in layout.trunk.iter().enumerate() {
        let input = if l == 0 {
            enc.clone()
        } else if Some(l) == cfg.skip_layer {
            let mut cat = Vec::with_capacity(n * (w + enc_len));
            for i in 0..n {
                cat.extend_from_slice(&act[i * w..(i + 1) * w]);
                cat.extend_from_slice(&enc[i * enc_len..(i + 1) * enc_len]);
            }
            cat
        } else {
            std::mem::take(&mut act)
        };
        let pre = dense.forward(p, &input, n);
        act = pre.iter().map(|v| v.max(0.0)).collect();
        trunk_inputs.push(input);
        trunk_pre.push(pre);
    }

    let head_out = layout.head.forward(p, &act, n);
    let head_w = layout.head.fo;
    let sigma: Vec<f64> = (0..n).map(|i| head_out[i * head_w].max(0.0)).collect();

    let mut color = vec![[0.0; 3]; n];
    let mut color_in = Vec::new();
    let mut color_hidden_pre = Vec::new();
    let mut color_hidden = Vec::new();
    match &layout.color {
        None => {
            for i in 0..n {
                for c in 0..3 {
                    color[i][c] = sigmoid(head_out[i * head_w + 1 + c]);
                }
            }
        }
        Some((hidden, out)) => {
            let resid = cfg.residual_band();
            let view = cfg.view_band();
            let fi = hidden.fi;
            color_in = vec![0.0; n * fi];
            for i in 0..n {
                let row = &mut color_in[i * fi..(i + 1) * fi];
                row[..w].copy_from_slice(&head_out[i * head_w + 1..(i + 1) * head_w]);
                let mut at = w;
                if let Some(b) = resid {
                    let len = b.encoded_len(3);
                    encode_into(&points[i], b, &mut row[at..at + len]);
                    at += len;
                }
                if let Some(b) = view {
                    let len = b.encoded_len(VIEW_DIM);
                    encode_into(&dirs[i], b, &mut row[at..at + len]);
                }
            }
            color_hidden_pre = hidden.forward(p, &color_in, n);
            color_hidden = color_hidden_pre.iter().map(|v| v.max(0.0)).collect();
            let raw = out.forward(p, &color_hidden, n);
            for i in 0..n {
                for c in 0..3 {
                    color[i][c] = sigmoid(raw[i * 3 + c]);
                }
            }
        }
    }

    ForwardPass {
        n,
        points: points.to_vec(),
        dirs: if cfg.uses_view() { dirs.to_vec() } else { Vec::new() },
        trunk_inputs,
        trunk_pre,
        head_input: act,
        head_out,
        color_in,
        color_hidden_pre,
        color_hidden,
        sigma,
        color,
    }
}

/// Single-point evaluation. `view` is required (and must be unit length) except
/// for the views augmentation, which ignores it.
pub fn eval_field(
    params: &FieldParams,
    point: Vector3<f64>,
    view: Option<Vector3<f64>>,
) -> Result<FieldOutput> {
    let cfg = params.config;
    let dir = if cfg.uses_view() {
        let v = view.ok_or_else(|| precondition(format!("{} field needs a view direction", cfg.variant)))?;
        if (v.norm() - 1.0).abs() > UNIT_TOL {
            return Err(precondition(format!("view direction has norm {}", v.norm())));
        }
        [v.x, v.y, v.z]
    } else {
        [0.0; 3]
    };
    let pass = params.forward(&[[point.x, point.y, point.z]], &[dir]);
    Ok(pass.output(0, &cfg))
}

/// Batched evaluation with exact reverse-mode gradients.
///
/// Returns outputs, parameter gradients and input gradients for upstream
/// gradients `d_sigma` and `d_color`.
pub fn eval_field_with_grads(
    params: &FieldParams,
    points: &[[f64; 3]],
    dirs: &[[f64; 3]],
    d_sigma: &[f64],
    d_color: &[[f64; 3]],
) -> Result<(Vec<FieldOutput>, Vec<f64>, InputGrads)> {
    if params.config.uses_view() && dirs.len() != points.len() {
        return Err(Error::LengthMismatch {
            what: "view directions",
            expected: points.len(),
            got: dirs.len(),
        });
    }
    let pass = params.forward(points, dirs);
    let mut grads = vec![0.0; params.len()];
    let inputs = pass.backward_with_inputs(params, d_sigma, d_color, &mut grads)?;
    let outputs = (0..points.len())
        .map(|i| pass.output(i, &params.config))
        .collect();
    Ok((outputs, grads, inputs))
}
