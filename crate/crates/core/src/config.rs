//! Run configuration: one TOML document with `scene`, `render`, `train`,
//! `model`, `loss`, `reliability` and `eval` sections.
//!
//! Missing keys take the desk defaults, unknown keys are rejected, and
//! `section.key=value` overrides are applied on the parsed document so they go
//! through the same validation as the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::reliability::ReliabilityConfig;
use crate::scene::SceneSpec;
use crate::trainer::{ModelConfig, SamplingConfig, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    /// `threeplanes` or `specsphere`.
    pub preset: String,
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub train_views: usize,
    pub sparse_per_view: usize,
    /// Gradient-magnitude percentile a keypoint must reach.
    pub sparse_percentile: f64,
    /// Multiplicative depth noise on keypoints.
    pub sparse_noise: f64,
    pub seed: u64,
    /// Replace the preset's ray bounds.
    pub near: Option<f64>,
    pub far: Option<f64>,
}

impl Default for SceneSection {
    fn default() -> Self {
        SceneSection {
            preset: "threeplanes".into(),
            width: 64,
            height: 64,
            views: 8,
            train_views: 2,
            sparse_per_view: 32,
            sparse_percentile: 80.0,
            sparse_noise: 0.0,
            seed: 0,
            near: None,
            far: None,
        }
    }
}

impl SceneSection {
    pub fn spec(&self) -> Result<SceneSpec> {
        let mut spec = SceneSpec::preset(&self.preset, self.width, self.height, self.views, self.train_views)?;
        spec.near = self.near.unwrap_or(spec.near);
        spec.far = self.far.unwrap_or(spec.far);
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl Default for RenderSection {
    fn default() -> Self {
        let s = TrainConfig::desk().sampling;
        RenderSection {
            n_coarse: s.n_coarse,
            n_fine: s.n_fine,
        }
    }
}

/// Optimizer and schedule; everything in [`TrainConfig`] that has no section of
/// its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: u64,
    pub batch_rays: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        TrainSection {
            iterations: t.iterations,
            batch_rays: t.batch_rays,
            lr_init: t.lr_init,
            lr_final: t.lr_final,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            warmup_fraction: t.warmup_fraction,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Depth tolerance of the visibility mask, as a fraction of the largest
    /// train depth.
    pub threshold_factor: f64,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold_factor: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSection,
    pub render: RenderSection,
    pub train: TrainSection,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub reliability: ReliabilityConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Reduced budget that fits a single CPU core in minutes: a 2x32 field,
    /// 64-ray batches, 16+16 samples, 2000 iterations at a higher learning rate.
    pub fn quick() -> Self {
        let mut c = RunConfig::default();
        c.model.hidden_layers = 2;
        c.model.hidden_width = 32;
        c.model.skip_layer = None;
        c.render = RenderSection {
            n_coarse: 16,
            n_fine: 16,
        };
        c.train.iterations = 2000;
        c.train.batch_rays = 64;
        c.train.lr_init = 5e-3;
        c.train.lr_final = 5e-5;
        c.train.checkpoint_every = 500;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies `section.key=value`. The value is read as a TOML literal and
    /// falls back to a bare string, so `scene.preset=specsphere` works unquoted.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let bad = |m: String| Error::Config(format!("--set {assignment}: {m}"));
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| bad("expected section.key=value".into()))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| bad("key must be section.key".into()))?;
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Table::try_from(&*self).expect("run config serializes");
        let table = doc
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| bad(format!("unknown section {section:?}")))?;
        table.insert(field.to_string(), value);
        *self = doc.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        Ok(())
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let mut t = self.train_config();
        t.apply_preset(name)?;
        self.loss = t.loss;
        self.model = t.model;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations,
            batch_rays: t.batch_rays,
            lr_init: t.lr_init,
            lr_final: t.lr_final,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            warmup_fraction: t.warmup_fraction,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            model: self.model,
            sampling: SamplingConfig {
                n_coarse: self.render.n_coarse,
                n_fine: self.render.n_fine,
            },
            loss: self.loss,
            reliability: self.reliability,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if s.train_views == 0 || s.train_views >= s.views {
            return Err(Error::Config(format!(
                "scene.train_views: need 0 < train_views < views, got {} of {}",
                s.train_views, s.views
            )));
        }
        if !(0.0..=100.0).contains(&s.sparse_percentile) {
            return Err(Error::Config(format!(
                "scene.sparse_percentile: must lie in [0, 100], got {}",
                s.sparse_percentile
            )));
        }
        if !(s.sparse_noise >= 0.0) {
            return Err(Error::Config(format!("scene.sparse_noise: must be >= 0, got {}", s.sparse_noise)));
        }
        if !(self.eval.threshold_factor >= 0.0) {
            return Err(Error::Config(format!(
                "eval.threshold_factor: must be >= 0, got {}",
                self.eval.threshold_factor
            )));
        }
        s.spec()?.validate()?;
        self.train_config().validate()
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_desk_default() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train_config(), TrainConfig::desk());
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = RunConfig::quick();
        c.apply_preset("dsnerf-baseline").unwrap();
        c.model.skip_layer = Some(1);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn shipped_quick_config_matches_quick() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml");
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::quick());
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/specsphere.toml");
        let mut sphere = RunConfig::quick();
        sphere.scene.preset = "specsphere".into();
        assert_eq!(RunConfig::load(&path).unwrap(), sphere);
    }

    #[test]
    fn missing_skip_survives_the_round_trip() {
        let c = RunConfig::quick();
        assert_eq!(c.model.skip_layer, None);
        assert!(c.to_toml().contains("skip_layer = 0"));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let mut d = RunConfig::default();
        d.set("model.skip_layer=0").unwrap();
        assert_eq!(d.model.skip_layer, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nlr = 0.1\n").is_err());
        let mut c = RunConfig::default();
        assert!(c.set("train.learning_rate=0.1").is_err());
        assert!(c.set("nosection.x=1").is_err());
        assert!(c.set("train.iterations").is_err());
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.set("train.iterations=123").unwrap();
        c.set("scene.preset=specsphere").unwrap();
        c.set("loss.points_aug = 0.0").unwrap();
        c.set("model.skip_layer=2").unwrap();
        c.set("loss.reliable_depth=false").unwrap();
        assert_eq!(c.train.iterations, 123);
        assert_eq!(c.scene.preset, "specsphere");
        assert_eq!(c.loss.points_aug, 0.0);
        assert_eq!(c.model.skip_layer, Some(2));
        assert!(!c.loss.reliable_depth);
        assert!(c.set("train.iterations=abc").is_err());
    }

    #[test]
    fn validation_names_the_key() {
        let mut c = RunConfig::default();
        c.scene.train_views = 8;
        assert!(c.validate().unwrap_err().to_string().contains("scene.train_views"));
        let mut c = RunConfig::default();
        c.train.lr_final = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("train.lr_final"));
        let mut c = RunConfig::default();
        c.scene.preset = "teapot".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("scene.far=2.0").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("scene.far"));
        assert!(RunConfig::quick().validate().is_ok());
    }
}
