//! Run configuration: a TOML file of flat dotted keys (`train.epochs = 40`),
//! command-line overrides on top, and a canonical flattened rendering whose
//! digest is stored in checkpoints.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use hmmen::data::{SynthConfig, WeatherKind, DEFAULT_SPLIT};
use hmmen::encoder::{EncoderConfig, NUM_STAGES};
use hmmen::losses::LossConfig;
use hmmen::network::ModelVariant;
use hmmen::train::{EvalOptions, TrainConfig};

use crate::UsageError;

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_ENV: &str = "HMMEN_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub synth: SynthSection,
    pub data: DataSection,
    pub split: SplitSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub model: ModelSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub num_images: usize,
    pub image_size: usize,
    pub lines_per_image: (usize, usize),
    pub line_width_px: (f64, f64),
    pub ir_misalignment_px: (f64, f64),
    pub weather: Vec<WeatherKind>,
    pub weather_severity: (f64, f64),
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            num_images: d.num_images,
            image_size: d.image_size,
            lines_per_image: d.lines_per_image,
            line_width_px: d.line_width_px,
            ir_misalignment_px: d.ir_misalignment_px,
            weather: d.weather,
            weather_severity: d.weather_severity,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Square side every loaded image is resized to; unset keeps the stored size.
    pub image_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let (train, val, test) = DEFAULT_SPLIT;
        Self { train, val, test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variant: ModelVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub decay_start: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            variant: t.variant,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
            decay_start: t.decay_start,
            lambda: t.loss.lambda,
            epsilon: t.loss.epsilon,
            augment: t.augment,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    pub overlap_threshold: f64,
    pub alpha: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        Self {
            threshold: e.threshold,
            overlap_threshold: e.overlap_threshold,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub stage_channels: [usize; NUM_STAGES],
    pub expansion_factor: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            stage_channels: e.stage_channels,
            expansion_factor: e.expansion_factor,
        }
    }
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Fixes `seed` by precedence: flag, then config file, then `HMMEN_SEED`,
    /// then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| UsageError(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            num_images: s.num_images,
            image_size: s.image_size,
            lines_per_image: s.lines_per_image,
            line_width_px: s.line_width_px,
            ir_misalignment_px: s.ir_misalignment_px,
            weather: s.weather.clone(),
            weather_severity: s.weather_severity,
            seed: self.seed(),
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            stage_channels: self.model.stage_channels,
            expansion_factor: self.model.expansion_factor,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            threshold: self.eval.threshold,
            overlap_threshold: self.eval.overlap_threshold,
        }
    }

    pub fn split_fractions(&self) -> (f64, f64, f64) {
        (self.split.train, self.split.val, self.split.test)
    }

    pub fn train_config(&self, checkpoint_dir: &Path) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
            decay_start: t.decay_start,
            loss: LossConfig {
                lambda: t.lambda,
                epsilon: t.epsilon,
            },
            seed: self.seed(),
            variant: t.variant,
            checkpoint_dir: checkpoint_dir.to_path_buf(),
            augment: t.augment,
            threshold: self.eval.threshold,
            overlap_threshold: self.eval.overlap_threshold,
            encoder: self.encoder(),
        }
    }

    /// One `key = value` line per leaf, keys dotted and sorted.
    pub fn render(&self) -> Result<String> {
        let table = toml::Table::try_from(self)?;
        let mut lines = Vec::new();
        flatten("", &table, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        Ok(out)
    }

    /// Writes the rendering to `dir/config.toml` and returns it.
    pub fn write_beside(&self, dir: &Path) -> Result<String> {
        let text = self.render()?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        Ok(text)
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push(format!("{key} = {other}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_round_trips() {
        let mut cfg = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        cfg.train.variant = ModelVariant::WFab;
        cfg.data.image_size = Some(64);
        let text = cfg.render().unwrap();
        assert!(text.contains("train.variant = \"w_fab\"\n"), "{text}");
        assert!(text.contains("seed = 9\n"));
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = RunConfig::parse("train.epochs = 3\nsynth.num_images = 8\nseed = 4\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.synth.num_images, 8);
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.train.batch_size, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("train.epoch = 3\n").is_err());
        assert!(RunConfig::parse("train.variant = \"unet\"\n").is_err());
    }

    #[test]
    fn flag_beats_config_seed() {
        let mut cfg = RunConfig::parse("seed = 4\n").unwrap();
        assert_eq!(cfg.resolve_seed(Some(7)).unwrap(), 7);
        let mut cfg = RunConfig::parse("seed = 4\n").unwrap();
        assert_eq!(cfg.resolve_seed(None).unwrap(), 4);
    }
}
