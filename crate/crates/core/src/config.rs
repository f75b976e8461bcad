//! Flat `section.key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so a file only lists what it changes. [`Config::to_text`] writes
//! the complete key set and parses back to the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{GuidanceSource, HdsMode};
use crate::encoder::{str_enum, ContextIndexMode, FusionMode};
use crate::error::{Error, Result};
use crate::loss::{DsccReduction, LossConfig};
use crate::metrics::Averaging;
use crate::model::ModelConfig;
use crate::nn::NormMode;
use crate::optim::AdamWConfig;
use crate::stereo::RightSource;
use crate::worldgen::SceneSpec;

str_enum!(NormMode { Batch => "batch", Frozen => "frozen" });
str_enum!(Averaging { Frequency => "frequency", Macro => "macro" });
str_enum!(DsccReduction { Sum => "sum", PairMean => "pair_mean" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine decay to zero over the run.
    Cosine,
}

str_enum!(Schedule { Constant => "constant", Cosine => "cosine" });

impl Schedule {
    pub fn lr(self, base: f64, iter: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * iter as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub iterations: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Normalisation statistics while training.
    pub norm: NormMode,
    /// Normalisation statistics for evaluation.
    pub eval_norm: NormMode,
    pub log_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Dataset directory; synthetic scenes from `data.*` when `None`.
    pub data: Option<PathBuf>,
    pub averaging: Averaging,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            iterations: 2000,
            crop_h: 64,
            crop_w: 64,
            seed: 0,
            schedule: Schedule::Cosine,
            norm: NormMode::Batch,
            eval_norm: NormMode::Batch,
            log_every: 1,
            eval_every: 0,
            checkpoint_every: 0,
            data: None,
            averaging: Averaging::Frequency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub scenes: usize,
    pub scene: SceneSpec,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { scenes: 8, scene: SceneSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
}

impl Default for Config {
    /// Desk scale: 64×64 scenes with 4 classes and disparities up to 16 px.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: AdamWConfig { lr: 2e-3, ..AdamWConfig::default() },
            train: TrainSettings::default(),
            data: DataSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Full-size settings: 512×256 crops, `d_max` 192, learning rate 2e-4.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.optim = AdamWConfig::default();
        c.model.stereo.d_max = 192;
        c.train.crop_w = 512;
        c.train.crop_h = 256;
        c.train.schedule = Schedule::Constant;
        c.loss.dscc_reduction = DsccReduction::Sum;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let enc = &mut self.model.encoder;
        let st = &mut self.model.stereo;
        let dec = &mut self.model.decoder;
        let l = &mut self.loss;
        let o = &mut self.optim;
        let t = &mut self.train;
        let d = &mut self.data;
        match key.trim() {
            "encoder.n_layers" => enc.n_layers = parse(key, v)?,
            "encoder.channels" => enc.channels = parse_list(key, v)?,
            "encoder.context_index_mode" => enc.context_index_mode = parse::<ContextIndexMode>(key, v)?,
            "encoder.fusion_mode" => enc.fusion_mode = parse::<FusionMode>(key, v)?,
            "encoder.gate_bias_init" => enc.gate_bias_init = parse(key, v)?,
            "stereo.d_max" => st.d_max = parse(key, v)?,
            "stereo.cost_stride" => st.cost_stride = parse(key, v)?,
            "stereo.match_channels" => st.match_channels = parse(key, v)?,
            "stereo.aggregation_hidden" => st.aggregation_hidden = parse(key, v)?,
            "stereo.refine_hidden" => st.refine_hidden = parse(key, v)?,
            "stereo.init_temperature" => st.init_temperature = parse(key, v)?,
            "stereo.right_source" => st.right_source = parse::<RightSource>(key, v)?,
            "decoder.num_classes" => dec.num_classes = parse(key, v)?,
            "decoder.hds_mode" => dec.hds_mode = parse::<HdsMode>(key, v)?,
            "decoder.guidance_source" => dec.guidance_source = parse::<GuidanceSource>(key, v)?,
            "decoder.guidance_layer" => dec.guidance_layer = parse(key, v)?,
            "decoder.stem_channels" => dec.stem_channels = parse(key, v)?,
            "loss.alpha" => l.alpha = parse(key, v)?,
            "loss.beta" => l.beta = parse(key, v)?,
            "loss.enable_dia" => l.enable_dia = parse(key, v)?,
            "loss.enable_dscc" => l.enable_dscc = parse(key, v)?,
            "loss.enable_scg" => l.enable_scg = parse(key, v)?,
            "loss.enable_sm" => l.enable_sm = parse(key, v)?,
            "loss.paper_literal_sign" => l.paper_literal_sign = parse(key, v)?,
            "loss.dscc_reduction" => l.dscc_reduction = parse::<DsccReduction>(key, v)?,
            "optim.lr" => o.lr = parse(key, v)?,
            "optim.eps" => o.eps = parse(key, v)?,
            "optim.weight_decay" => o.weight_decay = parse(key, v)?,
            "optim.beta1" => o.beta1 = parse(key, v)?,
            "optim.beta2" => o.beta2 = parse(key, v)?,
            "train.iterations" => t.iterations = parse(key, v)?,
            "train.crop_h" => t.crop_h = parse(key, v)?,
            "train.crop_w" => t.crop_w = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.schedule" => t.schedule = parse::<Schedule>(key, v)?,
            "train.norm" => t.norm = parse::<NormMode>(key, v)?,
            "train.eval_norm" => t.eval_norm = parse::<NormMode>(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.data" => t.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train.averaging" => t.averaging = parse::<Averaging>(key, v)?,
            "data.scenes" => d.scenes = parse(key, v)?,
            "data.width" => d.scene.width = parse(key, v)?,
            "data.height" => d.scene.height = parse(key, v)?,
            "data.num_objects" => d.scene.num_objects = parse(key, v)?,
            "data.num_classes" => d.scene.num_classes = parse(key, v)?,
            "data.background_class" => d.scene.background_class = parse(key, v)?,
            "data.disparity_min" => d.scene.disparity_range.0 = parse(key, v)?,
            "data.disparity_max" => d.scene.disparity_range.1 = parse(key, v)?,
            "data.seed" => d.scene.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let enc = &self.model.encoder;
        let st = &self.model.stereo;
        let dec = &self.model.decoder;
        let (l, o, t, d) = (&self.loss, &self.optim, &self.train, &self.data);
        vec![
            ("encoder.n_layers", enc.n_layers.to_string()),
            ("encoder.channels", join(&enc.channels)),
            ("encoder.context_index_mode", enc.context_index_mode.to_string()),
            ("encoder.fusion_mode", enc.fusion_mode.to_string()),
            ("encoder.gate_bias_init", enc.gate_bias_init.to_string()),
            ("stereo.d_max", st.d_max.to_string()),
            ("stereo.cost_stride", st.cost_stride.to_string()),
            ("stereo.match_channels", st.match_channels.to_string()),
            ("stereo.aggregation_hidden", st.aggregation_hidden.to_string()),
            ("stereo.refine_hidden", st.refine_hidden.to_string()),
            ("stereo.init_temperature", st.init_temperature.to_string()),
            ("stereo.right_source", st.right_source.to_string()),
            ("decoder.num_classes", dec.num_classes.to_string()),
            ("decoder.hds_mode", dec.hds_mode.to_string()),
            ("decoder.guidance_source", dec.guidance_source.to_string()),
            ("decoder.guidance_layer", dec.guidance_layer.to_string()),
            ("decoder.stem_channels", dec.stem_channels.to_string()),
            ("loss.alpha", l.alpha.to_string()),
            ("loss.beta", l.beta.to_string()),
            ("loss.enable_dia", l.enable_dia.to_string()),
            ("loss.enable_dscc", l.enable_dscc.to_string()),
            ("loss.enable_scg", l.enable_scg.to_string()),
            ("loss.enable_sm", l.enable_sm.to_string()),
            ("loss.paper_literal_sign", l.paper_literal_sign.to_string()),
            ("loss.dscc_reduction", l.dscc_reduction.to_string()),
            ("optim.lr", o.lr.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.crop_h", t.crop_h.to_string()),
            ("train.crop_w", t.crop_w.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.schedule", t.schedule.to_string()),
            ("train.norm", t.norm.to_string()),
            ("train.eval_norm", t.eval_norm.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.data", t.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("train.averaging", t.averaging.to_string()),
            ("data.scenes", d.scenes.to_string()),
            ("data.width", d.scene.width.to_string()),
            ("data.height", d.scene.height.to_string()),
            ("data.num_objects", d.scene.num_objects.to_string()),
            ("data.num_classes", d.scene.num_classes.to_string()),
            ("data.background_class", d.scene.background_class.to_string()),
            ("data.disparity_min", d.scene.disparity_range.0.to_string()),
            ("data.disparity_max", d.scene.disparity_range.1.to_string()),
            ("data.seed", d.scene.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value', got {line:?}", n + 1)));
            };
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Apply `key=value` overrides such as command-line `--set` arguments.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.scene.validate()?;
        let t = &self.train;
        if t.crop_h == 0 || t.crop_w == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if !(self.optim.lr > 0.0 && self.optim.eps > 0.0 && self.optim.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, eps > 0, weight_decay >= 0".into()));
        }
        Ok(())
    }
}
