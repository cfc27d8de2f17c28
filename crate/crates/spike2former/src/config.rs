//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. A `version` line is
//! required. Keys that are absent keep the defaults of the chosen
//! `device_scale`, so a file may be as short as `version = 1`. A repeated
//! key takes its last value.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use spike2former_core::loss::LossWeights;
use spike2former_core::model::{Ablation, ModelConfig};
use spike2former_core::neuron::{NeuronVariant, SpikeOrdering};
use spike2former_core::optim::AdamWConfig;
use spike2former_core::profiler::{EnergyModel, Mode};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviceScale {
    Toy,
    Small,
}

impl FromStr for DeviceScale {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "small" => Ok(Self::Small),
            _ => bail!("expected toy or small, got `{s}`"),
        }
    }
}

impl fmt::Display for DeviceScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Toy => "toy",
            Self::Small => "small",
        })
    }
}

impl DeviceScale {
    pub fn model(self) -> ModelConfig {
        match self {
            Self::Toy => ModelConfig::toy(),
            Self::Small => ModelConfig::small(),
        }
    }
}

pub fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "train" => Ok(Mode::Train),
        "infer" => Ok(Mode::Infer),
        _ => bail!("expected train or infer, got `{s}`"),
    }
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Train => "train",
        Mode::Infer => "infer",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub device_scale: DeviceScale,
    pub mode: Mode,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub train_images: usize,
    pub eval_images: usize,
    /// Evaluate mIoU every this many steps; 0 only at the end.
    pub eval_every: usize,
    pub loss: LossWeights,
    pub energy: EnergyModel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_scale(DeviceScale::Toy)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("field `{key}`: cannot parse `{v}`: {e}"))
}

impl RunConfig {
    pub fn for_scale(scale: DeviceScale) -> Self {
        Self {
            seed: 0,
            device_scale: scale,
            mode: Mode::Infer,
            model: scale.model(),
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            steps: 200,
            train_images: 16,
            eval_images: 16,
            eval_every: 50,
            loss: LossWeights::default(),
            energy: EnergyModel::default(),
        }
    }

    /// Seeds of the training set, the evaluation set and calibration.
    pub fn train_data_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn eval_data_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", no + 1))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let version = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "version")
            .ok_or_else(|| anyhow!("field `version`: missing"))?;
        let version: u32 = parse("version", &version.1)?;
        if version != CONFIG_VERSION {
            bail!("field `version`: unsupported version {version}, expected {CONFIG_VERSION}");
        }
        let scale = match pairs.iter().rev().find(|(k, _)| k == "device_scale") {
            Some((_, v)) => parse::<DeviceScale>("device_scale", v)?,
            None => DeviceScale::Toy,
        };
        let mut cfg = Self::for_scale(scale);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "version" | "device_scale" => {}
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = parse_mode(v).with_context(|| format!("field `{key}`"))?,
            "image_size" => m.image_size = parse(key, v)?,
            "in_channels" => m.in_channels = parse(key, v)?,
            "stem_channels" => m.stem_channels = parse(key, v)?,
            "stage_channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                m.stage_channels = parts
                    .try_into()
                    .map_err(|_| anyhow!("field `{key}`: expected 4 comma-separated widths"))?;
            }
            "embed" => m.embed = parse(key, v)?,
            "queries" => m.queries = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "decoder_layers" => m.decoder_layers = parse(key, v)?,
            "encoder_blocks" => m.encoder_blocks = parse(key, v)?,
            "groups" => m.groups = parse(key, v)?,
            "points" => m.points = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "attn_scale" => {
                m.attn_scale = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "timesteps" => m.neuron.timesteps = parse(key, v)?,
            "levels" => m.neuron.levels = parse(key, v)?,
            "beta" => m.neuron.beta = parse(key, v)?,
            "theta" => m.neuron.theta = parse(key, v)?,
            "neuron" => {
                m.neuron.variant = match v {
                    "nilif" => NeuronVariant::NiLif,
                    "ilif" => NeuronVariant::ILif,
                    _ => bail!("field `{key}`: expected nilif or ilif, got `{v}`"),
                }
            }
            "spike_ordering" => {
                m.neuron.ordering = match v {
                    "front" => SpikeOrdering::FrontLoaded,
                    "uniform" => SpikeOrdering::Uniform,
                    _ => bail!("field `{key}`: expected front or uniform, got `{v}`"),
                }
            }
            "me_shortcut" => m.ablation.me_shortcut = parse(key, v)?,
            "spike_query" => m.ablation.spike_query = parse(key, v)?,
            "encoder" => m.ablation.encoder = parse(key, v)?,
            "lr" => self.optimizer.lr = parse(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "beta1" => self.optimizer.beta1 = parse(key, v)?,
            "beta2" => self.optimizer.beta2 = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "train_images" => self.train_images = parse(key, v)?,
            "eval_images" => self.eval_images = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "w_class" => self.loss.class = parse(key, v)?,
            "w_bce" => self.loss.bce = parse(key, v)?,
            "w_dice" => self.loss.dice = parse(key, v)?,
            "no_object" => self.loss.no_object = parse(key, v)?,
            "e_mac" => self.energy.e_mac = parse(key, v)?,
            "e_ac" => self.energy.e_ac = parse(key, v)?,
            _ => bail!("field `{key}`: unknown key"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        self.optimizer.validate().context("optimizer")?;
        self.energy.validate().context("energy model")?;
        if self.train_images == 0 {
            bail!("field `train_images`: must be >= 1");
        }
        if self.eval_images == 0 {
            bail!("field `eval_images`: must be >= 1");
        }
        for (k, w) in [
            ("w_class", self.loss.class),
            ("w_bce", self.loss.bce),
            ("w_dice", self.loss.dice),
            ("no_object", self.loss.no_object),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                bail!("field `{k}`: must be finite and >= 0, got {w}");
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let n = &m.neuron;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("version", CONFIG_VERSION.to_string());
        kv("seed", self.seed.to_string());
        kv("device_scale", self.device_scale.to_string());
        kv("mode", mode_name(self.mode).into());
        kv("image_size", m.image_size.to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("stem_channels", m.stem_channels.to_string());
        kv(
            "stage_channels",
            m.stage_channels.map(|c| c.to_string()).join(","),
        );
        kv("embed", m.embed.to_string());
        kv("queries", m.queries.to_string());
        kv("heads", m.heads.to_string());
        kv("decoder_layers", m.decoder_layers.to_string());
        kv("encoder_blocks", m.encoder_blocks.to_string());
        kv("groups", m.groups.to_string());
        kv("points", m.points.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("attn_scale", m.attn_scale.map_or("auto".into(), |s| format!("{s:?}")));
        kv("timesteps", n.timesteps.to_string());
        kv("levels", n.levels.to_string());
        kv("beta", format!("{:?}", n.beta));
        kv("theta", format!("{:?}", n.theta));
        kv(
            "neuron",
            match n.variant {
                NeuronVariant::NiLif => "nilif",
                NeuronVariant::ILif => "ilif",
            }
            .into(),
        );
        kv(
            "spike_ordering",
            match n.ordering {
                SpikeOrdering::FrontLoaded => "front",
                SpikeOrdering::Uniform => "uniform",
            }
            .into(),
        );
        let Ablation {
            me_shortcut,
            spike_query,
            encoder,
        } = m.ablation;
        kv("me_shortcut", me_shortcut.to_string());
        kv("spike_query", spike_query.to_string());
        kv("encoder", encoder.to_string());
        kv("lr", format!("{:?}", self.optimizer.lr));
        kv("weight_decay", format!("{:?}", self.optimizer.weight_decay));
        kv("beta1", format!("{:?}", self.optimizer.beta1));
        kv("beta2", format!("{:?}", self.optimizer.beta2));
        kv("steps", self.steps.to_string());
        kv("train_images", self.train_images.to_string());
        kv("eval_images", self.eval_images.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("w_class", format!("{:?}", self.loss.class));
        kv("w_bce", format!("{:?}", self.loss.bce));
        kv("w_dice", format!("{:?}", self.loss.dice));
        kv("no_object", format!("{:?}", self.loss.no_object));
        kv("e_mac", format!("{:?}", self.energy.e_mac));
        kv("e_ac", format!("{:?}", self.energy.e_ac));
        s
    }
}

/// Keys describing the architecture and neurons; a checkpoint must agree
/// with a construction config on all of them.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "image_size",
    "in_channels",
    "stem_channels",
    "stage_channels",
    "embed",
    "queries",
    "heads",
    "decoder_layers",
    "encoder_blocks",
    "groups",
    "points",
    "mlp_ratio",
    "num_classes",
    "attn_scale",
    "timesteps",
    "levels",
    "beta",
    "theta",
    "neuron",
    "spike_ordering",
    "me_shortcut",
    "spike_query",
    "encoder",
];

/// `key -> value` of the canonical text.
pub fn fields(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
