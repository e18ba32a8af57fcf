//! Training configuration and its `key = value` text form.
//!
//! Keys are flat names or dotted paths for the loss weights
//! (`weights.lambda_spec`). Lines starting with `#` are comments.

use std::fmt;
use std::str::FromStr;

use crate::colorspace::SpanScheme;
use crate::error::{Error, Result};
use crate::losses::{CycleNorm, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Stage 1 only: cycle-consistent HSI reconstruction.
    HsiCycle,
    /// Stage 2 only: enhancement from a frozen HSI generator.
    Enhance,
    /// Stage 1 followed by stage 2.
    Cascade,
}

/// Component toggles of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Neither spectral-profile regularization nor the color stack.
    Model1,
    /// Spectral-profile regularization only.
    Model2,
    /// Both components.
    Full,
}

impl Ablation {
    pub fn spectral_enabled(self) -> bool {
        !matches!(self, Ablation::Model1)
    }

    pub fn color_stack_enabled(self) -> bool {
        matches!(self, Ablation::Full)
    }

    /// Reference SSIM on the real benchmark, for documentation only.
    pub fn reference_ssim(self) -> f64 {
        match self {
            Ablation::Model1 => 0.6784,
            Ablation::Model2 => 0.7244,
            Ablation::Full => 0.8052,
        }
    }
}

macro_rules! text_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "invalid value {other:?}, expected one of: {}",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(Stage { Stage::HsiCycle => "hsi_cycle", Stage::Enhance => "enhance", Stage::Cascade => "cascade" });
text_enum!(Ablation { Ablation::Model1 => "model1", Ablation::Model2 => "model2", Ablation::Full => "full" });
text_enum!(CycleNorm { CycleNorm::L1 => "l1", CycleNorm::L2 => "l2" });
text_enum!(SpanScheme { SpanScheme::WavelengthBlocks => "blocks", SpanScheme::Cyclic => "cyclic" });

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub weights: LossWeights,
    /// Optimizer steps. For `cascade` this is the total over both stages.
    pub steps: usize,
    /// Stage-1 share of a cascade; defaults to a quarter of `steps`.
    pub stage1_steps: Option<usize>,
    pub batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub image_size: usize,
    pub depth: usize,
    pub base_width: usize,
    pub disc_depth: usize,
    pub disc_width: usize,
    pub ablation: Ablation,
    pub span_scheme: SpanScheme,
    /// Lets stage-2 gradients update the HSI generator during a cascade.
    pub joint_finetune: bool,
    /// Random crop to `image_size` plus horizontal flip per sample.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Cascade,
            weights: LossWeights::default(),
            steps: 200,
            stage1_steps: None,
            batch: 1,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            image_size: 32,
            depth: 3,
            base_width: 8,
            disc_depth: 3,
            disc_width: 8,
            ablation: Ablation::Full,
            span_scheme: SpanScheme::WavelengthBlocks,
            joint_finetune: false,
            augment: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "stage",
    "steps",
    "stage1_steps",
    "batch",
    "learning_rate",
    "beta1",
    "beta2",
    "seed",
    "image_size",
    "depth",
    "base_width",
    "disc_depth",
    "disc_width",
    "ablation",
    "span_scheme",
    "joint_finetune",
    "augment",
    "weights.lambda_cyc",
    "weights.lambda_idt",
    "weights.lambda_spec",
    "weights.lambda_rec",
    "weights.cycle_norm",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let ctx = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("{key}: {m}")),
            other => other,
        };
        match key.trim() {
            "stage" => self.stage = value.parse().map_err(ctx)?,
            "steps" => self.steps = parse(key, value)?,
            "stage1_steps" => {
                self.stage1_steps = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "batch" => self.batch = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "disc_depth" => self.disc_depth = parse(key, value)?,
            "disc_width" => self.disc_width = parse(key, value)?,
            "ablation" => self.ablation = value.parse().map_err(ctx)?,
            "span_scheme" => self.span_scheme = value.parse().map_err(ctx)?,
            "joint_finetune" => self.joint_finetune = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "weights.lambda_cyc" => self.weights.lambda_cyc = parse(key, value)?,
            "weights.lambda_idt" => self.weights.lambda_idt = parse(key, value)?,
            "weights.lambda_spec" => self.weights.lambda_spec = parse(key, value)?,
            "weights.lambda_rec" => self.weights.lambda_rec = parse(key, value)?,
            "weights.cycle_norm" => self.weights.cycle_norm = value.parse().map_err(ctx)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let stage1 = self.stage1_steps.map_or("auto".to_string(), |v| v.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("stage", self.stage.to_string()),
            ("steps", self.steps.to_string()),
            ("stage1_steps", stage1),
            ("batch", self.batch.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("depth", self.depth.to_string()),
            ("base_width", self.base_width.to_string()),
            ("disc_depth", self.disc_depth.to_string()),
            ("disc_width", self.disc_width.to_string()),
            ("ablation", self.ablation.to_string()),
            ("span_scheme", self.span_scheme.to_string()),
            ("joint_finetune", self.joint_finetune.to_string()),
            ("augment", self.augment.to_string()),
            ("weights.lambda_cyc", w.lambda_cyc.to_string()),
            ("weights.lambda_idt", w.lambda_idt.to_string()),
            ("weights.lambda_spec", w.lambda_spec.to_string()),
            ("weights.lambda_rec", w.lambda_rec.to_string()),
            ("weights.cycle_norm", w.cycle_norm.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.depth == 0 || self.disc_depth == 0 || self.base_width == 0 || self.disc_width == 0 {
            return Err(Error::Config("network depths and widths must be >= 1".into()));
        }
        let m = 1usize << self.depth;
        if self.image_size == 0 || self.image_size % m != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 2^depth = {m}",
                self.image_size
            )));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4 for spectral profiles".into()));
        }
        if crate::networks::NetworkSpec::patchgan_out_len(self.disc_depth, self.image_size).is_none() {
            return Err(Error::Config(format!(
                "image_size {} is too small for a discriminator of depth {}",
                self.image_size, self.disc_depth
            )));
        }
        if let Some(s1) = self.stage1_steps {
            if self.stage == Stage::Cascade && s1 > self.steps {
                return Err(Error::Config(format!(
                    "stage1_steps {s1} exceeds total steps {}",
                    self.steps
                )));
            }
        }
        Ok(())
    }

    /// Loss weights after the ablation toggles.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.ablation.spectral_enabled() {
            w.lambda_spec = 0.0;
        }
        w
    }

    /// (stage-1 steps, stage-2 steps) this configuration will run.
    pub fn stage_steps(&self) -> (usize, usize) {
        match self.stage {
            Stage::HsiCycle => (self.steps, 0),
            Stage::Enhance => (0, self.steps),
            Stage::Cascade => {
                let s1 = self.stage1_steps.unwrap_or(self.steps / 4).min(self.steps);
                (s1, self.steps - s1)
            }
        }
    }
}
