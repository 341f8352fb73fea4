//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Keys follow the usual training
//! table columns (`depth`, `width`, `heads`, `M`, `max_lr`, `weight_decay`,
//! `epochs`, `batch`, `loss`) plus the remaining architecture and scheduler
//! knobs. Unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use lrsa_core::lrsa::{LrsaConfig, Variant};
use lrsa_core::nn::NormKind;
use lrsa_core::train::{LossKind, TrainConfig};

use crate::CliError;

/// Fraction of a dataset held out for testing when none is configured.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: LrsaConfig,
    pub train: TrainConfig,
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: LrsaConfig::default(), train: TrainConfig::default(), test_fraction: DEFAULT_TEST_FRACTION }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{value}`")))
}

fn parse_norm(value: &str) -> Result<NormKind, CliError> {
    match value {
        "layer_norm" => Ok(NormKind::LayerNorm),
        "rms_norm" => Ok(NormKind::RmsNorm),
        _ => Err(CliError::Usage(format!("config key `norm`: expected layer_norm or rms_norm, got `{value}`"))),
    }
}

fn norm_name(kind: NormKind) -> &'static str {
    match kind {
        NormKind::LayerNorm => "layer_norm",
        NormKind::RmsNorm => "rms_norm",
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "depth" => m.depth = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "M" | "latent_count" => m.latent_count = parse(key, value)?,
            "ffn_ratio" => m.ffn_ratio = parse(key, value)?,
            "num_freqs" => m.num_freqs = parse(key, value)?,
            "norm" => m.norm = parse_norm(value)?,
            "variant" => {
                m.variant = value.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))?;
            }
            "zero_init_residual" => m.zero_init_residual = parse(key, value)?,
            "d_in" => m.d_in = parse(key, value)?,
            "d_out" => m.d_out = parse(key, value)?,
            "d_phys" => m.d_phys = parse(key, value)?,
            "max_lr" => t.max_lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch" | "batch_size" => t.batch_size = parse(key, value)?,
            "loss" => t.loss = value.parse::<LossKind>().map_err(|e| CliError::Usage(e.to_string()))?,
            "lg_weight" => t.lg_weight = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "div_factor" => t.scheduler.div_factor = parse(key, value)?,
            "final_div_factor" => t.scheduler.final_div_factor = parse(key, value)?,
            "pct_start" => t.scheduler.pct_start = parse(key, value)?,
            "grad_clip" => t.grad_clip = if value == "none" { None } else { Some(parse(key, value)?) },
            "test_fraction" => self.test_fraction = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form `parse_text` reads back.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("depth", m.depth.to_string());
        put("width", m.width.to_string());
        put("heads", m.heads.to_string());
        put("M", m.latent_count.to_string());
        put("ffn_ratio", m.ffn_ratio.to_string());
        put("num_freqs", m.num_freqs.to_string());
        put("norm", norm_name(m.norm).into());
        put("variant", m.variant.name().into());
        put("zero_init_residual", m.zero_init_residual.to_string());
        put("d_in", m.d_in.to_string());
        put("d_out", m.d_out.to_string());
        put("d_phys", m.d_phys.to_string());
        put("max_lr", format!("{:e}", t.max_lr));
        put("weight_decay", format!("{:e}", t.weight_decay));
        put("epochs", t.epochs.to_string());
        put("batch", t.batch_size.to_string());
        put("loss", t.loss.name().into());
        put("lg_weight", t.lg_weight.to_string());
        put("seed", t.seed.to_string());
        put("div_factor", t.scheduler.div_factor.to_string());
        put("final_div_factor", t.scheduler.final_div_factor.to_string());
        put("pct_start", t.scheduler.pct_start.to_string());
        put("grad_clip", t.grad_clip.map_or_else(|| "none".into(), |c| c.to_string()));
        put("test_fraction", self.test_fraction.to_string());
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "train": self.train,
            "test_fraction": self.test_fraction,
        })
    }
}
