//! Flat `key = value` run configuration covering model and training knobs.
//!
//! Blank lines and `#` comments are skipped. Every key is optional; absent
//! keys keep their defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Every recognized key, in dump order, with a short description.
pub const KEYS: [(&str, &str); 22] = [
    ("input_size", "side of the square gray input"),
    ("base_channels", "width of the first trunk stage (64 = full size)"),
    ("num_classes", "segmentation classes"),
    ("mixture_components", "logistic mixture components"),
    ("embedding_channels", "color embedding width"),
    ("fusion_mode", "concat | feature_transform | embedding_only"),
    ("generator_layers", "masked gated layers in the generator"),
    ("generator_channels", "generator width"),
    ("bins", "quantization levels per chroma channel"),
    ("log_scale_min", "floor of mixture log-scales"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("polyak_decay", "parameter averaging decay"),
    ("lambda_emb", "weight of the embedding color loss"),
    ("lambda_seg", "weight of the segmentation loss"),
    ("lambda_gen", "weight of the generator loss"),
    ("epochs", "passes over the training set"),
    ("batch_size", "images per step"),
    ("seed", "seed of all randomness"),
    ("regime", "joint | color_only | seg_only_scratch | seg_only_pretrained"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{value}`: {e}"),
    })
}

impl RunConfig {
    /// Assign one key. Unknown keys and unparsable values name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "input_size" => m.input_size = parse(key, value)?,
            "base_channels" => m.base_channels = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "mixture_components" => m.mixture_components = parse(key, value)?,
            "embedding_channels" => m.embedding_channels = parse(key, value)?,
            "fusion_mode" => m.fusion_mode = parse(key, value)?,
            "generator_layers" => m.generator_layers = parse(key, value)?,
            "generator_channels" => m.generator_channels = parse(key, value)?,
            "bins" => m.bins = parse(key, value)?,
            "log_scale_min" => m.log_scale_min = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.adam_beta1 = parse(key, value)?,
            "beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "polyak_decay" => t.polyak_decay = parse(key, value)?,
            "lambda_emb" => t.loss_weights[0] = parse(key, value)?,
            "lambda_seg" => t.loss_weights[1] = parse(key, value)?,
            "lambda_gen" => t.loss_weights[2] = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "regime" => t.regime = parse(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "input_size" => m.input_size.to_string(),
            "base_channels" => m.base_channels.to_string(),
            "num_classes" => m.num_classes.to_string(),
            "mixture_components" => m.mixture_components.to_string(),
            "embedding_channels" => m.embedding_channels.to_string(),
            "fusion_mode" => m.fusion_mode.to_string(),
            "generator_layers" => m.generator_layers.to_string(),
            "generator_channels" => m.generator_channels.to_string(),
            "bins" => m.bins.to_string(),
            "log_scale_min" => m.log_scale_min.to_string(),
            "lr" => t.lr.to_string(),
            "beta1" => t.adam_beta1.to_string(),
            "beta2" => t.adam_beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "polyak_decay" => t.polyak_decay.to_string(),
            "lambda_emb" => t.loss_weights[0].to_string(),
            "lambda_seg" => t.loss_weights[1].to_string(),
            "lambda_gen" => t.loss_weights[2].to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "regime" => t.regime.to_string(),
            _ => return None,
        })
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                msg: format!("line {} is not `key = value`", i + 1),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its current value, commented.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (key, help) in KEYS {
            let _ = writeln!(out, "# {help}\n{key} = {}", self.get(key).expect("known key"));
        }
        out
    }
}
