//! `key=value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! Values from the file sit between the built-in defaults and command-line
//! flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use pmad::data::AugmentParams;
use pmad::imgproc::PreprocessConfig;
use pmad::training::TrainConfig;

use crate::error::CliError;

/// Every key the file may set.
pub const KEYS: &[&str] = &[
    "seed",
    "profile",
    // preprocessing
    "gamma",
    "sigma",
    "kernel_size",
    // model input size (defaults to the profile's)
    "input_height",
    "input_width",
    // training
    "learning_rate",
    "epochs",
    "batch_size",
    "plateau_patience",
    "plateau_factor",
    "min_improvement",
    "lr_min",
    "include_dice",
    "focal_gamma",
    "bn_momentum",
    "f32_params",
    "train_fraction",
    "balance",
    // synthetic data
    "n_per_class",
    "image_size",
    // gradcheck
    "seeds",
    "network_coords",
];

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("config line {}: expected key=value, got {raw:?}", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(CliError::Usage(format!("config line {}: unknown key {k:?}", n + 1)));
            }
            values.insert(k.to_string(), v.to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets a key unless the value is `None` (command-line overrides).
    pub fn set(&mut self, key: &str, value: Option<String>) {
        debug_assert!(KEYS.contains(&key));
        if let Some(v) = value {
            self.values.insert(key.into(), v);
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {v:?}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// The effective values, for manifests.
    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get_or("seed", 42)
    }

    pub fn preprocess(&self, height: usize, width: usize) -> Result<PreprocessConfig, CliError> {
        let d = PreprocessConfig::default();
        let cfg = PreprocessConfig {
            gamma: self.get_or("gamma", d.gamma)?,
            sigma: self.get_or("sigma", d.sigma)?,
            kernel_size: self.get_or("kernel_size", d.kernel_size)?,
            ..d
        }
        .with_target(height, width);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides the profile's input size when either key is set.
    pub fn input_size(&self, default: (usize, usize)) -> Result<(usize, usize), CliError> {
        Ok((self.get_or("input_height", default.0)?, self.get_or("input_width", default.1)?))
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self.get_or("learning_rate", d.learning_rate)?,
            epochs: self.get_or("epochs", d.epochs)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            seed: self.seed()?,
            plateau_patience: self.get_or("plateau_patience", d.plateau_patience)?,
            plateau_factor: self.get_or("plateau_factor", d.plateau_factor)?,
            min_improvement: self.get_or("min_improvement", d.min_improvement)?,
            lr_min: self.get_or("lr_min", d.lr_min)?,
            include_dice: self.get_or("include_dice", d.include_dice)?,
            focal_gamma: self.get_or("focal_gamma", d.focal_gamma)?,
            bn_momentum: self.get_or("bn_momentum", d.bn_momentum)?,
            f32_params: self.get_or("f32_params", d.f32_params)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_fractions(&self) -> Result<(f64, f64), CliError> {
        let tr: f64 = self.get_or("train_fraction", 0.8)?;
        Ok((tr, 1.0 - tr))
    }

    pub fn augment(&self) -> AugmentParams {
        AugmentParams::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let c = Config::parse("# run\nlearning_rate = 0.05 # faster\n\nepochs=3\n").unwrap();
        let t = c.train().unwrap();
        assert_eq!((t.learning_rate, t.epochs), (0.05, 3));
        assert!(matches!(Config::parse("lr = 1"), Err(CliError::Usage(_))));
        assert!(matches!(Config::parse("epochs"), Err(CliError::Usage(_))));
        assert!(matches!(Config::parse("epochs = many").unwrap().train(), Err(CliError::Usage(_))));
    }

    #[test]
    fn flags_override_file() {
        let mut c = Config::parse("seed = 3").unwrap();
        assert_eq!(c.seed().unwrap(), 3);
        c.set("seed", Some("9".into()));
        c.set("seed", None);
        assert_eq!(c.seed().unwrap(), 9);
    }

    #[test]
    fn invalid_training_values_are_usage_errors() {
        let c = Config::parse("plateau_factor = 1.5").unwrap();
        assert!(matches!(c.train(), Err(CliError::Usage(_))));
    }
}
