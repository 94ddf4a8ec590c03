//! Flat `key = value` experiment configuration.
//!
//! Keys (defaults reproduce the desk-scale benchmark):
//!
//! | key | meaning |
//! |-----|---------|
//! | `seed` | seed for data, training and evaluation |
//! | `method` | `cigmo`, `vae`, `mixture_vae`, `gvae` or `mlvae` |
//! | `classes`, `identities_per_class`, `views_per_identity`, `image_size` | synthetic data layout |
//! | `max_rotation`, `scale_min`, `scale_max`, `max_translation` | synthetic view ranges |
//! | `test_fraction` | share of identities held out |
//! | `fixed_groups` | groups stored with the training split (0: resample every epoch) |
//! | `categories`, `shape_dim`, `view_dim`, `group_size`, `combine`, `view`, `fusion`, `arch`, `hidden`, `batchnorm`, `category_layers` | model |
//! | `epochs`, `batch_size`, `groups_per_epoch` (0: one per training image), `lr`, `beta1`, `beta2`, `eps` | training |
//! | `swap_pairs`, `probe_hidden`, `probe_epochs`, `probe_batch`, `probe_holdout`, `kmeans_k` (0: class count), `kmeans_restarts` | evaluation |
//! | `grid` | images per side of a swap grid |
//!
//! Lines starting with `#` and blank lines are ignored. Unknown or repeated
//! keys are errors.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::baselines::BaselineKind;
use crate::experiment::{Method, Protocol};
use crate::model::CigmoConfig;

use super::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub protocol: Protocol,
    pub fixed_groups: usize,
    pub kmeans_k: usize,
    pub grid: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { seed: 0, method: Method::Cigmo, protocol: Protocol::default(), fixed_groups: 0, kmeans_k: 0, grid: 6 }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl ExperimentConfig {
    const OWN_KEYS: [&'static str; 28] = [
        "seed",
        "method",
        "classes",
        "identities_per_class",
        "views_per_identity",
        "image_size",
        "max_rotation",
        "scale_min",
        "scale_max",
        "max_translation",
        "test_fraction",
        "fixed_groups",
        "epochs",
        "batch_size",
        "groups_per_epoch",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "swap_pairs",
        "probe_hidden",
        "probe_epochs",
        "probe_batch",
        "probe_holdout",
        "kmeans_k",
        "kmeans_restarts",
        "grid",
        "image",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let p = &mut self.protocol;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "method" => {
                self.method = match value {
                    "cigmo" => Method::Cigmo,
                    other => Method::Baseline(parse::<BaselineKind>(key, other)?),
                }
            }
            "classes" => p.synth.classes = parse(key, value)?,
            "identities_per_class" => p.synth.identities_per_class = parse(key, value)?,
            "views_per_identity" => p.synth.views_per_identity = parse(key, value)?,
            "image_size" => p.synth.image_size = parse(key, value)?,
            "max_rotation" => p.synth.max_rotation = parse(key, value)?,
            "scale_min" => p.synth.scale_range.0 = parse(key, value)?,
            "scale_max" => p.synth.scale_range.1 = parse(key, value)?,
            "max_translation" => p.synth.max_translation = parse(key, value)?,
            "test_fraction" => p.test_fraction = parse(key, value)?,
            "fixed_groups" => self.fixed_groups = parse(key, value)?,
            "epochs" => p.train.epochs = parse(key, value)?,
            "batch_size" => p.train.batch_size = parse(key, value)?,
            "groups_per_epoch" => {
                let n: usize = parse(key, value)?;
                p.train.groups_per_epoch = (n > 0).then_some(n);
            }
            "lr" => p.train.adam.lr = parse(key, value)?,
            "beta1" => p.train.adam.beta1 = parse(key, value)?,
            "beta2" => p.train.adam.beta2 = parse(key, value)?,
            "eps" => p.train.adam.eps = parse(key, value)?,
            "swap_pairs" => p.swap_pairs = parse(key, value)?,
            "probe_hidden" => p.probe.hidden = parse(key, value)?,
            "probe_epochs" => p.probe.epochs = parse(key, value)?,
            "probe_batch" => p.probe.batch_size = parse(key, value)?,
            "probe_holdout" => p.probe.holdout = parse(key, value)?,
            "kmeans_k" => self.kmeans_k = parse(key, value)?,
            "kmeans_restarts" => p.kmeans_restarts = parse(key, value)?,
            "grid" => self.grid = parse(key, value)?,
            "image" => return Err(CliError::Config("`image` is taken from the dataset".into())),
            _ if CigmoConfig::KEYS.contains(&key) => p.model.set(key, value).map_err(|e| CliError::Config(e.to_string()))?,
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Apply a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(CliError::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, in documentation order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = &self.protocol;
        let head: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("method", self.method.name().to_owned()),
            ("classes", p.synth.classes.to_string()),
            ("identities_per_class", p.synth.identities_per_class.to_string()),
            ("views_per_identity", p.synth.views_per_identity.to_string()),
            ("image_size", p.synth.image_size.to_string()),
            ("max_rotation", p.synth.max_rotation.to_string()),
            ("scale_min", p.synth.scale_range.0.to_string()),
            ("scale_max", p.synth.scale_range.1.to_string()),
            ("max_translation", p.synth.max_translation.to_string()),
            ("test_fraction", p.test_fraction.to_string()),
            ("fixed_groups", self.fixed_groups.to_string()),
        ];
        let mut pairs: Vec<(String, String)> = head.into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
        pairs.extend(p.model.to_pairs().into_iter().filter(|(k, _)| k != "image"));
        let rest: Vec<(&str, String)> = vec![
            ("epochs", p.train.epochs.to_string()),
            ("batch_size", p.train.batch_size.to_string()),
            ("groups_per_epoch", p.train.groups_per_epoch.unwrap_or(0).to_string()),
            ("lr", p.train.adam.lr.to_string()),
            ("beta1", p.train.adam.beta1.to_string()),
            ("beta2", p.train.adam.beta2.to_string()),
            ("eps", p.train.adam.eps.to_string()),
            ("swap_pairs", p.swap_pairs.to_string()),
            ("probe_hidden", p.probe.hidden.to_string()),
            ("probe_epochs", p.probe.epochs.to_string()),
            ("probe_batch", p.probe.batch_size.to_string()),
            ("probe_holdout", p.probe.holdout.to_string()),
            ("kmeans_k", self.kmeans_k.to_string()),
            ("kmeans_restarts", p.kmeans_restarts.to_string()),
            ("grid", self.grid.to_string()),
        ];
        pairs.extend(rest.into_iter().map(|(k, v)| (k.to_owned(), v)));
        pairs
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// All keys a config file may contain.
    pub fn keys() -> Vec<&'static str> {
        let mut keys: Vec<&str> = Self::OWN_KEYS.iter().copied().filter(|&k| k != "image").collect();
        keys.extend(CigmoConfig::KEYS.iter().copied().filter(|&k| k != "image"));
        keys
    }
}
