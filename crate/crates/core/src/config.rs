//! Flat `key = value` run configuration with named profiles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumConfig;
use crate::error::{Error, Result};
use crate::meta::TrainConfig;
use crate::pretrain::PretrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Desk-scale sizes.
    Quickstart,
    /// The published schedule sizes.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quickstart" => Ok(Profile::Quickstart),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile `{s}` (quickstart|paper)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Quickstart => "quickstart",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub test_tasks: usize,
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "profile",
    "pretrain.lr_init",
    "pretrain.lr_floor",
    "pretrain.lr_period",
    "pretrain.batch_size",
    "pretrain.keep_prob",
    "pretrain.max_iterations",
    "model.filters",
    "model.blocks",
    "model.kernel",
    "meta.way",
    "meta.shot",
    "meta.query",
    "meta.base_lr",
    "meta.inner_epochs",
    "meta.gamma_init",
    "meta.gamma_floor",
    "meta.gamma_period",
    "meta.meta_batch",
    "meta.second_order",
    "meta.head",
    "meta.head_depth",
    "meta.head_init_std",
    "meta.bn_mode",
    "meta.optimizer",
    "meta.tasks",
    "meta.val_every",
    "meta.val_tasks",
    "ht.enabled",
    "ht.cadence",
    "ht.hard_tasks",
    "ht.method",
    "test.tasks",
];

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let mut c = RunConfig {
            profile,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            test_tasks: 100,
        };
        match profile {
            Profile::Quickstart => {
                c.pretrain.max_iterations = 2000;
            }
            Profile::Paper => {
                c.train.meta.inner_epochs = 20;
                c.train.meta_tasks = 8000;
                c.train.val_every = 500;
                c.train.val_tasks = 600;
                c.test_tasks = 600;
            }
        }
        c
    }

    /// Parse config text. A `profile` line, wherever it appears, selects the
    /// base values; the other lines override it.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Profile::Quickstart);
        let mut c = RunConfig::profile(profile);
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.train.meta.validate()?;
        self.train.curriculum.validate()?;
        if self.train.meta.inner_epochs == 0 {
            return Err(Error::Config("meta.inner_epochs must be at least 1".into()));
        }
        if self.train.val_every == 0 {
            return Err(Error::Config("meta.val_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Set one key from its text value. `profile` is accepted but only
    /// checked here; use [`RunConfig::parse`] to switch base values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let p = &mut self.pretrain;
        let t = &mut self.train;
        let m = &mut t.meta;
        let h: &mut CurriculumConfig = &mut t.curriculum;
        match key.trim() {
            "profile" => {
                let profile: Profile = v.parse()?;
                if profile != self.profile {
                    return Err(Error::Config(format!(
                        "profile `{profile}` must be chosen before other keys"
                    )));
                }
            }
            "pretrain.lr_init" => p.lr_init = num(key, v)?,
            "pretrain.lr_floor" => p.lr_floor = num(key, v)?,
            "pretrain.lr_period" => p.lr_period = num(key, v)?,
            "pretrain.batch_size" => p.batch_size = num(key, v)?,
            "pretrain.keep_prob" => p.keep_prob = num(key, v)?,
            "pretrain.max_iterations" => p.max_iterations = num(key, v)?,
            "model.filters" => p.extractor.filters = num(key, v)?,
            "model.blocks" => p.extractor.blocks = num(key, v)?,
            "model.kernel" => p.extractor.kernel = num(key, v)?,
            "meta.way" => m.way = num(key, v)?,
            "meta.shot" => m.shot = num(key, v)?,
            "meta.query" => m.query = num(key, v)?,
            "meta.base_lr" => m.base_lr = num(key, v)?,
            "meta.inner_epochs" => m.inner_epochs = num(key, v)?,
            "meta.gamma_init" => m.gamma_init = num(key, v)?,
            "meta.gamma_floor" => m.gamma_floor = num(key, v)?,
            "meta.gamma_period" => m.gamma_period = num(key, v)?,
            "meta.meta_batch" => m.meta_batch = num(key, v)?,
            "meta.second_order" => m.second_order = flag(key, v)?,
            "meta.head" => m.head_kind = v.parse()?,
            "meta.head_depth" => m.head_depth = num(key, v)?,
            "meta.head_init_std" => m.head_init_std = num(key, v)?,
            "meta.bn_mode" => m.bn_mode = v.parse()?,
            "meta.optimizer" => m.optimizer = v.parse()?,
            "meta.tasks" => t.meta_tasks = num(key, v)?,
            "meta.val_every" => t.val_every = num(key, v)?,
            "meta.val_tasks" => t.val_tasks = num(key, v)?,
            "ht.enabled" => h.enabled = flag(key, v)?,
            "ht.cadence" => h.cadence = num(key, v)?,
            "ht.hard_tasks" => h.hard_tasks = num(key, v)?,
            "ht.method" => h.method = v.parse()?,
            "test.tasks" => self.test_tasks = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = &self.pretrain;
        let t = &self.train;
        let m = &t.meta;
        let h = &t.curriculum;
        Some(match key {
            "profile" => self.profile.to_string(),
            "pretrain.lr_init" => p.lr_init.to_string(),
            "pretrain.lr_floor" => p.lr_floor.to_string(),
            "pretrain.lr_period" => p.lr_period.to_string(),
            "pretrain.batch_size" => p.batch_size.to_string(),
            "pretrain.keep_prob" => p.keep_prob.to_string(),
            "pretrain.max_iterations" => p.max_iterations.to_string(),
            "model.filters" => p.extractor.filters.to_string(),
            "model.blocks" => p.extractor.blocks.to_string(),
            "model.kernel" => p.extractor.kernel.to_string(),
            "meta.way" => m.way.to_string(),
            "meta.shot" => m.shot.to_string(),
            "meta.query" => m.query.to_string(),
            "meta.base_lr" => m.base_lr.to_string(),
            "meta.inner_epochs" => m.inner_epochs.to_string(),
            "meta.gamma_init" => m.gamma_init.to_string(),
            "meta.gamma_floor" => m.gamma_floor.to_string(),
            "meta.gamma_period" => m.gamma_period.to_string(),
            "meta.meta_batch" => m.meta_batch.to_string(),
            "meta.second_order" => m.second_order.to_string(),
            "meta.head" => m.head_kind.to_string(),
            "meta.head_depth" => m.head_depth.to_string(),
            "meta.head_init_std" => m.head_init_std.to_string(),
            "meta.bn_mode" => m.bn_mode.to_string(),
            "meta.optimizer" => m.optimizer.to_string(),
            "meta.tasks" => t.meta_tasks.to_string(),
            "meta.val_every" => t.val_every.to_string(),
            "meta.val_tasks" => t.val_tasks.to_string(),
            "ht.enabled" => h.enabled.to_string(),
            "ht.cadence" => h.cadence.to_string(),
            "ht.hard_tasks" => h.hard_tasks.to_string(),
            "ht.method" => h.method.to_string(),
            "test.tasks" => self.test_tasks.to_string(),
            _ => return None,
        })
    }

    /// All resolved values, one `key = value` line each. Parsing this text
    /// gives back an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key resolves")))
            .collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::profile(Profile::Quickstart)
    }
}

/// Non-blank, non-`#` lines split at the first `=`.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown config key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true|false, got `{v}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_differ_where_documented() {
        let q = RunConfig::profile(Profile::Quickstart);
        let p = RunConfig::profile(Profile::Paper);
        assert_eq!(q.pretrain.max_iterations, 2000);
        assert_eq!(p.pretrain.max_iterations, 10_000);
        assert_eq!(p.train.meta.inner_epochs, 20);
        assert_eq!(q.train.meta.inner_epochs, 5);
        assert_eq!(p.test_tasks, 600);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::profile(Profile::Paper);
        c.set("meta.base_lr", "0.05").unwrap();
        c.set("ht.enabled", "on").unwrap();
        c.set("ht.method", "reuse_samples").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::parse("meta.lr = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("meta.way"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("meta.way = five"), Err(Error::Config(_))));
    }

    #[test]
    fn profile_line_sets_base_anywhere() {
        let c = RunConfig::parse("# comment\nmeta.tasks = 10\nprofile = paper\n").unwrap();
        assert_eq!(c.profile, Profile::Paper);
        assert_eq!(c.train.meta_tasks, 10);
        assert_eq!(c.pretrain.max_iterations, 10_000);
    }

    #[test]
    fn every_key_resolves() {
        let c = RunConfig::default();
        for k in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }
}
