//! Run configuration: profile defaults, then an optional TOML file, then
//! `--set key.path=value` overrides. Unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use panfield_core::metainit::{FitConfig, MetaConfig};
use panfield_core::trainer::{Profile, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSettings {
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSettings {
    pub views: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSettings {
    pub port: u16,
    pub max_width: usize,
    pub max_height: usize,
    pub interactive_samples: usize,
    pub refine_samples: usize,
}

/// Effective settings of one run. The top-level `seed` overrides the
/// per-section seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub train: TrainConfig,
    pub render: RenderSettings,
    pub meta: MetaConfig,
    pub corpus: CorpusSettings,
    pub fit: FitConfig,
    pub serve: ServeSettings,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let render_samples = profile.render_samples();
        let mut meta = MetaConfig::toy(8);
        meta.field = profile.thing_config();
        Self {
            profile,
            seed: 0,
            train: profile.train_config(),
            render: RenderSettings { samples: render_samples },
            meta,
            corpus: CorpusSettings { views: 8, size: 24 },
            fit: FitConfig::toy(300),
            serve: ServeSettings {
                port: 8080,
                max_width: 320,
                max_height: 240,
                interactive_samples: 128,
                refine_samples: render_samples,
            },
        }
    }

    /// Merges defaults, `file` and `overrides`; `profile` wins over both.
    pub fn load(file: Option<&Path>, overrides: &[String], profile: Option<&str>) -> Result<Self> {
        let mut user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                text.parse::<Table>().with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .with_context(|| format!("override {item:?} is not key=value"))?;
            set_path(&mut user, key.trim(), parse_value(value.trim()))?;
        }
        if let Some(p) = profile {
            user.insert("profile".into(), Value::String(p.into()));
        }
        let profile = match user.get("profile") {
            Some(Value::String(s)) => Profile::parse(s)?,
            Some(other) => bail!("profile must be a string, got {other}"),
            None => Profile::Toy,
        };
        let mut merged = Table::try_from(Self::defaults(profile))?;
        merge(&mut merged, user);
        let mut config: RunConfig = Value::Table(merged).try_into().context("invalid configuration")?;
        config.train.seed = config.seed;
        config.meta.seed = config.seed;
        config.fit.seed = config.seed;
        config.train.validate()?;
        config.meta.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad config key {key:?}");
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("config key {key:?} goes through a non-table value"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                let v = coerce(base.get(&k), v);
                base.insert(k, v);
            }
        }
    }
}

/// Integers written where the default is a float become floats.
fn coerce(default: Option<&Value>, v: Value) -> Value {
    match (default, v) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    }
}
