//! Run configuration: one JSON document, optionally patched with `--set key=value`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use dynacal_core::identify::{AnnealConfig, PipelineConfig, RefineConfig};
use dynacal_core::seed;
use dynacal_core::surrogate::TrainConfig;
use dynacal_core::tpo::TpoConfig;
use dynacal_core::{ParamBounds, PhysParams, PlantConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub n_param_sets: usize,
    pub n_episodes: usize,
    pub horizon: usize,
    /// Hidden parameters of the synthetic "real" plant.
    pub theta_star: PhysParams,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self { n_param_sets: 50, n_episodes: 20, horizon: 50, theta_star: PhysParams::new(3.0, 80.0, 6.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Trailing fraction of episodes kept out of fitting and used for scoring.
    pub holdout_fraction: f64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self { holdout_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantConfig,
    pub bounds: ParamBounds,
    pub datagen: DatagenConfig,
    pub surrogate: TrainConfig,
    pub refine: RefineConfig,
    pub anneal: AnnealConfig,
    pub tpo: TpoConfig,
    pub identify: IdentifyConfig,
    pub output_dir: PathBuf,
    pub run_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plant: PlantConfig::default(),
            bounds: ParamBounds::default(),
            datagen: DatagenConfig::default(),
            surrogate: TrainConfig::default(),
            refine: RefineConfig::default(),
            anneal: AnnealConfig::default(),
            tpo: TpoConfig::default(),
            identify: IdentifyConfig::default(),
            output_dir: PathBuf::from("out"),
            run_seed: 0,
        }
    }
}

// stage tags for seed::derive
const STAGE_SAMPLE: u64 = 1;
const STAGE_INIT: u64 = 2;
const STAGE_EPISODES: u64 = 3;
const STAGE_TRAIN: u64 = 4;
const STAGE_ANNEAL: u64 = 5;
const STAGE_TPO: u64 = 6;
const STAGE_POLICY: u64 = 7;

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.plant.validate()?;
        self.bounds.validate()?;
        self.surrogate.validate()?;
        self.refine.validate()?;
        self.anneal.validate()?;
        self.tpo.validate()?;
        let dg = &self.datagen;
        if dg.n_param_sets == 0 || dg.n_episodes == 0 || dg.horizon == 0 {
            bail!("datagen counts must all be >= 1");
        }
        self.bounds.check(&dg.theta_star).context("datagen.theta_star")?;
        let h = self.identify.holdout_fraction;
        if !(0.0..1.0).contains(&h) {
            bail!("identify.holdout_fraction must be in [0, 1), got {h}");
        }
        if self.output_dir.as_os_str().is_empty() {
            bail!("output_dir is empty");
        }
        Ok(())
    }

    pub fn sample_seed(&self) -> u64 {
        seed::derive(self.run_seed, &[STAGE_SAMPLE])
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.run_seed, &[STAGE_INIT])
    }

    pub fn episode_seed(&self) -> u64 {
        seed::derive(self.run_seed, &[STAGE_EPISODES])
    }

    /// Sub-config seeds are mixed with `run_seed`, so either one changes the stream.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: seed::derive(self.run_seed, &[STAGE_TRAIN, self.surrogate.seed]), ..self.surrogate }
    }

    pub fn anneal_config(&self) -> AnnealConfig {
        AnnealConfig { seed: seed::derive(self.run_seed, &[STAGE_ANNEAL, self.anneal.seed]), ..self.anneal }
    }

    pub fn tpo_config(&self) -> TpoConfig {
        TpoConfig { seed: seed::derive(self.run_seed, &[STAGE_TPO, self.tpo.seed]), ..self.tpo.clone() }
    }

    pub fn policy_seed(&self) -> u64 {
        seed::derive(self.run_seed, &[STAGE_POLICY, self.tpo.seed])
    }

    /// Same seeds as the commands use, for in-process comparisons.
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            plant: self.plant.clone(),
            bounds: self.bounds,
            n_param_sets: self.datagen.n_param_sets,
            train: self.train_config(),
            refine: self.refine,
            anneal: self.anneal_config(),
            seed: self.run_seed,
        }
    }

    /// Hex SHA-256 of the resolved config, leaving out `output_dir`.
    pub fn hash(&self) -> String {
        let located = RunConfig { output_dir: PathBuf::new(), ..self.clone() };
        let bytes = io::to_json_bytes(&located).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Loads `path` (or defaults), then applies `overrides`, `seed` and `out` in that order.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    for kv in overrides {
        apply_override(&mut doc, kv)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).context("invalid config")?;
    if let Some(s) = seed {
        cfg.run_seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `a.b.c=value`; the value is read as JSON, falling back to a bare string.
pub fn apply_override(doc: &mut Value, kv: &str) -> anyhow::Result<()> {
    let (key, raw) = kv.split_once('=').ok_or_else(|| anyhow!("override {kv:?} is not key=value"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override {kv:?} has an empty key segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = match node {
            Value::Object(m) => m,
            _ => bail!("override {kv:?}: {part:?} is not inside an object"),
        };
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}
