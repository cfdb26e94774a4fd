//! Run configuration: one JSON document, every section optional, `seed`
//! required, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use hyperlora_core::analysis::FlattenMode;
use hyperlora_core::datagen::SyntheticSpec;
use hyperlora_core::hyper::HyperConfig;
use hyperlora_core::train::TrainConfig;
use hyperlora_core::vit::BackboneConfig;

use crate::error::{self, AppError, AppResult};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    pub bootstrap_iters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            bootstrap_iters: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub mode: FlattenMode,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            mode: FlattenMode::Materialized,
            k_min: 2,
            k_max: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub hyperlora: HyperConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut c = RunConfig {
            seed,
            data: SyntheticSpec::default(),
            backbone: BackboneConfig::default(),
            hyperlora: HyperConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        };
        c.resolve();
        c
    }

    /// Propagates the run seed into the sections that carry one.
    pub(crate) fn resolve(&mut self) {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> AppResult<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.hyperlora.validate()?;
        self.train.validate()?;
        let (side, d) = (self.backbone.image_side, &self.data);
        if d.height != side || d.width != side {
            return Err(AppError::Usage(format!(
                "data volumes are {}×{} but backbone.image_side is {side}",
                d.height, d.width
            )));
        }
        if self.analysis.k_min > self.analysis.k_max {
            return Err(AppError::Usage(format!(
                "analysis.k_min {} exceeds analysis.k_max {}",
                self.analysis.k_min, self.analysis.k_max
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> AppResult<Self> {
        let mut c: RunConfig =
            serde_json::from_str(text).map_err(|e| AppError::Usage(format!("invalid config: {e}")))?;
        c.resolve();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            AppError::Usage(m) => AppError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults-resolved configuration as pretty JSON.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn write_to_dir(&self, dir: &Path) -> AppResult<()> {
        error::write(&dir.join(CONFIG_FILE), self.to_json())
    }
}
