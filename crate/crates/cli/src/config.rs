use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use softflow::envs::make_env;
use softflow::pipeline::{Stage, TrainConfig};

/// Environment variable holding the root for relative run and data paths.
pub const RUN_ROOT_VAR: &str = "SOFTFLOW_RUN_ROOT";

/// Name of the config snapshot written into every run directory.
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Action chunk length.
    #[serde(rename = "H", alias = "h")]
    #[value(name = "H", alias = "h")]
    H,
    /// Number of coupling blocks.
    Depth,
    /// Imitation weight in the actor objective.
    Lambda,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::H => "H",
            Axis::Depth => "depth",
            Axis::Lambda => "lambda",
        }
    }

    /// Reference grid of the ablation.
    pub fn grid(self) -> Vec<f64> {
        match self {
            Axis::H => vec![6.0, 8.0, 10.0, 12.0, 14.0],
            Axis::Depth => vec![8.0, 12.0, 16.0, 20.0, 24.0],
            Axis::Lambda => vec![0.01, 0.03, 0.1, 0.3, 1.0],
        }
    }

    /// Copy of `cfg` with the axis set to `v`.
    pub fn apply(self, cfg: &TrainConfig, v: f64) -> Result<TrainConfig> {
        let mut out = cfg.clone();
        let whole = || -> Result<usize> {
            if v < 1.0 || v.fract() != 0.0 {
                bail!("axis {} takes positive integers, got {v}", self.name());
            }
            Ok(v as usize)
        };
        match self {
            Axis::H => out.chunk_len = whole()?,
            Axis::Depth => out.flow_depth = whole()?,
            Axis::Lambda => out.lambda_bc = v,
        }
        Ok(out)
    }
}

/// Demonstration corpus settings for `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    pub fail_frac: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 121,
            fail_frac: 0.41,
            seed: 0,
        }
    }
}

/// Optional sweep settings; `values` replaces the axis's reference grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: Option<Axis>,
    pub values: Option<Vec<f64>>,
}

/// One run: environment, data location, output directory and training
/// settings. Relative paths resolve against `SOFTFLOW_RUN_ROOT` when set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: String,
    /// Demonstration corpus directory.
    pub data_dir: PathBuf,
    /// Run directory: snapshot, checkpoints, buffers, reports, metrics.
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Stages run by `train --stage all`; empty means the whole plan.
    pub stages: Vec<Stage>,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "pointmass".into(),
            data_dir: "data".into(),
            out_dir: "run".into(),
            precision: Precision::default(),
            stages: Vec::new(),
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn resolve(p: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_VAR) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| softflow::Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        make_env(&self.env)?;
        self.train.validate()?;
        let plan = Stage::sequence(self.train.plan);
        if let Some(s) = self.stages.iter().find(|s| !plan.contains(s)) {
            return Err(softflow::Error::Config(format!(
                "stage '{}' is not part of the {:?} plan",
                s.name(),
                self.train.plan
            ))
            .into());
        }
        Ok(())
    }

    pub fn data_path(&self) -> PathBuf {
        resolve(&self.data_dir)
    }

    pub fn out_path(&self) -> PathBuf {
        resolve(&self.out_dir)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the config snapshot into the run directory.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SNAPSHOT_FILE), self.to_toml()?)?;
        Ok(())
    }
}
