//! Run configuration read from a TOML file.
//!
//! The grammar is the flat subset of TOML: `key = value` lines grouped under
//! `[section]` headers, `#` comments, values that are numbers, quoted
//! strings, booleans or arrays of those. Every key is optional; unknown keys
//! are rejected so typos surface early.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//!
//! [train]
//! steps = 5000
//! learning_rate = 5e-4
//! batch_size = 0          # 0 trains full-batch
//!
//! [grid]
//! resolution = 512
//!
//! [matrix]
//! tiers = ["DataI", "DataII"]
//! seeds = [0, 1]
//! arch_i = [4, 6, 8]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::Tier;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub init_std: f64,
    pub snapshot_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from(&TrainConfig::default())
    }
}

impl From<&TrainConfig> for TrainSection {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            steps: c.steps,
            batch_size: c.batch_size.unwrap_or(0),
            init_std: c.init_std,
            snapshot_every: c.snapshot_every,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            steps: self.steps,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            seed,
            init_std: self.init_std,
            snapshot_every: self.snapshot_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Points per axis of the enumeration grid.
    pub resolution: usize,
    /// Fraction of the data extent added on each side.
    pub margin: f64,
    /// Refinement factor of the second logical check.
    pub fine_factor: usize,
    /// Points per axis for boundary plots.
    pub plot_resolution: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            resolution: 512,
            margin: 0.25,
            fine_factor: 2,
            plot_resolution: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    /// Grid resolution used per snapshot; coarser than the final enumeration.
    pub resolution: usize,
    /// Use every n-th recorded snapshot.
    pub stride: usize,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            resolution: 128,
            stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    pub tiers: Vec<String>,
    pub seeds: Vec<u64>,
    pub arch_i: Vec<usize>,
    /// Appended to `arch_i`.
    pub arch_ii_extra: Vec<usize>,
    /// Appended to ArchII.
    pub arch_iii_extra: Vec<usize>,
    /// Extra training attempts, with derived seeds, when a run ends below
    /// `min_train_accuracy`.
    pub max_restarts: usize,
    pub min_train_accuracy: f64,
}

impl Default for MatrixSection {
    fn default() -> Self {
        Self {
            tiers: Tier::ALL.iter().map(|t| t.name().to_string()).collect(),
            seeds: vec![0],
            arch_i: vec![4, 6, 8],
            arch_ii_extra: vec![10, 12, 14],
            arch_iii_extra: vec![18, 22, 23],
            max_restarts: 4,
            min_train_accuracy: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnistSection {
    /// Directory holding the four IDX files.
    pub dir: Option<PathBuf>,
    pub host_m: usize,
    pub test_m: usize,
    pub bottleneck: usize,
    pub hidden: Vec<usize>,
    pub grid_resolution: usize,
    pub gap_threshold: f64,
    /// Host and prosthetic training steps; the `[train]` section supplies
    /// the optimizer settings.
    pub steps: usize,
    /// Give the prosthetic its own bottleneck instead of the host's.
    pub own_bottleneck: bool,
}

impl Default for MnistSection {
    fn default() -> Self {
        Self {
            dir: None,
            host_m: 1000,
            test_m: 1000,
            bottleneck: 4,
            hidden: vec![8, 8],
            grid_resolution: 24,
            gap_threshold: 0.25,
            steps: 2000,
            own_bottleneck: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub train: TrainSection,
    pub grid: GridSection,
    pub bounds: BoundsSection,
    pub matrix: MatrixSection,
    pub mnist: MnistSection,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.to_train_config(self.seed).validate()?;
        if self.grid.resolution < 2 || self.grid.plot_resolution < 2 || self.bounds.resolution < 2 {
            return Err(Error::input("grid resolutions must be at least 2"));
        }
        if self.grid.fine_factor == 0 || self.bounds.stride == 0 {
            return Err(Error::input("fine_factor and stride must be positive"));
        }
        for t in &self.matrix.tiers {
            Tier::parse(t)?;
        }
        if self.mnist.steps == 0 || self.mnist.host_m == 0 || self.mnist.test_m == 0 {
            return Err(Error::input("mnist steps and sample counts must be positive"));
        }
        if self.matrix.arch_i.is_empty() || self.matrix.seeds.is_empty() {
            return Err(Error::input("matrix needs a non-empty arch_i and seed list"));
        }
        Ok(())
    }

    pub fn tiers(&self) -> Vec<Tier> {
        self.matrix
            .tiers
            .iter()
            .map(|t| Tier::parse(t).expect("validated"))
            .collect()
    }
}
