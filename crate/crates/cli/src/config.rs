//! Flat run configuration shared by every command.

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use trafficformer::data::{synthetic_start, SplitRatios, SyntheticSpec};
use trafficformer::model::ModelConfig;
use trafficformer::pipeline::PreprocessConfig;
use trafficformer::train::{LossKind, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Delayed ring generated in memory from the `synth_*` fields.
    Synthetic,
    /// Flow file plus directed edge list.
    Graph,
    /// Two-channel flow file over a `grid_rows x grid_cols` grid.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProfile {
    /// 6:2:2
    Graph,
    /// 7:1:2
    Grid,
}

impl SplitProfile {
    pub fn ratios(self) -> SplitRatios {
        match self {
            SplitProfile::Graph => SplitRatios::GRAPH,
            SplitProfile::Grid => SplitRatios::GRID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub dataset: DatasetKind,
    pub flow_path: Option<PathBuf>,
    pub edges_path: Option<PathBuf>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub interval_minutes: u32,
    /// `YYYY-MM-DD HH:MM:SS` timestamp of the first step of a flow file.
    pub start: Option<String>,

    pub synth_nodes: usize,
    pub synth_days: usize,
    pub synth_delay: usize,
    pub synth_noise: f64,

    pub split_profile: SplitProfile,
    /// Low-flow filter applied by `evaluate` when set.
    pub filter_threshold: Option<f64>,

    pub input_steps: usize,
    pub output_steps: usize,
    pub dim: usize,
    pub skip_dim: usize,
    pub layers: usize,
    pub geo_heads: usize,
    pub sem_heads: usize,
    pub temporal_heads: usize,
    pub hop_threshold: u32,
    pub semantic_neighbours: usize,
    pub pattern_count: usize,
    pub pattern_window: usize,
    pub laplacian_dim: usize,
    pub use_delay: bool,
    pub dropout: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_steps: Option<usize>,
    pub patience: usize,
    pub grad_clip_norm: Option<f64>,
    pub loss: LossKind,
    pub weight_decay: f64,
    pub shuffle: bool,
}

impl Default for RunConfig {
    /// Desk-scale synthetic ring preset.
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            dataset: DatasetKind::Synthetic,
            flow_path: None,
            edges_path: None,
            grid_rows: 0,
            grid_cols: 0,
            interval_minutes: 5,
            start: None,
            synth_nodes: 6,
            synth_days: 3,
            synth_delay: 2,
            synth_noise: 0.05,
            split_profile: SplitProfile::Graph,
            filter_threshold: None,
            input_steps: 12,
            output_steps: 12,
            dim: 16,
            skip_dim: 32,
            layers: 1,
            geo_heads: 1,
            sem_heads: 1,
            temporal_heads: 2,
            hop_threshold: 2,
            semantic_neighbours: 2,
            pattern_count: 4,
            pattern_window: 4,
            laplacian_dim: 4,
            use_delay: true,
            dropout: 0.1,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: 30,
            max_steps: t.max_steps,
            patience: t.patience,
            grad_clip_norm: t.grad_clip_norm,
            loss: t.loss,
            weight_decay: t.weight_decay,
            shuffle: t.shuffle,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical TOML snapshot; the manifest digests this text.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn start_time(&self) -> Result<NaiveDateTime, CliError> {
        match &self.start {
            None => Ok(synthetic_start()),
            Some(s) => NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
                .map_err(|e| CliError::Config(format!("start `{s}`: {e}"))),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            nodes: self.synth_nodes,
            days: self.synth_days,
            interval_minutes: self.interval_minutes,
            delay_steps: self.synth_delay,
            noise_sigma: self.synth_noise,
            seed: self.seed,
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            hop_threshold: self.hop_threshold,
            semantic_neighbours: self.semantic_neighbours,
            pattern_count: self.pattern_count,
            pattern_window: self.pattern_window,
            laplacian_dim: self.laplacian_dim,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, nodes: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            input_steps: self.input_steps,
            output_steps: self.output_steps,
            nodes,
            channels,
            dim: self.dim,
            skip_dim: self.skip_dim,
            layers: self.layers,
            geo_heads: self.geo_heads,
            sem_heads: self.sem_heads,
            temporal_heads: self.temporal_heads,
            hop_threshold: self.hop_threshold,
            semantic_neighbours: self.semantic_neighbours,
            pattern_count: self.pattern_count,
            pattern_window: self.pattern_window,
            laplacian_dim: self.laplacian_dim,
            interval_minutes: self.interval_minutes,
            seed: self.seed,
            use_delay: self.use_delay,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            max_steps: self.max_steps,
            patience: self.patience,
            seed: self.seed,
            grad_clip_norm: self.grad_clip_norm,
            loss: self.loss,
            weight_decay: self.weight_decay,
            shuffle: self.shuffle,
        }
    }

    /// Checks everything that does not need the dataset. Node and channel
    /// counts are stand-ins here; the dataset is checked against them later.
    pub fn validate(&self) -> Result<(), CliError> {
        match self.dataset {
            DatasetKind::Synthetic => {
                if self.synth_nodes == 0 || self.synth_days == 0 {
                    return Err(CliError::Config("synth_nodes and synth_days must be positive".into()));
                }
                if !(self.synth_noise >= 0.0) {
                    return Err(CliError::Config("synth_noise must be non-negative".into()));
                }
            }
            DatasetKind::Graph => {
                if self.flow_path.is_none() || self.edges_path.is_none() {
                    return Err(CliError::Config("graph datasets need flow_path and edges_path".into()));
                }
            }
            DatasetKind::Grid => {
                if self.flow_path.is_none() || self.grid_rows == 0 || self.grid_cols == 0 {
                    return Err(CliError::Config(
                        "grid datasets need flow_path, grid_rows and grid_cols".into(),
                    ));
                }
            }
        }
        self.start_time()?;
        if self.semantic_neighbours == 0 {
            return Err(CliError::Config("semantic_neighbours must be positive".into()));
        }
        if let Some(th) = self.filter_threshold {
            if !th.is_finite() {
                return Err(CliError::Config("filter_threshold must be finite".into()));
            }
        }
        self.model_config(1, 1).validate()?;
        self.train_config().validate()?;
        Ok(())
    }
}
