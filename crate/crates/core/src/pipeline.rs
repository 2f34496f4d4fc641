//! Preprocessing orchestration: everything derived from the training split
//! before a model is built.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{split_sizes, Scaler, SplitRatios, TrafficTensor};
use crate::graph::{geographic_mask, hop_distances, laplacian_embedding_basis, RoadNetwork};
use crate::matrix::BinaryMatrix;
use crate::model::Preprocessed;
use crate::pattern::{daily_profiles, extract_windows, kshape_cluster, semantic_mask};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub hop_threshold: u32,
    pub semantic_neighbours: usize,
    pub pattern_count: usize,
    pub pattern_window: usize,
    pub laplacian_dim: usize,
    pub seed: u64,
}

/// Time steps touched by the training samples (inputs and targets).
pub fn training_range(
    total_steps: usize,
    input_steps: usize,
    output_steps: usize,
    ratios: SplitRatios,
) -> Result<Range<usize>> {
    let span = input_steps + output_steps;
    if total_steps < span {
        return Err(Error::Data(format!(
            "{total_steps} steps cannot hold a {input_steps}+{output_steps} window"
        )));
    }
    let sizes = split_sizes(total_steps - span + 1, ratios)?;
    Ok(0..sizes.train - 1 + span)
}

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    pub artifacts: Preprocessed,
    pub scaler: Scaler,
    /// Objective after each k-Shape assignment.
    pub kshape_objective: Vec<f64>,
}

/// Masks, Laplacian basis, traffic patterns and scaler from `train` steps.
/// Pattern windows from every channel are pooled into one pattern set.
pub fn preprocess(
    flow: &TrafficTensor,
    net: &RoadNetwork,
    cfg: &PreprocessConfig,
    train: Range<usize>,
) -> Result<PreprocessOutput> {
    if net.node_count() != flow.nodes() {
        return Err(Error::Data(format!(
            "network has {} nodes, flow has {}",
            net.node_count(),
            flow.nodes()
        )));
    }
    let geo_mask = geographic_mask(&hop_distances(net), cfg.hop_threshold);
    let sem_mask = semantic_mask(&daily_profiles(flow, train.clone())?, cfg.semantic_neighbours)?.mask;
    let basis = laplacian_embedding_basis(net, cfg.laplacian_dim)?;
    let mut windows = Vec::new();
    for c in 0..flow.channels() {
        windows.extend(extract_windows(flow, cfg.pattern_window, c, train.clone())?);
    }
    let clustered = kshape_cluster(&windows, cfg.pattern_count, cfg.seed)?;
    let scaler = Scaler::fit(flow, train.end)?;
    Ok(PreprocessOutput {
        artifacts: Preprocessed {
            geo_mask,
            sem_mask,
            basis,
            patterns: clustered.patterns,
        },
        scaler,
        kshape_objective: clustered.objective_history,
    })
}

impl Preprocessed {
    /// Same artifacts with both masks opened to every node pair.
    pub fn without_masks(&self) -> Self {
        let n = self.geo_mask.rows();
        Self {
            geo_mask: BinaryMatrix::ones(n, n),
            sem_mask: BinaryMatrix::ones(n, n),
            ..self.clone()
        }
    }
}
