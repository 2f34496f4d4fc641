//! Command bodies. Each validates its inputs before any heavy work and
//! writes a manifest next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trafficformer::autodiff::{read_checkpoint, write_checkpoint, Tape};
use trafficformer::data::{
    generate_synthetic, load_graph_dataset, load_grid_dataset, make_samples, split, write_flow, Sample,
    Scaler, TrafficTensor,
};
use trafficformer::encoder::attention_maps;
use trafficformer::graph::{format_edge_list, LaplacianEmbeddingBasis, RoadNetwork};
use trafficformer::io::{read_mask, read_matrix, write_mask, write_matrix};
use trafficformer::model::{Model, ModelConfig, Preprocessed};
use trafficformer::pattern::PatternSet;
use trafficformer::pipeline::{preprocess, training_range};
use trafficformer::train::{evaluate_model, history_csv, prepare, train};

use crate::config::{DatasetKind, RunConfig};
use crate::manifest::RunManifest;
use crate::CliError;

pub const GEO_MASK: &str = "geo_mask.csv";
pub const SEM_MASK: &str = "sem_mask.csv";
pub const BASIS: &str = "laplacian_basis.csv";
pub const PATTERNS: &str = "patterns.csv";
pub const SCALER: &str = "scaler.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const SIDECAR: &str = "checkpoint.json";
pub const HISTORY: &str = "history.csv";
pub const ATTENTION: &str = "attention.jsonl";

const ARTIFACTS: [&str; 5] = [GEO_MASK, SEM_MASK, BASIS, PATTERNS, SCALER];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Written next to every checkpoint so evaluation can rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub model: ModelConfig,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub steps: usize,
    pub stopped_early: bool,
    pub diverged: bool,
}

struct Dataset {
    flow: TrafficTensor,
    net: RoadNetwork,
    files: Vec<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let start = cfg.start_time()?;
    let (flow, net, files) = match cfg.dataset {
        DatasetKind::Synthetic => {
            let (flow, net) = generate_synthetic(&cfg.synthetic_spec())?;
            (flow, net, Vec::new())
        }
        DatasetKind::Graph => {
            let flow_path = cfg.flow_path.clone().expect("validated");
            let edges_path = cfg.edges_path.clone().expect("validated");
            let (flow, net) = load_graph_dataset(&flow_path, &edges_path, cfg.interval_minutes, start)?;
            (flow, net, vec![flow_path, edges_path])
        }
        DatasetKind::Grid => {
            let flow_path = cfg.flow_path.clone().expect("validated");
            let (flow, net) =
                load_grid_dataset(&flow_path, cfg.grid_rows, cfg.grid_cols, cfg.interval_minutes, start)?;
            (flow, net, vec![flow_path])
        }
    };
    Ok(Dataset { flow, net, files })
}

fn splits(cfg: &RunConfig, flow: &TrafficTensor) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>), CliError> {
    let samples = make_samples(flow, cfg.input_steps, cfg.output_steps)?;
    Ok(split(samples, cfg.split_profile.ratios())?)
}

fn artifact_paths(dir: &Path) -> Vec<PathBuf> {
    ARTIFACTS.iter().map(|a| dir.join(a)).collect()
}

fn load_artifacts(dir: &Path) -> Result<(Preprocessed, Scaler), CliError> {
    if let Some(missing) = artifact_paths(dir).into_iter().find(|p| !p.exists()) {
        return Err(CliError::Data(format!(
            "missing {}; run `trafficformer preprocess` with the same config first",
            missing.display()
        )));
    }
    let basis = LaplacianEmbeddingBasis::from_file_matrix(&read_matrix(dir.join(BASIS))?)?;
    let patterns = PatternSet::from_matrix(&read_matrix(dir.join(PATTERNS))?)?;
    let scaler_text = fs::read_to_string(dir.join(SCALER))
        .map_err(|e| CliError::Data(format!("cannot read {SCALER}: {e}")))?;
    let scaler: Scaler =
        serde_json::from_str(&scaler_text).map_err(|e| CliError::Data(format!("{SCALER}: {e}")))?;
    let artifacts = Preprocessed {
        geo_mask: read_mask(dir.join(GEO_MASK))?,
        sem_mask: read_mask(dir.join(SEM_MASK))?,
        basis,
        patterns,
    };
    Ok((artifacts, scaler))
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let (flow, net) = generate_synthetic(&cfg.synthetic_spec())?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    write_flow(dir.join("flow.csv"), &flow)?;
    write_text(&dir.join("edges.csv"), &format_edge_list(&net))?;
    let mut manifest = RunManifest::new("synth", cfg.seed, cfg.snapshot());
    manifest.add_outputs(dir, &["flow.csv", "edges.csv"])?;
    manifest.write(dir)?;
    println!(
        "synthetic ring: {} steps, {} nodes, {} edges -> {}",
        flow.steps(),
        flow.nodes(),
        net.edges().len(),
        dir.display()
    );
    Ok(())
}

pub fn preprocess_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let range = training_range(
        data.flow.steps(),
        cfg.input_steps,
        cfg.output_steps,
        cfg.split_profile.ratios(),
    )?;
    let out = preprocess(&data.flow, &data.net, &cfg.preprocess_config(), range.clone())?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let a = &out.artifacts;
    write_mask(dir.join(GEO_MASK), &a.geo_mask)?;
    write_mask(dir.join(SEM_MASK), &a.sem_mask)?;
    write_matrix(dir.join(BASIS), &a.basis.to_file_matrix())?;
    write_matrix(dir.join(PATTERNS), &a.patterns.to_matrix())?;
    write_text(&dir.join(SCALER), &(serde_json::to_string_pretty(&out.scaler).expect("scaler serializes") + "\n"))?;

    let mut manifest = RunManifest::new("preprocess", cfg.seed, cfg.snapshot());
    manifest.add_inputs(&data.files)?;
    manifest.add_outputs(dir, &ARTIFACTS)?;
    manifest.write(dir)?;
    println!(
        "preprocessed steps {}..{}: {} patterns, k-Shape objective {:.6}",
        range.start,
        range.end,
        a.patterns.len(),
        out.kshape_objective.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, epochs: Option<usize>) -> Result<(), CliError> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let (artifacts, scaler) = load_artifacts(dir)?;
    let data = load_dataset(cfg)?;
    let model_cfg = cfg.model_config(data.flow.nodes(), data.flow.channels());
    let mut train_cfg = cfg.train_config();
    if let Some(e) = epochs {
        train_cfg.max_epochs = e;
    }
    let mut model = Model::new(model_cfg.clone(), artifacts)?;
    let (train_s, val_s, _) = splits(cfg, &data.flow)?;

    let outcome = train(&mut model, &scaler, &train_s, &val_s, &train_cfg)?;
    write_checkpoint(dir.join(CHECKPOINT), model.params())?;
    let best_val_mae = outcome
        .best_epoch
        .and_then(|b| outcome.history.iter().find(|r| r.epoch == b))
        .map(|r| r.val_mae);
    let sidecar = CheckpointSidecar {
        model: model_cfg,
        best_epoch: outcome.best_epoch,
        best_val_mae,
        steps: outcome.steps,
        stopped_early: outcome.stopped_early,
        diverged: outcome.diverged,
    };
    write_text(&dir.join(SIDECAR), &(serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n"))?;
    write_text(&dir.join(HISTORY), &history_csv(&outcome.history))?;

    let mut manifest = RunManifest::new("train", cfg.seed, cfg.snapshot());
    manifest.add_inputs(&artifact_paths(dir))?;
    manifest.add_inputs(&data.files)?;
    manifest.add_outputs(dir, &[CHECKPOINT, SIDECAR, HISTORY])?;
    manifest.write(dir)?;

    if outcome.diverged {
        return Err(CliError::Numeric(format!(
            "numeric failure: training diverged after {} steps; kept the last finite checkpoint",
            outcome.steps
        )));
    }
    if train_cfg.max_epochs == 0 {
        println!("wrote initialized checkpoint ({} parameters), no training", model.parameter_count());
        return Ok(());
    }
    let val = evaluate_model(&model, &scaler, &val_s, None)?.overall;
    println!(
        "trained {} steps, best epoch {}: val MAE {:.4} RMSE {:.4} MAPE {}",
        outcome.steps,
        outcome.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        val.mae,
        val.rmse,
        val.mape_percent.map_or("-".to_string(), |m| format!("{m:.2}%"))
    );
    Ok(())
}

/// Rebuilds the trained model, refusing checkpoints whose sidecar does not
/// match the dataset or the architecture in the config.
fn load_model(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Dataset,
    artifacts: Preprocessed,
) -> Result<Model, CliError> {
    let sidecar_path = checkpoint.with_extension("json");
    if !checkpoint.exists() || !sidecar_path.exists() {
        return Err(CliError::Data(format!(
            "missing {} or its sidecar; run `trafficformer train` first",
            checkpoint.display()
        )));
    }
    let text = fs::read_to_string(&sidecar_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", sidecar_path.display())))?;
    let sidecar: CheckpointSidecar = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", sidecar_path.display())))?;
    let m = &sidecar.model;
    if m.nodes != data.flow.nodes() || m.channels != data.flow.channels() {
        return Err(CliError::Data(format!(
            "checkpoint expects {} nodes x {} channels, dataset has {} x {}",
            m.nodes,
            m.channels,
            data.flow.nodes(),
            data.flow.channels()
        )));
    }
    // Seed and dropout only matter during training.
    let expected = ModelConfig {
        seed: m.seed,
        dropout: m.dropout,
        ..cfg.model_config(m.nodes, m.channels)
    };
    if &expected != m {
        return Err(CliError::Config(format!(
            "config architecture differs from checkpoint sidecar {}",
            sidecar_path.display()
        )));
    }
    let mut model = Model::new(sidecar.model, artifacts)?;
    model.params_mut().load_named(&read_checkpoint(checkpoint)?)?;
    Ok(model)
}

fn pick(split: SplitName, parts: (Vec<Sample>, Vec<Sample>, Vec<Sample>)) -> Vec<Sample> {
    match split {
        SplitName::Train => parts.0,
        SplitName::Val => parts.1,
        SplitName::Test => parts.2,
    }
}

pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: &Path, split_name: SplitName) -> Result<(), CliError> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let (artifacts, scaler) = load_artifacts(dir)?;
    let data = load_dataset(cfg)?;
    let model = load_model(cfg, checkpoint, &data, artifacts)?;
    let samples = pick(split_name, splits(cfg, &data.flow)?);
    let report = evaluate_model(&model, &scaler, &samples, cfg.filter_threshold)?;

    let name = split_name.as_str();
    let json = format!("report_{name}.json");
    let csv = format!("report_{name}.csv");
    write_text(&dir.join(&json), &(report.to_json()? + "\n"))?;
    write_text(&dir.join(&csv), &report.to_csv())?;

    let mut manifest = RunManifest::new(&format!("evaluate_{name}"), cfg.seed, cfg.snapshot());
    manifest.add_inputs(&artifact_paths(dir))?;
    manifest.add_inputs(&[checkpoint.to_path_buf(), checkpoint.with_extension("json")])?;
    manifest.add_inputs(&data.files)?;
    manifest.add_outputs(dir, &[&json, &csv])?;
    manifest.write(dir)?;
    let o = report.overall;
    println!(
        "{name}: MAE {} RMSE {} MAPE {} over {} points",
        o.mae,
        o.rmse,
        o.mape_percent.map_or("-".to_string(), |m| format!("{m}%")),
        o.count
    );
    Ok(())
}

pub fn export_attention(
    cfg: &RunConfig,
    checkpoint: &Path,
    split_name: SplitName,
    index: usize,
) -> Result<(), CliError> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let (artifacts, scaler) = load_artifacts(dir)?;
    let data = load_dataset(cfg)?;
    let model = load_model(cfg, checkpoint, &data, artifacts)?;
    let samples = pick(split_name, splits(cfg, &data.flow)?);
    if index >= samples.len() {
        return Err(CliError::Config(format!(
            "sample index {index} out of range: {} split has {} samples",
            split_name.as_str(),
            samples.len()
        )));
    }
    let prepared = prepare(&samples[index..=index], &scaler)?;
    let p = &prepared[0];
    let mut tape = Tape::new(model.params());
    let mut records = Vec::new();
    model.forward(&mut tape, &p.input, Some(&p.sample.input_missing), &p.sample.meta, Some(&mut records), None)?;
    let maps = attention_maps(&tape, &records);
    let mut text = String::new();
    for m in &maps {
        text.push_str(&serde_json::to_string(m).expect("attention map serializes"));
        text.push('\n');
    }
    write_text(&dir.join(ATTENTION), &text)?;

    let mut manifest = RunManifest::new("export-attention", cfg.seed, cfg.snapshot());
    manifest.add_inputs(&artifact_paths(dir))?;
    manifest.add_inputs(&[checkpoint.to_path_buf(), checkpoint.with_extension("json")])?;
    manifest.add_inputs(&data.files)?;
    manifest.add_outputs(dir, &[ATTENTION])?;
    manifest.write(dir)?;
    println!("{} attention matrices from {} records -> {ATTENTION}", maps.len(), records.len());
    Ok(())
}
