//! Full predictor: embedding, stacked encoder layers with per-layer skip
//! projections, and a two-stage 1x1 convolution output head that emits all
//! future steps at once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{delay_histories, Scaler, TimeIndexMeta, MINUTES_PER_DAY};
use crate::embedding::{embed, fan_in_uniform, temporal_position_encoding, EmbeddingTables};
use crate::encoder::{encoder_layer, AttentionRecord, EncoderLayerParams, HeadConfig, LayerContext};
use crate::graph::LaplacianEmbeddingBasis;
use crate::matrix::BinaryMatrix;
use crate::pattern::PatternSet;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input steps `T`.
    pub input_steps: usize,
    /// Predicted steps `T'`.
    pub output_steps: usize,
    pub nodes: usize,
    pub channels: usize,
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
    pub interval_minutes: u32,
    pub seed: u64,
    /// Disable to drop the delay-aware key transformation.
    #[serde(default = "default_true")]
    pub use_delay: bool,
    #[serde(default)]
    pub dropout: f64,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn heads(&self) -> HeadConfig {
        HeadConfig {
            geo: self.geo_heads,
            sem: self.sem_heads,
            temporal: self.temporal_heads,
            dim: self.dim,
        }
    }

    pub fn slots_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.interval_minutes.max(1)) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_steps", self.input_steps),
            ("output_steps", self.output_steps),
            ("nodes", self.nodes),
            ("channels", self.channels),
            ("dim", self.dim),
            ("skip_dim", self.skip_dim),
            ("layers", self.layers),
            ("pattern_count", self.pattern_count),
            ("laplacian_dim", self.laplacian_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        self.heads().validate()?;
        if self.dim % 2 != 0 {
            return Err(Error::Config(format!("dim {} must be even", self.dim)));
        }
        if self.pattern_window < 2 {
            return Err(Error::Config("pattern_window must be at least 2".into()));
        }
        if self.interval_minutes == 0 || MINUTES_PER_DAY % self.interval_minutes != 0 {
            return Err(Error::Config(format!(
                "interval {} min does not divide a day",
                self.interval_minutes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Frozen preprocessing outputs the model attends with.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub geo_mask: BinaryMatrix,
    pub sem_mask: BinaryMatrix,
    pub basis: LaplacianEmbeddingBasis,
    pub patterns: PatternSet,
}

#[derive(Debug, Clone)]
pub struct OutputHead {
    /// `(T', T)` time-axis 1x1 convolution and its `(T')` bias.
    pub time: (ParamId, ParamId),
    /// `(d_sk, C)` feature-axis 1x1 convolution and its `(C)` bias.
    pub feature: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embedding: EmbeddingTables,
    layers: Vec<EncoderLayerParams>,
    skips: Vec<(ParamId, ParamId)>,
    head: OutputHead,
    artifacts: Preprocessed,
    patterns: Tensor,
    position: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, artifacts: Preprocessed) -> Result<Self> {
        config.validate()?;
        let n = config.nodes;
        for (name, m) in [("geo", &artifacts.geo_mask), ("sem", &artifacts.sem_mask)] {
            if m.rows() != n || m.cols() != n {
                return Err(Error::Config(format!(
                    "{name} mask is {}x{}, config has {n} nodes",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if artifacts.basis.nodes() != n || artifacts.basis.dim() != config.laplacian_dim {
            return Err(Error::Config(format!(
                "Laplacian basis is {}x{}, config expects {n}x{}",
                artifacts.basis.nodes(),
                artifacts.basis.dim(),
                config.laplacian_dim
            )));
        }
        if artifacts.patterns.window() != config.pattern_window {
            return Err(Error::Config(format!(
                "patterns have window {}, config expects {}",
                artifacts.patterns.window(),
                config.pattern_window
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (d, dsk) = (config.dim, config.skip_dim);
        let heads = config.heads();
        let embedding = EmbeddingTables::register(
            &mut params,
            config.channels,
            config.laplacian_dim,
            d,
            config.slots_per_day(),
            &mut rng,
        )?;
        let mut layers = Vec::with_capacity(config.layers);
        let mut skips = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(EncoderLayerParams::register(
                &mut params,
                &format!("layer{l}"),
                &heads,
                config.pattern_window,
                &mut rng,
            )?);
            skips.push((
                params.add(format!("skip{l}.weight"), fan_in_uniform(&[d, dsk], d, &mut rng))?,
                params.add(format!("skip{l}.bias"), fan_in_uniform(&[dsk], d, &mut rng))?,
            ));
        }
        let (t_in, t_out, c) = (config.input_steps, config.output_steps, config.channels);
        let head = OutputHead {
            time: (
                params.add("head.time.weight", fan_in_uniform(&[t_out, t_in], t_in, &mut rng))?,
                params.add("head.time.bias", fan_in_uniform(&[t_out], t_in, &mut rng))?,
            ),
            feature: (
                params.add("head.feature.weight", fan_in_uniform(&[dsk, c], dsk, &mut rng))?,
                params.add("head.feature.bias", fan_in_uniform(&[c], dsk, &mut rng))?,
            ),
        };
        let patterns = artifacts.patterns.to_matrix();
        let patterns = Tensor::new(vec![patterns.rows, patterns.cols], patterns.data)?;
        let position = temporal_position_encoding(t_in, d)?;
        Ok(Self {
            config,
            params,
            embedding,
            layers,
            skips,
            head,
            artifacts,
            patterns,
            position,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn artifacts(&self) -> &Preprocessed {
        &self.artifacts
    }

    pub fn embedding_tables(&self) -> &EmbeddingTables {
        &self.embedding
    }

    pub fn layer_params(&self) -> &[EncoderLayerParams] {
        &self.layers
    }

    pub fn skip_params(&self) -> &[(ParamId, ParamId)] {
        &self.skips
    }

    pub fn output_head(&self) -> &OutputHead {
        &self.head
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records a forward pass on `tape` for a normalized `(T, N, C)` window
    /// and returns the `(T', N, C)` prediction in normalized units.
    /// `missing` flags input entries (already zero-filled) so delay
    /// histories skip them.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        window: &Tensor,
        missing: Option<&[bool]>,
        meta: &TimeIndexMeta,
        capture: Option<&mut Vec<AttentionRecord>>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (t_in, n, c) = (cfg.input_steps, cfg.nodes, cfg.channels);
        if window.shape() != [t_in, n, c] {
            return Err(Error::shape(
                "Model::forward",
                format!("window {:?}, config expects [{t_in}, {n}, {c}]", window.shape()),
            ));
        }
        let no_missing;
        let missing = match missing {
            Some(m) => m,
            None => {
                no_missing = vec![false; window.len()];
                &no_missing
            }
        };
        let histories = delay_histories(window, missing, cfg.pattern_window)?;
        let ctx = LayerContext {
            steps: t_in,
            nodes: n,
            heads: cfg.heads(),
            geo_mask: &self.artifacts.geo_mask,
            sem_mask: &self.artifacts.sem_mask,
            patterns: &self.patterns,
            histories: &histories,
            use_delay: cfg.use_delay,
            dropout: cfg.dropout,
        };

        let mut x = embed(
            tape,
            window,
            meta,
            &self.artifacts.basis,
            &self.embedding,
            &self.position,
        )?;
        let mut capture = capture;
        let mut rng = rng;
        let mut hidden: Option<Var> = None;
        for (l, (layer, skip)) in self.layers.iter().zip(&self.skips).enumerate() {
            x = encoder_layer(tape, x, layer, &ctx, l, capture.as_deref_mut(), rng.as_deref_mut())?;
            let (w, b) = (tape.param(skip.0), tape.param(skip.1));
            let s = tape.linear(x, w, Some(b))?;
            hidden = Some(match hidden {
                Some(h) => tape.add(h, s)?,
                None => s,
            });
        }
        let hidden = hidden.expect("config validation guarantees at least one layer");

        let dsk = cfg.skip_dim;
        let h = tape.reshape(hidden, &[t_in, n * dsk])?;
        let (tw, tb) = (tape.param(self.head.time.0), tape.param(self.head.time.1));
        let h = tape.matmul(tw, h)?;
        let h = tape.add_col(h, tb)?;
        let h = tape.gelu(h);
        let t_out = cfg.output_steps;
        let h = tape.reshape(h, &[t_out * n, dsk])?;
        let (fw, fb) = (tape.param(self.head.feature.0), tape.param(self.head.feature.1));
        let y = tape.linear(h, fw, Some(fb))?;
        tape.reshape(y, &[t_out, n, c])
    }

    /// Normalized-unit prediction without keeping the tape.
    pub fn predict(&self, window: &Tensor, meta: &TimeIndexMeta) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let y = self.forward(&mut tape, window, None, meta, None, None)?;
        Ok(tape.value(y).clone())
    }

    /// Normalizes a raw window with `scaler`, predicts, and maps the result
    /// back to flow units.
    pub fn predict_denormalized(
        &self,
        raw_window: &Tensor,
        meta: &TimeIndexMeta,
        scaler: Option<&Scaler>,
    ) -> Result<Tensor> {
        let scaler = scaler.ok_or_else(|| {
            Error::InvalidArgument("denormalized prediction needs the training scaler".into())
        })?;
        let y = self.predict(&scaler.transform(raw_window)?, meta)?;
        scaler.inverse(&y)
    }
}
