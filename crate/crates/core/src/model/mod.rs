//! The LTG-BERT encoder: embeddings, disentangled-attention layers with
//! NormFormer (or pre/post) normalization, GEGLU feed-forward blocks, the MLM
//! head and an optional sentence-pair head.
//!
//! Every architecture switch used for ablations lives in [`ModelConfig`].

mod checkpoint;
mod config;
pub(crate) use config::text_enum;
mod gradcheck;
pub mod layers;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::tokenizer::{TokenId, PAD_ID};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Activation, ModelConfig, NormStyle, NspHead, PositionEncoding};
pub use gradcheck::GradientReport;
pub use layers::{relative_index, AttentionParams, FeedForwardParams, LayerParams, NormParams};
pub use params::{Bound, Param, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("position ({i}, {j}) outside max length {max_len}")]
    PositionOutOfRange { i: usize, j: usize, max_len: usize },
    #[error("sequence length {len} exceeds max length {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("attention mask has {got} entries, expected {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("batch of {got} ids does not match {batch} x {len}")]
    BatchShape {
        batch: usize,
        len: usize,
        got: usize,
    },
    #[error("segment ids are required by the sentence-pair head")]
    MissingSegments,
    #[error("missing parameter: {0}")]
    MissingParameter(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A padded batch of token ids, `batch x len`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<TokenId>,
    pub batch: usize,
    pub len: usize,
    /// Segment index (0 or 1) per position; required iff the model has a
    /// sentence-pair head.
    pub segments: Option<Vec<u8>>,
}

impl Batch {
    pub fn new(ids: Vec<TokenId>, batch: usize, len: usize) -> Result<Self, ModelError> {
        if ids.len() != batch * len || batch == 0 || len == 0 {
            return Err(ModelError::BatchShape {
                batch,
                len,
                got: ids.len(),
            });
        }
        Ok(Self {
            ids,
            batch,
            len,
            segments: None,
        })
    }

    /// Right-pads every row with `PAD` to the longest row.
    pub fn from_rows(rows: &[Vec<TokenId>]) -> Result<Self, ModelError> {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for row in rows {
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat_n(PAD_ID, len - row.len()));
        }
        Self::new(ids, rows.len(), len)
    }

    pub fn with_segments(mut self, segments: Vec<u8>) -> Result<Self, ModelError> {
        if segments.len() != self.ids.len() {
            return Err(ModelError::BatchShape {
                batch: self.batch,
                len: self.len,
                got: segments.len(),
            });
        }
        self.segments = Some(segments);
        Ok(self)
    }

    /// `true` at padding positions.
    pub fn key_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id == PAD_ID).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub tokens: ParamId,
    pub absolute: Option<ParamId>,
    pub relative: Option<ParamId>,
    pub segments: Option<ParamId>,
    pub norm: NormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmHeadParams {
    pub transform: ParamId,
    pub transform_bias: ParamId,
    pub norm: NormParams,
    pub output: ParamId,
    pub output_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NspHeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Everything a forward pass exposes.
pub struct ForwardOutput<'g> {
    /// Embedding-layer output `l_0`, `[batch, T, d]`.
    pub embedding: Var<'g>,
    /// Output of every layer `l_1..l_K`.
    pub layer_states: Vec<Var<'g>>,
    /// Per-layer contributions `s_k = l_k - l_{k-1}`.
    pub contributions: Vec<Var<'g>>,
    /// `[batch, T, vocab]`.
    pub mlm_logits: Var<'g>,
    /// `[batch, 2]` when a sentence-pair head is configured.
    pub nsp_logits: Option<Var<'g>>,
}

impl<'g> ForwardOutput<'g> {
    pub fn final_state(&self) -> Var<'g> {
        *self.layer_states.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embedding: EmbeddingParams,
    layers: Vec<LayerParams>,
    mlm_head: MlmHeadParams,
    nsp_head: Option<NspHeadParams>,
}

/// Parameter skeleton: records names and shapes, then fills values.
struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: &[usize], scale: f64) -> Result<ParamId, ModelError> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.normal.sample(self.rng) * scale)
            .collect();
        Ok(self.store.add(name, Tensor::new(shape, data)?, true))
    }

    fn bias(&mut self, name: String, len: usize) -> Result<ParamId, ModelError> {
        Ok(self.store.add(name, Tensor::zeros(&[len])?, true))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormParams, ModelError> {
        let gain = self
            .store
            .add(format!("{prefix}.gain"), Tensor::ones(&[d])?, false);
        let offset = self
            .store
            .add(format!("{prefix}.offset"), Tensor::zeros(&[d])?, false);
        Ok(NormParams { gain, offset })
    }
}

impl Model {
    /// Samples every weight matrix from `N(0, sqrt(2 / 5d))`; with
    /// `ff_init_scaling` the feed-forward matrices of layer `l` (0-based) are
    /// further scaled by `1 / sqrt(2 (l + 1))`. Biases and offsets start at
    /// zero, gains at one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std())
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
            normal,
        };
        let (d, l, v) = (config.hidden, config.max_len, config.vocab_size);

        let tokens = b.weight("embedding.tokens".into(), &[v, d], 1.0)?;
        let (absolute, relative) = match config.positions {
            PositionEncoding::Absolute => (
                Some(b.weight("embedding.absolute_positions".into(), &[l, d], 1.0)?),
                None,
            ),
            PositionEncoding::Relative => (
                None,
                Some(b.weight("embedding.relative_positions".into(), &[2 * l - 1, d], 1.0)?),
            ),
        };
        let segments = match config.nsp_head {
            NspHead::None => None,
            _ => Some(b.weight("embedding.segments".into(), &[2, d], 1.0)?),
        };
        let norm = b.norm("embedding.norm", d)?;
        let embedding = EmbeddingParams {
            tokens,
            absolute,
            relative,
            segments,
            norm,
        };

        let m = config.ff_width();
        let mut layers = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let p = format!("layers.{layer}");
            let attention = AttentionParams {
                query: b.weight(format!("{p}.attention.query"), &[d, d], 1.0)?,
                key: b.weight(format!("{p}.attention.key"), &[d, d], 1.0)?,
                value: b.weight(format!("{p}.attention.value"), &[d, d], 1.0)?,
                output: b.weight(format!("{p}.attention.output"), &[d, d], 1.0)?,
                relative,
            };
            let scale = if config.ff_init_scaling {
                1.0 / (2.0 * (layer + 1) as f64).sqrt()
            } else {
                1.0
            };
            let gated = config.activation == Activation::Geglu;
            let w1 = b.weight(format!("{p}.feed_forward.w1"), &[d, m], scale)?;
            let w2 = if gated {
                Some(b.weight(format!("{p}.feed_forward.w2"), &[d, m], scale)?)
            } else {
                None
            };
            let w3 = b.weight(format!("{p}.feed_forward.w3"), &[m, d], scale)?;
            let (b1, b2, b3) = if config.ff_biases {
                (
                    Some(b.bias(format!("{p}.feed_forward.b1"), m)?),
                    if gated {
                        Some(b.bias(format!("{p}.feed_forward.b2"), m)?)
                    } else {
                        None
                    },
                    Some(b.bias(format!("{p}.feed_forward.b3"), d)?),
                )
            } else {
                (None, None, None)
            };
            let feed_forward = FeedForwardParams {
                w1,
                w2,
                w3,
                b1,
                b2,
                b3,
            };
            let norms = (0..layers::norm_count(config.norm_style))
                .map(|i| b.norm(&format!("{p}.norm{i}"), d))
                .collect::<Result<_, _>>()?;
            layers.push(LayerParams {
                attention,
                feed_forward,
                norms,
            });
        }

        let mlm_head = MlmHeadParams {
            transform: b.weight("mlm_head.transform".into(), &[d, d], 1.0)?,
            transform_bias: b.bias("mlm_head.transform_bias".into(), d)?,
            norm: b.norm("mlm_head.norm", d)?,
            output: b.weight("mlm_head.output".into(), &[d, v], 1.0)?,
            output_bias: b.bias("mlm_head.output_bias".into(), v)?,
        };
        let nsp_head = match config.nsp_head {
            NspHead::None => None,
            _ => Some(NspHeadParams {
                weight: b.weight("nsp_head.weight".into(), &[d, 2], 1.0)?,
                bias: b.bias("nsp_head.bias".into(), 2)?,
            }),
        };
        let params = b.store;
        debug_assert!(layers::uses_relative(&config) == relative.is_some());
        Ok(Self {
            config,
            params,
            embedding,
            layers,
            mlm_head,
            nsp_head,
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

    pub fn embedding_params(&self) -> &EmbeddingParams {
        &self.embedding
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn mlm_head_params(&self) -> &MlmHeadParams {
        &self.mlm_head
    }

    pub fn nsp_head_params(&self) -> Option<&NspHeadParams> {
        self.nsp_head.as_ref()
    }

    /// Exact number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Runs the encoder. Parameters are bound as differentiable leaves when
    /// `train` or `trainable` is set, otherwise as constants.
    pub fn forward<'g, R: Rng + ?Sized>(
        &self,
        graph: &'g Graph,
        batch: &Batch,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput<'g>, ModelError> {
        let bound = self.params.bind(graph, train);
        self.forward_bound(graph, &bound, batch, train, rng)
    }

    /// Forward pass against parameters already bound into `graph`.
    pub fn forward_bound<'g, R: Rng + ?Sized>(
        &self,
        graph: &'g Graph,
        bound: &Bound<'g>,
        batch: &Batch,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput<'g>, ModelError> {
        let cfg = &self.config;
        let (n, t, d) = (batch.batch, batch.len, cfg.hidden);
        if t > cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max_len: cfg.max_len,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let mut x = bound
            .get(self.embedding.tokens)
            .gather_rows(&ids, &[n, t])?;
        if let Some(abs) = self.embedding.absolute {
            x = x.add(bound.get(abs).slice(0, 0, t)?)?;
        }
        if let Some(seg) = self.embedding.segments {
            let segments = batch.segments.as_ref().ok_or(ModelError::MissingSegments)?;
            let seg_ids: Vec<usize> = segments.iter().map(|&s| usize::from(s.min(1))).collect();
            x = x.add(bound.get(seg).gather_rows(&seg_ids, &[n, t])?)?;
        }
        let embedding = layers::layer_norm(x, bound, &self.embedding.norm)?;

        let key_mask = batch.key_mask();
        let mut state = embedding;
        let mut layer_states = Vec::with_capacity(self.layers.len());
        let mut contributions = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, contribution) =
                layers::encode_layer(state, bound, layer, &key_mask, cfg, train, rng)?;
            layer_states.push(out);
            contributions.push(contribution);
            state = out;
        }

        let h = &self.mlm_head;
        let transformed = state
            .matmul(bound.get(h.transform))?
            .add(bound.get(h.transform_bias))?
            .gelu();
        let mlm_logits = layers::layer_norm(transformed, bound, &h.norm)?
            .matmul(bound.get(h.output))?
            .add(bound.get(h.output_bias))?;

        let nsp_logits = match &self.nsp_head {
            Some(head) => {
                let cls = state.slice(1, 0, 1)?.reshape(&[n, d])?;
                Some(
                    cls.matmul(bound.get(head.weight))?
                        .add(bound.get(head.bias))?,
                )
            }
            None => None,
        };
        let _ = graph;
        Ok(ForwardOutput {
            embedding,
            layer_states,
            contributions,
            mlm_logits,
            nsp_logits,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| {
                    let plain = Tensor::new(p.tensor.shape(), p.tensor.data().to_vec())
                        .expect("valid shape");
                    (p.name.clone(), plain)
                })
                .collect(),
            meta: Vec::new(),
        }
    }

    /// Rebuilds a model from a checkpoint; every parameter named by the
    /// config must be present with the expected shape.
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = Self::init(checkpoint.config.clone(), 0)?;
        for param in model.params.iter_mut() {
            let (_, tensor) = checkpoint
                .tensors
                .iter()
                .find(|(name, _)| *name == param.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", param.name)))?;
            if tensor.shape() != param.tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    param.name,
                    tensor.shape(),
                    param.tensor.shape()
                )));
            }
            param.tensor.data_mut().copy_from_slice(tensor.data());
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
