//! Encoder building blocks: disentangled attention, feed-forward variants and
//! the three layer-normalization placements.

use std::rc::Rc;

use rand::Rng;

use super::config::{Activation, ModelConfig, NormStyle, PositionEncoding};
use super::params::{Bound, ParamId};
use super::ModelError;
use crate::numerics::{Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub offset: ParamId,
}

/// Query/key projections are shared between the content and the relative
/// position roles; `relative` points at the model-wide position table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub relative: Option<ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub w2: Option<ParamId>,
    pub w3: ParamId,
    pub b1: Option<ParamId>,
    pub b2: Option<ParamId>,
    pub b3: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attention: AttentionParams,
    pub feed_forward: FeedForwardParams,
    /// normformer: [pre-attn, post-attn, pre-ff, post-ff];
    /// pre/post: [attn, ff].
    pub norms: Vec<NormParams>,
}

/// 1-indexed row of the `(2L - 1) x d` relative position table used for
/// query position `i` and key position `j`: `L - i + j`.
pub fn relative_index(i: usize, j: usize, max_len: usize) -> Result<usize, ModelError> {
    if i >= max_len || j >= max_len {
        return Err(ModelError::PositionOutOfRange { i, j, max_len });
    }
    Ok(max_len - i + j)
}

/// Row-major `T x T` table of 0-based rows into the `2T - 1` rows of the
/// position table that a length-`T` sequence can reach.
fn local_relative_table(len: usize) -> Rc<[usize]> {
    (0..len)
        .flat_map(|i| (0..len).map(move |j| len - 1 - i + j))
        .collect()
}

pub struct AttentionOutput<'g> {
    pub output: Var<'g>,
    /// Masked pre-softmax scores, `[batch, heads, T, T]`.
    pub scores: Var<'g>,
    /// Attention weights after softmax (before attention dropout).
    pub probs: Var<'g>,
}

fn split_heads<'g>(
    x: Var<'g>,
    lead: &[usize],
    heads: usize,
    head_dim: usize,
) -> Result<Var<'g>, ModelError> {
    // [..lead, T, d] -> [..lead, heads, T, head_dim]
    let t = x.shape()[lead.len()];
    let mut shape = lead.to_vec();
    shape.extend([t, heads, head_dim]);
    let r = lead.len();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.extend([r + 1, r, r + 2]);
    Ok(x.reshape(&shape)?.permute(&axes)?)
}

/// Multi-head self-attention over `hidden: [batch, T, d]`. With a relative
/// position table the score for query `i` and key `j` is
/// `(cQ_i.cK_j + cQ_i.pK_ij + pQ_ji.cK_j) / sqrt(3 * head_dim)`; without one
/// it is the usual `Q_i.K_j / sqrt(head_dim)`. `key_mask[b * T + j]` marks
/// padding keys, which receive `-inf` before the softmax.
pub fn attention<'g, R: Rng + ?Sized>(
    hidden: Var<'g>,
    bound: &Bound<'g>,
    params: &AttentionParams,
    key_mask: &[bool],
    config: &ModelConfig,
    train: bool,
    rng: &mut R,
) -> Result<AttentionOutput<'g>, ModelError> {
    let shape = hidden.shape();
    let (batch, t, d) = (shape[0], shape[1], shape[2]);
    if t > config.max_len {
        return Err(ModelError::SequenceTooLong {
            len: t,
            max_len: config.max_len,
        });
    }
    let (heads, head_dim) = (config.heads, config.head_dim);
    let wq = bound.get(params.query);
    let wk = bound.get(params.key);
    let q = split_heads(hidden.matmul(wq)?, &[batch], heads, head_dim)?;
    let k = split_heads(hidden.matmul(wk)?, &[batch], heads, head_dim)?;
    let v = split_heads(
        hidden.matmul(bound.get(params.value))?,
        &[batch],
        heads,
        head_dim,
    )?;

    let content = q.matmul(k.transpose()?)?;
    let scores = match params.relative {
        Some(table) => {
            let window = bound.get(table).slice(0, config.max_len - t, 2 * t - 1)?;
            let pos_q = split_heads(window.matmul(wq)?, &[], heads, head_dim)?;
            let pos_k = split_heads(window.matmul(wk)?, &[], heads, head_dim)?;
            let index = local_relative_table(t);
            // content-to-position: row i, column j -> cQ_i . pK[rel(i, j)]
            let c2p = q
                .matmul(pos_k.transpose()?)?
                .take_along_last(index.clone(), t)?;
            // position-to-content: built as row j, column i -> cK_j . pQ[rel(j, i)]
            let p2c = k
                .matmul(pos_q.transpose()?)?
                .take_along_last(index, t)?
                .transpose()?;
            content
                .add(c2p)?
                .add(p2c)?
                .scale(1.0 / (3.0 * head_dim as f64).sqrt())
        }
        None => content.scale(1.0 / (head_dim as f64).sqrt()),
    };
    let scores = if key_mask.iter().any(|&m| m) {
        if key_mask.len() != batch * t {
            return Err(ModelError::MaskLength {
                expected: batch * t,
                got: key_mask.len(),
            });
        }
        let mut mask = Vec::with_capacity(batch * heads * t * t);
        for b in 0..batch {
            let keys = &key_mask[b * t..(b + 1) * t];
            for _ in 0..heads * t {
                mask.extend_from_slice(keys);
            }
        }
        scores.masked_fill(&mask, f64::NEG_INFINITY)?
    } else {
        scores
    };
    let probs = scores.softmax()?;
    let context = probs
        .dropout(config.attention_dropout, train, rng)?
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch, t, d])?;
    let output = context.matmul(bound.get(params.output))?;
    Ok(AttentionOutput {
        output,
        scores,
        probs,
    })
}

fn with_bias<'g>(
    x: Var<'g>,
    bound: &Bound<'g>,
    bias: Option<ParamId>,
) -> Result<Var<'g>, ModelError> {
    Ok(match bias {
        Some(b) => x.add(bound.get(b))?,
        None => x,
    })
}

/// `(GELU(x W1) * x W2) W3` for GEGLU, `GELU(x W1) W3` for GELU.
pub fn feed_forward<'g>(
    x: Var<'g>,
    bound: &Bound<'g>,
    params: &FeedForwardParams,
    activation: Activation,
) -> Result<Var<'g>, ModelError> {
    let h = with_bias(x.matmul(bound.get(params.w1))?, bound, params.b1)?.gelu();
    let h = match (activation, params.w2) {
        (Activation::Geglu, Some(w2)) => {
            h.mul(with_bias(x.matmul(bound.get(w2))?, bound, params.b2)?)?
        }
        (Activation::Geglu, None) => return Err(ModelError::MissingParameter("feed-forward gate")),
        (Activation::Gelu, _) => h,
    };
    with_bias(h.matmul(bound.get(params.w3))?, bound, params.b3)
}

pub fn layer_norm<'g>(
    x: Var<'g>,
    bound: &Bound<'g>,
    norm: &NormParams,
) -> Result<Var<'g>, ModelError> {
    Ok(x.layer_norm(LAYER_NORM_EPS)?
        .mul(bound.get(norm.gain))?
        .add(bound.get(norm.offset))?)
}

/// Applies one encoder layer and returns `(output, output - x)`.
#[allow(clippy::too_many_arguments)]
pub fn encode_layer<'g, R: Rng + ?Sized>(
    x: Var<'g>,
    bound: &Bound<'g>,
    layer: &LayerParams,
    key_mask: &[bool],
    config: &ModelConfig,
    train: bool,
    rng: &mut R,
) -> Result<(Var<'g>, Var<'g>), ModelError> {
    let n = &layer.norms;
    let attend = |h: Var<'g>, rng: &mut R| -> Result<Var<'g>, ModelError> {
        Ok(attention(h, bound, &layer.attention, key_mask, config, train, rng)?.output)
    };
    let ff = |h: Var<'g>| feed_forward(h, bound, &layer.feed_forward, config.activation);
    let out = match config.norm_style {
        NormStyle::NormFormer => {
            let a = layer_norm(attend(layer_norm(x, bound, &n[0])?, rng)?, bound, &n[1])?;
            let a = x.add(a.dropout(config.dropout, train, rng)?)?;
            let f = layer_norm(ff(layer_norm(a, bound, &n[2])?)?, bound, &n[3])?;
            a.add(f.dropout(config.dropout, train, rng)?)?
        }
        NormStyle::Pre => {
            let a = attend(layer_norm(x, bound, &n[0])?, rng)?;
            let a = x.add(a.dropout(config.dropout, train, rng)?)?;
            let f = ff(layer_norm(a, bound, &n[1])?)?;
            a.add(f.dropout(config.dropout, train, rng)?)?
        }
        NormStyle::Post => {
            let a = attend(x, rng)?.dropout(config.dropout, train, rng)?;
            let a = layer_norm(x.add(a)?, bound, &n[0])?;
            let f = ff(a)?.dropout(config.dropout, train, rng)?;
            layer_norm(a.add(f)?, bound, &n[1])?
        }
    };
    Ok((out, out.sub(x)?))
}

pub(crate) fn norm_count(style: NormStyle) -> usize {
    match style {
        NormStyle::NormFormer => 4,
        NormStyle::Pre | NormStyle::Post => 2,
    }
}

pub(crate) fn uses_relative(config: &ModelConfig) -> bool {
    config.positions == PositionEncoding::Relative
}
