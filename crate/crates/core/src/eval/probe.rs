use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EvalError;
use crate::model::{Batch, Bound, Model, ParamId, ParamStore};
use crate::numerics::{Graph, Tensor, Var};
use crate::tokenizer::TokenId;
use crate::training::{
    clip_param_gradients, DecayKind, Optimizer, OptimizerConfig, ScheduleConfig,
};

/// A labeled span (or span pair) over model input ids. Spans are half-open
/// index ranges into `ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeExample {
    pub ids: Vec<TokenId>,
    pub span1: (usize, usize),
    pub span2: Option<(usize, usize)>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub downsample: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Mix the embedding output in as an extra layer ahead of the layer
    /// contributions.
    pub include_embedding: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            downsample: 256,
            heads: 4,
            hidden: 256,
            dropout: 0.25,
            batch_size: 128,
            epochs: 5,
            lr: 6e-3,
            weight_decay: 0.01,
            grad_clip: 2.0,
            seed: 0,
            include_embedding: false,
        }
    }
}

/// Frozen per-layer vectors of one span, laid out `[layers, n, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanReps {
    pub n: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleReps {
    pub spans: Vec<SpanReps>,
    pub label: usize,
}

fn check_span(span: (usize, usize), len: usize) -> Result<(), EvalError> {
    if span.1 <= span.0 || span.1 > len {
        return Err(EvalError::SpanOutOfRange {
            start: span.0,
            end: span.1,
            len,
        });
    }
    Ok(())
}

/// Runs the frozen model over each example and keeps the span rows of every
/// layer contribution (plus the embedding output when requested).
pub fn extract_reps(
    model: &Model,
    examples: &[ProbeExample],
    include_embedding: bool,
) -> Result<Vec<ExampleReps>, EvalError> {
    let d = model.config().hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let spans: Vec<(usize, usize)> = std::iter::once(ex.span1).chain(ex.span2).collect();
        for &s in &spans {
            check_span(s, ex.ids.len())?;
        }
        let mut batch = Batch::new(ex.ids.clone(), 1, ex.ids.len())?;
        if model.nsp_head_params().is_some() {
            batch = batch.with_segments(vec![0; ex.ids.len()])?;
        }
        let graph = Graph::new();
        let fwd = model.forward(&graph, &batch, false, &mut rng)?;
        let mut layers: Vec<Vec<f64>> = Vec::new();
        if include_embedding {
            layers.push(fwd.embedding.to_vec());
        }
        layers.extend(fwd.contributions.iter().map(Var::to_vec));
        let spans = spans
            .iter()
            .map(|&(start, end)| {
                let data = layers
                    .iter()
                    .flat_map(|l| l[start * d..end * d].iter().copied())
                    .collect();
                SpanReps {
                    n: end - start,
                    data,
                }
            })
            .collect();
        out.push(ExampleReps {
            spans,
            label: ex.label,
        });
    }
    Ok(out)
}

/// Edge probe: softmax layer mix, linear downsampling, multi-head attention
/// pooling per span slot and a one-hidden-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub config: ProbeConfig,
    pub store: ParamStore,
    layers: usize,
    input_dim: usize,
    classes: usize,
    layer_logits: ParamId,
    down_w: ParamId,
    down_b: ParamId,
    queries: Vec<ParamId>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Least-squares slope of `ys` against `1..=n`; 0 for fewer than two points.
pub fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mean_x = (n + 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = (i + 1) as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    /// γ_k · 100.
    pub percent: Vec<f64>,
    /// OLS slope of `percent` against the layer number.
    pub slope: f64,
}

impl LayerReport {
    pub fn from_gamma(gamma: &[f64]) -> Self {
        let percent: Vec<f64> = gamma.iter().map(|g| g * 100.0).collect();
        let slope = ols_slope(&percent);
        Self { percent, slope }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("layer\tgamma_percent\n");
        for (k, p) in self.percent.iter().enumerate() {
            out.push_str(&format!("{}\t{p:.2}\n", k + 1));
        }
        out.push_str(&format!("slope\t{:.2}\n", self.slope));
        out
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

impl Probe {
    fn init(
        layers: usize,
        input_dim: usize,
        spans: usize,
        classes: usize,
        config: ProbeConfig,
    ) -> Result<Self, EvalError> {
        let (ds, h, hidden) = (config.downsample, config.heads, config.hidden);
        if h == 0 || ds % h != 0 {
            return Err(EvalError::Config(format!(
                "downsample {ds} is not divisible by {h} heads"
            )));
        }
        if classes < 2 || layers == 0 || config.batch_size == 0 || config.epochs == 0 {
            return Err(EvalError::Config(
                "need at least 2 classes, 1 layer, 1 epoch and a positive batch size".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut weight =
            |store: &mut ParamStore, name: &str, shape: [usize; 2]| -> Result<ParamId, EvalError> {
                let normal =
                    Normal::new(0.0, 1.0 / (shape[0] as f64).sqrt()).expect("positive std");
                let data = (0..shape[0] * shape[1])
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                Ok(store.add(name, Tensor::new(&shape, data)?, true))
            };
        let layer_logits = store.add("probe.layer_logits", Tensor::zeros(&[1, layers])?, false);
        let down_w = weight(&mut store, "probe.down.weight", [input_dim, ds])?;
        let down_b = store.add("probe.down.bias", Tensor::zeros(&[ds])?, true);
        let mut queries = Vec::with_capacity(spans);
        for s in 0..spans {
            queries.push(weight(
                &mut store,
                &format!("probe.pool{s}.queries"),
                [ds, h],
            )?);
        }
        let w1 = weight(&mut store, "probe.mlp.w1", [ds * spans, hidden])?;
        let b1 = store.add("probe.mlp.b1", Tensor::zeros(&[hidden])?, true);
        let w2 = weight(&mut store, "probe.mlp.w2", [hidden, classes])?;
        let b2 = store.add("probe.mlp.b2", Tensor::zeros(&[classes])?, true);
        Ok(Self {
            config,
            store,
            layers,
            input_dim,
            classes,
            layer_logits,
            down_w,
            down_b,
            queries,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Layer weights γ (softmax of the layer logits).
    pub fn gamma(&self) -> Vec<f64> {
        softmax(self.store.get(self.layer_logits).tensor.data())
    }

    pub fn layer_report(&self) -> LayerReport {
        LayerReport::from_gamma(&self.gamma())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn set_layer_logits(&mut self, logits: &[f64]) {
        self.store
            .get_mut(self.layer_logits)
            .tensor
            .data_mut()
            .copy_from_slice(logits);
    }

    #[cfg(test)]
    pub(crate) fn query(&self, slot: usize) -> ParamId {
        self.queries[slot]
    }

    /// Head-assignment masks `[D, H]`, `[H, D]` and a `[1, H]` row of ones.
    pub(crate) fn pool_masks<'g>(
        &self,
        graph: &'g Graph,
    ) -> Result<(Var<'g>, Var<'g>, Var<'g>), EvalError> {
        let (ds, h) = (self.config.downsample, self.config.heads);
        let head_dim = ds / h;
        let block: Vec<f64> = (0..ds * h)
            .map(|i| f64::from(u8::from((i / h) / head_dim == i % h)))
            .collect();
        let block_t: Vec<f64> = (0..h * ds)
            .map(|i| f64::from(u8::from((i % ds) / head_dim == i / ds)))
            .collect();
        Ok((
            graph.from_vec(&[ds, h], block)?,
            graph.from_vec(&[h, ds], block_t)?,
            graph.from_vec(&[1, h], vec![1.0; h])?,
        ))
    }

    /// Attention pooling of `x: [n, D]` with per-head queries `q: [D, H]`,
    /// where head `h` only sees dimensions `h·D/H .. (h+1)·D/H`.
    pub(crate) fn pool<'g>(
        &self,
        x: Var<'g>,
        q: Var<'g>,
        masks: (Var<'g>, Var<'g>, Var<'g>),
    ) -> Result<Var<'g>, EvalError> {
        let (block, block_t, ones) = masks;
        let head_dim = self.config.downsample / self.config.heads;
        let scores = x
            .matmul(q.mul(block)?)?
            .scale(1.0 / (head_dim as f64).sqrt());
        let alpha = scores.transpose()?.softmax()?;
        let heads = alpha.matmul(x)?.mul(block_t)?;
        Ok(ones.matmul(heads)?)
    }

    fn logits<'g>(
        &self,
        graph: &'g Graph,
        bound: &Bound<'g>,
        reps: &[&ExampleReps],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'g>, EvalError> {
        let (k, d) = (self.layers, self.input_dim);
        let tokens: usize = reps.iter().flat_map(|r| &r.spans).map(|s| s.n).sum();
        let mut stacked = vec![Vec::with_capacity(tokens * d); k];
        for span in reps.iter().flat_map(|r| &r.spans) {
            for (layer, row) in stacked.iter_mut().enumerate() {
                row.extend_from_slice(&span.data[layer * span.n * d..(layer + 1) * span.n * d]);
            }
        }
        let stacked = graph.from_vec(&[k, tokens * d], stacked.concat())?;
        let gamma = bound.get(self.layer_logits).softmax()?;
        let mixed = gamma.matmul(stacked)?.reshape(&[tokens, d])?;
        let down = mixed
            .matmul(bound.get(self.down_w))?
            .add(bound.get(self.down_b))?
            .dropout(self.config.dropout, train, rng)?;

        let masks = self.pool_masks(graph)?;

        let mut rows = Vec::with_capacity(reps.len());
        let mut offset = 0;
        for r in reps {
            let mut pooled = Vec::with_capacity(r.spans.len());
            for (slot, span) in r.spans.iter().enumerate() {
                let x = down.slice(0, offset, span.n)?;
                pooled.push(self.pool(x, bound.get(self.queries[slot]), masks)?);
                offset += span.n;
            }
            rows.push(if pooled.len() == 1 {
                pooled[0]
            } else {
                Var::concat(&pooled, 1)?
            });
        }
        let features = Var::concat(&rows, 0)?;
        let hidden = features
            .matmul(bound.get(self.w1))?
            .add(bound.get(self.b1))?
            .gelu()
            .dropout(self.config.dropout, train, rng)?;
        Ok(hidden.matmul(bound.get(self.w2))?.add(bound.get(self.b2))?)
    }

    pub fn predict(&self, reps: &[ExampleReps]) -> Result<Vec<usize>, EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(reps.len());
        for chunk in reps.chunks(self.config.batch_size.max(1)) {
            let graph = Graph::new();
            let bound = self.store.bind(&graph, false);
            let refs: Vec<&ExampleReps> = chunk.iter().collect();
            let logits = self
                .logits(&graph, &bound, &refs, false, &mut rng)?
                .to_vec();
            for row in logits.chunks(self.classes) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    );
                out.push(best.0);
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, reps: &[ExampleReps]) -> Result<f64, EvalError> {
        if reps.is_empty() {
            return Err(EvalError::Empty("probe examples"));
        }
        let predicted = self.predict(reps)?;
        let correct = predicted
            .iter()
            .zip(reps)
            .filter(|(p, r)| **p == r.label)
            .count();
        Ok(correct as f64 / reps.len() as f64)
    }
}

/// Trains a probe on frozen representations with AdamW, cosine decay from
/// `lr` to 0, and gradient clipping.
pub fn train_probe_on_reps(
    reps: &[ExampleReps],
    input_dim: usize,
    classes: usize,
    config: ProbeConfig,
) -> Result<Probe, EvalError> {
    let first = reps.first().ok_or(EvalError::Empty("probe examples"))?;
    let slots = first.spans.len();
    if reps.iter().any(|r| r.spans.len() != slots) {
        return Err(EvalError::Config(
            "examples mix single spans and span pairs".into(),
        ));
    }
    if let Some(r) = reps.iter().find(|r| r.label >= classes) {
        return Err(EvalError::Config(format!(
            "label {} outside {classes} classes",
            r.label
        )));
    }
    let layers = first.spans[0].data.len() / (first.spans[0].n * input_dim);
    let mut probe = Probe::init(layers, input_dim, slots, classes, config.clone())?;

    let steps_per_epoch = reps.len().div_ceil(config.batch_size);
    let total = (steps_per_epoch * config.epochs) as u64;
    let schedule = ScheduleConfig {
        kind: DecayKind::Cosine,
        peak_lr: config.lr,
        final_lr: 0.0,
        warmup_steps: 0,
        total_steps: total,
    };
    let mut opt = Optimizer::for_params(OptimizerConfig::adamw(config.weight_decay), &probe.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x70726f6265);
    let mut order: Vec<usize> = (0..reps.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&ExampleReps> = chunk.iter().map(|&i| &reps[i]).collect();
            let labels: Vec<Option<usize>> = batch.iter().map(|r| Some(r.label)).collect();
            let graph = Graph::new();
            let bound = probe.store.bind(&graph, true);
            let loss = probe
                .logits(&graph, &bound, &batch, true, &mut rng)?
                .cross_entropy(&labels)?;
            if !loss.item().is_finite() {
                return Err(EvalError::NonFinite);
            }
            let grads = graph.backward(loss)?;
            probe.store.zero_grad();
            probe.store.accumulate_bound(&bound, &grads)?;
            clip_param_gradients(&mut probe.store, config.grad_clip)?;
            opt.step(&mut probe.store, schedule.lr_at(step)?)?;
            probe.store.zero_grad();
        }
    }
    Ok(probe)
}

/// [`extract_reps`] followed by [`train_probe_on_reps`]. The model is only
/// read.
pub fn train_probe(
    model: &Model,
    examples: &[ProbeExample],
    classes: usize,
    config: ProbeConfig,
) -> Result<Probe, EvalError> {
    let reps = extract_reps(model, examples, config.include_embedding)?;
    train_probe_on_reps(&reps, model.config().hidden, classes, config)
}
