use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EvalError;
use crate::model::{text_enum, Batch, Bound, Model, ParamId, ParamStore};
use crate::numerics::{Graph, Tensor, Var};
use crate::objectives::pack_segments;
use crate::tokenizer::TokenId;
use crate::training::{clip_gradients, DecayKind, Optimizer, OptimizerConfig, ScheduleConfig};

text_enum!(
    TaskKind { Single => "single", Pair => "pair", Regression => "regression" }
);

/// Tokenized example. `label` is a class index for classification tasks and
/// the target value for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierExample {
    pub a: Vec<TokenId>,
    pub b: Option<Vec<TokenId>>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Inputs longer than this are trimmed longest segment first.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 8,
            peak_lr: 3e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            grad_clip: 2.0,
            max_len: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneMetrics {
    pub accuracy: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

/// Fine-tuned encoder with an MLP head on the final `[CLS]` state.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub model: Model,
    pub head: ParamStore,
    pub kind: TaskKind,
    pub outputs: usize,
    max_len: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, with segment ids.
pub fn encode_input(example: &ClassifierExample, max_len: usize) -> (Vec<TokenId>, Vec<u8>) {
    pack_segments(&example.a, example.b.as_deref(), max_len)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman correlation: Pearson over average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

impl Classifier {
    fn new(
        model: Model,
        kind: TaskKind,
        outputs: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        let d = model.config().hidden;
        let normal = Normal::new(0.0, model.config().init_std()).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x68656164);
        let mut head = ParamStore::new();
        let mut weight =
            |head: &mut ParamStore, name: &str, shape: [usize; 2]| -> Result<ParamId, EvalError> {
                let data = (0..shape[0] * shape[1])
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                Ok(head.add(name, Tensor::new(&shape, data)?, true))
            };
        let w1 = weight(&mut head, "classifier.w1", [d, d])?;
        let b1 = head.add("classifier.b1", Tensor::zeros(&[d])?, true);
        let w2 = weight(&mut head, "classifier.w2", [d, outputs])?;
        let b2 = head.add("classifier.b2", Tensor::zeros(&[outputs])?, true);
        Ok(Self {
            model,
            head,
            kind,
            outputs,
            max_len,
            w1,
            b1,
            w2,
            b2,
        })
    }

    fn batch(&self, examples: &[&ClassifierExample]) -> Result<Batch, EvalError> {
        let (rows, segs): (Vec<_>, Vec<_>) = examples
            .iter()
            .map(|e| encode_input(e, self.max_len))
            .unzip();
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let segments = segs
            .into_iter()
            .flat_map(|mut s: Vec<u8>| {
                s.resize(width, 0);
                s
            })
            .collect();
        Ok(Batch::from_rows(&rows)?.with_segments(segments)?)
    }

    fn outputs_for<'g>(
        &self,
        graph: &'g Graph,
        model: &Bound<'g>,
        head: &Bound<'g>,
        batch: &Batch,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'g>, EvalError> {
        let d = self.model.config().hidden;
        let out = self.model.forward_bound(graph, model, batch, train, rng)?;
        let cls = out
            .final_state()
            .slice(1, 0, 1)?
            .reshape(&[batch.batch, d])?;
        let hidden = cls
            .matmul(head.get(self.w1))?
            .add(head.get(self.b1))?
            .gelu()
            .dropout(self.model.config().dropout, train, rng)?;
        Ok(hidden.matmul(head.get(self.w2))?.add(head.get(self.b2))?)
    }

    /// Class index (as `f64`) or regression value per example.
    pub fn predict(&self, examples: &[ClassifierExample]) -> Result<Vec<f64>, EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(32) {
            let refs: Vec<&ClassifierExample> = chunk.iter().collect();
            let batch = self.batch(&refs)?;
            let graph = Graph::new();
            let (mb, hb) = (
                self.model.params().bind(&graph, false),
                self.head.bind(&graph, false),
            );
            let values = self
                .outputs_for(&graph, &mb, &hb, &batch, false, &mut rng)?
                .to_vec();
            for row in values.chunks(self.outputs) {
                out.push(match self.kind {
                    TaskKind::Regression => row[0],
                    _ => {
                        row.iter()
                            .enumerate()
                            .fold(
                                (0, f64::NEG_INFINITY),
                                |a, (i, &v)| if v > a.1 { (i, v) } else { a },
                            )
                            .0 as f64
                    }
                });
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, examples: &[ClassifierExample]) -> Result<FinetuneMetrics, EvalError> {
        if examples.is_empty() {
            return Err(EvalError::Empty("evaluation examples"));
        }
        let predicted = self.predict(examples)?;
        let gold: Vec<f64> = examples.iter().map(|e| e.label).collect();
        Ok(match self.kind {
            TaskKind::Regression => FinetuneMetrics {
                accuracy: None,
                pearson: pearson(&predicted, &gold),
                spearman: spearman(&predicted, &gold),
            },
            _ => {
                let correct = predicted.iter().zip(&gold).filter(|(p, g)| p == g).count();
                FinetuneMetrics {
                    accuracy: Some(correct as f64 / gold.len() as f64),
                    pearson: None,
                    spearman: None,
                }
            }
        })
    }
}

fn validate(
    examples: &[ClassifierExample],
    kind: TaskKind,
    classes: usize,
) -> Result<(), EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty("training examples"));
    }
    for (i, e) in examples.iter().enumerate() {
        let bad = |m: &str| Err(EvalError::Config(format!("example {i}: {m}")));
        match kind {
            TaskKind::Single if e.b.is_some() => {
                return bad("single-segment task with a second segment")
            }
            TaskKind::Pair if e.b.is_none() => return bad("pair task without a second segment"),
            TaskKind::Single | TaskKind::Pair
                if e.label.fract() != 0.0 || e.label < 0.0 || e.label >= classes as f64 =>
            {
                return bad("label is not a class index");
            }
            _ => {}
        }
        if !e.label.is_finite() {
            return bad("non-finite label");
        }
    }
    Ok(())
}

/// Fine-tunes the whole encoder together with a fresh head: AdamW, linear
/// warmup over `warmup_fraction` of the steps, then linear decay to 0.
/// `classes` is ignored for regression.
pub fn finetune_classifier(
    model: Model,
    train: &[ClassifierExample],
    kind: TaskKind,
    classes: usize,
    config: &FinetuneConfig,
) -> Result<Classifier, EvalError> {
    validate(train, kind, classes)?;
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(EvalError::Config(
            "batch_size and epochs must be positive".into(),
        ));
    }
    let outputs = if kind == TaskKind::Regression {
        1
    } else {
        classes
    };
    let max_len = config.max_len.min(model.config().max_len);
    let mut clf = Classifier::new(model, kind, outputs, max_len, config.seed)?;

    let total = (train.len().div_ceil(config.batch_size) * config.epochs) as u64;
    let warmup = ((config.warmup_fraction * total as f64).round() as u64).min(total - 1);
    let schedule = ScheduleConfig {
        kind: DecayKind::Linear,
        peak_lr: config.peak_lr,
        final_lr: 0.0,
        warmup_steps: warmup,
        total_steps: total,
    };
    let opt_config = OptimizerConfig::adamw(config.weight_decay);
    let mut model_opt = Optimizer::for_params(opt_config.clone(), clf.model.params());
    let mut head_opt = Optimizer::for_params(opt_config, &clf.head);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let examples: Vec<&ClassifierExample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = clf.batch(&examples)?;
            let graph = Graph::new();
            let mb = clf.model.params().bind(&graph, true);
            let hb = clf.head.bind(&graph, true);
            let out = clf.outputs_for(&graph, &mb, &hb, &batch, true, &mut rng)?;
            let loss = match kind {
                TaskKind::Regression => {
                    let gold = graph.from_vec(
                        &[examples.len(), 1],
                        examples.iter().map(|e| e.label).collect(),
                    )?;
                    let diff = out.sub(gold)?;
                    diff.mul(diff)?.mean()
                }
                _ => {
                    let labels: Vec<Option<usize>> =
                        examples.iter().map(|e| Some(e.label as usize)).collect();
                    out.cross_entropy(&labels)?
                }
            };
            if !loss.item().is_finite() {
                return Err(EvalError::NonFinite);
            }
            let grads = graph.backward(loss)?;
            clf.model.params_mut().zero_grad();
            clf.head.zero_grad();
            clf.model.params_mut().accumulate_bound(&mb, &grads)?;
            clf.head.accumulate_bound(&hb, &grads)?;
            drop((mb, hb));
            // one global norm over encoder and head
            let mut buffers: Vec<&mut [f64]> = clf
                .model
                .params_mut()
                .iter_mut()
                .chain(clf.head.iter_mut())
                .filter_map(|p| p.tensor.grad_mut())
                .collect();
            clip_gradients(&mut buffers, config.grad_clip)?;
            let lr = schedule.lr_at(step)?;
            model_opt.step(clf.model.params_mut(), lr)?;
            head_opt.step(&mut clf.head, lr)?;
            clf.model.params_mut().zero_grad();
            clf.head.zero_grad();
        }
    }
    Ok(clf)
}
