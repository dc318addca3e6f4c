use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{attention, encode_layer, feed_forward};
use super::*;
use crate::numerics::{Graph, Tensor};

fn erf_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn config(
    norm_style: NormStyle,
    activation: Activation,
    positions: PositionEncoding,
) -> ModelConfig {
    ModelConfig {
        norm_style,
        activation,
        positions,
        ..ModelConfig::toy(24, 8)
    }
}

fn random_batch(rng: &mut ChaCha8Rng, batch: usize, len: usize, vocab: usize) -> Batch {
    let ids = (0..batch * len)
        .map(|_| rng.random_range(5..vocab as TokenId))
        .collect();
    Batch::new(ids, batch, len).unwrap()
}

/// Parameter count of the encoder written out from the architecture
/// description, independently of the construction code.
fn closed_form_count(c: &ModelConfig) -> usize {
    let (d, l, v, k) = (c.hidden, c.max_len, c.vocab_size, c.layers);
    let m = c.ff_width();
    let mut n = v * d + 2 * d;
    n += match c.positions {
        PositionEncoding::Relative => (2 * l - 1) * d,
        PositionEncoding::Absolute => l * d,
    };
    if c.nsp_head != NspHead::None {
        n += 2 * d + d * 2 + 2;
    }
    let attention = 4 * d * d;
    let ff = match c.activation {
        Activation::Geglu => 3 * d * m + if c.ff_biases { 2 * m + d } else { 0 },
        Activation::Gelu => 2 * d * m + if c.ff_biases { m + d } else { 0 },
    };
    let norms = match c.norm_style {
        NormStyle::NormFormer => 4 * 2 * d,
        _ => 2 * 2 * d,
    };
    n += k * (attention + ff + norms);
    n + d * d + d + 2 * d + d * v + v
}

#[test]
fn parameter_count_matches_closed_form() {
    for &norm_style in NormStyle::ALL {
        for &activation in Activation::ALL {
            for &positions in PositionEncoding::ALL {
                for nsp_head in [NspHead::None, NspHead::Order] {
                    for ff_biases in [false, true] {
                        let c = ModelConfig {
                            nsp_head,
                            ff_biases,
                            ..config(norm_style, activation, positions)
                        };
                        let model = Model::init(c.clone(), 1).unwrap();
                        assert_eq!(model.parameter_count(), closed_form_count(&c), "{c:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn relative_and_absolute_differ_only_by_position_tables() {
    let rel = Model::init(
        config(
            NormStyle::NormFormer,
            Activation::Geglu,
            PositionEncoding::Relative,
        ),
        0,
    )
    .unwrap();
    let abs = Model::init(
        config(
            NormStyle::NormFormer,
            Activation::Geglu,
            PositionEncoding::Absolute,
        ),
        0,
    )
    .unwrap();
    let (l, d) = (8, 16);
    assert_eq!(
        rel.parameter_count() + l * d,
        abs.parameter_count() + (2 * l - 1) * d
    );
    let attention_count = |m: &Model| -> usize {
        m.params()
            .iter()
            .filter(|p| p.name.contains(".attention."))
            .map(|p| p.tensor.numel())
            .sum()
    };
    assert_eq!(attention_count(&rel), attention_count(&abs));
    assert_eq!(attention_count(&rel), 2 * 4 * d * d);
}

#[test]
fn gelu_width_keeps_parameter_budget() {
    let geglu = ModelConfig {
        ff_intermediate: 2048,
        ..ModelConfig::default()
    };
    let gelu = ModelConfig {
        activation: Activation::Gelu,
        ..geglu.clone()
    };
    assert_eq!(gelu.ff_width(), 3072);
    assert_eq!(3 * 768 * geglu.ff_width(), 2 * 768 * gelu.ff_width());
}

#[test]
fn init_scale_and_determinism() {
    let big = ModelConfig {
        hidden: 1024,
        heads: 16,
        ..ModelConfig::default()
    };
    assert!((big.init_std() - 0.019764235376052372).abs() < 1e-15);
    assert!((big.init_std() - 0.01976).abs() < 1e-5);

    let c = ModelConfig {
        ff_intermediate: 256,
        max_len: 64,
        ..ModelConfig::toy(512, 64)
    };
    let a = Model::init(c.clone(), 9).unwrap();
    let b = Model::init(c.clone(), 9).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert_ne!(
        a.params().checksum(),
        Model::init(c.clone(), 10).unwrap().params().checksum()
    );

    let std = |name: &str| {
        let t = &a.params().get(a.params().find(name).unwrap()).tensor;
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    let sigma = c.init_std();
    assert!((std("embedding.tokens") / sigma - 1.0).abs() < 0.03);
    assert!((std("layers.0.feed_forward.w1") / sigma - 1.0 / 2f64.sqrt()).abs() < 0.03);
    assert!((std("layers.1.feed_forward.w3") / sigma - 0.5).abs() < 0.03);
    let gain = &a
        .params()
        .get(a.params().find("layers.0.norm0.gain").unwrap())
        .tensor;
    assert!(gain.data().iter().all(|&g| g == 1.0));
    let offset = &a
        .params()
        .get(a.params().find("layers.0.norm0.offset").unwrap())
        .tensor;
    assert!(offset.data().iter().all(|&o| o == 0.0));

    let unscaled = Model::init(
        ModelConfig {
            ff_init_scaling: false,
            ..c
        },
        9,
    )
    .unwrap();
    let w = |m: &Model| {
        m.params()
            .get(m.params().find("layers.0.feed_forward.w1").unwrap())
            .tensor
            .data()[0]
    };
    assert!((w(&a) - w(&unscaled) / 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn invalid_config_is_rejected() {
    let c = ModelConfig {
        hidden: 15,
        ..ModelConfig::toy(24, 8)
    };
    assert!(matches!(
        Model::init(c, 0),
        Err(ModelError::InvalidConfig(_))
    ));
}

#[test]
fn relative_index_examples() {
    for l in [4, 8, 512] {
        assert_eq!(relative_index(2, 2, l).unwrap(), l);
        assert_eq!(relative_index(l - 1, 0, l).unwrap(), 1);
        assert_eq!(relative_index(0, l - 1, l).unwrap(), 2 * l - 1);
    }
    assert!(matches!(
        relative_index(4, 0, 4),
        Err(ModelError::PositionOutOfRange { .. })
    ));
}

struct AttentionFixture {
    store: ParamStore,
    params: AttentionParams,
    config: ModelConfig,
}

fn attention_fixture(
    d: usize,
    heads: usize,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> AttentionFixture {
    let mut store = ParamStore::new();
    let mut rand = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let query = store.add("q", rand(&[d, d]), true);
    let key = store.add("k", rand(&[d, d]), true);
    let value = store.add("v", rand(&[d, d]), true);
    let output = store.add("o", rand(&[d, d]), true);
    let relative = Some(store.add("p", rand(&[2 * max_len - 1, d]), true));
    let config = ModelConfig {
        hidden: d,
        heads,
        head_dim: d / heads,
        max_len,
        attention_dropout: 0.0,
        dropout: 0.0,
        ..ModelConfig::toy(24, max_len)
    };
    AttentionFixture {
        store,
        params: AttentionParams {
            query,
            key,
            value,
            output,
            relative,
        },
        config,
    }
}

fn matvec(x: &[f64], w: &Tensor, col_start: usize, cols: usize) -> Vec<f64> {
    let n = w.shape()[1];
    (col_start..col_start + cols)
        .map(|c| {
            x.iter()
                .enumerate()
                .map(|(r, xv)| xv * w.data()[r * n + c])
                .sum()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scalar-loop evaluation of the three-term score for every head, query
/// and key, reading P through `relative_index`.
fn brute_force_scores(fx: &AttentionFixture, hidden: &[f64], t: usize) -> Vec<f64> {
    let c = &fx.config;
    let (d, hd, l) = (c.hidden, c.head_dim, c.max_len);
    let get = |id| &fx.store.get(id).tensor;
    let p = get(fx.params.relative.unwrap());
    let row = |k: usize| &hidden[k * d..(k + 1) * d];
    let p_row = |r: usize| &p.data()[(r - 1) * d..r * d];
    let mut out = Vec::new();
    for h in 0..c.heads {
        let proj = |x: &[f64], w| matvec(x, get(w), h * hd, hd);
        for i in 0..t {
            for j in 0..t {
                let cq = proj(row(i), fx.params.query);
                let ck = proj(row(j), fx.params.key);
                let pk = proj(p_row(relative_index(i, j, l).unwrap()), fx.params.key);
                let pq = proj(p_row(relative_index(j, i, l).unwrap()), fx.params.query);
                out.push(
                    (dot(&cq, &ck) + dot(&cq, &pk) + dot(&pq, &ck)) / (3.0 * hd as f64).sqrt(),
                );
            }
        }
    }
    out
}

#[test]
fn attention_scores_match_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (d, heads, max_len, t) in [(2, 1, 2, 2), (4, 2, 5, 3), (6, 3, 4, 4), (4, 1, 7, 1)] {
        let fx = attention_fixture(d, heads, max_len, &mut rng);
        let hidden: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let graph = Graph::new();
        let bound = fx.store.bind(&graph, false);
        let x = graph.from_vec(&[1, t, d], hidden.clone()).unwrap();
        let out = attention(x, &bound, &fx.params, &[], &fx.config, false, &mut rng).unwrap();
        let expected = brute_force_scores(&fx, &hidden, t);
        for (a, b) in out.scores.to_vec().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn attention_two_by_two_hand_example() {
    // d = head_dim = 2, L = T = 2, identity Q/K projections.
    let mut store = ParamStore::new();
    let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let query = store.add("q", eye.clone(), true);
    let key = store.add("k", eye.clone(), true);
    let value = store.add("v", eye.clone(), true);
    let output = store.add("o", eye, true);
    // rows 1, 2, 3 of P
    let p = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let relative = Some(store.add("p", p, true));
    let params = AttentionParams {
        query,
        key,
        value,
        output,
        relative,
    };
    let config = ModelConfig {
        hidden: 2,
        heads: 1,
        head_dim: 2,
        max_len: 2,
        attention_dropout: 0.0,
        ..ModelConfig::toy(24, 2)
    };
    // x0 = (1, 2), x1 = (0, 1)
    // (i, j) = (0, 0): cc = 5, c2p = x0.P2 = 2, p2c = P2.x0 = 2 -> 9
    // (0, 1): cc = x0.x1 = 2, c2p = x0.P3 = 3, p2c = P1.x1 = 0 -> 5
    // (1, 0): cc = 2, c2p = x1.P1 = 0, p2c = P3.x0 = 3 -> 5
    // (1, 1): cc = 1, c2p = x1.P2 = 1, p2c = P2.x1 = 1 -> 3
    let expected = [9.0, 5.0, 5.0, 3.0].map(|v| v / 6f64.sqrt());
    let graph = Graph::new();
    let bound = store.bind(&graph, false);
    let x = graph
        .from_vec(&[1, 2, 2], vec![1.0, 2.0, 0.0, 1.0])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = attention(x, &bound, &params, &[], &config, false, &mut rng).unwrap();
    for (a, b) in out.scores.to_vec().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn zero_position_table_leaves_scaled_content_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut fx = attention_fixture(8, 2, 6, &mut rng);
    let p = fx.params.relative.unwrap();
    fx.store.get_mut(p).tensor.data_mut().fill(0.0);
    let hidden: Vec<f64> = (0..2 * 5 * 8)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let graph = Graph::new();
    let bound = fx.store.bind(&graph, false);
    let x = graph.from_vec(&[2, 5, 8], hidden).unwrap();
    let rel = attention(x, &bound, &fx.params, &[], &fx.config, false, &mut rng).unwrap();
    let content_params = AttentionParams {
        relative: None,
        ..fx.params
    };
    let abs = attention(x, &bound, &content_params, &[], &fx.config, false, &mut rng).unwrap();
    for (r, a) in rel.scores.to_vec().iter().zip(abs.scores.to_vec()) {
        assert!((r - a / 3f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fx = attention_fixture(4, 2, 6, &mut rng);
    let graph = Graph::new();
    let bound = fx.store.bind(&graph, false);
    let x = graph
        .from_vec(
            &[2, 4, 4],
            (0..32).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
    let mask = [false, false, true, true, false, false, false, true];
    let out = attention(x, &bound, &fx.params, &mask, &fx.config, false, &mut rng).unwrap();
    let probs = out.probs.to_vec();
    for (r, row) in probs.chunks(4).enumerate() {
        let b = r / (2 * 4);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, &p) in row.iter().enumerate() {
            if mask[b * 4 + j] {
                assert_eq!(p, 0.0);
            }
        }
    }

    let single = graph
        .from_vec(&[1, 1, 4], vec![0.3, -0.1, 0.2, 0.5])
        .unwrap();
    let out = attention(single, &bound, &fx.params, &[], &fx.config, false, &mut rng).unwrap();
    assert_eq!(out.probs.to_vec(), vec![1.0, 1.0]);

    let long = graph.from_vec(&[1, 7, 4], vec![0.0; 28]).unwrap();
    let err = attention(long, &bound, &fx.params, &[], &fx.config, false, &mut rng)
        .err()
        .unwrap();
    assert!(matches!(
        err,
        ModelError::SequenceTooLong { len: 7, max_len: 6 }
    ));
}

fn ff_fixture(w1: Vec<f64>, w2: Vec<f64>, w3: Vec<f64>) -> (ParamStore, FeedForwardParams) {
    let mut store = ParamStore::new();
    let w1 = store.add("w1", Tensor::new(&[2, 3], w1).unwrap(), true);
    let w2 = Some(store.add("w2", Tensor::new(&[2, 3], w2).unwrap(), true));
    let w3 = store.add("w3", Tensor::new(&[3, 2], w3).unwrap(), true);
    (
        store,
        FeedForwardParams {
            w1,
            w2,
            w3,
            b1: None,
            b2: None,
            b3: None,
        },
    )
}

#[test]
fn feed_forward_hand_example() {
    let w1 = vec![1.0, 0.0, -1.0, 0.5, 2.0, 1.0];
    let w2 = vec![0.0, 1.0, 1.0, 1.0, -1.0, 0.5];
    let w3 = vec![1.0, 2.0, -1.0, 0.0, 0.5, 1.0];
    let (store, params) = ff_fixture(w1, w2, w3);
    let x = [0.4, -0.2];
    // xW1 = (0.3, -0.4, -0.6), xW2 = (-0.2, 0.6, 0.3)
    let h1 = [0.3, -0.4, -0.6].map(erf_gelu);
    let gated = [h1[0] * -0.2, h1[1] * 0.6, h1[2] * 0.3];
    let geglu = [
        gated[0] - gated[1] + 0.5 * gated[2],
        2.0 * gated[0] + gated[2],
    ];
    let gelu = [h1[0] - h1[1] + 0.5 * h1[2], 2.0 * h1[0] + h1[2]];

    let graph = Graph::new();
    let bound = store.bind(&graph, false);
    let input = graph.from_vec(&[1, 1, 2], x.to_vec()).unwrap();
    for (activation, expected) in [(Activation::Geglu, geglu), (Activation::Gelu, gelu)] {
        let out = feed_forward(input, &bound, &params, activation)
            .unwrap()
            .to_vec();
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{activation}: {a} vs {b}");
        }
        let zero = graph.from_vec(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(
            feed_forward(zero, &bound, &params, activation)
                .unwrap()
                .to_vec(),
            vec![0.0, 0.0]
        );
    }
}

#[test]
fn unit_gate_reduces_geglu_to_gelu() {
    // x = (1, 0) and W2 with a row of ones: xW2 = 1 everywhere
    let (store, params) = ff_fixture(
        vec![0.3, -0.7, 1.1, 0.2, 0.4, -0.5],
        vec![1.0, 1.0, 1.0, 0.3, -0.8, 0.9],
        vec![0.5, -1.0, 0.25, 0.75, -0.3, 0.6],
    );
    let graph = Graph::new();
    let bound = store.bind(&graph, false);
    let x = graph.from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
    let geglu = feed_forward(x, &bound, &params, Activation::Geglu)
        .unwrap()
        .to_vec();
    let gelu = feed_forward(x, &bound, &params, Activation::Gelu)
        .unwrap()
        .to_vec();
    assert_eq!(geglu, gelu);
}

fn zero_branches(model: &mut Model) {
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|p| p.name.ends_with("attention.output") || p.name.ends_with("feed_forward.w3"))
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let id = model.params().find(&name).unwrap();
        model.params_mut().get_mut(id).tensor.data_mut().fill(0.0);
    }
}

#[test]
fn zeroed_branches_give_identity_except_post_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &style in NormStyle::ALL {
        let mut model = Model::init(
            config(style, Activation::Geglu, PositionEncoding::Relative),
            4,
        )
        .unwrap();
        zero_branches(&mut model);
        let layer = &model.layer_params()[0];
        let graph = Graph::new();
        let bound = model.params().bind(&graph, false);
        let data: Vec<f64> = (0..2 * 3 * 16)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let x = graph.from_vec(&[2, 3, 16], data.clone()).unwrap();
        let (out, s) =
            encode_layer(x, &bound, layer, &[], model.config(), false, &mut rng).unwrap();
        match style {
            NormStyle::Post => {
                let twice = x
                    .layer_norm(1e-5)
                    .unwrap()
                    .layer_norm(1e-5)
                    .unwrap()
                    .to_vec();
                for (a, b) in out.to_vec().iter().zip(&twice) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!(out
                    .to_vec()
                    .iter()
                    .zip(&data)
                    .any(|(a, b)| (a - b).abs() > 1e-3));
            }
            _ => {
                assert_eq!(out.to_vec(), data);
                assert!(s.to_vec().iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn forward_exposes_states_and_decomposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for style in [NormStyle::NormFormer, NormStyle::Pre] {
        let model = Model::init(
            config(style, Activation::Geglu, PositionEncoding::Relative),
            3,
        )
        .unwrap();
        let batch = random_batch(&mut rng, 2, 6, 24);
        let graph = Graph::new();
        let out = model.forward(&graph, &batch, false, &mut rng).unwrap();
        assert_eq!(out.layer_states.len(), 2);
        assert_eq!(out.mlm_logits.shape(), vec![2, 6, 24]);
        let mut sum = out.embedding.to_vec();
        for s in &out.contributions {
            for (acc, v) in sum.iter_mut().zip(s.to_vec()) {
                *acc += v;
            }
        }
        for (a, b) in sum.iter().zip(out.final_state().to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn forward_is_deterministic_without_dropout() {
    let model = Model::init(
        config(
            NormStyle::NormFormer,
            Activation::Geglu,
            PositionEncoding::Relative,
        ),
        3,
    )
    .unwrap();
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(1), 2, 5, 24);
    let run = |seed| {
        let graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model
            .forward(&graph, &batch, false, &mut rng)
            .unwrap()
            .mlm_logits
            .to_vec()
    };
    assert_eq!(run(1), run(2));
    let graph = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = model
        .forward(&graph, &batch, true, &mut rng)
        .unwrap()
        .mlm_logits
        .to_vec();
    assert_ne!(train, run(1));
}

#[test]
fn padding_only_batch_stays_finite() {
    for positions in PositionEncoding::ALL {
        let model = Model::init(
            config(NormStyle::NormFormer, Activation::Geglu, *positions),
            3,
        )
        .unwrap();
        let batch = Batch::new(vec![PAD_ID; 8], 2, 4).unwrap();
        let graph = Graph::new();
        let out = model
            .forward(&graph, &batch, false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(out.mlm_logits.to_vec().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn forward_rejects_bad_inputs() {
    let model = Model::init(
        config(
            NormStyle::NormFormer,
            Activation::Geglu,
            PositionEncoding::Relative,
        ),
        3,
    )
    .unwrap();
    let graph = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad_id = Batch::new(vec![5, 24], 1, 2).unwrap();
    assert!(matches!(
        model.forward(&graph, &bad_id, false, &mut rng),
        Err(ModelError::TokenOutOfRange { id: 24, .. })
    ));
    let long = Batch::new(vec![5; 9], 1, 9).unwrap();
    assert!(matches!(
        model.forward(&graph, &long, false, &mut rng),
        Err(ModelError::SequenceTooLong { .. })
    ));
    assert!(Batch::new(vec![5; 3], 2, 2).is_err());

    let nsp = Model::init(
        ModelConfig {
            nsp_head: NspHead::Document,
            ..model.config().clone()
        },
        3,
    )
    .unwrap();
    let batch = Batch::new(vec![5; 4], 1, 4).unwrap();
    assert!(matches!(
        nsp.forward(&graph, &batch, false, &mut rng),
        Err(ModelError::MissingSegments)
    ));
    let out = nsp
        .forward(
            &graph,
            &batch.with_segments(vec![0, 0, 1, 1]).unwrap(),
            false,
            &mut rng,
        )
        .unwrap();
    assert_eq!(out.nsp_logits.unwrap().shape(), vec![1, 2]);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let c = config(
        NormStyle::NormFormer,
        Activation::Geglu,
        PositionEncoding::Relative,
    );
    let model = Model::init(c, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = random_batch(&mut rng, 1, 8, 24);
    let targets: Vec<Option<usize>> = (0..8)
        .map(|i| (i % 3 != 1).then(|| rng.random_range(5..24)))
        .collect();
    let report = model.gradient_check(&batch, &targets, 1e-5).unwrap();
    assert_eq!(report.checked, model.parameter_count());
    assert!(report.max_error <= 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let c = ModelConfig {
        nsp_head: NspHead::Order,
        ff_biases: true,
        ..config(NormStyle::Pre, Activation::Gelu, PositionEncoding::Absolute)
    };
    let model = Model::init(c, 21).unwrap();
    let mut checkpoint = model.to_checkpoint();
    checkpoint.meta.push(("step".into(), "12".into()));
    let path = dir.path().join("model.ckpt");
    checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, checkpoint);
    assert_eq!(loaded.meta("step"), Some("12"));
    assert_eq!(loaded.digest().unwrap(), checkpoint.digest().unwrap());
    let restored = Model::from_checkpoint(&loaded).unwrap();
    assert_eq!(restored, model);

    let batch = Batch::new(vec![5, 6, 7, 8], 1, 4)
        .unwrap()
        .with_segments(vec![0, 0, 1, 1])
        .unwrap();
    let logits = |m: &Model| {
        let graph = Graph::new();
        let out = m
            .forward(&graph, &batch, false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        out.mlm_logits
            .to_vec()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(logits(&model), logits(&restored));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Model::init(
        config(
            NormStyle::NormFormer,
            Activation::Geglu,
            PositionEncoding::Relative,
        ),
        1,
    )
    .unwrap();
    let bytes = model.to_checkpoint().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint\n").is_err());
    let text = String::from_utf8_lossy(&bytes[..200])
        .replace("ltgbert-checkpoint 1", "ltgbert-checkpoint 9");
    assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
}
