//! Brute-force reference implementations shared by the integration tests and
//! the acceptance harness. Everything here is written with explicit loops
//! over plain `Vec<f64>` so it shares no code path with the graph ops.

#![allow(dead_code)]

use activator_lab::blocks::{AttentionBlock, GegluBlock, MixerBlockPair, SynthesizerMixer};
use activator_lab::nn::{LayerNormLayer, LinearLayer, MlpBlock, ParamStore, LAYERNORM_EPS};
use activator_lab::{Arch, ClassifierModel, GeluKind, Graph, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, random_vec(rng, n)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Overwrite every parameter with fresh random values (non-zero biases,
/// non-unit gains) so that no term can silently vanish.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for w in p.value.data_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `rows × in` times `in × out` plus bias.
pub fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b[o];
            for i in 0..din {
                acc += x[r * din + i] * w[i * dout + o];
            }
            y[r * dout + o] = acc;
        }
    }
    y
}

pub fn layernorm(x: &[f64], rows: usize, d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            y[r * d + j] = (row[j] - mean) / (var + LAYERNORM_EPS).sqrt() * gamma[j] + beta[j];
        }
    }
    y
}

pub fn linear_of(store: &ParamStore<f64>, l: &LinearLayer, x: &[f64], rows: usize) -> Vec<f64> {
    linear(
        x,
        rows,
        store.get(l.weight).value.data(),
        store.get(l.bias).value.data(),
        l.in_dim,
        l.out_dim,
    )
}

pub fn layernorm_of(store: &ParamStore<f64>, l: &LayerNormLayer, x: &[f64], rows: usize) -> Vec<f64> {
    layernorm(x, rows, l.dim, store.get(l.gamma).value.data(), store.get(l.beta).value.data())
}

pub fn mlp_of(store: &ParamStore<f64>, m: &MlpBlock, x: &[f64], rows: usize) -> Vec<f64> {
    let h: Vec<f64> = linear_of(store, &m.fc1, x, rows).into_iter().map(gelu).collect();
    linear_of(store, &m.fc2, &h, rows)
}

/// Multi-head attention, one (query, key) pair at a time.
pub fn attention_of(store: &ParamStore<f64>, a: &AttentionBlock, x: &[f64], b: usize, n: usize) -> Vec<f64> {
    let d = a.wq.in_dim;
    let q = linear_of(store, &a.wq, x, b * n);
    let k = linear_of(store, &a.wk, x, b * n);
    let v = linear_of(store, &a.wv, x, b * n);
    let dh = a.d_head;
    let mut ctx = vec![0.0; b * n * d];
    for bi in 0..b {
        for h in 0..a.heads {
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for j in 0..n {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[(bi * n + i) * d + h * dh + c] * k[(bi * n + j) * d + h * dh + c];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..n {
                    let w = (scores[j] - m).exp() / z;
                    for c in 0..dh {
                        ctx[(bi * n + i) * d + h * dh + c] += w * v[(bi * n + j) * d + h * dh + c];
                    }
                }
            }
        }
    }
    linear_of(store, &a.wo, &ctx, b * n)
}

/// linear → (norm) value stream, linear → GELU → (norm) gate stream, product, linear.
pub fn geglu_of(store: &ParamStore<f64>, gb: &GegluBlock, x: &[f64], rows: usize) -> Vec<f64> {
    let hidden = gb.up_gate.out_dim;
    let mut value = linear_of(store, &gb.up_value, x, rows);
    let mut gate: Vec<f64> = linear_of(store, &gb.up_gate, x, rows).into_iter().map(gelu).collect();
    if let Some((nv, ng)) = &gb.stream_norms {
        value = layernorm_of(store, nv, &value, rows);
        gate = layernorm_of(store, ng, &gate, rows);
    }
    let prod: Vec<f64> = value.iter().zip(&gate).map(|(a, b)| a * b).collect();
    assert_eq!(prod.len(), rows * hidden);
    linear_of(store, &gb.down, &prod, rows)
}

/// Token MLP applied per (batch, channel) column along the token axis.
pub fn token_mix_of(store: &ParamStore<f64>, m: &MixerBlockPair, x: &[f64], b: usize, n: usize, d: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * n * d];
    for bi in 0..b {
        for c in 0..d {
            let col: Vec<f64> = (0..n).map(|t| x[(bi * n + t) * d + c]).collect();
            let out = mlp_of(store, &m.token_mlp, &col, 1);
            for t in 0..n {
                y[(bi * n + t) * d + c] = out[t];
            }
        }
    }
    y
}

pub fn synthesizer_of(store: &ParamStore<f64>, s: &SynthesizerMixer, x: &[f64], rows: usize) -> Vec<f64> {
    linear_of(store, &s.proj, x, rows)
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &[f64], labels: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = &logits[r * c..(r + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += z.ln() - row[l];
    }
    total / labels.len() as f64
}

/// Run a graph forward on `x` and return the output values.
pub fn run<F>(x: &Tensor<f64>, f: F) -> Vec<f64>
where
    F: FnOnce(&Graph<f64>, activator_lab::Var) -> activator_lab::Result<activator_lab::Var>,
{
    let g = Graph::inference();
    let v = g.constant(x.clone());
    let out = f(&g, v).unwrap();
    let data = g.value(out).data().to_vec();
    data
}

/// A random miniature block configuration.
#[derive(Clone, Copy, Debug)]
pub struct Mini {
    pub batch: usize,
    pub tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub hidden: usize,
    pub stream_norm: bool,
}

impl Mini {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let heads = rng.gen_range(1..=3);
        Self {
            batch: rng.gen_range(1..=3),
            tokens: rng.gen_range(1..=6),
            d_model: heads * rng.gen_range(1..=3),
            heads,
            hidden: rng.gen_range(1..=9),
            stream_norm: rng.gen_bool(0.5),
        }
    }
}

/// Outcome of one oracle comparison: graph vs. loops.
pub fn compare_attention(m: Mini, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let a = AttentionBlock::new(&mut store, &mut r, "attn", m.d_model, m.heads).unwrap();
    randomize(&mut store, &mut r);
    let x = random_tensor(&mut r, &[m.batch, m.tokens, m.d_model]);
    let got = run(&x, |g, v| a.forward(g, &store.attach(g), v));
    max_abs_diff(&got, &attention_of(&store, &a, x.data(), m.batch, m.tokens))
}

pub fn compare_geglu(m: Mini, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let gb = GegluBlock::new(&mut store, &mut r, "geglu", m.d_model, m.hidden, m.stream_norm, GeluKind::Exact).unwrap();
    randomize(&mut store, &mut r);
    let x = random_tensor(&mut r, &[m.batch, m.tokens, m.d_model]);
    let got = run(&x, |g, v| gb.forward(g, &store.attach(g), v));
    max_abs_diff(&got, &geglu_of(&store, &gb, x.data(), m.batch * m.tokens))
}

pub fn compare_token_mix(m: Mini, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mp = MixerBlockPair::new(&mut store, &mut r, "mix", m.tokens, m.hidden, m.d_model, m.hidden, GeluKind::Exact)
        .unwrap();
    randomize(&mut store, &mut r);
    let x = random_tensor(&mut r, &[m.batch, m.tokens, m.d_model]);
    let got = run(&x, |g, v| mp.token_mix_forward(g, &store.attach(g), v));
    max_abs_diff(&got, &token_mix_of(&store, &mp, x.data(), m.batch, m.tokens, m.d_model))
}

pub fn compare_synthesizer(m: Mini, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let s = SynthesizerMixer::new(&mut store, &mut r, "synth", m.d_model).unwrap();
    randomize(&mut store, &mut r);
    let x = random_tensor(&mut r, &[m.batch, m.tokens, m.d_model]);
    let got = run(&x, |g, v| s.forward(g, &store.attach(g), v));
    max_abs_diff(&got, &synthesizer_of(&store, &s, x.data(), m.batch * m.tokens))
}

/// `n` random miniatures per block kind; returns the worst error per kind.
pub fn oracle_sweep(n: usize, seed: u64) -> [(&'static str, f64); 4] {
    let mut r = rng(seed);
    let mut worst = [("attention", 0.0), ("geglu", 0.0), ("token_mix", 0.0), ("synthesizer", 0.0)];
    let compares: [fn(Mini, u64) -> f64; 4] = [compare_attention, compare_geglu, compare_token_mix, compare_synthesizer];
    for i in 0..n {
        let m = Mini::random(&mut r);
        for (slot, cmp) in worst.iter_mut().zip(compares) {
            slot.1 = f64::max(slot.1, cmp(m, seed.wrapping_mul(1000) + i as u64));
        }
    }
    worst
}

/// Permute the token axis of `[b, n, d]` data: output token `i` = input token `perm[i]`.
pub fn permute_tokens(x: &[f64], b: usize, n: usize, d: usize, perm: &[usize]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for (i, &src) in perm.iter().enumerate() {
            y[(bi * n + i) * d..(bi * n + i + 1) * d].copy_from_slice(&x[(bi * n + src) * d..(bi * n + src + 1) * d]);
        }
    }
    y
}

/// Token-level model pieces: the blocks of a model built without positional
/// embeddings, applied directly to a `[b, n, d]` token tensor.
pub fn blocks_forward(model: &ClassifierModel<f64>, x: &Tensor<f64>) -> Vec<f64> {
    run(x, |g, v| {
        let p = model.attach(g);
        model.blocks.iter().try_fold(v, |h, blk| blk.forward(g, &p, h))
    })
}

pub fn token_model(arch: Arch, seed: u64) -> ClassifierModel<f64> {
    let config = ModelConfig {
        pos_embed: false,
        seed,
        ..ModelConfig::miniature(arch)
    };
    let mut m = ClassifierModel::build(&config).unwrap();
    randomize(&mut m.store, &mut rng(seed + 100));
    m
}

/// Cyclic shift: a permutation with no fixed point.
pub fn shift(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) % n).collect()
}

pub fn equivariance_gap(arch: Arch, seed: u64) -> f64 {
    let m = token_model(arch, seed);
    let (b, n, d) = (2, m.config.n_tokens(), m.config.d_model);
    let x = random_tensor(&mut rng(seed), &[b, n, d]);
    let perm = shift(n);
    let xp = Tensor::new(&[b, n, d], permute_tokens(x.data(), b, n, d, &perm)).unwrap();
    let y = blocks_forward(&m, &x);
    let yp = blocks_forward(&m, &xp);
    max_abs_diff(&permute_tokens(&y, b, n, d, &perm), &yp)
}

/// Perturb token 0 and check whether any other token's output moves.
pub fn leaks_across_tokens(arch: Arch) -> bool {
    let m = token_model(arch, 5);
    let (n, d) = (m.config.n_tokens(), m.config.d_model);
    let x = random_tensor(&mut rng(6), &[1, n, d]);
    let mut x2 = x.clone();
    x2.data_mut()[0] += 0.5;
    let (y, y2) = (blocks_forward(&m, &x), blocks_forward(&m, &x2));
    max_abs_diff(&y[d..], &y2[d..]) > 1e-12
}

