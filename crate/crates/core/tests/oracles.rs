mod common;

use activator_lab::blocks::{AttentionBlock, GegluBlock};
use activator_lab::nn::{LayerNormLayer, LinearLayer, MlpBlock, ParamStore};
use activator_lab::{Arch, ClassifierModel, GeluKind, Graph, ModelConfig, Tensor};
use common::*;

const TOL: f64 = 1e-10;

#[test]
fn attention_three_tokens_single_head() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let a = AttentionBlock::new(&mut store, &mut r, "attn", 4, 1).unwrap();
    randomize(&mut store, &mut r);
    let x = random_tensor(&mut r, &[1, 3, 4]);
    let got = run(&x, |g, v| a.forward(g, &store.attach(g), v));
    assert!(max_abs_diff(&got, &attention_of(&store, &a, x.data(), 1, 3)) < TOL);
}

#[test]
fn attention_weights_rows_sum_to_one() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let a = AttentionBlock::new(&mut store, &mut r, "attn", 6, 3).unwrap();
    randomize(&mut store, &mut r);
    let g = Graph::inference();
    let x = g.constant(random_tensor(&mut r, &[2, 5, 6]));
    let (_, w) = a.forward_with_weights(&g, &store.attach(&g), x).unwrap();
    assert_eq!(g.shape(w), vec![2, 3, 5, 5]);
    for row in g.value(w).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn geglu_two_tokens_hidden_eight() {
    for stream_norm in [false, true] {
        let mut r = rng(13);
        let mut store = ParamStore::new();
        let gb = GegluBlock::new(&mut store, &mut r, "g", 4, 8, stream_norm, GeluKind::Exact).unwrap();
        randomize(&mut store, &mut r);
        let x = random_tensor(&mut r, &[1, 2, 4]);
        let got = run(&x, |g, v| gb.forward(g, &store.attach(g), v));
        assert!(max_abs_diff(&got, &geglu_of(&store, &gb, x.data(), 2)) < TOL);
    }
}

#[test]
fn random_miniatures_match_loops() {
    for (name, err) in oracle_sweep(25, 7) {
        assert!(err < TOL, "{name}: {err:e}");
    }
}

#[test]
fn linear_layernorm_mlp_match_loops() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let lin = LinearLayer::new(&mut store, &mut r, "lin", 5, 3).unwrap();
    let ln = LayerNormLayer::new(&mut store, "ln", 5).unwrap();
    let mlp = MlpBlock::new(&mut store, &mut r, "mlp", 5, 7, GeluKind::Exact).unwrap();
    randomize(&mut store, &mut r);
    let x = random_tensor(&mut r, &[2, 4, 5]);
    let got = run(&x, |g, v| lin.forward(g, &store.attach(g), v));
    assert!(max_abs_diff(&got, &linear_of(&store, &lin, x.data(), 8)) < TOL);
    let got = run(&x, |g, v| ln.forward(g, &store.attach(g), v));
    assert!(max_abs_diff(&got, &layernorm_of(&store, &ln, x.data(), 8)) < TOL);
    let got = run(&x, |g, v| mlp.forward(g, &store.attach(g), v));
    assert!(max_abs_diff(&got, &mlp_of(&store, &mlp, x.data(), 8)) < TOL);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(15);
    for (m, k, n) in [(1, 1, 1), (3, 4, 5), (7, 2, 9)] {
        let a = random_tensor(&mut r, &[2, m, k]);
        let b = random_tensor(&mut r, &[2, k, n]);
        let g = Graph::inference();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let mut want = vec![0.0; 2 * m * n];
        for bi in 0..2 {
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        want[(bi * m + i) * n + j] += a.data()[(bi * m + i) * k + p] * b.data()[(bi * k + p) * n + j];
                    }
                }
            }
        }
        assert!(max_abs_diff(g.value(c).data(), &want) < TOL);
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let mut r = rng(16);
    let logits = random_tensor(&mut r, &[4, 6]);
    let labels = [0, 5, 2, 2];
    let g = Graph::inference();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, &labels).unwrap();
    assert!((g.value(loss).item() - cross_entropy(logits.data(), &labels, 6)).abs() < TOL);
}

#[test]
fn gelu_reference_points() {
    // GELU(1) = Φ(1) ≈ 0.8413447460685429
    let x = Tensor::from_f64(&[3], &[0.0, 1.0, -1.0]).unwrap();
    let got = run(&x, |g, v| Ok(g.gelu(v, GeluKind::Exact)));
    assert_eq!(got[0], 0.0);
    assert!((got[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
    assert!((got[2] + 0.158_655_253_931_457_05).abs() < 1e-12);
}

#[test]
fn whole_model_logits_match_composed_oracle() {
    // Every architecture, assembled from the layer oracles above.
    for arch in Arch::ALL {
        let config = ModelConfig::miniature(arch);
        let mut model = ClassifierModel::<f64>::build(&config).unwrap();
        let mut r = rng(17);
        randomize(&mut model.store, &mut r);
        let images = random_tensor(&mut r, &[2, 3, 32, 32]);
        let got = model.logits(&images).unwrap();
        let want = model_oracle(&model, &images);
        assert!(max_abs_diff(got.data(), &want) < 1e-9, "{arch}");
    }
}

fn model_oracle(m: &ClassifierModel<f64>, images: &Tensor<f64>) -> Vec<f64> {
    use activator_lab::models::Block;
    let s = &m.store;
    let c = &m.config;
    let (b, n, d, ps) = (images.shape()[0], c.n_tokens(), c.d_model, c.ps);
    let grid = 32 / ps;
    let pd = ps * ps * 3;
    let mut patches = vec![0.0; b * n * pd];
    for bi in 0..b {
        for pr in 0..grid {
            for pc in 0..grid {
                for ch in 0..3 {
                    for rr in 0..ps {
                        for cc in 0..ps {
                            let src = ((bi * 3 + ch) * 32 + pr * ps + rr) * 32 + pc * ps + cc;
                            let dst = (bi * n + pr * grid + pc) * pd + ch * ps * ps + rr * ps + cc;
                            patches[dst] = images.data()[src];
                        }
                    }
                }
            }
        }
    }
    let rows = b * n;
    let mut x = linear_of(s, &m.patch_embed.projection, &patches, rows);
    if let Some(pos) = m.pos_embed {
        let pe = s.get(pos).value.data();
        for (i, v) in x.iter_mut().enumerate() {
            *v += pe[i % (n * d)];
        }
    }
    let add = |a: &[f64], b: Vec<f64>| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    for block in &m.blocks {
        x = match block {
            Block::Vit { norm1, attention, norm2, mlp } => {
                let y = add(&x, attention_of(s, attention, &layernorm_of(s, norm1, &x, rows), b, n));
                add(&y, mlp_of(s, mlp, &layernorm_of(s, norm2, &y, rows), rows))
            }
            Block::Mixer { norm1, mixing, norm2 } => {
                let y = add(&x, token_mix_of(s, mixing, &layernorm_of(s, norm1, &x, rows), b, n, d));
                add(&y, mlp_of(s, &mixing.channel_mlp, &layernorm_of(s, norm2, &y, rows), rows))
            }
            Block::Synthesizer { norm1, mixer, norm2, mlp } => {
                let y = add(&x, synthesizer_of(s, mixer, &layernorm_of(s, norm1, &x, rows), rows));
                add(&y, mlp_of(s, mlp, &layernorm_of(s, norm2, &y, rows), rows))
            }
            Block::Activator { norm1, geglu, norm2, mlp } => {
                let y = add(&x, geglu_of(s, geglu, &layernorm_of(s, norm1, &x, rows), rows));
                add(&y, mlp_of(s, mlp, &layernorm_of(s, norm2, &y, rows), rows))
            }
            Block::GegluOnly { norm, geglu } => add(&x, geglu_of(s, geglu, &layernorm_of(s, norm, &x, rows), rows)),
        };
    }
    if let Some(fnorm) = &m.final_norm {
        x = layernorm_of(s, fnorm, &x, rows);
    }
    let mut pooled = vec![0.0; b * d];
    for bi in 0..b {
        for t in 0..n {
            for j in 0..d {
                pooled[bi * d + j] += x[(bi * n + t) * d + j] / n as f64;
            }
        }
    }
    linear_of(s, &m.head, &pooled, b)
}
