//! Token-processing units: multi-head attention, the GEGLU gated MLP, the
//! mixer's token/channel MLP pair and the synthesizer's linear map.
//!
//! Every block here maps `[batch, tokens, d_model]` to the same shape and
//! leaves pre-normalization and the residual add to the model.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Bindings, LayerNormLayer, LinearLayer, MlpBlock, ParamStore};
use crate::tensor::{GeluKind, Graph, Real, Var};

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub heads: usize,
    pub d_head: usize,
}

impl AttentionBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: LinearLayer::new(store, rng, &format!("{name}.wq"), d_model, d_model)?,
            wk: LinearLayer::new(store, rng, &format!("{name}.wk"), d_model, d_model)?,
            wv: LinearLayer::new(store, rng, &format!("{name}.wv"), d_model, d_model)?,
            wo: LinearLayer::new(store, rng, &format!("{name}.wo"), d_model, d_model)?,
            heads,
            d_head: d_model / heads,
        })
    }

    pub fn param_count(&self) -> usize {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .map(|l| l.param_count())
            .sum()
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        self.forward_with_weights(g, p, x).map(|(out, _)| out)
    }

    /// Also returns the attention weights `[batch, heads, tokens, tokens]`.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bindings,
        x: Var,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x);
        let &[b, n, d] = shape.as_slice() else {
            return Err(Error::shape(
                "attention",
                format!("expected [batch, tokens, d_model], got {shape:?}"),
            ));
        };
        let (h, dh) = (self.heads, self.d_head);
        let split = |v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, n, h, dh])?;
            g.permute(v, &[0, 2, 1, 3])
        };
        let q = split(self.wq.forward(g, p, x)?)?;
        let k = split(self.wk.forward(g, p, x)?)?;
        let v = split(self.wv.forward(g, p, x)?)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let weights = g.softmax(scores, 3)?;
        let mixed = g.matmul(weights, v)?;
        let merged = g.permute(mixed, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, &[b, n, d])?;
        Ok((self.wo.forward(g, p, merged)?, weights))
    }
}

/// Gated MLP: `down(P1 ⊙ P2)` with `P1 = norm(up_value(x))` and
/// `P2 = norm(GELU(up_gate(x)))`.
///
/// The hidden width is used in full (no 2/3 shrink). The two stream norms
/// exist only when `stream_norm` is enabled.
#[derive(Clone, Debug)]
pub struct GegluBlock {
    pub up_gate: LinearLayer,
    pub up_value: LinearLayer,
    pub down: LinearLayer,
    pub stream_norms: Option<(LayerNormLayer, LayerNormLayer)>,
    pub gelu: GeluKind,
}

impl GegluBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_hidden: usize,
        stream_norm: bool,
        gelu: GeluKind,
    ) -> Result<Self> {
        let up_value = LinearLayer::new(store, rng, &format!("{name}.up_value"), d_model, d_hidden)?;
        let up_gate = LinearLayer::new(store, rng, &format!("{name}.up_gate"), d_model, d_hidden)?;
        let stream_norms = if stream_norm {
            Some((
                LayerNormLayer::new(store, &format!("{name}.norm_value"), d_hidden)?,
                LayerNormLayer::new(store, &format!("{name}.norm_gate"), d_hidden)?,
            ))
        } else {
            None
        };
        let down = LinearLayer::new(store, rng, &format!("{name}.down"), d_hidden, d_model)?;
        Ok(Self {
            up_gate,
            up_value,
            down,
            stream_norms,
            gelu,
        })
    }

    pub fn d_hidden(&self) -> usize {
        self.up_gate.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.up_gate.param_count()
            + self.up_value.param_count()
            + self.down.param_count()
            + self
                .stream_norms
                .as_ref()
                .map_or(0, |(a, b)| a.param_count() + b.param_count())
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, x_normed: Var) -> Result<Var> {
        let value = self.up_value.forward(g, p, x_normed)?;
        let gate = self.up_gate.forward(g, p, x_normed)?;
        let gate = g.gelu(gate, self.gelu);
        let (p1, p2) = match &self.stream_norms {
            Some((norm_value, norm_gate)) => (
                norm_value.forward(g, p, value)?,
                norm_gate.forward(g, p, gate)?,
            ),
            None => (value, gate),
        };
        let gated = g.mul(p1, p2)?;
        self.down.forward(g, p, gated)
    }
}

/// Token-mixing MLP (over the token axis) and channel MLP (over features).
#[derive(Clone, Debug)]
pub struct MixerBlockPair {
    pub token_mlp: MlpBlock,
    pub channel_mlp: MlpBlock,
    pub n_tokens: usize,
}

impl MixerBlockPair {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        n_tokens: usize,
        d_token_hidden: usize,
        d_model: usize,
        d_mlp: usize,
        gelu: GeluKind,
    ) -> Result<Self> {
        Ok(Self {
            token_mlp: MlpBlock::new(store, rng, &format!("{name}.token_mlp"), n_tokens, d_token_hidden, gelu)?,
            channel_mlp: MlpBlock::new(store, rng, &format!("{name}.channel_mlp"), d_model, d_mlp, gelu)?,
            n_tokens,
        })
    }

    pub fn param_count(&self) -> usize {
        self.token_mlp.param_count() + self.channel_mlp.param_count()
    }

    /// `Transpose(MLP(Transpose(x)))` over the token axis.
    pub fn token_mix_forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, x_normed: Var) -> Result<Var> {
        let shape = g.shape(x_normed);
        if shape.len() != 3 || shape[1] != self.n_tokens {
            return Err(Error::shape(
                "token_mix",
                format!(
                    "token mixer built for {} tokens, got input {shape:?}",
                    self.n_tokens
                ),
            ));
        }
        let t = g.transpose(x_normed)?;
        let t = self.token_mlp.forward(g, p, t)?;
        g.transpose(t)
    }

    pub fn channel_mix_forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, y_normed: Var) -> Result<Var> {
        self.channel_mlp.forward(g, p, y_normed)
    }
}

/// Token-local affine map on the channel axis.
#[derive(Clone, Debug)]
pub struct SynthesizerMixer {
    pub proj: LinearLayer,
}

impl SynthesizerMixer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: LinearLayer::new(store, rng, &format!("{name}.proj"), d_model, d_model)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, x_normed: Var) -> Result<Var> {
        self.proj.forward(g, p, x_normed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn setup() -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(5))
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let (mut s, mut r) = setup();
        assert!(matches!(
            AttentionBlock::new(&mut s, &mut r, "a", 6, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_identical_tokens_is_uniform() {
        let (mut s, mut r) = setup();
        let a = AttentionBlock::new(&mut s, &mut r, "a", 8, 2).unwrap();
        let tok = rand_input(&[8], 1);
        let x = Tensor::from_fn(&[1, 5, 8], |i| tok.data()[i % 8]);
        let g = Graph::new();
        let p = s.attach(&g);
        let (out, w) = a.forward_with_weights(&g, &p, g.constant(x.clone())).unwrap();
        assert!(g.value(w).data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        // wo(wv(token)) for the shared token
        let single = g.constant(Tensor::new(&[1, 1, 8], tok.data().to_vec()).unwrap());
        let expect = a.wo.forward(&g, &p, a.wv.forward(&g, &p, single).unwrap()).unwrap();
        let expect = g.value(expect).clone();
        for t in 0..5 {
            for c in 0..8 {
                assert!((g.value(out).at(&[0, t, c]) - expect.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_token() {
        let (mut s, mut r) = setup();
        let a = AttentionBlock::new(&mut s, &mut r, "a", 4, 1).unwrap();
        let g = Graph::new();
        let p = s.attach(&g);
        let x = g.constant(rand_input(&[2, 1, 4], 3));
        let (out, w) = a.forward_with_weights(&g, &p, x).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 1.0));
        let expect = a.wo.forward(&g, &p, a.wv.forward(&g, &p, x).unwrap()).unwrap();
        for (u, v) in g.value(out).data().iter().zip(g.value(expect).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn geglu_closed_gate_outputs_bias() {
        let (mut s, mut r) = setup();
        let blk = GegluBlock::new(&mut s, &mut r, "g", 4, 8, false, GeluKind::Exact).unwrap();
        // gate weights zero, bias −10 → GELU(−10) ≈ 0
        s.get_mut(blk.up_gate.weight).value = Tensor::zeros(&[4, 8]);
        s.get_mut(blk.up_gate.bias).value = Tensor::full(&[8], -10.0);
        s.get_mut(blk.down.bias).value = Tensor::from_fn(&[4], |i| i as f64 * 0.3);
        let g = Graph::new();
        let p = s.attach(&g);
        let y = blk.forward(&g, &p, g.constant(rand_input(&[1, 3, 4], 4))).unwrap();
        for t in 0..3 {
            for c in 0..4 {
                assert!((g.value(y).at(&[0, t, c]) - c as f64 * 0.3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn geglu_open_gate_passes_through() {
        let (mut s, mut r) = setup();
        let blk = GegluBlock::new(&mut s, &mut r, "g", 4, 8, false, GeluKind::Exact).unwrap();
        s.get_mut(blk.up_gate.weight).value = Tensor::zeros(&[4, 8]);
        s.get_mut(blk.up_gate.bias).value = Tensor::full(&[8], 10.0);
        let g = Graph::new();
        let p = s.attach(&g);
        let x = g.constant(rand_input(&[1, 3, 4], 6));
        let y = blk.forward(&g, &p, x).unwrap();
        // down(up_value(x) * 10)
        let v = blk.up_value.forward(&g, &p, x).unwrap();
        let v = g.scale(v, 10.0);
        let expect = blk.down.forward(&g, &p, v).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn geglu_stream_norm_adds_parameters() {
        let (mut s, mut r) = setup();
        let with = GegluBlock::new(&mut s, &mut r, "a", 4, 8, true, GeluKind::Exact).unwrap();
        let without = GegluBlock::new(&mut s, &mut r, "b", 4, 8, false, GeluKind::Exact).unwrap();
        assert_eq!(with.param_count() - without.param_count(), 4 * 8);
        assert_eq!(with.d_hidden(), 8);
    }

    #[test]
    fn token_mix_identity() {
        let (mut s, mut r) = setup();
        let pair = MixerBlockPair::new(&mut s, &mut r, "m", 3, 3, 4, 8, GeluKind::Exact).unwrap();
        // identity-like token MLP: fc1 = I, fc2 = I applied to large positive inputs
        s.get_mut(pair.token_mlp.fc1.weight).value = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        s.get_mut(pair.token_mlp.fc2.weight).value = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = rand_input(&[2, 3, 4], 8).map(|v| v + 20.0);
        let g = Graph::new();
        let p = s.attach(&g);
        let y = pair.token_mix_forward(&g, &p, g.constant(x.clone())).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let wrong = g.constant(rand_input(&[1, 4, 4], 1));
        assert!(pair.token_mix_forward(&g, &p, wrong).is_err());
    }

    #[test]
    fn synthesizer_zero_weight_gives_bias() {
        let (mut s, mut r) = setup();
        let m = SynthesizerMixer::new(&mut s, &mut r, "s", 4).unwrap();
        s.get_mut(m.proj.weight).value = Tensor::zeros(&[4, 4]);
        s.get_mut(m.proj.bias).value = Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Graph::new();
        let p = s.attach(&g);
        let y = m.forward(&g, &p, g.constant(rand_input(&[1, 2, 4], 2))).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }
}
