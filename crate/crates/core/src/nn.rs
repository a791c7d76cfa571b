//! Parameterized primitive layers shared by every architecture.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GeluKind, Gradients, Graph, Real, Tensor, Var};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Index of a parameter within a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::ZERO);
        }
    }

    /// Record every parameter as a leaf of `graph`.
    pub fn attach(&self, graph: &Graph<T>) -> Bindings {
        Bindings(
            self.params
                .iter()
                .enumerate()
                .map(|(i, p)| graph.param(i, p.value.clone()))
                .collect(),
        )
    }

    /// Overwrite every `grad` with the result of a backward sweep. Parameters
    /// the loss never reached get zeros.
    pub fn load_grads(&mut self, bindings: &Bindings, grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.0) {
            p.grad = grads.wrt(v);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Graph variables for a store's parameters, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Weight ~ U(−1/√fan_in, 1/√fan_in).
pub fn uniform_fan_in<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, &[in_dim, out_dim], in_dim),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// `x · W + b` along the last axis.
    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let last = g.shape(x).last().copied();
        if last != Some(self.in_dim) {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?} does not end in in_dim {}",
                    g.shape(x),
                    self.in_dim
                ),
            ));
        }
        let y = g.matmul(x, p.get(self.weight))?;
        g.add(y, p.get(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta, dim })
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        g.layernorm(x, p.get(self.gamma), p.get(self.beta), LAYERNORM_EPS)
    }
}

/// Two-layer perceptron `fc2(GELU(fc1(x)))`; residual wiring is the caller's.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub gelu: GeluKind,
}

impl MlpBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        gelu: GeluKind,
    ) -> Result<Self> {
        Ok(Self {
            fc1: LinearLayer::new(store, rng, &format!("{name}.fc1"), dim, hidden)?,
            fc2: LinearLayer::new(store, rng, &format!("{name}.fc2"), hidden, dim)?,
            gelu,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h, self.gelu);
        self.fc2.forward(g, p, h)
    }
}

/// Linear embedding of flattened `ps×ps×3` patches.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub projection: LinearLayer,
    pub ps: usize,
}

impl PatchEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ps: usize,
        d_model: usize,
    ) -> Result<Self> {
        check_patch_size(ps)?;
        Ok(Self {
            projection: LinearLayer::new(store, rng, name, ps * ps * CHANNELS, d_model)?,
            ps,
        })
    }

    pub fn n_tokens(&self) -> usize {
        (IMAGE_SIDE / self.ps).pow(2)
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, images: &Tensor<T>) -> Result<Var> {
        let tokens = g.constant(patchify(images, self.ps)?);
        self.projection.forward(g, p, tokens)
    }
}

pub fn check_patch_size(ps: usize) -> Result<()> {
    if ps == 0 || !IMAGE_SIDE.is_multiple_of(ps) {
        return Err(Error::Config(format!(
            "patch size {ps} does not divide the image side {IMAGE_SIDE}"
        )));
    }
    Ok(())
}

/// Cut `[batch, 3, 32, 32]` images into `[batch, (32/ps)², ps·ps·3]` tokens.
///
/// Patches are numbered row-major over the patch grid. Inside a token the
/// features run channel-major, then pixel row, then pixel column:
/// feature `c·ps² + r·ps + col` holds `image[c, pr·ps + r, pc·ps + col]`.
pub fn patchify<T: Real>(images: &Tensor<T>, ps: usize) -> Result<Tensor<T>> {
    check_patch_size(ps)?;
    let &[batch, c, h, w] = images.shape() else {
        return Err(Error::shape(
            "patchify",
            format!("expected [batch, 3, 32, 32], got {:?}", images.shape()),
        ));
    };
    if c != CHANNELS || h != IMAGE_SIDE || w != IMAGE_SIDE {
        return Err(Error::shape(
            "patchify",
            format!("expected [batch, 3, 32, 32], got {:?}", images.shape()),
        ));
    }
    let grid = IMAGE_SIDE / ps;
    let feat = ps * ps * CHANNELS;
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        for pr in 0..grid {
            for pc in 0..grid {
                for ch in 0..CHANNELS {
                    for r in 0..ps {
                        let row = pr * ps + r;
                        let start = ((b * CHANNELS + ch) * IMAGE_SIDE + row) * IMAGE_SIDE + pc * ps;
                        out.extend_from_slice(&src[start..start + ps]);
                    }
                }
            }
        }
    }
    Tensor::new(&[batch, grid * grid, feat], out)
}
