//! The five classifiers: ViT, MLP-Mixer, Synthesizer, Activator and the
//! GEGLU-only Activator.
//!
//! All share the same skeleton: patchify → linear embed → optional learned
//! positional embedding → `n_blocks` pre-norm residual blocks → optional final
//! LayerNorm → mean over tokens → linear head. Only the block body differs.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionBlock, GegluBlock, MixerBlockPair, SynthesizerMixer};
use crate::error::{Error, Result};
use crate::nn::{
    check_patch_size, uniform_fan_in, Bindings, LayerNormLayer, LinearLayer, MlpBlock, ParamId,
    ParamStore, PatchEmbed, CHANNELS, IMAGE_SIDE,
};
use crate::tensor::{GeluKind, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vit,
    Mixer,
    Synthesizer,
    Activator,
    ActivatorGegluOnly,
}

impl Arch {
    pub const ALL: [Arch; 5] = [
        Arch::Vit,
        Arch::Mixer,
        Arch::Synthesizer,
        Arch::Activator,
        Arch::ActivatorGegluOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Vit => "vit",
            Arch::Mixer => "mixer",
            Arch::Synthesizer => "synthesizer",
            Arch::Activator => "activator",
            Arch::ActivatorGegluOnly => "activator_geglu_only",
        }
    }

    /// Stable numeric tag used in checkpoint headers.
    pub fn tag(self) -> u32 {
        match self {
            Arch::Vit => 0,
            Arch::Mixer => 1,
            Arch::Synthesizer => 2,
            Arch::Activator => 3,
            Arch::ActivatorGegluOnly => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vit" => Ok(Arch::Vit),
            "mixer" | "mlp_mixer" | "mlpmixer" => Ok(Arch::Mixer),
            "synthesizer" => Ok(Arch::Synthesizer),
            "activator" => Ok(Arch::Activator),
            "activator_geglu_only" | "geglu_only" => Ok(Arch::ActivatorGegluOnly),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected one of vit, mixer, synthesizer, activator, activator_geglu_only)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Patch side in pixels.
    pub ps: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    /// Hidden width of the channel MLP, and of the gated MLP for the Activators.
    pub d_mlp: usize,
    /// Hidden width of the mixer's token MLP.
    pub d_token_mlp: usize,
    /// Attention heads; only used by `vit`.
    pub heads: usize,
    pub n_classes: usize,
    pub pos_embed: bool,
    /// LayerNorm on each of the two gated-MLP streams.
    pub stream_norm: bool,
    /// LayerNorm between the last block and pooling.
    pub final_norm: bool,
    pub gelu: GeluKind,
    pub seed: u64,
}

impl ModelConfig {
    /// ps=4, d_model=256, 4 blocks, MLP width 512, 4 heads.
    pub fn paper(arch: Arch, n_classes: usize) -> Self {
        Self {
            arch,
            ps: 4,
            d_model: 256,
            n_blocks: 4,
            d_mlp: 512,
            d_token_mlp: 512,
            heads: 4,
            n_classes,
            pos_embed: true,
            stream_norm: true,
            final_norm: true,
            gelu: GeluKind::Exact,
            seed: 0,
        }
    }

    /// d_model=8, 4 tokens (ps=16), 2 blocks: the gradient-check scale.
    pub fn miniature(arch: Arch) -> Self {
        Self {
            arch,
            ps: 16,
            d_model: 8,
            n_blocks: 2,
            d_mlp: 16,
            d_token_mlp: 8,
            heads: 2,
            n_classes: 10,
            pos_embed: true,
            stream_norm: true,
            final_norm: true,
            gelu: GeluKind::Exact,
            seed: 0,
        }
    }

    pub fn n_tokens(&self) -> usize {
        (IMAGE_SIDE / self.ps).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.ps * self.ps * CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        check_patch_size(self.ps)?;
        let positive = [
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("d_mlp", self.d_mlp),
            ("d_token_mlp", self.d_token_mlp),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.arch == Arch::Vit && (self.heads == 0 || !self.d_model.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter counts, grouped as in [`ClassifierModel::param_table`].
    pub fn param_formula(&self) -> Vec<(String, usize)> {
        let lin = |i: usize, o: usize| i * o + o;
        let ln = |d: usize| 2 * d;
        let d = self.d_model;
        let mlp = lin(d, self.d_mlp) + lin(self.d_mlp, d);
        let geglu = 2 * lin(d, self.d_mlp)
            + lin(self.d_mlp, d)
            + if self.stream_norm { 2 * ln(self.d_mlp) } else { 0 };
        let block = match self.arch {
            Arch::Vit => ln(d) + 4 * lin(d, d) + ln(d) + mlp,
            Arch::Mixer => {
                let n = self.n_tokens();
                ln(d) + lin(n, self.d_token_mlp) + lin(self.d_token_mlp, n) + ln(d) + mlp
            }
            Arch::Synthesizer => ln(d) + lin(d, d) + ln(d) + mlp,
            Arch::Activator => ln(d) + geglu + ln(d) + mlp,
            Arch::ActivatorGegluOnly => ln(d) + geglu,
        };
        let mut rows = vec![("patch_embed".to_string(), lin(self.patch_dim(), d))];
        if self.pos_embed {
            rows.push(("pos_embed".into(), self.n_tokens() * d));
        }
        rows.extend((0..self.n_blocks).map(|i| (format!("blocks.{i}"), block)));
        if self.final_norm {
            rows.push(("final_norm".into(), ln(d)));
        }
        rows.push(("head".into(), lin(d, self.n_classes)));
        rows
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Vit {
        norm1: LayerNormLayer,
        attention: AttentionBlock,
        norm2: LayerNormLayer,
        mlp: MlpBlock,
    },
    Mixer {
        norm1: LayerNormLayer,
        mixing: MixerBlockPair,
        norm2: LayerNormLayer,
    },
    Synthesizer {
        norm1: LayerNormLayer,
        mixer: SynthesizerMixer,
        norm2: LayerNormLayer,
        mlp: MlpBlock,
    },
    Activator {
        norm1: LayerNormLayer,
        geglu: GegluBlock,
        norm2: LayerNormLayer,
        mlp: MlpBlock,
    },
    GegluOnly {
        norm: LayerNormLayer,
        geglu: GegluBlock,
    },
}

impl Block {
    fn build<T: Real>(
        config: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
    ) -> Result<Self> {
        let d = config.d_model;
        let gelu = config.gelu;
        let ln = |store: &mut ParamStore<T>, suffix: &str| {
            LayerNormLayer::new(store, &format!("{name}.{suffix}"), d)
        };
        Ok(match config.arch {
            Arch::Vit => Block::Vit {
                norm1: ln(store, "norm1")?,
                attention: AttentionBlock::new(store, rng, &format!("{name}.attention"), d, config.heads)?,
                norm2: ln(store, "norm2")?,
                mlp: MlpBlock::new(store, rng, &format!("{name}.mlp"), d, config.d_mlp, gelu)?,
            },
            Arch::Mixer => {
                let norm1 = ln(store, "norm1")?;
                let norm2 = ln(store, "norm2")?;
                Block::Mixer {
                    norm1,
                    mixing: MixerBlockPair::new(
                        store,
                        rng,
                        name,
                        config.n_tokens(),
                        config.d_token_mlp,
                        d,
                        config.d_mlp,
                        gelu,
                    )?,
                    norm2,
                }
            }
            Arch::Synthesizer => Block::Synthesizer {
                norm1: ln(store, "norm1")?,
                mixer: SynthesizerMixer::new(store, rng, &format!("{name}.synth"), d)?,
                norm2: ln(store, "norm2")?,
                mlp: MlpBlock::new(store, rng, &format!("{name}.mlp"), d, config.d_mlp, gelu)?,
            },
            Arch::Activator => Block::Activator {
                norm1: ln(store, "norm1")?,
                geglu: GegluBlock::new(store, rng, &format!("{name}.geglu"), d, config.d_mlp, config.stream_norm, gelu)?,
                norm2: ln(store, "norm2")?,
                mlp: MlpBlock::new(store, rng, &format!("{name}.mlp"), d, config.d_mlp, gelu)?,
            },
            Arch::ActivatorGegluOnly => Block::GegluOnly {
                norm: ln(store, "norm1")?,
                geglu: GegluBlock::new(store, rng, &format!("{name}.geglu"), d, config.d_mlp, config.stream_norm, gelu)?,
            },
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        // y = x + F(LayerNorm(x))
        let residual = |norm: &LayerNormLayer, x: Var, f: &dyn Fn(Var) -> Result<Var>| -> Result<Var> {
            let h = norm.forward(g, p, x)?;
            let h = f(h)?;
            g.add(x, h)
        };
        match self {
            Block::Vit {
                norm1,
                attention,
                norm2,
                mlp,
            } => {
                let y = residual(norm1, x, &|h| attention.forward(g, p, h))?;
                residual(norm2, y, &|h| mlp.forward(g, p, h))
            }
            Block::Mixer { norm1, mixing, norm2 } => {
                let y = residual(norm1, x, &|h| mixing.token_mix_forward(g, p, h))?;
                residual(norm2, y, &|h| mixing.channel_mix_forward(g, p, h))
            }
            Block::Synthesizer {
                norm1,
                mixer,
                norm2,
                mlp,
            } => {
                let y = residual(norm1, x, &|h| mixer.forward(g, p, h))?;
                residual(norm2, y, &|h| mlp.forward(g, p, h))
            }
            Block::Activator {
                norm1,
                geglu,
                norm2,
                mlp,
            } => {
                let y = residual(norm1, x, &|h| geglu.forward(g, p, h))?;
                residual(norm2, y, &|h| mlp.forward(g, p, h))
            }
            Block::GegluOnly { norm, geglu } => residual(norm, x, &|h| geglu.forward(g, p, h)),
        }
    }
}

/// A built classifier: layer structure plus the parameter values it owns.
#[derive(Clone, Debug)]
pub struct ClassifierModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub patch_embed: PatchEmbed,
    pub pos_embed: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub final_norm: Option<LayerNormLayer>,
    pub head: LinearLayer,
}

impl<T: Real> ClassifierModel<T> {
    /// Deterministic construction: parameters depend only on `config`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let patch_embed = PatchEmbed::new(&mut store, &mut rng, "patch_embed", config.ps, d)?;
        let pos_embed = if config.pos_embed {
            let n = config.n_tokens();
            Some(store.add("pos_embed", uniform_fan_in(&mut rng, &[n, d], d))?)
        } else {
            None
        };
        let blocks = (0..config.n_blocks)
            .map(|i| Block::build(config, &mut store, &mut rng, &format!("blocks.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if config.final_norm {
            Some(LayerNormLayer::new(&mut store, "final_norm", d)?)
        } else {
            None
        };
        let head = LinearLayer::new(&mut store, &mut rng, "head", d, config.n_classes)?;
        Ok(Self {
            config: config.clone(),
            store,
            patch_embed,
            pos_embed,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn attach(&self, g: &Graph<T>) -> Bindings {
        self.store.attach(g)
    }

    /// Tokens after embedding and all blocks, before the final norm and pooling.
    pub fn forward_tokens(&self, g: &Graph<T>, p: &Bindings, images: &Tensor<T>) -> Result<Var> {
        let mut x = self.patch_embed.forward(g, p, images)?;
        if let Some(pos) = self.pos_embed {
            x = g.add(x, p.get(pos))?;
        }
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
        }
        Ok(x)
    }

    /// Raw logits `[batch, n_classes]` for `[batch, 3, 32, 32]` images.
    pub fn forward(&self, g: &Graph<T>, p: &Bindings, images: &Tensor<T>) -> Result<Var> {
        let mut x = self.forward_tokens(g, p, images)?;
        if let Some(norm) = &self.final_norm {
            x = norm.forward(g, p, x)?;
        }
        let pooled = g.mean(x, 1)?;
        self.head.forward(g, p, pooled)
    }

    /// Logits without recording backward state.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let p = self.attach(&g);
        let out = self.forward(&g, &p, images)?;
        let t = g.value(out).clone();
        Ok(t)
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Parameter counts of the built model grouped by top-level module
    /// (`patch_embed`, `pos_embed`, `blocks.<i>`, `final_norm`, `head`).
    pub fn param_table(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for p in self.store.iter() {
            let group = module_group(&p.name);
            match rows.last_mut() {
                Some((name, count)) if *name == group => *count += p.value.len(),
                _ => rows.push((group, p.value.len())),
            }
        }
        rows
    }

    pub fn cast<U: Real>(&self) -> ClassifierModel<U> {
        ClassifierModel {
            config: self.config.clone(),
            store: self.store.cast(),
            patch_embed: self.patch_embed.clone(),
            pos_embed: self.pos_embed,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
        }
    }
}

fn module_group(param_name: &str) -> String {
    let mut parts = param_name.split('.');
    match parts.next() {
        Some("blocks") => format!("blocks.{}", parts.next().unwrap_or("?")),
        Some(first) => first.to_string(),
        None => String::new(),
    }
}
