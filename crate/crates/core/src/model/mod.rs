//! Transformer encoder classifier with two front ends: semantic segment
//! tokens with a geometry MLP, or the grid-patch ViT baseline with a learned
//! positional table.

mod checkpoint;
mod embed;
mod encoder;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use embed::{prepare_vit_image, EmbeddedTokens};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SvitError};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::TOKEN_CAPACITY;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive attention logit for padded keys.
pub const MASK_LOGIT: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Semantic segment tokens, geometry positional embedding.
    Svit,
    /// Grid patches, learned per-index positional embedding.
    Vit,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Svit => "svit",
            Mode::Vit => "vit",
        })
    }
}

impl FromStr for Mode {
    type Err = SvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svit" => Ok(Mode::Svit),
            "vit" => Ok(Mode::Vit),
            other => Err(SvitError::config(format!("unknown mode {other:?} (svit | vit)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Maximum tokens per image, class token excluded. For ViT this is the
    /// grid cell count and must be a perfect square.
    pub token_capacity: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: N=64, depth 4, 4 heads.
    pub fn desk(mode: Mode, num_classes: usize) -> Self {
        Self {
            mode,
            patch_size: 16,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            token_capacity: TOKEN_CAPACITY,
            num_classes,
            init_seed: 0,
        }
    }

    /// ViT-Base sized preset (12 layers, 12 heads).
    pub fn large(mode: Mode, num_classes: usize) -> Self {
        Self {
            embed_dim: 768,
            depth: 12,
            heads: 12,
            ..Self::desk(mode, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SvitError::config(m));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.token_capacity < 2 {
            return fail(format!("token_capacity {} < 2", self.token_capacity));
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return fail("patch_size, mlp_ratio and num_classes must be positive".into());
        }
        if self.mode == Mode::Vit && self.vit_grid().pow(2) != self.token_capacity {
            return fail(format!(
                "vit token_capacity {} is not a square grid",
                self.token_capacity
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Grid side for ViT inputs (14 for 196 tokens).
    pub fn vit_grid(&self) -> usize {
        (self.token_capacity as f64).sqrt().round() as usize
    }

    /// ViT input side length in pixels.
    pub fn vit_image_side(&self) -> usize {
        self.vit_grid() * self.patch_size
    }
}

/// A named parameter tensor; frozen parameters receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
enum FrontEnd {
    Svit { pos_fc1: Linear, pos_fc2: Linear },
    Vit { pos_table: usize },
}

#[derive(Debug, Clone)]
struct Layout {
    patch: Linear,
    front: FrontEnd,
    cls: usize,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
}

/// Parameters bound to one tape, indexed like [`Model::params`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

struct Init<'a, T> {
    params: &'a mut Vec<Param<T>>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl<T: Scalar> Init<'_, T> {
    fn add(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(Param {
            name,
            tensor: tensor.with_grad(),
        });
        self.params.len() - 1
    }

    fn trunc_normal(&mut self, name: String, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z = self.normal.sample(&mut self.rng);
                if z.abs() <= 2.0 * INIT_STD {
                    break T::lit(z);
                }
            })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.add(name, t)
    }

    fn filled(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), vec![T::lit(v); n]).expect("shape matches data");
        self.add(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.trunc_normal(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: self.filled(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.filled(format!("{name}.gamma"), &[dim], 1.0),
            beta: self.filled(format!("{name}.beta"), &[dim], 0.0),
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: truncated normal (std 0.02) weights, zero biases,
    /// unit layer-norm gains, drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let n = config.embed_dim;
        let patch = init.linear("patch_embed", config.patch_dim(), n);
        let front = match config.mode {
            Mode::Svit => FrontEnd::Svit {
                pos_fc1: init.linear("pos_mlp.fc1", 5, n),
                pos_fc2: init.linear("pos_mlp.fc2", n, n),
            },
            Mode::Vit => FrontEnd::Vit {
                pos_table: init.trunc_normal("pos_table".into(), &[config.token_capacity, n]),
            },
        };
        let cls = init.trunc_normal("cls_token".into(), &[n]);
        let hidden = n * config.mlp_ratio;
        let blocks = (0..config.depth)
            .map(|i| Block {
                norm1: init.norm(&format!("blocks.{i}.norm1"), n),
                qkv: init.linear(&format!("blocks.{i}.attn.qkv"), n, 3 * n),
                proj: init.linear(&format!("blocks.{i}.attn.proj"), n, n),
                norm2: init.norm(&format!("blocks.{i}.norm2"), n),
                fc1: init.linear(&format!("blocks.{i}.mlp.fc1"), n, hidden),
                fc2: init.linear(&format!("blocks.{i}.mlp.fc2"), hidden, n),
            })
            .collect();
        let norm = init.norm("norm", n);
        let head = init.linear("head", n, config.num_classes);
        Ok(Self {
            config,
            params,
            layout: Layout {
                patch,
                front,
                cls,
                blocks,
                norm,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Copies every parameter onto `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Copies every parameter onto `tape` as a constant, for passes that only
    /// need gradients with respect to inputs.
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| {
                    tape.constant(p.tensor.shape(), p.tensor.data().to_vec())
                        .expect("parameter shape matches its data")
                })
                .collect(),
        }
    }

    /// Stores the gradients from a finished backward pass on every trainable
    /// parameter.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            p.tensor.zero_grad();
            if p.tensor.requires_grad() {
                match tape.grad(v) {
                    Some(g) => p.tensor.accumulate_grad(g)?,
                    None => p.tensor.accumulate_grad(&vec![T::zero(); p.tensor.len()])?,
                }
            }
        }
        Ok(())
    }

    /// Freezes everything except the classification head and returns the
    /// indices of the still-trainable parameters.
    pub fn linear_probe_mode(&mut self) -> Vec<usize> {
        let head = [self.layout.head.weight, self.layout.head.bias];
        for (i, p) in self.params.iter_mut().enumerate() {
            p.tensor.set_requires_grad(head.contains(&i));
            p.tensor.zero_grad();
        }
        head.to_vec()
    }

    /// Makes every parameter trainable again.
    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(true);
        }
    }

    pub fn trainable(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].tensor.requires_grad())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub(crate) fn from_parts(config: ModelConfig, loaded: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if loaded.len() != model.params.len() {
            return Err(SvitError::format(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                model.params.len()
            )));
        }
        for (p, (name, t)) in model.params.iter_mut().zip(loaded) {
            if p.name != name || p.tensor.shape() != t.shape() {
                return Err(SvitError::format(format!(
                    "checkpoint tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = t.with_grad();
        }
        Ok(model)
    }
}
