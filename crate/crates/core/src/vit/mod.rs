//! Small configurable vision transformer used as both student and teacher.
//!
//! Pre-norm blocks (`x + attn(ln(x))`, `x + mlp(ln(x))`), a learned class
//! token, learned positional embeddings that are bilinearly resized when a
//! view produces a different patch grid, and a linear projection head that
//! maps the class-token embedding to `out_dim` logits.

mod checkpoint;
mod encoder;
mod image;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, Projection,
};
pub use encoder::{encode, encode_in, head, head_in, patchify, position_interpolation};
pub use image::Image;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VitError {
    #[error("image {height}x{width} is not divisible into {patch}x{patch} patches")]
    Patchify { height: usize, width: usize, patch: usize },
    #[error("image has {got} channels, model expects {expected}")]
    Channels { expected: usize, got: usize },
    #[error("{tokens} patch tokens but positional embedding covers {expected} and interpolation is disabled")]
    PositionMismatch { tokens: usize, expected: usize },
    #[error("embedding has length {got}, expected {expected}")]
    EmbeddingLength { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    /// Projection-head output dimension K.
    pub out_dim: usize,
    /// Resize positional embeddings for views whose patch grid differs.
    pub interpolate_pos: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 4.0,
            out_dim: 128,
            interpolate_pos: true,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), VitError> {
        let fail = |m: String| Err(VitError::Config(m));
        if [self.image_size, self.patch_size, self.channels, self.depth, self.heads, self.dim, self.out_dim]
            .contains(&0)
        {
            return fail("all sizes must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        if self.checked_param_count().is_none() {
            return fail("parameter count overflows".into());
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Patches per side for a full-size image.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Names and shapes of every weight tensor, in checkpoint order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, k) = (self.dim, self.mlp_hidden(), self.out_dim);
        let tokens = self.grid() * self.grid() + 1;
        let mut m = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_len(), d]),
            ("patch_embed.bias".into(), vec![d]),
            ("cls_token".into(), vec![1, d]),
            ("pos_embed".into(), vec![tokens, d]),
        ];
        for b in 0..self.depth {
            for (name, shape) in [
                ("norm1.gain", vec![d]),
                ("norm1.bias", vec![d]),
                ("attn.qkv.weight", vec![d, 3 * d]),
                ("attn.qkv.bias", vec![3 * d]),
                ("attn.proj.weight", vec![d, d]),
                ("attn.proj.bias", vec![d]),
                ("norm2.gain", vec![d]),
                ("norm2.bias", vec![d]),
                ("mlp.fc1.weight", vec![d, h]),
                ("mlp.fc1.bias", vec![h]),
                ("mlp.fc2.weight", vec![h, d]),
                ("mlp.fc2.bias", vec![d]),
            ] {
                m.push((format!("blocks.{b}.{name}"), shape));
            }
        }
        m.push(("norm.gain".into(), vec![d]));
        m.push(("norm.bias".into(), vec![d]));
        m.push(("head.weight".into(), vec![d, k]));
        m.push(("head.bias".into(), vec![k]));
        m
    }

    fn checked_param_count(&self) -> Option<usize> {
        let (d, h, k) = (self.dim, self.mlp_hidden(), self.out_dim);
        let g = self.grid();
        let tokens = g.checked_mul(g)?.checked_add(1)?;
        let patch = self.patch_len().checked_mul(d)?.checked_add(d)?;
        let block = d
            .checked_mul(3 * d)?
            .checked_add(3 * d)?
            .checked_add(d.checked_mul(d + 1)?)?
            .checked_add(d.checked_mul(h)?.checked_mul(2)?)?
            .checked_add(h + d)?
            .checked_add(4 * d)?;
        patch
            .checked_add(d)?
            .checked_add(tokens.checked_mul(d)?)?
            .checked_add(block.checked_mul(self.depth)?)?
            .checked_add(2 * d)?
            .checked_add(d.checked_mul(k)?.checked_add(k)?)
    }

    /// Closed-form number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.checked_param_count().expect("parameter count overflows")
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub qkv_weight: T,
    pub qkv_bias: T,
    pub proj_weight: T,
    pub proj_bias: T,
    pub norm2_gain: T,
    pub norm2_bias: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

impl<T> Block<T> {
    fn fields(&self) -> [&T; 12] {
        [
            &self.norm1_gain,
            &self.norm1_bias,
            &self.qkv_weight,
            &self.qkv_bias,
            &self.proj_weight,
            &self.proj_bias,
            &self.norm2_gain,
            &self.norm2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            norm1_gain: it.next()?,
            norm1_bias: it.next()?,
            qkv_weight: it.next()?,
            qkv_bias: it.next()?,
            proj_weight: it.next()?,
            proj_bias: it.next()?,
            norm2_gain: it.next()?,
            norm2_bias: it.next()?,
            fc1_weight: it.next()?,
            fc1_bias: it.next()?,
            fc2_weight: it.next()?,
            fc2_bias: it.next()?,
        })
    }
}

/// Every learnable tensor of the encoder plus head. Generic so the same
/// layout holds values (`Tensor`), graph handles (`Var`) or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct VitWeights<T> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub cls_token: T,
    pub pos_embed: T,
    pub blocks: Vec<Block<T>>,
    pub norm_gain: T,
    pub norm_bias: T,
    pub head_weight: T,
    pub head_bias: T,
}

impl<T> VitWeights<T> {
    /// All entries in manifest order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.patch_weight, &self.patch_bias, &self.cls_token, &self.pos_embed]
            .into_iter()
            .chain(self.blocks.iter().flat_map(|b| b.fields()))
            .chain([&self.norm_gain, &self.norm_bias, &self.head_weight, &self.head_bias])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        [
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ]
        .into_iter()
        .chain(self.blocks.iter_mut().flat_map(|b| b.fields_mut()))
        .chain([
            &mut self.norm_gain,
            &mut self.norm_bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ])
    }

    /// Rebuilds from entries in manifest order; `None` if the count is wrong.
    pub fn from_entries(depth: usize, entries: impl IntoIterator<Item = T>) -> Option<Self> {
        let mut it = entries.into_iter();
        let patch_weight = it.next()?;
        let patch_bias = it.next()?;
        let cls_token = it.next()?;
        let pos_embed = it.next()?;
        let blocks = (0..depth).map(|_| Block::from_iter(&mut it)).collect::<Option<Vec<_>>>()?;
        let out = Self {
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            norm_gain: it.next()?,
            norm_bias: it.next()?,
            head_weight: it.next()?,
            head_bias: it.next()?,
        };
        it.next().is_none().then_some(out)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> VitWeights<U> {
        VitWeights::from_entries(self.blocks.len(), self.iter().map(f)).expect("same layout")
    }
}

/// Learnable state of one network: config plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub weights: VitWeights<Tensor>,
}

/// Sample from N(0, std²) truncated to ±2 std.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ViTParams {
    /// Truncated-normal (std 0.02) weights and positional embeddings; zero
    /// biases and class token; unit layer-norm gains.
    pub fn init(config: &ViTConfig, rng: &mut impl Rng) -> Result<Self, VitError> {
        config.validate()?;
        let tensors = config.manifest().into_iter().map(|(name, shape)| {
            if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if name.ends_with(".bias") || name == "cls_token" {
                Tensor::zeros(&shape)
            } else {
                let n = shape.iter().product();
                let data = (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect();
                Tensor::new(&shape, data).expect("manifest shape")
            }
        });
        let tensors: Vec<Tensor> = tensors.collect();
        Ok(Self {
            config: config.clone(),
            weights: VitWeights::from_entries(config.depth, tensors).expect("manifest layout"),
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    /// Puts every weight on `g`, tracked when `trainable`.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> VitWeights<Var> {
        self.weights.map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Gradients of `vars` after a backward pass, zeros where absent.
    pub fn collect_grads(g: &Graph, vars: &VitWeights<Var>) -> VitWeights<Tensor> {
        vars.map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
    }

    /// Applies `f(self, other)` elementwise to every weight pair.
    pub fn zip_apply(&mut self, other: &VitWeights<Tensor>, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.weights.iter_mut().zip(other.iter()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                f(x, y);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_param_count_matches_closed_form() {
        let cfg = ViTConfig::default();
        let p = ViTParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.num_params(), cfg.param_count());
        // regression constant for the 32px/8px/dim64/depth4/K128 default
        assert_eq!(cfg.param_count(), 221_888);
    }

    #[test]
    fn manifest_roundtrips_through_weights() {
        let cfg = ViTConfig {
            depth: 2,
            ..ViTConfig::default()
        };
        let p = ViTParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let shapes: Vec<Vec<usize>> = p.weights.iter().map(|t| t.shape().to_vec()).collect();
        let manifest: Vec<Vec<usize>> = cfg.manifest().into_iter().map(|(_, s)| s).collect();
        assert_eq!(shapes, manifest);
        assert!(VitWeights::from_entries(2, p.weights.iter().cloned().skip(1)).is_none());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ViTConfig {
            image_size: 30,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            heads: 5,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_truncated() {
        let cfg = ViTConfig::default();
        let a = ViTParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = ViTParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.weights.patch_weight.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.weights.cls_token.data().iter().all(|&v| v == 0.0));
    }
}
