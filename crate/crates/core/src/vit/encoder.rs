use super::{Image, ViTConfig, ViTParams, VitError, VitWeights, LAYER_NORM_EPS};
use crate::tensor::{Graph, Tensor, Var};

/// Splits an image into non-overlapping `patch`×`patch` tiles in raster
/// order. Each row holds one tile flattened channel-major, then row, then
/// column, so a row has length `channels · patch²`.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor, VitError> {
    let (h, w) = (image.height, image.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(VitError::Patchify {
            height: h,
            width: w,
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let len = image.channels * patch * patch;
    let mut out = Vec::with_capacity(gh * gw * len);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..image.channels {
                for i in 0..patch {
                    let row = (c * h + py * patch + i) * w + px * patch;
                    out.extend_from_slice(&image.data[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, len], out)?)
}

fn linear_weights(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let frac = s - i0 as f64;
            [(i0, 1.0 - frac), (i1, frac)]
        })
        .collect()
}

/// Bilinear resampling matrix (half-pixel centers) taking a `src`×`src`
/// grid of positional embeddings to `dst_h`×`dst_w`. Shape
/// `[dst_h·dst_w, src·src]`; every row sums to one.
pub fn position_interpolation(src: usize, dst_h: usize, dst_w: usize) -> Tensor {
    let (wy, wx) = (linear_weights(src, dst_h), linear_weights(src, dst_w));
    let mut m = Tensor::zeros(&[dst_h * dst_w, src * src]);
    let data = m.data_mut();
    for (y, ry) in wy.iter().enumerate() {
        for (x, rx) in wx.iter().enumerate() {
            let row = (y * dst_w + x) * src * src;
            for &(sy, a) in ry {
                for &(sx, b) in rx {
                    data[row + sy * src + sx] += a * b;
                }
            }
        }
    }
    m
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, VitError> {
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

fn norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var, VitError> {
    let n = g.layer_norm(x, LAYER_NORM_EPS)?;
    let n = g.mul(n, gain)?;
    Ok(g.add(n, bias)?)
}

fn attention(g: &mut Graph, cfg: &ViTConfig, b: &super::Block<Var>, x: Var) -> Result<Var, VitError> {
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let qkv = linear(g, x, b.qkv_weight, b.qkv_bias)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.slice(qkv, 1, h * dh, (h + 1) * dh)?;
        let k = g.slice(qkv, 1, d + h * dh, d + (h + 1) * dh)?;
        let v = g.slice(qkv, 1, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1)?;
        heads.push(g.matmul(attn, v)?);
    }
    let merged = g.concat(&heads, 1)?;
    linear(g, merged, b.proj_weight, b.proj_bias)
}

/// Runs the backbone on pre-extracted patch rows laid out on a
/// `grid.0`×`grid.1` patch grid and returns the normalized class token `[dim]`.
pub(crate) fn encode_patches_in(
    g: &mut Graph,
    cfg: &ViTConfig,
    w: &VitWeights<Var>,
    patches: Tensor,
    grid: (usize, usize),
) -> Result<Var, VitError> {
    let tokens = grid.0 * grid.1;
    let full = cfg.grid();
    let x = g.constant(patches);
    let emb = linear(g, x, w.patch_weight, w.patch_bias)?;
    let seq = g.concat(&[w.cls_token, emb], 0)?;
    let pos = if grid == (full, full) {
        w.pos_embed
    } else if cfg.interpolate_pos {
        let cls_pos = g.slice(w.pos_embed, 0, 0, 1)?;
        let patch_pos = g.slice(w.pos_embed, 0, 1, full * full + 1)?;
        let m = g.constant(position_interpolation(full, grid.0, grid.1));
        let resized = g.matmul(m, patch_pos)?;
        g.concat(&[cls_pos, resized], 0)?
    } else {
        return Err(VitError::PositionMismatch {
            tokens,
            expected: full * full,
        });
    };
    let mut h = g.add(seq, pos)?;
    for b in &w.blocks {
        let n = norm(g, h, b.norm1_gain, b.norm1_bias)?;
        let a = attention(g, cfg, b, n)?;
        h = g.add(h, a)?;
        let n = norm(g, h, b.norm2_gain, b.norm2_bias)?;
        let m = linear(g, n, b.fc1_weight, b.fc1_bias)?;
        let m = g.gelu(m);
        let m = linear(g, m, b.fc2_weight, b.fc2_bias)?;
        h = g.add(h, m)?;
    }
    let h = norm(g, h, w.norm_gain, w.norm_bias)?;
    let cls = g.slice(h, 0, 0, 1)?;
    Ok(g.reshape(cls, &[cfg.dim])?)
}

/// Backbone forward pass on graph `g`; returns the class-token embedding `[dim]`.
pub fn encode_in(g: &mut Graph, cfg: &ViTConfig, w: &VitWeights<Var>, image: &Image) -> Result<Var, VitError> {
    if image.channels != cfg.channels {
        return Err(VitError::Channels {
            expected: cfg.channels,
            got: image.channels,
        });
    }
    let patches = patchify(image, cfg.patch_size)?;
    let grid = (image.height / cfg.patch_size, image.width / cfg.patch_size);
    encode_patches_in(g, cfg, w, patches, grid)
}

/// Projection head on graph `g`: `[dim]` embedding to `[out_dim]` logits.
pub fn head_in(g: &mut Graph, w: &VitWeights<Var>, embedding: Var) -> Result<Var, VitError> {
    let dim = g.shape(w.head_weight)[0];
    if g.shape(embedding) != [dim] {
        return Err(VitError::EmbeddingLength {
            expected: dim,
            got: g.value(embedding).numel(),
        });
    }
    let row = g.reshape(embedding, &[1, dim])?;
    let logits = linear(g, row, w.head_weight, w.head_bias)?;
    let k = g.shape(logits)[1];
    Ok(g.reshape(logits, &[k])?)
}

/// Class-token embedding of `image`, evaluated without gradient tracking.
pub fn encode(params: &ViTParams, image: &Image) -> Result<Tensor, VitError> {
    let mut g = Graph::new();
    let w = params.register(&mut g, false);
    let e = encode_in(&mut g, &params.config, &w, image)?;
    Ok(g.value(e).clone())
}

pub fn head(params: &ViTParams, embedding: &Tensor) -> Result<Tensor, VitError> {
    let mut g = Graph::new();
    let w = params.register(&mut g, false);
    let e = g.constant(embedding.clone());
    let l = head_in(&mut g, &w, e)?;
    Ok(g.value(l).clone())
}
