use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{EmbeddingBatch, RetrievalError};
use crate::data::Dataset;
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{encode_in, Checkpoint, Image, Projection, ViTParams, VitWeights};

/// Backbone plus the linear map to the retrieval embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalModel {
    pub backbone: ViTParams,
    pub projection: Projection,
}

impl RetrievalModel {
    /// Attaches a fresh projection with N(0, 1/dim) weights and zero bias.
    pub fn new(backbone: ViTParams, embedding_dim: usize, rng: &mut impl Rng) -> Result<Self, RetrievalError> {
        if embedding_dim == 0 {
            return Err(RetrievalError::Invalid("embedding_dim must be positive".into()));
        }
        let dim = backbone.config.dim;
        let std = 1.0 / (dim as f64).sqrt();
        let data = (0..dim * embedding_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let projection = Projection {
            weight: Tensor::new(&[dim, embedding_dim], data)?,
            bias: Tensor::zeros(&[embedding_dim]),
        };
        Ok(Self { backbone, projection })
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection.bias.numel()
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, RetrievalError> {
        let projection = ckpt
            .projection
            .ok_or_else(|| RetrievalError::Invalid("checkpoint has no retrieval head".into()))?;
        Ok(Self {
            backbone: ckpt.params,
            projection,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.backbone.clone(),
            projection: Some(self.projection.clone()),
        }
    }
}

/// Unit-length retrieval embedding `[C]` of `image` on graph `g`.
pub fn embed_retrieval_in(
    g: &mut Graph,
    backbone: &ViTParams,
    w: &VitWeights<Var>,
    weight: Var,
    bias: Var,
    image: &Image,
) -> Result<Var, RetrievalError> {
    let dim = backbone.config.dim;
    let e = encode_in(g, &backbone.config, w, image)?;
    let row = g.reshape(e, &[1, dim])?;
    let z = g.matmul(row, weight)?;
    let c = g.shape(z)[1];
    let z = g.reshape(z, &[c])?;
    let z = g.add(z, bias)?;
    if g.value(z).data().iter().any(|v| !v.is_finite()) {
        return Err(RetrievalError::NonFiniteEmbedding);
    }
    let sq = g.mul(z, z)?;
    let norm = g.sum(sq);
    let norm = g.sqrt(norm)?;
    Ok(g.div(z, norm)?)
}

pub fn embed_retrieval(model: &RetrievalModel, image: &Image) -> Result<Tensor, RetrievalError> {
    let mut g = Graph::new();
    let w = model.backbone.register(&mut g, false);
    let pw = g.constant(model.projection.weight.clone());
    let pb = g.constant(model.projection.bias.clone());
    let e = embed_retrieval_in(&mut g, &model.backbone, &w, pw, pb, image)?;
    Ok(g.value(e).clone())
}

/// Embeds every image after a center crop to the backbone input size.
pub fn embed_images(model: &RetrievalModel, images: &[Image], labels: Vec<u32>) -> Result<EmbeddingBatch, RetrievalError> {
    let size = model.backbone.config.image_size;
    let rows: Vec<Tensor> = images
        .par_iter()
        .map(|im| embed_retrieval(model, &im.center_crop(size)))
        .collect::<Result<_, _>>()?;
    let c = model.embedding_dim();
    let data = rows.into_iter().flat_map(Tensor::into_data).collect();
    EmbeddingBatch::new(Tensor::new(&[images.len(), c], data)?, labels)
}

pub fn embed_dataset(model: &RetrievalModel, dataset: &Dataset) -> Result<EmbeddingBatch, RetrievalError> {
    embed_images(model, &dataset.images(), dataset.labels())
}
