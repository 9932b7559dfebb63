use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    all_pairs, distance_weighted_pairs, margin_loss_in, multi_similarity_loss_in, proxy_nca_loss_in,
    ClassBalancedSampler, LossKind, MsMining, PairSampling, ProxyBank, RetrievalConfig, RetrievalError,
    RetrievalModel,
};
use crate::data::Dataset;
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{Image, ViTParams, VitWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStep {
    pub step: usize,
    pub epoch: usize,
    /// Batch loss before the update.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalLog {
    pub steps: Vec<RetrievalStep>,
}

/// Everything optimized during fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneState {
    pub model: RetrievalModel,
    /// Training classes, ascending; indexes `beta` and the proxy rows.
    pub classes: Vec<u32>,
    /// Margin-loss boundary per training class.
    pub beta: Tensor,
    pub proxies: Option<ProxyBank>,
    pub step: usize,
    velocity: Option<(VitWeights<Tensor>, Vec<Tensor>)>,
}

impl FinetuneState {
    /// Copies the teacher as backbone and draws the projection (and proxies
    /// for Proxy-NCA) from `rng`.
    pub fn new(
        teacher: &ViTParams,
        classes: Vec<u32>,
        cfg: &RetrievalConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, RetrievalError> {
        let model = RetrievalModel::new(teacher.clone(), cfg.embedding_dim, rng)?;
        let proxies = match cfg.loss {
            LossKind::ProxyNca => Some(ProxyBank::init(classes.clone(), cfg.embedding_dim, rng)?),
            _ => None,
        };
        let beta = Tensor::full(&[classes.len().max(1)], cfg.margin_beta);
        Ok(Self {
            model,
            classes,
            beta,
            proxies,
            step: 0,
            velocity: None,
        })
    }

    fn aux(&self) -> Tensor {
        match &self.proxies {
            Some(bank) => bank.proxies.clone(),
            None => self.beta.clone(),
        }
    }

    fn apply(&mut self, grads: VitWeights<Tensor>, extra: Vec<Tensor>, cfg: &RetrievalConfig) {
        let mu = cfg.momentum;
        let (vb, ve) = self.velocity.get_or_insert_with(|| {
            (
                grads.map(|t| Tensor::zeros(t.shape())),
                extra.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            )
        });
        let sgd = |p: &mut Tensor, g: &Tensor, v: &mut Tensor, lr: f64| {
            for ((x, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                *x -= lr * *vv;
            }
        };
        for ((p, g), v) in self.model.backbone.weights.iter_mut().zip(grads.iter()).zip(vb.iter_mut()) {
            sgd(p, g, v, cfg.learning_rate);
        }
        sgd(&mut self.model.projection.weight, &extra[0], &mut ve[0], cfg.learning_rate);
        sgd(&mut self.model.projection.bias, &extra[1], &mut ve[1], cfg.learning_rate);
        let aux = match &mut self.proxies {
            Some(bank) => &mut bank.proxies,
            None => &mut self.beta,
        };
        sgd(aux, &extra[2], &mut ve[2], cfg.aux_learning_rate);
    }
}

/// Random `size`×`size` window with a horizontal flip half of the time.
fn augment(image: &Image, size: usize, rng: &mut impl Rng) -> Image {
    let (h, w) = (size.min(image.height), size.min(image.width));
    let top = rng.random_range(0..=image.height - h);
    let left = rng.random_range(0..=image.width - w);
    let crop = image.crop(top, left, h, w);
    if rng.random_bool(0.5) {
        crop.flip_horizontal()
    } else {
        crop
    }
}

fn batch_loss(
    g: &mut Graph,
    state: &FinetuneState,
    emb: Var,
    aux: Var,
    labels: &[u32],
    cfg: &RetrievalConfig,
    rng: &mut impl Rng,
) -> Result<Var, RetrievalError> {
    match cfg.loss {
        LossKind::Margin => {
            let pairs = match cfg.pair_sampling {
                PairSampling::All => all_pairs(labels.len()),
                PairSampling::DistanceWeighted => distance_weighted_pairs(
                    g.value(emb),
                    labels,
                    cfg.distance_cutoff,
                    cfg.nonzero_loss_cutoff,
                    rng,
                )?,
            };
            margin_loss_in(g, emb, labels, aux, &state.classes, cfg.margin_alpha, &pairs)
        }
        LossKind::ProxyNca => proxy_nca_loss_in(g, emb, labels, aux, &state.classes),
        LossKind::MultiSimilarity => multi_similarity_loss_in(
            g,
            emb,
            labels,
            MsMining {
                alpha: cfg.ms_alpha,
                beta: cfg.ms_beta,
                lambda: cfg.ms_lambda,
                epsilon: cfg.ms_epsilon,
            },
        ),
    }
}

/// One optimizer step on the given images; returns the loss before the update.
pub fn finetune_step(
    state: &mut FinetuneState,
    images: &[Image],
    labels: &[u32],
    cfg: &RetrievalConfig,
    rng: &mut impl Rng,
) -> Result<f64, RetrievalError> {
    let mut g = Graph::new();
    let backbone = &state.model.backbone;
    let w = backbone.register(&mut g, true);
    let pw = g.param(state.model.projection.weight.clone());
    let pb = g.param(state.model.projection.bias.clone());
    let aux = g.param(state.aux());
    let c = state.model.embedding_dim();
    let mut rows = Vec::with_capacity(images.len());
    for im in images {
        let e = match super::embed_retrieval_in(&mut g, backbone, &w, pw, pb, im) {
            Err(RetrievalError::NonFiniteEmbedding) => {
                return Err(RetrievalError::NonFiniteLoss {
                    step: state.step,
                    loss: f64::NAN,
                })
            }
            other => other?,
        };
        rows.push(g.reshape(e, &[1, c])?);
    }
    let emb = g.concat(&rows, 0)?;
    let loss = batch_loss(&mut g, state, emb, aux, labels, cfg, rng)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(RetrievalError::NonFiniteLoss {
            step: state.step,
            loss: value,
        });
    }
    g.backward(loss)?;
    let grads = ViTParams::collect_grads(&g, &w);
    let grad_of = |v: Var| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
    let extra = vec![grad_of(pw), grad_of(pb), grad_of(aux)];
    state.apply(grads, extra, cfg);
    state.step += 1;
    Ok(value)
}

/// Fine-tunes a retrieval model initialized from `teacher` on `train`.
///
/// The projection and proxies draw from `seed`; batches, crops and pair
/// sampling draw from an independent stream of the same seed.
pub fn finetune(
    teacher: &ViTParams,
    train: &Dataset,
    cfg: &RetrievalConfig,
    seed: u64,
) -> Result<(FinetuneState, RetrievalLog), RetrievalError> {
    cfg.validate()?;
    let classes: Vec<u32> = {
        let mut c: Vec<u32> = train.classes().iter().map(|c| c.id).collect();
        c.sort_unstable();
        c
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = FinetuneState::new(teacher, classes, cfg, &mut rng)?;
    let mut log = RetrievalLog::default();
    if cfg.epochs == 0 {
        return Ok((state, log));
    }
    rng.set_stream(1);
    let labels = train.labels();
    let sampler = ClassBalancedSampler::new(&labels, cfg.classes_per_batch, cfg.samples_per_class)?;
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(sampler.batch_size()));
    let size = teacher.config.image_size;
    info!(
        "fine-tuning with {} loss for {} steps",
        cfg.loss.name(),
        cfg.epochs * steps_per_epoch
    );
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let idx = sampler.sample(&mut rng);
            let images: Vec<Image> = idx.iter().map(|&i| augment(&train.image(i), size, &mut rng)).collect();
            let batch_labels: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            let step = state.step;
            let loss = finetune_step(&mut state, &images, &batch_labels, cfg, &mut rng)?;
            debug!("step {step} loss {loss:.6}");
            log.steps.push(RetrievalStep { step, epoch, loss });
        }
    }
    Ok((state, log))
}
