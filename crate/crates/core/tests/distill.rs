mod common;

use common::{compare_sampled, rng, FD_TOL};
use proptest::prelude::*;
use rand::Rng;
use sslvit::distill::{
    cosine_lambda, distillation_loss, distillation_loss_in, ema_update, multi_crop, pretrain, pretrain_with_state,
    sharpen, DistillConfig, DistillError, DistillState, EmaMode,
};
use sslvit::tensor::{Graph, Tensor};
use sslvit::vit::{encode, head, Image, ViTConfig, ViTParams, VitWeights};

fn micro(out_dim: usize) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 2,
        heads: 2,
        dim: 16,
        mlp_ratio: 4.0,
        out_dim,
        interpolate_pos: true,
    }
}

fn micro_distill(local_views: usize) -> DistillConfig {
    DistillConfig {
        num_local_views: local_views,
        global_size: 8,
        local_size: 4,
        tau_s: 0.5,
        tau_t: 0.25,
        ..DistillConfig::default()
    }
}

fn random_image(r: &mut impl Rng, size: usize) -> Image {
    Image::new(1, size, size, (0..size * size).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn scrambled_state(cfg: &ViTConfig, seed: u64) -> DistillState {
    let mut r = rng(seed);
    let mut student = ViTParams::init(cfg, &mut r).unwrap();
    let mut teacher = student.clone();
    for p in [&mut student, &mut teacher] {
        for t in p.weights.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
    }
    let mut state = DistillState::from_student(student, true);
    state.teacher = teacher;
    state.center = Some((0..cfg.out_dim).map(|_| r.random_range(-0.3..0.3)).collect());
    state
}

fn logits(p: &ViTParams, view: &Image) -> Vec<f64> {
    head(p, &encode(p, view).unwrap()).unwrap().data().to_vec()
}

/// Scalar double loop over (global, other view) pairs.
fn oracle_loss(state: &DistillState, views: &[Image], cfg: &DistillConfig) -> f64 {
    let center = state.center.as_ref().unwrap();
    let mut total = 0.0;
    for x in 0..2 {
        let t = logits(&state.teacher, &views[x]);
        let tz: f64 = t.iter().zip(center).map(|(l, c)| ((l - c) / cfg.tau_t).exp()).sum();
        for (xp, view) in views.iter().enumerate() {
            if xp == x {
                continue;
            }
            let s = logits(&state.student, view);
            let sz: f64 = s.iter().map(|l| (l / cfg.tau_s).exp()).sum();
            for i in 0..t.len() {
                let pt = ((t[i] - center[i]) / cfg.tau_t).exp() / tz;
                let ps = (s[i] / cfg.tau_s).exp() / sz;
                total -= pt * ps.ln();
            }
        }
    }
    total
}

#[test]
fn loss_matches_double_loop_oracle() {
    for seed in 0..10 {
        let vit = micro(3);
        let cfg = micro_distill(1);
        let state = scrambled_state(&vit, seed);
        let views = multi_crop(&random_image(&mut rng(seed + 50), 10), &cfg, &mut rng(seed)).unwrap();
        assert_eq!(views.len(), 3);
        let got = distillation_loss(&state, &views, &cfg).unwrap().item().unwrap();
        let want = oracle_loss(&state, &views, &cfg);
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn uniform_outputs_give_term_count_times_log_k() {
    for local in [1, 8] {
        let vit = micro(4);
        let cfg = micro_distill(local);
        let mut state = DistillState::new(&vit, false, &mut rng(0)).unwrap();
        for p in [&mut state.student, &mut state.teacher] {
            p.weights.head_weight = Tensor::zeros(p.weights.head_weight.shape());
        }
        let views = multi_crop(&random_image(&mut rng(1), 8), &cfg, &mut rng(2)).unwrap();
        let v = views.len() as f64;
        let loss = distillation_loss(&state, &views, &cfg).unwrap().item().unwrap();
        // V = 10 gives 18 cross-entropy terms
        assert!((loss - 2.0 * (v - 1.0) * 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn fewer_than_two_views_is_an_error() {
    let state = DistillState::new(&micro(4), true, &mut rng(0)).unwrap();
    let img = random_image(&mut rng(1), 8);
    assert_eq!(
        distillation_loss(&state, &[img], &micro_distill(0)),
        Err(DistillError::TooFewViews(1))
    );
}

fn student_loss(
    cfg: &ViTConfig,
    params: &[Tensor],
    probs: &[Vec<f64>],
    views: &[Image],
    tau_s: f64,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
    let w = VitWeights::from_entries(cfg.depth, vars.iter().copied()).unwrap();
    let loss = distillation_loss_in(&mut g, cfg, &w, probs, views, tau_s).unwrap();
    g.backward(loss).unwrap();
    let grads = vars.iter().map(|&v| g.grad(v).cloned().unwrap()).collect();
    (g.value(loss).data()[0], grads)
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let vit = micro(8);
    let cfg = micro_distill(2);
    for seed in 0..3 {
        let state = scrambled_state(&vit, seed);
        let views = multi_crop(&random_image(&mut rng(seed + 9), 12), &cfg, &mut rng(seed)).unwrap();
        let probs: Vec<Vec<f64>> = views[..2]
            .iter()
            .map(|v| sharpen(&logits(&state.teacher, v), cfg.tau_t, state.center.as_deref()).unwrap())
            .collect();
        let params: Vec<Tensor> = state.student.weights.iter().cloned().collect();
        let (_, analytic) = student_loss(&vit, &params, &probs, &views, cfg.tau_s);
        let err = compare_sampled(&params, &analytic, &mut rng(seed), 4, 8, |ps| {
            student_loss(&vit, ps, &probs, &views, cfg.tau_s).0
        });
        assert!(err < FD_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn ema_examples() {
    let vit = micro(4);
    let mut state = scrambled_state(&vit, 3);
    let before = state.teacher.clone();
    ema_update(&mut state, 1.0).unwrap();
    assert_eq!(state.teacher, before);
    ema_update(&mut state, 0.0).unwrap();
    assert_eq!(state.teacher.weights, state.student.weights);

    state.teacher.weights.cls_token.data_mut()[0] = 2.0;
    state.student.weights.cls_token.data_mut()[0] = 4.0;
    ema_update(&mut state, 0.5).unwrap();
    assert_eq!(state.teacher.weights.cls_token.data()[0], 3.0);
    assert_eq!(ema_update(&mut state, 1.5), Err(DistillError::Lambda(1.5)));
    assert!(ema_update(&mut state, -0.1).is_err());
}

fn blob_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut r = rng(seed);
    (0..n)
        .map(|k| {
            let (cy, cx) = (r.random_range(0.0..size as f64), r.random_range(0.0..size as f64));
            let data = (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f64, (i % size) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (-d2 / (2.0 + k as f64)).exp() * 2.0 - 1.0 + r.random_range(-0.1..0.1)
                })
                .collect();
            Image::new(1, size, size, data).unwrap()
        })
        .collect()
}

#[test]
fn one_epoch_over_one_image_moves_the_teacher() {
    let vit = micro(4);
    let cfg = DistillConfig {
        batch_size: 1,
        ..micro_distill(2)
    };
    let images = blob_images(1, 10, 0);
    let init = DistillState::new(&vit, true, &mut rng(4)).unwrap();
    let (state, log) = pretrain_with_state(init.clone(), &images, &cfg, 4).unwrap();
    assert_eq!(log.steps.len(), 1);
    assert!(log.steps[0].loss.is_finite());
    assert_eq!(log.steps[0].lambda, cfg.lambda_base);
    assert_ne!(state.teacher, init.teacher);
    assert_eq!(state.step, 1);
}

#[test]
fn pretraining_is_deterministic() {
    let vit = micro(6);
    let cfg = DistillConfig {
        batch_size: 2,
        epochs: 2,
        momentum: 0.9,
        ..micro_distill(2)
    };
    let images = blob_images(5, 10, 1);
    let a = pretrain(&images, &vit, &cfg, 17).unwrap();
    let b = pretrain(&images, &vit, &cfg, 17).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.steps.len(), 6);
    let c = pretrain(&images, &vit, &cfg, 18).unwrap();
    assert_ne!(a.0.teacher, c.0.teacher);
}

#[test]
fn epoch_mode_holds_the_teacher_within_an_epoch() {
    let vit = micro(4);
    let cfg = DistillConfig {
        ema_mode: EmaMode::Epoch,
        batch_size: 1,
        epochs: 2,
        steps_per_epoch: Some(3),
        ..micro_distill(1)
    };
    let images = blob_images(3, 10, 2);
    let (_, log) = pretrain(&images, &vit, &cfg, 5).unwrap();
    let lambdas: Vec<f64> = log.steps.iter().map(|s| s.lambda).collect();
    let at_end = cosine_lambda(1, 2, cfg.lambda_base).unwrap();
    assert_eq!(lambdas, vec![1.0, 1.0, cfg.lambda_base, 1.0, 1.0, at_end]);
}

#[test]
fn non_finite_weights_abort_with_the_step_index() {
    let vit = micro(4);
    let mut state = DistillState::new(&vit, true, &mut rng(0)).unwrap();
    state.step = 7;
    state.student.weights.head_bias.data_mut()[0] = f64::NAN;
    let err = pretrain_with_state(state, &blob_images(2, 10, 3), &micro_distill(1), 0).unwrap_err();
    assert!(matches!(err, DistillError::NonFiniteLoss { step: 7, .. }), "{err:?}");
}

#[test]
fn empty_dataset_and_small_images_are_rejected() {
    let vit = micro(4);
    assert_eq!(
        pretrain(&[], &vit, &micro_distill(1), 0).unwrap_err(),
        DistillError::EmptyDataset
    );
    let tiny = vec![Image::zeros(1, 6, 6)];
    assert!(matches!(
        pretrain(&tiny, &vit, &micro_distill(1), 0),
        Err(DistillError::ImageTooSmall { .. })
    ));
}

proptest! {
    #[test]
    fn sharpen_is_a_distribution_and_shift_invariant(
        logits in prop::collection::vec(-50.0f64..50.0, 1..20),
        tau in 0.01f64..5.0,
        shift in -100.0f64..100.0,
    ) {
        let p = sharpen(&logits, tau, None).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let q = sharpen(&shifted, tau, None).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_lambda_is_monotone(total in 1usize..500, base in 0.0f64..1.0) {
        let mut prev = cosine_lambda(0, total, base).unwrap();
        prop_assert_eq!(prev, base);
        for s in 1..=total {
            let next = cosine_lambda(s, total, base).unwrap();
            prop_assert!(next >= prev);
            prev = next;
        }
        prop_assert_eq!(prev, 1.0);
    }
}
