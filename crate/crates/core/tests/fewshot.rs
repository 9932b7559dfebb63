mod common;

use std::collections::BTreeMap;

use common::rng;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslvit::data::EmbeddingStore;
use sslvit::fewshot::{
    calibrate, class_statistics, evaluate_fewshot, evaluate_tasks, extract_feature, fit_logistic, run_episode,
    sample_augmented, ClassStatistics, EmbeddingTasks, Episode, FewShotConfig, FewShotError, SyntheticTasks,
    SyntheticTasksConfig, TaskSource,
};
use sslvit::vit::{encode, Image, ViTConfig, ViTParams};

fn random_rows(r: &mut ChaCha8Rng, n: usize, d: usize, offset: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|j| offset + j as f64 + r.random_range(-2.0..2.0) * (1.0 + j as f64)).collect())
        .collect()
}

fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= n - 1.0);
    (mean, cov)
}

#[test]
fn statistics_match_two_pass_oracle() {
    let mut r = rng(0);
    let mut f = BTreeMap::new();
    f.insert(3, random_rows(&mut r, 1000, 6, 50.0));
    f.insert(1, random_rows(&mut r, 2, 6, -3.0));
    let stats = class_statistics(&f).unwrap();
    assert_eq!(stats.iter().map(|s| s.class_id).collect::<Vec<_>>(), vec![1, 3]);
    for s in &stats {
        let (mean, cov) = two_pass(&f[&s.class_id]);
        for j in 0..6 {
            assert!((s.mean[j] - mean[j]).abs() < 1e-10);
            for k in 0..6 {
                assert!((s.covariance[(j, k)] - cov[j][k]).abs() < 1e-10);
                assert_eq!(s.covariance[(j, k)], s.covariance[(k, j)]);
            }
        }
    }
}

#[test]
fn mismatched_lengths_are_rejected() {
    let mut f = BTreeMap::new();
    f.insert(0, vec![vec![0.0, 1.0], vec![1.0]]);
    assert!(matches!(class_statistics(&f), Err(FewShotError::Dimension { .. })));
}

fn stat(id: u32, mean: &[f64], cov: &[f64]) -> ClassStatistics {
    let d = mean.len();
    ClassStatistics {
        class_id: id,
        mean: DVector::from_column_slice(mean),
        covariance: DMatrix::from_row_slice(d, d, cov),
        count: 5,
    }
}

#[test]
fn calibration_hand_computation() {
    let base = vec![
        stat(0, &[4.0, 0.0], &[2.0, 0.5, 0.5, 1.0]),
        stat(1, &[0.0, 3.0], &[1.0, -0.25, -0.25, 3.0]),
        stat(2, &[-9.0, -9.0], &[7.0, 0.0, 0.0, 7.0]),
    ];
    let x = DVector::from_column_slice(&[1.0, 1.0]);
    // distances²: 10, 5, 200 → class 1 first, then 0
    let c = calibrate(&x, &base, 2, 0.5).unwrap();
    assert_eq!(c.neighbors, vec![1, 0]);
    assert!((c.mean[0] - (0.0 + 4.0 + 1.0) / 3.0).abs() < 1e-15);
    assert!((c.mean[1] - (3.0 + 0.0 + 1.0) / 3.0).abs() < 1e-15);
    let want = [(1.0 + 2.0) / 2.0 + 0.5, 0.25 / 2.0, 0.25 / 2.0, (3.0 + 1.0) / 2.0 + 0.5];
    for (got, want) in c.covariance.iter().zip(want) {
        assert!((got - want).abs() < 1e-15);
    }
    let one = calibrate(&x, &base, 1, 0.0).unwrap();
    assert_eq!(one.mean.as_slice(), &[0.5, 2.0]);
    assert_eq!(one.covariance, base[1].covariance);
    // a support feature sitting on a base mean picks that class first
    let on = calibrate(&base[2].mean, &base, 1, 0.0).unwrap();
    assert_eq!(on.neighbors, vec![2]);
}

fn random_base(r: &mut ChaCha8Rng, classes: usize, d: usize) -> Vec<ClassStatistics> {
    let mut f = BTreeMap::new();
    for c in 0..classes {
        let off = r.random_range(-5.0..5.0);
        f.insert(c as u32, random_rows(r, 3 + c % 4, d, off));
    }
    class_statistics(&f).unwrap()
}

proptest! {
    #[test]
    fn loading_bounds_the_smallest_eigenvalue(seed in any::<u64>(), alpha in 0.01f64..2.0, k in 1usize..4) {
        let mut r = rng(seed);
        let base = random_base(&mut r, 5, 3);
        let x = DVector::from_fn(3, |_, _| r.random_range(-5.0..5.0));
        let c = calibrate(&x, &base, k, alpha).unwrap();
        let min = SymmetricEigen::new(c.covariance.clone()).eigenvalues.min();
        prop_assert!(min >= alpha - 1e-10);
        prop_assert_eq!(&c.covariance, &c.covariance.transpose());
    }

    #[test]
    fn calibration_is_translation_consistent(seed in any::<u64>(), k in 1usize..5) {
        let mut r = rng(seed);
        let base = random_base(&mut r, 6, 4);
        let x = DVector::from_fn(4, |_, _| r.random_range(-5.0..5.0));
        let v = DVector::from_fn(4, |_, _| r.random_range(-3.0..3.0));
        let moved: Vec<ClassStatistics> = base.iter().map(|b| ClassStatistics { mean: &b.mean + &v, ..b.clone() }).collect();
        let a = calibrate(&x, &base, k, 0.21).unwrap();
        let b = calibrate(&(&x + &v), &moved, k, 0.21).unwrap();
        prop_assert_eq!(&a.neighbors, &b.neighbors);
        prop_assert_eq!(&a.covariance, &b.covariance);
        prop_assert!((&a.mean + &v - &b.mean).amax() < 1e-12);
    }

    #[test]
    fn statistics_are_symmetric_and_psd(seed in any::<u64>(), n in 2usize..30, d in 1usize..7) {
        let mut r = rng(seed);
        let mut f = BTreeMap::new();
        f.insert(0, random_rows(&mut r, n, d, 0.0));
        let s = &class_statistics(&f).unwrap()[0];
        prop_assert_eq!(&s.covariance, &s.covariance.transpose());
        let eig = SymmetricEigen::new(s.covariance.clone()).eigenvalues;
        prop_assert!(eig.min() >= -1e-8 * eig.max().abs().max(1e-300));
    }
}

#[test]
fn augmented_samples_are_seeded() {
    let base = vec![stat(0, &[1.0, 2.0], &[1.0, 0.3, 0.3, 0.5])];
    let dist = calibrate(&DVector::from_column_slice(&[0.0, 0.0]), &base, 1, 0.1).unwrap();
    let a = sample_augmented(&dist, 1, &mut rng(5)).unwrap();
    let b = sample_augmented(&dist, 1, &mut rng(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn semidefinite_covariance_uses_the_eigen_path() {
    // rank one: Cholesky fails, samples still follow the covariance
    let v = DVector::from_column_slice(&[1.0, 2.0, -1.0]);
    let dist = sslvit::fewshot::CalibratedDistribution {
        mean: DVector::zeros(3),
        covariance: &v * v.transpose(),
        source_support_index: 0,
        neighbors: vec![],
    };
    let draws = sample_augmented(&dist, 2000, &mut rng(1)).unwrap();
    for s in &draws {
        // every draw lies on the line spanned by v
        let t = s.dot(&v) / v.norm_squared();
        assert!((s - &v * t).amax() < 1e-9);
    }
}

fn blobs(r: &mut ChaCha8Rng, centers: &[[f64; 2]], per: usize, sigma: f64) -> (Vec<DVector<f64>>, Vec<u32>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (c, m) in centers.iter().enumerate() {
        for _ in 0..per {
            xs.push(DVector::from_fn(2, |j, _| m[j] + sigma * r.random_range(-1.0..1.0)));
            ys.push(c as u32 * 10);
        }
    }
    (xs, ys)
}

#[test]
fn separable_blobs_are_fit_exactly() {
    let (xs, ys) = blobs(&mut rng(2), &[[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]], 20, 1.0);
    let m = fit_logistic(&xs, &ys, 1e-3, 5000, 1e-6).unwrap();
    assert_eq!(m.classes, vec![0, 10, 20]);
    assert!(xs.iter().zip(&ys).all(|(x, &y)| m.predict(x) == y));
}

#[test]
fn duplicated_data_gives_the_same_weights() {
    let (xs, ys) = blobs(&mut rng(3), &[[0.0, 0.0], [1.5, 0.5]], 10, 1.0);
    let a = fit_logistic(&xs, &ys, 0.1, 5000, 1e-6).unwrap();
    let doubled: Vec<DVector<f64>> = xs.iter().chain(&xs).cloned().collect();
    let labels: Vec<u32> = ys.iter().chain(&ys).copied().collect();
    let b = fit_logistic(&doubled, &labels, 0.1, 5000, 1e-6).unwrap();
    assert!(a.converged && b.converged);
    // the objective is unchanged; the two runs differ only in rounding
    assert!((&a.weights - &b.weights).amax() < 1e-5);
    assert!((&a.bias - &b.bias).amax() < 1e-5);
}

fn blob_episode(r: &mut ChaCha8Rng, query_equals_support: bool) -> Episode {
    let centers = [[0.0, 0.0], [8.0, 0.0], [0.0, 8.0], [8.0, 8.0], [-8.0, 0.0]];
    let (support, support_labels) = blobs(r, &centers, 1, 0.5);
    let (query, query_labels) = if query_equals_support {
        (support.clone(), support_labels.clone())
    } else {
        blobs(r, &centers, 15, 0.5)
    };
    Episode {
        way: 5,
        shot: 1,
        query_per_class: if query_equals_support { 1 } else { 15 },
        support,
        support_labels,
        query,
        query_labels,
    }
}

#[test]
fn memorized_support_is_classified_perfectly() {
    let ep = blob_episode(&mut rng(4), true);
    let cfg = FewShotConfig {
        n_augment: 0,
        ..FewShotConfig::default()
    };
    assert_eq!(run_episode(&ep, &[], &cfg, &mut rng(0)).unwrap(), 1.0);
}

#[test]
fn without_augmentation_an_episode_is_plain_logistic_regression() {
    let mut r = rng(6);
    let ep = blob_episode(&mut r, false);
    assert_eq!(ep.query.len(), 75);
    ep.validate().unwrap();
    let cfg = FewShotConfig {
        n_augment: 0,
        k: 99,
        ..FewShotConfig::default()
    };
    let acc = run_episode(&ep, &[], &cfg, &mut rng(0)).unwrap();
    let m = fit_logistic(&ep.support, &ep.support_labels, cfg.l2, cfg.max_iter, cfg.tolerance).unwrap();
    let correct = ep.query.iter().zip(&ep.query_labels).filter(|(q, &y)| m.predict(q) == y).count();
    assert_eq!(acc, correct as f64 / 75.0);
}

#[test]
fn malformed_episodes_are_rejected() {
    let mut ep = blob_episode(&mut rng(7), false);
    ep.query_labels[0] = 99;
    assert!(matches!(ep.validate(), Err(FewShotError::Invalid(_))));
}

#[test]
fn task_results_depend_only_on_seed_and_index() {
    let family = SyntheticTasks::new(&SyntheticTasksConfig::default(), 3).unwrap();
    let base = class_statistics(&family.base_features).unwrap();
    let cfg = FewShotConfig {
        n_augment: 20,
        tasks: 12,
        ..FewShotConfig::default()
    };
    let all = evaluate_fewshot(&family, &base, &cfg, 42).unwrap();
    let first = evaluate_fewshot(&family, &base, &FewShotConfig { tasks: 5, ..cfg.clone() }, 42).unwrap();
    assert_eq!(&all.accuracies[..5], first.accuracies.as_slice());

    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let threaded = pool.install(|| evaluate_fewshot(&family, &base, &cfg, 42).unwrap());
    assert_eq!(threaded, all);

    // evaluating the same tasks in reverse order gives the same mean
    let reversed = evaluate_tasks(cfg.tasks, 42, |i, _| {
        let j = cfg.tasks - 1 - i;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(j as u64);
        let ep = family.sample(&cfg, &mut rng)?;
        run_episode(&ep, &base, &cfg, &mut rng)
    })
    .unwrap();
    let mut sorted_a = all.accuracies.clone();
    let mut sorted_b = reversed.accuracies.clone();
    sorted_a.sort_by(f64::total_cmp);
    sorted_b.sort_by(f64::total_cmp);
    assert_eq!(sorted_a, sorted_b);
    assert!((all.mean - reversed.mean).abs() < 1e-15);
}

#[test]
fn separable_embeddings_are_easy() {
    let mut r = rng(8);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..10u32 {
        let center: Vec<f64> = (0..6).map(|_| r.random_range(-20.0..20.0)).collect();
        for _ in 0..20 {
            rows.push(center.iter().map(|m| m + r.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    let store = EmbeddingStore::from_rows(&rows, labels).unwrap();
    let tasks = EmbeddingTasks::new(&store);
    let base = class_statistics(&sslvit::fewshot::group_by_class(&store)).unwrap();
    let cfg = FewShotConfig {
        tasks: 100,
        n_augment: 50,
        ..FewShotConfig::default()
    };
    let s = evaluate_fewshot(&tasks, &base, &cfg, 1).unwrap();
    assert!(s.mean > 0.9, "{}", s.mean);
    let one = evaluate_fewshot(&tasks, &base, &FewShotConfig { tasks: 1, ..cfg.clone() }, 1).unwrap();
    assert_eq!(one.ci95, None);
    let too_wide = FewShotConfig { way: 11, ..cfg };
    assert!(evaluate_fewshot(&tasks, &base, &too_wide, 1).is_err());
}

#[test]
fn features_are_teacher_embeddings() {
    let cfg = ViTConfig::default();
    let teacher = ViTParams::init(&cfg, &mut rng(0)).unwrap();
    let mut r = rng(1);
    let img = Image::new(3, 32, 32, (0..3 * 32 * 32).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let f = extract_feature(&teacher, &img).unwrap();
    assert_eq!(f.len(), 64);
    assert_eq!(f, encode(&teacher, &img).unwrap().into_data());
    assert_eq!(f, extract_feature(&teacher, &img).unwrap());
}
