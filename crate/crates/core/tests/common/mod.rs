#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslvit::tensor::{finite_difference, Graph, Tensor, TensorError, Var};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Normwise relative error ‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, 1e-8).
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a.max_abs_diff(b).unwrap();
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(1e-8f64, |m, v| m.max(v.abs()));
    diff / scale
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds `build(params)` on a fresh graph, backpropagates, and compares
/// against central differences. Returns the worst relative error.
pub fn check_gradients(
    params: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    let numeric = finite_difference(
        |ps| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
            let loss = build(&mut g, &vars)?;
            Ok::<_, TensorError>(g.value(loss).item().unwrap())
        },
        params,
        FD_EPS,
    )
    .unwrap();
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Full central-difference check of `analytic` against the scalar function
/// `f`. Returns the worst normwise relative error over the tensors.
pub fn compare_full(params: &[Tensor], analytic: &[Tensor], mut f: impl FnMut(&[Tensor]) -> f64) -> f64 {
    let numeric = finite_difference(|ps| Ok::<_, ()>(f(ps)), params, FD_EPS).unwrap();
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Spot check for large parameter sets: central differences along
/// `directions` random unit directions plus `coords` coordinates sampled per
/// tensor. Directional errors are relative; the sampled coordinates are
/// compared normwise as one vector.
pub fn compare_sampled(
    params: &[Tensor],
    analytic: &[Tensor],
    rng: &mut ChaCha8Rng,
    directions: usize,
    coords: usize,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for _ in 0..directions {
        let dir: Vec<Tensor> = params.iter().map(|p| random_tensor(rng, p.shape(), -1.0, 1.0)).collect();
        let norm = dir.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        let along = |sign: f64, work: &mut Vec<Tensor>| {
            for ((w, p), d) in work.iter_mut().zip(params).zip(&dir) {
                for ((x, &p0), &dv) in w.data_mut().iter_mut().zip(p.data()).zip(d.data()) {
                    *x = p0 + sign * FD_EPS * dv / norm;
                }
            }
        };
        along(1.0, &mut work);
        let plus = f(&work);
        along(-1.0, &mut work);
        let minus = f(&work);
        let numeric = (plus - minus) / (2.0 * FD_EPS);
        let exact: f64 = analytic
            .iter()
            .zip(&dir)
            .flat_map(|(a, d)| a.data().iter().zip(d.data()))
            .map(|(a, d)| a * d / norm)
            .sum();
        worst = worst.max((exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-8));
    }
    work.clone_from_slice(params);
    let (mut a_vec, mut n_vec) = (Vec::new(), Vec::new());
    for t in 0..params.len() {
        for _ in 0..coords {
            let i = rng.random_range(0..params[t].numel());
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + FD_EPS;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - FD_EPS;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            a_vec.push(analytic[t].data()[i]);
            n_vec.push((plus - minus) / (2.0 * FD_EPS));
        }
    }
    if !a_vec.is_empty() {
        worst = worst.max(rel_err(&Tensor::vector(&a_vec), &Tensor::vector(&n_vec)));
    }
    worst
}
