#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use suffice::data::Dataset;
use suffice::model::{init_mlp, ModelParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random dataset where every group holds at least one sample.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, n_groups: usize) -> Dataset {
    assert!(n >= n_groups);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let groups: Vec<usize> = (0..n)
        .map(|i| if i < n_groups { i } else { rng.random_range(0..n_groups) })
        .collect();
    Dataset::new(
        x,
        d,
        labels,
        groups,
        (0..d).map(|j| format!("x{j}")).collect(),
        (0..n_groups).map(|g| g.to_string()).collect(),
    )
    .unwrap()
}

/// Random architecture within `[max_in, max_hidden, 1]`, sometimes without a
/// hidden layer, with nonzero biases so every parameter matters.
pub fn random_model(rng: &mut ChaCha8Rng, max_in: usize, max_hidden: usize) -> ModelParams {
    let d = rng.random_range(1..=max_in);
    let dims = if rng.random_bool(0.25) {
        vec![d, 1]
    } else {
        vec![d, rng.random_range(1..=max_hidden), 1]
    };
    let base = init_mlp(&dims, rng.random()).unwrap();
    let params: Vec<f64> = base.params().iter().map(|p| p + rng.random_range(-0.3..0.3)).collect();
    ModelParams::new(dims, base.activations().to_vec(), params).unwrap()
}

pub fn with_params(model: &ModelParams, params: Vec<f64>) -> ModelParams {
    ModelParams::new(model.dims().to_vec(), model.activations().to_vec(), params).unwrap()
}

/// Central differences of `f` over every parameter.
pub fn numeric_gradient(model: &ModelParams, h: f64, mut f: impl FnMut(&ModelParams) -> f64) -> Vec<f64> {
    let base = model.params().to_vec();
    (0..base.len())
        .map(|k| {
            let mut up = base.clone();
            up[k] += h;
            let mut down = base.clone();
            down[k] -= h;
            (f(&with_params(model, up)) - f(&with_params(model, down))) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between analytic and numeric gradients, counting
/// coordinates where both are below `floor` as agreeing when their absolute
/// difference is below `abs_tol`.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], floor: f64, abs_tol: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            if a.abs() < floor && n.abs() < floor {
                if (a - n).abs() < abs_tol {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Projection onto `{0 <= s <= 1} ∩ {sum s <= k}` by Dykstra's alternating
/// projections, which converges to the exact projection onto an
/// intersection of convex sets.
pub fn dykstra_projection(v: &[f64], k: f64, iters: usize) -> Vec<f64> {
    let n = v.len();
    let mut x = v.to_vec();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for _ in 0..iters {
        let y: Vec<f64> = x.iter().zip(&p).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect();
        for i in 0..n {
            p[i] = x[i] + p[i] - y[i];
        }
        let w: Vec<f64> = y.iter().zip(&q).map(|(a, b)| a + b).collect();
        let excess = w.iter().sum::<f64>() - k;
        let shift = if excess > 0.0 { excess / n as f64 } else { 0.0 };
        let z: Vec<f64> = w.iter().map(|a| a - shift).collect();
        for i in 0..n {
            q[i] = w[i] - z[i];
        }
        x = z;
    }
    x
}

/// Probability of `mask` (bit `i` of `code`) under independent Bernoullis.
pub fn mask_probability(s: &[f64], code: usize) -> f64 {
    s.iter()
        .enumerate()
        .map(|(i, &p)| if code >> i & 1 == 1 { p } else { 1.0 - p })
        .product()
}

/// Exact gradient of `sum_m p(m | s) R(m)` by enumerating all masks and
/// differentiating the product form directly.
pub fn exact_expected_gradient(s: &[f64], risk: &[f64]) -> Vec<f64> {
    let n = s.len();
    (0..n)
        .map(|i| {
            (0..1usize << n)
                .map(|code| {
                    let others: f64 = s
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(j, &p)| if code >> j & 1 == 1 { p } else { 1.0 - p })
                        .product();
                    let sign = if code >> i & 1 == 1 { 1.0 } else { -1.0 };
                    sign * others * risk[code]
                })
                .sum()
        })
        .collect()
}

pub fn mask_bits(code: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| code >> i & 1 == 1).collect()
}

pub fn mask_code(bits: &[bool]) -> usize {
    bits.iter().enumerate().map(|(i, &b)| usize::from(b) << i).sum()
}
