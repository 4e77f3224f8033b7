#![allow(dead_code)]

use fairsaoml_core::engine::RunOutput;
use fairsaoml_core::model::TaskBatch;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Random batch with both groups and both labels present.
pub fn random_batch<R: Rng>(rng: &mut R, n: usize, d: usize) -> TaskBatch {
    assert!(n >= 4);
    let features = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    // first four rows cover every (y, s) cell
    let cells = [(1, 1), (1, -1), (-1, 1), (-1, -1)];
    let mut labels = Vec::with_capacity(n);
    let mut protected = Vec::with_capacity(n);
    for i in 0..n {
        let (y, s) = if let Some(&cell) = cells.get(i) {
            cell
        } else {
            (if rng.random::<bool>() { 1 } else { -1 }, if rng.random::<bool>() { 1 } else { -1 })
        };
        labels.push(y);
        protected.push(s);
    }
    TaskBatch::new(features, labels, protected, 1).unwrap()
}

pub fn random_vec<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>, h: f64) -> Array1<f64> {
    let mut g = Array1::zeros(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = a - b;
    let scale = a.dot(a).sqrt().max(b.dot(b).sqrt());
    if scale < 1e-14 {
        0.0
    } else {
        diff.dot(&diff).sqrt() / scale
    }
}

/// Every point of the `step` grid inside the radius-`r` disc in ℝ².
pub fn disc_grid(r: f64, step: f64) -> Vec<Array1<f64>> {
    let n = (r / step).floor() as i64;
    let mut out = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            let (x, y) = (i as f64 * step, j as f64 * step);
            if x * x + y * y <= r * r {
                out.push(ndarray::array![x, y]);
            }
        }
    }
    out
}

/// Meta pairs stay in the ball and duals stay nonnegative after every round.
pub fn feasibility_violations(out: &RunOutput) -> usize {
    out.pairs
        .iter()
        .filter(|p| p.theta.dot(&p.theta).sqrt() > out.s_radius + 1e-12 || p.lambda.iter().any(|&l| l < 0.0))
        .count()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
