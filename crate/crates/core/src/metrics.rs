//! Fairness metrics, accuracy, constraint-violation sums, static regret and
//! windowed adaptive-regret estimates against offline comparators.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::RunOutput;
use crate::error::{Error, Result};
use crate::model::{loss, loss_grad, scores, LossSpec, TaskBatch};
use crate::optim::{project_ball, Ball};

/// Hard predictions: `+1` iff the score is strictly positive.
pub fn predictions(theta: &Array1<f64>, batch: &TaskBatch) -> Result<Vec<i8>> {
    Ok(scores(theta, batch)?.iter().map(|&s| if s > 0.0 { 1 } else { -1 }).collect())
}

pub fn accuracy(predictions: &[i8], labels: &[i8]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

fn fold(k: f64) -> f64 {
    if k <= 1.0 {
        k
    } else {
        1.0 / k
    }
}

/// Positive-prediction rate within the rows selected by `keep`.
fn positive_rate(predictions: &[i8], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut n, mut pos) = (0usize, 0usize);
    for (i, &p) in predictions.iter().enumerate() {
        if keep(i) {
            n += 1;
            pos += (p == 1) as usize;
        }
    }
    (n > 0).then(|| pos as f64 / n as f64)
}

fn folded_ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Some(fold(a / b)),
        _ => None,
    }
}

/// `P(Ŷ=1 | S=−1) / P(Ŷ=1 | S=1)` folded into `(0, 1]`; `None` when either
/// group is absent or has no positive predictions.
pub fn demographic_parity(predictions: &[i8], protected: &[i8]) -> Option<f64> {
    let neg = positive_rate(predictions, |i| protected[i] == -1);
    let pos = positive_rate(predictions, |i| protected[i] == 1);
    folded_ratio(neg, pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EqualizedOdds {
    /// Minimum of the per-label values; `None` if either is undefined.
    pub value: Option<f64>,
    /// Folded ratio conditioned on `y = −1`.
    pub neg: Option<f64>,
    /// Folded ratio conditioned on `y = +1`.
    pub pos: Option<f64>,
}

pub fn equalized_odds(predictions: &[i8], labels: &[i8], protected: &[i8]) -> EqualizedOdds {
    let per_y = |y: i8| {
        let a = positive_rate(predictions, |i| labels[i] == y && protected[i] == -1);
        let b = positive_rate(predictions, |i| labels[i] == y && protected[i] == 1);
        folded_ratio(a, b)
    };
    let (neg, pos) = (per_y(-1), per_y(1));
    let value = match (neg, pos) {
        (Some(a), Some(b)) => Some(a.min(b)),
        _ => None,
    };
    EqualizedOdds { value, neg, pos }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub raw: f64,
    pub clipped: f64,
}

pub fn cumulative_violation(g: &[f64]) -> Violation {
    Violation { raw: g.iter().sum(), clipped: g.iter().map(|v| v.max(0.0)).sum() }
}

/// Offline projected gradient descent over the ball on `Σ_t f_t(θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparatorSolver {
    pub ball: Ball,
    pub loss: LossSpec,
    /// Stop once the gradient-mapping norm falls to this level.
    pub tolerance: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorResult {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ComparatorSolver {
    pub fn new(ball: Ball, loss: LossSpec) -> Self {
        Self { ball, loss, tolerance: 1e-8, max_iter: 100_000 }
    }

    pub fn objective(&self, theta: &Array1<f64>, batches: &[&TaskBatch]) -> Result<f64> {
        batches.iter().map(|b| loss(theta, b, &self.loss)).sum()
    }

    fn gradient(&self, theta: &Array1<f64>, batches: &[&TaskBatch]) -> Result<Array1<f64>> {
        let mut g = Array1::zeros(theta.len());
        for b in batches {
            g += &loss_grad(theta, b, &self.loss)?;
        }
        Ok(g)
    }

    /// Global curvature bound: `σ(1−σ) ≤ ¼` gives
    /// `∇²f ⪯ Σ_t (XᵀX / 4n_t + l2·I)`.
    fn lipschitz(&self, batches: &[&TaskBatch], d: usize) -> f64 {
        let mut m = Array2::<f64>::zeros((d, d));
        for b in batches {
            let x = b.features();
            m.scaled_add(0.25 / b.len() as f64, &x.t().dot(x));
        }
        let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
        let mut top = 0.0;
        for _ in 0..200 {
            let w = m.dot(&v);
            let n = w.dot(&w).sqrt();
            if n == 0.0 {
                break;
            }
            top = n;
            v = w / n;
        }
        // power iteration approaches from below; pad it
        1.05 * top + self.loss.l2 * batches.len() as f64 + 1e-12
    }

    pub fn solve(&self, batches: &[&TaskBatch]) -> Result<ComparatorResult> {
        let Some(first) = batches.first() else {
            return Err(Error::DegenerateInput("comparator over an empty window".into()));
        };
        let d = first.dim();
        let step = 1.0 / self.lipschitz(batches, d);
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::Numerical { round: 0, detail: "comparator curvature bound not finite".into() });
        }
        let mut theta = Array1::zeros(d);
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        while iterations < self.max_iter {
            let g = self.gradient(&theta, batches)?;
            let next = project_ball(&(&theta - &(&g * step)), &self.ball);
            let diff = &theta - &next;
            residual = diff.dot(&diff).sqrt() / step;
            if !residual.is_finite() {
                return Err(Error::Numerical { round: 0, detail: "comparator iterate not finite".into() });
            }
            if residual <= self.tolerance {
                break;
            }
            theta = next;
            iterations += 1;
        }
        let objective = self.objective(&theta, batches)?;
        if !objective.is_finite() {
            return Err(Error::Numerical { round: 0, detail: "comparator objective not finite".into() });
        }
        Ok(ComparatorResult {
            theta: theta.to_vec(),
            objective,
            residual,
            iterations,
            converged: residual <= self.tolerance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticRegret {
    pub regret: f64,
    pub algorithm_loss: f64,
    pub comparator: ComparatorResult,
    pub approximate: bool,
}

/// `Σ f_t(θ_t) − min_{θ∈B} Σ f_t(θ)` with `losses[t] = f_t(θ_t)`.
pub fn static_regret(losses: &[f64], batches: &[&TaskBatch], solver: &ComparatorSolver) -> Result<StaticRegret> {
    if losses.len() != batches.len() {
        return Err(Error::Config(format!("{} losses for {} batches", losses.len(), batches.len())));
    }
    let comparator = solver.solve(batches)?;
    let algorithm_loss: f64 = losses.iter().sum();
    Ok(StaticRegret {
        regret: algorithm_loss - comparator.objective,
        algorithm_loss,
        approximate: !comparator.converged,
        comparator,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub start: usize,
    pub end: usize,
    pub loss_regret: f64,
    pub constraint_sums: Vec<f64>,
    pub residual: f64,
    pub approximate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub tau: usize,
    pub stride: usize,
    pub windows: Vec<WindowReport>,
    pub max_loss_regret: f64,
    pub max_constraint_sums: Vec<f64>,
    pub max_residual: f64,
    pub approximate: bool,
}

/// Exhaustive windows up to `T = 256`, then stride `max(1, τ/4)`.
pub fn default_stride(horizon: usize, tau: usize) -> usize {
    if horizon <= 256 {
        1
    } else {
        (tau / 4).max(1)
    }
}

/// Max over windows `[s, s+τ−1]` of the window regret and of each window
/// constraint sum. `g[t]` holds the constraint values of round `t + 1`.
pub fn fair_sar_estimate(
    losses: &[f64],
    g: &[Vec<f64>],
    batches: &[&TaskBatch],
    tau: usize,
    stride: Option<usize>,
    solver: &ComparatorSolver,
) -> Result<RegretReport> {
    let horizon = losses.len();
    if batches.len() != horizon || g.len() != horizon {
        return Err(Error::Config("loss, constraint and batch series differ in length".into()));
    }
    if tau == 0 || tau > horizon {
        return Err(Error::Config(format!("window length {tau} outside [1, {horizon}]")));
    }
    let stride = stride.unwrap_or_else(|| default_stride(horizon, tau));
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let m = g.first().map_or(0, Vec::len);
    let starts: Vec<usize> = (0..=horizon - tau).step_by(stride).collect();
    let windows = starts
        .par_iter()
        .map(|&s| {
            let r = static_regret(&losses[s..s + tau], &batches[s..s + tau], solver)?;
            let constraint_sums = (0..m).map(|i| g[s..s + tau].iter().map(|v| v[i]).sum()).collect();
            Ok(WindowReport {
                start: s + 1,
                end: s + tau,
                loss_regret: r.regret,
                constraint_sums,
                residual: r.comparator.residual,
                approximate: r.approximate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_loss_regret = windows.iter().map(|w| w.loss_regret).fold(f64::NEG_INFINITY, f64::max);
    let max_constraint_sums = (0..m)
        .map(|i| windows.iter().map(|w| w.constraint_sums[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let max_residual = windows.iter().map(|w| w.residual).fold(0.0, f64::max);
    let approximate = windows.iter().any(|w| w.approximate);
    Ok(RegretReport { tau, stride, windows, max_loss_regret, max_constraint_sums, max_residual, approximate })
}

fn tail_mean(series: &[Option<f64>], fraction: f64) -> Option<f64> {
    let n = series.len();
    let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let vals: Vec<f64> = series[n - take..].iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Tail-window mean of a series with undefined rounds skipped.
pub fn tail_mean_defined(series: &[Option<f64>], fraction: f64) -> Result<Option<f64>> {
    if series.is_empty() || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config("tail needs a nonempty series and a fraction in (0, 1]".into()));
    }
    Ok(tail_mean(series, fraction))
}

/// Whether mean DP and mean EO over the trailing `fraction` of rounds both
/// exceed 0.8. `None` when either tail is entirely undefined.
pub fn eighty_percent_check(dp: &[Option<f64>], eo: &[Option<f64>], fraction: f64) -> Result<Option<bool>> {
    let (Some(d), Some(e)) = (tail_mean_defined(dp, fraction)?, tail_mean_defined(eo, fraction)?) else {
        return Ok(None);
    };
    Ok(Some(d > 0.8 && e > 0.8))
}

/// Per-round metric columns of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub accuracy: Vec<f64>,
    pub dp: Vec<Option<f64>>,
    pub eo: Vec<Option<f64>>,
    pub val_loss: Vec<f64>,
    pub g: Vec<Vec<f64>>,
    pub cumulative_g: Vec<Vec<f64>>,
    pub env_boundaries: Vec<usize>,
}

impl MetricSeries {
    pub fn from_run(run: &RunOutput, env_boundaries: &[usize]) -> Self {
        let m = run.records.first().map_or(0, |r| r.g.len());
        let mut acc = vec![0.0; m];
        let mut cumulative_g = Vec::with_capacity(run.records.len());
        for r in &run.records {
            for (a, v) in acc.iter_mut().zip(&r.g) {
                *a += v;
            }
            cumulative_g.push(acc.clone());
        }
        Self {
            accuracy: run.records.iter().map(|r| r.val_acc).collect(),
            dp: run.records.iter().map(|r| r.dp).collect(),
            eo: run.records.iter().map(|r| r.eo.value).collect(),
            val_loss: run.records.iter().map(|r| r.val_loss).collect(),
            g: run.records.iter().map(|r| r.g.clone()).collect(),
            cumulative_g,
            env_boundaries: env_boundaries.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparator_rejects_overflowing_curvature() {
        let b = TaskBatch::new(ndarray::array![[1.0], [-1.0]], vec![1, -1], vec![1, -1], 1).unwrap();
        let solver = ComparatorSolver::new(Ball::new(0.5).unwrap(), LossSpec { l2: 1e308 });
        assert!(matches!(solver.solve(&[&b, &b]), Err(Error::Numerical { .. })));
    }

    #[test]
    fn dp_examples() {
        // group −1: 2/5 positive, group +1: 1/2 positive
        let s = [-1, -1, -1, -1, -1, 1, 1, 1, 1];
        let p = [1, 1, -1, -1, -1, 1, 1, -1, -1];
        assert!((demographic_parity(&p, &s).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(demographic_parity(&[1, -1, 1, -1], &[1, 1, -1, -1]), Some(1.0));
        assert_eq!(demographic_parity(&[-1, -1, 1, 1], &[-1, -1, 1, 1]), None);
    }

    #[test]
    fn dp_fold_symmetric_in_groups() {
        let p = [1, 1, -1, -1, -1, 1, 1, -1, -1];
        let s = [-1, -1, -1, -1, -1, 1, 1, 1, 1];
        let flipped: Vec<i8> = s.iter().map(|v| -v).collect();
        assert_eq!(demographic_parity(&p, &s), demographic_parity(&p, &flipped));
    }

    #[test]
    fn eo_min_rule_and_guard() {
        // y=+1: rates 0.9 vs 1.0; y=−1: rates 0.7 vs 1.0
        let mut p = Vec::new();
        let mut y = Vec::new();
        let mut s = Vec::new();
        for (label, group, pos, n) in [(1, -1, 9, 10), (1, 1, 10, 10), (-1, -1, 7, 10), (-1, 1, 10, 10)] {
            for i in 0..n {
                p.push(if i < pos { 1 } else { -1 });
                y.push(label);
                s.push(group);
            }
        }
        let eo = equalized_odds(&p, &y, &s);
        assert!((eo.pos.unwrap() - 0.9).abs() < 1e-15);
        assert!((eo.neg.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(eo.value, eo.neg);
        let eo = equalized_odds(&[1, 1, 1], &[1, 1, -1], &[1, -1, 1]);
        assert_eq!(eo.value, None);
        assert_eq!(equalized_odds(&[1, 1], &[1, 1], &[1, -1]).pos, Some(1.0));
    }

    #[test]
    fn violation_examples() {
        let v = cumulative_violation(&[-0.05; 10]);
        assert!((v.raw + 0.5).abs() < 1e-15);
        assert_eq!(v.clipped, 0.0);
        assert_eq!(cumulative_violation(&[1.0, -1.0]), Violation { raw: 0.0, clipped: 1.0 });
    }

    #[test]
    fn eighty_percent_examples() {
        let dp = vec![Some(0.9); 10];
        let eo = vec![Some(0.85); 10];
        assert_eq!(eighty_percent_check(&dp, &eo, 0.5).unwrap(), Some(true));
        assert_eq!(eighty_percent_check(&[Some(0.79); 4], &eo, 0.5).unwrap(), Some(false));
        let dp = [Some(0.2), Some(0.78), Some(0.84), None];
        let eo = [Some(0.1), Some(0.8), Some(0.86), None];
        assert_eq!(eighty_percent_check(&dp, &eo, 0.75).unwrap(), Some(true));
        assert_eq!(eighty_percent_check(&[None, None], &[Some(0.9); 2], 0.5).unwrap(), None);
    }
}
