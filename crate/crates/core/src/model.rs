//! Data model, linear predictor, regularized logistic loss and the linear
//! group-fairness surrogates (DDP / DEO).
//!
//! The predictor is linear, `h(θ, e) = θᵀe`, so a fairness surrogate on a
//! fixed batch collapses to `|θᵀm| − ε` where `m` is the group-weighted
//! feature mean of the batch. [`FairnessDirection`] caches `m` so the engine
//! can evaluate both the value and its subgradient in `O(d)`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One round's labeled batch: features `e ∈ ℝ^d`, labels and protected
/// attribute in `{−1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    features: Array2<f64>,
    labels: Vec<i8>,
    protected: Vec<i8>,
    round: usize,
}

impl TaskBatch {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<i8>,
        protected: Vec<i8>,
        round: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::DegenerateInput("empty batch".into()));
        }
        if labels.len() != n || protected.len() != n {
            return Err(Error::DegenerateInput(format!(
                "length mismatch: {} feature rows, {} labels, {} protected",
                n,
                labels.len(),
                protected.len()
            )));
        }
        if let Some(v) = labels.iter().chain(protected.iter()).find(|v| v.abs() != 1) {
            return Err(Error::DegenerateInput(format!("value {v} not in {{-1, +1}}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite feature".into()));
        }
        Ok(Self { features, labels, protected, round })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn protected(&self) -> &[i8] {
        &self.protected
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn with_round(mut self, round: usize) -> Self {
        self.round = round;
        self
    }

    /// Rows at `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<TaskBatch> {
        if idx.is_empty() {
            return Err(Error::DegenerateInput("empty subset".into()));
        }
        Ok(TaskBatch {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            protected: idx.iter().map(|&i| self.protected[i]).collect(),
            round: self.round,
        })
    }

    /// Concatenates `(batch, row)` picks into one batch tagged with `round`.
    pub fn gather(picks: &[(&TaskBatch, usize)], round: usize) -> Result<TaskBatch> {
        let Some((first, _)) = picks.first() else {
            return Err(Error::DegenerateInput("empty gather".into()));
        };
        let d = first.dim();
        let mut features = Array2::zeros((picks.len(), d));
        let mut labels = Vec::with_capacity(picks.len());
        let mut protected = Vec::with_capacity(picks.len());
        for (k, (b, i)) in picks.iter().enumerate() {
            if b.dim() != d {
                return Err(Error::Config("dimension mismatch across batches".into()));
            }
            features.row_mut(k).assign(&b.features.row(*i));
            labels.push(b.labels[*i]);
            protected.push(b.protected[*i]);
        }
        Ok(TaskBatch { features, labels, protected, round })
    }

    /// Both protected groups present.
    pub fn has_both_groups(&self) -> bool {
        self.protected.contains(&1) && self.protected.contains(&-1)
    }

    /// True when `estimate_p1` is well defined for every kind in `specs`.
    pub fn supports_fairness(&self, specs: &[FairnessSpec]) -> bool {
        specs.iter().all(|s| estimate_p1(self, s.kind).is_ok())
    }
}

/// Primal weights `θ` and nonnegative duals `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPair {
    pub theta: Array1<f64>,
    pub lambda: Array1<f64>,
}

impl ParamPair {
    pub fn new(theta: Array1<f64>, lambda: Array1<f64>) -> Result<Self> {
        if lambda.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(Error::Config("dual variables must be finite and nonnegative".into()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite primal variable".into()));
        }
        Ok(Self { theta, lambda })
    }

    pub fn zeros(d: usize, m: usize) -> Self {
        Self { theta: Array1::zeros(d), lambda: Array1::zeros(m) }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.lambda.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessKind {
    /// Difference of demographic parity.
    Ddp,
    /// Difference of equality of opportunity.
    Deo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessSpec {
    pub kind: FairnessKind,
    pub epsilon: f64,
}

impl FairnessSpec {
    pub fn new(kind: FairnessKind, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(Self { kind, epsilon })
    }
}

impl Default for FairnessSpec {
    fn default() -> Self {
        Self { kind: FairnessKind::Ddp, epsilon: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub l2: f64,
}

impl LossSpec {
    pub fn new(l2: f64) -> Result<Self> {
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::Config(format!("l2 coefficient must be >= 0, got {l2}")));
        }
        Ok(Self { l2 })
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { l2: 1e-3 }
    }
}

fn check_dim(theta: &Array1<f64>, d: usize) -> Result<()> {
    if theta.len() != d {
        return Err(Error::Config(format!(
            "dimension mismatch: theta has {}, features have {d}",
            theta.len()
        )));
    }
    Ok(())
}

pub fn predict(theta: &Array1<f64>, e: ArrayView1<'_, f64>) -> Result<f64> {
    check_dim(theta, e.len())?;
    Ok(theta.dot(&e))
}

pub fn scores(theta: &Array1<f64>, batch: &TaskBatch) -> Result<Array1<f64>> {
    check_dim(theta, batch.dim())?;
    Ok(batch.features.dot(theta))
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

/// Mean logistic loss plus `(l2/2)‖θ‖²`.
pub fn loss(theta: &Array1<f64>, batch: &TaskBatch, spec: &LossSpec) -> Result<f64> {
    let s = scores(theta, batch)?;
    let n = batch.len() as f64;
    let data: f64 = s
        .iter()
        .zip(&batch.labels)
        .map(|(&si, &y)| softplus(-(y as f64) * si))
        .sum::<f64>()
        / n;
    Ok(data + 0.5 * spec.l2 * theta.dot(theta))
}

pub fn loss_grad(theta: &Array1<f64>, batch: &TaskBatch, spec: &LossSpec) -> Result<Array1<f64>> {
    let s = scores(theta, batch)?;
    let n = batch.len() as f64;
    // d/ds softplus(-y s) = -y σ(-y s)
    let coef: Array1<f64> = s
        .iter()
        .zip(&batch.labels)
        .map(|(&si, &y)| {
            let y = y as f64;
            -y * sigmoid(-y * si) / n
        })
        .collect();
    let mut g = batch.features.t().dot(&coef);
    g.scaled_add(spec.l2, theta);
    Ok(g)
}

pub fn loss_hessian(theta: &Array1<f64>, batch: &TaskBatch, spec: &LossSpec) -> Result<Array2<f64>> {
    let s = scores(theta, batch)?;
    let n = batch.len() as f64;
    let d = batch.dim();
    let mut weighted = batch.features.clone();
    for (mut row, &si) in weighted.rows_mut().into_iter().zip(s.iter()) {
        let p = sigmoid(si);
        row *= p * (1.0 - p) / n;
    }
    let mut h = batch.features.t().dot(&weighted);
    for i in 0..d {
        h[[i, i]] += spec.l2;
    }
    Ok(h)
}

/// Empirical `p̂₁`: fraction with `s = +1` (DDP) or with `y = +1, s = +1`
/// (DEO). Errors when the estimate is 0 or 1.
pub fn estimate_p1(batch: &TaskBatch, kind: FairnessKind) -> Result<f64> {
    let n = batch.len() as f64;
    let hits = match kind {
        FairnessKind::Ddp => batch.protected.iter().filter(|&&s| s == 1).count(),
        FairnessKind::Deo => batch
            .labels
            .iter()
            .zip(&batch.protected)
            .filter(|&(&y, &s)| y == 1 && s == 1)
            .count(),
    };
    let p1 = hits as f64 / n;
    if hits == 0 || hits == batch.len() {
        return Err(Error::DegenerateGroup { p1 });
    }
    if kind == FairnessKind::Deo {
        // the conditional mean runs over y = +1; both groups must appear there
        let neg_in_pos = batch
            .labels
            .iter()
            .zip(&batch.protected)
            .any(|(&y, &s)| y == 1 && s == -1);
        if !neg_in_pos {
            return Err(Error::DegenerateGroup { p1 });
        }
    }
    Ok(p1)
}

/// Group-weighted feature mean `m` for one batch and surrogate kind, so that
/// the surrogate reads `g(θ) = |θᵀm| − ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessDirection {
    pub p1: f64,
    pub mean: Array1<f64>,
}

impl FairnessDirection {
    pub fn new(batch: &TaskBatch, kind: FairnessKind) -> Result<Self> {
        let p1 = estimate_p1(batch, kind)?;
        let scale = 1.0 / (p1 * (1.0 - p1));
        let mut mean = Array1::zeros(batch.dim());
        let mut count = 0usize;
        for i in 0..batch.len() {
            if kind == FairnessKind::Deo && batch.labels[i] != 1 {
                continue;
            }
            let s = batch.protected[i] as f64;
            let w = scale * ((s + 1.0) / 2.0 - p1);
            mean.scaled_add(w, &batch.features.row(i));
            count += 1;
        }
        mean /= count as f64;
        Ok(Self { p1, mean })
    }

    pub fn inner(&self, theta: &Array1<f64>) -> Result<f64> {
        check_dim(theta, self.mean.len())?;
        Ok(theta.dot(&self.mean))
    }

    pub fn value(&self, theta: &Array1<f64>, epsilon: f64) -> Result<f64> {
        Ok(self.inner(theta)?.abs() - epsilon)
    }

    /// Subgradient with `sign(0) = 0`.
    pub fn grad(&self, theta: &Array1<f64>) -> Result<Array1<f64>> {
        let inner = self.inner(theta)?;
        Ok(&self.mean * sign0(inner))
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn fairness_value(theta: &Array1<f64>, batch: &TaskBatch, spec: &FairnessSpec) -> Result<f64> {
    check_dim(theta, batch.dim())?;
    FairnessDirection::new(batch, spec.kind)?.value(theta, spec.epsilon)
}

pub fn fairness_grad(theta: &Array1<f64>, batch: &TaskBatch, spec: &FairnessSpec) -> Result<Array1<f64>> {
    check_dim(theta, batch.dim())?;
    FairnessDirection::new(batch, spec.kind)?.grad(theta)
}

/// Disjoint support / validation / query partition of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSplit {
    pub support: TaskBatch,
    pub validation: TaskBatch,
    pub query: TaskBatch,
    pub support_idx: Vec<usize>,
    pub validation_idx: Vec<usize>,
    pub query_idx: Vec<usize>,
}

/// Seeded split: `support_per_class` rows of each label form the support,
/// the next `query_size` rows of a random permutation form the query, and
/// the rest is validation.
pub fn split_batch(
    batch: &TaskBatch,
    support_per_class: usize,
    query_size: usize,
    seed: u64,
) -> Result<BatchSplit> {
    let n = batch.len();
    let pos = batch.labels.iter().filter(|&&y| y == 1).count();
    let neg = n - pos;
    if pos < support_per_class || neg < support_per_class {
        return Err(Error::DegenerateInput(format!(
            "support of {support_per_class} per class requested, classes have {pos} / {neg}"
        )));
    }
    if n < 2 * support_per_class + query_size + 1 {
        return Err(Error::DegenerateInput(format!(
            "batch of {n} too small for support {} + query {query_size} + validation",
            2 * support_per_class
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let (mut taken_pos, mut taken_neg) = (0usize, 0usize);
    let mut support_idx = Vec::with_capacity(2 * support_per_class);
    let mut rest = Vec::with_capacity(n);
    for i in perm {
        let slot = if batch.labels[i] == 1 { &mut taken_pos } else { &mut taken_neg };
        if *slot < support_per_class {
            *slot += 1;
            support_idx.push(i);
        } else {
            rest.push(i);
        }
    }
    let mut validation_idx = rest.split_off(query_size);
    let mut query_idx = rest;
    support_idx.sort_unstable();
    query_idx.sort_unstable();
    validation_idx.sort_unstable();

    Ok(BatchSplit {
        support: batch.subset(&support_idx)?,
        validation: batch.subset(&validation_idx)?,
        query: batch.subset(&query_idx)?,
        support_idx,
        validation_idx,
        query_idx,
    })
}
