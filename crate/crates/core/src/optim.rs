//! Interval-level primal-dual adaptation and the meta-level augmented
//! Lagrangian with its projected update.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss, loss_grad, loss_hessian, FairnessDirection, FairnessSpec, LossSpec, ParamPair, TaskBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianConfig {
    pub delta: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub inner_steps: usize,
}

impl LagrangianConfig {
    pub fn new(delta: f64, eta1: f64, eta2: f64, inner_steps: usize) -> Result<Self> {
        let c = Self { delta, eta1, eta2, inner_steps };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("eta1", self.eta1), ("eta2", self.eta2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Coefficient of the quadratic dual penalty, `δ(η₁ + η₂)`.
    pub fn dual_penalty(&self) -> f64 {
        self.delta * (self.eta1 + self.eta2)
    }
}

impl Default for LagrangianConfig {
    fn default() -> Self {
        Self { delta: 50.0, eta1: 0.01, eta2: 0.01, inner_steps: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffMode {
    #[default]
    FirstOrder,
    FullJacobian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub radius: f64,
}

impl Ball {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!("ball radius must be > 0, got {radius}")));
        }
        Ok(Self { radius })
    }
}

pub fn project_ball(theta: &Array1<f64>, ball: &Ball) -> Array1<f64> {
    let norm = theta.dot(theta).sqrt();
    if norm <= ball.radius {
        theta.clone()
    } else {
        theta * (ball.radius / norm)
    }
}

/// A batch with its fairness directions precomputed for a fixed list of
/// constraints.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    batch: TaskBatch,
    dirs: Vec<FairnessDirection>,
    eps: Vec<f64>,
}

impl PreparedBatch {
    pub fn new(batch: TaskBatch, specs: &[FairnessSpec]) -> Result<Self> {
        let dirs = specs
            .iter()
            .map(|s| FairnessDirection::new(&batch, s.kind))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { batch, dirs, eps: specs.iter().map(|s| s.epsilon).collect() })
    }

    pub fn batch(&self) -> &TaskBatch {
        &self.batch
    }

    pub fn n_constraints(&self) -> usize {
        self.dirs.len()
    }

    /// Constraint vector `g(θ)`.
    pub fn g(&self, theta: &Array1<f64>) -> Result<Array1<f64>> {
        self.dirs
            .iter()
            .zip(&self.eps)
            .map(|(d, &e)| d.value(theta, e))
            .collect::<Result<Vec<_>>>()
            .map(Array1::from)
    }

    /// Rows are `∇gᵢ(θ)`.
    pub fn g_jacobian(&self, theta: &Array1<f64>) -> Result<Array2<f64>> {
        let mut j = Array2::zeros((self.dirs.len(), theta.len()));
        for (i, d) in self.dirs.iter().enumerate() {
            j.row_mut(i).assign(&d.grad(theta)?);
        }
        Ok(j)
    }
}

fn check_lambda(pair: &ParamPair, m: usize) -> Result<()> {
    if pair.lambda.len() != m {
        return Err(Error::Config(format!("{} duals for {m} constraints", pair.lambda.len())));
    }
    if pair.lambda.iter().any(|&l| l < 0.0) {
        return Err(Error::Config("dual variables must be nonnegative".into()));
    }
    Ok(())
}

fn numerical(detail: impl Into<String>) -> Error {
    Error::Numerical { round: 0, detail: detail.into() }
}

/// `F(θ, λ) = f(θ) + Σᵢ λᵢ gᵢ(θ)` on a prepared batch.
pub fn lagrangian(pair: &ParamPair, data: &PreparedBatch, loss_spec: &LossSpec) -> Result<f64> {
    check_lambda(pair, data.n_constraints())?;
    Ok(loss(&pair.theta, &data.batch, loss_spec)? + pair.lambda.dot(&data.g(&pair.theta)?))
}

/// `(∇_θ F, ∇_λ F = g(θ))`.
pub fn lagrangian_grad(
    pair: &ParamPair,
    data: &PreparedBatch,
    loss_spec: &LossSpec,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_lambda(pair, data.n_constraints())?;
    let mut gt = loss_grad(&pair.theta, &data.batch, loss_spec)?;
    gt += &data.g_jacobian(&pair.theta)?.t().dot(&pair.lambda);
    Ok((gt, data.g(&pair.theta)?))
}

pub fn interval_lagrangian(
    pair: &ParamPair,
    batch: &TaskBatch,
    loss_spec: &LossSpec,
    fairness: &[FairnessSpec],
) -> Result<f64> {
    lagrangian(pair, &PreparedBatch::new(batch.clone(), fairness)?, loss_spec)
}

fn check_step(eta: f64, steps: usize) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("inner stepsize must be > 0, got {eta}")));
    }
    if steps == 0 {
        return Err(Error::Config("inner steps must be >= 1".into()));
    }
    Ok(())
}

/// Alternating primal descent / dual ascent from `meta` on the support data.
pub fn adapt(
    meta: &ParamPair,
    support: &PreparedBatch,
    loss_spec: &LossSpec,
    eta: f64,
    steps: usize,
) -> Result<ParamPair> {
    check_step(eta, steps)?;
    check_lambda(meta, support.n_constraints())?;
    let mut theta = meta.theta.clone();
    let mut lambda = meta.lambda.clone();
    for _ in 0..steps {
        let mut grad = loss_grad(&theta, &support.batch, loss_spec)?;
        grad += &support.g_jacobian(&theta)?.t().dot(&lambda);
        theta.scaled_add(-eta, &grad);
        let g = support.g(&theta)?;
        lambda.zip_mut_with(&g, |l, &gi| *l = (*l + eta * gi).max(0.0));
        if !theta.iter().chain(lambda.iter()).all(|v| v.is_finite()) {
            return Err(numerical("non-finite iterate in inner adaptation"));
        }
    }
    Ok(ParamPair { theta, lambda })
}

pub fn inner_adapt(
    meta: &ParamPair,
    support: &TaskBatch,
    loss_spec: &LossSpec,
    fairness: &[FairnessSpec],
    eta: f64,
    steps: usize,
) -> Result<ParamPair> {
    adapt(meta, &PreparedBatch::new(support.clone(), fairness)?, loss_spec, eta, steps)
}

/// Adapted pair together with its Jacobian with respect to the starting
/// pair `x₀ = (θ₀, λ₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub pair: ParamPair,
    /// `∂θ/∂x₀`, shape `d × (d + m)`.
    pub d_theta: Array2<f64>,
    /// `∂λ/∂x₀`, shape `m × (d + m)`.
    pub d_lambda: Array2<f64>,
}

/// [`adapt`] with forward-accumulated Jacobians. The fairness surrogates are
/// piecewise linear, so only the loss contributes curvature.
pub fn adapt_with_jacobian(
    meta: &ParamPair,
    support: &PreparedBatch,
    loss_spec: &LossSpec,
    eta: f64,
    steps: usize,
) -> Result<Adapted> {
    check_step(eta, steps)?;
    check_lambda(meta, support.n_constraints())?;
    let d = meta.theta.len();
    let m = meta.lambda.len();
    let mut theta = meta.theta.clone();
    let mut lambda = meta.lambda.clone();
    let mut jt = Array2::<f64>::zeros((d, d + m));
    jt.slice_mut(s![.., ..d]).assign(&Array2::eye(d));
    let mut jl = Array2::<f64>::zeros((m, d + m));
    jl.slice_mut(s![.., d..]).assign(&Array2::eye(m));

    for _ in 0..steps {
        let gj = support.g_jacobian(&theta)?;
        let mut grad = loss_grad(&theta, &support.batch, loss_spec)?;
        grad += &gj.t().dot(&lambda);
        let h = loss_hessian(&theta, &support.batch, loss_spec)?;

        let step_jac = Array2::<f64>::eye(d) - &h * eta;
        jt = step_jac.dot(&jt) - gj.t().dot(&jl) * eta;
        theta.scaled_add(-eta, &grad);

        let g = support.g(&theta)?;
        let gj_new = support.g_jacobian(&theta)?;
        let carried = &jl + &(gj_new.dot(&jt) * eta);
        for i in 0..m {
            let next = lambda[i] + eta * g[i];
            if next > 0.0 {
                lambda[i] = next;
                jl.row_mut(i).assign(&carried.row(i));
            } else {
                lambda[i] = 0.0;
                jl.row_mut(i).fill(0.0);
            }
        }
        if !theta.iter().chain(lambda.iter()).all(|v| v.is_finite()) {
            return Err(numerical("non-finite iterate in inner adaptation"));
        }
    }
    Ok(Adapted { pair: ParamPair { theta, lambda }, d_theta: jt, d_lambda: jl })
}

/// One expert's contribution to the meta objective.
#[derive(Debug, Clone, Copy)]
pub struct MetaTerm<'a> {
    pub weight: f64,
    pub params: &'a ParamPair,
    pub query: &'a PreparedBatch,
    pub active: bool,
    /// Present only in full-Jacobian mode for active experts.
    pub jacobian: Option<(&'a Array2<f64>, &'a Array2<f64>)>,
}

/// `f(θ_E; Q_E) + Σᵢ (λ_{E,i} gᵢ(θ_E; Q_E) − δ(η₁+η₂)/2 · λ_{E,i}²)`.
pub fn meta_term_value(params: &ParamPair, query: &PreparedBatch, loss_spec: &LossSpec, config: &LagrangianConfig) -> Result<f64> {
    let f = lagrangian(params, query, loss_spec)?;
    Ok(f - 0.5 * config.dual_penalty() * params.lambda.dot(&params.lambda))
}

/// Gradient of one term with respect to the expert's own `(θ_E, λ_E)`.
pub fn meta_term_grad(
    params: &ParamPair,
    query: &PreparedBatch,
    loss_spec: &LossSpec,
    config: &LagrangianConfig,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (gt, mut gl) = lagrangian_grad(params, query, loss_spec)?;
    gl.scaled_add(-config.dual_penalty(), &params.lambda);
    Ok((gt, gl))
}

pub fn meta_lagrangian(terms: &[MetaTerm<'_>], loss_spec: &LossSpec, config: &LagrangianConfig) -> Result<f64> {
    let mut total = 0.0;
    for t in terms {
        if t.weight != 0.0 {
            total += t.weight * meta_term_value(t.params, t.query, loss_spec, config)?;
        }
    }
    Ok(total)
}

/// Meta gradient `(∇θ, ∇λ)`.
///
/// Active experts contribute their full term gradient, chained through the
/// adaptation map when a Jacobian is supplied. Sleeping experts hold frozen
/// parameters, so they only contribute the dual penalty `−δ(η₁+η₂)λ_E`.
pub fn meta_gradient(
    terms: &[MetaTerm<'_>],
    d: usize,
    m: usize,
    loss_spec: &LossSpec,
    config: &LagrangianConfig,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let mut gt = Array1::zeros(d);
    let mut gl = Array1::zeros(m);
    for t in terms {
        if t.weight == 0.0 {
            continue;
        }
        if !t.active {
            gl.scaled_add(-t.weight * config.dual_penalty(), &t.params.lambda);
            continue;
        }
        let (et, el) = meta_term_grad(t.params, t.query, loss_spec, config)?;
        match t.jacobian {
            None => {
                gt.scaled_add(t.weight, &et);
                gl.scaled_add(t.weight, &el);
            }
            Some((jt, jl)) => {
                let full = jt.t().dot(&et) + jl.t().dot(&el);
                gt.scaled_add(t.weight, &full.slice(s![..d]));
                gl.scaled_add(t.weight, &full.slice(s![d..]));
            }
        }
    }
    Ok((gt, gl))
}

/// `θ ← Π_B(θ − η₁∇θ)`, `λ ← [λ + η₂∇λ]₊`.
pub fn meta_step(
    meta: &ParamPair,
    grad_theta: &Array1<f64>,
    grad_lambda: &Array1<f64>,
    config: &LagrangianConfig,
    ball: &Ball,
) -> Result<ParamPair> {
    let theta = project_ball(&(&meta.theta - &(grad_theta * config.eta1)), ball);
    let lambda = (&meta.lambda + &(grad_lambda * config.eta2)).mapv(|l| l.max(0.0));
    let next = ParamPair { theta, lambda };
    if !next.is_finite() {
        return Err(numerical("non-finite meta update"));
    }
    Ok(next)
}

pub fn meta_update(
    meta: &ParamPair,
    terms: &[MetaTerm<'_>],
    loss_spec: &LossSpec,
    config: &LagrangianConfig,
    ball: &Ball,
) -> Result<ParamPair> {
    let (gt, gl) = meta_gradient(terms, meta.theta.len(), meta.lambda.len(), loss_spec, config)?;
    meta_step(meta, &gt, &gl, config, ball)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FairnessKind;
    use ndarray::array;

    fn toy() -> TaskBatch {
        let f = array![[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1], [-1.5, 0.2], [0.4, 0.9]];
        TaskBatch::new(f, vec![1, -1, 1, -1, 1], vec![1, 1, -1, -1, 1], 1).unwrap()
    }

    fn ddp() -> Vec<FairnessSpec> {
        vec![FairnessSpec { kind: FairnessKind::Ddp, epsilon: 0.05 }]
    }

    #[test]
    fn projection_examples() {
        let ball = Ball::new(0.5).unwrap();
        let p = project_ball(&array![0.6, 0.8], &ball);
        assert!((p.dot(&p).sqrt() - 0.5).abs() < 1e-15);
        assert_eq!(project_ball(&array![0.0, 0.0], &ball), array![0.0, 0.0]);
        assert_eq!(project_ball(&p, &ball), p);
    }

    #[test]
    fn zero_dual_lagrangian_is_loss() {
        let b = toy();
        let spec = LossSpec::default();
        let pair = ParamPair::new(array![0.3, -0.2], array![0.0]).unwrap();
        let v = interval_lagrangian(&pair, &b, &spec, &ddp()).unwrap();
        assert_eq!(v, loss(&pair.theta, &b, &spec).unwrap());
        let zero = ParamPair::new(array![0.0, 0.0], array![2.0]).unwrap();
        let v = interval_lagrangian(&zero, &b, &LossSpec { l2: 0.0 }, &ddp()).unwrap();
        assert!((v - (2f64.ln() - 2.0 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn l2_only_step_hits_origin() {
        // all-zero features leave only the ridge term, whose gradient is θ
        let b = TaskBatch::new(Array2::zeros((2, 2)), vec![1, -1], vec![1, -1], 1).unwrap();
        let pair = ParamPair::new(array![2.0, 0.0], array![0.0]).unwrap();
        let out = inner_adapt(&pair, &b, &LossSpec { l2: 1.0 }, &ddp(), 1.0, 1).unwrap();
        assert_eq!(out.theta, array![0.0, 0.0]);
        assert_eq!(out.lambda, array![0.0]);
    }

    #[test]
    fn one_step_matches_hand_rolled() {
        let b = toy();
        let spec = LossSpec { l2: 0.01 };
        let pair = ParamPair::new(array![0.2, -0.1], array![0.3]).unwrap();
        let eta = 0.1;
        let out = inner_adapt(&pair, &b, &spec, &ddp(), eta, 1).unwrap();
        let dir = FairnessDirection::new(&b, FairnessKind::Ddp).unwrap();
        let theta = &pair.theta - &((loss_grad(&pair.theta, &b, &spec).unwrap() + dir.grad(&pair.theta).unwrap() * 0.3) * eta);
        let lambda = (0.3 + eta * dir.value(&theta, 0.05).unwrap()).max(0.0);
        assert!((&out.theta - &theta).iter().all(|v| v.abs() < 1e-15));
        assert!((out.lambda[0] - lambda).abs() < 1e-15);
    }

    #[test]
    fn meta_step_fixed_point_and_clip() {
        let cfg = LagrangianConfig::default();
        let ball = Ball::new(1.0).unwrap();
        let meta = ParamPair::new(array![0.1, 0.2], array![0.005]).unwrap();
        let same = meta_step(&meta, &array![0.0, 0.0], &array![0.0], &cfg, &ball).unwrap();
        assert_eq!(same, meta);
        let clipped = meta_step(&meta, &array![0.0, 0.0], &array![-10.0], &cfg, &ball).unwrap();
        assert_eq!(clipped.lambda, array![0.0]);
    }

    #[test]
    fn meta_lagrangian_degenerate_sums() {
        let b = PreparedBatch::new(toy(), &ddp()).unwrap();
        let spec = LossSpec::default();
        let cfg = LagrangianConfig::default();
        let p = ParamPair::new(array![0.3, 0.1], array![0.0]).unwrap();
        let one = [MetaTerm { weight: 1.0, params: &p, query: &b, active: true, jacobian: None }];
        assert_eq!(meta_lagrangian(&one, &spec, &cfg).unwrap(), loss(&p.theta, b.batch(), &spec).unwrap());
        let q = ParamPair::new(array![0.3, 0.1], array![0.4]).unwrap();
        let single = meta_term_value(&q, &b, &spec, &cfg).unwrap();
        let two = [
            MetaTerm { weight: 0.5, params: &q, query: &b, active: true, jacobian: None },
            MetaTerm { weight: 0.5, params: &q, query: &b, active: false, jacobian: None },
        ];
        assert!((meta_lagrangian(&two, &spec, &cfg).unwrap() - single).abs() < 1e-15);
    }

    #[test]
    fn dual_concavity_closed_form() {
        // the only λ² term is −δ(η₁+η₂)/2 λ², so the second difference is exact
        let b = PreparedBatch::new(toy(), &ddp()).unwrap();
        let spec = LossSpec::default();
        let cfg = LagrangianConfig { delta: 25.0, eta1: 0.02, eta2: 0.01, inner_steps: 1 };
        let h = 1e-3;
        let at = |l: f64| {
            let p = ParamPair::new(array![0.2, -0.4], array![l]).unwrap();
            meta_term_value(&p, &b, &spec, &cfg).unwrap()
        };
        let second = (at(0.5 + h) - 2.0 * at(0.5) + at(0.5 - h)) / (h * h);
        assert!((second + cfg.dual_penalty()).abs() < 1e-6);
        assert!(cfg.dual_penalty() > 0.0);
    }
}
