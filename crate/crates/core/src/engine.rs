//! Round-by-round driver: validation telemetry, activation, weighting, the
//! bi-level loop and confidence updates.

use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ActivityRule, ExpertPool, GradientBounds};
use crate::intervals::{Interval, IntervalScheme, SchemeKind};
use crate::metrics::{accuracy, demographic_parity, equalized_odds, predictions, EqualizedOdds};
use crate::model::{loss, split_batch, FairnessSpec, LossSpec, ParamPair, TaskBatch};
use crate::optim::{
    adapt, adapt_with_jacobian, lagrangian, meta_lagrangian, meta_update, Adapted, Ball, DiffMode, LagrangianConfig,
    MetaTerm, PreparedBatch,
};
use crate::sampling::DataHistory;
use crate::weights::{normalize, update_rc, WeightVector};

const MAX_SPLIT_RETRIES: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Fairsaoml,
    SingleExpert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    pub disable_weights: bool,
    pub disable_base_learner: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub support_per_class: usize,
    pub query_size: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { support_per_class: 20, query_size: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scheme: IntervalScheme,
    pub horizon: usize,
    pub n_meta: usize,
    pub lagrangian: LagrangianConfig,
    pub loss: LossSpec,
    pub fairness: Vec<FairnessSpec>,
    pub split: SplitSpec,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub mode: Mode,
    pub activity: ActivityRule,
    pub diff_mode: DiffMode,
    /// Upper end of the uniform draw for each entry of `λ₀`.
    pub lambda0_max: f64,
}

impl RunConfig {
    /// Desk-scale defaults on the given scheme and horizon.
    pub fn new(scheme: IntervalScheme, horizon: usize) -> Self {
        Self {
            scheme,
            horizon,
            n_meta: 20,
            lagrangian: LagrangianConfig::default(),
            loss: LossSpec::default(),
            fairness: vec![FairnessSpec::default()],
            split: SplitSpec::default(),
            seed: 0,
            ablation: AblationFlags::default(),
            mode: Mode::Fairsaoml,
            activity: ActivityRule::Restart,
            diff_mode: DiffMode::FirstOrder,
            lambda0_max: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.n_meta == 0 {
            return Err(Error::Config("n_meta must be >= 1".into()));
        }
        if self.fairness.is_empty() {
            return Err(Error::Config("at least one fairness constraint is required".into()));
        }
        for f in &self.fairness {
            FairnessSpec::new(f.kind, f.epsilon)?;
        }
        LossSpec::new(self.loss.l2)?;
        self.lagrangian.validate()?;
        if self.split.support_per_class == 0 || self.split.query_size == 0 {
            return Err(Error::Config("support and query sizes must be >= 1".into()));
        }
        if !(self.lambda0_max >= 0.0 && self.lambda0_max.is_finite()) {
            return Err(Error::Config("lambda0_max must be >= 0".into()));
        }
        if self.scheme.kind == SchemeKind::Agc && self.scheme.horizon != Some(self.horizon) {
            return Err(Error::Config("AGC scheme horizon must equal the run horizon".into()));
        }
        Ok(())
    }

    /// The scheme actually driven, after applying the mode.
    pub fn effective_scheme(&self) -> Result<IntervalScheme> {
        match self.mode {
            Mode::Fairsaoml => Ok(self.scheme),
            Mode::SingleExpert => IntervalScheme::single(self.horizon),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.fairness[0].epsilon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSnapshot {
    pub key: usize,
    pub interval: Interval,
    pub weight: f64,
    pub r: f64,
    pub c: f64,
    pub active: bool,
    pub last_active: usize,
    pub params: ParamPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    /// Validation metrics of the pair held before this round's update.
    pub val_loss: f64,
    pub val_acc: f64,
    pub dp: Option<f64>,
    pub eo: EqualizedOdds,
    /// `g(θ_t)` on this round's validation split.
    pub g: Vec<f64>,
    pub experts: Vec<ExpertSnapshot>,
    pub n_experts: usize,
    pub n_active: usize,
    pub max_weight: f64,
    pub theta_norm: f64,
    pub lambda: Vec<f64>,
    pub inner_calls: usize,
    pub meta_objective: f64,
    pub wall_ms: f64,
}

impl RoundRecord {
    pub fn weight_sum(&self) -> f64 {
        self.experts.iter().map(|e| e.weight).sum()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &RoundRecord) -> bool {
        RoundRecord { wall_ms: 0.0, ..self.clone() } == RoundRecord { wall_ms: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    /// Meta pair after each round.
    pub pairs: Vec<ParamPair>,
    pub validation: Vec<TaskBatch>,
    pub s_radius: f64,
    pub g_bound: f64,
}

impl RunOutput {
    pub fn validation_refs(&self) -> Vec<&TaskBatch> {
        self.validation.iter().collect()
    }

    /// `f(θ_t; V_t)` per round.
    pub fn loss_series(&self, spec: &LossSpec) -> Result<Vec<f64>> {
        self.pairs.iter().zip(&self.validation).map(|(p, v)| loss(&p.theta, v, spec)).collect()
    }

    pub fn g_series(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.g.clone()).collect()
    }

    pub fn same_outcome(&self, other: &RunOutput) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_outcome(b))
            && self.pairs == other.pairs
    }
}

/// A run aborted part-way, carrying everything recorded before the failure.
#[derive(Debug, Clone)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Box<RunOutput>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed rounds)", self.error, self.partial.records.len())
    }
}

impl std::error::Error for RunFailure {}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

fn at_round(e: Error, t: usize) -> Error {
    match e {
        Error::Numerical { detail, .. } => Error::Numerical { round: t, detail },
        other => other,
    }
}

/// Incremental learner; feed it one batch per round.
#[derive(Debug, Clone)]
pub struct Learner {
    config: RunConfig,
    pool: ExpertPool,
    meta: ParamPair,
    history: DataHistory,
    rng: ChaCha8Rng,
    ball: Ball,
    dim: usize,
    t: usize,
}

impl Learner {
    pub fn new(config: RunConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::Config("feature dimension must be >= 1".into()));
        }
        let scheme = config.effective_scheme()?;
        let bounds = GradientBounds::from_epsilon(config.epsilon(), dim)?;
        let ball = Ball::new(bounds.s_radius)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = config.fairness.len();
        let lambda = Array1::from_shape_fn(m, |_| rng.random::<f64>() * config.lambda0_max);
        let meta = ParamPair::new(Array1::zeros(dim), lambda)?;
        let pool = ExpertPool::new(scheme, bounds, config.activity);
        Ok(Self { config, pool, meta, history: DataHistory::new(), rng, ball, dim, t: 0 })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn meta(&self) -> &ParamPair {
        &self.meta
    }

    pub fn pool(&self) -> &ExpertPool {
        &self.pool
    }

    pub fn ball(&self) -> Ball {
        self.ball
    }

    pub fn round(&self) -> usize {
        self.t
    }

    /// Seeded split whose validation part admits every surrogate.
    fn split(&mut self, batch: &TaskBatch) -> Result<crate::model::BatchSplit> {
        let mut last = None;
        for _ in 0..MAX_SPLIT_RETRIES {
            let seed = self.rng.random::<u64>();
            let sp = split_batch(batch, self.config.split.support_per_class, self.config.split.query_size, seed)?;
            if sp.validation.supports_fairness(&self.config.fairness) && sp.query.supports_fairness(&self.config.fairness) {
                return Ok(sp);
            }
            last = Some(sp.validation);
        }
        let p1 = last.map_or(0.0, |v| {
            v.protected().iter().filter(|&&s| s == 1).count() as f64 / v.len() as f64
        });
        Err(Error::DegenerateGroup { p1 })
    }

    /// Executes one round on `batch`.
    pub fn step(&mut self, batch: &TaskBatch) -> Result<RoundRecord> {
        self.step_with_validation(batch).map(|(r, _)| r)
    }

    /// [`Learner::step`], also returning the round's validation split.
    pub fn step_with_validation(&mut self, batch: &TaskBatch) -> Result<(RoundRecord, TaskBatch)> {
        let started = Instant::now();
        let t = self.t + 1;
        if t > self.config.horizon {
            return Err(Error::Range { t, max: self.config.horizon });
        }
        if batch.dim() != self.dim {
            return Err(Error::Config(format!("batch has dimension {}, learner {}", batch.dim(), self.dim)));
        }
        let batch = batch.clone().with_round(t);
        let split = self.split(&batch)?;
        let validation = PreparedBatch::new(split.validation.clone(), &self.config.fairness)?;
        let query_now = PreparedBatch::new(split.query.clone(), &self.config.fairness)?;

        // telemetry for the pair carried into this round
        let prev = &self.meta.theta;
        let val_loss = loss(prev, &split.validation, &self.config.loss)?;
        let preds = predictions(prev, &split.validation)?;
        let val_acc = accuracy(&preds, split.validation.labels());
        let dp = demographic_parity(&preds, split.validation.protected());
        let eo = equalized_odds(&preds, split.validation.labels(), split.validation.protected());

        let mut train_idx: Vec<usize> = split.support_idx.iter().chain(&split.query_idx).copied().collect();
        train_idx.sort_unstable();
        self.history.push(batch.subset(&train_idx)?);

        self.pool.observe(&batch);
        let target = self.pool.target(t)?;
        self.pool.activate(t, &target, &self.meta)?;

        let keys: Vec<usize> = self.pool.keys().collect();
        let uniform = self.config.ablation.disable_weights
            || self.config.ablation.disable_base_learner
            || self.config.mode == Mode::SingleExpert;
        let weights = if uniform {
            WeightVector::uniform(keys.len())
        } else {
            let stats: Vec<(f64, f64)> = keys
                .iter()
                .map(|k| {
                    let c = self.pool.get(*k).expect("key from pool").confidence;
                    (c.r, c.c)
                })
                .collect();
            normalize(&stats)?
        };

        let (active, _) = self.pool.partition();
        let mut inner_calls = 0;
        let mut meta_objective = f64::NAN;
        let lc = self.config.lagrangian;
        for _ in 0..self.config.n_meta {
            let mut queries: Vec<(usize, PreparedBatch)> = Vec::with_capacity(active.len());
            let mut supports = Vec::with_capacity(active.len());
            for &k in &active {
                let interval = self.pool.get(k).expect("active key").interval;
                let (s, q) = self.history.sample(
                    &mut self.rng,
                    interval.start,
                    t,
                    self.config.split.support_per_class,
                    self.config.split.query_size,
                    &self.config.fairness,
                )?;
                supports.push(PreparedBatch::new(s, &self.config.fairness)?);
                queries.push((k, PreparedBatch::new(q, &self.config.fairness)?));
            }

            let mut jacobians: Vec<Option<Adapted>> = vec![None; active.len()];
            if !self.config.ablation.disable_base_learner {
                let meta = &self.meta;
                let loss_spec = &self.config.loss;
                let full = self.config.diff_mode == DiffMode::FullJacobian;
                let etas: Vec<f64> = active.iter().map(|k| self.pool.get(*k).expect("active key").eta).collect();
                let adapted = supports
                    .par_iter()
                    .zip(etas.par_iter())
                    .map(|(sup, &eta)| {
                        if full {
                            adapt_with_jacobian(meta, sup, loss_spec, eta, lc.inner_steps)
                        } else {
                            adapt(meta, sup, loss_spec, eta, lc.inner_steps).map(|pair| Adapted {
                                pair,
                                d_theta: Default::default(),
                                d_lambda: Default::default(),
                            })
                        }
                    })
                    .collect::<Result<Vec<Adapted>>>()
                    .map_err(|e| at_round(e, t))?;
                inner_calls += adapted.len();
                for (i, a) in adapted.into_iter().enumerate() {
                    self.pool.get_mut(active[i]).expect("active key").params = a.pair.clone();
                    if full {
                        jacobians[i] = Some(a);
                    }
                }
            }

            let mut terms = Vec::with_capacity(keys.len());
            let mut qi = 0;
            for (wi, k) in keys.iter().enumerate() {
                let e = self.pool.get(*k).expect("key from pool");
                let (query, jac) = if e.active {
                    let q = &queries[qi].1;
                    let j = jacobians[qi].as_ref().map(|a| (&a.d_theta, &a.d_lambda));
                    qi += 1;
                    (q, j)
                } else {
                    (&query_now, None)
                };
                terms.push(MetaTerm { weight: weights.get(wi), params: &e.params, query, active: e.active, jacobian: jac });
            }
            meta_objective = meta_lagrangian(&terms, &self.config.loss, &lc).map_err(|e| at_round(e, t))?;
            let next = meta_update(&self.meta, &terms, &self.config.loss, &lc, &self.ball).map_err(|e| at_round(e, t))?;
            self.meta = next;
        }

        let meta_value = lagrangian(&self.meta, &validation, &self.config.loss)?;
        for k in &keys {
            let e = self.pool.get_mut(*k).expect("key from pool");
            let expert_value = lagrangian(&e.params, &validation, &self.config.loss)?;
            e.confidence = update_rc(e.confidence, meta_value, expert_value).map_err(|err| at_round(err, t))?;
        }

        let g = validation.g(&self.meta.theta)?.to_vec();
        let experts: Vec<ExpertSnapshot> = keys
            .iter()
            .enumerate()
            .map(|(wi, k)| {
                let e = self.pool.get(*k).expect("key from pool");
                ExpertSnapshot {
                    key: *k,
                    interval: e.interval,
                    weight: weights.get(wi),
                    r: e.confidence.r,
                    c: e.confidence.c,
                    active: e.active,
                    last_active: e.last_active,
                    params: e.params.clone(),
                }
            })
            .collect();
        self.t = t;
        let record = RoundRecord {
            t,
            val_loss,
            val_acc,
            dp,
            eo,
            g,
            n_experts: experts.len(),
            n_active: active.len(),
            max_weight: weights.max(),
            theta_norm: self.meta.theta.dot(&self.meta.theta).sqrt(),
            lambda: self.meta.lambda.to_vec(),
            inner_calls,
            meta_objective,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            experts,
        };
        Ok((record, split.validation))
    }
}

/// Runs the configured method over `stream`.
pub fn run(config: &RunConfig, stream: &[TaskBatch]) -> std::result::Result<RunOutput, RunFailure> {
    let fail = |error: Error, partial: RunOutput| RunFailure { error, partial: Box::new(partial) };
    let Some(first) = stream.first() else {
        return Err(fail(Error::Config("empty stream".into()), RunOutput::default()));
    };
    if config.scheme.kind == SchemeKind::Agc && config.mode == Mode::Fairsaoml && stream.len() != config.horizon {
        return Err(fail(
            Error::Config(format!("AGC expects {} rounds, stream has {}", config.horizon, stream.len())),
            RunOutput::default(),
        ));
    }
    let mut learner = Learner::new(config.clone(), first.dim()).map_err(|e| fail(e, RunOutput::default()))?;
    let mut out = RunOutput { s_radius: learner.ball.radius, ..Default::default() };
    for batch in stream.iter().take(config.horizon) {
        match learner.step_with_validation(batch) {
            Ok((record, validation)) => {
                out.records.push(record);
                out.pairs.push(learner.meta.clone());
                out.validation.push(validation);
                out.g_bound = learner.pool.bounds().g_bound;
            }
            Err(e) => return Err(fail(e, out)),
        }
    }
    Ok(out)
}

/// [`run`] with the ablation switches already set in `config`.
pub fn run_ablation(config: &RunConfig, stream: &[TaskBatch]) -> std::result::Result<RunOutput, RunFailure> {
    run(config, stream)
}

/// One always-active expert on `[1, T]` with the same updates.
pub fn run_baseline_single_expert(config: &RunConfig, stream: &[TaskBatch]) -> std::result::Result<RunOutput, RunFailure> {
    run(&RunConfig { mode: Mode::SingleExpert, ..config.clone() }, stream)
}
