//! Expert universe: activation with replacement, active / sleeping
//! partition, stepsizes and the running gradient bound.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervals::{target_set, Interval, IntervalScheme, SchemeKind, TargetSet};
use crate::model::{ParamPair, TaskBatch};
use crate::weights::Confidence;

/// Ball radius `S` and gradient bound `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientBounds {
    pub s_radius: f64,
    pub g_bound: f64,
}

impl GradientBounds {
    /// `S = √(1 + 2ε) − 1`, `G = √d + S`.
    pub fn from_epsilon(epsilon: f64, d: usize) -> Result<Self> {
        Self::with_radius((1.0 + 2.0 * epsilon).sqrt() - 1.0, d)
    }

    pub fn with_radius(s_radius: f64, d: usize) -> Result<Self> {
        if !(s_radius > 0.0 && s_radius.is_finite()) {
            return Err(Error::Config(format!("ball radius must be > 0, got {s_radius}")));
        }
        Ok(Self { s_radius, g_bound: (d as f64).sqrt() + s_radius })
    }

    /// Running max of `√d + S` and the largest feature norm seen.
    pub fn update(self, batch: &TaskBatch) -> Self {
        let floor = (batch.dim() as f64).sqrt() + self.s_radius;
        let max_norm = batch
            .features()
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max);
        Self { s_radius: self.s_radius, g_bound: self.g_bound.max(floor).max(max_norm) }
    }
}

pub fn stepsize(interval: &Interval, bounds: &GradientBounds) -> f64 {
    bounds.s_radius / (bounds.g_bound * (interval.len() as f64).sqrt())
}

/// Which experts count as active in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityRule {
    /// Active only in rounds where it belongs to the target set.
    #[default]
    Restart,
    /// Active whenever its interval contains the round.
    Containment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertState {
    pub interval: Interval,
    pub params: ParamPair,
    pub eta: f64,
    pub confidence: Confidence,
    pub last_active: usize,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationReport {
    pub activated: Vec<Interval>,
    pub inherited: usize,
    pub fresh: usize,
}

#[derive(Debug, Clone)]
pub struct ExpertPool {
    experts: BTreeMap<usize, ExpertState>,
    scheme: IntervalScheme,
    bounds: GradientBounds,
    activity: ActivityRule,
}

impl ExpertPool {
    pub fn new(scheme: IntervalScheme, bounds: GradientBounds, activity: ActivityRule) -> Self {
        let activity = if scheme.kind == SchemeKind::Single { ActivityRule::Containment } else { activity };
        Self { experts: BTreeMap::new(), scheme, bounds, activity }
    }

    pub fn scheme(&self) -> &IntervalScheme {
        &self.scheme
    }

    pub fn bounds(&self) -> &GradientBounds {
        &self.bounds
    }

    pub fn set_bounds(&mut self, bounds: GradientBounds) {
        self.bounds = bounds;
    }

    pub fn observe(&mut self, batch: &TaskBatch) {
        self.bounds = self.bounds.update(batch);
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.experts.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ExpertState)> {
        self.experts.iter().map(|(k, e)| (*k, e))
    }

    pub fn get(&self, key: usize) -> Option<&ExpertState> {
        self.experts.get(&key)
    }

    pub fn get_mut(&mut self, key: usize) -> Option<&mut ExpertState> {
        self.experts.get_mut(&key)
    }

    pub fn target(&self, t: usize) -> Result<TargetSet> {
        target_set(&self.scheme, t)
    }

    /// Restart the experts of `target` from `meta`, inheriting `(R, C)` from
    /// the slot each one replaces, then refresh activity flags for round `t`.
    pub fn activate(&mut self, t: usize, target: &TargetSet, meta: &ParamPair) -> Result<ActivationReport> {
        if target.round != t {
            return Err(Error::InternalConsistency(format!(
                "target set for round {} applied at round {t}",
                target.round
            )));
        }
        let mut report = ActivationReport::default();
        // slots come longest-first, so a DI predecessor is always read
        // before its own slot is overwritten
        for slot in target.slots() {
            let predecessor = match self.scheme.kind {
                SchemeKind::Di => slot.key.checked_sub(1).and_then(|k| self.experts.remove(&k)),
                _ => self.experts.remove(&slot.key),
            };
            if predecessor.is_none() && self.scheme.kind == SchemeKind::Agc && t > 1 {
                return Err(Error::InternalConsistency(format!(
                    "AGC slot {} has no predecessor at round {t}",
                    slot.key
                )));
            }
            let confidence = match &predecessor {
                Some(p) => {
                    report.inherited += 1;
                    p.confidence
                }
                None => {
                    report.fresh += 1;
                    Confidence::default()
                }
            };
            let state = ExpertState {
                interval: slot.interval,
                params: meta.clone(),
                eta: stepsize(&slot.interval, &self.bounds),
                confidence,
                last_active: t,
                active: true,
            };
            report.activated.push(slot.interval);
            self.experts.insert(slot.key, state);
        }
        let restarted: Vec<usize> = target.slots().map(|s| s.key).collect();
        let activity = self.activity;
        for (k, e) in self.experts.iter_mut() {
            e.active = match activity {
                ActivityRule::Restart => restarted.contains(k),
                ActivityRule::Containment => e.interval.contains(t),
            };
            if e.active {
                e.last_active = t;
            }
        }
        Ok(report)
    }

    /// `(active keys, sleeping keys)` as set by the last activation.
    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        let mut active = Vec::new();
        let mut sleeping = Vec::new();
        for (k, e) in &self.experts {
            if e.active {
                active.push(*k);
            } else {
                sleeping.push(*k);
            }
        }
        (active, sleeping)
    }
}
