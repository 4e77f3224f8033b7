//! Interval families and target-set queries.
//!
//! Three families are supported: dynamic suffix intervals (DI), adaptive
//! geometric covers with a known horizon (AGC), and horizon-free dynamic
//! geometric covers (DGC). A fourth, [`SchemeKind::Single`], is the single
//! interval `[1, T]` used by the one-expert baseline.
//!
//! Geometric levels use a general base `b ≥ 2`: level `k` holds intervals of
//! nominal length `b^k`. Time indices start at 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start < 1 || end < start {
            return Err(Error::Config(format!("invalid interval [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }
}

impl std::fmt::Display for Interval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Di,
    Agc,
    Dgc,
    Single,
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "di" => Ok(Self::Di),
            "agc" => Ok(Self::Agc),
            "dgc" => Ok(Self::Dgc),
            "single" => Ok(Self::Single),
            other => Err(Error::Config(format!("unknown interval scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalScheme {
    pub kind: SchemeKind,
    pub horizon: Option<usize>,
    pub base: usize,
}

impl IntervalScheme {
    pub fn new(kind: SchemeKind, horizon: Option<usize>, base: usize) -> Result<Self> {
        if base < 2 {
            return Err(Error::Config(format!("base must be >= 2, got {base}")));
        }
        match (kind, horizon) {
            (SchemeKind::Agc | SchemeKind::Single, None) => {
                return Err(Error::Config(format!("{kind:?} requires the horizon T")))
            }
            (SchemeKind::Agc | SchemeKind::Single, Some(0)) => {
                return Err(Error::Config("horizon must be >= 1".into()))
            }
            (SchemeKind::Di | SchemeKind::Dgc, Some(_)) => {
                return Err(Error::Config(format!("{kind:?} must not be given a horizon")))
            }
            _ => {}
        }
        Ok(Self { kind, horizon, base })
    }

    pub fn di() -> Self {
        Self { kind: SchemeKind::Di, horizon: None, base: 2 }
    }

    pub fn agc(horizon: usize, base: usize) -> Result<Self> {
        Self::new(SchemeKind::Agc, Some(horizon), base)
    }

    pub fn dgc(base: usize) -> Result<Self> {
        Self::new(SchemeKind::Dgc, None, base)
    }

    pub fn single(horizon: usize) -> Result<Self> {
        Self::new(SchemeKind::Single, Some(horizon), 2)
    }

    fn horizon_or_err(&self) -> Result<usize> {
        self.horizon
            .ok_or_else(|| Error::Config(format!("{:?} requires the horizon T", self.kind)))
    }

    /// Number of AGC levels. At least one level exists even when `T < b`.
    pub fn agc_levels(&self) -> Result<u32> {
        Ok(floor_log(self.horizon_or_err()?, self.base).max(1))
    }

    fn check_round(&self, t: usize) -> Result<()> {
        if t < 1 {
            return Err(Error::Range { t, max: self.horizon.unwrap_or(usize::MAX) });
        }
        if let (SchemeKind::Agc | SchemeKind::Single, Some(h)) = (self.kind, self.horizon) {
            if t > h {
                return Err(Error::Range { t, max: h });
            }
        }
        Ok(())
    }
}

/// `⌊log_b x⌋` in exact integer arithmetic.
pub fn floor_log(x: usize, base: usize) -> u32 {
    debug_assert!(x >= 1 && base >= 2);
    let mut k = 0;
    let mut p = base;
    while p <= x {
        k += 1;
        match p.checked_mul(base) {
            Some(next) => p = next,
            None => break,
        }
    }
    k
}

fn pow(base: usize, k: u32) -> usize {
    base.checked_pow(k).unwrap_or(usize::MAX)
}

/// One member of a target set together with the pool slot it occupies.
///
/// For geometric schemes the slot is the level `k`; for DI it is the
/// interval length; the single scheme uses slot 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub key: usize,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Members {
    /// `{[i, t] : i ∈ [t]}` kept as the round alone.
    Suffixes,
    Explicit(Vec<Slot>),
}

/// Intervals that (re)start at round `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSet {
    pub round: usize,
    members: Members,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        match &self.members {
            Members::Suffixes => self.round,
            Members::Explicit(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Members with their pool slots, longest interval first.
    pub fn slots(&self) -> Box<dyn Iterator<Item = Slot> + '_> {
        match &self.members {
            Members::Suffixes => {
                let t = self.round;
                Box::new((1..=t).map(move |i| Slot { key: t - i + 1, interval: Interval { start: i, end: t } }))
            }
            Members::Explicit(v) => Box::new(v.iter().rev().copied()),
        }
    }

    pub fn intervals(&self) -> Vec<Interval> {
        let mut v: Vec<Interval> = self.slots().map(|s| s.interval).collect();
        v.sort();
        v
    }
}

pub fn target_set(scheme: &IntervalScheme, t: usize) -> Result<TargetSet> {
    scheme.check_round(t)?;
    let members = match scheme.kind {
        SchemeKind::Di => Members::Suffixes,
        SchemeKind::Agc => {
            let h = scheme.horizon_or_err()?;
            let levels = scheme.agc_levels()?;
            let mut v = Vec::new();
            for k in 0..levels {
                let len = pow(scheme.base, k);
                if (t - 1).is_multiple_of(len) {
                    let end = h.min(t - 1 + len);
                    v.push(Slot { key: k as usize, interval: Interval { start: t, end } });
                }
            }
            Members::Explicit(v)
        }
        SchemeKind::Dgc => {
            let mut v = Vec::new();
            for k in 0..=floor_log(t, scheme.base) {
                let len = pow(scheme.base, k);
                if t.is_multiple_of(len) {
                    v.push(Slot { key: k as usize, interval: Interval { start: t, end: t + len - 1 } });
                }
            }
            Members::Explicit(v)
        }
        SchemeKind::Single => {
            let h = scheme.horizon_or_err()?;
            let v = if t == 1 { vec![Slot { key: 0, interval: Interval { start: 1, end: h } }] } else { vec![] };
            Members::Explicit(v)
        }
    };
    Ok(TargetSet { round: t, members })
}

/// Every interval of the family whose start lies in `[1, up_to]`.
///
/// For DI this is `O(up_to²)`; it exists to back the brute-force oracle.
pub fn enumerate_full_set(scheme: &IntervalScheme, up_to: usize) -> Result<Vec<Interval>> {
    if up_to < 1 {
        return Err(Error::Range { t: up_to, max: usize::MAX });
    }
    let mut out = Vec::new();
    match scheme.kind {
        SchemeKind::Di => {
            for k in 1..=up_to {
                for q in k..=up_to {
                    out.push(Interval { start: k, end: q });
                }
            }
        }
        SchemeKind::Agc => {
            let h = scheme.horizon_or_err()?;
            for k in 0..scheme.agc_levels()? {
                let len = pow(scheme.base, k);
                let mut i = 1usize;
                loop {
                    let start = (i - 1) * len + 1;
                    if start > h || start > up_to {
                        break;
                    }
                    out.push(Interval { start, end: h.min(i * len) });
                    i += 1;
                }
            }
        }
        SchemeKind::Dgc => {
            let mut k = 0u32;
            while pow(scheme.base, k) <= up_to {
                let len = pow(scheme.base, k);
                let mut i = 1usize;
                while i * len <= up_to {
                    out.push(Interval { start: i * len, end: (i + 1) * len - 1 });
                    i += 1;
                }
                k += 1;
            }
        }
        SchemeKind::Single => out.push(Interval { start: 1, end: scheme.horizon_or_err()? }),
    }
    Ok(out)
}

/// Oracle: filter the enumerated family by the membership predicate.
///
/// DI selects `{I : end = t}`; the geometric schemes select
/// `{I : t ∈ I, t − 1 ∉ I}`.
pub fn brute_force_target_set(scheme: &IntervalScheme, t: usize, up_to: usize) -> Result<Vec<Interval>> {
    if t > up_to {
        return Err(Error::Range { t, max: up_to });
    }
    Ok(select_target(&enumerate_full_set(scheme, up_to)?, scheme.kind, t))
}

/// The membership predicate of [`brute_force_target_set`] applied to an
/// already enumerated family, sorted.
pub fn select_target(full: &[Interval], kind: SchemeKind, t: usize) -> Vec<Interval> {
    let mut v: Vec<Interval> = full
        .iter()
        .filter(|iv| match kind {
            SchemeKind::Di => iv.end == t,
            _ => iv.contains(t) && !iv.contains(t - 1),
        })
        .copied()
        .collect();
    v.sort();
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub total: usize,
    pub active_max: usize,
}

/// Expected pool size after activation at round `t`.
pub fn expected_census(scheme: &IntervalScheme, t: usize) -> Result<Census> {
    if t < 1 {
        return Err(Error::Range { t, max: usize::MAX });
    }
    let total = match scheme.kind {
        SchemeKind::Di => t,
        SchemeKind::Agc => scheme.agc_levels()? as usize,
        SchemeKind::Dgc => floor_log(t, scheme.base) as usize + 1,
        SchemeKind::Single => 1,
    };
    Ok(Census { total, active_max: total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(a: usize, b: usize) -> Interval {
        Interval { start: a, end: b }
    }

    #[test]
    fn agc_worked_example() {
        let s = IntervalScheme::agc(18, 2).unwrap();
        assert_eq!(target_set(&s, 5).unwrap().intervals(), vec![iv(5, 5), iv(5, 6), iv(5, 8)]);
        assert_eq!(
            target_set(&s, 1).unwrap().intervals(),
            vec![iv(1, 1), iv(1, 2), iv(1, 4), iv(1, 8)]
        );
        assert_eq!(s.agc_levels().unwrap(), 4);
        let full = enumerate_full_set(&s, 18).unwrap();
        // levels are emitted in order, so the last three form level 3
        assert_eq!(&full[full.len() - 3..], &[iv(1, 8), iv(9, 16), iv(17, 18)]);
        assert!(matches!(target_set(&s, 19), Err(Error::Range { .. })));
    }

    #[test]
    fn dgc_worked_examples() {
        let s = IntervalScheme::dgc(2).unwrap();
        assert_eq!(target_set(&s, 5).unwrap().intervals(), vec![iv(5, 5)]);
        assert!(target_set(&s, 16).unwrap().intervals().contains(&iv(16, 31)));
        let full = enumerate_full_set(&s, 7).unwrap();
        let want: Vec<Interval> = (1..=7)
            .map(|i| iv(i, i))
            .chain([iv(2, 3), iv(4, 5), iv(6, 7), iv(4, 7)])
            .collect();
        assert_eq!(full, want);
    }

    #[test]
    fn di_examples() {
        let s = IntervalScheme::di();
        assert_eq!(target_set(&s, 3).unwrap().intervals(), vec![iv(1, 3), iv(2, 3), iv(3, 3)]);
        assert_eq!(brute_force_target_set(&s, 1, 1).unwrap(), vec![iv(1, 1)]);
    }

    #[test]
    fn census_formulas() {
        assert_eq!(expected_census(&IntervalScheme::di(), 7).unwrap().total, 7);
        assert_eq!(expected_census(&IntervalScheme::agc(18, 2).unwrap(), 3).unwrap().total, 4);
        assert_eq!(expected_census(&IntervalScheme::dgc(2).unwrap(), 5).unwrap().total, 3);
    }

    #[test]
    fn scheme_preconditions() {
        assert!(IntervalScheme::new(SchemeKind::Agc, None, 2).is_err());
        assert!(IntervalScheme::new(SchemeKind::Dgc, Some(8), 2).is_err());
        assert!(IntervalScheme::new(SchemeKind::Dgc, None, 1).is_err());
    }

    #[test]
    fn floor_log_exact_at_powers() {
        assert_eq!(floor_log(1, 2), 0);
        assert_eq!(floor_log(8, 2), 3);
        assert_eq!(floor_log(7, 2), 2);
        assert_eq!(floor_log(243, 3), 5);
        assert_eq!(floor_log(242, 3), 4);
        assert_eq!(floor_log(90, 2), 6);
    }
}
