//! Confidence-potential expert weights.
//!
//! `Φ(R, C) = exp([R]₊² / 3C)` and `w(R, C) = ½(Φ(R+1, C+1) − Φ(R−1, C−1))`.
//! Normalization works on `ln w` so that large `R²/C` ratios late in a long
//! run cannot overflow.

use crate::error::{Error, Result};

/// Below this total raw weight the normalization falls back to uniform.
pub const ZERO_MASS: f64 = 1e-12;

fn log_phi(r: f64, c: f64) -> Result<f64> {
    let rp = r.max(0.0);
    if rp == 0.0 {
        return Ok(0.0);
    }
    if c <= 0.0 {
        return Err(Error::InternalConsistency(format!("phi({r}, {c}) with positive R and C <= 0")));
    }
    Ok(rp * rp / (3.0 * c))
}

/// Total function: 1 whenever `[R]₊ = 0`, including `C ≤ 0`.
pub fn phi(r: f64, c: f64) -> Result<f64> {
    Ok(log_phi(r, c)?.exp())
}

/// `ln w(R, C)`; `−∞` when the weight is zero.
fn log_raw_weight(r: f64, c: f64) -> Result<f64> {
    let a = log_phi(r + 1.0, c + 1.0)?;
    let b = log_phi(r - 1.0, c - 1.0)?;
    // w = ½ e^a (1 − e^{b−a}); b ≤ a whenever |R| ≤ C
    let diff = -(b - a).exp_m1();
    if diff <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(a + (0.5 * diff).ln())
}

pub fn raw_weight(r: f64, c: f64) -> Result<f64> {
    Ok(log_raw_weight(r, c)?.exp())
}

/// Normalized weights over a pool given each expert's `(R, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        Self { values: vec![1.0 / n as f64; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

pub fn normalize(stats: &[(f64, f64)]) -> Result<WeightVector> {
    if stats.is_empty() {
        return Err(Error::InternalConsistency("cannot weight an empty pool".into()));
    }
    let logs = stats
        .iter()
        .map(|&(r, c)| log_raw_weight(r, c))
        .collect::<Result<Vec<f64>>>()?;
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Ok(WeightVector::uniform(stats.len()));
    }
    // the fallback threshold applies to the unscaled mass; scaled mass is ≥ 1
    let unscaled_top = top.exp();
    let scaled: Vec<f64> = logs.iter().map(|&l| (l - top).exp()).collect();
    let total: f64 = scaled.iter().sum();
    if unscaled_top * total < ZERO_MASS {
        return Ok(WeightVector::uniform(stats.len()));
    }
    Ok(WeightVector { values: scaled.into_iter().map(|w| w / total).collect() })
}

/// Confidence statistics of one expert.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Confidence {
    pub r: f64,
    pub c: f64,
}

/// `R += Δ`, `C += |Δ|` with `Δ = meta_value − expert_value`.
pub fn update_rc(conf: Confidence, meta_value: f64, expert_value: f64) -> Result<Confidence> {
    if !meta_value.is_finite() || !expert_value.is_finite() {
        return Err(Error::Numerical {
            round: 0,
            detail: format!("non-finite Lagrangian value (meta {meta_value}, expert {expert_value})"),
        });
    }
    let delta = meta_value - expert_value;
    Ok(Confidence { r: conf.r + delta, c: conf.c + delta.abs() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_examples() {
        assert_eq!(phi(0.0, 0.0).unwrap(), 1.0);
        assert_eq!(phi(-1.0, -1.0).unwrap(), 1.0);
        assert!((phi(1.0, 1.0).unwrap() - (1.0f64 / 3.0).exp()).abs() < 1e-15);
        assert!((phi(1.0, 1.0).unwrap() - 1.39561).abs() < 1e-5);
        assert!(phi(1.0, 0.0).is_err());
    }

    #[test]
    fn raw_weight_examples() {
        let w00 = 0.5 * ((1.0f64 / 3.0).exp() - 1.0);
        assert!((raw_weight(0.0, 0.0).unwrap() - w00).abs() < 1e-15);
        assert!((w00 - 0.1978062).abs() < 1e-7);
        assert_eq!(raw_weight(-5.0, 5.0).unwrap(), 0.0);
        let w22 = 0.5 * (1f64.exp() - (1.0f64 / 3.0).exp());
        assert!((raw_weight(2.0, 2.0).unwrap() - w22).abs() < 1e-14);
        assert!((w22 - 0.661335).abs() < 1e-6);
    }

    #[test]
    fn normalize_examples() {
        let w = normalize(&[(0.3, 1.0), (0.3, 1.0)]).unwrap();
        assert_eq!(w.values(), &[0.5, 0.5]);
        let w = normalize(&[(-5.0, 5.0), (-9.0, 9.0), (-3.0, 4.0)]).unwrap();
        assert_eq!(w.values(), &[1.0 / 3.0; 3]);
        let w = normalize(&[(0.0, 0.0), (2.0, 2.0), (-5.0, 5.0)]).unwrap();
        let (a, b) = (0.5 * ((1.0f64 / 3.0).exp() - 1.0), 0.5 * (1f64.exp() - (1.0f64 / 3.0).exp()));
        assert!((w.get(0) - a / (a + b)).abs() < 1e-14);
        assert!((w.get(1) - b / (a + b)).abs() < 1e-14);
        assert_eq!(w.get(2), 0.0);
        assert!((w.get(0) - 0.23024).abs() < 1e-5);
        assert!((w.get(1) - 0.76976).abs() < 1e-5);
    }

    #[test]
    fn large_ratios_do_not_overflow() {
        let w = normalize(&[(3000.0, 3000.0), (2990.0, 3000.0)]).unwrap();
        assert!(w.values().iter().all(|v| v.is_finite()));
        assert!(w.get(0) > w.get(1));
    }

    #[test]
    fn rc_update_examples() {
        let c = Confidence { r: 0.4, c: 1.0 };
        assert_eq!(update_rc(c, 2.0, 2.0).unwrap(), c);
        let c = update_rc(Confidence::default(), 1.0, 2.5).unwrap();
        assert_eq!(c, Confidence { r: -1.5, c: 1.5 });
        assert!(matches!(update_rc(c, f64::NAN, 0.0), Err(Error::Numerical { .. })));
    }
}
