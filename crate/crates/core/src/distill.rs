//! Two-teacher distillation terms: cosine distance between embeddings and
//! temperature-scaled binary KL between per-class sigmoid outputs, plus the
//! weighted objective that combines them with the classification loss.
//!
//! Teachers are frozen; every gradient here is with respect to the student.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::sigmoid;

const NORM_EPS: f64 = 1e-12;
const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlVariant {
    /// `p ln(p/q) + (1-p) ln((1-p)/(1-q))` per class; never negative.
    #[default]
    FullBinary,
    /// `p ln(p/q)` only; can go negative.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub kl_variant: KlVariant,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.2,
            gamma: 10.0,
            temperature: 3.0,
            kl_variant: KlVariant::FullBinary,
        }
    }
}

impl KdConfig {
    /// No distillation: the objective reduces to the classification loss.
    pub fn disabled() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (0.0..=0.5).contains(&v);
        if !in_range(self.alpha) || !in_range(self.beta) {
            return Err(Error::Config(format!(
                "alpha and beta must lie in [0, 0.5], got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Multipliers applied to (classification, feature KD, logits KD).
    pub fn coefficients(&self) -> (f64, f64, f64) {
        (1.0 - self.alpha - self.beta, self.alpha * self.gamma, self.beta)
    }

    pub fn is_active(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }
}

/// Mean over the batch of `1 - cos(v_teacher, v_student)`.
pub fn feature_kd(teacher: ArrayView2<'_, f64>, student: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    if teacher.dim() != student.dim() {
        return Err(Error::Shape(format!(
            "teacher embeddings {:?} vs student {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    let b = teacher.nrows();
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros(student.dim());
    for i in 0..b {
        let t = teacher.row(i);
        let s = student.row(i);
        let dot = t.dot(&s);
        let tt = t.dot(&t).max(NORM_EPS * NORM_EPS);
        let ss = s.dot(&s).max(NORM_EPS * NORM_EPS);
        let cos = dot / (tt * ss).sqrt();
        value += 1.0 - cos.clamp(-1.0, 1.0);
        let inv = 1.0 / (tt * ss).sqrt();
        let mut g = grad.row_mut(i);
        for c in 0..t.len() {
            g[c] = -(t[c] * inv - cos * s[c] / ss) / b as f64;
        }
    }
    Ok((value / b as f64, grad))
}

/// Temperature-scaled divergence from teacher to student sigmoid outputs,
/// averaged over batch and classes.
pub fn logits_kd(
    student: ArrayView2<'_, f64>,
    teacher: ArrayView2<'_, f64>,
    temperature: f64,
    variant: KlVariant,
) -> Result<(f64, Array2<f64>)> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    if teacher.dim() != student.dim() {
        return Err(Error::Shape(format!(
            "teacher logits {:?} vs student {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    let count = (student.nrows() * student.ncols()) as f64;
    let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros(student.dim());
    for ((idx, &zs), &zt) in student.indexed_iter().zip(teacher.iter()) {
        let raw_s = sigmoid(zs / temperature);
        let p = clamp(sigmoid(zt / temperature));
        let q = clamp(raw_s);
        // d q / d z_s, zero where the clamp is active.
        let dq = if q == raw_s { q * (1.0 - q) / temperature } else { 0.0 };
        let (term, dterm_dq) = match variant {
            KlVariant::FullBinary => (
                p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln(),
                -p / q + (1.0 - p) / (1.0 - q),
            ),
            KlVariant::Literal => (p * (p / q).ln(), -p / q),
        };
        value += term;
        grad[idx] = dterm_dq * dq / count;
    }
    Ok((value / count, grad))
}

/// `(1 - alpha - beta) * bce + alpha * gamma * feature_kd + beta * logits_kd`.
pub fn total_loss(bce: f64, feature: f64, logits: f64, cfg: &KdConfig) -> f64 {
    let (a, b, c) = cfg.coefficients();
    a * bce + b * feature + c * logits
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_distance_cases() {
        let v = array![[1.0, 2.0, -0.5], [0.3, 0.0, 4.0]];
        assert_eq!(feature_kd(v.view(), v.view()).unwrap().0, 0.0);
        let (val, _) = feature_kd(array![[1.0, 0.0]].view(), array![[0.0, 3.0]].view()).unwrap();
        assert!((val - 1.0).abs() < 1e-15);
        let (val, _) = feature_kd(v.view(), (-&v).view()).unwrap();
        assert!((val - 2.0).abs() < 1e-15);
        assert!(feature_kd(v.view(), array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn parallel_student_has_zero_gradient() {
        let t = array![[1.0, -2.0, 0.5]];
        let s = &t * 3.7;
        let (val, g) = feature_kd(t.view(), s.view()).unwrap();
        assert!(val.abs() < 1e-15);
        assert!(g.iter().all(|x| x.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn kl_identities_and_scalars() {
        let z = array![[0.3, -2.0], [5.0, 0.0]];
        for variant in [KlVariant::FullBinary, KlVariant::Literal] {
            assert_eq!(logits_kd(z.view(), z.view(), 3.0, variant).unwrap().0, 0.0);
        }
        // p_t = 0.9 via logit ln 9, p_s = 0.5 via logit 0.
        let (v, _) = logits_kd(array![[0.0]].view(), array![[9f64.ln()]].view(), 1.0, KlVariant::FullBinary).unwrap();
        assert!((v - 0.368064).abs() < 1e-6, "{v}");
        let (v, _) = logits_kd(array![[9f64.ln()]].view(), array![[0.0]].view(), 1.0, KlVariant::Literal).unwrap();
        assert!((v + 0.293893).abs() < 1e-6, "{v}");
        assert!(logits_kd(z.view(), z.view(), 0.0, KlVariant::FullBinary).is_err());
    }

    #[test]
    fn objective_weights() {
        let off = KdConfig::disabled();
        assert_eq!(total_loss(0.7, 0.3, 0.9, &off), 0.7);
        let cfg = KdConfig::default();
        assert!((total_loss(1.0, 0.0, 0.0, &cfg) - 0.6).abs() < 1e-15);
        assert!((total_loss(1.0, 0.1, 0.5, &cfg) - 0.9).abs() < 1e-15);
        assert!(KdConfig { alpha: 0.6, ..cfg }.validate().is_err());
        assert!(KdConfig { temperature: -1.0, ..cfg }.validate().is_err());
        assert!(cfg.validate().is_ok());
    }
}
