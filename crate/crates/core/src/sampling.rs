//! Instance-balanced and class-balanced batch drawing, the instance-wise
//! re-balancing factor, and a Monte-Carlo exposure simulator.
//!
//! For class `j` with `N_j` positives among `k` classes, a class-balanced
//! draw reaches a specific positive sample of `j` with probability
//! `p_ij = (1/k) / N_j`. A sample positive in several classes is reachable
//! through every one of them, so its actual probability is
//! `p_iA = sum_{j positive} p_ij`. The factor `delta_ij = p_ij / p_iA`
//! undoes that over-exposure.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::column_counts;
use crate::error::{Error, Result};

/// How the raw factor is mapped to a loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaTransform {
    /// `sqrt(delta)`, pulls small factors toward 1.
    #[default]
    Sqrt,
    /// `delta^2`, the literal reading of "square".
    Square,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaWeights {
    pub delta: Array2<f64>,
    pub sqrt_delta: Array2<f64>,
}

impl DeltaWeights {
    pub fn weights(&self, transform: DeltaTransform) -> Array2<f64> {
        match transform {
            DeltaTransform::Sqrt => self.sqrt_delta.clone(),
            DeltaTransform::Square => self.delta.mapv(|d| d * d),
        }
    }

    /// Loss weights for the given rows.
    pub fn rows(&self, indices: &[usize], transform: DeltaTransform) -> Array2<f64> {
        match transform {
            DeltaTransform::Sqrt => self.sqrt_delta.select(Axis(0), indices),
            DeltaTransform::Square => self.delta.select(Axis(0), indices).mapv(|d| d * d),
        }
    }
}

/// Factor computed from the label matrix's own class counts.
pub fn compute_delta(labels: ArrayView2<'_, u8>) -> Result<DeltaWeights> {
    let counts = column_counts(labels);
    compute_delta_with_counts(labels, &counts)
}

/// Factor for `labels` under the class counts of a reference (training)
/// distribution.
///
/// Positive entries take `p_ij / p_iA` exactly. Negative entries use the same
/// ratio capped at 1: a negative term of a rarer class is not over-exposed.
pub fn compute_delta_with_counts(labels: ArrayView2<'_, u8>, counts: &[usize]) -> Result<DeltaWeights> {
    let k = labels.ncols();
    if counts.len() != k {
        return Err(Error::Shape(format!("{} class counts for {k} label columns", counts.len())));
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(j));
    }
    let class_prob = 1.0 / k as f64;
    let ideal: Vec<f64> = counts.iter().map(|&c| class_prob / c as f64).collect();
    let mut delta = Array2::<f64>::zeros(labels.dim());
    for (i, row) in labels.rows().into_iter().enumerate() {
        let actual: f64 = row
            .iter()
            .zip(&ideal)
            .filter(|(&y, _)| y != 0)
            .map(|(_, p)| p)
            .sum();
        if actual == 0.0 {
            return Err(Error::EmptyRow(i));
        }
        for (j, &y) in row.iter().enumerate() {
            let ratio = ideal[j] / actual;
            delta[[i, j]] = if y != 0 { ratio } else { ratio.min(1.0) };
        }
    }
    let sqrt_delta = delta.mapv(f64::sqrt);
    Ok(DeltaWeights { delta, sqrt_delta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    InstanceBalanced,
    ClassBalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub batch_size: usize,
    pub seed: u64,
}

/// Seeded batch sampler. Draws are with replacement; a class-balanced draw
/// picks a non-empty class uniformly and then one of its positives uniformly.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    spec: SamplerSpec,
    rng: ChaCha8Rng,
    n: usize,
    members: Vec<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(spec: SamplerSpec, labels: ArrayView2<'_, u8>) -> Result<Self> {
        if spec.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if labels.nrows() == 0 {
            return Err(Error::Shape("cannot sample from an empty label matrix".into()));
        }
        let members: Vec<Vec<usize>> = labels
            .columns()
            .into_iter()
            .map(|col| {
                col.iter()
                    .enumerate()
                    .filter(|(_, &y)| y != 0)
                    .map(|(i, _)| i)
                    .collect::<Vec<_>>()
            })
            .filter(|m: &Vec<usize>| !m.is_empty())
            .collect();
        if spec.kind == SamplerKind::ClassBalanced && members.is_empty() {
            return Err(Error::Shape("no class has a positive sample".into()));
        }
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            n: labels.nrows(),
            members,
        })
    }

    pub fn spec(&self) -> SamplerSpec {
        self.spec
    }

    pub fn draw_one(&mut self) -> usize {
        match self.spec.kind {
            SamplerKind::InstanceBalanced => self.rng.random_range(0..self.n),
            SamplerKind::ClassBalanced => {
                let class = self.rng.random_range(0..self.members.len());
                let pool = &self.members[class];
                pool[self.rng.random_range(0..pool.len())]
            }
        }
    }

    pub fn draw_batch(&mut self) -> Vec<usize> {
        (0..self.spec.batch_size).map(|_| self.draw_one()).collect()
    }
}

/// Exact per-draw probability of selecting each sample.
pub fn draw_probabilities(kind: SamplerKind, labels: ArrayView2<'_, u8>) -> Vec<f64> {
    let n = labels.nrows();
    match kind {
        SamplerKind::InstanceBalanced => vec![1.0 / n as f64; n],
        SamplerKind::ClassBalanced => {
            let counts = column_counts(labels);
            let nonempty = counts.iter().filter(|&&c| c > 0).count() as f64;
            labels
                .rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .zip(&counts)
                        .filter(|(&y, _)| y != 0)
                        .map(|(_, &c)| 1.0 / (nonempty * c as f64))
                        .sum()
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExposureReport {
    pub draws: usize,
    pub class_counts: Vec<usize>,
    /// Fraction of draws in which the class was a positive label.
    pub per_draw: Vec<f64>,
    /// `per_draw * n`: positive exposures over one epoch of `n` draws.
    pub per_epoch: Vec<f64>,
}

pub fn simulate_exposure(spec: SamplerSpec, labels: ArrayView2<'_, u8>, draws: usize) -> Result<ExposureReport> {
    if draws == 0 {
        return Err(Error::Config("draws must be >= 1".into()));
    }
    let mut sampler = BatchSampler::new(spec, labels)?;
    let k = labels.ncols();
    let mut hits = vec![0usize; k];
    for _ in 0..draws {
        let i = sampler.draw_one();
        for (j, &y) in labels.row(i).iter().enumerate() {
            hits[j] += y as usize;
        }
    }
    let per_draw: Vec<f64> = hits.iter().map(|&h| h as f64 / draws as f64).collect();
    let n = labels.nrows() as f64;
    Ok(ExposureReport {
        draws,
        class_counts: column_counts(labels),
        per_epoch: per_draw.iter().map(|p| p * n).collect(),
        per_draw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Two classes with 100 and 10 positives; `shared` samples of class 2
    /// are also positive in class 1.
    pub(crate) fn two_class(shared: usize) -> Array2<u8> {
        let mut labels = Array2::<u8>::zeros((100 + 10 - shared, 2));
        for i in 0..100 {
            labels[[i, 0]] = 1;
        }
        for i in 0..10 {
            labels[[100 - shared + i, 1]] = 1;
        }
        labels
    }

    #[test]
    fn single_positive_has_unit_factor() {
        let d = compute_delta(array![[1u8, 0], [0, 1], [1, 0]].view()).unwrap();
        assert_eq!(d.delta[[0, 0]], 1.0);
        assert_eq!(d.sqrt_delta[[0, 0]], 1.0);
        assert_eq!(d.delta[[1, 1]], 1.0);
    }

    #[test]
    fn worked_head_tail_example() {
        let labels = two_class(1);
        let d = compute_delta(labels.view()).unwrap();
        let row = 99;
        assert_eq!(labels.row(row).to_vec(), vec![1, 1]);
        assert!((d.delta[[row, 0]] - 1.0 / 11.0).abs() < 1e-15);
        assert!((d.sqrt_delta[[row, 0]] - 0.301511).abs() < 1e-6);
        assert!((d.delta[[row, 1]] - 10.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn equal_counts_all_positive() {
        let k = 4;
        let mut labels = Array2::<u8>::zeros((k + 1, k));
        for j in 0..k {
            labels[[j, j]] = 1;
            labels[[k, j]] = 1;
        }
        let d = compute_delta(labels.view()).unwrap();
        for j in 0..k {
            assert!((d.delta[[k, j]] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(compute_delta(array![[1u8, 0], [1, 0]].view()), Err(Error::EmptyClass(1))));
        assert!(matches!(
            compute_delta(array![[1u8, 1], [0, 0]].view()),
            Err(Error::EmptyRow(1))
        ));
        let spec = SamplerSpec { kind: SamplerKind::InstanceBalanced, batch_size: 0, seed: 0 };
        assert!(BatchSampler::new(spec, array![[1u8]].view()).is_err());
        let spec = SamplerSpec { batch_size: 1, ..spec };
        assert!(simulate_exposure(spec, array![[1u8]].view(), 0).is_err());
    }

    #[test]
    fn class_balanced_probabilities() {
        let labels = two_class(0);
        let p = draw_probabilities(SamplerKind::ClassBalanced, labels.view());
        assert!((p[105] - 0.05).abs() < 1e-15);
        assert!((p[0] - 0.005).abs() < 1e-15);
        let labels = two_class(1);
        let p = draw_probabilities(SamplerKind::ClassBalanced, labels.view());
        assert!((p[99] - 0.055).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_frequencies() {
        let labels = Array2::<u8>::from_elem((4, 2), 1);
        let spec = SamplerSpec { kind: SamplerKind::InstanceBalanced, batch_size: 1000, seed: 1 };
        let mut s = BatchSampler::new(spec, labels.view()).unwrap();
        let mut hist = [0usize; 4];
        for _ in 0..40 {
            for i in s.draw_batch() {
                hist[i] += 1;
            }
        }
        for h in hist {
            let f = h as f64 / 40_000.0;
            // sigma = sqrt(0.25 * 0.75 / 40000) ~ 0.0022
            assert!((f - 0.25).abs() < 0.0066, "{f}");
        }

        let labels = two_class(0);
        let spec = SamplerSpec { kind: SamplerKind::ClassBalanced, batch_size: 1, seed: 2 };
        let mut s = BatchSampler::new(spec, labels.view()).unwrap();
        let draws = 200_000;
        let hits = (0..draws).filter(|_| s.draw_one() == 105).count();
        let f = hits as f64 / draws as f64;
        assert!((f - 0.05).abs() < 3.0 * (0.05f64 * 0.95 / draws as f64).sqrt(), "{f}");
    }

    #[test]
    fn reproducible_batches() {
        let labels = two_class(3);
        for kind in [SamplerKind::InstanceBalanced, SamplerKind::ClassBalanced] {
            let spec = SamplerSpec { kind, batch_size: 64, seed: 99 };
            let mut a = BatchSampler::new(spec, labels.view()).unwrap();
            let mut b = BatchSampler::new(spec, labels.view()).unwrap();
            for _ in 0..5 {
                assert_eq!(a.draw_batch(), b.draw_batch());
            }
        }
    }

    #[test]
    fn exposure_patterns() {
        let draws = 100_000;
        let tol = |p: f64| 4.0 * (p * (1.0 - p) / draws as f64).sqrt();

        let labels = two_class(0);
        let spec = SamplerSpec { kind: SamplerKind::InstanceBalanced, batch_size: 1, seed: 5 };
        let r = simulate_exposure(spec, labels.view(), draws).unwrap();
        let (p0, p1) = (100.0 / 110.0, 10.0 / 110.0);
        assert!((r.per_draw[0] - p0).abs() < tol(p0));
        assert!((r.per_draw[1] - p1).abs() < tol(p1));

        let spec = SamplerSpec { kind: SamplerKind::ClassBalanced, ..spec };
        let r = simulate_exposure(spec, labels.view(), draws).unwrap();
        assert!((r.per_draw[0] - 0.5).abs() < tol(0.5));
        assert!((r.per_draw[1] - 0.5).abs() < tol(0.5));

        // Half of the tail class co-occurs with the head class: a tail draw
        // also exposes the head half of the time, a head draw exposes the
        // tail 5 times in 100.
        let labels = two_class(5);
        let r = simulate_exposure(spec, labels.view(), draws).unwrap();
        let (head, tail) = (0.5 + 0.5 * 0.5, 0.5 + 0.5 * 0.05);
        let probs = draw_probabilities(SamplerKind::ClassBalanced, labels.view());
        let exact: f64 = probs.iter().zip(labels.column(0)).map(|(p, &y)| p * f64::from(y)).sum();
        assert!((exact - head).abs() < 1e-12);
        assert!((r.per_draw[0] - head).abs() < tol(head), "{}", r.per_draw[0]);
        assert!((r.per_draw[1] - tail).abs() < tol(tail), "{}", r.per_draw[1]);
    }
}
