//! Multi-label datasets, imbalance statistics, and shot-based class groups.

mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use io::{load_bundle, load_dataset, save_bundle, save_dataset, DatasetBundle, Manifest};
pub use synth::{generate_synthetic, SynthConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Feature matrix plus binary label matrix for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelDataset {
    features: Array2<f32>,
    labels: Array2<u8>,
    class_counts: Vec<usize>,
    split: Split,
    seed: u64,
}

impl MultiLabelDataset {
    pub fn new(features: Array2<f32>, labels: Array2<u8>, split: Split, seed: u64) -> Result<Self> {
        let (n, d) = features.dim();
        let k = labels.ncols();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("features must be non-empty, got {n}x{d}")));
        }
        if k < 2 {
            return Err(Error::Shape(format!("need at least 2 classes, got {k}")));
        }
        if labels.nrows() != n {
            return Err(Error::Shape(format!(
                "features have {n} rows but labels have {}",
                labels.nrows()
            )));
        }
        for (i, row) in labels.rows().into_iter().enumerate() {
            if row.iter().any(|&y| y > 1) {
                return Err(Error::Shape(format!("row {i} contains a non-binary label")));
            }
            if row.iter().all(|&y| y == 0) {
                return Err(Error::EmptyRow(i));
            }
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("features contain non-finite values".into()));
        }
        let class_counts = column_counts(labels.view());
        Ok(Self {
            features,
            labels,
            class_counts,
            split,
            seed,
        })
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Gathers the given rows as f64 features and u8 labels.
    pub fn batch(&self, indices: &[usize]) -> (Array2<f64>, Array2<u8>) {
        let x = self.features.select(Axis(0), indices).mapv(f64::from);
        let y = self.labels.select(Axis(0), indices);
        (x, y)
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}

pub(crate) fn column_counts(labels: ArrayView2<'_, u8>) -> Vec<usize> {
    labels
        .columns()
        .into_iter()
        .map(|col| col.iter().map(|&y| y as usize).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub rho: f64,
    pub lcard: f64,
    pub class_counts: Vec<usize>,
    /// Classes by decreasing count; ties keep ascending class id.
    pub sorted_class_order: Vec<usize>,
}

/// Imbalance ratio (largest over smallest class count) and label cardinality
/// (mean positives per row).
pub fn compute_stats(labels: ArrayView2<'_, u8>) -> Result<DatasetStats> {
    if labels.nrows() == 0 || labels.ncols() == 0 {
        return Err(Error::Shape("label matrix is empty".into()));
    }
    let counts = column_counts(labels);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    let max = *counts.iter().max().expect("non-empty") as f64;
    let min = *counts.iter().min().expect("non-empty") as f64;
    let total: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    Ok(DatasetStats {
        rho: max / min,
        lcard: total as f64 / labels.nrows() as f64,
        class_counts: counts,
        sorted_class_order: order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Many, Group::Medium, Group::Few];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Absolute sample-count boundaries: `count >= many` is many-shot,
/// `count < few` is few-shot, everything between is medium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupThresholds {
    pub many: usize,
    pub few: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self { many: 100, few: 10 }
    }
}

impl GroupThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.many <= self.few || self.few < 1 {
            return Err(Error::Thresholds {
                many: self.many,
                few: self.few,
            });
        }
        Ok(())
    }

    pub fn classify(&self, count: usize) -> Group {
        if count >= self.many {
            Group::Many
        } else if count >= self.few {
            Group::Medium
        } else {
            Group::Few
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub group_of_class: Vec<Group>,
    pub thresholds: GroupThresholds,
}

impl GroupAssignment {
    pub fn classes_in(&self, group: Group) -> impl Iterator<Item = usize> + '_ {
        self.group_of_class
            .iter()
            .enumerate()
            .filter(move |(_, &g)| g == group)
            .map(|(c, _)| c)
    }

    pub fn len(&self) -> usize {
        self.group_of_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of_class.is_empty()
    }
}

pub fn assign_groups(class_counts: &[usize], thresholds: GroupThresholds) -> Result<GroupAssignment> {
    thresholds.validate()?;
    Ok(GroupAssignment {
        group_of_class: class_counts.iter().map(|&c| thresholds.classify(c)).collect(),
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_single_label_stats() {
        let labels = array![[1u8, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0, 0], [0, 1, 0], [0, 0, 1]];
        let stats = compute_stats(labels.view()).unwrap();
        assert_eq!(stats.rho, 1.0);
        assert_eq!(stats.lcard, 1.0);
        assert_eq!(stats.sorted_class_order, vec![0, 1, 2]);
    }

    #[test]
    fn empty_class_is_reported() {
        let labels = array![[1u8, 0, 0], [1, 1, 0]];
        assert!(matches!(compute_stats(labels.view()), Err(Error::EmptyClass(2))));
    }

    #[test]
    fn group_assignment_rules() {
        let t = GroupThresholds { many: 100, few: 10 };
        let g = assign_groups(&[1000, 60, 5], t).unwrap();
        assert_eq!(g.group_of_class, vec![Group::Many, Group::Medium, Group::Few]);
        let g = assign_groups(&[100, 500, 101], t).unwrap();
        assert!(g.group_of_class.iter().all(|&x| x == Group::Many));
        // Boundaries: exactly 100 is many, exactly 10 is medium, 9 is few.
        let g = assign_groups(&[100, 99, 10, 9], t).unwrap();
        assert_eq!(
            g.group_of_class,
            vec![Group::Many, Group::Medium, Group::Medium, Group::Few]
        );
        assert!(matches!(
            assign_groups(&[1], GroupThresholds { many: 10, few: 10 }),
            Err(Error::Thresholds { .. })
        ));
        assert!(assign_groups(&[1], GroupThresholds { many: 10, few: 0 }).is_err());
    }

    #[test]
    fn dataset_invariants() {
        let x = Array2::<f32>::zeros((2, 3));
        assert!(matches!(
            MultiLabelDataset::new(x.clone(), array![[1u8, 0], [0, 0]], Split::Train, 0),
            Err(Error::EmptyRow(1))
        ));
        assert!(MultiLabelDataset::new(x.clone(), array![[1u8], [1]], Split::Train, 0).is_err());
        let ds = MultiLabelDataset::new(x, array![[1u8, 1], [0, 1]], Split::Val, 3).unwrap();
        assert_eq!(ds.class_counts(), &[1, 2]);
    }
}
