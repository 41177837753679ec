//! Multi-label losses over logits. Each returns its value together with the
//! gradient with respect to the logits it consumed.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::hierarchy::HierarchyTree;
use crate::sampling::DeltaTransform;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow or cancellation.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `-[y ln s(z) + (1 - y) ln(1 - s(z))]`, evaluated from the logit.
fn bce_term(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub dlogits: Array2<f64>,
    /// Level-1 first, then each coarser level (MLMC and per-level losses).
    pub per_level_values: Option<Vec<f64>>,
}

fn check_same(name: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{name}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Weighted mean BCE over all `B x k` entries, normalized by `1/(kB)`.
pub fn bce_multilabel(
    logits: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    weights: Option<ArrayView2<'_, f64>>,
) -> Result<LossResult> {
    check_same("logits vs labels", logits.dim(), labels.dim())?;
    if let Some(w) = &weights {
        check_same("logits vs weights", logits.dim(), w.dim())?;
        for ((row, col), &v) in w.indexed_iter() {
            if !(v >= 0.0) {
                return Err(Error::NegativeWeight { row, col, value: v });
            }
        }
    }
    let (b, k) = logits.dim();
    let scale = 1.0 / (b * k) as f64;
    let mut value = 0.0;
    let mut dlogits = Array2::<f64>::zeros((b, k));
    for i in 0..b {
        for j in 0..k {
            let z = logits[[i, j]];
            let y = f64::from(labels[[i, j]]);
            let w = weights.as_ref().map_or(1.0, |w| w[[i, j]]);
            value += w * bce_term(z, y);
            dlogits[[i, j]] = w * (sigmoid(z) - y) * scale;
        }
    }
    Ok(LossResult {
        value: value * scale,
        dlogits,
        per_level_values: None,
    })
}

/// BCE weighted by the transformed re-balancing factor of the batch rows.
pub fn ics_bce(
    logits: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    delta_rows: ArrayView2<'_, f64>,
    transform: DeltaTransform,
) -> Result<LossResult> {
    if delta_rows.dim() != logits.dim() {
        return Err(Error::Shape(format!(
            "delta rows {:?} misaligned with logits {:?}",
            delta_rows.dim(),
            logits.dim()
        )));
    }
    let weights = match transform {
        DeltaTransform::Sqrt => delta_rows.mapv(f64::sqrt),
        DeltaTransform::Square => delta_rows.mapv(|d| d * d),
    };
    bce_multilabel(logits, labels, Some(weights.view()))
}

/// Per-level logits implied by leaf logits: each parent's logit is the sum of
/// its children's logits. Level 1 is returned as-is at index 0.
pub fn marginal_logits(logits: ArrayView2<'_, f64>, tree: &HierarchyTree) -> Result<Vec<Array2<f64>>> {
    if logits.ncols() != tree.leaf_count() {
        return Err(Error::Shape(format!(
            "{} leaf logits for a hierarchy with {} leaves",
            logits.ncols(),
            tree.leaf_count()
        )));
    }
    let mut out = vec![logits.to_owned()];
    for level in 2..=tree.levels() {
        out.push(logits.dot(&tree.aggregation(level).t()));
    }
    Ok(out)
}

/// Options for [`mlmc_loss`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MlmcWeights<'a> {
    /// Leaf-level BCE weights (`B x k`).
    pub leaf: Option<ArrayView2<'a, f64>>,
    /// One weight matrix per level `2..=M` (`B x width(level)`).
    pub parents: Option<&'a [Array2<f64>]>,
}

/// Hierarchical marginalization loss: BCE on the leaf logits plus BCE on every
/// coarser level, where parent logits are sums of child logits and parent
/// labels come from OR over descendant leaves. Each level is normalized by
/// `1/(width * B)`; the value is the sum over levels.
pub fn mlmc_loss(
    logits: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    tree: &HierarchyTree,
    weights: MlmcWeights<'_>,
) -> Result<LossResult> {
    check_same("logits vs labels", logits.dim(), labels.dim())?;
    let levels = marginal_logits(logits, tree)?;
    let level_labels = tree.derive_level_label_matrices(labels)?;
    if let Some(parents) = weights.parents {
        if parents.len() != tree.levels() - 1 {
            return Err(Error::Shape(format!(
                "{} parent weight matrices for {} coarser levels",
                parents.len(),
                tree.levels() - 1
            )));
        }
    }

    let leaf = bce_multilabel(logits, labels, weights.leaf)?;
    let mut value = leaf.value;
    let mut per_level = vec![leaf.value];
    let mut dlogits = leaf.dlogits;
    for (offset, (parent_logits, parent_labels)) in levels[1..].iter().zip(&level_labels).enumerate() {
        let w = weights.parents.map(|p| p[offset].view());
        let term = bce_multilabel(parent_logits.view(), parent_labels.view(), w)?;
        value += term.value;
        per_level.push(term.value);
        dlogits += &term.dlogits.dot(tree.aggregation(offset + 2));
    }
    Ok(LossResult {
        value,
        dlogits,
        per_level_values: Some(per_level),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerLevelResult {
    pub value: f64,
    pub per_level_values: Vec<f64>,
    /// Gradient for each level's head, level 1 first.
    pub dlogits: Vec<Array2<f64>>,
}

/// Per-level-classifier baseline: independent BCE for each level's head
/// against derived labels, summed. `level_logits[0]` is the leaf head.
pub fn per_level_loss(
    level_logits: &[ArrayView2<'_, f64>],
    labels: ArrayView2<'_, u8>,
    tree: &HierarchyTree,
) -> Result<PerLevelResult> {
    if level_logits.len() != tree.levels() {
        return Err(Error::Shape(format!(
            "{} logit matrices for {} levels",
            level_logits.len(),
            tree.levels()
        )));
    }
    for (m, z) in level_logits.iter().enumerate() {
        let width = tree.level_width(m + 1);
        if z.ncols() != width || z.nrows() != labels.nrows() {
            return Err(Error::Shape(format!(
                "level {} logits are {:?}, expected ({}, {width})",
                m + 1,
                z.dim(),
                labels.nrows()
            )));
        }
    }
    let derived = tree.derive_level_label_matrices(labels)?;
    let mut value = 0.0;
    let mut per_level_values = Vec::with_capacity(tree.levels());
    let mut dlogits = Vec::with_capacity(tree.levels());
    for (m, z) in level_logits.iter().enumerate() {
        let y = if m == 0 { labels } else { derived[m - 1].view() };
        let r = bce_multilabel(*z, y, None)?;
        value += r.value;
        per_level_values.push(r.value);
        dlogits.push(r.dlogits);
    }
    Ok(PerLevelResult {
        value,
        per_level_values,
        dlogits,
    })
}

/// Leaf probabilities `sigma(z)`.
pub fn probabilities(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    Zip::from(&mut out).and(logits).for_each(|p, &z| *p = sigmoid(z));
    out
}
