//! Rank-based average precision, shot-group mAP, and multi-trial aggregation.

use std::fs;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataset::{Group, GroupAssignment, MultiLabelDataset};
use crate::error::{Error, Result};
use crate::losses::probabilities;
use crate::model::ModelBundle;
use crate::sampling::ExposureReport;

/// Average precision of one class. Scores are ranked descending with ties
/// kept in index order; `None` when there is no positive label.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&y| y != 0).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupMap {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl GroupMap {
    pub fn get(&self, group: Group) -> Option<f64> {
        match group {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }

    fn set(&mut self, group: Group, value: Option<f64>) {
        match group {
            Group::Many => self.many = value,
            Group::Medium => self.medium = value,
            Group::Few => self.few = value,
        }
    }

    /// Unweighted mean of the groups that have a value.
    pub fn average(&self) -> Option<f64> {
        let present: Vec<f64> = Group::ALL.iter().filter_map(|&g| self.get(g)).collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    }
}

/// Spread of an aggregated report (sample standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpread {
    pub count: usize,
    pub per_class_ap_std: Vec<Option<f64>>,
    pub group_map_std: GroupMap,
    pub average_std: f64,
    pub all_class_map_std: f64,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// `None` (JSON null) for classes without positives in the split.
    pub per_class_ap: Vec<Option<f64>>,
    pub class_groups: Vec<Group>,
    pub group_map: GroupMap,
    /// Mean of the non-empty group mAPs.
    pub average: f64,
    /// Mean AP over all scored classes.
    pub all_class_map: f64,
    pub skipped_classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<Box<TrialSpread>>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Scores per class from a `n x k` score matrix (any strictly monotone
/// function of the logits ranks identically).
pub fn evaluate_scores(scores: ArrayView2<'_, f64>, labels: ArrayView2<'_, u8>, groups: &GroupAssignment) -> Result<EvalReport> {
    if scores.dim() != labels.dim() {
        return Err(Error::Shape(format!("scores {:?} vs labels {:?}", scores.dim(), labels.dim())));
    }
    if scores.nrows() == 0 {
        return Err(Error::EmptySplit);
    }
    if groups.len() != scores.ncols() {
        return Err(Error::Shape(format!(
            "group assignment covers {} classes, scores have {}",
            groups.len(),
            scores.ncols()
        )));
    }
    let per_class_ap: Vec<Option<f64>> = (0..scores.ncols())
        .map(|j| {
            let s: Vec<f64> = scores.column(j).to_vec();
            let y: Vec<u8> = labels.column(j).to_vec();
            average_precision(&s, &y)
        })
        .collect();
    Ok(summarize(per_class_ap, groups.group_of_class.clone()))
}

fn summarize(per_class_ap: Vec<Option<f64>>, class_groups: Vec<Group>) -> EvalReport {
    let skipped_classes: Vec<usize> = per_class_ap
        .iter()
        .enumerate()
        .filter(|(_, ap)| ap.is_none())
        .map(|(j, _)| j)
        .collect();
    let mut group_map = GroupMap::default();
    for group in Group::ALL {
        let aps: Vec<f64> = per_class_ap
            .iter()
            .zip(&class_groups)
            .filter(|(_, &g)| g == group)
            .filter_map(|(ap, _)| *ap)
            .collect();
        group_map.set(group, mean(&aps));
    }
    let scored: Vec<f64> = per_class_ap.iter().filter_map(|ap| *ap).collect();
    EvalReport {
        split: None,
        average: group_map.average().unwrap_or(f64::NAN),
        all_class_map: mean(&scored).unwrap_or(f64::NAN),
        group_map,
        per_class_ap,
        class_groups,
        skipped_classes,
        trials: None,
    }
}

/// Scores the dataset with `sigmoid(leaf logits)` and reports per-class AP
/// and group mAPs.
pub fn evaluate(model: &ModelBundle, dataset: &MultiLabelDataset, groups: &GroupAssignment) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptySplit);
    }
    let out = model.forward(dataset.features_f64().view())?;
    let scores = probabilities(out.logits.view());
    let mut report = evaluate_scores(scores.view(), dataset.labels().view(), groups)?;
    report.split = Some(dataset.split().to_string());
    Ok(report)
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let present: Option<Vec<f64>> = values.iter().copied().collect();
    match present {
        Some(v) => (mean(&v), Some(sample_std(&v))),
        None => (None, None),
    }
}

/// Elementwise mean and sample standard deviation (n - 1 denominator).
pub fn aggregate_trials(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.len() < 2 {
        return Err(Error::Shape(format!("need at least 2 reports, got {}", reports.len())));
    }
    let first = &reports[0];
    for r in &reports[1..] {
        if r.per_class_ap.len() != first.per_class_ap.len()
            || r.class_groups != first.class_groups
            || r.skipped_classes != first.skipped_classes
        {
            return Err(Error::Shape("reports differ in class or group structure".into()));
        }
    }
    let k = first.per_class_ap.len();
    let mut per_class_ap = Vec::with_capacity(k);
    let mut per_class_ap_std = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<Option<f64>> = reports.iter().map(|r| r.per_class_ap[j]).collect();
        let (m, s) = mean_std(&col);
        per_class_ap.push(m);
        per_class_ap_std.push(s);
    }
    let mut group_map = GroupMap::default();
    let mut group_map_std = GroupMap::default();
    for g in Group::ALL {
        let col: Vec<Option<f64>> = reports.iter().map(|r| r.group_map.get(g)).collect();
        let (m, s) = mean_std(&col);
        group_map.set(g, m);
        group_map_std.set(g, s);
    }
    let averages: Vec<f64> = reports.iter().map(|r| r.average).collect();
    let all_class: Vec<f64> = reports.iter().map(|r| r.all_class_map).collect();
    let stripped: Vec<EvalReport> = reports
        .iter()
        .map(|r| EvalReport {
            trials: None,
            ..r.clone()
        })
        .collect();
    Ok(EvalReport {
        split: first.split.clone(),
        per_class_ap,
        class_groups: first.class_groups.clone(),
        group_map,
        average: mean(&averages).expect("non-empty"),
        all_class_map: mean(&all_class).expect("non-empty"),
        skipped_classes: first.skipped_classes.clone(),
        trials: Some(Box::new(TrialSpread {
            count: reports.len(),
            per_class_ap_std,
            group_map_std,
            average_std: sample_std(&averages),
            all_class_map_std: sample_std(&all_class),
            reports: stripped,
        })),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApDelta {
    pub class_id: usize,
    pub group: Group,
    /// `AP_b - AP_a`; `None` when either side skipped the class.
    pub delta_ap: Option<f64>,
}

/// Per-class AP increments from `a` to `b`, ordered by descending class
/// count (ties by class id) so that group boundaries are contiguous.
pub fn ap_delta_report(a: &EvalReport, b: &EvalReport, class_counts: &[usize]) -> Result<Vec<ApDelta>> {
    let k = a.per_class_ap.len();
    if b.per_class_ap.len() != k || class_counts.len() != k || a.class_groups != b.class_groups {
        return Err(Error::Shape("reports and class counts differ in class structure".into()));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| class_counts[y].cmp(&class_counts[x]).then(x.cmp(&y)));
    Ok(order
        .into_iter()
        .map(|j| ApDelta {
            class_id: j,
            group: a.class_groups[j],
            delta_ap: match (a.per_class_ap[j], b.per_class_ap[j]) {
                (Some(x), Some(y)) => Some(y - x),
                _ => None,
            },
        })
        .collect())
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::json(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Malformed(format!("{}: {e}", path.display()))
}

/// CSV with header `class_id,group,delta_ap`; skipped classes leave the
/// delta empty.
pub fn write_delta_csv(rows: &[ApDelta], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["class_id", "group", "delta_ap"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let delta = r.delta_ap.map(|d| d.to_string()).unwrap_or_default();
        w.write_record([r.class_id.to_string(), r.group.to_string(), delta])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV with header `class_id,count,per_draw,per_epoch`.
pub fn write_exposure_csv(report: &ExposureReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["class_id", "count", "per_draw", "per_epoch"])
        .map_err(|e| csv_err(path, e))?;
    for j in 0..report.per_draw.len() {
        w.write_record([
            j.to_string(),
            report.class_counts[j].to_string(),
            report.per_draw[j].to_string(),
            report.per_epoch[j].to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{assign_groups, GroupThresholds};
    use ndarray::{array, Array2};

    #[test]
    fn hand_ranked_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((ap - 0.833333).abs() < 1e-6);
        assert_eq!(ap, 0.5 * (1.0 + 2.0 / 3.0));
        // Positives ranked third and fourth.
        let ap = average_precision(&[0.6, 0.7, 0.8, 0.9], &[1, 1, 0, 0]).unwrap();
        assert_eq!(ap, 0.5 * (1.0 / 3.0 + 2.0 / 4.0));
        assert!((ap - 0.416667).abs() < 1e-6);
        // Reversing the scores of the first case puts its positives at ranks 2 and 4.
        let ap = average_precision(&[0.6, 0.7, 0.8, 0.9], &[1, 0, 1, 0]).unwrap();
        assert_eq!(ap, 0.5 * (1.0 / 2.0 + 2.0 / 4.0));
        assert_eq!(average_precision(&[0.1, 0.2], &[0, 0]), None);
    }

    #[test]
    fn ties_break_by_index() {
        // Equal scores: index 0 ranks first.
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]), Some(0.5));
    }

    fn groups3() -> GroupAssignment {
        assign_groups(&[500, 50, 5], GroupThresholds::default()).unwrap()
    }

    #[test]
    fn perfect_scores_and_skips() {
        let y = array![[1u8, 0, 0], [0, 1, 0], [1, 1, 0]];
        let z = y.mapv(|v| if v == 1 { 20.0 } else { -20.0 });
        let r = evaluate_scores(probabilities(z.view()).view(), y.view(), &groups3()).unwrap();
        assert_eq!(r.per_class_ap, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.skipped_classes, vec![2]);
        assert_eq!(r.group_map.few, None);
        assert_eq!(r.average, 1.0);
        assert_eq!(r.all_class_map, 1.0);
        assert!(evaluate_scores(Array2::zeros((0, 3)).view(), Array2::zeros((0, 3)).view(), &groups3()).is_err());
    }

    #[test]
    fn average_is_unweighted_over_groups() {
        let gm = GroupMap { many: Some(70.0), medium: Some(60.0), few: Some(20.0) };
        assert_eq!(gm.average(), Some(50.0));
        let r = summarize(vec![Some(0.8), Some(0.6), Some(0.4), Some(0.2)], vec![Group::Many, Group::Many, Group::Many, Group::Few]);
        assert!((r.average - 0.4).abs() < 1e-15);
        assert!((r.all_class_map - 0.5).abs() < 1e-15);
        assert_eq!(r.group_map.medium, None);
    }

    #[test]
    fn aggregation() {
        let base = summarize(vec![Some(0.6), Some(0.6), Some(0.6)], groups3().group_of_class);
        let agg = aggregate_trials(&[base.clone(), base.clone()]).unwrap();
        assert_eq!(agg.average, base.average);
        assert_eq!(agg.trials.as_ref().unwrap().average_std, 0.0);

        let mut a = base.clone();
        a.average = 60.0;
        let mut b = base.clone();
        b.average = 64.0;
        let agg = aggregate_trials(&[a, b]).unwrap();
        assert_eq!(agg.average, 62.0);
        assert!((agg.trials.unwrap().average_std - 2.828427).abs() < 1e-6);

        assert!(aggregate_trials(&[base.clone()]).is_err());
        let other = summarize(vec![Some(0.6), Some(0.6)], vec![Group::Many, Group::Few]);
        assert!(aggregate_trials(&[base, other]).is_err());
    }

    #[test]
    fn delta_rows() {
        let g = groups3();
        let a = summarize(vec![Some(0.5), Some(0.25), Some(0.1)], g.group_of_class.clone());
        let perfect = summarize(vec![Some(1.0); 3], g.group_of_class.clone());
        let same = ap_delta_report(&a, &a, &[5, 500, 50]).unwrap();
        assert!(same.iter().all(|r| r.delta_ap == Some(0.0)));
        assert_eq!(same.iter().map(|r| r.class_id).collect::<Vec<_>>(), vec![1, 2, 0]);
        let up = ap_delta_report(&a, &perfect, &[500, 50, 5]).unwrap();
        assert_eq!(up.iter().map(|r| r.delta_ap.unwrap()).collect::<Vec<_>>(), vec![0.5, 0.75, 0.9]);
        assert!(ap_delta_report(&a, &perfect, &[1, 2]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("delta.csv");
        write_delta_csv(&up, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("class_id,group,delta_ap\n0,many,0.5\n"));
    }

    #[test]
    fn report_json_round_trip() {
        let r = summarize(vec![Some(0.5), None, Some(0.1)], groups3().group_of_class);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_report(&r, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), r);
    }
}
