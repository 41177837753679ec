use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_phase1, train_phase2, train_phase3, Phase1Loss, Phase2Options, RunRecord, TeacherBundle, TrainConfig};
use crate::dataset::{assign_groups, DatasetBundle, GroupAssignment};
use crate::error::{Error, Result};
use crate::eval::{aggregate_trials, evaluate, EvalReport};
use crate::model::{save_checkpoint, ModelBundle};

/// Which method components a pipeline run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Components {
    pub mlmc: bool,
    pub ics: bool,
    pub crt: bool,
    pub hybrid_kd: bool,
}

impl Components {
    pub const NAMES: [&'static str; 4] = ["mlmc", "ics", "crt", "hybrid_kd"];

    pub fn all(crt: bool) -> Self {
        Self {
            mlmc: true,
            ics: true,
            crt,
            hybrid_kd: true,
        }
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut c = Self::default();
        for name in names {
            match name.as_ref() {
                "mlmc" => c.mlmc = true,
                "ics" => c.ics = true,
                "crt" => c.crt = true,
                "hybrid_kd" | "kd" => c.hybrid_kd = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown component {other:?}; expected one of {:?}",
                        Self::NAMES
                    )))
                }
            }
        }
        Ok(c)
    }

    fn flags(&self) -> [bool; 4] {
        [self.mlmc, self.ics, self.crt, self.hybrid_kd]
    }
}

/// `erm`, or component names joined by `+`.
impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            f.write_str("erm")
        } else {
            f.write_str(&on.join("+"))
        }
    }
}

impl FromStr for Components {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "erm" || s == "none" {
            return Ok(Self::default());
        }
        Self::from_names(&s.split('+').map(str::trim).collect::<Vec<_>>())
    }
}

/// The seven component rows of the ablation table, baseline first.
pub fn ablation_rows() -> Vec<Components> {
    let row = |mlmc, ics, crt, hybrid_kd| Components { mlmc, ics, crt, hybrid_kd };
    vec![
        row(false, false, false, false),
        row(true, false, false, false),
        row(false, true, false, false),
        row(true, true, false, false),
        row(true, true, true, false),
        row(true, true, false, true),
        row(true, true, true, true),
    ]
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub components: Components,
    pub teacher1: ModelBundle,
    pub teacher2: Option<ModelBundle>,
    pub student: Option<ModelBundle>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub config_hash: String,
    pub seed: u64,
    pub components: Components,
    pub phases: Vec<u8>,
    pub final_model: String,
    pub best_epochs: Vec<usize>,
}

impl PipelineResult {
    /// Student if distilled, else teacher 2 if re-trained, else teacher 1.
    pub fn final_model(&self) -> &ModelBundle {
        self.student
            .as_ref()
            .or(self.teacher2.as_ref())
            .unwrap_or(&self.teacher1)
    }

    fn final_name(&self) -> &'static str {
        if self.student.is_some() {
            "student"
        } else if self.teacher2.is_some() {
            "teacher2"
        } else {
            "teacher1"
        }
    }

    pub fn manifest(&self, cfg: &TrainConfig) -> PipelineManifest {
        PipelineManifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            components: self.components,
            phases: self.records.iter().map(|r| r.phase).collect(),
            final_model: self.final_name().into(),
            best_epochs: self.records.iter().map(|r| r.best_epoch).collect(),
        }
    }

    /// Writes one checkpoint directory per trained model, one JSON-lines
    /// record per phase, and `pipeline.json`.
    pub fn write(&self, cfg: &TrainConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let models = [
            ("teacher1", Some(&self.teacher1)),
            ("teacher2", self.teacher2.as_ref()),
            ("student", self.student.as_ref()),
        ];
        for (name, model) in models {
            if let Some(m) = model {
                save_checkpoint(m, &dir.join(name), cfg.seed, 0)?;
            }
        }
        for r in &self.records {
            r.write_json_lines(&dir.join(format!("phase{}.jsonl", r.phase)))?;
        }
        let path = dir.join("pipeline.json");
        let text = serde_json::to_string_pretty(&self.manifest(cfg)).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Runs the enabled phases in order. Teacher 1 is always trained (with
/// MLMC or plain BCE); re-training runs when ICS or cRT is on; distillation
/// runs when hybrid KD is on, using teacher 1 as its second teacher if no
/// re-training happened.
pub fn run_pipeline(data: &DatasetBundle, cfg: &TrainConfig, components: Components) -> Result<PipelineResult> {
    let loss = if components.mlmc { Phase1Loss::Mlmc } else { Phase1Loss::Bce };
    let (teacher1, r1) = train_phase1(data, cfg, loss)?;
    let mut records = vec![r1];
    let teacher2 = if components.ics || components.crt {
        let opts = Phase2Options {
            ics: components.ics,
            mlmc: components.mlmc && cfg.use_mlmc_phase2,
            freeze: components.crt,
        };
        let (t2, r2) = train_phase2(data, cfg, &teacher1, opts)?;
        records.push(r2);
        Some(t2)
    } else {
        None
    };
    let student = if components.hybrid_kd {
        let teachers = TeacherBundle {
            teacher1: teacher1.clone(),
            teacher2: teacher2.clone().unwrap_or_else(|| teacher1.clone()),
        };
        let (s, r3) = train_phase3(data, cfg, &teachers, components.ics)?;
        records.push(r3);
        Some(s)
    } else {
        None
    };
    Ok(PipelineResult {
        components,
        teacher1,
        teacher2,
        student,
        records,
    })
}

/// Groups from the train-split class counts.
pub fn train_groups(data: &DatasetBundle, cfg: &TrainConfig) -> Result<GroupAssignment> {
    assign_groups(data.train.class_counts(), cfg.group_thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub components: Components,
    /// Test-split report aggregated over seeds (a single report for one seed).
    pub report: EvalReport,
}

/// One pipeline per (row, seed), run in parallel; rows keep input order.
pub fn ablation_grid(data: &DatasetBundle, cfg: &TrainConfig, rows: &[Components], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if rows.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one row and one seed".into()));
    }
    let groups = train_groups(data, cfg)?;
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let reports: Vec<EvalReport> = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let result = run_pipeline(data, &cfg, rows[r])?;
            evaluate(result.final_model(), &data.test, &groups)
        })
        .collect::<Result<Vec<_>>>()?;
    rows.iter()
        .zip(reports.chunks(seeds.len()))
        .map(|(&components, chunk)| {
            let report = if chunk.len() == 1 {
                chunk[0].clone()
            } else {
                aggregate_trials(chunk)?
            };
            Ok(AblationRow { components, report })
        })
        .collect()
}

/// CSV: one row per component vector with group mAPs, the average, and its
/// standard deviation over seeds (empty for a single seed).
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Malformed(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "row", "mlmc", "ics", "crt", "hybrid_kd", "many", "medium", "few", "average", "average_std",
    ])
    .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in rows {
        let c = row.components;
        let g = row.report.group_map;
        let std = row.report.trials.as_ref().map(|t| t.average_std);
        let flag = |b: bool| if b { "1".to_string() } else { "0".to_string() };
        w.write_record([
            c.to_string(),
            flag(c.mlmc),
            flag(c.ics),
            flag(c.crt),
            flag(c.hybrid_kd),
            opt(g.many),
            opt(g.medium),
            opt(g.few),
            row.report.average.to_string(),
            opt(std),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_checkpoint;
    use crate::trainer::tests::{quick_config, small_bundle};

    #[test]
    fn component_names() {
        assert_eq!("".parse::<Components>().unwrap(), Components::default());
        let c: Components = "mlmc+ics+crt+hybrid_kd".parse().unwrap();
        assert_eq!(c, Components::all(true));
        assert_eq!(c.to_string(), "mlmc+ics+crt+hybrid_kd");
        assert_eq!(Components::default().to_string(), "erm");
        assert!("mlmc+focal".parse::<Components>().is_err());
        let rows = ablation_rows();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[6], Components::all(true));
    }

    #[test]
    fn all_off_is_plain_erm() {
        let data = small_bundle(8);
        let cfg = quick_config();
        let r = run_pipeline(&data, &cfg, Components::default()).unwrap();
        assert!(r.teacher2.is_none() && r.student.is_none());
        let (erm, _) = train_phase1(&data, &cfg, Phase1Loss::Bce).unwrap();
        assert_eq!(r.final_model(), &erm);
    }

    #[test]
    fn full_pipeline_is_deterministic_and_writes_artifacts() {
        let data = small_bundle(9);
        let cfg = quick_config();
        let a = run_pipeline(&data, &cfg, Components::all(true)).unwrap();
        let b = run_pipeline(&data, &cfg, Components::all(true)).unwrap();
        assert_eq!(a.records.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(a.student, b.student);
        assert_eq!(a.teacher2, b.teacher2);

        let dir = tempfile::tempdir().unwrap();
        a.write(&cfg, dir.path()).unwrap();
        let (student, _) = load_checkpoint(&dir.path().join("student")).unwrap();
        let x = data.test.features_f64();
        assert_eq!(
            student.forward(x.view()).unwrap().logits,
            a.final_model().forward(x.view()).unwrap().logits
        );
        let manifest: PipelineManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("pipeline.json")).unwrap()).unwrap();
        assert_eq!(manifest.final_model, "student");
        assert_eq!(manifest.phases, vec![1, 2, 3]);
    }

    #[test]
    fn grid_rows_and_csv() {
        let data = small_bundle(10);
        let cfg = TrainConfig { epochs: 1, ..quick_config() };
        let rows = [Components::default(), Components::all(true)];
        let out = ablation_grid(&data, &cfg, &rows, &[1, 2]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].components, rows[0]);
        assert_eq!(out[1].report.trials.as_ref().unwrap().count, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        write_ablation_csv(&out, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("erm,0,0,0,0,"));
        assert!(ablation_grid(&data, &cfg, &[], &[1]).is_err());
    }
}
