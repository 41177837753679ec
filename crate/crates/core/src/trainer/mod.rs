//! The three training phases: hierarchy-aware pre-training of teacher 1,
//! re-balanced classifier re-training of teacher 2, and two-teacher
//! distillation into a fresh student.

mod config;
mod pipeline;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use config::{Architecture, TrainConfig};
pub use pipeline::{
    ablation_grid, ablation_rows, run_pipeline, train_groups, write_ablation_csv, AblationRow, Components,
    PipelineManifest, PipelineResult,
};

use crate::dataset::{DatasetBundle, MultiLabelDataset, Split};
use crate::distill::{feature_kd, logits_kd, KdConfig};
use crate::error::{Error, Result};
use crate::hierarchy::HierarchyTree;
use crate::losses::{bce_multilabel, mlmc_loss, per_level_loss, MlmcWeights};
use crate::model::{adam_step, AdamState, LrSchedule, ModelBundle, ModelSpec, OutputGrads, Trace};
use crate::sampling::{compute_delta_with_counts, BatchSampler, DeltaTransform, SamplerKind, SamplerSpec};

/// Classification loss of the pre-training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase1Loss {
    /// Leaf-level BCE only (the ERM baseline).
    Bce,
    #[default]
    Mlmc,
    /// One head per level, each trained with its own BCE.
    PerLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub phase: u8,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Not written to disk.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunRecord {
    /// One JSON object per epoch, newline terminated.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }

    pub fn write_json_lines(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_lines()).map_err(|e| Error::io(path, e))
    }
}

/// The two frozen teachers consumed by distillation.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub teacher1: ModelBundle,
    pub teacher2: ModelBundle,
}

/// Decorrelated sub-seed for one consumer of randomness within a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT_1: u64 = 1;
const STREAM_SAMPLER_1: u64 = 2;
const STREAM_SAMPLER_2: u64 = 3;
const STREAM_INIT_3: u64 = 4;
const STREAM_SAMPLER_3: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClsLoss {
    Bce,
    Mlmc,
    PerLevel,
}

/// Raw deltas of one split: leaf level plus optional coarser levels.
struct SplitDeltas {
    leaf: Array2<f64>,
    parents: Option<Vec<Array2<f64>>>,
}

struct Weighting {
    train: SplitDeltas,
    val: SplitDeltas,
    transform: DeltaTransform,
}

/// Teacher outputs on one split, computed once.
struct Targets {
    embedding: Array2<f64>,
    logits: Array2<f64>,
}

struct Distill {
    kd: KdConfig,
    train: Targets,
    val: Targets,
}

struct Objective<'a> {
    tree: &'a HierarchyTree,
    cls: ClsLoss,
    weighting: Option<Weighting>,
    distill: Option<Distill>,
}

fn transform_rows(delta: &Array2<f64>, rows: &[usize], transform: DeltaTransform) -> Array2<f64> {
    let sel = delta.select(ndarray::Axis(0), rows);
    match transform {
        DeltaTransform::Sqrt => sel.mapv(f64::sqrt),
        DeltaTransform::Square => sel.mapv(|d| d * d),
    }
}

impl Objective<'_> {
    /// Loss value and output gradients for the rows `rows` of `split`.
    fn evaluate(&self, trace: &Trace, labels: ArrayView2<'_, u8>, rows: &[usize], split: Split) -> Result<(f64, OutputGrads)> {
        let logits = trace.logits().view();
        let deltas = self.weighting.as_ref().map(|w| {
            let d = if split == Split::Train { &w.train } else { &w.val };
            let leaf = transform_rows(&d.leaf, rows, w.transform);
            let parents = d
                .parents
                .as_ref()
                .map(|ps| ps.iter().map(|p| transform_rows(p, rows, w.transform)).collect::<Vec<_>>());
            (leaf, parents)
        });
        let leaf_w = deltas.as_ref().map(|(l, _)| l.view());
        let parent_w = deltas.as_ref().and_then(|(_, p)| p.as_deref());

        let mut grads = OutputGrads::default();
        let cls_value = match self.cls {
            ClsLoss::Bce => {
                let r = bce_multilabel(logits, labels, leaf_w)?;
                grads.d_logits = Some(r.dlogits);
                r.value
            }
            ClsLoss::Mlmc => {
                let w = MlmcWeights {
                    leaf: leaf_w,
                    parents: parent_w,
                };
                let r = mlmc_loss(logits, labels, self.tree, w)?;
                grads.d_logits = Some(r.dlogits);
                r.value
            }
            ClsLoss::PerLevel => {
                let mut levels = vec![logits];
                levels.extend(trace.output.head_logits.iter().map(|h| h.view()));
                let r = per_level_loss(&levels, labels, self.tree)?;
                let mut it = r.dlogits.into_iter();
                grads.d_logits = it.next();
                grads.d_heads = it.map(Some).collect();
                r.value
            }
        };

        let Some(distill) = self.distill.as_ref().filter(|d| d.kd.is_active()) else {
            return Ok((cls_value, grads));
        };
        let targets = if split == Split::Train { &distill.train } else { &distill.val };
        let teacher_embed = targets.embedding.select(ndarray::Axis(0), rows);
        let teacher_logits = targets.logits.select(ndarray::Axis(0), rows);
        let (f_value, d_embed) = feature_kd(teacher_embed.view(), trace.embedding().view())?;
        let (c_value, d_logits_kd) = logits_kd(logits, teacher_logits.view(), distill.kd.temperature, distill.kd.kl_variant)?;
        let (w_cls, w_f, w_c) = distill.kd.coefficients();
        let dz = grads.d_logits.take().expect("classification gradient") * w_cls + d_logits_kd * w_c;
        grads.d_logits = Some(dz);
        grads.d_embedding = Some(d_embed * w_f);
        Ok((w_cls * cls_value + w_f * f_value + w_c * c_value, grads))
    }
}

fn split_deltas(ds: &MultiLabelDataset, train_counts: &[usize], tree: &HierarchyTree, parents: bool, train_parent_counts: Option<&[Vec<usize>]>) -> Result<SplitDeltas> {
    let leaf = compute_delta_with_counts(ds.labels().view(), train_counts)?.delta;
    let parents = if parents {
        let levels = tree.derive_level_label_matrices(ds.labels().view())?;
        let counts = train_parent_counts.expect("parent counts when parent deltas are requested");
        Some(
            levels
                .iter()
                .zip(counts)
                .map(|(y, c)| compute_delta_with_counts(y.view(), c).map(|d| d.delta))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(SplitDeltas { leaf, parents })
}

/// Deltas use the train-split class counts for every split.
fn weighting(data: &DatasetBundle, cfg: &TrainConfig, parents: bool) -> Result<Weighting> {
    let counts = data.train.class_counts();
    let parent_counts: Option<Vec<Vec<usize>>> = if parents {
        let levels = data.tree.derive_level_label_matrices(data.train.labels().view())?;
        Some(levels.iter().map(|y| crate::dataset::column_counts(y.view())).collect())
    } else {
        None
    };
    Ok(Weighting {
        train: split_deltas(&data.train, counts, &data.tree, parents, parent_counts.as_deref())?,
        val: split_deltas(&data.val, counts, &data.tree, parents, parent_counts.as_deref())?,
        transform: cfg.delta_transform,
    })
}

fn check_data(data: &DatasetBundle) -> Result<()> {
    let k = data.tree.leaf_count();
    for ds in [&data.train, &data.val] {
        if ds.num_classes() != k {
            return Err(Error::Shape(format!(
                "{} split has {} classes, hierarchy has {k} leaves",
                ds.split(),
                ds.num_classes()
            )));
        }
        if ds.is_empty() {
            return Err(Error::EmptySplit);
        }
    }
    if data.val.feature_dim() != data.train.feature_dim() {
        return Err(Error::Shape("train and val feature dimensions differ".into()));
    }
    Ok(())
}

fn model_spec(data: &DatasetBundle, cfg: &TrainConfig, heads: bool) -> ModelSpec {
    let mut spec = ModelSpec::mlp(
        data.train.feature_dim(),
        &cfg.architecture.extractor_widths,
        data.tree.leaf_count(),
    );
    spec.activation = cfg.architecture.activation;
    if heads {
        spec.head_widths = (2..=data.tree.levels()).map(|m| data.tree.level_width(m)).collect();
    }
    spec
}

/// Epoch loop shared by all phases: Adam with the plateau schedule stepped
/// on validation loss, returning the best-validation snapshot.
fn fit(phase: u8, mut model: ModelBundle, data: &DatasetBundle, cfg: &TrainConfig, objective: &Objective<'_>, sampler: SamplerSpec) -> Result<(ModelBundle, RunRecord)> {
    let start = Instant::now();
    let train = &data.train;
    let mut sampler = BatchSampler::new(sampler, train.labels().view())?;
    let mut adam = AdamState::new(&model);
    let mut schedule = LrSchedule::new(cfg.lr_initial, cfg.lr_floor, cfg.lr_patience);
    let steps = train.len().div_ceil(cfg.batch_size);
    let val_x = data.val.features_f64();
    let val_rows: Vec<usize> = (0..data.val.len()).collect();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let mut stale = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr;
        let diverged = Error::Diverged { phase, epoch };
        let mut total = 0.0;
        for _ in 0..steps {
            let rows = sampler.draw_batch();
            let (x, y) = train.batch(&rows);
            let trace = model.trace(x.view())?;
            let (value, out_grads) = objective.evaluate(&trace, y.view(), &rows, Split::Train)?;
            if !value.is_finite() {
                return Err(diverged);
            }
            let grads = model.backward(&trace, &out_grads)?;
            match adam_step(&mut adam, &mut model, &grads, lr) {
                Err(Error::NonFiniteGradient(_)) => return Err(diverged),
                other => other?,
            }
            total += value;
        }
        let trace = model.trace(val_x.view())?;
        let (val_loss, _) = objective.evaluate(&trace, data.val.labels().view(), &val_rows, Split::Val)?;
        if !val_loss.is_finite() {
            return Err(diverged);
        }
        epochs.push(EpochRecord {
            phase,
            epoch,
            train_loss: total / steps as f64,
            val_loss,
            lr,
        });
        schedule.step(val_loss);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if cfg.early_stop_patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    let (best_val_loss, best_epoch, best_model) = best.expect("epochs >= 1");
    Ok((
        best_model,
        RunRecord {
            phase,
            config_hash: cfg.hash(),
            epochs,
            best_epoch,
            best_val_loss,
            wall_time: start.elapsed(),
        },
    ))
}

/// Pre-trains teacher 1 from a fresh initialization under instance-balanced
/// sampling.
pub fn train_phase1(data: &DatasetBundle, cfg: &TrainConfig, loss: Phase1Loss) -> Result<(ModelBundle, RunRecord)> {
    cfg.validate()?;
    check_data(data)?;
    let spec = model_spec(data, cfg, loss == Phase1Loss::PerLevel);
    let model = ModelBundle::init(&spec, derive_seed(cfg.seed, STREAM_INIT_1))?;
    let objective = Objective {
        tree: &data.tree,
        cls: match loss {
            Phase1Loss::Bce => ClsLoss::Bce,
            Phase1Loss::Mlmc => ClsLoss::Mlmc,
            Phase1Loss::PerLevel => ClsLoss::PerLevel,
        },
        weighting: None,
        distill: None,
    };
    let sampler = SamplerSpec {
        kind: SamplerKind::InstanceBalanced,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, STREAM_SAMPLER_1),
    };
    fit(1, model, data, cfg, &objective, sampler)
}

/// Options of the re-training phase beyond the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase2Options {
    /// Weight the loss by the re-balancing factor.
    pub ics: bool,
    /// Keep the hierarchical terms in the loss.
    pub mlmc: bool,
    /// Freeze the feature extractor.
    pub freeze: bool,
}

impl Phase2Options {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            ics: true,
            mlmc: cfg.use_mlmc_phase2,
            freeze: cfg.crt_freeze,
        }
    }
}

/// Re-trains from teacher 1 under class-balanced sampling.
pub fn train_phase2(data: &DatasetBundle, cfg: &TrainConfig, teacher1: &ModelBundle, opts: Phase2Options) -> Result<(ModelBundle, RunRecord)> {
    cfg.validate()?;
    check_data(data)?;
    let mut model = teacher1.clone();
    model.heads.clear();
    model.unfreeze_extractor();
    if opts.freeze {
        model.freeze_extractor();
    }
    let weighting = if opts.ics {
        Some(weighting(data, cfg, opts.mlmc && cfg.delta_on_parents)?)
    } else {
        None
    };
    let objective = Objective {
        tree: &data.tree,
        cls: if opts.mlmc { ClsLoss::Mlmc } else { ClsLoss::Bce },
        weighting,
        distill: None,
    };
    let sampler = SamplerSpec {
        kind: SamplerKind::ClassBalanced,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, STREAM_SAMPLER_2),
    };
    fit(2, model, data, cfg, &objective, sampler)
}

fn targets(ds: &MultiLabelDataset, feature_teacher: &ModelBundle, logit_teacher: &ModelBundle) -> Result<Targets> {
    let x = ds.features_f64();
    Ok(Targets {
        embedding: feature_teacher.forward(x.view())?.embedding,
        logits: logit_teacher.forward(x.view())?.logits,
    })
}

/// Distills teacher 1's embeddings and teacher 2's logits into a fresh
/// student. With `ics` the classification term is re-balanced and batches
/// are class-balanced; otherwise plain BCE over instance-balanced batches.
pub fn train_phase3(data: &DatasetBundle, cfg: &TrainConfig, teachers: &TeacherBundle, ics: bool) -> Result<(ModelBundle, RunRecord)> {
    cfg.validate()?;
    check_data(data)?;
    let spec = model_spec(data, cfg, false);
    for t in [&teachers.teacher1, &teachers.teacher2] {
        if t.embedding_dim() != spec.extractor_widths[spec.extractor_widths.len() - 1]
            || t.num_classes() != spec.num_classes
            || t.input_dim() != spec.input_dim
        {
            return Err(Error::Shape("teacher does not match the student architecture".into()));
        }
    }
    let model = ModelBundle::init(&spec, derive_seed(cfg.seed, STREAM_INIT_3))?;
    let kd = cfg.kd();
    let distill = kd.is_active().then(|| -> Result<Distill> {
        Ok(Distill {
            kd,
            train: targets(&data.train, &teachers.teacher1, &teachers.teacher2)?,
            val: targets(&data.val, &teachers.teacher1, &teachers.teacher2)?,
        })
    });
    let objective = Objective {
        tree: &data.tree,
        cls: ClsLoss::Bce,
        weighting: if ics { Some(weighting(data, cfg, false)?) } else { None },
        distill: distill.transpose()?,
    };
    let sampler = SamplerSpec {
        kind: if ics { SamplerKind::ClassBalanced } else { SamplerKind::InstanceBalanced },
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, STREAM_SAMPLER_3),
    };
    fit(3, model, data, cfg, &objective, sampler)
}
