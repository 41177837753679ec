//! Command-line front end. `dispatch` returns the process exit code:
//! 0 on success, 1 for usage or configuration errors, 2 for runtime errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{
    assign_groups, compute_stats, generate_synthetic, load_bundle, load_dataset, save_bundle, DatasetBundle,
    GroupThresholds, MultiLabelDataset, Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate_trials, ap_delta_report, evaluate, read_report, write_delta_csv, write_exposure_csv, write_report};
use crate::hierarchy::HierarchyTree;
use crate::model::{load_checkpoint, save_checkpoint, ModelBundle};
use crate::sampling::{simulate_exposure, SamplerKind, SamplerSpec};
use crate::trainer::{
    ablation_grid, ablation_rows, run_pipeline, train_groups, train_phase1, train_phase2, train_phase3,
    write_ablation_csv, Components, Phase1Loss, Phase2Options, TeacherBundle, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "hiertail", version, about = "Hierarchy-aware long-tailed multi-label training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset (train/val/test + hierarchy).
    GenData(GenDataArgs),
    /// Print imbalance ratio, label cardinality, class counts and groups.
    Stats(StatsArgs),
    /// Run the full training pipeline and write checkpoints and reports.
    RunPipeline(PipelineArgs),
    /// Run a single training phase.
    TrainPhase(TrainPhaseArgs),
    /// Score a checkpoint on a split.
    Evaluate(EvaluateArgs),
    /// Aggregate per-seed evaluation reports into mean and std.
    Report(ReportArgs),
    /// Per-class AP differences between two reports, as CSV.
    ApDelta(ApDeltaArgs),
    /// Monte-Carlo class exposure of a sampler, as CSV.
    SimulateSampling(SimulateArgs),
    /// Run the component ablation grid over several seeds.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "INT", default_value_t = 42)]
    seed: u64,
    /// Number of samples.
    #[arg(long, value_name = "INT", default_value_t = 6000)]
    n: usize,
    /// Number of leaf classes.
    #[arg(long, value_name = "INT", default_value_t = 24)]
    k: usize,
    /// Feature dimension.
    #[arg(long, value_name = "INT", default_value_t = 32)]
    d: usize,
    /// Target imbalance ratio.
    #[arg(long, value_name = "REAL", default_value_t = 100.0)]
    rho: f64,
    /// Probability of an extra label per sample.
    #[arg(long, value_name = "REAL", default_value_t = 0.3)]
    cooccur: f64,
    /// Feature noise standard deviation.
    #[arg(long, value_name = "REAL", default_value_t = 1.0)]
    noise: f64,
    /// Node counts of the coarser levels, finest first.
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "8,4")]
    levels: Vec<usize>,
    /// How classes, in decreasing frequency, are grouped under parents.
    #[arg(long, value_enum, default_value_t = TreeLayout::Interleaved)]
    tree: TreeLayout,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TreeLayout {
    /// Rank r joins group r mod groups.
    Interleaved,
    /// Contiguous runs of ranks share a parent.
    Blocked,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    /// Minimum count of a many-shot class.
    #[arg(long, value_name = "INT", default_value_t = 100)]
    many: usize,
    /// Counts below this are few-shot.
    #[arg(long, value_name = "INT", default_value_t = 10)]
    few: usize,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Dataset bundle or single split directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Split to summarize when DIR is a bundle.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Dataset bundle directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// JSON training config; defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Components joined by '+', e.g. mlmc+ics+crt+hybrid_kd, or erm.
    /// Defaults to everything, with cRT following the config.
    #[arg(long, value_name = "LIST")]
    components: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Bce,
    Mlmc,
    PerLevel,
}

#[derive(Debug, Args)]
struct TrainPhaseArgs {
    /// Phase to run.
    #[arg(long, value_name = "1|2|3", value_parser = clap::value_parser!(u8).range(1..=3))]
    phase: u8,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output checkpoint directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Teacher 1 checkpoint (phases 2 and 3).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Teacher 2 checkpoint (phase 3; defaults to teacher 1).
    #[arg(long, value_name = "FILE")]
    teacher2: Option<PathBuf>,
    /// Phase 1 loss.
    #[arg(long, value_enum, default_value_t = LossArg::Mlmc)]
    loss: LossArg,
    /// Disable re-balancing weights in phases 2 and 3.
    #[arg(long)]
    no_ics: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Checkpoint directory or its manifest file.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
    split: EvalSplit,
    /// Config whose group thresholds define the groups.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Report file; printed to stdout when omitted.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalSplit {
    Val,
    Test,
}

impl From<EvalSplit> for Split {
    fn from(s: EvalSplit) -> Self {
        match s {
            EvalSplit::Val => Split::Val,
            EvalSplit::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories written by run-pipeline.
    #[arg(required = true, num_args = 2.., value_name = "DIR")]
    runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
    split: EvalSplit,
    /// Aggregated report file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ApDeltaArgs {
    /// Reference report.
    #[arg(long, value_name = "FILE")]
    from: PathBuf,
    /// Compared report.
    #[arg(long, value_name = "FILE")]
    to: PathBuf,
    /// Dataset bundle whose train counts order the classes.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplerArg {
    Instance,
    Class,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SamplerArg::Class)]
    sampler: SamplerArg,
    #[arg(long, value_name = "INT", default_value_t = 100_000)]
    draws: usize,
    #[arg(long, value_name = "INT", default_value_t = 0)]
    seed: u64,
    /// Exposure CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblationArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Training seeds.
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Rows separated by ';', each like mlmc+ics. Defaults to the
    /// seven-row component grid.
    #[arg(long, value_name = "LIST")]
    rows: Option<String>,
    /// Result CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command, and returns the
/// exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checkpoint_dir(path: &Path) -> &Path {
    if path.is_file() {
        path.parent().unwrap_or(Path::new("."))
    } else {
        path
    }
}

fn load_model(path: &Path) -> Result<ModelBundle> {
    Ok(load_checkpoint(checkpoint_dir(path))?.0)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Stats(a) => stats(a),
        Command::RunPipeline(a) => pipeline(a),
        Command::TrainPhase(a) => train_phase(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Report(a) => report(a),
        Command::ApDelta(a) => ap_delta(a),
        Command::SimulateSampling(a) => simulate(a),
        Command::Ablation(a) => ablation(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let tree = match a.tree {
        TreeLayout::Interleaved => HierarchyTree::interleaved(a.k, &a.levels)?,
        TreeLayout::Blocked => HierarchyTree::blocked(a.k, &a.levels)?,
    };
    let cfg = SynthConfig {
        n: a.n,
        k: a.k,
        d: a.d,
        target_rho: a.rho,
        cooccur_rate: a.cooccur,
        tree: tree.clone(),
        seed: a.seed,
        noise_sigma: a.noise,
    };
    let (train, val, test) = generate_synthetic(&cfg)?;
    save_bundle(&DatasetBundle { train, val, test, tree }, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let ds: MultiLabelDataset = if a.data.join("manifest.json").is_file() {
        load_dataset(&a.data)?
    } else {
        load_bundle(&a.data)?.split(a.split.into()).clone()
    };
    let s = compute_stats(ds.labels().view())?;
    let groups = assign_groups(
        &s.class_counts,
        GroupThresholds {
            many: a.thresholds.many,
            few: a.thresholds.few,
        },
    )?;
    println!("split {}", ds.split());
    println!("samples {}", ds.len());
    println!("rho {}", s.rho);
    println!("lcard {}", s.lcard);
    println!("class,count,group");
    for &j in &s.sorted_class_order {
        println!("{j},{},{}", s.class_counts[j], groups.group_of_class[j]);
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let components = match &a.components {
        Some(s) => s.parse()?,
        None => Components::all(cfg.crt_freeze),
    };
    let data = load_bundle(&a.data)?;
    let result = run_pipeline(&data, &cfg, components)?;
    result.write(&cfg, &a.out)?;
    let groups = train_groups(&data, &cfg)?;
    for split in [Split::Val, Split::Test] {
        let r = evaluate(result.final_model(), data.split(split), &groups)?;
        write_report(&r, &a.out.join(format!("eval_{split}.json")))?;
        println!("{split} average mAP {:.6}", r.average);
    }
    Ok(())
}

fn train_phase(a: TrainPhaseArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let data = load_bundle(&a.data)?;
    let teacher1 = || -> Result<ModelBundle> {
        let path = a
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config(format!("phase {} needs --checkpoint", a.phase)))?;
        load_model(path)
    };
    let (model, record) = match a.phase {
        1 => {
            let loss = match a.loss {
                LossArg::Bce => Phase1Loss::Bce,
                LossArg::Mlmc => Phase1Loss::Mlmc,
                LossArg::PerLevel => Phase1Loss::PerLevel,
            };
            train_phase1(&data, &cfg, loss)?
        }
        2 => {
            let opts = Phase2Options {
                ics: !a.no_ics,
                ..Phase2Options::from_config(&cfg)
            };
            train_phase2(&data, &cfg, &teacher1()?, opts)?
        }
        _ => {
            let t1 = teacher1()?;
            let t2 = match &a.teacher2 {
                Some(p) => load_model(p)?,
                None => t1.clone(),
            };
            let teachers = TeacherBundle { teacher1: t1, teacher2: t2 };
            train_phase3(&data, &cfg, &teachers, !a.no_ics)?
        }
    };
    save_checkpoint(&model, &a.out, cfg.seed, 0)?;
    record.write_json_lines(&a.out.join("record.jsonl"))?;
    println!("phase {} best epoch {} val loss {:.6}", a.phase, record.best_epoch, record.best_val_loss);
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let data = load_bundle(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    let groups = train_groups(&data, &cfg)?;
    let report = evaluate(&model, data.split(a.split.into()), &groups)?;
    match &a.out {
        Some(p) => write_report(&report, p),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let split: Split = a.split.into();
    let reports = a
        .runs
        .iter()
        .map(|dir| read_report(&dir.join(format!("eval_{split}.json"))))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_trials(&reports)?;
    write_report(&agg, &a.out)?;
    let std = agg.trials.as_ref().map_or(0.0, |t| t.average_std);
    println!("{split} average mAP {:.6} +/- {:.6} over {} runs", agg.average, std, reports.len());
    Ok(())
}

fn ap_delta(a: ApDeltaArgs) -> Result<()> {
    let from = read_report(&a.from)?;
    let to = read_report(&a.to)?;
    let data = load_bundle(&a.data)?;
    let rows = ap_delta_report(&from, &to, data.train.class_counts())?;
    write_delta_csv(&rows, &a.out)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let ds = if a.data.join("manifest.json").is_file() {
        load_dataset(&a.data)?
    } else {
        load_bundle(&a.data)?.train
    };
    let spec = SamplerSpec {
        kind: match a.sampler {
            SamplerArg::Instance => SamplerKind::InstanceBalanced,
            SamplerArg::Class => SamplerKind::ClassBalanced,
        },
        batch_size: 1,
        seed: a.seed,
    };
    let r = simulate_exposure(spec, ds.labels().view(), a.draws)?;
    write_exposure_csv(&r, &a.out)
}

fn ablation(a: AblationArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let rows: Vec<Components> = match &a.rows {
        Some(s) => s.split(';').map(str::parse).collect::<Result<_>>()?,
        None => ablation_rows(),
    };
    let data = load_bundle(&a.data)?;
    let out = ablation_grid(&data, &cfg, &rows, &a.seeds)?;
    write_ablation_csv(&out, &a.out)?;
    for row in &out {
        let g = row.report.group_map;
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.4}", x));
        println!(
            "{:<24} many {} medium {} few {} average {:.4}",
            row.components.to_string(),
            f(g.many),
            f(g.medium),
            f(g.few),
            row.report.average
        );
    }
    let path = a.out.with_extension("json");
    write_json(&out, &path)
}
