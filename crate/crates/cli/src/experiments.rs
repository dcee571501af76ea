//! Experiment harness.
//!
//! Four predefined experiments probe how the dual-head model handles the
//! stain shortcut:
//!
//! 1. `exp1_stain_only`: trains the stain-only model to confirm the stain
//!    cue is trivially learnable from these patches.
//! 2. `exp2_supervised_sweep`: sweeps the supervised stain-loss weight over
//!    a grid on a de-confounded dataset and traces how both heads respond.
//! 3. `exp3_entropy_sweep`: sweeps the entropy stain term, which never reads
//!    stain labels during training, over a non-positive grid.
//! 4. `confound_probe`: trains with and without the entropy term on datasets
//!    of varying confounding strength and measures the lesion accuracy drop
//!    on a counterfactual test set whose forced stains are swapped.
//!
//! Every grid cell (mu2, fold, seed) is an independent job; cells run on a
//! bounded worker pool and the report lists them in a fixed order keyed by
//! (experiment, mu2, fold, seed), so output never depends on scheduling. A
//! cell that fails is still reported, with its error in place of metrics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shortcut_probe_core::metrics::{
    binary_metrics, multiclass_metrics, uncertainty_summary, MetricReport, UncertaintySummary,
};
use shortcut_probe_core::model::{MCPrediction, Model, ModelConfig, ModelError, ModelKind};
use shortcut_probe_core::objectives::{LossWeights, StainMode};
use shortcut_probe_core::rng::{derive_seed, stream};
use shortcut_probe_core::synth::{
    generate, generate_with_table, group_split, Dataset, GenError, GenSpec, SplitError, SplitPlan,
    SWAPPED_CONFOUND_TABLE,
};
use shortcut_probe_core::tensor::PROB_CLAMP;
use shortcut_probe_core::train::{
    batch_tensor, test_indices, train, TrainConfig, TrainError, TrainHistory, EVAL_CHUNK,
};

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::config::RootConfig;
use crate::dataset_io::{self, DatasetIoError};
use crate::pool;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{kind} needs a de-confounded dataset (confound_rho = 0), the configured generator has {rho}")]
    ConfoundedDataset { kind: String, rho: f64 },
    #[error("an entropy-term grid cannot contain positive mu2 values, got {0}")]
    PositiveMu2(f64),
    #[error("the probe grid needs the 0 baseline and at least one negative mu2")]
    BadProbeGrid,
    #[error("model input shape {model:?} does not match the dataset patches {data:?}")]
    ShapeMismatch {
        model: (usize, usize, usize),
        data: (usize, usize, usize),
    },
    #[error("dataset directory {0} has neither split.json nor gen.json, cannot derive folds")]
    NoSplit(String),
    #[error(transparent)]
    DatasetIo(#[from] DatasetIoError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Exp1StainOnly,
    Exp2SupervisedSweep,
    Exp3EntropySweep,
    ConfoundProbe,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exp1StainOnly => "exp1_stain_only",
            Self::Exp2SupervisedSweep => "exp2_supervised_sweep",
            Self::Exp3EntropySweep => "exp3_entropy_sweep",
            Self::ConfoundProbe => "confound_probe",
        }
    }

    /// Accepts the short CLI spellings as well as the full names.
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "1" | "exp1" | "exp1_stain_only" => Some(Self::Exp1StainOnly),
            "2" | "exp2" | "exp2_supervised_sweep" => Some(Self::Exp2SupervisedSweep),
            "3" | "exp3" | "exp3_entropy_sweep" => Some(Self::Exp3EntropySweep),
            "probe" | "confound_probe" => Some(Self::ConfoundProbe),
            _ => None,
        }
    }

    pub fn default_mu2_grid(self) -> Vec<f64> {
        match self {
            Self::Exp1StainOnly => vec![0.0],
            Self::Exp2SupervisedSweep => vec![-1.0, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0],
            Self::Exp3EntropySweep => vec![-1.0, -0.5, -0.1, 0.0],
            Self::ConfoundProbe => vec![-0.5, 0.0],
        }
    }

    /// The default dataset for this experiment when none is configured.
    /// Exp 1 demonstrates shortcut learnability on the full confounded set;
    /// the sweeps isolate head behaviour on a smaller de-confounded set; the
    /// probe re-generates per confounding level with a weaker lesion signal
    /// so the stain shortcut is genuinely tempting.
    pub fn default_gen(self) -> GenSpec {
        match self {
            Self::Exp1StainOnly => GenSpec::default(),
            Self::Exp2SupervisedSweep | Self::Exp3EntropySweep => GenSpec {
                n_patches: 2400,
                patch_size: 12,
                confound_rho: 0.0,
                ..GenSpec::default()
            },
            Self::ConfoundProbe => GenSpec {
                n_patches: 2400,
                patch_size: 12,
                lesion_signal_strength: 0.4,
                ..GenSpec::default()
            },
        }
    }
}

/// What to run: experiment kind, mu2 grid, seeds, MC passes, and (for the
/// probe) the confounding grid. `mu2_grid: null` means the per-kind default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    pub mu2_grid: Option<Vec<f64>>,
    /// Dataset directory; omitted means generate in memory.
    pub dataset: Option<String>,
    pub seeds: Vec<u64>,
    /// Stochastic forward passes per MC-dropout prediction.
    pub t: usize,
    pub output_dir: Option<String>,
    /// Confounding strengths for the probe; ignored by the other kinds.
    pub rho_grid: Vec<f64>,
    /// The single validation fold the probe trains against.
    pub probe_fold: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Exp2SupervisedSweep,
            mu2_grid: None,
            dataset: None,
            seeds: vec![0, 1, 2],
            t: 50,
            output_dir: None,
            rho_grid: vec![0.0, 0.95],
            probe_fold: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed { error: String },
}

/// One grid cell: a model trained at (mu2, fold, seed) and evaluated on the
/// held-out test groups with MC dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub experiment: String,
    /// Confounding strength of the probe dataset this cell ran on.
    pub rho: Option<f64>,
    pub mu2: f64,
    pub fold: usize,
    pub seed: u64,
    pub stain_mode: StainMode,
    pub status: CellStatus,
    pub lesion: Option<MetricReport>,
    pub stain: Option<MetricReport>,
    pub lesion_uncertainty: Option<UncertaintySummary>,
    pub stain_uncertainty: Option<UncertaintySummary>,
    /// Mean entropy of the stain head's MC mean probabilities on the test set.
    pub stain_mean_entropy: Option<f64>,
    /// Stain labels touched while this cell trained.
    pub stain_label_reads: u64,
    pub best_epoch: usize,
    pub epochs_trained: usize,
    pub stopped_early: bool,
    /// Stain-head output weight norm after each epoch.
    pub stain_weight_norm_trace: Vec<f64>,
    /// Lesion metrics on the stain-swapped counterfactual test set (probe).
    pub swapped_lesion: Option<MetricReport>,
    /// In-distribution minus swapped lesion accuracy (probe).
    pub accuracy_gap: Option<f64>,
    pub history: Option<TrainHistory>,
    pub history_file: Option<String>,
    pub checkpoint_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvStamp {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
}

impl EnvStamp {
    fn collect() -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub rho: Option<f64>,
    pub n_patches: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_groups: usize,
    pub test_groups: usize,
    pub test_patches: usize,
    pub fold_val_patches: Vec<usize>,
    pub lesion_prevalence: f64,
    pub stain_counts: Vec<usize>,
    /// Audited stain-label reads performed against this dataset over the
    /// whole run (training only; test metrics use the unaudited accessor).
    pub stain_label_reads: u64,
}

/// Everything needed to reproduce and interpret a harness run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub plan: ExperimentPlan,
    pub mu2_grid: Vec<f64>,
    pub gen: Option<GenSpec>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mu1: f64,
    pub environment: EnvStamp,
    pub datasets: Vec<DatasetSummary>,
    pub cells: Vec<CellReport>,
}

struct Bundle {
    data: Dataset,
    plan: SplitPlan,
    swapped: Option<Dataset>,
    rho: Option<f64>,
    gen: Option<GenSpec>,
    source: String,
}

struct CellJob {
    experiment: ExperimentKind,
    bundle_idx: usize,
    rho: Option<f64>,
    mu2: f64,
    mode: StainMode,
    model_kind: ModelKind,
    fold: usize,
    seed: u64,
    ckpt_path: Option<PathBuf>,
}

struct CellCtx<'a> {
    bundles: &'a [Bundle],
    model_cfg: &'a ModelConfig,
    train_cfg: &'a TrainConfig,
    mu1: f64,
}

/// Sorted ascending with exact duplicates removed.
fn canonical_grid(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

fn split_seed(spec: &GenSpec) -> u64 {
    derive_seed(spec.seed, &[stream::SPLIT])
}

fn generate_bundle(
    spec: &GenSpec,
    knobs: &SplitPlan,
    with_swapped: bool,
    rho: Option<f64>,
) -> Result<Bundle, HarnessError> {
    let records = generate(spec)?;
    let plan = group_split(&records, knobs, split_seed(spec))?;
    let swapped = if with_swapped {
        let twin = generate_with_table(spec, &SWAPPED_CONFOUND_TABLE)?;
        Some(Dataset::new(twin)?)
    } else {
        None
    };
    Ok(Bundle {
        data: Dataset::new(records)?,
        plan,
        swapped,
        rho,
        gen: Some(spec.clone()),
        source: "generated".to_string(),
    })
}

fn load_bundle(dir: &Path, knobs: &SplitPlan) -> Result<Bundle, HarnessError> {
    let data = dataset_io::read_dataset(dir)?;
    let gen = if dataset_io::gen_spec_exists(dir) {
        Some(dataset_io::read_gen_spec(dir)?)
    } else {
        None
    };
    let plan = if dataset_io::split_exists(dir) {
        dataset_io::read_split(dir)?
    } else {
        let spec = gen
            .as_ref()
            .ok_or_else(|| HarnessError::NoSplit(dir.display().to_string()))?;
        group_split(data.records(), knobs, split_seed(spec))?
    };
    Ok(Bundle {
        rho: gen.as_ref().map(|g| g.confound_rho),
        data,
        plan,
        swapped: None,
        gen,
        source: dir.display().to_string(),
    })
}

fn summarize(bundle: &Bundle) -> DatasetSummary {
    let data = &bundle.data;
    let (c, h, w) = data.shape();
    let mut groups = std::collections::BTreeSet::new();
    let mut positives = 0usize;
    let mut stain_counts = vec![0usize; 4];
    for rec in data.records() {
        groups.insert(rec.group_id);
        positives += usize::from(rec.lesion);
        stain_counts[rec.stain as usize] += 1;
    }
    let test_idx = test_indices(data, &bundle.plan);
    let mut fold_val_patches = vec![0usize; bundle.plan.n_folds];
    for rec in data.records() {
        if let Some(f) = bundle.plan.fold_of(rec.group_id) {
            fold_val_patches[f] += 1;
        }
    }
    DatasetSummary {
        source: bundle.source.clone(),
        rho: bundle.rho,
        n_patches: data.len(),
        channels: c,
        height: h,
        width: w,
        n_groups: groups.len(),
        test_groups: bundle.plan.test_groups.len(),
        test_patches: test_idx.len(),
        fold_val_patches,
        lesion_prevalence: positives as f64 / data.len() as f64,
        stain_counts,
        stain_label_reads: data.stain_reads(),
    }
}

struct CellEval {
    lesion: Option<MetricReport>,
    stain: MetricReport,
    lesion_uncertainty: Option<UncertaintySummary>,
    stain_uncertainty: UncertaintySummary,
    stain_mean_entropy: f64,
}

/// Entropy of each MC mean-probability row, averaged; mass at or below the
/// probability clamp contributes zero, matching the training-side entropy.
fn mean_prob_entropy(preds: &[MCPrediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for p in preds {
        let mut h = 0.0;
        for &v in &p.mean_probs {
            if v > PROB_CLAMP {
                h -= v * v.ln();
            }
        }
        total += h;
    }
    total / preds.len() as f64
}

/// MC-dropout evaluation on `idx`, chunked exactly like training-side test
/// evaluation: chunk c uses the substream `derive_seed(eval_seed, [c])`.
fn mc_eval(
    model: &Model,
    data: &Dataset,
    idx: &[usize],
    t_passes: usize,
    eval_seed: u64,
) -> Result<CellEval, TrainError> {
    let mut lesion_preds: Vec<MCPrediction> = Vec::new();
    let mut stain_preds: Vec<MCPrediction> = Vec::new();
    for (chunk_no, chunk) in idx.chunks(EVAL_CHUNK).enumerate() {
        let x = batch_tensor(data, chunk)?;
        let chunk_seed = derive_seed(eval_seed, &[chunk_no as u64]);
        let batch = model.mc_predict_batch(&x, t_passes, chunk_seed)?;
        if let Some(l) = batch.lesion {
            lesion_preds.extend(l);
        }
        stain_preds.extend(batch.stain);
    }
    let lesion_labels: Vec<usize> = idx.iter().map(|&i| data.lesion(i)).collect();
    let stain_labels: Vec<usize> = idx.iter().map(|&i| data.stain_uncounted(i)).collect();

    let stain_probs: Vec<f64> = stain_preds
        .iter()
        .flat_map(|p| p.mean_probs.iter().copied())
        .collect();
    let stain_uncertainty = uncertainty_summary(&stain_preds, &stain_labels)?;
    let stain = multiclass_metrics(&stain_probs, 4, &stain_labels)?
        .with_mean_uncertainty(stain_uncertainty.mean);
    let stain_mean_entropy = mean_prob_entropy(&stain_preds);

    let (lesion, lesion_uncertainty) = if lesion_preds.is_empty() {
        (None, None)
    } else {
        let scores: Vec<f64> = lesion_preds.iter().map(|p| p.mean_probs[1]).collect();
        let unc = uncertainty_summary(&lesion_preds, &lesion_labels)?;
        let report = binary_metrics(&scores, &lesion_labels)?.with_mean_uncertainty(unc.mean);
        (Some(report), Some(unc))
    };

    Ok(CellEval {
        lesion,
        stain,
        lesion_uncertainty,
        stain_uncertainty,
        stain_mean_entropy,
    })
}

fn cell_tag(job: &CellJob) -> String {
    let mut tag = job.experiment.as_str().to_string();
    if let Some(rho) = job.rho {
        tag.push_str(&format!("_rho{}", crate::report::fmt_sig6(rho)));
    }
    tag.push_str(&format!(
        "_mu2_{}_fold{}_seed{}",
        crate::report::fmt_sig6(job.mu2),
        job.fold,
        job.seed
    ));
    tag
}

fn run_cell(ctx: &CellCtx, job: &CellJob) -> CellReport {
    let mut report = CellReport {
        experiment: job.experiment.as_str().to_string(),
        rho: job.rho,
        mu2: job.mu2,
        fold: job.fold,
        seed: job.seed,
        stain_mode: job.mode,
        status: CellStatus::Ok,
        lesion: None,
        stain: None,
        lesion_uncertainty: None,
        stain_uncertainty: None,
        stain_mean_entropy: None,
        stain_label_reads: 0,
        best_epoch: 0,
        epochs_trained: 0,
        stopped_early: false,
        stain_weight_norm_trace: Vec::new(),
        swapped_lesion: None,
        accuracy_gap: None,
        history: None,
        history_file: None,
        checkpoint_file: None,
    };
    match run_cell_inner(ctx, job, &mut report) {
        Ok(()) => report,
        Err(e) => {
            report.status = CellStatus::Failed {
                error: e.to_string(),
            };
            report
        }
    }
}

fn run_cell_inner(
    ctx: &CellCtx,
    job: &CellJob,
    out: &mut CellReport,
) -> Result<(), HarnessError> {
    let bundle = &ctx.bundles[job.bundle_idx];
    let weights = LossWeights {
        mu1: ctx.mu1,
        mu2: job.mu2,
        stain_mode: job.mode,
    };
    let model_seed = derive_seed(job.seed, &[stream::PARAM_INIT, job.fold as u64]);
    let model = match job.model_kind {
        ModelKind::Dual => Model::dual(ctx.model_cfg.clone(), model_seed)?,
        ModelKind::StainOnly => Model::stain_only(ctx.model_cfg.clone(), model_seed)?,
    };
    let train_seed = derive_seed(job.seed, &[job.fold as u64]);
    let (trained, history) = train(
        model,
        &bundle.data,
        &bundle.plan,
        job.fold,
        &weights,
        ctx.train_cfg,
        train_seed,
    )?;
    if let Some(path) = &job.ckpt_path {
        save_checkpoint(&trained, path)?;
        out.checkpoint_file = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned());
    }

    let eval_seed = derive_seed(job.seed, &[stream::MC_PASS, job.fold as u64]);
    let test_idx = test_indices(&bundle.data, &bundle.plan);
    if test_idx.is_empty() {
        return Err(HarnessError::Train(TrainError::EmptyTest));
    }
    let eval = mc_eval(
        &trained,
        &bundle.data,
        &test_idx,
        ctx.train_cfg.mc_passes,
        eval_seed,
    )?;
    if let Some(swapped) = &bundle.swapped {
        let twin = mc_eval(&trained, swapped, &test_idx, ctx.train_cfg.mc_passes, eval_seed)?;
        if let (Some(a), Some(b)) = (&eval.lesion, &twin.lesion) {
            out.accuracy_gap = Some(a.accuracy - b.accuracy);
        }
        out.swapped_lesion = twin.lesion;
    }

    out.stain_label_reads = history.stain_label_reads;
    out.best_epoch = history.best_epoch;
    out.epochs_trained = history.epochs.len();
    out.stopped_early = history.stopped_early;
    out.stain_weight_norm_trace = history.epochs.iter().map(|e| e.stain_weight_norm).collect();
    out.history_file = Some(format!("history_{}.csv", cell_tag(job)));
    out.history = Some(history);
    out.lesion = eval.lesion;
    out.stain = Some(eval.stain);
    out.lesion_uncertainty = eval.lesion_uncertainty;
    out.stain_uncertainty = Some(eval.stain_uncertainty);
    out.stain_mean_entropy = Some(eval.stain_mean_entropy);
    Ok(())
}

fn check_shapes(model_cfg: &ModelConfig, bundles: &[Bundle]) -> Result<(), HarnessError> {
    for b in bundles {
        if model_cfg.trunk.input_shape != b.data.shape() {
            return Err(HarnessError::ShapeMismatch {
                model: model_cfg.trunk.input_shape,
                data: b.data.shape(),
            });
        }
    }
    Ok(())
}

fn assemble(
    kind: ExperimentKind,
    plan: &ExperimentPlan,
    grid: Vec<f64>,
    gen_echo: Option<GenSpec>,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    mu1: f64,
    bundles: &[Bundle],
    cells: Vec<CellReport>,
) -> RunReport {
    RunReport {
        experiment: kind.as_str().to_string(),
        plan: plan.clone(),
        mu2_grid: grid,
        gen: gen_echo,
        model: model_cfg,
        train: train_cfg,
        mu1,
        environment: EnvStamp::collect(),
        datasets: bundles.iter().map(summarize).collect(),
        cells,
    }
}

/// Runs one of the predefined experiments and returns the full report.
/// `data_dir` loads a dataset written by `gen`; the probe always generates
/// its own datasets, one per confounding level.
pub fn run_experiment(
    kind: ExperimentKind,
    config: &RootConfig,
    data_dir: Option<&Path>,
    threads: usize,
) -> Result<RunReport, HarnessError> {
    let mut plan = config.plan.clone();
    plan.kind = kind;
    let grid = canonical_grid(
        &plan
            .mu2_grid
            .clone()
            .unwrap_or_else(|| kind.default_mu2_grid()),
    );
    match kind {
        ExperimentKind::Exp3EntropySweep | ExperimentKind::ConfoundProbe => {
            if let Some(&bad) = grid.iter().find(|&&m| m > 0.0) {
                return Err(HarnessError::PositiveMu2(bad));
            }
        }
        _ => {}
    }
    // An explicitly empty grid is allowed and yields an empty report; a
    // non-empty probe grid must pair the 0 baseline with a negative entry.
    if kind == ExperimentKind::ConfoundProbe
        && !grid.is_empty()
        && (!grid.contains(&0.0) || !grid.iter().any(|&m| m < 0.0))
    {
        return Err(HarnessError::BadProbeGrid);
    }

    let mut train_cfg = config.train.clone();
    train_cfg.mc_passes = plan.t;
    train_cfg.validate()?;
    let mu1 = config.loss.mu1;

    // Datasets.
    let bundles: Vec<Bundle> = match kind {
        ExperimentKind::ConfoundProbe => {
            let base = config.gen_or(kind.default_gen());
            let mut rhos = canonical_grid(&plan.rho_grid);
            if rhos.is_empty() {
                rhos.push(base.confound_rho);
            }
            rhos.iter()
                .map(|&rho| {
                    let spec = GenSpec {
                        confound_rho: rho,
                        ..base.clone()
                    };
                    generate_bundle(&spec, &config.split, true, Some(rho))
                })
                .collect::<Result<_, _>>()?
        }
        _ => {
            let bundle = match data_dir {
                Some(dir) => load_bundle(dir, &config.split)?,
                None => {
                    let spec = config.gen_or(kind.default_gen());
                    generate_bundle(&spec, &config.split, false, None)?
                }
            };
            if matches!(
                kind,
                ExperimentKind::Exp2SupervisedSweep | ExperimentKind::Exp3EntropySweep
            ) {
                if let Some(gen) = &bundle.gen {
                    if gen.confound_rho != 0.0 {
                        return Err(HarnessError::ConfoundedDataset {
                            kind: kind.as_str().to_string(),
                            rho: gen.confound_rho,
                        });
                    }
                }
            }
            vec![bundle]
        }
    };

    let model_cfg = config.resolved_model(bundles[0].data.shape());
    check_shapes(&model_cfg, &bundles)?;

    // Jobs in canonical (experiment, rho, mu2, fold, seed) order.
    let mut jobs = Vec::new();
    match kind {
        ExperimentKind::Exp1StainOnly => {
            if !grid.is_empty() {
                for fold in 0..bundles[0].plan.n_folds {
                    for &seed in &plan.seeds {
                        jobs.push(CellJob {
                            experiment: kind,
                            bundle_idx: 0,
                            rho: None,
                            mu2: 0.0,
                            mode: StainMode::SupervisedCe,
                            model_kind: ModelKind::StainOnly,
                            fold,
                            seed,
                            ckpt_path: None,
                        });
                    }
                }
            }
        }
        ExperimentKind::Exp2SupervisedSweep | ExperimentKind::Exp3EntropySweep => {
            let mode = if kind == ExperimentKind::Exp2SupervisedSweep {
                StainMode::SupervisedCe
            } else {
                StainMode::EntropyMax
            };
            for &mu2 in &grid {
                for fold in 0..bundles[0].plan.n_folds {
                    for &seed in &plan.seeds {
                        jobs.push(CellJob {
                            experiment: kind,
                            bundle_idx: 0,
                            rho: None,
                            mu2,
                            mode,
                            model_kind: ModelKind::Dual,
                            fold,
                            seed,
                            ckpt_path: None,
                        });
                    }
                }
            }
        }
        ExperimentKind::ConfoundProbe => {
            for (b, bundle) in bundles.iter().enumerate() {
                for &mu2 in &grid {
                    let mode = if mu2 == 0.0 {
                        StainMode::None
                    } else {
                        StainMode::EntropyMax
                    };
                    for &seed in &plan.seeds {
                        jobs.push(CellJob {
                            experiment: kind,
                            bundle_idx: b,
                            rho: bundle.rho,
                            mu2,
                            mode,
                            model_kind: ModelKind::Dual,
                            fold: plan.probe_fold,
                            seed,
                            ckpt_path: None,
                        });
                    }
                }
            }
        }
    }

    let ctx = CellCtx {
        bundles: &bundles,
        model_cfg: &model_cfg,
        train_cfg: &train_cfg,
        mu1,
    };
    let cells = pool::run_jobs(&jobs, threads, |job| run_cell(&ctx, job));

    let gen_echo = bundles[0].gen.clone();
    Ok(assemble(
        kind, &plan, grid, gen_echo, model_cfg, train_cfg, mu1, &bundles, cells,
    ))
}

/// Cross-validated training of the dual model with the configured loss,
/// saving one checkpoint per (seed, fold). The report has the same shape as
/// an experiment report with a single-value grid.
pub fn run_training(
    config: &RootConfig,
    data_dir: &Path,
    out_dir: &Path,
    threads: usize,
) -> Result<RunReport, HarnessError> {
    let bundle = load_bundle(data_dir, &config.split)?;
    let mut train_cfg = config.train.clone();
    train_cfg.mc_passes = config.plan.t;
    train_cfg.validate()?;
    let model_cfg = config.resolved_model(bundle.data.shape());
    let bundles = vec![bundle];
    check_shapes(&model_cfg, &bundles)?;

    let mut jobs = Vec::new();
    for fold in 0..bundles[0].plan.n_folds {
        for &seed in &config.plan.seeds {
            jobs.push(CellJob {
                experiment: config.plan.kind,
                bundle_idx: 0,
                rho: None,
                mu2: config.loss.mu2,
                mode: config.loss.stain_mode,
                model_kind: ModelKind::Dual,
                fold,
                seed,
                ckpt_path: Some(out_dir.join(format!("model_seed{seed}_fold{fold}.ckpt"))),
            });
        }
    }
    let ctx = CellCtx {
        bundles: &bundles,
        model_cfg: &model_cfg,
        train_cfg: &train_cfg,
        mu1: config.loss.mu1,
    };
    let mut cells = pool::run_jobs(&jobs, threads, |job| run_cell(&ctx, job));
    for cell in &mut cells {
        cell.experiment = "train".to_string();
    }

    let mut plan = config.plan.clone();
    plan.mu2_grid = Some(vec![config.loss.mu2]);
    let gen_echo = bundles[0].gen.clone();
    let mut report = assemble(
        config.plan.kind,
        &plan,
        vec![config.loss.mu2],
        gen_echo,
        model_cfg,
        train_cfg,
        config.loss.mu1,
        &bundles,
        cells,
    );
    report.experiment = "train".to_string();
    Ok(report)
}
