//! The five subcommands as library functions. Each returns a summary and
//! writes its artifacts; printing is left to the binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adapter_core::checkpoint::{Checkpoint, CheckpointKind};
use adapter_core::model::{build_model, AdapterConfig, Model};
use adapter_core::synthdata::{generate, Dataset, SynthSpec};
use adapter_core::train::{evaluate, fit, EvalReport, StepReport, TrainConfig, Trainer};
use adapter_core::transfer::{
    apply_policy, count_params, count_params_for, storage_projection, ParamReport, StorageProjection, TransferMode,
    TransferPolicy,
};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Recipe};
use crate::CliError;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn csv_preamble(digest: &str, header: &str) -> String {
    format!("# config_digest={digest}\n{header}\n")
}

// ---- synth ----

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub utterances: usize,
    pub frames: usize,
    pub vocab_size: usize,
}

/// Generates the dataset described by the TOML spec at `spec_path`.
pub fn synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<SynthSummary, CliError> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| CliError::io(spec_path, e))?;
    let mut spec: SynthSpec = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate(&spec)?;
    data.save(out)?;
    Ok(SynthSummary {
        utterances: data.len(),
        frames: data.total_frames(),
        vocab_size: spec.vocab_size,
    })
}

// ---- train / eval ----

fn load_base(path: &Path) -> Result<Checkpoint, CliError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != CheckpointKind::Full {
        return Err(adapter_core::Error::Mismatch(format!("{}: base checkpoint must be a full checkpoint", path.display())).into());
    }
    Ok(ckpt)
}

/// Builds the configured model (adapters included) and loads
/// `transfer.base_checkpoint` if one is set.
pub fn prepare_model(cfg: &ExperimentConfig) -> Result<Model, CliError> {
    let ac = cfg.adapter_config()?;
    let mut model = build_model(&cfg.model, ac.as_ref(), cfg.train.seed)?;
    if let Some(base) = &cfg.transfer.base_checkpoint {
        load_base(base)?.apply_to(&mut model)?;
    }
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint_kind: CheckpointKind,
    pub metrics_path: PathBuf,
    pub eval_path: PathBuf,
    pub last_step: Option<StepReport>,
    pub report: ParamReport,
}

/// Sibling file of `out` with the given suffix, e.g. `run.ckpt` →
/// `run.metrics.csv`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

/// Trains per `cfg` on `data`, writing the checkpoint to `out` and the
/// metrics and eval CSVs next to it. Parameter-efficient runs that start
/// from a base checkpoint emit a delta checkpoint; everything else emits a
/// full one.
pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<TrainOutcome, CliError> {
    let dataset = Dataset::load(data)?;
    let (train_set, eval_set) = if cfg.data.eval_fraction > 0.0 {
        let (a, b) = dataset.split_tail(cfg.data.eval_fraction);
        (a, Some(b).filter(|b| !b.is_empty()))
    } else {
        (dataset, None)
    };
    let mut model = prepare_model(cfg)?;
    let mut trainer = Trainer::new(cfg.train_config()?)?;
    let log = fit(&mut model, &mut trainer, &train_set, eval_set.as_ref(), cfg.train.eval_every)?;

    let digest = cfg.digest();
    let mut metrics = csv_preamble(&digest, "step,loss,lr,grad_norm,body_grad_norm");
    for s in &log.steps {
        writeln!(metrics, "{},{},{},{},{}", s.step, s.loss, s.lr, s.grad_norm, s.body_grad_norm).unwrap();
    }
    let mut evals = csv_preamble(&digest, "step,split,wer");
    for e in &log.evals {
        writeln!(evals, "{},{},{}", e.step, e.split, e.wer).unwrap();
    }
    let metrics_path = sibling(out, "metrics.csv");
    let eval_path = sibling(out, "eval.csv");
    write_file(&metrics_path, metrics)?;
    write_file(&eval_path, evals)?;

    let policy = cfg.policy()?;
    apply_policy(&mut model, &policy, usize::MAX)?;
    let ckpt = if cfg.transfer.base_checkpoint.is_some() && !policy.mode.is_finetune() {
        Checkpoint::delta(&model)
    } else {
        Checkpoint::full(&model)
    };
    ckpt.save(out)?;
    Ok(TrainOutcome {
        checkpoint_kind: ckpt.kind,
        metrics_path,
        eval_path,
        last_step: log.steps.last().copied(),
        report: count_params(&model, &policy)?,
    })
}

/// Loads `checkpoint` (over the configured base when it is a delta) and
/// evaluates on `data`.
pub fn load_for_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Model, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ac = cfg.adapter_config()?;
    let mut model = build_model(&cfg.model, ac.as_ref(), cfg.train.seed)?;
    if ckpt.kind == CheckpointKind::Delta {
        let base = cfg.transfer.base_checkpoint.as_ref().ok_or_else(|| {
            CliError::Config("invalid config field `transfer.base_checkpoint`: a delta checkpoint needs a base".into())
        })?;
        load_base(base)?.apply_to(&mut model)?;
    }
    ckpt.apply_to(&mut model)?;
    Ok(model)
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path) -> Result<EvalReport, CliError> {
    let model = load_for_eval(cfg, checkpoint)?;
    Ok(evaluate(&model, &Dataset::load(data)?)?)
}

pub fn eval_csv(cfg: &ExperimentConfig, r: &EvalReport) -> String {
    let mut s = csv_preamble(&cfg.digest(), "mean_loss,wer,edits,reference_tokens");
    writeln!(s, "{},{},{},{}", r.mean_loss, r.wer, r.edits, r.reference_tokens).unwrap();
    s
}

// ---- ablate ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    TopnFinetune,
    TopnAdapter,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::TopnFinetune => "topn_finetune",
            Method::TopnAdapter => "topn_adapter",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub method: Method,
    pub n: usize,
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
    pub wer: f64,
    pub recipe: Recipe,
}

/// `{1, 2, 4, ...}` below `num_layers`, plus `num_layers` itself.
pub fn default_n_list(num_layers: usize) -> Vec<usize> {
    let mut ns: Vec<usize> = std::iter::successors(Some(1usize), |n| Some(n * 2))
        .take_while(|&n| n < num_layers)
        .collect();
    ns.push(num_layers);
    ns
}

/// Trains every `(method, n)` point from the base model on `train_set`
/// and scores it on `test_set`. Points run in parallel; each owns its
/// model copy. Adapters go only into the top `n` blocks.
pub fn ablate(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    ns: &[usize],
) -> Result<Vec<AblationRow>, CliError> {
    let ab = cfg
        .ablate
        .as_ref()
        .ok_or_else(|| CliError::Config("invalid config field `ablate`: required by the ablate command".into()))?;
    let adapter = cfg.adapter.as_ref().expect("validated with [ablate]");
    let layers = cfg.model.num_layers;
    if let Some(&bad) = ns.iter().find(|&&n| n == 0 || n > layers) {
        return Err(CliError::Config(format!("invalid n {bad}: must lie in [1, {layers}]")));
    }
    let mut base = build_model(&cfg.model, None, cfg.train.seed)?;
    if let Some(path) = &cfg.transfer.base_checkpoint {
        load_base(path)?.apply_to(&mut base)?;
    }

    let points: Vec<(Method, usize)> = [Method::TopnFinetune, Method::TopnAdapter]
        .into_iter()
        .flat_map(|m| ns.iter().map(move |&n| (m, n)))
        .collect();
    points
        .par_iter()
        .map(|&(method, n)| {
            let (mut model, mode, recipe) = match method {
                Method::TopnFinetune => (base.clone(), TransferMode::TopNFinetune(n), ab.finetune),
                Method::TopnAdapter => {
                    let ac = AdapterConfig {
                        nonlinearity: adapter.nonlinearity,
                        ..AdapterConfig::top_layers(n, layers, adapter.bottleneck)
                    };
                    let m = adapter_core::model::insert_adapters(&base, &ac, cfg.train.seed)?;
                    (m, TransferMode::TopNAdapter(n), ab.adapter)
                }
            };
            let policy = TransferPolicy::new(mode).with_freeze_steps(recipe.freeze_transformer_steps);
            let mut trainer = Trainer::new(TrainConfig {
                policy,
                schedule: recipe.schedule(),
                batch_size: cfg.train.batch_size,
                seed: cfg.train.seed,
                adam: cfg.train.adam,
                grad_clip: cfg.train.grad_clip,
            })?;
            fit(&mut model, &mut trainer, train_set, None, 0)?;
            let wer = evaluate(&model, test_set)?.wer;
            let report = count_params(&model, &policy)?;
            Ok(AblationRow {
                method,
                n,
                trainable: report.trainable,
                total: report.total,
                fraction: report.fraction,
                wer,
                recipe,
            })
        })
        .collect()
}

pub fn ablation_csv(cfg: &ExperimentConfig, rows: &[AblationRow]) -> String {
    let mut s = csv_preamble(
        &cfg.digest(),
        "method,n,trainable,total,fraction,wer,total_steps,peak_lr,freeze_steps",
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.method.name(),
            r.n,
            r.trainable,
            r.total,
            r.fraction,
            r.wer,
            r.recipe.total_steps,
            r.recipe.peak_lr,
            r.recipe.freeze_transformer_steps
        )
        .unwrap();
    }
    s
}

// ---- params ----

#[derive(Clone, Debug, PartialEq)]
pub struct ModeRow {
    pub mode: String,
    pub report: ParamReport,
    pub storage: StorageProjection,
}

/// Accounting for full fine-tuning, adapters (if configured),
/// layer-norm-only, and the configured mode if it is none of those.
/// Fine-tune and layer-norm-only rows count the model without adapters.
pub fn params(cfg: &ExperimentConfig, tasks: usize) -> Result<Vec<ModeRow>, CliError> {
    let ac = cfg.adapter_config()?;
    let configured = cfg.policy()?;
    let mut policies = vec![TransferPolicy::new(TransferMode::FullFinetune)];
    if ac.is_some() {
        policies.push(TransferPolicy::new(TransferMode::Adapter));
    }
    policies.push(TransferPolicy::new(TransferMode::LayerNormOnly));
    if !policies.iter().any(|p| p.mode == configured.mode) {
        policies.push(configured);
    }
    policies
        .into_iter()
        .map(|p| {
            let ac = if p.mode.needs_adapters() { ac.as_ref() } else { None };
            Ok(ModeRow {
                mode: p.mode.to_string(),
                report: count_params_for(&cfg.model, ac, &p)?,
                storage: storage_projection(&cfg.model, ac, &p, tasks)?,
            })
        })
        .collect()
}

pub fn params_csv(cfg: &ExperimentConfig, rows: &[ModeRow]) -> String {
    let mut s = csv_preamble(
        &cfg.digest(),
        "mode,total,trainable,fraction,per_task_bytes,tasks,cumulative_bytes,base_model_bytes",
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.mode,
            r.report.total,
            r.report.trainable,
            r.report.fraction,
            r.storage.per_task_bytes,
            r.storage.tasks,
            r.storage.cumulative_bytes,
            r.storage.base_model_bytes
        )
        .unwrap();
    }
    s
}
