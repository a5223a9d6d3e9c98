//! Command layer: dataset generation, training, the staged quantisation
//! run and reporting, all through files in artifact directories.
//!
//! Layout of a run directory:
//!
//! | file | stage |
//! |---|---|
//! | `sensitivity.json` | `sensitivity` |
//! | `frontier.csv`, `frontier.json`, `selected.json` | `allocate` |
//! | `patch_bits.json` | `aas` |
//! | `eval_report.json` | `eval` |
//!
//! Every stage reads its inputs from the files of earlier stages, so any
//! stage can be re-run on its own.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod store;

use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aas::PatchBitAssignment;
use crate::allocator::{BitEntry, ParetoPoint};
use crate::data::{generate, DataConfig, Dataset};
use crate::error::{Error, Result};
use crate::sensitivity::{Aggregation, ScoreRecord};
use crate::tensor::Tensor;
use crate::vit::{param_specs, train_toy, TrainConfig, TrainReport, ViTConfig, ViTParams};
pub use config::{Budget, PipelineConfig};
pub use pipeline::EvalReport;
use pipeline::{allocate, aas_stage, calibration_set, eval_stage, Calibration};
use store::{read_json, read_store, write_atomic, write_json, write_store, DirLock};

pub const SENSITIVITY_FILE: &str = "sensitivity.json";
pub const FRONTIER_CSV: &str = "frontier.csv";
pub const FRONTIER_JSON: &str = "frontier.json";
pub const SELECTED_FILE: &str = "selected.json";
pub const PATCH_BITS_FILE: &str = "patch_bits.json";
pub const EVAL_FILE: &str = "eval_report.json";

/// Process exit status of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InfeasibleBudget { .. } => 2,
        Error::Io { .. } | Error::NotFound { .. } | Error::Integrity { .. } | Error::Format { .. } => 3,
        _ => 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub split: String,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub generator: DataConfig,
}

const DATASET_KIND: &str = "pmq-dataset";
const CHECKPOINT_KIND: &str = "pmq-checkpoint";

pub fn save_dataset(base: &Path, split: &str, data: &Dataset, generator: &DataConfig) -> Result<()> {
    let meta = DatasetMeta {
        split: split.into(),
        num_classes: data.num_classes,
        labels: data.labels.clone(),
        generator: generator.clone(),
    };
    write_store(base, DATASET_KIND, meta, &[("inputs".into(), &data.inputs())])?;
    Ok(())
}

pub fn load_dataset(base: &Path) -> Result<Dataset> {
    let (m, tensors) = read_store::<DatasetMeta>(base, DATASET_KIND)?;
    let [inputs] = <[Tensor<f32>; 1]>::try_from(tensors)
        .map_err(|_| Error::format(base.with_extension("json"), "dataset must hold exactly one tensor"))?;
    Dataset::from_inputs(&inputs, m.meta.labels, m.meta.num_classes)
        .map_err(|e| Error::format(base.with_extension("json"), e))
}

/// Writes `train` and `test` splits into `out`.
pub fn cmd_gen_data(cfg: &PipelineConfig, out: &Path) -> Result<(Dataset, Dataset)> {
    let (train, test) = generate(&cfg.model, &cfg.data)?;
    let _lock = DirLock::acquire(out)?;
    save_dataset(&out.join("train"), "train", &train, &cfg.data)?;
    save_dataset(&out.join("test"), "test", &test, &cfg.data)?;
    info!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ViTConfig,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub report: TrainReport,
}

pub struct Checkpoint {
    pub params: ViTParams<f32>,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(base: &Path, ck: &Checkpoint) -> Result<()> {
    let named: Vec<_> = param_specs(&ck.params.config)
        .into_iter()
        .map(|s| s.name)
        .zip(ck.params.tensors())
        .collect();
    write_store(base, CHECKPOINT_KIND, ck.meta.clone(), &named)?;
    Ok(())
}

pub fn load_checkpoint(base: &Path) -> Result<Checkpoint> {
    let json = base.with_extension("json");
    let (m, tensors) = read_store::<CheckpointMeta>(base, CHECKPOINT_KIND)?;
    let config = m.meta.config.clone();
    config.validate().map_err(|e| Error::format(&json, e))?;
    let specs = param_specs(&config);
    if specs.len() != m.tensors.len() || specs.iter().zip(&m.tensors).any(|(s, e)| s.name != e.name) {
        return Err(Error::format(&json, "tensor names do not match the model census"));
    }
    let params = ViTParams::from_tensors(&config, tensors).map_err(|e| Error::format(&json, e))?;
    Ok(Checkpoint { params, meta: m.meta })
}

/// Trains from the seeded initialisation and writes `out/checkpoint`.
pub fn cmd_train(cfg: &PipelineConfig, data_dir: &Path, out: &Path) -> Result<Checkpoint> {
    let train = load_dataset(&data_dir.join("train"))?;
    check_data(&cfg.model, &train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let init = ViTParams::init(&cfg.model, &mut rng)?;
    let outcome = train_toy(&init, &train.samples, &train.labels, &cfg.train).map_err(|e| e.error)?;
    let r = &outcome.report;
    info!(
        "trained {} epochs: loss {:.4} -> {:.4}, train accuracy {:.3}, gradient norm {:.4}",
        r.epochs, r.initial_loss, r.final_loss, r.train_accuracy, r.final_grad_norm
    );
    if !r.converged {
        warn!(
            "gradient norm {:.4} is above the convergence threshold {}",
            r.final_grad_norm, r.grad_norm_threshold
        );
    }
    let ck = Checkpoint {
        params: outcome.params,
        meta: CheckpointMeta {
            config: cfg.model.clone(),
            init_seed: cfg.init_seed,
            train: cfg.train.clone(),
            report: outcome.report,
        },
    };
    let _lock = DirLock::acquire(out)?;
    save_checkpoint(&out.join("checkpoint"), &ck)?;
    Ok(ck)
}

fn check_data(model: &ViTConfig, data: &Dataset) -> Result<()> {
    if data.patches != model.patches || data.patch_dim != model.patch_dim || data.num_classes != model.num_classes {
        return Err(Error::Config(format!(
            "dataset is {}x{} with {} classes, model expects {}x{} with {}",
            data.patches, data.patch_dim, data.num_classes, model.patches, model.patch_dim, model.num_classes
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    All,
    Sensitivity,
    Allocate,
    Aas,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityArtifact {
    pub aggregation: Aggregation,
    pub num_samples: usize,
    pub scores: Vec<ScoreRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontierEntry {
    pub config_id: usize,
    pub size_bits: u64,
    pub omega: f64,
    pub bits: Vec<BitEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontierArtifact {
    pub points: Vec<FrontierEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedArtifact {
    pub budget_bits: u64,
    /// Frontier row of the selection; absent when quantisation is disabled.
    pub config_id: Option<usize>,
    pub point: ParetoPoint,
}

/// Inputs of [`cmd_run`].
pub struct RunInputs {
    pub checkpoint: Checkpoint,
    pub train: Dataset,
    pub test: Dataset,
}

impl RunInputs {
    pub fn load(checkpoint: &Path, data_dir: &Path) -> Result<Self> {
        Ok(Self {
            checkpoint: load_checkpoint(&checkpoint.join("checkpoint"))?,
            train: load_dataset(&data_dir.join("train"))?,
            test: load_dataset(&data_dir.join("test"))?,
        })
    }
}

/// Runs `stage` (or every stage) and writes its artifacts into `out`.
/// Returns the evaluation report when the eval stage ran.
pub fn cmd_run(cfg: &PipelineConfig, inputs: &RunInputs, out: &Path, stage: Stage) -> Result<Option<EvalReport>> {
    let ck = &inputs.checkpoint;
    if ck.meta.config != cfg.model {
        return Err(Error::Config("the [model] section does not match the checkpoint".into()));
    }
    check_data(&cfg.model, &inputs.train)?;
    check_data(&cfg.model, &inputs.test)?;
    let report = &ck.meta.report;
    if !report.converged {
        warn!(
            "checkpoint gradient norm {:.4} exceeds {}: the sensitivity scores assume a trained optimum",
            report.final_grad_norm, report.grad_norm_threshold
        );
    }
    let _lock = DirLock::acquire(out)?;
    let calib = calibration_set(&inputs.train, cfg.calibration.size, cfg.calibration.seed);
    let cal = Calibration::fit(&ck.params, calib, cfg)?;
    let runs = |s: Stage| stage == Stage::All || stage == s;

    if runs(Stage::Sensitivity) {
        let scores = cal.sensitivity(cfg)?;
        let artifact = SensitivityArtifact {
            aggregation: cfg.allocation.aggregation,
            num_samples: cal.calib.len(),
            scores: scores.iter().map(ScoreRecord::from).collect(),
        };
        write_json(&out.join(SENSITIVITY_FILE), &artifact)?;
    }
    if runs(Stage::Allocate) {
        let s: SensitivityArtifact = read_json(&out.join(SENSITIVITY_FILE))?;
        let alloc = allocate(&cal, cfg, s.scores.iter().map(Into::into).collect())?;
        let entries: Vec<FrontierEntry> = alloc
            .frontier
            .iter()
            .enumerate()
            .map(|(i, p)| FrontierEntry {
                config_id: i,
                size_bits: p.size_bits,
                omega: p.omega,
                bits: p.config.entries.clone(),
            })
            .collect();
        let mut csv = String::from("size_bits,omega,config_id\n");
        for e in &entries {
            csv.push_str(&format!("{},{},{}\n", e.size_bits, e.omega, e.config_id));
        }
        write_atomic(&out.join(FRONTIER_CSV), csv.as_bytes())?;
        write_json(&out.join(FRONTIER_JSON), &FrontierArtifact { points: entries })?;
        let config_id = alloc.frontier.iter().position(|p| *p == alloc.selected);
        info!(
            "selected {} bits (budget {}), omega {:.6}",
            alloc.selected.size_bits, alloc.budget_bits, alloc.selected.omega
        );
        write_json(
            &out.join(SELECTED_FILE),
            &SelectedArtifact {
                budget_bits: alloc.budget_bits,
                config_id,
                point: alloc.selected,
            },
        )?;
    }
    if runs(Stage::Aas) {
        let sel: SelectedArtifact = read_json(&out.join(SELECTED_FILE))?;
        let assignments = aas_stage(&cal, cfg, &sel.point.config)?;
        write_json(&out.join(PATCH_BITS_FILE), &assignments)?;
    }
    if runs(Stage::Eval) {
        let sel: SelectedArtifact = read_json(&out.join(SELECTED_FILE))?;
        let assignments: Vec<PatchBitAssignment> = read_json(&out.join(PATCH_BITS_FILE))?;
        let report = eval_stage(&cal, cfg, &sel.point, &assignments, &inputs.test, ck.meta.report.converged)?;
        info!(
            "accuracy {:.4} (float {:.4}), agreement {:.4}, size {} bits",
            report.accuracy, report.float_accuracy, report.agreement, report.size_bits
        );
        write_json(&out.join(EVAL_FILE), &report)?;
        return Ok(Some(report));
    }
    Ok(None)
}
