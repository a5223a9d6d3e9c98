//! The quantisation pipeline on in-memory values: calibration,
//! sensitivity, allocation, patch reassignment and evaluation.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AasConfig, PipelineConfig};
use crate::aas::{assign_patch_bits, mean_attention, patch_importance, resolve_row_params, PatchBitAssignment};
use crate::allocator::{
    pareto_frontier, select_config, weight_quant_table_pct, BitConfig, ParetoPoint, PerturbationTable,
    WeightQuantTable,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::quant::{calibrate_percentile, quant_error, QuantParams, MAX_BITS, MIN_BITS, PASSTHROUGH_BITS};
use crate::sensitivity::{gsm_scores_with, ImportanceScore};
use crate::tensor::Tensor;
use crate::vit::{
    accuracy, argmax_rows, collect_activations, model_forward_samples, predict, sample_forward, ActSite,
    ActivationLog, ComponentId, QuantContext, ViTParams,
};

/// Every bit-width a quantiser is calibrated for. Patch reassignment can
/// leave the allocator's candidate set, so all of `[2, 8]` is covered.
pub fn all_bits() -> Vec<u8> {
    (MIN_BITS..=MAX_BITS).collect()
}

pub type ActivationTable = BTreeMap<ActSite, BTreeMap<u8, QuantParams>>;

/// Seeded draw of `size` training samples without replacement, in
/// dataset order.
pub fn calibration_set(train: &Dataset, size: usize, seed: u64) -> Dataset {
    let n = size.min(train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, train.len(), n).into_vec();
    idx.sort_unstable();
    Dataset {
        samples: idx.iter().map(|&i| train.samples[i].clone()).collect(),
        labels: idx.iter().map(|&i| train.labels[i]).collect(),
        ..train.clone()
    }
}

/// Quantisers fitted on the calibration set.
pub struct Calibration<'a> {
    pub params: &'a ViTParams<f32>,
    pub calib: Dataset,
    pub weights: WeightQuantTable,
    pub activations: ActivationTable,
    /// Float activations of the calibration set.
    pub log: ActivationLog<f32>,
}

impl<'a> Calibration<'a> {
    pub fn fit(params: &'a ViTParams<f32>, calib: Dataset, cfg: &PipelineConfig) -> Result<Self> {
        if calib.is_empty() {
            return Err(Error::Input("calibration set is empty".into()));
        }
        let bits = all_bits();
        let weights = weight_quant_table_pct(params, &bits, cfg.calibration.weight_percentile)?;
        let log = collect_activations(params, &calib.samples, None)?;
        let pct = cfg.calibration.activation_percentile;
        let activations = log
            .iter()
            .map(|(&site, xs)| {
                let per_bit = bits
                    .iter()
                    .map(|&b| calibrate_percentile(xs, b, false, pct).map(|qp| (b, qp)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                Ok((site, per_bit))
            })
            .collect::<Result<ActivationTable>>()?;
        Ok(Self {
            params,
            calib,
            weights,
            activations,
            log,
        })
    }

    pub fn sensitivity(&self, cfg: &PipelineConfig) -> Result<Vec<ImportanceScore>> {
        gsm_scores_with(
            self.params,
            &self.calib.samples,
            &self.calib.labels,
            cfg.allocation.aggregation,
        )
    }

    /// Mean per-sample activation quantisation error of each component at
    /// each candidate bit-width.
    pub fn activation_terms(&self, candidate_bits: &[u8]) -> Result<Vec<Vec<f64>>> {
        let model = &self.params.config;
        let n = self.calib.len() as f64;
        ComponentId::all(model)
            .into_iter()
            .map(|id| {
                candidate_bits
                    .iter()
                    .map(|&b| {
                        let mut err = 0.0;
                        for (site, xs) in &self.log {
                            if site.component(model) != id || matches!(site, ActSite::AttnProbs(_)) {
                                continue;
                            }
                            let qp = &self.activations[site][&b];
                            err += xs.iter().map(|x| quant_error(x, qp)).sum::<f64>();
                        }
                        Ok(err / n)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn perturbation_table(&self, cfg: &PipelineConfig, scores: &[ImportanceScore]) -> Result<PerturbationTable> {
        let bits = &cfg.allocation.candidate_bits;
        let act = if cfg.allocation.activation_omega {
            Some(self.activation_terms(bits)?)
        } else {
            None
        };
        PerturbationTable::build(self.params, scores, &self.weights, bits, act.as_deref())
    }

    /// Simulated-quantisation context of a bit configuration, without
    /// patch-wise rows.
    pub fn context(&self, bits: &BitConfig, quantize_attention: bool) -> Result<QuantContext> {
        let model = &self.params.config;
        let missing = |what: String| Error::Config(format!("no calibrated quantiser for {what}"));
        let weights = self
            .params
            .specs()
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let b = bits
                    .weight_bits(spec.component)
                    .ok_or_else(|| missing(spec.component.to_string()))?;
                if !spec.quantizable || b == PASSTHROUGH_BITS {
                    return Ok(QuantParams::passthrough());
                }
                self.weights
                    .get(&k)
                    .and_then(|m| m.get(&b))
                    .copied()
                    .ok_or_else(|| missing(format!("{} at {b} bits", spec.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut activations = BTreeMap::new();
        for site in ActSite::all(model) {
            if matches!(site, ActSite::AttnProbs(_)) && !quantize_attention {
                continue;
            }
            let id = site.component(model);
            let b = bits.activation_bits(id).ok_or_else(|| missing(id.to_string()))?;
            if b == PASSTHROUGH_BITS {
                continue;
            }
            let qp = self
                .activations
                .get(&site)
                .and_then(|m| m.get(&b))
                .ok_or_else(|| missing(format!("{site} at {b} bits")))?;
            activations.insert(site, *qp);
        }
        Ok(QuantContext {
            weights,
            activations,
            patch_rows: vec![None; model.depth],
            quantize_attention,
        })
    }

    /// Per-layer patch assignments from mean calibration attention under
    /// `base` (the base-bit context). Layers whose MSA runs in float get
    /// no assignment.
    pub fn patch_bits(&self, bits: &BitConfig, base: &QuantContext, aas: &AasConfig) -> Result<Vec<PatchBitAssignment>> {
        let traces = model_forward_samples(self.params, &self.calib.samples, Some(base))?.traces;
        let mut out = Vec::new();
        for l in 0..self.params.config.depth {
            let Some(k) = msa_base_bits(bits, l) else { continue };
            let attn = mean_attention(&traces, l)?;
            out.push(assign_patch_bits(&patch_importance(l, &attn, aas.mode)?, k)?);
        }
        Ok(out)
    }

    /// Installs `assignments` as row-wise MSA-input quantisers.
    pub fn with_patches(&self, base: &QuantContext, assignments: &[PatchBitAssignment]) -> Result<QuantContext> {
        let mut ctx = base.clone();
        for a in assignments {
            let per_bit = self
                .activations
                .get(&ActSite::MsaInput(a.layer))
                .ok_or_else(|| Error::Config(format!("no calibrated input quantiser for block {}", a.layer)))?;
            let slot = ctx
                .patch_rows
                .get_mut(a.layer)
                .ok_or_else(|| Error::Config(format!("assignment for missing block {}", a.layer)))?;
            *slot = Some(resolve_row_params(a, per_bit)?);
        }
        Ok(ctx)
    }
}

fn msa_base_bits(bits: &BitConfig, layer: usize) -> Option<u8> {
    bits.activation_bits(ComponentId::msa(layer))
        .filter(|&b| b != PASSTHROUGH_BITS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPatchBits {
    pub layer: usize,
    pub average_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub float_accuracy: f64,
    /// Mean squared logit difference to the float model.
    pub logit_mse: f64,
    /// Fraction of samples whose argmax matches the float model.
    pub agreement: f64,
    pub size_bits: u64,
    pub omega: f64,
    pub patch_bits: Vec<LayerPatchBits>,
    pub checkpoint_converged: bool,
}

/// How patch assignments are applied during evaluation.
pub enum PatchMode<'c> {
    None,
    Frozen(&'c [PatchBitAssignment]),
    /// Re-score on every sample with the base context and this mode.
    PerSample(&'c AasConfig, &'c BitConfig),
}

pub struct Evaluation {
    pub logits: Tensor<f32>,
    pub patch_bits: Vec<LayerPatchBits>,
}

/// Quantised logits of `data` under `base` plus the patch mode.
pub fn evaluate_logits(cal: &Calibration, base: &QuantContext, data: &Dataset, patches: PatchMode) -> Result<Evaluation> {
    let params = cal.params;
    match patches {
        PatchMode::None => Ok(Evaluation {
            logits: predict(params, &data.samples, Some(base))?,
            patch_bits: Vec::new(),
        }),
        PatchMode::Frozen(assignments) => {
            let ctx = cal.with_patches(base, assignments)?;
            Ok(Evaluation {
                logits: predict(params, &data.samples, Some(&ctx))?,
                patch_bits: assignments
                    .iter()
                    .map(|a| LayerPatchBits { layer: a.layer, average_bits: a.average_bits() })
                    .collect(),
            })
        }
        PatchMode::PerSample(aas, bits) => {
            let rows = data
                .samples
                .par_iter()
                .map(|s| {
                    let trace = sample_forward(params, s, Some(base), None)?;
                    let mut assignments = Vec::new();
                    for l in 0..params.config.depth {
                        let Some(k) = msa_base_bits(bits, l) else { continue };
                        let psv = patch_importance(l, &trace.layers[l].attention, aas.mode)?;
                        assignments.push(assign_patch_bits(&psv, k)?);
                    }
                    let ctx = cal.with_patches(base, &assignments)?;
                    let logits = sample_forward(params, s, Some(&ctx), None)?.logits;
                    Ok((logits, assignments))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
            for (_, assignments) in &rows {
                for a in assignments {
                    *sums.entry(a.layer).or_default() += a.average_bits();
                }
            }
            let n = rows.len().max(1) as f64;
            let c = params.config.num_classes;
            let logits = Tensor::new(
                vec![rows.len(), c],
                rows.into_iter().flat_map(|(t, _)| t.into_data()).collect(),
            )?;
            Ok(Evaluation {
                logits,
                patch_bits: sums
                    .into_iter()
                    .map(|(layer, s)| LayerPatchBits { layer, average_bits: s / n })
                    .collect(),
            })
        }
    }
}

/// Accuracy and fidelity against the float model.
pub fn compare(float_logits: &Tensor<f32>, quant_logits: &Tensor<f32>, labels: &[usize]) -> (f64, f64, f64, f64) {
    let mse = float_logits
        .data()
        .iter()
        .zip(quant_logits.data())
        .map(|(a, b)| {
            let d = f64::from(*a) - f64::from(*b);
            d * d
        })
        .sum::<f64>()
        / float_logits.len().max(1) as f64;
    let fa = argmax_rows(float_logits);
    let qa = argmax_rows(quant_logits);
    let agree = fa.iter().zip(&qa).filter(|(a, b)| a == b).count() as f64 / fa.len().max(1) as f64;
    (accuracy(quant_logits, labels), accuracy(float_logits, labels), mse, agree)
}

/// Everything one allocation decision produces.
pub struct Allocation {
    pub scores: Vec<ImportanceScore>,
    pub frontier: Vec<ParetoPoint>,
    pub budget_bits: u64,
    pub selected: ParetoPoint,
}

pub fn allocate(cal: &Calibration, cfg: &PipelineConfig, scores: Vec<ImportanceScore>) -> Result<Allocation> {
    let table = cal.perturbation_table(cfg, &scores)?;
    let frontier = pareto_frontier(&table, &cfg.allocation.frontier())?;
    let budget_bits = cfg.allocation.budget.resolve(&cal.params.config);
    let selected = if cfg.allocation.disabled {
        let config = BitConfig::uniform(&cal.params.config, PASSTHROUGH_BITS);
        ParetoPoint {
            size_bits: crate::allocator::model_size(&cal.params.config, &config)?,
            config,
            omega: 0.0,
        }
    } else {
        select_config(&frontier, budget_bits)?
    };
    Ok(Allocation {
        scores,
        frontier,
        budget_bits,
        selected,
    })
}

/// Patch assignments of the selected configuration (empty when AAS is off).
pub fn aas_stage(cal: &Calibration, cfg: &PipelineConfig, bits: &BitConfig) -> Result<Vec<PatchBitAssignment>> {
    if !cfg.aas.enabled {
        return Ok(Vec::new());
    }
    let base = cal.context(bits, cfg.aas.quantize_attention)?;
    cal.patch_bits(bits, &base, &cfg.aas)
}

/// Evaluates `point` on `test`.
pub fn eval_stage(
    cal: &Calibration,
    cfg: &PipelineConfig,
    point: &ParetoPoint,
    assignments: &[PatchBitAssignment],
    test: &Dataset,
    converged: bool,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let base = cal.context(&point.config, cfg.aas.quantize_attention)?;
    let mode = match (cfg.aas.enabled, cfg.aas.per_sample) {
        (false, _) => PatchMode::None,
        (true, false) => PatchMode::Frozen(assignments),
        (true, true) => PatchMode::PerSample(&cfg.aas, &point.config),
    };
    let eval = evaluate_logits(cal, &base, test, mode)?;
    let float_logits = predict(cal.params, &test.samples, None)?;
    let (acc, float_acc, mse, agree) = compare(&float_logits, &eval.logits, &test.labels);
    Ok(EvalReport {
        num_samples: test.len(),
        accuracy: acc,
        float_accuracy: float_acc,
        logit_mse: mse,
        agreement: agree,
        size_bits: crate::allocator::model_size(&cal.params.config, &point.config)?,
        omega: point.omega,
        patch_bits: eval.patch_bits,
        checkpoint_converged: converged,
    })
}
