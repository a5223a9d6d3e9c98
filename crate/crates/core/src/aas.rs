//! Per-patch bit reallocation from attention statistics.
//!
//! A patch's importance is the attention it receives, averaged over heads
//! and query positions. Patches scoring above `mean + std` get two more
//! bits than the layer's base width, those below `mean - std` two fewer,
//! clamped to `[2, 8]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{fake_quant_rows, QuantParams, MAX_BITS, MIN_BITS, PASSTHROUGH_BITS};
use crate::tensor::{Real, Tensor};
use crate::vit::ForwardTrace;

/// Which attention marginal scores a patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Column means: attention received by the patch.
    #[default]
    Received,
    /// Row means, as the formula is literally printed. Every row of a
    /// softmax sums to one, so all scores come out equal to `1/N`.
    LiteralRowSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchScoreVector {
    pub layer: usize,
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl PatchScoreVector {
    pub fn from_scores(layer: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::Input(format!(
                "patch scoring needs at least 2 patches, got {}",
                scores.len()
            )));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Ok(Self {
            layer,
            scores,
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchBitAssignment {
    pub layer: usize,
    pub base_bits: u8,
    pub bits: Vec<u8>,
}

impl PatchBitAssignment {
    pub fn average_bits(&self) -> f64 {
        self.bits.iter().map(|&b| f64::from(b)).sum::<f64>() / self.bits.len().max(1) as f64
    }
}

/// Importance of every patch from one layer's `[N×N]` per-head maps.
pub fn patch_importance<T: Real>(
    layer: usize,
    attention: &[Tensor<T>],
    mode: ScoreMode,
) -> Result<PatchScoreVector> {
    let first = attention
        .first()
        .ok_or_else(|| Error::Input("no attention heads".into()))?;
    let n = first.cols();
    if n < 2 {
        return Err(Error::Input(format!("patch scoring needs at least 2 patches, got {n}")));
    }
    if attention.iter().any(|a| a.shape() != [n, n]) {
        return Err(Error::Dimension(format!("attention maps must all be [{n}x{n}]")));
    }
    let heads = attention.len() as f64;
    let mut scores = vec![0.0; n];
    for a in attention {
        for i in 0..n {
            for (j, &v) in a.row(i).iter().enumerate() {
                let target = match mode {
                    ScoreMode::Received => j,
                    ScoreMode::LiteralRowSum => i,
                };
                scores[target] += v.to_f64_lossy();
            }
        }
    }
    // column sums of a row-stochastic map total n, so the grand sum is 1
    let norm = heads * n as f64;
    let psv = PatchScoreVector::from_scores(layer, scores.into_iter().map(|s| s / norm).collect())?;
    // A spread within the rounding noise of the input precision is not a
    // signal; report such scores as exactly equal.
    let noise = 4.0 * n as f64 * T::epsilon().to_f64_lossy() * psv.mean.abs();
    if psv.std <= noise {
        return Ok(PatchScoreVector {
            layer,
            scores: vec![psv.mean; n],
            mean: psv.mean,
            std: 0.0,
        });
    }
    Ok(psv)
}

/// `(mean + std, mean - std)`.
pub fn thresholds(psv: &PatchScoreVector) -> (f64, f64) {
    (psv.mean + psv.std, psv.mean - psv.std)
}

pub fn assign_patch_bits(psv: &PatchScoreVector, base_bits: u8) -> Result<PatchBitAssignment> {
    if !(MIN_BITS..=MAX_BITS).contains(&base_bits) {
        return Err(Error::Config(format!(
            "base bits {base_bits} outside [{MIN_BITS},{MAX_BITS}]"
        )));
    }
    let (hi, lo) = thresholds(psv);
    let bits = psv
        .scores
        .iter()
        .map(|&s| {
            if s > hi {
                (base_bits + 2).min(MAX_BITS)
            } else if s < lo {
                base_bits.saturating_sub(2).max(MIN_BITS)
            } else {
                base_bits
            }
        })
        .collect();
    Ok(PatchBitAssignment {
        layer: psv.layer,
        base_bits,
        bits,
    })
}

/// Looks up the quantiser of every patch row. A bit-width of
/// [`PASSTHROUGH_BITS`] maps to the identity.
pub fn resolve_row_params(
    assignment: &PatchBitAssignment,
    per_bit: &BTreeMap<u8, QuantParams>,
) -> Result<Vec<QuantParams>> {
    assignment
        .bits
        .iter()
        .map(|&b| {
            if b == PASSTHROUGH_BITS {
                return Ok(QuantParams::passthrough());
            }
            per_bit.get(&b).copied().ok_or_else(|| {
                Error::Config(format!(
                    "layer {}: no calibrated {b}-bit patch quantiser",
                    assignment.layer
                ))
            })
        })
        .collect()
}

/// Fake-quantises row `i` of `x` at the bit-width assigned to patch `i`.
pub fn apply_patch_quant<T: Real>(
    x: &Tensor<T>,
    assignment: &PatchBitAssignment,
    per_bit: &BTreeMap<u8, QuantParams>,
) -> Result<Tensor<T>> {
    if assignment.bits.len() != x.rows() {
        return Err(Error::Dimension(format!(
            "assignment covers {} patches, input has {}",
            assignment.bits.len(),
            x.rows()
        )));
    }
    fake_quant_rows(x, &resolve_row_params(assignment, per_bit)?)
}

/// Per-head attention of `layer` averaged over a batch of traces, returned in
/// the traces' precision so scoring sees that precision's rounding noise.
/// The mean of row-stochastic maps is row-stochastic.
pub fn mean_attention<T: Real>(traces: &[ForwardTrace<T>], layer: usize) -> Result<Vec<Tensor<T>>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Input("no traces to average".into()))?;
    let maps = &first
        .layers
        .get(layer)
        .ok_or_else(|| Error::Dimension(format!("trace has no layer {layer}")))?
        .attention;
    let mut acc: Vec<Tensor<f64>> = maps.iter().map(|a| Tensor::zeros(a.shape())).collect();
    for t in traces {
        for (h, a) in t.layers[layer].attention.iter().enumerate() {
            acc[h] = crate::tensor::add(&acc[h], &a.cast())?;
        }
    }
    let n = traces.len() as f64;
    Ok(acc.into_iter().map(|a| a.map(|v| v / n).cast()).collect())
}
