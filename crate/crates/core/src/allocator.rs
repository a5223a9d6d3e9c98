//! Mixed-precision bit allocation on a size/perturbation Pareto frontier.
//!
//! The perturbation of a configuration is
//! `Omega = sum_i score_i * ||Q_{b_i}(W_i) - W_i||^2` and its cost is the
//! weight storage `sum_i n_i * b_i` in bits. Both are additive over
//! components, so the search extends partial configurations group by group
//! and prunes each size interval down to its lowest-perturbation members.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{calibrate_percentile, is_valid_bits, quant_error, QuantParams, WEIGHT_PERCENTILE};
use crate::sensitivity::ImportanceScore;
use crate::tensor::Real;
use crate::vit::{param_specs, weight_counts, ComponentId, ViTConfig, ViTParams};

pub const DEFAULT_CANDIDATE_BITS: [u8; 7] = [2, 3, 4, 5, 6, 7, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitEntry {
    pub component: ComponentId,
    pub weight_bits: u8,
    pub activation_bits: u8,
}

/// One bit-width pair per quantisable component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BitConfig {
    pub entries: Vec<BitEntry>,
}

impl BitConfig {
    /// Every component of the model at `bits` (weights and activations).
    pub fn uniform(config: &ViTConfig, bits: u8) -> Self {
        Self {
            entries: ComponentId::all(config)
                .into_iter()
                .map(|component| BitEntry {
                    component,
                    weight_bits: bits,
                    activation_bits: bits,
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ComponentId) -> Option<&BitEntry> {
        self.entries.iter().find(|e| e.component == id)
    }

    pub fn weight_bits(&self, id: ComponentId) -> Option<u8> {
        self.get(id).map(|e| e.weight_bits)
    }

    pub fn activation_bits(&self, id: ComponentId) -> Option<u8> {
        self.get(id).map(|e| e.activation_bits)
    }

    /// Checks that every component of `config` appears exactly once with
    /// bits from `candidates` (the pass-through sentinel is always allowed).
    pub fn validate(&self, config: &ViTConfig, candidates: &[u8]) -> Result<()> {
        let all = ComponentId::all(config);
        for id in &all {
            let n = self.entries.iter().filter(|e| e.component == *id).count();
            if n != 1 {
                return Err(Error::Config(format!("bit config lists {id} {n} times")));
            }
        }
        for e in &self.entries {
            if !all.contains(&e.component) {
                return Err(Error::Config(format!("unknown component {}", e.component)));
            }
            for b in [e.weight_bits, e.activation_bits] {
                let ok = b == crate::quant::PASSTHROUGH_BITS || candidates.contains(&b);
                if !ok || !is_valid_bits(b) {
                    return Err(Error::Config(format!(
                        "{}: {b} bits not in candidate set {candidates:?}",
                        e.component
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Calibrated symmetric weight quantisers: parameter tensor index (census
/// order) -> bit-width -> params. Only quantisable tensors appear.
pub type WeightQuantTable = BTreeMap<usize, BTreeMap<u8, QuantParams>>;

pub fn weight_quant_table<T: Real>(params: &ViTParams<T>, bits: &[u8]) -> Result<WeightQuantTable> {
    weight_quant_table_pct(params, bits, WEIGHT_PERCENTILE)
}

/// As [`weight_quant_table`] with an explicit clip percentile.
pub fn weight_quant_table_pct<T: Real>(
    params: &ViTParams<T>,
    bits: &[u8],
    pct: f64,
) -> Result<WeightQuantTable> {
    let mut table = WeightQuantTable::new();
    for (k, (spec, t)) in params.specs().iter().zip(params.tensors()).enumerate() {
        if !spec.quantizable {
            continue;
        }
        let per_bit = bits
            .iter()
            .map(|&b| {
                calibrate_percentile(std::slice::from_ref(t), b, true, pct)
                    .map(|qp| (b, qp))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        table.insert(k, per_bit);
    }
    Ok(table)
}

/// `||Q_b(W_i) - W_i||^2` summed over the quantisable tensors of `component`.
pub fn component_weight_error<T: Real>(
    params: &ViTParams<T>,
    component: ComponentId,
    bits: u8,
    table: &WeightQuantTable,
) -> Result<f64> {
    if bits == crate::quant::PASSTHROUGH_BITS {
        return Ok(0.0);
    }
    let mut err = 0.0;
    for (k, (spec, t)) in params.specs().iter().zip(params.tensors()).enumerate() {
        if spec.component != component || !spec.quantizable {
            continue;
        }
        let qp = table.get(&k).and_then(|m| m.get(&bits)).ok_or_else(|| {
            Error::Config(format!("no calibrated {bits}-bit quantiser for {}", spec.name))
        })?;
        err += quant_error(t, qp);
    }
    Ok(err)
}

fn score_of(scores: &[ImportanceScore], id: ComponentId) -> Result<f64> {
    scores
        .iter()
        .find(|s| s.component == id)
        .map(|s| s.score)
        .ok_or_else(|| Error::Config(format!("no sensitivity score for {id}")))
}

/// Total perturbation of `config`, accumulated over components in the
/// order they appear in the config.
pub fn perturbation<T: Real>(
    params: &ViTParams<T>,
    config: &BitConfig,
    table: &WeightQuantTable,
    scores: &[ImportanceScore],
) -> Result<f64> {
    let mut omega = 0.0;
    for e in &config.entries {
        let s = score_of(scores, e.component)?;
        omega += s * component_weight_error(params, e.component, e.weight_bits, table)?;
    }
    Ok(omega)
}

/// Weight storage in bits: `sum_i n_i * b_i`.
pub fn model_size(model: &ViTConfig, config: &BitConfig) -> Result<u64> {
    weight_counts(model)
        .into_iter()
        .map(|(id, n)| {
            config
                .weight_bits(id)
                .map(|b| n * u64::from(b))
                .ok_or_else(|| Error::Config(format!("bit config has no entry for {id}")))
        })
        .sum()
}

/// Per-component cost and perturbation for every candidate bit-width.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationTable {
    pub components: Vec<ComponentId>,
    /// Quantisable weight count of each component.
    pub counts: Vec<u64>,
    pub candidate_bits: Vec<u8>,
    /// `omega[i][j]`: perturbation of component `i` at `candidate_bits[j]`.
    pub omega: Vec<Vec<f64>>,
}

impl PerturbationTable {
    /// Builds the table from explicit per-component numbers.
    pub fn new(
        components: Vec<ComponentId>,
        counts: Vec<u64>,
        candidate_bits: Vec<u8>,
        omega: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if candidate_bits.is_empty() {
            return Err(Error::Input("candidate bit set is empty".into()));
        }
        if components.len() != counts.len()
            || components.len() != omega.len()
            || omega.iter().any(|row| row.len() != candidate_bits.len())
        {
            return Err(Error::Dimension("perturbation table is ragged".into()));
        }
        if omega.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Input("perturbations must be finite and non-negative".into()));
        }
        Ok(Self {
            components,
            counts,
            candidate_bits,
            omega,
        })
    }

    /// Weight-only table for a model. `activation_terms`, when given, adds
    /// `score_i * activation_terms[i][j]` to each entry.
    pub fn build<T: Real>(
        params: &ViTParams<T>,
        scores: &[ImportanceScore],
        table: &WeightQuantTable,
        candidate_bits: &[u8],
        activation_terms: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        let counts = weight_counts(&params.config);
        let mut omega = Vec::with_capacity(counts.len());
        for (i, (id, _)) in counts.iter().enumerate() {
            let s = score_of(scores, *id)?;
            let mut row = Vec::with_capacity(candidate_bits.len());
            for (j, &b) in candidate_bits.iter().enumerate() {
                let mut v = s * component_weight_error(params, *id, b, table)?;
                if let Some(act) = activation_terms {
                    v += s * act[i][j];
                }
                row.push(v);
            }
            omega.push(row);
        }
        Self::new(
            counts.iter().map(|(id, _)| *id).collect(),
            counts.iter().map(|(_, n)| *n).collect(),
            candidate_bits.to_vec(),
            omega,
        )
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Size and perturbation of a full assignment given as candidate indices.
    pub fn evaluate(&self, choice: &[usize]) -> (u64, f64) {
        let mut size = 0;
        let mut omega = 0.0;
        for (i, &j) in choice.iter().enumerate() {
            size += self.counts[i] * u64::from(self.candidate_bits[j]);
            omega += self.omega[i][j];
        }
        (size, omega)
    }

    pub fn bits_of(&self, choice: &[usize]) -> Vec<u8> {
        choice.iter().map(|&j| self.candidate_bits[j]).collect()
    }

    /// Converts a choice vector to a [`BitConfig`] with activation bits
    /// equal to weight bits.
    pub fn to_bit_config(&self, choice: &[usize]) -> BitConfig {
        BitConfig {
            entries: self
                .components
                .iter()
                .zip(choice)
                .map(|(&component, &j)| BitEntry {
                    component,
                    weight_bits: self.candidate_bits[j],
                    activation_bits: self.candidate_bits[j],
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontierConfig {
    /// Components per group.
    pub alpha: usize,
    /// Number of size intervals; `None` disables pruning entirely.
    pub beta: Option<usize>,
    /// Survivors kept per interval between groups.
    pub retain: usize,
}

impl Default for FrontierConfig {
    fn default() -> Self {
        Self {
            alpha: 2,
            beta: Some(32),
            retain: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub config: BitConfig,
    pub size_bits: u64,
    pub omega: f64,
}

#[derive(Clone, Debug)]
struct Partial {
    choice: Vec<usize>,
    size: u64,
    omega: f64,
}

/// Ascending omega, then size, then bit vector.
fn by_omega(a: &Partial, b: &Partial) -> std::cmp::Ordering {
    a.omega
        .total_cmp(&b.omega)
        .then(a.size.cmp(&b.size))
        .then_with(|| a.choice.cmp(&b.choice))
}

/// Keeps the `retain` lowest-perturbation members of each of `beta`
/// equal-width size intervals.
fn prune(mut items: Vec<Partial>, beta: usize, retain: usize) -> Vec<Partial> {
    let Some(min) = items.iter().map(|p| p.size).min() else {
        return items;
    };
    let max = items.iter().map(|p| p.size).max().unwrap_or(min);
    let span = u128::from(max - min);
    let interval = |size: u64| -> usize {
        if span == 0 {
            0
        } else {
            let idx = u128::from(size - min) * beta as u128 / span;
            (idx as usize).min(beta - 1)
        }
    };
    items.sort_by(by_omega);
    let mut kept_per = vec![0usize; beta];
    items.retain(|p| {
        let slot = &mut kept_per[interval(p.size)];
        *slot += 1;
        *slot <= retain
    });
    items
}

/// Non-dominated subset, sorted by size. A point is dominated when another
/// has size <= and omega <= with at least one strict.
fn dominance_sweep(mut items: Vec<Partial>) -> Vec<Partial> {
    items.sort_by(|a, b| {
        a.size
            .cmp(&b.size)
            .then(a.omega.total_cmp(&b.omega))
            .then_with(|| a.choice.cmp(&b.choice))
    });
    let mut out: Vec<Partial> = Vec::new();
    for p in items {
        match out.last() {
            None => out.push(p),
            Some(last) => {
                let best = out.iter().map(|q| q.omega).fold(f64::INFINITY, f64::min);
                let tie = p.size == last.size && p.omega == last.omega;
                if p.omega < best || tie {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Groupwise Pareto search over the table.
pub fn pareto_frontier(table: &PerturbationTable, cfg: &FrontierConfig) -> Result<Vec<ParetoPoint>> {
    if table.candidate_bits.is_empty() {
        return Err(Error::Input("candidate bit set is empty".into()));
    }
    if table.is_empty() {
        return Err(Error::Input("no components to allocate".into()));
    }
    if cfg.alpha == 0 || table.len() % cfg.alpha != 0 {
        return Err(Error::Config(format!(
            "alpha = {} does not divide {} components",
            cfg.alpha,
            table.len()
        )));
    }
    if cfg.beta == Some(0) || cfg.retain == 0 {
        return Err(Error::Config("beta and retain must be at least 1".into()));
    }
    let nbits = table.candidate_bits.len();
    let groups = table.len() / cfg.alpha;
    let mut partials = vec![Partial {
        choice: Vec::new(),
        size: 0,
        omega: 0.0,
    }];
    for g in 0..groups {
        let first = g * cfg.alpha;
        let combos = nbits.pow(cfg.alpha as u32);
        let mut expanded = Vec::with_capacity(partials.len() * combos);
        for p in &partials {
            for code in 0..combos {
                let mut choice = p.choice.clone();
                let mut size = p.size;
                let mut omega = p.omega;
                let mut rest = code;
                for i in first..first + cfg.alpha {
                    let j = rest % nbits;
                    rest /= nbits;
                    choice.push(j);
                    size += table.counts[i] * u64::from(table.candidate_bits[j]);
                    omega += table.omega[i][j];
                }
                expanded.push(Partial { choice, size, omega });
            }
        }
        let last = g + 1 == groups;
        partials = match (cfg.beta, last) {
            (None, _) => expanded,
            (Some(beta), false) => prune(expanded, beta, cfg.retain),
            (Some(beta), true) => prune(expanded, beta, 1),
        };
    }
    Ok(dominance_sweep(partials)
        .into_iter()
        .map(|p| ParetoPoint {
            config: table.to_bit_config(&p.choice),
            size_bits: p.size,
            omega: p.omega,
        })
        .collect())
}

/// Lowest-perturbation frontier point whose size fits the budget
/// (inclusive).
pub fn select_config(frontier: &[ParetoPoint], budget_bits: u64) -> Result<ParetoPoint> {
    if frontier.is_empty() {
        return Err(Error::Input("frontier is empty".into()));
    }
    frontier
        .iter()
        .filter(|p| p.size_bits <= budget_bits)
        .min_by(|a, b| {
            a.omega
                .total_cmp(&b.omega)
                .then(a.size_bits.cmp(&b.size_bits))
        })
        .cloned()
        .ok_or_else(|| Error::InfeasibleBudget {
            budget_bits,
            min_size_bits: frontier.iter().map(|p| p.size_bits).min().unwrap_or(0),
        })
}

/// Total quantisable weight count of the model (sanity helper).
pub fn total_weights(model: &ViTConfig) -> u64 {
    param_specs(model)
        .iter()
        .filter(|s| s.quantizable)
        .map(|s| s.numel() as u64)
        .sum()
}
