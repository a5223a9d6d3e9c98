//! Pipeline configuration: one TOML file plus `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aas::ScoreMode;
use crate::allocator::{FrontierConfig, DEFAULT_CANDIDATE_BITS};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::quant::{is_valid_bits, ACTIVATION_PERCENTILE, MAX_BITS, MIN_BITS, WEIGHT_PERCENTILE};
use crate::sensitivity::Aggregation;
use crate::vit::{TrainConfig, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Training samples drawn (without replacement) for calibration.
    pub size: usize,
    pub seed: u64,
    pub weight_percentile: f64,
    pub activation_percentile: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            size: 32,
            seed: 11,
            weight_percentile: WEIGHT_PERCENTILE,
            activation_percentile: ACTIVATION_PERCENTILE,
        }
    }
}

/// Size constraint of the allocation, either absolute or as the size of a
/// uniform configuration. In TOML: `budget = { bits = 9000 }` or
/// `budget = { uniform = 6 }`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Budget {
    Bits(u64),
    Uniform(u8),
}

impl Budget {
    pub fn resolve(self, model: &ViTConfig) -> u64 {
        match self {
            Budget::Bits(b) => b,
            Budget::Uniform(k) => crate::allocator::total_weights(model) * u64::from(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocationConfig {
    pub candidate_bits: Vec<u8>,
    pub alpha: usize,
    /// Size intervals for pruning; 0 disables pruning.
    pub beta: usize,
    pub retain: usize,
    pub budget: Budget,
    pub aggregation: Aggregation,
    /// Adds activation quantisation error to the perturbation.
    pub activation_omega: bool,
    /// Skip all quantisation (32-bit pass-through everywhere).
    pub disabled: bool,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        let f = FrontierConfig::default();
        Self {
            candidate_bits: DEFAULT_CANDIDATE_BITS.to_vec(),
            alpha: f.alpha,
            beta: f.beta.unwrap_or(0),
            retain: f.retain,
            budget: Budget::Uniform(6),
            aggregation: Aggregation::Sum,
            activation_omega: false,
            disabled: false,
        }
    }
}

impl AllocationConfig {
    pub fn frontier(&self) -> FrontierConfig {
        FrontierConfig {
            alpha: self.alpha,
            beta: (self.beta > 0).then_some(self.beta),
            retain: self.retain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AasConfig {
    pub enabled: bool,
    pub mode: ScoreMode,
    /// Re-score patches on every evaluated sample instead of freezing the
    /// calibration assignment.
    pub per_sample: bool,
    /// Also quantise the softmax output.
    pub quantize_attention: bool,
}

impl Default for AasConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: ScoreMode::Received,
            per_sample: false,
            quantize_attention: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seed of the weight initialisation.
    pub init_seed: u64,
    pub model: ViTConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub allocation: AllocationConfig,
    pub aas: AasConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            init_seed: 3,
            model: ViTConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            calibration: CalibrationConfig::default(),
            allocation: AllocationConfig::default(),
            aas: AasConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (if any), applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate(&self.model)?;
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(
                "train needs batch_size >= 1, lr >= 0 and momentum in [0,1)".into(),
            ));
        }
        let c = &self.calibration;
        if c.size == 0 {
            return Err(Error::Config("calibration.size must be at least 1".into()));
        }
        for (name, p) in [("weight", c.weight_percentile), ("activation", c.activation_percentile)] {
            if !(p > 50.0 && p <= 100.0) {
                return Err(Error::Config(format!(
                    "calibration.{name}_percentile must lie in (50,100], got {p}"
                )));
            }
        }
        let a = &self.allocation;
        let bits = &a.candidate_bits;
        if bits.is_empty() || bits.iter().any(|&b| !is_valid_bits(b)) || bits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "allocation.candidate_bits must be strictly increasing values in [{MIN_BITS},{MAX_BITS}], got {bits:?}"
            )));
        }
        if a.alpha == 0 || a.retain == 0 {
            return Err(Error::Config("allocation.alpha and allocation.retain must be at least 1".into()));
        }
        if let Budget::Uniform(k) = a.budget {
            if !is_valid_bits(k) {
                return Err(Error::Config(format!("allocation.budget uniform bits {k} outside [{MIN_BITS},{MAX_BITS}]")));
            }
        }
        Ok(())
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
