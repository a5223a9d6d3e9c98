//! Synthetic patch-sequence classification data.
//!
//! Each class owns a Gaussian prototype over a fixed subset of
//! "informative" patch positions; the remaining positions carry only noise.
//! A sample is `separation * prototype[class] + noise_std * N(0, 1)`.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub separation: f64,
    pub noise_std: f64,
    /// Patch positions that carry class signal.
    pub informative_patches: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_samples: 256,
            test_samples: 256,
            separation: 0.8,
            noise_std: 1.0,
            informative_patches: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, model: &ViTConfig) -> Result<()> {
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("data sample counts must be at least 1".into()));
        }
        if self.informative_patches == 0 || self.informative_patches > model.patches {
            return Err(Error::Config(format!(
                "data.informative_patches must lie in [1, {}]",
                model.patches
            )));
        }
        if !(self.separation >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Config("data.separation and data.noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Labelled `[N×P]` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub patches: usize,
    pub patch_dim: usize,
    pub num_classes: usize,
    pub samples: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            samples: self.samples[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Inputs as one `[B×N×P]` tensor.
    pub fn inputs(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.len(), self.patches, self.patch_dim],
            self.samples.iter().flat_map(|s| s.data().iter().copied()).collect(),
        )
        .expect("samples share one shape")
    }

    pub fn from_inputs(
        inputs: &Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Dataset> {
        let [b, n, p] = *inputs.shape() else {
            return Err(Error::Dimension(format!(
                "dataset inputs must be rank 3, got {:?}",
                inputs.shape()
            )));
        };
        if labels.len() != b {
            return Err(Error::Input(format!("{b} samples but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!("label {bad} out of range")));
        }
        Ok(Dataset {
            patches: n,
            patch_dim: p,
            num_classes,
            samples: inputs
                .data()
                .chunks(n * p)
                .map(|c| Tensor::new(vec![n, p], c.to_vec()).expect("chunk"))
                .collect(),
            labels,
        })
    }
}

/// Train and test splits drawn from the same class prototypes.
pub fn generate(model: &ViTConfig, cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    model.validate()?;
    cfg.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, p, classes) = (model.patches, model.patch_dim, model.num_classes);
    let mut informative = sample_indices(&mut rng, n, cfg.informative_patches).into_vec();
    informative.sort_unstable();
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut proto = vec![0.0; n * p];
            for &pos in &informative {
                for v in &mut proto[pos * p..(pos + 1) * p] {
                    *v = rng.sample(StandardNormal);
                }
            }
            proto
        })
        .collect();

    let mut draw = |count: usize| {
        let mut samples = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let y = i % classes;
            let data = prototypes[y]
                .iter()
                .map(|&m| {
                    let e: f64 = rng.sample(StandardNormal);
                    (cfg.separation * m + cfg.noise_std * e) as f32
                })
                .collect();
            samples.push(Tensor::new(vec![n, p], data).expect("sample shape"));
            labels.push(y);
        }
        Dataset {
            patches: n,
            patch_dim: p,
            num_classes: classes,
            samples,
            labels,
        }
    };
    let train = draw(cfg.train_samples);
    let test = draw(cfg.test_samples);
    Ok((train, test))
}
