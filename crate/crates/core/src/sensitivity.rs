//! Per-component quantisation sensitivity.
//!
//! The score of a parameter `w_i` is `w_i^2 / (2N) * sum_n g_{n,i}^2`: the
//! loss increase from removing it, with the Hessian diagonal replaced by
//! the empirical Fisher of `N` calibration samples. Component scores add
//! the parameter scores of every tensor owned by the component.
//!
//! [`hessian_diag_oracle`] computes the same quantity with a Hutchinson
//! estimate of the true Hessian diagonal, for comparison.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vit::{mean_loss_and_gradient, per_sample_gradients, ComponentId, ComponentKind, ViTParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub component: ComponentId,
    pub score: f64,
    pub num_samples: usize,
}

/// How parameter scores combine into a component score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
    Max,
}

/// Score of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorScore {
    pub name: String,
    pub component: ComponentId,
    /// Sum of the per-parameter scores.
    pub score: f64,
    /// Largest single-parameter score.
    pub max: f64,
    pub numel: usize,
}

/// Per-tensor scores from precomputed per-sample gradients.
pub fn tensor_scores_from_gradients<T: Real>(
    params: &ViTParams<T>,
    per_sample: &[ViTParams<T>],
) -> Result<Vec<TensorScore>> {
    if per_sample.is_empty() {
        return Err(Error::Input("sensitivity needs at least one calibration sample".into()));
    }
    let n = per_sample.len() as f64;
    let specs = params.specs();
    let weights = params.tensors();
    let mut out = Vec::with_capacity(specs.len());
    for (k, (spec, w)) in specs.into_iter().zip(weights).enumerate() {
        let mut fisher = vec![0.0f64; w.len()];
        // fixed summation order: sample by sample
        for g in per_sample {
            for (acc, v) in fisher.iter_mut().zip(g.tensors()[k].data()) {
                let v = v.to_f64_lossy();
                *acc += v * v;
            }
        }
        let mut total = 0.0;
        let mut max = 0.0f64;
        for (wv, f) in w.data().iter().zip(&fisher) {
            let wv = wv.to_f64_lossy();
            let s = wv * wv * f / (2.0 * n);
            total += s;
            max = max.max(s);
        }
        out.push(TensorScore {
            name: spec.name,
            component: spec.component,
            score: total,
            max,
            numel: w.len(),
        });
    }
    Ok(out)
}

/// Folds per-tensor scores into one score per component, in
/// [`ComponentId::all`] order.
pub fn aggregate(
    params_config: &crate::vit::ViTConfig,
    tensors: &[TensorScore],
    how: Aggregation,
    num_samples: usize,
) -> Vec<ImportanceScore> {
    ComponentId::all(params_config)
        .into_iter()
        .map(|component| {
            let owned = tensors.iter().filter(|t| t.component == component);
            let score = match how {
                Aggregation::Sum => owned.map(|t| t.score).sum(),
                Aggregation::Mean => {
                    let (s, n) = owned.fold((0.0, 0usize), |(s, n), t| (s + t.score, n + t.numel));
                    if n == 0 {
                        0.0
                    } else {
                        s / n as f64
                    }
                }
                Aggregation::Max => owned.map(|t| t.max).fold(0.0, f64::max),
            };
            ImportanceScore {
                component,
                score,
                num_samples,
            }
        })
        .collect()
}

pub fn gsm_from_gradients<T: Real>(
    params: &ViTParams<T>,
    per_sample: &[ViTParams<T>],
    how: Aggregation,
) -> Result<Vec<ImportanceScore>> {
    let tensors = tensor_scores_from_gradients(params, per_sample)?;
    Ok(aggregate(&params.config, &tensors, how, per_sample.len()))
}

/// Fisher-based component scores on a labelled calibration batch.
pub fn gsm_scores<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    labels: &[usize],
) -> Result<Vec<ImportanceScore>> {
    gsm_scores_with(params, samples, labels, Aggregation::Sum)
}

pub fn gsm_scores_with<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    labels: &[usize],
    how: Aggregation,
) -> Result<Vec<ImportanceScore>> {
    if samples.is_empty() {
        return Err(Error::Input("sensitivity needs at least one calibration sample".into()));
    }
    let grads = per_sample_gradients(params, samples, labels)?;
    gsm_from_gradients(params, &grads, how)
}

/// Sorts by descending score; ties fall back to (layer, kind).
pub fn rank_components(scores: &[ImportanceScore]) -> Vec<ImportanceScore> {
    let mut out = scores.to_vec();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.component.cmp(&b.component))
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HessianConfig {
    pub probes: usize,
    /// Finite-difference step of the Hessian-vector products.
    pub step: f64,
    pub seed: u64,
}

impl Default for HessianConfig {
    fn default() -> Self {
        Self {
            probes: 64,
            step: 1e-3,
            seed: 0,
        }
    }
}

/// Hutchinson estimate of `diag(H)` with Rademacher probes; `H v` comes
/// from central differences of `grad`.
pub fn hutchinson_diagonal(
    w: &[f64],
    grad: impl Fn(&[f64]) -> Result<Vec<f64>>,
    probes: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if probes == 0 {
        return Err(Error::Config("hessian oracle needs at least one probe".into()));
    }
    let mut diag = vec![0.0; w.len()];
    let mut plus = vec![0.0; w.len()];
    let mut minus = vec![0.0; w.len()];
    for _ in 0..probes {
        let v: Vec<f64> = (0..w.len())
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        for i in 0..w.len() {
            plus[i] = w[i] + step * v[i];
            minus[i] = w[i] - step * v[i];
        }
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        for i in 0..w.len() {
            let hv = (gp[i] - gm[i]) / (2.0 * step);
            diag[i] += v[i] * hv;
        }
    }
    let p = probes as f64;
    Ok(diag.into_iter().map(|d| d / p).collect())
}

#[derive(Clone, Debug)]
pub struct HessianReport {
    pub scores: Vec<ImportanceScore>,
    /// Estimated Hessian diagonal, laid out like the parameters.
    pub diagonal: ViTParams<f64>,
    pub elapsed: Duration,
}

fn flatten(p: &ViTParams<f64>) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(template: &ViTParams<f64>, flat: &[f64]) -> Result<ViTParams<f64>> {
    let mut offset = 0;
    let tensors = template
        .tensors()
        .iter()
        .map(|t| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec());
            offset += n;
            out
        })
        .collect::<Result<Vec<_>>>()?;
    ViTParams::from_tensors(&template.config, tensors)
}

/// Component scores `sum_k H_kk w_k^2 / 2` of the mean cross-entropy, with
/// `diag(H)` estimated in 64-bit arithmetic.
pub fn hessian_diag_oracle<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    labels: &[usize],
    cfg: &HessianConfig,
) -> Result<HessianReport> {
    let start = Instant::now();
    if samples.is_empty() {
        return Err(Error::Input("hessian oracle needs at least one sample".into()));
    }
    let p64 = params.cast::<f64>();
    let x64: Vec<Tensor<f64>> = samples.iter().map(Tensor::cast).collect();
    let w = flatten(&p64);
    let grad = |flat: &[f64]| -> Result<Vec<f64>> {
        let q = unflatten(&p64, flat)?;
        let (_, g) = mean_loss_and_gradient(&q, &x64, labels)?;
        Ok(flatten(&g))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let diag = hutchinson_diagonal(&w, grad, cfg.probes, cfg.step, &mut rng)?;
    let diagonal = unflatten(&p64, &diag)?;

    let specs = p64.specs();
    let scores = ComponentId::all(&p64.config)
        .into_iter()
        .map(|component| {
            let mut score = 0.0;
            for ((spec, wt), ht) in specs.iter().zip(p64.tensors()).zip(diagonal.tensors()) {
                if spec.component == component {
                    score += wt
                        .data()
                        .iter()
                        .zip(ht.data())
                        .map(|(wv, hv)| 0.5 * hv * wv * wv)
                        .sum::<f64>();
                }
            }
            if !score.is_finite() {
                return Err(Error::Oracle {
                    component: component.to_string(),
                });
            }
            Ok(ImportanceScore {
                component,
                score,
                num_samples: samples.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HessianReport {
        scores,
        diagonal,
        elapsed: start.elapsed(),
    })
}

/// Row of the sensitivity JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub component: String,
    pub kind: ComponentKind,
    pub layer: usize,
    pub score: f64,
    pub num_samples: usize,
}

impl From<&ImportanceScore> for ScoreRecord {
    fn from(s: &ImportanceScore) -> Self {
        Self {
            component: s.component.to_string(),
            kind: s.component.kind,
            layer: s.component.layer,
            score: s.score,
            num_samples: s.num_samples,
        }
    }
}

impl From<&ScoreRecord> for ImportanceScore {
    fn from(r: &ScoreRecord) -> Self {
        Self {
            component: ComponentId::new(r.layer, r.kind),
            score: r.score,
            num_samples: r.num_samples,
        }
    }
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// `None` when either side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{ViTConfig, ViTParams};
    use rand::SeedableRng;

    fn tiny() -> ViTConfig {
        ViTConfig { depth: 1, embed_dim: 4, heads: 2, mlp_dim: 6, patches: 3, num_classes: 2, patch_dim: 3 }
    }

    fn setup(seed: u64) -> (ViTParams<f64>, Vec<Tensor<f64>>, Vec<usize>) {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ViTParams::<f64>::init(&cfg, &mut rng).unwrap();
        let p = p.map(|t| t.map(|_| rng.gen_range(-0.5..0.5)));
        let xs: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        (p, xs, vec![0, 1, 1, 0])
    }

    #[test]
    fn hand_evaluated_single_parameter() {
        // w = 2, per-sample gradients {1, -1}: (1/4) * 4 * 2 = 2
        let (mut p, _, _) = setup(0);
        p = p.map(|t| Tensor::zeros(t.shape()));
        let mut w = p.set.head_b.clone().into_data();
        w[0] = 2.0;
        p.set.head_b = Tensor::new(vec![2], w).unwrap();
        let grad = |g: f64| {
            let mut q = p.zeros_like();
            q.set.head_b = Tensor::from_f64(&[2], &[g, 0.0]).unwrap();
            q
        };
        let scores = gsm_from_gradients(&p, &[grad(1.0), grad(-1.0)], Aggregation::Sum).unwrap();
        let head = scores.iter().find(|s| s.component.kind == ComponentKind::Head).unwrap();
        assert!((head.score - 2.0).abs() < 1e-12);
        assert!(scores.iter().filter(|s| s.component.kind != ComponentKind::Head).all(|s| s.score == 0.0));
    }

    #[test]
    fn zero_weight_component_scores_zero() {
        let (p, xs, ys) = setup(1);
        let p = p.zero_component(ComponentId::mlp(0));
        let scores = gsm_scores(&p, &xs, &ys).unwrap();
        assert_eq!(scores.iter().find(|s| s.component == ComponentId::mlp(0)).unwrap().score, 0.0);
        assert!(scores.iter().all(|s| s.score >= 0.0 && s.score.is_finite()));
    }

    #[test]
    fn duplicating_the_batch_keeps_scores() {
        let (p, xs, ys) = setup(2);
        let a = gsm_scores(&p, &xs, &ys).unwrap();
        let xs2: Vec<_> = xs.iter().chain(&xs).cloned().collect();
        let ys2: Vec<_> = ys.iter().chain(&ys).copied().collect();
        let b = gsm_scores(&p, &xs2, &ys2).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u.score - v.score).abs() <= 1e-12 * u.score.abs().max(1e-30));
            assert_eq!(v.num_samples, 8);
        }
        let ra: Vec<_> = rank_components(&a).iter().map(|s| s.component).collect();
        let rb: Vec<_> = rank_components(&b).iter().map(|s| s.component).collect();
        assert_eq!(ra, rb);
    }

    #[test]
    fn batch_permutation_invariance() {
        let (p, xs, ys) = setup(3);
        let a = gsm_scores(&p, &xs, &ys).unwrap();
        let order = [2, 0, 3, 1];
        let xs2: Vec<_> = order.iter().map(|&i| xs[i].clone()).collect();
        let ys2: Vec<_> = order.iter().map(|&i| ys[i]).collect();
        let b = gsm_scores(&p, &xs2, &ys2).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u.score - v.score).abs() <= 1e-12 * u.score.abs());
        }
    }

    #[test]
    fn scaling_gradients_scales_scores_quadratically() {
        let (p, xs, ys) = setup(4);
        let grads = per_sample_gradients(&p, &xs, &ys).unwrap();
        let scaled: Vec<_> = grads.iter().map(|g| g.map(|t| t.map(|v| 3.0 * v))).collect();
        let a = gsm_from_gradients(&p, &grads, Aggregation::Sum).unwrap();
        let b = gsm_from_gradients(&p, &scaled, Aggregation::Sum).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((9.0 * u.score - v.score).abs() <= 1e-9 * v.score.abs().max(1e-30));
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (p, _, _) = setup(5);
        assert!(matches!(gsm_scores(&p, &[], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn aggregation_variants() {
        let (p, xs, ys) = setup(6);
        let sum = gsm_scores_with(&p, &xs, &ys, Aggregation::Sum).unwrap();
        let mean = gsm_scores_with(&p, &xs, &ys, Aggregation::Mean).unwrap();
        let max = gsm_scores_with(&p, &xs, &ys, Aggregation::Max).unwrap();
        for ((s, m), x) in sum.iter().zip(&mean).zip(&max) {
            assert!(m.score <= s.score && x.score <= s.score + 1e-15);
        }
    }

    #[test]
    fn ranking_orders_and_breaks_ties() {
        let mk = |c, s| ImportanceScore { component: c, score: s, num_samples: 1 };
        let r = rank_components(&[mk(ComponentId::msa(0), 1.0), mk(ComponentId::mlp(0), 2.0)]);
        assert_eq!(r[0].component, ComponentId::mlp(0));
        let tied = [mk(ComponentId::head(2), 1.0), mk(ComponentId::mlp(1), 1.0), mk(ComponentId::msa(1), 1.0), mk(ComponentId::patch_embed(), 1.0)];
        let r: Vec<_> = rank_components(&tied).iter().map(|s| s.component).collect();
        assert_eq!(r, vec![ComponentId::patch_embed(), ComponentId::msa(1), ComponentId::mlp(1), ComponentId::head(2)]);
    }

    #[test]
    fn hutchinson_recovers_quadratic_curvature() {
        let lambda = 3.5;
        let w: Vec<f64> = (0..20).map(|i| f64::from(i) * 0.1 - 1.0).collect();
        let grad = |x: &[f64]| Ok(x.iter().map(|v| lambda * v).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = hutchinson_diagonal(&w, grad, 64, 1e-3, &mut rng).unwrap();
        assert!(d.iter().all(|v| (v - lambda).abs() <= 0.1 * lambda));
    }

    #[test]
    fn hessian_oracle_zero_weights_and_records_time() {
        let (p, xs, ys) = setup(7);
        let p = p.zero_component(ComponentId::msa(0));
        let cfg = HessianConfig { probes: 4, ..HessianConfig::default() };
        let r = hessian_diag_oracle(&p, &xs, &ys, &cfg).unwrap();
        assert_eq!(r.scores.iter().find(|s| s.component == ComponentId::msa(0)).unwrap().score, 0.0);
        assert!(r.elapsed > Duration::ZERO);
    }

    #[test]
    fn hessian_oracle_reports_non_finite_component() {
        let (p, xs, ys) = setup(8);
        let p = p.map(|t| t.map(|v| v * 1e300));
        let cfg = HessianConfig { probes: 1, ..HessianConfig::default() };
        assert!(hessian_diag_oracle(&p, &xs, &ys, &cfg).is_err());
    }

    #[test]
    fn score_records_roundtrip() {
        let s = ImportanceScore { component: ComponentId::mlp(3), score: 0.25, num_samples: 32 };
        let r = ScoreRecord::from(&s);
        assert_eq!(r.component, "blocks.3.mlp");
        let json = serde_json::to_string(&r).unwrap();
        let back: ScoreRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(ImportanceScore::from(&back), s);
    }

    #[test]
    fn spearman_hand_values() {
        assert_eq!(average_ranks(&[10.0, 30.0, 20.0, 20.0]), vec![1.0, 4.0, 2.5, 2.5]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        // d = [0, 0, 1, -1]: 1 - 6 * 2 / (4 * 15) = 0.8
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
    }
}
