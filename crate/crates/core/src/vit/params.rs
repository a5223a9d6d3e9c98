use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Hyperparameters of the toy encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Sequence length (number of patches).
    pub patches: usize,
    pub num_classes: usize,
    /// Length of one flattened input patch.
    pub patch_dim: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            embed_dim: 16,
            heads: 2,
            mlp_dim: 32,
            patches: 8,
            num_classes: 4,
            patch_dim: 8,
        }
    }
}

impl ViTConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
            ("patch_dim", self.patch_dim),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.patches < 2 {
            return Err(Error::Config("model.patches must be at least 2".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Sub-module kind a parameter belongs to. Declaration order is the
/// tie-break order used when ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComponentKind {
    PatchEmbed,
    Msa,
    Mlp,
    Head,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::PatchEmbed => "patch_embed",
            ComponentKind::Msa => "msa",
            ComponentKind::Mlp => "mlp",
            ComponentKind::Head => "head",
        }
    }
}

/// A quantisable parameter group. The patch embedding sits at layer 0 and
/// the classifier head at layer `depth`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub layer: usize,
    pub kind: ComponentKind,
}

impl ComponentId {
    pub fn new(layer: usize, kind: ComponentKind) -> Self {
        Self { layer, kind }
    }

    pub fn patch_embed() -> Self {
        Self::new(0, ComponentKind::PatchEmbed)
    }

    pub fn msa(layer: usize) -> Self {
        Self::new(layer, ComponentKind::Msa)
    }

    pub fn mlp(layer: usize) -> Self {
        Self::new(layer, ComponentKind::Mlp)
    }

    pub fn head(depth: usize) -> Self {
        Self::new(depth, ComponentKind::Head)
    }

    /// Every component of a model, blocks first (MSA then MLP per block),
    /// then the patch embedding and the head.
    pub fn all(config: &ViTConfig) -> Vec<ComponentId> {
        let mut out = Vec::with_capacity(2 * config.depth + 2);
        for l in 0..config.depth {
            out.push(Self::msa(l));
            out.push(Self::mlp(l));
        }
        out.push(Self::patch_embed());
        out.push(Self::head(config.depth));
        out
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ComponentKind::PatchEmbed | ComponentKind::Head => f.write_str(self.kind.as_str()),
            kind => write!(f, "blocks.{}.{}", self.layer, kind.as_str()),
        }
    }
}

/// Name, shape and ownership of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub component: ComponentId,
    /// True for matrices that feed a matrix multiply (and get weight bits).
    pub quantizable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Per-block parameters, generic over the stored item (tensors, tape
/// handles, gradients, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSet<P> {
    pub wq: Vec<P>,
    pub wk: Vec<P>,
    pub wv: Vec<P>,
    pub wo: P,
    pub norm_gamma: P,
    pub norm_beta: P,
    pub fc1_w: P,
    pub fc1_b: P,
    pub fc2_w: P,
    pub fc2_b: P,
}

/// Whole-model parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub pos: P,
    pub blocks: Vec<BlockSet<P>>,
    pub head_w: P,
    pub head_b: P,
}

impl<P> ParamSet<P> {
    /// Items in census order (the order of [`param_specs`]).
    pub fn flat(&self) -> Vec<&P> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.pos];
        for b in &self.blocks {
            out.extend(b.wq.iter());
            out.extend(b.wk.iter());
            out.extend(b.wv.iter());
            out.extend([
                &b.wo,
                &b.norm_gamma,
                &b.norm_beta,
                &b.fc1_w,
                &b.fc1_b,
                &b.fc2_w,
                &b.fc2_b,
            ]);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.wq.iter_mut());
            out.extend(b.wk.iter_mut());
            out.extend(b.wv.iter_mut());
            out.extend([
                &mut b.wo,
                &mut b.norm_gamma,
                &mut b.norm_beta,
                &mut b.fc1_w,
                &mut b.fc1_b,
                &mut b.fc2_w,
                &mut b.fc2_b,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Rebuilds a set from items in census order.
    pub fn from_flat(config: &ViTConfig, items: impl IntoIterator<Item = P>) -> Result<Self> {
        let mut it = items.into_iter();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::Dimension("too few parameter tensors".into()))
        };
        let patch_w = next()?;
        let patch_b = next()?;
        let pos = next()?;
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let mut heads = || (0..config.heads).map(|_| next()).collect::<Result<Vec<_>>>();
            let wq = heads()?;
            let wk = heads()?;
            let wv = heads()?;
            blocks.push(BlockSet {
                wq,
                wk,
                wv,
                wo: next()?,
                norm_gamma: next()?,
                norm_beta: next()?,
                fc1_w: next()?,
                fc1_b: next()?,
                fc2_w: next()?,
                fc2_b: next()?,
            });
        }
        let head_w = next()?;
        let head_b = next()?;
        if it.next().is_some() {
            return Err(Error::Dimension("too many parameter tensors".into()));
        }
        Ok(Self {
            patch_w,
            patch_b,
            pos,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn map<Q>(&self, config: &ViTConfig, f: impl FnMut(&P) -> Q) -> ParamSet<Q> {
        ParamSet::from_flat(config, self.flat().into_iter().map(f)).expect("same layout")
    }
}

/// Parameter census in canonical order.
pub fn param_specs(config: &ViTConfig) -> Vec<ParamSpec> {
    let (d, dh, p, n, m, c) = (
        config.embed_dim,
        config.head_dim(),
        config.patch_dim,
        config.patches,
        config.mlp_dim,
        config.num_classes,
    );
    let spec = |name: String, shape: Vec<usize>, component, quantizable| ParamSpec {
        name,
        shape,
        component,
        quantizable,
    };
    let pe = ComponentId::patch_embed();
    let mut out = vec![
        spec("patch_embed.weight".into(), vec![p, d], pe, true),
        spec("patch_embed.bias".into(), vec![d], pe, false),
        spec("pos_embed".into(), vec![n, d], pe, false),
    ];
    for l in 0..config.depth {
        let msa = ComponentId::msa(l);
        let mlp = ComponentId::mlp(l);
        for proj in ["q", "k", "v"] {
            for h in 0..config.heads {
                out.push(spec(format!("blocks.{l}.msa.{proj}.{h}"), vec![d, dh], msa, true));
            }
        }
        out.push(spec(format!("blocks.{l}.msa.out"), vec![d, d], msa, true));
        out.push(spec(format!("blocks.{l}.norm.gamma"), vec![d], msa, false));
        out.push(spec(format!("blocks.{l}.norm.beta"), vec![d], msa, false));
        out.push(spec(format!("blocks.{l}.mlp.fc1.weight"), vec![d, m], mlp, true));
        out.push(spec(format!("blocks.{l}.mlp.fc1.bias"), vec![m], mlp, false));
        out.push(spec(format!("blocks.{l}.mlp.fc2.weight"), vec![m, d], mlp, true));
        out.push(spec(format!("blocks.{l}.mlp.fc2.bias"), vec![d], mlp, false));
    }
    let head = ComponentId::head(config.depth);
    out.push(spec("head.weight".into(), vec![d, c], head, true));
    out.push(spec("head.bias".into(), vec![c], head, false));
    out
}

/// Number of quantisable weights per component, in [`ComponentId::all`] order.
pub fn weight_counts(config: &ViTConfig) -> Vec<(ComponentId, u64)> {
    let specs = param_specs(config);
    ComponentId::all(config)
        .into_iter()
        .map(|id| {
            let n = specs
                .iter()
                .filter(|s| s.component == id && s.quantizable)
                .map(|s| s.numel() as u64)
                .sum();
            (id, n)
        })
        .collect()
}

/// Model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T: Real = f32> {
    pub config: ViTConfig,
    pub set: ParamSet<Tensor<T>>,
}

impl<T: Real> ViTParams<T> {
    /// Truncated-normal (std 0.02, cut at two std) weights, zero biases,
    /// unit layernorm scale.
    pub fn init(config: &ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let tensors = param_specs(config).into_iter().map(|s| {
            let n = s.numel();
            let data: Vec<T> = if s.name.ends_with("gamma") {
                vec![T::one(); n]
            } else if s.name.ends_with("bias") || s.name.ends_with("beta") {
                vec![T::zero(); n]
            } else {
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 0.04 {
                            break T::from_f64_lossy(v);
                        }
                    })
                    .collect()
            };
            Tensor::new(s.shape, data).expect("census shapes are valid")
        });
        let set = ParamSet::from_flat(config, tensors)?;
        Ok(Self {
            config: config.clone(),
            set,
        })
    }

    /// Builds parameters from tensors in census order, checking shapes.
    pub fn from_tensors(config: &ViTConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::Dimension(format!(
                    "{}: expected shape {:?}, got {:?}",
                    s.name,
                    s.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            set: ParamSet::from_flat(config, tensors)?,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.set.flat()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        param_specs(&self.config)
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, f: impl FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            config: self.config.clone(),
            set: self.set.map(&self.config, f),
        }
    }

    pub fn cast<U: Real>(&self) -> ViTParams<U> {
        ViTParams {
            config: self.config.clone(),
            set: self.set.map(&self.config, Tensor::cast),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        let items = self
            .tensors()
            .into_iter()
            .zip(other.tensors())
            .map(|(a, b)| crate::tensor::add(a, b))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(&self.config, items)
    }

    /// Euclidean norm over every parameter.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.sum_squares().to_f64_lossy())
            .sum::<f64>()
            .sqrt()
    }

    /// Sets every parameter of `component` to zero.
    pub fn zero_component(&self, component: ComponentId) -> Self {
        let specs = self.specs();
        let tensors = self
            .tensors()
            .into_iter()
            .zip(&specs)
            .map(|(t, s)| {
                if s.component == component {
                    Tensor::zeros(t.shape())
                } else {
                    t.clone()
                }
            })
            .collect();
        Self::from_tensors(&self.config, tensors).expect("same layout")
    }
}
