use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{BlockSet, ComponentId, ParamSet, ViTConfig, ViTParams};
use crate::error::{Error, Result};
use crate::quant::{fake_quant, fake_quant_rows, QuantParams};
use crate::tensor::{Real, Tape, Tensor, Var, LAYERNORM_EPS};

/// A point in the forward pass where an activation enters a matrix multiply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "site", content = "layer", rename_all = "snake_case")]
pub enum ActSite {
    PatchInput,
    /// `X^l`, the input of the Q/K/V projections.
    MsaInput(usize),
    Query(usize),
    Key(usize),
    Value(usize),
    /// Softmax output; only quantised when the context asks for it.
    AttnProbs(usize),
    /// Concatenated heads, input of the output projection.
    AttnOutput(usize),
    MlpInput(usize),
    MlpHidden(usize),
    HeadInput,
}

impl ActSite {
    pub fn component(self, config: &ViTConfig) -> ComponentId {
        match self {
            ActSite::PatchInput => ComponentId::patch_embed(),
            ActSite::MsaInput(l)
            | ActSite::Query(l)
            | ActSite::Key(l)
            | ActSite::Value(l)
            | ActSite::AttnProbs(l)
            | ActSite::AttnOutput(l) => ComponentId::msa(l),
            ActSite::MlpInput(l) | ActSite::MlpHidden(l) => ComponentId::mlp(l),
            ActSite::HeadInput => ComponentId::head(config.depth),
        }
    }

    /// Every site of a model, in a fixed order.
    pub fn all(config: &ViTConfig) -> Vec<ActSite> {
        let mut out = vec![ActSite::PatchInput];
        for l in 0..config.depth {
            out.extend([
                ActSite::MsaInput(l),
                ActSite::Query(l),
                ActSite::Key(l),
                ActSite::Value(l),
                ActSite::AttnProbs(l),
                ActSite::AttnOutput(l),
                ActSite::MlpInput(l),
                ActSite::MlpHidden(l),
            ]);
        }
        out.push(ActSite::HeadInput);
        out
    }
}

impl fmt::Display for ActSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActSite::PatchInput => f.write_str("patch_input"),
            ActSite::MsaInput(l) => write!(f, "blocks.{l}.msa_input"),
            ActSite::Query(l) => write!(f, "blocks.{l}.query"),
            ActSite::Key(l) => write!(f, "blocks.{l}.key"),
            ActSite::Value(l) => write!(f, "blocks.{l}.value"),
            ActSite::AttnProbs(l) => write!(f, "blocks.{l}.attn_probs"),
            ActSite::AttnOutput(l) => write!(f, "blocks.{l}.attn_output"),
            ActSite::MlpInput(l) => write!(f, "blocks.{l}.mlp_input"),
            ActSite::MlpHidden(l) => write!(f, "blocks.{l}.mlp_hidden"),
            ActSite::HeadInput => f.write_str("head_input"),
        }
    }
}

/// Everything the forward pass needs to simulate a quantised model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantContext {
    /// One entry per parameter tensor in census order. Non-quantisable
    /// tensors carry the pass-through sentinel.
    pub weights: Vec<QuantParams>,
    /// Activation quantisers; a missing site stays in float.
    pub activations: BTreeMap<ActSite, QuantParams>,
    /// Row-wise (per patch) quantisers for each block's MSA input. When
    /// present they replace the whole-tensor `MsaInput` quantiser.
    pub patch_rows: Vec<Option<Vec<QuantParams>>>,
    pub quantize_attention: bool,
}

/// Activations captured at every [`ActSite`], pre-quantisation.
pub type ActivationLog<T> = BTreeMap<ActSite, Vec<Tensor<T>>>;

/// Intermediates of one encoder block for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T: Real = f32> {
    pub input: Tensor<T>,
    /// One `[N×N]` row-stochastic map per head.
    pub attention: Vec<Tensor<T>>,
    pub msa_output: Tensor<T>,
    pub z: Tensor<T>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T: Real = f32> {
    pub layers: Vec<LayerTrace<T>>,
    /// `[1×C]`
    pub logits: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput<T: Real = f32> {
    /// `[B×C]`
    pub logits: Tensor<T>,
    pub traces: Vec<ForwardTrace<T>>,
}

struct LayerVars {
    input: Var,
    attention: Vec<Var>,
    msa_output: Var,
    z: Var,
    output: Var,
}

/// Builds the graph of one sample on a tape.
struct Builder<'a, T: Real> {
    tape: &'a mut Tape<T>,
    config: &'a ViTConfig,
    ctx: Option<&'a QuantContext>,
    log: Option<&'a mut ActivationLog<T>>,
}

impl<'a, T: Real> Builder<'a, T> {
    /// Places the parameters on the tape, fake-quantising weights if the
    /// context says so. Returns the raw leaves and the effective handles.
    fn params(&mut self, params: &ViTParams<T>) -> Result<(ParamSet<Var>, ParamSet<Var>)> {
        let leaves = params.set.map(self.config, |t| self.tape.leaf(t.clone()));
        let Some(ctx) = self.ctx else {
            return Ok((leaves.clone(), leaves));
        };
        if ctx.weights.is_empty() {
            return Ok((leaves.clone(), leaves));
        }
        let flat = leaves.flat();
        if ctx.weights.len() != flat.len() {
            return Err(Error::Config(format!(
                "quant context has {} weight quantisers for {} tensors",
                ctx.weights.len(),
                flat.len()
            )));
        }
        let mut effective = Vec::with_capacity(flat.len());
        for (&v, qp) in flat.into_iter().zip(&ctx.weights) {
            effective.push(if qp.is_passthrough() {
                v
            } else {
                self.tape.straight_through(v, |t| fake_quant(t, qp))?
            });
        }
        Ok((leaves, ParamSet::from_flat(self.config, effective)?))
    }

    fn act(&mut self, site: ActSite, v: Var) -> Result<Var> {
        if let Some(log) = self.log.as_deref_mut() {
            log.entry(site).or_default().push(self.tape.value(v).clone());
        }
        let Some(ctx) = self.ctx else {
            return Ok(v);
        };
        if let ActSite::AttnProbs(_) = site {
            if !ctx.quantize_attention {
                return Ok(v);
            }
        }
        if let ActSite::MsaInput(l) = site {
            if let Some(Some(rows)) = ctx.patch_rows.get(l) {
                let rows = rows.clone();
                return self.tape.straight_through(v, |t| {
                    fake_quant_rows(t, &rows).expect("one quantiser per patch row")
                });
            }
        }
        match ctx.activations.get(&site) {
            Some(qp) if !qp.is_passthrough() => {
                let qp = *qp;
                self.tape.straight_through(v, |t| fake_quant(t, &qp))
            }
            _ => Ok(v),
        }
    }

    fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.tape.matmul(x, w)?;
        match b {
            Some(b) => self.tape.add_row(y, b),
            None => Ok(y),
        }
    }

    fn msa(&mut self, layer: usize, blk: &BlockSet<Var>, x: Var) -> Result<(Var, Vec<Var>)> {
        let n = self.tape.value(x).rows();
        if self.tape.value(x).shape() != [n, self.config.embed_dim] {
            return Err(Error::Dimension(format!(
                "MSA input must be [N x {}], got {:?}",
                self.config.embed_dim,
                self.tape.value(x).shape()
            )));
        }
        let xq = self.act(ActSite::MsaInput(layer), x)?;
        let inv_sqrt = T::one() / T::from_usize(self.config.head_dim()).unwrap().sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut attention = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = self.tape.matmul(xq, blk.wq[h])?;
            let k = self.tape.matmul(xq, blk.wk[h])?;
            let v = self.tape.matmul(xq, blk.wv[h])?;
            let q = self.act(ActSite::Query(layer), q)?;
            let k = self.act(ActSite::Key(layer), k)?;
            let kt = self.tape.transpose(k)?;
            let logits = self.tape.matmul(q, kt)?;
            let logits = self.tape.scale(logits, inv_sqrt);
            let attn = self.tape.softmax_rows(logits);
            attention.push(attn);
            let attn = self.act(ActSite::AttnProbs(layer), attn)?;
            let v = self.act(ActSite::Value(layer), v)?;
            heads.push(self.tape.matmul(attn, v)?);
        }
        let concat = self.tape.concat_cols(&heads)?;
        let concat = self.act(ActSite::AttnOutput(layer), concat)?;
        let out = self.tape.matmul(concat, blk.wo)?;
        Ok((out, attention))
    }

    fn block(&mut self, layer: usize, blk: &BlockSet<Var>, x: Var) -> Result<LayerVars> {
        let (msa_output, attention) = self.msa(layer, blk, x)?;
        let residual = self.tape.add(msa_output, x)?;
        let eps = T::from_f64_lossy(LAYERNORM_EPS);
        let z = self
            .tape
            .layernorm(residual, blk.norm_gamma, blk.norm_beta, eps)?;
        let zq = self.act(ActSite::MlpInput(layer), z)?;
        let hidden = self.linear(zq, blk.fc1_w, Some(blk.fc1_b))?;
        let hidden = self.tape.gelu(hidden);
        let hidden = self.act(ActSite::MlpHidden(layer), hidden)?;
        let mlp = self.linear(hidden, blk.fc2_w, Some(blk.fc2_b))?;
        let output = self.tape.add(mlp, z)?;
        Ok(LayerVars {
            input: x,
            attention,
            msa_output,
            z,
            output,
        })
    }

    fn model(&mut self, p: &ParamSet<Var>, patches: Var) -> Result<(Var, Vec<LayerVars>)> {
        let xq = self.act(ActSite::PatchInput, patches)?;
        let emb = self.linear(xq, p.patch_w, Some(p.patch_b))?;
        let mut x = self.tape.add(emb, p.pos)?;
        let mut layers = Vec::with_capacity(p.blocks.len());
        for (l, blk) in p.blocks.iter().enumerate() {
            let lv = self.block(l, blk, x)?;
            x = lv.output;
            layers.push(lv);
        }
        let pooled = self.tape.mean_rows(x);
        let pooled = self.act(ActSite::HeadInput, pooled)?;
        let logits = self.linear(pooled, p.head_w, Some(p.head_b))?;
        Ok((logits, layers))
    }
}

fn layer_trace<T: Real>(tape: &Tape<T>, lv: &LayerVars) -> LayerTrace<T> {
    LayerTrace {
        input: tape.value(lv.input).clone(),
        attention: lv.attention.iter().map(|&a| tape.value(a).clone()).collect(),
        msa_output: tape.value(lv.msa_output).clone(),
        z: tape.value(lv.z).clone(),
        output: tape.value(lv.output).clone(),
    }
}

fn check_layer(config: &ViTConfig, layer: usize) -> Result<()> {
    if layer >= config.depth {
        return Err(Error::Dimension(format!(
            "layer {layer} out of range for depth {}",
            config.depth
        )));
    }
    Ok(())
}

/// Multi-head self-attention of block `layer` on one `[N×d]` input.
/// Returns the MSA output and the per-head attention maps.
pub fn msa_forward<T: Real>(
    params: &ViTParams<T>,
    layer: usize,
    x: &Tensor<T>,
    ctx: Option<&QuantContext>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    check_layer(&params.config, layer)?;
    let mut tape = Tape::new();
    let mut b = Builder {
        tape: &mut tape,
        config: &params.config,
        ctx,
        log: None,
    };
    let (_, p) = b.params(params)?;
    let xv = b.tape.leaf(x.clone());
    let (out, attn) = b.msa(layer, &p.blocks[layer], xv)?;
    Ok((
        tape.value(out).clone(),
        attn.iter().map(|&a| tape.value(a).clone()).collect(),
    ))
}

/// One encoder block: `Z = LN(MSA(x) + x)`, output `MLP(Z) + Z`.
pub fn block_forward<T: Real>(
    params: &ViTParams<T>,
    layer: usize,
    x: &Tensor<T>,
    ctx: Option<&QuantContext>,
) -> Result<(Tensor<T>, LayerTrace<T>)> {
    check_layer(&params.config, layer)?;
    let mut tape = Tape::new();
    let mut b = Builder {
        tape: &mut tape,
        config: &params.config,
        ctx,
        log: None,
    };
    let (_, p) = b.params(params)?;
    let xv = b.tape.leaf(x.clone());
    let lv = b.block(layer, &p.blocks[layer], xv)?;
    Ok((tape.value(lv.output).clone(), layer_trace(&tape, &lv)))
}

/// Splits a `[B×N×P]` batch into per-sample `[N×P]` matrices.
pub fn split_batch<T: Real>(config: &ViTConfig, inputs: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    match inputs.shape() {
        [_, n, p] if *n == config.patches && *p == config.patch_dim => Ok(inputs
            .data()
            .chunks(n * p)
            .map(|c| Tensor::new(vec![*n, *p], c.to_vec()).expect("chunk shape"))
            .collect()),
        s => Err(Error::Dimension(format!(
            "inputs must be [B x {} x {}], got {s:?}",
            config.patches, config.patch_dim
        ))),
    }
}

fn check_sample<T: Real>(config: &ViTConfig, x: &Tensor<T>) -> Result<()> {
    if x.shape() != [config.patches, config.patch_dim] {
        return Err(Error::Dimension(format!(
            "sample must be [{} x {}], got {:?}",
            config.patches,
            config.patch_dim,
            x.shape()
        )));
    }
    Ok(())
}

/// Forward pass of one `[N×P]` sample, optionally logging activations.
pub fn sample_forward<T: Real>(
    params: &ViTParams<T>,
    sample: &Tensor<T>,
    ctx: Option<&QuantContext>,
    log: Option<&mut ActivationLog<T>>,
) -> Result<ForwardTrace<T>> {
    check_sample(&params.config, sample)?;
    let mut tape = Tape::new();
    let mut b = Builder {
        tape: &mut tape,
        config: &params.config,
        ctx,
        log,
    };
    let (_, p) = b.params(params)?;
    let xv = b.tape.leaf(sample.clone());
    let (logits, layers) = b.model(&p, xv)?;
    Ok(ForwardTrace {
        layers: layers.iter().map(|lv| layer_trace(&tape, lv)).collect(),
        logits: tape.value(logits).clone(),
    })
}

fn stack_logits<T: Real>(rows: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let c = rows.first().map_or(1, Tensor::cols);
    let b = rows.len();
    Tensor::new(vec![b, c], rows.into_iter().flat_map(Tensor::into_data).collect())
}

/// Patch embedding, positional embedding, the encoder blocks, mean pooling
/// and the classifier, for a `[B×N×P]` batch.
pub fn model_forward<T: Real>(
    params: &ViTParams<T>,
    inputs: &Tensor<T>,
    ctx: Option<&QuantContext>,
) -> Result<BatchOutput<T>> {
    let samples = split_batch(&params.config, inputs)?;
    model_forward_samples(params, &samples, ctx)
}

pub fn model_forward_samples<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    ctx: Option<&QuantContext>,
) -> Result<BatchOutput<T>> {
    let traces = samples
        .par_iter()
        .map(|s| sample_forward(params, s, ctx, None))
        .collect::<Result<Vec<_>>>()?;
    let logits = stack_logits(traces.iter().map(|t| t.logits.clone()).collect())?;
    Ok(BatchOutput { logits, traces })
}

/// Logits only, without keeping traces.
pub fn predict<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    ctx: Option<&QuantContext>,
) -> Result<Tensor<T>> {
    let rows = samples
        .par_iter()
        .map(|s| sample_forward(params, s, ctx, None).map(|t| t.logits))
        .collect::<Result<Vec<_>>>()?;
    stack_logits(rows)
}

/// Runs the batch and returns every matmul-input activation.
pub fn collect_activations<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    ctx: Option<&QuantContext>,
) -> Result<ActivationLog<T>> {
    let mut log = ActivationLog::new();
    for s in samples {
        sample_forward(params, s, ctx, Some(&mut log))?;
    }
    Ok(log)
}

fn check_labels(config: &ViTConfig, samples: usize, labels: &[usize]) -> Result<()> {
    if samples != labels.len() {
        return Err(Error::Input(format!(
            "{samples} samples but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= config.num_classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {} classes",
            config.num_classes
        )));
    }
    Ok(())
}

/// Cross-entropy loss and parameter gradient of one sample.
pub fn sample_gradient<T: Real>(
    params: &ViTParams<T>,
    sample: &Tensor<T>,
    label: usize,
) -> Result<(T, ViTParams<T>)> {
    check_sample(&params.config, sample)?;
    check_labels(&params.config, 1, &[label])?;
    let mut tape = Tape::new();
    let mut b = Builder {
        tape: &mut tape,
        config: &params.config,
        ctx: None,
        log: None,
    };
    let (leaves, p) = b.params(params)?;
    let xv = b.tape.leaf(sample.clone());
    let (logits, _) = b.model(&p, xv)?;
    let loss = tape.cross_entropy(logits, &[label])?;
    let grads = tape.backward(loss)?;
    let g = ViTParams {
        config: params.config.clone(),
        set: leaves.map(&params.config, |&v| grads.wrt(v)),
    };
    Ok((tape.value(loss).data()[0], g))
}

/// One gradient set per sample.
pub fn per_sample_gradients<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    labels: &[usize],
) -> Result<Vec<ViTParams<T>>> {
    check_labels(&params.config, samples.len(), labels)?;
    samples
        .par_iter()
        .zip(labels)
        .map(|(s, &y)| sample_gradient(params, s, y).map(|(_, g)| g))
        .collect()
}

/// Summed loss over the batch and its gradient from a single record.
pub fn batch_gradient<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    labels: &[usize],
) -> Result<(T, ViTParams<T>)> {
    check_labels(&params.config, samples.len(), labels)?;
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut tape = Tape::new();
    let mut b = Builder {
        tape: &mut tape,
        config: &params.config,
        ctx: None,
        log: None,
    };
    let (leaves, p) = b.params(params)?;
    let mut total: Option<Var> = None;
    for (s, &y) in samples.iter().zip(labels) {
        check_sample(&params.config, s)?;
        let xv = b.tape.leaf(s.clone());
        let (logits, _) = b.model(&p, xv)?;
        let l = b.tape.cross_entropy(logits, &[y])?;
        total = Some(match total {
            None => l,
            Some(t) => b.tape.add(t, l)?,
        });
    }
    let loss = total.expect("non-empty batch");
    let grads = tape.backward(loss)?;
    let g = ViTParams {
        config: params.config.clone(),
        set: leaves.map(&params.config, |&v| grads.wrt(v)),
    };
    Ok((tape.value(loss).data()[0], g))
}

/// Mean cross-entropy and mean gradient, reduced in sample order.
pub fn mean_loss_and_gradient<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    labels: &[usize],
) -> Result<(f64, ViTParams<T>)> {
    check_labels(&params.config, samples.len(), labels)?;
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let parts = samples
        .par_iter()
        .zip(labels)
        .map(|(s, &y)| sample_gradient(params, s, y))
        .collect::<Result<Vec<_>>>()?;
    let n = T::from_usize(samples.len()).unwrap();
    let mut loss = 0.0;
    let mut acc = params.zeros_like();
    for (l, g) in &parts {
        loss += l.to_f64_lossy();
        acc = acc.add(g)?;
    }
    Ok((loss / samples.len() as f64, acc.map(|t| t.map(|v| v / n))))
}

/// Mean cross-entropy of the batch, optionally under quantisation.
pub fn mean_loss<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    labels: &[usize],
    ctx: Option<&QuantContext>,
) -> Result<f64> {
    check_labels(&params.config, samples.len(), labels)?;
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let logits = predict(params, samples, ctx)?;
    let c = logits.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y.min(c - 1)];
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest logit of each row (first wins on ties).
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (j, &v)| {
                    if v > bv {
                        (j, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let preds = argmax_rows(logits);
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}
