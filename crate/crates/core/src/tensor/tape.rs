//! Reverse-mode differentiation over a dynamic operation record.
//!
//! Every differentiable call on [`Tape`] evaluates its forward value
//! eagerly, appends a node that remembers its operands (and whatever the
//! backward rule needs), and hands back a [`Var`]. [`Tape::backward`]
//! replays the nodes in reverse order.

use super::{
    add, add_row, gelu, gelu_derivative, matmul, mean_rows, normalize_rows, softmax_rows,
    transpose, Real, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum(Var),
    SumSquares(Var),
    /// Forward value replaced (e.g. by fake quantisation), gradient passed
    /// through unchanged.
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// The operation record. Single writer; independent tapes may be built
/// and replayed on different threads.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Records an input (parameter or data).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = add_row(self.value(x), self.value(bias))?;
        Ok(self.push(v, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let value = super::layernorm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (xhat, inv_std) = normalize_rows(self.value(x), eps);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = gelu(self.value(x));
        self.push(v, Op::Gelu(x))
    }

    /// Concatenates `[n×d_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let n = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![n, width], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = mean_rows(self.value(x));
        self.push(v, Op::MeanRows(x))
    }

    /// Summed softmax cross-entropy of `[B×C]` logits against `B` labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let classes = lv.cols();
        if lv.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} logit rows but {} labels",
                lv.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let probs = softmax_rows(lv);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[y];
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum_squares());
        self.push(v, Op::SumSquares(x))
    }

    /// Replaces the forward value of `x` by `f(x)` while letting gradients
    /// flow through as if `f` were the identity.
    pub fn straight_through(&mut self, x: Var, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) -> Result<Var> {
        let v = f(self.value(x));
        if v.shape() != self.value(x).shape() {
            return Err(Error::Dimension(
                "straight-through map must preserve shape".into(),
            ));
        }
        Ok(self.push(v, Op::StraightThrough(x)))
    }

    /// Propagates d(loss)/d(node) back through the record.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for (target, contrib) in self.local_grads(node, &g)? {
                accumulate(&mut grads[target.0], contrib)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = matmul(g, &transpose(self.value(*b))?)?;
                let db = matmul(&transpose(self.value(*a))?, g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, transpose(g)?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(x, bias) => {
                let d = g.cols();
                let mut db = vec![T::zero(); d];
                for row in g.data().chunks(d) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let bshape = self.value(*bias).shape().to_vec();
                vec![(*x, g.clone()), (*bias, Tensor::new(bshape, db)?)]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = xhat.cols();
                let dt = T::from_usize(d).unwrap();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = Vec::with_capacity(xhat.len());
                for ((xr, gr), &r) in xhat.data().chunks(d).zip(g.data().chunks(d)).zip(inv_std) {
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        dx.push(r / dt * (dt * dxh - sum_dxhat - xr[j] * sum_dxhat_xhat));
                    }
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                vec![
                    (*x, Tensor::new(xhat.shape().to_vec(), dx)?),
                    (*gamma, Tensor::new(gshape, dgamma)?),
                    (*beta, Tensor::new(bshape, dbeta)?),
                ]
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_map(g, |xv, gv| gv * gelu_derivative(xv))?;
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(n * w);
                    for i in 0..n {
                        data.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    out.push((p, Tensor::new(self.value(p).shape().to_vec(), data)?));
                }
                out
            }
            Op::MeanRows(x) => {
                let xs = self.value(*x);
                let scale = T::one() / T::from_usize(xs.rows()).unwrap();
                let row: Vec<T> = g.data().iter().map(|&v| v * scale).collect();
                let data = row.repeat(xs.rows());
                vec![(*x, Tensor::new(xs.shape().to_vec(), data)?)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let up = g.data()[0];
                let c = probs.cols();
                let mut d = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= T::one();
                }
                for v in &mut d {
                    *v *= up;
                }
                vec![(*logits, Tensor::new(probs.shape().to_vec(), d)?)]
            }
            Op::Sum(x) => {
                let up = g.data()[0];
                vec![(*x, Tensor::full(self.value(*x).shape(), up))]
            }
            Op::SumSquares(x) => {
                let two_up = g.data()[0] + g.data()[0];
                vec![(*x, self.value(*x).map(|v| v * two_up))]
            }
            Op::StraightThrough(x) => vec![(*x, g.clone())],
        };
        Ok(out)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => contrib,
        Some(prev) => add(&prev, &contrib)?,
    });
    Ok(())
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
