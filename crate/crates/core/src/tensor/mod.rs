//! Dense row-major tensors and the handful of kernels the toy ViT needs.
//!
//! Kernels here are pure functions on [`Tensor`]. The differentiable
//! versions live on the [`Tape`] in [`tape`], which calls back into these
//! for the forward values.

mod tape;

pub use tape::{Gradients, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Default layernorm epsilon.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Floating-point element type. `f32` is the production type, `f64` is
/// used for gradient verification.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn round_half_even(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
}

impl Real for f64 {
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![n, d], rows.concat())
    }

    /// Convenience constructor for literals in tests and examples.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a 2-D view (leading extents folded together).
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        check_same_shape(self, other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        check_same_shape(self, other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn require_matrix<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Dimension(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_matrix(a, "matmul lhs")?;
    let (k2, n) = require_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: [{m}x{k}] x [{k2}x{n}]"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = require_matrix(a, "transpose")?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Adds a length-`d` vector to every row of an `[n×d]` tensor.
pub fn add_row<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.cols();
    if bias.len() != d {
        return Err(Error::Dimension(format!(
            "bias of length {} cannot broadcast over rows of width {d}",
            bias.len()
        )));
    }
    let mut data = x.data.clone();
    for row in data.chunks_mut(d) {
        for (v, &b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Tensor::new(x.shape.clone(), data)
}

/// Row-wise softmax, stabilised by subtracting the row maximum.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let mut data = x.data.clone();
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Normalised rows and the per-row reciprocal standard deviations.
pub(crate) fn normalize_rows<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let d = x.cols();
    let dt = T::from_usize(d).unwrap();
    let mut data = x.data.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in data.chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
        let r = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        inv_std.push(r);
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data,
        },
        inv_std,
    )
}

pub fn layernorm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layernorm affine parameters must have length {d}"
        )));
    }
    let (mut xhat, _) = normalize_rows(x, eps);
    for row in xhat.data.chunks_mut(d) {
        for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = *v * g + b;
        }
    }
    Ok(xhat)
}

fn gelu_consts<T: Real>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

/// Tanh-approximation GELU of one value.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Mean over rows of an `[n×d]` tensor, giving `[1×d]`.
pub fn mean_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.cols();
    let n = T::from_usize(x.rows()).unwrap();
    let mut out = vec![T::zero(); d];
    for row in x.data.chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    Tensor {
        shape: vec![1, d],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let id = Tensor::<f32>::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let m = Tensor::<f32>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let a = Tensor::<f32>::from_f64(&[1, 2], &[1., 0.]).unwrap();
        let b = Tensor::<f32>::from_f64(&[2, 1], &[0., 5.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, o) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - o).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::<f32>::from_f64(&[3, 3], &[0., 0., 0., 1000., 0., 0., 1., 2., 3.]).unwrap();
        let s = softmax_rows(&t);
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!((s.at(1, 0) - 1.0).abs() < 1e-6 && s.at(1, 1) < 1e-6);
        assert!(s.is_finite());
        let e: Vec<f64> = [1f64, 2., 3.].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, ej) in e.iter().enumerate() {
            assert!((f64::from(s.at(2, j)) - ej / z).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_examples() {
        let ones = Tensor::<f64>::full(&[2], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2]);
        let c = Tensor::<f64>::from_f64(&[1, 2], &[5., 5.]).unwrap();
        assert_eq!(layernorm(&c, &ones, &zeros, 1e-5).unwrap().data(), &[0.0, 0.0]);
        let x = Tensor::<f64>::from_f64(&[1, 2], &[1., 3.]).unwrap();
        let y = layernorm(&x, &ones, &zeros, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let beta = Tensor::<f64>::from_f64(&[2], &[0.5, -2.]).unwrap();
        let y = layernorm(&x, &zeros, &beta, 1e-5).unwrap();
        assert_eq!(y.data(), beta.data());
    }

    #[test]
    fn layernorm_rows_are_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[5, 8], &mut rng);
        let y = layernorm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
        for i in 0..5 {
            let r = y.row(i);
            let mean: f64 = r.iter().sum::<f64>() / 8.0;
            let var: f64 = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_asymptotes() {
        assert_eq!(gelu_scalar(0.0f32), 0.0);
        assert!((gelu_scalar(10.0f32) - 10.0).abs() < 1e-3);
        assert!(gelu_scalar(-10.0f32).abs() < 1e-3);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8, "x={x}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            cols in 1usize..9,
            seed in any::<u64>(),
            scale in 0.1f32..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
            let s = softmax_rows(&Tensor::new(vec![rows, cols], data).unwrap());
            for i in 0..rows {
                let total: f32 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn matmul_agrees_with_naive_oracle(
            m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let got = matmul(&a, &b).unwrap();
            for (g, o) in got.data().iter().zip(naive_matmul(&a, &b)) {
                prop_assert!((g - o).abs() < 1e-5 * (1.0 + o.abs()));
            }
        }
    }
}
