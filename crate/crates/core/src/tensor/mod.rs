//! Dense tensors with a reverse-mode gradient tape.
//!
//! [`Tensor`] is the storage type for parameters and values. Differentiable
//! computation happens on a [`Graph`], which records every operation applied
//! to its [`Var`] handles and replays them in reverse on
//! [`Graph::backward`]. Everything is generic over [`Scalar`] so the same
//! model code runs in 32-bit for training and in 64-bit for gradient checks.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
}

/// Floating-point element type usable on the tape.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`,
    /// all row-major. `a_t`/`b_t` read the stored matrix transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

fn gemm_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // stored matrix is rows×cols when not transposed, cols×rows when transposed
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: output length");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_t);
                let (rsb, csb) = gemm_strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: lengths checked above; strides describe dense row-major
                // (or transposed) storage that stays within each slice.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
///
/// `requires_grad`/`grad` are only meaningful for parameters held in a
/// [`ParamStore`]; activations live on a [`Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Panicking constructor for shapes known to be valid.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::new(shape, data).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().expect("finite")))
                .collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| {
                g.iter()
                    .map(|v| U::from_f64_lossy(v.to_f64().expect("finite")))
                    .collect()
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product of `a: [m×k]` and `b: [k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_vec(&[m, n], out))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// Softmax over the last dimension, stabilized by max subtraction.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.data().to_vec();
    kernels::softmax_rows(&mut out, x.cols());
    Tensor::from_vec(x.shape(), out)
}

/// Layer normalization over the last dimension with `eps = 1e-5`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let (out, _) = kernels::layer_norm_forward(x.data(), gain.data(), bias.data(), d, kernels::LN_EPS);
    Ok(Tensor::from_vec(x.shape(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_selector() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]);
        let m = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap().data(), m.data());

        let row = Tensor::from_vec(&[1, 2], vec![1.0f32, 0.0]);
        let col = Tensor::from_vec(&[2, 1], vec![0.0f32, 5.0]);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // small integers keep every partial sum exact in f32
        let mut rng = Rng::new(11);
        let a: Vec<f32> = (0..12).map(|_| rng.below(7) as f32 - 3.0).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.below(7) as f32 - 3.0).collect();
        let got = matmul(
            &Tensor::from_vec(&[3, 4], a.clone()),
            &Tensor::from_vec(&[4, 2], b.clone()),
        )
        .unwrap();
        assert_eq!(got.shape(), &[3, 2]);
        assert_eq!(got.data(), naive_matmul(&a, &b, 3, 4, 2).as_slice());
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastdim(&Tensor::from_vec(&[2], vec![0.0f32, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_lastdim(&Tensor::from_vec(&[2], vec![1000.0f32, 0.0]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-7 && s.data()[1] < 1e-30);

        let s = softmax_lastdim(&Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]));
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        let expected = [1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z];
        for (g, e) in s.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!((expected[0] - 0.09003).abs() < 1e-5);
        assert!((expected[1] - 0.24473).abs() < 1e-5);
        assert!((expected[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[3], 1.0f32);
        let zeros = Tensor::zeros(&[3]);
        let out = layer_norm(&Tensor::from_vec(&[3], vec![5.0f32; 3]), &ones, &zeros).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);

        let out = layer_norm(
            &Tensor::from_vec(&[2], vec![1.0f64, -1.0]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
        )
        .unwrap();
        // variance 1 plus eps
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.data()[0] - expected).abs() < 1e-12);
        assert!((out.data()[1] + expected).abs() < 1e-12);

        let bias = Tensor::from_vec(&[2], vec![0.5f32, -2.0]);
        let out = layer_norm(
            &Tensor::from_vec(&[2], vec![3.0f32, 7.0]),
            &Tensor::zeros(&[2]),
            &bias,
        )
        .unwrap();
        assert_eq!(out.data(), bias.data());
    }

    #[test]
    fn constructor_rejects_bad_lengths() {
        assert!(matches!(
            Tensor::new(&[2, 2], vec![1.0f32; 3]),
            Err(TensorError::DataLength { expected: 4, actual: 3, .. })
        ));
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
    }
}
