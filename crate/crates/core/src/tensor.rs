//! Dense row-major tensors and the forward operations the model is built
//! from.
//!
//! Training and inference run in `f32`; gradient checking instantiates the
//! same code in `f64`. The reverse-mode derivatives of every operation
//! here live in [`crate::tape`]; this module holds the value-level math
//! (shared kernels) and a plain-tensor API for code that does not need
//! gradients.

use num_traits::Float;
use std::collections::BTreeMap;

use crate::rng::RngStream;

/// Element type for tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Whether stochastic layers (dropout, augmentation) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: every extent must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("value count {got} does not match shape {shape:?} ({expected} expected)")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("embedding id {id} out of range (table has {rows} rows)")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("non-finite loss while evaluating '{0}'")]
    NonFiniteLoss(String),
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor with an optional same-shape gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    values: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Validating constructor: positive extents, matching length, all
    /// values finite.
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape { shape });
        }
        let expected = numel(&shape);
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![S::zero(); n],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Attach a gradient buffer; must match the value shape.
    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<(), TensorError> {
        if grad.len() != self.values.len() {
            return Err(TensorError::LengthMismatch {
                shape: self.shape.clone(),
                expected: self.values.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same values under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor<S>, TensorError> {
        if numel(&shape) != self.values.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            values: self.values.clone(),
            grad: None,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| v.as_f64()).collect(),
            grad: None,
        }
    }

    pub fn from_f64(t: &Tensor<f64>) -> Tensor<S> {
        Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|&v| S::from_f64(v)).collect(),
            grad: None,
        }
    }
}

/// Named parameter collection; ordered by name so every iteration over it
/// is deterministic.
pub type NamedTensors<S> = BTreeMap<String, Tensor<S>>;

// ── Shared kernels ──────────────────────────────────────────────────
//
// Raw slice-level math used by both the plain-tensor API below and the
// tape in `crate::tape`, so forward values agree between the two paths.

pub(crate) mod kernels {
    use super::Scalar;

    /// `c += op(a) @ op(b)` where `op` optionally transposes the stored
    /// row-major operand. Result dims are `m × n` with inner dim `k`
    /// *after* transposition: if `ta`, `a` is stored `[k, m]`; if `tb`,
    /// `b` is stored `[n, k]`.
    pub fn matmul_acc<S: Scalar>(
        c: &mut [S],
        a: &[S],
        b: &[S],
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    ) {
        match (ta, tb) {
            (false, false) => {
                for i in 0..m {
                    let arow = &a[i * k..(i + 1) * k];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (t, &av) in arow.iter().enumerate() {
                        let brow = &b[t * n..(t + 1) * n];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv = *cv + av * bv;
                        }
                    }
                }
            }
            (false, true) => {
                // b stored [n, k]; c[i][j] = dot(a_row_i, b_row_j)
                for i in 0..m {
                    let arow = &a[i * k..(i + 1) * k];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (j, cv) in crow.iter_mut().enumerate() {
                        let brow = &b[j * k..(j + 1) * k];
                        let dot: S = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        *cv = *cv + dot;
                    }
                }
            }
            (true, false) => {
                // a stored [k, m]; c[i][j] += a[t][i] * b[t][j]
                for t in 0..k {
                    let arow = &a[t * m..(t + 1) * m];
                    let brow = &b[t * n..(t + 1) * n];
                    for (i, &av) in arow.iter().enumerate() {
                        let crow = &mut c[i * n..(i + 1) * n];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv = *cv + av * bv;
                        }
                    }
                }
            }
            (true, true) => {
                // c[i][j] += a[t][i] * b[j][t]
                for i in 0..m {
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (j, cv) in crow.iter_mut().enumerate() {
                        let mut dot = S::zero();
                        for t in 0..k {
                            dot = dot + a[t * m + i] * b[j * k + t];
                        }
                        *cv = *cv + dot;
                    }
                }
            }
        }
    }

    pub fn relu<S: Scalar>(x: S) -> S {
        if x > S::zero() {
            x
        } else {
            S::zero()
        }
    }

    pub fn sigmoid<S: Scalar>(x: S) -> S {
        let one = S::one();
        if x >= S::zero() {
            one / (one + (-x).exp())
        } else {
            let e = x.exp();
            e / (one + e)
        }
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const GELU_A: f64 = 0.044_715;

    /// GELU in its tanh form; the backward pass in the tape differentiates
    /// this exact expression.
    pub fn gelu<S: Scalar>(x: S) -> S {
        let c = S::from_f64(GELU_C);
        let a = S::from_f64(GELU_A);
        let half = S::from_f64(0.5);
        let u = c * (x + a * x * x * x);
        half * x * (S::one() + u.tanh())
    }

    pub fn gelu_derivative<S: Scalar>(x: S) -> S {
        let c = S::from_f64(GELU_C);
        let a = S::from_f64(GELU_A);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        let u = c * (x + a * x * x * x);
        let t = u.tanh();
        let sech2 = S::one() - t * t;
        half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
    }

    /// Numerically stable softmax over one row, written in place.
    pub fn softmax_row<S: Scalar>(row: &mut [S]) {
        let max = row
            .iter()
            .cloned()
            .fold(S::neg_infinity(), |acc, v| acc.max(v));
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }

    /// Layer norm over `d`-length rows with population variance; fills
    /// `out` and records per-row mean and reciprocal standard deviation
    /// for the backward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_norm_rows<S: Scalar>(
        out: &mut [S],
        x: &[S],
        gamma: &[S],
        beta: &[S],
        eps: S,
        d: usize,
        mean_out: &mut [S],
        rstd_out: &mut [S],
    ) {
        let rows = x.len() / d;
        let dn = S::from_f64(d as f64);
        for r in 0..rows {
            let xs = &x[r * d..(r + 1) * d];
            let mean = xs.iter().cloned().sum::<S>() / dn;
            let var = xs
                .iter()
                .map(|&v| {
                    let c = v - mean;
                    c * c
                })
                .sum::<S>()
                / dn;
            let rstd = S::one() / (var + eps).sqrt();
            mean_out[r] = mean;
            rstd_out[r] = rstd;
            let os = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                os[i] = gamma[i] * ((xs[i] - mean) * rstd) + beta[i];
            }
        }
    }

    /// Per-sample binary cross-entropy from a logit, in the stable
    /// softplus form `max(z,0) − z·y + ln(1+exp(−|z|))`.
    pub fn bce_from_logit<S: Scalar>(z: S, y: S) -> S {
        z.max(S::zero()) - z * y + (-z.abs()).exp().ln_1p()
    }
}

// ── Plain-tensor operations ─────────────────────────────────────────

/// `a[m×k] @ b[k×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: ash.to_vec(),
            right: bsh.to_vec(),
        });
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let mut out = vec![S::zero(); m * n];
    kernels::matmul_acc(&mut out, a.values(), b.values(), m, k, n, false, false);
    Tensor::new(vec![m, n], out)
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>, TensorError> {
    let d = *x.shape().last().ok_or(TensorError::EmptyInput("layer_norm"))?;
    if gamma.len() != d || beta.len() != d {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    if eps <= S::zero() {
        return Err(TensorError::InvalidParam(
            "layer_norm eps must be positive".into(),
        ));
    }
    let rows = x.len() / d;
    let mut out = vec![S::zero(); x.len()];
    let mut mean = vec![S::zero(); rows];
    let mut rstd = vec![S::zero(); rows];
    kernels::layer_norm_rows(
        &mut out,
        x.values(),
        gamma.values(),
        beta.values(),
        eps,
        d,
        &mut mean,
        &mut rstd,
    );
    Tensor::new(x.shape().to_vec(), out)
}

/// Softmax over the last axis.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let d = *x.shape().last().ok_or(TensorError::EmptyInput("softmax"))?;
    let mut out = x.values().to_vec();
    for row in out.chunks_mut(d) {
        kernels::softmax_row(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(kernels::relu)
}

pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(kernels::gelu)
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(kernels::sigmoid)
}

pub fn tanh<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.tanh())
}

/// Inverted dropout: in train mode each coordinate is zeroed with
/// probability `rate` and survivors are scaled by `1/(1−rate)`; in infer
/// mode the input is returned unchanged.
pub fn dropout<S: Scalar>(
    x: &Tensor<S>,
    rate: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Tensor<S>, TensorError> {
    let coeffs = dropout_coeffs(x.len(), rate, mode, rng)?;
    match coeffs {
        None => Ok(x.clone()),
        Some(cs) => {
            let values = x
                .values()
                .iter()
                .zip(&cs)
                .map(|(&v, &c)| v * c)
                .collect();
            Ok(Tensor {
                shape: x.shape().to_vec(),
                values,
                grad: None,
            })
        }
    }
}

/// Per-coordinate dropout coefficients (`0` or `1/(1−rate)`), or `None`
/// when dropout is a no-op. Shared with the tape so both paths draw the
/// same masks.
pub(crate) fn dropout_coeffs<S: Scalar>(
    len: usize,
    rate: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Option<Vec<S>>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidParam(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(None);
    }
    let keep = S::from_f64(1.0 / (1.0 - rate));
    let coeffs = (0..len)
        .map(|_| {
            if rng.next_f64() < rate {
                S::zero()
            } else {
                keep
            }
        })
        .collect();
    Ok(Some(coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], values: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn construction_validates_shape_length_and_finiteness() {
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 0], vec![]),
            Err(TensorError::InvalidShape { .. })
        ));
        assert!(matches!(
            Tensor::<f64>::new(vec![2], vec![1.0]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i2, &b).unwrap().values(), b.values());
    }

    #[test]
    fn matmul_one_by_one() {
        let a = t(&[1, 1], &[2.0]);
        let b = t(&[1, 1], &[3.0]);
        assert_eq!(matmul(&a, &b).unwrap().values(), &[6.0]);
    }

    #[test]
    fn matmul_two_by_two_hand_expansion() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(
            matmul(&a, &b).unwrap().values(),
            &[19.0, 22.0, 43.0, 50.0]
        );
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn layer_norm_constant_input_is_zeroed() {
        let x = t(&[4], &[3.5, 3.5, 3.5, 3.5]);
        let gamma = Tensor::full(vec![4], 1.0);
        let beta = Tensor::zeros(vec![4]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.values() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_unit_variance_case() {
        // mean 0, population variance 1
        let x = t(&[2], &[1.0, -1.0]);
        let gamma = Tensor::full(vec![2], 1.0);
        let beta = Tensor::zeros(vec![2]);
        let y = layer_norm(&x, &gamma, &beta, 1e-300).unwrap();
        assert!((y.values()[0] - 1.0).abs() < 1e-12);
        assert!((y.values()[1] + 1.0).abs() < 1e-12);

        let gamma2 = Tensor::full(vec![2], 2.0);
        let beta1 = Tensor::full(vec![2], 1.0);
        let y2 = layer_norm(&x, &gamma2, &beta1, 1e-300).unwrap();
        assert!((y2.values()[0] - 3.0).abs() < 1e-12);
        assert!((y2.values()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.values(), &[0.5, 0.5]);

        let y = softmax(&t(&[2], &[std::f64::consts::LN_2, 0.0])).unwrap();
        assert!((y.values()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((y.values()[1] - 1.0 / 3.0).abs() < 1e-12);

        // max subtraction keeps huge inputs finite
        let y = softmax(&t(&[2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(y.values(), &[0.5, 0.5]);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(kernels::sigmoid(0.0f64), 0.5);
        assert!((kernels::sigmoid(3.0f64.ln()) - 0.75).abs() < 1e-12);
        let r = relu(&t(&[3], &[-2.0, 0.0, 3.0]));
        assert_eq!(r.values(), &[0.0, 0.0, 3.0]);
        assert_eq!(tanh(&t(&[1], &[0.0])).values(), &[0.0]);
    }

    #[test]
    fn dropout_infer_is_identity_and_rate_zero_is_identity() {
        let x = t(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut rng = RngStream::new(42, 0);
        let y = dropout(&x, 0.3, Mode::Infer, &mut rng).unwrap();
        assert_eq!(y.values(), x.values());
        let y = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn dropout_preserves_mean_on_fixed_seed() {
        let x: Tensor<f64> = Tensor::full(vec![10000], 1.0);
        let mut rng = RngStream::new(42, 0);
        let y = dropout(&x, 0.3, Mode::Train, &mut rng).unwrap();
        let mean = y.values().iter().sum::<f64>() / 10000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let x: Tensor<f64> = Tensor::full(vec![4], 1.0);
        let mut rng = RngStream::new(1, 0);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_masks_are_reproducible() {
        let x: Tensor<f64> = Tensor::full(vec![256], 1.0);
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let ya = dropout(&x, 0.5, Mode::Train, &mut a).unwrap();
        let yb = dropout(&x, 0.5, Mode::Train, &mut b).unwrap();
        assert_eq!(ya.values(), yb.values());
    }

    #[test]
    fn bce_from_logit_matches_direct_formula_in_the_interior() {
        let z: f64 = 0.3;
        let p = kernels::sigmoid(z);
        let direct = -(p.ln());
        assert!((kernels::bce_from_logit(z, 1.0) - direct).abs() < 1e-12);
        // saturated logits stay finite
        assert!(kernels::bce_from_logit(1e6f64, 1.0).is_finite());
        assert!(kernels::bce_from_logit(-1e6f64, 0.0).is_finite());
    }
}
