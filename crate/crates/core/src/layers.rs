//! Trainable layer primitives with explicit forward and backward passes.
//!
//! Forward passes return their cache instead of storing it, so one layer can
//! process both augmented views of a batch before either backward pass runs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Role of a parameter. Only [`ParamKind::Weight`] receives weight decay and
/// LARS trust-ratio scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGain,
    BnBias,
}

impl ParamKind {
    pub fn is_weight(self) -> bool {
        self == ParamKind::Weight
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::BnGain => 2,
            ParamKind::BnBias => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::BnGain,
            3 => ParamKind::BnBias,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub kind: ParamKind,
    pub values: Matrix<T>,
    pub grads: Matrix<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, kind: ParamKind, values: Matrix<T>) -> Self {
        let grads = Matrix::zeros(values.rows(), values.cols());
        Self {
            name: name.into(),
            kind,
            values,
            grads,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(T::zero());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer `y = x W + b`, with `W` stored in x out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: ParamTensor<T>,
    pub bias: Option<ParamTensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// He-normal weights `N(0, 2 / fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / in_dim.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = Matrix::from_fn(in_dim, out_dim, |_, _| T::lit(normal.sample(rng)));
        let b = with_bias.then(|| Matrix::zeros(1, out_dim));
        Self::from_parts(name, w, b)
    }

    pub fn from_parts(name: &str, weight: Matrix<T>, bias: Option<Matrix<T>>) -> Self {
        Self {
            weight: ParamTensor::new(format!("{name}.weight"), ParamKind::Weight, weight),
            bias: bias.map(|b| ParamTensor::new(format!("{name}.bias"), ParamKind::Bias, b)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.values.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.values.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul(&self.weight.values)?;
        if let Some(b) = &self.bias {
            let b = b.values.row(0);
            for r in 0..y.rows() {
                for (v, &bi) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bi;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the gradient on `x`.
    pub fn backward(&mut self, x: &Matrix<T>, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        if grad_out.shape() != (x.rows(), self.out_dim()) {
            return Err(Error::ShapeMismatch {
                op: "linear_backward",
                left: (x.rows(), self.out_dim()),
                right: grad_out.shape(),
            });
        }
        self.weight.grads.add_assign(&x.matmul_tn(grad_out)?)?;
        if let Some(b) = &mut self.bias {
            for (g, s) in b.grads.row_mut(0).iter_mut().zip(grad_out.column_sums()) {
                *g += s;
            }
        }
        grad_out.matmul_nt(&self.weight.values)
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}

/// Running statistics used by inference-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Fraction of the old running value kept on each update.
    pub momentum: T,
    pub eps: T,
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gain: ParamTensor<T>,
    pub bias: ParamTensor<T>,
    pub state: BatchNormState<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    x_hat: Matrix<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gain: ParamTensor::new(
                format!("{name}.gain"),
                ParamKind::BnGain,
                Matrix::filled(1, dim, T::one()),
            ),
            bias: ParamTensor::new(
                format!("{name}.bias"),
                ParamKind::BnBias,
                Matrix::zeros(1, dim),
            ),
            state: BatchNormState {
                running_mean: vec![T::zero(); dim],
                running_var: vec![T::one(); dim],
                momentum: T::lit(DEFAULT_BN_MOMENTUM),
                eps: T::lit(DEFAULT_BN_EPS),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.values.cols()
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: (x.rows(), self.dim()),
                right: x.shape(),
            });
        }
        Ok(())
    }

    /// Standardizes each column with the batch mean and biased variance and
    /// folds the batch statistics into the running estimates.
    pub fn forward_train(&mut self, x: &Matrix<T>) -> Result<(Matrix<T>, BatchNormCache<T>)> {
        self.check_input(x)?;
        let n = x.rows();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let nf = T::lit(n as f64);
        let mean: Vec<T> = x.column_sums().into_iter().map(|s| s / nf).collect();
        let mut var = vec![T::zero(); self.dim()];
        for row in x.row_iter() {
            for ((v, &xi), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = xi - mu;
                *v += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + self.state.eps).sqrt())
            .collect();

        let mut x_hat = x.clone();
        for r in 0..n {
            for ((v, &mu), &is) in x_hat.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - mu) * is;
            }
        }
        let y = self.affine(&x_hat);

        let m = self.state.momentum;
        let unbias = nf / T::lit((n - 1) as f64);
        for j in 0..self.dim() {
            self.state.running_mean[j] = m * self.state.running_mean[j] + (T::one() - m) * mean[j];
            self.state.running_var[j] =
                m * self.state.running_var[j] + (T::one() - m) * var[j] * unbias;
        }
        Ok((y, BatchNormCache { x_hat, inv_std }))
    }

    /// Inference mode: normalizes with the running statistics.
    pub fn forward_eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let inv_std: Vec<T> = self
            .state
            .running_var
            .iter()
            .map(|&v| T::one() / (v + self.state.eps).sqrt())
            .collect();
        let mut x_hat = x.clone();
        for r in 0..x.rows() {
            for ((v, &mu), &is) in x_hat
                .row_mut(r)
                .iter_mut()
                .zip(&self.state.running_mean)
                .zip(&inv_std)
            {
                *v = (*v - mu) * is;
            }
        }
        Ok(self.affine(&x_hat))
    }

    fn affine(&self, x_hat: &Matrix<T>) -> Matrix<T> {
        let mut y = x_hat.clone();
        let g = self.gain.values.row(0);
        let b = self.bias.values.row(0);
        for r in 0..y.rows() {
            for ((v, &gi), &bi) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        y
    }

    /// Training-mode backward:
    /// `dx = inv_std / n * (n * dxh - sum(dxh) - x_hat * sum(dxh * x_hat))`.
    pub fn backward(
        &mut self,
        cache: &BatchNormCache<T>,
        grad_out: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        if grad_out.shape() != cache.x_hat.shape() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_backward",
                left: cache.x_hat.shape(),
                right: grad_out.shape(),
            });
        }
        let (n, d) = grad_out.shape();
        let nf = T::lit(n as f64);
        let gain = self.gain.values.row(0).to_vec();
        let mut sum_g = vec![T::zero(); d];
        let mut sum_gx = vec![T::zero(); d];
        for r in 0..n {
            for ((j, &g), &xh) in grad_out.row(r).iter().enumerate().zip(cache.x_hat.row(r)) {
                sum_g[j] += g;
                sum_gx[j] += g * xh;
            }
        }
        for j in 0..d {
            self.gain.grads.as_mut_slice()[j] += sum_gx[j];
            self.bias.grads.as_mut_slice()[j] += sum_g[j];
        }
        // Sums of dxh = g * gain are gain * sum_g and gain * sum_gx.
        let mut dx = Matrix::zeros(n, d);
        for r in 0..n {
            let g_row = grad_out.row(r);
            let xh_row = cache.x_hat.row(r);
            for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
                let scale = gain[j] * cache.inv_std[j] / nf;
                *out = scale * (nf * g_row[j] - sum_g[j] - xh_row[j] * sum_gx[j]);
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        [&self.gain, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        [&mut self.gain, &mut self.bias].into_iter()
    }
}

pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output; the derivative at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(output: &Matrix<T>, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
    output.zip_map(grad_out, |y, g| if y > T::zero() { g } else { T::zero() })
}
