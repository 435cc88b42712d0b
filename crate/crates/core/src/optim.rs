//! LARS and SGD-momentum with weight-decay exclusion, and the warmup +
//! cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::layers::ParamTensor;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Linear warmup followed by cosine annealing to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
            )));
        }
        if !(base_lr >= 0.0) || !base_lr.is_finite() {
            return Err(Error::InvalidArgument(format!("bad base_lr {base_lr}")));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }
}

pub fn lr_at(step: u64, s: &Schedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: s.total_steps,
        });
    }
    if step < s.warmup_steps {
        return Ok(s.base_lr * step as f64 / s.warmup_steps as f64);
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    Ok(0.5 * s.base_lr * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lars_eps: f64,
    pub trust_coefficient: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-6,
            lars_eps: 1e-9,
            trust_coefficient: 0.001,
        }
    }
}

/// Momentum buffers, one per parameter tensor, in parameter iteration order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    pub buffers: Vec<Matrix<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            buffers: Vec::new(),
        }
    }

    /// Lazily sizes the buffers on first use and checks them afterwards.
    fn prepare(&mut self, params: &[&mut ParamTensor<T>]) -> Result<()> {
        for p in params {
            if !p.grads.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.buffers.is_empty() {
            self.buffers = params
                .iter()
                .map(|p| Matrix::zeros(p.values.rows(), p.values.cols()))
                .collect();
        }
        if self.buffers.len() != params.len()
            || self
                .buffers
                .iter()
                .zip(params)
                .any(|(b, p)| b.shape() != p.values.shape())
        {
            return Err(Error::InvalidArgument(
                "optimizer buffers do not match the parameter list".into(),
            ));
        }
        Ok(())
    }

    /// LARS on `kind = weight` tensors, plain SGD-momentum (no decay, no
    /// trust ratio) on everything else.
    pub fn lars_step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut ParamTensor<T>>,
        lr: T,
    ) -> Result<()> {
        let mut params: Vec<_> = params.into_iter().collect();
        self.prepare(&params)?;
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        let tc = T::lit(self.config.trust_coefficient);
        let eps = T::lit(self.config.lars_eps);
        for (p, v) in params.iter_mut().zip(&mut self.buffers) {
            if p.kind.is_weight() {
                let mut g = p.grads.clone();
                g.axpy(wd, &p.values)?;
                let (wn, gn) = (p.values.norm(), g.norm());
                let trust = if wn > T::zero() && gn > T::zero() {
                    tc * wn / (gn + eps)
                } else {
                    T::one()
                };
                let step = trust * lr;
                for ((vi, &gi), wi) in v
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(p.values.as_mut_slice())
                {
                    *vi = mu * *vi + step * gi;
                    *wi -= *vi;
                }
            } else {
                for ((vi, &gi), wi) in v
                    .as_mut_slice()
                    .iter_mut()
                    .zip(p.grads.as_slice())
                    .zip(p.values.as_mut_slice())
                {
                    *vi = mu * *vi + gi;
                    *wi -= lr * *vi;
                }
            }
        }
        Ok(())
    }

    /// `v = momentum v + g (+ wd w for weights)`, `w -= lr v`.
    pub fn sgd_momentum_step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut ParamTensor<T>>,
        lr: T,
    ) -> Result<()> {
        let mut params: Vec<_> = params.into_iter().collect();
        self.prepare(&params)?;
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        for (p, v) in params.iter_mut().zip(&mut self.buffers) {
            let decay = if p.kind.is_weight() { wd } else { T::zero() };
            for ((vi, &gi), wi) in v
                .as_mut_slice()
                .iter_mut()
                .zip(p.grads.as_slice())
                .zip(p.values.as_mut_slice())
            {
                *vi = mu * *vi + gi + decay * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamKind;
    use proptest::prelude::*;

    fn tensor(kind: ParamKind, values: &[f64], grads: &[f64]) -> ParamTensor<f64> {
        let mut p = ParamTensor::new(
            "p",
            kind,
            Matrix::from_vec(1, values.len(), values.to_vec()).unwrap(),
        );
        p.grads = Matrix::from_vec(1, grads.len(), grads.to_vec()).unwrap();
        p
    }

    fn cfg(momentum: f64, weight_decay: f64, trust: f64) -> OptimConfig {
        OptimConfig {
            momentum,
            weight_decay,
            lars_eps: 0.0,
            trust_coefficient: trust,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(0.3, 10, 100).unwrap();
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert_eq!(lr_at(10, &s).unwrap(), 0.3);
        assert!(lr_at(100, &s).unwrap().abs() < 1e-12);
        assert!(matches!(lr_at(101, &s), Err(Error::StepOutOfRange { .. })));
        assert!(Schedule::new(0.1, 5, 5).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_warmup() {
        let s = Schedule::new(1.0, 1000, 5000).unwrap();
        let before = lr_at(999, &s).unwrap();
        let at = lr_at(1000, &s).unwrap();
        let after = lr_at(1001, &s).unwrap();
        assert!((at - before).abs() < 2e-3 && (at - after).abs() < 2e-3);
    }

    #[test]
    fn lars_zero_gradient_is_a_no_op() {
        let mut p = tensor(ParamKind::Weight, &[1.0, -2.0], &[0.0, 0.0]);
        let mut st = OptimState::new(cfg(0.9, 0.0, 0.001));
        st.lars_step([&mut p], 0.5).unwrap();
        assert_eq!(p.values.as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn lars_scalar_example() {
        let mut p = tensor(ParamKind::Weight, &[2.0], &[1.0]);
        let mut st = OptimState::new(cfg(0.0, 0.0, 1.0));
        st.lars_step([&mut p], 0.1).unwrap();
        assert!((p.values.as_slice()[0] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn lars_bias_is_plain_sgd_momentum() {
        for scale in [1e-3, 1.0, 1e3] {
            let mut lars_p = tensor(ParamKind::Bias, &[scale, -scale], &[0.5, 0.25]);
            let mut sgd_p = lars_p.clone();
            let mut a = OptimState::new(cfg(0.9, 0.1, 0.001));
            let mut b = OptimState::new(cfg(0.9, 0.0, 0.001));
            for _ in 0..3 {
                a.lars_step([&mut lars_p], 0.1).unwrap();
                b.sgd_momentum_step([&mut sgd_p], 0.1).unwrap();
            }
            assert_eq!(lars_p.values, sgd_p.values);
        }
    }

    #[test]
    fn non_weights_never_decay() {
        for kind in [ParamKind::Bias, ParamKind::BnGain, ParamKind::BnBias] {
            let mut p = tensor(kind, &[3.0, -1.0], &[0.0, 0.0]);
            let mut st = OptimState::new(cfg(0.9, 0.5, 0.001));
            st.lars_step([&mut p], 1.0).unwrap();
            st.sgd_momentum_step([&mut p], 1.0).unwrap();
            assert_eq!(p.values.as_slice(), &[3.0, -1.0]);
        }
    }

    #[test]
    fn non_finite_gradient_rejected_before_any_write() {
        let mut good = tensor(ParamKind::Weight, &[1.0], &[1.0]);
        let mut bad = tensor(ParamKind::Weight, &[1.0], &[f64::NAN]);
        let mut st = OptimState::new(OptimConfig::default());
        let err = st.lars_step([&mut good, &mut bad], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(_)));
        assert_eq!(good.values.as_slice(), &[1.0]);
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let mut p = tensor(ParamKind::Weight, &[1.0, 2.0], &[0.5, -1.0]);
        let mut st = OptimState::new(cfg(0.0, 0.0, 0.0));
        st.sgd_momentum_step([&mut p], 0.1).unwrap();
        assert_eq!(p.values.as_slice(), &[1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn sgd_on_quadratic_converges_geometrically() {
        let lr = 0.1;
        let mut p = tensor(ParamKind::Weight, &[4.0], &[0.0]);
        let mut st = OptimState::new(cfg(0.0, 0.0, 0.0));
        for t in 1..=50 {
            p.grads.as_mut_slice()[0] = p.values.as_slice()[0];
            st.sgd_momentum_step([&mut p], lr).unwrap();
            let expect = 4.0 * (1.0 - lr).powi(t);
            assert!((p.values.as_slice()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_shrinks_multiplicatively() {
        let mut p = tensor(ParamKind::Weight, &[2.0, -4.0], &[0.0, 0.0]);
        let mut st = OptimState::new(cfg(0.0, 0.1, 0.0));
        st.sgd_momentum_step([&mut p], 0.5).unwrap();
        assert_eq!(p.values.as_slice(), &[2.0 * 0.95, -4.0 * 0.95]);
    }

    proptest! {
        #[test]
        fn lars_update_scales_with_weights_and_grads(
            w in proptest::collection::vec(-2.0f64..2.0, 6),
            g in proptest::collection::vec(-2.0f64..2.0, 6),
            c in 0.1f64..10.0,
        ) {
            prop_assume!(w.iter().any(|v| v.abs() > 1e-3) && g.iter().any(|v| v.abs() > 1e-3));
            let run = |s: f64| {
                let w: Vec<f64> = w.iter().map(|v| v * s).collect();
                let g: Vec<f64> = g.iter().map(|v| v * s).collect();
                let mut p = tensor(ParamKind::Weight, &w, &g);
                let mut st = OptimState::new(cfg(0.9, 1e-4, 0.001));
                st.lars_step([&mut p], 0.3).unwrap();
                w.iter().zip(p.values.as_slice()).map(|(a, b)| a - b).collect::<Vec<_>>()
            };
            let base = run(1.0);
            let scaled = run(c);
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
