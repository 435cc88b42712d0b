//! Encoder (backbone MLP + projection MLP), prediction head and the optional
//! momentum (EMA) shadow encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{relu, relu_backward, BatchNorm, BatchNormCache, Linear, Mode, ParamTensor};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Layer widths of the encoder and heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub input_dim: usize,
    /// Hidden widths of the backbone before the feature layer.
    pub backbone_dims: Vec<usize>,
    /// Width of the backbone output `h`, the frozen feature used by the linear probe.
    pub feature_dim: usize,
    /// Three linear layers, the last one of width `d`.
    pub projection_dims: [usize; 3],
    /// Hidden width and output width `d` of the prediction head.
    pub prediction_dims: [usize; 2],
    pub use_prediction_head: bool,
}

impl EncoderSpec {
    /// Desk-scale default widths for a given input dimension.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            backbone_dims: vec![256, 256],
            feature_dim: 128,
            projection_dims: [128, 128, 32],
            prediction_dims: [256, 32],
            use_prediction_head: true,
        }
    }

    /// Embedding size `d`.
    pub fn embed_dim(&self) -> usize {
        self.projection_dims[2]
    }

    /// Sets `d` on both the projection and prediction outputs.
    pub fn with_embed_dim(mut self, d: usize) -> Self {
        self.projection_dims[2] = d;
        self.prediction_dims[1] = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let widths = std::iter::once(self.input_dim)
            .chain(self.backbone_dims.iter().copied())
            .chain([self.feature_dim])
            .chain(self.projection_dims)
            .chain(self.prediction_dims);
        if widths.into_iter().any(|w| w == 0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        if self.prediction_dims[1] != self.projection_dims[2] {
            return Err(Error::InvalidArgument(format!(
                "prediction output {} must equal embedding size {}",
                self.prediction_dims[1], self.projection_dims[2]
            )));
        }
        Ok(())
    }
}

/// Linear layer, optionally followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub linear: Linear<T>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Matrix<T>,
    bn: Option<BatchNormCache<T>>,
    relu_out: Option<Matrix<T>>,
}

/// Cached activations of one [`Mlp`] forward pass.
#[derive(Clone, Debug)]
pub struct MlpTape<T> {
    blocks: Vec<BlockCache<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub blocks: Vec<Block<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds `widths.len() - 1` blocks. `bn_relu[i]` configures block `i`.
    fn build<R: Rng + ?Sized>(
        name: &str,
        widths: &[usize],
        bn_relu: &[(bool, bool)],
        rng: &mut R,
    ) -> Self {
        let blocks = widths
            .windows(2)
            .zip(bn_relu)
            .enumerate()
            .map(|(i, (w, &(bn, relu)))| {
                let prefix = format!("{name}.{i}");
                Block {
                    linear: Linear::new(&format!("{prefix}.linear"), w[0], w[1], true, rng),
                    bn: bn.then(|| BatchNorm::new(&format!("{prefix}.bn"), w[1])),
                    relu,
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn forward_train(&mut self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpTape<T>)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &mut self.blocks {
            let mut y = block.linear.forward(&cur)?;
            let bn_cache = match &mut block.bn {
                Some(bn) => {
                    let (out, cache) = bn.forward_train(&y)?;
                    y = out;
                    Some(cache)
                }
                None => None,
            };
            let relu_out = if block.relu {
                y = relu(&y);
                Some(y.clone())
            } else {
                None
            };
            caches.push(BlockCache {
                input: std::mem::replace(&mut cur, y),
                bn: bn_cache,
                relu_out,
            });
        }
        Ok((cur, MlpTape { blocks: caches }))
    }

    pub fn forward_eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = block.linear.forward(&cur)?;
            if let Some(bn) = &block.bn {
                cur = bn.forward_eval(&cur)?;
            }
            if block.relu {
                cur = relu(&cur);
            }
        }
        Ok(cur)
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
        match mode {
            Mode::Train => self.forward_train(x).map(|(y, _)| y),
            Mode::Eval => self.forward_eval(x),
        }
    }

    /// Accumulates parameter gradients; returns the gradient on the input.
    pub fn backward(&mut self, tape: &MlpTape<T>, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        if tape.blocks.len() != self.blocks.len() {
            return Err(Error::InvalidArgument(
                "tape does not belong to this mlp".into(),
            ));
        }
        let mut grad = grad_out.clone();
        for (block, cache) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            if let Some(out) = &cache.relu_out {
                grad = relu_backward(out, &grad)?;
            }
            if let (Some(bn), Some(bc)) = (&mut block.bn, &cache.bn) {
                grad = bn.backward(bc, &grad)?;
            }
            grad = block.linear.backward(&cache.input, &grad)?;
        }
        Ok(grad)
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.blocks.iter().flat_map(|b| {
            b.linear
                .params()
                .chain(b.bn.iter().flat_map(|bn| bn.params()))
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.blocks.iter_mut().flat_map(|b| {
            b.linear
                .params_mut()
                .chain(b.bn.iter_mut().flat_map(|bn| bn.params_mut()))
        })
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm<T>> {
        self.blocks.iter().filter_map(|b| b.bn.as_ref())
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm<T>> {
        self.blocks.iter_mut().filter_map(|b| b.bn.as_mut())
    }
}

/// Backbone followed by the projection MLP: `x -> h -> z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub backbone: Mlp<T>,
    pub projection: Mlp<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderTape<T> {
    backbone: MlpTape<T>,
    projection: MlpTape<T>,
}

/// Output of one encoder pass. `z` is not normalized.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub h: Matrix<T>,
    pub z: Matrix<T>,
    pub tape: Option<EncoderTape<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R) -> Self {
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.backbone_dims);
        widths.push(spec.feature_dim);
        let backbone_cfg = vec![(true, true); widths.len() - 1];
        let backbone = Mlp::build("backbone", &widths, &backbone_cfg, rng);

        let p = spec.projection_dims;
        let projection = Mlp::build(
            "projection",
            &[spec.feature_dim, p[0], p[1], p[2]],
            &[(true, true), (true, true), (true, false)],
            rng,
        );
        Self {
            backbone,
            projection,
        }
    }

    pub fn encode_train(&mut self, x: &Matrix<T>) -> Result<Encoded<T>> {
        let (h, backbone) = self.backbone.forward_train(x)?;
        let (z, projection) = self.projection.forward_train(&h)?;
        Ok(Encoded {
            h,
            z,
            tape: Some(EncoderTape {
                backbone,
                projection,
            }),
        })
    }

    pub fn encode_eval(&self, x: &Matrix<T>) -> Result<Encoded<T>> {
        let h = self.backbone.forward_eval(x)?;
        let z = self.projection.forward_eval(&h)?;
        Ok(Encoded { h, z, tape: None })
    }

    /// Backpropagates a gradient on `z` into every encoder parameter.
    pub fn backward(&mut self, tape: &EncoderTape<T>, grad_z: &Matrix<T>) -> Result<Matrix<T>> {
        let grad_h = self.projection.backward(&tape.projection, grad_z)?;
        self.backbone.backward(&tape.backbone, &grad_h)
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.backbone.params().chain(self.projection.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.backbone
            .params_mut()
            .chain(self.projection.params_mut())
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm<T>> {
        self.backbone
            .batch_norms()
            .chain(self.projection.batch_norms())
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm<T>> {
        self.backbone
            .batch_norms_mut()
            .chain(self.projection.batch_norms_mut())
    }
}

/// EMA shadow of the online encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumEncoder<T> {
    pub shadow: Encoder<T>,
    pub m: T,
}

impl<T: Scalar> MomentumEncoder<T> {
    pub fn new(online: &Encoder<T>, m: T) -> Result<Self> {
        if !(m >= T::zero() && m < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "EMA coefficient {m} outside [0, 1)"
            )));
        }
        Ok(Self {
            shadow: online.clone(),
            m,
        })
    }

    /// `shadow <- m * shadow + (1 - m) * online` for every parameter.
    pub fn ema_update(&mut self, online: &Encoder<T>) {
        ema_update(&mut self.shadow, online, self.m);
    }
}

/// `target <- m * target + (1 - m) * online`, parameter by parameter.
pub fn ema_update<T: Scalar>(target: &mut Encoder<T>, online: &Encoder<T>, m: T) {
    let keep = T::one() - m;
    for (t, o) in target.params_mut().zip(online.params()) {
        debug_assert_eq!(t.values.shape(), o.values.shape());
        for (tv, &ov) in t.values.as_mut_slice().iter_mut().zip(o.values.as_slice()) {
            *tv = m * *tv + keep * ov;
        }
    }
}

/// Online encoder, prediction head and optional momentum encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: EncoderSpec,
    pub encoder: Encoder<T>,
    pub prediction: Option<Mlp<T>>,
    pub momentum: Option<MomentumEncoder<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let encoder = Encoder::new(&spec, rng);
        let [hidden, d] = spec.prediction_dims;
        let prediction = spec.use_prediction_head.then(|| {
            Mlp::build(
                "prediction",
                &[spec.embed_dim(), hidden, d],
                &[(true, true), (false, false)],
                rng,
            )
        });
        Ok(Self {
            spec,
            encoder,
            prediction,
            momentum: None,
        })
    }

    pub fn enable_momentum(&mut self, m: T) -> Result<()> {
        self.momentum = Some(MomentumEncoder::new(&self.encoder, m)?);
        Ok(())
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: (x.rows(), self.spec.input_dim),
                right: x.shape(),
            });
        }
        Ok(())
    }

    /// Runs the online encoder. Training mode uses batch statistics and keeps
    /// a tape for [`Model::backward_encoder`].
    pub fn encode(&mut self, x: &Matrix<T>, mode: Mode) -> Result<Encoded<T>> {
        self.check_input(x)?;
        match mode {
            Mode::Train => self.encoder.encode_train(x),
            Mode::Eval => self.encoder.encode_eval(x),
        }
    }

    pub fn encode_eval(&self, x: &Matrix<T>) -> Result<Encoded<T>> {
        self.check_input(x)?;
        self.encoder.encode_eval(x)
    }

    /// Frozen backbone features `h` (inference-mode batch norm).
    pub fn features(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        self.encoder.backbone.forward_eval(x)
    }

    /// Applies the prediction head `g`; identity when the head is disabled.
    pub fn predict(
        &mut self,
        z: &Matrix<T>,
        mode: Mode,
    ) -> Result<(Matrix<T>, Option<MlpTape<T>>)> {
        match (&mut self.prediction, mode) {
            (None, _) => Ok((z.clone(), None)),
            (Some(head), Mode::Train) => head.forward_train(z).map(|(p, t)| (p, Some(t))),
            (Some(head), Mode::Eval) => head.forward_eval(z).map(|p| (p, None)),
        }
    }

    /// Gradient on `z` from a gradient on `p`.
    pub fn backward_prediction(
        &mut self,
        tape: Option<&MlpTape<T>>,
        grad_p: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        match (&mut self.prediction, tape) {
            (None, _) => Ok(grad_p.clone()),
            (Some(head), Some(tape)) => head.backward(tape, grad_p),
            (Some(_), None) => Err(Error::InvalidArgument(
                "prediction backward needs a training-mode tape".into(),
            )),
        }
    }

    pub fn backward_encoder(
        &mut self,
        tape: &EncoderTape<T>,
        grad_z: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        self.encoder.backward(tape, grad_z)
    }

    /// Target-side embeddings: the momentum encoder when enabled, else `None`.
    pub fn encode_target(&mut self, x: &Matrix<T>) -> Result<Option<Matrix<T>>> {
        self.check_input(x)?;
        match &mut self.momentum {
            Some(mom) => Ok(Some(mom.shadow.encode_train(x)?.z)),
            None => Ok(None),
        }
    }

    pub fn ema_step(&mut self) {
        if let Some(mom) = &mut self.momentum {
            mom.ema_update(&self.encoder);
        }
    }

    /// Trainable parameters of the online network in a fixed order.
    pub fn params(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.encoder
            .params()
            .chain(self.prediction.iter().flat_map(|p| p.params()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.encoder
            .params_mut()
            .chain(self.prediction.iter_mut().flat_map(|p| p.params_mut()))
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm<T>> {
        self.encoder
            .batch_norms()
            .chain(self.prediction.iter().flat_map(|p| p.batch_norms()))
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm<T>> {
        self.encoder
            .batch_norms_mut()
            .chain(self.prediction.iter_mut().flat_map(|p| p.batch_norms_mut()))
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(|p| p.zero_grad());
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.values.as_slice().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::BatchNorm;
    use crate::losses::simclr_loss;
    use crate::numerics::{finite_difference_gradient, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> EncoderSpec {
        EncoderSpec {
            input_dim: 5,
            backbone_dims: vec![6],
            feature_dim: 4,
            projection_dims: [5, 5, 3],
            prediction_dims: [6, 3],
            use_prediction_head: true,
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn layer_layout_follows_head_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::<f64>::new(small_spec(), &mut rng).unwrap();
        let proj = &model.encoder.projection.blocks;
        assert_eq!(proj.len(), 3);
        assert!(proj.iter().all(|b| b.bn.is_some()));
        assert_eq!(
            proj.iter().map(|b| b.relu).collect::<Vec<_>>(),
            [true, true, false]
        );
        let pred = &model.prediction.as_ref().unwrap().blocks;
        assert_eq!(pred.len(), 2);
        assert!(pred[0].bn.is_some() && pred[0].relu);
        assert!(pred[1].bn.is_none() && !pred[1].relu);
    }

    #[test]
    fn zero_depth_backbone_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = EncoderSpec {
            input_dim: 3,
            backbone_dims: vec![],
            feature_dim: 3,
            projection_dims: [3, 3, 3],
            prediction_dims: [4, 3],
            use_prediction_head: false,
        };
        let mut model = Model::<f64>::new(spec, &mut rng).unwrap();
        for block in &mut model.encoder.projection.blocks {
            block.linear.weight.values = Matrix::identity(3);
        }
        let x = random(6, 3, &mut rng);

        // Oracle: apply the same layers one by one.
        let b0 = &model.encoder.backbone.blocks[0];
        let mut h = x.matmul(&b0.linear.weight.values).unwrap();
        h = relu(&b0.bn.as_ref().unwrap().forward_eval(&h).unwrap());
        let mut z = h.clone();
        for (i, block) in model.encoder.projection.blocks.iter().enumerate() {
            // identity weights, zero bias
            z = block.bn.as_ref().unwrap().forward_eval(&z).unwrap();
            if i < 2 {
                z = relu(&z);
            }
        }
        let out = model.encode(&x, Mode::Eval).unwrap();
        assert!(out.h.max_abs_diff(&h).unwrap() < 1e-15);
        assert!(out.z.max_abs_diff(&z).unwrap() < 1e-15);

        // With identity weights and fresh running stats the projection is an
        // affine map of h before the ReLUs kick in.
        let fresh = BatchNorm::<f64>::new("bn", 3);
        let scale = 1.0 / (1.0 + fresh.state.eps).sqrt();
        let expect_last = h.map(|v| v * scale * scale * scale);
        assert!(out.z.max_abs_diff(&expect_last).unwrap() < 1e-12);
    }

    #[test]
    fn single_row_eval_works_but_train_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = Model::<f64>::new(small_spec(), &mut rng).unwrap();
        let x = random(1, 5, &mut rng);
        assert!(model.encode(&x, Mode::Eval).is_ok());
        assert!(matches!(
            model.encode(&x, Mode::Train),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = Model::<f64>::new(small_spec(), &mut rng).unwrap();
        let x = random(4, 6, &mut rng);
        assert!(matches!(
            model.encode(&x, Mode::Train),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn encode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::<f64>::new(small_spec(), &mut rng).unwrap();
        let x = random(4, 5, &mut rng);
        let (mut a, mut b) = (model.clone(), model.clone());
        let za = a.encode(&x, Mode::Train).unwrap().z;
        let zb = b.encode(&x, Mode::Train).unwrap().z;
        assert_eq!(za, zb);
        assert_eq!(
            model.encode_eval(&x).unwrap().z,
            model.encode_eval(&x).unwrap().z
        );
    }

    #[test]
    fn disabled_prediction_head_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut spec = small_spec();
        spec.use_prediction_head = false;
        let mut model = Model::<f64>::new(spec, &mut rng).unwrap();
        let z = random(4, 3, &mut rng);
        let (p, tape) = model.predict(&z, Mode::Train).unwrap();
        assert_eq!(p, z);
        assert!(tape.is_none());
    }

    #[test]
    fn prediction_head_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut model = Model::<f64>::new(small_spec(), &mut rng).unwrap();
            let z = random(4, 3, &mut rng);
            let c = random(4, 3, &mut rng);
            let (p, tape) = model.predict(&z, Mode::Train).unwrap();
            assert!(p.is_finite());
            let g = model.backward_prediction(tape.as_ref(), &c).unwrap();
            let probe = model.clone();
            let num = finite_difference_gradient(
                |m| {
                    let mut mm = probe.clone();
                    mm.predict(m, Mode::Train).unwrap().0.dot(&c).unwrap()
                },
                &z,
                1e-5,
            );
            assert!(max_relative_error(&g, &num).unwrap() < 1e-4);
        }
    }

    #[test]
    fn loss_through_encoder_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let mut model = Model::<f64>::new(small_spec(), &mut rng).unwrap();
            let x1 = random(4, 5, &mut rng);
            let x2 = random(4, 5, &mut rng);
            let e1 = model.encode(&x1, Mode::Train).unwrap();
            let e2 = model.encode(&x2, Mode::Train).unwrap();
            let out = simclr_loss(&e1.z, &e2.z, 0.5).unwrap();
            let g1 = model
                .backward_encoder(e1.tape.as_ref().unwrap(), &out.grad_z1)
                .unwrap();
            let probe = model.clone();
            let f = |m: &Matrix<f64>| {
                let mut mm = probe.clone();
                let z1 = mm.encode(m, Mode::Train).unwrap().z;
                let z2 = mm.encode(&x2, Mode::Train).unwrap().z;
                simclr_loss(&z1, &z2, 0.5).unwrap().loss
            };
            let num = finite_difference_gradient(f, &x1, 1e-5);
            assert!(max_relative_error(&g1, &num).unwrap() < 1e-4);
        }
    }

    #[test]
    fn ema_extremes_and_geometric_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let online = Model::<f64>::new(small_spec(), &mut rng).unwrap().encoder;
        let mut other = Model::<f64>::new(small_spec(), &mut rng).unwrap().encoder;

        let mut target = other.clone();
        ema_update(&mut target, &online, 0.0);
        assert!(target
            .params()
            .zip(online.params())
            .all(|(a, b)| a.values == b.values));

        // m -> 1 limit
        let before = other.clone();
        ema_update(&mut other, &online, 1.0);
        assert!(other
            .params()
            .zip(before.params())
            .all(|(a, b)| a.values == b.values));

        let dist = |a: &Encoder<f64>| -> f64 {
            a.params()
                .zip(online.params())
                .map(|(p, q)| {
                    p.values
                        .as_slice()
                        .iter()
                        .zip(q.values.as_slice())
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        };
        let m = 0.9;
        let mut shadow = before.clone();
        let d0 = dist(&shadow);
        ema_update(&mut shadow, &online, m);
        let d1 = dist(&shadow);
        ema_update(&mut shadow, &online, m);
        let d2 = dist(&shadow);
        assert!((d1 - m * d0).abs() < 1e-12 * d0.max(1.0));
        assert!((d2 - m * m * d0).abs() < 1e-12 * d0.max(1.0));
    }

    #[test]
    fn momentum_coefficient_must_be_below_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = Model::<f64>::new(small_spec(), &mut rng).unwrap();
        assert!(model.enable_momentum(1.0).is_err());
        model.enable_momentum(0.99).unwrap();
        let mom = model.momentum.as_ref().unwrap();
        assert!(mom
            .shadow
            .params()
            .zip(model.encoder.params())
            .all(|(a, b)| a.values.shape() == b.values.shape()));
    }
}
