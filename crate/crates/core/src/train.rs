//! The pretraining loop: two views, encode, predict, retrieve, loss,
//! backward, optimizer step, EMA, queue update, metrics.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_batch, AugmentPolicy};
use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::layers::{BatchNormState, Mode};
use crate::losses::{nnclr_loss_from_neighbors, nnsiam_loss, two_view_contrastive, LossOutput};
use crate::model::{EncoderSpec, Model};
use crate::numerics::{Matrix, NormalizedRows, DEFAULT_NORM_EPS};
use crate::optim::{lr_at, OptimConfig, OptimState, Schedule};
use crate::scalar::Scalar;
use crate::support_set::{match_rate, Replacement, SupportSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Simclr,
    Nnclr,
    Nnsiam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NnKind {
    Hard,
    Soft,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Lars,
    Sgd,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $s),+ }
            }
        }
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(Objective { Simclr => "simclr", Nnclr => "nnclr", Nnsiam => "nnsiam" });
str_enum!(NnKind { Hard => "hard", Soft => "soft", Oracle => "oracle" });
str_enum!(OptimizerKind { Lars => "lars", Sgd => "sgd" });

/// Encoder widths; the input width comes from the data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub backbone_dims: Vec<usize>,
    pub feature_dim: usize,
    pub projection_hidden: [usize; 2],
    pub prediction_hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let d = EncoderSpec::desk(1);
        Self {
            backbone_dims: d.backbone_dims,
            feature_dim: d.feature_dim,
            projection_hidden: [d.projection_dims[0], d.projection_dims[1]],
            prediction_hidden: d.prediction_dims[0],
            embed_dim: d.projection_dims[2],
        }
    }
}

impl EncoderConfig {
    pub fn spec(&self, input_dim: usize, use_prediction_head: bool) -> EncoderSpec {
        EncoderSpec {
            input_dim,
            backbone_dims: self.backbone_dims.clone(),
            feature_dim: self.feature_dim,
            projection_dims: [
                self.projection_hidden[0],
                self.projection_hidden[1],
                self.embed_dim,
            ],
            prediction_dims: [self.prediction_hidden, self.embed_dim],
            use_prediction_head,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub tau: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub base_lr: f64,
    /// Multiply `base_lr` by `batch_size / 256`.
    pub scale_lr_by_batch: bool,
    pub optimizer: OptimizerKind,
    pub optim: OptimConfig,
    pub top_k: usize,
    pub nn_kind: NnKind,
    pub soft_temperature: f64,
    pub replacement: Replacement,
    pub use_prediction_head: bool,
    pub use_momentum_encoder: bool,
    pub momentum_coeff: f64,
    pub symmetric_denominator: bool,
    pub augment: AugmentPolicy,
    pub encoder: EncoderConfig,
    pub seed: u64,
    /// Queue invariant check and checkpoint cadence, in steps; 0 disables.
    pub eval_every: u64,
    /// Record `wall_ms` as null so metric files are byte-comparable.
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn new(objective: Objective, queue_size: usize, batch_size: usize, epochs: u64) -> Self {
        Self {
            objective,
            tau: 0.1,
            queue_size,
            batch_size,
            epochs,
            warmup_epochs: 0,
            base_lr: 1.0,
            scale_lr_by_batch: false,
            optimizer: OptimizerKind::Lars,
            optim: OptimConfig::default(),
            top_k: 1,
            nn_kind: NnKind::Hard,
            soft_temperature: 0.1,
            replacement: Replacement::Fifo,
            use_prediction_head: objective != Objective::Simclr,
            use_momentum_encoder: false,
            momentum_coeff: 0.99,
            symmetric_denominator: false,
            augment: AugmentPolicy::default(),
            encoder: EncoderConfig::default(),
            seed: 0,
            eval_every: 0,
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if !(self.tau > 0.0) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2".into());
        }
        if self.queue_size < self.batch_size {
            return bad(
                "queue_size",
                format!(
                    "{} is smaller than batch_size {}",
                    self.queue_size, self.batch_size
                ),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad("optim.warmup_epochs", "must be below epochs".into());
        }
        if self.top_k == 0 || self.top_k > self.queue_size {
            return bad(
                "top_k",
                format!("must lie in [1, queue_size], got {}", self.top_k),
            );
        }
        if !(self.soft_temperature > 0.0) {
            return bad("soft_temperature", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum_coeff) {
            return bad("momentum_encoder.m", "must lie in [0, 1)".into());
        }
        if !(self.base_lr >= 0.0) {
            return bad("optim.base_lr", "must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return bad("optim.momentum", "must lie in [0, 1)".into());
        }
        if self.encoder.embed_dim == 0 || self.encoder.feature_dim == 0 {
            return bad("encoder.embed_dim", "widths must be positive".into());
        }
        self.augment
            .validate()
            .map_err(|e| Error::config("augment", e.to_string()))?;
        Ok(())
    }

    pub fn uses_queue(&self) -> bool {
        self.objective != Objective::Simclr
    }

    pub fn effective_lr(&self) -> f64 {
        if self.scale_lr_by_batch {
            self.base_lr * self.batch_size as f64 / 256.0
        } else {
            self.base_lr
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub nn_match: Option<f64>,
    pub wall_ms: Option<f64>,
}

/// Result of a single optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub lr: f64,
    pub nn_match: Option<f64>,
}

/// Model, optimizer, queue and RNG state of a run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optim: OptimState<T>,
    pub queue: Option<SupportSet<T>>,
    pub schedule: Schedule,
    pub step: u64,
    pub steps_per_epoch: u64,
    pub sampler_rng: ChaCha8Rng,
}

/// RNG streams derived from the run seed.
const STREAM_SAMPLER: u64 = 1;
const STREAM_QUEUE_LABELS: u64 = 2;

impl<T: Scalar> Trainer<T> {
    /// `num_classes` enables the queue label buffer (diagnostics and oracle
    /// retrieval); pass `None` for a label-free run.
    pub fn new(
        config: TrainConfig,
        input_dim: usize,
        steps_per_epoch: u64,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        config.validate()?;
        if steps_per_epoch == 0 {
            return Err(Error::config("batch_size", "larger than the training set"));
        }
        if config.nn_kind == NnKind::Oracle && config.uses_queue() && num_classes.is_none() {
            return Err(Error::LabelsUnavailable);
        }
        let total = config.epochs * steps_per_epoch;
        let schedule = Schedule::new(
            config.effective_lr(),
            config.warmup_epochs * steps_per_epoch,
            total,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spec = config.encoder.spec(input_dim, config.use_prediction_head);
        let mut model = Model::new(spec, &mut rng)?;
        if config.use_momentum_encoder {
            model.enable_momentum(T::lit(config.momentum_coeff))?;
        }
        let queue = config.uses_queue().then(|| {
            let mut q = SupportSet::new(
                config.queue_size,
                config.encoder.embed_dim,
                config.replacement,
                &mut rng,
            );
            if let Some(c) = num_classes {
                let mut label_rng = ChaCha8Rng::seed_from_u64(config.seed);
                label_rng.set_stream(STREAM_QUEUE_LABELS);
                q.enable_labels(c, &mut label_rng);
            }
            q
        });
        let mut sampler_rng = ChaCha8Rng::seed_from_u64(config.seed);
        sampler_rng.set_stream(STREAM_SAMPLER);
        Ok(Self {
            optim: OptimState::new(config.optim),
            config,
            model,
            queue,
            schedule,
            step: 0,
            steps_per_epoch,
            sampler_rng,
        })
    }

    /// Sizes the model and schedule for `data`; `with_labels` enables the
    /// queue label buffer.
    pub fn for_dataset(config: TrainConfig, data: &Dataset<T>, with_labels: bool) -> Result<Self> {
        let steps_per_epoch = (data.len() / config.batch_size.max(1)) as u64;
        let input_dim = config.augment.output_len(data.dim(), data.image);
        let classes = with_labels.then_some(data.num_classes);
        Self::new(config, input_dim, steps_per_epoch, classes)
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn queue_bytes(&self) -> usize {
        self.queue.as_ref().map_or(0, |q| q.queue_bytes())
    }

    fn bn_snapshot(&self) -> Vec<BatchNormState<T>> {
        let shadow = self
            .model
            .momentum
            .iter()
            .flat_map(|m| m.shadow.batch_norms());
        self.model
            .batch_norms()
            .chain(shadow)
            .map(|bn| bn.state.clone())
            .collect()
    }

    fn bn_restore(&mut self, states: Vec<BatchNormState<T>>) {
        let model = &mut self.model;
        let shadow = model
            .momentum
            .iter_mut()
            .flat_map(|m| m.shadow.batch_norms_mut());
        let online: Vec<_> = model.encoder.batch_norms_mut().collect();
        let head: Vec<_> = model
            .prediction
            .iter_mut()
            .flat_map(|p| p.batch_norms_mut())
            .collect();
        for (bn, s) in online.into_iter().chain(head).chain(shadow).zip(states) {
            bn.state = s;
        }
    }

    /// Retrieves positives for `query` according to the configured NN kind.
    fn retrieve(
        &mut self,
        query: &Matrix<T>,
        labels: Option<&[usize]>,
    ) -> Result<(Matrix<T>, Option<Vec<usize>>)> {
        let queue = self.queue.as_ref().expect("queue-based objective");
        match self.config.nn_kind {
            NnKind::Hard => {
                let r = queue.top_k_sample(query, self.config.top_k, &mut self.sampler_rng)?;
                let top1 = (self.config.top_k == 1).then_some(r.indices);
                Ok((r.neighbors, top1))
            }
            NnKind::Soft => Ok((
                queue
                    .soft_nn(query, T::lit(self.config.soft_temperature))?
                    .neighbors,
                None,
            )),
            NnKind::Oracle => {
                let labels = labels.ok_or(Error::LabelsUnavailable)?;
                let r = queue.oracle_nn(query, labels)?;
                Ok((r.neighbors, Some(r.indices)))
            }
        }
    }

    /// One training step on a pair of view batches. On failure the model,
    /// optimizer, queue and sampler are left as they were before the call.
    pub fn step_on_batch(
        &mut self,
        x1: &Matrix<T>,
        x2: &Matrix<T>,
        labels: Option<&[usize]>,
    ) -> Result<StepOutput> {
        let bn_before = self.bn_snapshot();
        let sampler_before = self.sampler_rng.clone();
        match self.try_step(x1, x2, labels) {
            Ok(out) => Ok(out),
            Err(e) => {
                self.bn_restore(bn_before);
                self.sampler_rng = sampler_before;
                self.model.zero_grad();
                Err(e)
            }
        }
    }

    fn try_step(
        &mut self,
        x1: &Matrix<T>,
        x2: &Matrix<T>,
        labels: Option<&[usize]>,
    ) -> Result<StepOutput> {
        let lr = lr_at(self.step, &self.schedule)?;
        self.model.zero_grad();

        let e1 = self.model.encode(x1, Mode::Train)?;
        let e2 = self.model.encode(x2, Mode::Train)?;
        let target1 = self.model.encode_target(x1)?;
        let target2 = self.model.encode_target(x2)?;
        let momentum = target1.is_some();
        let t1 = target1.unwrap_or_else(|| e1.z.clone());
        let t2 = target2.unwrap_or_else(|| e2.z.clone());
        let (p1, ptape1) = self.model.predict(&e1.z, Mode::Train)?;
        let (p2, ptape2) = self.model.predict(&e2.z, Mode::Train)?;

        let tau = T::lit(self.config.tau);
        let sym = self.config.symmetric_denominator;
        let mut nn_match = None;
        let out: LossOutput<T> = match self.config.objective {
            Objective::Simclr => two_view_contrastive(&t1, &t2, &p1, &p2, tau, sym, momentum)?,
            Objective::Nnclr | Objective::Nnsiam => {
                let (nn1, top1) = self.retrieve(&t1, labels)?;
                let (nn2, _) = self.retrieve(&t2, labels)?;
                let queue = self.queue.as_ref().expect("queue-based objective");
                if let (Some(stored), Some(ql)) = (queue.labels(), labels) {
                    nn_match = Some(match top1 {
                        Some(idx) => match_rate(&idx, stored, ql),
                        None => queue.nn_label_match_rate(&t1, ql)?,
                    });
                }
                if self.config.objective == Objective::Nnclr {
                    nnclr_loss_from_neighbors(&nn1, &nn2, &p1, &p2, tau, sym)?
                } else {
                    nnsiam_loss(&p1, &p2, &nn1, &nn2)?
                }
            }
        };
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteGradient("loss".into()));
        }

        let mut gz1 = self
            .model
            .backward_prediction(ptape1.as_ref(), &out.grad_p1)?;
        let mut gz2 = self
            .model
            .backward_prediction(ptape2.as_ref(), &out.grad_p2)?;
        if self.config.objective == Objective::Simclr && !momentum {
            gz1.add_assign(&out.grad_nn1)?;
            gz2.add_assign(&out.grad_nn2)?;
        }
        let tape1 = e1.tape.as_ref().expect("train-mode tape");
        let tape2 = e2.tape.as_ref().expect("train-mode tape");
        self.model.backward_encoder(tape1, &gz1)?;
        self.model.backward_encoder(tape2, &gz2)?;

        let lr_t = T::lit(lr);
        match self.config.optimizer {
            OptimizerKind::Lars => self.optim.lars_step(self.model.params_mut(), lr_t)?,
            OptimizerKind::Sgd => self
                .optim
                .sgd_momentum_step(self.model.params_mut(), lr_t)?,
        }
        self.model.ema_step();

        if let Some(queue) = &mut self.queue {
            let push_labels = if queue.labels().is_some() {
                labels
            } else {
                None
            };
            queue.push(&t1, push_labels)?;
        }
        self.step += 1;
        if self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every) {
            self.check_queue(&t1)?;
        }
        Ok(StepOutput {
            loss: out.loss.as_f64(),
            lr,
            nn_match,
        })
    }

    /// Ring-buffer law for FIFO queues: the newest rows sit just before the
    /// cursor, in push order.
    fn check_queue(&self, last: &Matrix<T>) -> Result<()> {
        let Some(queue) = &self.queue else {
            return Ok(());
        };
        if queue.replacement() != Replacement::Fifo {
            return Ok(());
        }
        let m = queue.capacity();
        let expect_cursor = (queue.pushed() % m as u64) as usize;
        let rows = NormalizedRows::new(last, T::lit(DEFAULT_NORM_EPS))?.values;
        let b = rows.rows();
        let ok = queue.cursor() == expect_cursor
            && (0..b).all(|i| queue.buffer().row((queue.cursor() + m - b + i) % m) == rows.row(i));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "queue diverged from ring-buffer model".into(),
            ))
        }
    }

    /// Runs one epoch of pretraining over `data`, calling `observe` after
    /// each step.
    pub fn run_epoch(
        &mut self,
        data: &Dataset<T>,
        labels: Option<&[usize]>,
        observe: &mut dyn FnMut(&Self, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        let epoch = self.epoch();
        let batches = epoch_batches(data.len(), self.config.batch_size, self.config.seed, epoch);
        for idx in batches {
            let (x1, x2) =
                make_view_batch(data, &idx, &self.config.augment, self.config.seed, epoch)?;
            let batch_labels: Option<Vec<usize>> =
                labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let started = Instant::now();
            let out = self.step_on_batch(&x1, &x2, batch_labels.as_deref())?;
            let metrics = StepMetrics {
                step: self.step - 1,
                epoch,
                loss: out.loss,
                lr: out.lr,
                nn_match: out.nn_match,
                wall_ms: (!self.config.deterministic)
                    .then(|| started.elapsed().as_secs_f64() * 1e3),
            };
            observe(self, &metrics)?;
        }
        Ok(())
    }
}

/// Trained model and the per-step metric series.
#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    pub trainer: Trainer<T>,
    pub metrics: Vec<StepMetrics>,
}

/// Full pretraining run. `labels` feeds only the queue label buffer
/// (match-rate diagnostics, oracle retrieval); `None` runs label-free.
pub fn pretrain<T: Scalar>(
    config: &TrainConfig,
    data: &Dataset<T>,
    labels: Option<&[usize]>,
) -> Result<PretrainOutcome<T>> {
    pretrain_with(config, data, labels, &mut |_, _| Ok(()))
}

pub fn pretrain_with<T: Scalar>(
    config: &TrainConfig,
    data: &Dataset<T>,
    labels: Option<&[usize]>,
    observe: &mut dyn FnMut(&Trainer<T>, &StepMetrics) -> Result<()>,
) -> Result<PretrainOutcome<T>> {
    let mut trainer = Trainer::for_dataset(config.clone(), data, labels.is_some())?;
    let mut metrics = Vec::with_capacity(trainer.total_steps() as usize);
    for _ in 0..config.epochs {
        trainer.run_epoch(data, labels, &mut |t, m| {
            metrics.push(m.clone());
            observe(t, m)
        })?;
    }
    Ok(PretrainOutcome { trainer, metrics })
}
