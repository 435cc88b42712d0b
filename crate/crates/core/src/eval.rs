//! Frozen-feature evaluation: linear probe on backbone features and the
//! nearest-neighbor label-match diagnostic.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::checkpoint::load_checkpoint;
use crate::data::{eval_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{softmax_cross_entropy, Matrix};
use crate::optim::{lr_at, Schedule};
use crate::scalar::Scalar;
use crate::support_set::{Replacement, SupportSet};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Stratified fraction of training labels used, in (0, 1].
    pub label_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 256,
            label_fraction: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub top5: Option<f64>,
    pub train_samples: usize,
}

/// Backbone features `h` in inference mode, computed in chunks.
pub fn extract_features<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<Matrix<f64>> {
    let mut out: Option<Matrix<f64>> = None;
    for range in eval_batches(data.len(), 1024) {
        let idx: Vec<usize> = range.collect();
        let h = model
            .features(&data.samples.select_rows(&idx))?
            .cast::<f64>();
        out = Some(match out {
            None => h,
            Some(acc) => acc.vstack(&h)?,
        });
    }
    Ok(out.unwrap_or_else(|| Matrix::zeros(0, model.spec.feature_dim)))
}

/// Per-class subsample keeping `ceil(fraction * count)` rows (at least one),
/// in original order. `fraction = 1` keeps everything.
pub fn stratified_indices(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label fraction {fraction} outside (0, 1]"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::ClassMissingFromTrain(c));
    }
    if fraction == 1.0 {
        return Ok((0..labels.len()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for mut members in by_class {
        let k = ((fraction * members.len() as f64).ceil() as usize).clamp(1, members.len());
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..k]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Multinomial logistic regression on fixed features: standardized with
/// training statistics, SGD-momentum with a cosine schedule.
pub fn train_probe(
    train_x: &Matrix<f64>,
    train_y: &[usize],
    test_x: &Matrix<f64>,
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let keep = stratified_indices(train_y, num_classes, cfg.label_fraction, cfg.seed)?;
    let x = train_x.select_rows(&keep);
    let y: Vec<usize> = keep.iter().map(|&i| train_y[i]).collect();
    let (mean, inv_std) = column_stats(&x);
    let x = standardize(&x, &mean, &inv_std);
    let test = standardize(test_x, &mean, &inv_std);

    let (n, f) = x.shape();
    let mut w = Matrix::<f64>::zeros(f, num_classes);
    let mut b = Matrix::<f64>::zeros(1, num_classes);
    let mut vw = w.clone();
    let mut vb = b.clone();
    let bs = cfg.batch_size.clamp(1, n.max(1));
    let steps_per_epoch = n.div_ceil(bs) as u64;
    let schedule = Schedule::new(cfg.lr, 0, (cfg.epochs * steps_per_epoch).max(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let logits = add_bias(&xb.matmul(&w)?, &b);
            let (_, g) = softmax_cross_entropy(&logits, &yb)?;
            let mut gw = xb.matmul_tn(&g)?;
            gw.axpy(cfg.weight_decay, &w)?;
            let gb = Matrix::from_vec(1, num_classes, g.column_sums())?;
            let lr = lr_at(step, &schedule)?;
            for (v, p, grad) in [(&mut vw, &mut w, &gw), (&mut vb, &mut b, &gb)] {
                v.scale(cfg.momentum);
                v.add_assign(grad)?;
                p.axpy(-lr, v)?;
            }
            step += 1;
        }
    }

    let logits = add_bias(&test.matmul(&w)?, &b);
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (row, &label) in logits.row_iter().zip(test_y) {
        let rank = row.iter().filter(|&&v| v > row[label]).count();
        hit1 += (rank == 0) as usize;
        hit5 += (rank < 5) as usize;
    }
    let total = test_y.len().max(1) as f64;
    Ok(ProbeResult {
        top1: hit1 as f64 / total,
        top5: (num_classes >= 5).then_some(hit5 as f64 / total),
        train_samples: n,
    })
}

/// Linear probe on the frozen backbone features of `model`.
pub fn linear_probe<T: Scalar>(
    model: &Model<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let classes = train.num_classes.max(test.num_classes);
    let train_x = extract_features(model, train)?;
    let test_x = extract_features(model, test)?;
    train_probe(&train_x, &train.labels, &test_x, &test.labels, classes, cfg)
}

fn column_stats(x: &Matrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows().max(1) as f64;
    let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; x.cols()];
    for row in x.row_iter() {
        for ((v, &xi), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (xi - m) * (xi - m);
        }
    }
    let inv_std = var
        .into_iter()
        .map(|v| 1.0 / (v / n + 1e-8).sqrt())
        .collect();
    (mean, inv_std)
}

fn standardize(x: &Matrix<f64>, mean: &[f64], inv_std: &[f64]) -> Matrix<f64> {
    Matrix::from_fn(x.rows(), x.cols(), |r, c| {
        (x.get(r, c) - mean[c]) * inv_std[c]
    })
}

fn add_bias(x: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + b.get(0, c))
}

/// Label-match rate of a freshly filled queue: the queue holds the
/// inference-mode embeddings of `queue_size` random samples, the queries are
/// up to `num_queries` other samples.
pub fn nn_match_rate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    queue_size: usize,
    num_queries: usize,
    seed: u64,
) -> Result<f64> {
    if queue_size == 0 || queue_size >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "queue size {queue_size} must lie in [1, {})",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (bank, rest) = order.split_at(queue_size);
    let queries = &rest[..num_queries.min(rest.len())];
    let embed = |idx: &[usize]| -> Result<Matrix<T>> {
        Ok(model.encode_eval(&data.samples.select_rows(idx))?.z)
    };
    let mut queue = SupportSet::from_rows(&embed(bank)?, Replacement::Fifo, seed)?;
    queue.set_labels(bank.iter().map(|&i| data.labels[i]).collect())?;
    let labels: Vec<usize> = queries.iter().map(|&i| data.labels[i]).collect();
    queue.nn_label_match_rate(&embed(queries)?, &labels)
}

/// Match rate of one replayed checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnStat {
    pub step: u64,
    pub nn_match: f64,
}

/// Replays checkpoints in the given order and measures the label-match rate
/// of a queue refilled with each checkpoint's embeddings.
pub fn nn_stats_report<T: Scalar, P: AsRef<Path>>(
    checkpoints: &[P],
    data: &Dataset<T>,
    queue_size: usize,
    num_queries: usize,
    seed: u64,
) -> Result<Vec<NnStat>> {
    checkpoints
        .iter()
        .map(|path| {
            let ckpt = load_checkpoint::<T>(path.as_ref())?;
            Ok(NnStat {
                step: ckpt.trainer.step,
                nn_match: nn_match_rate(&ckpt.trainer.model, data, queue_size, num_queries, seed)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn one_hot(labels: &[usize], c: usize) -> Matrix<f64> {
        Matrix::from_fn(labels.len(), c, |r, k| (labels[r] == k) as u8 as f64)
    }

    #[test]
    fn one_hot_features_are_perfectly_separable() {
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let cfg = ProbeConfig {
            epochs: 20,
            batch_size: 16,
            ..Default::default()
        };
        let r = train_probe(
            &one_hot(&labels, 6),
            &labels,
            &one_hot(&labels, 6),
            &labels,
            6,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.top5, Some(1.0));
        let three: Vec<usize> = labels.iter().map(|l| l % 3).collect();
        let r = train_probe(
            &one_hot(&three, 3),
            &three,
            &one_hot(&three, 3),
            &three,
            3,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.top5, None);
    }

    #[test]
    fn noise_features_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = 4;
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let x = Matrix::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
            let y: Vec<usize> = (0..n).map(|i| i % c).collect();
            (x, y)
        };
        let (tx, ty) = make(400, &mut rng);
        let (vx, vy) = make(2000, &mut rng);
        let cfg = ProbeConfig {
            epochs: 10,
            ..Default::default()
        };
        let r = train_probe(&tx, &ty, &vx, &vy, c, &cfg).unwrap();
        // 99% binomial interval around 1/4 for 2000 trials
        assert!(
            (r.top1 - 0.25).abs() < 2.576 * (0.25f64 * 0.75 / 2000.0).sqrt(),
            "{}",
            r.top1
        );
    }

    #[test]
    fn stratification_keeps_balance() {
        let labels: Vec<usize> = (0..103).map(|i| i % 5).collect();
        let keep = stratified_indices(&labels, 5, 0.1, 3).unwrap();
        let mut counts = [0usize; 5];
        keep.iter().for_each(|&i| counts[labels[i]] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1 && *lo >= 1, "{counts:?}");
        assert_eq!(
            stratified_indices(&labels, 5, 1.0, 3).unwrap(),
            (0..103).collect::<Vec<_>>()
        );
        assert!(matches!(
            stratified_indices(&labels, 6, 1.0, 3),
            Err(Error::ClassMissingFromTrain(5))
        ));
    }

    #[test]
    fn stats_report_replays_checkpoints_in_order() {
        use crate::checkpoint::save_checkpoint;
        use crate::data::{gen_blobs, BlobSpec, Split};
        use crate::train::Trainer;

        let spec = BlobSpec {
            num_classes: 4,
            samples_per_class: 150,
            ambient_dim: 8,
            cluster_std: 0.1,
            seed: 2,
        };
        let data = gen_blobs::<f64>(&spec, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (i, seed) in [5u64, 6].into_iter().enumerate() {
            let text = format!(
                "objective = nnclr\nqueue_size = 64\nbatch_size = 16\nepochs = 1\nseed = {seed}\n"
            );
            let c = crate::config::ConfigDoc::parse(&text)
                .unwrap()
                .build()
                .unwrap()
                .train;
            let mut t = Trainer::<f64>::new(c, 8, 10, None).unwrap();
            t.step = i as u64 * 7;
            let path = dir.path().join(format!("c{i}.bin"));
            save_checkpoint(&path, &text, &t).unwrap();
            paths.push(path);
        }
        let report = nn_stats_report(&paths, &data, 200, 400, 0).unwrap();
        assert_eq!(
            report.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![0, 7]
        );
        assert!(report.iter().all(|r| (0.0..=1.0).contains(&r.nn_match)));

        paths.push(dir.path().join("missing.bin"));
        assert!(matches!(
            nn_stats_report(&paths, &data, 200, 400, 0),
            Err(Error::CheckpointMissing(_))
        ));
    }

    #[test]
    fn untrained_match_rate_is_near_chance_and_probe_is_read_only() {
        use crate::data::{gen_blobs, BlobSpec, Split};
        use crate::model::EncoderSpec;

        let spec = BlobSpec {
            num_classes: 8,
            samples_per_class: 500,
            ambient_dim: 16,
            cluster_std: 0.6,
            seed: 3,
        };
        let data = gen_blobs::<f64>(&spec, Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::<f64>::new(EncoderSpec::desk(16), &mut rng).unwrap();
        // random queue labels: the rate is a binomial(2000, 1/8) draw
        let mut shuffled = data.clone();
        shuffled.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let rate = nn_match_rate(&model, &shuffled, 1000, 2000, 4).unwrap();
        let half_width = 2.576 * (0.125f64 * 0.875 / 2000.0).sqrt();
        assert!((rate - 0.125).abs() < half_width, "{rate}");

        let before = model.clone();
        let test = gen_blobs::<f64>(
            &BlobSpec {
                samples_per_class: 50,
                ..spec
            },
            Split::Test,
        )
        .unwrap();
        let cfg = ProbeConfig {
            epochs: 2,
            ..Default::default()
        };
        linear_probe(&model, &data, &test, &cfg).unwrap();
        for (a, b) in before.params().zip(model.params()) {
            assert_eq!(a.values, b.values);
        }
        let full = linear_probe(&model, &data, &test, &cfg).unwrap();
        let explicit = linear_probe(
            &model,
            &data,
            &test,
            &ProbeConfig {
                label_fraction: 1.0,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(full, explicit);
    }
}
