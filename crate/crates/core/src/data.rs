//! Synthetic Gaussian blobs on the unit sphere and the CIFAR-10 binary format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Planar image layout of one sample row: all of channel 0, then channel 1, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const CIFAR: ImageShape = ImageShape {
        height: 32,
        width: 32,
        channels: 3,
    };

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples with their labels. Labels are read by evaluation and diagnostics;
/// pretraining receives them only through an explicit argument.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Matrix<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub image: Option<ImageShape>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        samples: Matrix<T>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        image: Option<ImageShape>,
    ) -> Result<Self> {
        if labels.len() != samples.rows() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: samples.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        if image.is_some_and(|s| s.len() != samples.cols()) {
            return Err(Error::InvalidArgument(
                "image shape does not match sample width".into(),
            ));
        }
        if !samples.is_finite() {
            return Err(Error::InvalidArgument("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
            split,
            image,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: self.samples.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            image: self.image,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            samples: self.samples.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
            image: self.image,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub ambient_dim: usize,
    pub cluster_std: f64,
    pub seed: u64,
}

const MAX_SEPARATION_ATTEMPTS: usize = 10_000;

/// Class means on the unit sphere with pairwise angle above `2σ` radians.
pub fn blob_means(spec: &BlobSpec) -> Result<Matrix<f64>> {
    if spec.num_classes < 2 || !(spec.cluster_std > 0.0) || spec.ambient_dim == 0 {
        return Err(Error::InvalidArgument(
            "blobs need at least 2 classes, positive std and dimension".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_angle = 2.0 * spec.cluster_std;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let mut attempts = 0;
    while means.len() < spec.num_classes {
        attempts += 1;
        if attempts > MAX_SEPARATION_ATTEMPTS {
            return Err(Error::SeparationUnsatisfiable {
                classes: spec.num_classes,
                attempts: MAX_SEPARATION_ATTEMPTS,
            });
        }
        let mut v: Vec<f64> = (0..spec.ambient_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let separated = means.iter().all(|m| {
            let cos: f64 = m.iter().zip(&v).map(|(a, b)| a * b).sum();
            cos.clamp(-1.0, 1.0).acos() > min_angle
        });
        if separated {
            means.push(v);
        }
    }
    let rows: Vec<&[f64]> = means.iter().map(|m| m.as_slice()).collect();
    Matrix::from_f64_rows(&rows)
}

/// Draws `samples_per_class` points `mean + N(0, σ² I)` per class, class-major.
/// Train and test share means and use independent noise streams.
pub fn gen_blobs<T: Scalar>(spec: &BlobSpec, split: Split) -> Result<Dataset<T>> {
    let means = blob_means(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.ambient_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            for &mu in means.row(c) {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(T::lit(mu + spec.cluster_std * noise));
            }
            labels.push(c);
        }
    }
    let samples = Matrix::from_vec(n, spec.ambient_dim, data)?;
    Dataset::new(samples, labels, spec.num_classes, split, None)
}

/// Per-epoch shuffled batches of `batch_size`; the trailing partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1 << 32));
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Consecutive index ranges covering all `n` rows, last one possibly short.
pub fn eval_batches(n: usize, batch_size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let bs = batch_size.max(1);
    (0..n).step_by(bs).map(move |s| s..(s + bs).min(n))
}

pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// One raw record: label byte and 32x32 red, green, blue planes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

pub fn encode_cifar_records(records: &[CifarRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for r in records {
        if r.pixels.len() != CIFAR_PIXELS {
            return Err(Error::InvalidArgument(format!(
                "record has {} pixel bytes, expected {CIFAR_PIXELS}",
                r.pixels.len()
            )));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    Ok(out)
}

pub fn write_cifar_file(path: &Path, records: &[CifarRecord]) -> Result<()> {
    fs::write(path, encode_cifar_records(records)?)?;
    Ok(())
}

/// Reads up to `limit` records from one binary batch file.
pub fn read_cifar_file(path: &Path, limit: Option<usize>) -> Result<Vec<CifarRecord>> {
    if !path.is_file() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::RecordSizeMismatch {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: CIFAR_RECORD,
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .take(limit.unwrap_or(usize::MAX))
        .map(|chunk| {
            let label = chunk[0];
            if label >= 10 {
                return Err(Error::LabelOutOfRange {
                    label: label as usize,
                    classes: 10,
                });
            }
            Ok(CifarRecord {
                label,
                pixels: chunk[1..].to_vec(),
            })
        })
        .collect()
}

fn records_to_dataset<T: Scalar>(records: &[CifarRecord], split: Split) -> Result<Dataset<T>> {
    let scale = 1.0 / 255.0;
    let mut data = Vec::with_capacity(records.len() * CIFAR_PIXELS);
    for r in records {
        data.extend(r.pixels.iter().map(|&p| T::lit(p as f64 * scale)));
    }
    let samples = Matrix::from_vec(records.len(), CIFAR_PIXELS, data)?;
    let labels = records.iter().map(|r| r.label as usize).collect();
    Dataset::new(samples, labels, 10, split, Some(ImageShape::CIFAR))
}

/// Loads the five training batches and the test batch. `train_limit` and
/// `test_limit` cap the number of records kept (in file order).
pub fn load_cifar10_subset<T: Scalar>(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(Dataset<T>, Dataset<T>)> {
    for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::FileMissing(p));
        }
    }
    let mut train = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        let remaining = train_limit.map(|l| l.saturating_sub(train.len()));
        if remaining == Some(0) {
            break;
        }
        train.extend(read_cifar_file(&dir.join(name), remaining)?);
    }
    let test = read_cifar_file(&dir.join(CIFAR_TEST_FILE), test_limit)?;
    Ok((
        records_to_dataset(&train, Split::Train)?,
        records_to_dataset(&test, Split::Test)?,
    ))
}

pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    load_cifar10_subset(dir, None, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(std: f64) -> BlobSpec {
        BlobSpec {
            num_classes: 8,
            samples_per_class: 50,
            ambient_dim: 16,
            cluster_std: std,
            seed: 3,
        }
    }

    #[test]
    fn tiny_std_collapses_onto_means() {
        let s = spec(1e-300);
        let means = blob_means(&s).unwrap();
        let d = gen_blobs::<f64>(&s, Split::Train).unwrap();
        for (i, &c) in d.labels.iter().enumerate() {
            assert_eq!(d.samples.row(i), means.row(c));
        }
    }

    #[test]
    fn blobs_are_reproducible() {
        let a = gen_blobs::<f64>(&spec(0.1), Split::Train).unwrap();
        let b = gen_blobs::<f64>(&spec(0.1), Split::Train).unwrap();
        assert_eq!(a, b);
        let t = gen_blobs::<f64>(&spec(0.1), Split::Test).unwrap();
        assert_ne!(a.samples, t.samples);
    }

    #[test]
    fn means_are_separated() {
        let s = spec(0.3);
        let m = blob_means(&s).unwrap();
        for i in 0..8 {
            for j in 0..i {
                let cos: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                assert!(cos.acos() > 0.6);
            }
        }
    }

    #[test]
    fn impossible_separation_is_reported() {
        let s = BlobSpec {
            num_classes: 5,
            ambient_dim: 2,
            cluster_std: 1.0,
            ..spec(1.0)
        };
        assert!(matches!(
            blob_means(&s),
            Err(Error::SeparationUnsatisfiable { .. })
        ));
    }

    #[test]
    fn raw_one_nn_separates_blobs() {
        let train = gen_blobs::<f64>(&spec(0.1), Split::Train).unwrap();
        let test = gen_blobs::<f64>(&spec(0.1), Split::Test).unwrap();
        let mut correct = 0;
        for i in 0..test.len() {
            let q = test.samples.row(i);
            let best = (0..train.len())
                .min_by(|&a, &b| {
                    let da: f64 = q
                        .iter()
                        .zip(train.samples.row(a))
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    let db: f64 = q
                        .iter()
                        .zip(train.samples.row(b))
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += (train.labels[best] == test.labels[i]) as usize;
        }
        assert!(correct as f64 / test.len() as f64 > 0.99);
    }

    #[test]
    fn epoch_batches_drop_partial_and_replay() {
        let a = epoch_batches(10, 3, 7, 0);
        assert_eq!(a.len(), 3);
        assert_eq!(a, epoch_batches(10, 3, 7, 0));
        assert_ne!(a, epoch_batches(10, 3, 7, 1));
        let ranges: Vec<_> = eval_batches(10, 4).collect();
        assert_eq!(ranges, vec![0..4, 4..8, 8..10]);
    }

    #[test]
    fn cifar_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let rec = CifarRecord {
            label: 7,
            pixels: (0..CIFAR_PIXELS).map(|i| (i * 31 % 256) as u8).collect(),
        };
        let path = dir.path().join("one.bin");
        write_cifar_file(&path, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_cifar_file(&path, None).unwrap(), vec![rec.clone()]);

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_cifar_file(&path, None),
            Err(Error::RecordSizeMismatch { .. })
        ));

        let mut bad = encode_cifar_records(&[rec]).unwrap();
        bad[0] = 10;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_cifar_file(&path, None),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));

        assert!(matches!(
            load_cifar10::<f32>(dir.path()),
            Err(Error::FileMissing(_))
        ));
    }
}
