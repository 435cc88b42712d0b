//! Fixed-capacity queue of past projection embeddings and the
//! nearest-neighbor retrieval variants that read it.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Matrix, NormalizedRows, DEFAULT_NORM_EPS};
use crate::scalar::Scalar;

/// How pushed rows pick the slots they overwrite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    /// Overwrite the oldest rows.
    Fifo,
    /// Overwrite uniformly chosen distinct slots.
    Random,
}

impl Replacement {
    pub fn as_str(self) -> &'static str {
        match self {
            Replacement::Fifo => "fifo",
            Replacement::Random => "random",
        }
    }
}

impl std::str::FromStr for Replacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fifo" => Ok(Replacement::Fifo),
            "random" => Ok(Replacement::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown replacement {other:?}"
            ))),
        }
    }
}

/// Retrieved rows (copies of buffer rows) and their buffer indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval<T> {
    pub neighbors: Matrix<T>,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftRetrieval<T> {
    pub neighbors: Matrix<T>,
    /// n x m softmax weights over buffer rows.
    pub weights: Matrix<T>,
}

/// Everything needed to restore a queue bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSetState<T> {
    pub buffer: Matrix<T>,
    pub labels: Option<Vec<usize>>,
    pub cursor: usize,
    pub pushed: u64,
    pub replacement: Replacement,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct SupportSet<T> {
    buffer: Matrix<T>,
    labels: Option<Vec<usize>>,
    cursor: usize,
    pushed: u64,
    replacement: Replacement,
    rng: ChaCha8Rng,
}

impl<T: Scalar> SupportSet<T> {
    /// Random unit rows (i.i.d. standard normal, then normalized); the queue
    /// is full and queryable immediately.
    pub fn new<R: Rng + ?Sized>(
        capacity: usize,
        dim: usize,
        replacement: Replacement,
        rng: &mut R,
    ) -> Self {
        assert!(capacity > 0 && dim > 0, "queue must be non-empty");
        let mut buffer = Matrix::from_fn(capacity, dim, |_, _| {
            T::lit(rng.sample::<f64, _>(StandardNormal))
        });
        normalize_in_place(&mut buffer);
        let replacement_rng = ChaCha8Rng::seed_from_u64(rng.random());
        Self {
            buffer,
            labels: None,
            cursor: 0,
            pushed: 0,
            replacement,
            rng: replacement_rng,
        }
    }

    /// Queue holding exactly `rows` (normalized); capacity is `rows.rows()`.
    pub fn from_rows(rows: &Matrix<T>, replacement: Replacement, seed: u64) -> Result<Self> {
        let buffer = NormalizedRows::new(rows, T::lit(DEFAULT_NORM_EPS))?.values;
        Ok(Self {
            buffer,
            labels: None,
            cursor: 0,
            pushed: 0,
            replacement,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Turns on the label buffer. Initialization-era rows get labels drawn
    /// uniformly from `0..num_classes`, so they match a query at chance rate.
    pub fn enable_labels<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) {
        let labels = (0..self.capacity())
            .map(|_| rng.random_range(0..num_classes.max(1)))
            .collect();
        self.labels = Some(labels);
    }

    pub fn set_labels(&mut self, labels: Vec<usize>) -> Result<()> {
        if labels.len() != self.capacity() {
            return Err(Error::ShapeMismatch {
                op: "set_labels",
                left: (self.capacity(), 1),
                right: (labels.len(), 1),
            });
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.buffer.rows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.cols()
    }

    /// Always equal to the capacity: the queue starts full.
    pub fn filled(&self) -> usize {
        self.capacity()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Total rows pushed since construction.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn replacement(&self) -> Replacement {
        self.replacement
    }

    pub fn buffer(&self) -> &Matrix<T> {
        &self.buffer
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Storage cost of the embedding buffer.
    pub fn queue_bytes(&self) -> usize {
        self.capacity() * self.dim() * T::BYTES
    }

    /// Normalizes `batch` and writes it into the queue. `labels` is stored
    /// only when the label buffer is enabled.
    pub fn push(&mut self, batch: &Matrix<T>, labels: Option<&[usize]>) -> Result<()> {
        let b = batch.rows();
        if b > self.capacity() {
            return Err(Error::BatchLargerThanQueue {
                batch: b,
                capacity: self.capacity(),
            });
        }
        if batch.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "push",
                left: self.buffer.shape(),
                right: batch.shape(),
            });
        }
        if let (Some(_), Some(l)) = (&self.labels, labels) {
            if l.len() != b {
                return Err(Error::ShapeMismatch {
                    op: "push",
                    left: (b, 1),
                    right: (l.len(), 1),
                });
            }
        }
        if self.labels.is_some() && labels.is_none() {
            return Err(Error::LabelsUnavailable);
        }
        let rows = NormalizedRows::new(batch, T::lit(DEFAULT_NORM_EPS))?.values;
        let m = self.capacity();
        let slots: Vec<usize> = match self.replacement {
            Replacement::Fifo => (0..b).map(|i| (self.cursor + i) % m).collect(),
            Replacement::Random => sample(&mut self.rng, m, b).into_vec(),
        };
        for (i, &slot) in slots.iter().enumerate() {
            self.buffer.row_mut(slot).copy_from_slice(rows.row(i));
            if let (Some(buf), Some(l)) = (&mut self.labels, labels) {
                buf[slot] = l[i];
            }
        }
        if self.replacement == Replacement::Fifo {
            self.cursor = (self.cursor + b) % m;
        }
        self.pushed += b as u64;
        Ok(())
    }

    /// Cosine similarities `q̂ Bᵀ`, n x m.
    pub fn similarities(&self, query: &Matrix<T>) -> Result<Matrix<T>> {
        if query.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "similarities",
                left: query.shape(),
                right: self.buffer.shape(),
            });
        }
        let q = NormalizedRows::new(query, T::lit(DEFAULT_NORM_EPS))?.values;
        q.matmul_nt(&self.buffer)
    }

    fn gather(&self, indices: Vec<usize>) -> Retrieval<T> {
        Retrieval {
            neighbors: self.buffer.select_rows(&indices),
            indices,
        }
    }

    /// Top-1 neighbor by cosine similarity; ties go to the lowest index.
    pub fn nearest(&self, query: &Matrix<T>) -> Result<Retrieval<T>> {
        let sims = self.similarities(query)?;
        Ok(self.gather(sims.row_iter().map(argmax).collect()))
    }

    /// One of the `k` nearest rows, chosen uniformly. `k = 1` is [`Self::nearest`]
    /// and draws nothing from `rng`.
    pub fn top_k_sample<R: Rng + ?Sized>(
        &self,
        query: &Matrix<T>,
        k: usize,
        rng: &mut R,
    ) -> Result<Retrieval<T>> {
        if k == 0 || k > self.capacity() {
            return Err(Error::KOutOfRange {
                k,
                capacity: self.capacity(),
            });
        }
        if k == 1 {
            return self.nearest(query);
        }
        let sims = self.similarities(query)?;
        let indices = sims
            .row_iter()
            .map(|row| {
                let top = top_k(row, k);
                top[rng.random_range(0..k)]
            })
            .collect();
        Ok(self.gather(indices))
    }

    /// Similarity-weighted convex combination of all buffer rows. The output
    /// is not renormalized.
    pub fn soft_nn(&self, query: &Matrix<T>, temperature: T) -> Result<SoftRetrieval<T>> {
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "soft nn temperature must be positive, got {temperature}"
            )));
        }
        let logits = self.similarities(query)?.scaled(T::one() / temperature);
        let weights = softmax_rows(&logits);
        let neighbors = weights.matmul(&self.buffer)?;
        Ok(SoftRetrieval { neighbors, weights })
    }

    /// Nearest row among those sharing the query's label, falling back to the
    /// unrestricted nearest row when no label matches.
    pub fn oracle_nn(&self, query: &Matrix<T>, query_labels: &[usize]) -> Result<Retrieval<T>> {
        let labels = self.labels.as_ref().ok_or(Error::LabelsUnavailable)?;
        check_label_count(query, query_labels)?;
        let sims = self.similarities(query)?;
        let indices = sims
            .row_iter()
            .zip(query_labels)
            .map(|(row, &want)| {
                let mut best: Option<usize> = None;
                for (j, &s) in row.iter().enumerate() {
                    if labels[j] == want && best.is_none_or(|b| s > row[b]) {
                        best = Some(j);
                    }
                }
                best.unwrap_or_else(|| argmax(row))
            })
            .collect();
        Ok(self.gather(indices))
    }

    /// Fraction of queries whose top-1 neighbor carries the query's label.
    pub fn nn_label_match_rate(&self, query: &Matrix<T>, query_labels: &[usize]) -> Result<f64> {
        let labels = self.labels.as_ref().ok_or(Error::LabelsUnavailable)?;
        check_label_count(query, query_labels)?;
        let nn = self.nearest(query)?;
        Ok(match_rate(&nn.indices, labels, query_labels))
    }

    pub fn state(&self) -> SupportSetState<T> {
        SupportSetState {
            buffer: self.buffer.clone(),
            labels: self.labels.clone(),
            cursor: self.cursor,
            pushed: self.pushed,
            replacement: self.replacement,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: SupportSetState<T>) -> Result<Self> {
        let m = state.buffer.rows();
        if m == 0 || state.cursor >= m || state.labels.as_ref().is_some_and(|l| l.len() != m) {
            return Err(Error::CorruptCheckpoint("inconsistent queue state".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(state.rng_word_pos);
        Ok(Self {
            buffer: state.buffer,
            labels: state.labels,
            cursor: state.cursor,
            pushed: state.pushed,
            replacement: state.replacement,
            rng,
        })
    }
}

/// Fraction of `indices` whose stored label equals the matching query label.
pub fn match_rate(indices: &[usize], stored: &[usize], query_labels: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let hits = indices
        .iter()
        .zip(query_labels)
        .filter(|(&i, &l)| stored[i] == l)
        .count();
    hits as f64 / indices.len() as f64
}

fn check_label_count<T: Scalar>(query: &Matrix<T>, labels: &[usize]) -> Result<()> {
    if labels.len() != query.rows() {
        return Err(Error::ShapeMismatch {
            op: "query labels",
            left: query.shape(),
            right: (labels.len(), 1),
        });
    }
    Ok(())
}

fn normalize_in_place<T: Scalar>(m: &mut Matrix<T>) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row[0] = T::one();
        }
    }
}

/// Index of the largest entry; the first one wins ties.
fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Indices of the `k` largest entries, ordered by (value desc, index asc).
fn top_k<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}
