//! Training objectives with hand-derived gradients.
//!
//! Every embedding is l2-normalized inside the loss, so all objectives are
//! invariant to positive rescaling of their input rows. Nearest-neighbor
//! positives are constants: their gradient slots are zero-filled.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_rows, Matrix, NormalizedRows, DEFAULT_NORM_EPS};
use crate::scalar::Scalar;
use crate::support_set::SupportSet;

/// Loss value plus gradients for the two-view objectives.
///
/// `p1`/`p2` are the (predicted) embeddings of each view; `nn1`/`nn2` the
/// positives they are contrasted against. For nearest-neighbor positives the
/// `grad_nn*` fields are exactly zero.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad_p1: Matrix<T>,
    pub grad_p2: Matrix<T>,
    pub grad_nn1: Matrix<T>,
    pub grad_nn2: Matrix<T>,
}

/// Loss and gradients of the plain SimCLR objective.
#[derive(Clone, Debug)]
pub struct SimclrOutput<T> {
    pub loss: T,
    pub grad_z1: Matrix<T>,
    pub grad_z2: Matrix<T>,
}

/// Result of [`contrastive_loss`].
#[derive(Clone, Debug)]
pub struct ContrastiveOutput<T> {
    pub loss: T,
    pub grad_anchor: Matrix<T>,
    pub grad_positive: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct InfoNceOutput<T> {
    pub loss: T,
    pub grad_query: Matrix<T>,
    pub grad_positive: Matrix<T>,
    pub grad_negatives: Matrix<T>,
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn check_same<T: Scalar>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn eps<T: Scalar>() -> T {
    T::lit(DEFAULT_NORM_EPS)
}

/// Generic InfoNCE for one query row, one positive row and `k` negatives.
///
/// With no negatives the loss is `-log 1 = 0`.
pub fn infonce<T: Scalar>(
    query: &Matrix<T>,
    positive: &Matrix<T>,
    negatives: &Matrix<T>,
    tau: T,
) -> Result<InfoNceOutput<T>> {
    check_tau(tau)?;
    check_same("infonce", query, positive)?;
    if query.rows() != 1 || (negatives.rows() > 0 && negatives.cols() != query.cols()) {
        return Err(Error::ShapeMismatch {
            op: "infonce",
            left: query.shape(),
            right: negatives.shape(),
        });
    }
    let q = NormalizedRows::new(query, eps())?;
    let pos = NormalizedRows::new(positive, eps())?;
    let candidates = pos.values.vstack(&if negatives.rows() == 0 {
        Matrix::zeros(0, query.cols())
    } else {
        NormalizedRows::new(negatives, eps())?.values
    })?;
    let logits = q.values.matmul_nt(&candidates)?.scaled(T::one() / tau);
    let loss = log_sum_exp(logits.row(0)) - logits.get(0, 0);

    // d loss / d logits = softmax - onehot(0)
    let mut dl = softmax_rows(&logits);
    dl.as_mut_slice()[0] -= T::one();
    dl.scale(T::one() / tau);
    let d_qn = dl.matmul(&candidates)?;
    let d_cand = dl.matmul_tn(&q.values)?;
    let grad_query = q.backward(&d_qn)?;
    let d_pos = Matrix::from_vec(1, query.cols(), d_cand.row(0).to_vec())?;
    let grad_positive = pos.backward(&d_pos)?;
    let grad_negatives = if negatives.rows() == 0 {
        Matrix::zeros(0, query.cols())
    } else {
        let neg = NormalizedRows::new(negatives, eps())?;
        let d_neg = Matrix::from_vec(
            negatives.rows(),
            query.cols(),
            d_cand.as_slice()[query.cols()..].to_vec(),
        )?;
        neg.backward(&d_neg)?
    };
    Ok(InfoNceOutput {
        loss,
        grad_query,
        grad_positive,
        grad_negatives,
    })
}

/// Batch contrastive loss `L(anchor, positive)`: row-wise cross-entropy of
/// `â p̂ᵀ / τ` with diagonal labels.
///
/// With `symmetric_denominator` the column-wise cross-entropy (each positive
/// against all anchors) is averaged in with equal weight.
pub fn contrastive_loss<T: Scalar>(
    anchor: &Matrix<T>,
    positive: &Matrix<T>,
    tau: T,
    symmetric_denominator: bool,
) -> Result<ContrastiveOutput<T>> {
    check_tau(tau)?;
    check_same("contrastive_loss", anchor, positive)?;
    let n = anchor.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let a = NormalizedRows::new(anchor, eps())?;
    let p = NormalizedRows::new(positive, eps())?;
    let inv_tau = T::one() / tau;
    let logits = a.values.matmul_nt(&p.values)?.scaled(inv_tau);
    let inv_n = T::one() / T::lit(n as f64);

    let (row_loss, row_grad) = diagonal_cross_entropy(&logits, inv_n);
    let (loss, d_logits) = if symmetric_denominator {
        let (col_loss, col_grad_t) = diagonal_cross_entropy(&logits.transpose(), inv_n);
        let half = T::lit(0.5);
        let mut grad = row_grad;
        grad.axpy(T::one(), &col_grad_t.transpose())?;
        grad.scale(half);
        ((row_loss + col_loss) * half, grad)
    } else {
        (row_loss, row_grad)
    };

    let d_a = d_logits.matmul(&p.values)?.scaled(inv_tau);
    let d_p = d_logits.matmul_tn(&a.values)?.scaled(inv_tau);
    Ok(ContrastiveOutput {
        loss,
        grad_anchor: a.backward(&d_a)?,
        grad_positive: p.backward(&d_p)?,
    })
}

/// Mean cross-entropy with label `i` for row `i`, and its logit gradient.
fn diagonal_cross_entropy<T: Scalar>(logits: &Matrix<T>, inv_n: T) -> (T, Matrix<T>) {
    let mut grad = softmax_rows(logits);
    let mut loss = T::zero();
    for i in 0..logits.rows() {
        loss += log_sum_exp(logits.row(i)) - logits.get(i, i);
        let row = grad.row_mut(i);
        row[i] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    (loss * inv_n, grad)
}

/// SimCLR objective: mean over `i` of `-log softmax_k(ẑ1_i · ẑ2_k / τ)[i]`.
/// Gradients flow into both views.
pub fn simclr_loss<T: Scalar>(z1: &Matrix<T>, z2: &Matrix<T>, tau: T) -> Result<SimclrOutput<T>> {
    let out = contrastive_loss(z1, z2, tau, false)?;
    Ok(SimclrOutput {
        loss: out.loss,
        grad_z1: out.grad_anchor,
        grad_z2: out.grad_positive,
    })
}

/// Two-view symmetrized contrastive objective `L(a1, p2)/2 + L(a2, p1)/2`.
///
/// When `positives_are_constant` the gradients on `a1`/`a2` are dropped and
/// returned as zeros; otherwise they are returned in `grad_nn*`.
pub fn two_view_contrastive<T: Scalar>(
    a1: &Matrix<T>,
    a2: &Matrix<T>,
    p1: &Matrix<T>,
    p2: &Matrix<T>,
    tau: T,
    symmetric_denominator: bool,
    positives_are_constant: bool,
) -> Result<LossOutput<T>> {
    let half = T::lit(0.5);
    let first = contrastive_loss(a1, p2, tau, symmetric_denominator)?;
    let second = contrastive_loss(a2, p1, tau, symmetric_denominator)?;
    let (grad_nn1, grad_nn2) = if positives_are_constant {
        (
            Matrix::zeros(a1.rows(), a1.cols()),
            Matrix::zeros(a2.rows(), a2.cols()),
        )
    } else {
        (
            first.grad_anchor.scaled(half),
            second.grad_anchor.scaled(half),
        )
    };
    Ok(LossOutput {
        loss: half * first.loss + half * second.loss,
        grad_p1: second.grad_positive.scaled(half),
        grad_p2: first.grad_positive.scaled(half),
        grad_nn1,
        grad_nn2,
    })
}

/// NNCLR objective from already retrieved neighbors:
/// `L(nn1, p2)/2 + L(nn2, p1)/2`, with the neighbors held constant.
pub fn nnclr_loss_from_neighbors<T: Scalar>(
    nn1: &Matrix<T>,
    nn2: &Matrix<T>,
    p1: &Matrix<T>,
    p2: &Matrix<T>,
    tau: T,
    symmetric_denominator: bool,
) -> Result<LossOutput<T>> {
    two_view_contrastive(nn1, nn2, p1, p2, tau, symmetric_denominator, true)
}

/// NNCLR objective with top-1 retrieval from `queue`. `p1`/`p2` are the
/// prediction-head outputs the caller computed from `z1`/`z2`.
#[allow(clippy::too_many_arguments)]
pub fn nnclr_loss<T: Scalar>(
    z1: &Matrix<T>,
    z2: &Matrix<T>,
    p1: &Matrix<T>,
    p2: &Matrix<T>,
    queue: &SupportSet<T>,
    tau: T,
    symmetric_denominator: bool,
) -> Result<LossOutput<T>> {
    check_same("nnclr_loss", z1, p1)?;
    check_same("nnclr_loss", z2, p2)?;
    let nn1 = queue.nearest(z1)?.neighbors;
    let nn2 = queue.nearest(z2)?.neighbors;
    nnclr_loss_from_neighbors(&nn1, &nn2, p1, p2, tau, symmetric_denominator)
}

/// NNSiam objective: `-mean cos(p1, nn2)/2 - mean cos(p2, nn1)/2`, gradients to `p` only.
pub fn nnsiam_loss<T: Scalar>(
    p1: &Matrix<T>,
    p2: &Matrix<T>,
    nn1: &Matrix<T>,
    nn2: &Matrix<T>,
) -> Result<LossOutput<T>> {
    check_same("nnsiam_loss", p1, nn2)?;
    check_same("nnsiam_loss", p2, nn1)?;
    let half = T::lit(0.5);
    let (l1, g1) = negative_cosine(p1, nn2)?;
    let (l2, g2) = negative_cosine(p2, nn1)?;
    Ok(LossOutput {
        loss: half * (l1 + l2),
        grad_p1: g1.scaled(half),
        grad_p2: g2.scaled(half),
        grad_nn1: Matrix::zeros(nn1.rows(), nn1.cols()),
        grad_nn2: Matrix::zeros(nn2.rows(), nn2.cols()),
    })
}

/// `-mean_i cos(p_i, t_i)` and its gradient with respect to `p`.
fn negative_cosine<T: Scalar>(p: &Matrix<T>, target: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    let n = p.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let pn = NormalizedRows::new(p, eps()).map_err(|e| match e {
        Error::RowNormUnderflow { row, norm, .. } => Error::ZeroVector { row, norm },
        other => other,
    })?;
    let tn = NormalizedRows::new(target, eps())?;
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    for i in 0..n {
        let cos: T = pn
            .values
            .row(i)
            .iter()
            .zip(tn.values.row(i))
            .map(|(&a, &b)| a * b)
            .sum();
        loss -= cos;
    }
    let grad = pn.backward(&tn.values.scaled(-inv_n))?;
    Ok((loss * inv_n, grad))
}
