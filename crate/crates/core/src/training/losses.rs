//! Scalar objectives of the grounding stage and their gradients with respect
//! to the similarity matrix.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::ir::TargetDistribution;
use crate::scalar::{argmax, sigmoid, softmax, Scalar};

/// `S(C, I)`: mean over entities of the best sigmoid similarity over proposals.
pub fn caption_image_score<T: Scalar>(a: ArrayView2<T>) -> Result<T> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::Empty("similarity matrix"));
    }
    let total: T = a
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|&x| sigmoid(x)).fold(T::neg_infinity(), T::max))
        .sum();
    Ok(total / T::lit(a.nrows() as f64))
}

/// `dA` given `dS` for [`caption_image_score`]; the max routes the gradient
/// to the first best proposal of each row.
pub fn caption_image_score_grad<T: Scalar>(a: ArrayView2<T>, d_score: T) -> Array2<T> {
    let mut da = Array2::zeros(a.dim());
    let scale = d_score / T::lit(a.nrows().max(1) as f64);
    for (i, row) in a.rows().into_iter().enumerate() {
        let row = row.to_vec();
        if let Some(j) = argmax(&row) {
            let s = sigmoid(row[j]);
            da[[i, j]] = scale * s * (T::one() - s);
        }
    }
    da
}

/// Hinge sum `Σ max(0, S(C, I') − S(C, I) + margin)` over negative images.
pub fn mil_loss<T: Scalar>(positive: T, negatives: &[T], margin: T) -> T {
    negatives
        .iter()
        .map(|&neg| (neg - positive + margin).max(T::zero()))
        .sum()
}

/// `KL(q ‖ p)` with the convention `0 · log 0 = 0`.
pub fn kl_divergence<T: Scalar>(q: &[T], p: &[T]) -> T {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > T::zero())
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.ln()))
        .sum()
}

/// `Σ_i KL(q_i ‖ softmax(a_i))` over entities whose target is defined.
/// `targets[i] = None` also skips entity `i`.
pub fn kd_loss<T: Scalar>(targets: &[Option<TargetDistribution<T>>], a: ArrayView2<T>) -> Result<T> {
    check_rows(targets.len(), a)?;
    let mut total = T::zero();
    for (q, row) in targets.iter().zip(a.rows()) {
        let Some(q) = q.as_ref().filter(|q| q.defined) else { continue };
        if q.len() != row.len() {
            return Err(Error::Dimension {
                context: "distillation target",
                expected: row.len(),
                actual: q.len(),
            });
        }
        let logits = row.to_vec();
        total += kl_from_logits(&q.values, &logits);
    }
    Ok(total)
}

/// KL against softmax logits, using a log-sum-exp so saturated rows stay finite.
fn kl_from_logits<T: Scalar>(q: &[T], logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    q.iter()
        .zip(logits)
        .filter(|(&qi, _)| qi > T::zero())
        .map(|(&qi, &x)| qi * (qi.ln() - (x - lse)))
        .sum()
}

/// `dA` of [`kd_loss`]: `softmax(a_i) − q_i` on counted rows.
pub fn kd_loss_grad<T: Scalar>(targets: &[Option<TargetDistribution<T>>], a: ArrayView2<T>) -> Array2<T> {
    let mut da = Array2::zeros(a.dim());
    for (i, (q, row)) in targets.iter().zip(a.rows()).enumerate() {
        let Some(q) = q.as_ref().filter(|q| q.defined) else { continue };
        let p = softmax(&row.to_vec());
        for j in 0..p.len() {
            da[[i, j]] = p[j] - q.values[j];
        }
    }
    da
}

fn check_rows<T>(n: usize, a: ArrayView2<T>) -> Result<()> {
    if n == a.nrows() {
        Ok(())
    } else {
        Err(Error::Dimension {
            context: "targets per entity",
            expected: a.nrows(),
            actual: n,
        })
    }
}
