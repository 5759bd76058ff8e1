//! Training losses: CTC over the extended label lattice and frame-wise
//! cross-entropy with label replication.
//!
//! All CTC math runs in log-space; peaky distributions underflow linear-space
//! dynamic programming. Gradients are analytic: the CTC gradient is taken
//! with respect to the input log-probabilities (each entry treated as a free
//! variable), the cross-entropy gradient with respect to the logits.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Label sequence for the phonetic branch. The blank symbol is not part of
/// the vocabulary; its class index is fixed at `vocab` (the last column of a
/// `T x (V+1)` log-probability matrix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtcTarget {
    labels: Vec<usize>,
    vocab: usize,
}

impl CtcTarget {
    pub fn new(labels: Vec<usize>, vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::InvalidConfig("CTC vocabulary must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
            return Err(Error::InvalidInput(format!(
                "CTC label {bad} outside vocabulary of size {vocab}"
            )));
        }
        Ok(CtcTarget { labels, vocab })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    /// Shortest frame path that collapses to this target: one frame per
    /// label plus a mandatory blank between adjacent repeats.
    pub fn min_frames(&self) -> usize {
        let repeats = self.labels.windows(2).filter(|w| w[0] == w[1]).count();
        self.labels.len() + repeats
    }

    /// A finite loss exists iff some length-`frames` path collapses to the
    /// target.
    pub fn is_feasible(&self, frames: usize) -> bool {
        frames >= 1 && frames >= self.min_frames()
    }
}

/// Phrase label replicated across every frame: 0 = false trigger,
/// 1 = true trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameCeTarget {
    class: usize,
}

impl FrameCeTarget {
    pub fn new(class: usize) -> Result<Self> {
        if class > 1 {
            return Err(Error::InvalidInput(format!(
                "phrase class must be 0 or 1, got {class}"
            )));
        }
        Ok(FrameCeTarget { class })
    }

    pub fn class(&self) -> usize {
        self.class
    }
}

fn logaddexp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// CTC loss and gradient. Rows of `log_probs` must be valid
/// log-distributions (logsumexp within 1e-6 of zero); columns are the `V`
/// vocabulary classes followed by the blank.
///
/// Returns `(loss, d loss / d log_probs)`. An infeasible target yields an
/// infinite loss with an all-zero gradient.
pub fn ctc_loss<T: Scalar>(log_probs: &Matrix<T>, target: &CtcTarget) -> Result<(T, Matrix<T>)> {
    if log_probs.rows() == 0 {
        return Err(Error::InvalidInput("CTC needs at least one frame".into()));
    }
    if log_probs.cols() != target.vocab() + 1 {
        return Err(Error::ShapeMismatch {
            op: "ctc_loss",
            left: log_probs.shape(),
            right: (log_probs.rows(), target.vocab() + 1),
        });
    }
    for t in 0..log_probs.rows() {
        let lse: f64 = {
            let m = log_probs
                .row(t)
                .iter()
                .fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            if m == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                m + log_probs
                    .row(t)
                    .iter()
                    .map(|v| (v.as_f64() - m).exp())
                    .sum::<f64>()
                    .ln()
            }
        };
        if !(lse.abs() < 1e-6) {
            return Err(Error::InvalidInput(format!(
                "frame {t} is not a log-distribution (logsumexp = {lse:e})"
            )));
        }
    }
    Ok(ctc_loss_unchecked(log_probs, target))
}

/// DP core without the row-normalization precondition; finite-difference
/// tests perturb single entries and go through here.
pub(crate) fn ctc_loss_unchecked<T: Scalar>(
    log_probs: &Matrix<T>,
    target: &CtcTarget,
) -> (T, Matrix<T>) {
    let frames = log_probs.rows();
    let zero_grad = Matrix::zeros(frames, log_probs.cols());
    if !target.is_feasible(frames) {
        // No path can collapse to the target: an infinite-loss signal, not
        // a crash. The lattice DP below would reach the same conclusion.
        return (T::infinity(), zero_grad);
    }

    // Extended lattice: blank, l1, blank, l2, ..., blank.
    let labels = target.labels();
    let blank = target.blank();
    let ext: Vec<usize> = (0..2 * labels.len() + 1)
        .map(|s| if s % 2 == 0 { blank } else { labels[s / 2] })
        .collect();
    let n = ext.len();
    let ninf = T::neg_infinity();

    // A lattice jump s-2 -> s is allowed when it does not skip a required
    // blank between equal labels.
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![vec![ninf; n]; frames];
    alpha[0][0] = log_probs.at(0, ext[0]);
    if n > 1 {
        alpha[0][1] = log_probs.at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..n {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = logaddexp(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                acc = logaddexp(acc, alpha[t - 1][s - 2]);
            }
            if acc != ninf {
                alpha[t][s] = acc + log_probs.at(t, ext[s]);
            }
        }
    }

    let mut log_p = alpha[frames - 1][n - 1];
    if n > 1 {
        log_p = logaddexp(log_p, alpha[frames - 1][n - 2]);
    }
    if log_p == ninf {
        return (T::infinity(), zero_grad);
    }

    // Beta excludes the emission at its own frame, so alpha + beta sums the
    // probability of all paths passing through (t, s) with each frame's
    // emission counted exactly once.
    let mut beta = vec![vec![ninf; n]; frames];
    beta[frames - 1][n - 1] = T::zero();
    if n > 1 {
        beta[frames - 1][n - 2] = T::zero();
    }
    for t in (0..frames - 1).rev() {
        for s in 0..n {
            let mut acc = if beta[t + 1][s] != ninf {
                beta[t + 1][s] + log_probs.at(t + 1, ext[s])
            } else {
                ninf
            };
            if s + 1 < n && beta[t + 1][s + 1] != ninf {
                acc = logaddexp(acc, beta[t + 1][s + 1] + log_probs.at(t + 1, ext[s + 1]));
            }
            if s + 2 < n && can_skip(s + 2) && beta[t + 1][s + 2] != ninf {
                acc = logaddexp(acc, beta[t + 1][s + 2] + log_probs.at(t + 1, ext[s + 2]));
            }
            beta[t][s] = acc;
        }
    }

    let mut grad = zero_grad;
    let mut acc_k = vec![ninf; log_probs.cols()];
    for t in 0..frames {
        for v in acc_k.iter_mut() {
            *v = ninf;
        }
        for s in 0..n {
            if alpha[t][s] != ninf && beta[t][s] != ninf {
                acc_k[ext[s]] = logaddexp(acc_k[ext[s]], alpha[t][s] + beta[t][s]);
            }
        }
        for (k, &acc) in acc_k.iter().enumerate() {
            if acc != ninf {
                grad.set(t, k, -((acc - log_p).exp()));
            }
        }
    }

    (-log_p, grad)
}

/// Per-frame argmax, collapse repeats, drop blanks. Ties go to the lowest
/// class index.
pub fn ctc_greedy_decode<T: Scalar>(log_probs: &Matrix<T>) -> Vec<usize> {
    let blank = log_probs.cols() - 1;
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != prev && best != blank {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Frame-wise cross-entropy of 2-class logits against a label replicated on
/// every frame, averaged over frames. `class_weights` scales the per-frame
/// term by the weight of the true class; `None` means (1, 1).
///
/// Returns `(loss, d loss / d logits)`.
pub fn frame_ce_loss<T: Scalar>(
    logits: &Matrix<T>,
    target: FrameCeTarget,
    class_weights: Option<(f64, f64)>,
) -> Result<(T, Matrix<T>)> {
    if logits.rows() == 0 || logits.cols() != 2 {
        return Err(Error::ShapeMismatch {
            op: "frame_ce_loss",
            left: logits.shape(),
            right: (1, 2),
        });
    }
    let (w0, w1) = class_weights.unwrap_or((1.0, 1.0));
    let w = T::from_f64(if target.class() == 0 { w0 } else { w1 });
    let inv_t = T::from_f64(1.0 / logits.rows() as f64);
    let scale = w * inv_t;

    let mut loss = T::zero();
    let mut grad = Matrix::zeros(logits.rows(), 2);
    for t in 0..logits.rows() {
        let (a, b) = (logits.at(t, 0), logits.at(t, 1));
        let m = if a > b { a } else { b };
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let pick = if target.class() == 0 { a } else { b };
        loss = loss + scale * (lse - pick);
        for c in 0..2 {
            let p = (logits.at(t, c) - lse).exp();
            let indicator = if c == target.class() { T::one() } else { T::zero() };
            grad.set(t, c, scale * (p - indicator));
        }
    }
    Ok((loss, grad))
}
