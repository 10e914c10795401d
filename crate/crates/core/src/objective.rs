//! Sparsity-weighted multi-label cross-entropy.
//!
//! Within a mini-batch with `|P|` ones and `|N|` zeros in its target
//! matrix, every positive entry is weighted by `(|P|+|N|)/|P|` and every
//! negative entry by `(|P|+|N|)/|N|`. Per-image losses are summed over the
//! batch, not averaged.

use log::warn;

use crate::autodiff::ops::{sigmoid, softplus};
use crate::autodiff::{Op, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` on the
/// probability path.
pub const PROB_CLAMP: f64 = 1e-7;

/// `n x C` binary label matrix of a mini-batch. An all-zero row is an image
/// with no findings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl TargetMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if rows * cols != data.len() || cols == 0 {
            return Err(Error::shape("targets", format!("{rows}x{cols} from {} values", data.len())));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::shape("targets", format!("entry {i} is {}, expected 0 or 1", data[i])));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("targets", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `|P|`, the number of ones.
    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// `|N|`, the number of zeros.
    pub fn negatives(&self) -> usize {
        self.data.len() - self.positives()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchWeights {
    pub w_pos: f64,
    pub w_neg: f64,
    /// Set when the batch has no positives or no negatives and the fallback
    /// weights are in use.
    pub degenerate: bool,
}

/// Per-batch class weights. A batch without positives (or negatives) has an
/// empty positive (negative) term; the other side gets weight 1.
pub fn batch_weights(targets: &TargetMatrix) -> BatchWeights {
    let p = targets.positives() as f64;
    let n = targets.negatives() as f64;
    let total = p + n;
    match (p > 0.0, n > 0.0) {
        (true, true) => BatchWeights { w_pos: total / p, w_neg: total / n, degenerate: false },
        (false, _) => {
            warn!("mini-batch has no positive labels; using w_neg = 1");
            BatchWeights { w_pos: 1.0, w_neg: 1.0, degenerate: true }
        }
        (true, false) => {
            warn!("mini-batch has no negative labels; using w_pos = 1");
            BatchWeights { w_pos: 1.0, w_neg: 1.0, degenerate: true }
        }
    }
}

pub(crate) struct BceSaved<T> {
    targets: Vec<u8>,
    w_pos: T,
    w_neg: T,
    /// Probability path only: entries that hit the clamp.
    pub(crate) clamped: Vec<bool>,
}

fn check_shapes<T: Scalar>(x: &Tensor<T>, targets: &TargetMatrix) -> Result<()> {
    if x.shape() != [targets.rows(), targets.cols()] {
        return Err(Error::shape(
            "weighted_bce",
            format!("predictions {:?} vs targets [{}, {}]", x.shape(), targets.rows(), targets.cols()),
        ));
    }
    Ok(())
}

fn finish<T: Scalar>(tape: &Tape<T>, op: Op<T>, input: &Tensor<T>, terms: &[T]) -> Result<Tensor<T>> {
    if let Some(i) = terms.iter().position(|t| !t.is_finite()) {
        let cols = input.shape()[1];
        return Err(Error::Numerical(format!(
            "loss term at row {}, label {} is {} (input {})",
            i / cols,
            i % cols,
            terms[i],
            input.data()[i]
        )));
    }
    let loss = terms.iter().fold(T::zero(), |a, &t| a + t);
    Ok(tape.record(op, &[input], Tensor::scalar(loss)))
}

/// Weighted loss from raw classifier scores, using
/// `-ln sigmoid(s) = softplus(-s)` and `-ln(1 - sigmoid(s)) = softplus(s)`.
pub fn weighted_bce_logits<T: Scalar>(tape: &Tape<T>, logits: &Tensor<T>, targets: &TargetMatrix) -> Result<Tensor<T>> {
    check_shapes(logits, targets)?;
    let w = batch_weights(targets);
    let (wp, wn) = (T::of(w.w_pos), T::of(w.w_neg));
    let terms: Vec<T> = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&s, &y)| if y == 1 { wp * softplus(-s) } else { wn * softplus(s) })
        .collect();
    let saved = BceSaved { targets: targets.data().to_vec(), w_pos: wp, w_neg: wn, clamped: Vec::new() };
    finish(tape, Op::BceLogits(saved), logits, &terms)
}

/// Weighted loss from probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce_probs<T: Scalar>(tape: &Tape<T>, probs: &Tensor<T>, targets: &TargetMatrix) -> Result<Tensor<T>> {
    check_shapes(probs, targets)?;
    let w = batch_weights(targets);
    let (wp, wn) = (T::of(w.w_pos), T::of(w.w_neg));
    let (lo, hi) = (T::of(PROB_CLAMP), T::one() - T::of(PROB_CLAMP));
    let mut clamped = Vec::with_capacity(probs.len());
    let terms: Vec<T> = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| {
            clamped.push(!(p > lo && p < hi));
            let p = p.max(lo).min(hi);
            if y == 1 {
                -wp * p.ln()
            } else {
                -wn * (T::one() - p).ln()
            }
        })
        .collect();
    let saved = BceSaved { targets: targets.data().to_vec(), w_pos: wp, w_neg: wn, clamped };
    finish(tape, Op::BceProbs(saved), probs, &terms)
}

pub(crate) fn bce_logits_backward<T: Scalar>(logits: &[T], saved: &BceSaved<T>, g: T) -> Vec<T> {
    logits
        .iter()
        .zip(&saved.targets)
        .map(|(&s, &y)| {
            let p = sigmoid(s);
            g * if y == 1 { saved.w_pos * (p - T::one()) } else { saved.w_neg * p }
        })
        .collect()
}

pub(crate) fn bce_probs_backward<T: Scalar>(probs: &[T], saved: &BceSaved<T>, g: T) -> Vec<T> {
    probs
        .iter()
        .zip(&saved.targets)
        .zip(&saved.clamped)
        .map(|((&p, &y), &c)| {
            if c {
                T::zero()
            } else if y == 1 {
                -g * saved.w_pos / p
            } else {
                g * saved.w_neg / (T::one() - p)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_targets(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> TargetMatrix {
        TargetMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_bool(p) as u8).collect()).unwrap()
    }

    #[test]
    fn weights_worked_example() {
        let mut data = vec![0u8; 28];
        data[0] = 1;
        data[5] = 1;
        data[20] = 1;
        let t = TargetMatrix::new(2, 14, data).unwrap();
        assert_eq!((t.positives(), t.negatives()), (3, 25));
        let w = batch_weights(&t);
        assert!((w.w_pos - 28.0 / 3.0).abs() < 1e-12);
        assert!((w.w_neg - 1.12).abs() < 1e-12);
        assert!(!w.degenerate);
    }

    #[test]
    fn half_ones_gives_equal_weights() {
        let t = TargetMatrix::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let w = batch_weights(&t);
        assert_eq!((w.w_pos, w.w_neg), (2.0, 2.0));
    }

    #[test]
    fn degenerate_batches_fall_back() {
        let zeros = TargetMatrix::new(3, 14, vec![0; 42]).unwrap();
        let w = batch_weights(&zeros);
        assert_eq!(w.w_neg, 1.0);
        assert!(w.degenerate);
        let ones = TargetMatrix::new(1, 3, vec![1; 3]).unwrap();
        assert_eq!(batch_weights(&ones).w_pos, 1.0);
        // the loss stays finite
        let tape = Tape::<f64>::new();
        let logits = Tensor::zeros(vec![3, 14]);
        let l = weighted_bce_logits(&tape, &logits, &zeros).unwrap();
        assert!((l.item() - 42.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn targets_reject_non_binary() {
        assert!(TargetMatrix::new(1, 2, vec![0, 2]).is_err());
        assert!(TargetMatrix::new(1, 2, vec![0]).is_err());
    }

    #[test]
    fn single_image_example_28_ln2() {
        let mut y = vec![0u8; 14];
        y[3] = 1;
        let t = TargetMatrix::new(1, 14, y).unwrap();
        let tape = Tape::<f64>::new();
        let probs = Tensor::full(vec![1, 14], 0.5);
        let want = 28.0 * 2f64.ln();
        let l = weighted_bce_probs(&tape, &probs, &t).unwrap().item();
        assert!((l - want).abs() < 1e-9, "{l}");
        assert!((l - 19.4081).abs() < 1e-4);
        let l = weighted_bce_logits(&tape, &Tensor::zeros(vec![1, 14]), &t).unwrap().item();
        assert!((l - want).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_limit() {
        let t = TargetMatrix::new(2, 3, vec![1, 0, 0, 0, 1, 0]).unwrap();
        let p = Tensor::<f64>::from_f64(vec![2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let l = weighted_bce_probs(&Tape::new(), &p, &t).unwrap().item();
        assert!((0.0..1e-5).contains(&l), "{l}");
    }

    #[test]
    fn non_finite_loss_names_entry() {
        let t = TargetMatrix::new(1, 2, vec![1, 0]).unwrap();
        let s = Tensor::<f64>::from_f64(vec![1, 2], &[0.0, f64::NAN]).unwrap();
        let err = weighted_bce_logits(&Tape::new(), &s, &t).unwrap_err();
        assert!(err.to_string().contains("row 0, label 1"), "{err}");
    }

    #[test]
    fn shape_mismatch() {
        let t = TargetMatrix::new(1, 2, vec![1, 0]).unwrap();
        assert!(weighted_bce_logits(&Tape::<f64>::new(), &Tensor::zeros(vec![2, 2]), &t).is_err());
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_targets(&mut rng, 3, 5, 0.3);
            let x = Tensor::new(vec![3, 5], (0..15).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let r = grad_check(|tp, v| weighted_bce_logits(tp, v, &t), &x, 1e-5, 1e-6).unwrap();
            assert!(r.passed, "{r:?}");
            let p = Tensor::new(vec![3, 5], (0..15).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
            let r = grad_check(|tp, v| weighted_bce_probs(tp, v, &t), &p, 1e-5, 1e-6).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn weight_balance_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let rows = rng.random_range(1..20);
            let t = random_targets(&mut rng, rows, 14, 0.15);
            let (p, n) = (t.positives(), t.negatives());
            if p == 0 || n == 0 {
                continue;
            }
            let w = batch_weights(&t);
            let total = (p + n) as f64;
            assert!((w.w_pos * p as f64 - total).abs() < 1e-9);
            assert!((w.w_neg * n as f64 - total).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn probability_and_logit_paths_agree(
            probs in proptest::collection::vec(1e-6f64..(1.0 - 1e-6), 12),
            bits in proptest::collection::vec(0u8..2, 12),
        ) {
            let t = TargetMatrix::new(3, 4, bits).unwrap();
            let p = Tensor::new(vec![3, 4], probs.clone()).unwrap();
            let logits = Tensor::new(vec![3, 4], probs.iter().map(|&p| (p / (1.0 - p)).ln()).collect()).unwrap();
            let tape = Tape::new();
            let a = weighted_bce_probs(&tape, &p, &t).unwrap().item();
            let b = weighted_bce_logits(&tape, &logits, &t).unwrap().item();
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn loss_is_permutation_invariant(
            logits in proptest::collection::vec(-5.0f64..5.0, 10),
            bits in proptest::collection::vec(0u8..2, 10),
            seed in 0u64..100,
        ) {
            let mut idx: Vec<usize> = (0..10).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..10).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let t = TargetMatrix::new(2, 5, bits.clone()).unwrap();
            let tp = TargetMatrix::new(2, 5, idx.iter().map(|&i| bits[i]).collect()).unwrap();
            let x = Tensor::new(vec![2, 5], logits.clone()).unwrap();
            let xp = Tensor::new(vec![2, 5], idx.iter().map(|&i| logits[i]).collect()).unwrap();
            let tape = Tape::new();
            let a = weighted_bce_logits(&tape, &x, &t).unwrap().item();
            let b = weighted_bce_logits(&tape, &xp, &tp).unwrap().item();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
