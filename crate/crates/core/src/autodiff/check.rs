//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::tensor::Tensor;

use super::Tape;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Rounding in `f(x ± h)` limits what a central difference can resolve to
/// about `eps * |f| / h`; disagreements below this many multiples of that
/// bound are treated as agreement.
const ROUNDING_MULTIPLE: f64 = 64.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Failure {
    Mismatch { index: usize, analytic: f64, numeric: f64, rel_error: f64 },
    NonFinite { index: usize, analytic: f64, numeric: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest relative error over coordinates large enough for a central
    /// difference to resolve at the requested tolerance.
    pub max_rel_error: f64,
    pub compared: usize,
    /// Coordinates whose `± step` probe crossed a kink (ReLU at 0, max-pool
    /// tie, probability clamp); excluded from comparison.
    pub kinks: Vec<usize>,
    /// Coordinates whose gradient is too small to resolve relatively; they
    /// are checked against the rounding bound in absolute terms instead.
    pub below_resolution: usize,
    pub failures: Vec<Failure>,
    pub passed: bool,
}

/// Compares `backward` of the scalar `f` against central differences at
/// `point`, one coordinate at a time.
///
/// `f` receives a tape and the tracked point; it must build its value on
/// that tape.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let x = tape.leaf(point);
    let y = f(&tape, &x)?;
    let analytic = tape.backward(&y)?.wrt(&x).expect("point is on the tape");
    let base_sig = tape.branch_signature();

    let eval = |i: usize, delta: f64| -> Result<(f64, Vec<u64>)> {
        let mut p = point.detach();
        p.data_mut()[i] += delta;
        let tape = Tape::new();
        let xp = tape.leaf(&p);
        let v = f(&tape, &xp)?.item();
        Ok((v, tape.branch_signature()))
    };

    let mut report = GradCheckReport::default();
    for i in 0..point.len() {
        let (fp, sp) = eval(i, step)?;
        let (fm, sm) = eval(i, -step)?;
        let a = analytic.data()[i];
        let n = (fp - fm) / (2.0 * step);
        if !a.is_finite() || !n.is_finite() {
            report.failures.push(Failure::NonFinite { index: i, analytic: a, numeric: n });
            continue;
        }
        if sp != base_sig || sm != base_sig {
            report.kinks.push(i);
            continue;
        }
        let diff = (a - n).abs();
        let resolution = ROUNDING_MULTIPLE * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0) / step;
        let scale = a.abs().max(n.abs());
        report.compared += 1;
        if scale * tolerance < resolution {
            report.below_resolution += 1;
            if diff > resolution {
                report.failures.push(Failure::Mismatch { index: i, analytic: a, numeric: n, rel_error: diff / scale.max(REL_FLOOR) });
            }
        } else {
            let rel = diff / scale;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= tolerance {
                report.failures.push(Failure::Mismatch { index: i, analytic: a, numeric: n, rel_error: rel });
            }
        }
    }
    report.passed = report.failures.is_empty();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(seed: u64, n: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_within_rounding() {
        let r = grad_check(|t, x| Ok(t.sum(x)), &random_point(1, 7), 1e-5, 1e-6).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert_eq!(r.compared, 7);
    }

    #[test]
    fn sigmoid_sum_within_1e6() {
        for seed in 0..5 {
            let r = grad_check(
                |t, x| Ok(t.sum(&t.unary(OpKind::Sigmoid, x)?)),
                &random_point(seed, 6),
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
            assert!(r.max_rel_error < 1e-6);
        }
    }

    #[test]
    fn relu_kink_is_excluded_not_failed() {
        let p = Tensor::new(vec![3], vec![0.5, 0.0, -1.0]).unwrap();
        let r = grad_check(|t, x| Ok(t.sum(&t.unary(OpKind::Relu, x)?)), &p, 1e-5, 1e-6).unwrap();
        assert!(r.passed);
        assert_eq!(r.kinks, vec![1]);
        assert_eq!(r.compared, 2);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // x * detach(x): the tape sees only one factor, so analytic = x, numeric = 2x.
        let p = random_point(3, 4);
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, &x.detach())?;
                Ok(t.sum(&sq))
            },
            &p,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.failures.len(), 4);
    }

    #[test]
    fn non_finite_is_reported_with_index() {
        let p = Tensor::new(vec![2], vec![1.0, 1e-300]).unwrap();
        let r = grad_check(
            |t, x| {
                let inv = t.unary(OpKind::Ln, x)?;
                Ok(t.sum(&t.mul(&inv, &inv)?))
            },
            &p,
            1e-5,
            1e-6,
        );
        // ln(1e-300 - 1e-5) is a domain error in strict mode.
        assert!(r.is_err());
        let p = Tensor::new(vec![2], vec![1.0, 800.0]).unwrap();
        let r = grad_check(|t, x| Ok(t.sum(&t.unary(OpKind::Exp, x)?)), &p, 1e-5, 1e-6).unwrap();
        assert!(!r.passed);
        assert!(r.failures.iter().any(|f| matches!(f, Failure::NonFinite { index: 1, .. })));
    }
}
