use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `+inf` for the origin.
    pub threshold: f64,
}

/// ROC curve at distinct-score thresholds, from `(0,0)` to `(1,1)`. Tied
/// scores move both counts in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    /// Cumulative true/false positive counts at each point.
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub n_pos: u64,
    pub n_neg: u64,
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numerical(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!("{n_pos} positives and {n_neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = RocCurve {
        points: vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }],
        tp: vec![0],
        fp: vec![0],
        n_pos,
        n_neg,
    };
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.tp.push(tp);
        curve.fp.push(fp);
        curve.points.push(RocPoint { fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64, threshold: s });
    }
    Ok(curve)
}

/// Trapezoidal area under `curve`, accumulated in integers so that it
/// equals the Mann-Whitney statistic (ties count one half) exactly.
pub fn auc(curve: &RocCurve) -> f64 {
    let twice: u128 = curve
        .tp
        .windows(2)
        .zip(curve.fp.windows(2))
        .map(|(t, f)| u128::from(f[1] - f[0]) * u128::from(t[1] + t[0]))
        .sum();
    twice as f64 / (2.0 * curve.n_pos as f64 * curve.n_neg as f64)
}

pub fn auc_score(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(auc(&roc_curve(scores, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut wins, mut ties, mut np, mut nn) = (0u64, 0u64, 0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li == 1 {
                np += 1;
            } else {
                nn += 1;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    if scores[i] > scores[j] {
                        wins += 1;
                    } else if scores[i] == scores[j] {
                        ties += 1;
                    }
                }
            }
        }
        (wins as f64 + 0.5 * ties as f64) / (np * nn) as f64
    }

    #[test]
    fn perfect_separation() {
        let c = roc_curve(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!(c.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&c), 1.0);
    }

    #[test]
    fn all_tied_is_one_diagonal_step() {
        let c = roc_curve(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!(auc(&c), 0.5);
    }

    #[test]
    fn half_of_pairs_ordered() {
        assert_eq!(auc_score(&[0.9, 0.4, 0.6, 0.1], &[1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(roc_curve(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass(_))));
        assert!(roc_curve(&[0.1, f64::NAN], &[1, 0]).is_err());
        assert!(roc_curve(&[0.1], &[1, 0]).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..=100).prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![(0u8..5).prop_map(f64::from), -10.0f64..10.0], n),
                prop::collection::vec(0u8..=1, n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    }

    proptest! {
        #[test]
        fn matches_mann_whitney((s, l) in instance()) {
            let a = auc_score(&s, &l).unwrap();
            prop_assert!((a - brute_force(&s, &l)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn monotone_from_origin_to_corner((s, l) in instance()) {
            let c = roc_curve(&s, &l).unwrap();
            prop_assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
            let last = c.points.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for w in c.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn invariant_under_increasing_maps((s, l) in instance()) {
            let a = auc_score(&s, &l).unwrap();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let f: Vec<f64> = s.iter().map(|v| 3.0 * v + 1.0).collect();
            prop_assert_eq!(a, auc_score(&e, &l).unwrap());
            prop_assert_eq!(a, auc_score(&f, &l).unwrap());
        }

        #[test]
        fn negated_scores_complement(n in 2usize..60, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut l: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
            l[0] = 0;
            l[1] = 1;
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc_score(&s, &l).unwrap() + auc_score(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
