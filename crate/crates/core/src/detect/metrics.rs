//! Threshold-free OOD metrics. Higher scores mean "more in-distribution";
//! ID samples are the positive class throughout.

use crate::error::{Error, Result};

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::EmptySet);
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(Error::NonFiniteValue("score".into()));
    }
    Ok(())
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `P(id > ood) + 0.5 P(id = ood)` over all pairs.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let ood = sorted(ood);
    // twice the Mann-Whitney U, kept integral so the extremes are exact
    let mut doubled: u128 = 0;
    for &s in id {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        doubled += (2 * below + (not_above - below)) as u128;
    }
    Ok(doubled as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64)
}

/// Average precision with ID as positive: `sum_k (R_k - R_{k-1}) P_k` over
/// the distinct score thresholds in decreasing order.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_id = id.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_id;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Fraction of OOD scores at or above the largest threshold that still
/// accepts at least 95% of ID scores.
pub fn fpr95(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut desc = id.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    // ceil(0.95 n) without floating-point rounding
    let k = (95 * desc.len()).div_ceil(100);
    let threshold = desc[k - 1];
    let accepted = ood.iter().filter(|&&o| o >= threshold).count();
    Ok(accepted as f64 / ood.len() as f64)
}

pub fn id_accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptySet);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn auroc_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in id {
            for &b in ood {
                s += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (id.len() * ood.len()) as f64
    }

    fn aupr_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut prev = 0.0;
        let mut area = 0.0;
        for t in thresholds {
            let tp = id.iter().filter(|&&s| s >= t).count() as f64;
            let fp = ood.iter().filter(|&&s| s >= t).count() as f64;
            let r = tp / id.len() as f64;
            area += (r - prev) * tp / (tp + fp);
            prev = r;
        }
        area
    }

    fn fpr95_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut best: Option<f64> = None;
        for &t in id.iter().chain(ood) {
            let tpr = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
            if tpr >= 0.95 - 1e-12 && best.is_none_or(|b| t > b) {
                best = Some(t);
            }
        }
        let t = best.unwrap();
        ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64
    }

    #[test]
    fn small_cases() {
        assert_eq!(auroc(&[2.0, 1.0], &[1.5]).unwrap(), 0.5);
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(aupr(&[2.0, 1.0], &[1.5]).unwrap(), 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(aupr(&[3.0, 4.0], &[1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(aupr(&[1.0; 3], &[1.0; 2]).unwrap(), 0.6, epsilon = 1e-15);
        assert_eq!(fpr95(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(fpr95(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
    }

    #[test]
    fn fpr95_interleaved() {
        let id: Vec<f64> = (0..100).map(|i| 100.0 - i as f64).collect();
        let ood: Vec<f64> = (0..50).map(|i| 2.0 * i as f64 + 0.5).collect();
        assert_eq!(fpr95(&id, &ood).unwrap(), fpr95_oracle(&id, &ood));
        // threshold is the 95th largest ID score, 6.0
        assert_eq!(fpr95(&id, &ood).unwrap(), 47.0 / 50.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::EmptySet)));
        assert!(matches!(aupr(&[1.0], &[]), Err(Error::EmptySet)));
        assert!(matches!(fpr95(&[], &[]), Err(Error::EmptySet)));
        assert!(matches!(id_accuracy(&[1, 2], &[1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn accuracy() {
        assert_eq!(id_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(id_accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(id_accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        // a coarse grid so ties are common
        prop::collection::vec((-20i32..20).prop_map(|x| x as f64 * 0.5), 1..100)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn match_oracles(id in scores(), ood in scores()) {
            prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc_oracle(&id, &ood));
            prop_assert!((aupr(&id, &ood).unwrap() - aupr_oracle(&id, &ood)).abs() < 1e-12);
            prop_assert_eq!(fpr95(&id, &ood).unwrap(), fpr95_oracle(&id, &ood));
        }

        #[test]
        fn monotone_invariance(id in scores(), ood in scores()) {
            let f = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| (x * 0.3).exp() + 5.0).collect() };
            prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&f(&id), &f(&ood)).unwrap());
            prop_assert_eq!(aupr(&id, &ood).unwrap(), aupr(&f(&id), &f(&ood)).unwrap());
            prop_assert_eq!(fpr95(&id, &ood).unwrap(), fpr95(&f(&id), &f(&ood)).unwrap());
        }

        #[test]
        fn auroc_antisymmetric(id in prop::collection::vec(-1e3f64..1e3, 1..50),
                               ood in prop::collection::vec(-1e3f64..1e3, 1..50)) {
            prop_assume!(id.iter().all(|a| !ood.contains(a)));
            let sum = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
