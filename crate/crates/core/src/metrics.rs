//! Downstream metrics: WA/UA, MAE/Pearson, EER, cosine scoring and trial
//! lists for verification.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    /// Overall accuracy.
    pub wa: f64,
    /// Mean recall over the classes present in the labels.
    pub ua: f64,
}

pub fn classification(preds: &[usize], labels: &[usize]) -> Result<Classification> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "classification metrics need equal nonempty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let n_classes = labels.iter().chain(preds).max().copied().unwrap_or(0) + 1;
    let mut hits = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        support[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let recalls: Vec<f64> = hits
        .iter()
        .zip(&support)
        .filter(|(_, &s)| s > 0)
        .map(|(&h, &s)| h as f64 / s as f64)
        .collect();
    Ok(Classification {
        wa: correct as f64 / preds.len() as f64,
        ua: recalls.iter().sum::<f64>() / recalls.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub mae: f64,
    /// `None` when either side has zero variance.
    pub corr: Option<f64>,
}

pub fn regression(preds: &[f64], labels: &[f64]) -> Result<Regression> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "regression metrics need equal nonempty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mae = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / preds.len() as f64;
    Ok(Regression {
        mae,
        corr: pearson(preds, labels),
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Equal error rate. A trial is accepted when its score is at least the
/// threshold; the threshold sweeps every distinct score and the rate is
/// interpolated linearly where the false-accept and false-reject curves
/// cross.
pub fn eer(scores: &[f64], same: &[bool]) -> Result<f64> {
    if scores.len() != same.len() {
        return Err(Error::contract("EER needs one label per score"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("EER score".into()));
    }
    let n_pos = same.iter().filter(|&&s| s).count();
    let n_neg = same.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract("EER needs both target and non-target trials"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Threshold below every score: everything accepted.
    let (mut far, mut frr) = (1.0, 0.0);
    let (mut rejected_pos, mut rejected_neg) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        // Raise the threshold just above the next distinct score.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if same[order[i]] {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
        let next_far = (n_neg - rejected_neg) as f64 / n_neg as f64;
        let next_frr = rejected_pos as f64 / n_pos as f64;
        if next_frr >= next_far {
            return Ok(crossing((far, frr), (next_far, next_frr)));
        }
        far = next_far;
        frr = next_frr;
    }
    unreachable!("FRR reaches 1 and FAR 0 above the largest score")
}

/// Point where FAR = FRR on the segment between two operating points with
/// FAR − FRR changing sign from positive to nonpositive.
pub(crate) fn crossing(a: (f64, f64), b: (f64, f64)) -> f64 {
    let d0 = a.0 - a.1;
    let d1 = b.0 - b.1;
    if d0 == d1 {
        return b.0;
    }
    let t = d0 / (d0 - d1);
    a.0 + t * (b.0 - a.0)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let na: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Verification trials `(i, j, same)` over all unordered pairs of a labeled
/// set, subsampled to at most `cap` with a seeded shuffle.
pub fn trials(labels: &[usize], cap: usize, seed: u64) -> Vec<(usize, usize, bool)> {
    let mut all: Vec<(usize, usize, bool)> = (0..labels.len())
        .flat_map(|i| (i + 1..labels.len()).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, labels[i] == labels[j]))
        .collect();
    if all.len() > cap {
        all.shuffle(&mut stream(seed, Purpose::Trials, 0, 0));
        all.truncate(cap);
        all.sort_unstable();
    }
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classification_examples() {
        let m = classification(&[0, 1, 1], &[0, 0, 1]).unwrap();
        assert!((m.wa - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.ua, 0.75);
        let m = classification(&[1, 1, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert_eq!((m.wa, m.ua), (0.5, 0.5));
        let m = classification(&[2, 0], &[2, 0]).unwrap();
        assert_eq!((m.wa, m.ua), (1.0, 1.0));
        assert!(classification(&[], &[]).is_err());
    }

    #[test]
    fn regression_examples() {
        let r = regression(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r.corr.unwrap() - 0.5).abs() < 1e-15);
        let r = regression(&[0.5, 1.5, 4.0], &[0.5, 1.5, 4.0]).unwrap();
        assert_eq!(r.mae, 0.0);
        assert!((r.corr.unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 4.0], &[-1.0, -2.0, -4.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(regression(&[1.0, 1.0], &[0.0, 2.0]).unwrap().corr, None);
    }

    #[test]
    fn eer_examples() {
        let e = eer(&[0.9, 0.8, 0.4, 0.7, 0.3, 0.2], &[true, true, true, false, false, false]).unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(eer(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 0.0);
        assert_eq!(eer(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(eer(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(eer(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let e = [0.3f32, -1.2, 2.0];
        let neg: Vec<f32> = e.iter().map(|x| -x).collect();
        let scaled: Vec<f32> = e.iter().map(|x| x * 7.5).collect();
        assert!((cosine(&e, &e) - 1.0).abs() < 1e-12);
        assert!((cosine(&e, &neg) + 1.0).abs() < 1e-12);
        assert!((cosine(&e, &scaled) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trial_lists() {
        let t = trials(&[0, 0, 1, 1], 100, 3);
        assert_eq!(t.len(), 6);
        assert_eq!(t.iter().filter(|x| x.2).count(), 2);
        let capped = trials(&(0..40).map(|i| i % 4).collect::<Vec<_>>(), 50, 3);
        assert_eq!(capped.len(), 50);
        assert_eq!(capped, trials(&(0..40).map(|i| i % 4).collect::<Vec<_>>(), 50, 3));
    }

    proptest! {
        #[test]
        fn balanced_labels_give_equal_wa_and_ua(preds in proptest::collection::vec(0usize..3, 12)) {
            let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let m = classification(&preds, &labels).unwrap();
            prop_assert!((m.wa - m.ua).abs() < 1e-12);
            prop_assert!(m.wa <= 1.0 && m.ua <= 1.0);
        }

        #[test]
        fn eer_is_a_rate(scores in proptest::collection::vec(-1.0f64..1.0, 2..40), flip in any::<u64>()) {
            let same: Vec<bool> = (0..scores.len()).map(|i| (flip >> (i % 64)) & 1 == 1 || i == 0).collect();
            prop_assume!(same.iter().any(|&s| !s));
            let e = eer(&scores, &same).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }
}
