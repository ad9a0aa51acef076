//! Criterion 6: WA, UA, MAE, Pearson and EER against brute-force references
//! on random instances of at most 100 elements.

use duomodal::metrics::{classification, eer, regression};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::Outcome;

const TOL: f64 = 1e-9;
const INSTANCES: usize = 500;

fn wa_ref(p: &[usize], l: &[usize]) -> f64 {
    p.iter().zip(l).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}

fn ua_ref(p: &[usize], l: &[usize]) -> f64 {
    let mut classes: Vec<usize> = l.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let recall = |c: usize| {
        let idx: Vec<usize> = (0..l.len()).filter(|&i| l[i] == c).collect();
        idx.iter().filter(|&&i| p[i] == c).count() as f64 / idx.len() as f64
    };
    classes.iter().map(|&c| recall(c)).sum::<f64>() / classes.len() as f64
}

fn mae_ref(p: &[f64], l: &[f64]) -> f64 {
    p.iter().zip(l).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
}

/// Two-pass covariance over standard deviations.
fn pearson_ref(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    (sx > 0.0 && sy > 0.0).then(|| cov / (sx * sy))
}

/// Every candidate threshold (below all scores, between neighbours, above
/// all) evaluated by counting; EER by linear interpolation where FAR - FRR
/// changes sign.
fn eer_ref(scores: &[f64], same: &[bool]) -> f64 {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(f64::INFINITY);
    let n_pos = same.iter().filter(|&&s| s).count() as f64;
    let n_neg = same.len() as f64 - n_pos;
    let point = |t: f64| {
        let far = scores.iter().zip(same).filter(|(&s, &p)| !p && s >= t).count() as f64 / n_neg;
        let frr = scores.iter().zip(same).filter(|(&s, &p)| p && s < t).count() as f64 / n_pos;
        (far, frr)
    };
    let points: Vec<(f64, f64)> = thresholds.iter().map(|&t| point(t)).collect();
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (d0, d1) = (a.0 - a.1, b.0 - b.1);
        if d0 > 0.0 && d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            return a.0 + t * (b.0 - a.0);
        }
    }
    panic!("FAR - FRR never changes sign");
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d65_7472);
    let mut worst = [0.0f64; 5];
    let mut problems = Vec::new();
    for case in 0..INSTANCES {
        let n = rng.gen_range(2..=100);
        let k = rng.gen_range(2..=6);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let c = classification(&preds, &labels).expect("classification");
        worst[0] = worst[0].max((c.wa - wa_ref(&preds, &labels)).abs());
        worst[1] = worst[1].max((c.ua - ua_ref(&preds, &labels)).abs());

        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| v * rng.gen_range(-1.0..1.5) + rng.gen_range(-1.0..1.0)).collect();
        let r = regression(&p, &y).expect("regression");
        worst[2] = worst[2].max((r.mae - mae_ref(&p, &y)).abs());
        match (r.corr, pearson_ref(&p, &y)) {
            (Some(a), Some(b)) => worst[3] = worst[3].max((a - b).abs()),
            (a, b) => problems.push(format!("case {case}: pearson {a:?} vs {b:?}")),
        }

        // Coarse scores so ties are common.
        let levels = rng.gen_range(2..=20);
        let same: Vec<bool> = (0..n).map(|i| i < 1 || (i > 1 && rng.gen_bool(0.4))).collect();
        let scores: Vec<f64> = same
            .iter()
            .map(|&s| (rng.gen_range(0..levels) as f64 + if s { 2.0 } else { 0.0 }) / levels as f64)
            .collect();
        let e = eer(&scores, &same).expect("eer");
        worst[4] = worst[4].max((e - eer_ref(&scores, &same)).abs());
    }
    let names = ["WA", "UA", "MAE", "Pearson", "EER"];
    for (name, w) in names.iter().zip(worst) {
        if !(w <= TOL) {
            problems.push(format!("{name} differs by {w:.2e}"));
        }
    }
    let detail = format!(
        "{INSTANCES} instances, max |diff| {}",
        names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ")
    );
    if problems.is_empty() {
        Outcome::pass(detail)
    } else {
        Outcome::fail(format!("{detail}; {}", problems.join("; ")))
    }
}
