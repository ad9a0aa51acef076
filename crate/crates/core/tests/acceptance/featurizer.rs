//! Criterion 8: frame counts follow the closed form over 50 lengths, the
//! output is always 160 wide, and a global gain shifts log-mel bins by a
//! per-bin constant.

use duomodal::audio::{featurize_samples, FEATURE_DIM, LOG_FLOOR, N_MELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::Outcome;

const GAIN_TOL: f64 = 1e-5;

fn expected_frames(n: usize) -> usize {
    (n - 800) / 200 + 1
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6665_6174);
    let mut problems = Vec::new();
    let lengths: Vec<usize> = (0..50).map(|i| 800 + i * 397 + (i % 7) * 13).collect();
    for &n in &lengths {
        let signal: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        match featurize_samples(&signal, 16_000) {
            Ok(f) => {
                if f.num_frames() != expected_frames(n) || f.frames().cols() != FEATURE_DIM {
                    problems.push(format!("{n} samples gave {:?}", f.frames().shape()));
                }
            }
            Err(e) => problems.push(format!("{n} samples: {e}")),
        }
    }

    // Gain identity: tenfold amplitude adds ln(100) to every above-floor bin.
    let mut worst_gain = 0.0f64;
    let floor = LOG_FLOOR.ln() as f32 + 1.0;
    for trial in 0..5 {
        let n = 4000 + trial * 1234;
        let quiet: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let loud: Vec<f32> = quiet.iter().map(|v| v * 10.0).collect();
        let (a, b) = (
            featurize_samples(&quiet, 16_000).expect("quiet"),
            featurize_samples(&loud, 16_000).expect("loud"),
        );
        for r in 0..a.num_frames() {
            for (x, y) in a.frames().row(r)[..N_MELS].iter().zip(&b.frames().row(r)[..N_MELS]) {
                if *x > floor {
                    worst_gain = worst_gain.max((f64::from(*y - *x) - 100f64.ln()).abs());
                }
            }
        }
    }
    if !(worst_gain < GAIN_TOL) {
        problems.push(format!("gain identity off by {worst_gain:.2e}"));
    }

    let detail = format!(
        "{} lengths checked, width {FEATURE_DIM}, worst gain deviation {worst_gain:.2e} (limit {GAIN_TOL:.0e})",
        lengths.len()
    );
    if problems.is_empty() {
        Outcome::pass(detail)
    } else {
        Outcome::fail(format!("{detail}; {}", problems.join("; ")))
    }
}
