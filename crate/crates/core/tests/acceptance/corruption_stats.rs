//! Criterion 2: selection fractions, action shares, Ĉ replacement rate and
//! segment-length uniformity, each within ±2 percentage points at n = 10⁵.

use duomodal::corruption::{
    corrupt_audio, corrupt_text, imitate_audio_noise, imitate_text_noise, segment_audio, Action,
    CorruptionPolicy,
};
use duomodal::rng::{stream, Purpose};
use duomodal::Tensor;

use crate::report::Outcome;

const N: usize = 100_000;
const TOL: f64 = 0.02;

struct Checks {
    lines: Vec<String>,
    failures: Vec<String>,
}

impl Checks {
    fn band(&mut self, name: &str, observed: f64, lo: f64, hi: f64) {
        self.lines.push(format!("{name}={observed:.4}"));
        if !(lo..=hi).contains(&observed) {
            self.failures.push(format!("{name} {observed:.4} outside [{lo:.4}, {hi:.4}]"));
        }
    }

    fn near(&mut self, name: &str, observed: f64, target: f64) {
        self.band(name, observed, target - TOL, target + TOL);
    }
}

#[derive(Default)]
struct Tally {
    units: usize,
    selected: usize,
    mask: usize,
    random: usize,
    keep: usize,
}

impl Tally {
    fn add(&mut self, action: Action) {
        self.selected += 1;
        match action {
            Action::Mask | Action::MaskFallback => self.mask += 1,
            Action::Random => self.random += 1,
            Action::Keep => self.keep += 1,
        }
    }

    fn share(&self, n: usize) -> f64 {
        n as f64 / self.selected as f64
    }
}

/// Corrupt 20-token sentences until `N` tokens were seen and at least `N`
/// were selected.
fn text_tally(policy: &CorruptionPolicy, purpose: Purpose) -> Tally {
    let ids: Vec<usize> = (0..20).map(|i| 3 + i).collect();
    let mut t = Tally::default();
    let mut ex = 0u64;
    while t.units < N || t.selected < N {
        let (_, rec) = corrupt_text(&ids, policy, 3..35, &mut stream(1, purpose, 0, ex));
        t.units += ids.len();
        rec.spans.iter().for_each(|s| t.add(s.action));
        ex += 1;
    }
    t
}

fn text_exact(policy: &CorruptionPolicy) -> Tally {
    let ids: Vec<usize> = (0..N).map(|i| 3 + i % 32).collect();
    let (_, rec) = corrupt_text(&ids, policy, 3..35, &mut stream(6, Purpose::Dump, 0, 0));
    let mut t = Tally {
        units: N,
        ..Tally::default()
    };
    rec.spans.iter().for_each(|s| t.add(s.action));
    t
}

fn audio_tally(policy: &CorruptionPolicy, purpose: Purpose) -> Tally {
    let a = Tensor::<f32>::ones(&[500, 160]);
    let mut t = Tally::default();
    let mut ex = 0u64;
    while t.units < N || t.selected < N {
        let mut rng = stream(2, purpose, 0, ex);
        let segs = segment_audio(500, (20, 50), &mut rng.clone());
        let (_, rec) = corrupt_audio(&a, policy, &mut rng).expect("corrupt");
        t.units += segs.len();
        rec.spans.iter().for_each(|s| t.add(s.action));
        ex += 1;
    }
    t
}

pub fn run() -> Outcome {
    let mut c = Checks {
        lines: Vec::new(),
        failures: Vec::new(),
    };

    for (label, policy, purpose) in [
        ("idae", CorruptionPolicy::idae(), Purpose::IdaeText),
        ("cdae", CorruptionPolicy::cdae(), Purpose::CdaeText),
    ] {
        let t = text_tally(&policy, purpose);
        c.near(&format!("text.{label}.select"), t.selected as f64 / t.units as f64, policy.select_prob);
        c.near(&format!("text.{label}.mask"), t.share(t.mask), policy.mask_share);
        c.near(&format!("text.{label}.random"), t.share(t.random), policy.random_share);
        c.near(&format!("text.{label}.keep"), t.share(t.keep), policy.keep_share);
        if label == "idae" {
            // Tighter bands on exactly 10⁵ tokens at 15%.
            let t = text_exact(&policy);
            c.band("text.idae.select.example", t.selected as f64 / t.units as f64, 0.143, 0.157);
            c.band("text.idae.mask.example", t.share(t.mask), 0.78, 0.82);
        }

        let a = audio_tally(&policy, if label == "idae" { Purpose::IdaeAudio } else { Purpose::CdaeAudio });
        c.near(&format!("audio.{label}.select"), a.selected as f64 / a.units as f64, policy.select_prob);
        c.near(&format!("audio.{label}.mask"), a.share(a.mask), policy.mask_share);
        c.near(&format!("audio.{label}.random"), a.share(a.random), policy.random_share);
        c.near(&format!("audio.{label}.keep"), a.share(a.keep), policy.keep_share);
    }

    // Ĉ at 30%: tokens and segments.
    let clean: Vec<usize> = (0..25).map(|i| 3 + i).collect();
    let translated = Tensor::zeros(&[25, 8]);
    let (mut seen, mut replaced) = (0usize, 0usize);
    let mut ex = 0;
    while seen < N {
        let (_, r) = imitate_text_noise(&clean, &translated, 0.3, &mut stream(3, Purpose::ImitateText, 0, ex))
            .expect("imitate");
        seen += r.len();
        replaced += r.iter().filter(|&&x| x).count();
        ex += 1;
    }
    c.near("imitate.text", replaced as f64 / seen as f64, 0.3);

    let (clean_a, trans_a) = (Tensor::<f32>::zeros(&[500, 160]), Tensor::<f32>::ones(&[500, 160]));
    let (mut segs_seen, mut segs_replaced) = (0usize, 0usize);
    let mut ex = 0;
    while segs_seen < N {
        let mut rng = stream(4, Purpose::ImitateAudio, 0, ex);
        let segs = segment_audio(500, (20, 50), &mut rng.clone());
        let (mixed, _) = imitate_audio_noise(&clean_a, &trans_a, 0.3, (20, 50), &mut rng).expect("imitate");
        segs_seen += segs.len();
        segs_replaced += segs.iter().filter(|&&(s, _)| mixed.row(s)[0] == 1.0).count();
        ex += 1;
    }
    c.near("imitate.audio", segs_replaced as f64 / segs_seen as f64, 0.3);

    // Segment lengths: untruncated segments only.
    let mut counts = [0usize; 51];
    let mut total = 0usize;
    let mut ex = 0;
    while total < N {
        let segs = segment_audio(2000, (20, 50), &mut stream(5, Purpose::Dump, 1, ex));
        for &(_, l) in &segs[..segs.len() - 1] {
            counts[l] += 1;
            total += 1;
        }
        ex += 1;
    }
    let out_of_range: usize = counts[..20].iter().sum();
    if out_of_range > 0 {
        c.failures.push(format!("{out_of_range} segments shorter than 20"));
    }
    let freqs: Vec<f64> = counts[20..].iter().map(|&k| k as f64 / total as f64).collect();
    let (lo, hi) = freqs.iter().fold((1.0f64, 0.0f64), |(a, b), &f| (a.min(f), b.max(f)));
    c.lines.push(format!("segment.freq=[{lo:.4},{hi:.4}]"));
    for (i, &f) in freqs.iter().enumerate() {
        if (f - 1.0 / 31.0).abs() > TOL || !(0.022..=0.043).contains(&f) {
            c.failures.push(format!("segment length {} frequency {f:.4}", i + 20));
        }
    }

    let detail = c.lines.join(" ");
    if c.failures.is_empty() {
        Outcome::pass(detail)
    } else {
        Outcome::fail(format!("{}; {detail}", c.failures.join("; ")))
    }
}
