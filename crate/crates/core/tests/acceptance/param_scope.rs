//! Criterion 3: IDAE passes leave the cross-encoder bytes untouched over a
//! 3-epoch run, while the unimodal encoders do move.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use duomodal::corpus::Corpus;
use duomodal::model::ParamStore;
use duomodal::train::{TrainConfig, Trainer};

use crate::fixtures;
use crate::report::Outcome;

const EPOCHS: usize = 3;

/// Hash of the raw bytes of every parameter whose name starts with `prefix`.
fn bytes_hash(params: &ParamStore, prefix: &str) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in params.iter().filter(|(n, _)| n.starts_with(prefix)) {
        h.write(name.as_bytes());
        for v in t.data() {
            h.write(&v.to_le_bytes());
        }
    }
    h.finish()
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        warmup_epochs: 1,
        seed: 3,
        ..TrainConfig::default()
    }
}

pub fn run() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let corpus: Corpus = fixtures::small_corpus(dir.path());
    let mut problems = Vec::new();

    // The trainer's own epoch loop, which refuses to continue if IDAE moves
    // a cross parameter.
    let mut a = Trainer::new(config(), &corpus).expect("trainer");
    a.run_warmup().expect("warm-up");
    a.init_store().expect("init");
    for _ in 0..EPOCHS {
        match a.run_epoch() {
            Ok(s) => match s.cross_fingerprint {
                Some((before, after)) if before == after => {}
                other => problems.push(format!("epoch {}: fingerprints {other:?}", s.k)),
            },
            Err(e) => problems.push(e.to_string()),
        }
    }

    // The same passes driven by hand, hashing raw bytes independently.
    let mut b = Trainer::new(config(), &corpus).expect("trainer");
    b.run_warmup().expect("warm-up");
    b.init_store().expect("init");
    let mut cross_moved_in_cdae = 0;
    for k in 1..=EPOCHS {
        let cross0 = bytes_hash(&b.params, "cross.");
        let uni0 = bytes_hash(&b.params, "uni.");
        b.idae_pass(k).expect("idae");
        let cross1 = bytes_hash(&b.params, "cross.");
        if cross1 != cross0 {
            problems.push(format!("epoch {k}: IDAE changed cross-encoder bytes"));
        }
        if bytes_hash(&b.params, "uni.") == uni0 {
            problems.push(format!("epoch {k}: IDAE left the unimodal encoders unchanged"));
        }
        b.cdae_pass(k).expect("cdae");
        b.refresh().expect("refresh");
        if bytes_hash(&b.params, "cross.") != cross1 {
            cross_moved_in_cdae += 1;
        }
    }
    if cross_moved_in_cdae != EPOCHS {
        problems.push(format!("CDAE moved the cross encoders in only {cross_moved_in_cdae}/{EPOCHS} epochs"));
    }
    if a.params != b.params {
        problems.push("hand-driven passes diverged from the epoch loop".into());
    }

    let detail = format!("{EPOCHS} epochs, cross-encoder hash stable across every IDAE pass and moved by every CDAE pass");
    if problems.is_empty() {
        Outcome::pass(detail)
    } else {
        Outcome::fail(problems.join("; "))
    }
}
