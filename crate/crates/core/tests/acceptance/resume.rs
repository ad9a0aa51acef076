//! Criterion 7: an interrupted-and-resumed run reproduces the uninterrupted
//! run's artifacts byte for byte, and two same-seed runs log identical
//! metrics.

use std::fs;
use std::path::Path;

use duomodal::corpus::Corpus;
use duomodal::train::{checkpoint_path, TrainConfig, Trainer};

use crate::fixtures;
use crate::report::Outcome;

const EPOCHS: usize = 4;
const STOP_AFTER: usize = 2;

fn config(out: &Path) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        warmup_epochs: 1,
        seed: 11,
        out_dir: Some(out.to_path_buf()),
        ..TrainConfig::default()
    }
}

fn uninterrupted(corpus: &Corpus, out: &Path) {
    Trainer::new(config(out), corpus).expect("trainer").run().expect("run");
}

fn interrupted(corpus: &Corpus, out: &Path) {
    {
        let mut t = Trainer::new(config(out), corpus).expect("trainer");
        t.run_warmup().expect("warm-up");
        t.init_store().expect("init");
        t.checkpoint().expect("checkpoint");
        for _ in 0..STOP_AFTER {
            t.run_epoch().expect("epoch");
        }
    }
    let ckpt = checkpoint_path(out, STOP_AFTER);
    let mut t = Trainer::resume(config(out), corpus, &ckpt, None).expect("resume");
    t.run().expect("resumed run");
}

pub fn run() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let corpus = fixtures::small_corpus(&tmp.path().join("corpus"));
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    uninterrupted(&corpus, &a);
    interrupted(&corpus, &b);
    uninterrupted(&corpus, &c);

    let last = checkpoint_path(Path::new(""), EPOCHS);
    let stem = last.file_stem().and_then(|s| s.to_str()).expect("stem").to_string();
    let artifacts = [
        "final.dmc".to_string(),
        format!("{stem}.dmc"),
        format!("{stem}.optim.dmc"),
        format!("{stem}.dms"),
        format!("{stem}.state.json"),
        "metrics.jsonl".to_string(),
    ];
    let mut problems = Vec::new();
    for name in &artifacts {
        let (x, y) = (fs::read(a.join(name)), fs::read(b.join(name)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            (Ok(_), Ok(_)) => problems.push(format!("resumed {name} differs")),
            _ => problems.push(format!("{name} missing")),
        }
    }
    let metrics = |d: &Path| fs::read(d.join("metrics.jsonl")).unwrap_or_default();
    if metrics(&a).is_empty() || metrics(&a) != metrics(&c) {
        problems.push("same-seed metrics.jsonl differ".into());
    }
    let detail = format!(
        "{} artifacts compared after resuming at epoch {STOP_AFTER} of {EPOCHS}; same-seed metrics identical",
        artifacts.len()
    );
    if problems.is_empty() {
        Outcome::pass(detail)
    } else {
        Outcome::fail(problems.join("; "))
    }
}
