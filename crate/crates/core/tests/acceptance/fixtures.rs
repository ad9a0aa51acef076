use std::path::Path;

use duomodal::corpus::Corpus;
use duomodal::synth::{generate, SynthSpec};

/// A reduced synthetic corpus for the run-level checks.
pub fn small_corpus(root: &Path) -> Corpus {
    let spec = SynthSpec {
        n_paired: 32,
        n_unpaired_text: 64,
        n_unpaired_audio: 64,
        n_finetune_train: 16,
        n_finetune_test: 16,
        ..SynthSpec::default()
    };
    generate(&spec, root).expect("generate");
    Corpus::load(root).expect("load")
}
