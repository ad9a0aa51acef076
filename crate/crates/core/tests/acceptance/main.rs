//! Acceptance suite. Each criterion prints one PASS/FAIL line followed by a
//! summary. With `--strict` the process exits non-zero if any criterion
//! fails.
//!
//! Pass criterion numbers to run only those, e.g.
//! `cargo test --test acceptance -- 4,5 --strict`.

mod corruption_stats;
mod featurizer;
mod fixtures;
mod gradients;
mod metric_oracles;
mod param_scope;
mod report;
mod resume;
mod trends;

use std::time::Duration;

use report::{criterion, example};

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let strict = std::env::args().any(|a| a == "--strict");
    let selected = |id: u32| filter.as_deref().map_or(true, |f| f.split(',').any(|x| x.trim() == id.to_string()));
    let mut results = Vec::new();

    if selected(1) {
        results.push(criterion(1, "gradient correctness", Duration::from_secs(60), gradients::run));
    }
    if selected(2) {
        results.push(criterion(2, "corruption statistics", Duration::from_secs(30), corruption_stats::run));
    }
    if selected(3) {
        results.push(criterion(3, "IDAE parameter scope", Duration::from_secs(600), param_scope::run));
    }
    if selected(4) || selected(5) {
        let data = trends::Data::new();
        let mut runs = Vec::new();
        if selected(4) {
            results.push(criterion(4, "IDP denoising trend", Duration::from_secs(30 * 60), || {
                runs = trends::SEEDS.iter().map(|&s| trends::pretrain(&data, s)).collect();
                trends::idp_trend(&runs)
            }));
            if !runs.is_empty() {
                let vocab = data.corpus.manifest.vocab.regular_ids().len();
                results.push(example("translate decoding", trends::decoding(&runs, vocab)));
            }
        } else {
            runs = trends::SEEDS.iter().map(|&s| trends::pretrain(&data, s)).collect();
        }
        if selected(5) && !runs.is_empty() {
            results.push(criterion(5, "pre-training benefit", Duration::from_secs(10 * 60), || {
                trends::pretraining_benefit(&data, &runs)
            }));
        }
    }
    if selected(6) {
        results.push(criterion(6, "metric oracles", Duration::from_secs(5), metric_oracles::run));
    }
    if selected(7) {
        results.push(criterion(7, "determinism and resume", Duration::from_secs(600), resume::run));
    }
    if selected(8) {
        results.push(criterion(8, "featurizer contracts", Duration::from_secs(60), featurizer::run));
    }

    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
