//! Synthetic paired world with known ground truth.
//!
//! Each symbol owns a fixed random 160-dim signature; an utterance's audio is
//! its symbols' signatures, each held for `frames_per_token` frames, plus
//! Gaussian noise. Audio→text is therefore recoverable, and the hidden
//! pairings of the unpaired halves let oracles score translations.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_dmf, FeatureNorm, FEATURE_DIM};
use crate::corpus::{
    audio_path, text_path, Manifest, OracleSection, SplitInfo, FINETUNE_TEST, FINETUNE_TRAIN, PAIRED,
    UNPAIRED_AUDIO, UNPAIRED_TEXT, UNPAIRED_TEXT_TRUTH,
};
use crate::error::{Error, IoContext, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::vocab::{Vocab, NUM_SPECIAL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Parity of the sum of symbol indices (2 classes).
    Parity,
    /// Mean symbol index divided by the symbol count (regression in [0, 1)).
    MeanId,
    /// Speaker index; each speaker adds a fixed offset to every frame.
    SpeakerSignature,
}

impl LabelRule {
    pub fn tag(self) -> &'static str {
        match self {
            LabelRule::Parity => "parity",
            LabelRule::MeanId => "mean_id",
            LabelRule::SpeakerSignature => "speaker_signature",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "parity" => Ok(LabelRule::Parity),
            "mean_id" => Ok(LabelRule::MeanId),
            "speaker_signature" => Ok(LabelRule::SpeakerSignature),
            other => Err(Error::Config(format!("unknown label rule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub frames_per_token: usize,
    pub noise_std: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub n_paired: usize,
    pub n_unpaired_text: usize,
    pub n_unpaired_audio: usize,
    pub n_finetune_train: usize,
    pub n_finetune_test: usize,
    pub label_rule: LabelRule,
    pub n_speakers: usize,
    pub speaker_offset_std: f64,
    pub min_signature_distance: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            frames_per_token: 4,
            noise_std: 0.05,
            min_len: 5,
            max_len: 12,
            n_paired: 200,
            n_unpaired_text: 1000,
            n_unpaired_audio: 1000,
            n_finetune_train: 400,
            n_finetune_test: 200,
            label_rule: LabelRule::Parity,
            n_speakers: 8,
            speaker_offset_std: 0.5,
            min_signature_distance: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.frames_per_token == 0 {
            return Err(Error::Config("synth vocab_size and frames_per_token must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "synth length range [{}, {}] is empty",
                self.min_len, self.max_len
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.speaker_offset_std >= 0.0) {
            return Err(Error::Config("synth noise levels must be nonnegative".into()));
        }
        if self.label_rule == LabelRule::SpeakerSignature && self.n_speakers < 2 {
            return Err(Error::Config("speaker labels need at least two speakers".into()));
        }
        let total = self.n_paired + self.n_unpaired_text + self.n_unpaired_audio + self.n_finetune_train + self.n_finetune_test;
        let capacity = (self.min_len..=self.max_len)
            .map(|l| (self.vocab_size as f64).powi(l as i32))
            .sum::<f64>();
        if total as f64 > capacity / 2.0 {
            return Err(Error::Config(format!(
                "{total} distinct utterances requested but only {capacity} exist; splits would overlap"
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.label_rule {
            LabelRule::Parity => Some(2),
            LabelRule::MeanId => None,
            LabelRule::SpeakerSignature => Some(self.n_speakers),
        }
    }
}

/// Symbol signatures, rejection-sampled so every pair is further apart
/// than `min_distance` in L2.
pub fn signatures(spec: &SynthSpec) -> Vec<Vec<f32>> {
    let mut rng = stream(spec.seed, Purpose::Synth, 0, 0);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(spec.vocab_size);
    while out.len() < spec.vocab_size {
        let cand: Vec<f32> = (0..FEATURE_DIM).map(|_| normal.sample(&mut rng)).collect();
        let far = out.iter().all(|s| {
            let d2: f64 = s.iter().zip(&cand).map(|(a, b)| f64::from(a - b).powi(2)).sum();
            d2.sqrt() > spec.min_signature_distance
        });
        if far {
            out.push(cand);
        }
    }
    out
}

fn speaker_offsets(spec: &SynthSpec) -> Vec<Vec<f32>> {
    let mut rng = stream(spec.seed, Purpose::Synth, 0, 1);
    let normal = Normal::new(0.0f32, spec.speaker_offset_std as f32).unwrap();
    (0..spec.n_speakers)
        .map(|_| (0..FEATURE_DIM).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

/// Label of an utterance given as symbol indices (`0..vocab_size`).
pub fn label_rule(rule: LabelRule, symbols: &[usize], vocab_size: usize, speaker: usize) -> f64 {
    match rule {
        LabelRule::Parity => (symbols.iter().sum::<usize>() % 2) as f64,
        LabelRule::MeanId => {
            symbols.iter().sum::<usize>() as f64 / symbols.len() as f64 / vocab_size as f64
        }
        LabelRule::SpeakerSignature => speaker as f64,
    }
}

/// Clean-plus-noise features for one utterance.
pub fn render(
    symbols: &[usize],
    sigs: &[Vec<f32>],
    frames_per_token: usize,
    noise_std: f64,
    offset: Option<&[f32]>,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let normal = Normal::new(0.0f32, noise_std as f32).unwrap();
    let mut data = Vec::with_capacity(symbols.len() * frames_per_token * FEATURE_DIM);
    for &s in symbols {
        for _ in 0..frames_per_token {
            for (j, &v) in sigs[s].iter().enumerate() {
                let noise = if noise_std > 0.0 { normal.sample(rng) } else { 0.0 };
                data.push(v + offset.map_or(0.0, |o| o[j]) + noise);
            }
        }
    }
    Tensor::new(&[symbols.len() * frames_per_token, FEATURE_DIM], data).expect("shape")
}

struct Utterance {
    symbols: Vec<usize>,
    speaker: usize,
}

fn draw_utterances(spec: &SynthSpec, counts: &[usize]) -> Result<Vec<Vec<Utterance>>> {
    let mut rng = stream(spec.seed, Purpose::Synth, 0, 2);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(counts.len());
    for &n in counts {
        let mut split = Vec::with_capacity(n);
        let mut misses = 0;
        while split.len() < n {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
            let speaker = rng.gen_range(0..spec.n_speakers.max(1));
            if seen.insert(symbols.clone()) {
                split.push(Utterance { symbols, speaker });
                misses = 0;
            } else {
                misses += 1;
                if misses > 10_000 {
                    return Err(Error::Config("could not draw enough distinct utterances".into()));
                }
            }
        }
        out.push(split);
    }
    Ok(out)
}

fn line(vocab: &Vocab, symbols: &[usize]) -> String {
    vocab.decode(&symbols.iter().map(|s| s + NUM_SPECIAL).collect::<Vec<_>>())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_path(path)
}

/// Write a synthetic corpus under `root` and return its manifest.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    let vocab = Vocab::synthetic(spec.vocab_size);
    let sigs = signatures(spec);
    let offsets = speaker_offsets(spec);
    let names = [PAIRED, UNPAIRED_TEXT, UNPAIRED_AUDIO, FINETUNE_TRAIN, FINETUNE_TEST];
    let counts = [
        spec.n_paired,
        spec.n_unpaired_text,
        spec.n_unpaired_audio,
        spec.n_finetune_train,
        spec.n_finetune_test,
    ];
    let utterances = draw_utterances(spec, &counts)?;

    create_dir(&root.join("text"))?;
    for dir in [PAIRED, UNPAIRED_AUDIO, UNPAIRED_TEXT_TRUTH, FINETUNE_TRAIN, FINETUNE_TEST] {
        create_dir(&root.join("audio").join(dir))?;
    }

    let mut next_id = 0u64;
    let mut splits = BTreeMap::new();
    let mut oracle = OracleSection::default();
    let mut norm_inputs: Vec<Tensor<f32>> = Vec::new();
    for (split_ix, (name, utts)) in names.iter().zip(&utterances).enumerate() {
        let finetune = split_ix >= 3;
        let mut ids = Vec::with_capacity(utts.len());
        let mut lines = String::new();
        let mut labels = Vec::new();
        for u in utts {
            let id = next_id;
            next_id += 1;
            ids.push(id);
            let offset = (finetune && spec.label_rule == LabelRule::SpeakerSignature)
                .then(|| offsets[u.speaker].as_slice());
            let mut rng = stream(spec.seed, Purpose::Synth, 1, id);
            let features = render(&u.symbols, &sigs, spec.frames_per_token, spec.noise_std, offset, &mut rng);
            let text = line(&vocab, &u.symbols);
            match *name {
                UNPAIRED_TEXT => {
                    let rel = format!("audio/{UNPAIRED_TEXT_TRUTH}/{id:06}.dmf");
                    write_dmf(&root.join(&rel), &features)?;
                    oracle.unpaired_text_audio.insert(id, rel);
                }
                UNPAIRED_AUDIO => {
                    write_dmf(&audio_path(root, name, id), &features)?;
                    oracle.unpaired_audio_text.insert(id, text.clone());
                }
                _ => write_dmf(&audio_path(root, name, id), &features)?,
            }
            if *name != UNPAIRED_AUDIO {
                lines.push_str(&text);
                lines.push('\n');
            }
            if *name == PAIRED || *name == UNPAIRED_AUDIO {
                norm_inputs.push(features);
            }
            if finetune {
                labels.push(label_rule(spec.label_rule, &u.symbols, spec.vocab_size, u.speaker));
            }
        }
        let has_text = *name != UNPAIRED_AUDIO;
        if has_text {
            let path = text_path(root, name);
            fs::write(&path, lines).with_path(&path)?;
        }
        splits.insert(
            name.to_string(),
            SplitInfo {
                ids,
                has_text,
                has_audio: *name != UNPAIRED_TEXT,
                labels: finetune.then_some(labels),
            },
        );
    }

    let feature_norm = if norm_inputs.is_empty() {
        FeatureNorm::identity()
    } else {
        FeatureNorm::fit(norm_inputs.iter())?
    };
    let manifest = Manifest {
        vocab,
        feature_norm,
        generator: serde_json::to_value(spec).expect("spec serializes"),
        label_rule: Some(spec.label_rule.tag().to_string()),
        num_classes: spec.num_classes(),
        splits,
        oracle,
    };
    manifest.save(root)?;
    Ok(manifest)
}

/// Mean per-frame L1 between translations and their true features over the
/// overlapping length, averaged over examples.
pub fn audio_fidelity<'a>(pairs: impl IntoIterator<Item = (&'a Tensor<f32>, &'a Tensor<f32>)>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (translated, truth) in pairs {
        if translated.cols() != truth.cols() {
            return Err(Error::Mismatch(format!(
                "translation width {} differs from truth width {}",
                translated.cols(),
                truth.cols()
            )));
        }
        let frames = translated.rows().min(truth.rows());
        let sum: f64 = (0..frames)
            .map(|r| {
                translated.row(r).iter().zip(truth.row(r)).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>()
                    / truth.cols() as f64
            })
            .sum();
        total += sum / frames as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Mismatch("no translations to score".into()));
    }
    Ok(total / n as f64)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(x * y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(x * x)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(x * x)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine between text translation rows and the embeddings of the true
/// tokens at the same positions.
pub fn text_fidelity<'a>(
    pairs: impl IntoIterator<Item = (&'a Tensor<f32>, &'a [usize])>,
    table: &Tensor<f32>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (translated, truth) in pairs {
        let len = translated.rows().min(truth.len());
        total += (0..len).map(|r| cosine(translated.row(r), table.row(truth[r]))).sum::<f64>() / len as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Mismatch("no translations to score".into()));
    }
    Ok(total / n as f64)
}

/// Nearest token (by cosine against `table`) for every row of a text state.
pub fn nearest_tokens(state: &Tensor<f32>, table: &Tensor<f32>) -> Vec<usize> {
    (0..state.rows())
        .map(|r| {
            (0..table.rows())
                .map(|t| (t, cosine(state.row(r), table.row(t))))
                .fold((0, f64::NEG_INFINITY), |best, (t, c)| if c > best.1 { (t, c) } else { best })
                .0
        })
        .collect()
}

/// Fraction of true tokens recovered in position by nearest-token decoding.
pub fn decoding_accuracy(state: &Tensor<f32>, truth: &[usize], table: &Tensor<f32>) -> f64 {
    let decoded = nearest_tokens(state, table);
    let hits = truth.iter().zip(&decoded).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}
