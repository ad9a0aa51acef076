//! Stochastic corruption: the denoising function C for text and audio, the
//! fully masked warm-up queries, and Ĉ, which mimics translation noise by
//! splicing translated rows into clean input.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::model::TextInput;
use crate::tensor::Tensor;
use crate::vocab::{Vocab, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionPolicy {
    pub select_prob: f64,
    pub mask_share: f64,
    pub random_share: f64,
    pub keep_share: f64,
    pub segment_min: usize,
    pub segment_max: usize,
}

impl CorruptionPolicy {
    /// 15% selection, 80/10/10.
    pub fn idae() -> Self {
        Self {
            select_prob: 0.15,
            mask_share: 0.8,
            random_share: 0.1,
            keep_share: 0.1,
            segment_min: 20,
            segment_max: 50,
        }
    }

    /// 30% selection, 60/20/20.
    pub fn cdae() -> Self {
        Self {
            select_prob: 0.30,
            mask_share: 0.6,
            random_share: 0.2,
            keep_share: 0.2,
            ..Self::idae()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.select_prob, self.mask_share, self.random_share, self.keep_share];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("corruption probabilities must lie in [0, 1]".into()));
        }
        if (self.mask_share + self.random_share + self.keep_share - 1.0).abs() > 1e-9 {
            return Err(Error::Config("corruption action shares must sum to 1".into()));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return Err(Error::Config(format!(
                "empty segment length range [{}, {}]",
                self.segment_min, self.segment_max
            )));
        }
        Ok(())
    }

    fn draw_action<R: Rng>(&self, rng: &mut R) -> Action {
        let u: f64 = rng.gen();
        if u < self.mask_share {
            Action::Mask
        } else if u < self.mask_share + self.random_share {
            Action::Random
        } else {
            Action::Keep
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Mask,
    Random,
    Keep,
    /// Random replacement had no room and was zero-masked instead.
    MaskFallback,
}

/// One corrupted span: a single token for text, a segment for audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub action: Action,
    /// Audio random replacement: start of the copied span.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
}

/// Selected spans and the values they held before corruption.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionRecord<V> {
    pub spans: Vec<Span>,
    pub originals: Vec<V>,
}

impl<V> CorruptionRecord<V> {
    /// Per-position flag: `true` where a selected span covers the position.
    pub fn selected_mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for s in &self.spans {
            m[s.start..s.start + s.len].iter_mut().for_each(|x| *x = true);
        }
        m
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Corrupt a token sequence. Special ids are never selected; random
/// replacements draw from `regular`.
pub fn corrupt_text<R: Rng>(
    ids: &[usize],
    policy: &CorruptionPolicy,
    regular: Range<usize>,
    rng: &mut R,
) -> (Vec<usize>, CorruptionRecord<usize>) {
    let mut out = ids.to_vec();
    let mut record = CorruptionRecord {
        spans: Vec::new(),
        originals: Vec::new(),
    };
    for (i, &id) in ids.iter().enumerate() {
        if Vocab::is_special(id) || !rng.gen_bool(policy.select_prob) {
            continue;
        }
        let action = policy.draw_action(rng);
        match action {
            Action::Mask => out[i] = MASK,
            Action::Random => out[i] = rng.gen_range(regular.clone()),
            _ => {}
        }
        record.spans.push(Span {
            start: i,
            len: 1,
            action,
            source: None,
        });
        record.originals.push(id);
    }
    (out, record)
}

/// Greedy left-to-right partition of `0..len` into segments whose lengths
/// are uniform on `range`; the last one is truncated.
pub fn segment_audio<R: Rng>(len: usize, range: (usize, usize), rng: &mut R) -> Vec<(usize, usize)> {
    let mut segs = Vec::new();
    let mut start = 0;
    while start < len {
        let l = rng.gen_range(range.0..=range.1).min(len - start);
        segs.push((start, l));
        start += l;
    }
    segs
}

/// Start of a same-length span disjoint from `start..start+len`, if any fits.
fn disjoint_source<R: Rng>(total: usize, start: usize, len: usize, rng: &mut R) -> Option<usize> {
    let before = (start + 1).saturating_sub(len);
    let after = total.saturating_sub(start + 2 * len - 1);
    let left = if start >= len { before } else { 0 };
    let right = if total >= start + 2 * len { after } else { 0 };
    match left + right {
        0 => None,
        n => {
            let k = rng.gen_range(0..n);
            Some(if k < left { k } else { start + len + (k - left) })
        }
    }
}

/// Corrupt an acoustic feature sequence segment by segment.
pub fn corrupt_audio<R: Rng>(
    features: &Tensor<f32>,
    policy: &CorruptionPolicy,
    rng: &mut R,
) -> Result<(Tensor<f32>, CorruptionRecord<Tensor<f32>>)> {
    let t = features.rows();
    if t == 0 {
        return Err(Error::contract("cannot corrupt an empty feature sequence"));
    }
    let width = features.cols();
    let mut out = features.clone();
    let mut record = CorruptionRecord {
        spans: Vec::new(),
        originals: Vec::new(),
    };
    for (start, len) in segment_audio(t, (policy.segment_min, policy.segment_max), rng) {
        if !rng.gen_bool(policy.select_prob) {
            continue;
        }
        let mut action = policy.draw_action(rng);
        let mut source = None;
        let block = start * width..(start + len) * width;
        match action {
            Action::Mask => out.data_mut()[block].iter_mut().for_each(|v| *v = 0.0),
            Action::Random => match disjoint_source(t, start, len, rng) {
                Some(src) => {
                    let from = &features.data()[src * width..(src + len) * width];
                    out.data_mut()[block].copy_from_slice(from);
                    source = Some(src);
                }
                None => {
                    action = Action::MaskFallback;
                    out.data_mut()[block].iter_mut().for_each(|v| *v = 0.0);
                }
            },
            _ => {}
        }
        record.spans.push(Span {
            start,
            len,
            action,
            source,
        });
        record.originals.push(features.slice_rows(start, len)?);
    }
    Ok((out, record))
}

pub fn restore_text(corrupted: &[usize], record: &CorruptionRecord<usize>) -> Vec<usize> {
    let mut out = corrupted.to_vec();
    for (s, &orig) in record.spans.iter().zip(&record.originals) {
        out[s.start] = orig;
    }
    out
}

pub fn restore_audio(corrupted: &Tensor<f32>, record: &CorruptionRecord<Tensor<f32>>) -> Tensor<f32> {
    let mut out = corrupted.clone();
    let w = out.cols();
    for (s, orig) in record.spans.iter().zip(&record.originals) {
        out.data_mut()[s.start * w..(s.start + s.len) * w].copy_from_slice(orig.data());
    }
    out
}

fn check_masked_len(len: usize, cap: usize, what: &str) -> Result<()> {
    if len == 0 || len > cap {
        return Err(Error::contract(format!("masked {what} length {len} outside 1..={cap}")));
    }
    Ok(())
}

/// `len` mask tokens.
pub fn masked_text(len: usize, cap: usize) -> Result<Vec<usize>> {
    check_masked_len(len, cap, "text")?;
    Ok(vec![MASK; len])
}

/// `len` all-zero frames.
pub fn masked_audio(len: usize, cap: usize) -> Result<Tensor<f32>> {
    check_masked_len(len, cap, "audio")?;
    Ok(Tensor::zeros(&[len, FEATURE_DIM]))
}

/// Ĉ for text: each token is independently replaced, with probability
/// `replace_prob`, by the translated row at the same position.
pub fn imitate_text_noise<R: Rng>(
    clean: &[usize],
    translated: &Tensor<f32>,
    replace_prob: f64,
    rng: &mut R,
) -> Result<(TextInput, Vec<bool>)> {
    if translated.rows() != clean.len() {
        return Err(Error::contract(format!(
            "translation has {} rows for a {}-token sequence",
            translated.rows(),
            clean.len()
        )));
    }
    let replaced: Vec<bool> = clean.iter().map(|_| rng.gen_bool(replace_prob)).collect();
    let input = TextInput::Mixed {
        ids: clean.to_vec(),
        soft: translated.clone(),
        replaced: replaced.clone(),
    };
    Ok((input, replaced))
}

/// Ĉ for audio: segments (same segmenter as C) are independently replaced
/// by the translated frames at the same positions. Returns the mixed
/// features and a per-frame replacement flag.
pub fn imitate_audio_noise<R: Rng>(
    clean: &Tensor<f32>,
    translated: &Tensor<f32>,
    replace_prob: f64,
    range: (usize, usize),
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<bool>)> {
    if translated.shape() != clean.shape() {
        return Err(Error::contract(format!(
            "translation shape {:?} differs from clean shape {:?}",
            translated.shape(),
            clean.shape()
        )));
    }
    let w = clean.cols();
    let mut out = clean.clone();
    let mut replaced = vec![false; clean.rows()];
    for (start, len) in segment_audio(clean.rows(), range, rng) {
        if rng.gen_bool(replace_prob) {
            let block = start * w..(start + len) * w;
            out.data_mut()[block.clone()].copy_from_slice(&translated.data()[block]);
            replaced[start..start + len].iter_mut().for_each(|r| *r = true);
        }
    }
    Ok((out, replaced))
}
