//! The four training objectives. Batch builders apply the (seeded)
//! corruption and produce packed inputs, targets and loss masks; the loss
//! functions then run the encoders inside a [`Session`].
//!
//! Text losses are cross-entropy through the tied head, audio losses are L1
//! through the audio head. L_W and L_A are summed without weights.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::corruption::{
    corrupt_audio, corrupt_text, imitate_audio_noise, imitate_text_noise, masked_audio, masked_text,
    CorruptionPolicy,
};
use crate::error::{Error, Result};
use crate::model::{Modality, Session, TextInput};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Which positions of a denoising branch contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    Selected,
    All,
}

/// Seed and epoch that key every corruption stream.
#[derive(Clone, Copy, Debug)]
pub struct NoiseKey {
    pub seed: u64,
    pub epoch: u64,
}

impl NoiseKey {
    fn rng(&self, purpose: Purpose, id: u64) -> crate::rng::Rng {
        stream(self.seed, purpose, self.epoch, id)
    }
}

/// Packed text reconstruction problem.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub inputs: Vec<TextInput>,
    pub lens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Packed audio reconstruction problem.
#[derive(Clone, Debug)]
pub struct AudioBatch {
    pub inputs: Vec<Tensor<f32>>,
    pub lens: Vec<usize>,
    pub targets: Tensor<f32>,
    pub mask: Vec<bool>,
}

impl TextBatch {
    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

impl AudioBatch {
    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn loss_mask(selected: Vec<bool>, positions: LossPositions) -> Vec<bool> {
    match positions {
        LossPositions::Selected => selected,
        LossPositions::All => vec![true; selected.len()],
    }
}

/// C(w) for a batch of token sequences.
pub fn denoise_text_batch(
    items: &[(u64, &[usize])],
    policy: &CorruptionPolicy,
    regular: Range<usize>,
    purpose: Purpose,
    key: NoiseKey,
    positions: LossPositions,
) -> Result<TextBatch> {
    if items.is_empty() {
        return Err(Error::contract("empty text batch"));
    }
    let mut b = TextBatch {
        inputs: Vec::with_capacity(items.len()),
        lens: Vec::with_capacity(items.len()),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    for &(id, ids) in items {
        let (corrupted, record) = corrupt_text(ids, policy, regular.clone(), &mut key.rng(purpose, id));
        b.mask.extend(loss_mask(record.selected_mask(ids.len()), positions));
        b.targets.extend_from_slice(ids);
        b.lens.push(ids.len());
        b.inputs.push(TextInput::Ids(corrupted));
    }
    Ok(b)
}

/// C(a) for a batch of feature sequences.
pub fn denoise_audio_batch(
    items: &[(u64, &Tensor<f32>)],
    policy: &CorruptionPolicy,
    purpose: Purpose,
    key: NoiseKey,
    positions: LossPositions,
) -> Result<AudioBatch> {
    if items.is_empty() {
        return Err(Error::contract("empty audio batch"));
    }
    let mut inputs = Vec::with_capacity(items.len());
    let mut mask = Vec::new();
    for &(id, a) in items {
        let (corrupted, record) = corrupt_audio(a, policy, &mut key.rng(purpose, id))?;
        mask.extend(loss_mask(record.selected_mask(a.rows()), positions));
        inputs.push(corrupted);
    }
    let clean: Vec<&Tensor<f32>> = items.iter().map(|(_, a)| *a).collect();
    Ok(AudioBatch {
        lens: clean.iter().map(|a| a.rows()).collect(),
        targets: Tensor::concat_rows(&clean)?,
        inputs,
        mask,
    })
}

/// Fully masked text queries of ground-truth length (warm-up).
pub fn masked_text_batch(items: &[&[usize]], cap: usize) -> Result<TextBatch> {
    if items.is_empty() {
        return Err(Error::contract("empty text batch"));
    }
    let mut b = TextBatch {
        inputs: Vec::new(),
        lens: Vec::new(),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    for ids in items {
        b.inputs.push(TextInput::Ids(masked_text(ids.len(), cap)?));
        b.lens.push(ids.len());
        b.targets.extend_from_slice(ids);
        b.mask.extend(std::iter::repeat(true).take(ids.len()));
    }
    Ok(b)
}

/// All-zero audio queries of ground-truth length (warm-up).
pub fn masked_audio_batch(items: &[&Tensor<f32>], cap: usize) -> Result<AudioBatch> {
    if items.is_empty() {
        return Err(Error::contract("empty audio batch"));
    }
    Ok(AudioBatch {
        inputs: items.iter().map(|a| masked_audio(a.rows(), cap)).collect::<Result<_>>()?,
        lens: items.iter().map(|a| a.rows()).collect(),
        targets: Tensor::concat_rows(items)?,
        mask: vec![true; items.iter().map(|a| a.rows()).sum()],
    })
}

/// Ĉ(w): clean text with 30% of tokens swapped for the translation rows.
pub fn imitated_text_memory(
    items: &[(u64, &[usize], &Tensor<f32>)],
    replace_prob: f64,
    key: NoiseKey,
) -> Result<Vec<TextInput>> {
    items
        .iter()
        .map(|&(id, ids, tr)| {
            imitate_text_noise(ids, tr, replace_prob, &mut key.rng(Purpose::ImitateText, id))
                .map(|(input, _)| input)
                .map_err(|e| Error::Pipeline(format!("example {id}: {e}")))
        })
        .collect()
}

/// Ĉ(a): clean audio with 30% of segments swapped for translated frames.
pub fn imitated_audio_memory(
    items: &[(u64, &Tensor<f32>, &Tensor<f32>)],
    replace_prob: f64,
    segment_range: (usize, usize),
    key: NoiseKey,
) -> Result<Vec<Tensor<f32>>> {
    items
        .iter()
        .map(|&(id, a, tr)| {
            imitate_audio_noise(a, tr, replace_prob, segment_range, &mut key.rng(Purpose::ImitateAudio, id))
                .map(|(mixed, _)| mixed)
                .map_err(|e| Error::Pipeline(format!("example {id}: {e}")))
        })
        .collect()
}

fn text_recon(sess: &mut Session, h: Var, batch: &TextBatch) -> Result<Var> {
    let logits = sess.text_logits(h)?;
    sess.graph.cross_entropy(logits, &batch.targets, Some(&batch.mask))
}

fn audio_recon(sess: &mut Session, h: Var, batch: &AudioBatch) -> Result<Var> {
    let pred = sess.audio_out(h)?;
    let target = sess.constant(batch.targets.clone());
    sess.graph.l1_loss(pred, target, Some(&batch.mask))
}

/// L_W(w | C(w); θ_uni^W): text unimodal encoder only.
pub fn intra_text_loss(sess: &mut Session, batch: &TextBatch) -> Result<Var> {
    let x = sess.embed_text(&batch.inputs)?;
    let h = sess.encode_uni(Modality::Text, x, &batch.lens, None)?;
    text_recon(sess, h, batch)
}

/// L_A(a | C(a); θ_uni^A): audio unimodal encoder only.
pub fn intra_audio_loss(sess: &mut Session, batch: &AudioBatch) -> Result<Var> {
    let refs: Vec<&Tensor<f32>> = batch.inputs.iter().collect();
    let x = sess.embed_audio(&refs)?;
    let h = sess.encode_uni(Modality::Audio, x, &batch.lens, None)?;
    audio_recon(sess, h, batch)
}

/// Unimodal encoding of audio memory.
pub fn encode_audio_memory(sess: &mut Session, memory: &[&Tensor<f32>]) -> Result<(Var, Vec<usize>)> {
    let lens: Vec<usize> = memory.iter().map(|m| m.rows()).collect();
    let x = sess.embed_audio(memory)?;
    Ok((sess.encode_uni(Modality::Audio, x, &lens, None)?, lens))
}

/// Unimodal encoding of text memory (ids, soft rows, or a mix).
pub fn encode_text_memory(sess: &mut Session, memory: &[TextInput]) -> Result<(Var, Vec<usize>)> {
    let lens: Vec<usize> = memory.iter().map(TextInput::len).collect();
    let x = sess.embed_text(memory)?;
    Ok((sess.encode_uni(Modality::Text, x, &lens, None)?, lens))
}

/// L_W(w | memory audio, query): text cross encoder over audio memory.
pub fn cross_text_loss(sess: &mut Session, batch: &TextBatch, memory: &[&Tensor<f32>]) -> Result<Var> {
    if memory.len() != batch.lens.len() {
        return Err(Error::contract("text batch and audio memory differ in size"));
    }
    let (mem, m_lens) = encode_audio_memory(sess, memory)?;
    let q = sess.embed_text(&batch.inputs)?;
    let h = sess.encode_cross(Modality::Text, q, &batch.lens, None, mem, &m_lens, None)?;
    text_recon(sess, h, batch)
}

/// L_A(a | memory text, query): audio cross encoder over text memory.
pub fn cross_audio_loss(sess: &mut Session, batch: &AudioBatch, memory: &[TextInput]) -> Result<Var> {
    if memory.len() != batch.lens.len() {
        return Err(Error::contract("audio batch and text memory differ in size"));
    }
    let (mem, m_lens) = encode_text_memory(sess, memory)?;
    let refs: Vec<&Tensor<f32>> = batch.inputs.iter().collect();
    let q = sess.embed_audio(&refs)?;
    let h = sess.encode_cross(Modality::Audio, q, &batch.lens, None, mem, &m_lens, None)?;
    audio_recon(sess, h, batch)
}

/// Sum of the given scalar losses.
pub fn sum_losses(sess: &mut Session, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::contract("no active loss components"))?;
    rest.iter().try_fold(first, |acc, &l| sess.graph.add(acc, l))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    IdaeText,
    IdaeAudio,
    WarmText,
    WarmAudio,
    CdaeUnpairedText,
    CdaeUnpairedAudio,
    CdaePairedText,
    CdaePairedAudio,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::IdaeText,
        Component::IdaeAudio,
        Component::WarmText,
        Component::WarmAudio,
        Component::CdaeUnpairedText,
        Component::CdaeUnpairedAudio,
        Component::CdaePairedText,
        Component::CdaePairedAudio,
    ];

    /// Metrics key, e.g. `loss.cdae.unpaired.text`.
    pub fn key(self) -> &'static str {
        match self {
            Component::IdaeText => "loss.idae.text",
            Component::IdaeAudio => "loss.idae.audio",
            Component::WarmText => "loss.warm.text",
            Component::WarmAudio => "loss.warm.audio",
            Component::CdaeUnpairedText => "loss.cdae.unpaired.text",
            Component::CdaeUnpairedAudio => "loss.cdae.unpaired.audio",
            Component::CdaePairedText => "loss.cdae.paired.text",
            Component::CdaePairedAudio => "loss.cdae.paired.audio",
        }
    }
}

/// Which components an ablation keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComponentFlags {
    pub idae: bool,
    pub cdae_unpaired: bool,
    pub cdae_paired: bool,
    pub warm: bool,
}

impl ComponentFlags {
    pub fn allows(&self, c: Component) -> bool {
        match c {
            Component::IdaeText | Component::IdaeAudio => self.idae,
            Component::WarmText | Component::WarmAudio => self.warm,
            Component::CdaeUnpairedText | Component::CdaeUnpairedAudio => self.cdae_unpaired,
            Component::CdaePairedText | Component::CdaePairedAudio => self.cdae_paired,
        }
    }
}

/// Scalar values of the loss components computed in one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub values: BTreeMap<Component, f64>,
}

impl LossBundle {
    pub fn set(&mut self, c: Component, v: f64) {
        self.values.insert(c, v);
    }

    pub fn get(&self, c: Component) -> Option<f64> {
        self.values.get(&c).copied()
    }

    /// Unweighted sum of the components the flags keep.
    pub fn total(&self, flags: &ComponentFlags) -> Result<f64> {
        let active: Vec<f64> = self
            .values
            .iter()
            .filter(|(c, _)| flags.allows(**c))
            .map(|(_, &v)| v)
            .collect();
        if active.is_empty() {
            return Err(Error::contract("all loss components are disabled"));
        }
        Ok(active.iter().sum())
    }

    pub fn cdae(&self) -> f64 {
        [
            Component::CdaeUnpairedText,
            Component::CdaeUnpairedAudio,
            Component::CdaePairedText,
            Component::CdaePairedAudio,
        ]
        .iter()
        .filter_map(|&c| self.get(c))
        .sum()
    }
}

#[cfg(test)]
mod tests;
