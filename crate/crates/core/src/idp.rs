//! Iterative Denoising Process. After warm-up every unpaired example gets a
//! translation into the other modality (w̃ for audio, ã for text). Before
//! each later epoch the translations are recomputed by one gradient-free
//! forward pass that feeds the previous translation as the query stream and
//! the source example as cross-attention memory.
//!
//! Paired examples receive translations by the same mechanics (at their true
//! lengths) for the translation-noise imitator.
//!
//! Store file format `DMS1`: magic, u32 k, u32 entry count, then per entry
//! u64 example id, u8 modality (0 = w̃ text, 1 = ã audio), u32 rows, u32 cols
//! and rows×cols f32, all little endian, entries sorted by (id, modality).

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::corruption::{masked_audio, masked_text};
use crate::error::{Error, IoContext, Result};
use crate::model::{Modality, ModelConfig, ParamStore, Session, TextInput};
use crate::objectives::{encode_audio_memory, encode_text_memory};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DMS1";

fn tag(m: Modality) -> u8 {
    match m {
        Modality::Text => 0,
        Modality::Audio => 1,
    }
}

/// Translations keyed by `(example id, modality of the translation)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoParallelStore {
    k: u32,
    initialized: bool,
    entries: BTreeMap<(u64, Modality), Tensor<f32>>,
}

impl PseudoParallelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iteration(&self) -> u32 {
        self.k
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = ((u64, Modality), &Tensor<f32>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Entry for training at iteration `k`; refuses to serve a store that is
    /// not in lockstep with the caller.
    pub fn get(&self, id: u64, m: Modality, k: u32) -> Result<&Tensor<f32>> {
        if !self.initialized {
            return Err(Error::Pipeline("translation store read before initialization".into()));
        }
        if self.k != k {
            return Err(Error::Pipeline(format!(
                "translation store is at iteration {} but epoch {k} asked for it",
                self.k
            )));
        }
        self.peek(id, m)
    }

    /// Entry regardless of iteration (inspection and oracles).
    pub fn peek(&self, id: u64, m: Modality) -> Result<&Tensor<f32>> {
        self.entries
            .get(&(id, m))
            .ok_or_else(|| Error::Pipeline(format!("no {m} translation stored for example {id}")))
    }

    /// FNV-1a over the entry's bytes.
    pub fn checksum(&self, id: u64, m: Modality) -> Result<u64> {
        Ok(self.peek(id, m)?.data().iter().flat_map(|v| v.to_le_bytes()).fold(
            0xcbf2_9ce4_8422_2325u64,
            |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3),
        ))
    }

    /// Total stored floats.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    fn replace(&mut self, updates: Vec<((u64, Modality), Tensor<f32>)>) -> Result<()> {
        for (key, value) in &updates {
            if let Some(old) = self.entries.get(key) {
                if old.shape() != value.shape() {
                    return Err(Error::Pipeline(format!(
                        "translation for example {} changed shape from {:?} to {:?}",
                        key.0,
                        old.shape(),
                        value.shape()
                    )));
                }
            }
        }
        self.entries.extend(updates);
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(self.k);
        w.u32(self.entries.len() as u32);
        for (&(id, m), t) in &self.entries {
            w.u64(id);
            w.u8(tag(m));
            w.u32(t.rows() as u32);
            w.u32(t.cols() as u32);
            w.f32s(t.data());
        }
        w.buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(MAGIC)?;
        let k = r.u32()?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let id = r.u64()?;
            let m = match r.u8()? {
                0 => Modality::Text,
                1 => Modality::Audio,
                t => return Err(r.err(format!("unknown modality tag {t}"))),
            };
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let t = Tensor::new(&[rows, cols], r.f32s(rows * cols)?).map_err(|e| r.err(e.to_string()))?;
            if entries.insert((id, m), t).is_some() {
                return Err(r.err(format!("duplicate entry for example {id}")));
            }
        }
        r.finish()?;
        Ok(Self {
            k,
            initialized: true,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_path(path)?;
        Self::decode(&bytes, path)
    }
}

/// Source examples whose translations the store tracks.
#[derive(Clone, Debug, Default)]
pub struct IdpSources<'a> {
    pub unpaired_text: Vec<(u64, &'a [usize])>,
    pub unpaired_audio: Vec<(u64, &'a Tensor<f32>)>,
    pub paired: Vec<(u64, &'a [usize], &'a Tensor<f32>)>,
}

/// Gradient-free translator bound to a parameter snapshot.
pub struct Translator<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore,
    /// Examples per forward pass.
    pub batch: usize,
}

impl Translator<'_> {
    /// ã = audio_head(cross_A(embed_audio(query), uni_W(embed_text(source)))).
    pub fn to_audio(&self, sources: &[TextInput], queries: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(sources.len());
        for (src, qs) in sources.chunks(self.batch.max(1)).zip(queries.chunks(self.batch.max(1))) {
            let mut s = Session::inference(self.config, self.params);
            let (mem, m_lens) = encode_text_memory(&mut s, src)?;
            let q = s.embed_audio(qs)?;
            let q_lens: Vec<usize> = qs.iter().map(|t| t.rows()).collect();
            let h = s.encode_cross(Modality::Audio, q, &q_lens, None, mem, &m_lens, None)?;
            let y = s.audio_out(h)?;
            split_rows(s.value(y), &q_lens, &mut out)?;
        }
        Ok(out)
    }

    /// w̃ = text_state(cross_W(embed_text(query), uni_A(embed_audio(source)))).
    pub fn to_text(&self, sources: &[&Tensor<f32>], queries: &[TextInput]) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(sources.len());
        for (src, qs) in sources.chunks(self.batch.max(1)).zip(queries.chunks(self.batch.max(1))) {
            let mut s = Session::inference(self.config, self.params);
            let (mem, m_lens) = encode_audio_memory(&mut s, src)?;
            let q = s.embed_text(qs)?;
            let q_lens: Vec<usize> = qs.iter().map(TextInput::len).collect();
            let h = s.encode_cross(Modality::Text, q, &q_lens, None, mem, &m_lens, None)?;
            let y = s.text_state(h)?;
            split_rows(s.value(y), &q_lens, &mut out)?;
        }
        Ok(out)
    }

    fn check_finite(&self, t: &[Tensor<f32>]) -> Result<()> {
        if t.iter().all(Tensor::is_finite) {
            Ok(())
        } else {
            Err(Error::NonFinite("translation produced NaN or infinity".into()))
        }
    }

    /// Translations from fully masked queries (initialization and the
    /// regenerate ablation). Unpaired entries use the length caps, paired
    /// ones their true lengths.
    fn from_masked(&self, src: &IdpSources) -> Result<Vec<((u64, Modality), Tensor<f32>)>> {
        let c = self.config;
        let mut updates = Vec::new();

        let mut text_src: Vec<TextInput> = Vec::new();
        let mut audio_q: Vec<Tensor<f32>> = Vec::new();
        let mut ids = Vec::new();
        for &(id, w) in &src.unpaired_text {
            text_src.push(TextInput::Ids(w.to_vec()));
            audio_q.push(masked_audio(c.max_audio_len, c.max_audio_len)?);
            ids.push(id);
        }
        for &(id, w, a) in &src.paired {
            text_src.push(TextInput::Ids(w.to_vec()));
            audio_q.push(masked_audio(a.rows(), c.max_audio_len)?);
            ids.push(id);
        }
        let refs: Vec<&Tensor<f32>> = audio_q.iter().collect();
        let audio = self.to_audio(&text_src, &refs)?;
        self.check_finite(&audio)?;
        updates.extend(ids.iter().map(|&id| (id, Modality::Audio)).zip(audio));

        let mut audio_src: Vec<&Tensor<f32>> = Vec::new();
        let mut text_q: Vec<TextInput> = Vec::new();
        let mut ids = Vec::new();
        for &(id, a) in &src.unpaired_audio {
            audio_src.push(a);
            text_q.push(TextInput::Ids(masked_text(c.max_text_len, c.max_text_len)?));
            ids.push(id);
        }
        for &(id, w, a) in &src.paired {
            audio_src.push(a);
            text_q.push(TextInput::Ids(masked_text(w.len(), c.max_text_len)?));
            ids.push(id);
        }
        let text = self.to_text(&audio_src, &text_q)?;
        self.check_finite(&text)?;
        updates.extend(ids.iter().map(|&id| (id, Modality::Text)).zip(text));
        Ok(updates)
    }

    /// w̃₀ and ã₀ from masked queries; the store must be empty.
    pub fn init_translations(&self, store: &mut PseudoParallelStore, src: &IdpSources) -> Result<()> {
        if store.initialized {
            return Err(Error::Pipeline(format!(
                "translation store already initialized (iteration {})",
                store.k
            )));
        }
        store.entries = self.from_masked(src)?.into_iter().collect();
        store.k = 0;
        store.initialized = true;
        Ok(())
    }

    /// One IDP step: every entry becomes f(previous entry, source).
    pub fn refresh_translations(&self, store: &mut PseudoParallelStore, src: &IdpSources) -> Result<()> {
        let previous = |id: u64, m: Modality| -> Result<Tensor<f32>> {
            store
                .entries
                .get(&(id, m))
                .cloned()
                .ok_or_else(|| Error::Pipeline(format!("stale store: no {m} translation for example {id}")))
        };
        if !store.initialized {
            return Err(Error::Pipeline("refresh before initialization".into()));
        }
        let mut updates = Vec::new();

        let mut text_src = Vec::new();
        let mut audio_q = Vec::new();
        let mut ids = Vec::new();
        for &(id, w) in &src.unpaired_text {
            text_src.push(TextInput::Ids(w.to_vec()));
            audio_q.push(previous(id, Modality::Audio)?);
            ids.push(id);
        }
        for &(id, w, _) in &src.paired {
            text_src.push(TextInput::Ids(w.to_vec()));
            audio_q.push(previous(id, Modality::Audio)?);
            ids.push(id);
        }
        let refs: Vec<&Tensor<f32>> = audio_q.iter().collect();
        let audio = self.to_audio(&text_src, &refs)?;
        self.check_finite(&audio)?;
        updates.extend(ids.iter().map(|&id| (id, Modality::Audio)).zip(audio));

        let mut audio_src: Vec<&Tensor<f32>> = Vec::new();
        let mut text_q = Vec::new();
        let mut ids = Vec::new();
        for &(id, a) in &src.unpaired_audio {
            audio_src.push(a);
            text_q.push(TextInput::Soft(previous(id, Modality::Text)?));
            ids.push(id);
        }
        for &(id, _, a) in &src.paired {
            audio_src.push(a);
            text_q.push(TextInput::Soft(previous(id, Modality::Text)?));
            ids.push(id);
        }
        let text = self.to_text(&audio_src, &text_q)?;
        self.check_finite(&text)?;
        updates.extend(ids.iter().map(|&id| (id, Modality::Text)).zip(text));

        store.replace(updates)?;
        store.k += 1;
        Ok(())
    }

    /// Back-translation-style ablation: discard the previous translations
    /// and recompute from masked queries.
    pub fn regenerate_translations(&self, store: &mut PseudoParallelStore, src: &IdpSources) -> Result<()> {
        if !store.initialized {
            return Err(Error::Pipeline("regenerate before initialization".into()));
        }
        let updates = self.from_masked(src)?;
        store.replace(updates)?;
        store.k += 1;
        Ok(())
    }
}

fn split_rows(packed: &Tensor<f32>, lens: &[usize], out: &mut Vec<Tensor<f32>>) -> Result<()> {
    let mut start = 0;
    for &l in lens {
        out.push(packed.slice_rows(start, l)?);
        start += l;
    }
    Ok(())
}
