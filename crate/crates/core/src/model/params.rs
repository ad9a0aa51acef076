use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::{Modality, ModelConfig};
use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, IoContext, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DMC1";

/// Disjoint parameter groups. The four encoder groups are θ_uni^W, θ_uni^A,
/// θ_cross^W and θ_cross^A.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    TextEmbedding,
    AudioEmbedding,
    UniText,
    UniAudio,
    CrossText,
    CrossAudio,
    AudioHead,
    TaskHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::TextEmbedding,
        ParamGroup::AudioEmbedding,
        ParamGroup::UniText,
        ParamGroup::UniAudio,
        ParamGroup::CrossText,
        ParamGroup::CrossAudio,
        ParamGroup::AudioHead,
        ParamGroup::TaskHead,
    ];

    pub fn of(name: &str) -> Option<Self> {
        let prefixes = [
            ("embed.text.", ParamGroup::TextEmbedding),
            ("embed.audio.", ParamGroup::AudioEmbedding),
            ("uni.text.", ParamGroup::UniText),
            ("uni.audio.", ParamGroup::UniAudio),
            ("cross.text.", ParamGroup::CrossText),
            ("cross.audio.", ParamGroup::CrossAudio),
            ("head.audio.", ParamGroup::AudioHead),
            ("task.", ParamGroup::TaskHead),
        ];
        prefixes.iter().find(|(p, _)| name.starts_with(p)).map(|&(_, g)| g)
    }

    pub fn uni(m: Modality) -> Self {
        match m {
            Modality::Text => ParamGroup::UniText,
            Modality::Audio => ParamGroup::UniAudio,
        }
    }

    pub fn cross(m: Modality) -> Self {
        match m {
            Modality::Text => ParamGroup::CrossText,
            Modality::Audio => ParamGroup::CrossAudio,
        }
    }
}

/// A set of parameter groups (bit mask).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSet(u16);

impl GroupSet {
    pub const ALL: GroupSet = GroupSet(0xff);
    pub const NONE: GroupSet = GroupSet(0);

    pub fn only(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |m, &g| m | 1 << g as u16))
    }

    pub fn except(groups: &[ParamGroup]) -> Self {
        GroupSet(Self::ALL.0 & !Self::only(groups).0)
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & (1 << g as u16) != 0
    }

    /// Everything IDAE may update: all but the cross encoders.
    pub fn intra_modal() -> Self {
        Self::except(&[ParamGroup::CrossText, ParamGroup::CrossAudio])
    }
}

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor<f32>>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn linear_specs(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, inp: usize, width: usize) {
    out.push((format!("{prefix}.weight"), vec![inp, width], Init::Normal));
    out.push((format!("{prefix}.bias"), vec![width], Init::Zeros));
}

fn norm_specs(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d], Init::Ones));
    out.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
}

fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d;
    let f = c.d * c.ffn_multiplier;
    let mut s = vec![
        ("embed.text.token".to_string(), vec![c.vocab_size, d], Init::Normal),
        ("embed.text.position".to_string(), vec![c.max_text_len, d], Init::Normal),
        ("embed.audio.position".to_string(), vec![c.max_audio_len, d], Init::Normal),
    ];
    linear_specs(&mut s, "embed.audio.proj", c.audio_feature_dim, d);
    linear_specs(&mut s, "head.audio", d, c.audio_feature_dim);
    for m in [Modality::Text, Modality::Audio] {
        for (kind, layers) in [("uni", c.n_uni_layers), ("cross", c.n_cross_layers)] {
            for i in 0..layers {
                let p = format!("{kind}.{m}.layer{i}");
                linear_specs(&mut s, &format!("{p}.attn.qkv"), d, 3 * d);
                linear_specs(&mut s, &format!("{p}.attn.out"), d, d);
                norm_specs(&mut s, &format!("{p}.attn.norm"), d);
                if kind == "cross" {
                    linear_specs(&mut s, &format!("{p}.cross.q"), d, d);
                    linear_specs(&mut s, &format!("{p}.cross.kv"), d, 2 * d);
                    linear_specs(&mut s, &format!("{p}.cross.out"), d, d);
                    norm_specs(&mut s, &format!("{p}.cross.norm"), d);
                    s.push((format!("{p}.cross.null_value"), vec![d], Init::Normal));
                }
                linear_specs(&mut s, &format!("{p}.ffn.in"), d, f);
                linear_specs(&mut s, &format!("{p}.ffn.out"), f, d);
                norm_specs(&mut s, &format!("{p}.ffn.norm"), d);
            }
        }
    }
    s
}

/// FNV-1a, stable across toolchains so initial weights never drift.
fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

pub(crate) fn init_tensor(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor<f32> {
    let mut rng = stream(seed, Purpose::Init, 0, name_key(name));
    let normal = Normal::new(0.0f32, std as f32).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
}

/// Normal initialization for a task-head tensor, keyed by name like the
/// backbone so heads never shift encoder weights.
pub fn init_task_tensor(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor<f32> {
    init_tensor(shape, std, seed, name)
}

impl ParamStore {
    /// Fresh parameters for `config`. Every tensor draws from its own stream
    /// keyed by name, so adding a task head never shifts encoder weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Normal => init_tensor(&shape, config.init_std, seed, &name),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::ones(&shape),
                };
                (name, t)
            })
            .collect();
        Ok(Self { params })
    }

    /// Expected `(name, shape)` of every backbone parameter.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Check the backbone against `config`, naming the first mismatch.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        for (name, shape) in Self::expected_shapes(config) {
            match self.params.get(&name) {
                None => return Err(Error::Mismatch(format!("parameter {name} missing from checkpoint"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Mismatch(format!(
                        "parameter {name} has shape {:?} but the configuration expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.params.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Hash of the raw bytes of every parameter in `groups`.
    pub fn fingerprint(&self, groups: GroupSet) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in &self.params {
            if ParamGroup::of(name).is_some_and(|g| groups.contains(g)) {
                name.hash(&mut h);
                for v in t.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(t.rank() as u8);
            for &dim in t.shape() {
                w.u32(dim as u32);
            }
            w.f32s(t.data());
        }
        w.buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("parameter name is not UTF-8"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f32s(n)?;
            let t = Tensor::new(&shape, data).map_err(|e| r.err(format!("parameter {name}: {e}")))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(r.err(format!("duplicate parameter {name}")));
            }
        }
        r.finish()?;
        Ok(Self { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_path(path)?;
        Self::decode(&bytes, path)
    }
}
