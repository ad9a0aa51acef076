use std::collections::BTreeMap;

use super::{GroupSet, Modality, ModelConfig, ParamGroup, ParamStore, TextState};
use crate::audio::FEATURE_DIM;
use crate::autograd::{AttentionLayout, AttentionSegment, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One text example as fed to the text embedding module.
#[derive(Clone, Debug, PartialEq)]
pub enum TextInput {
    Ids(Vec<usize>),
    /// Continuous rows (`T_w × d`) that bypass the table lookup.
    Soft(Tensor<f32>),
    /// Token ids, except rows flagged in `replaced`, which take the matching
    /// row of `soft`.
    Mixed {
        ids: Vec<usize>,
        soft: Tensor<f32>,
        replaced: Vec<bool>,
    },
}

impl TextInput {
    pub fn len(&self) -> usize {
        match self {
            TextInput::Ids(ids) | TextInput::Mixed { ids, .. } => ids.len(),
            TextInput::Soft(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Position index of every packed row.
pub fn positions(lens: &[usize]) -> Vec<usize> {
    lens.iter().flat_map(|&l| 0..l).collect()
}

fn offsets(lens: &[usize]) -> Vec<usize> {
    lens.iter()
        .scan(0, |acc, &l| {
            let s = *acc;
            *acc += l;
            Some(s)
        })
        .collect()
}

fn self_layout(heads: usize, lens: &[usize], pad: Option<&[bool]>) -> AttentionLayout {
    let starts = offsets(lens);
    AttentionLayout {
        heads,
        segments: starts
            .iter()
            .zip(lens)
            .map(|(&s, &l)| AttentionSegment {
                query_start: s,
                query_len: l,
                key_start: s,
                key_len: l,
            })
            .collect(),
        key_padding: pad.map(<[bool]>::to_vec),
    }
}

fn cross_layout(heads: usize, q_lens: &[usize], m_lens: &[usize], m_pad: Option<&[bool]>) -> AttentionLayout {
    AttentionLayout {
        heads,
        segments: offsets(q_lens)
            .iter()
            .zip(q_lens)
            .zip(offsets(m_lens).iter().zip(m_lens))
            .map(|((&qs, &ql), (&ks, &kl))| AttentionSegment {
                query_start: qs,
                query_len: ql,
                key_start: ks,
                key_len: kl,
            })
            .collect(),
        key_padding: m_pad.map(<[bool]>::to_vec),
    }
}

/// A forward (and optionally backward) pass over one packed batch.
///
/// Parameters are bound to graph nodes on first use: as trainable leaves
/// when their group is in `trainable`, as constants otherwise.
pub struct Session<'a> {
    pub config: &'a ModelConfig,
    params: &'a ParamStore,
    pub graph: Graph<f32>,
    bound: BTreeMap<String, Var>,
    trainable: GroupSet,
}

impl<'a> Session<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore, trainable: GroupSet) -> Self {
        Self {
            config,
            params,
            graph: Graph::new(),
            bound: BTreeMap::new(),
            trainable,
        }
    }

    /// Forward-only session; records no gradients.
    pub fn inference(config: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Self {
            graph: Graph::no_grad(),
            ..Self::new(config, params, GroupSet::NONE)
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::Mismatch(format!("parameter {name} is not in the store")))?
            .clone();
        let train = ParamGroup::of(name).is_some_and(|g| self.trainable.contains(g));
        let v = if train { self.graph.leaf(value) } else { self.graph.constant(value) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<f32> {
        self.graph.value(v)
    }

    pub fn constant(&mut self, t: Tensor<f32>) -> Var {
        self.graph.constant(t)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every trainable parameter that was used, by name.
    pub fn gradients(&self) -> BTreeMap<String, Tensor<f32>> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| self.graph.grad(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.layer_norm(x, g, b, self.config.layer_norm_eps)
    }

    fn check_len(&self, m: Modality, len: usize) -> Result<()> {
        let cap = self.config.max_len(m);
        if len == 0 || len > cap {
            return Err(Error::contract(format!("{m} length {len} outside 1..={cap}")));
        }
        Ok(())
    }

    fn add_positions(&mut self, x: Var, m: Modality, lens: &[usize]) -> Result<Var> {
        let table = self.param(&format!("embed.{m}.position"))?;
        let pos = self.graph.gather_rows(table, &positions(lens))?;
        self.graph.add(x, pos)
    }

    /// Token lookup (or soft rows) plus position embeddings, packed.
    pub fn embed_text(&mut self, inputs: &[TextInput]) -> Result<Var> {
        let d = self.config.d;
        let mut ids = Vec::new();
        let mut overrides: Vec<(usize, &[f32])> = Vec::new();
        for input in inputs {
            self.check_len(Modality::Text, input.len())?;
            let base = ids.len();
            match input {
                TextInput::Ids(x) => ids.extend_from_slice(x),
                TextInput::Soft(t) => {
                    if t.cols() != d {
                        return Err(Error::Shape {
                            op: "embed_text",
                            lhs: t.shape().to_vec(),
                            rhs: vec![d],
                        });
                    }
                    ids.extend(std::iter::repeat(crate::vocab::PAD).take(t.rows()));
                    overrides.extend((0..t.rows()).map(|r| (base + r, t.row(r))));
                }
                TextInput::Mixed { ids: x, soft, replaced } => {
                    if soft.rows() != x.len() || replaced.len() != x.len() || soft.cols() != d {
                        return Err(Error::contract("mixed text input with inconsistent lengths"));
                    }
                    ids.extend_from_slice(x);
                    overrides.extend((0..x.len()).filter(|&r| replaced[r]).map(|r| (base + r, soft.row(r))));
                }
            }
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        let table = self.param("embed.text.token")?;
        let mut x = self.graph.gather_rows(table, &ids)?;
        if !overrides.is_empty() {
            x = self.graph.mix_rows(x, &overrides)?;
        }
        let lens: Vec<usize> = inputs.iter().map(TextInput::len).collect();
        self.add_positions(x, Modality::Text, &lens)
    }

    /// Dense projection 160→d plus position embeddings, packed.
    pub fn embed_audio(&mut self, features: &[&Tensor<f32>]) -> Result<Var> {
        for f in features {
            if f.rank() != 2 || f.cols() != FEATURE_DIM {
                return Err(Error::Shape {
                    op: "embed_audio",
                    lhs: f.shape().to_vec(),
                    rhs: vec![FEATURE_DIM],
                });
            }
            self.check_len(Modality::Audio, f.rows())?;
        }
        let packed = Tensor::concat_rows(features)?;
        let x = self.constant(packed);
        let x = self.linear(x, "embed.audio.proj")?;
        let lens: Vec<usize> = features.iter().map(|f| f.rows()).collect();
        self.add_positions(x, Modality::Audio, &lens)
    }

    fn self_attention(&mut self, x: Var, prefix: &str, layout: &AttentionLayout) -> Result<Var> {
        let d = self.config.d;
        let qkv = self.linear(x, &format!("{prefix}.attn.qkv"))?;
        let q = self.graph.cols(qkv, 0, d)?;
        let k = self.graph.cols(qkv, d, d)?;
        let v = self.graph.cols(qkv, 2 * d, d)?;
        let a = self.graph.attention(q, k, v, None, layout)?;
        let o = self.linear(a, &format!("{prefix}.attn.out"))?;
        let r = self.graph.add(x, o)?;
        self.norm(r, &format!("{prefix}.attn.norm"))
    }

    fn cross_attention(&mut self, x: Var, memory: Var, prefix: &str, layout: &AttentionLayout) -> Result<Var> {
        let d = self.config.d;
        let q = self.linear(x, &format!("{prefix}.cross.q"))?;
        let kv = self.linear(memory, &format!("{prefix}.cross.kv"))?;
        let k = self.graph.cols(kv, 0, d)?;
        let v = self.graph.cols(kv, d, d)?;
        let null = self.param(&format!("{prefix}.cross.null_value"))?;
        let a = self.graph.attention(q, k, v, Some(null), layout)?;
        let o = self.linear(a, &format!("{prefix}.cross.out"))?;
        let r = self.graph.add(x, o)?;
        self.norm(r, &format!("{prefix}.cross.norm"))
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.ffn.in"))?;
        let h = self.graph.gelu(h);
        let o = self.linear(h, &format!("{prefix}.ffn.out"))?;
        let r = self.graph.add(x, o)?;
        self.norm(r, &format!("{prefix}.ffn.norm"))
    }

    fn check_rows(&self, x: Var, lens: &[usize], pad: Option<&[bool]>) -> Result<()> {
        let rows = self.value(x).rows();
        let total: usize = lens.iter().sum();
        if rows != total || pad.is_some_and(|p| p.len() != rows) {
            return Err(Error::contract(format!(
                "packed input has {rows} rows but the lengths sum to {total}"
            )));
        }
        Ok(())
    }

    /// Unimodal Transformer encoder; rows flagged in `pad` are never attended.
    pub fn encode_uni(&mut self, m: Modality, x: Var, lens: &[usize], pad: Option<&[bool]>) -> Result<Var> {
        self.check_rows(x, lens, pad)?;
        let layout = self_layout(self.config.n_heads, lens, pad);
        let mut h = x;
        for i in 0..self.config.n_uni_layers {
            let p = format!("uni.{m}.layer{i}");
            h = self.self_attention(h, &p, &layout)?;
            h = self.feed_forward(h, &p)?;
        }
        Ok(h)
    }

    /// Cross-modal encoder for query modality `m`: self-attention over the
    /// query stream, then attention over `memory` (the other modality's
    /// unimodal output), then the feed-forward block.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_cross(
        &mut self,
        m: Modality,
        query: Var,
        q_lens: &[usize],
        q_pad: Option<&[bool]>,
        memory: Var,
        m_lens: &[usize],
        m_pad: Option<&[bool]>,
    ) -> Result<Var> {
        self.check_rows(query, q_lens, q_pad)?;
        self.check_rows(memory, m_lens, m_pad)?;
        if q_lens.len() != m_lens.len() {
            return Err(Error::contract(format!(
                "{} query sequences but {} memory sequences",
                q_lens.len(),
                m_lens.len()
            )));
        }
        let heads = self.config.n_heads;
        let self_l = self_layout(heads, q_lens, q_pad);
        let cross_l = cross_layout(heads, q_lens, m_lens, m_pad);
        let mut h = query;
        for i in 0..self.config.n_cross_layers {
            let p = format!("cross.{m}.layer{i}");
            h = self.self_attention(h, &p, &self_l)?;
            h = self.cross_attention(h, memory, &p, &cross_l)?;
            h = self.feed_forward(h, &p)?;
        }
        Ok(h)
    }

    /// Tied output layer: `H · tableᵀ`.
    pub fn text_logits(&mut self, h: Var) -> Result<Var> {
        let table = self.param("embed.text.token")?;
        self.graph.matmul_nt(h, table)
    }

    /// Continuous text state emitted by a translation.
    pub fn text_state(&mut self, h: Var) -> Result<Var> {
        match self.config.text_state {
            TextState::HiddenState => Ok(h),
            TextState::ExpectedEmbedding => {
                let logits = self.text_logits(h)?;
                self.soft_embeddings(logits)
            }
        }
    }

    /// `softmax(logits) · table`: expected token embedding per row.
    pub fn soft_embeddings(&mut self, logits: Var) -> Result<Var> {
        let p = self.graph.softmax(logits, 1)?;
        let table = self.param("embed.text.token")?;
        self.graph.matmul(p, table)
    }

    /// Linear d→160 acoustic reconstruction head.
    pub fn audio_out(&mut self, h: Var) -> Result<Var> {
        self.linear(h, "head.audio")
    }
}
