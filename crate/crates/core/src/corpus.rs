//! On-disk corpus: `text/{split}.txt`, `audio/{split}/{id}.dmf` and
//! `manifest.json`. The manifest's `oracle` section holds hidden pairings for
//! evaluation; [`Corpus::load`] never reads it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{read_dmf, FeatureNorm};
use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const PAIRED: &str = "paired";
pub const UNPAIRED_TEXT: &str = "unpaired_text";
pub const UNPAIRED_AUDIO: &str = "unpaired_audio";
pub const FINETUNE_TRAIN: &str = "finetune_train";
pub const FINETUNE_TEST: &str = "finetune_test";
/// Directory holding the true audio of unpaired text examples.
pub const UNPAIRED_TEXT_TRUTH: &str = "unpaired_text_truth";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitInfo {
    pub ids: Vec<u64>,
    pub has_text: bool,
    pub has_audio: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<f64>>,
}

/// Ground truth that only evaluation oracles may consult.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Unpaired text id → true feature file, relative to the corpus root.
    pub unpaired_text_audio: BTreeMap<u64, String>,
    /// Unpaired audio id → true utterance.
    pub unpaired_audio_text: BTreeMap<u64, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub vocab: Vocab,
    pub feature_norm: FeatureNorm,
    /// Free-form generator description (the synthetic spec, when synthetic).
    #[serde(default)]
    pub generator: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_rule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub splits: BTreeMap<String, SplitInfo>,
    #[serde(default)]
    pub oracle: OracleSection,
}

impl Manifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = Self::path(root);
        let text = fs::read_to_string(&path).with_path(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = Self::path(root);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json + "\n").with_path(&path)
    }
}

pub fn audio_path(root: &Path, split: &str, id: u64) -> PathBuf {
    root.join("audio").join(split).join(format!("{id:06}.dmf"))
}

pub fn text_path(root: &Path, split: &str) -> PathBuf {
    root.join("text").join(format!("{split}.txt"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub text: Option<Vec<usize>>,
    /// Normalized features.
    pub audio: Option<Tensor<f32>>,
    pub label: Option<f64>,
}

impl Example {
    pub fn text(&self) -> Result<&[usize]> {
        self.text
            .as_deref()
            .ok_or_else(|| Error::contract(format!("example {} has no text", self.id)))
    }

    pub fn audio(&self) -> Result<&Tensor<f32>> {
        self.audio
            .as_ref()
            .ok_or_else(|| Error::contract(format!("example {} has no audio", self.id)))
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    splits: BTreeMap<String, Vec<Example>>,
}

impl Corpus {
    /// Load every split with features normalized by the manifest statistics.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Manifest::load(root)?;
        let mut splits = BTreeMap::new();
        for (name, info) in &manifest.splits {
            splits.insert(name.clone(), load_split(root, name, info, &manifest)?);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            splits,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[Example]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("corpus {} has no split {name:?}", self.root.display())))
    }

    /// A split, or an empty slice if the corpus lacks it.
    pub fn split_or_empty(&self, name: &str) -> &[Example] {
        self.splits.get(name).map_or(&[], Vec::as_slice)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.manifest.vocab
    }

    /// Build a corpus in memory (used by tests and tools).
    pub fn from_parts(root: PathBuf, manifest: Manifest, splits: BTreeMap<String, Vec<Example>>) -> Self {
        Self { root, manifest, splits }
    }
}

fn load_split(root: &Path, name: &str, info: &SplitInfo, manifest: &Manifest) -> Result<Vec<Example>> {
    let texts: Option<Vec<Vec<usize>>> = if info.has_text {
        let path = text_path(root, name);
        let content = fs::read_to_string(&path).with_path(&path)?;
        let lines: Vec<Vec<usize>> = content.lines().map(|l| manifest.vocab.encode(l)).collect();
        if lines.len() != info.ids.len() {
            return Err(Error::format(
                &path,
                format!("{} lines but the manifest lists {} examples", lines.len(), info.ids.len()),
            ));
        }
        if let Some(i) = lines.iter().position(Vec::is_empty) {
            return Err(Error::format(&path, format!("line {} is empty", i + 1)));
        }
        Some(lines)
    } else {
        None
    };
    if let Some(labels) = &info.labels {
        if labels.len() != info.ids.len() {
            return Err(Error::format(
                Manifest::path(root),
                format!("split {name}: {} labels for {} examples", labels.len(), info.ids.len()),
            ));
        }
    }
    info.ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let audio = if info.has_audio {
                Some(manifest.feature_norm.apply(&read_dmf(&audio_path(root, name, id))?))
            } else {
                None
            };
            Ok(Example {
                id,
                text: texts.as_ref().map(|t| t[i].clone()),
                audio,
                label: info.labels.as_ref().map(|l| l[i]),
            })
        })
        .collect()
}

/// Hidden truths for evaluation, normalized like the training features.
#[derive(Clone, Debug, Default)]
pub struct OracleTruth {
    pub unpaired_text_audio: BTreeMap<u64, Tensor<f32>>,
    pub unpaired_audio_text: BTreeMap<u64, Vec<usize>>,
}

impl OracleTruth {
    pub fn load(root: &Path, manifest: &Manifest) -> Result<Self> {
        let mut audio = BTreeMap::new();
        for (&id, rel) in &manifest.oracle.unpaired_text_audio {
            audio.insert(id, manifest.feature_norm.apply(&read_dmf(&root.join(rel))?));
        }
        let text = manifest
            .oracle
            .unpaired_audio_text
            .iter()
            .map(|(&id, line)| (id, manifest.vocab.encode(line)))
            .collect();
        Ok(Self {
            unpaired_text_audio: audio,
            unpaired_audio_text: text,
        })
    }
}
