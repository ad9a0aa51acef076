//! Downstream fine-tuning over the fused representation
//! `h_fuse = [mean(H_w); mean(H_a)]`, where `H_w` is the text cross encoder
//! run on the text with the audio as memory and `H_a` the converse.
//!
//! All backbone parameters are trained together with the new head.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::Var;
use crate::corpus::{Corpus, Example, FINETUNE_TEST, FINETUNE_TRAIN};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{self, Classification, Regression};
use crate::model::{init_task_tensor, GroupSet, Modality, ModelConfig, ParamStore, Session, TextInput};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::train::{clip_global_norm, lr_schedule, Adam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Regress,
    Speaker,
}

/// Which pooled halves reach the head; the other half is zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Both,
    /// Audio half only.
    NoText,
    /// Text half only.
    NoAudio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub model: ModelConfig,
    pub task: Task,
    pub corpus: PathBuf,
    /// Pre-trained parameters; random initialization when absent.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub fusion: Fusion,
    pub grad_clip: f64,
    /// Classes for classify/speaker; taken from the corpus manifest when absent.
    pub num_classes: Option<usize>,
    /// Maximum number of verification trials scored for EER.
    pub trial_cap: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            task: Task::Classify,
            corpus: PathBuf::from("corpus"),
            checkpoint: None,
            out_dir: None,
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_fraction: 0.05,
            seed: 0,
            fusion: Fusion::Both,
            grad_clip: 1.0,
            num_classes: None,
            trial_cap: 5000,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.trial_cap == 0 {
            return Err(Error::Config("epochs, batch_size and trial_cap must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive, warmup_fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Packed paired inputs for [`fuse`]. Padding flags mark rows excluded from
/// attention and pooling.
pub struct FuseInput<'a> {
    pub texts: Vec<&'a [usize]>,
    pub audio: Vec<&'a Tensor<f32>>,
    pub text_pad: Option<Vec<bool>>,
    pub audio_pad: Option<Vec<bool>>,
}

impl<'a> FuseInput<'a> {
    pub fn new(examples: &[&'a Example]) -> Result<Self> {
        Ok(Self {
            texts: examples.iter().map(|e| e.text()).collect::<Result<_>>()?,
            audio: examples.iter().map(|e| e.audio()).collect::<Result<_>>()?,
            text_pad: None,
            audio_pad: None,
        })
    }
}

fn segments(lens: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    lens.iter()
        .map(|&l| {
            let s = (start, l);
            start += l;
            s
        })
        .collect()
}

/// `[B, 2d]` fused representations, text half first.
pub fn fuse(sess: &mut Session, input: &FuseInput, fusion: Fusion) -> Result<Var> {
    let t_lens: Vec<usize> = input.texts.iter().map(|t| t.len()).collect();
    let a_lens: Vec<usize> = input.audio.iter().map(|a| a.rows()).collect();
    let (tp, ap) = (input.text_pad.as_deref(), input.audio_pad.as_deref());
    let ids: Vec<TextInput> = input.texts.iter().map(|t| TextInput::Ids(t.to_vec())).collect();
    let we = sess.embed_text(&ids)?;
    let ae = sess.embed_audio(&input.audio)?;
    let wu = sess.encode_uni(Modality::Text, we, &t_lens, tp)?;
    let au = sess.encode_uni(Modality::Audio, ae, &a_lens, ap)?;
    let hw = sess.encode_cross(Modality::Text, we, &t_lens, tp, au, &a_lens, ap)?;
    let ha = sess.encode_cross(Modality::Audio, ae, &a_lens, ap, wu, &t_lens, tp)?;
    let keep = |pad: Option<&[bool]>| pad.map(|p| p.iter().map(|&x| !x).collect::<Vec<bool>>());
    let (tk, ak) = (keep(tp), keep(ap));
    let mut pw = sess.graph.segment_mean(hw, &segments(&t_lens), tk.as_deref())?;
    let mut pa = sess.graph.segment_mean(ha, &segments(&a_lens), ak.as_deref())?;
    let zeros = |s: &mut Session, v: Var| {
        let shape = s.value(v).shape().to_vec();
        s.constant(Tensor::zeros(&shape))
    };
    match fusion {
        Fusion::Both => {}
        Fusion::NoText => pw = zeros(sess, pw),
        Fusion::NoAudio => pa = zeros(sess, pa),
    }
    sess.graph.concat_cols(pw, pa)
}

/// Head parameters (`task.*`) for a task.
pub fn head_shapes(task: Task, d: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
    let lin = |name: &str, i: usize, o: usize| {
        vec![(format!("task.{name}.weight"), vec![i, o]), (format!("task.{name}.bias"), vec![o])]
    };
    match task {
        Task::Classify => lin("classifier", 2 * d, classes),
        Task::Regress => lin("regressor", 2 * d, 1),
        Task::Speaker => [lin("dense1", 2 * d, d), lin("dense2", d, d), lin("classifier", d, classes)].concat(),
    }
}

/// Add a freshly initialized head; any previous `task.*` tensors are dropped.
pub fn add_head(params: &mut ParamStore, task: Task, classes: usize, config: &ModelConfig, seed: u64) {
    let old: Vec<String> = params.names().filter(|n| n.starts_with("task.")).map(str::to_string).collect();
    for n in old {
        params.remove(&n);
    }
    for (name, shape) in head_shapes(task, config.d, classes) {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            init_task_tensor(&shape, config.init_std, seed, &name)
        };
        params.insert(name, t);
    }
}

fn linear(sess: &mut Session, x: Var, name: &str) -> Result<Var> {
    let w = sess.param(&format!("task.{name}.weight"))?;
    let b = sess.param(&format!("task.{name}.bias"))?;
    sess.graph.linear(x, w, Some(b))
}

/// Head output (logits or scores) and, for the speaker task, the embedding.
pub fn head(sess: &mut Session, task: Task, fused: Var) -> Result<(Var, Option<Var>)> {
    match task {
        Task::Classify => Ok((linear(sess, fused, "classifier")?, None)),
        Task::Regress => Ok((linear(sess, fused, "regressor")?, None)),
        Task::Speaker => {
            let h = linear(sess, fused, "dense1")?;
            let h = sess.graph.gelu(h);
            let e = linear(sess, h, "dense2")?;
            Ok((linear(sess, e, "classifier")?, Some(e)))
        }
    }
}

fn class_label(e: &Example, classes: usize) -> Result<usize> {
    let l = e
        .label
        .ok_or_else(|| Error::Config(format!("example {} has no label", e.id)))?;
    if l < 0.0 || l.fract() != 0.0 || l as usize >= classes {
        return Err(Error::Config(format!(
            "example {} has label {l}, not a class index below {classes}",
            e.id
        )));
    }
    Ok(l as usize)
}

/// Evaluation results; fields not produced by the task are omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Option<Task>,
    pub examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ua: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    /// `null` when undefined (zero variance).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr: Option<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
}

/// Model outputs for a split.
pub enum Predictions {
    Classes(Vec<usize>),
    Scores(Vec<f64>),
    Embeddings(Vec<Vec<f32>>),
}

pub struct Finetuner {
    pub config: FinetuneConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    classes: usize,
    train: Vec<Example>,
    test: Vec<Example>,
    epoch: usize,
    step: u64,
}

impl Finetuner {
    /// Backbone from `config.checkpoint` (or random init) plus a new head.
    pub fn new(config: FinetuneConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let mut params = match &config.checkpoint {
            Some(path) => ParamStore::load(path)?,
            None => ParamStore::init(&config.model, config.seed)?,
        };
        params.check_config(&config.model)?;
        let classes = match config.task {
            Task::Regress => 1,
            _ => config
                .num_classes
                .or(corpus.manifest.num_classes)
                .ok_or_else(|| Error::Config("number of classes unknown: set num_classes".into()))?,
        };
        add_head(&mut params, config.task, classes, &config.model, config.seed);
        let train = corpus.split(FINETUNE_TRAIN)?.to_vec();
        let test = corpus.split_or_empty(FINETUNE_TEST).to_vec();
        for e in train.iter().chain(&test) {
            e.text()?;
            e.audio()?;
            match config.task {
                Task::Regress => {
                    e.label.ok_or_else(|| Error::Config(format!("example {} has no label", e.id)))?;
                }
                _ => {
                    class_label(e, classes)?;
                }
            }
        }
        if train.is_empty() {
            return Err(Error::Config("fine-tuning split is empty".into()));
        }
        Ok(Self {
            config,
            params,
            optimizer: Adam::new(),
            classes,
            train,
            test,
            epoch: 0,
            step: 0,
        })
    }

    /// Reload a fine-tuned checkpoint for evaluation.
    pub fn from_finetuned(config: FinetuneConfig, corpus: &Corpus, checkpoint: &Path) -> Result<Self> {
        let params = ParamStore::load(checkpoint)?;
        let mut f = Self::new(
            FinetuneConfig {
                checkpoint: None,
                ..config
            },
            corpus,
        )?;
        for (name, shape) in head_shapes(f.config.task, f.config.model.d, f.classes) {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Mismatch(format!(
                        "head parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Mismatch(format!("checkpoint lacks head parameter {name}"))),
            }
        }
        params.check_config(&f.config.model)?;
        f.params = params;
        Ok(f)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn test_split(&self) -> &[Example] {
        &self.test
    }

    fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    fn loss(&self, sess: &mut Session, batch: &[&Example]) -> Result<Var> {
        let input = FuseInput::new(batch)?;
        let fused = fuse(sess, &input, self.config.fusion)?;
        let (out, _) = head(sess, self.config.task, fused)?;
        match self.config.task {
            Task::Regress => {
                let y: Vec<f32> = batch.iter().map(|e| e.label.unwrap_or(0.0) as f32).collect();
                let target = sess.constant(Tensor::new(&[batch.len(), 1], y)?);
                sess.graph.l1_loss(out, target, None)
            }
            _ => {
                let y: Vec<usize> = batch.iter().map(|e| class_label(e, self.classes)).collect::<Result<_>>()?;
                sess.graph.cross_entropy(out, &y, None)
            }
        }
    }

    /// One pass over the training split; returns the mean loss.
    pub fn train_epoch(&mut self) -> Result<f64> {
        self.epoch += 1;
        let steps = self.steps_per_epoch();
        let total = (steps * self.config.epochs) as u64;
        let warm = (self.config.warmup_fraction * total as f64).round() as u64;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream(self.config.seed, Purpose::Shuffle, self.epoch as u64, 100));
        let mut sum = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &self.train[i]).collect();
            let (value, mut grads) = {
                let mut sess = Session::new(&self.config.model, &self.params, GroupSet::ALL);
                let l = self.loss(&mut sess, &batch)?;
                sess.backward(l)?;
                (f64::from(sess.value(l).item()), sess.gradients())
            };
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at step {}", self.step + 1)));
            }
            clip_global_norm(&mut grads, self.config.grad_clip);
            let lr = lr_schedule((self.step + 1).min(total), total, warm, self.config.learning_rate)?;
            self.optimizer.step(&mut self.params, &grads, lr)?;
            self.step += 1;
            sum += value;
        }
        Ok(sum / steps as f64)
    }

    /// Forward-only outputs for `examples`.
    pub fn predict(&self, examples: &[Example]) -> Result<Predictions> {
        let mut classes = Vec::new();
        let mut scores = Vec::new();
        let mut embeddings = Vec::new();
        for chunk in examples.chunks(64) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut sess = Session::inference(&self.config.model, &self.params);
            let fused = fuse(&mut sess, &FuseInput::new(&refs)?, self.config.fusion)?;
            let (out, emb) = head(&mut sess, self.config.task, fused)?;
            match self.config.task {
                Task::Classify => classes.extend(sess.value(out).data().chunks(self.classes).map(argmax)),
                Task::Regress => scores.extend(sess.value(out).data().iter().map(|&x| f64::from(x))),
                Task::Speaker => {
                    let e = sess.value(emb.expect("speaker head has an embedding"));
                    embeddings.extend(e.data().chunks(e.cols()).map(<[f32]>::to_vec));
                }
            }
        }
        Ok(match self.config.task {
            Task::Classify => Predictions::Classes(classes),
            Task::Regress => Predictions::Scores(scores),
            Task::Speaker => Predictions::Embeddings(embeddings),
        })
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<EvalReport> {
        let mut report = EvalReport {
            task: Some(self.config.task),
            examples: examples.len(),
            ..EvalReport::default()
        };
        match self.predict(examples)? {
            Predictions::Classes(p) => {
                let y: Vec<usize> = examples.iter().map(|e| class_label(e, self.classes)).collect::<Result<_>>()?;
                let Classification { wa, ua } = metrics::classification(&p, &y)?;
                report.wa = Some(wa);
                report.ua = Some(ua);
            }
            Predictions::Scores(p) => {
                let y: Vec<f64> = examples.iter().map(|e| e.label.unwrap_or(0.0)).collect();
                let Regression { mae, corr } = metrics::regression(&p, &y)?;
                report.mae = Some(mae);
                report.corr = Some(corr);
            }
            Predictions::Embeddings(emb) => {
                let y: Vec<usize> = examples.iter().map(|e| class_label(e, self.classes)).collect::<Result<_>>()?;
                let trials = metrics::trials(&y, self.config.trial_cap, self.config.seed);
                let scores: Vec<f64> = trials.iter().map(|&(i, j, _)| metrics::cosine(&emb[i], &emb[j])).collect();
                let same: Vec<bool> = trials.iter().map(|t| t.2).collect();
                report.eer = Some(metrics::eer(&scores, &same)?);
                report.trials = Some(trials.len());
            }
        }
        Ok(report)
    }

    /// Train for the configured epochs, writing `finetune.dmc`,
    /// `metrics.jsonl` and `config.json` when an output directory is set.
    /// Returns the test-split report after the last epoch.
    pub fn run(&mut self) -> Result<EvalReport> {
        let mut lines = String::new();
        while self.epoch < self.config.epochs {
            let loss = self.train_epoch()?;
            lines.push_str(&json!({"epoch": self.epoch, "loss": loss}).to_string());
            lines.push('\n');
        }
        let report = if self.test.is_empty() {
            EvalReport::default()
        } else {
            self.evaluate(&self.test)?
        };
        if let Some(dir) = &self.config.out_dir {
            fs::create_dir_all(dir).with_path(dir)?;
            self.params.save(&dir.join("finetune.dmc"))?;
            let m = dir.join("metrics.jsonl");
            fs::write(&m, lines).with_path(&m)?;
            let r = dir.join("results.json");
            let body = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
            fs::write(&r, body + "\n").with_path(&r)?;
            let c = dir.join("config.json");
            let body = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Config(e.to_string()))?;
            fs::write(&c, body + "\n").with_path(&c)?;
        }
        Ok(report)
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
