use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::config::{Mode, TrainConfig};
use super::optim::{clip_global_norm, lr_schedule, Adam};
use crate::autograd::Var;
use crate::corpus::{Corpus, Example, PAIRED, UNPAIRED_AUDIO, UNPAIRED_TEXT};
use crate::error::{Error, IoContext, Result};
use crate::idp::{IdpSources, PseudoParallelStore, Translator};
use crate::model::{GroupSet, Modality, ParamGroup, ParamStore, Session, TextInput};
use crate::objectives::{
    cross_audio_loss, cross_text_loss, denoise_audio_batch, denoise_text_batch, imitated_audio_memory,
    imitated_text_memory, intra_audio_loss, intra_text_loss, masked_audio_batch, masked_text_batch, AudioBatch,
    Component, LossBundle, NoiseKey, TextBatch,
};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

const METRICS: &str = "metrics.jsonl";
const TIMING: &str = "timing.jsonl";

// Shuffle stream tags.
const SHUFFLE_WARM: u64 = 0;
const SHUFFLE_IDAE_TEXT: u64 = 1;
const SHUFFLE_IDAE_AUDIO: u64 = 2;
const SHUFFLE_CDAE_TEXT: u64 = 3;
const SHUFFLE_CDAE_AUDIO: u64 = 4;
const SHUFFLE_CDAE_PAIRED: u64 = 5;

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.dmc"))
}

fn sibling(checkpoint: &Path, suffix: &str) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    checkpoint.with_file_name(format!("{stem}.{suffix}"))
}

/// Translation store written next to a checkpoint.
pub fn store_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, "dms")
}

fn optim_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, "optim.dmc")
}

fn state_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, "state.json")
}

/// Counters saved with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    /// Completed main-stage epochs; 0 means warm-up and initialization done.
    pub epoch: usize,
    pub seed: u64,
    pub mode: Mode,
    pub warm_steps: u64,
    pub main_steps: u64,
    pub optimizer_steps: u64,
    pub param_steps: BTreeMap<String, u64>,
    pub store_iteration: Option<u32>,
}

/// Mean loss components of one pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PassSummary {
    pub steps: usize,
    /// Component key → mean over the steps that computed it.
    pub losses: BTreeMap<&'static str, f64>,
    /// Mean over steps of the per-step total.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub k: usize,
    pub idae: Option<PassSummary>,
    pub cdae: PassSummary,
    /// Cross-encoder fingerprint before and after the IDAE pass.
    pub cross_fingerprint: Option<(u64, u64)>,
}

impl EpochSummary {
    /// Mean per-step total across both passes.
    pub fn total(&self) -> f64 {
        let idae = self.idae.as_ref();
        let steps = idae.map_or(0, |p| p.steps) + self.cdae.steps;
        let sum = idae.map_or(0.0, |p| p.total * p.steps as f64) + self.cdae.total * self.cdae.steps as f64;
        if steps == 0 {
            0.0
        } else {
            sum / steps as f64
        }
    }
}

enum Branch {
    IntraText(TextBatch),
    IntraAudio(AudioBatch),
    CrossText(Component, TextBatch, Vec<Tensor<f32>>),
    CrossAudio(Component, AudioBatch, Vec<TextInput>),
}

impl Branch {
    fn component(&self) -> Component {
        match self {
            Branch::IntraText(_) => Component::IdaeText,
            Branch::IntraAudio(_) => Component::IdaeAudio,
            Branch::CrossText(c, ..) | Branch::CrossAudio(c, ..) => *c,
        }
    }

    fn selected(&self) -> usize {
        match self {
            Branch::IntraText(b) | Branch::CrossText(_, b, _) => b.selected(),
            Branch::IntraAudio(b) | Branch::CrossAudio(_, b, _) => b.selected(),
        }
    }

    fn loss(&self, sess: &mut Session) -> Result<Var> {
        match self {
            Branch::IntraText(b) => intra_text_loss(sess, b),
            Branch::IntraAudio(b) => intra_audio_loss(sess, b),
            Branch::CrossText(_, b, mem) => {
                let refs: Vec<&Tensor<f32>> = mem.iter().collect();
                cross_text_loss(sess, b, &refs)
            }
            Branch::CrossAudio(_, b, mem) => cross_audio_loss(sess, b, mem),
        }
    }
}

struct StepResult {
    losses: LossBundle,
    grad_norm: f64,
}

/// Proportional slice `i` of `steps` over `order`.
fn chunk(order: &[usize], steps: usize, i: usize) -> &[usize] {
    let n = order.len();
    &order[i * n / steps..(i + 1) * n / steps]
}

fn steps_for(sizes: &[usize], batch: usize) -> usize {
    sizes.iter().map(|&n| n.div_ceil(batch)).max().unwrap_or(0)
}

fn pass_summary(records: &[LossBundle]) -> PassSummary {
    let mut sums: BTreeMap<Component, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for r in records {
        for (&c, &v) in &r.values {
            let e = sums.entry(c).or_default();
            e.0 += v;
            e.1 += 1;
        }
        total += r.values.values().sum::<f64>();
    }
    PassSummary {
        steps: records.len(),
        losses: sums.into_iter().map(|(c, (s, n))| (c.key(), s / n as f64)).collect(),
        total: if records.is_empty() { 0.0 } else { total / records.len() as f64 },
    }
}

struct RunDir {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl RunDir {
    fn open(dir: &Path, keep_through: Option<usize>) -> Result<Self> {
        fs::create_dir_all(dir).with_path(dir)?;
        let metrics_path = dir.join(METRICS);
        if let Some(epoch) = keep_through {
            // Drop records written after the checkpoint being resumed.
            let content = fs::read_to_string(&metrics_path).unwrap_or_default();
            let kept: String = content
                .lines()
                .filter(|l| {
                    serde_json::from_str::<Value>(l)
                        .ok()
                        .and_then(|v| v.get("k").and_then(Value::as_u64))
                        .is_some_and(|k| k as usize <= epoch)
                })
                .map(|l| format!("{l}\n"))
                .collect();
            fs::write(&metrics_path, kept).with_path(&metrics_path)?;
        }
        let open = |path: PathBuf, append: bool| -> Result<BufWriter<File>> {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .with_path(&path)?;
            Ok(BufWriter::new(f))
        };
        let append = keep_through.is_some();
        Ok(Self {
            metrics: open(metrics_path, append)?,
            timing: open(dir.join(TIMING), append)?,
            dir: dir.to_path_buf(),
        })
    }

    fn line(w: &mut BufWriter<File>, path: &Path, v: &Value) -> Result<()> {
        writeln!(w, "{v}").with_path(path)
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().with_path(&self.dir.join(METRICS))?;
        self.timing.flush().with_path(&self.dir.join(TIMING))
    }
}

/// Warm-up followed by K epochs of IDAE → CDAE → translation refresh.
pub struct Trainer {
    pub config: TrainConfig,
    paired: Vec<Example>,
    unpaired_text: Vec<Example>,
    unpaired_audio: Vec<Example>,
    regular: Range<usize>,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub store: Option<PseudoParallelStore>,
    epoch: usize,
    warm_done: bool,
    warm_step: u64,
    main_step: u64,
    pub history: Vec<EpochSummary>,
    pub warm_history: Vec<PassSummary>,
    run_dir: Option<RunDir>,
}

impl Trainer {
    /// Fresh run with parameters initialized from the seed.
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        let params = ParamStore::init(&config.model, config.seed)?;
        let mut t = Self::with_params(config, corpus, params)?;
        if let Some(dir) = t.config.out_dir.clone() {
            t.run_dir = Some(RunDir::open(&dir, None)?);
            let snapshot = serde_json::to_string_pretty(&t.config).map_err(|e| Error::Config(e.to_string()))?;
            let path = dir.join("config.json");
            fs::write(&path, snapshot + "\n").with_path(&path)?;
        }
        Ok(t)
    }

    fn with_params(config: TrainConfig, corpus: &Corpus, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_config(&config.model)?;
        let vocab = corpus.vocab();
        if vocab.len() > config.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary has {} entries but model.vocab_size is {}",
                vocab.len(),
                config.model.vocab_size
            )));
        }
        let take = |name: &str, wanted: bool| -> Result<Vec<Example>> {
            if !wanted {
                return Ok(Vec::new());
            }
            let split = corpus.split(name)?.to_vec();
            for ex in &split {
                if let Some(t) = &ex.text {
                    if t.is_empty() || t.len() > config.model.max_text_len {
                        return Err(Error::Config(format!(
                            "{name} example {} has {} tokens; model.max_text_len is {}",
                            ex.id,
                            t.len(),
                            config.model.max_text_len
                        )));
                    }
                }
                if let Some(a) = &ex.audio {
                    if a.rows() == 0 || a.rows() > config.model.max_audio_len {
                        return Err(Error::Config(format!(
                            "{name} example {} has {} frames; model.max_audio_len is {}",
                            ex.id,
                            a.rows(),
                            config.model.max_audio_len
                        )));
                    }
                }
            }
            Ok(split)
        };
        let mode = config.mode;
        let paired = take(PAIRED, mode.uses_paired())?;
        let unpaired_text = take(UNPAIRED_TEXT, mode.uses_unpaired())?;
        let unpaired_audio = take(UNPAIRED_AUDIO, mode.uses_unpaired())?;
        if mode.uses_paired() && paired.is_empty() {
            return Err(Error::Config(format!("mode {mode:?} needs a nonempty paired split")));
        }
        for ex in &paired {
            ex.text()?;
            ex.audio()?;
        }
        for ex in &unpaired_text {
            ex.text()?;
        }
        for ex in &unpaired_audio {
            ex.audio()?;
        }
        Ok(Self {
            regular: vocab.regular_ids(),
            config,
            paired,
            unpaired_text,
            unpaired_audio,
            params,
            optimizer: Adam::new(),
            store: None,
            epoch: 0,
            warm_done: false,
            warm_step: 0,
            main_step: 0,
            history: Vec::new(),
            warm_history: Vec::new(),
            run_dir: None,
        })
    }

    /// Continue from a checkpoint written by an earlier run. The store
    /// defaults to the file next to the checkpoint.
    pub fn resume(config: TrainConfig, corpus: &Corpus, checkpoint: &Path, store: Option<&Path>) -> Result<Self> {
        let params = ParamStore::load(checkpoint)?;
        let spath = state_path(checkpoint);
        let text = fs::read_to_string(&spath).with_path(&spath)?;
        let state: RunState = serde_json::from_str(&text).map_err(|e| Error::format(&spath, e.to_string()))?;
        if state.seed != config.seed || state.mode != config.mode {
            return Err(Error::Config(format!(
                "checkpoint was written with seed {} in mode {:?}; config asks for seed {} in mode {:?}",
                state.seed, state.mode, config.seed, config.mode
            )));
        }
        let mut t = Self::with_params(config, corpus, params)?;
        let moments = ParamStore::load(&optim_path(checkpoint))?;
        t.optimizer = Adam::restore(state.optimizer_steps, &moments, &state.param_steps)?;
        t.store = match state.store_iteration {
            Some(expected) => {
                let path = store.map_or_else(|| store_path(checkpoint), Path::to_path_buf);
                let s = PseudoParallelStore::load(&path)?;
                if s.iteration() != expected {
                    return Err(Error::Pipeline(format!(
                        "checkpoint {} expects translation store iteration {expected} but {} is at iteration {}",
                        checkpoint.display(),
                        path.display(),
                        s.iteration()
                    )));
                }
                Some(s)
            }
            None => None,
        };
        t.epoch = state.epoch;
        t.warm_done = true;
        t.warm_step = state.warm_steps;
        t.main_step = state.main_steps;
        if let Some(dir) = t.config.out_dir.clone() {
            t.run_dir = Some(RunDir::open(&dir, Some(state.epoch))?);
        }
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn warm_steps_per_epoch(&self) -> usize {
        steps_for(&[self.paired.len()], self.config.batch_size)
    }

    pub fn warm_total_steps(&self) -> u64 {
        if self.config.mode.uses_paired() {
            (self.config.warmup_epochs * self.warm_steps_per_epoch()) as u64
        } else {
            0
        }
    }

    fn idae_sizes(&self) -> (usize, usize) {
        (
            self.unpaired_text.len() + self.paired.len(),
            self.unpaired_audio.len() + self.paired.len(),
        )
    }

    pub fn idae_steps_per_epoch(&self) -> usize {
        if !self.config.mode.flags().idae {
            return 0;
        }
        let (t, a) = self.idae_sizes();
        steps_for(&[t, a], self.config.batch_size)
    }

    pub fn cdae_steps_per_epoch(&self) -> usize {
        steps_for(
            &[self.unpaired_text.len(), self.unpaired_audio.len(), self.paired.len()],
            self.config.batch_size,
        )
    }

    pub fn main_total_steps(&self) -> u64 {
        (self.config.epochs * (self.idae_steps_per_epoch() + self.cdae_steps_per_epoch())) as u64
    }

    fn permutation(&self, n: usize, epoch: usize, tag: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.config.seed, Purpose::Shuffle, epoch as u64, tag));
        order
    }

    fn key(&self, epoch: usize) -> NoiseKey {
        NoiseKey {
            seed: self.config.seed,
            epoch: epoch as u64,
        }
    }

    fn update(&mut self, groups: GroupSet, lr: f64, branches: &[Branch]) -> Result<Option<StepResult>> {
        let live: Vec<&Branch> = branches.iter().filter(|b| b.selected() > 0).collect();
        if live.is_empty() {
            return Ok(None);
        }
        let (losses, mut grads) = {
            let mut sess = Session::new(&self.config.model, &self.params, groups);
            let mut losses = LossBundle::default();
            let mut total: Option<Var> = None;
            for b in live {
                let l = b.loss(&mut sess)?;
                let v = f64::from(sess.value(l).item());
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{} is not finite at step {}",
                        b.component().key(),
                        self.optimizer.step + 1
                    )));
                }
                losses.set(b.component(), v);
                total = Some(match total {
                    Some(t) => sess.graph.add(t, l)?,
                    None => l,
                });
            }
            sess.backward(total.expect("at least one branch"))?;
            (losses, sess.gradients())
        };
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        self.optimizer.step(&mut self.params, &grads, lr)?;
        Ok(Some(StepResult { losses, grad_norm }))
    }

    fn log_step(&mut self, phase: &str, k: usize, step: u64, lr: f64, r: &Option<StepResult>) -> Result<()> {
        if !self.config.log_steps {
            return Ok(());
        }
        let Some(dir) = self.run_dir.as_mut() else {
            return Ok(());
        };
        let mut rec = Map::new();
        rec.insert("phase".into(), json!(phase));
        rec.insert("k".into(), json!(k));
        rec.insert("step".into(), json!(step));
        rec.insert("lr".into(), json!(lr));
        match r {
            Some(r) => {
                for (c, v) in &r.losses.values {
                    rec.insert(c.key().into(), json!(v));
                }
                rec.insert("loss.total".into(), json!(r.losses.values.values().sum::<f64>()));
                rec.insert("grad_norm".into(), json!(r.grad_norm));
            }
            None => {
                rec.insert("skipped".into(), json!(true));
            }
        }
        RunDir::line(&mut dir.metrics, &dir.dir.join(METRICS), &Value::Object(rec))
    }

    fn log_record(&mut self, v: Value) -> Result<()> {
        if let Some(dir) = self.run_dir.as_mut() {
            RunDir::line(&mut dir.metrics, &dir.dir.join(METRICS), &v)?;
        }
        Ok(())
    }

    fn log_time(&mut self, phase: &str, k: usize, started: Instant) -> Result<()> {
        if let Some(dir) = self.run_dir.as_mut() {
            let v = json!({"phase": phase, "k": k, "seconds": started.elapsed().as_secs_f64()});
            RunDir::line(&mut dir.timing, &dir.dir.join(TIMING), &v)?;
        }
        Ok(())
    }

    fn main_lr(&self) -> Result<f64> {
        let total = self.main_total_steps();
        lr_schedule(
            self.main_step + 1,
            total,
            self.config.warmup_steps(total),
            self.config.learning_rate,
        )
    }

    /// T epochs of L^warm over the paired split (skipped without paired data).
    pub fn run_warmup(&mut self) -> Result<()> {
        if self.warm_done {
            return Err(Error::Pipeline("warm-up already ran".into()));
        }
        if self.config.mode.uses_paired() {
            let total = self.warm_total_steps();
            let per_epoch = self.warm_steps_per_epoch();
            let cfg = self.config.model.clone();
            for t in 1..=self.config.warmup_epochs {
                let started = Instant::now();
                let order = self.permutation(self.paired.len(), t, SHUFFLE_WARM);
                let mut records = Vec::new();
                for i in 0..per_epoch {
                    let idx = chunk(&order, per_epoch, i);
                    let texts: Vec<&[usize]> = idx.iter().map(|&j| self.paired[j].text()).collect::<Result<_>>()?;
                    let audio: Vec<&Tensor<f32>> =
                        idx.iter().map(|&j| self.paired[j].audio()).collect::<Result<_>>()?;
                    let branches = vec![
                        Branch::CrossText(
                            Component::WarmText,
                            masked_text_batch(&texts, cfg.max_text_len)?,
                            audio.iter().map(|a| (*a).clone()).collect(),
                        ),
                        Branch::CrossAudio(
                            Component::WarmAudio,
                            masked_audio_batch(&audio, cfg.max_audio_len)?,
                            texts.iter().map(|w| TextInput::Ids(w.to_vec())).collect(),
                        ),
                    ];
                    let lr = lr_schedule(self.warm_step + 1, total, self.config.warmup_steps(total), self.config.learning_rate)?;
                    let r = self.update(GroupSet::ALL, lr, &branches)?;
                    self.warm_step += 1;
                    self.log_step("warm", 0, self.warm_step, lr, &r)?;
                    records.extend(r.map(|r| r.losses));
                }
                let summary = pass_summary(&records);
                let mut rec = Map::new();
                rec.insert("phase".into(), json!("warm_epoch"));
                rec.insert("k".into(), json!(0));
                rec.insert("t".into(), json!(t));
                for (key, v) in &summary.losses {
                    rec.insert((*key).into(), json!(v));
                }
                self.log_record(Value::Object(rec))?;
                self.log_time("warm_epoch", t, started)?;
                self.warm_history.push(summary);
            }
        }
        self.warm_done = true;
        Ok(())
    }

    fn sources(&self) -> Result<IdpSources<'_>> {
        Ok(IdpSources {
            unpaired_text: self.unpaired_text.iter().map(|e| Ok((e.id, e.text()?))).collect::<Result<_>>()?,
            unpaired_audio: self.unpaired_audio.iter().map(|e| Ok((e.id, e.audio()?))).collect::<Result<_>>()?,
            paired: self
                .paired
                .iter()
                .map(|e| Ok((e.id, e.text()?, e.audio()?)))
                .collect::<Result<_>>()?,
        })
    }

    fn translator(&self) -> Translator<'_> {
        Translator {
            config: &self.config.model,
            params: &self.params,
            batch: self.config.translate_batch,
        }
    }

    /// w̃₀/ã₀ for every example that needs a translation.
    pub fn init_store(&mut self) -> Result<()> {
        if !self.warm_done {
            return Err(Error::Pipeline("translations initialized before warm-up".into()));
        }
        if self.config.mode == Mode::PairedOnly {
            return Ok(());
        }
        let mut store = PseudoParallelStore::new();
        self.translator().init_translations(&mut store, &self.sources()?)?;
        self.store = Some(store);
        Ok(())
    }

    /// One pass of L^idae over paired and unpaired data; cross encoders frozen.
    pub fn idae_pass(&mut self, k: usize) -> Result<PassSummary> {
        let steps = self.idae_steps_per_epoch();
        let key = self.key(k);
        let text_pool: Vec<&Example> = self.unpaired_text.iter().chain(&self.paired).collect();
        let audio_pool: Vec<&Example> = self.unpaired_audio.iter().chain(&self.paired).collect();
        let t_order = self.permutation(text_pool.len(), k, SHUFFLE_IDAE_TEXT);
        let a_order = self.permutation(audio_pool.len(), k, SHUFFLE_IDAE_AUDIO);
        let mut plans = Vec::with_capacity(steps);
        for i in 0..steps {
            let mut branches = Vec::new();
            let ti = chunk(&t_order, steps, i);
            if !ti.is_empty() {
                let items: Vec<(u64, &[usize])> =
                    ti.iter().map(|&j| Ok((text_pool[j].id, text_pool[j].text()?))).collect::<Result<_>>()?;
                branches.push(Branch::IntraText(denoise_text_batch(
                    &items,
                    &self.config.idae_policy,
                    self.regular.clone(),
                    Purpose::IdaeText,
                    key,
                    self.config.loss_positions,
                )?));
            }
            let ai = chunk(&a_order, steps, i);
            if !ai.is_empty() {
                let items: Vec<(u64, &Tensor<f32>)> =
                    ai.iter().map(|&j| Ok((audio_pool[j].id, audio_pool[j].audio()?))).collect::<Result<_>>()?;
                branches.push(Branch::IntraAudio(denoise_audio_batch(
                    &items,
                    &self.config.idae_policy,
                    Purpose::IdaeAudio,
                    key,
                    self.config.loss_positions,
                )?));
            }
            plans.push(branches);
        }
        self.run_pass("idae", k, GroupSet::intra_modal(), plans)
    }

    fn run_pass(&mut self, phase: &str, k: usize, groups: GroupSet, plans: Vec<Vec<Branch>>) -> Result<PassSummary> {
        let mut records = Vec::new();
        for branches in plans {
            let lr = self.main_lr()?;
            let r = self.update(groups, lr, &branches)?;
            self.main_step += 1;
            self.log_step(phase, k, self.main_step, lr, &r)?;
            records.extend(r.map(|r| r.losses));
        }
        Ok(pass_summary(&records))
    }

    fn stored(&self, id: u64, m: Modality, k: usize) -> Result<Tensor<f32>> {
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| Error::Pipeline("CDAE pass before translations were initialized".into()))?;
        Ok(store.get(id, m, (k - 1) as u32)?.clone())
    }

    /// One pass of L^cdae: unpaired and paired batches interleaved in
    /// proportion to their sizes, all parameters trainable.
    pub fn cdae_pass(&mut self, k: usize) -> Result<PassSummary> {
        let steps = self.cdae_steps_per_epoch();
        let key = self.key(k);
        let policy = self.config.cdae_policy;
        let positions = self.config.loss_positions;
        let ut_order = self.permutation(self.unpaired_text.len(), k, SHUFFLE_CDAE_TEXT);
        let ua_order = self.permutation(self.unpaired_audio.len(), k, SHUFFLE_CDAE_AUDIO);
        let p_order = self.permutation(self.paired.len(), k, SHUFFLE_CDAE_PAIRED);
        let mut plans = Vec::with_capacity(steps);
        for i in 0..steps {
            let mut branches = Vec::new();
            let ut = chunk(&ut_order, steps, i);
            if !ut.is_empty() {
                let exs: Vec<&Example> = ut.iter().map(|&j| &self.unpaired_text[j]).collect();
                let items: Vec<(u64, &[usize])> = exs.iter().map(|e| Ok((e.id, e.text()?))).collect::<Result<_>>()?;
                let memory = exs.iter().map(|e| self.stored(e.id, Modality::Audio, k)).collect::<Result<_>>()?;
                let batch = denoise_text_batch(&items, &policy, self.regular.clone(), Purpose::CdaeText, key, positions)?;
                branches.push(Branch::CrossText(Component::CdaeUnpairedText, batch, memory));
            }
            let ua = chunk(&ua_order, steps, i);
            if !ua.is_empty() {
                let exs: Vec<&Example> = ua.iter().map(|&j| &self.unpaired_audio[j]).collect();
                let items: Vec<(u64, &Tensor<f32>)> =
                    exs.iter().map(|e| Ok((e.id, e.audio()?))).collect::<Result<_>>()?;
                let memory = exs
                    .iter()
                    .map(|e| self.stored(e.id, Modality::Text, k).map(TextInput::Soft))
                    .collect::<Result<_>>()?;
                let batch = denoise_audio_batch(&items, &policy, Purpose::CdaeAudio, key, positions)?;
                branches.push(Branch::CrossAudio(Component::CdaeUnpairedAudio, batch, memory));
            }
            let p = chunk(&p_order, steps, i);
            if !p.is_empty() {
                let exs: Vec<&Example> = p.iter().map(|&j| &self.paired[j]).collect();
                let texts: Vec<(u64, &[usize])> = exs.iter().map(|e| Ok((e.id, e.text()?))).collect::<Result<_>>()?;
                let audio: Vec<(u64, &Tensor<f32>)> =
                    exs.iter().map(|e| Ok((e.id, e.audio()?))).collect::<Result<_>>()?;
                let (audio_memory, text_memory) = if self.config.mode == Mode::PairedOnly {
                    (
                        audio.iter().map(|(_, a)| (*a).clone()).collect(),
                        texts.iter().map(|(_, w)| TextInput::Ids(w.to_vec())).collect(),
                    )
                } else {
                    let a_tr: Vec<Tensor<f32>> =
                        exs.iter().map(|e| self.stored(e.id, Modality::Audio, k)).collect::<Result<_>>()?;
                    let w_tr: Vec<Tensor<f32>> =
                        exs.iter().map(|e| self.stored(e.id, Modality::Text, k)).collect::<Result<_>>()?;
                    let a_items: Vec<(u64, &Tensor<f32>, &Tensor<f32>)> =
                        audio.iter().zip(&a_tr).map(|(&(id, a), tr)| (id, a, tr)).collect();
                    let w_items: Vec<(u64, &[usize], &Tensor<f32>)> =
                        texts.iter().zip(&w_tr).map(|(&(id, w), tr)| (id, w, tr)).collect();
                    (
                        imitated_audio_memory(
                            &a_items,
                            self.config.imitate_prob,
                            (policy.segment_min, policy.segment_max),
                            key,
                        )?,
                        imitated_text_memory(&w_items, self.config.imitate_prob, key)?,
                    )
                };
                let tb = denoise_text_batch(&texts, &policy, self.regular.clone(), Purpose::CdaeText, key, positions)?;
                branches.push(Branch::CrossText(Component::CdaePairedText, tb, audio_memory));
                let ab = denoise_audio_batch(&audio, &policy, Purpose::CdaeAudio, key, positions)?;
                branches.push(Branch::CrossAudio(Component::CdaePairedAudio, ab, text_memory));
            }
            plans.push(branches);
        }
        self.run_pass("cdae", k, GroupSet::ALL, plans)
    }

    /// Gradient-free translation update closing epoch `k`.
    pub fn refresh(&mut self) -> Result<()> {
        let Some(mut store) = self.store.take() else {
            return Ok(());
        };
        let result = {
            let sources = self.sources()?;
            let tr = self.translator();
            if self.config.mode == Mode::NoIdp {
                tr.regenerate_translations(&mut store, &sources)
            } else {
                tr.refresh_translations(&mut store, &sources)
            }
        };
        self.store = Some(store);
        result
    }

    /// IDAE → CDAE → refresh for the next epoch, then checkpoint.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        if !self.warm_done {
            return Err(Error::Pipeline("main stage started before warm-up".into()));
        }
        if self.epoch >= self.config.epochs {
            return Err(Error::Pipeline(format!("all {} epochs already ran", self.config.epochs)));
        }
        if self.config.mode != Mode::PairedOnly {
            let at = self.store.as_ref().map(PseudoParallelStore::iteration);
            if at != Some(self.epoch as u32) {
                return Err(Error::Pipeline(format!(
                    "epoch {} needs translations at iteration {} but the store is at {at:?}",
                    self.epoch + 1,
                    self.epoch
                )));
            }
        }
        let k = self.epoch + 1;
        let started = Instant::now();
        let cross = GroupSet::only(&[ParamGroup::CrossText, ParamGroup::CrossAudio]);
        let (idae, cross_fingerprint) = if self.config.mode.flags().idae {
            let before = self.params.fingerprint(cross);
            let s = self.idae_pass(k)?;
            let after = self.params.fingerprint(cross);
            if before != after {
                return Err(Error::Pipeline(format!("IDAE pass of epoch {k} modified cross-encoder parameters")));
            }
            (Some(s), Some((before, after)))
        } else {
            (None, None)
        };
        let cdae = self.cdae_pass(k)?;
        self.refresh()?;
        self.epoch = k;
        let summary = EpochSummary {
            k,
            idae,
            cdae,
            cross_fingerprint,
        };
        let mut rec = Map::new();
        rec.insert("phase".into(), json!("epoch"));
        rec.insert("k".into(), json!(k));
        for pass in summary.idae.iter().chain([&summary.cdae]) {
            for (key, v) in &pass.losses {
                rec.insert((*key).into(), json!(v));
            }
        }
        rec.insert("loss.total".into(), json!(summary.total()));
        rec.insert("step".into(), json!(self.main_step));
        if let Some((b, a)) = cross_fingerprint {
            rec.insert("cross_fingerprint_before_idae".into(), json!(format!("{b:016x}")));
            rec.insert("cross_fingerprint_after_idae".into(), json!(format!("{a:016x}")));
        }
        if let Some(s) = &self.store {
            rec.insert("store_iteration".into(), json!(s.iteration()));
        }
        self.log_record(Value::Object(rec))?;
        self.log_time("epoch", k, started)?;
        if k % self.config.checkpoint_every == 0 || k == self.config.epochs {
            self.checkpoint()?;
        }
        self.history.push(summary.clone());
        Ok(summary)
    }

    pub fn state(&self) -> RunState {
        RunState {
            epoch: self.epoch,
            seed: self.config.seed,
            mode: self.config.mode,
            warm_steps: self.warm_step,
            main_steps: self.main_step,
            optimizer_steps: self.optimizer.step,
            param_steps: self.optimizer.param_step_counts(),
            store_iteration: self.store.as_ref().map(PseudoParallelStore::iteration),
        }
    }

    /// Write parameters, optimizer moments, counters and store for the
    /// current epoch. No-op without a run directory.
    pub fn checkpoint(&mut self) -> Result<Option<PathBuf>> {
        let Some(dir) = self.run_dir.as_mut() else {
            return Ok(None);
        };
        dir.flush()?;
        let path = checkpoint_path(&dir.dir, self.epoch);
        self.params.save(&path)?;
        self.optimizer.moments_store().save(&optim_path(&path))?;
        if let Some(s) = &self.store {
            s.save(&store_path(&path))?;
        }
        let state = serde_json::to_string_pretty(&self.state()).map_err(|e| Error::Config(e.to_string()))?;
        crate::binio::write_atomic(&state_path(&path), format!("{state}\n").as_bytes())?;
        Ok(Some(path))
    }

    /// Everything left to do: warm-up and initialization (unless resumed),
    /// the remaining epochs, and `final.dmc`.
    pub fn run(&mut self) -> Result<()> {
        if !self.warm_done {
            let started = Instant::now();
            self.run_warmup()?;
            self.init_store()?;
            self.log_time("warmup", 0, started)?;
            self.checkpoint()?;
        }
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        if let Some(dir) = self.run_dir.as_mut() {
            dir.flush()?;
            let path = dir.dir.join("final.dmc");
            self.params.save(&path)?;
        }
        Ok(())
    }
}
