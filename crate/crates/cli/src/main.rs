//! `duomodal`: synthetic corpora, featurization, pre-training, fine-tuning,
//! evaluation and inspection tools.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 non-finite values during training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use duomodal::audio::{featurize_wav, write_dmf};
use duomodal::config;
use duomodal::corpus::{Corpus, OracleTruth};
use duomodal::corruption::{corrupt_audio, corrupt_text, CorruptionPolicy};
use duomodal::finetune::{FinetuneConfig, Finetuner};
use duomodal::idp::PseudoParallelStore;
use duomodal::model::{GroupSet, Modality, ParamGroup, ParamStore};
use duomodal::rng::{stream, Purpose};
use duomodal::synth::{audio_fidelity, decoding_accuracy, generate, nearest_tokens, SynthSpec};
use duomodal::train::{store_path, TrainConfig, Trainer};
use duomodal::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "duomodal", version, about = "Dual cross-modal text/audio pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.d=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load<T: serde::de::DeserializeOwned + Serialize + Default>(&self) -> Result<T> {
        config::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a generator spec.
    SynthGen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Featurize a 16 kHz WAV file (or every `.wav` in a directory) to DMF1.
    Featurize {
        input: PathBuf,
        /// Output file, or directory when the input is a directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm-up plus IDAE/CDAE pre-training with iterative translation refresh.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Translation store to resume with (default: next to the checkpoint).
        #[arg(long, requires = "resume")]
        store: Option<PathBuf>,
    },
    /// Fine-tune a downstream head and report test metrics.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a fine-tuned checkpoint on a corpus split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "finetune_test")]
        split: String,
    },
    /// Show the stored translations of one example.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Translation store (default: next to the checkpoint).
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        id: u64,
    },
    /// Write the corruption decisions for a split as JSONL.
    CorruptDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a DMC1 checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Idae,
    Cdae,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DumpConfig {
    corpus: PathBuf,
    split: String,
    modality: Modality,
    /// Starting policy; keys in `policy` override individual fields.
    preset: Preset,
    policy: serde_json::Map<String, Value>,
    seed: u64,
    repeats: u64,
}

impl Default for DumpConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            split: "paired".into(),
            modality: Modality::Text,
            preset: Preset::Idae,
            policy: serde_json::Map::new(),
            seed: 0,
            repeats: 1,
        }
    }
}

impl DumpConfig {
    fn effective_policy(&self) -> Result<CorruptionPolicy> {
        let base = match self.preset {
            Preset::Idae => CorruptionPolicy::idae(),
            Preset::Cdae => CorruptionPolicy::cdae(),
        };
        let mut v = serde_json::to_value(base).expect("policy serializes");
        let fields = v.as_object_mut().expect("policy is an object");
        fields.extend(self.policy.clone());
        let policy: CorruptionPolicy = serde_json::from_value(v).map_err(|e| Error::Config(format!("policy: {e}")))?;
        policy.validate()?;
        Ok(policy)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn write_snapshot<T: Serialize>(path: &Path, cfg: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, config::snapshot(cfg)?).map_err(|e| Error::io(path.display().to_string(), e))
}

fn emit(v: &Value) {
    println!("{v}");
}

fn synth_gen(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let spec: SynthSpec = cfg.load()?;
    let manifest = generate(&spec, out)?;
    write_snapshot(&out.join("effective_config.json"), &spec)?;
    let splits: serde_json::Map<String, Value> =
        manifest.splits.iter().map(|(k, v)| (k.clone(), json!(v.ids.len()))).collect();
    emit(&json!({"corpus": out, "splits": splits}));
    Ok(())
}

fn featurize(input: &Path, out: &Path) -> Result<()> {
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        let mut wavs: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        wavs.sort();
        fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        wavs.into_iter()
            .map(|p| {
                let name = p.with_extension("dmf").file_name().map(PathBuf::from).unwrap_or_default();
                (p, out.join(name))
            })
            .collect()
    } else {
        vec![(input.to_path_buf(), out.to_path_buf())]
    };
    for (src, dst) in jobs {
        let features = featurize_wav(&src)?;
        write_dmf(&dst, features.frames())?;
        emit(&json!({"input": src, "output": dst, "frames": features.num_frames()}));
    }
    Ok(())
}

fn pretrain(cfg: &ConfigArgs, resume: Option<&Path>, store: Option<&Path>) -> Result<()> {
    let config: TrainConfig = cfg.load()?;
    if config.out_dir.is_none() {
        return Err(Error::Config("pretrain needs out_dir (e.g. --set out_dir=runs/a)".into()));
    }
    let corpus = Corpus::load(&config.corpus)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(config, &corpus, ckpt, store)?,
        None => Trainer::new(config, &corpus)?,
    };
    trainer.run()?;
    let last = trainer.history.last().map(|s| s.total());
    emit(&json!({
        "out_dir": trainer.config.out_dir,
        "epoch": trainer.epoch(),
        "final_loss": last,
        "store_iteration": trainer.store.as_ref().map(PseudoParallelStore::iteration),
    }));
    Ok(())
}

fn finetune(cfg: &ConfigArgs) -> Result<()> {
    let config: FinetuneConfig = cfg.load()?;
    let corpus = Corpus::load(&config.corpus)?;
    let report = Finetuner::new(config, &corpus)?.run()?;
    emit(&serde_json::to_value(report).expect("report serializes"));
    Ok(())
}

fn evaluate(cfg: &ConfigArgs, checkpoint: &Path, split: &str) -> Result<()> {
    let config: FinetuneConfig = cfg.load()?;
    let corpus = Corpus::load(&config.corpus)?;
    let out_dir = config.out_dir.clone();
    let f = Finetuner::from_finetuned(config, &corpus, checkpoint)?;
    let report = f.evaluate(corpus.split(split)?)?;
    if let Some(dir) = out_dir {
        write_snapshot(&dir.join("evaluate_config.json"), &f.config)?;
        write_snapshot(&dir.join(format!("evaluate_{split}.json")), &report)?;
    }
    emit(&serde_json::to_value(report).expect("report serializes"));
    Ok(())
}

fn summary(t: &Tensor<f32>) -> Value {
    let n = t.len().max(1) as f64;
    let mean = t.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = t.data().iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    let min = t.data().iter().copied().fold(f32::INFINITY, f32::min);
    let max = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    json!({"rows": t.rows(), "cols": t.cols(), "mean": mean, "std": var.sqrt(), "min": min, "max": max})
}

fn translate(checkpoint: &Path, store: Option<&Path>, corpus_dir: &Path, id: u64) -> Result<()> {
    let params = ParamStore::load(checkpoint)?;
    let store_file = store.map_or_else(|| store_path(checkpoint), Path::to_path_buf);
    let store = PseudoParallelStore::load(&store_file)?;
    let corpus = Corpus::load(corpus_dir)?;
    let truth = OracleTruth::load(corpus_dir, &corpus.manifest)?;
    let table = params
        .get("embed.text.token")
        .ok_or_else(|| Error::Mismatch("checkpoint has no embed.text.token".into()))?;
    let mut out = json!({"id": id, "iteration": store.iteration()});
    let mut found = false;
    if let Ok(w) = store.peek(id, Modality::Text) {
        found = true;
        if w.cols() != table.cols() {
            return Err(Error::Mismatch(format!(
                "text translation width {} differs from embedding width {}",
                w.cols(),
                table.cols()
            )));
        }
        let decoded = corpus.vocab().decode(&nearest_tokens(w, table));
        let mut text = json!({"rows": w.rows(), "decoded": decoded});
        if let Some(t) = truth.unpaired_audio_text.get(&id) {
            text["truth"] = json!(corpus.vocab().decode(t));
            text["accuracy"] = json!(decoding_accuracy(w, t, table));
        }
        out["text"] = text;
    }
    if let Ok(a) = store.peek(id, Modality::Audio) {
        found = true;
        let mut audio = summary(a);
        if let Some(t) = truth.unpaired_text_audio.get(&id) {
            audio["l1_to_truth"] = json!(audio_fidelity([(a, t)])?);
        }
        out["audio"] = audio;
    }
    if !found {
        return Err(Error::Mismatch(format!("store {} has no entry for id {id}", store_file.display())));
    }
    emit(&out);
    Ok(())
}

fn corrupt_dump(cfg: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let dump: DumpConfig = cfg.load()?;
    let policy = dump.effective_policy()?;
    let corpus = Corpus::load(&dump.corpus)?;
    let regular = corpus.vocab().regular_ids();
    let mut lines = String::new();
    for r in 0..dump.repeats {
        for ex in corpus.split(&dump.split)? {
            let mut rng = stream(dump.seed, Purpose::Dump, r, ex.id);
            let rec = match dump.modality {
                Modality::Text => {
                    let ids = ex.text()?;
                    let (_, rec) = corrupt_text(ids, &policy, regular.clone(), &mut rng);
                    json!({
                        "id": ex.id,
                        "repeat": r,
                        "len": ids.len(),
                        "selected": rec.spans.iter().map(|s| s.start).collect::<Vec<_>>(),
                        "actions": rec.spans.iter().map(|s| s.action).collect::<Vec<_>>(),
                    })
                }
                Modality::Audio => {
                    let a = ex.audio()?;
                    let (_, rec) = corrupt_audio(a, &policy, &mut rng)?;
                    json!({"id": ex.id, "repeat": r, "len": a.rows(), "spans": rec.spans})
                }
            };
            lines.push_str(&rec.to_string());
            lines.push('\n');
        }
    }
    match out {
        Some(path) => {
            fs::write(path, &lines).map_err(|e| Error::io(path.display().to_string(), e))?;
            let mut snap = dump.clone();
            snap.policy = serde_json::to_value(policy)
                .expect("policy serializes")
                .as_object()
                .cloned()
                .unwrap_or_default();
            write_snapshot(&path.with_extension("config.json"), &snap)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(lines.as_bytes()).map_err(|e| Error::io("stdout", e))?;
        }
    }
    Ok(())
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::TextEmbedding => "embed.text",
        ParamGroup::AudioEmbedding => "embed.audio",
        ParamGroup::UniText => "uni.text",
        ParamGroup::UniAudio => "uni.audio",
        ParamGroup::CrossText => "cross.text",
        ParamGroup::CrossAudio => "cross.audio",
        ParamGroup::AudioHead => "head.audio",
        ParamGroup::TaskHead => "task",
    }
}

fn inspect_checkpoint(path: &Path) -> Result<()> {
    let params = ParamStore::load(path)?;
    let mut groups = serde_json::Map::new();
    for g in ParamGroup::ALL {
        let members: Vec<&Tensor<f32>> =
            params.iter().filter(|(n, _)| ParamGroup::of(n) == Some(g)).map(|(_, t)| t).collect();
        if members.is_empty() {
            continue;
        }
        groups.insert(
            group_name(g).into(),
            json!({
                "tensors": members.len(),
                "values": members.iter().map(|t| t.len()).sum::<usize>(),
                "fingerprint": format!("{:016x}", params.fingerprint(GroupSet::only(&[g]))),
            }),
        );
    }
    let tensors: Vec<Value> = params.iter().map(|(n, t)| json!({"name": n, "shape": t.shape()})).collect();
    let mut out = json!({
        "path": path,
        "tensors": params.len(),
        "values": params.num_values(),
        "fingerprint": format!("{:016x}", params.fingerprint(GroupSet::ALL)),
        "groups": groups,
        "params": tensors,
    });
    let state = path.with_extension("state.json");
    if let Ok(text) = fs::read_to_string(&state) {
        out["state"] = serde_json::from_str(&text).map_err(|e| Error::format(&state, e.to_string()))?;
    }
    emit(&out);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen { cfg, out } => synth_gen(&cfg, &out),
        Command::Featurize { input, out } => featurize(&input, &out),
        Command::Pretrain { cfg, resume, store } => pretrain(&cfg, resume.as_deref(), store.as_deref()),
        Command::Finetune { cfg } => finetune(&cfg),
        Command::Evaluate { cfg, checkpoint, split } => evaluate(&cfg, &checkpoint, &split),
        Command::Translate {
            checkpoint,
            store,
            corpus,
            id,
        } => translate(&checkpoint, store.as_deref(), &corpus, id),
        Command::CorruptDump { cfg, out } => corrupt_dump(&cfg, out.as_deref()),
        Command::InspectCheckpoint { path } => inspect_checkpoint(&path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("duomodal: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
