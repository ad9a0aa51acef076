//! Criteria 4 and 5 on the default synthetic corpus: IDP denoising of the
//! audio translations, and the benefit of pre-training for the parity task.

use std::path::{Path, PathBuf};
use std::time::Instant;

use duomodal::corpus::{Corpus, OracleTruth, UNPAIRED_AUDIO};
use duomodal::finetune::{FinetuneConfig, Finetuner};
use duomodal::idp::{IdpSources, PseudoParallelStore, Translator};
use duomodal::model::{Modality, ModelConfig, ParamStore};
use duomodal::synth::{audio_fidelity, decoding_accuracy, generate, SynthSpec};
use duomodal::train::{checkpoint_path, store_path, Mode, TrainConfig, Trainer};

use crate::report::Outcome;

pub const SEEDS: [u64; 3] = [0, 1, 2];
const DECODE_FLOOR: f64 = 0.6;
const CHANCE_MARGIN: f64 = 0.05;

pub struct Data {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
    pub corpus: Corpus,
    pub truth: OracleTruth,
}

impl Data {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().join("corpus");
        generate(&SynthSpec::default(), &root).expect("generate");
        let corpus = Corpus::load(&root).expect("load");
        let truth = OracleTruth::load(&root, &corpus.manifest).expect("oracle");
        Self {
            _dir: dir,
            root,
            corpus,
            truth,
        }
    }

    fn run_dir(&self, name: &str) -> PathBuf {
        self.root.parent().expect("parent").join(name)
    }

    /// Mean L1 of stored audio translations of unpaired text against truth.
    fn audio_score(&self, store: &PseudoParallelStore) -> f64 {
        let pairs: Vec<_> = self
            .truth
            .unpaired_text_audio
            .iter()
            .map(|(&id, t)| (store.peek(id, Modality::Audio).expect("translation"), t))
            .collect();
        audio_fidelity(pairs).expect("fidelity")
    }

    /// Nearest-token decoding accuracy of stored text translations of
    /// unpaired audio.
    fn decode_score(&self, store: &PseudoParallelStore, params: &ParamStore) -> f64 {
        let table = params.get("embed.text.token").expect("token table");
        let accs: Vec<f64> = self
            .truth
            .unpaired_audio_text
            .iter()
            .map(|(&id, t)| decoding_accuracy(store.peek(id, Modality::Text).expect("translation"), t, table))
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    }
}

pub struct SeedRun {
    pub seed: u64,
    pub initial: f64,
    pub idp: f64,
    pub regenerate: f64,
    pub decode: f64,
    pub untrained_decode: f64,
    pub untrained_audio: f64,
    pub checkpoint: PathBuf,
}

fn train(data: &Data, seed: u64, mode: Mode, out: Option<PathBuf>) -> Trainer {
    let config = TrainConfig {
        corpus: data.root.clone(),
        seed,
        mode,
        checkpoint_every: 30,
        out_dir: out,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(config, &data.corpus).expect("trainer");
    t.run().expect("training run");
    t
}

/// Translations of an untrained model, for the chance baselines.
fn untrained(data: &Data, seed: u64) -> (f64, f64) {
    let model = ModelConfig::desk();
    let params = ParamStore::init(&model, seed + 1000).expect("init");
    let text = data.corpus.split(duomodal::corpus::UNPAIRED_TEXT).expect("split");
    let audio = data.corpus.split(UNPAIRED_AUDIO).expect("split");
    let sources = IdpSources {
        unpaired_text: text.iter().map(|e| (e.id, e.text().expect("text"))).collect(),
        unpaired_audio: audio.iter().map(|e| (e.id, e.audio().expect("audio"))).collect(),
        paired: Vec::new(),
    };
    let mut store = PseudoParallelStore::new();
    Translator {
        config: &model,
        params: &params,
        batch: 64,
    }
    .init_translations(&mut store, &sources)
    .expect("translate");
    (data.decode_score(&store, &params), data.audio_score(&store))
}

pub fn pretrain(data: &Data, seed: u64) -> SeedRun {
    let dir = data.run_dir(&format!("full-{seed}"));
    let full = train(data, seed, Mode::Full, Some(dir.clone()));
    let initial_store = PseudoParallelStore::load(&store_path(&checkpoint_path(&dir, 0))).expect("store 0");
    let regen = train(data, seed, Mode::NoIdp, None);
    let final_store = full.store.as_ref().expect("store");
    let (untrained_decode, untrained_audio) = untrained(data, seed);
    SeedRun {
        seed,
        initial: data.audio_score(&initial_store),
        idp: data.audio_score(final_store),
        regenerate: data.audio_score(regen.store.as_ref().expect("store")),
        decode: data.decode_score(final_store, &full.params),
        untrained_decode,
        untrained_audio,
        checkpoint: dir.join("final.dmc"),
    }
}

pub fn idp_trend(runs: &[SeedRun]) -> Outcome {
    let denoised = runs.iter().filter(|r| r.idp < r.initial).count();
    let beats = runs.iter().filter(|r| r.idp < r.regenerate).count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: a0 {:.4} -> aK {:.4}, regenerate {:.4}", r.seed, r.initial, r.idp, r.regenerate))
        .collect();
    Outcome::check(
        denoised == runs.len() && beats * 3 >= runs.len() * 2,
        format!(
            "aK < a0 in {denoised}/{n}, IDP beats regenerate in {beats}/{n} [{}]",
            per_seed.join("; "),
            n = runs.len()
        ),
    )
}

/// Translate-inspection examples: trained decoding recovers most tokens,
/// untrained decoding sits near chance and scores worse on audio.
pub fn decoding(runs: &[SeedRun], vocab: usize) -> Outcome {
    let chance = 2.0 / vocab as f64 + CHANCE_MARGIN;
    let ok = runs
        .iter()
        .all(|r| r.decode > DECODE_FLOOR && r.untrained_decode <= chance && r.untrained_audio > r.idp);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: trained {:.3}, untrained {:.3}, untrained audio L1 {:.4}",
                r.seed, r.decode, r.untrained_decode, r.untrained_audio
            )
        })
        .collect();
    Outcome::check(
        ok,
        format!("decoding > {DECODE_FLOOR} trained, <= {chance:.4} untrained [{}]", per_seed.join("; ")),
    )
}

fn parity_accuracy(data: &Data, seed: u64, checkpoint: Option<&Path>) -> f64 {
    let config = FinetuneConfig {
        corpus: data.root.clone(),
        checkpoint: checkpoint.map(Path::to_path_buf),
        seed,
        ..FinetuneConfig::default()
    };
    let mut f = Finetuner::new(config, &data.corpus).expect("finetuner");
    f.run().expect("fine-tune").wa.expect("accuracy")
}

pub fn pretraining_benefit(data: &Data, runs: &[SeedRun]) -> Outcome {
    let started = Instant::now();
    let mut ok = 0;
    let mut per_seed = Vec::new();
    for r in runs {
        let pre = parity_accuracy(data, r.seed, Some(&r.checkpoint));
        let scratch = parity_accuracy(data, r.seed, None);
        if pre >= 0.9 && scratch < 0.75 {
            ok += 1;
        }
        per_seed.push(format!("seed {}: pretrained {pre:.3}, random init {scratch:.3}", r.seed));
    }
    Outcome::check(
        ok == runs.len(),
        format!(
            "{ok}/{} seeds with pretrained >= 0.9 and random < 0.75 in {:.0}s [{}]",
            runs.len(),
            started.elapsed().as_secs_f64(),
            per_seed.join("; ")
        ),
    )
}
