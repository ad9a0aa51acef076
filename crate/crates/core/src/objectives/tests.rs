use super::*;
use crate::model::{GroupSet, ModelConfig, ParamStore};
use rand::{Rng, SeedableRng};

fn key() -> NoiseKey {
    NoiseKey { seed: 5, epoch: 0 }
}

fn random_ids(n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(3..64)).collect()).collect()
}

fn random_audio(n: usize, len: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::new(&[len, 160], (0..len * 160).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

fn grad_norm(grads: &BTreeMap<String, Tensor<f32>>, prefix: &str) -> f64 {
    grads
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, g)| g.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn empty_selection_is_an_error_not_zero() {
    let c = ModelConfig::desk();
    let p = ParamStore::init(&c, 1).unwrap();
    let ids = random_ids(2, 8, 1);
    let items: Vec<(u64, &[usize])> = ids.iter().enumerate().map(|(i, x)| (i as u64, x.as_slice())).collect();
    let none = CorruptionPolicy {
        select_prob: 0.0,
        ..CorruptionPolicy::idae()
    };
    let batch = denoise_text_batch(&items, &none, 3..64, Purpose::IdaeText, key(), LossPositions::Selected).unwrap();
    assert_eq!(batch.selected(), 0);
    let mut s = Session::new(&c, &p, GroupSet::ALL);
    assert!(matches!(intra_text_loss(&mut s, &batch), Err(Error::Contract(_))));
    assert!(denoise_text_batch(&[], &none, 3..64, Purpose::IdaeText, key(), LossPositions::Selected).is_err());
}

#[test]
fn untrained_masked_cross_entropy_is_near_uniform() {
    let c = ModelConfig::desk();
    let p = ParamStore::init(&c, 2).unwrap();
    let ids = random_ids(32, 16, 2);
    let items: Vec<(u64, &[usize])> = ids.iter().enumerate().map(|(i, x)| (i as u64, x.as_slice())).collect();
    let batch = denoise_text_batch(&items, &CorruptionPolicy::idae(), 3..64, Purpose::IdaeText, key(), LossPositions::Selected)
        .unwrap();
    let mut s = Session::inference(&c, &p);
    let l = intra_text_loss(&mut s, &batch).unwrap();
    let v = f64::from(s.value(l).item());
    assert!((v - 64f64.ln()).abs() < 0.5, "{v}");
}

#[test]
fn warm_text_with_empty_memory_is_near_uniform() {
    let c = ModelConfig::desk();
    let p = ParamStore::init(&c, 3).unwrap();
    let ids = random_ids(8, 10, 3);
    let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    let batch = masked_text_batch(&refs, c.max_text_len).unwrap();
    assert!(batch.lens.iter().zip(&ids).all(|(l, w)| *l == w.len()));
    let silence: Vec<Tensor<f32>> = (0..8).map(|_| Tensor::zeros(&[40, 160])).collect();
    let mem: Vec<&Tensor<f32>> = silence.iter().collect();
    let mut s = Session::inference(&c, &p);
    let l = cross_text_loss(&mut s, &batch, &mem).unwrap();
    let v = f64::from(s.value(l).item());
    assert!((v - 64f64.ln()).abs() < 0.5, "{v}");

    let audio = random_audio(3, 30, 4);
    let arefs: Vec<&Tensor<f32>> = audio.iter().collect();
    let ab = masked_audio_batch(&arefs, c.max_audio_len).unwrap();
    assert_eq!(ab.lens, vec![30; 3]);
    assert!(ab.inputs.iter().all(|a| a.data().iter().all(|&x| x == 0.0)));
    assert!(masked_audio_batch(&[&Tensor::zeros(&[65, 160])], c.max_audio_len).is_err());
}

#[test]
fn gradient_scoping_follows_argument_lists() {
    let c = ModelConfig {
        n_uni_layers: 1,
        n_cross_layers: 1,
        ..ModelConfig::desk()
    };
    let p = ParamStore::init(&c, 4).unwrap();
    let ids = random_ids(4, 12, 5);
    let audio = random_audio(4, 40, 6);
    let titems: Vec<(u64, &[usize])> = ids.iter().enumerate().map(|(i, x)| (i as u64, x.as_slice())).collect();
    let aitems: Vec<(u64, &Tensor<f32>)> = audio.iter().enumerate().map(|(i, x)| (i as u64, x)).collect();
    let policy = CorruptionPolicy {
        select_prob: 0.5,
        ..CorruptionPolicy::idae()
    };
    let tb = denoise_text_batch(&titems, &policy, 3..64, Purpose::IdaeText, key(), LossPositions::Selected).unwrap();
    let ab = denoise_audio_batch(&aitems, &policy, Purpose::IdaeAudio, key(), LossPositions::Selected).unwrap();

    let mut s = Session::new(&c, &p, GroupSet::ALL);
    let lt = intra_text_loss(&mut s, &tb).unwrap();
    let la = intra_audio_loss(&mut s, &ab).unwrap();
    let total = sum_losses(&mut s, &[lt, la]).unwrap();
    s.backward(total).unwrap();
    let g = s.gradients();
    assert_eq!(grad_norm(&g, "cross."), 0.0);
    for prefix in ["uni.text.", "uni.audio.", "embed.text.", "embed.audio.", "head.audio."] {
        assert!(grad_norm(&g, prefix) > 0.0, "{prefix}");
    }

    let mut s = Session::new(&c, &p, GroupSet::ALL);
    let mem: Vec<&Tensor<f32>> = audio.iter().collect();
    let l = cross_text_loss(&mut s, &tb, &mem).unwrap();
    s.backward(l).unwrap();
    let g = s.gradients();
    assert!(grad_norm(&g, "uni.audio.") > 0.0);
    assert!(grad_norm(&g, "cross.text.") > 0.0);
    assert_eq!(grad_norm(&g, "uni.text."), 0.0);
    assert_eq!(grad_norm(&g, "cross.audio."), 0.0);

    let mut s = Session::new(&c, &p, GroupSet::ALL);
    let tmem: Vec<TextInput> = ids.iter().map(|x| TextInput::Ids(x.clone())).collect();
    let l = cross_audio_loss(&mut s, &ab, &tmem).unwrap();
    s.backward(l).unwrap();
    let g = s.gradients();
    assert!(grad_norm(&g, "uni.text.") > 0.0 && grad_norm(&g, "cross.audio.") > 0.0);
    assert_eq!(grad_norm(&g, "uni.audio.") + grad_norm(&g, "cross.text."), 0.0);
}

#[test]
fn imitation_without_replacement_is_clean_memory() {
    let c = ModelConfig::desk();
    let p = ParamStore::init(&c, 5).unwrap();
    let ids = random_ids(2, 6, 7);
    let tr: Vec<Tensor<f32>> = (0..2).map(|_| Tensor::full(&[6, 64], 0.3)).collect();
    let items: Vec<(u64, &[usize], &Tensor<f32>)> =
        ids.iter().zip(&tr).enumerate().map(|(i, (w, t))| (i as u64, w.as_slice(), t)).collect();
    let mem = imitated_text_memory(&items, 0.0, key()).unwrap();
    let mut s = Session::inference(&c, &p);
    let a = s.embed_text(&mem).unwrap();
    let clean: Vec<TextInput> = ids.iter().map(|w| TextInput::Ids(w.clone())).collect();
    let b = s.embed_text(&clean).unwrap();
    assert!(s.value(a).bit_eq(s.value(b)));

    let short = Tensor::full(&[5, 64], 0.3);
    let bad = [(9u64, ids[0].as_slice(), &short)];
    let err = imitated_text_memory(&bad, 0.3, key()).unwrap_err().to_string();
    assert!(err.contains("example 9"), "{err}");
}

#[test]
fn losses_are_deterministic_and_nonnegative() {
    let c = ModelConfig::desk();
    let p = ParamStore::init(&c, 6).unwrap();
    let audio = random_audio(3, 45, 8);
    let items: Vec<(u64, &Tensor<f32>)> = audio.iter().enumerate().map(|(i, x)| (i as u64 + 10, x)).collect();
    let run = || {
        let b = denoise_audio_batch(&items, &CorruptionPolicy::cdae(), Purpose::CdaeAudio, key(), LossPositions::All).unwrap();
        let mut s = Session::inference(&c, &p);
        let l = intra_audio_loss(&mut s, &b).unwrap();
        s.value(l).item()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(a >= 0.0);
}

#[test]
fn bundle_totals() {
    let mut b = LossBundle::default();
    b.set(Component::IdaeText, 1.0);
    b.set(Component::CdaeUnpairedText, 2.0);
    b.set(Component::CdaePairedAudio, 4.0);
    let all = ComponentFlags {
        idae: true,
        cdae_unpaired: true,
        cdae_paired: true,
        warm: true,
    };
    assert_eq!(b.total(&all).unwrap(), 7.0);
    assert_eq!(b.cdae(), 6.0);
    let no_idae = ComponentFlags { idae: false, ..all };
    assert_eq!(b.total(&no_idae).unwrap(), 6.0);
    let no_paired = ComponentFlags {
        cdae_paired: false,
        warm: false,
        ..all
    };
    assert_eq!(b.total(&no_paired).unwrap(), 3.0);
    let none = ComponentFlags {
        idae: false,
        cdae_unpaired: false,
        cdae_paired: false,
        warm: false,
    };
    assert!(b.total(&none).is_err());
}
