//! Seeded random streams. Every random decision draws from a stream keyed by
//! `(seed, purpose, epoch, item)`, so results never depend on call order,
//! batch composition or how many workers prepared the data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    IdaeText = 3,
    IdaeAudio = 4,
    CdaeText = 5,
    CdaeAudio = 6,
    ImitateText = 7,
    ImitateAudio = 8,
    Synth = 9,
    Trials = 10,
    Dump = 11,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, purpose: Purpose, epoch: u64, item: u64) -> u64 {
    [purpose as u64, epoch, item]
        .into_iter()
        .fold(splitmix64(seed), |acc, x| splitmix64(acc ^ splitmix64(x)))
}

pub fn stream(seed: u64, purpose: Purpose, epoch: u64, item: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, purpose, epoch, item))
}
