use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Independent ChaCha stream `stream` under `seed`. Every randomized
/// component draws from its own stream so adding one never perturbs another.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate.
pub mod streams {
    pub const ENCODER: u64 = 1;
    pub const FUSION: u64 = 2;
    pub const DOMAIN_PREDICTOR: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const RFF: u64 = 5;
    pub const DOMAIN_EMBED: u64 = 6;
    pub const SYNTH_STRUCTURE: u64 = 10;
    pub const SYNTH_TRAIN: u64 = 11;
    pub const SYNTH_VAL: u64 = 12;
    pub const SYNTH_TEST: u64 = 13;
    pub const SPHERE: u64 = 20;
    pub const KMEANS: u64 = 21;
}
