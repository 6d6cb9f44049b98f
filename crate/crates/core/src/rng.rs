use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for one named stream under a run seed. Distinct
/// streams of the same seed are independent.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate, kept in one place so that no two
/// consumers share a stream by accident.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const SYNTH: u64 = 3;
    pub const INIT: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const TARGET_INIT: u64 = 6;
    pub const PROBE: u64 = 7;
}
