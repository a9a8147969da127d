//! Deterministic RNG substreams.
//!
//! Every source of randomness in a run is drawn from a stream keyed by
//! `(run seed, round, client, purpose)`. A unit of work always sees the same
//! stream no matter which thread executes it or in what order, which is what
//! makes simulation output independent of `--threads`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating the independent random streams of one round.
pub mod purpose {
    /// Server-side draw of the participating client subset.
    pub const CLIENT_SAMPLING: u64 = 1;
    /// Stochastic rounding of the model broadcast to one client.
    pub const BROADCAST: u64 = 2;
    /// Minibatch selection during one client's local steps.
    pub const LOCAL_BATCHES: u64 = 3;
    /// Stochastic rounding of one client's upload.
    pub const UPLINK: u64 = 4;
    /// Fixed-seed quantizer draws inside the server objective.
    pub const SERVER_OBJECTIVE: u64 = 5;
    /// Model parameter initialization.
    pub const INIT: u64 = 6;
    /// Synthetic data generation and partitioning.
    pub const DATA: u64 = 7;
    /// Quantizer draws during evaluation passes.
    pub const EVAL: u64 = 8;
}

/// Derive an independent ChaCha stream for a structured key.
///
/// Collisions between distinct keys would need a collision in the mixed
/// 256-bit ChaCha key; SplitMix-style finalization over all four words makes
/// that a non-concern at simulation scale.
pub fn substream(seed: u64, round: u64, client: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = 0x243F_6A88_85A3_08D3u64; // arbitrary odd constant
    for (i, part) in [seed, round, client, purpose].iter().enumerate() {
        h = mix(h ^ part.rotate_left(17 * i as u32));
        key[i * 8..(i + 1) * 8].copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
