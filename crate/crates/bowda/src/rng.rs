//! Deterministic random-stream plumbing.
//!
//! Every stochastic component (crop sampling, augmentation, dropout, phantom
//! synthesis, weight init) draws from its own ChaCha stream derived from the
//! master seed and a purpose tag. Streams are independent of each other, so
//! adding or removing one consumer never perturbs the draws seen by another —
//! that property is what makes e.g. "adversarial run with adversarial weight
//! zero" reproduce a plain supervised run step for step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the splitmix64 sequence; the workhorse for seed expansion.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string, used to hash purpose tags into seed space.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent, reproducible stream for `(master, tag)`.
pub fn derive_rng(master: u64, tag: &str) -> ChaCha8Rng {
    let mut state = master ^ fnv1a(tag.as_bytes());
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Derives a stream for per-item work such as phantom sample synthesis.
pub fn derive_rng_indexed(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut state = master ^ fnv1a(tag.as_bytes()) ^ index.wrapping_mul(0xa24b_aed4_963e_e407);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Serialized position of a ChaCha stream: 32-byte seed + 16-byte word pos.
pub const RNG_STATE_LEN: usize = 48;

/// Captures the exact state of a stream so training can resume bit-for-bit.
pub fn save_state(rng: &ChaCha8Rng) -> [u8; RNG_STATE_LEN] {
    let mut out = [0u8; RNG_STATE_LEN];
    out[..32].copy_from_slice(&rng.get_seed());
    out[32..].copy_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

/// Rebuilds a stream captured by [`save_state`].
pub fn load_state(bytes: &[u8; RNG_STATE_LEN]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let mut pos = [0u8; 16];
    pos.copy_from_slice(&bytes[32..]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(u128::from_le_bytes(pos));
    rng
}
