//! Counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream whose
//! key is derived from `(root seed, domain)` and whose stream id is the
//! primary index (path, draw set, probe batch). A secondary index (shell,
//! atom) selects a disjoint block of the keystream through the word
//! position, so `(seed, domain, index, sub)` always maps to the same
//! numbers regardless of how many other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Words reserved per secondary index (2^32 u32 words per block).
const SUB_BLOCK_SHIFT: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Configuration = 1,
    Rho = 2,
    Probe = 3,
    InitialState = 4,
    Particle = 5,
    Scenario = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key(seed: u64, domain: Domain) -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut state = seed ^ (domain as u64).rotate_left(48);
    for chunk in out.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    out
}

/// Stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(key(seed, domain));
    rng.set_stream(index);
    rng
}

/// Stream for `(seed, domain, index)` positioned at block `sub`.
pub fn substream(seed: u64, domain: Domain, index: u64, sub: u64) -> ChaCha8Rng {
    let mut rng = stream(seed, domain, index);
    seek(&mut rng, sub);
    rng
}

/// Reposition an existing stream at block `sub`.
pub fn seek(rng: &mut ChaCha8Rng, sub: u64) {
    rng.set_word_pos((sub as u128) << SUB_BLOCK_SHIFT);
}
