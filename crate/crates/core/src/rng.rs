//! Counter-based random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by
//! `(seed, domain, path, coordinate)`: the key is derived from `(seed, domain)`,
//! the 64-bit ChaCha stream id is the path index and the coordinate selects a
//! disjoint window of the block counter. Results therefore never depend on the
//! order in which paths are generated or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Words reserved per coordinate window (2^36 `u32` words).
const COORD_WINDOW_BITS: u32 = 36;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the 256-bit ChaCha key for `(seed, domain)`.
fn derive_key(seed: u64, domain: u64) -> [u8; 32] {
    let mut s = seed;
    let a = splitmix64(&mut s);
    let mut state = a ^ domain.wrapping_mul(0xD134_2543_DE82_EF95).rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Independent generator for one `(path, coordinate)` cell of a domain.
pub fn substream(seed: u64, domain: u64, path: u64, coord: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(derive_key(seed, domain));
    rng.set_stream(path);
    rng.set_word_pos(u128::from(coord) << COORD_WINDOW_BITS);
    rng
}
