//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 generator whose key is a mix of the master seed
//! and a cell tag and whose 64-bit stream id is the replicate index. Streams
//! for different replicates never overlap, and any replicate can be produced
//! without generating the ones before it, so parallel and serial runs see
//! exactly the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type Stream = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for replicate `index` of the cell tagged `cell` under `seed`.
pub fn stream(seed: u64, cell: u64, index: u64) -> Stream {
    let mut state = seed ^ cell.rotate_left(32) ^ 0xD1B5_4A32_D192_ED03;
    let mut key = [0u8; 32];
    // mix the cell tag twice so (seed, cell) and (cell, seed) differ
    splitmix64(&mut state);
    state ^= cell;
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Combine labels into a single cell tag.
pub fn tag(parts: &[u64]) -> u64 {
    let mut state = 0x243F_6A88_85A3_08D3u64;
    let mut out = 0u64;
    for &p in parts {
        state ^= p;
        out = splitmix64(&mut state);
    }
    out
}
