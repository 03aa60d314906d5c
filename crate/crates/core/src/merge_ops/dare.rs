//! Drop-and-rescale preprocessing with counter-based randomness.
//!
//! The keep/drop decision for an element is a pure function of
//! `(seed, expert name, tensor name, element index)`, so results do not depend
//! on thread count or scheduling.

use rayon::prelude::*;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const PAR_CHUNK: usize = 1 << 16;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream key for one (seed, expert, tensor) triple.
pub fn stream_key(seed: u64, expert: &str, tensor: &str) -> u64 {
    // FNV-1a over a length-delimited encoding, then finalized.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    feed(&seed.to_le_bytes());
    feed(&(expert.len() as u64).to_le_bytes());
    feed(expert.as_bytes());
    feed(&(tensor.len() as u64).to_le_bytes());
    feed(tensor.as_bytes());
    mix64(h)
}

/// Uniform draw in `[0, 1)` for element `index` of a stream.
#[inline]
pub fn uniform(key: u64, index: u64) -> f64 {
    let z = mix64(key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)));
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Drops each entry with probability `drop_p` and rescales survivors by `1/(1-drop_p)`.
pub fn drop_and_rescale(delta: &mut [f64], drop_p: f64, key: u64) {
    if drop_p == 0.0 {
        return;
    }
    let scale = 1.0 / (1.0 - drop_p);
    delta
        .par_chunks_mut(PAR_CHUNK)
        .enumerate()
        .for_each(|(chunk, values)| {
            let offset = (chunk * PAR_CHUNK) as u64;
            for (i, v) in values.iter_mut().enumerate() {
                if uniform(key, offset + i as u64) < drop_p {
                    *v = 0.0;
                } else {
                    *v *= scale;
                }
            }
        });
}
