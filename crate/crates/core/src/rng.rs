//! Named random sub-streams derived from one master seed.
//!
//! Each consumer (FPS start, dilation, dropout, shuffling, initialization,
//! augmentation, synthesis) draws from its own stream so that toggling one
//! consumer never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Fps = 1,
    Dilation = 2,
    Dropout = 3,
    Shuffle = 4,
    Init = 5,
    Augment = 6,
    Synth = 7,
    Resample = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a stream tag and any number of path components
/// (epoch, batch element, layer, ...) into a fresh 64-bit seed.
pub fn derive(seed: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &p in path {
        h = splitmix(h ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, stream, path))
}
