//! One master seed per run, split into independent per-purpose streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named purposes a master seed is split into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Dropout,
    Noise,
    Data,
    Batch,
    Sampling,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Dropout => "dropout",
            Stream::Noise => "noise",
            Stream::Data => "data",
            Stream::Batch => "batch",
            Stream::Sampling => "sampling",
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(master, label, index)`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(splitmix(master ^ h).wrapping_add(index))
}

pub fn stream(master: u64, purpose: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose.tag(), 0))
}

pub fn stream_at(master: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose.tag(), index))
}
