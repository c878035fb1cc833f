//! Named sub-streams of the single top-level experiment seed, so each
//! randomized component (partitioning, init, client sampling, batching)
//! can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Partition,
    Init,
    Sampling,
    Batching,
    Data,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Partition => 1,
            Stream::Init => 2,
            Stream::Sampling => 3,
            Stream::Batching => 4,
            Stream::Data => 5,
            Stream::Eval => 6,
        }
    }
}

/// RNG for `(seed, stream, index)`. The index distinguishes e.g. rounds or
/// (round, client) pairs within one stream; pass 0 when there is only one.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream.tag() << 56) ^ index);
    rng
}

/// Plain sub-seed for APIs that take a `u64` seed instead of an RNG.
pub fn sub_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    // splitmix64 over the combined identifier; cheap and well mixed.
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.tag() << 56)
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
