use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named RNG streams so independent consumers of one seed never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Encoder = 1,
    Decoder = 2,
    KMeans = 3,
    Pretrain = 4,
    Finetune = 5,
    Vat = 6,
    Subsample = 7,
    Synthetic = 8,
}

/// RNG for `(seed, stream, index)`; `index` separates e.g. restarts or iterations.
pub fn stream(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}
