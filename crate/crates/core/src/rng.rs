//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a [`RngStream`]: a 64-bit seed
//! plus a stream id selecting an independent ChaCha8 keystream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// A child stream keyed by `path`; distinct paths give unrelated streams.
    pub fn child(&self, path: &[u64]) -> RngStream {
        let mut h = splitmix(self.seed ^ 0x9E37_79B9_7F4A_7C15);
        h = splitmix(h ^ self.stream_id);
        for &k in path {
            h = splitmix(h ^ splitmix(k.wrapping_add(0xD1B5_4A32_D192_ED03)));
        }
        RngStream { seed: h, stream_id: self.stream_id }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
