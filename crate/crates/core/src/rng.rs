//! Counter-based random streams.
//!
//! Every random draw in a run is addressed by `(seed, pass, site, draw)`, so
//! results do not depend on thread count or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a stream is used for; keeps e.g. pool regeneration independent of
/// per-site estimation at the same `(pass, site)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    SiteEstimate,
    RecyclePool,
    Pilot,
    SyntheticData,
    Other(u64),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::SiteEstimate => 1,
            Purpose::RecyclePool => 2,
            Purpose::Pilot => 3,
            Purpose::SyntheticData => 4,
            Purpose::Other(v) => 0x1000 + v,
        }
    }
}

/// Key of one site-level (or pool-level) random computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub pass: u64,
    pub site: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(seed: u64, pass: usize, site: usize, purpose: Purpose) -> Self {
        Self { seed, pass: pass as u64, site: site as u64, purpose }
    }

    fn mixed(&self) -> u64 {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ self.purpose.tag());
        h = splitmix64(h ^ self.pass);
        splitmix64(h ^ self.site)
    }

    /// Independent generator for draw number `draw`.
    pub fn draw_rng(&self, draw: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mixed());
        rng.set_stream(draw);
        rng
    }
}
