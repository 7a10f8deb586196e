//! Seeded random streams.
//!
//! Every consumer of randomness (client sampling, a client's mini-batch draw,
//! attack noise) gets its own ChaCha8 stream keyed by the run seed plus a
//! small tuple of coordinates. Streams never depend on execution order, so
//! serial and parallel client execution draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ClientSampling = 1,
    LocalTraining = 2,
    AttackNoise = 3,
    Partition = 4,
    Init = 5,
    Synthetic = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream from `seed` and a coordinate tuple.
pub fn stream(seed: u64, purpose: Purpose, coords: &[u64]) -> SimRng {
    let mut key = splitmix64(seed ^ splitmix64(purpose as u64));
    for &c in coords {
        key = splitmix64(key ^ splitmix64(c.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    ChaCha8Rng::seed_from_u64(key)
}
