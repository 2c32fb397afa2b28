//! Counter-based random streams.
//!
//! Every draw in a run is addressed by an [`RngKey`] `(seed, step, purpose)`.
//! The key fixes a ChaCha8 block-cipher stream, so the values drawn for a
//! given step do not depend on how that step was reached (drafted, verified
//! or sampled serially) or on how many workers are in use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// What a stream is used for. Distinct tags select distinct cipher streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Noise,
    Verify,
    Init,
    Data,
    Permute,
}

impl Purpose {
    fn stream_id(self) -> u64 {
        match self {
            Purpose::Noise => 1,
            Purpose::Verify => 2,
            Purpose::Init => 3,
            Purpose::Data => 4,
            Purpose::Permute => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey {
    pub seed: u64,
    pub step: u64,
    pub purpose: Purpose,
}

impl RngKey {
    pub fn new(seed: u64, step: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            step,
            purpose,
        }
    }

    /// The cipher stream addressed by this key.
    pub fn stream(&self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.step.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(self.purpose.stream_id());
        rng
    }

    /// Single uniform draw in `[0, 1)`.
    pub fn uniform(&self) -> f64 {
        self.stream().gen::<f64>()
    }
}

/// Mixes a base seed with an index, e.g. to give each sample of a batch
/// its own seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fills `out` with independent standard normals using Box–Muller.
pub fn fill_gaussian<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    let mut chunks = out.chunks_mut(2);
    for pair in &mut chunks {
        // 1 - u lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        pair[0] = r * c;
        if pair.len() > 1 {
            pair[1] = r * s;
        }
    }
}

/// Standard normal `d`-vector; a pure function of `key`.
pub fn keyed_gaussian(key: RngKey, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    fill_gaussian(&mut key.stream(), &mut out);
    out
}
