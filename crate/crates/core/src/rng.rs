//! Seeded, stream-addressable random numbers.
//!
//! Every stream is a ChaCha8 generator keyed by `seed` (expanded with
//! `SeedableRng::seed_from_u64`, i.e. PCG32 key expansion) and positioned on
//! ChaCha stream `stream_id`. ChaCha is counter based, so identical
//! `(seed, stream_id)` pairs give identical sequences on every platform and
//! distinct stream ids never overlap. Normal draws use the ziggurat sampler of
//! `rand_distr::StandardNormal`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

/// Identifier recorded in checkpoint manifests.
pub const RNG_ALGORITHM_ID: &str = "chacha8-seed_from_u64-stream/ziggurat-normal";

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

/// Create the stream addressed by `(seed, stream_id)`.
pub fn seeded_stream(seed: u64, stream_id: u64) -> RngStream {
    RngStream::new(seed, stream_id)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream on the same seed, addressed by hashing `parts`.
    pub fn derive(&self, parts: &[u64]) -> RngStream {
        RngStream::new(self.seed, stream_key(parts))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> alloc::vec::Vec<f64> {
        let mut v = alloc::vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }
}

/// Content-addressed stream id: SplitMix64 finalizer folded over `parts`.
pub fn stream_key(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h = splitmix(h ^ splitmix(p));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Domain tags for derived streams.
pub mod tags {
    pub const WORLD: u64 = 1;
    pub const CLASSIFIER: u64 = 2;
    pub const CLASSIFIER_EVAL: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const GATE: u64 = 6;
    pub const REQUEST: u64 = 7;
    pub const SELFT: u64 = 8;
    pub const EVAL_CELL: u64 = 9;
    pub const SMOOTHNESS: u64 = 10;
    pub const RETENTION_BATCH: u64 = 11;
    pub const TAYLOR: u64 = 12;
    pub const STUDY: u64 = 13;
}
